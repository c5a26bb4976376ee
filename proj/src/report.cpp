#include "germ/report.hpp"

#include <cmath>
#include <cstdio>

namespace germ {

void JsonWriter::separator() {
    if (pending_key_) {
        pending_key_ = false;
        return;
    }
    if (!needs_comma_.empty()) {
        if (needs_comma_.back()) out_ += ',';
        needs_comma_.back() = true;
    }
}

void JsonWriter::begin_object() {
    separator();
    out_ += '{';
    needs_comma_.push_back(false);
}

void JsonWriter::end_object() {
    out_ += '}';
    needs_comma_.pop_back();
}

void JsonWriter::begin_array() {
    separator();
    out_ += '[';
    needs_comma_.push_back(false);
}

void JsonWriter::end_array() {
    out_ += ']';
    needs_comma_.pop_back();
}

void JsonWriter::key(const std::string& k) {
    separator();
    out_ += '"';
    out_ += escape(k);
    out_ += "\":";
    pending_key_ = true;
}

void JsonWriter::value(const std::string& s) {
    separator();
    out_ += '"';
    out_ += escape(s);
    out_ += '"';
}

void JsonWriter::value(double d) {
    separator();
    out_ += format_double(d);
}

void JsonWriter::value(std::int64_t i) {
    separator();
    out_ += std::to_string(i);
}

void JsonWriter::value(bool b) {
    separator();
    out_ += b ? "true" : "false";
}

void JsonWriter::null_value() {
    separator();
    out_ += "null";
}

std::string JsonWriter::escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out += c;
                }
        }
    }
    return out;
}

std::string JsonWriter::format_double(double d) {
    if (!std::isfinite(d)) return "null";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", d);
    return buf;
}

}  // namespace germ
