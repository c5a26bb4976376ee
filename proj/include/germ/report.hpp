#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace germ {

// Tiny streaming JSON writer for report files. Keys are emitted in call
// order, scalars with 17 significant digits, so identical runs produce
// byte-identical reports.
class JsonWriter {
public:
    void begin_object();
    void end_object();
    void begin_array();
    void end_array();
    void key(const std::string& k);
    void value(const std::string& s);
    void value(const char* s) { value(std::string(s)); }
    void value(double d);
    void value(std::int64_t i);
    void value(std::uint64_t i) { value(static_cast<std::int64_t>(i)); }
    void value(int i) { value(static_cast<std::int64_t>(i)); }
    void value(bool b);
    void null_value();

    const std::string& str() const { return out_; }

    static std::string escape(const std::string& s);
    static std::string format_double(double d);

private:
    void separator();
    std::string out_;
    std::vector<bool> needs_comma_;
    bool pending_key_ = false;
};

}  // namespace germ
