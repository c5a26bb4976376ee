#pragma once

#include <stdexcept>
#include <string>

namespace germ {

// Base class for all domain errors. The CLI maps these to exit code 1 with
// an E_DOMAIN prefix; everything else is a usage or IO problem.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define GERM_DEFINE_ERROR(NAME)            \
    struct NAME : Error {                  \
        using Error::Error;                \
    }

// tensor / linalg
GERM_DEFINE_ERROR(ShapeMismatch);
GERM_DEFINE_ERROR(NonConvergence);
GERM_DEFINE_ERROR(Singular);
GERM_DEFINE_ERROR(EmptyTensor);
GERM_DEFINE_ERROR(NonFinite);

// model / attention
GERM_DEFINE_ERROR(ConfigError);
GERM_DEFINE_ERROR(IndexOutOfRange);
GERM_DEFINE_ERROR(TokenOutOfRange);
GERM_DEFINE_ERROR(SequenceTooLong);
GERM_DEFINE_ERROR(EmptyInput);

// outlier metrics
GERM_DEFINE_ERROR(DegenerateSample);

// quantizer
GERM_DEFINE_ERROR(InvalidBits);
GERM_DEFINE_ERROR(ZeroRange);
GERM_DEFINE_ERROR(EmptySample);
GERM_DEFINE_ERROR(AlphaOutOfRange);
GERM_DEFINE_ERROR(MissingStats);

// lora / theorem machinery
GERM_DEFINE_ERROR(ConfigMismatch);
GERM_DEFINE_ERROR(NonSingularityViolated);
GERM_DEFINE_ERROR(RankConditionViolated);
GERM_DEFINE_ERROR(TargetMissing);

// data pipeline
GERM_DEFINE_ERROR(EmptyCorpus);
GERM_DEFINE_ERROR(InvalidCharacter);
GERM_DEFINE_ERROR(UnknownId);

// training
GERM_DEFINE_ERROR(NoMaskedPositions);
GERM_DEFINE_ERROR(SingleClassDataset);
GERM_DEFINE_ERROR(AlreadyOutlierFree);

// checkpoint io
GERM_DEFINE_ERROR(IoError);
GERM_DEFINE_ERROR(BadMagic);
GERM_DEFINE_ERROR(VersionUnsupported);
GERM_DEFINE_ERROR(CorruptManifest);

#undef GERM_DEFINE_ERROR

}  // namespace germ
