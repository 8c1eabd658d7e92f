#pragma once

#include <stdexcept>
#include <string>

namespace fscil {

// Every failure surfaced by the library derives from fscil::Error so callers
// (notably the CLI) can map them onto exit codes in one place.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define FSCIL_DEFINE_ERROR(Name)                                   \
    class Name : public Error {                                    \
    public:                                                        \
        explicit Name(const std::string& what) : Error(what) {}    \
    }

FSCIL_DEFINE_ERROR(ParameterError);
FSCIL_DEFINE_ERROR(ShapeError);
FSCIL_DEFINE_ERROR(NumericError);
FSCIL_DEFINE_ERROR(DegenerateVectorError);
FSCIL_DEFINE_ERROR(FormatError);
FSCIL_DEFINE_ERROR(MissingClassError);
FSCIL_DEFINE_ERROR(LabelError);
FSCIL_DEFINE_ERROR(ScheduleError);
FSCIL_DEFINE_ERROR(CapacityError);
FSCIL_DEFINE_ERROR(ProtocolError);
FSCIL_DEFINE_ERROR(ConfigError);

#undef FSCIL_DEFINE_ERROR

}  // namespace fscil
