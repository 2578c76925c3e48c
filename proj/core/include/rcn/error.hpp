#pragma once

#include <stdexcept>
#include <string>

namespace rcn {

// Error taxonomy shared across the library. Everything derives from Error
// so callers can catch coarsely or by kind.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
    using Error::Error;
};
struct InvalidState : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

}  // namespace rcn
