#pragma once

#include <stdexcept>
#include <string>

namespace bimm {

// Base of every error the library throws. Subclasses map onto CLI exit
// codes: ConfigError -> 1, DataError/FormatError/VersionError/
// CorruptionError -> 2, NumericError -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct VersionError : Error {
  using Error::Error;
};
struct CorruptionError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

}  // namespace bimm
