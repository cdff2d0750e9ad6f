#pragma once

#include <stdexcept>
#include <string>

namespace aquant {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class LookupError : public Error { public: using Error::Error; };
class CapabilityError : public Error { public: using Error::Error; };
class StructureError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class SizeError : public Error { public: using Error::Error; };
class ChecksumError : public FormatError { public: using FormatError::FormatError; };
class MissingBlobError : public FormatError { public: using FormatError::FormatError; };

class CalibrationError : public Error {
public:
  CalibrationError(std::string layer, const std::string& what)
      : Error("calibration of layer '" + layer + "': " + what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

private:
  std::string layer_;
};

}  // namespace aquant
