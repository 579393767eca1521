#pragma once

#include <stdexcept>
#include <string>

namespace perfit {

// Base of every exception the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid experiment configuration or CLI override. Maps to exit code 1.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace perfit
