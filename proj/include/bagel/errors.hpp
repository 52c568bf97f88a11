#pragma once

#include <stdexcept>
#include <string>

namespace bagel {

// Shape/dimension violations in numeric ops.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid token layouts, masks, or packing inputs.
struct LayoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad configuration values (CLI, config file, model dims).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or other runtime numeric failures.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or inconsistent inputs for a declared layout.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bagel
