#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fg {

enum class ErrorKind {
  invalid_spec,
  invalid_argument,
  shape_mismatch,
  heterogeneous_kernel_size,
  kernel_size_mismatch,
  layer_shape_mismatch,
  insufficient_stack,
  unknown_parameter,
  unknown_dataset,
  download_failure,
  digest_mismatch,
  no_split_table,
  nan_loss,
  mask_violation,
  zero_baseline,
  duplicate_run,
  io_failure,
  incomplete_matrix,
  no_records,
  empty_layer,
  degenerate,
  format_error,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fg
