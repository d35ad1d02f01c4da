#pragma once

// Checkpoint files: 8 magic bytes, a little-endian u64 length, a JSON manifest
// of that length, then every tensor as contiguous little-endian float64.

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "geico/tensor.hpp"
#include "json.hpp"

namespace geico::ckpt {

class CorruptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json manifest;  // caller's fields; "tensors" (shapes) is reserved
  std::vector<Tensor> tensors;
};

// Writes to a temporary file and renames it into place.
void save(const std::filesystem::path& path, const Checkpoint& ck);
// Throws CorruptError on bad magic, truncation or inconsistent sizes.
Checkpoint load(const std::filesystem::path& path);

// Atomic text write (tmp file + rename).
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace geico::ckpt
