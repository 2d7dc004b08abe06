#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tcpdiff::io {

namespace fs = std::filesystem;

/// Writes values as raw little-endian float32. Throws IoError naming the path.
void write_f32(const fs::path& path, std::span<const float> values);

/// Appends values as raw little-endian float32 to an open-or-created file.
void append_f32(const fs::path& path, std::span<const float> values);

/// Reads `count` float32 values starting at element `offset`.
std::vector<float> read_f32(const fs::path& path, std::size_t offset, std::size_t count);

/// Number of float32 elements in the file; throws CorruptionError for a ragged size.
std::size_t f32_count(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

/// Creates `dir` (and parents) and checks that it is writable.
void ensure_writable_dir(const fs::path& dir);

}  // namespace tcpdiff::io
