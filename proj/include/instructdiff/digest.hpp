#pragma once

#include <filesystem>
#include <span>
#include <string>

namespace instructdiff {

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

// Digest of a directory tree: sha256 over sorted "relative-path\0file-digest\n" lines.
std::string sha256_tree(const std::filesystem::path& root);

// File digest for regular files, tree digest for directories.
std::string sha256_path(const std::filesystem::path& path);

}  // namespace instructdiff
