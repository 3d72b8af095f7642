#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "instructdiff/tensor.hpp"

namespace instructdiff {

// 8-bit RGB PNG <-> ImageTensor with values mapped linearly to [-1, 1].
ImageTensor load_png(const std::filesystem::path& path);
void save_png(const ImageTensor& image, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const ImageTensor& image);
ImageTensor decode_png(const std::vector<std::uint8_t>& bytes);

// The byte value a [-1, 1] sample is stored as.
std::uint8_t quantize_unit(float v);

// Snaps every sample to the value it reads back as after save/load.
ImageTensor quantize_image(const ImageTensor& image);

}  // namespace instructdiff
