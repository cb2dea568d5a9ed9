#pragma once
// Integer bit-plane slicing: an R-bit image splits exactly into a natural
// pattern (top K planes) and a perturbed pattern (bottom R-K planes).

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "f2at/tensor.hpp"

namespace f2at {

inline constexpr unsigned kDefaultDepth = 8;
inline constexpr unsigned kDefaultSplit = 2;

class QuantImage {
 public:
  QuantImage() = default;
  // Throws std::invalid_argument if depth is outside [1, 16], the data length
  // is not channels*height*width, or any entry is >= 2^depth.
  QuantImage(unsigned depth, std::size_t channels, std::size_t height, std::size_t width,
             std::vector<std::uint16_t> data);
  // All-zero image.
  QuantImage(unsigned depth, std::size_t channels, std::size_t height, std::size_t width);

  unsigned depth() const { return depth_; }
  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  std::uint32_t max_value() const { return (1u << depth_) - 1u; }

  std::span<const std::uint16_t> data() const { return data_; }
  std::uint16_t operator[](std::size_t i) const { return data_[i]; }
  bool same_geometry(const QuantImage& other) const;

  bool operator==(const QuantImage&) const = default;

 private:
  unsigned depth_ = kDefaultDepth;
  std::size_t channels_ = 0, height_ = 0, width_ = 0;
  std::vector<std::uint16_t> data_;
};

struct PatternPair {
  QuantImage natural;
  QuantImage perturbed;
  unsigned k = kDefaultSplit;
};

// Round-half-up of x * (2^R - 1). `image` is [C,H,W] with entries in [0,1];
// values within 1e-9 outside the range are clamped, anything further rejected.
QuantImage quantize(const Tensor& image, unsigned depth = kDefaultDepth);
// Entry / (2^R - 1), shape [C,H,W].
Tensor dequantize(const QuantImage& image);

// Throws std::invalid_argument unless 0 <= k <= depth.
PatternPair slice(const QuantImage& image, unsigned k);

// Quantize each [C,H,W] slab of an [N,C,H,W] batch, slice at k, and return
// the dequantized (natural, perturbed) batches.
std::pair<Tensor, Tensor> slice_batch(const Tensor& batch, unsigned k, unsigned depth = kDefaultDepth);

// Fraction of (image, channel, pixel) entries whose natural pattern differs
// between clean[i] and adv[i].
double discrepancy_ratio(std::span<const QuantImage> clean, std::span<const QuantImage> adv, unsigned k);

// Plane text format: header line "R C H W" followed by base-10 entries.
QuantImage read_plane_image(std::istream& in);
void write_plane_image(std::ostream& out, const QuantImage& image);
// Header line "R K C H W", then the natural block, then the perturbed block.
void write_pattern_pair(std::ostream& out, const PatternPair& pair);
PatternPair read_pattern_pair(std::istream& in);

}  // namespace f2at
