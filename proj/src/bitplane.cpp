#include "f2at/bitplane.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace f2at {

QuantImage::QuantImage(unsigned depth, std::size_t channels, std::size_t height, std::size_t width,
                       std::vector<std::uint16_t> data)
    : depth_(depth), channels_(channels), height_(height), width_(width), data_(std::move(data)) {
  if (depth_ < 1 || depth_ > 16) {
    throw std::invalid_argument("bit depth " + std::to_string(depth_) + " outside [1, 16]");
  }
  if (data_.size() != channels_ * height_ * width_) {
    throw std::invalid_argument("quantized image has " + std::to_string(data_.size()) + " entries, expected " +
                                std::to_string(channels_ * height_ * width_));
  }
  const std::uint32_t limit = max_value();
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (data_[i] > limit) {
      throw std::invalid_argument("entry " + std::to_string(i) + " = " + std::to_string(data_[i]) +
                                  " exceeds " + std::to_string(limit) + " at depth " + std::to_string(depth_));
    }
  }
}

QuantImage::QuantImage(unsigned depth, std::size_t channels, std::size_t height, std::size_t width)
    : QuantImage(depth, channels, height, width, std::vector<std::uint16_t>(channels * height * width, 0)) {}

bool QuantImage::same_geometry(const QuantImage& other) const {
  return depth_ == other.depth_ && channels_ == other.channels_ && height_ == other.height_ &&
         width_ == other.width_;
}

namespace {

constexpr double kRangeTolerance = 1e-9;

std::uint16_t quantize_value(double v, std::uint32_t levels, std::size_t index) {
  if (!(v >= -kRangeTolerance && v <= 1.0 + kRangeTolerance)) {
    throw std::invalid_argument("quantize: entry " + std::to_string(index) + " = " + std::to_string(v) +
                                " outside [0, 1]");
  }
  double q = std::floor(v * static_cast<double>(levels) + 0.5);
  if (q < 0.0) q = 0.0;
  if (q > static_cast<double>(levels)) q = static_cast<double>(levels);
  return static_cast<std::uint16_t>(q);
}

void check_split(unsigned k, unsigned depth) {
  if (k > depth) {
    throw std::invalid_argument("split level K = " + std::to_string(k) + " outside [0, " + std::to_string(depth) + "]");
  }
}

// Mask of the low (R - K) bit-planes, i.e. the perturbed pattern.
std::uint32_t low_mask(unsigned depth, unsigned k) { return (1u << (depth - k)) - 1u; }

}  // namespace

QuantImage quantize(const Tensor& image, unsigned depth) {
  if (image.rank() != 3) throw std::invalid_argument("quantize: expected [C,H,W], got " + shape_string(image.shape()));
  if (depth < 1 || depth > 16) throw std::invalid_argument("bit depth " + std::to_string(depth) + " outside [1, 16]");
  const std::uint32_t levels = (1u << depth) - 1u;
  std::vector<std::uint16_t> q(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) q[i] = quantize_value(image[i], levels, i);
  return QuantImage(depth, image.dim(0), image.dim(1), image.dim(2), std::move(q));
}

Tensor dequantize(const QuantImage& image) {
  const double levels = static_cast<double>(image.max_value());
  Tensor out(Shape{image.channels(), image.height(), image.width()});
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = static_cast<double>(image[i]) / levels;
  return out;
}

PatternPair slice(const QuantImage& image, unsigned k) {
  check_split(k, image.depth());
  const std::uint32_t low = low_mask(image.depth(), k);
  const std::uint32_t high = image.max_value() & ~low;
  std::vector<std::uint16_t> natural(image.size());
  std::vector<std::uint16_t> perturbed(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    natural[i] = static_cast<std::uint16_t>(image[i] & high);
    perturbed[i] = static_cast<std::uint16_t>(image[i] & low);
  }
  return PatternPair{
      QuantImage(image.depth(), image.channels(), image.height(), image.width(), std::move(natural)),
      QuantImage(image.depth(), image.channels(), image.height(), image.width(), std::move(perturbed)), k};
}

std::pair<Tensor, Tensor> slice_batch(const Tensor& batch, unsigned k, unsigned depth) {
  if (batch.rank() != 4) throw std::invalid_argument("slice_batch: expected [N,C,H,W], got " + shape_string(batch.shape()));
  if (depth < 1 || depth > 16) throw std::invalid_argument("bit depth " + std::to_string(depth) + " outside [1, 16]");
  check_split(k, depth);
  const std::uint32_t levels = (1u << depth) - 1u;
  const std::uint32_t low = low_mask(depth, k);
  const std::uint32_t high = levels & ~low;
  const double scale = static_cast<double>(levels);
  Tensor natural(batch.shape());
  Tensor perturbed(batch.shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::uint32_t q = quantize_value(batch[i], levels, i);
    natural[i] = static_cast<double>(q & high) / scale;
    perturbed[i] = static_cast<double>(q & low) / scale;
  }
  return {std::move(natural), std::move(perturbed)};
}

double discrepancy_ratio(std::span<const QuantImage> clean, std::span<const QuantImage> adv, unsigned k) {
  if (clean.size() != adv.size()) {
    throw std::invalid_argument("discrepancy_ratio: " + std::to_string(clean.size()) + " clean vs " +
                                std::to_string(adv.size()) + " adversarial images");
  }
  std::size_t differing = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (!clean[i].same_geometry(adv[i])) {
      throw std::invalid_argument("discrepancy_ratio: image " + std::to_string(i) + " geometry differs");
    }
    check_split(k, clean[i].depth());
    const std::uint32_t high = clean[i].max_value() & ~low_mask(clean[i].depth(), k);
    for (std::size_t j = 0; j < clean[i].size(); ++j) {
      if ((clean[i][j] & high) != (adv[i][j] & high)) ++differing;
    }
    total += clean[i].size();
  }
  return total == 0 ? 0.0 : static_cast<double>(differing) / static_cast<double>(total);
}

namespace {

std::vector<std::uint16_t> read_entries(std::istream& in, std::size_t count) {
  std::vector<std::uint16_t> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    long long v = 0;
    if (!(in >> v)) throw std::invalid_argument("plane file truncated at entry " + std::to_string(i));
    if (v < 0 || v > 65535) throw std::invalid_argument("plane file entry " + std::to_string(i) + " out of range");
    data[i] = static_cast<std::uint16_t>(v);
  }
  return data;
}

void write_entries(std::ostream& out, const QuantImage& image) {
  const std::size_t w = image.width();
  for (std::size_t i = 0; i < image.size(); ++i) {
    out << image[i] << ((i + 1) % w == 0 ? '\n' : ' ');
  }
}

}  // namespace

QuantImage read_plane_image(std::istream& in) {
  unsigned depth = 0;
  std::size_t c = 0, h = 0, w = 0;
  if (!(in >> depth >> c >> h >> w)) throw std::invalid_argument("plane file: bad header, expected 'R C H W'");
  return QuantImage(depth, c, h, w, read_entries(in, c * h * w));
}

void write_plane_image(std::ostream& out, const QuantImage& image) {
  out << image.depth() << ' ' << image.channels() << ' ' << image.height() << ' ' << image.width() << '\n';
  write_entries(out, image);
}

void write_pattern_pair(std::ostream& out, const PatternPair& pair) {
  const QuantImage& n = pair.natural;
  out << n.depth() << ' ' << pair.k << ' ' << n.channels() << ' ' << n.height() << ' ' << n.width() << '\n';
  write_entries(out, pair.natural);
  write_entries(out, pair.perturbed);
}

PatternPair read_pattern_pair(std::istream& in) {
  unsigned depth = 0, k = 0;
  std::size_t c = 0, h = 0, w = 0;
  if (!(in >> depth >> k >> c >> h >> w)) throw std::invalid_argument("pattern file: bad header, expected 'R K C H W'");
  PatternPair pair;
  pair.k = k;
  pair.natural = QuantImage(depth, c, h, w, read_entries(in, c * h * w));
  pair.perturbed = QuantImage(depth, c, h, w, read_entries(in, c * h * w));
  return pair;
}

}  // namespace f2at
