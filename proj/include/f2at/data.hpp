#pragma once
// Datasets of 8-bit images: CIFAR-10 binary batches, IDX files, a seeded
// synthetic generator, and seeded batch streams with crop/flip augmentation.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "f2at/bitplane.hpp"
#include "f2at/random.hpp"
#include "f2at/tensor.hpp"

namespace f2at {

struct Dataset {
  std::vector<QuantImage> images;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  // [C,H,W] of the first image; throws on an empty dataset.
  Shape image_shape() const;
  // Throws std::invalid_argument on |images| != |labels|, out-of-range labels
  // or mixed image geometry.
  void validate() const;
};

Dataset subset(const Dataset& data, std::size_t begin, std::size_t count);

// [N,C,H,W] batch of the selected images, dequantized to [0,1].
Tensor to_batch(const Dataset& data, std::span<const std::size_t> indices);
std::vector<std::size_t> labels_of(const Dataset& data, std::span<const std::size_t> indices);

inline constexpr std::size_t kCifarRecordBytes = 3073;
Dataset load_cifar10_binary(std::istream& in);
Dataset load_cifar10_binary(const std::string& path);

struct IdxContents {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::size_t> labels;   // magic 0x00000801
  std::vector<QuantImage> images;     // magic 0x00000803, C = 1
};
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
IdxContents load_idx(std::istream& in);
IdxContents load_idx(const std::string& path);
// Pairs an IDX image file with its label file; class_count = max label + 1
// (at least 2).
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path);

struct SynthOptions {
  std::size_t channels = 3;
  // Per-pixel uniform noise half-width, in 8-bit levels.
  int noise_levels = 16;
  // Class templates share a random background inside [background_lo, background_hi]
  // levels. Class c adds amplitude * s_c, with s_c a random +-1 pattern
  // (antipodal when there are two classes). The amplitude is robust_levels at
  // robust_pixels seeded spatial positions (all channels) and signal_levels
  // everywhere else.
  int background_lo = 64;
  int background_hi = 192;
  int signal_levels = 4;
  int robust_levels = 24;
  std::size_t robust_pixels = 4;
};

// Round-robin labels, so every class gets n / class_count or one more.
// Throws std::invalid_argument if n < class_count or side < 8.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t class_count, std::size_t side,
                      const SynthOptions& options = {});
// Class templates used by synth_dataset, dequantized to [0,1], shape [C,H,W].
std::vector<Tensor> synth_templates(std::uint64_t seed, std::size_t class_count, std::size_t side,
                                    const SynthOptions& options = {});

inline constexpr std::size_t kCropPadding = 4;

// Zero-pad by kCropPadding, take a random HxW window, flip horizontally with
// probability 1/2.
QuantImage augment_image(const QuantImage& image, Rng& rng);

struct Batch {
  Tensor images;  // [N,C,H,W] in [0,1]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // dataset positions
};

// One pass over a dataset. Shuffling and augmentation draw from a stream
// seeded by `seed` only, so equal seeds give identical batch streams.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle, bool augment);
  std::optional<Batch> next();

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  bool augment_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace f2at
