#include "f2at/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>
#include <string>

namespace f2at {

Shape Dataset::image_shape() const {
  if (images.empty()) throw std::invalid_argument("dataset is empty");
  return {images[0].channels(), images[0].height(), images[0].width()};
}

void Dataset::validate() const {
  if (images.size() != labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(images.size()) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                                  " is not below class count " + std::to_string(class_count));
    }
    if (!images[i].same_geometry(images[0])) {
      throw std::invalid_argument("image " + std::to_string(i) + " differs in geometry from image 0");
    }
  }
}

Dataset subset(const Dataset& data, std::size_t begin, std::size_t count) {
  if (begin > data.size() || count > data.size() - begin) {
    throw std::invalid_argument("subset [" + std::to_string(begin) + ", +" + std::to_string(count) +
                                ") exceeds dataset of " + std::to_string(data.size()));
  }
  Dataset out;
  out.class_count = data.class_count;
  out.images.assign(data.images.begin() + begin, data.images.begin() + begin + count);
  out.labels.assign(data.labels.begin() + begin, data.labels.begin() + begin + count);
  return out;
}

Tensor to_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const Shape s = data.image_shape();
  const std::size_t per = shape_size(s);
  Tensor out({indices.size(), s[0], s[1], s[2]});
  for (std::size_t e = 0; e < indices.size(); ++e) {
    const QuantImage& q = data.images.at(indices[e]);
    const double scale = static_cast<double>(q.max_value());
    for (std::size_t j = 0; j < per; ++j) out[e * per + j] = static_cast<double>(q[j]) / scale;
  }
  return out;
}

std::vector<std::size_t> labels_of(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.labels.at(i));
  return out;
}

Dataset load_cifar10_binary(std::istream& in) {
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
    throw std::runtime_error("CIFAR-10 file truncated: partial record at byte offset " + std::to_string(offset) +
                             " (" + std::to_string(bytes.size()) + " bytes is not a multiple of 3073)");
  }
  Dataset out;
  out.class_count = 10;
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  out.images.reserve(records);
  out.labels.reserve(records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::size_t offset = r * kCifarRecordBytes;
    const auto label = static_cast<unsigned char>(bytes[offset]);
    if (label >= 10) {
      throw std::runtime_error("CIFAR-10 label " + std::to_string(label) + " at byte offset " +
                               std::to_string(offset) + " is not in [0, 9]");
    }
    std::vector<std::uint16_t> pixels(kCifarRecordBytes - 1);
    for (std::size_t j = 0; j < pixels.size(); ++j) {
      pixels[j] = static_cast<unsigned char>(bytes[offset + 1 + j]);
    }
    out.images.emplace_back(8, 3, 32, 32, std::move(pixels));
    out.labels.push_back(label);
  }
  return out;
}

Dataset load_cifar10_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open CIFAR-10 file '" + path + "'");
  return load_cifar10_binary(in);
}

namespace {

std::uint32_t read_be32(const std::vector<char>& bytes, std::size_t offset, const char* what) {
  if (offset + 4 > bytes.size()) {
    throw std::runtime_error(std::string("IDX file truncated reading ") + what + " at byte offset " +
                             std::to_string(offset));
  }
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

}  // namespace

IdxContents load_idx(std::istream& in) {
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  IdxContents out;
  out.magic = read_be32(bytes, 0, "magic");
  std::size_t rank = 0;
  if (out.magic == kIdxLabelMagic) {
    rank = 1;
  } else if (out.magic == kIdxImageMagic) {
    rank = 3;
  } else {
    char hex[16];
    std::snprintf(hex, sizeof hex, "0x%08X", out.magic);
    throw std::runtime_error(std::string("IDX bad magic ") + hex + " (expected 0x00000801 or 0x00000803)");
  }
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::uint32_t dim = read_be32(bytes, 4 + 4 * d, "dimension");
    out.dims.push_back(dim);
    if (dim != 0 && count > (std::size_t{1} << 40) / dim) throw std::runtime_error("IDX dimensions overflow");
    count *= dim;
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header + count) {
    throw std::runtime_error("IDX file truncated: header declares " + std::to_string(count) + " bytes of data, " +
                             std::to_string(bytes.size() - header) + " present after byte offset " +
                             std::to_string(header));
  }
  if (rank == 1) {
    out.labels.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.labels.push_back(static_cast<unsigned char>(bytes[header + i]));
    return out;
  }
  const std::size_t h = out.dims[1], w = out.dims[2];
  out.images.reserve(out.dims[0]);
  for (std::size_t n = 0; n < out.dims[0]; ++n) {
    std::vector<std::uint16_t> pixels(h * w);
    for (std::size_t j = 0; j < pixels.size(); ++j) {
      pixels[j] = static_cast<unsigned char>(bytes[header + n * h * w + j]);
    }
    out.images.emplace_back(8, 1, h, w, std::move(pixels));
  }
  return out;
}

IdxContents load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open IDX file '" + path + "'");
  return load_idx(in);
}

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
  IdxContents images = load_idx(images_path);
  IdxContents labels = load_idx(labels_path);
  if (images.magic != kIdxImageMagic) throw std::runtime_error("'" + images_path + "' is not an IDX image file");
  if (labels.magic != kIdxLabelMagic) throw std::runtime_error("'" + labels_path + "' is not an IDX label file");
  Dataset out;
  out.images = std::move(images.images);
  out.labels = std::move(labels.labels);
  std::size_t top = 1;
  for (std::size_t l : out.labels) top = std::max(top, l);
  out.class_count = top + 1;
  out.validate();
  return out;
}

namespace {

void check_synth(std::size_t class_count, std::size_t side, const SynthOptions& o) {
  if (side < 8) throw std::invalid_argument("synthetic side " + std::to_string(side) + " is below 8");
  if (class_count < 2) throw std::invalid_argument("synthetic data needs at least two classes");
  if (o.channels == 0) throw std::invalid_argument("synthetic data needs at least one channel");
  if (o.noise_levels < 0 || o.signal_levels < 0 || o.robust_levels < 0 || o.background_lo < 0 ||
      o.background_hi > 255 || o.background_lo > o.background_hi) {
    throw std::invalid_argument("synthetic options out of range");
  }
  if (o.robust_pixels > side * side) {
    throw std::invalid_argument("synthetic robust_pixels " + std::to_string(o.robust_pixels) + " exceeds " +
                                std::to_string(side * side) + " positions");
  }
}

// Templates in 8-bit levels, before clamping.
std::vector<std::vector<int>> raw_templates(std::uint64_t seed, std::size_t class_count, std::size_t side,
                                            const SynthOptions& o) {
  const std::size_t plane = side * side;
  const std::size_t per = o.channels * plane;
  Rng rng(derive_seed(seed, 0));
  std::vector<int> background(per);
  for (int& v : background) {
    v = o.background_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(o.background_hi - o.background_lo + 1)));
  }
  std::vector<std::size_t> positions(plane);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(positions));
  std::vector<int> amplitude(per, o.signal_levels);
  for (std::size_t p = 0; p < o.robust_pixels; ++p) {
    for (std::size_t ch = 0; ch < o.channels; ++ch) amplitude[ch * plane + positions[p]] = o.robust_levels;
  }
  std::vector<std::vector<int>> out(class_count, background);
  std::vector<int> first_sign(per);
  for (std::size_t c = 0; c < class_count; ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      const int s = (c == 1 && class_count == 2) ? -first_sign[i] : (rng.coin() ? 1 : -1);
      if (c == 0) first_sign[i] = s;
      out[c][i] += s * amplitude[i];
    }
  }
  return out;
}

}  // namespace

std::vector<Tensor> synth_templates(std::uint64_t seed, std::size_t class_count, std::size_t side,
                                    const SynthOptions& options) {
  check_synth(class_count, side, options);
  std::vector<Tensor> out;
  for (const auto& t : raw_templates(seed, class_count, side, options)) {
    Tensor img({options.channels, side, side});
    for (std::size_t i = 0; i < t.size(); ++i) img[i] = std::clamp(t[i], 0, 255) / 255.0;
    out.push_back(std::move(img));
  }
  return out;
}

Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t class_count, std::size_t side,
                      const SynthOptions& options) {
  check_synth(class_count, side, options);
  if (n < class_count) {
    throw std::invalid_argument("synthetic size " + std::to_string(n) + " is below class count " +
                                std::to_string(class_count));
  }
  const auto templates = raw_templates(seed, class_count, side, options);
  Rng rng(derive_seed(seed, 1));
  Dataset out;
  out.class_count = class_count;
  out.images.reserve(n);
  out.labels.reserve(n);
  const auto span = static_cast<std::uint64_t>(2 * options.noise_levels + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % class_count;
    std::vector<std::uint16_t> pixels(templates[label].size());
    for (std::size_t j = 0; j < pixels.size(); ++j) {
      const int noise = static_cast<int>(rng.below(span)) - options.noise_levels;
      pixels[j] = static_cast<std::uint16_t>(std::clamp(templates[label][j] + noise, 0, 255));
    }
    out.images.emplace_back(8, options.channels, side, side, std::move(pixels));
    out.labels.push_back(label);
  }
  return out;
}

QuantImage augment_image(const QuantImage& image, Rng& rng) {
  const std::size_t c = image.channels(), h = image.height(), w = image.width();
  const auto pad = static_cast<long>(kCropPadding);
  const long dy = static_cast<long>(rng.below(2 * kCropPadding + 1)) - pad;
  const long dx = static_cast<long>(rng.below(2 * kCropPadding + 1)) - pad;
  const bool flip = rng.coin();
  std::vector<std::uint16_t> out(image.size(), 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y) + dy;
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t ox = flip ? w - 1 - x : x;
        const long sx = static_cast<long>(x) + dx;
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        out[(ch * h + y) * w + ox] = image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
    }
  }
  return QuantImage(image.depth(), c, h, w, std::move(out));
}

BatchStream::BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, bool shuffle, bool augment)
    : data_(&data), batch_size_(batch_size), augment_(augment), rng_(seed), order_(data.size()) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle) rng_.shuffle(std::span<std::size_t>(order_));
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t count = std::min(batch_size_, order_.size() - cursor_);
  Batch b;
  b.indices.assign(order_.begin() + cursor_, order_.begin() + cursor_ + count);
  cursor_ += count;
  b.labels = labels_of(*data_, b.indices);
  if (!augment_) {
    b.images = to_batch(*data_, b.indices);
    return b;
  }
  Dataset view;
  view.class_count = data_->class_count;
  for (std::size_t i : b.indices) view.images.push_back(augment_image(data_->images[i], rng_));
  std::vector<std::size_t> all(count);
  std::iota(all.begin(), all.end(), std::size_t{0});
  b.images = to_batch(view, all);
  return b;
}

}  // namespace f2at
