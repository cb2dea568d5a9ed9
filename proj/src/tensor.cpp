#include "f2at/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "f2at/kernels.hpp"

namespace f2at {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw std::invalid_argument("tensor shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

namespace {

constexpr std::array<std::pair<Primitive, std::string_view>, 18> kPrimitiveNames{{
    {Primitive::kLeaf, "leaf"},
    {Primitive::kMatmul, "matmul"},
    {Primitive::kConv2d, "conv2d"},
    {Primitive::kBiasAdd, "bias_add"},
    {Primitive::kRelu, "relu"},
    {Primitive::kMaxPool2, "max_pool2"},
    {Primitive::kFlatten, "flatten"},
    {Primitive::kSoftmaxCrossEntropy, "softmax_cross_entropy"},
    {Primitive::kLogSumExp, "log_sum_exp"},
    {Primitive::kCosineSimilarity, "cosine_similarity"},
    {Primitive::kAdd, "add"},
    {Primitive::kSub, "sub"},
    {Primitive::kMul, "mul"},
    {Primitive::kScale, "scale"},
    {Primitive::kMean, "mean"},
    {Primitive::kSign, "sign"},
    {Primitive::kPick, "pick"},
    {Primitive::kMaxReduce, "max_reduce"},
}};

[[noreturn]] void shape_error(Primitive kind, const Shape& a, const Shape& b, std::string_view why) {
  std::ostringstream out;
  out << primitive_name(kind) << ": shape mismatch between " << shape_string(a) << " and "
      << shape_string(b) << " (" << why << ")";
  throw std::invalid_argument(out.str());
}

[[noreturn]] void shape_error(Primitive kind, const Shape& a, std::string_view why) {
  std::ostringstream out;
  out << primitive_name(kind) << ": invalid input shape " << shape_string(a) << " (" << why << ")";
  throw std::invalid_argument(out.str());
}

void check_labels(Primitive kind, const Shape& logits, const std::vector<std::size_t>& labels) {
  if (logits.size() != 2) shape_error(kind, logits, "expected [N, C]");
  if (labels.size() != logits[0]) {
    shape_error(kind, logits, Shape{labels.size()}, "one label per row required");
  }
  for (std::size_t y : labels) {
    if (y >= logits[1]) {
      throw std::invalid_argument(std::string(primitive_name(kind)) + ": label " + std::to_string(y) +
                                  " out of range for " + std::to_string(logits[1]) + " classes");
    }
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, out_c, kh, kw, pad, oh, ow;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t plane() const { return oh * ow; }
  std::size_t cols() const { return n * oh * ow; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) shape_error(Primitive::kConv2d, x, w, "expected [N,C,H,W] and [O,C,KH,KW]");
  if (x[1] != w[1]) shape_error(Primitive::kConv2d, x, w, "input channel counts differ");
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) {
    shape_error(Primitive::kConv2d, x, w, "kernel larger than padded input");
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], pad, x[2] + 2 * pad - w[2] + 1,
                 x[3] + 2 * pad - w[3] + 1};
  return g;
}

// col[r][n*plane + oy*ow + ox], r = (c*kh + ky)*kw + kx
void im2col(const ConvGeometry& g, std::span<const double> x, std::span<double> col) {
  const std::size_t plane = g.plane();
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* src = x.data() + (n * g.c + c) * g.h * g.w;
          double* dst = row + n * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                  ix < static_cast<std::ptrdiff_t>(g.w);
              dst[oy * g.ow + ox] = inside ? src[iy * static_cast<std::ptrdiff_t>(g.w) + ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, std::span<const double> col, std::span<double> dx) {
  const std::size_t plane = g.plane();
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* dst = dx.data() + (n * g.c + c) * g.h * g.w;
          const double* src = row + n * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[iy * static_cast<std::ptrdiff_t>(g.w) + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

double row_log_sum_exp(std::span<const double> row, std::span<double> weights, std::size_t skip) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (j != skip) m = std::max(m, row[j]);
  }
  double s = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    weights[j] = j == skip ? 0.0 : std::exp(row[j] - m);
    s += weights[j];
  }
  for (double& wj : weights) wj /= s;
  return m + std::log(s);
}

struct CosineLayout {
  std::size_t rows_a, rows_b, dim;
  bool pairwise;
  bool vectors;
};

CosineLayout cosine_layout(const Shape& a, const Shape& b, bool pairwise) {
  const Primitive k = Primitive::kCosineSimilarity;
  if (a.size() == 1 && b.size() == 1) {
    if (a[0] != b[0]) shape_error(k, a, b, "vector lengths differ");
    return {1, 1, a[0], false, true};
  }
  if (a.size() != 2 || b.size() != 2) shape_error(k, a, b, "expected two vectors or two matrices");
  if (a[1] != b[1]) shape_error(k, a, b, "feature dimensions differ");
  if (!pairwise && a[0] != b[0]) shape_error(k, a, b, "row counts differ");
  return {a[0], b[0], a[1], pairwise, false};
}

double norm(const double* v, std::size_t n) { return std::sqrt(kernels::dot({v, n}, {v, n})); }

}  // namespace

std::string_view primitive_name(Primitive kind) {
  for (const auto& [k, name] : kPrimitiveNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

Primitive parse_primitive(std::string_view name) {
  for (const auto& [k, n] : kPrimitiveNames) {
    if (n == name && k != Primitive::kLeaf) return k;
  }
  throw std::invalid_argument("unknown primitive '" + std::string(name) + "'");
}

NodeId Graph::conv2d(NodeId x, NodeId w, std::size_t padding) {
  Attrs attrs;
  attrs.padding = padding;
  return apply(Primitive::kConv2d, {x, w}, attrs);
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
  Attrs attrs;
  attrs.labels = std::move(labels);
  return apply(Primitive::kSoftmaxCrossEntropy, {logits}, attrs);
}

NodeId Graph::log_sum_exp_excluding(NodeId x, std::vector<std::size_t> labels) {
  Attrs attrs;
  attrs.labels = std::move(labels);
  attrs.exclude_labels = true;
  return apply(Primitive::kLogSumExp, {x}, attrs);
}

NodeId Graph::pairwise_cosine(NodeId a, NodeId b) {
  Attrs attrs;
  attrs.pairwise = true;
  return apply(Primitive::kCosineSimilarity, {a, b}, attrs);
}

NodeId Graph::scale(NodeId x, double factor) {
  Attrs attrs;
  attrs.factor = factor;
  return apply(Primitive::kScale, {x}, attrs);
}

NodeId Graph::pick(NodeId x, std::vector<std::size_t> labels) {
  Attrs attrs;
  attrs.labels = std::move(labels);
  return apply(Primitive::kPick, {x}, attrs);
}

NodeId Graph::input(Tensor value, bool requires_grad) {
  Node node;
  node.kind = Primitive::kLeaf;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

void Graph::check_id(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw std::invalid_argument("node id " + std::to_string(id.index) + " is not on this graph");
  }
}

NodeId Graph::apply(Primitive kind, std::span<const NodeId> inputs, const Attrs& attrs) {
  auto expect_arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };
  for (NodeId id : inputs) check_id(id);

  Node node;
  node.kind = kind;
  node.inputs.assign(inputs.begin(), inputs.end());
  node.attrs = attrs;
  for (NodeId id : inputs) node.requires_grad = node.requires_grad || nodes_[id.index].requires_grad;

  switch (kind) {
    case Primitive::kLeaf:
      throw std::invalid_argument("leaf nodes are created with Graph::input");

    case Primitive::kMatmul: {
      expect_arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        shape_error(kind, a.shape(), b.shape(), "expected [N,K] x [K,M]");
      }
      const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
      Tensor out(Shape{n, m});
      for (std::size_t i = 0; i < n; ++i) {
        std::span<double> row = out.data().subspan(i * m, m);
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double aik = a[i * k + kk];
          if (aik != 0.0) kernels::axpy(aik, b.data().subspan(kk * m, m), row);
        }
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kConv2d: {
      expect_arity(2);
      const Tensor& x = value(inputs[0]);
      const Tensor& w = value(inputs[1]);
      const ConvGeometry g = conv_geometry(x.shape(), w.shape(), attrs.padding);
      const std::size_t rows = g.rows(), cols = g.cols(), plane = g.plane();
      node.saved.assign(rows * cols, 0.0);
      im2col(g, x.data(), node.saved);
      std::vector<double> tmp(g.out_c * cols, 0.0);
      for (std::size_t o = 0; o < g.out_c; ++o) {
        std::span<double> dst(tmp.data() + o * cols, cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double wr = w[o * rows + r];
          if (wr != 0.0) kernels::axpy(wr, std::span<const double>(node.saved.data() + r * cols, cols), dst);
        }
      }
      Tensor out(Shape{g.n, g.out_c, g.oh, g.ow});
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.out_c; ++o) {
          std::copy_n(tmp.data() + o * cols + n * plane, plane, out.data().data() + (n * g.out_c + o) * plane);
        }
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kBiasAdd: {
      expect_arity(2);
      const Tensor& x = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
        shape_error(kind, x.shape(), b.shape(), "bias length must equal axis-1 size");
      }
      const std::size_t channels = x.dim(1);
      const std::size_t inner = x.size() / (x.dim(0) * channels);
      Tensor out = x;
      for (std::size_t n = 0; n < x.dim(0); ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
          double* p = out.data().data() + (n * channels + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
        }
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kRelu: {
      expect_arity(1);
      Tensor out = value(inputs[0]);
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
      node.value = std::move(out);
      break;
    }

    case Primitive::kMaxPool2: {
      expect_arity(1);
      const Tensor& x = value(inputs[0]);
      if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0 || x.dim(2) == 0 || x.dim(3) == 0) {
        shape_error(kind, x.shape(), "expected [N,C,H,W] with even non-zero H and W");
      }
      const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
      const std::size_t oh = h / 2, ow = w / 2;
      Tensor out(Shape{x.dim(0), x.dim(1), oh, ow});
      node.saved_index.resize(out.size());
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            // Scan in flat order with strict '>' so ties keep the lowest index.
            std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                if (x[idx] > x[best]) best = idx;
              }
            }
            const std::size_t o = (p * oh + oy) * ow + ox;
            out[o] = x[best];
            node.saved_index[o] = best;
          }
        }
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kFlatten: {
      expect_arity(1);
      const Tensor& x = value(inputs[0]);
      if (x.rank() < 1) shape_error(kind, x.shape(), "needs a leading batch axis");
      const std::size_t n = x.dim(0);
      node.value = x.reshaped(Shape{n, n == 0 ? 0 : x.size() / n});
      break;
    }

    case Primitive::kSoftmaxCrossEntropy: {
      expect_arity(1);
      const Tensor& z = value(inputs[0]);
      check_labels(kind, z.shape(), attrs.labels);
      const std::size_t n = z.dim(0), c = z.dim(1);
      Tensor out(Shape{n});
      node.saved.assign(n * c, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        std::span<const double> row = z.data().subspan(i * c, c);
        const double lse = row_log_sum_exp(row, std::span<double>(node.saved).subspan(i * c, c), c);
        out[i] = lse - row[attrs.labels[i]];
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kLogSumExp: {
      expect_arity(1);
      const Tensor& z = value(inputs[0]);
      if (z.rank() < 1 || z.shape().back() == 0) shape_error(kind, z.shape(), "needs a non-empty last axis");
      const std::size_t c = z.shape().back();
      const std::size_t rows = z.size() / c;
      if (attrs.exclude_labels) {
        if (c < 2) shape_error(kind, z.shape(), "exclusion needs at least two columns");
        if (attrs.labels.size() != rows) shape_error(kind, z.shape(), Shape{attrs.labels.size()}, "one label per row");
        for (std::size_t y : attrs.labels) {
          if (y >= c) throw std::invalid_argument("log_sum_exp: excluded label " + std::to_string(y) + " out of range");
        }
      }
      Shape out_shape(z.shape().begin(), z.shape().end() - 1);
      Tensor out(out_shape);
      node.saved.assign(z.size(), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t skip = attrs.exclude_labels ? attrs.labels[i] : c;
        out[i] = row_log_sum_exp(z.data().subspan(i * c, c), std::span<double>(node.saved).subspan(i * c, c), skip);
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kCosineSimilarity: {
      expect_arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      const CosineLayout l = cosine_layout(a.shape(), b.shape(), attrs.pairwise);
      node.saved.resize(l.rows_a + l.rows_b);
      for (std::size_t i = 0; i < l.rows_a; ++i) node.saved[i] = norm(a.data().data() + i * l.dim, l.dim);
      for (std::size_t j = 0; j < l.rows_b; ++j) node.saved[l.rows_a + j] = norm(b.data().data() + j * l.dim, l.dim);
      Shape out_shape = l.vectors ? Shape{} : (l.pairwise ? Shape{l.rows_a, l.rows_b} : Shape{l.rows_a});
      Tensor out(out_shape);
      auto cos = [&](std::size_t i, std::size_t j) {
        const double denom = node.saved[i] * node.saved[l.rows_a + j];
        if (denom == 0.0) return 0.0;
        return kernels::dot(a.data().subspan(i * l.dim, l.dim), b.data().subspan(j * l.dim, l.dim)) / denom;
      };
      if (l.pairwise) {
        for (std::size_t i = 0; i < l.rows_a; ++i) {
          for (std::size_t j = 0; j < l.rows_b; ++j) out[i * l.rows_b + j] = cos(i, j);
        }
      } else {
        for (std::size_t i = 0; i < l.rows_a; ++i) out[i] = cos(i, i);
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kAdd:
    case Primitive::kSub:
    case Primitive::kMul: {
      expect_arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.shape() != b.shape()) shape_error(kind, a.shape(), b.shape(), "elementwise ops need equal shapes");
      Tensor out = a;
      if (kind == Primitive::kAdd) {
        kernels::add(b.data(), out.data());
      } else if (kind == Primitive::kSub) {
        kernels::axpy(-1.0, b.data(), out.data());
      } else {
        kernels::mul(a.data(), b.data(), out.data());
      }
      node.value = std::move(out);
      break;
    }

    case Primitive::kScale: {
      expect_arity(1);
      Tensor out = value(inputs[0]);
      kernels::scale(attrs.factor, out.data());
      node.value = std::move(out);
      break;
    }

    case Primitive::kMean: {
      expect_arity(1);
      const Tensor& x = value(inputs[0]);
      if (x.size() == 0) shape_error(kind, x.shape(), "mean of an empty tensor");
      node.value = Tensor::scalar(kernels::sum(x.data()) / static_cast<double>(x.size()));
      break;
    }

    case Primitive::kSign: {
      expect_arity(1);
      Tensor out = value(inputs[0]);
      for (double& v : out.data()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      node.value = std::move(out);
      break;
    }

    case Primitive::kPick: {
      expect_arity(1);
      const Tensor& z = value(inputs[0]);
      check_labels(kind, z.shape(), attrs.labels);
      const std::size_t n = z.dim(0), c = z.dim(1);
      Tensor out(Shape{n});
      for (std::size_t i = 0; i < n; ++i) out[i] = z[i * c + attrs.labels[i]];
      node.value = std::move(out);
      break;
    }

    case Primitive::kMaxReduce: {
      expect_arity(1);
      const Tensor& z = value(inputs[0]);
      if (z.rank() < 1 || z.shape().back() == 0) shape_error(kind, z.shape(), "needs a non-empty last axis");
      const std::size_t c = z.shape().back();
      const std::size_t rows = z.size() / c;
      Tensor out(Shape(z.shape().begin(), z.shape().end() - 1));
      node.saved_index.resize(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
          if (z[i * c + j] > z[i * c + best]) best = j;
        }
        out[i] = z[i * c + best];
        node.saved_index[i] = i * c + best;
      }
      node.value = std::move(out);
      break;
    }

    default:
      throw std::invalid_argument("unknown primitive id " + std::to_string(static_cast<int>(kind)));
  }

  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

namespace {

void accumulate(std::vector<Tensor>& grads, std::vector<bool>& seen, std::size_t index, Tensor grad) {
  if (!seen[index]) {
    grads[index] = std::move(grad);
    seen[index] = true;
  } else {
    kernels::add(grad.data(), grads[index].data());
  }
}

}  // namespace

void Graph::backward_node(const Node& node, const Tensor& grad, std::vector<Tensor>& grads,
                          std::vector<bool>& seen) const {
  auto wants = [&](std::size_t k) { return nodes_[node.inputs[k].index].requires_grad; };
  auto push = [&](std::size_t k, Tensor g) { accumulate(grads, seen, node.inputs[k].index, std::move(g)); };
  const Attrs& attrs = node.attrs;

  switch (node.kind) {
    case Primitive::kLeaf:
      break;

    case Primitive::kMatmul: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
      if (wants(0)) {
        Tensor da(a.shape());
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            da[i * k + kk] = kernels::dot(grad.data().subspan(i * m, m), b.data().subspan(kk * m, m));
          }
        }
        push(0, std::move(da));
      }
      if (wants(1)) {
        Tensor db(b.shape());
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = a[i * k + kk];
            if (aik != 0.0) kernels::axpy(aik, grad.data().subspan(i * m, m), db.data().subspan(kk * m, m));
          }
        }
        push(1, std::move(db));
      }
      break;
    }

    case Primitive::kConv2d: {
      const Tensor& x = value(node.inputs[0]);
      const Tensor& w = value(node.inputs[1]);
      const ConvGeometry g = conv_geometry(x.shape(), w.shape(), attrs.padding);
      const std::size_t rows = g.rows(), cols = g.cols(), plane = g.plane();
      std::vector<double> dt(g.out_c * cols);
      for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t o = 0; o < g.out_c; ++o) {
          std::copy_n(grad.data().data() + (n * g.out_c + o) * plane, plane, dt.data() + o * cols + n * plane);
        }
      }
      if (wants(1)) {
        Tensor dw(w.shape());
        for (std::size_t o = 0; o < g.out_c; ++o) {
          std::span<const double> dto(dt.data() + o * cols, cols);
          for (std::size_t r = 0; r < rows; ++r) {
            dw[o * rows + r] = kernels::dot(dto, std::span<const double>(node.saved.data() + r * cols, cols));
          }
        }
        push(1, std::move(dw));
      }
      if (wants(0)) {
        std::vector<double> dcol(rows * cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          std::span<double> dst(dcol.data() + r * cols, cols);
          for (std::size_t o = 0; o < g.out_c; ++o) {
            const double wr = w[o * rows + r];
            if (wr != 0.0) kernels::axpy(wr, std::span<const double>(dt.data() + o * cols, cols), dst);
          }
        }
        Tensor dx(x.shape());
        col2im_add(g, dcol, dx.data());
        push(0, std::move(dx));
      }
      break;
    }

    case Primitive::kBiasAdd: {
      const Tensor& x = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      if (wants(0)) push(0, grad);
      if (wants(1)) {
        const std::size_t channels = x.dim(1);
        const std::size_t inner = x.size() / (x.dim(0) * channels);
        Tensor db(b.shape());
        for (std::size_t n = 0; n < x.dim(0); ++n) {
          for (std::size_t c = 0; c < channels; ++c) {
            db[c] += kernels::sum(grad.data().subspan((n * channels + c) * inner, inner));
          }
        }
        push(1, std::move(db));
      }
      break;
    }

    case Primitive::kRelu: {
      if (!wants(0)) break;
      const Tensor& x = value(node.inputs[0]);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? grad[i] : 0.0;
      push(0, std::move(dx));
      break;
    }

    case Primitive::kMaxPool2: {
      if (!wants(0)) break;
      Tensor dx(value(node.inputs[0]).shape());
      for (std::size_t o = 0; o < grad.size(); ++o) dx[node.saved_index[o]] += grad[o];
      push(0, std::move(dx));
      break;
    }

    case Primitive::kFlatten: {
      if (wants(0)) push(0, grad.reshaped(value(node.inputs[0]).shape()));
      break;
    }

    case Primitive::kSoftmaxCrossEntropy: {
      if (!wants(0)) break;
      const Tensor& z = value(node.inputs[0]);
      const std::size_t n = z.dim(0), c = z.dim(1);
      Tensor dz(z.shape());
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double indicator = j == attrs.labels[i] ? 1.0 : 0.0;
          dz[i * c + j] = grad[i] * (node.saved[i * c + j] - indicator);
        }
      }
      push(0, std::move(dz));
      break;
    }

    case Primitive::kLogSumExp: {
      if (!wants(0)) break;
      const Tensor& z = value(node.inputs[0]);
      const std::size_t c = z.shape().back();
      Tensor dz(z.shape());
      for (std::size_t i = 0; i < z.size(); ++i) dz[i] = grad[i / c] * node.saved[i];
      push(0, std::move(dz));
      break;
    }

    case Primitive::kCosineSimilarity: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      const CosineLayout l = cosine_layout(a.shape(), b.shape(), attrs.pairwise);
      const std::size_t d = l.dim;
      Tensor da(a.shape());
      Tensor db(b.shape());
      auto pair = [&](std::size_t i, std::size_t j, double g) {
        const double na = node.saved[i];
        const double nb = node.saved[l.rows_a + j];
        if (na == 0.0 || nb == 0.0 || g == 0.0) return;
        const double* ai = a.data().data() + i * d;
        const double* bj = b.data().data() + j * d;
        const double c = kernels::dot({ai, d}, {bj, d}) / (na * nb);
        // d cos / d a = b / (|a||b|) - cos * a / |a|^2, symmetric for b.
        kernels::axpy(g / (na * nb), {bj, d}, da.data().subspan(i * d, d));
        kernels::axpy(-g * c / (na * na), {ai, d}, da.data().subspan(i * d, d));
        kernels::axpy(g / (na * nb), {ai, d}, db.data().subspan(j * d, d));
        kernels::axpy(-g * c / (nb * nb), {bj, d}, db.data().subspan(j * d, d));
      };
      if (l.pairwise) {
        for (std::size_t i = 0; i < l.rows_a; ++i) {
          for (std::size_t j = 0; j < l.rows_b; ++j) pair(i, j, grad[i * l.rows_b + j]);
        }
      } else {
        for (std::size_t i = 0; i < l.rows_a; ++i) pair(i, i, grad[i]);
      }
      if (wants(0)) push(0, std::move(da));
      if (wants(1)) push(1, std::move(db));
      break;
    }

    case Primitive::kAdd: {
      if (wants(0)) push(0, grad);
      if (wants(1)) push(1, grad);
      break;
    }

    case Primitive::kSub: {
      if (wants(0)) push(0, grad);
      if (wants(1)) {
        Tensor neg = grad;
        kernels::scale(-1.0, neg.data());
        push(1, std::move(neg));
      }
      break;
    }

    case Primitive::kMul: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      if (wants(0)) {
        Tensor da(a.shape());
        kernels::mul(grad.data(), b.data(), da.data());
        push(0, std::move(da));
      }
      if (wants(1)) {
        Tensor db(b.shape());
        kernels::mul(grad.data(), a.data(), db.data());
        push(1, std::move(db));
      }
      break;
    }

    case Primitive::kScale: {
      if (!wants(0)) break;
      Tensor dx = grad;
      kernels::scale(attrs.factor, dx.data());
      push(0, std::move(dx));
      break;
    }

    case Primitive::kMean: {
      if (!wants(0)) break;
      const Tensor& x = value(node.inputs[0]);
      push(0, Tensor(x.shape(), grad.item() / static_cast<double>(x.size())));
      break;
    }

    case Primitive::kSign:
      // Piecewise constant: zero gradient almost everywhere.
      if (wants(0)) push(0, Tensor(value(node.inputs[0]).shape()));
      break;

    case Primitive::kPick: {
      if (!wants(0)) break;
      const Tensor& z = value(node.inputs[0]);
      const std::size_t c = z.dim(1);
      Tensor dz(z.shape());
      for (std::size_t i = 0; i < z.dim(0); ++i) dz[i * c + attrs.labels[i]] = grad[i];
      push(0, std::move(dz));
      break;
    }

    case Primitive::kMaxReduce: {
      if (!wants(0)) break;
      Tensor dz(value(node.inputs[0]).shape());
      for (std::size_t i = 0; i < grad.size(); ++i) dz[node.saved_index[i]] = grad[i];
      push(0, std::move(dz));
      break;
    }
  }
}

Gradients Graph::backward(NodeId root) const {
  check_id(root);
  const Tensor& root_value = value(root);
  if (root_value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_string(root_value.shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> seen(nodes_.size(), false);
  grads[root.index] = Tensor(root_value.shape(), 1.0);
  seen[root.index] = true;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!seen[i] || !node.requires_grad) continue;
    backward_node(node, grads[i], grads, seen);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!seen[i] || !nodes_[i].requires_grad) grads[i] = Tensor(nodes_[i].value.shape());
  }
  return Gradients(std::move(grads));
}

GradCheckResult grad_check(const GraphBuilder& function, const Tensor& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  GradCheckResult result;
  auto evaluate = [&](const Tensor& at) {
    Graph g;
    NodeId x = g.input(at);
    NodeId root = function(g, x);
    return g.value(root).item();
  };

  Graph g;
  NodeId x = g.input(point);
  NodeId root = function(g, x);
  if (!g.value(root).all_finite()) {
    result.finite = false;
    result.max_relative_error = std::numeric_limits<double>::infinity();
    result.diagnostic = "non-finite function value at the check point";
    return result;
  }
  const Tensor analytic = g.backward(root)[x];
  if (!analytic.all_finite()) {
    result.finite = false;
    result.max_relative_error = std::numeric_limits<double>::infinity();
    result.diagnostic = "non-finite analytic gradient";
    return result;
  }

  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = evaluate(probe);
    probe[i] = point[i] - step;
    const double down = evaluate(probe);
    probe[i] = point[i];
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric)) {
      result.finite = false;
      result.max_relative_error = std::numeric_limits<double>::infinity();
      result.diagnostic = "non-finite central difference at coordinate " + std::to_string(i);
      return result;
    }
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.diagnostic = "worst coordinate " + std::to_string(i);
    }
  }
  return result;
}

}  // namespace f2at
