#include "f2at/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "f2at/random.hpp"

namespace f2at {

void NetworkConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw std::invalid_argument("network input has a zero dimension");
  if (height % 4 != 0 || width % 4 != 0) {
    throw std::invalid_argument("network input " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by the two 2x2 pools");
  }
  if (conv1_channels == 0 || conv2_channels == 0 || feature_dim == 0) {
    throw std::invalid_argument("network has a zero-sized layer");
  }
  if (num_classes < 2) throw std::invalid_argument("network needs at least two classes");
}

std::vector<Tensor*> NetworkParams::all() {
  std::vector<Tensor*> out;
  for (Tensor& t : extractor) out.push_back(&t);
  for (Tensor& t : head) out.push_back(&t);
  return out;
}

std::vector<const Tensor*> NetworkParams::all() const {
  std::vector<const Tensor*> out;
  for (const Tensor& t : extractor) out.push_back(&t);
  for (const Tensor& t : head) out.push_back(&t);
  return out;
}

NetworkParams init_network(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto weights = [&](Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
  };
  NetworkParams p;
  p.config = config;
  const std::size_t c1 = config.conv1_channels, c2 = config.conv2_channels, fd = config.feature_dim;
  p.extractor.push_back(weights({c1, config.channels, 3, 3}, config.channels * 9));
  p.extractor.emplace_back(Shape{c1});
  p.extractor.push_back(weights({c2, c1, 3, 3}, c1 * 9));
  p.extractor.emplace_back(Shape{c2});
  p.extractor.push_back(weights({config.flat_dim(), fd}, config.flat_dim()));
  p.extractor.emplace_back(Shape{fd});
  p.head.push_back(weights({fd, config.num_classes}, fd));
  p.head.emplace_back(Shape{config.num_classes});
  return p;
}

std::vector<NodeId> BoundNetwork::all() const {
  std::vector<NodeId> out = extractor;
  out.insert(out.end(), head.begin(), head.end());
  return out;
}

BoundNetwork bind(Graph& g, const NetworkParams& params, bool trainable) {
  BoundNetwork net;
  net.config = &params.config;
  for (const Tensor& t : params.extractor) net.extractor.push_back(g.input(t, trainable));
  for (const Tensor& t : params.head) net.head.push_back(g.input(t, trainable));
  return net;
}

NodeId extract_features(Graph& g, const BoundNetwork& net, NodeId batch) {
  const NetworkConfig& c = *net.config;
  const Shape& s = g.value(batch).shape();
  if (s.size() != 4 || s[1] != c.channels || s[2] != c.height || s[3] != c.width) {
    throw std::invalid_argument("network expects [N," + std::to_string(c.channels) + "," + std::to_string(c.height) +
                                "," + std::to_string(c.width) + "], got " + shape_string(s));
  }
  NodeId h = g.relu(g.bias_add(g.conv2d(batch, net.extractor[0], 1), net.extractor[1]));
  h = g.max_pool2(h);
  h = g.relu(g.bias_add(g.conv2d(h, net.extractor[2], 1), net.extractor[3]));
  h = g.max_pool2(h);
  h = g.flatten(h);
  return g.bias_add(g.matmul(h, net.extractor[4]), net.extractor[5]);
}

NodeId classify(Graph& g, const BoundNetwork& net, NodeId features) {
  return g.bias_add(g.matmul(features, net.head[0]), net.head[1]);
}

ForwardNodes forward(Graph& g, const BoundNetwork& net, NodeId batch) {
  const NodeId features = extract_features(g, net, batch);
  return {features, classify(g, net, features)};
}

ForwardValues forward(const NetworkParams& params, const Tensor& batch) {
  Graph g;
  const BoundNetwork net = bind(g, params, false);
  const ForwardNodes nodes = forward(g, net, g.constant(batch));
  return {g.value(nodes.features), g.value(nodes.logits)};
}

NodeId NetworkClassifier::logits(Graph& g, NodeId batch) const {
  const BoundNetwork net = bind(g, *params_, false);
  return forward(g, net, batch).logits;
}

Tensor predict_logits(const Classifier& model, const Tensor& batch) {
  Graph g;
  const NodeId out = model.logits(g, g.constant(batch));
  return g.value(out);
}

std::vector<std::size_t> predict_labels(const Classifier& model, const Tensor& batch) {
  const Tensor logits = predict_logits(model, batch);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'F', '2', 'A', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(std::string("checkpoint truncated reading ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated in tensor data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(std::ostream& out, const NetworkParams& params) {
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const NetworkConfig& c = params.config;
  for (std::size_t v : {c.channels, c.height, c.width, c.num_classes, c.conv1_channels, c.conv2_channels, c.feature_dim}) {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
  const auto tensors = params.all();
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t->data()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint");
}

NetworkParams load_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not an F2AT checkpoint (bad magic)");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint format version " + std::to_string(version));
  }
  NetworkConfig c;
  c.channels = get_u32(in, "config");
  c.height = get_u32(in, "config");
  c.width = get_u32(in, "config");
  c.num_classes = get_u32(in, "config");
  c.conv1_channels = get_u32(in, "config");
  c.conv2_channels = get_u32(in, "config");
  c.feature_dim = get_u32(in, "config");
  c.validate();
  // Shapes are fixed by the config; the stored shapes must agree with them.
  NetworkParams params = init_network(c, 0);
  const std::uint32_t count = get_u32(in, "tensor count");
  if (count != params.parameter_count()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                             std::to_string(params.parameter_count()));
  }
  for (Tensor* t : params.all()) {
    const std::uint32_t rank = get_u32(in, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = get_u32(in, "shape");
    if (shape != t->shape()) {
      throw std::runtime_error("checkpoint tensor shape " + shape_string(shape) + " does not match " +
                               shape_string(t->shape()));
    }
    for (double& v : t->data()) v = get_f64(in);
  }
  return params;
}

void save_checkpoint(const std::string& path, const NetworkParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  save_checkpoint(out, params);
}

NetworkParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

OptimizerState make_optimizer_state(const NetworkParams& params, double base_lr) {
  OptimizerState s;
  s.base_lr = base_lr;
  for (const Tensor* t : params.all()) s.velocity.emplace_back(t->shape());
  return s;
}

double learning_rate(double base_lr, std::size_t epoch, std::size_t total_epochs,
                     std::span<const double> milestone_fractions) {
  double lr = base_lr;
  for (double f : milestone_fractions) {
    if (static_cast<double>(epoch) >= f * static_cast<double>(total_epochs)) lr /= 10.0;
  }
  return lr;
}

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::span<Tensor> velocity,
              double lr, const SgdConfig& config) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw std::invalid_argument("sgd_step: " + std::to_string(params.size()) + " params, " +
                                std::to_string(grads.size()) + " grads, " + std::to_string(velocity.size()) +
                                " velocities");
  }
  if (!(config.max_grad_norm >= 0.0)) throw std::invalid_argument("sgd_step: max_grad_norm must be non-negative");
  double clip = 1.0;
  if (config.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (const Tensor& g : grads) {
      for (double x : g.data()) sq += x * x;
    }
    const double norm = std::sqrt(sq);
    if (norm > config.max_grad_norm) clip = config.max_grad_norm / norm;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& v = velocity[i];
    if (p.shape() != g.shape() || p.shape() != v.shape()) {
      throw std::invalid_argument("sgd_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                                  shape_string(p.shape()) + " vs grad " + shape_string(g.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = config.momentum * v[j] + (clip * g[j] + config.weight_decay * p[j]);
      p[j] -= lr * v[j];
    }
  }
}

void sgd_step(NetworkParams& params, std::span<const Tensor> grads, OptimizerState& state, double lr,
              const SgdConfig& config) {
  const std::vector<Tensor*> ptrs = params.all();
  sgd_step(ptrs, grads, state.velocity, lr, config);
}

}  // namespace f2at
