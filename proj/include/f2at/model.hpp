#pragma once
// Compact CNN h = T_w o E_psi:
//   extractor  conv3x3(16) -> relu -> pool2 -> conv3x3(32) -> relu -> pool2 -> flatten -> dense(128)
//   head       dense(num_classes)
// plus heavy-ball SGD with weight decay and a step learning-rate schedule.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "f2at/tensor.hpp"

namespace f2at {

struct NetworkConfig {
  std::size_t channels = 3;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t num_classes = 10;
  std::size_t conv1_channels = 16;
  std::size_t conv2_channels = 32;
  std::size_t feature_dim = 128;

  // Throws std::invalid_argument for zero-sized layers or spatial sizes that
  // the two 2x2 pools cannot divide.
  void validate() const;
  std::size_t flat_dim() const { return conv2_channels * (height / 4) * (width / 4); }
  Shape input_shape() const { return {channels, height, width}; }
  bool operator==(const NetworkConfig&) const = default;
};

struct NetworkParams {
  NetworkConfig config;
  // conv1_w [16,C,3,3], conv1_b [16], conv2_w [32,16,3,3], conv2_b [32], fc_w [flat,128], fc_b [128]
  std::vector<Tensor> extractor;
  // head_w [128,classes], head_b [classes]
  std::vector<Tensor> head;

  std::size_t parameter_count() const { return extractor.size() + head.size(); }
  // Extractor tensors followed by head tensors.
  std::vector<Tensor*> all();
  std::vector<const Tensor*> all() const;
  bool operator==(const NetworkParams&) const = default;
};

// Fan-in scaled uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
NetworkParams init_network(const NetworkConfig& config, std::uint64_t seed);

// Parameters recorded on a graph as leaves.
struct BoundNetwork {
  const NetworkConfig* config = nullptr;
  std::vector<NodeId> extractor;
  std::vector<NodeId> head;
  std::vector<NodeId> all() const;
};

BoundNetwork bind(Graph& g, const NetworkParams& params, bool trainable);

// Throws std::invalid_argument unless batch is [N,C,H,W] matching the config.
NodeId extract_features(Graph& g, const BoundNetwork& net, NodeId batch);
NodeId classify(Graph& g, const BoundNetwork& net, NodeId features);

struct ForwardNodes {
  NodeId features;
  NodeId logits;
};
ForwardNodes forward(Graph& g, const BoundNetwork& net, NodeId batch);

struct ForwardValues {
  Tensor features;
  Tensor logits;
};
ForwardValues forward(const NetworkParams& params, const Tensor& batch);

// Anything that maps an input batch to logits on a graph. Attacks only need
// this surface.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Shape input_shape() const = 0;
  virtual std::size_t num_classes() const = 0;
  // Records the forward pass; parameters enter as constants.
  virtual NodeId logits(Graph& g, NodeId batch) const = 0;
};

class NetworkClassifier final : public Classifier {
 public:
  explicit NetworkClassifier(const NetworkParams& params) : params_(&params) {}
  Shape input_shape() const override { return params_->config.input_shape(); }
  std::size_t num_classes() const override { return params_->config.num_classes; }
  NodeId logits(Graph& g, NodeId batch) const override;

 private:
  const NetworkParams* params_;
};

// Logits of a whole batch without keeping a graph.
Tensor predict_logits(const Classifier& model, const Tensor& batch);
std::vector<std::size_t> predict_labels(const Classifier& model, const Tensor& batch);

// Binary checkpoint: "F2AT", u32 format version, u32 x 7 NetworkConfig fields,
// u32 tensor count, then per tensor u32 rank, u32 dims, little-endian f64 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(std::ostream& out, const NetworkParams& params);
NetworkParams load_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const NetworkParams& params);
NetworkParams load_checkpoint(const std::string& path);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 2e-4;
  // Rescales the gradients when their global L2 norm exceeds this. 0 disables.
  double max_grad_norm = 0.0;
};

struct OptimizerState {
  std::vector<Tensor> velocity;
  std::size_t epoch = 0;
  double base_lr = 0.1;
};

OptimizerState make_optimizer_state(const NetworkParams& params, double base_lr);

// base_lr scaled by 0.1 for every milestone m with epoch >= m * total_epochs.
double learning_rate(double base_lr, std::size_t epoch, std::size_t total_epochs,
                     std::span<const double> milestone_fractions);

// v <- momentum * v + (c * grad + weight_decay * param);  param <- param - lr * v
// with c = min(1, max_grad_norm / ||grads||_2) over all tensors, or 1 when off.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::span<Tensor> velocity,
              double lr, const SgdConfig& config);
void sgd_step(NetworkParams& params, std::span<const Tensor> grads, OptimizerState& state, double lr,
              const SgdConfig& config);

}  // namespace f2at
