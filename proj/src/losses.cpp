#include "f2at/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace f2at {

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(upsilon > 0.0)) throw std::invalid_argument("upsilon must be positive");
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be non-negative");
  if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be non-negative");
}

double margin(std::span<const double> logits, std::size_t y) {
  if (logits.size() < 2) throw std::invalid_argument("margin needs at least two classes");
  if (y >= logits.size()) {
    throw std::invalid_argument("margin: label " + std::to_string(y) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
  }
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (c != y) other = std::max(other, logits[c]);
  }
  return logits[y] - other;
}

NodeId margin_loss(Graph& g, NodeId logits, const std::vector<std::size_t>& labels) {
  return g.mean(g.sub(g.max_reduce(logits), g.pick(logits, labels)));
}

NodeId soft_margin_loss(Graph& g, NodeId logits, const std::vector<std::size_t>& labels, double upsilon) {
  if (!(upsilon > 0.0)) throw std::invalid_argument("upsilon must be positive");
  // smooth = m + lse(upsilon * (z - m)) / upsilon with m the runner-up logit
  // held constant. The shifted row max is exactly 0, so the rounded lse term
  // is never negative and smooth >= m holds in floating point too.
  const Tensor& z = g.value(logits);
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw std::invalid_argument("soft_margin_loss: logits " + shape_string(z.shape()) + " need one label per row");
  }
  const std::size_t rows = z.dim(0), c = z.dim(1);
  Tensor runner_up({rows});
  Tensor shift(z.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] >= c) throw std::invalid_argument("soft_margin_loss: label out of range");
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (j != labels[i]) m = std::max(m, z[i * c + j]);
    }
    runner_up[i] = m;
    for (std::size_t j = 0; j < c; ++j) shift[i * c + j] = m;
  }
  const NodeId excess = g.log_sum_exp_excluding(g.scale(g.sub(logits, g.constant(std::move(shift))), upsilon), labels);
  const NodeId smooth = g.add(g.constant(std::move(runner_up)), g.scale(excess, 1.0 / upsilon));
  return g.scale(g.mean(g.sub(g.pick(logits, labels), smooth)), -1.0);
}

NodeId pattern_dependent_loss(Graph& g, NodeId f_nat, NodeId f_pert, NodeId f_adv, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  const Shape& a = g.value(f_adv).shape();
  if (g.value(f_nat).shape() != a || g.value(f_pert).shape() != a || a.size() != 2) {
    throw std::invalid_argument("pattern_dependent_loss: feature batches " + shape_string(g.value(f_nat).shape()) +
                                ", " + shape_string(g.value(f_pert).shape()) + ", " + shape_string(a) +
                                " must be equal [N,D]");
  }
  const NodeId negatives = g.log_sum_exp(g.scale(g.pairwise_cosine(f_adv, f_pert), 1.0 / tau));
  const NodeId positives = g.scale(g.cosine(f_nat, f_adv), 1.0 / tau);
  return g.mean(g.sub(negatives, positives));
}

double margin_loss(const Tensor& logits, const std::vector<std::size_t>& labels) {
  Graph g;
  return g.value(margin_loss(g, g.constant(logits), labels)).item();
}

double soft_margin_loss(const Tensor& logits, const std::vector<std::size_t>& labels, double upsilon) {
  Graph g;
  return g.value(soft_margin_loss(g, g.constant(logits), labels, upsilon)).item();
}

LossNodes build_total_loss(Graph& g, const BoundNetwork& net, const Tensor& adv_batch,
                           const std::vector<std::size_t>& labels, const LossConfig& config, unsigned k) {
  config.validate();
  auto [natural, perturbed] = slice_batch(adv_batch, k);
  const ForwardNodes adv = forward(g, net, g.constant(adv_batch));
  const ForwardNodes nat = forward(g, net, g.constant(std::move(natural)));
  const NodeId f_pert = extract_features(g, net, g.constant(std::move(perturbed)));

  LossNodes out;
  out.ce = g.mean(g.softmax_cross_entropy(adv.logits, labels));
  out.pd = pattern_dependent_loss(g, nat.features, f_pert, adv.features, config.tau);
  out.mg_soft = soft_margin_loss(g, nat.logits, labels, config.upsilon);
  out.total = g.add(g.add(out.ce, g.scale(out.pd, config.alpha)), g.scale(out.mg_soft, config.gamma));
  return out;
}

LossBreakdown breakdown(const Graph& g, const LossNodes& nodes) {
  return {g.value(nodes.ce).item(), g.value(nodes.pd).item(), g.value(nodes.mg_soft).item(),
          g.value(nodes.total).item()};
}

LossBreakdown total_loss(const NetworkParams& params, const Tensor& clean_batch, const Tensor& adv_batch,
                         const std::vector<std::size_t>& labels, const LossConfig& config, unsigned k) {
  if (clean_batch.shape() != adv_batch.shape()) {
    throw std::invalid_argument("total_loss: clean batch " + shape_string(clean_batch.shape()) +
                                " vs adversarial batch " + shape_string(adv_batch.shape()));
  }
  Graph g;
  const BoundNetwork net = bind(g, params, false);
  return breakdown(g, build_total_loss(g, net, adv_batch, labels, config, k));
}

}  // namespace f2at
