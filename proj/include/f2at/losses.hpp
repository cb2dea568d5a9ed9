#pragma once
// Margin, hard and soft margin losses, the pattern-dependent contrastive loss
// and the combined objective ce + alpha * pd + gamma * mg_soft.

#include <span>
#include <vector>

#include "f2at/bitplane.hpp"
#include "f2at/model.hpp"
#include "f2at/tensor.hpp"

namespace f2at {

struct LossConfig {
  double alpha = 0.1;
  double gamma = 1.0;
  double tau = 0.07;
  double upsilon = 0.995;

  // Throws std::invalid_argument unless tau > 0, upsilon > 0, alpha >= 0 and
  // gamma >= 0.
  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double pd = 0.0;
  double mg_soft = 0.0;
  double total = 0.0;
};

// logits[y] - max_{y' != y} logits[y']. Throws for fewer than two classes.
double margin(std::span<const double> logits, std::size_t y);

// mean(max_c h[c] - h[y]) over a [N,C] logits node.
NodeId margin_loss(Graph& g, NodeId logits, const std::vector<std::size_t>& labels);
// -mean(h[y] - (1/upsilon) * ln sum_{y' != y} exp(upsilon * h[y'])).
NodeId soft_margin_loss(Graph& g, NodeId logits, const std::vector<std::size_t>& labels, double upsilon);
// mean_j [ -cos(f_nat[j], f_adv[j]) / tau + ln sum_i exp(cos(f_pert[i], f_adv[j]) / tau) ]
// over [N,D] feature nodes.
NodeId pattern_dependent_loss(Graph& g, NodeId f_nat, NodeId f_pert, NodeId f_adv, double tau);

// Value-only forms.
double margin_loss(const Tensor& logits, const std::vector<std::size_t>& labels);
double soft_margin_loss(const Tensor& logits, const std::vector<std::size_t>& labels, double upsilon);

struct LossNodes {
  NodeId ce;
  NodeId pd;
  NodeId mg_soft;
  NodeId total;
};

// Records the full objective for a trainable network bound on `g`: the
// adversarial batch is quantized at 8 bits and sliced at k; ce uses the
// adversarial logits, pd the three feature batches, mg_soft the logits of the
// natural-pattern batch.
LossNodes build_total_loss(Graph& g, const BoundNetwork& net, const Tensor& adv_batch,
                           const std::vector<std::size_t>& labels, const LossConfig& config, unsigned k);

LossBreakdown breakdown(const Graph& g, const LossNodes& nodes);

// Throws std::invalid_argument if adv_batch and clean_batch have different
// shapes. The clean batch only fixes the reference for that check.
LossBreakdown total_loss(const NetworkParams& params, const Tensor& clean_batch, const Tensor& adv_batch,
                         const std::vector<std::size_t>& labels, const LossConfig& config, unsigned k);

}  // namespace f2at
