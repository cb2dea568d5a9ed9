#include "f2at/infotheory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace f2at::info {
namespace {

constexpr double kMassTolerance = 1e-12;

// Neumaier-compensated running sum; the identity checks compare sums of
// hundreds of thousands of terms at the 1e-12 level.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      carry_ += (sum_ - t) + v;
    } else {
      carry_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

}  // namespace

JointTable::JointTable(std::vector<Variable> variables, std::vector<double> probs)
    : variables_(std::move(variables)), probs_(std::move(probs)) {
  if (variables_.empty() || variables_.size() > kMaxVariables) {
    throw std::invalid_argument("joint table needs 1 to " + std::to_string(kMaxVariables) + " variables");
  }
  std::size_t cells = 1;
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    const Variable& v = variables_[i];
    if (v.name.empty()) throw std::invalid_argument("joint table variable " + std::to_string(i) + " has no name");
    if (v.size == 0) throw std::invalid_argument("variable '" + v.name + "' has an empty alphabet");
    for (std::size_t j = 0; j < i; ++j) {
      if (variables_[j].name == v.name) throw std::invalid_argument("duplicate variable '" + v.name + "'");
    }
    cells *= v.size;
    if (cells > kMaxCells) throw std::invalid_argument("joint table exceeds " + std::to_string(kMaxCells) + " cells");
  }
  if (probs_.size() != cells) {
    throw std::invalid_argument("joint table has " + std::to_string(probs_.size()) + " probabilities, expected " +
                                std::to_string(cells));
  }
  CompensatedSum mass;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i])) {
      throw std::invalid_argument("probability at cell " + std::to_string(i) + " is negative or non-finite");
    }
    mass.add(probs_[i]);
  }
  if (std::abs(mass.value() - 1.0) > kMassTolerance) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "joint table mass " << mass.value() << " is not 1";
    throw std::invalid_argument(msg.str());
  }
}

std::size_t JointTable::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    if (variables_[i].name == name) return i;
  }
  throw std::invalid_argument("unknown variable '" + std::string(name) + "'");
}

std::vector<double> JointTable::marginal(const std::vector<std::size_t>& vars) const {
  const std::size_t nv = variables_.size();
  std::vector<std::size_t> stride_out(nv, 0);
  std::size_t s = 1;
  for (std::size_t k = vars.size(); k-- > 0;) {
    if (vars[k] >= nv) throw std::invalid_argument("marginal: variable index out of range");
    stride_out[vars[k]] = s;
    s *= variables_[vars[k]].size;
  }
  std::vector<double> out(s, 0.0);
  std::vector<std::size_t> digit(nv, 0);
  std::size_t target = 0;
  for (double p : probs_) {
    out[target] += p;
    for (std::size_t d = nv; d-- > 0;) {
      target += stride_out[d];
      if (++digit[d] < variables_[d].size) break;
      target -= stride_out[d] * digit[d];
      digit[d] = 0;
    }
  }
  return out;
}

JointTable random_table(Rng& rng, std::vector<Variable> variables) {
  std::size_t cells = 1;
  for (const Variable& v : variables) cells *= v.size;
  std::vector<double> probs(cells);
  double total = 0.0;
  for (double& p : probs) {
    p = 1.0 - rng.uniform();
    total += p;
  }
  for (double& p : probs) p /= total;
  return JointTable(std::move(variables), std::move(probs));
}

namespace {

std::vector<std::size_t> resolve(const JointTable& t, const VarGroup& group) {
  if (group.empty()) throw std::invalid_argument("measure argument group is empty");
  std::vector<std::size_t> out;
  for (const std::string& name : group) {
    const std::size_t i = t.index_of(name);
    if (std::find(out.begin(), out.end(), i) == out.end()) out.push_back(i);
  }
  return out;
}

// Joint marginal over the union of several groups together with, for each
// group, the marginal over that group and the map from union cell to group cell.
struct UnionView {
  std::vector<double> joint;
  std::vector<std::vector<double>> group_probs;
  std::vector<std::vector<std::size_t>> group_cell;
};

UnionView union_view(const JointTable& t, const std::vector<std::vector<std::size_t>>& groups) {
  const auto& vars = t.variables();
  std::vector<std::size_t> uni;
  for (const auto& g : groups) {
    for (std::size_t i : g) {
      if (std::find(uni.begin(), uni.end(), i) == uni.end()) uni.push_back(i);
    }
  }
  UnionView view;
  view.joint = t.marginal(uni);
  const std::size_t cells = view.joint.size();
  for (const auto& g : groups) {
    view.group_probs.push_back(t.marginal(g));
    // Stride of each union position inside this group's dense layout.
    std::vector<std::size_t> stride(uni.size(), 0);
    std::size_t s = 1;
    for (std::size_t k = g.size(); k-- > 0;) {
      const auto pos = static_cast<std::size_t>(std::find(uni.begin(), uni.end(), g[k]) - uni.begin());
      stride[pos] = s;
      s *= vars[g[k]].size;
    }
    std::vector<std::size_t> map(cells);
    std::vector<std::size_t> digit(uni.size(), 0);
    std::size_t target = 0;
    for (std::size_t c = 0; c < cells; ++c) {
      map[c] = target;
      for (std::size_t d = uni.size(); d-- > 0;) {
        target += stride[d];
        if (++digit[d] < vars[uni[d]].size) break;
        target -= stride[d] * digit[d];
        digit[d] = 0;
      }
    }
    view.group_cell.push_back(std::move(map));
  }
  return view;
}

}  // namespace

double entropy(const JointTable& t, const VarGroup& a) {
  CompensatedSum acc;
  for (double p : t.marginal(resolve(t, a))) {
    if (p > 0.0) acc.add(-p * std::log2(p));
  }
  return acc.value();
}

double conditional_entropy(const JointTable& t, const VarGroup& a, const VarGroup& given) {
  const UnionView v = union_view(t, {resolve(t, a), resolve(t, given)});
  CompensatedSum acc;
  for (std::size_t c = 0; c < v.joint.size(); ++c) {
    const double p = v.joint[c];
    if (p > 0.0) acc.add(-p * std::log2(p / v.group_probs[1][v.group_cell[1][c]]));
  }
  return acc.value();
}

double mutual_information(const JointTable& t, const VarGroup& a, const VarGroup& b) {
  const UnionView v = union_view(t, {resolve(t, a), resolve(t, b)});
  CompensatedSum acc;
  for (std::size_t c = 0; c < v.joint.size(); ++c) {
    const double p = v.joint[c];
    if (p > 0.0) {
      const double pa = v.group_probs[0][v.group_cell[0][c]];
      const double pb = v.group_probs[1][v.group_cell[1][c]];
      acc.add(p * std::log2(p / (pa * pb)));
    }
  }
  return acc.value();
}

double conditional_mutual_information(const JointTable& t, const VarGroup& a, const VarGroup& b,
                                      const VarGroup& given) {
  std::vector<std::size_t> ga = resolve(t, a);
  std::vector<std::size_t> gb = resolve(t, b);
  std::vector<std::size_t> gc = resolve(t, given);
  std::vector<std::size_t> gac = ga;
  std::vector<std::size_t> gbc = gb;
  for (std::size_t i : gc) {
    if (std::find(gac.begin(), gac.end(), i) == gac.end()) gac.push_back(i);
    if (std::find(gbc.begin(), gbc.end(), i) == gbc.end()) gbc.push_back(i);
  }
  const UnionView v = union_view(t, {gac, gbc, gc});
  CompensatedSum acc;
  for (std::size_t c = 0; c < v.joint.size(); ++c) {
    const double p = v.joint[c];
    if (p > 0.0) {
      const double pac = v.group_probs[0][v.group_cell[0][c]];
      const double pbc = v.group_probs[1][v.group_cell[1][c]];
      const double pc = v.group_probs[2][v.group_cell[2][c]];
      acc.add(p * std::log2((p * pc) / (pac * pbc)));
    }
  }
  return acc.value();
}

double interaction_information(const JointTable& t, const VarGroup& a, const VarGroup& b, const VarGroup& c) {
  return mutual_information(t, a, b) - conditional_mutual_information(t, a, b, c);
}

Measure parse_measure(std::string_view id) {
  if (id == "H") return Measure::kEntropy;
  if (id == "H_joint") return Measure::kJointEntropy;
  if (id == "H_cond") return Measure::kConditionalEntropy;
  if (id == "I") return Measure::kMutualInformation;
  if (id == "I_cond") return Measure::kConditionalMutualInfo;
  if (id == "I3") return Measure::kInteractionInfo;
  throw std::invalid_argument("unknown measure id '" + std::string(id) + "'");
}

std::string_view measure_name(Measure m) {
  switch (m) {
    case Measure::kEntropy:
      return "H";
    case Measure::kJointEntropy:
      return "H_joint";
    case Measure::kConditionalEntropy:
      return "H_cond";
    case Measure::kMutualInformation:
      return "I";
    case Measure::kConditionalMutualInfo:
      return "I_cond";
    case Measure::kInteractionInfo:
      return "I3";
  }
  return "unknown";
}

double measure(const JointTable& t, Measure m, const std::vector<VarGroup>& args) {
  auto need = [&](std::size_t n) {
    if (args.size() != n) {
      throw std::invalid_argument(std::string(measure_name(m)) + " takes " + std::to_string(n) +
                                  " argument groups, got " + std::to_string(args.size()));
    }
  };
  switch (m) {
    case Measure::kEntropy:
      need(1);
      return entropy(t, args[0]);
    case Measure::kJointEntropy: {
      need(2);
      VarGroup both = args[0];
      both.insert(both.end(), args[1].begin(), args[1].end());
      return entropy(t, both);
    }
    case Measure::kConditionalEntropy:
      need(2);
      return conditional_entropy(t, args[0], args[1]);
    case Measure::kMutualInformation:
      need(2);
      return mutual_information(t, args[0], args[1]);
    case Measure::kConditionalMutualInfo:
      need(3);
      return conditional_mutual_information(t, args[0], args[1], args[2]);
    case Measure::kInteractionInfo:
      need(3);
      return interaction_information(t, args[0], args[1], args[2]);
  }
  throw std::invalid_argument("unknown measure");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

VarGroup split_group(std::string_view s) {
  VarGroup out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    std::string name = trim(s.substr(start, comma == std::string_view::npos ? s.size() - start : comma - start));
    if (name.empty()) throw std::invalid_argument("empty variable name in measure expression");
    out.push_back(std::move(name));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

double measure(const JointTable& t, std::string_view expression) {
  const std::string expr = trim(expression);
  const auto open = expr.find('(');
  if (open == std::string::npos || expr.back() != ')') {
    throw std::invalid_argument("malformed measure expression '" + expr + "'");
  }
  const std::string head = trim(std::string_view(expr).substr(0, open));
  const std::string_view body = std::string_view(expr).substr(open + 1, expr.size() - open - 2);
  const auto bar = body.find('|');
  const std::string_view left = body.substr(0, bar);
  std::vector<VarGroup> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t semi = left.find(';', start);
    parts.push_back(split_group(left.substr(start, semi == std::string_view::npos ? left.size() - start : semi - start)));
    if (semi == std::string_view::npos) break;
    start = semi + 1;
  }
  const bool conditional = bar != std::string_view::npos;
  if (conditional) parts.push_back(split_group(body.substr(bar + 1)));

  if (head == "H") {
    if (parts.size() == 1) return entropy(t, parts[0]);
    if (conditional && parts.size() == 2) return conditional_entropy(t, parts[0], parts[1]);
  } else if (head == "I") {
    if (!conditional && parts.size() == 2) return mutual_information(t, parts[0], parts[1]);
    if (conditional && parts.size() == 3) return conditional_mutual_information(t, parts[0], parts[1], parts[2]);
    if (!conditional && parts.size() == 3) return interaction_information(t, parts[0], parts[1], parts[2]);
  }
  throw std::invalid_argument("unknown measure '" + expr + "'");
}

std::vector<Residual> verify_identities(const JointTable& t) {
  std::vector<Residual> out;
  const auto& vars = t.variables();
  const std::size_t n = vars.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const VarGroup x{vars[i].name};
      const VarGroup y{vars[j].name};
      const std::string tag = "(" + vars[i].name + "," + vars[j].name + ")";
      const double mi = mutual_information(t, x, y);
      const double hx = entropy(t, x);
      const double hy = entropy(t, y);
      const double hxy = entropy(t, {vars[i].name, vars[j].name});
      const double hx_y = conditional_entropy(t, x, y);
      const double hy_x = conditional_entropy(t, y, x);
      out.push_back({"mi_forms.h_minus_conditional_x" + tag, std::abs(mi - (hx - hx_y))});
      out.push_back({"mi_forms.h_minus_conditional_y" + tag, std::abs(mi - (hy - hy_x))});
      out.push_back({"mi_forms.marginals_minus_joint" + tag, std::abs(mi - (hx + hy - hxy))});
      out.push_back({"chain_rule" + tag, std::abs(hxy - (hx + hy_x))});
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) {
        if (i == j || j == k || i == k) continue;
        const VarGroup x{vars[i].name};
        const VarGroup y{vars[j].name};
        const VarGroup f{vars[k].name};
        const std::string tag = "(" + vars[i].name + "," + vars[j].name + "," + vars[k].name + ")";
        const double hy_x = conditional_entropy(t, y, x);
        const double hy_xf = conditional_entropy(t, y, {vars[i].name, vars[k].name});
        const double ify_x = conditional_mutual_information(t, f, y, x);
        out.push_back({"conditional_entropy_split" + tag, std::abs(hy_x - (hy_xf + ify_x))});
        const double ixf = mutual_information(t, x, f);
        const double ixf_y = conditional_mutual_information(t, x, f, y);
        const double ixyf = interaction_information(t, x, y, f);
        out.push_back({"mutual_information_split" + tag, std::abs(ixf - (ixf_y + ixyf))});
      }
    }
  }
  return out;
}

double max_residual(const std::vector<Residual>& residuals) {
  double m = 0.0;
  for (const Residual& r : residuals) m = std::max(m, r.residual);
  return m;
}

JointTable system_table(const RandomSystem& system) {
  const JointTable& base = system.base;
  if (base.variables().size() != 2) throw std::invalid_argument("random system base must have two variables");
  const std::size_t nn = base.variables()[0].size;
  const std::size_t np = base.variables()[1].size;
  if (system.natural_values.size() != nn || system.perturbed_values.size() != np) {
    throw std::invalid_argument("random system value maps do not match the base alphabets");
  }
  if (system.channel.size() != system.image_alphabet || system.channel.empty()) {
    throw std::invalid_argument("feature channel needs one row per image value");
  }
  const std::size_t nf = system.channel[0].size();
  for (std::size_t x = 0; x < system.channel.size(); ++x) {
    const auto& row = system.channel[x];
    if (row.size() != nf) throw std::invalid_argument("feature channel rows differ in length");
    double s = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) throw std::invalid_argument("feature channel has a negative entry in row " + std::to_string(x));
      s += p;
    }
    if (std::abs(s - 1.0) > kMassTolerance) {
      throw std::invalid_argument("feature channel row " + std::to_string(x) + " does not sum to 1");
    }
  }

  const std::size_t na = system.image_alphabet;
  std::vector<double> probs(nn * np * na * nf, 0.0);
  std::vector<std::int64_t> owner(na, -1);
  for (std::size_t i = 0; i < nn; ++i) {
    for (std::size_t j = 0; j < np; ++j) {
      const double p = base.probs()[i * np + j];
      if (p == 0.0) continue;
      const std::uint64_t x = system.natural_values[i] + system.perturbed_values[j];
      if (x >= na) throw std::invalid_argument("combined image value " + std::to_string(x) + " outside the alphabet");
      const auto pair_id = static_cast<std::int64_t>(i * np + j);
      if (owner[x] != -1 && owner[x] != pair_id) {
        throw std::invalid_argument("combine map is not injective: value " + std::to_string(x) +
                                    " is reached by two pattern pairs");
      }
      owner[x] = pair_id;
      for (std::size_t f = 0; f < nf; ++f) {
        probs[((i * np + j) * na + x) * nf + f] = p * system.channel[x][f];
      }
    }
  }
  return JointTable({{"x_nat", nn}, {"x_pert", np}, {"x_adv", na}, {"feature", nf}}, std::move(probs));
}

TheoremReport verify_theorems(const RandomSystem& system) {
  const JointTable t = system_table(system);
  const VarGroup nat{"x_nat"}, pert{"x_pert"}, adv{"x_adv"}, feat{"feature"};
  TheoremReport r;
  r.mi_image_feature = mutual_information(t, adv, feat);
  r.mi_natural_feature = mutual_information(t, nat, feat);
  r.mi_perturbed_feature = mutual_information(t, pert, feat);
  r.h_feature_given_image = conditional_entropy(t, feat, adv);
  r.h_feature_given_pair = conditional_entropy(t, feat, {"x_nat", "x_pert"});
  r.triple_mi_value = interaction_information(t, nat, pert, feat);
  const double decomposition = r.mi_natural_feature + r.mi_perturbed_feature - r.h_feature_given_image +
                               r.h_feature_given_pair - r.triple_mi_value;
  r.theorem1_residual = std::abs(r.mi_image_feature - decomposition);
  r.h_equality_residual = std::abs(r.h_feature_given_image - r.h_feature_given_pair);
  r.linear_approximation_error =
      std::abs(r.mi_image_feature - (r.mi_natural_feature + r.mi_perturbed_feature));
  return r;
}

RandomSystem make_bitplane_system(Rng& rng, const SystemOptions& o) {
  if (o.depth < 1 || o.k > o.depth) throw std::invalid_argument("bit-plane system needs 0 <= K <= R");
  if (o.pixels == 0 || o.depth * o.pixels > 20) throw std::invalid_argument("bit-plane system image too large");
  if (o.feature_alphabet == 0) throw std::invalid_argument("feature alphabet must be non-empty");
  const unsigned low_bits = o.depth - o.k;
  const std::size_t nat_levels = std::size_t{1} << o.k;
  const std::size_t pert_levels = std::size_t{1} << low_bits;

  auto enumerate = [&](std::size_t levels, unsigned shift) {
    std::vector<std::uint64_t> values;
    std::size_t count = 1;
    for (unsigned p = 0; p < o.pixels; ++p) count *= levels;
    for (std::size_t code = 0; code < count; ++code) {
      std::uint64_t packed = 0;
      std::size_t rest = code;
      for (unsigned p = 0; p < o.pixels; ++p) {
        packed |= static_cast<std::uint64_t>((rest % levels) << shift) << (o.depth * p);
        rest /= levels;
      }
      values.push_back(packed);
    }
    return values;
  };

  RandomSystem s{JointTable({{"x_nat", 1}, {"x_pert", 1}}, {1.0}), enumerate(nat_levels, low_bits),
                 enumerate(pert_levels, 0), std::size_t{1} << (o.depth * o.pixels), {}};
  const std::size_t nn = s.natural_values.size();
  const std::size_t np = s.perturbed_values.size();

  std::vector<double> probs(nn * np);
  if (o.independent_patterns) {
    std::vector<double> pn(nn), pp(np);
    double sn = 0.0, sp = 0.0;
    for (double& v : pn) sn += (v = 1.0 - rng.uniform());
    for (double& v : pp) sp += (v = 1.0 - rng.uniform());
    for (std::size_t i = 0; i < nn; ++i) {
      for (std::size_t j = 0; j < np; ++j) probs[i * np + j] = (pn[i] / sn) * (pp[j] / sp);
    }
  } else {
    double total = 0.0;
    for (double& v : probs) total += (v = 1.0 - rng.uniform());
    for (double& v : probs) v /= total;
  }
  double total = 0.0;
  for (double v : probs) total += v;
  for (double& v : probs) v /= total;
  s.base = JointTable({{"x_nat", nn}, {"x_pert", np}}, std::move(probs));

  s.channel.assign(s.image_alphabet, std::vector<double>(o.feature_alphabet, 0.0));
  if (o.feature_from_natural_only) {
    std::unordered_map<std::uint64_t, std::size_t> feature_of;
    for (std::uint64_t v : s.natural_values) feature_of[v] = rng.below(o.feature_alphabet);
    std::uint64_t natural_mask = 0;
    for (unsigned p = 0; p < o.pixels; ++p) {
      natural_mask |= static_cast<std::uint64_t>(((nat_levels - 1) << low_bits)) << (o.depth * p);
    }
    for (std::size_t x = 0; x < s.image_alphabet; ++x) s.channel[x][feature_of.at(x & natural_mask)] = 1.0;
  } else {
    for (auto& row : s.channel) {
      double rs = 0.0;
      for (double& v : row) rs += (v = 1.0 - rng.uniform());
      for (double& v : row) v /= rs;
    }
  }
  return s;
}

}  // namespace f2at::info
