#pragma once
// Exact discrete information measures (log base 2) by enumeration over a dense
// joint probability table, and residual checks of the classic identities plus
// the four-variable decomposition behind bit-plane pattern features.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "f2at/random.hpp"

namespace f2at::info {

struct Variable {
  std::string name;
  std::size_t size = 0;
};

// Row-major over the variables in declaration order (last variable fastest).
class JointTable {
 public:
  static constexpr std::size_t kMaxVariables = 4;
  static constexpr std::size_t kMaxCells = std::size_t{1} << 22;

  // Throws std::invalid_argument on duplicate/empty names, zero alphabets,
  // more than kMaxVariables variables, negative probabilities or total mass
  // further than 1e-12 from 1.
  JointTable(std::vector<Variable> variables, std::vector<double> probs);

  const std::vector<Variable>& variables() const { return variables_; }
  const std::vector<double>& probs() const { return probs_; }
  // Throws std::invalid_argument for an unknown name.
  std::size_t index_of(std::string_view name) const;

  // Dense marginal over `vars` (indices into variables()), in the given order.
  std::vector<double> marginal(const std::vector<std::size_t>& vars) const;

 private:
  std::vector<Variable> variables_;
  std::vector<double> probs_;
};

// Table with every cell drawn uniform (0,1] and normalized.
JointTable random_table(Rng& rng, std::vector<Variable> variables);

using VarGroup = std::vector<std::string>;

enum class Measure {
  kEntropy,                // H(A)
  kJointEntropy,           // H(A,B)
  kConditionalEntropy,     // H(A|B)
  kMutualInformation,      // I(A;B)
  kConditionalMutualInfo,  // I(A;B|C)
  kInteractionInfo,        // I(A;B;C) = I(A;B) - I(A;B|C)
};

Measure parse_measure(std::string_view id);
std::string_view measure_name(Measure m);

// Each measure is evaluated directly from its defining sum; 0 log 0 = 0.
double entropy(const JointTable& t, const VarGroup& a);
double conditional_entropy(const JointTable& t, const VarGroup& a, const VarGroup& given);
double mutual_information(const JointTable& t, const VarGroup& a, const VarGroup& b);
double conditional_mutual_information(const JointTable& t, const VarGroup& a, const VarGroup& b,
                                      const VarGroup& given);
double interaction_information(const JointTable& t, const VarGroup& a, const VarGroup& b, const VarGroup& c);

// Generic entry point: groups are the measure's arguments in order. H(A,B)
// takes two single-variable groups. Throws on unknown variables or arity.
double measure(const JointTable& t, Measure m, const std::vector<VarGroup>& args);
// Parses "H(X)", "H(X,Y)", "H(X|Y,Z)", "I(X;Y)", "I(X;Y|Z)", "I(X;Y;Z)".
double measure(const JointTable& t, std::string_view expression);

struct Residual {
  std::string name;
  double residual = 0.0;
};

// Exact identities over every variable pair / ordered triple:
//   I(X;Y) = H(X) - H(X|Y) = H(Y) - H(Y|X) = H(X) + H(Y) - H(X,Y)
//   H(X,Y) = H(X) + H(Y|X)
//   H(Y|X) = H(Y|X,F) + I(F;Y|X)
//   I(X;F) = I(X;F|Y) + I(X;Y;F)
std::vector<Residual> verify_identities(const JointTable& t);
double max_residual(const std::vector<Residual>& residuals);

// Four-variable system: (X_nat, X_pert) ~ base, X' = combine(X_nat, X_pert)
// by addition of the packed pattern values, F' ~ channel[X'].
struct RandomSystem {
  JointTable base;                              // variables (x_nat, x_pert)
  std::vector<std::uint64_t> natural_values;    // symbol -> packed value
  std::vector<std::uint64_t> perturbed_values;  // symbol -> packed value
  std::size_t image_alphabet = 0;               // X' takes values in [0, image_alphabet)
  std::vector<std::vector<double>> channel;     // channel[x'][f], rows sum to 1
};

// Joint over (x_nat, x_pert, x_adv, feature). Throws std::invalid_argument
// if two supported (x_nat, x_pert) pairs combine to the same X'.
JointTable system_table(const RandomSystem& system);

struct TheoremReport {
  double mi_image_feature = 0.0;        // I(X';F')
  double mi_natural_feature = 0.0;      // I(X_nat;F')
  double mi_perturbed_feature = 0.0;    // I(X_pert;F')
  double h_feature_given_image = 0.0;   // H(F'|X')
  double h_feature_given_pair = 0.0;    // H(F'|X_nat,X_pert)
  double triple_mi_value = 0.0;         // I(X_nat;X_pert;F'), may be negative
  double theorem1_residual = 0.0;       // five-term decomposition
  double h_equality_residual = 0.0;     // |H(F'|X') - H(F'|X_nat,X_pert)|
  double linear_approximation_error = 0.0;  // |I(X';F') - I(X_nat;F') - I(X_pert;F')|
};

TheoremReport verify_theorems(const RandomSystem& system);

struct SystemOptions {
  unsigned depth = 4;
  unsigned k = 2;
  unsigned pixels = 2;
  std::size_t feature_alphabet = 4;
  bool independent_patterns = true;
  // Feature depends on the natural bits of X' only (deterministically).
  bool feature_from_natural_only = false;
};

// Bit-plane system over `pixels`-pixel images of the given depth: natural
// symbols enumerate every top-K pattern, perturbed symbols every low pattern.
RandomSystem make_bitplane_system(Rng& rng, const SystemOptions& options);

}  // namespace f2at::info
