#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "itlumm/activation.hpp"
#include "itlumm/encoder.hpp"
#include "itlumm/matrix.hpp"
#include "itlumm/partition.hpp"
#include "itlumm/rng.hpp"

namespace itlumm {

enum class Objective { mse, kld };

std::string_view to_string(Objective obj);
Objective parse_objective(std::string_view name);

/// Settings for fitting a lookup table.
struct FitConfig {
  double lambda = 1.0;
  Objective objective = Objective::mse;
  Activation nonlinearity = Activation::identity;
  std::size_t opt_steps = 300;
  double learn_rate = 0.05;

  /// Throws ArgumentError for negative lambda, non-positive learn rate, or KLD
  /// without softmax.
  void validate() const;
};

/// Per-codebook prototypes. Block c is 16 × |chunk c| and lives on the
/// chunk's (original) dimensions; the dense KC × D view is zero elsewhere.
struct PrototypeSet {
  PartitionSpec spec;
  std::vector<Matrix> blocks;

  Matrix dense() const;
};

struct QuantizedTable {
  std::vector<std::uint8_t> q;  // same layout as LookupTable::t
  std::vector<double> scale;    // per output column
  std::vector<double> offset;   // per output column

  friend bool operator==(const QuantizedTable&, const QuantizedTable&) = default;
};

/// C × 16 × M partial inner products, stored as a 16C × M matrix where row
/// 16c + k is bucket k of codebook c.
struct LookupTable {
  Matrix t;
  std::optional<QuantizedTable> quantized;

  std::size_t codebooks() const { return t.rows() / kBuckets; }
  std::size_t outputs() const { return t.cols(); }
  double at(std::size_t c, std::size_t k, std::size_t m) const { return t(c * kBuckets + k, m); }
  double dequantized(std::size_t c, std::size_t k, std::size_t m) const;

  friend bool operator==(const LookupTable&, const LookupTable&) = default;
};

/// Deployed approximation of σ(A·B + bias).
struct AmmOperator {
  PartitionSpec spec;
  std::vector<CodebookEncoder> encoders;
  LookupTable table;
  std::vector<double> bias;
  Activation nonlinearity = Activation::identity;

  std::size_t input_dim() const { return spec.dims(); }
  std::size_t output_dim() const { return table.outputs(); }
  /// Throws ShapeError when the parts disagree on C, K or M.
  void validate() const;

  friend bool operator==(const AmmOperator&, const AmmOperator&) = default;
};

/// Ridge refit of the prototypes given the encoder's assignments, solved per
/// codebook: argmin_P ‖A_c − G_c P‖² + λ‖P − P₀‖².
/// Throws SingularSystemError at λ = 0 when a bucket is empty.
PrototypeSet optimize_prototypes(const Matrix& a, const Encoding& g, const PrototypeSet& p0, double lambda);

/// T[c][k][m] = ⟨prototype (c, k), B[chunk c, m]⟩.
LookupTable build_lut(const PrototypeSet& p, const Matrix& b);

/// Loss of a candidate table against the exact layer output:
///   J(T) = L(σ(AB + bias), GT + bias) + λ‖T − T₀‖²
/// with L the summed squared error after σ (MSE) or the summed row-wise
/// KL(softmax(AB + bias) ‖ softmax(GT + bias)) (KLD).
class LutObjective {
 public:
  LutObjective(const Matrix& ab, const Encoding& g, std::span<const double> bias, Matrix t0, const FitConfig& cfg);

  double value(const Matrix& t) const;
  /// Returns J(T) and writes ∇J into `grad` (same shape as T).
  double value_and_gradient(const Matrix& t, Matrix& grad) const;

  const Matrix& center() const { return t0_; }
  const Encoding& encoding() const { return g_; }

 private:
  double evaluate(const Matrix& t, Matrix* grad) const;
  double row_loss(std::span<const double> z, std::size_t r, std::span<double> dz) const;

  Matrix target_;  // σ(AB + bias), or softmax(AB + bias) for KLD
  Encoding g_;
  std::vector<double> bias_;
  Matrix t0_;
  FitConfig cfg_;
};

struct LutFitReport {
  LookupTable table;
  double initial_objective = 0.0;  // J(P₀B)
  double final_objective = 0.0;    // J of the returned table
  std::vector<double> history;     // J per optimizer iterate (empty for closed form)
  bool closed_form = false;
};

/// Fits T directly against the layer output. Identity + MSE is solved in
/// closed form (ridge, or minimum-norm least squares at λ = 0); otherwise
/// preconditioned full-batch gradient descent from the better of P₀B and the
/// linear ridge solution, returning the best iterate.
LutFitReport optimize_lut_detailed(const Matrix& a, const Matrix& b, const Encoding& g, const PrototypeSet& p0,
                                   std::span<const double> bias, const FitConfig& cfg);
LookupTable optimize_lut(const Matrix& a, const Matrix& b, const Encoding& g, const PrototypeSet& p0,
                         std::span<const double> bias, const FitConfig& cfg);

/// Per output column: offset = min, scale = (max − min)/255 (1 if constant),
/// q = round((t − offset)/scale).
LookupTable quantize_lut(const LookupTable& t);

/// Σ_c T[c][code_c] + bias, before the nonlinearity.
Matrix amm_preactivation(const AmmOperator& op, const Matrix& a, bool use_quantized);
Matrix amm_preactivation(const AmmOperator& op, const Encoding& codes, bool use_quantized);
/// σ(Σ_c T[c][code_c] + bias).
Matrix amm_apply(const AmmOperator& op, const Matrix& a, bool use_quantized = false);

struct CostModel {
  double amm_cost;
  double exact_cost;
  double breakeven_c;
};

/// exact = d·m MACs; AMM = (4c comparisons + c·m lookups) / ratio where
/// ratio = cost(MAC) / cost(LAC).
CostModel lac_cost_model(std::size_t d, std::size_t m, std::size_t c, double ratio);

enum class LutMethod {
  maddness,  // ridge-refit prototypes, T = PB
  itlumm,    // T fitted directly against σ(AB + bias)
};

std::string_view to_string(LutMethod method);
LutMethod parse_lut_method(std::string_view name);

struct AmmFitOptions {
  std::size_t codebooks = 16;
  PartitionKind partition = PartitionKind::naive;
  EncoderKind encoder = EncoderKind::hash_tree;
  LutMethod method = LutMethod::itlumm;
  FitConfig fit;  // fit.nonlinearity is overridden by the layer's activation
  std::size_t opq_iters = 10;
  bool quantize = false;
};

struct EncoderFit {
  std::vector<CodebookEncoder> encoders;
  PrototypeSet p0;
};

/// One encoder per chunk plus the initial prototypes (bucket means for the
/// hash tree, centroids for PQ).
EncoderFit learn_encoders(const Matrix& a, const PartitionSpec& spec, EncoderKind kind, Rng& rng);

/// End to end: partition, encoders, encoding, table fit.
AmmOperator fit_amm(const Matrix& a, const Matrix& b, std::span<const double> bias, Activation act,
                    const AmmFitOptions& opts, Rng& rng);

}  // namespace itlumm
