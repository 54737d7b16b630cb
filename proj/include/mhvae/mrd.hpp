#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhvae/distributions.hpp"
#include "mhvae/rng.hpp"

namespace mhvae {

// Per-modality dropout rates w_i. A modality is dropped with probability w_i,
// subject to at least one modality surviving.
struct MaskConfig {
  std::vector<double> drop_prob;
};

// mask[i] == 1 keeps modality i's representation; 0 zeroes it.
using Mask = std::vector<std::uint8_t>;

inline void validate_mask_config(const MaskConfig& cfg) {
  require_config(!cfg.drop_prob.empty(), "mask config: no modalities");
  for (double w : cfg.drop_prob)
    if (!(w >= 0.0 && w < 1.0))
      throw ConfigError("mask config: dropout rate " + std::to_string(w) +
                        " outside [0, 1)");
}

// Independent Bernoulli drops, rejecting the all-dropped outcome. Expected
// number of rounds is 1 / (1 - prod(w_i)), O(1) for any valid config.
inline Mask sample_mask(const MaskConfig& cfg, RngStream& rng) {
  validate_mask_config(cfg);
  const size_t n = cfg.drop_prob.size();
  Mask m(n, 0);
  for (;;) {
    bool any = false;
    for (size_t i = 0; i < n; ++i) {
      const bool keep = !rng.bernoulli(cfg.drop_prob[i]);
      m[i] = keep ? 1 : 0;
      any = any || keep;
    }
    if (any) return m;
  }
}

// Exact law of sample_mask: product of Bernoulli marginals restricted to
// nonzero masks and renormalized. Enumeration oracle for tests and tooling.
inline double mask_probability(const MaskConfig& cfg, const Mask& m) {
  validate_mask_config(cfg);
  require(m.size() == cfg.drop_prob.size(), "mask_probability: length mismatch");
  double p = 1.0, p_all_dropped = 1.0;
  bool any = false;
  for (size_t i = 0; i < m.size(); ++i) {
    p *= m[i] ? (1.0 - cfg.drop_prob[i]) : cfg.drop_prob[i];
    p_all_dropped *= cfg.drop_prob[i];
    any = any || m[i];
  }
  return any ? p / (1.0 - p_all_dropped) : 0.0;
}

// Column i of a batch of masks as a [B] scale vector (1 keep, 0 drop), ready
// for scale_rows against that modality's hidden representation.
template <class T>
Tensor<T> mask_column(const std::vector<Mask>& masks, size_t modality) {
  const int B = static_cast<int>(masks.size());
  require(B > 0, "mask_column: empty batch");
  Tensor<T> s(Shape{B});
  T* d = s.mutable_data();
  for (int b = 0; b < B; ++b) {
    const Mask& m = masks[static_cast<size_t>(b)];
    require(modality < m.size(), "mask_column: modality " + std::to_string(modality) +
                                     " out of range for mask of length " +
                                     std::to_string(m.size()));
    d[b] = m[modality] ? T(1) : T(0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// product of experts (ablation combiner for the joint posterior)
// ---------------------------------------------------------------------------

template <class T>
struct GaussianPair {
  Var<T> mean;
  Var<T> log_var;
};

// Precision-weighted product of diagonal Gaussian experts with a standard
// normal prior always included as one expert. Division-free: the combined
// mean is (sum_i m_i / v_i) * exp(-log P) with P the total precision.
template <class T>
GaussianPair<T> poe_combine(const std::vector<GaussianPair<T>>& experts) {
  require(!experts.empty(), "poe_combine: no experts");
  Graph<T>& g = *experts[0].mean.g;
  // copy: node storage may reallocate as ops append to the graph
  const Shape shape = experts[0].mean.val().shape();
  for (const auto& e : experts)
    require_shape(same_shape(e.mean.val(), experts[0].mean.val()) &&
                      same_shape(e.log_var.val(), experts[0].mean.val()),
                  "poe_combine: expert shape mismatch " + shape_str(e.mean.val().shape()) +
                      " vs " + shape_str(shape));

  Var<T> precision_sum = g.leaf(Tensor<T>(shape, T(1)));  // the prior's precision
  Var<T> weighted_mean_sum = g.leaf(Tensor<T>(shape, T(0)));  // prior mean is zero
  for (const auto& e : experts) {
    Var<T> prec = exp_(neg(e.log_var));
    precision_sum = add(precision_sum, prec);
    weighted_mean_sum = add(weighted_mean_sum, mul(e.mean, prec));
  }
  Var<T> log_precision = log_(precision_sum);  // total precision >= 1, log is safe
  return GaussianPair<T>{mul(weighted_mean_sum, exp_(neg(log_precision))),
                         neg(log_precision)};
}

}  // namespace mhvae
