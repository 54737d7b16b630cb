#pragma once

#include <cmath>
#include <vector>

#include "mhvae/ops.hpp"

namespace mhvae {

inline constexpr double kLog2Pi = 1.8378770664093454836;
inline constexpr double kLogVarMin = -20.0;
inline constexpr double kLogVarMax = 20.0;

// Applied wherever a network head emits a log-variance, on both the training
// and evaluation routes, so the two always see the same density.
template <class T>
Var<T> clamp_log_var(Var<T> v) {
  return clamp_(v, static_cast<T>(kLogVarMin), static_cast<T>(kLogVarMax));
}

// ---------------------------------------------------------------------------
// graph forms (differentiable; used by the training objective)
// ---------------------------------------------------------------------------

// log N(x; mean, diag exp(log_var)) summed over the feature axis -> [B].
// x is observed data, entering as a constant.
template <class T>
Var<T> gaussian_log_prob(Tensor<T> x, Var<T> mean, Var<T> log_var) {
  detail::check_same_graph(mean, log_var, "gaussian_log_prob");
  require_shape(same_shape(x, mean.val()) && same_shape(x, log_var.val()),
                "gaussian_log_prob: shapes " + shape_str(x.shape()) + ", " +
                    shape_str(mean.val().shape()) + ", " + shape_str(log_var.val().shape()));
  const int D = x.dim(1);
  Graph<T>& g = *mean.g;
  Var<T> xc = g.leaf(x);
  Var<T> diff = sub(xc, mean);
  Var<T> quad = mul(mul(diff, diff), exp_(neg(log_var)));
  Var<T> per_dim = add(log_var, quad);
  Var<T> s = row_sum(per_dim);
  return add_scalar(scalar_mul(s, T(-0.5)), static_cast<T>(-0.5 * kLog2Pi * D));
}

// z = mean + exp(log_var / 2) * noise, the reparameterized draw.
template <class T>
Var<T> rsample(Var<T> mean, Var<T> log_var, Tensor<T> noise) {
  detail::check_same_graph(mean, log_var, "rsample");
  require_shape(same_shape(noise, mean.val()) && same_shape(noise, log_var.val()),
                "rsample: shapes " + shape_str(noise.shape()) + ", " +
                    shape_str(mean.val().shape()) + ", " + shape_str(log_var.val().shape()));
  return add(mean, mul_const(exp_(scalar_mul(log_var, T(0.5))), noise));
}

// KL(q || p) between diagonal Gaussians, summed over features -> [B].
// Written with exp(lq - lp) and exp(-lp) so no division appears.
template <class T>
Var<T> kl_diag(Var<T> mean_q, Var<T> log_var_q, Var<T> mean_p, Var<T> log_var_p) {
  detail::check_same_graph(mean_q, log_var_q, "kl_diag");
  detail::check_same_graph(mean_q, mean_p, "kl_diag");
  detail::check_same_graph(mean_q, log_var_p, "kl_diag");
  require_shape(same_shape(mean_q.val(), log_var_q.val()) &&
                    same_shape(mean_q.val(), mean_p.val()) &&
                    same_shape(mean_q.val(), log_var_p.val()),
                "kl_diag: mismatched shapes " + shape_str(mean_q.val().shape()) + " / " +
                    shape_str(log_var_p.val().shape()));
  Var<T> var_ratio = exp_(sub(log_var_q, log_var_p));
  Var<T> dm = sub(mean_q, mean_p);
  Var<T> maha = mul(mul(dm, dm), exp_(neg(log_var_p)));
  Var<T> per_dim = add(add(var_ratio, maha), add_scalar(sub(log_var_p, log_var_q), T(-1)));
  return scalar_mul(row_sum(per_dim), T(0.5));
}

// KL(q || N(0, I)) summed over features -> [B].
template <class T>
Var<T> kl_std_normal(Var<T> mean, Var<T> log_var) {
  detail::check_same_graph(mean, log_var, "kl_std_normal");
  require_shape(same_shape(mean.val(), log_var.val()),
                "kl_std_normal: shapes " + shape_str(mean.val().shape()) + " vs " +
                    shape_str(log_var.val().shape()));
  Var<T> per_dim = add(add(exp_(log_var), mul(mean, mean)),
                       add_scalar(neg(log_var), T(-1)));
  return scalar_mul(row_sum(per_dim), T(0.5));
}

// Bernoulli log-likelihood from logits, summed over features -> [B].
// -[x softplus(-l) + (1 - x) softplus(l)]; stable for any logit magnitude.
template <class T>
Var<T> bernoulli_log_prob(Tensor<T> x, Var<T> logits) {
  require_shape(same_shape(x, logits.val()), "bernoulli_log_prob: shapes " +
                                                 shape_str(x.shape()) + " vs " +
                                                 shape_str(logits.val().shape()));
  Tensor<T> one_minus_x(x.shape());
  {
    const T* xa = x.data();
    T* oa = one_minus_x.mutable_data();
    for (std::int64_t i = 0; i < x.size(); ++i) oa[i] = T(1) - xa[i];
  }
  Var<T> a = mul_const(softplus_(neg(logits)), x);
  Var<T> b = mul_const(softplus_(logits), one_minus_x);
  return neg(row_sum(add(a, b)));
}

// Categorical log-likelihood of observed class indices from logits -> [B].
template <class T>
Var<T> categorical_log_prob(const std::vector<int>& classes, Var<T> logits) {
  return sub(pick(logits, classes), logsumexp(logits, 1));
}

// ---------------------------------------------------------------------------
// plain forms (no graph; used by the likelihood evaluator). Log-densities
// accumulate in double no matter what the activation precision is.
// ---------------------------------------------------------------------------

template <class T>
Tensor<double> gaussian_log_prob_t(const Tensor<T>& x, const Tensor<T>& mean,
                                   const Tensor<T>& log_var) {
  require_shape(same_shape(x, mean) && same_shape(x, log_var),
                "gaussian_log_prob_t: shapes " + shape_str(x.shape()) + ", " +
                    shape_str(mean.shape()) + ", " + shape_str(log_var.shape()));
  const int B = x.dim(0), D = x.dim(1);
  Tensor<double> out(Shape{B});
  double* oa = out.mutable_data();
  const T* xa = x.data();
  const T* ma = mean.data();
  const T* la = log_var.data();
  for (int b = 0; b < B; ++b) {
    double acc = -0.5 * kLog2Pi * D;
    const std::int64_t base = static_cast<std::int64_t>(b) * D;
    for (int d = 0; d < D; ++d) {
      const double lv = static_cast<double>(la[base + d]);
      const double diff = static_cast<double>(xa[base + d]) - static_cast<double>(ma[base + d]);
      acc -= 0.5 * (lv + diff * diff * std::exp(-lv));
    }
    oa[b] = acc;
  }
  return out;
}

// log N(z; 0, I) -> [B].
template <class T>
Tensor<double> std_normal_log_prob_t(const Tensor<T>& z) {
  const int B = z.dim(0), D = z.dim(1);
  Tensor<double> out(Shape{B});
  double* oa = out.mutable_data();
  const T* za = z.data();
  for (int b = 0; b < B; ++b) {
    double acc = -0.5 * kLog2Pi * D;
    const std::int64_t base = static_cast<std::int64_t>(b) * D;
    for (int d = 0; d < D; ++d) {
      const double v = static_cast<double>(za[base + d]);
      acc -= 0.5 * v * v;
    }
    oa[b] = acc;
  }
  return out;
}

template <class T>
Tensor<T> rsample_t(const Tensor<T>& mean, const Tensor<T>& log_var, const Tensor<T>& noise) {
  require_shape(same_shape(mean, log_var) && same_shape(mean, noise),
                "rsample_t: shapes " + shape_str(mean.shape()) + ", " +
                    shape_str(log_var.shape()) + ", " + shape_str(noise.shape()));
  Tensor<T> out(mean.shape());
  T* oa = out.mutable_data();
  const T* ma = mean.data();
  const T* la = log_var.data();
  const T* na = noise.data();
  for (std::int64_t i = 0; i < mean.size(); ++i)
    oa[i] = ma[i] + std::exp(la[i] * T(0.5)) * na[i];
  return out;
}

template <class T>
Tensor<double> kl_diag_t(const Tensor<T>& mean_q, const Tensor<T>& log_var_q,
                         const Tensor<T>& mean_p, const Tensor<T>& log_var_p) {
  require_shape(same_shape(mean_q, log_var_q) && same_shape(mean_q, mean_p) &&
                    same_shape(mean_q, log_var_p),
                "kl_diag_t: mismatched shapes " + shape_str(mean_q.shape()) + " / " +
                    shape_str(log_var_p.shape()));
  const int B = mean_q.dim(0), D = mean_q.dim(1);
  Tensor<double> out(Shape{B});
  double* oa = out.mutable_data();
  const T* mqa = mean_q.data();
  const T* lqa = log_var_q.data();
  const T* mpa = mean_p.data();
  const T* lpa = log_var_p.data();
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    const std::int64_t base = static_cast<std::int64_t>(b) * D;
    for (int d = 0; d < D; ++d) {
      const double lq = static_cast<double>(lqa[base + d]);
      const double lp = static_cast<double>(lpa[base + d]);
      const double dm = static_cast<double>(mqa[base + d]) - static_cast<double>(mpa[base + d]);
      acc += std::exp(lq - lp) + dm * dm * std::exp(-lp) - 1.0 + (lp - lq);
    }
    oa[b] = 0.5 * acc;
  }
  return out;
}

template <class T>
Tensor<double> bernoulli_log_prob_t(const Tensor<T>& x, const Tensor<T>& logits) {
  require_shape(same_shape(x, logits), "bernoulli_log_prob_t: shapes " + shape_str(x.shape()) +
                                           " vs " + shape_str(logits.shape()));
  const int B = x.dim(0), D = x.dim(1);
  Tensor<double> out(Shape{B});
  double* oa = out.mutable_data();
  const T* xa = x.data();
  const T* la = logits.data();
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    const std::int64_t base = static_cast<std::int64_t>(b) * D;
    for (int d = 0; d < D; ++d) {
      const double l = static_cast<double>(la[base + d]);
      const double xv = static_cast<double>(xa[base + d]);
      acc -= xv * detail::softplus_scalar(-l) + (1.0 - xv) * detail::softplus_scalar(l);
    }
    oa[b] = acc;
  }
  return out;
}

template <class T>
Tensor<double> kl_std_normal_t(const Tensor<T>& mean, const Tensor<T>& log_var) {
  Tensor<T> zeros(mean.shape(), T(0));
  return kl_diag_t(mean, log_var, zeros, zeros);
}

// Class index per row of a one-hot (or general categorical-score) matrix.
template <class T>
std::vector<int> classes_from_onehot(const Tensor<T>& onehot) {
  require_shape(onehot.rank() == 2, "classes_from_onehot: expects [B x C], got " +
                                        shape_str(onehot.shape()));
  const int B = onehot.dim(0), C = onehot.dim(1);
  std::vector<int> out(static_cast<size_t>(B), 0);
  const T* d = onehot.data();
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (d[static_cast<std::int64_t>(b) * C + c] > d[static_cast<std::int64_t>(b) * C + best])
        best = c;
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

template <class T>
Tensor<double> categorical_log_prob_t(const std::vector<int>& classes, const Tensor<T>& logits) {
  const int B = logits.dim(0), K = logits.dim(1);
  require(static_cast<int>(classes.size()) == B,
          "categorical_log_prob_t: class count " + std::to_string(classes.size()) +
              " != batch " + std::to_string(B));
  Tensor<double> out(Shape{B});
  double* oa = out.mutable_data();
  const T* la = logits.data();
  for (int b = 0; b < B; ++b) {
    const int c = classes[static_cast<size_t>(b)];
    if (c < 0 || c >= K)
      throw DomainError("categorical_log_prob_t: class " + std::to_string(c) +
                        " out of range [0, " + std::to_string(K) + ")");
    const std::int64_t base = static_cast<std::int64_t>(b) * K;
    double mx = static_cast<double>(la[base]);
    for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(la[base + k]));
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(la[base + k]) - mx);
    oa[b] = static_cast<double>(la[base + c]) - (mx + std::log(s));
  }
  return out;
}

}  // namespace mhvae
