#pragma once

// Importance-sampling log-likelihood estimators. Everything here is forward
// only; graphs are built per chunk and never swept backward. Log-densities
// come from the plain tensor routes in distributions.hpp and accumulate in
// double regardless of the model's activation precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mhvae/data.hpp"
#include "mhvae/distributions.hpp"
#include "mhvae/model.hpp"

namespace mhvae {

struct EvalConfig {
  int k = 5000;                    // importance samples per datapoint
  std::vector<int> input_subset;   // modalities fed to the encoders
  std::vector<int> observed;       // modalities whose likelihood is scored
  int inner_batch = 256;           // samples scored per forward pass
};

struct LLEstimate {
  double value = 0.0;      // nats per datapoint, dataset mean
  double std_error = 0.0;  // across datapoints
  int k = 0;
};

namespace detail {

inline void check_subset(int n, const std::vector<int>& ids, const char* what) {
  require_config(!ids.empty(), std::string("eval: ") + what + " must not be empty");
  std::vector<char> seen(static_cast<size_t>(n), 0);
  for (int i : ids) {
    require_config(i >= 0 && i < n, std::string("eval: ") + what + " index " + std::to_string(i) +
                                        " out of range [0, " + std::to_string(n) + ")");
    require_config(!seen[static_cast<size_t>(i)],
                   std::string("eval: ") + what + " repeats index " + std::to_string(i));
    seen[static_cast<size_t>(i)] = 1;
  }
}

template <class T>
Tensor<T> tile_rows(const Tensor<T>& row, int count) {
  return take_rows(row, std::vector<int>(static_cast<size_t>(count), 0));
}

template <class T>
Tensor<T> flat2(const Tensor<T>& t) {
  const int B = t.dim(0);
  return t.reshaped(Shape{B, static_cast<int>(t.size() / B)});
}

inline double logsumexp_vec(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace detail

template <class T>
void validate_eval(const Mhvae<T>& model, const EvalConfig& cfg) {
  require_config(cfg.k >= 1, "eval: K must be >= 1, got " + std::to_string(cfg.k));
  require_config(cfg.inner_batch >= 1, "eval: inner batch size must be >= 1");
  detail::check_subset(model.n_modalities(), cfg.input_subset, "input subset");
  detail::check_subset(model.n_modalities(), cfg.observed, "observed set");
}

// Single-datapoint estimate of log p(x_O | encoders see x_S). `row` holds one
// record per modality with a leading batch dimension of 1; slots outside
// S ∪ O may be empty tensors. `index` keys the rng substreams so results do
// not depend on evaluation order or worker layout, and `inner_batch` only
// bounds memory: every chunking gives the same draws.
//
// For each k: z^c ~ q(z^c | h_S), z_i ~ q(z_i | x_i) when i ∈ S and
// z_i ~ p(z_i | z^c) otherwise, then
//   log w = log p(z^c) - log q(z^c | h_S)
//         + Σ_{i∈O} log p(x_i | z_i)
//         + Σ_{i∈S} [log p(z_i | z^c) - log q(z_i | x_i)]
// (terms for i ∉ S cancel against the proposal). Returned value is
// logsumexp_k(log w_k) - log K.
template <class T>
double estimate_ll(Mhvae<T>& model, const std::vector<Tensor<T>>& row, const EvalConfig& cfg,
                   std::uint64_t seed, std::int64_t index = 0) {
  validate_eval(model, cfg);
  const int n = model.n_modalities();
  require(static_cast<int>(row.size()) == n,
          "estimate_ll: row has " + std::to_string(row.size()) + " slots for " +
              std::to_string(n) + " modalities");

  std::vector<char> in_s(static_cast<size_t>(n), 0), in_o(static_cast<size_t>(n), 0);
  for (int i : cfg.input_subset) in_s[static_cast<size_t>(i)] = 1;
  for (int i : cfg.observed) in_o[static_cast<size_t>(i)] = 1;
  for (int i = 0; i < n; ++i) {
    if (!in_s[i] && !in_o[i]) continue;
    if (row[static_cast<size_t>(i)].size() == 0)
      throw DataError("estimate_ll: modality '" + model.modality(i).name +
                      "' is needed by the estimator but has no data");
    require_shape(row[static_cast<size_t>(i)].dim(0) == 1,
                  "estimate_ll: expected a single record per modality");
  }

  // accumulate per-modality weight contributions in name order so the result
  // does not depend on how the modalities are listed in the specs
  std::vector<int> name_order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) name_order[static_cast<size_t>(i)] = i;
  std::sort(name_order.begin(), name_order.end(),
            [&](int a, int b) { return model.modality(a).name < model.modality(b).name; });

  // one rng stream per consumer, keyed by datapoint index and modality name:
  // chunking, evaluation order and spec order cannot shuffle the draws
  RngStream core_rng = substream(seed, "eval.core", static_cast<std::uint64_t>(index));
  std::vector<RngStream> mod_rng;
  mod_rng.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    mod_rng.push_back(substream(seed, "eval.mod." + model.modality(i).name,
                                static_cast<std::uint64_t>(index)));

  std::vector<Mask> masks(1, Mask(static_cast<size_t>(n), 0));
  for (int i = 0; i < n; ++i) masks[0][static_cast<size_t>(i)] = in_s[static_cast<size_t>(i)];

  std::vector<double> log_w;
  log_w.reserve(static_cast<size_t>(cfg.k));
  int done = 0;
  while (done < cfg.k) {
    const int C = std::min(cfg.inner_batch, cfg.k - done);
    Graph<T> g;
    BoundParams<T> p = model.bind(g, false);

    // encoder pass on the single record (eval mode, deterministic)
    std::vector<Var<T>> h(static_cast<size_t>(n));
    std::vector<Tensor<T>> q_mean(static_cast<size_t>(n)), q_lv(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (in_s[static_cast<size_t>(i)]) {
        auto enc = model.encode_modality(g, p, i, row[static_cast<size_t>(i)], false);
        h[static_cast<size_t>(i)] = enc.h;
        q_mean[static_cast<size_t>(i)] = enc.mean.val();
        q_lv[static_cast<size_t>(i)] = enc.log_var.val();
      } else {
        h[static_cast<size_t>(i)] =
            g.leaf(Tensor<T>(Shape{1, model.modality(i).h_dim}, T(0)));
      }
    }
    GaussianPair<T> core = model.encode_core(g, p, h, masks);
    const Tensor<T> mc = detail::tile_rows(core.mean.val(), C);
    const Tensor<T> lc = detail::tile_rows(core.log_var.val(), C);

    const Tensor<T> zc = rsample_t(mc, lc, core_rng.template normal_tensor<T>(mc.shape()));
    const Tensor<double> lp_zc = std_normal_log_prob_t(zc);
    const Tensor<double> lq_zc = gaussian_log_prob_t(zc, mc, lc);
    Var<T> zc_var = g.leaf(zc);

    std::vector<std::vector<double>> contrib(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (!in_s[static_cast<size_t>(i)] && !in_o[static_cast<size_t>(i)]) continue;
      std::vector<double>& ci = contrib[static_cast<size_t>(i)];
      ci.assign(static_cast<size_t>(C), 0.0);

      GaussianPair<T> prior = model.prior_map(g, p, i, zc_var);
      const Tensor<T> pm = prior.mean.val();
      const Tensor<T> plv = prior.log_var.val();
      const Tensor<T> eps = mod_rng[static_cast<size_t>(i)].template normal_tensor<T>(pm.shape());

      Tensor<T> z_i;
      if (in_s[static_cast<size_t>(i)]) {
        const Tensor<T> qm = detail::tile_rows(q_mean[static_cast<size_t>(i)], C);
        const Tensor<T> qlv = detail::tile_rows(q_lv[static_cast<size_t>(i)], C);
        z_i = rsample_t(qm, qlv, eps);
        const Tensor<double> lp = gaussian_log_prob_t(z_i, pm, plv);
        const Tensor<double> lq = gaussian_log_prob_t(z_i, qm, qlv);
        for (int c = 0; c < C; ++c) ci[static_cast<size_t>(c)] += lp[c] - lq[c];
      } else {
        z_i = rsample_t(pm, plv, eps);
      }

      if (in_o[static_cast<size_t>(i)]) {
        auto dec = model.decode_modality(g, p, i, g.leaf(z_i));
        const Tensor<T> out = detail::flat2(dec.out.val());
        const Tensor<T> x =
            detail::tile_rows(detail::flat2(row[static_cast<size_t>(i)]), C);
        Tensor<double> ll;
        switch (dec.likelihood) {
          case Likelihood::bernoulli:
            ll = bernoulli_log_prob_t(x, out);
            break;
          case Likelihood::categorical: {
            const auto cls = classes_from_onehot(detail::flat2(row[static_cast<size_t>(i)]));
            ll = categorical_log_prob_t(std::vector<int>(static_cast<size_t>(C), cls[0]), out);
            break;
          }
          case Likelihood::gaussian:
            ll = gaussian_log_prob_t(x, out, dec.log_var.val());
            break;
        }
        for (int c = 0; c < C; ++c) ci[static_cast<size_t>(c)] += ll[c];
      }
    }

    for (int c = 0; c < C; ++c) {
      double w = lp_zc[c] - lq_zc[c];
      for (int i : name_order)
        if (!contrib[static_cast<size_t>(i)].empty()) w += contrib[static_cast<size_t>(i)][c];
      if (!std::isfinite(w))
        throw NumericError("estimate_ll: non-finite importance weight at k=" +
                           std::to_string(done + c + 1) + " for datapoint " +
                           std::to_string(index));
      log_w.push_back(w);
    }
    done += C;
  }

  return detail::logsumexp_vec(log_w) - std::log(static_cast<double>(cfg.k));
}

namespace detail {

template <class T>
std::vector<double> estimate_values(Mhvae<T>& model, const std::vector<Tensor<T>>& data,
                                    const EvalConfig& cfg, std::uint64_t seed) {
  validate_eval(model, cfg);
  const int n = model.n_modalities();
  require(static_cast<int>(data.size()) == n,
          "estimate: data has " + std::to_string(data.size()) + " slots for " +
              std::to_string(n) + " modalities");
  int rows = -1;
  for (int i : cfg.observed) {
    if (data[static_cast<size_t>(i)].size() == 0)
      throw DataError("estimate: modality '" + model.modality(i).name +
                      "' is observed but has no data");
  }
  for (int i = 0; i < n; ++i) {
    const Tensor<T>& t = data[static_cast<size_t>(i)];
    if (t.size() == 0) continue;
    if (rows < 0) rows = t.dim(0);
    require_shape(t.dim(0) == rows, "estimate: modality '" + model.modality(i).name + "' has " +
                                        std::to_string(t.dim(0)) + " records, expected " +
                                        std::to_string(rows));
  }
  require(rows >= 1, "estimate: empty dataset");

  std::vector<double> vals(static_cast<size_t>(rows), 0.0);
  for (int r = 0; r < rows; ++r) {
    std::vector<Tensor<T>> row(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      if (data[static_cast<size_t>(i)].size() != 0)
        row[static_cast<size_t>(i)] = take_rows(data[static_cast<size_t>(i)], {r});
    vals[static_cast<size_t>(r)] = estimate_ll(model, row, cfg, seed, r);
  }
  return vals;
}

inline LLEstimate summarize(const std::vector<double>& vals, int k) {
  LLEstimate est;
  est.k = k;
  const double n = static_cast<double>(vals.size());
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= n;
  est.value = mean;
  if (vals.size() > 1) {
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    est.std_error = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return est;
}

}  // namespace detail

// log p(all modalities) with encoders fed the subset S.
template <class T>
LLEstimate estimate_joint(Mhvae<T>& model, const std::vector<Tensor<T>>& data,
                          const std::vector<int>& input_subset, int k, std::uint64_t seed,
                          int inner_batch = 256) {
  EvalConfig cfg;
  cfg.k = k;
  cfg.input_subset = input_subset;
  cfg.inner_batch = inner_batch;
  cfg.observed.resize(static_cast<size_t>(model.n_modalities()));
  for (int i = 0; i < model.n_modalities(); ++i) cfg.observed[static_cast<size_t>(i)] = i;
  return detail::summarize(detail::estimate_values(model, data, cfg, seed), k);
}

// log p(x_j) with encoders fed the subset S.
template <class T>
LLEstimate estimate_marginal(Mhvae<T>& model, const std::vector<Tensor<T>>& data, int target,
                             const std::vector<int>& input_subset, int k, std::uint64_t seed,
                             int inner_batch = 256) {
  EvalConfig cfg;
  cfg.k = k;
  cfg.input_subset = input_subset;
  cfg.observed = {target};
  cfg.inner_batch = inner_batch;
  return detail::summarize(detail::estimate_values(model, data, cfg, seed), k);
}

// log p(x_j | x_G) = log p(x_G, x_j) - log p(x_G), computed per datapoint on
// shared rng streams before averaging, so the conditional-plus-marginal
// identity holds by construction.
template <class T>
LLEstimate estimate_conditional(Mhvae<T>& model, const std::vector<Tensor<T>>& data, int target,
                                const std::vector<int>& given, int k, std::uint64_t seed,
                                int inner_batch = 256) {
  require_config(std::find(given.begin(), given.end(), target) == given.end(),
                 "eval: conditional target " + std::to_string(target) +
                     " must not appear in the given set");
  EvalConfig joint_cfg;
  joint_cfg.k = k;
  joint_cfg.input_subset = given;
  joint_cfg.observed = given;
  joint_cfg.observed.push_back(target);
  joint_cfg.inner_batch = inner_batch;
  EvalConfig marg_cfg = joint_cfg;
  marg_cfg.observed = given;

  std::vector<double> joint_vals = detail::estimate_values(model, data, joint_cfg, seed);
  std::vector<double> marg_vals = detail::estimate_values(model, data, marg_cfg, seed);
  std::vector<double> diff(joint_vals.size());
  for (size_t i = 0; i < diff.size(); ++i) diff[i] = joint_vals[i] - marg_vals[i];
  return detail::summarize(diff, k);
}

}  // namespace mhvae
