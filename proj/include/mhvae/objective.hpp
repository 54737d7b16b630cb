#pragma once

#include <algorithm>
#include <vector>

#include "mhvae/model.hpp"

namespace mhvae {

struct WarmupSchedule {
  int u_modality = 0;  // epochs to ramp the modality-KL weight
  int u_core = 0;      // epochs to ramp the core-KL weight
};

// Linear ramp min(1, epoch/U), evaluated at epoch start. U = 0 disables the
// warm-up (factor 1 from the first epoch).
inline double warmup_factor(int epoch, int u) {
  require(epoch >= 0, "warmup_factor: negative epoch");
  if (u <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(u));
}

// All reparameterization noise of one objective evaluation, drawn up front so
// the same evaluation can be replayed exactly (the 64-bit finite-difference
// check depends on this).
template <class T>
struct NoiseBundle {
  std::vector<Tensor<T>> modality;  // [B x z_dim_i] per modality
  Tensor<T> core;                   // [B x zc_dim]
};

template <class T>
NoiseBundle<T> draw_noise(const Mhvae<T>& model, int batch, RngStream& rng) {
  NoiseBundle<T> n;
  for (const ModalitySpec& m : model.modalities())
    n.modality.push_back(rng.normal_tensor<T>(Shape{batch, m.z_dim}));
  n.core = rng.normal_tensor<T>(Shape{batch, model.core().zc_dim});
  return n;
}

template <class U, class T>
NoiseBundle<U> cast_noise(const NoiseBundle<T>& n) {
  NoiseBundle<U> out;
  for (const Tensor<T>& t : n.modality) out.modality.push_back(t.template cast<U>());
  out.core = n.core.template cast<U>();
  return out;
}

template <class T>
struct LossBreakdown {
  std::vector<double> recon;        // batch-mean log p(x_i | z_i) per modality
  std::vector<double> kl_modality;  // batch-mean KL[q(z_i|x_i) || p(z_i|z^c*)]
  double kl_core = 0.0;             // batch-mean KL[q(z^c|h^d) || N(0,I)]
  double weighted_total = 0.0;      // value of `total`
  Var<T> total;                     // minimized scalar, on the caller's graph
};

// The three-group objective, one Monte-Carlo sample per expectation:
//   - reconstruction: log p(x_i | z_i), z_i = rsample(q(z_i | x_i)); always
//     conditioned on the real data — the mask gates only the core encoder.
//   - core capacity: analytic KL[q(z^c | h^d) || N(0, I)].
//   - hierarchical consistency: analytic KL[q(z_i|x_i) || p(z_i|z^c*)] at a
//     single z^c* = rsample(q(z^c | h^d)); gradients flow through z^c*.
// weighted_total = sum_i -lambda_i recon_i
//                + gamma_m(t) sum_i beta_i kl_mod_i + gamma_c(t) beta_c kl_core.
template <class T>
LossBreakdown<T> elbo(Mhvae<T>& model, Graph<T>& g, const BoundParams<T>& p,
                      const std::vector<Tensor<T>>& batch, const std::vector<Mask>& masks,
                      int epoch, const WarmupSchedule& sched, const NoiseBundle<T>& noise,
                      bool train) {
  const int N = model.n_modalities();
  require(static_cast<int>(batch.size()) == N,
          "elbo: batch has " + std::to_string(batch.size()) + " modalities, model has " +
              std::to_string(N));
  require(!batch.empty() && batch[0].dim(0) > 0, "elbo: empty batch");
  const int B = batch[0].dim(0);
  for (const Tensor<T>& x : batch)
    require(x.dim(0) == B, "elbo: inconsistent batch sizes across modalities");
  require(static_cast<int>(masks.size()) == B,
          "elbo: mask count " + std::to_string(masks.size()) + " != batch size " +
              std::to_string(B));
  for (const Mask& m : masks)
    require(static_cast<int>(m.size()) == N, "elbo: mask length " + std::to_string(m.size()) +
                                                 " != modality count " + std::to_string(N));

  std::vector<typename Mhvae<T>::Encoded> enc;
  std::vector<Var<T>> h;
  enc.reserve(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    enc.push_back(model.encode_modality(g, p, i, batch[static_cast<size_t>(i)], train));
    h.push_back(enc.back().h);
  }
  GaussianPair<T> qc = model.encode_core(g, p, h, masks);

  Var<T> kl_core_rows = kl_std_normal(qc.mean, qc.log_var);
  Var<T> z_c_star = rsample(qc.mean, qc.log_var, noise.core);

  const T inv_b = T(1) / static_cast<T>(B);
  LossBreakdown<T> out;
  Var<T> kl_core_mean = scalar_mul(sum_all(kl_core_rows), inv_b);
  out.kl_core = static_cast<double>(kl_core_mean.val()[0]);

  const double gamma_m = warmup_factor(epoch, sched.u_modality);
  const double gamma_c = warmup_factor(epoch, sched.u_core);

  Var<T> total = scalar_mul(kl_core_mean,
                            static_cast<T>(gamma_c * model.core().kl_weight));
  for (int i = 0; i < N; ++i) {
    const ModalitySpec& spec = model.modality(i);
    GaussianPair<T> prior = model.prior_map(g, p, i, z_c_star);
    Var<T> kl_rows =
        kl_diag(enc[static_cast<size_t>(i)].mean, enc[static_cast<size_t>(i)].log_var,
                prior.mean, prior.log_var);
    Var<T> kl_mean = scalar_mul(sum_all(kl_rows), inv_b);

    Var<T> z_i = rsample(enc[static_cast<size_t>(i)].mean, enc[static_cast<size_t>(i)].log_var,
                         noise.modality[static_cast<size_t>(i)]);
    typename Mhvae<T>::Decoded dec = model.decode_modality(g, p, i, z_i);
    Tensor<T> x_flat = batch[static_cast<size_t>(i)].reshaped(Shape{B, spec.flat_dim()});
    Var<T> recon_rows;
    switch (spec.likelihood) {
      case Likelihood::bernoulli:
        recon_rows = bernoulli_log_prob(x_flat, dec.out);
        break;
      case Likelihood::categorical:
        recon_rows = categorical_log_prob(classes_from_onehot(x_flat), dec.out);
        break;
      default:
        recon_rows = gaussian_log_prob(x_flat, dec.out, dec.log_var);
    }
    Var<T> recon_mean = scalar_mul(sum_all(recon_rows), inv_b);

    out.recon.push_back(static_cast<double>(recon_mean.val()[0]));
    out.kl_modality.push_back(static_cast<double>(kl_mean.val()[0]));
    total = add(total, scalar_mul(recon_mean, static_cast<T>(-spec.recon_weight)));
    total = add(total, scalar_mul(kl_mean, static_cast<T>(gamma_m * spec.kl_weight)));
  }
  out.total = total;
  out.weighted_total = static_cast<double>(total.val()[0]);
  return out;
}

// Convenience overload drawing fresh noise from a stream.
template <class T>
LossBreakdown<T> elbo(Mhvae<T>& model, Graph<T>& g, const BoundParams<T>& p,
                      const std::vector<Tensor<T>>& batch, const std::vector<Mask>& masks,
                      int epoch, const WarmupSchedule& sched, RngStream& rng, bool train) {
  const int B = batch.empty() ? 0 : batch[0].dim(0);
  require(B > 0, "elbo: empty batch");
  return elbo(model, g, p, batch, masks, epoch, sched, draw_noise(model, B, rng), train);
}

}  // namespace mhvae
