#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mhvae/distributions.hpp"
#include "mhvae/mrd.hpp"
#include "mhvae/ops.hpp"
#include "mhvae/rng.hpp"

namespace mhvae {

enum class Likelihood { bernoulli, categorical, gaussian };
enum class NetKind { mlp, conv };
enum class Combiner { mrd, poe };

inline Likelihood likelihood_from_string(const std::string& s) {
  if (s == "bernoulli") return Likelihood::bernoulli;
  if (s == "categorical") return Likelihood::categorical;
  if (s == "gaussian") return Likelihood::gaussian;
  throw ConfigError("unknown likelihood '" + s + "'");
}
inline std::string to_string(Likelihood l) {
  switch (l) {
    case Likelihood::bernoulli: return "bernoulli";
    case Likelihood::categorical: return "categorical";
    default: return "gaussian";
  }
}
inline NetKind net_kind_from_string(const std::string& s) {
  if (s == "mlp") return NetKind::mlp;
  if (s == "conv") return NetKind::conv;
  throw ConfigError("unknown net kind '" + s + "'");
}
inline std::string to_string(NetKind k) { return k == NetKind::mlp ? "mlp" : "conv"; }
inline Combiner combiner_from_string(const std::string& s) {
  if (s == "mrd") return Combiner::mrd;
  if (s == "poe") return Combiner::poe;
  throw ConfigError("unknown combiner '" + s + "'");
}
inline std::string to_string(Combiner c) { return c == Combiner::mrd ? "mrd" : "poe"; }

struct ModalitySpec {
  std::string name;
  NetKind kind = NetKind::mlp;
  Shape input_shape;               // e.g. {1, 28, 28} image, {10} one-hot label
  std::vector<int> hidden_sizes;   // mlp trunk widths, or conv channel counts
  int h_dim = 0;                   // hidden-representation width
  int z_dim = 0;                   // modality latent width
  Likelihood likelihood = Likelihood::bernoulli;
  double recon_weight = 1.0;       // lambda_i
  double kl_weight = 1.0;          // beta_i^m
  double drop_prob = 0.5;          // w_i
  bool batchnorm = false;          // mlp trunk only

  int flat_dim() const { return static_cast<int>(numel(input_shape)); }
};

struct CoreSpec {
  std::vector<int> hidden_sizes;   // e.g. {64, 64, 64}
  int zc_dim = 10;
  double kl_weight = 1.0;          // beta^c
};

// Convolutional stages are fixed 4x4 kernels, stride 2, pad 1: each stage
// exactly halves the spatial dims, and the matching transposed stage doubles
// them back.
inline constexpr int kConvKernel = 4;
inline constexpr int kConvStride = 2;
inline constexpr int kConvPad = 1;

inline void validate_specs(const std::vector<ModalitySpec>& mods, const CoreSpec& core) {
  require_config(!mods.empty(), "model: no modalities");
  require_config(core.zc_dim >= 1, "model: zc_dim must be >= 1");
  require_config(core.kl_weight >= 0.0, "model: core kl_weight must be >= 0");
  std::unordered_map<std::string, int> seen;
  for (const ModalitySpec& m : mods) {
    require_config(!m.name.empty(), "model: modality with empty name");
    require_config(seen.emplace(m.name, 1).second, "model: duplicate modality name '" + m.name + "'");
    require_config(m.z_dim >= 1, "modality '" + m.name + "': z_dim must be >= 1");
    require_config(m.h_dim >= 1, "modality '" + m.name + "': h_dim must be >= 1");
    require_config(m.recon_weight >= 0.0 && m.kl_weight >= 0.0,
            "modality '" + m.name + "': weights must be >= 0");
    require_config(m.drop_prob >= 0.0 && m.drop_prob < 1.0,
            "modality '" + m.name + "': drop_prob must be in [0, 1)");
    require_config(!m.input_shape.empty() && numel(m.input_shape) > 0,
            "modality '" + m.name + "': empty input shape");
    if (m.kind == NetKind::mlp) {
      const int expect_h = m.hidden_sizes.empty() ? m.flat_dim() : m.hidden_sizes.back();
      require_config(m.h_dim == expect_h, "modality '" + m.name + "': h_dim " +
                                       std::to_string(m.h_dim) + " must equal final trunk width " +
                                       std::to_string(expect_h));
    } else {
      require_config(m.input_shape.size() == 3, "modality '" + m.name + "': conv input must be CxHxW");
      require_config(!m.hidden_sizes.empty(), "modality '" + m.name + "': conv needs channel counts");
      int h = m.input_shape[1], w = m.input_shape[2];
      for (size_t s = 0; s < m.hidden_sizes.size(); ++s) {
        require_config(h % 2 == 0 && w % 2 == 0, "modality '" + m.name +
                                              "': spatial dims must halve cleanly at stage " +
                                              std::to_string(s));
        h /= 2;
        w /= 2;
      }
      require_config(!m.batchnorm, "modality '" + m.name + "': batchnorm is mlp-only");
    }
    if (m.likelihood == Likelihood::categorical)
      require_config(m.input_shape.size() == 1, "modality '" + m.name +
                                             "': categorical input must be a flat one-hot row");
    if (m.likelihood == Likelihood::gaussian)
      require_config(m.kind == NetKind::mlp,
                     "modality '" + m.name + "': gaussian likelihood needs an mlp decoder");
  }
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

// Named tensors in a stable registration order (which is also the checkpoint
// payload order). Buffers (batch-norm running statistics) live here too but
// are excluded from optimization.
template <class T>
class ParamStore {
 public:
  size_t add(const std::string& name, Tensor<T> init, bool trainable = true) {
    require(index_.find(name) == index_.end(), "param store: duplicate name '" + name + "'");
    const size_t id = names_.size();
    index_.emplace(name, id);
    names_.push_back(name);
    values_.push_back(std::move(init));
    trainable_.push_back(trainable);
    return id;
  }
  size_t size() const { return names_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  Tensor<T>& value(size_t i) { return values_[i]; }
  const Tensor<T>& value(size_t i) const { return values_[i]; }
  bool trainable(size_t i) const { return trainable_[i]; }
  bool has(const std::string& name) const { return index_.find(name) != index_.end(); }
  size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "param store: unknown name '" + name + "'");
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::vector<bool> trainable_;
  std::unordered_map<std::string, size_t> index_;
};

// One graph leaf per stored tensor. Trainable entries carry gradients when
// `train` is set; buffers never do.
template <class T>
struct BoundParams {
  std::vector<Var<T>> vars;
  Var<T> at(size_t i) const { return vars[i]; }
};

template <class T>
BoundParams<T> bind_params(Graph<T>& g, const ParamStore<T>& store, bool train) {
  BoundParams<T> b;
  b.vars.reserve(store.size());
  for (size_t i = 0; i < store.size(); ++i)
    b.vars.push_back(g.leaf(store.value(i), train && store.trainable(i)));
  return b;
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

template <class T>
class Mhvae {
  struct LinearIdx {
    size_t w = 0, b = 0;
  };
  struct BnIdx {
    size_t gamma = 0, beta = 0, rm = 0, rv = 0;
  };
  struct ModalityWiring {
    // encoder
    std::vector<LinearIdx> enc_trunk;   // mlp trunk, or conv stages (w + channel bias)
    std::vector<BnIdx> enc_bn;
    LinearIdx enc_lin;                  // conv only: flatten -> h_dim
    LinearIdx enc_mean, enc_logvar;
    // decoder
    std::vector<LinearIdx> dec_trunk;   // mlp trunk, or transposed conv stages
    LinearIdx dec_lin0, dec_lin1;       // conv only: z -> h_dim -> C*h*w
    LinearIdx dec_out;                  // likelihood head (mean head for gaussian)
    LinearIdx dec_out_lv;               // gaussian only
    // conditional prior head off the shared prior trunk
    LinearIdx prior_mean, prior_logvar;
    // per-modality core-posterior expert (poe combiner only)
    LinearIdx poe_mean, poe_logvar;
  };

 public:
  struct Encoded {
    Var<T> h;
    Var<T> mean;
    Var<T> log_var;
  };
  struct Decoded {
    Var<T> out;              // logits [B x flat] (or mean for gaussian)
    Var<T> log_var;          // gaussian only
    Likelihood likelihood = Likelihood::bernoulli;
  };
  struct Generated {
    std::vector<Tensor<T>> outputs;  // per modality: probs (bernoulli/categorical) or means
    Tensor<T> z_core;
  };

  Mhvae(std::vector<ModalitySpec> mods, CoreSpec core, Combiner combiner = Combiner::mrd)
      : mods_(std::move(mods)), core_(std::move(core)), combiner_(combiner) {
    validate_specs(mods_, core_);
    register_params();
  }

  int n_modalities() const { return static_cast<int>(mods_.size()); }
  const std::vector<ModalitySpec>& modalities() const { return mods_; }
  const ModalitySpec& modality(int i) const { return mods_[check_mod(i)]; }
  const CoreSpec& core() const { return core_; }
  Combiner combiner() const { return combiner_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

  int modality_index(const std::string& name) const {
    for (size_t i = 0; i < mods_.size(); ++i)
      if (mods_[i].name == name) return static_cast<int>(i);
    throw ConfigError("unknown modality '" + name + "'");
  }

  MaskConfig mask_config() const {
    MaskConfig cfg;
    for (const auto& m : mods_) cfg.drop_prob.push_back(m.drop_prob);
    return cfg;
  }

  // Fan-in-scaled uniform weights, zero biases. Distribution heads (means and
  // log-variances of q, p and the gaussian likelihood) get a smaller gain so
  // freshly initialized posteriors start near N(0, I).
  void init_params(std::uint64_t seed) {
    RngStream rng = substream(seed, "init");
    for (size_t i = 0; i < store_.size(); ++i) {
      Tensor<T>& t = store_.value(i);
      const std::string& name = store_.name(i);
      if (!store_.trainable(i)) {
        // batch-norm buffers restart from identity statistics
        t = Tensor<T>(t.shape(), ends_with(name, ".rv") ? T(1) : T(0));
        continue;
      }
      if (is_bias_name(name)) {
        t = Tensor<T>(t.shape(), T(0));
      } else if (is_bn_gamma_name(name)) {
        t = Tensor<T>(t.shape(), T(1));
      } else {
        const int fan_in = weight_fan_in(t.shape());
        const double gain = is_head_weight_name(name) ? 0.25 : 1.0;
        const T bound = static_cast<T>(gain / std::sqrt(static_cast<double>(fan_in)));
        t = rng.uniform_tensor<T>(t.shape(), -bound, bound);
      }
    }
  }

  BoundParams<T> bind(Graph<T>& g, bool train) const { return bind_params(g, store_, train); }

  // q(z_i | x_i): trunk to the hidden representation h, two heads off h.
  Encoded encode_modality(Graph<T>& g, const BoundParams<T>& p, int i, const Tensor<T>& x,
                          bool train) {
    const ModalitySpec& spec = mods_[check_mod(i)];
    ModalityWiring& w = wiring_[static_cast<size_t>(i)];
    Var<T> h;
    if (spec.kind == NetKind::mlp) {
      require_shape(x.rank() >= 1 && x.size() % spec.flat_dim() == 0 &&
                        x.dim(0) == x.size() / spec.flat_dim(),
                    "encode '" + spec.name + "': input " + shape_str(x.shape()) +
                        " does not match " + shape_str(spec.input_shape));
      const int B = x.dim(0);
      h = g.leaf(x.reshaped(Shape{B, spec.flat_dim()}));
      for (size_t l = 0; l < w.enc_trunk.size(); ++l) {
        h = leaky_relu(linear(g, p, w.enc_trunk[l], h));
        if (spec.batchnorm && l + 1 < w.enc_trunk.size())
          h = batchnorm_layer(g, p, w.enc_bn[l], h, train);
      }
    } else {
      require_shape(x.rank() == 4 && x.dim(1) == spec.input_shape[0] &&
                        x.dim(2) == spec.input_shape[1] && x.dim(3) == spec.input_shape[2],
                    "encode '" + spec.name + "': input " + shape_str(x.shape()) +
                        " does not match " + shape_str(spec.input_shape));
      h = g.leaf(x);
      for (const LinearIdx& st : w.enc_trunk)
        h = swish_(channel_bias_add(conv2d(h, p.at(st.w), kConvStride, kConvPad), p.at(st.b)));
      const int B = x.dim(0);
      h = reshape(h, Shape{B, static_cast<int>(h.val().size() / B)});
      h = swish_(linear(g, p, w.enc_lin, h));
    }
    Var<T> mean = linear(g, p, w.enc_mean, h);
    Var<T> log_var = clamp_log_var(linear(g, p, w.enc_logvar, h));
    return Encoded{h, mean, log_var};
  }

  // q(z^c | h^d): mask the hidden representations, then either run the core
  // trunk on their concatenation (mrd) or combine per-modality experts (poe).
  GaussianPair<T> encode_core(Graph<T>& g, const BoundParams<T>& p,
                              const std::vector<Var<T>>& h, const std::vector<Mask>& masks) {
    require(static_cast<int>(h.size()) == n_modalities(),
            "encode_core: got " + std::to_string(h.size()) + " representations for " +
                std::to_string(n_modalities()) + " modalities");
    if (combiner_ == Combiner::mrd) {
      std::vector<Var<T>> masked;
      masked.reserve(h.size());
      for (size_t i = 0; i < h.size(); ++i)
        masked.push_back(scale_rows(h[i], mask_column<T>(masks, i)));
      Var<T> cat = concat(masked, 1);
      require_shape(cat.val().dim(1) == total_h_dim(),
                    "encode_core: concatenated width " + std::to_string(cat.val().dim(1)) +
                        " != " + std::to_string(total_h_dim()));
      Var<T> t = cat;
      for (const LinearIdx& l : core_wiring_.trunk) t = leaky_relu(linear(g, p, l, t));
      return GaussianPair<T>{linear(g, p, core_wiring_.mean, t),
                             clamp_log_var(linear(g, p, core_wiring_.logvar, t))};
    }
    // poe: precision-weighted experts, gated per datapoint by the mask so a
    // dropped modality contributes exactly nothing. The N(0, I) prior expert
    // keeps the product well-defined for any mask.
    const int B = h[0].val().dim(0);
    Shape zshape{B, core_.zc_dim};
    Var<T> precision = g.leaf(Tensor<T>(zshape, T(1)));
    Var<T> weighted_mean = g.leaf(Tensor<T>(zshape, T(0)));
    for (size_t i = 0; i < h.size(); ++i) {
      const ModalityWiring& w = wiring_[i];
      Var<T> m_i = linear(g, p, w.poe_mean, h[i]);
      Var<T> lv_i = clamp_log_var(linear(g, p, w.poe_logvar, h[i]));
      Var<T> prec_i = scale_rows(exp_(neg(lv_i)), mask_column<T>(masks, i));
      precision = add(precision, prec_i);
      weighted_mean = add(weighted_mean, mul(m_i, prec_i));
    }
    Var<T> log_precision = log_(precision);
    return GaussianPair<T>{mul(weighted_mean, exp_(neg(log_precision))), neg(log_precision)};
  }

  // p(z_i | z^c): shared trunk, per-modality heads.
  GaussianPair<T> prior_map(Graph<T>& g, const BoundParams<T>& p, int i, Var<T> z_c) {
    const ModalityWiring& w = wiring_[check_mod(i)];
    require_shape(z_c.val().rank() == 2 && z_c.val().dim(1) == core_.zc_dim,
                  "prior_map: z_c " + shape_str(z_c.val().shape()) + " does not match zc_dim " +
                      std::to_string(core_.zc_dim));
    Var<T> t = z_c;
    for (const LinearIdx& l : core_wiring_.prior_trunk) t = leaky_relu(linear(g, p, l, t));
    return GaussianPair<T>{linear(g, p, w.prior_mean, t),
                           clamp_log_var(linear(g, p, w.prior_logvar, t))};
  }

  // p(x_i | z_i): logits over the flattened input (mean + log_var for the
  // gaussian likelihood).
  Decoded decode_modality(Graph<T>& g, const BoundParams<T>& p, int i, Var<T> z_i) {
    const ModalitySpec& spec = mods_[check_mod(i)];
    const ModalityWiring& w = wiring_[static_cast<size_t>(i)];
    require_shape(z_i.val().rank() == 2 && z_i.val().dim(1) == spec.z_dim,
                  "decode '" + spec.name + "': z " + shape_str(z_i.val().shape()) +
                      " does not match z_dim " + std::to_string(spec.z_dim));
    const int B = z_i.val().dim(0);
    Decoded out;
    out.likelihood = spec.likelihood;
    if (spec.kind == NetKind::mlp) {
      Var<T> t = z_i;
      for (const LinearIdx& l : w.dec_trunk) t = leaky_relu(linear(g, p, l, t));
      out.out = linear(g, p, w.dec_out, t);
      if (spec.likelihood == Likelihood::gaussian)
        out.log_var = clamp_log_var(linear(g, p, w.dec_out_lv, t));
    } else {
      const int stages = static_cast<int>(spec.hidden_sizes.size());
      const int ch = spec.hidden_sizes.back();
      const int sh = spec.input_shape[1] >> stages, sw = spec.input_shape[2] >> stages;
      Var<T> t = swish_(linear(g, p, w.dec_lin0, z_i));
      t = swish_(linear(g, p, w.dec_lin1, t));
      t = reshape(t, Shape{B, ch, sh, sw});
      for (size_t s = 0; s < w.dec_trunk.size(); ++s) {
        t = channel_bias_add(conv_transpose2d(t, p.at(w.dec_trunk[s].w), kConvStride, kConvPad),
                             p.at(w.dec_trunk[s].b));
        if (s + 1 < w.dec_trunk.size()) t = swish_(t);
      }
      out.out = reshape(t, Shape{B, spec.flat_dim()});
    }
    return out;
  }

  // z^c ~ N(0, I); z_i ~ p(z_i | z^c); outputs are likelihood means.
  Generated generate_from_prior(int n, RngStream& rng) {
    require(n >= 1, "generate: n must be >= 1");
    Graph<T> g;
    BoundParams<T> p = bind(g, false);
    Tensor<T> zc = rng.normal_tensor<T>(Shape{n, core_.zc_dim});
    Var<T> zc_v = g.leaf(zc);
    Generated out;
    out.z_core = zc;
    for (int i = 0; i < n_modalities(); ++i) {
      GaussianPair<T> pz = prior_map(g, p, i, zc_v);
      Tensor<T> noise = rng.normal_tensor<T>(pz.mean.val().shape());
      Var<T> z_i = rsample(pz.mean, pz.log_var, noise);
      out.outputs.push_back(likelihood_means(g, decode_modality(g, p, i, z_i)));
    }
    return out;
  }

  // Encode the available modalities, zero the hidden representations of the
  // missing ones, and decode every modality: q(z_i|x_i) where data exists,
  // p(z_i|z^c) where it does not. Null rng takes distribution means instead
  // of samples (the deterministic path).
  Generated cross_modal_infer(const std::vector<int>& available,
                              const std::vector<Tensor<T>>& data, RngStream* rng) {
    require(!available.empty(), "cross_modal_infer: no available modalities");
    require(static_cast<int>(data.size()) == n_modalities(),
            "cross_modal_infer: data list length " + std::to_string(data.size()));
    std::vector<bool> have(static_cast<size_t>(n_modalities()), false);
    for (int i : available) have[static_cast<size_t>(check_mod(i))] = true;
    int B = -1;
    for (int i = 0; i < n_modalities(); ++i)
      if (have[static_cast<size_t>(i)]) {
        const int b = data[static_cast<size_t>(i)].dim(0);
        require(B < 0 || B == b, "cross_modal_infer: inconsistent batch sizes");
        B = b;
      }

    Graph<T> g;
    BoundParams<T> p = bind(g, false);
    std::vector<Var<T>> h(static_cast<size_t>(n_modalities()));
    std::vector<Encoded> enc(static_cast<size_t>(n_modalities()));
    for (int i = 0; i < n_modalities(); ++i) {
      if (have[static_cast<size_t>(i)]) {
        enc[static_cast<size_t>(i)] = encode_modality(g, p, i, data[static_cast<size_t>(i)], false);
        h[static_cast<size_t>(i)] = enc[static_cast<size_t>(i)].h;
      } else {
        h[static_cast<size_t>(i)] = g.leaf(Tensor<T>(Shape{B, mods_[static_cast<size_t>(i)].h_dim}, T(0)));
      }
    }
    // Deterministic evaluation-time mask: keep exactly the available set.
    Mask keep(static_cast<size_t>(n_modalities()), 0);
    for (int i = 0; i < n_modalities(); ++i) keep[static_cast<size_t>(i)] = have[static_cast<size_t>(i)] ? 1 : 0;
    std::vector<Mask> masks(static_cast<size_t>(B), keep);

    GaussianPair<T> qc = encode_core(g, p, h, masks);
    Var<T> z_c = draw(g, qc, rng);
    Generated out;
    out.z_core = z_c.val();
    for (int i = 0; i < n_modalities(); ++i) {
      Var<T> z_i = have[static_cast<size_t>(i)]
                       ? draw(g, GaussianPair<T>{enc[static_cast<size_t>(i)].mean,
                                                 enc[static_cast<size_t>(i)].log_var}, rng)
                       : draw(g, prior_map(g, p, i, z_c), rng);
      out.outputs.push_back(likelihood_means(g, decode_modality(g, p, i, z_i)));
    }
    return out;
  }

  int total_h_dim() const {
    int s = 0;
    for (const auto& m : mods_) s += m.h_dim;
    return s;
  }

 private:
  int check_mod(int i) const {
    require(i >= 0 && i < n_modalities(), "modality index " + std::to_string(i) +
                                              " out of range [0, " +
                                              std::to_string(n_modalities()) + ")");
    return i;
  }

  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }
  static bool is_bias_name(const std::string& n) {
    return ends_with(n, ".b") || ends_with(n, ".beta");
  }
  static bool is_bn_gamma_name(const std::string& n) { return ends_with(n, ".gamma"); }
  static bool is_head_weight_name(const std::string& n) {
    return ends_with(n, "mean.w") || ends_with(n, "logvar.w") || ends_with(n, "outlv.w");
  }
  static int weight_fan_in(const Shape& s) {
    if (s.size() == 2) return s[0];
    if (s.size() == 4) return s[0] * s[2] * s[3];  // in-channels x kernel area
    return static_cast<int>(numel(s));
  }

  Var<T> linear(Graph<T>&, const BoundParams<T>& p, const LinearIdx& l, Var<T> x) {
    return bias_add(matmul(x, p.at(l.w)), p.at(l.b));
  }

  Var<T> batchnorm_layer(Graph<T>&, const BoundParams<T>& p, const BnIdx& bn, Var<T> x,
                         bool train) {
    BatchNormState<T> st;
    st.running_mean = store_.value(bn.rm);
    st.running_var = store_.value(bn.rv);
    Var<T> y = batchnorm(x, p.at(bn.gamma), p.at(bn.beta), st, train);
    if (train) {
      store_.value(bn.rm) = st.running_mean;
      store_.value(bn.rv) = st.running_var;
    }
    return y;
  }

  Var<T> draw(Graph<T>&, const GaussianPair<T>& q, RngStream* rng) {
    if (rng == nullptr) return q.mean;
    Tensor<T> noise = rng->normal_tensor<T>(q.mean.val().shape());
    return rsample(q.mean, q.log_var, noise);
  }

  // Map decoder outputs to the values an operator wants to look at: Bernoulli
  // probabilities, categorical class probabilities, or gaussian means.
  Tensor<T> likelihood_means(Graph<T>&, const Decoded& d) {
    switch (d.likelihood) {
      case Likelihood::bernoulli:
        return sigmoid_(d.out).val();
      case Likelihood::categorical: {
        Var<T> lse = logsumexp(d.out, 1);
        const Tensor<T>& logits = d.out.val();
        const int B = logits.dim(0), K = logits.dim(1);
        Tensor<T> probs(Shape{B, K});
        T* pd = probs.mutable_data();
        const T* ld = logits.data();
        const T* sd = lse.val().data();
        for (int b = 0; b < B; ++b)
          for (int k = 0; k < K; ++k)
            pd[static_cast<std::int64_t>(b) * K + k] =
                std::exp(ld[static_cast<std::int64_t>(b) * K + k] - sd[b]);
        return probs;
      }
      default:
        return d.out.val();
    }
  }

  void register_params() {
    wiring_.resize(mods_.size());
    for (size_t i = 0; i < mods_.size(); ++i) {
      const ModalitySpec& m = mods_[i];
      ModalityWiring& w = wiring_[i];
      const std::string en = "enc." + m.name + ".";
      const std::string dn = "dec." + m.name + ".";
      if (m.kind == NetKind::mlp) {
        int in = m.flat_dim();
        for (size_t l = 0; l < m.hidden_sizes.size(); ++l) {
          w.enc_trunk.push_back(add_linear(en + "l" + std::to_string(l), in, m.hidden_sizes[l]));
          if (m.batchnorm && l + 1 < m.hidden_sizes.size())
            w.enc_bn.push_back(add_bn(en + "bn" + std::to_string(l), m.hidden_sizes[l]));
          in = m.hidden_sizes[l];
        }
        w.enc_mean = add_linear(en + "mean", m.h_dim, m.z_dim);
        w.enc_logvar = add_linear(en + "logvar", m.h_dim, m.z_dim);

        in = m.z_dim;
        std::vector<int> dec_hidden(m.hidden_sizes.rbegin(), m.hidden_sizes.rend());
        for (size_t l = 0; l < dec_hidden.size(); ++l) {
          w.dec_trunk.push_back(add_linear(dn + "l" + std::to_string(l), in, dec_hidden[l]));
          in = dec_hidden[l];
        }
        w.dec_out = add_linear(dn + "out", in, m.flat_dim());
        if (m.likelihood == Likelihood::gaussian)
          w.dec_out_lv = add_linear(dn + "outlv", in, m.flat_dim());
      } else {
        int ch = m.input_shape[0], sh = m.input_shape[1], sw = m.input_shape[2];
        for (size_t s = 0; s < m.hidden_sizes.size(); ++s) {
          const int co = m.hidden_sizes[s];
          LinearIdx st;
          st.w = store_.add(en + "conv" + std::to_string(s) + ".w",
                            Tensor<T>(Shape{co, ch, kConvKernel, kConvKernel}));
          st.b = store_.add(en + "conv" + std::to_string(s) + ".b", Tensor<T>(Shape{co}));
          w.enc_trunk.push_back(st);
          ch = co;
          sh /= 2;
          sw /= 2;
        }
        w.enc_lin = add_linear(en + "lin", ch * sh * sw, m.h_dim);
        w.enc_mean = add_linear(en + "mean", m.h_dim, m.z_dim);
        w.enc_logvar = add_linear(en + "logvar", m.h_dim, m.z_dim);

        w.dec_lin0 = add_linear(dn + "lin0", m.z_dim, m.h_dim);
        w.dec_lin1 = add_linear(dn + "lin1", m.h_dim, ch * sh * sw);
        std::vector<int> up(m.hidden_sizes.rbegin(), m.hidden_sizes.rend());
        for (size_t s = 0; s < up.size(); ++s) {
          const int ci = up[s];
          const int co = (s + 1 < up.size()) ? up[s + 1] : m.input_shape[0];
          LinearIdx st;
          st.w = store_.add(dn + "deconv" + std::to_string(s) + ".w",
                            Tensor<T>(Shape{ci, co, kConvKernel, kConvKernel}));
          st.b = store_.add(dn + "deconv" + std::to_string(s) + ".b", Tensor<T>(Shape{co}));
          w.dec_trunk.push_back(st);
        }
      }
    }

    // core encoder (mrd combiner) and per-modality experts (poe combiner)
    if (combiner_ == Combiner::mrd) {
      int in = total_h_dim();
      for (size_t l = 0; l < core_.hidden_sizes.size(); ++l) {
        core_wiring_.trunk.push_back(
            add_linear("core.l" + std::to_string(l), in, core_.hidden_sizes[l]));
        in = core_.hidden_sizes[l];
      }
      core_wiring_.mean = add_linear("core.mean", in, core_.zc_dim);
      core_wiring_.logvar = add_linear("core.logvar", in, core_.zc_dim);
    } else {
      for (size_t i = 0; i < mods_.size(); ++i) {
        wiring_[i].poe_mean =
            add_linear("core.expert." + mods_[i].name + ".mean", mods_[i].h_dim, core_.zc_dim);
        wiring_[i].poe_logvar =
            add_linear("core.expert." + mods_[i].name + ".logvar", mods_[i].h_dim, core_.zc_dim);
      }
    }

    // shared prior trunk mirrors the core widths, heads per modality
    int in = core_.zc_dim;
    for (size_t l = 0; l < core_.hidden_sizes.size(); ++l) {
      core_wiring_.prior_trunk.push_back(
          add_linear("prior.trunk.l" + std::to_string(l), in, core_.hidden_sizes[l]));
      in = core_.hidden_sizes[l];
    }
    for (size_t i = 0; i < mods_.size(); ++i) {
      wiring_[i].prior_mean = add_linear("prior." + mods_[i].name + ".mean", in, mods_[i].z_dim);
      wiring_[i].prior_logvar =
          add_linear("prior." + mods_[i].name + ".logvar", in, mods_[i].z_dim);
    }
  }

  LinearIdx add_linear(const std::string& base, int in, int out) {
    LinearIdx l;
    l.w = store_.add(base + ".w", Tensor<T>(Shape{in, out}));
    l.b = store_.add(base + ".b", Tensor<T>(Shape{out}));
    return l;
  }
  BnIdx add_bn(const std::string& base, int width) {
    BnIdx b;
    b.gamma = store_.add(base + ".gamma", Tensor<T>(Shape{width}, T(1)));
    b.beta = store_.add(base + ".beta", Tensor<T>(Shape{width}, T(0)));
    b.rm = store_.add(base + ".rm", Tensor<T>(Shape{width}, T(0)), /*trainable=*/false);
    b.rv = store_.add(base + ".rv", Tensor<T>(Shape{width}, T(1)), /*trainable=*/false);
    return b;
  }

  std::vector<ModalitySpec> mods_;
  CoreSpec core_;
  Combiner combiner_;
  ParamStore<T> store_;
  std::vector<ModalityWiring> wiring_;
  struct CoreWiring {
    std::vector<LinearIdx> trunk;
    LinearIdx mean, logvar;
    std::vector<LinearIdx> prior_trunk;
  } core_wiring_;
};

}  // namespace mhvae
