#pragma once

// Analytic linear-Gaussian instrument. Builds an MHVAE whose encoders,
// decoders and prior heads are affine with fixed log-variances, so the
// generative model is jointly Gaussian and every marginal, joint and
// conditional log-likelihood has a closed form. The estimators are certified
// against these values. Column-vector math throughout; the model's linear
// layers compute y = x W + b row-wise, so weights are stored transposed.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mhvae/data.hpp"
#include "mhvae/model.hpp"

namespace mhvae {

// dense row-major double matrix, just big enough for the oracle blocks
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

  double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
};

inline Mat mat_mul(const Mat& x, const Mat& y) {
  require(x.cols == y.rows, "mat_mul: " + std::to_string(x.cols) + " vs " +
                                std::to_string(y.rows));
  Mat out(x.rows, y.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int k = 0; k < x.cols; ++k) {
      const double v = x.at(i, k);
      for (int j = 0; j < y.cols; ++j) out.at(i, j) += v * y.at(k, j);
    }
  return out;
}

inline Mat mat_transpose(const Mat& x) {
  Mat out(x.cols, x.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) out.at(j, i) = x.at(i, j);
  return out;
}

namespace detail {

// lower-triangular cholesky factor of a symmetric positive-definite matrix
inline Mat cholesky(const Mat& s) {
  require(s.rows == s.cols, "cholesky: matrix not square");
  const int n = s.rows;
  Mat l(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double acc = s.at(i, j);
      for (int k = 0; k < j; ++k) acc -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (acc <= 0.0)
          throw NumericError("cholesky: matrix not positive definite at pivot " +
                             std::to_string(i));
        l.at(i, i) = std::sqrt(acc);
      } else {
        l.at(i, j) = acc / l.at(j, j);
      }
    }
  }
  return l;
}

// solve (L L^T) x = b
inline std::vector<double> chol_solve(const Mat& l, std::vector<double> b) {
  const int n = l.rows;
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < i; ++k) b[static_cast<size_t>(i)] -= l.at(i, k) * b[static_cast<size_t>(k)];
    b[static_cast<size_t>(i)] /= l.at(i, i);
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int k = i + 1; k < n; ++k)
      b[static_cast<size_t>(i)] -= l.at(k, i) * b[static_cast<size_t>(k)];
    b[static_cast<size_t>(i)] /= l.at(i, i);
  }
  return b;
}

inline double chol_logdet(const Mat& l) {
  double acc = 0.0;
  for (int i = 0; i < l.rows; ++i) acc += std::log(l.at(i, i));
  return 2.0 * acc;
}

}  // namespace detail

struct OracleDims {
  int zc_dim = 3;
  std::vector<int> z_dims;
  std::vector<int> x_dims;
  std::vector<std::string> names;  // optional; defaults to m0, m1, ...
};

// one modality of the generative chain:
//   z = A z^c + a + eta,   eta ~ N(0, exp(prior_lv) I)
//   x = B z   + b + eps,   eps ~ N(0, exp(obs_lv) I)
struct OracleArm {
  Mat A;                  // [z_dim x zc_dim]
  std::vector<double> a;  // [z_dim]
  double prior_lv = 0.0;
  Mat B;                  // [x_dim x z_dim]
  std::vector<double> b;  // [x_dim]
  double obs_lv = 0.0;
};

class LinearGaussianOracle {
 public:
  LinearGaussianOracle(OracleDims dims, std::vector<OracleArm> arms, double proposal_inflation);

  Mhvae<double>& model() { return model_; }
  const OracleArm& arm(int i) const { return arms_[static_cast<size_t>(check(i))]; }
  const OracleDims& dims() const { return dims_; }

  // mean and covariance of the stacked observables in `observed` order
  std::vector<double> stacked_mean(const std::vector<int>& observed) const {
    std::vector<double> mu;
    for (int i : observed) {
      check(i);
      const auto& m = x_mean_[static_cast<size_t>(i)];
      mu.insert(mu.end(), m.begin(), m.end());
    }
    return mu;
  }

  Mat stacked_cov(const std::vector<int>& observed) const {
    int total = 0;
    for (int i : observed) total += dims_.x_dims[static_cast<size_t>(check(i))];
    Mat cov(total, total);
    int ro = 0;
    for (int i : observed) {
      int co = 0;
      for (int j : observed) {
        const Mat blk = x_cov_block(i, j);
        for (int r = 0; r < blk.rows; ++r)
          for (int c = 0; c < blk.cols; ++c) cov.at(ro + r, co + c) = blk.at(r, c);
        co += blk.cols;
      }
      ro += dims_.x_dims[static_cast<size_t>(i)];
    }
    return cov;
  }

  // closed-form log p(x_O) for a single record (each slot [1 x x_dim])
  double exact_joint_ll(const std::vector<Tensor<double>>& row,
                        const std::vector<int>& observed) const {
    const std::vector<double> mu = stacked_mean(observed);
    const Mat l = detail::cholesky(stacked_cov(observed));
    std::vector<double> diff;
    diff.reserve(mu.size());
    for (int i : observed) {
      const Tensor<double>& t = row[static_cast<size_t>(i)];
      require_shape(t.size() == dims_.x_dims[static_cast<size_t>(i)],
                    "oracle: record for modality " + std::to_string(i) + " has " +
                        std::to_string(t.size()) + " values");
      for (std::int64_t d = 0; d < t.size(); ++d)
        diff.push_back(t[d] - mu[diff.size()]);
    }
    const std::vector<double> sol = detail::chol_solve(l, diff);
    double quad = 0.0;
    for (size_t i = 0; i < diff.size(); ++i) quad += diff[i] * sol[i];
    const double m = static_cast<double>(diff.size());
    return -0.5 * (m * kLog2Pi + detail::chol_logdet(l) + quad);
  }

  double exact_conditional_ll(const std::vector<Tensor<double>>& row, int target,
                              const std::vector<int>& given) const {
    std::vector<int> both = given;
    both.push_back(target);
    return exact_joint_ll(row, both) - exact_joint_ll(row, given);
  }

 private:
  int check(int i) const {
    require(i >= 0 && i < static_cast<int>(arms_.size()),
            "oracle: modality index " + std::to_string(i) + " out of range");
    return i;
  }

  // Cov(z_i, z_j) = A_i A_j^T (+ prior noise when i = j)
  Mat z_cov_block(int i, int j) const {
    Mat blk = mat_mul(arms_[static_cast<size_t>(i)].A,
                      mat_transpose(arms_[static_cast<size_t>(j)].A));
    if (i == j) {
      const double v = std::exp(arms_[static_cast<size_t>(i)].prior_lv);
      for (int d = 0; d < blk.rows; ++d) blk.at(d, d) += v;
    }
    return blk;
  }

  // Cov(x_i, x_j) = B_i Cov(z_i, z_j) B_j^T (+ observation noise when i = j)
  Mat x_cov_block(int i, int j) const {
    Mat blk = mat_mul(mat_mul(arms_[static_cast<size_t>(i)].B, z_cov_block(i, j)),
                      mat_transpose(arms_[static_cast<size_t>(j)].B));
    if (i == j) {
      const double v = std::exp(arms_[static_cast<size_t>(i)].obs_lv);
      for (int d = 0; d < blk.rows; ++d) blk.at(d, d) += v;
    }
    return blk;
  }

  void set_param(const std::string& name, const std::vector<double>& values) {
    ParamStore<double>& store = model_.store();
    Tensor<double>& t = store.value(store.index_of(name));
    require(t.size() == static_cast<std::int64_t>(values.size()),
            "oracle: parameter '" + name + "' expects " + std::to_string(t.size()) + " values");
    double* d = t.mutable_data();
    for (size_t k = 0; k < values.size(); ++k) d[k] = values[k];
  }

  // y = x W + b with W indexed [in][out]; our maps are column-style y = M x,
  // so the stored weight is M transposed
  static std::vector<double> weight_from_map(const Mat& m) {
    std::vector<double> w(static_cast<size_t>(m.rows) * static_cast<size_t>(m.cols));
    for (int o = 0; o < m.rows; ++o)
      for (int i = 0; i < m.cols; ++i)
        w[static_cast<size_t>(i) * m.rows + o] = m.at(o, i);
    return w;
  }

  static Mhvae<double> make_model(const OracleDims& dims);
  void install_generative_params();
  void install_proposal_params(double inflation);

  OracleDims dims_;
  std::vector<OracleArm> arms_;
  Mhvae<double> model_;
  std::vector<std::vector<double>> x_mean_;
};

inline Mhvae<double> LinearGaussianOracle::make_model(const OracleDims& dims) {
  require_config(!dims.z_dims.empty() && dims.z_dims.size() == dims.x_dims.size(),
                 "oracle: z and x dimension lists must be nonempty and equal length");
  require_config(dims.zc_dim >= 1 && dims.zc_dim <= 8,
                 "oracle: core dimension must be in [1, 8] (covariance cost guard)");
  require_config(dims.names.empty() || dims.names.size() == dims.z_dims.size(),
                 "oracle: name list must be empty or match the modality count");
  std::vector<ModalitySpec> mods;
  for (size_t i = 0; i < dims.z_dims.size(); ++i) {
    require_config(dims.z_dims[i] >= 1 && dims.z_dims[i] <= 8,
                   "oracle: latent dims must be in [1, 8] (covariance cost guard)");
    require_config(dims.x_dims[i] >= 1 && dims.x_dims[i] <= 16,
                   "oracle: observable dims must be in [1, 16] (covariance cost guard)");
    ModalitySpec m;
    m.name = dims.names.empty() ? "m" + std::to_string(i) : dims.names[i];
    m.kind = NetKind::mlp;
    m.input_shape = {dims.x_dims[i]};
    m.hidden_sizes = {};  // affine: heads sit directly on the input
    m.h_dim = dims.x_dims[i];
    m.z_dim = dims.z_dims[i];
    m.likelihood = Likelihood::gaussian;
    mods.push_back(std::move(m));
  }
  CoreSpec core;
  core.hidden_sizes = {};
  core.zc_dim = dims.zc_dim;
  return Mhvae<double>(std::move(mods), std::move(core));
}

inline LinearGaussianOracle::LinearGaussianOracle(OracleDims dims, std::vector<OracleArm> arms,
                                                  double proposal_inflation)
    : dims_(std::move(dims)), arms_(std::move(arms)), model_(make_model(dims_)) {
  require(arms_.size() == dims_.z_dims.size(),
          "oracle: arm count " + std::to_string(arms_.size()) + " does not match dims");
  for (size_t i = 0; i < arms_.size(); ++i) {
    const OracleArm& arm = arms_[i];
    require(arm.A.rows == dims_.z_dims[i] && arm.A.cols == dims_.zc_dim &&
                arm.B.rows == dims_.x_dims[i] && arm.B.cols == dims_.z_dims[i] &&
                static_cast<int>(arm.a.size()) == dims_.z_dims[i] &&
                static_cast<int>(arm.b.size()) == dims_.x_dims[i],
            "oracle: arm " + std::to_string(i) + " shapes do not match dims");
    // mu_x = B a + b
    std::vector<double> mu(static_cast<size_t>(dims_.x_dims[i]), 0.0);
    for (int r = 0; r < arm.B.rows; ++r) {
      double acc = arm.b[static_cast<size_t>(r)];
      for (int c = 0; c < arm.B.cols; ++c) acc += arm.B.at(r, c) * arm.a[static_cast<size_t>(c)];
      mu[static_cast<size_t>(r)] = acc;
    }
    x_mean_.push_back(std::move(mu));
  }
  install_generative_params();
  install_proposal_params(proposal_inflation);
}

inline void LinearGaussianOracle::install_generative_params() {
  for (size_t i = 0; i < arms_.size(); ++i) {
    const std::string name = model_.modality(static_cast<int>(i)).name;
    const OracleArm& arm = arms_[i];
    set_param("prior." + name + ".mean.w", weight_from_map(arm.A));
    set_param("prior." + name + ".mean.b", arm.a);
    set_param("prior." + name + ".logvar.w",
              std::vector<double>(static_cast<size_t>(dims_.zc_dim * dims_.z_dims[i]), 0.0));
    set_param("prior." + name + ".logvar.b",
              std::vector<double>(static_cast<size_t>(dims_.z_dims[i]), arm.prior_lv));
    set_param("dec." + name + ".out.w", weight_from_map(arm.B));
    set_param("dec." + name + ".out.b", arm.b);
    set_param("dec." + name + ".outlv.w",
              std::vector<double>(static_cast<size_t>(dims_.z_dims[i] * dims_.x_dims[i]), 0.0));
    set_param("dec." + name + ".outlv.b",
              std::vector<double>(static_cast<size_t>(dims_.x_dims[i]), arm.obs_lv));
  }
}

// Proposals are the exact Gaussian-conditioning affine maps with diagonal
// covariance, inflated so the proposal covers the target even where the
// diagonal approximation or a subset mask thins the tails.
inline void LinearGaussianOracle::install_proposal_params(double inflation) {
  require(inflation >= 1.0, "oracle: proposal inflation must be >= 1");
  const int n = static_cast<int>(arms_.size());

  // q(z_i | x_i) from the joint of (z_i, x_i)
  for (int i = 0; i < n; ++i) {
    const OracleArm& arm = arms_[static_cast<size_t>(i)];
    const std::string name = model_.modality(i).name;
    const Mat czz = z_cov_block(i, i);
    const Mat czx = mat_mul(czz, mat_transpose(arm.B));  // Cov(z, x)
    const Mat cxx = x_cov_block(i, i);
    const Mat l = detail::cholesky(cxx);

    // K = Cov(z,x) Cov(x,x)^-1, one solve per row of K
    Mat k(czx.rows, czx.cols);
    for (int r = 0; r < czx.rows; ++r) {
      std::vector<double> rhs(static_cast<size_t>(czx.cols));
      for (int c = 0; c < czx.cols; ++c) rhs[static_cast<size_t>(c)] = czx.at(r, c);
      const std::vector<double> sol = detail::chol_solve(l, rhs);
      for (int c = 0; c < czx.cols; ++c) k.at(r, c) = sol[static_cast<size_t>(c)];
    }
    set_param("enc." + name + ".mean.w", weight_from_map(k));
    std::vector<double> bias(arm.a);
    for (int r = 0; r < k.rows; ++r)
      for (int c = 0; c < k.cols; ++c)
        bias[static_cast<size_t>(r)] -= k.at(r, c) * x_mean_[static_cast<size_t>(i)][static_cast<size_t>(c)];
    set_param("enc." + name + ".mean.b", bias);

    const Mat cond = mat_mul(k, mat_transpose(czx));  // K Cov(z,x)^T
    std::vector<double> lv(static_cast<size_t>(czz.rows));
    for (int d = 0; d < czz.rows; ++d)
      lv[static_cast<size_t>(d)] = std::log((czz.at(d, d) - cond.at(d, d)) * inflation);
    set_param("enc." + name + ".logvar.w",
              std::vector<double>(static_cast<size_t>(arm.B.rows * czz.rows), 0.0));
    set_param("enc." + name + ".logvar.b", lv);
  }

  // q(z^c | all observables) from the joint of (z^c, x_stack); under subset
  // masks the dropped blocks contribute zero, leaving a valid (wider) proposal
  std::vector<int> all(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
  const Mat cxx = stacked_cov(all);
  const std::vector<double> mux = stacked_mean(all);
  const int total = cxx.rows;
  Mat czcx(dims_.zc_dim, total);  // Cov(z^c, x_i) = A_i^T B_i^T stacked
  {
    int off = 0;
    for (int i = 0; i < n; ++i) {
      const Mat blk = mat_mul(mat_transpose(arms_[static_cast<size_t>(i)].A),
                              mat_transpose(arms_[static_cast<size_t>(i)].B));
      for (int r = 0; r < blk.rows; ++r)
        for (int c = 0; c < blk.cols; ++c) czcx.at(r, off + c) = blk.at(r, c);
      off += blk.cols;
    }
  }
  const Mat l = detail::cholesky(cxx);
  Mat k(dims_.zc_dim, total);
  for (int r = 0; r < dims_.zc_dim; ++r) {
    std::vector<double> rhs(static_cast<size_t>(total));
    for (int c = 0; c < total; ++c) rhs[static_cast<size_t>(c)] = czcx.at(r, c);
    const std::vector<double> sol = detail::chol_solve(l, rhs);
    for (int c = 0; c < total; ++c) k.at(r, c) = sol[static_cast<size_t>(c)];
  }
  set_param("core.mean.w", weight_from_map(k));
  std::vector<double> bias(static_cast<size_t>(dims_.zc_dim), 0.0);
  for (int r = 0; r < dims_.zc_dim; ++r)
    for (int c = 0; c < total; ++c) bias[static_cast<size_t>(r)] -= k.at(r, c) * mux[static_cast<size_t>(c)];
  set_param("core.mean.b", bias);

  const Mat cond = mat_mul(k, mat_transpose(czcx));
  std::vector<double> lv(static_cast<size_t>(dims_.zc_dim));
  for (int d = 0; d < dims_.zc_dim; ++d)
    lv[static_cast<size_t>(d)] = std::log((1.0 - cond.at(d, d)) * inflation);
  set_param("core.logvar.w", std::vector<double>(static_cast<size_t>(total * dims_.zc_dim), 0.0));
  set_param("core.logvar.b", lv);
}

// Seeded instrument with moderate, well-conditioned generative maps.
inline LinearGaussianOracle build_linear_gaussian_oracle(const OracleDims& dims,
                                                         std::uint64_t seed,
                                                         double proposal_inflation = 1.3) {
  RngStream rng = substream(seed, "oracle");
  auto draw = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
  std::vector<OracleArm> arms;
  for (size_t i = 0; i < dims.z_dims.size(); ++i) {
    OracleArm arm;
    arm.A = Mat(dims.z_dims[i], dims.zc_dim);
    for (double& v : arm.A.a) v = draw(-0.6, 0.6);
    arm.a.resize(static_cast<size_t>(dims.z_dims[i]));
    for (double& v : arm.a) v = draw(-0.5, 0.5);
    arm.prior_lv = -1.2;
    arm.B = Mat(dims.x_dims[i], dims.z_dims[i]);
    for (double& v : arm.B.a) v = draw(-0.6, 0.6);
    arm.b.resize(static_cast<size_t>(dims.x_dims[i]));
    for (double& v : arm.b) v = draw(-0.3, 0.3);
    arm.obs_lv = -1.6;
    arms.push_back(std::move(arm));
  }
  return LinearGaussianOracle(dims, std::move(arms), proposal_inflation);
}

// Samples drawn from the oracle generative chain, plus the oracle itself as
// the exact-likelihood handle.
struct SynthLinearGaussian {
  std::vector<Tensor<double>> data;  // per modality [n x x_dim]
  LinearGaussianOracle oracle;
};

inline SynthLinearGaussian synth_linear_gaussian(const OracleDims& dims, int n,
                                                 std::uint64_t seed) {
  require(n >= 1, "synth_linear_gaussian: n must be >= 1");
  LinearGaussianOracle oracle = build_linear_gaussian_oracle(dims, seed);
  RngStream rng = substream(seed, "synth");
  const int mods = static_cast<int>(dims.z_dims.size());
  std::vector<Tensor<double>> data;
  for (int i = 0; i < mods; ++i) data.emplace_back(Shape{n, dims.x_dims[static_cast<size_t>(i)]});

  std::vector<double> zc(static_cast<size_t>(dims.zc_dim));
  for (int r = 0; r < n; ++r) {
    for (double& v : zc) v = rng.normal();
    for (int i = 0; i < mods; ++i) {
      const OracleArm& arm = oracle.arm(i);
      std::vector<double> z(static_cast<size_t>(dims.z_dims[static_cast<size_t>(i)]));
      const double ps = std::exp(0.5 * arm.prior_lv);
      for (int d = 0; d < static_cast<int>(z.size()); ++d) {
        double acc = arm.a[static_cast<size_t>(d)];
        for (int c = 0; c < dims.zc_dim; ++c) acc += arm.A.at(d, c) * zc[static_cast<size_t>(c)];
        z[static_cast<size_t>(d)] = acc + ps * rng.normal();
      }
      double* row = data[static_cast<size_t>(i)].mutable_data() +
                    static_cast<std::int64_t>(r) * dims.x_dims[static_cast<size_t>(i)];
      const double os = std::exp(0.5 * arm.obs_lv);
      for (int d = 0; d < dims.x_dims[static_cast<size_t>(i)]; ++d) {
        double acc = arm.b[static_cast<size_t>(d)];
        for (int c = 0; c < static_cast<int>(z.size()); ++c)
          acc += arm.B.at(d, c) * z[static_cast<size_t>(c)];
        row[d] = acc + os * rng.normal();
      }
    }
  }
  return SynthLinearGaussian{std::move(data), std::move(oracle)};
}

}  // namespace mhvae
