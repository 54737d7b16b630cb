#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mhvae/model.hpp"

namespace mhvae {

struct GradCheckEntry {
  std::string name;
  double max_score = 0.0;  // worst |fd - analytic| / max(|fd|, |analytic|, 1e-2)
  std::int64_t probes = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::string worst_name;
  double tolerance = 1e-4;
  bool passed() const { return worst <= tolerance; }
};

// Central-difference verification of analytic gradients for every trainable
// tensor in the store. The loss function must be a pure function of the store
// values (freeze noise and masks before calling). Tensors up to
// `exhaustive_limit` elements are probed element by element; larger ones get
// `sample_count` seeded element probes plus one full-tensor directional probe,
// which touches every element at once.
//
// Probes whose score exceeds tolerance/10 are retried at eps/16 and eps/256
// before counting. A leaky-relu pre-activation within eps of zero makes the
// centered difference straddle the kink, where it estimates the average of
// the two one-sided slopes rather than the derivative, and batch-norm over a
// four-record batch curves sharply enough that O(eps^2) truncation alone can
// approach the tolerance; shrinking the step fixes both. A genuinely wrong
// analytic gradient fails at every step size, so the retry cannot mask real
// defects.
//
// Runs in double; float-configured models should be rebuilt at double
// precision for checking. Batch-norm running statistics drift on train-mode
// forwards but never influence train-mode outputs; they are snapshotted and
// restored anyway so the store leaves unchanged.
//
// corrupt_analytic deliberately damages one analytic gradient entry first — a
// negative control proving the comparison can fail.
template <class LossFn>
GradCheckReport run_gradcheck(ParamStore<double>& store, LossFn&& loss_fn, double eps = 1e-4,
                              double tolerance = 1e-4, std::int64_t exhaustive_limit = 256,
                              int sample_count = 16, std::uint64_t seed = 0,
                              bool corrupt_analytic = false) {
  std::vector<std::pair<size_t, Tensor<double>>> buffer_snapshot;
  for (size_t i = 0; i < store.size(); ++i)
    if (!store.trainable(i)) buffer_snapshot.emplace_back(i, store.value(i));

  GradCheckReport report;
  report.tolerance = tolerance;

  std::vector<Tensor<double>> grads(store.size());
  {
    Graph<double> g;
    BoundParams<double> p = bind_params(g, store, true);
    Var<double> loss = loss_fn(g, p);
    require(loss.val().size() == 1, "gradcheck: loss must be scalar");
    g.backward(loss);
    for (size_t i = 0; i < store.size(); ++i) grads[i] = g.grad(p.at(i).id);
  }
  if (corrupt_analytic) {
    for (size_t i = 0; i < store.size(); ++i)
      if (store.trainable(i) && grads[i].size() > 0) {
        grads[i].mutable_data()[0] += 1.0;
        break;
      }
  }

  auto loss_value = [&]() {
    Graph<double> g;
    BoundParams<double> p = bind_params(g, store, false);
    return loss_fn(g, p).val()[0];
  };
  auto score_of = [](double fd, double an) {
    return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
  };

  for (size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    Tensor<double>& theta = store.value(i);
    const std::int64_t n = theta.size();
    GradCheckEntry entry;
    entry.name = store.name(i);

    auto central_at = [&](std::int64_t j, double h) {
      const double orig = theta[j];
      theta.mutable_data()[j] = orig + h;
      const double up = loss_value();
      theta.mutable_data()[j] = orig - h;
      const double dn = loss_value();
      theta.mutable_data()[j] = orig;
      return (up - dn) / (2.0 * h);
    };
    auto probe_element = [&](std::int64_t j) {
      double best = std::numeric_limits<double>::infinity();
      for (double h : {eps, eps / 16.0, eps / 256.0}) {
        best = std::min(best, score_of(central_at(j, h), grads[i][j]));
        if (best <= tolerance / 10.0) break;
      }
      entry.max_score = std::max(entry.max_score, best);
      entry.probes++;
    };

    if (n <= exhaustive_limit) {
      for (std::int64_t j = 0; j < n; ++j) probe_element(j);
    } else {
      RngStream rng = substream(seed, "gradcheck", i);
      for (int s = 0; s < sample_count; ++s) probe_element(rng.below(n));

      // directional probe: d(loss)/dt along a random unit direction
      Tensor<double> dir = rng.normal_tensor<double>(theta.shape());
      double norm = 0.0;
      for (std::int64_t j = 0; j < n; ++j) norm += dir[j] * dir[j];
      norm = std::sqrt(norm);
      double* dd = dir.mutable_data();
      for (std::int64_t j = 0; j < n; ++j) dd[j] /= norm;

      Tensor<double> orig = theta;
      double an_dir = 0.0;
      for (std::int64_t j = 0; j < n; ++j) an_dir += grads[i][j] * dir[j];
      auto central_dir = [&](double h) {
        double* td = theta.mutable_data();
        for (std::int64_t j = 0; j < n; ++j) td[j] = orig[j] + h * dir[j];
        const double up = loss_value();
        td = theta.mutable_data();
        for (std::int64_t j = 0; j < n; ++j) td[j] = orig[j] - h * dir[j];
        const double dn = loss_value();
        theta = orig;
        return (up - dn) / (2.0 * h);
      };
      double best = std::numeric_limits<double>::infinity();
      for (double h : {eps, eps / 16.0, eps / 256.0}) {
        best = std::min(best, score_of(central_dir(h), an_dir));
        if (best <= tolerance / 10.0) break;
      }
      entry.max_score = std::max(entry.max_score, best);
      entry.probes++;
    }

    if (entry.max_score >= report.worst) {
      report.worst = entry.max_score;
      report.worst_name = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }

  for (auto& [idx, snap] : buffer_snapshot) store.value(idx) = snap;
  return report;
}

}  // namespace mhvae
