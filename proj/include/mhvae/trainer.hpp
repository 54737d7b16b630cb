#pragma once

#include <chrono>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "mhvae/data.hpp"
#include "mhvae/objective.hpp"
#include "mhvae/specs_json.hpp"

namespace mhvae {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;  // indexed like the store; empty for buffers
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  static AdamState make(const ParamStore<T>& store) {
    AdamState s;
    s.m.resize(store.size());
    s.v.resize(store.size());
    for (size_t i = 0; i < store.size(); ++i)
      if (store.trainable(i)) {
        s.m[i] = zeros_like(store.value(i));
        s.v[i] = zeros_like(store.value(i));
      }
    return s;
  }
};

// One bias-corrected Adam update. `grads` is indexed like the store; an empty
// slot means the parameter was unreachable this step and is treated as zero
// gradient. Any non-finite gradient aborts, naming the parameter.
template <class T>
void adam_step(ParamStore<T>& store, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               double lr, const AdamConfig& cfg = {}) {
  require(grads.size() == store.size(), "adam_step: gradient list length mismatch");
  require(state.m.size() == store.size(), "adam_step: state does not match the store");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    Tensor<T>& p = store.value(i);
    const std::int64_t n = p.size();
    const Tensor<T>& g = grads[i];
    if (!g.empty()) {
      require_shape(same_shape(g, p), "adam_step: gradient shape " + shape_str(g.shape()) +
                                          " vs param " + shape_str(p.shape()));
      if (!g.all_finite())
        throw NumericError("adam_step: non-finite gradient for '" + store.name(i) + "'");
    }
    T* pm = state.m[i].mutable_data();
    T* pv = state.v[i].mutable_data();
    T* pp = p.mutable_data();
    const T* pg = g.empty() ? nullptr : g.data();
    for (std::int64_t j = 0; j < n; ++j) {
      const double gj = pg ? static_cast<double>(pg[j]) : 0.0;
      const double mj = cfg.beta1 * static_cast<double>(pm[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(pv[j]) + (1.0 - cfg.beta2) * gj * gj;
      pm[j] = static_cast<T>(mj);
      pv[j] = static_cast<T>(vj);
      pp[j] = static_cast<T>(static_cast<double>(pp[j]) -
                             lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoints: "MHV1", u32 LE version, u32 LE JSON length, JSON header,
// then raw float32 LE payloads in directory order
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_le32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline std::uint32_t le32(const std::vector<std::uint8_t>& b, size_t off) {
  return std::uint32_t(b[off]) | (std::uint32_t(b[off + 1]) << 8) |
         (std::uint32_t(b[off + 2]) << 16) | (std::uint32_t(b[off + 3]) << 24);
}

inline void append_f32le(std::vector<std::uint8_t>& out, const Tensor<float>& t) {
  for (std::int64_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    const float v = t[i];
    std::memcpy(&bits, &v, 4);
    put_le32(out, bits);
  }
}

inline void read_f32le(const std::vector<std::uint8_t>& in, size_t off, Tensor<float>& t) {
  float* d = t.mutable_data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const std::uint32_t bits = le32(in, off + 4 * static_cast<size_t>(i));
    std::memcpy(d + i, &bits, 4);
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_bytes(const Mhvae<float>& model,
                                                  const AdamState<float>& adam, int epoch,
                                                  std::uint64_t seed) {
  const ParamStore<float>& store = model.store();
  nlohmann::json dir = nlohmann::json::array();
  std::vector<const Tensor<float>*> payload_order;
  std::int64_t offset = 0;
  auto add_entry = [&](const std::string& name, const Tensor<float>& t) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    payload_order.push_back(&t);
    offset += t.size() * 4;
  };
  for (size_t i = 0; i < store.size(); ++i) add_entry(store.name(i), store.value(i));
  for (size_t i = 0; i < store.size(); ++i)
    if (store.trainable(i)) {
      add_entry("adam.m:" + store.name(i), adam.m[i]);
      add_entry("adam.v:" + store.name(i), adam.v[i]);
    }

  nlohmann::json header{{"combiner", to_string(model.combiner())},
                        {"modalities", model.modalities()},
                        {"core", model.core()},
                        {"epoch", epoch},
                        {"seed", seed},
                        {"adam_t", adam.t},
                        {"tensors", dir}};
  const std::string js = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(12 + js.size() + static_cast<size_t>(offset));
  for (char c : {'M', 'H', 'V', '1'}) out.push_back(static_cast<std::uint8_t>(c));
  detail::put_le32(out, kCheckpointVersion);
  detail::put_le32(out, static_cast<std::uint32_t>(js.size()));
  out.insert(out.end(), js.begin(), js.end());
  for (const Tensor<float>* t : payload_order) detail::append_f32le(out, *t);
  return out;
}

inline void save_checkpoint(const std::string& path, const Mhvae<float>& model,
                            const AdamState<float>& adam, int epoch, std::uint64_t seed) {
  const std::vector<std::uint8_t> bytes = checkpoint_bytes(model, adam, epoch, seed);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write to checkpoint '" + path + "'");
}

struct RestoredTraining {
  Mhvae<float> model;
  AdamState<float> adam;
  int epoch = 0;
  std::uint64_t seed = 0;
};

inline RestoredTraining load_checkpoint_bytes(const std::vector<std::uint8_t>& buf,
                                              const std::string& origin) {
  if (buf.size() < 12) throw FormatError(origin + ": too short for a checkpoint header");
  if (!(buf[0] == 'M' && buf[1] == 'H' && buf[2] == 'V' && buf[3] == '1'))
    throw FormatError(origin + ": bad checkpoint magic (want \"MHV1\")");
  const std::uint32_t version = detail::le32(buf, 4);
  if (version != kCheckpointVersion)
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t js_len = detail::le32(buf, 8);
  if (buf.size() < 12 + static_cast<size_t>(js_len))
    throw DataError(origin + ": truncated JSON header, need " + std::to_string(js_len) +
                    " bytes, found " + std::to_string(buf.size() - 12));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 12, buf.begin() + 12 + js_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": checkpoint header is not valid JSON: " + e.what());
  }

  RestoredTraining r{
      Mhvae<float>(header.at("modalities").get<std::vector<ModalitySpec>>(),
                   header.at("core").get<CoreSpec>(),
                   combiner_from_string(header.at("combiner").get<std::string>())),
      AdamState<float>{}, header.at("epoch").get<int>(), header.at("seed").get<std::uint64_t>()};
  r.adam = AdamState<float>::make(r.model.store());
  r.adam.t = header.at("adam_t").get<std::int64_t>();

  const size_t payload_base = 12 + js_len;
  const std::int64_t payload_size = static_cast<std::int64_t>(buf.size() - payload_base);
  std::unordered_map<std::string, std::pair<Shape, std::int64_t>> dir;
  for (const auto& e : header.at("tensors"))
    dir[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(),
                                            e.at("offset").get<std::int64_t>()};

  ParamStore<float>& store = r.model.store();
  auto read_named = [&](const std::string& name, Tensor<float>& into) {
    auto it = dir.find(name);
    if (it == dir.end()) throw DataError(origin + ": checkpoint is missing tensor '" + name + "'");
    if (it->second.first != into.shape())
      throw DataError(origin + ": tensor '" + name + "' has shape " +
                      shape_str(it->second.first) + ", the model needs " +
                      shape_str(into.shape()));
    const std::int64_t off = it->second.second;
    if (off < 0 || off + into.size() * 4 > payload_size)
      throw DataError(origin + ": truncated payload for tensor '" + name + "'");
    detail::read_f32le(buf, payload_base + static_cast<size_t>(off), into);
  };
  for (size_t i = 0; i < store.size(); ++i) read_named(store.name(i), store.value(i));
  for (size_t i = 0; i < store.size(); ++i)
    if (store.trainable(i)) {
      read_named("adam.m:" + store.name(i), r.adam.m[i]);
      read_named("adam.v:" + store.name(i), r.adam.v[i]);
    }
  return r;
}

inline RestoredTraining load_checkpoint(const std::string& path) {
  return load_checkpoint_bytes(read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 0;
  WarmupSchedule warmup;
  int checkpoint_every = 0;    // additionally checkpoint every k epochs (0 = final only)
  std::string checkpoint_dir;  // empty = never write checkpoints
};

inline void validate(const TrainConfig& cfg) {
  require_config(cfg.learning_rate > 0.0, "train: learning_rate must be > 0");
  require_config(cfg.batch_size >= 2, "train: batch_size must be >= 2 (batch-norm minimum)");
  require_config(cfg.epochs >= 1, "train: epochs must be >= 1");
  require_config(cfg.checkpoint_every >= 0, "train: checkpoint_every must be >= 0");
}

// Plain-number view of a LossBreakdown, averaged over a whole split.
struct LossSummary {
  std::vector<double> recon;
  std::vector<double> kl_modality;
  double kl_core = 0.0;
  double weighted_total = 0.0;
};

struct EpochMetrics {
  int epoch = 0;
  LossSummary train;
  LossSummary val;
  double wallclock_s = 0.0;
};

namespace detail {

inline void accumulate(LossSummary& acc, const LossBreakdown<float>& part, int weight) {
  if (acc.recon.empty()) {
    acc.recon.assign(part.recon.size(), 0.0);
    acc.kl_modality.assign(part.kl_modality.size(), 0.0);
  }
  for (size_t i = 0; i < part.recon.size(); ++i) {
    acc.recon[i] += part.recon[i] * weight;
    acc.kl_modality[i] += part.kl_modality[i] * weight;
  }
  acc.kl_core += part.kl_core * weight;
  acc.weighted_total += part.weighted_total * weight;
}

inline void finish(LossSummary& acc, int total) {
  for (double& v : acc.recon) v /= total;
  for (double& v : acc.kl_modality) v /= total;
  acc.kl_core /= total;
  acc.weighted_total /= total;
}

}  // namespace detail

// One full training run (or the tail of one, when start_epoch > 0 after a
// checkpoint restore). Fully deterministic given (seed, config, dataset):
// every consumer draws from its own substream keyed by (seed, purpose, epoch),
// so resuming at epoch E replays exactly what the uninterrupted run did.
inline std::vector<EpochMetrics> fit(Mhvae<float>& model, AdamState<float>& adam,
                                     const BimodalDataset& ds, const TrainConfig& cfg,
                                     int start_epoch = 0,
                                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  validate(cfg);
  require(model.n_modalities() == 2, "fit: the bimodal dataset feeds exactly 2 modalities");
  require(start_epoch >= 0 && start_epoch <= cfg.epochs, "fit: start_epoch out of range");
  const std::vector<int>& train_ids = ds.ids(Split::train);
  const std::vector<int>& val_ids = ds.ids(Split::val);
  require(!train_ids.empty(), "fit: empty training split");
  const MaskConfig mask_cfg = model.mask_config();
  validate_mask_config(mask_cfg);

  std::vector<EpochMetrics> history;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics em;
    em.epoch = epoch;

    // train
    RngStream mask_rng = substream(cfg.seed, "mask", static_cast<std::uint64_t>(epoch));
    RngStream noise_rng = substream(cfg.seed, "noise", static_cast<std::uint64_t>(epoch));
    const auto batches = batch_indices(static_cast<int>(train_ids.size()), cfg.batch_size,
                                       cfg.seed, epoch, /*shuffle=*/true, /*min_final=*/2);
    int seen = 0;
    for (const auto& positions : batches) {
      std::vector<int> records;
      records.reserve(positions.size());
      for (int pos : positions) records.push_back(train_ids[static_cast<size_t>(pos)]);
      const std::vector<Tensor<float>> batch = modal_batch(ds, records);
      std::vector<Mask> masks;
      masks.reserve(records.size());
      for (size_t i = 0; i < records.size(); ++i) masks.push_back(sample_mask(mask_cfg, mask_rng));

      Graph<float> g;
      BoundParams<float> p = model.bind(g, true);
      LossBreakdown<float> loss =
          elbo(model, g, p, batch, masks, epoch, cfg.warmup, noise_rng, true);
      if (!std::isfinite(loss.weighted_total)) {
        if (!cfg.checkpoint_dir.empty())
          save_checkpoint(cfg.checkpoint_dir + "/abort.mhv1", model, adam, epoch, cfg.seed);
        std::string ids_str;
        for (int r : records) ids_str += std::to_string(r) + " ";
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch records: " + ids_str);
      }
      g.backward(loss.total);
      std::vector<Tensor<float>> grads(model.store().size());
      for (size_t i = 0; i < model.store().size(); ++i)
        if (model.store().trainable(i)) grads[i] = g.grad(p.at(i).id);
      adam_step(model.store(), grads, adam, cfg.learning_rate);

      detail::accumulate(em.train, loss, static_cast<int>(records.size()));
      seen += static_cast<int>(records.size());
    }
    detail::finish(em.train, seen);

    // validation: evaluation mode, every modality kept, fresh keyed noise
    if (!val_ids.empty()) {
      RngStream val_noise = substream(cfg.seed, "val_noise", static_cast<std::uint64_t>(epoch));
      const auto val_batches = batch_indices(static_cast<int>(val_ids.size()), cfg.batch_size,
                                             cfg.seed, epoch, /*shuffle=*/false, /*min_final=*/1);
      int val_seen = 0;
      for (const auto& positions : val_batches) {
        std::vector<int> records;
        records.reserve(positions.size());
        for (int pos : positions) records.push_back(val_ids[static_cast<size_t>(pos)]);
        const std::vector<Tensor<float>> batch = modal_batch(ds, records);
        const std::vector<Mask> masks(records.size(),
                                      Mask(static_cast<size_t>(model.n_modalities()), 1));
        Graph<float> g;
        BoundParams<float> p = model.bind(g, false);
        LossBreakdown<float> loss =
            elbo(model, g, p, batch, masks, epoch, cfg.warmup, val_noise, false);
        detail::accumulate(em.val, loss, static_cast<int>(records.size()));
        val_seen += static_cast<int>(records.size());
      }
      detail::finish(em.val, val_seen);
    }

    em.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!cfg.checkpoint_dir.empty()) {
      const bool cadence = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
      if (cadence || epoch + 1 == cfg.epochs) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%04d.mhv1", epoch + 1);
        save_checkpoint(cfg.checkpoint_dir + "/" + name, model, adam, epoch + 1, cfg.seed);
      }
    }
    if (on_epoch) on_epoch(em);
    history.push_back(std::move(em));
  }
  return history;
}

}  // namespace mhvae
