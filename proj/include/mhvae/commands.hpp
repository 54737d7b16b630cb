#pragma once

// Shared implementations behind the command-line subcommands. The CLI binary
// parses arguments and maps exceptions to exit codes; everything that does
// work lives here so the acceptance suite can drive the same paths in
// process.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mhvae/evaluator.hpp"
#include "mhvae/gradcheck.hpp"
#include "mhvae/oracle.hpp"
#include "mhvae/run_config.hpp"

namespace mhvae::cli {

// ---------------------------------------------------------------------------
// small shared plumbing
// ---------------------------------------------------------------------------

inline std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string make_run_dir(const std::string& override_dir, const std::string& tag) {
  namespace fs = std::filesystem;
  if (!override_dir.empty()) {
    fs::create_directories(override_dir);
    return override_dir;
  }
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d_%H%M%S", &tm);
  std::string base = "runs/" + tag + "_" + stamp;
  std::string dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = base + "_" + std::to_string(i);
  fs::create_directories(dir);
  return dir;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << content;
}

// resolved config document and the overrides that produced it, for provenance
inline void write_provenance(const std::string& run_dir, const nlohmann::json& doc,
                             const std::vector<std::string>& overrides) {
  write_text_file(run_dir + "/config.json", doc.dump(2) + "\n");
  if (!overrides.empty()) {
    std::string text;
    for (const std::string& o : overrides) text += o + "\n";
    write_text_file(run_dir + "/overrides.txt", text);
  }
}

// ---------------------------------------------------------------------------
// dataset loading
// ---------------------------------------------------------------------------

struct LoadedData {
  BimodalDataset ds;
  std::string source;
};

inline LoadedData load_dataset(const DataConfig& cfg, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const std::string dir = resolve_data_dir(cfg.dir);
  const std::string img_path = dir + "/train-images-idx3-ubyte";
  const std::string lbl_path = dir + "/train-labels-idx1-ubyte";

  bool use_idx = cfg.dataset == "idx";
  if (cfg.dataset == "auto") use_idx = fs::exists(img_path) && fs::exists(lbl_path);
  if (use_idx) {
    for (const std::string& p : {img_path, lbl_path})
      if (!fs::exists(p)) throw DataError("data: missing IDX file '" + p + "'");
    IdxData images = parse_idx(img_path, IdxKind::images);
    IdxData labels = parse_idx(lbl_path, IdxKind::labels);
    const std::string timg = dir + "/t10k-images-idx3-ubyte";
    const std::string tlbl = dir + "/t10k-labels-idx1-ubyte";
    if (fs::exists(timg) && fs::exists(tlbl)) {
      IdxData ti = parse_idx(timg, IdxKind::images);
      IdxData tl = parse_idx(tlbl, IdxKind::labels);
      require(ti.dims.size() == images.dims.size() && ti.dims[1] == images.dims[1] &&
                  ti.dims[2] == images.dims[2],
              "data: train and t10k image dimensions disagree");
      images.bytes.insert(images.bytes.end(), ti.bytes.begin(), ti.bytes.end());
      images.dims[0] += ti.dims[0];
      labels.bytes.insert(labels.bytes.end(), tl.bytes.begin(), tl.bytes.end());
      labels.dims[0] += tl.dims[0];
    }
    return LoadedData{normalize_and_split(images, labels, seed, cfg.max_records),
                      "idx:" + dir};
  }

  auto [images, labels] = generate_glyphs(cfg.glyph_count, seed);
  return LoadedData{normalize_and_split(images, labels, seed, cfg.max_records), "glyphs"};
}

// ---------------------------------------------------------------------------
// metrics csv
// ---------------------------------------------------------------------------

inline std::string metrics_csv(const std::vector<ModalitySpec>& mods,
                               const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,split";
  for (const auto& m : mods) out += ",recon_" + m.name;
  for (const auto& m : mods) out += ",kl_" + m.name;
  out += ",kl_core,weighted_total,wallclock_s\n";
  auto row = [&](int epoch, const char* split, const LossSummary& s, double wall) {
    std::string r = std::to_string(epoch) + "," + split;
    for (double v : s.recon) r += "," + format_g(v);
    for (double v : s.kl_modality) r += "," + format_g(v);
    r += "," + format_g(s.kl_core) + "," + format_g(s.weighted_total) + "," + format_g(wall);
    return r + "\n";
  };
  for (const auto& em : history) {
    out += row(em.epoch, "train", em.train, em.wallclock_s);
    out += row(em.epoch, "val", em.val, em.wallclock_s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOutcome {
  std::vector<EpochMetrics> history;
  std::string run_dir;
  std::string final_checkpoint;
  std::string data_source;
};

inline TrainOutcome run_train(const RunConfig& rc, const std::string& run_dir) {
  LoadedData data = load_dataset(rc.data, rc.train.seed);
  require_config(rc.modalities.size() == 2, "train: expects exactly two modalities");
  const int flat_img = data.ds.images.size() ? static_cast<int>(data.ds.images.size() /
                                                                data.ds.images.dim(0))
                                             : 0;
  require_config(rc.modalities[0].flat_dim() == flat_img,
                 "train: modality '" + rc.modalities[0].name + "' expects " +
                     std::to_string(rc.modalities[0].flat_dim()) +
                     " values per record but the image data has " + std::to_string(flat_img));
  require_config(rc.modalities[1].flat_dim() == data.ds.n_classes(),
                 "train: modality '" + rc.modalities[1].name + "' expects " +
                     std::to_string(rc.modalities[1].flat_dim()) +
                     " classes but the label data has " + std::to_string(data.ds.n_classes()));

  Mhvae<float> model(rc.modalities, rc.core, rc.combiner);
  model.init_params(rc.train.seed);
  auto adam = AdamState<float>::make(model.store());
  TrainConfig tc = rc.train;
  tc.checkpoint_dir = run_dir;

  TrainOutcome out;
  out.run_dir = run_dir;
  out.data_source = data.source;
  out.history = fit(model, adam, data.ds, tc);
  write_text_file(run_dir + "/metrics.csv", metrics_csv(rc.modalities, out.history));
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%04d.mhv1", tc.epochs);
  out.final_checkpoint = run_dir + "/" + name;
  return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string metric;
  std::string input;
  LLEstimate est;
};

struct EvalOutcome {
  std::vector<EvalRow> rows;
  std::string data_source;
  int count = 0;
};

inline std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::string out = "metric,input,estimate,std_error,k\n";
  for (const auto& r : rows)
    out += r.metric + "," + r.input + "," + format_g(r.est.value) + "," +
           format_g(r.est.std_error) + "," + std::to_string(r.est.k) + "\n";
  return out;
}

// The training run's data configuration (subset cap, glyph count) decides
// which records land in which split, so evaluating against a different data
// configuration would leak training records into the "test" set. run_train
// writes the resolved config next to the checkpoint; pick the data block up
// from there when present. An explicit dcfg.dir still wins for the directory.
inline DataConfig eval_data_config(const std::string& checkpoint, const DataConfig& dcfg) {
  namespace fs = std::filesystem;
  const fs::path cfg_path = fs::path(checkpoint).parent_path() / "config.json";
  if (!fs::exists(cfg_path)) return dcfg;
  nlohmann::json doc = load_config_document(cfg_path.string());
  if (!doc.contains("data")) return dcfg;
  DataConfig out = parse_data_config(doc.at("data"));
  if (!dcfg.dir.empty()) out.dir = dcfg.dir;
  return out;
}

// Test-split evaluation. The data split is keyed by the seed stored in the
// checkpoint so the records scored here were never seen in training.
inline EvalOutcome run_eval(const std::string& checkpoint, const DataConfig& dcfg,
                            const std::string& metric, const std::vector<std::string>& inputs,
                            const std::string& target, int k, int count, std::uint64_t seed,
                            int inner_batch) {
  RestoredTraining r = load_checkpoint(checkpoint);
  Mhvae<float>& model = r.model;
  require_config(k >= 1, "eval: K must be >= 1");
  require_config(model.n_modalities() == 2, "eval: checkpoint must hold a bimodal model");

  LoadedData data = load_dataset(eval_data_config(checkpoint, dcfg), r.seed);
  std::vector<int> ids = data.ds.ids(Split::test);
  if (count > 0 && count < static_cast<int>(ids.size()))
    ids.resize(static_cast<size_t>(count));
  std::vector<Tensor<float>> tensors{take_rows(data.ds.images, ids),
                                     take_rows(data.ds.labels, ids)};

  auto indices = [&](const std::vector<std::string>& names) {
    std::vector<int> out;
    for (const std::string& n : names) out.push_back(model.modality_index(n));
    return out;
  };
  auto joined = [](const std::vector<std::string>& names) {
    std::string out;
    for (const std::string& n : names) out += (out.empty() ? "" : "+") + n;
    return out;
  };

  EvalOutcome out;
  out.data_source = data.source;
  out.count = static_cast<int>(ids.size());

  const std::string img = model.modality(0).name;
  const std::string lbl = model.modality(1).name;
  auto add = [&](const std::string& m, const std::vector<std::string>& s,
                 const std::string& tgt) {
    const std::vector<int> subset = indices(s);
    LLEstimate est;
    if (m == "marginal")
      est = estimate_marginal(model, tensors, model.modality_index(tgt), subset, k, seed,
                              inner_batch);
    else if (m == "joint")
      est = estimate_joint(model, tensors, subset, k, seed, inner_batch);
    else if (m == "conditional")
      est = estimate_conditional(model, tensors, model.modality_index(tgt), subset, k, seed,
                                 inner_batch);
    else
      throw ConfigError("eval: unknown metric '" + m + "'");
    const std::string label =
        (m == "marginal" || m == "conditional") ? m + " " + tgt : m;
    out.rows.push_back(EvalRow{label, joined(s), est});
  };

  if (metric == "protocol") {
    add("marginal", {img}, img);
    add("joint", {img}, "");
    add("joint", {lbl}, "");
    add("joint", {img, lbl}, "");
    add("conditional", {lbl}, img);
  } else {
    require_config(!inputs.empty(), "eval: --input is required");
    std::string tgt = target;
    if (tgt.empty()) tgt = img;
    add(metric, inputs, tgt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// pgm images
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const float* probs, int h, int w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "P5\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < h * w; ++i) {
    double v = static_cast<double>(probs[i]);
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
}

inline Tensor<float> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5") throw FormatError("'" + path + "': expected a binary PGM (P5) file");
  auto next_int = [&]() {
    // skip whitespace and '#' comment lines between header tokens
    int c = in.peek();
    while (c == '#' || std::isspace(c)) {
      if (c == '#') in.ignore(1 << 20, '\n');
      else in.get();
      c = in.peek();
    }
    int v = -1;
    in >> v;
    if (!in) throw FormatError("'" + path + "': truncated PGM header");
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w < 1 || h < 1) throw FormatError("'" + path + "': bad PGM dimensions");
  if (maxval != 255) throw FormatError("'" + path + "': PGM maxval must be 255");
  in.get();  // single whitespace after maxval
  std::vector<char> bytes(static_cast<size_t>(w) * h);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw DataError("'" + path + "': truncated PGM payload");
  Tensor<float> t(Shape{1, 1, h, w});
  float* d = t.mutable_data();
  for (size_t i = 0; i < bytes.size(); ++i)
    d[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
  return t;
}

// ---------------------------------------------------------------------------
// sample and cross-modality inference
// ---------------------------------------------------------------------------

namespace detail {

// the modality rendered as an image: the first one with a (c, h, w) shape
inline int image_modality(const Mhvae<float>& model) {
  for (int i = 0; i < model.n_modalities(); ++i)
    if (model.modality(i).input_shape.size() == 3 && model.modality(i).input_shape[0] == 1)
      return i;
  throw ConfigError("no renderable single-channel image modality in this model");
}

inline int label_modality(const Mhvae<float>& model) {
  for (int i = 0; i < model.n_modalities(); ++i)
    if (model.modality(i).likelihood == Likelihood::categorical) return i;
  throw ConfigError("no categorical label modality in this model");
}

}  // namespace detail

inline std::vector<std::string> run_sample(const std::string& checkpoint, int n,
                                           std::uint64_t seed, const std::string& outdir) {
  require_config(n >= 1, "sample: n must be >= 1");
  RestoredTraining r = load_checkpoint(checkpoint);
  const int img = detail::image_modality(r.model);
  const int h = r.model.modality(img).input_shape[1];
  const int w = r.model.modality(img).input_shape[2];

  RngStream rng = substream(seed, "sample");
  auto gen = r.model.generate_from_prior(n, rng);
  std::vector<std::string> files;
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04d.pgm", i);
    const std::string path = outdir + "/" + name;
    write_pgm(path, gen.outputs[static_cast<size_t>(img)].data() +
                        static_cast<std::int64_t>(i) * h * w,
              h, w);
    files.push_back(path);
  }
  return files;
}

struct CrossOutcome {
  std::vector<std::string> files;
  std::vector<double> label_probs;  // label-decoder distribution of the first variant
};

// `given` is either "<label modality>=<class>" or "<image modality>=<pgm path>".
inline CrossOutcome run_cross(const std::string& checkpoint, const std::string& given, int n,
                              std::uint64_t seed, const std::string& outdir) {
  require_config(n >= 1, "cross: n must be >= 1");
  const size_t eq = given.find('=');
  require_config(eq != std::string::npos && eq > 0,
                 "cross: --given must look like label=7 or image=digit.pgm");
  const std::string mod_name = given.substr(0, eq);
  const std::string value = given.substr(eq + 1);

  RestoredTraining r = load_checkpoint(checkpoint);
  Mhvae<float>& model = r.model;
  const int img = detail::image_modality(model);
  const int lbl = detail::label_modality(model);
  const int h = model.modality(img).input_shape[1];
  const int w = model.modality(img).input_shape[2];
  const int given_idx = model.modality_index(mod_name);

  std::vector<Tensor<float>> data(static_cast<size_t>(model.n_modalities()));
  std::string tag;
  if (given_idx == lbl) {
    const int classes = model.modality(lbl).flat_dim();
    int cls = -1;
    try {
      cls = std::stoi(value);
    } catch (...) {
      throw ConfigError("cross: label value '" + value + "' is not an integer");
    }
    require_config(cls >= 0 && cls < classes,
                   "cross: label " + value + " out of range [0, " + std::to_string(classes) + ")");
    Tensor<float> onehot(Shape{1, classes}, 0.0f);
    onehot.mutable_data()[cls] = 1.0f;
    data[static_cast<size_t>(lbl)] = onehot;
    tag = value;
  } else if (given_idx == img) {
    Tensor<float> image = read_pgm(value);
    require_config(image.dim(2) == h && image.dim(3) == w,
                   "cross: '" + value + "' is " + std::to_string(image.dim(3)) + "x" +
                       std::to_string(image.dim(2)) + ", the model expects " +
                       std::to_string(w) + "x" + std::to_string(h));
    data[static_cast<size_t>(img)] = image;
  } else {
    throw ConfigError("cross: modality '" + mod_name + "' is neither the image nor the label");
  }

  RngStream rng = substream(seed, "cross");
  CrossOutcome out;
  for (int i = 0; i < n; ++i) {
    auto gen = model.cross_modal_infer({given_idx}, data, &rng);
    const Tensor<float>& probs = gen.outputs[static_cast<size_t>(lbl)];
    if (i == 0)
      for (std::int64_t c = 0; c < probs.size(); ++c)
        out.label_probs.push_back(static_cast<double>(probs[c]));
    std::string t = tag;
    if (t.empty()) t = std::to_string(classes_from_onehot(probs)[0]);
    char name[48];
    std::snprintf(name, sizeof(name), "cross_%s_%04d.pgm", t.c_str(), i);
    const std::string path = outdir + "/" + name;
    write_pgm(path, gen.outputs[static_cast<size_t>(img)].data(), h, w);
    out.files.push_back(path);
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradient certification
// ---------------------------------------------------------------------------

// 64-bit replay of the full training objective on a small frozen batch.
inline GradCheckReport run_gradcheck_cmd(const RunConfig& rc, std::uint64_t seed,
                                         bool corrupt_analytic = false, int batch = 4) {
  LoadedData data = load_dataset(rc.data, seed);
  Mhvae<double> model(rc.modalities, rc.core, rc.combiner);
  model.init_params(seed);

  const std::vector<int>& train_ids = data.ds.ids(Split::train);
  require(static_cast<int>(train_ids.size()) >= batch, "gradcheck: dataset too small");
  std::vector<int> ids(train_ids.begin(), train_ids.begin() + batch);
  auto fbatch = modal_batch(data.ds, ids);
  std::vector<Tensor<double>> dbatch;
  for (const auto& t : fbatch) dbatch.push_back(t.cast<double>());

  RngStream mask_rng = substream(seed, "gradcheck-mask");
  std::vector<Mask> masks;
  for (int b = 0; b < batch; ++b) masks.push_back(sample_mask(model.mask_config(), mask_rng));
  RngStream noise_rng = substream(seed, "gradcheck-noise");
  NoiseBundle<double> noise = draw_noise(model, batch, noise_rng);

  // far past both ramps so every term carries full weight
  const int epoch = std::max(rc.train.warmup.u_modality, rc.train.warmup.u_core) + 1;
  auto loss_fn = [&](Graph<double>& g, const BoundParams<double>& p) {
    return elbo(model, g, p, dbatch, masks, epoch, rc.train.warmup, noise, true).total;
  };
  return run_gradcheck(model.store(), loss_fn, 1e-4, 1e-4, 256, 16, seed, corrupt_analytic);
}

// ---------------------------------------------------------------------------
// oracle certification
// ---------------------------------------------------------------------------

struct OracleRow {
  std::string metric;
  int k = 0;
  double estimate = 0.0;
  double exact = 0.0;
  double abs_err = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

inline double oracle_threshold(int k) {
  if (k >= 10000) return 0.05;
  if (k >= 1000) return 0.15;
  return 0.5;
}

// |IS - exact| on the five-observable-dimension linear-Gaussian instrument,
// for each requested K, on marginal, joint and conditional metrics.
inline std::vector<OracleRow> run_oracle_cmd(const std::vector<int>& ks, std::uint64_t seed,
                                             int datapoints = 50) {
  OracleDims dims;
  dims.zc_dim = 2;
  dims.z_dims = {2, 2};
  dims.x_dims = {3, 2};
  auto s = synth_linear_gaussian(dims, datapoints, seed);
  auto& model = s.oracle.model();
  const std::vector<int> all{0, 1};

  double exact_joint = 0.0, exact_marg = 0.0, exact_cond = 0.0;
  for (int r = 0; r < datapoints; ++r) {
    std::vector<Tensor<double>> row{take_rows(s.data[0], {r}), take_rows(s.data[1], {r})};
    exact_joint += s.oracle.exact_joint_ll(row, all);
    exact_marg += s.oracle.exact_joint_ll(row, {0});
    exact_cond += s.oracle.exact_conditional_ll(row, 1, {0});
  }
  exact_joint /= datapoints;
  exact_marg /= datapoints;
  exact_cond /= datapoints;

  std::vector<OracleRow> rows;
  for (int k : ks) {
    require_config(k >= 1, "oracle: K must be >= 1");
    auto push = [&](const std::string& metric, double est, double exact) {
      OracleRow r;
      r.metric = metric;
      r.k = k;
      r.estimate = est;
      r.exact = exact;
      r.abs_err = std::abs(est - exact);
      r.threshold = oracle_threshold(k);
      r.pass = r.abs_err <= r.threshold;
      rows.push_back(r);
    };
    push("joint", estimate_joint(model, s.data, all, k, seed + 1).value, exact_joint);
    push("marginal", estimate_marginal(model, s.data, 0, {0}, k, seed + 1).value, exact_marg);
    push("conditional", estimate_conditional(model, s.data, 1, {0}, k, seed + 1).value,
         exact_cond);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// datagen
// ---------------------------------------------------------------------------

inline std::vector<std::string> run_datagen(const std::string& outdir, int n,
                                            std::uint64_t seed) {
  std::filesystem::create_directories(outdir);
  auto [images, labels] = generate_glyphs(n, seed);
  const std::string img = outdir + "/train-images-idx3-ubyte";
  const std::string lbl = outdir + "/train-labels-idx1-ubyte";
  write_idx(img, images);
  write_idx(lbl, labels);
  return {img, lbl};
}

}  // namespace mhvae::cli
