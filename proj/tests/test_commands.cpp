#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mhvae/commands.hpp"

using namespace mhvae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("mhvae_cmd_" + std::to_string(Catch::rngSeed()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& leaf = "") const {
    return leaf.empty() ? path.string() : (path / leaf).string();
  }
};

RunConfig tiny_run_config(const std::string& data_dir) {
  nlohmann::json j = {
      {"modalities",
       {{{"name", "image"},
         {"kind", "mlp"},
         {"input_shape", {1, 28, 28}},
         {"hidden_sizes", {32, 24}},
         {"h_dim", 24},
         {"z_dim", 6},
         {"likelihood", "bernoulli"}},
        {{"name", "label"},
         {"kind", "mlp"},
         {"input_shape", {10}},
         {"hidden_sizes", {16}},
         {"h_dim", 16},
         {"z_dim", 4},
         {"likelihood", "categorical"}}}},
      {"core", {{"hidden_sizes", {16}}, {"zc_dim", 5}}},
      {"train",
       {{"epochs", 2},
        {"batch_size", 32},
        {"seed", 5},
        {"warmup", {{"modality", 1}, {"core", 2}}}}},
      {"data", {{"dir", data_dir}, {"dataset", "glyphs"}, {"glyph_count", 400}}}};
  return parse_run_config(j);
}

// bimodal model with every parameter at zero: uniform likelihoods everywhere
Mhvae<float> zero_model() {
  ModalitySpec img;
  img.name = "image";
  img.input_shape = {1, 4, 4};
  img.hidden_sizes = {8};
  img.h_dim = 8;
  img.z_dim = 3;
  img.likelihood = Likelihood::bernoulli;
  ModalitySpec lbl;
  lbl.name = "label";
  lbl.input_shape = {10};
  lbl.hidden_sizes = {6};
  lbl.h_dim = 6;
  lbl.z_dim = 2;
  lbl.likelihood = Likelihood::categorical;
  CoreSpec core;
  core.hidden_sizes = {7};
  core.zc_dim = 3;
  return Mhvae<float>({img, lbl}, core);
}

std::string save_zero_checkpoint(const std::string& path, std::uint64_t seed) {
  Mhvae<float> model = zero_model();
  auto adam = AdamState<float>::make(model.store());
  save_checkpoint(path, model, adam, 0, seed);
  return path;
}

}  // namespace

TEST_CASE("datagen writes idx files that parse and round-trip") {
  TempDir tmp;
  auto files = cli::run_datagen(tmp.str("d"), 50, 3);
  REQUIRE(files.size() == 2);
  IdxData img = parse_idx(files[0], IdxKind::images);
  IdxData lbl = parse_idx(files[1], IdxKind::labels);
  REQUIRE(img.dims == std::vector<int>{50, 28, 28});
  REQUIRE(lbl.dims == std::vector<int>{50});
  // same seed, same bytes
  auto again = cli::run_datagen(tmp.str("d2"), 50, 3);
  IdxData img2 = parse_idx(again[0], IdxKind::images);
  REQUIRE(img.bytes == img2.bytes);
}

TEST_CASE("load_dataset auto prefers idx files and falls back to glyphs") {
  TempDir tmp;
  DataConfig cfg;
  cfg.dir = tmp.str("nowhere");
  cfg.glyph_count = 60;
  cli::LoadedData glyphs = cli::load_dataset(cfg, 9);
  REQUIRE(glyphs.source == "glyphs");
  REQUIRE(glyphs.ds.count() == 60);

  cli::run_datagen(tmp.str("d"), 40, 4);
  cfg.dir = tmp.str("d");
  cli::LoadedData idx = cli::load_dataset(cfg, 9);
  REQUIRE(idx.source == "idx:" + tmp.str("d"));
  REQUIRE(idx.ds.count() == 40);

  cfg.dataset = "idx";
  cfg.dir = tmp.str("missing");
  REQUIRE_THROWS_AS(cli::load_dataset(cfg, 9), DataError);
}

TEST_CASE("run_train writes metrics, provenance and a loadable checkpoint") {
  TempDir tmp;
  RunConfig rc = tiny_run_config(tmp.str("unused"));
  const std::string run_dir = tmp.str("run");
  fs::create_directories(run_dir);
  cli::TrainOutcome out = cli::run_train(rc, run_dir);

  REQUIRE(out.history.size() == 2);
  REQUIRE(fs::exists(out.final_checkpoint));
  RestoredTraining r = load_checkpoint(out.final_checkpoint);
  REQUIRE(r.epoch == 2);
  REQUIRE(r.seed == 5);

  std::ifstream in(run_dir + "/metrics.csv");
  std::string header;
  std::getline(in, header);
  REQUIRE(header ==
          "epoch,split,recon_image,recon_label,kl_image,kl_label,kl_core,weighted_total,"
          "wallclock_s");
  int rows = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) rows++;
  REQUIRE(rows == 4);  // train + val per epoch
}

TEST_CASE("eval data config comes from the provenance next to the checkpoint") {
  TempDir tmp;
  nlohmann::json doc = {{"data", {{"dataset", "glyphs"}, {"glyph_count", 123}}}};
  cli::write_text_file(tmp.str("config.json"), doc.dump());
  DataConfig cli_cfg;
  DataConfig resolved = cli::eval_data_config(tmp.str("ckpt.mhv1"), cli_cfg);
  REQUIRE(resolved.dataset == "glyphs");
  REQUIRE(resolved.glyph_count == 123);

  // explicit directory from the command line still wins
  cli_cfg.dir = "/elsewhere";
  resolved = cli::eval_data_config(tmp.str("ckpt.mhv1"), cli_cfg);
  REQUIRE(resolved.dir == "/elsewhere");

  // no provenance file: the passed config is used untouched
  DataConfig untouched = cli::eval_data_config(tmp.str("sub/ckpt.mhv1"), cli_cfg);
  REQUIRE(untouched.dataset == "auto");
}

TEST_CASE("zero-weight checkpoint samples mid-grey pixels") {
  TempDir tmp;
  save_zero_checkpoint(tmp.str("zero.mhv1"), 2);
  auto files = cli::run_sample(tmp.str("zero.mhv1"), 2, 7, tmp.str());
  REQUIRE(files.size() == 2);
  std::ifstream in(files[0], std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  REQUIRE(magic == "P5");
  REQUIRE(w == 4);
  REQUIRE(h == 4);
  REQUIRE(maxval == 255);
  in.get();
  for (int i = 0; i < w * h; ++i) REQUIRE(in.get() == 128);
}

TEST_CASE("zero-weight joint splits into the uniform image and label terms") {
  TempDir tmp;
  save_zero_checkpoint(tmp.str("zero.mhv1"), 2);
  RestoredTraining r = load_checkpoint(tmp.str("zero.mhv1"));

  RngStream rng(11);
  std::vector<Tensor<float>> data{rng.uniform_tensor<float>(Shape{3, 1, 4, 4}, 0.0f, 1.0f),
                                  Tensor<float>(Shape{3, 10}, 0.0f)};
  for (int b = 0; b < 3; ++b) data[1].mutable_data()[b * 10 + b] = 1.0f;

  // logits all zero: every pixel costs ln 2, the label costs ln 10, exactly
  LLEstimate est = estimate_joint(r.model, data, {0, 1}, 32, 5);
  const double expect = -16.0 * std::log(2.0) - std::log(10.0);
  REQUIRE(est.value == Catch::Approx(expect).margin(1e-6));
  REQUIRE(est.std_error == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("pgm files round-trip and reject malformed input") {
  TempDir tmp;
  std::vector<float> probs(6 * 5);
  for (size_t i = 0; i < probs.size(); ++i) probs[i] = static_cast<float>(i) / 29.0f;
  cli::write_pgm(tmp.str("a.pgm"), probs.data(), 6, 5);
  Tensor<float> back = cli::read_pgm(tmp.str("a.pgm"));
  REQUIRE(back.shape() == Shape{1, 1, 6, 5});
  for (size_t i = 0; i < probs.size(); ++i) {
    const double quantized = std::lround(static_cast<double>(probs[i]) * 255.0) / 255.0;
    REQUIRE(back[static_cast<std::int64_t>(i)] == Catch::Approx(quantized).margin(1e-7));
  }

  // a comment line in the header is legal
  cli::write_text_file(tmp.str("c.pgm"), std::string("P5\n# note\n2 1\n255\n\x10\x20", 22));
  Tensor<float> commented = cli::read_pgm(tmp.str("c.pgm"));
  REQUIRE(commented.dim(3) == 2);

  cli::write_text_file(tmp.str("bad_magic.pgm"), "P2\n2 2\n255\n0 0 0 0\n");
  REQUIRE_THROWS_AS(cli::read_pgm(tmp.str("bad_magic.pgm")), FormatError);
  cli::write_text_file(tmp.str("bad_max.pgm"), std::string("P5\n1 1\n127\n\x40", 11));
  REQUIRE_THROWS_AS(cli::read_pgm(tmp.str("bad_max.pgm")), FormatError);
  cli::write_text_file(tmp.str("short.pgm"), std::string("P5\n4 4\n255\n\x40\x40", 13));
  REQUIRE_THROWS_AS(cli::read_pgm(tmp.str("short.pgm")), DataError);
  REQUIRE_THROWS_AS(cli::read_pgm(tmp.str("absent.pgm")), DataError);
}

TEST_CASE("cross rejects bad given arguments") {
  TempDir tmp;
  save_zero_checkpoint(tmp.str("zero.mhv1"), 2);
  REQUIRE_THROWS_AS(cli::run_cross(tmp.str("zero.mhv1"), "label", 1, 0, tmp.str()),
                    ConfigError);
  REQUIRE_THROWS_AS(cli::run_cross(tmp.str("zero.mhv1"), "label=17", 1, 0, tmp.str()),
                    ConfigError);
  REQUIRE_THROWS_AS(cli::run_cross(tmp.str("zero.mhv1"), "label=x", 1, 0, tmp.str()),
                    ConfigError);
  REQUIRE_THROWS_AS(cli::run_cross(tmp.str("zero.mhv1"), "nosuch=1", 1, 0, tmp.str()),
                    ConfigError);

  cli::CrossOutcome ok = cli::run_cross(tmp.str("zero.mhv1"), "label=3", 2, 1, tmp.str());
  REQUIRE(ok.files.size() == 2);
  REQUIRE(fs::path(ok.files[0]).filename() == "cross_3_0000.pgm");
  REQUIRE(ok.label_probs.size() == 10);
  for (double p : ok.label_probs) REQUIRE(p == Catch::Approx(0.1).margin(1e-6));
}

TEST_CASE("oracle command certifies the reference thresholds") {
  auto rows = cli::run_oracle_cmd({100}, 17, 20);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    REQUIRE(r.threshold == Catch::Approx(0.5));
    REQUIRE(r.pass);
    REQUIRE(r.abs_err == Catch::Approx(std::abs(r.estimate - r.exact)));
  }
  REQUIRE(cli::oracle_threshold(10000) == Catch::Approx(0.05));
  REQUIRE(cli::oracle_threshold(1000) == Catch::Approx(0.15));
  REQUIRE(cli::oracle_threshold(999) == Catch::Approx(0.5));
}

TEST_CASE("metrics csv uses full precision and one row per split") {
  std::vector<ModalitySpec> mods(2);
  mods[0].name = "a";
  mods[1].name = "b";
  EpochMetrics em;
  em.epoch = 3;
  em.train.recon = {-1.0 / 3.0, -2.0};
  em.train.kl_modality = {0.125, 0.25};
  em.train.kl_core = 1e-10;
  em.train.weighted_total = 2.5;
  em.val = em.train;
  em.val.weighted_total = 2.75;
  em.wallclock_s = 1.5;
  std::string csv = cli::metrics_csv(mods, {em});
  REQUIRE(csv ==
          "epoch,split,recon_a,recon_b,kl_a,kl_b,kl_core,weighted_total,wallclock_s\n"
          "3,train,-0.3333333333,-2,0.125,0.25,1e-10,2.5,1.5\n"
          "3,val,-0.3333333333,-2,0.125,0.25,1e-10,2.75,1.5\n");
}

TEST_CASE("make_run_dir honors explicit directories and avoids collisions") {
  TempDir tmp;
  const std::string forced = tmp.str("fixed");
  REQUIRE(cli::make_run_dir(forced, "train") == forced);
  REQUIRE(fs::exists(forced));
  // a second call with the same explicit directory reuses it
  REQUIRE(cli::make_run_dir(forced, "train") == forced);
}
