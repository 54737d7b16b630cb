// Command-line front end. Subcommands cover the full workflow: generate or
// ingest data, train, evaluate log-likelihoods, sample, cross-modality
// inference, gradient certification, and the estimator oracle harness.
//
// Exit codes: 0 success, 1 certification failure, 2 usage or configuration
// error, 3 missing or malformed data, 4 numeric abort.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mhvae/commands.hpp"

namespace {

using namespace mhvae;

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
  RunConfig rc = load_run_config(config_path, overrides);
  if (!out_dir.empty()) rc.out_dir = out_dir;
  const std::string run_dir = cli::make_run_dir(rc.out_dir, "train");
  nlohmann::json doc = load_config_document(config_path);
  for (const std::string& o : overrides) apply_override(doc, o);
  cli::write_provenance(run_dir, doc, overrides);
  std::printf("run dir: %s\n", run_dir.c_str());

  cli::TrainOutcome out = cli::run_train(rc, run_dir);
  std::printf("data: %s\n", out.data_source.c_str());
  for (const auto& em : out.history)
    std::printf("epoch %4d  train %.4f  val %.4f  (%.1fs)\n", em.epoch,
                em.train.weighted_total, em.val.weighted_total, em.wallclock_s);
  std::printf("metrics: %s/metrics.csv\n", run_dir.c_str());
  std::printf("checkpoint: %s\n", out.final_checkpoint.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& metric,
             const std::vector<std::string>& inputs, const std::string& target, int k,
             int count, std::uint64_t seed, int inner_batch, const std::string& data_dir,
             const std::string& out_csv) {
  DataConfig dcfg;
  dcfg.dir = data_dir;
  cli::EvalOutcome out =
      cli::run_eval(checkpoint, dcfg, metric, inputs, target, k, count, seed, inner_batch);
  std::printf("data: %s  (%d test records)\n", out.data_source.c_str(), out.count);
  std::printf("%-18s %-14s %12s %10s %8s\n", "metric", "input", "estimate", "std error", "K");
  for (const auto& r : out.rows)
    std::printf("%-18s %-14s %12.3f %10.3f %8d\n", r.metric.c_str(), r.input.c_str(),
                r.est.value, r.est.std_error, r.est.k);
  if (!out_csv.empty()) {
    cli::write_text_file(out_csv, cli::eval_csv(out.rows));
    std::printf("wrote %s\n", out_csv.c_str());
  }
  return 0;
}

int cmd_sample(const std::string& checkpoint, int n, std::uint64_t seed,
               const std::string& outdir) {
  std::filesystem::create_directories(outdir);
  auto files = cli::run_sample(checkpoint, n, seed, outdir);
  for (const auto& f : files) std::printf("%s\n", f.c_str());
  return 0;
}

int cmd_cross(const std::string& checkpoint, const std::string& given, int n,
              std::uint64_t seed, const std::string& outdir) {
  std::filesystem::create_directories(outdir);
  cli::CrossOutcome out = cli::run_cross(checkpoint, given, n, seed, outdir);
  std::printf("label decoder:");
  for (size_t c = 0; c < out.label_probs.size(); ++c)
    std::printf(" %zu:%.3f", c, out.label_probs[c]);
  std::printf("\n");
  for (const auto& f : out.files) std::printf("%s\n", f.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& config_path, const std::vector<std::string>& overrides,
                  std::uint64_t seed, bool corrupt) {
  RunConfig rc = load_run_config(config_path, overrides);
  GradCheckReport report = cli::run_gradcheck_cmd(rc, seed, corrupt);
  for (const auto& e : report.entries)
    std::printf("%-24s max rel err %.3e  (%lld probes)\n", e.name.c_str(), e.max_score,
                static_cast<long long>(e.probes));
  std::printf("worst: %s at %.3e (tolerance %.1e)\n", report.worst_name.c_str(), report.worst,
              report.tolerance);
  if (!report.passed()) {
    std::printf("FAIL: analytic and numeric gradients disagree\n");
    return 1;
  }
  std::printf("PASS: all %zu parameters within tolerance\n", report.entries.size());
  return 0;
}

int cmd_oracle(const std::vector<int>& ks, std::uint64_t seed) {
  auto rows = cli::run_oracle_cmd(ks, seed);
  bool all_pass = true;
  std::printf("%-12s %8s %12s %12s %10s %10s  %s\n", "metric", "K", "estimate", "exact",
              "abs err", "threshold", "status");
  for (const auto& r : rows) {
    std::printf("%-12s %8d %12.4f %12.4f %10.4f %10.2f  %s\n", r.metric.c_str(), r.k,
                r.estimate, r.exact, r.abs_err, r.threshold, r.pass ? "ok" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) {
    std::printf("FAIL: estimator outside certified error bounds\n");
    return 1;
  }
  std::printf("PASS: estimator within certified error bounds at every K\n");
  return 0;
}

int cmd_datagen(const std::string& outdir, int n, std::uint64_t seed) {
  auto files = cli::run_datagen(outdir, n, seed);
  for (const auto& f : files) std::printf("%s\n", f.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mhvae: multimodal hierarchical VAE workbench"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir, outdir = "out", data_dir, given, target;
  std::string metric = "protocol", out_csv;
  std::vector<std::string> overrides, inputs;
  std::uint64_t seed = 0;
  int n = 16, k = 5000, count = 0, inner_batch = 256;
  bool corrupt = false;
  std::vector<int> ks{100, 1000, 10000};

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("-c,--config", config_path, "JSON run config")->required();
  train->add_option("--set", overrides, "dotted-key override, e.g. train.epochs=30");
  train->add_option("-o,--out", out_dir, "run directory (default: runs/train_<stamp>)");

  auto* eval = app.add_subcommand("eval", "importance-sampled log-likelihood on the test split");
  eval->add_option("--checkpoint", checkpoint, "trained .mhv1 checkpoint")->required();
  eval->add_option("--metric", metric, "marginal | joint | conditional | protocol");
  eval->add_option("--input", inputs, "modality names fed to the encoders");
  eval->add_option("--target", target, "scored modality (marginal / conditional)");
  eval->add_option("-k", k, "importance samples per datapoint");
  eval->add_option("--count", count, "cap on test records (0 = all)");
  eval->add_option("--seed", seed, "evaluation seed");
  eval->add_option("--inner-batch", inner_batch, "importance samples per forward pass");
  eval->add_option("--data-dir", data_dir, "IDX directory (default: MHVAE_DATA_DIR or data/)");
  eval->add_option("--csv", out_csv, "also write the rows to this CSV file");

  auto* sample = app.add_subcommand("sample", "draw images from the prior");
  sample->add_option("--checkpoint", checkpoint)->required();
  sample->add_option("-n", n, "number of samples");
  sample->add_option("--seed", seed);
  sample->add_option("-o,--out", outdir, "output directory");

  auto* cross = app.add_subcommand("cross", "condition on one modality, render the other");
  cross->add_option("--checkpoint", checkpoint)->required();
  cross->add_option("--given", given, "label=<class> or <image modality>=<pgm path>")->required();
  cross->add_option("-n", n, "number of variants");
  cross->add_option("--seed", seed);
  cross->add_option("-o,--out", outdir, "output directory");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient certification");
  gradcheck->add_option("-c,--config", config_path, "JSON run config")->required();
  gradcheck->add_option("--set", overrides, "dotted-key override");
  gradcheck->add_option("--seed", seed);
  gradcheck->add_flag("--corrupt", corrupt)->group("");  // test hook, hidden

  auto* oracle = app.add_subcommand("oracle", "estimator accuracy on an analytic instrument");
  oracle->add_option("-k", ks, "importance-sample counts to certify");
  oracle->add_option("--seed", seed);

  auto* datagen = app.add_subcommand("datagen", "write a synthetic glyph dataset as IDX files");
  datagen->add_option("-o,--out", outdir, "output directory")->required();
  datagen->add_option("-n", n, "number of records")->default_val(70000);
  datagen->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(config_path, overrides, out_dir);
    if (eval->parsed())
      return cmd_eval(checkpoint, metric, inputs, target, k, count, seed, inner_batch,
                      data_dir, out_csv);
    if (sample->parsed()) return cmd_sample(checkpoint, n, seed, outdir);
    if (cross->parsed()) return cmd_cross(checkpoint, given, n, seed, outdir);
    if (gradcheck->parsed()) return cmd_gradcheck(config_path, overrides, seed, corrupt);
    if (oracle->parsed()) return cmd_oracle(ks, seed);
    if (datagen->parsed()) return cmd_datagen(outdir, n, seed);
    std::fprintf(stderr, "error: no subcommand\n");
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const mhvae::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const mhvae::ContractError& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  } catch (const mhvae::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const mhvae::FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const mhvae::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
