#pragma once

// Run configuration: one JSON document covering the model specs, the trainer,
// evaluator defaults and data paths. The schema is strict (unknown keys are
// rejected) and command-line overrides use dotted keys applied to the raw
// document before parsing.

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvae/evaluator.hpp"
#include "mhvae/specs_json.hpp"
#include "mhvae/trainer.hpp"

namespace mhvae {

struct DataConfig {
  std::string dir;                // IDX directory; empty = MHVAE_DATA_DIR, then glyphs
  std::string dataset = "auto";   // auto | idx | glyphs
  int max_records = 0;            // 0 = all
  int glyph_count = 70000;        // pool size when synthesizing glyphs
};

struct RunConfig {
  std::vector<ModalitySpec> modalities;
  CoreSpec core;
  Combiner combiner = Combiner::mrd;
  TrainConfig train;
  EvalConfig eval;  // K and inner batch defaults; subsets come from the command line
  DataConfig data;
  std::string out_dir;  // empty = timestamped directory under runs/
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  require_config(j.is_object(), "config: " + where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) ok = true;
    require_config(ok, "config: unknown key '" + item.key() + "' in " + where);
  }
}

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& into, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + where + "." + key + "': " + e.what());
  }
}

}  // namespace detail

inline DataConfig parse_data_config(const nlohmann::json& j) {
  DataConfig cfg;
  detail::check_keys(j, {"dir", "dataset", "max_records", "glyph_count"}, "data");
  detail::read_if(j, "dir", cfg.dir, "data");
  detail::read_if(j, "dataset", cfg.dataset, "data");
  detail::read_if(j, "max_records", cfg.max_records, "data");
  detail::read_if(j, "glyph_count", cfg.glyph_count, "data");
  require_config(cfg.dataset == "auto" || cfg.dataset == "idx" || cfg.dataset == "glyphs",
                 "config: data.dataset must be auto, idx or glyphs");
  return cfg;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, {"modalities", "core", "combiner", "train", "eval", "data", "out_dir"},
                     "top level");
  require_config(j.contains("modalities") && j.contains("core"),
                 "config: 'modalities' and 'core' are required");

  RunConfig cfg;
  // paper protocol defaults; a config file only has to say what differs
  cfg.train.learning_rate = 1e-3;
  cfg.train.batch_size = 64;
  cfg.train.epochs = 500;
  cfg.train.warmup.u_modality = 100;
  cfg.train.warmup.u_core = 200;
  cfg.eval.k = 5000;

  require_config(j.at("modalities").is_array() && !j.at("modalities").empty(),
                 "config: 'modalities' must be a nonempty array");
  for (const auto& m : j.at("modalities")) {
    detail::check_keys(m,
                       {"name", "kind", "input_shape", "hidden_sizes", "h_dim", "z_dim",
                        "likelihood", "recon_weight", "kl_weight", "drop_prob", "batchnorm"},
                       "modalities[]");
    try {
      cfg.modalities.push_back(m.get<ModalitySpec>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: bad modality entry: ") + e.what());
    }
  }
  detail::check_keys(j.at("core"), {"hidden_sizes", "zc_dim", "kl_weight"}, "core");
  try {
    cfg.core = j.at("core").get<CoreSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad core entry: ") + e.what());
  }
  if (j.contains("combiner")) cfg.combiner = combiner_from_string(j.at("combiner").get<std::string>());

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(
        t, {"learning_rate", "batch_size", "epochs", "seed", "warmup", "checkpoint_every"},
        "train");
    detail::read_if(t, "learning_rate", cfg.train.learning_rate, "train");
    detail::read_if(t, "batch_size", cfg.train.batch_size, "train");
    detail::read_if(t, "epochs", cfg.train.epochs, "train");
    detail::read_if(t, "seed", cfg.train.seed, "train");
    detail::read_if(t, "checkpoint_every", cfg.train.checkpoint_every, "train");
    if (t.contains("warmup")) {
      detail::check_keys(t.at("warmup"), {"modality", "core"}, "train.warmup");
      detail::read_if(t.at("warmup"), "modality", cfg.train.warmup.u_modality, "train.warmup");
      detail::read_if(t.at("warmup"), "core", cfg.train.warmup.u_core, "train.warmup");
    }
  }
  if (j.contains("eval")) {
    detail::check_keys(j.at("eval"), {"k", "inner_batch"}, "eval");
    detail::read_if(j.at("eval"), "k", cfg.eval.k, "eval");
    detail::read_if(j.at("eval"), "inner_batch", cfg.eval.inner_batch, "eval");
  }
  if (j.contains("data")) cfg.data = parse_data_config(j.at("data"));
  detail::read_if(j, "out_dir", cfg.out_dir, "top level");

  validate_specs(cfg.modalities, cfg.core);
  validate(cfg.train);
  return cfg;
}

// "train.batch_size=32" style override applied to the raw document. The value
// is parsed as JSON when it parses, and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& dotted) {
  const size_t eq = dotted.find('=');
  require_config(eq != std::string::npos && eq > 0,
                 "override '" + dotted + "' is not of the form key.path=value");
  const std::string path = dotted.substr(0, eq);
  const std::string raw = dotted.substr(eq + 1);

  nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  require_config(!parts.empty(), "override '" + dotted + "' has an empty key path");
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    const std::string& p = parts[i];
    if (node->is_array()) {
      size_t idx = 0;
      try {
        idx = std::stoul(p);
      } catch (...) {
        throw ConfigError("override '" + dotted + "': '" + p + "' is not an array index");
      }
      require_config(idx < node->size(), "override '" + dotted + "': index " + p +
                                             " out of range");
      node = &(*node)[idx];
    } else {
      node = &(*node)[p];
    }
  }
  if (node->is_array()) {
    size_t idx = 0;
    try {
      idx = std::stoul(parts.back());
    } catch (...) {
      throw ConfigError("override '" + dotted + "': '" + parts.back() +
                        "' is not an array index");
    }
    require_config(idx < node->size(), "override '" + dotted + "': index out of range");
    (*node)[idx] = value;
  } else {
    (*node)[parts.back()] = value;
  }
}

inline nlohmann::json load_config_document(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("config: cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ConfigError("config: '" + path + "' is not valid JSON");
  return j;
}

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = load_config_document(path);
  for (const std::string& o : overrides) apply_override(j, o);
  return parse_run_config(j);
}

}  // namespace mhvae
