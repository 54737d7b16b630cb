#pragma once

#include <json.hpp>

#include "mhvae/model.hpp"

// nlohmann-json bindings for the model's spec types, shared by the checkpoint
// header and the run-config loader.

namespace mhvae {

inline void to_json(nlohmann::json& j, const ModalitySpec& m) {
  j = nlohmann::json{{"name", m.name},
                     {"kind", to_string(m.kind)},
                     {"input_shape", m.input_shape},
                     {"hidden_sizes", m.hidden_sizes},
                     {"h_dim", m.h_dim},
                     {"z_dim", m.z_dim},
                     {"likelihood", to_string(m.likelihood)},
                     {"recon_weight", m.recon_weight},
                     {"kl_weight", m.kl_weight},
                     {"drop_prob", m.drop_prob},
                     {"batchnorm", m.batchnorm}};
}

inline void from_json(const nlohmann::json& j, ModalitySpec& m) {
  j.at("name").get_to(m.name);
  m.kind = net_kind_from_string(j.at("kind").get<std::string>());
  j.at("input_shape").get_to(m.input_shape);
  j.at("hidden_sizes").get_to(m.hidden_sizes);
  j.at("h_dim").get_to(m.h_dim);
  j.at("z_dim").get_to(m.z_dim);
  m.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  m.recon_weight = j.value("recon_weight", 1.0);
  m.kl_weight = j.value("kl_weight", 1.0);
  m.drop_prob = j.value("drop_prob", 0.5);
  m.batchnorm = j.value("batchnorm", false);
}

inline void to_json(nlohmann::json& j, const CoreSpec& c) {
  j = nlohmann::json{{"hidden_sizes", c.hidden_sizes},
                     {"zc_dim", c.zc_dim},
                     {"kl_weight", c.kl_weight}};
}

inline void from_json(const nlohmann::json& j, CoreSpec& c) {
  j.at("hidden_sizes").get_to(c.hidden_sizes);
  j.at("zc_dim").get_to(c.zc_dim);
  c.kl_weight = j.value("kl_weight", 1.0);
}

}  // namespace mhvae
