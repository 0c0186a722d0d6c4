#pragma once

// Pipeline configuration: one JSON document with a schema version. A file
// only needs the keys it changes; everything else keeps its default.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "lapig/conditioning.hpp"
#include "lapig/data.hpp"
#include "lapig/hashing.hpp"
#include "lapig/identity.hpp"
#include "lapig/metrics.hpp"
#include "lapig/synthesis.hpp"
#include "lapig/v2t.hpp"
#include "lapig/vqvae.hpp"

namespace lapig {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::string ckpt_dir = "checkpoints";
  std::string out_dir = "out";
  std::string device_hint = "cpu";

  SyntheticDataConfig data;
  VqVaeConfig vqvae;
  VqTrainConfig vqvae_train;
  IdentityEncoderConfig identity;
  IdentityTrainConfig identity_train;
  SynthesisModelConfig synthesis;
  SynthesisTrainConfig synthesis_train;
  V2tModelConfig v2t;
  V2tTrainConfig v2t_train;
  CaptionServiceConfig captioner{"", 10000};
  std::size_t captioner_in_flight = 4;
  ViewPrefixes view_prefixes = default_view_prefixes();
  SsimParams ssim;

  PipelineConfig() { identity.num_classes = data.n_identities - data.n_test_identities; }

  // Settings sized for a single CPU core: faster learning rates and fewer
  // epochs than the defaults, smaller stage-1 generator.
  static PipelineConfig desk() {
    PipelineConfig c;
    c.vqvae_train.epochs = 20;
    c.vqvae_train.lr = 2e-3;
    c.identity_train.epochs = 30;
    c.identity_train.lr = 2e-3;
    c.identity.scale = 16;
    c.identity.margin = 0.3;
    c.synthesis.schedule.steps = 200;
    c.synthesis.schedule.beta_end = 0.1;
    c.synthesis_train.epochs = 10;
    c.synthesis_train.lr = 1e-3;
    c.v2t_train.epochs = 100;
    c.v2t_train.lr = 1e-3;
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json prefixes;
    for (const auto& [v, p] : view_prefixes) prefixes[to_string(v)] = p;
    return {
        {"schema_version", kSchemaVersion},
        {"seed", seed},
        {"paths", {{"data_dir", data_dir}, {"ckpt_dir", ckpt_dir}, {"out_dir", out_dir}}},
        {"device_hint", device_hint},
        {"data", {{"n_identities", data.n_identities}, {"n_test_identities", data.n_test_identities}, {"image_size", data.image_size}}},
        {"vqvae", vqvae.to_json()},
        {"vqvae_train", {{"epochs", vqvae_train.epochs}, {"lr", vqvae_train.lr}, {"batch_size", vqvae_train.batch_size}}},
        {"identity", identity.to_json()},
        {"identity_train",
         {{"epochs", identity_train.epochs}, {"lr", identity_train.lr}, {"batch_size", identity_train.batch_size}, {"max_shift", identity_train.max_shift}}},
        {"synthesis", synthesis.to_json()},
        {"synthesis_train",
         {{"epochs", synthesis_train.epochs},
          {"lr", synthesis_train.lr},
          {"lambda_pose", synthesis_train.lambda_pose},
          {"batch_identities", synthesis_train.batch_identities}}},
        {"v2t", v2t.to_json()},
        {"v2t_train", {{"epochs", v2t_train.epochs}, {"lr", v2t_train.lr}, {"batch_size", v2t_train.batch_size}}},
        {"captioner", {{"url", captioner.url}, {"timeout_ms", captioner.timeout_ms}, {"in_flight", captioner_in_flight}}},
        {"view_prefixes", prefixes},
        {"ssim", {{"window", ssim.window}, {"dynamic_range", ssim.dynamic_range}, {"k1", ssim.k1}, {"k2", ssim.k2}}},
    };
  }

  // Overlays `patch` on `base`. Unknown keys are rejected so typos surface.
  static PipelineConfig from_json(const nlohmann::json& patch, const PipelineConfig& base = PipelineConfig()) {
    if (!patch.is_object()) throw ConfigError("config must be a JSON object");
    if (!patch.contains("schema_version")) throw ConfigError("config lacks schema_version");
    if (patch.at("schema_version") != kSchemaVersion)
      throw ConfigError("unsupported config schema_version " + patch.at("schema_version").dump());
    nlohmann::json full = base.to_json();
    check_keys(full, patch, "");
    full.merge_patch(patch);
    try {
      PipelineConfig c = base;
      c.seed = full["seed"];
      c.data_dir = full["paths"]["data_dir"];
      c.ckpt_dir = full["paths"]["ckpt_dir"];
      c.out_dir = full["paths"]["out_dir"];
      c.device_hint = full["device_hint"];
      const auto& d = full["data"];
      c.data.n_identities = d["n_identities"];
      c.data.n_test_identities = d["n_test_identities"];
      c.data.image_size = d["image_size"];
      c.vqvae = VqVaeConfig::from_json(full["vqvae"]);
      read_train(full["vqvae_train"], c.vqvae_train);
      c.identity = IdentityEncoderConfig::from_json(full["identity"]);
      read_train(full["identity_train"], c.identity_train);
      c.identity_train.max_shift = full["identity_train"]["max_shift"];
      c.synthesis = SynthesisModelConfig::from_json(full["synthesis"]);
      const auto& st = full["synthesis_train"];
      c.synthesis_train.epochs = st["epochs"];
      c.synthesis_train.lr = st["lr"];
      c.synthesis_train.lambda_pose = st["lambda_pose"];
      c.synthesis_train.batch_identities = st["batch_identities"];
      c.v2t = V2tModelConfig::from_json(full["v2t"]);
      read_train(full["v2t_train"], c.v2t_train);
      c.captioner.url = full["captioner"]["url"];
      c.captioner.timeout_ms = full["captioner"]["timeout_ms"];
      c.captioner_in_flight = full["captioner"]["in_flight"];
      for (View v : kAllViews) c.view_prefixes[v] = full["view_prefixes"].at(to_string(v));
      const auto& s = full["ssim"];
      c.ssim = {s["window"], s["dynamic_range"], s["k1"], s["k2"]};
      c.validate();
      return c;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config value of the wrong type: ") + e.what());
    }
  }

  void validate() const {
    if (data.n_test_identities >= data.n_identities) throw ConfigError("test identities must leave some for training");
    if (data.image_size % vqvae.factor) throw ConfigError("image size must be divisible by the VQ-VAE factor");
    if (identity.num_classes != data.n_identities - data.n_test_identities)
      throw ConfigError("identity.num_classes must equal the number of training identities");
    if (synthesis.text.token_dim < identity.embed_dim) throw ConfigError("token_dim must be at least the identity vector width");
    if (synthesis.unet.context_dim != synthesis.text.token_dim) throw ConfigError("synthesis context_dim must equal token_dim");
    if (v2t.unet.out_channels != vqvae.code_dim || v2t.unet.in_channels != 2 * vqvae.code_dim)
      throw ConfigError("v2t denoiser channels must match the VQ-VAE latent width");
    if (synthesis_train.lambda_pose < 0) throw ConfigError("lambda_pose must be non-negative");
    if (ssim.window % 2 == 0 || ssim.window > data.image_size) throw ConfigError("bad SSIM window");
  }

  std::string hash() const { return sha256_hex(to_json().dump()); }

  std::filesystem::path data_path() const { return data_dir; }
  std::filesystem::path ckpt_path(const std::string& stage) const { return std::filesystem::path(ckpt_dir) / (stage + ".ckpt"); }
  std::filesystem::path out_path() const { return out_dir; }

 private:
  template <class C>
  static void read_train(const nlohmann::json& j, C& c) {
    c.epochs = j["epochs"];
    c.lr = j["lr"];
    c.batch_size = j["batch_size"];
  }

  static void check_keys(const nlohmann::json& known, const nlohmann::json& patch, const std::string& where) {
    for (const auto& [k, v] : patch.items()) {
      if (!known.contains(k)) throw ConfigError("unknown config key " + where + k);
      if (v.is_object() && known.at(k).is_object()) check_keys(known.at(k), v, where + k + ".");
    }
  }
};

inline PipelineConfig load_config(const std::filesystem::path& path, const PipelineConfig& base = PipelineConfig()) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return PipelineConfig::from_json(j, base);
}

inline void save_config(const PipelineConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << c.to_json().dump(2) << "\n";
}

}  // namespace lapig
