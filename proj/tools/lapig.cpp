// lapig: command-line front end for data generation, the training stages,
// paired-data generation and evaluation.

#include <cstdlib>
#include <iostream>

#include "lapig/pipeline.hpp"

#include "CLI11.hpp"

namespace fs = std::filesystem;
using namespace lapig;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfigError = 2, kDependencyError = 3, kPartialFailure = 4 };

struct Overrides {
  std::string config_file;
  std::string preset = "full";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_dir, ckpt_dir, out_dir, captioner_url, device_hint;
  std::optional<int> captioner_timeout_ms;
};

// Precedence: preset < config file < environment < flags.
PipelineConfig resolve(const Overrides& o) {
  PipelineConfig base;
  if (o.preset == "desk")
    base = PipelineConfig::desk();
  else if (o.preset != "full")
    throw ConfigError("unknown preset " + o.preset);
  PipelineConfig c = o.config_file.empty() ? base : load_config(o.config_file, base);
  if (const char* env = std::getenv("LAPIG_CAPTIONER_URL")) c.captioner.url = env;
  if (o.seed) c.seed = *o.seed;
  if (o.data_dir) c.data_dir = *o.data_dir;
  if (o.ckpt_dir) c.ckpt_dir = *o.ckpt_dir;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.captioner_url) c.captioner.url = *o.captioner_url;
  if (o.captioner_timeout_ms) c.captioner.timeout_ms = *o.captioner_timeout_ms;
  if (o.device_hint) c.device_hint = *o.device_hint;
  if (c.device_hint != "cpu") std::cerr << "note: device hint '" << c.device_hint << "' ignored, running on cpu\n";
  c.validate();
  return c;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

// Fallback attributes for an input image: a sidecar <image>.attributes.json
// holding a flat string map, if present.
std::optional<AttributeMap> sidecar_attributes(const fs::path& image) {
  const fs::path side = image.string() + ".attributes.json";
  if (!fs::exists(side)) return std::nullopt;
  std::ifstream f(side);
  try {
    return nlohmann::json::parse(f).get<AttributeMap>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad attribute sidecar " + side.string() + ": " + e.what());
  }
}

void print_stage(const std::string& stage, const StageResult& r) {
  std::cout << stage << ": " << r.epochs << " epochs, checkpoint " << r.checkpoint.string() << " sha256 " << r.checkpoint_sha
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Paired visible/thermal face data generation pipeline"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config_file, "JSON config file (only changed keys needed)");
  app.add_option("--preset", o.preset, "base settings before the config file")->check(CLI::IsMember({"full", "desk"}));
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--data-dir", o.data_dir);
  app.add_option("--ckpt-dir", o.ckpt_dir);
  app.add_option("--out-dir", o.out_dir);
  app.add_option("--captioner-url", o.captioner_url, "caption service endpoint (overrides LAPIG_CAPTIONER_URL)");
  app.add_option("--captioner-timeout-ms", o.captioner_timeout_ms);
  app.add_option("--device-hint", o.device_hint);

  auto* make_data_cmd = app.add_subcommand("make-data", "render the synthetic paired dataset");

  auto* train_cmd = app.add_subcommand("train", "train one stage");
  std::string stage;
  train_cmd->add_option("stage", stage)->required()->check(CLI::IsMember({"vqvae", "identity", "synthesis", "v2t"}));

  auto* gen_cmd = app.add_subcommand("generate", "synthesize paired data from identity images");
  std::vector<std::string> images;
  std::string from_split;
  std::size_t limit = 0;
  gen_cmd->add_option("images", images, "reference face images (PNG)");
  gen_cmd->add_option("--from-split", from_split, "use front-view visibles of a dataset split, with their attributes");
  gen_cmd->add_option("--limit", limit, "at most this many inputs (0 = all)");

  auto* eval_cmd = app.add_subcommand("evaluate", "translate the test split and write the report");

  auto* config_cmd = app.add_subcommand("config", "print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    const PipelineConfig cfg = resolve(o);
    if (*config_cmd) {
      std::cout << cfg.to_json().dump(2) << "\n";
      return kOk;
    }
    if (*make_data_cmd) {
      const auto m = make_data(cfg);
      std::cout << "make-data: " << m.records.size() << " records in " << cfg.data_path().string() << "\n";
      return kOk;
    }
    if (*train_cmd) {
      if (stage == "vqvae") print_stage(stage, train_vqvae_stage(cfg, log_line));
      if (stage == "identity") print_stage(stage, train_identity_stage(cfg, log_line));
      if (stage == "synthesis") print_stage(stage, train_synthesis_stage(cfg, log_line));
      if (stage == "v2t") print_stage(stage, train_v2t_stage(cfg, log_line));
      return kOk;
    }
    if (*gen_cmd) {
      std::vector<GenerateInput> inputs;
      if (!from_split.empty()) {
        const auto m = require_dataset(cfg);
        for (const auto& r : m.records)
          if (r.split == from_split && r.view == View::front) inputs.push_back({m.root / r.visible_file, r.attributes});
      }
      for (const auto& p : images) inputs.push_back({p, sidecar_attributes(p)});
      if (limit && inputs.size() > limit) inputs.resize(limit);
      if (inputs.empty()) throw ConfigError("generate needs input images or --from-split");
      const auto res = generate(cfg, inputs, log_line);
      std::cout << "generate: " << res.images_written << " images, manifest " << res.manifest.string() << "\n";
      for (const auto& f : res.failures) std::cerr << "failed: " << f << "\n";
      return res.failures.empty() ? kOk : kPartialFailure;
    }
    if (*eval_cmd) {
      const auto res = evaluate_stage(cfg, log_line);
      std::cout << res.report.to_table();
      std::cout << "wrote " << res.json_path.string() << " and " << res.table_path.string() << "\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kDependencyError;
  } catch (const CheckpointError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kDependencyError;
  } catch (const FrozenModelError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kDependencyError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
