#pragma once

// Stage runners for the two-stage training, paired-data generation and
// evaluation. Every stage reads and writes artifacts under the configured
// directories; seeds fan out from the master seed via derive_seed.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lapig/checkpoint.hpp"
#include "lapig/config.hpp"

namespace lapig {

// A prerequisite artifact is missing or inconsistent.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using StageLogger = std::function<void(const std::string&)>;

// CSV training log: epoch, wall_seconds, then one column per named loss.
class EpochLog {
 public:
  EpochLog(const std::filesystem::path& path, const std::vector<std::string>& columns)
      : out_(path), start_(std::chrono::steady_clock::now()) {
    if (!out_) throw std::runtime_error("cannot write log " + path.string());
    out_ << "epoch,wall_seconds";
    for (const auto& c : columns) out_ << "," << c;
    out_ << "\n";
  }

  void row(std::size_t epoch, const std::vector<double>& values) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    out_ << epoch << "," << secs;
    for (double v : values) out_ << "," << std::setprecision(9) << v;
    out_ << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

struct StageResult {
  std::filesystem::path checkpoint;
  std::string checkpoint_sha;
  std::filesystem::path log;
  std::size_t epochs = 0;
};

// ---------------------------------------------------------------- artifacts

inline std::filesystem::path manifest_path(const PipelineConfig& cfg) { return cfg.data_path() / "manifest.json"; }

inline DatasetManifest require_dataset(const PipelineConfig& cfg) {
  const auto p = manifest_path(cfg);
  if (!std::filesystem::exists(p)) throw DependencyError("missing dataset manifest " + p.string() + " (run make-data)");
  return load_manifest(p);
}

inline std::filesystem::path require_checkpoint(const PipelineConfig& cfg, const std::string& stage) {
  const auto p = cfg.ckpt_path(stage);
  if (!std::filesystem::exists(p)) throw DependencyError("missing " + stage + " checkpoint " + p.string() + " (run train " + stage + ")");
  return p;
}

inline VqVae<float> load_vqvae(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path, "vqvae");
  VqVae<float> m(VqVaeConfig::from_json(ck.config), 0);
  ck.load_parameters("", m.parameters());
  return m;
}

inline IdentityEncoder<float> load_identity(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path, "identity");
  IdentityEncoder<float> m(IdentityEncoderConfig::from_json(ck.config), 0);
  ck.load_parameters("", m.parameters());
  return m;
}

struct LoadedSynthesis {
  SynthesisModel<float> model;
  ViewPrefixes prefixes;
};

inline LoadedSynthesis load_synthesis(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path, "synthesis");
  LoadedSynthesis out{SynthesisModel<float>(SynthesisModelConfig::from_json(ck.config.at("model")), 0), {}};
  ck.load_parameters("unet.", out.model.unet.parameters());
  ck.load_parameters("text.", out.model.text.parameters());
  for (View v : kAllViews) out.prefixes[v] = ck.config.at("view_prefixes").at(to_string(v));
  return out;
}

inline V2tModel<float> load_v2t(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path, "v2t");
  V2tModel<float> m(V2tModelConfig::from_json(ck.config), 0);
  ck.load_parameters("unet.", m.unet.parameters());
  m.latent_scale = ck.meta.at("latent_scale");
  m.vq_hash = ck.meta.at("vq_weights_hash");
  return m;
}

namespace detail {

inline void say(const StageLogger& log, const std::string& msg) {
  if (log) log(msg);
}

inline void write_snapshot(const PipelineConfig& cfg, const std::string& stage) {
  save_config(cfg, std::filesystem::path(cfg.ckpt_dir) / (stage + ".config.json"));
}

inline std::map<int, std::size_t> label_map(const std::set<int>& ids) {
  std::map<int, std::size_t> out;
  for (int id : ids) out.emplace(id, out.size());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- stages

inline DatasetManifest make_data(const PipelineConfig& cfg) {
  SyntheticDataConfig d = cfg.data;
  d.seed = derive_seed(cfg.seed, "data");
  return generate_synthetic_dataset(cfg.data_path(), d);
}

inline StageResult train_vqvae_stage(const PipelineConfig& cfg, const StageLogger& log = {}) {
  const auto m = require_dataset(cfg);
  std::vector<Tensor<float>> images;
  for (const auto& s : load_split(m, "train")) {
    images.push_back(s.visible);
    images.push_back(s.thermal);
  }
  VqVae<float> model(cfg.vqvae, derive_seed(cfg.seed, "vqvae.init"));
  VqTrainConfig tc = cfg.vqvae_train;
  tc.seed = derive_seed(cfg.seed, "vqvae.train");
  std::filesystem::create_directories(cfg.ckpt_dir);
  StageResult r;
  r.log = std::filesystem::path(cfg.ckpt_dir) / "vqvae.log.csv";
  EpochLog elog(r.log, {"loss", "recon_mse", "codes_used"});
  const auto hist = train_vqvae(model, images, tc, [&](const VqEpochStats& s) {
    elog.row(s.epoch, {s.loss, s.recon_mse, static_cast<double>(s.codes_used)});
    detail::say(log, "vqvae epoch " + std::to_string(s.epoch) + " recon_mse " + std::to_string(s.recon_mse));
  });
  Checkpoint ck;
  ck.kind = "vqvae";
  ck.config = cfg.vqvae.to_json();
  ck.meta = {{"weights_hash", model.weights_hash()}, {"epochs", tc.epochs}, {"lr", tc.lr}, {"images", images.size()}};
  ck.add_parameters("", model.parameters());
  r.checkpoint = cfg.ckpt_path("vqvae");
  r.checkpoint_sha = ck.save(r.checkpoint);
  r.epochs = hist.size();
  detail::write_snapshot(cfg, "vqvae");
  return r;
}

inline StageResult train_identity_stage(const PipelineConfig& cfg, const StageLogger& log = {}) {
  const auto m = require_dataset(cfg);
  const auto labels = detail::label_map(m.identities("train"));
  IdentityEncoderConfig ic = cfg.identity;
  ic.num_classes = labels.size();
  std::vector<Tensor<float>> images;
  std::vector<std::size_t> ys;
  for (const auto& s : load_split(m, "train")) {
    for (const auto* im : {&s.visible, &s.thermal}) {
      images.push_back(*im);
      ys.push_back(labels.at(s.identity_id));
    }
  }
  IdentityEncoder<float> enc(ic, derive_seed(cfg.seed, "identity.init"));
  IdentityTrainConfig tc = cfg.identity_train;
  tc.seed = derive_seed(cfg.seed, "identity.train");
  std::filesystem::create_directories(cfg.ckpt_dir);
  StageResult r;
  r.log = std::filesystem::path(cfg.ckpt_dir) / "identity.log.csv";
  EpochLog elog(r.log, {"arcface_loss"});
  const auto hist = train_identity_encoder(enc, images, ys, tc, [&](std::size_t e, double loss) {
    elog.row(e, {loss});
    detail::say(log, "identity epoch " + std::to_string(e) + " loss " + std::to_string(loss));
  });
  Checkpoint ck;
  ck.kind = "identity";
  ck.config = ic.to_json();
  ck.meta = {{"weights_hash", enc.parameters().hash()}, {"epochs", tc.epochs}, {"lr", tc.lr}};
  ck.add_parameters("", enc.parameters());
  r.checkpoint = cfg.ckpt_path("identity");
  r.checkpoint_sha = ck.save(r.checkpoint);
  r.epochs = hist.size();
  detail::write_snapshot(cfg, "identity");
  return r;
}

// Captions for a set of images: the external service when configured, the
// attribute template otherwise or when the service fails.
inline std::vector<Caption> caption_images(const PipelineConfig& cfg, const std::vector<ByteImage>& images,
                                           const std::vector<std::optional<AttributeMap>>& attrs) {
  if (!cfg.captioner.url.empty()) return caption_many(images, cfg.captioner, attrs, cfg.captioner_in_flight);
  std::vector<Caption> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!attrs[i]) throw CaptionServiceError("no captioner configured and no attributes for image " + std::to_string(i), false);
    out.push_back(caption_from_template(*attrs[i]));
  }
  return out;
}

inline StageResult train_synthesis_stage(const PipelineConfig& cfg, const StageLogger& log = {}) {
  const auto m = require_dataset(cfg);
  const auto id_enc = load_identity(require_checkpoint(cfg, "identity"));
  std::map<int, SynthesisExample> by_id;
  std::map<int, ByteImage> front_bytes;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& rec = m.records[i];
    if (rec.split != "train") continue;
    const auto s = load_sample(m, i);
    auto& ex = by_id[rec.identity_id];
    ex.identity_id = rec.identity_id;
    ex.targets[rec.view] = s.visible;
    ex.caption.attributes = rec.attributes;
    if (rec.view == View::front) {
      ex.id_image = s.visible;
      front_bytes[rec.identity_id] = denormalize(s.visible);
    }
  }
  std::vector<SynthesisExample> data;
  std::vector<ByteImage> images;
  std::vector<std::optional<AttributeMap>> attrs;
  for (auto& [id, ex] : by_id) {
    if (ex.id_image.empty()) continue;
    images.push_back(front_bytes.at(id));
    attrs.emplace_back(ex.caption.attributes);
    data.push_back(std::move(ex));
  }
  const auto captions = caption_images(cfg, images, attrs);
  std::size_t templated = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i].caption = captions[i];
    templated += captions[i].source == CaptionSource::template_engine;
  }
  detail::say(log, "synthesis captions: " + std::to_string(data.size() - templated) + " from service, " + std::to_string(templated) + " from template");

  SynthesisModel<float> model(cfg.synthesis, derive_seed(cfg.seed, "synthesis.init"));
  SynthesisTrainConfig tc = cfg.synthesis_train;
  tc.seed = derive_seed(cfg.seed, "synthesis.train");
  std::filesystem::create_directories(cfg.ckpt_dir);
  StageResult r;
  r.log = std::filesystem::path(cfg.ckpt_dir) / "synthesis.log.csv";
  EpochLog elog(r.log, {"diffusion", "pose", "total", "skipped"});
  const auto hist = train_synthesis(
      model, id_enc, data, tc,
      [&](const SynthesisEpochStats& s) {
        elog.row(s.epoch, {s.diffusion, s.pose, s.total, static_cast<double>(s.skipped)});
        detail::say(log, "synthesis epoch " + std::to_string(s.epoch) + " total " + std::to_string(s.total));
      },
      cfg.view_prefixes);
  if (!hist.empty() && hist.back().skipped) detail::say(log, "warning: " + std::to_string(hist.back().skipped) + " identities lack some views and were skipped");
  Checkpoint ck;
  ck.kind = "synthesis";
  nlohmann::json prefixes;
  for (const auto& [v, p] : cfg.view_prefixes) prefixes[to_string(v)] = p;
  ck.config = {{"model", cfg.synthesis.to_json()}, {"view_prefixes", prefixes}};
  ck.meta = {{"epochs", tc.epochs},
             {"lr", tc.lr},
             {"lambda_pose", tc.lambda_pose},
             {"captions_from_template", templated},
             {"captions_from_service", data.size() - templated}};
  ck.add_parameters("unet.", model.unet.parameters());
  ck.add_parameters("text.", model.text.parameters());
  r.checkpoint = cfg.ckpt_path("synthesis");
  r.checkpoint_sha = ck.save(r.checkpoint);
  r.epochs = hist.size();
  detail::write_snapshot(cfg, "synthesis");
  return r;
}

inline StageResult train_v2t_stage(const PipelineConfig& cfg, const StageLogger& log = {}) {
  const auto vq_path = require_checkpoint(cfg, "vqvae");
  const auto m = require_dataset(cfg);
  const auto vq = load_vqvae(vq_path);
  std::vector<PairedImage> pairs;
  for (const auto& s : load_split(m, "train")) pairs.push_back({s.visible, s.thermal});
  V2tModelConfig vc = cfg.v2t;
  V2tModel<float> model(vc, derive_seed(cfg.seed, "v2t.init"));
  V2tTrainConfig tc = cfg.v2t_train;
  tc.seed = derive_seed(cfg.seed, "v2t.train");
  std::filesystem::create_directories(cfg.ckpt_dir);
  StageResult r;
  r.log = std::filesystem::path(cfg.ckpt_dir) / "v2t.log.csv";
  EpochLog elog(r.log, {"loss"});
  const auto hist = train_v2t(model, vq, pairs, tc, [&](const V2tEpochStats& s) {
    elog.row(s.epoch, {s.loss});
    detail::say(log, "v2t epoch " + std::to_string(s.epoch) + " loss " + std::to_string(s.loss));
  });
  Checkpoint ck;
  ck.kind = "v2t";
  ck.config = vc.to_json();
  ck.meta = {{"latent_scale", model.latent_scale},
             {"vq_weights_hash", model.vq_hash},
             {"vq_checkpoint_sha", sha256_file(vq_path)},
             {"epochs", tc.epochs},
             {"lr", tc.lr}};
  ck.add_parameters("unet.", model.unet.parameters());
  r.checkpoint = cfg.ckpt_path("v2t");
  r.checkpoint_sha = ck.save(r.checkpoint);
  r.epochs = hist.size();
  detail::write_snapshot(cfg, "v2t");
  return r;
}

// ---------------------------------------------------------------- generation

struct GenerateInput {
  std::filesystem::path image;
  std::optional<AttributeMap> attributes;  // used when no caption service answers
};

struct GenerateResult {
  std::filesystem::path root;
  std::filesystem::path manifest;
  std::size_t images_written = 0;
  std::vector<std::string> failures;
};

namespace detail {

// Horizontal strip of equally sized RGB tiles.
inline ByteImage tile_row(const std::vector<ByteImage>& tiles) {
  const std::size_t h = tiles.front().dim(1), w = tiles.front().dim(2);
  ByteImage out({3, h, w * tiles.size()});
  for (std::size_t t = 0; t < tiles.size(); ++t)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(c, y, t * w + x) = tiles[t].at(tiles[t].dim(0) == 1 ? 0 : c, y, x);
  return out;
}

}  // namespace detail

// For each input: caption, identity vector, four synthesized visible views,
// four translated thermals. Writes the dataset layout under out_dir/generated
// plus one grid image per input (reference | 4 visible | 4 thermal).
inline GenerateResult generate(const PipelineConfig& cfg, const std::vector<GenerateInput>& inputs, const StageLogger& log = {}) {
  const auto id_enc = load_identity(require_checkpoint(cfg, "identity"));
  const auto synth = load_synthesis(require_checkpoint(cfg, "synthesis"));
  const auto vq = load_vqvae(require_checkpoint(cfg, "vqvae"));
  const auto v2t = load_v2t(require_checkpoint(cfg, "v2t"));
  v2t.require_vq(vq);

  GenerateResult res;
  res.root = cfg.out_path() / "generated";
  std::filesystem::create_directories(res.root / "grids");
  DatasetManifest man;
  man.root = res.root;
  man.seed = cfg.seed;
  man.image_size = cfg.data.image_size;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const int id = static_cast<int>(i);
    try {
      ByteImage bytes = read_png(inputs[i].image);
      Tensor<float> ref = normalize<float>(bytes);
      if (ref.dim(0) == 1) ref = replicate_to_rgb(ref);
      Caption cap;
      std::string why;
      if (!cfg.captioner.url.empty()) {
        cap = caption_with_fallback(bytes, cfg.captioner, inputs[i].attributes, &why);
        if (!why.empty()) detail::say(log, "input " + std::to_string(i) + ": captioner failed (" + why + "), used template");
      } else if (inputs[i].attributes) {
        cap = caption_from_template(*inputs[i].attributes);
      } else {
        throw CaptionServiceError("no captioner configured and no attributes supplied", false);
      }
      const auto views = synthesize_views(ref, cap, synth.model, id_enc, derive_seed(cfg.seed, "generate", i), synth.prefixes);
      std::vector<ByteImage> grid{denormalize(ref)};
      std::vector<ByteImage> thermals;
      std::vector<ManifestRecord> recs;
      const std::filesystem::path dir = std::filesystem::path("train") / std::to_string(id);
      std::filesystem::create_directories(res.root / dir);
      for (std::size_t v = 0; v < views.views.size(); ++v) {
        const Tensor<float> thm = translate(views.images[v], vq, v2t, derive_seed(cfg.seed, "generate.translate", 4 * i + v));
        ManifestRecord rec;
        rec.identity_id = id;
        rec.view = views.views[v];
        rec.split = "train";
        rec.visible_file = (dir / (to_string(rec.view) + "_vis.png")).string();
        rec.thermal_file = (dir / (to_string(rec.view) + "_thm.png")).string();
        rec.attributes = cap.attributes;
        rec.attributes["caption"] = cap.text;
        rec.attributes["caption_source"] = cap.source == CaptionSource::template_engine ? "template" : "service";
        rec.attributes["source_image"] = inputs[i].image.filename().string();
        const ByteImage vis_b = denormalize(views.images[v]), thm_b = denormalize(thm);
        write_png(res.root / rec.visible_file, vis_b);
        write_png(res.root / rec.thermal_file, thm_b);
        grid.push_back(vis_b);
        thermals.push_back(thm_b);
        recs.push_back(std::move(rec));
      }
      grid.insert(grid.end(), thermals.begin(), thermals.end());
      write_png(res.root / "grids" / (std::to_string(id) + ".png"), detail::tile_row(grid));
      res.images_written += 2 * recs.size();
      man.records.insert(man.records.end(), recs.begin(), recs.end());
      detail::say(log, "input " + std::to_string(i) + ": wrote 8 images");
    } catch (const std::exception& e) {
      res.failures.push_back("input " + std::to_string(i) + " (" + inputs[i].image.string() + "): " + e.what());
      detail::say(log, res.failures.back());
    }
  }
  res.manifest = res.root / "manifest.json";
  man.save(res.manifest);
  return res;
}

// ---------------------------------------------------------------- evaluation

struct TranslationSet {
  std::vector<Tensor<float>> real;        // ground-truth thermals (1,H,W)
  std::vector<Tensor<float>> translated;  // predictions, same order
  std::vector<int> identity_ids;
  std::vector<View> views;
};

inline std::string feature_extractor_name(const IdentityEncoder<float>& enc) {
  return "identity-encoder-pooled-" + std::to_string(enc.config().widths.back()) + ":" + enc.parameters().hash().substr(0, 12);
}

// SSIM against ground truth, FID between feature sets, and verification of
// each translated probe against the real thermals of the same view (one per
// identity): rank-1, genuine = same identity, impostor = any other identity.
inline EvalReport evaluate_translations(const TranslationSet& set, const IdentityEncoder<float>& verifier, const SsimParams& sp = {}) {
  const std::size_t n = set.real.size();
  if (n == 0 || set.translated.size() != n || set.identity_ids.size() != n || set.views.size() != n)
    throw std::invalid_argument("translation set is empty or ragged");
  EvalReport r;
  r.n_pairs = n;
  FeatureSet feat_real, feat_gen;
  std::vector<std::vector<double>> emb_real, emb_gen;
  auto to_vec = [](const Tensor<float>& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
  for (std::size_t i = 0; i < n; ++i) {
    r.ssim_mean += ssim(set.translated[i], set.real[i], sp);
    feat_real.push_back(to_vec(verifier.feature_vector(set.real[i])));
    feat_gen.push_back(to_vec(verifier.feature_vector(set.translated[i])));
    emb_real.push_back(to_vec(verifier.extract(set.real[i])));
    emb_gen.push_back(to_vec(verifier.extract(set.translated[i])));
  }
  r.ssim_mean /= static_cast<double>(n);
  r.fid = fid(feat_real, feat_gen);
  ScorePair scores;
  std::size_t hits = 0;
  for (View v : kAllViews) {
    FeatureSet gallery, probes;
    std::vector<int> g_ids, p_ids;
    for (std::size_t i = 0; i < n; ++i) {
      if (set.views[i] != v) continue;
      gallery.push_back(emb_real[i]);
      g_ids.push_back(set.identity_ids[i]);
      probes.push_back(emb_gen[i]);
      p_ids.push_back(set.identity_ids[i]);
    }
    if (probes.empty()) continue;
    hits += static_cast<std::size_t>(std::lround(rank1(gallery, g_ids, probes, p_ids).rank1 * static_cast<double>(probes.size())));
    const auto sp_v = score_pairs(gallery, g_ids, probes, p_ids);
    scores.genuine.insert(scores.genuine.end(), sp_v.genuine.begin(), sp_v.genuine.end());
    scores.impostor.insert(scores.impostor.end(), sp_v.impostor.begin(), sp_v.impostor.end());
  }
  r.rank1 = static_cast<double>(hits) / static_cast<double>(n);
  r.vr_at_far = verification_metrics(scores).vr_at_far;
  r.feature_extractor = feature_extractor_name(verifier);
  return r;
}

// Translates every sample (item i seeded with derive_seed(seed, "evaluate", i)).
inline TranslationSet translate_split(const std::vector<PairedSample<float>>& samples, const VqVae<float>& vq,
                                      const V2tModel<float>& v2t, std::uint64_t seed) {
  TranslationSet set;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    set.real.push_back(samples[i].thermal);
    set.translated.push_back(translate(samples[i].visible, vq, v2t, derive_seed(seed, "evaluate", i)));
    set.identity_ids.push_back(samples[i].identity_id);
    set.views.push_back(samples[i].view);
  }
  return set;
}

inline EvalReport evaluate_pipeline(const std::vector<PairedSample<float>>& test, const VqVae<float>& vq, const V2tModel<float>& v2t,
                                    const IdentityEncoder<float>& verifier, const SsimParams& sp, std::uint64_t seed) {
  return evaluate_translations(translate_split(test, vq, v2t, seed), verifier, sp);
}

struct EvaluateResult {
  EvalReport report;
  std::filesystem::path json_path;
  std::filesystem::path table_path;
};

inline EvaluateResult evaluate_stage(const PipelineConfig& cfg, const StageLogger& log = {}) {
  const auto vq = load_vqvae(require_checkpoint(cfg, "vqvae"));
  const auto v2t = load_v2t(require_checkpoint(cfg, "v2t"));
  const auto verifier = load_identity(require_checkpoint(cfg, "identity"));
  const auto m = require_dataset(cfg);
  const auto test = load_split(m, "test");
  if (test.empty()) throw DependencyError("dataset has no test split");
  detail::say(log, "translating " + std::to_string(test.size()) + " test images");
  EvaluateResult out;
  out.report = evaluate_pipeline(test, vq, v2t, verifier, cfg.ssim, derive_seed(cfg.seed, "evaluate"));
  out.report.config = cfg.to_json();
  out.report.config_hash = cfg.hash();
  std::filesystem::create_directories(cfg.out_path());
  out.json_path = cfg.out_path() / "report.json";
  out.table_path = cfg.out_path() / "report.txt";
  std::ofstream(out.json_path) << out.report.to_json().dump(2) << "\n";
  std::ofstream(out.table_path) << out.report.to_table();
  return out;
}

}  // namespace lapig
