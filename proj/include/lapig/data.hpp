#pragma once

// Procedural paired visible/thermal face data and the manifest loader.
//
// Faces are drawn from a handful of parametric 2-D shapes in a canonical face
// frame, then warped per view. The thermal image is a fixed function of the
// same region map: every region has a temperature, followed by a 3x3 binomial
// blur. Both images are quantised to 8 bits at render time, so re-rendering an
// identity reproduces the stored files bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapig/hashing.hpp"
#include "lapig/image_io.hpp"
#include "lapig/nn.hpp"

namespace lapig {

enum class View { front, left, right, up };

inline constexpr std::array<View, 4> kAllViews{View::front, View::left, View::right, View::up};

inline std::string to_string(View v) {
  switch (v) {
    case View::front: return "front";
    case View::left: return "left";
    case View::right: return "right";
    case View::up: return "up";
  }
  return "?";
}

inline View parse_view(const std::string& s) {
  for (View v : kAllViews)
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown view '" + s + "'");
}

// Caption-facing attributes: age_band, gender, glasses, beard, hair, expression.
using AttributeMap = std::map<std::string, std::string>;

// Latent appearance parameters of one synthetic identity.
struct FaceParams {
  double face_rx = 0.58, face_ry = 0.74;
  double eye_spacing = 0.34, eye_size = 0.07;
  double brow_thickness = 0.04;
  double mouth_curve = 0.0;
  std::array<double, 3> skin{0.85, 0.68, 0.55};
  std::array<double, 3> hair{0.25, 0.18, 0.12};
  bool long_hair = false;
  bool glasses = false;
  bool beard = false;
  int age = 35;
  bool male = true;
  std::string hair_name = "brown";
  std::string expression = "neutral";

  AttributeMap attributes() const {
    AttributeMap a;
    a["age_band"] = age < 30 ? "young" : age < 45 ? "adult" : age < 60 ? "middle-aged" : "senior";
    a["gender"] = male ? "male" : "female";
    if (glasses) a["glasses"] = "true";
    if (beard) a["beard"] = "true";
    a["hair"] = hair_name + (long_hair ? " long" : " short");
    a["expression"] = expression;
    return a;
  }
};

inline FaceParams sample_face(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  FaceParams p;
  p.male = u(rng) < 0.5;
  p.age = static_cast<int>(uni(18, 76));
  p.face_rx = p.male ? uni(0.56, 0.68) : uni(0.50, 0.60);
  p.face_ry = uni(0.68, 0.82);
  p.eye_spacing = uni(0.26, 0.44);
  p.eye_size = uni(0.05, 0.09);
  p.brow_thickness = uni(0.02, 0.065);
  static const std::array<std::array<double, 3>, 5> skins{{
      {0.96, 0.82, 0.70}, {0.88, 0.70, 0.56}, {0.76, 0.57, 0.42}, {0.58, 0.41, 0.29}, {0.40, 0.27, 0.19}}};
  const auto& base = skins[static_cast<std::size_t>(uni(0, 5)) % 5];
  const double jitter = uni(-0.04, 0.04);
  for (int k = 0; k < 3; ++k) p.skin[k] = std::clamp(base[k] + jitter, 0.0, 1.0);
  struct HairOpt {
    const char* name;
    std::array<double, 3> rgb;
  };
  static const std::array<HairOpt, 5> hairs{{{"black", {0.08, 0.07, 0.07}},
                                             {"brown", {0.33, 0.21, 0.12}},
                                             {"blond", {0.86, 0.74, 0.45}},
                                             {"red", {0.62, 0.25, 0.12}},
                                             {"gray", {0.66, 0.66, 0.66}}}};
  std::size_t hi = static_cast<std::size_t>(uni(0, 4)) % 4;
  if (p.age >= 55 && u(rng) < 0.6) hi = 4;
  p.hair = hairs[hi].rgb;
  p.hair_name = hairs[hi].name;
  p.long_hair = u(rng) < (p.male ? 0.2 : 0.7);
  p.glasses = u(rng) < 0.4;
  p.beard = p.male && u(rng) < 0.45;
  const double e = u(rng);
  p.expression = e < 0.4 ? "neutral" : e < 0.75 ? "smiling" : "serious";
  p.mouth_curve = p.expression == "smiling" ? 0.35 : p.expression == "serious" ? -0.2 : 0.0;
  return p;
}

struct RenderedPair {
  ByteImage visible;              // (3, S, S)
  ByteImage thermal;              // (1, S, S)
  std::vector<bool> glasses_mask; // S*S, pixels touched by any glasses sub-sample
  static constexpr int kBlurRadius = 1;
};

namespace detail {

enum Region : int { kBackground, kNeck, kHair, kSkin, kBeard, kBrow, kEye, kNose, kMouth, kLens, kFrame };

struct Affine {
  double sx, sy, tx, ty, shear;
};

inline Affine view_warp(View v) {
  switch (v) {
    case View::front: return {1.0, 1.0, 0.0, 0.0, 0.0};
    case View::left: return {0.80, 1.0, -0.16, 0.0, 0.10};
    case View::right: return {0.80, 1.0, 0.16, 0.0, -0.10};
    case View::up: return {1.0, 0.86, 0.0, -0.10, 0.0};
  }
  return {1, 1, 0, 0, 0};
}

inline bool in_ellipse(double u, double v, double cx, double cy, double rx, double ry) {
  const double a = (u - cx) / rx, b = (v - cy) / ry;
  return a * a + b * b <= 1.0;
}

// Topmost region at face-frame point (u, v), y pointing down.
inline int classify(const FaceParams& p, double u, double v, bool with_glasses) {
  const double fcy = 0.06;
  const double eye_y = -0.06, half = p.eye_spacing / 2;
  if (with_glasses) {
    const double lr = p.eye_size * 2.1 + 0.02, frame = 0.035;
    for (double cx : {-half, half}) {
      const double d = std::hypot(u - cx, (v - eye_y) * 1.15);
      if (d <= lr) return kLens;
      if (d <= lr + frame) return kFrame;
    }
    if (std::abs(v - eye_y) <= frame * 0.6 && std::abs(u) <= half - lr) return kFrame;
  }
  for (double cx : {-half, half}) {
    if (in_ellipse(u, v, cx, eye_y, p.eye_size * 1.25, p.eye_size * 0.8)) return kEye;
    const double brow_y = eye_y - p.eye_size * 1.25 - 0.05;
    if (std::abs(u - cx) <= p.eye_size * 1.6 && std::abs(v - brow_y - 0.08 * (u - cx) * (u - cx)) <= p.brow_thickness / 2)
      return kBrow;
  }
  const double mouth_y = fcy + p.face_ry * 0.52;
  const double mw = 0.16 + 0.05 * std::abs(p.mouth_curve);
  if (std::abs(u) <= mw && std::abs(v - (mouth_y - p.mouth_curve * (1 - (u / mw) * (u / mw)) * 0.12)) <= 0.035) return kMouth;
  if (in_ellipse(u, v, 0.0, fcy + p.face_ry * 0.22, 0.055, 0.11)) return kNose;
  const bool face = in_ellipse(u, v, 0.0, fcy, p.face_rx, p.face_ry);
  if (face && p.beard && v > fcy + p.face_ry * 0.30) return kBeard;
  const double hair_top = fcy - p.face_ry - 0.1;
  if (face && v > fcy - p.face_ry * 0.55) return kSkin;
  if (in_ellipse(u, v, 0.0, fcy - 0.04, p.face_rx + 0.1, p.face_ry + 0.1) && v < fcy - p.face_ry * 0.45 && v > hair_top)
    return kHair;
  if (face) return kSkin;
  if (p.long_hair && std::abs(u) <= p.face_rx + 0.16 && std::abs(u) >= p.face_rx - 0.06 && v < fcy + p.face_ry * 0.9 &&
      v > fcy - p.face_ry * 0.5)
    return kHair;
  if (std::abs(u) <= p.face_rx * 0.45 && v > fcy + p.face_ry * 0.7) return kNeck;
  return kBackground;
}

inline std::array<double, 3> visible_color(const FaceParams& p, int region, int under) {
  static const std::array<double, 3> bg{0.30, 0.34, 0.40};
  auto mix = [](const std::array<double, 3>& a, const std::array<double, 3>& b, double t) {
    return std::array<double, 3>{a[0] * (1 - t) + b[0] * t, a[1] * (1 - t) + b[1] * t, a[2] * (1 - t) + b[2] * t};
  };
  switch (region) {
    case kBackground: return bg;
    case kNeck: return mix(p.skin, {0, 0, 0}, 0.12);
    case kHair: return p.hair;
    case kSkin: return p.skin;
    case kBeard: return mix(p.skin, p.hair, 0.7);
    case kBrow: return mix(p.skin, p.hair, 0.85);
    case kEye: return {0.12, 0.10, 0.10};
    case kNose: return mix(p.skin, {0, 0, 0}, 0.1);
    case kMouth: return mix(p.skin, {0.65, 0.15, 0.2}, 0.6);
    case kLens: return mix(visible_color(p, under, kSkin), {0.75, 0.85, 0.95}, 0.15);
    case kFrame: return {0.08, 0.08, 0.1};
  }
  return bg;
}

// Relative apparent temperature in [0, 1].
inline double thermal_level(int region) {
  switch (region) {
    case kBackground: return 0.08;
    case kNeck: return 0.80;
    case kHair: return 0.40;
    case kSkin: return 0.78;
    case kBeard: return 0.55;
    case kBrow: return 0.66;
    case kEye: return 0.95;
    case kNose: return 0.62;
    case kMouth: return 0.88;
    case kLens: return 0.22;
    case kFrame: return 0.30;
  }
  return 0.0;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(std::clamp(v, 0.0, 1.0) * 255.0), 0L, 255L));
}

}  // namespace detail

// Renders one view. Each pixel averages a 2x2 grid of sub-samples.
inline RenderedPair render_face(const FaceParams& p, View view, std::size_t size, bool with_glasses) {
  const auto warp = detail::view_warp(view);
  const std::size_t s = size;
  RenderedPair out;
  out.visible = ByteImage({3, s, s});
  out.thermal = ByteImage({1, s, s});
  out.glasses_mask.assign(s * s, false);
  std::vector<double> heat(s * s);
  const double scale = 2.0 / static_cast<double>(s);
  for (std::size_t py = 0; py < s; ++py)
    for (std::size_t px = 0; px < s; ++px) {
      std::array<double, 3> rgb{0, 0, 0};
      double t = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double x = (static_cast<double>(px) + 0.25 + 0.5 * sx) * scale - 1.0;
          const double y = (static_cast<double>(py) + 0.25 + 0.5 * sy) * scale - 1.0;
          const double v = (y - warp.ty) / warp.sy;
          const double u = (x - warp.tx - warp.shear * v) / warp.sx;
          const int region = detail::classify(p, u, v, with_glasses);
          const int under = detail::classify(p, u, v, false);
          const auto c = detail::visible_color(p, region, under);
          for (int k = 0; k < 3; ++k) rgb[k] += 0.25 * c[k];
          t += 0.25 * detail::thermal_level(region);
          if (region == detail::kLens || region == detail::kFrame) out.glasses_mask[py * s + px] = true;
        }
      for (int k = 0; k < 3; ++k) out.visible[(k * s + py) * s + px] = detail::to_byte(rgb[k]);
      heat[py * s + px] = t;
    }
  // 3x3 binomial blur with edge clamping.
  auto at = [&](long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(s) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(s) - 1);
    return heat[static_cast<std::size_t>(y) * s + static_cast<std::size_t>(x)];
  };
  static constexpr double kw[3] = {0.25, 0.5, 0.25};
  for (long y = 0; y < static_cast<long>(s); ++y)
    for (long x = 0; x < static_cast<long>(s); ++x) {
      double acc = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) acc += kw[dy + 1] * kw[dx + 1] * at(y + dy, x + dx);
      out.thermal[static_cast<std::size_t>(y) * s + static_cast<std::size_t>(x)] = detail::to_byte(acc);
    }
  return out;
}

inline RenderedPair render_face(const FaceParams& p, View view, std::size_t size) {
  return render_face(p, view, size, p.glasses);
}

// ---------------------------------------------------------------- manifest

struct ManifestRecord {
  std::string visible_file;  // relative to the manifest root
  std::string thermal_file;
  int identity_id = 0;
  View view = View::front;
  std::string split = "train";
  AttributeMap attributes;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;
  std::filesystem::path root;
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::vector<ManifestRecord> records;

  std::set<int> identities(const std::string& split) const {
    std::set<int> out;
    for (const auto& r : records)
      if (r.split == split) out.insert(r.identity_id);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records)
      recs.push_back({{"visible_file", r.visible_file},
                      {"thermal_file", r.thermal_file},
                      {"identity_id", r.identity_id},
                      {"view", to_string(r.view)},
                      {"split", r.split},
                      {"attributes", r.attributes}});
    return {{"schema_version", kSchemaVersion}, {"seed", seed}, {"image_size", image_size}, {"records", recs}};
  }

  void save(const std::filesystem::path& file) const {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write manifest " + file.string());
    out << to_json().dump(2) << '\n';
  }
};

class ManifestError : public std::runtime_error {
 public:
  ManifestError(const std::string& msg, long record = -1) : std::runtime_error(msg), record_index(record) {}
  long record_index;
};

inline void check_disjoint_splits(const DatasetManifest& m) {
  const auto train = m.identities("train"), test = m.identities("test");
  for (int id : train)
    if (test.count(id)) throw ManifestError("identity " + std::to_string(id) + " appears in both train and test splits");
}

// Parses and validates a manifest; every referenced file must exist.
inline DatasetManifest load_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ManifestError("cannot open manifest " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("manifest " + file.string() + " is not valid JSON: " + e.what());
  }
  if (!j.contains("schema_version") || j["schema_version"] != DatasetManifest::kSchemaVersion)
    throw ManifestError("unsupported manifest schema version in " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  m.seed = j.value("seed", std::uint64_t{0});
  m.image_size = j.value("image_size", std::size_t{64});
  long idx = 0;
  for (const auto& r : j.at("records")) {
    ManifestRecord rec;
    try {
      rec.visible_file = r.at("visible_file").get<std::string>();
      rec.thermal_file = r.at("thermal_file").get<std::string>();
      rec.identity_id = r.at("identity_id").get<int>();
      rec.view = parse_view(r.at("view").get<std::string>());
      rec.split = r.value("split", std::string("train"));
      if (r.contains("attributes")) rec.attributes = r["attributes"].get<AttributeMap>();
    } catch (const std::exception& e) {
      throw ManifestError("record " + std::to_string(idx) + " is malformed: " + e.what(), idx);
    }
    for (const auto& f : {rec.visible_file, rec.thermal_file})
      if (!std::filesystem::exists(m.root / f))
        throw ManifestError("record " + std::to_string(idx) + " references missing file " + (m.root / f).string(), idx);
    m.records.push_back(std::move(rec));
    ++idx;
  }
  check_disjoint_splits(m);
  return m;
}

struct SyntheticDataConfig {
  std::size_t n_identities = 142;
  std::size_t n_test_identities = 42;  // the last ids form the test split
  std::size_t image_size = 64;
  std::vector<View> views{kAllViews.begin(), kAllViews.end()};
  std::uint64_t seed = 0;
};

inline FaceParams identity_params(std::uint64_t seed, int identity_id) {
  Rng rng(derive_seed(seed, "identity", static_cast<std::uint64_t>(identity_id)));
  return sample_face(rng);
}

// Writes root/{train,test}/{id}/{view}_{vis|thm}.png plus root/manifest.json.
inline DatasetManifest generate_synthetic_dataset(const std::filesystem::path& root, const SyntheticDataConfig& cfg) {
  if (cfg.image_size == 0 || cfg.image_size % 8) throw std::invalid_argument("image size must be a positive multiple of 8");
  if (cfg.n_test_identities > cfg.n_identities) throw std::invalid_argument("more test identities than identities");
  if (cfg.views.empty()) throw std::invalid_argument("no views requested");
  DatasetManifest m;
  m.root = root;
  m.seed = cfg.seed;
  m.image_size = cfg.image_size;
  const std::size_t n_train = cfg.n_identities - cfg.n_test_identities;
  for (std::size_t id = 0; id < cfg.n_identities; ++id) {
    const FaceParams p = identity_params(cfg.seed, static_cast<int>(id));
    const std::string split = id < n_train ? "train" : "test";
    const std::filesystem::path rel = std::filesystem::path(split) / std::to_string(id);
    std::filesystem::create_directories(root / rel);
    for (View v : cfg.views) {
      const auto pair = render_face(p, v, cfg.image_size);
      ManifestRecord r;
      r.visible_file = (rel / (to_string(v) + "_vis.png")).string();
      r.thermal_file = (rel / (to_string(v) + "_thm.png")).string();
      r.identity_id = static_cast<int>(id);
      r.view = v;
      r.split = split;
      r.attributes = p.attributes();
      write_png(root / r.visible_file, pair.visible);
      write_png(root / r.thermal_file, pair.thermal);
      m.records.push_back(std::move(r));
    }
  }
  check_disjoint_splits(m);
  m.save(root / "manifest.json");
  return m;
}

// ---------------------------------------------------------------- samples and batches

template <class T = float>
struct PairedSample {
  Tensor<T> visible;  // (3, H, W) in [-1, 1]
  Tensor<T> thermal;  // (1, H, W) in [-1, 1]
  int identity_id = 0;
  View view = View::front;
  AttributeMap attributes;
};

template <class T = float>
PairedSample<T> load_sample(const DatasetManifest& m, std::size_t index) {
  const auto& r = m.records.at(index);
  PairedSample<T> s;
  try {
    s.visible = normalize<T>(read_png(m.root / r.visible_file));
    s.thermal = normalize<T>(read_png(m.root / r.thermal_file));
  } catch (const ImageIoError& e) {
    throw ManifestError("record " + std::to_string(index) + ": " + e.what(), static_cast<long>(index));
  }
  if (s.visible.dim(0) == 1) s.visible = replicate_to_rgb(s.visible);
  if (s.thermal.dim(0) == 3) s.thermal = channel_mean(s.thermal);
  if (s.visible.dim(1) != s.thermal.dim(1) || s.visible.dim(2) != s.thermal.dim(2))
    throw ManifestError("record " + std::to_string(index) + ": visible and thermal sizes differ", static_cast<long>(index));
  s.identity_id = r.identity_id;
  s.view = r.view;
  s.attributes = r.attributes;
  return s;
}

template <class T = float>
std::vector<PairedSample<T>> load_split(const DatasetManifest& m, const std::string& split) {
  std::vector<PairedSample<T>> out;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (split.empty() || m.records[i].split == split) out.push_back(load_sample<T>(m, i));
  return out;
}

// Record indices of a split grouped into batches; a non-zero shuffle seed permutes them first.
inline std::vector<std::vector<std::size_t>> batch_indices(const DatasetManifest& m, const std::string& split,
                                                           std::size_t batch_size, std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (split.empty() || m.records[i].split == split) idx.push_back(i);
  if (shuffle_seed) {
    Rng rng(shuffle_seed);
    std::shuffle(idx.begin(), idx.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch_size)
    out.emplace_back(idx.begin() + static_cast<long>(i), idx.begin() + static_cast<long>(std::min(idx.size(), i + batch_size)));
  return out;
}

template <class T = float>
std::vector<std::vector<PairedSample<T>>> load_batches(const DatasetManifest& m, const std::string& split,
                                                       std::size_t batch_size, std::uint64_t shuffle_seed) {
  std::vector<std::vector<PairedSample<T>>> out;
  for (const auto& b : batch_indices(m, split, batch_size, shuffle_seed)) {
    auto& batch = out.emplace_back();
    for (std::size_t i : b) batch.push_back(load_sample<T>(m, i));
  }
  return out;
}

}  // namespace lapig
