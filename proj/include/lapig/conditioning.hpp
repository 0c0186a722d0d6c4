#pragma once

// Captions, view prompts, tokenisation and the text encoder that turns a
// prompt plus an identity token into the cross-attention context.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lapig/data.hpp"
#include "lapig/identity.hpp"
#include "lapig/image_io.hpp"
#include "lapig/nn.hpp"

// After Eigen: <resolv.h> defines a _res macro that collides with Eigen parameter names.
#include "httplib.h"

namespace lapig {

// ---------------------------------------------------------------- captions

enum class CaptionSource { template_engine, external_service };

inline std::string to_string(CaptionSource s) { return s == CaptionSource::template_engine ? "template" : "external_service"; }

struct Caption {
  std::string text;
  CaptionSource source = CaptionSource::template_engine;
  AttributeMap attributes;
};

namespace detail {

inline bool flag_set(const AttributeMap& a, const std::string& key) {
  auto it = a.find(key);
  return it != a.end() && (it->second == "true" || it->second == "yes" || it->second == "1");
}

}  // namespace detail

inline Caption caption_from_template(const AttributeMap& attributes) {
  for (const char* key : {"age_band", "gender"})
    if (!attributes.count(key)) throw std::invalid_argument(std::string("caption template needs attribute '") + key + "'");
  const std::string& age = attributes.at("age_band");
  const std::string& gender = attributes.at("gender");
  bool male;
  if (gender == "male" || gender == "man")
    male = true;
  else if (gender == "female" || gender == "woman")
    male = false;
  else
    throw std::invalid_argument("unknown gender '" + gender + "'");
  static const std::map<std::string, std::string> ages{
      {"young", "A young"}, {"adult", "An adult"}, {"middle-aged", "A middle-aged"}, {"senior", "A senior"}};
  auto a = ages.find(age);
  if (a == ages.end()) throw std::invalid_argument("unknown age band '" + age + "'");
  const std::string he = male ? "He" : "She", his = male ? "his" : "her", His = male ? "His" : "Her";

  std::string text = a->second + (male ? " man" : " woman");
  const bool glasses = detail::flag_set(attributes, "glasses"), beard = detail::flag_set(attributes, "beard");
  if (glasses) text += " wearing glasses,";
  if (beard) text += " with a beard,";
  text += " looks straight at the camera.";
  std::vector<std::string> traits;
  if (auto h = attributes.find("hair"); h != attributes.end()) {
    std::istringstream is(h->second);
    std::string color, length;
    is >> color >> length;
    traits.push_back((length.empty() ? "" : length + " ") + color + " hair");
  }
  if (auto e = attributes.find("expression"); e != attributes.end()) traits.push_back("a " + e->second + " expression");
  if (!traits.empty()) {
    text += " " + he + " has " + traits[0];
    for (std::size_t i = 1; i < traits.size(); ++i) text += " and " + traits[i];
    text += ".";
  }
  text += " " + His + " face is evenly lit against a plain background, and " + his +
          " eyes, nose and mouth are clearly visible in the portrait.";
  return {text, CaptionSource::template_engine, attributes};
}

// ---------------------------------------------------------------- prompts

using ViewPrefixes = std::map<View, std::string>;

inline const ViewPrefixes& default_view_prefixes() {
  static const ViewPrefixes p{{View::front, "a front-facing portrait photo of the person. "},
                              {View::left, "a portrait photo of the person turned to the left. "},
                              {View::right, "a portrait photo of the person turned to the right. "},
                              {View::up, "a portrait photo of the person looking upward. "}};
  return p;
}

inline std::string customize_prompt(View view, const Caption& caption, const ViewPrefixes& prefixes = default_view_prefixes()) {
  return prefixes.at(view) + caption.text;
}

// ---------------------------------------------------------------- tokenizer

// Word and punctuation tokens over a fixed vocabulary, with a byte fallback
// for anything outside it.
class Tokenizer {
 public:
  static constexpr std::size_t kBos = 0, kEos = 1, kByteBase = 2, kWordBase = kByteBase + 256;

  Tokenizer() {
    static const char* words[] = {
        "a", "an", "the", "of", "and", "to", "in", "at", "with", "is", "are", "has", "his", "her", "he", "she",
        "person", "portrait", "photo", "front-facing", "turned", "left", "right", "looking", "upward", "young",
        "adult", "middle-aged", "senior", "man", "woman", "wearing", "glasses", "beard", "looks", "straight",
        "camera", "hair", "short", "long", "black", "brown", "blond", "red", "gray", "expression", "neutral",
        "smiling", "serious", "face", "evenly", "lit", "against", "plain", "background", "eyes", "nose", "mouth",
        "clearly", "visible", "thermal", "image", "visible-light", "warm", "cold", "skin", ".", ",", "'", "-",
        "!", "?", ";", ":"};
    for (const char* w : words) add_word(w);
  }

  std::size_t vocab_size() const { return kWordBase + words_.size(); }

  // Lower-cased words (letters, digits, inner hyphens) and single punctuation marks.
  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isalnum(c) || (c == '-' && !cur.empty() && i + 1 < text.size() && std::isalnum(static_cast<unsigned char>(text[i + 1])))) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (std::isspace(c)) {
        flush();
      } else {
        flush();
        out.emplace_back(1, static_cast<char>(c));
      }
    }
    flush();
    return out;
  }

  // Ids without the begin/end markers.
  std::vector<std::size_t> encode_words(const std::string& text) const {
    std::vector<std::size_t> ids;
    for (const auto& w : split(text)) {
      auto it = index_.find(w);
      if (it != index_.end()) {
        ids.push_back(it->second);
      } else {
        for (unsigned char b : w) ids.push_back(kByteBase + b);
      }
    }
    return ids;
  }

 private:
  void add_word(const std::string& w) {
    index_.emplace(w, kWordBase + words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TokenSequence {
  std::vector<std::size_t> ids;  // begin marker, text, end marker
  std::size_t max_len = 248;
  bool truncated = false;
};

// Fits the markers, the text and `reserved` extra slots into max_len.
inline TokenSequence tokenize(const Tokenizer& tok, const std::string& text, std::size_t max_len, std::size_t reserved = 1) {
  if (max_len < reserved + 2) throw std::invalid_argument("max_len too small for the sequence markers");
  TokenSequence seq;
  seq.max_len = max_len;
  auto words = tok.encode_words(text);
  const std::size_t room = max_len - reserved - 2;
  if (words.size() > room) {
    words.resize(room);
    seq.truncated = true;
  }
  seq.ids.push_back(Tokenizer::kBos);
  seq.ids.insert(seq.ids.end(), words.begin(), words.end());
  seq.ids.push_back(Tokenizer::kEos);
  return seq;
}

// ---------------------------------------------------------------- text encoder

struct TextEncoderConfig {
  std::size_t token_dim = 640;
  std::size_t layers = 2;
  std::size_t max_len = 248;
  std::size_t ffn_hidden = 640;

  nlohmann::json to_json() const {
    return {{"token_dim", token_dim}, {"layers", layers}, {"max_len", max_len}, {"ffn_hidden", ffn_hidden}};
  }
  static TextEncoderConfig from_json(const nlohmann::json& j) {
    TextEncoderConfig c;
    c.token_dim = j.at("token_dim");
    c.layers = j.at("layers");
    c.max_len = j.at("max_len");
    c.ffn_hidden = j.at("ffn_hidden");
    return c;
  }
};

template <class T>
struct ConditioningEmbedding {
  Var<T> embeddings;  // (sequence_length, token_dim)
  TokenSequence tokens;
  std::size_t identity_position = 1;
  bool truncated() const { return tokens.truncated; }
  std::size_t sequence_length() const { return embeddings.shape()[0]; }
};

template <class T>
class TextEncoder {
 public:
  TextEncoder(TextEncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.token_dim < kIdentityDim) throw std::invalid_argument("token_dim must be at least the identity dimension");
    Rng rng(seed);
    const std::size_t d = cfg_.token_dim;
    tok_ = params_.add("token_embedding", randn<T>({tokenizer_.vocab_size(), d}, rng, 0.02));
    pos_ = params_.add("position_embedding", randn<T>({cfg_.max_len, d}, rng, 0.02));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string n = "layer" + std::to_string(l);
      Layer L;
      L.ln1 = LayerNorm<T>(params_, n + ".ln1", d);
      L.q = Linear<T>(params_, n + ".q", d, d, rng);
      L.k = Linear<T>(params_, n + ".k", d, d, rng);
      L.v = Linear<T>(params_, n + ".v", d, d, rng);
      L.o = Linear<T>(params_, n + ".o", d, d, rng);
      L.ln2 = LayerNorm<T>(params_, n + ".ln2", d);
      L.ff1 = Linear<T>(params_, n + ".ff1", d, cfg_.ffn_hidden, rng);
      L.ff2 = Linear<T>(params_, n + ".ff2", cfg_.ffn_hidden, d, rng);
      layers_.push_back(L);
    }
    final_ = LayerNorm<T>(params_, "final_ln", d);
  }

  const TextEncoderConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  // Identity token goes in right after the begin marker, verbatim; text
  // tokens get learned token and position embeddings.
  ConditioningEmbedding<T> encode(const std::string& prompt, const Tensor<T>& id_token) const {
    if (id_token.rank() != 1 || id_token.size() != cfg_.token_dim)
      throw ShapeError("identity token must have token_dim " + std::to_string(cfg_.token_dim) + " entries");
    ConditioningEmbedding<T> out;
    out.tokens = tokenize(tokenizer_, prompt, cfg_.max_len, 1);
    std::vector<std::size_t> ids = out.tokens.ids;
    const std::size_t d = cfg_.token_dim, n = ids.size();
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i < 1 ? i : i + 1;
    Var<T> text = add(embedding(tok_, ids), embedding(pos_, positions));
    Var<T> x = concat<T>({slice(text, 0, 1), constant(id_token.reshaped({1, d})), slice(text, 1, n)});
    for (const auto& L : layers_) x = block(L, x);
    out.embeddings = final_(x);
    return out;
  }

 private:
  struct Layer {
    LayerNorm<T> ln1, ln2;
    Linear<T> q, k, v, o, ff1, ff2;
  };

  Var<T> block(const Layer& L, const Var<T>& x) const {
    const T inv = T(1) / std::sqrt(static_cast<T>(cfg_.token_dim));
    Var<T> h = L.ln1(x);
    Var<T> att = softmax_rows(scale(matmul(L.q(h), L.k(h), false, true), inv));
    Var<T> y = add(x, L.o(matmul(att, L.v(h))));
    return add(y, L.ff2(silu(L.ff1(L.ln2(y)))));
  }

  TextEncoderConfig cfg_;
  Tokenizer tokenizer_;
  ParameterSet<T> params_;
  Var<T> tok_, pos_;
  std::vector<Layer> layers_;
  LayerNorm<T> final_;
};

template <class T>
ConditioningEmbedding<T> encode_text(const std::string& prompt, const Tensor<T>& id_token, const TextEncoder<T>& encoder) {
  return encoder.encode(prompt, id_token);
}

// ---------------------------------------------------------------- captioning service

class CaptionServiceError : public std::runtime_error {
 public:
  CaptionServiceError(const std::string& msg, bool retriable) : std::runtime_error(msg), retriable_(retriable) {}
  bool retriable() const { return retriable_; }

 private:
  bool retriable_;
};

class CaptionTimeoutError : public CaptionServiceError {
 public:
  explicit CaptionTimeoutError(const std::string& msg) : CaptionServiceError(msg, true) {}
};

class CaptionProtocolError : public CaptionServiceError {
 public:
  CaptionProtocolError(const std::string& msg, std::string raw_body)
      : CaptionServiceError(msg, false), raw_body(std::move(raw_body)) {}
  std::string raw_body;
};

inline const std::string& caption_instruction() {
  static const std::string s =
      "Describe the person's age, gender, facial features, hair, accessories and expression in detail.";
  return s;
}

struct CaptionServiceConfig {
  std::string url;  // http://host:port/path
  int timeout_ms = 10000;
};

namespace detail {

struct ParsedUrl {
  std::string origin;  // scheme://host:port
  std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("captioner URL needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

inline std::atomic<std::uint64_t>& correlation_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

}  // namespace detail

// One request/response exchange. The response must echo the request id.
inline Caption caption_from_service(const ByteImage& image, const CaptionServiceConfig& cfg) {
  const auto url = detail::parse_url(cfg.url);
  const std::string id = "req-" + std::to_string(++detail::correlation_counter());
  nlohmann::json req{{"image", base64_encode(encode_png(image))}, {"prompt", caption_instruction()}, {"id", id}};
  httplib::Client cli(url.origin);
  const auto secs = std::chrono::milliseconds(cfg.timeout_ms);
  cli.set_connection_timeout(secs);
  cli.set_read_timeout(secs);
  cli.set_write_timeout(secs);
  auto res = cli.Post(url.path, req.dump(), "application/json");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read)
      throw CaptionTimeoutError("captioner timed out after " + std::to_string(cfg.timeout_ms) + " ms (" + httplib::to_string(err) + ")");
    throw CaptionServiceError("captioner unreachable at " + cfg.url + ": " + httplib::to_string(err), true);
  }
  if (res->status != 200) throw CaptionServiceError("captioner returned HTTP " + std::to_string(res->status), res->status >= 500);
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception&) {
    throw CaptionProtocolError("captioner response is not JSON", res->body);
  }
  if (!body.is_object() || !body.contains("caption") || !body["caption"].is_string() || body["caption"].get<std::string>().empty())
    throw CaptionProtocolError("captioner response lacks a non-empty 'caption' string", res->body);
  if (body.contains("id") && body["id"] != id)
    throw CaptionProtocolError("captioner response id does not match request " + id, res->body);
  return {body["caption"].get<std::string>(), CaptionSource::external_service, {}};
}

// Service caption, or the template caption when the service fails and a fallback is given.
inline Caption caption_with_fallback(const ByteImage& image, const CaptionServiceConfig& cfg,
                                     const std::optional<AttributeMap>& fallback, std::string* failure = nullptr) {
  try {
    Caption c = caption_from_service(image, cfg);
    if (fallback) c.attributes = *fallback;
    return c;
  } catch (const CaptionServiceError& e) {
    if (!fallback) throw;
    if (failure) *failure = e.what();
    return caption_from_template(*fallback);
  }
}

// Several requests in flight at once; results come back in input order.
inline std::vector<Caption> caption_many(const std::vector<ByteImage>& images, const CaptionServiceConfig& cfg,
                                         const std::vector<std::optional<AttributeMap>>& fallbacks, std::size_t in_flight = 4) {
  if (fallbacks.size() != images.size()) throw std::invalid_argument("one fallback slot per image");
  std::vector<Caption> out(images.size());
  for (std::size_t b = 0; b < images.size(); b += std::max<std::size_t>(in_flight, 1)) {
    std::vector<std::future<Caption>> jobs;
    const std::size_t e = std::min(images.size(), b + std::max<std::size_t>(in_flight, 1));
    for (std::size_t i = b; i < e; ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] { return caption_with_fallback(images[i], cfg, fallbacks[i]); }));
    for (std::size_t i = b; i < e; ++i) out[i] = jobs[i - b].get();
  }
  return out;
}

}  // namespace lapig
