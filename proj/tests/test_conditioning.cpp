#include <gtest/gtest.h>

#include <thread>

#include "lapig/conditioning.hpp"

using namespace lapig;

namespace {

TextEncoderConfig small_text_config() {
  TextEncoderConfig c;
  c.token_dim = 512;
  c.layers = 2;
  c.max_len = 248;
  c.ffn_hidden = 64;
  return c;
}

Tensor<float> random_token(std::uint64_t seed, std::size_t dim = 512) {
  Rng rng(seed);
  return pad_identity(randn<float>({512}, rng), dim);
}

// Serves the caption endpoint on a free port for the lifetime of the object.
class MockCaptioner {
 public:
  explicit MockCaptioner(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/caption", handler);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockCaptioner() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/caption"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

ByteImage tiny_image() {
  ByteImage im({3, 8, 8});
  for (std::size_t i = 0; i < im.size(); ++i) im[i] = static_cast<std::uint8_t>(i);
  return im;
}

}  // namespace

TEST(CaptionTemplate, FixedOpening) {
  const auto c = caption_from_template({{"age_band", "adult"}, {"gender", "male"}, {"glasses", "true"}, {"beard", "true"}});
  EXPECT_EQ(c.text.rfind("An adult man wearing glasses, with a beard, ", 0), 0u) << c.text;
  EXPECT_EQ(c.source, CaptionSource::template_engine);
  EXPECT_GE(Tokenizer().encode_words(c.text).size(), 30u);
}

TEST(CaptionTemplate, AbsentAccessoriesAreNotMentioned) {
  const auto c = caption_from_template({{"age_band", "adult"}, {"gender", "female"}});
  EXPECT_EQ(c.text.find("glasses"), std::string::npos);
  EXPECT_EQ(c.text.find("beard"), std::string::npos);
  EXPECT_GE(Tokenizer().encode_words(c.text).size(), 30u);
}

TEST(CaptionTemplate, PureFunctionOfAttributes) {
  Rng rng(1);
  const std::vector<std::string> ages{"young", "adult", "middle-aged", "senior"};
  for (int t = 0; t < 40; ++t) {
    FaceParams p = sample_face(rng);
    AttributeMap a = p.attributes();
    const auto c1 = caption_from_template(a), c2 = caption_from_template(a);
    EXPECT_EQ(c1.text, c2.text);
    EXPECT_FALSE(c1.text.empty());
    EXPECT_EQ(c1.text.find("glasses") != std::string::npos, p.glasses);
    EXPECT_EQ(c1.text.find("beard") != std::string::npos, p.beard);
    EXPECT_GE(Tokenizer().encode_words(c1.text).size(), 30u);
  }
}

TEST(CaptionTemplate, MissingMandatoryAttribute) {
  EXPECT_THROW(caption_from_template({{"gender", "male"}}), std::invalid_argument);
  EXPECT_THROW(caption_from_template({{"age_band", "adult"}}), std::invalid_argument);
}

TEST(Prompt, ViewPrefix) {
  Caption c{"A man.", CaptionSource::external_service, {}};
  EXPECT_EQ(customize_prompt(View::front, c), "a front-facing portrait photo of the person. A man.");
  std::set<std::string> prompts;
  for (View v : kAllViews) {
    const auto p = customize_prompt(v, c);
    prompts.insert(p);
    EXPECT_EQ(p.substr(p.size() - c.text.size()), c.text);
    EXPECT_EQ(customize_prompt(v, c), p);
  }
  EXPECT_EQ(prompts.size(), 4u);
}

TEST(Tokenizer, MarkersVocabularyAndFallback) {
  Tokenizer tok;
  const auto seq = tokenize(tok, "A man, wearing glasses.", 248);
  ASSERT_EQ(seq.ids.size(), 2u + 6u);
  EXPECT_EQ(seq.ids.front(), Tokenizer::kBos);
  EXPECT_EQ(seq.ids.back(), Tokenizer::kEos);
  for (auto id : seq.ids) EXPECT_LT(id, tok.vocab_size());
  const auto odd = tok.encode_words("zq");
  EXPECT_EQ(odd, (std::vector<std::size_t>{Tokenizer::kByteBase + 'z', Tokenizer::kByteBase + 'q'}));
  EXPECT_FALSE(seq.truncated);
}

TEST(TextEncoder, MinimalSequence) {
  TextEncoder<float> enc(small_text_config(), 2);
  const auto e = encode_text("", random_token(3), enc);
  EXPECT_EQ(e.sequence_length(), 3u);
  EXPECT_EQ(e.embeddings.shape(), (Shape{3, 512}));
}

TEST(TextEncoder, SequenceLengthIsTokensPlusOne) {
  TextEncoder<float> enc(small_text_config(), 2);
  const std::string prompt = customize_prompt(View::left, caption_from_template({{"age_band", "senior"}, {"gender", "female"}}));
  const auto e = encode_text(prompt, random_token(3), enc);
  EXPECT_EQ(e.sequence_length(), e.tokens.ids.size() + 1);
  EXPECT_FALSE(e.truncated());
}

TEST(TextEncoder, DeterministicAndIdentitySensitive) {
  TextEncoder<float> enc(small_text_config(), 4);
  const std::string prompt = "a front-facing portrait photo of the person. A man.";
  const auto a = encode_text(prompt, random_token(5), enc).embeddings.value();
  EXPECT_EQ(encode_text(prompt, random_token(5), enc).embeddings.value(), a);
  const auto b = encode_text(prompt, random_token(6), enc).embeddings.value();
  EXPECT_GT(max_abs_diff(a, b), 0.0f);
  const auto z = encode_text(prompt, Tensor<float>({512}), enc).embeddings.value();
  EXPECT_GT(max_abs_diff(a, z), 0.0f);
}

TEST(TextEncoder, IdentityTokenSitsAfterBegin) {
  // With no layers the output is the layer-normalised input, so the slot
  // after the begin marker is a function of the identity token alone.
  auto cfg = small_text_config();
  cfg.layers = 0;
  TextEncoder<double> enc(cfg, 7);
  Rng rng(8);
  Tensor<double> id = pad_identity(randn<double>({512}, rng), 512);
  const auto e = encode_text("A man.", id, enc);
  EXPECT_EQ(e.identity_position, 1u);
  double mean = 0, var = 0;
  for (double v : id.values()) mean += v / 512;
  for (double v : id.values()) var += (v - mean) * (v - mean) / 512;
  for (std::size_t j = 0; j < 512; ++j)
    EXPECT_NEAR(e.embeddings.value()[512 + j], (id[j] - mean) / std::sqrt(var + 1e-5), 1e-9);
}

TEST(TextEncoder, LongPromptTruncatedWithFlag) {
  TextEncoder<float> enc(small_text_config(), 9);
  std::string prompt;
  for (int i = 0; i < 300; ++i) prompt += "face ";
  const auto e = encode_text(prompt, random_token(10), enc);
  EXPECT_TRUE(e.truncated());
  EXPECT_EQ(e.sequence_length(), 248u);
}

TEST(TextEncoder, RejectsSmallTokenDim) {
  auto cfg = small_text_config();
  cfg.token_dim = 256;
  EXPECT_THROW(TextEncoder<float>(cfg, 1), std::invalid_argument);
}

TEST(CaptionService, EchoesMockCaption) {
  std::string seen_prompt;
  bool had_image = false;
  MockCaptioner mock([&](const httplib::Request& req, httplib::Response& res) {
    auto j = nlohmann::json::parse(req.body);
    seen_prompt = j["prompt"];
    had_image = !j["image"].get<std::string>().empty();
    res.set_content(nlohmann::json{{"caption", "A man."}, {"id", j["id"]}}.dump(), "application/json");
  });
  const auto c = caption_from_service(tiny_image(), {mock.url(), 2000});
  EXPECT_EQ(c.text, "A man.");
  EXPECT_EQ(c.source, CaptionSource::external_service);
  EXPECT_EQ(seen_prompt, caption_instruction());
  EXPECT_TRUE(had_image);
}

TEST(CaptionService, InvalidJsonIsProtocolErrorWithBody) {
  MockCaptioner mock([](const httplib::Request&, httplib::Response& res) { res.set_content("<html>oops", "text/html"); });
  try {
    caption_from_service(tiny_image(), {mock.url(), 2000});
    FAIL();
  } catch (const CaptionProtocolError& e) {
    EXPECT_EQ(e.raw_body, "<html>oops");
    EXPECT_FALSE(e.retriable());
  }
}

TEST(CaptionService, MismatchedCorrelationIdRejected) {
  MockCaptioner mock([](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"caption":"A man.","id":"someone-else"})", "application/json");
  });
  EXPECT_THROW(caption_from_service(tiny_image(), {mock.url(), 2000}), CaptionProtocolError);
}

TEST(CaptionService, TimeoutIsRetriable) {
  MockCaptioner mock([](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    res.set_content(R"({"caption":"late"})", "application/json");
  });
  try {
    caption_from_service(tiny_image(), {mock.url(), 150});
    FAIL();
  } catch (const CaptionTimeoutError& e) {
    EXPECT_TRUE(e.retriable());
  }
}

TEST(CaptionService, UnreachableFallsBackToTemplate) {
  // Grab a free port, then close it so nothing listens there.
  std::string url;
  {
    httplib::Server s;
    const int port = s.bind_to_any_port("127.0.0.1");
    url = "http://127.0.0.1:" + std::to_string(port) + "/caption";
  }
  AttributeMap attrs{{"age_band", "young"}, {"gender", "female"}};
  std::string why;
  const auto c = caption_with_fallback(tiny_image(), {url, 300}, attrs, &why);
  EXPECT_EQ(c.source, CaptionSource::template_engine);
  EXPECT_EQ(c.text, caption_from_template(attrs).text);
  EXPECT_FALSE(why.empty());
  EXPECT_THROW(caption_with_fallback(tiny_image(), {url, 300}, std::nullopt), CaptionServiceError);
}

TEST(CaptionService, ManyInFlightKeepOrder) {
  std::atomic<int> calls{0};
  MockCaptioner mock([&](const httplib::Request& req, httplib::Response& res) {
    auto j = nlohmann::json::parse(req.body);
    ++calls;
    // Caption carries the encoded size so order can be checked.
    const std::string b64 = j["image"];
    res.set_content(nlohmann::json{{"caption", "len " + std::to_string(b64.size())}, {"id", j["id"]}}.dump(), "application/json");
  });
  std::vector<ByteImage> images;
  for (std::size_t s : {8u, 16u, 24u, 32u, 40u}) images.emplace_back(Shape{3, s, s});
  std::vector<std::optional<AttributeMap>> fb(images.size());
  const auto caps = caption_many(images, {mock.url(), 2000}, fb, 3);
  ASSERT_EQ(caps.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_EQ(caps[i].text, "len " + std::to_string(base64_encode(encode_png(images[i])).size()));
  EXPECT_EQ(calls.load(), 5);
}
