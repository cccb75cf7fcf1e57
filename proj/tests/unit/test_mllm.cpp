// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <atomic>
#include <chrono>
#include <thread>

#include <json.hpp>

#include "mcbm/concept_set.hpp"
#include "mcbm/error.hpp"
#include "mcbm/image.hpp"
#include "mcbm/mllm.hpp"
#include "test_util.hpp"

using namespace mcbm;

namespace {

/// Counts calls and forwards to a mock.
class Counting : public MllmBackend {
 public:
  explicit Counting(MockConfig cfg) : mock_(std::move(cfg)) {}
  std::string chat(const ChatRequest& r) override {
    ++chats;
    last = r;
    return mock_.chat(r);
  }
  std::vector<std::vector<double>> embed(const std::string& m,
                                         const std::vector<std::string>& in) override {
    ++embeds;
    return mock_.embed(m, in);
  }
  int chats = 0;
  int embeds = 0;
  ChatRequest last;

 private:
  MockBackend mock_;
};

MockConfig oracle_config(int64_t n = 40) {
  MockConfig cfg;
  cfg.oracle = Mat::Zero(n, 2);
  for (int64_t i = 0; i < n; ++i) {
    cfg.oracle(i, 0) = i % 2;
    cfg.oracle(i, 1) = i % 3 == 0;
  }
  cfg.oracle_names = {"red crown patch", "white eyebrow stripe"};
  return cfg;
}

NamingInput naming_input(int64_t concept_id) {
  NamingInput in;
  in.examples.concept_id = concept_id;
  for (int64_t i = 0; i < 10; ++i) in.examples.activating.push_back(3 * i);
  in.examples.nonactive_similar = {1, 2, 4, 5, 7};
  in.examples.nonactive_random = {8, 10, 11, 13, 14};
  in.activating_png.assign(10, "A");
  in.nonactive_png.assign(10, "N");
  return in;
}

const std::vector<std::string> kClasses = {"alder warbler", "birch finch"};

struct GridFixture {
  testing::TempDir dir;
  Grid grid;
  GridFixture() {
    Image img(6, 6);
    testing::spit(dir / "x.png", encode_png(img));
    std::vector<std::filesystem::path> paths(25, dir / "x.png");
    std::vector<int64_t> ids;
    for (int i = 0; i < 25; ++i) ids.push_back(i + 5);
    grid = compose_grid(paths, ids, 16);
  }
};

std::string marks(int n) {
  std::string out;
  for (int i = 1; i <= n; ++i) out += std::to_string(i) + ": no\n";
  return out;
}

}  // namespace

TEST_SUITE("mllm") {
  TEST_CASE("naming accepts a clean canned reply") {
    MockConfig cfg = oracle_config();
    cfg.naming_replies[0] = {"white eyebrow stripe"};
    Counting backend(cfg);
    const NameResult r = name_concept(backend, naming_input(0), "bird species", kClasses,
                                      load_prompts(default_prompt_dir()), NamingConfig{});
    CHECK(r.name == std::optional<std::string>("white eyebrow stripe"));
    CHECK(r.attempts == 1);
    CHECK(backend.chats == 1);
  }

  TEST_CASE("a class-name reply triggers exactly one retry") {
    MockConfig cfg = oracle_config();
    cfg.naming_replies[2] = {"Birch Finch", "white eyebrow stripe"};
    Counting backend(cfg);
    const NameResult r = name_concept(backend, naming_input(2), "bird species", kClasses,
                                      load_prompts(default_prompt_dir()), NamingConfig{});
    CHECK(r.name == std::optional<std::string>("white eyebrow stripe"));
    CHECK(r.attempts == 2);
    REQUIRE(r.violations.size() == 1);
    CHECK(r.violations[0].find("birch finch") != std::string::npos);
    CHECK(backend.last.parts.back().text.find("Birch Finch") != std::string::npos);
  }

  TEST_CASE("two empty replies leave the concept unnamed") {
    MockConfig cfg = oracle_config();
    cfg.naming_replies[1] = {"", ""};
    Counting backend(cfg);
    NamingConfig nc;
    nc.max_retries = 1;
    const NameResult r = name_concept(backend, naming_input(1), "bird species", kClasses,
                                      load_prompts(default_prompt_dir()), nc);
    CHECK_FALSE(r.name.has_value());
    CHECK(r.attempts == 2);
    CHECK(backend.chats == 2);
  }

  TEST_CASE("the oracle names the column that separates the examples") {
    Counting backend(oracle_config());
    const NameResult r = name_concept(backend, naming_input(4), "bird species", kClasses,
                                      load_prompts(default_prompt_dir()), NamingConfig{});
    CHECK(r.name == std::optional<std::string>("white eyebrow stripe"));
  }

  TEST_CASE("naming rules") {
    CHECK(naming_violation("  white eyebrow stripe. ", kClasses, 12).empty());
    CHECK_FALSE(naming_violation("", kClasses, 12).empty());
    CHECK_FALSE(naming_violation("a b c d e f g h i j k l m", kClasses, 12).empty());
    CHECK_FALSE(naming_violation("crest of an alder warbler", kClasses, 12).empty());
    CHECK(naming_violation("birchy crest", kClasses, 12).empty());
  }

  TEST_CASE("grid replies") {
    std::string bits(25, '0');
    bits[3] = '1';
    const auto a = parse_grid_reply(bits);
    REQUIRE(a.has_value());
    CHECK((*a)[3] == 1);
    CHECK((*a)[4] == 0);
    const auto b = parse_grid_reply("Here you go:\n" + marks(25));
    REQUIRE(b.has_value());
    CHECK(std::count(b->begin(), b->end(), 0) == 25);
    CHECK_FALSE(parse_grid_reply(marks(24)).has_value());
    CHECK_FALSE(parse_grid_reply(marks(25) + "3: yes\n").has_value());
    CHECK_FALSE(parse_grid_reply(std::string(24, '1')).has_value());
    CHECK(parse_single_reply("Yes, it is") == std::optional<int>(1));
    CHECK(parse_single_reply("absent.") == std::optional<int>(0));
    CHECK_FALSE(parse_single_reply("maybe").has_value());
    CHECK(parse_annotate_mode("single") == AnnotateMode::kSingle);
    CHECK_THROWS_AS(parse_annotate_mode("both"), ValidationError);
  }

  TEST_CASE("oracle annotation is exact and mode independent") {
    GridFixture fx;
    const PromptSet prompts = load_prompts(default_prompt_dir());
    Counting backend(oracle_config());
    AnnotateConfig grid_cfg;
    const auto grid = annotate_batch(backend, 0, "white eyebrow stripe", std::string("REF"),
                                     fx.grid, prompts, grid_cfg);
    CHECK(backend.chats == 1);
    REQUIRE(grid.has_value());
    for (int i = 0; i < 25; ++i) CHECK((*grid)[static_cast<size_t>(i)] == ((i + 5) % 3 == 0));
    AnnotateConfig single_cfg;
    single_cfg.mode = AnnotateMode::kSingle;
    const auto single = annotate_batch(backend, 0, "white eyebrow stripe", std::string("REF"),
                                       fx.grid, prompts, single_cfg);
    CHECK(backend.chats == 26);
    CHECK(single == grid);
    // Each single-image request carries the reference grid and one crop.
    const auto images = std::count_if(backend.last.parts.begin(), backend.last.parts.end(),
                                      [](const ChatPart& p) { return p.is_image(); });
    CHECK(images == 2);
  }

  TEST_CASE("a reply with 24 marks is retried once and then dropped") {
    GridFixture fx;
    MockConfig cfg = oracle_config();
    cfg.annotate_replies[3] = {marks(24)};
    Counting backend(cfg);
    const auto r = annotate_batch(backend, 3, "red crown patch", std::nullopt, fx.grid,
                                  load_prompts(default_prompt_dir()), AnnotateConfig{});
    CHECK_FALSE(r.has_value());
    CHECK(backend.chats == 2);
  }

  TEST_CASE("unknown names get seeded pseudo-random annotations") {
    GridFixture fx;
    const PromptSet prompts = load_prompts(default_prompt_dir());
    MockConfig cfg = oracle_config();
    cfg.seed = 4;
    Counting a(cfg);
    Counting b(cfg);
    const auto ra = annotate_batch(a, 0, "bird pizza", std::nullopt, fx.grid, prompts, {});
    const auto rb = annotate_batch(b, 0, "bird pizza", std::nullopt, fx.grid, prompts, {});
    REQUIRE(ra.has_value());
    CHECK(ra == rb);
    const auto ones = std::count(ra->begin(), ra->end(), 1);
    CHECK(ones > 0);
    CHECK(ones < 25);
    CHECK(std::none_of(a.last.parts.begin(), a.last.parts.end(),
                       [](const ChatPart& p) { return p.is_image() && p.image == "REF"; }));
  }

  TEST_CASE("embeddings are unit length and duplicates coincide") {
    Counting backend(oracle_config());
    const auto v = embed_names(backend, {"yellow belly", "blue tail tip", "yellow belly"},
                               "bird species", load_prompts(default_prompt_dir()));
    REQUIRE(v.size() == 3);
    for (const Vec& e : v) CHECK(e.norm() == doctest::Approx(1.0));
    CHECK(v[0].dot(v[2]) == doctest::Approx(1.0));
    CHECK(v[0].dot(v[1]) < 0.98);
    CHECK_THROWS_AS(embed_names(backend, {}, "d", load_prompts(default_prompt_dir())),
                    ContractError);
  }

  TEST_CASE("merging") {
    auto unit = [](double angle) {
      Vec v(2);
      v << std::cos(angle), std::sin(angle);
      return v;
    };
    const std::vector<NamedNeuron> named = {
        {4, "red crown", 10}, {9, "crimson crown", 30}, {2, "scarlet crown", 5}, {7, "yellow belly", 8}};

    SUBCASE("distinct names stay apart") {
      const ConceptSet s = merge_concepts(named, {unit(0), unit(0.5), unit(1.0), unit(1.5)});
      CHECK(s.size() == 4);
      CHECK(s.concepts[0].neuron_ids == std::vector<int64_t>{2});
      CHECK(s.concepts[3].neuron_ids == std::vector<int64_t>{9});
      s.validate();
    }
    SUBCASE("identical embeddings merge under the most frequent name") {
      const ConceptSet s = merge_concepts(named, {unit(0), unit(0), unit(1.0), unit(1.5)});
      REQUIRE(s.size() == 3);
      const Concept& c = s.concepts[1];
      CHECK(c.neuron_ids == std::vector<int64_t>{4, 9});
      CHECK(c.name == "crimson crown");
      CHECK(c.merged_from == std::vector<std::string>{"red crown"});
    }
    SUBCASE("similarity chains merge transitively") {
      // 0.15 rad apart gives cosine 0.989; the chain ends are 0.955 apart.
      const ConceptSet s = merge_concepts(named, {unit(0), unit(0.15), unit(0.30), unit(1.5)});
      REQUIRE(s.size() == 2);
      CHECK(s.concepts[0].neuron_ids == std::vector<int64_t>{2, 4, 9});
      CHECK(s.concepts[1].neuron_ids == std::vector<int64_t>{7});
      s.validate();
    }
    SUBCASE("the threshold is strict") {
      const double angle = std::acos(0.98);
      CHECK(merge_concepts(named, {unit(0), unit(angle), unit(1.0), unit(1.5)}).size() == 4);
    }
  }

  TEST_CASE("cache replays identical payloads") {
    testing::TempDir dir;
    auto inner = std::make_shared<Counting>(oracle_config());
    CachingBackend cache(inner, dir.path());
    ChatRequest r;
    r.model = "m";
    r.parts = {ChatPart::Text("hello"), ChatPart::Png("PNGBYTES")};
    r.context.task = "annotate";
    r.context.concept_name = "red crown patch";
    r.context.samples = {1};
    const std::string first = cache.chat(r);
    const std::string second = cache.chat(r);
    CHECK(first == second);
    CHECK(inner->chats == 1);
    CHECK(cache.hits() == 1);
    CHECK(cache.misses() == 1);
    CHECK(chat_payload(r) == chat_payload(r));
    ChatRequest other = r;
    other.parts[0].text = "hello!";
    cache.chat(other);
    CHECK(inner->chats == 2);

    const auto path = dir.path() / "chat" / (sha256_hex(chat_payload(r)) + ".json");
    const auto entry = nlohmann::json::parse(testing::slurp(path));
    CHECK(entry["request"]["images"][0] == sha256_hex("PNGBYTES"));
    CHECK(entry["request"]["texts"][0] == "hello");

    const auto e1 = cache.embed("e", {"a", "b"});
    const auto e2 = cache.embed("e", {"a", "b"});
    CHECK(e1 == e2);
    CHECK(inner->embeds == 1);
  }

  TEST_CASE("payload format") {
    ChatRequest r;
    r.model = "vision-model";
    r.parts = {ChatPart::Text("look"), ChatPart::Png("abc")};
    const auto j = nlohmann::json::parse(chat_payload(r));
    CHECK(j["model"] == "vision-model");
    CHECK(j["temperature"] == 0.0);
    const auto& content = j["messages"][0]["content"];
    CHECK(content[0]["text"] == "look");
    CHECK(content[1]["image_url"]["url"] == "data:image/png;base64,YWJj");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const auto e = nlohmann::json::parse(embedding_payload("emb", {"x"}));
    CHECK(e["input"][0] == "x");
  }

  TEST_CASE("prompts") {
    const PromptSet p = load_prompts(default_prompt_dir());
    CHECK(p.naming.find("{domain}") != std::string::npos);
    CHECK(fill_template("a {x} b {x}", {{"x", "1"}}) == "a 1 b 1");
    testing::TempDir empty;
    CHECK_THROWS_AS(load_prompts(empty.path()), ValidationError);
  }

  TEST_CASE("mock config files") {
    testing::TempDir dir;
    testing::spit(dir / "names.json", R"({"columns": ["a", "b"]})");
    CHECK_THROWS_AS(load_mock_config(dir.path(), 0), ValidationError);
    testing::spit(dir / "names.json", R"({"columns": 3})");
    CHECK_THROWS_AS(load_mock_config(dir.path(), 0), ValidationError);
  }

  TEST_CASE("bounded parallel map keeps order and the concurrency bound") {
    std::atomic<int> live{0};
    std::atomic<int> peak{0};
    const auto out = bounded_parallel_map<int64_t>(40, 3, [&](int64_t i) {
      const int now = ++live;
      int seen = peak.load();
      while (now > seen && !peak.compare_exchange_weak(seen, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
      --live;
      return i * i;
    });
    REQUIRE(out.size() == 40);
    for (int64_t i = 0; i < 40; ++i) CHECK(out[static_cast<size_t>(i)] == i * i);
    CHECK(peak.load() <= 3);
  }
}
