#include <future>
#include <thread>

#include "doctest.h"
#include "medprompt/error.hpp"
#include "medprompt/experiment.hpp"
#include "medprompt/fixture.hpp"
#include "medprompt/service.hpp"
#include "support.hpp"
// after Eigen: resolv.h (pulled in by httplib) defines _res
#include "httplib.h"

using namespace medprompt;
using nlohmann::json;

namespace {

const std::string kPrompt = "round, red cyst. irregular, green nodule";
const json kSpans = json::array({{{"category", "cyst"}, {"begin", 0}, {"end", 3}},
                                  {{"category", "nodule"}, {"begin", 3}, {"end", 6}}});

ServiceResponse post(const PromptService& s, const std::string& path, const json& body) {
  return s.handle("POST", path, {}, body.dump());
}

ServiceResponse get(const PromptService& s, const std::string& path, std::map<std::string, std::string> q = {}) {
  return s.handle("GET", path, q, "");
}

}  // namespace

TEST_CASE("compose endpoint reproduces the bundled ladder rows") {
  testing::TempDir dir("svc-compose");
  const auto fx = write_synthetic_fixture(dir.path());
  const PromptService svc(fx.root);

  const json blood = {
      {"template", "[ATTR:shape], [ATTR:color] [OBJ]"},
      {"categories",
       {{{"name", "platelet"}, {"attributes", {"shape", "color"}}},
        {{"name", "red blood corpuscle"}, {"attributes", {"shape", "color"}}},
        {{"name", "white blood corpuscle"}, {"attributes", {"shape", "color"}}}}},
      {"values",
       {{"platelet", {{"shape", "small"}, {"color", "colorless"}}},
        {"red blood corpuscle", {{"shape", "rounded"}, {"color", "freshcolor"}}},
        {"white blood corpuscle", {{"shape", "irregular"}, {"color", "purple or blue"}}}}}};
  const auto r = post(svc, "/api/prompts/compose", blood);
  REQUIRE(r.status == 200);
  const json out = r.json();
  CHECK(out["text"] ==
        "small, colorless platelet. rounded, freshcolor red blood corpuscle. irregular, purple or blue white blood corpuscle");
  CHECK(out["spans"][1] == json{{"category", "red blood corpuscle"}, {"begin", 3}, {"end", 8}});
  CHECK(out["phrases"].size() == 3);
  CHECK(out["variant"] == "manual");

  const json polyp = {
      {"template", "In [ATTR:location] [OBJ] is an [ATTR:shape] bump, often in [ATTR:color] color"},
      {"categories", {{{"name", "polyp"}, {"attributes", {"shape", "color", "location"}}}}},
      {"values", {{"polyp", {{"location", "rectum"}, {"shape", "oval"}, {"color", "pink"}}}}},
      {"form", "phrases"},
      {"heads", {{"polyp", "bump"}}}};
  const json p = post(svc, "/api/prompts/compose", polyp).json();
  CHECK(p["text"] == "In rectum polyp is an oval bump, often in pink color");
  CHECK(p.contains("rearranged"));

  const json defaults = post(svc, "/api/prompts/compose", json::object()).json();
  CHECK(defaults["text"] == kPrompt);
  const json override = post(svc, "/api/prompts/compose", {{"patterns", {{"nodule", "[OBJ]"}}}}).json();
  CHECK(override["text"] == "round, red cyst. nodule");

  CHECK(post(svc, "/api/prompts/compose", {{"template", "[ATTR:shape [OBJ]"}}).status == 400);
  const auto missing = post(svc, "/api/prompts/compose", {{"values", {{"cyst", {{"shape", "round"}}}}}});
  CHECK(missing.status == 400);
  CHECK(missing.json()["error"] == "missing-attribute-value");
  CHECK(svc.handle("POST", "/api/prompts/compose", {}, "{not json").status == 400);
  CHECK(get(svc, "/api/nowhere").status == 404);
}

TEST_CASE("automatic prompts through the service") {
  testing::TempDir dir("svc-auto");
  const auto fx = write_synthetic_fixture(dir.path());
  const PromptService svc(fx.root);
  const json mlm = post(svc, "/api/prompts/auto", {{"mode", "mlm"}, {"k", 2}}).json();
  REQUIRE(mlm["prompts"].size() == 2);
  CHECK(mlm["prompts"][1]["text"] == "oval, pink cyst. round, gray nodule");
  CHECK(mlm["prompts"][0]["variant"] == "mlm@1");

  const json vqa = post(svc, "/api/prompts/auto", {{"mode", "vqa"}, {"image_id", "syn-test-1"}}).json();
  CHECK(vqa["prompts"][0]["text"] == "oval, red cyst. lobulated, green nodule");
  CHECK(post(svc, "/api/prompts/auto", {{"mode", "vqa"}}).status == 400);
  CHECK(post(svc, "/api/prompts/auto", {{"mode", "vqa"}, {"image_id", "nope"}}).status == 404);
  CHECK(post(svc, "/api/prompts/auto", json::object()).status == 400);
}

TEST_CASE("ground endpoint") {
  testing::TempDir dir("svc-ground");
  const auto fx = write_synthetic_fixture(dir.path());
  const PromptService svc(fx.root);
  const auto r = post(svc, "/api/ground", {{"image_id", "syn-test-0"}, {"prompt_text", kPrompt}, {"spans", kSpans}});
  REQUIRE(r.status == 200);
  const json out = r.json();
  CHECK(out["image_id"] == "syn-test-0");
  CHECK(!out["detections"].empty());
  CHECK(out["scores"]["num_proposals"] == 16);
  CHECK(out["scores"]["num_tokens"] == 6);
  CHECK(out["scores"]["category_max_score"].contains("cyst"));

  const auto unknown = post(svc, "/api/ground", {{"image_id", "ghost"}, {"prompt_text", kPrompt}, {"spans", kSpans}});
  CHECK(unknown.status == 404);
  CHECK(unknown.json()["error"] == "not-found");
  json bad_spans = kSpans;
  bad_spans[1]["end"] = 9;
  CHECK(post(svc, "/api/ground", {{"image_id", "syn-test-0"}, {"prompt_text", kPrompt}, {"spans", bad_spans}}).status == 400);
  CHECK(post(svc, "/api/ground", {{"prompt_text", kPrompt}}).status == 400);
}

TEST_CASE("datasets, images and runs") {
  testing::TempDir dir("svc-data");
  const auto fx = write_synthetic_fixture(dir.path());
  auto config = ExperimentConfig::load(fx.experiment);
  config.output_dir = fx.root / "runs";
  const auto run = run_experiment(config);
  const PromptService svc(fx.root);

  const json ds = get(svc, "/api/datasets").json();
  REQUIRE(ds.size() == 1);
  CHECK(ds[0]["name"] == "synthetic");
  CHECK(ds[0]["loaded"]["test"] == 6);

  const json page = get(svc, "/api/datasets/synthetic/images", {{"split", "train"}, {"limit", "3"}, {"offset", "2"}}).json();
  CHECK(page["total"] == 8);
  REQUIRE(page["images"].size() == 3);
  CHECK(page["images"][0]["id"] == "syn-train-2");
  CHECK(get(svc, "/api/datasets/other/images").status == 404);
  CHECK(get(svc, "/api/datasets/synthetic/images", {{"split", "nope"}}).status == 404);

  const auto img = get(svc, "/api/images/syn-test-0");
  CHECK(img.status == 200);
  CHECK(img.content_type == "image/x-portable-pixmap");
  CHECK(decode_ppm(img.body).width == 64);

  const json runs = get(svc, "/api/runs").json();
  REQUIRE(runs.size() == 1);
  CHECK(runs[0]["digest"] == run.config_digest);
  const json artifact = get(svc, "/api/runs/" + run.config_digest).json();
  CHECK(EvalReport::from_json(artifact["report"]) == run.report);
  CHECK(get(svc, "/api/runs/0123456789abcdef").status == 404);
  CHECK(get(svc, "/api/runs/..").status == 404);
}

TEST_CASE("sweeps are stored and replayable") {
  testing::TempDir dir("svc-sweep");
  const auto fx = write_synthetic_fixture(dir.path());
  const PromptService svc(fx.root);
  const json req = {{"variants",
                     {{{"label", "name only"}, {"text", "cyst. nodule"},
                       {"spans", {{{"category", "cyst"}, {"begin", 0}, {"end", 1}}, {{"category", "nodule"}, {"begin", 1}, {"end", 2}}}}},
                      {{"label", "attributes"}, {"mode", "manual"}},
                      {{"label", "mlm rank 9"}, {"mode", "mlm"}, {"k", 2}, {"rank", 9}}}}};
  const auto created = post(svc, "/api/sweeps", req);
  REQUIRE(created.status == 201);
  const std::string id = created.json()["id"];
  CHECK(created.json()["rows"] == 3);
  const json table = get(svc, "/api/sweeps/" + id).json();
  REQUIRE(table["rows"].size() == 3);
  CHECK(table["rows"][0]["label"] == "name only");
  CHECK(table["rows"][1]["report"]["mean_ap"].get<double>() > table["rows"][0]["report"]["mean_ap"].get<double>());
  CHECK(table["rows"][2].contains("error"));
  CHECK(get(svc, "/api/sweeps/feedface").status == 404);
  CHECK(post(svc, "/api/sweeps", {{"variants", json::array()}}).status == 400);
}

TEST_CASE("http server handles concurrent requests") {
  testing::TempDir dir("svc-http");
  const auto fx = write_synthetic_fixture(dir.path());
  auto svc = std::make_shared<const PromptService>(fx.root);
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });

  const json body = {{"image_id", "syn-test-0"}, {"prompt_text", kPrompt}, {"spans", kSpans}};
  const std::string expected = svc->handle("POST", "/api/ground", {}, body.dump()).body;
  std::vector<std::future<std::pair<int, std::string>>> calls;
  for (int i = 0; i < 8; ++i)
    calls.push_back(std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", port);
      auto res = c.Post("/api/ground", body.dump(), "application/json");
      return res ? std::pair{res->status, res->body} : std::pair{-1, std::string()};
    }));
  for (auto& f : calls) {
    const auto [status, text] = f.get();
    CHECK(status == 200);
    CHECK(text == expected);
  }
  httplib::Client c("127.0.0.1", port);
  auto missing = c.Get("/api/images/ghost");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body)["error"] == "not-found");
  auto listing = c.Get("/api/datasets/synthetic/images?split=val&limit=1");
  REQUIRE(listing);
  CHECK(json::parse(listing->body)["images"].size() == 1);

  server.stop();
  t.join();
}

TEST_CASE("service construction needs a dataset") {
  testing::TempDir dir("svc-empty");
  CHECK_THROWS_AS(PromptService(dir.path()), Error);
  CHECK_THROWS_AS(PromptService(dir.path() / "missing"), Error);
}
