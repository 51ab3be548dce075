#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "medprompt/grounder.hpp"
#include "medprompt/grounding.hpp"
#include "stub_server.hpp"

using namespace medprompt;
using nlohmann::json;

namespace {

Matrix<double> random_matrix(std::mt19937_64& rng, Index r, Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix<double> random_binary(std::mt19937_64& rng, Index r, Index c) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng() % 2);
  return m;
}

// Greedy NMS by exhaustive pairwise checks over the score-sorted list.
std::vector<Detection> nms_oracle(std::vector<Detection> d, double thr) {
  std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<bool> removed(d.size(), false);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (removed[i]) continue;
    out.push_back(d[i]);
    for (std::size_t j = i + 1; j < d.size(); ++j)
      if (d[j].category == d[i].category && iou(d[i].box, d[j].box) > thr) removed[j] = true;
  }
  return out;
}

Box random_box(std::mt19937_64& rng, int extent = 40) {
  const double x = static_cast<double>(rng() % extent), y = static_cast<double>(rng() % extent);
  return {x, y, x + 1 + static_cast<double>(rng() % 20), y + 1 + static_cast<double>(rng() % 20)};
}

}  // namespace

TEST_CASE("alignment scores") {
  FeatureMatrix<double> o{Matrix<double>::Identity(2, 2), FeatureRole::kImageRegions};
  FeatureMatrix<double> p{Matrix<double>::Identity(2, 2), FeatureRole::kTextTokens};
  CHECK(alignment_scores(o, p).data.isApprox(Matrix<double>::Identity(2, 2)));

  Matrix<double> a(1, 2), b(1, 2);
  a << 1, 2;
  b << 3, 4;
  CHECK(alignment_scores(FeatureMatrix<double>{a}, FeatureMatrix<double>{b, FeatureRole::kTextTokens}).data(0, 0) == 11);

  FeatureMatrix<double> wrong{Matrix<double>::Ones(2, 3), FeatureRole::kTextTokens};
  CHECK_THROWS_AS(alignment_scores(o, wrong), Error);
}

TEST_CASE("alignment scores are bilinear") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const Index n = 1 + rng() % 10, m = 1 + rng() % 10, d = 1 + rng() % 6;
    FeatureMatrix<double> o{random_matrix(rng, n, d)}, p{random_matrix(rng, m, d), FeatureRole::kTextTokens};
    const double alpha = std::uniform_real_distribution<double>(-3, 3)(rng);
    FeatureMatrix<double> scaled{alpha * o.data};
    const Matrix<double> lhs = alignment_scores(scaled, p).data;
    const Matrix<double> rhs = alpha * alignment_scores(o, p).data;
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("grounding loss") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    const Index n = 1 + rng() % 6, m = 1 + rng() % 6;
    GroundingScores<double> zero{Matrix<double>::Zero(n, m)};
    CHECK(grounding_loss(zero, TargetMatrix<double>(random_binary(rng, n, m))) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
  Matrix<double> t = random_binary(rng, 4, 3);
  GroundingScores<double> sat{(t.array() * 60.0 - 30.0).matrix()};
  CHECK(grounding_loss(sat, TargetMatrix<double>(t)) < 1e-12);

  GroundingScores<double> s{random_matrix(rng, 4, 3, 3.0)};
  double oracle = 0;
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 3; ++j) {
      const double sig = 1.0 / (1.0 + std::exp(-s.data(i, j)));
      oracle -= t(i, j) * std::log(sig) + (1 - t(i, j)) * std::log(1 - sig);
    }
  CHECK(std::abs(grounding_loss(s, TargetMatrix<double>(t)) - oracle / 12) < 1e-10);
  CHECK(grounding_loss(s, TargetMatrix<double>(t)) >= 0);

  GroundingScores<double> huge{Matrix<double>::Constant(2, 2, 1000.0)};
  CHECK(std::isfinite(grounding_loss(huge, TargetMatrix<double>::zeros(2, 2))));
  CHECK_THROWS_AS(grounding_loss(s, TargetMatrix<double>::zeros(3, 3)), Error);
  CHECK_THROWS_AS(TargetMatrix<double>(Matrix<double>::Constant(1, 1, 0.5)), Error);
}

TEST_CASE("loss gradient") {
  GroundingScores<double> z{Matrix<double>::Zero(1, 1)};
  CHECK(loss_gradient(z, TargetMatrix<double>(Matrix<double>::Ones(1, 1)))(0, 0) == -0.5);
  CHECK(loss_gradient(z, TargetMatrix<double>::zeros(1, 1))(0, 0) == 0.5);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = 1 + rng() % 16, m = 1 + rng() % 16;
    GroundingScores<double> s{random_matrix(rng, n, m, 2.0)};
    const TargetMatrix<double> t(random_binary(rng, n, m));
    const Matrix<double> g = loss_gradient(s, t);
    const double h = 1e-5;
    double worst = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) {
        auto plus = s, minus = s;
        plus.data(i, j) += h;
        minus.data(i, j) -= h;
        const double fd = (grounding_loss(plus, t) - grounding_loss(minus, t)) / (2 * h);
        worst = std::max(worst, std::abs(fd - g(i, j)));
      }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("decode detections") {
  GroundingScores<double> s{Matrix<double>::Zero(1, 1)};
  auto d = decode_detections(s, {{Box{0, 0, 10, 10}, 0}}, {{"polyp", 0, 1}});
  REQUIRE(d.size() == 1);
  CHECK(d[0].score == 0.5);
  DecodeParams strict;
  strict.score_threshold = 0.6;
  CHECK(decode_detections(s, {{Box{0, 0, 10, 10}, 0}}, {{"polyp", 0, 1}}, strict).empty());

  GroundingScores<double> two{Matrix<double>(2, 1)};
  two.data << std::log(0.9 / 0.1), std::log(0.8 / 0.2);
  auto kept = decode_detections(two, {{Box{0, 0, 10, 10}, 0}, {Box{0, 0, 10, 10}, 1}}, {{"polyp", 0, 1}});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == doctest::Approx(0.9));

  CHECK_THROWS_AS(decode_detections(s, {{Box{0, 0, 1, 1}, 0}}, {{"polyp", 0, 2}}), Error);
  CHECK_THROWS_AS(decode_detections(s, {{Box{0, 0, 1, 1}, 3}}, {{"polyp", 0, 1}}), Error);
}

TEST_CASE("decode matches an exhaustive greedy-suppression oracle") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Index regions = 4, tokens = 4;
    GroundingScores<double> s{random_matrix(rng, regions, tokens, 2.0)};
    std::vector<BoxProposal> props;
    for (Index r = 0; r < regions; ++r) props.push_back({random_box(rng, 12), r});
    const std::vector<PhraseSpan> spans{{"a", 0, 2}, {"b", 2, 4}};
    DecodeParams params;
    params.nms_iou = 0.3;
    const auto got = decode_detections(s, props, spans, params);
    std::vector<Detection> candidates;
    for (const auto& p : props)
      for (const auto& sp : spans) {
        const double best = s.data.row(p.region_index).segment(sp.begin, sp.end - sp.begin).maxCoeff();
        const double score = 1 / (1 + std::exp(-best));
        if (score >= params.score_threshold) candidates.push_back({p.box, sp.category, score});
      }
    const auto expected = nms_oracle(candidates, params.nms_iou);
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].box == expected[i].box);
      CHECK(got[i].category == expected[i].category);
      CHECK(std::abs(got[i].score - expected[i].score) < 1e-12);
    }
    // decoding the kept set again changes nothing
    CHECK(non_max_suppression(got, params.nms_iou) == got);
  }
}

TEST_CASE("widening a span never lowers a region's category score") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    GroundingScores<double> s{random_matrix(rng, 3, 6)};
    const std::size_t b = rng() % 6, e = b + 1 + rng() % (6 - b);
    DecodeParams all;
    all.score_threshold = 0;
    all.nms_iou = 1.0;
    std::vector<BoxProposal> props{{Box{0, 0, 5, 5}, 0}, {Box{10, 10, 15, 15}, 1}, {Box{20, 20, 25, 25}, 2}};
    auto narrow = decode_detections(s, props, {{"c", b, e}}, all);
    auto wide = decode_detections(s, props, {{"c", 0, 6}}, all);
    for (const auto& n : narrow)
      for (const auto& w : wide)
        if (n.box == w.box) CHECK(w.score >= n.score);
  }
}

TEST_CASE("targets mark proposals overlapping their category's boxes") {
  const std::vector<BoxProposal> props{{Box{0, 0, 10, 10}, 0}, {Box{10, 0, 20, 10}, 1}, {Box{0, 10, 10, 20}, 2}};
  const std::vector<PhraseSpan> spans{{"cyst", 0, 2}, {"nodule", 2, 3}};
  const std::vector<LabeledBox> gt{{Box{0, 0, 10, 10}, "cyst"}, {Box{12, 0, 20, 10}, "nodule"}};
  const auto t = build_targets(props, 3, spans, 3, gt);
  Matrix<double> expected(3, 3);
  expected << 1, 1, 0, 0, 0, 1, 0, 0, 0;
  CHECK(t.data == expected);
}

TEST_CASE("proposal grid covers the image") {
  const ProposalGrid g{{16}, 1.0};
  const auto p = g.generate(64, 64);
  CHECK(p.size() == 16);
  CHECK(p.back().box == Box{48, 48, 64, 64});
  const auto snapped = ProposalGrid{{16}, 1.0}.generate(40, 20);
  CHECK(snapped.back().box == Box{24, 4, 40, 20});
  for (std::size_t i = 0; i < snapped.size(); ++i) CHECK(snapped[i].region_index == static_cast<Index>(i));
  CHECK(ProposalGrid{{128}, 0.5}.generate(64, 64).size() == 1);
  CHECK(ProposalGrid::from_json(ProposalGrid{{8, 16}, 0.5}.to_json()).sizes == std::vector<int>{8, 16});
  CHECK_THROWS_AS((ProposalGrid{{}, 1.0}.validate()), Error);
}

TEST_CASE("http grounder accepts decoded and raw replies") {
  const ImageRef img{"img1", "/data/img1.png", 64, 64};
  const auto prompt = prompt_from_text("red cyst. green nodule", {{"cyst", 0, 2}, {"nodule", 2, 4}});

  testing::StubServer decoded([](const json& req) {
    CHECK(req.at("prompt") == "red cyst. green nodule");
    CHECK(req.at("input_size") == 800);
    CHECK(req.at("spans").size() == 2);
    return std::pair{200, json{{"detections",
                                {{{"bbox", {0, 0, 10, 10}}, {"category", "cyst"}, {"score", 0.4}},
                                 {{"bbox", {20, 0, 10, 10}}, {"category", "nodule"}, {"score", 0.9}},
                                 {{"bbox", {1, 1, 10, 10}}, {"category", "cyst"}, {"score", 0.01}}}}}};
  });
  const HttpGrounder g1(decoded.url("/ground"));
  const auto r1 = g1.ground(img, prompt, {});
  REQUIRE(r1.detections.size() == 2);
  CHECK(r1.detections[0].category == "nodule");
  CHECK(r1.detections[0].box == Box{20, 0, 30, 10});
  CHECK_FALSE(r1.scores.has_value());

  testing::StubServer raw([](const json&) {
    return std::pair{200, json{{"proposals", {{0, 0, 10, 10}, {20, 0, 30, 10}}},
                               {"scores", {{5, 5, -5, -5}, {-5, -5, 5, 5}}}}};
  });
  const HttpGrounder g2(raw.url("/ground"));
  const auto r2 = g2.ground(img, prompt, {});
  REQUIRE(r2.scores.has_value());
  REQUIRE(r2.detections.size() == 2);
  CHECK(r2.detections[0].score == doctest::Approx(1 / (1 + std::exp(-5.0))));

  testing::StubServer broken([](const json&) { return std::pair{200, json{{"unexpected", 1}}}; });
  CHECK_THROWS_AS(HttpGrounder(broken.url("/ground")).ground(img, prompt, {}), Error);
}
