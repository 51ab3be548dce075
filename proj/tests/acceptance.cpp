// Acceptance checks: one PASS/FAIL line per criterion with the measured
// values, runtime and runtime limit. Exit status is nonzero if any fails.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "medprompt/dataset.hpp"
#include "medprompt/error.hpp"
#include "medprompt/eval.hpp"
#include "medprompt/experiment.hpp"
#include "medprompt/fixture.hpp"
#include "medprompt/grounder.hpp"
#include "medprompt/grounding.hpp"
#include "medprompt/prompt.hpp"
#include "medprompt/prompt_config.hpp"
#include "medprompt/toy_encoder.hpp"
#include "oracles.hpp"
#include "scenes.hpp"
#include "support.hpp"

using namespace medprompt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      if (ok) detail << "failed: ";
      ok = false;
      detail << what << "; ";
    }
  }
};

int failures = 0;

void criterion(const std::string& name, double limit_s, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail << "exception: " << e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < limit_s;
  const bool pass = o.ok && in_time;
  if (!pass) ++failures;
  std::printf("%s  %-24s %s[%.3f s < %.0f s%s]\n", pass ? "PASS" : "FAIL", name.c_str(), o.detail.str().c_str(), secs,
              limit_s, in_time ? "" : " EXCEEDED");
  std::fflush(stdout);
}

Matrix<double> gaussian(std::mt19937_64& rng, Index r, Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix<double> binary(std::mt19937_64& rng, Index r, Index c) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng() % 2);
  return m;
}

double cell_loss(double s, double t) {
  const double p = 1.0 / (1.0 + std::exp(-s)), q = 1.0 / (1.0 + std::exp(s));
  return t == 1.0 ? -std::log(p) : -std::log(q);
}

const LadderRow& best_row(const std::vector<LadderRow>& rows) {
  for (const auto& r : rows)
    if (r.label == "best") return r;
  throw Error(ErrorCode::kNotFound, "ladder has no best row");
}

// Span-max logit of `category` at every proposal.
std::vector<double> span_max(const GroundingResult& g, const ComposedPrompt& p, const std::string& category) {
  const PhraseSpan* span = p.span_for(category);
  if (!span) throw Error(ErrorCode::kCategoryNotFound, category);
  const auto begin = static_cast<Index>(span->begin), len = static_cast<Index>(span->end - span->begin);
  std::vector<double> out;
  for (const auto& prop : g.proposals) out.push_back(g.scores->data.row(prop.region_index).segment(begin, len).maxCoeff());
  return out;
}

double ap50_over(const EncoderDescriptor& enc, const std::vector<AnnotationRecord>& records,
                 const std::vector<RgbImage>& images, const std::vector<BoxProposal>& props, const ComposedPrompt& prompt,
                 const std::vector<std::string>& cats) {
  ImageDetections dets;
  for (std::size_t i = 0; i < records.size(); ++i)
    dets[records[i].image.id] = toy_ground(enc, images[i], props, prompt, {}).detections;
  return evaluate(dets, ground_truth_of(records), cats, "").mean_ap50;
}

}  // namespace

int main() {
  const fs::path src = testing::source_dir();
  testing::TempDir work("acceptance");

  criterion("golden-prompts", 1, [&](Outcome& o) {
    const std::string bccd = best_row(load_ladder(src / "data/fixtures/prompt_ladders/bccd.json")).prompt.text;
    const std::string cvc = best_row(load_ladder(src / "data/fixtures/prompt_ladders/cvc300.json")).prompt.text;
    const std::string tn3k = best_row(load_ladder(src / "data/fixtures/prompt_ladders/tn3k.json")).prompt.text;
    o.require(bccd ==
                  "small, colorless platelet. rounded, freshcolor red blood corpuscle. irregular, purple or blue "
                  "white blood corpuscle",
              "bccd row: " + bccd);
    o.require(cvc == "In rectum polyp is an oval bump, often in pink color", "cvc300 row: " + cvc);
    o.require(tn3k == "salient thyroid tumor in medical ultrasound imaging", "tn3k row: " + tn3k);

    auto slots = [](std::vector<std::string> names) {
      std::vector<AttributeName> out;
      for (const auto& n : names) out.push_back(AttributeName::canonical(n));
      return out;
    };
    const PromptTemplate tmpl("[ATTR:shape], [ATTR:color] [OBJ]");
    std::vector<PromptEntry> entries;
    const std::vector<std::array<std::string, 3>> cells{{"platelet", "small", "colorless"},
                                                       {"red blood corpuscle", "rounded", "freshcolor"},
                                                       {"white blood corpuscle", "irregular", "purple or blue"}};
    for (const auto& [name, shape, color] : cells)
      entries.push_back({CategorySpec{name, {}, slots({"shape", "color"})},
                         {{"shape", AttributeValue::manual(shape)}, {"color", AttributeValue::manual(color)}},
                         {}});
    const ComposedPrompt direct = compose_prompt(entries, tmpl);
    o.require(direct.text == bccd, "direct compose: " + direct.text);
    const std::string filled = fill_template(
        PromptTemplate("In [ATTR:location] [OBJ] is an [ATTR:shape] bump, often in [ATTR:color] color"),
        {{"location", AttributeValue::manual("rectum")},
         {"shape", AttributeValue::manual("oval")},
         {"color", AttributeValue::manual("pink")}},
        CategorySpec{"polyp", {}, slots({"shape", "color", "location"})});
    o.require(filled == cvc, "fill_template: " + filled);
    if (o.ok) o.detail << "3/3 rows byte-exact ";
  });

  criterion("rearrangement", 1, [&](Outcome& o) {
    const std::string got = rearrange_for_grounding("Polyp is a pink and round bump in rectum", "bump");
    o.require(got == "pink, round, bump, in rectum", "got '" + got + "'");
    if (o.ok) o.detail << "'" << got << "' ";
  });

  criterion("grounding-algebra", 10, [&](Outcome& o) {
    std::mt19937_64 rng(101);
    double worst_scores = 0, worst_loss = 0, worst_grad = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const Index n = 1 + rng() % 32, m = 1 + rng() % 32, d = 1 + rng() % 16;
      const FeatureMatrix<double> regions{gaussian(rng, n, d), FeatureRole::kImageRegions};
      const FeatureMatrix<double> tokens{gaussian(rng, m, d), FeatureRole::kTextTokens};
      const auto s = alignment_scores(regions, tokens);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) {
          double dot = 0;
          for (Index k = 0; k < d; ++k) dot += regions.data(i, k) * tokens.data(j, k);
          worst_scores = std::max(worst_scores, std::abs(dot - s.data(i, j)));
        }
      const TargetMatrix<double> t(binary(rng, n, m));
      double sum = 0;
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) sum += cell_loss(s.data(i, j), t.data(i, j));
      worst_loss = std::max(worst_loss, std::abs(sum / static_cast<double>(n * m) - grounding_loss(s, t)));

      if (trial % 2) continue;  // 50 gradient instances
      const Matrix<double> g = loss_gradient(s, t);
      const double h = 1e-5;
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) {
          auto plus = s, minus = s;
          plus.data(i, j) += h;
          minus.data(i, j) -= h;
          const double fd = (grounding_loss(plus, t) - grounding_loss(minus, t)) / (2 * h);
          worst_grad = std::max(worst_grad, std::abs(fd - g(i, j)));
        }
    }
    o.require(worst_scores <= 1e-12, "score error too large");
    o.require(worst_loss <= 1e-10, "loss error too large");
    o.require(worst_grad <= 1e-6, "gradient error too large");
    o.detail << "max |score err| " << worst_scores << ", |loss err| " << worst_loss << ", |grad err| " << worst_grad
             << " ";
  });

  criterion("evaluator-oracle", 60, [&](Outcome& o) {
    std::mt19937_64 rng(202);
    double worst = 0;
    std::size_t compared = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const auto s = scenes::random_scene(rng, 5, 4, 3);
      for (const auto& cat : s.categories) {
        if (scenes::gt_count(s.gt, cat) == 0) continue;
        const auto [d, g] = scenes::only(s, cat);
        const auto got = average_precision(d, g);
        const auto th = coco_iou_thresholds();
        for (std::size_t i = 0; i < th.size(); ++i, ++compared)
          worst = std::max(worst, std::abs(got[i] - scenes::oracle_ap(s, cat, th[i])));
      }
    }
    o.require(worst <= 1e-9, "AP differs from the reference");

    std::size_t violations[4] = {0, 0, 0, 0};
    const double factors[] = {0.5, 2.0, 4.0, 0.25, 8.0};
    for (int trial = 0; trial < 1000; ++trial) {
      const auto s = scenes::random_scene(rng, 5, 4, 1);
      const auto [d, g] = scenes::only(s, "c0");
      if (scenes::gt_count(g, "c0") == 0) continue;
      const auto base = average_precision(d, g);

      // true positive on an unmatched box, scored above everything
      for (const auto& [id, boxes] : g) {
        bool done = false;
        for (const auto& gb : boxes) {
          bool matched = false;
          if (d.count(id))
            for (const auto& x : d.at(id)) matched |= iou(x.box, gb.box) >= 0.5;
          if (matched) continue;
          auto more = d;
          more[id].push_back({gb.box, "c0", 2.0});
          const auto after = average_precision(more, g);
          for (std::size_t i = 0; i < base.size(); ++i) violations[0] += after[i] < base[i] - 1e-12;
          done = true;
          break;
        }
        if (done) break;
      }
      const auto th = coco_iou_thresholds();
      violations[1] += !(base[0] >= base[5] && base[5] >= base[9]);
      const double f = factors[trial % 5];
      auto ds = d;
      auto gs = g;
      for (auto& [_, v] : ds)
        for (auto& x : v) x.box = {x.box.x1 * f, x.box.y1 * f, x.box.x2 * f, x.box.y2 * f};
      for (auto& [_, v] : gs)
        for (auto& x : v) x.box = {x.box.x1 * f, x.box.y1 * f, x.box.x2 * f, x.box.y2 * f};
      violations[2] += average_precision(ds, gs) != base;
      auto shifted = d;
      for (auto& [_, v] : shifted)
        for (auto& x : v) x.score += 0.375;
      violations[3] += average_precision(shifted, g) != base;
    }
    o.require(violations[0] + violations[1] + violations[2] + violations[3] == 0, "metric invariant violated");
    o.detail << compared << " AP values, max |err| " << worst << "; invariant violations (monotone, threshold, scale, shift) "
             << violations[0] << "/" << violations[1] << "/" << violations[2] << "/" << violations[3] << " ";
  });

  criterion("mask-oracle", 30, [&](Outcome& o) {
    std::mt19937_64 rng(303);
    std::size_t mismatches = 0, boxes = 0;
    for (int trial = 0; trial < 500; ++trial) {
      const int h = 1 + rng() % 32, w = 1 + rng() % 32;
      LabelImage bin(h, w), ids(h, w);
      const double density = (rng() % 100) / 100.0;
      for (Eigen::Index i = 0; i < bin.size(); ++i) bin.data()[i] = (rng() % 1000) / 1000.0 < density;
      for (Eigen::Index i = 0; i < ids.size(); ++i) ids.data()[i] = rng() % 3 == 0 ? 0 : 1 + rng() % 6;
      const int min_area = rng() % 12;
      const auto a = mask_to_boxes(bin, MaskMode::kBinary, min_area);
      const auto b = mask_to_boxes(ids, MaskMode::kInstance);
      mismatches += a != oracle::flood_boxes(bin, min_area);
      mismatches += b != oracle::instance_boxes(ids);
      boxes += a.size() + b.size();
    }
    o.require(mismatches == 0, std::to_string(mismatches) + " masks differ");
    o.detail << "1000 conversions (500 binary, 500 instance), " << boxes << " boxes, " << mismatches << " mismatches ";
  });

  const FixturePaths fx = write_synthetic_fixture(work.path() / "fixture");

  criterion("pipeline-determinism", 60, [&](Outcome& o) {
    for (PromptMode mode : {PromptMode::kMlm, PromptMode::kHybrid}) {
      auto c = ExperimentConfig::load(fx.experiment);
      c.output_dir = work.path() / "det-runs";
      c.prompt_mode = mode;
      if (mode == PromptMode::kMlm) c.k = 3;
      c.parallelism = 1;
      const auto first = run_experiment(c);
      const auto second = run_experiment(c);
      o.require(first.report == second.report && first.detections == second.detections,
                std::string(to_string(mode)) + " repeat differs");
      for (std::size_t par : {2, 4}) {
        c.parallelism = par;
        const auto other = run_experiment(c);
        o.require(other.report == first.report && other.detections == first.detections &&
                      other.rank_reports == first.rank_reports,
                  std::string(to_string(mode)) + " differs at parallelism " + std::to_string(par));
      }
      o.detail << to_string(mode) << " mAP " << first.report.mean_ap << " x4 identical; ";
    }
  });

  criterion("directional-zero-shot", 60, [&](Outcome& o) {
    auto c = ExperimentConfig::load(fx.experiment);
    c.output_dir = work.path() / "dir-runs";
    const auto in = load_inputs(c);
    const EncoderDescriptor& enc = in.encoder;
    auto named_cfg = c;
    named_cfg.prompt_mode = PromptMode::kDefaultClass;
    const ComposedPrompt attr = shared_prompts(in.request, in.backends()).at(0);
    auto named_req = in.request;
    named_req.mode = PromptMode::kDefaultClass;
    const ComposedPrompt named = shared_prompts(named_req, in.backends()).at(0);

    // score inspection first
    std::size_t raised = 0, total = 0, separated = 0, checks = 0;
    for (const auto& r : in.dataset.splits.at(c.eval_split)) {
      const RgbImage img = read_ppm(r.image.uri);
      const auto props = c.proposals.generate(img.width, img.height);
      const auto ga = toy_ground(enc, img, props, attr, {});
      const auto gn = toy_ground(enc, img, props, named, {});
      for (const auto& cat : in.category_names()) {
        const auto sa = span_max(ga, attr, cat), sn = span_max(gn, named, cat);
        double worst_true = INFINITY, best_other = -INFINITY;
        for (std::size_t k = 0; k < props.size(); ++k) {
          bool hit = false;
          for (const auto& b : r.boxes) hit |= b.category == cat && iou(b.box, props[k].box) >= 0.5;
          if (hit) {
            ++total;
            raised += sa[k] > sn[k];
            worst_true = std::min(worst_true, sa[k]);
          } else {
            best_other = std::max(best_other, sa[k]);
          }
        }
        if (std::isfinite(worst_true)) ++checks, separated += worst_true > best_other;
      }
    }
    o.require(total > 0 && raised == total, "attribute tokens did not raise every true region");
    o.require(separated == checks, "attribute prompt does not separate true regions");
    o.detail << "scores raised on " << raised << "/" << total << " true regions, separated " << separated << "/"
             << checks << "; ";

    const auto with_attr = run_experiment(c);
    const auto name_only = run_experiment(named_cfg);
    o.require(with_attr.report.mean_ap > name_only.report.mean_ap, "attribute prompt AP not higher");
    o.detail << "mAP '" << attr.text << "' " << with_attr.report.mean_ap << " > '" << named.text << "' "
             << name_only.report.mean_ap << " ";
  });

  criterion("few-shot-loop", 60, [&](Outcome& o) {
    auto c = ExperimentConfig::load(fx.experiment);
    const auto in = load_inputs(c);
    const auto& train = in.dataset.splits.at("train");
    o.require(train.size() == 8, "fixture should have 8 training images");
    const ComposedPrompt prompt = shared_prompts(in.request, in.backends()).at(0);
    const auto cats = in.category_names();
    std::vector<RgbImage> images;
    for (const auto& r : train) images.push_back(read_ppm(r.image.uri));
    const auto props = c.proposals.generate(images[0].width, images[0].height);
    const Index ntok = static_cast<Index>(prompt.tokens().size());
    std::vector<TrainingSample> batch;
    for (std::size_t i = 0; i < train.size(); ++i)
      batch.push_back({&images[i], props, prompt,
                       build_targets(props, static_cast<Index>(props.size()), prompt.spans, ntok, train[i].boxes)});

    auto train_for = [&](EncoderDescriptor enc, double lr, std::vector<double>& losses) {
      for (int step = 0; step < 200; ++step) {
        auto r = toy_train_step(std::move(enc), batch, StepOptions::uniform(lr));
        losses.push_back(r.loss);
        enc = std::move(r.descriptor);
      }
      return enc;
    };

    const auto start = EncoderDescriptor::toy(random_fixture_parameters());
    const double ap_before = ap50_over(start, train, images, props, prompt, cats);
    std::vector<double> losses;
    const auto trained = train_for(start, 5.0, losses);
    const double final_loss = toy_batch_loss(trained, batch);
    const double ap_after = ap50_over(trained, train, images, props, prompt, cats);
    o.require(final_loss < 0.05, "loss did not drop below 0.05");
    o.require(ap_before < 0.5, "initial AP50 not below 0.5");
    o.require(ap_after == 1.0, "trained AP50 is not 1.0");
    o.detail << "loss " << losses.front() << " -> " << final_loss << ", AP50 " << ap_before << " -> " << ap_after << "; ";

    const auto frozen_start = EncoderDescriptor::toy(random_fixture_parameters(), FreezeMask::all());
    std::vector<double> frozen_losses;
    const auto frozen = train_for(frozen_start, 5.0, frozen_losses);
    const bool same = frozen.parameters->token_embeddings == frozen_start.parameters->token_embeddings &&
                      frozen.parameters->region_projection == frozen_start.parameters->region_projection;
    const double ap_frozen = ap50_over(frozen, train, images, props, prompt, cats);
    o.require(same, "frozen parameters changed");
    o.require(ap_frozen == ap_before, "frozen AP changed");
    o.detail << "all frozen: parameters " << (same ? "unchanged" : "CHANGED") << ", AP50 " << ap_frozen << " ";
  });

  criterion("seed-aggregation", 1, [&](Outcome& o) {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<EvalReport> reports(3);
    for (auto& r : reports) {
      for (const char* cat : {"platelet", "red blood cell", "white blood cell"})
        r.per_category[cat] = {u(rng), u(rng), 10};
      for (const auto& [_, m] : r.per_category) r.mean_ap += m.ap / 3, r.mean_ap50 += m.ap50 / 3;
    }
    const SeedSummary s = aggregate_seeds(reports);
    double worst = 0;
    auto compare = [&](const SeedAggregate& a, const std::vector<double>& v) {
      worst = std::max({worst, std::abs(a.mean - oracle::mean(v)), std::abs(a.std - oracle::population_std(v))});
      o.require(a.n_seeds == v.size(), "seed count");
    };
    auto column = [&](auto pick) {
      std::vector<double> v;
      for (const auto& r : reports) v.push_back(pick(r));
      return v;
    };
    compare(s.mean_ap, column([](const EvalReport& r) { return r.mean_ap; }));
    compare(s.mean_ap50, column([](const EvalReport& r) { return r.mean_ap50; }));
    for (const auto& [cat, _] : reports[0].per_category) {
      compare(s.category_ap.at(cat), column([&](const EvalReport& r) { return r.per_category.at(cat).ap; }));
      compare(s.category_ap50.at(cat), column([&](const EvalReport& r) { return r.per_category.at(cat).ap50; }));
    }
    o.require(worst <= 1e-12, "aggregate differs from two-pass computation");
    o.detail << "8 metrics over 3 seeds, max |err| " << worst << " ";
  });

  std::printf("%s: %d criterion(s) failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
