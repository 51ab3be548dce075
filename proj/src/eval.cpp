#include "medprompt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "medprompt/error.hpp"
#include "medprompt/parallel.hpp"
#include "medprompt/prompt_config.hpp"

namespace medprompt {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct Scored {
  double score;
  bool tp;
};

double interpolated_ap(std::vector<Scored> flags, std::size_t num_gt) {
  std::stable_sort(flags.begin(), flags.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  const std::size_t n = flags.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (flags[i].tp ? tp : fp) += 1;
    recall[i] = tp / static_cast<double>(num_gt);
    precision[i] = tp / (tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

std::vector<Detection> top_detections(std::vector<Detection> dets, std::size_t cap) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (cap > 0 && dets.size() > cap) dets.resize(cap);
  return dets;
}

}  // namespace

std::vector<double> average_precision(const ImageDetections& detections, const ImageGroundTruth& ground_truth,
                                      const ApOptions& options) {
  std::size_t num_gt = 0;
  for (const auto& [id, boxes] : ground_truth) num_gt += boxes.size();
  if (num_gt == 0) throw Error(ErrorCode::kNoGroundTruth, "no ground-truth boxes");

  std::map<std::string, std::vector<Detection>> ranked;
  for (const auto& [id, dets] : detections) ranked[id] = top_detections(dets, options.max_detections_per_image);
  static const std::vector<LabeledBox> kNone;

  std::vector<double> out;
  for (double threshold : options.iou_thresholds) {
    std::vector<Scored> flags;
    for (const auto& [id, dets] : ranked) {
      auto g = ground_truth.find(id);
      const auto& gts = g == ground_truth.end() ? kNone : g->second;
      std::vector<bool> taken(gts.size(), false);
      for (const auto& d : dets) {
        double best = -1;
        std::size_t match = gts.size();
        for (std::size_t k = 0; k < gts.size(); ++k) {
          if (taken[k]) continue;
          const double o = iou(d.box, gts[k].box);
          if (o >= threshold && o > best) best = o, match = k;
        }
        if (match < gts.size()) taken[match] = true;
        flags.push_back({d.score, match < gts.size()});
      }
    }
    out.push_back(interpolated_ap(std::move(flags), num_gt));
  }
  return out;
}

json EvalReport::to_json() const {
  json cats = json::object();
  for (const auto& [name, m] : per_category) cats[name] = {{"ap", m.ap}, {"ap50", m.ap50}, {"num_gt", m.num_gt}};
  return {{"per_category", cats},
          {"excluded_categories", excluded_categories},
          {"mean_ap", mean_ap},
          {"mean_ap50", mean_ap50},
          {"num_images", num_images},
          {"num_gt_boxes", num_gt_boxes},
          {"config_digest", config_digest}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  for (const auto& [name, m] : j.at("per_category").items())
    r.per_category[name] = {m.at("ap").get<double>(), m.at("ap50").get<double>(), m.value("num_gt", std::size_t{0})};
  r.excluded_categories = j.value("excluded_categories", std::vector<std::string>{});
  r.mean_ap = j.at("mean_ap").get<double>();
  r.mean_ap50 = j.at("mean_ap50").get<double>();
  r.num_images = j.value("num_images", std::size_t{0});
  r.num_gt_boxes = j.value("num_gt_boxes", std::size_t{0});
  r.config_digest = j.value("config_digest", "");
  return r;
}

EvalReport evaluate(const ImageDetections& detections, const ImageGroundTruth& ground_truth,
                    const std::vector<std::string>& categories, const std::string& config_digest,
                    const ApOptions& options) {
  for (const auto& [id, boxes] : ground_truth)
    if (!detections.count(id)) throw Error(ErrorCode::kSplitMismatch, "no detections entry for image '" + id + "'");
  for (const auto& [id, dets] : detections) {
    if (!ground_truth.count(id)) throw Error(ErrorCode::kSplitMismatch, "image '" + id + "' is not in the evaluation split");
    for (const auto& d : dets)
      if (std::find(categories.begin(), categories.end(), d.category) == categories.end())
        throw Error(ErrorCode::kCategoryNotFound, "detection category '" + d.category + "' is not evaluated");
  }

  std::vector<double> thresholds = options.iou_thresholds;
  auto at50 = std::find_if(thresholds.begin(), thresholds.end(), [](double t) { return std::abs(t - 0.5) < 1e-12; });
  const bool extra50 = at50 == thresholds.end();
  if (extra50) thresholds.push_back(0.5);
  const std::size_t index50 = extra50 ? thresholds.size() - 1 : static_cast<std::size_t>(at50 - thresholds.begin());
  ApOptions opts{thresholds, options.max_detections_per_image};

  EvalReport report;
  report.config_digest = config_digest;
  report.num_images = ground_truth.size();
  for (const auto& [id, boxes] : ground_truth) report.num_gt_boxes += boxes.size();

  for (const auto& cat : categories) {
    ImageDetections dets;
    ImageGroundTruth gts;
    std::size_t n = 0;
    for (const auto& [id, boxes] : ground_truth) {
      auto& g = gts[id];
      for (const auto& b : boxes)
        if (b.category == cat) g.push_back(b);
      n += g.size();
    }
    if (n == 0) {
      report.excluded_categories.push_back(cat);
      continue;
    }
    for (const auto& [id, ds] : detections) {
      auto& d = dets[id];
      for (const auto& x : ds)
        if (x.category == cat) d.push_back(x);
    }
    const auto ap = average_precision(dets, gts, opts);
    double sum = 0;
    for (std::size_t i = 0; i < options.iou_thresholds.size(); ++i) sum += ap[i];
    report.per_category[cat] = {options.iou_thresholds.empty() ? 0.0 : sum / options.iou_thresholds.size(), ap[index50], n};
  }
  if (!report.per_category.empty()) {
    for (const auto& [c, m] : report.per_category) report.mean_ap += m.ap, report.mean_ap50 += m.ap50;
    report.mean_ap /= report.per_category.size();
    report.mean_ap50 /= report.per_category.size();
  }
  return report;
}

ImageGroundTruth ground_truth_of(const std::vector<AnnotationRecord>& records) {
  ImageGroundTruth gt;
  for (const auto& r : records) {
    if (gt.count(r.image.id)) throw Error(ErrorCode::kSplitMismatch, "duplicate image '" + r.image.id + "'");
    gt[r.image.id] = r.boxes;
  }
  return gt;
}

json detections_to_json(const ImageDetections& detections) {
  json j = json::object();
  for (const auto& [id, dets] : detections) {
    json arr = json::array();
    for (const auto& d : dets) arr.push_back(detection_to_json(d));
    j[id] = arr;
  }
  return j;
}

ImageDetections detections_from_json(const json& j) {
  ImageDetections out;
  try {
    for (const auto& [id, arr] : j.items()) {
      auto& v = out[id];
      for (const auto& d : arr) v.push_back(detection_from_json(d));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("detections: ") + e.what());
  }
  return out;
}

SweepVariant SweepVariant::fixed(std::string label, ComposedPrompt prompt) {
  return {std::move(label), [p = std::move(prompt)](const ImageRef&) { return p; }};
}

json SweepRow::to_json() const {
  json j{{"label", label}};
  if (prompt) j["prompt"] = medprompt::to_json(*prompt);
  if (report) j["report"] = report->to_json();
  if (error) j["error"] = *error;
  return j;
}

std::vector<SweepRow> prompt_sweep(const std::vector<SweepVariant>& variants,
                                   const std::vector<AnnotationRecord>& records,
                                   const std::vector<std::string>& categories, const Grounder& grounder,
                                   const DecodeParams& params, const std::string& config_digest,
                                   std::size_t parallelism) {
  if (variants.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep needs at least one variant");
  const ImageGroundTruth gt = ground_truth_of(records);
  std::vector<SweepRow> rows;
  for (const auto& v : variants) {
    SweepRow row;
    row.label = v.label;
    try {
      if (v.label.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep variant label is empty");
      auto per_image = parallel_map(records.size(), parallelism, [&](std::size_t i) {
        ComposedPrompt p = v.prompt_for(records[i].image);
        auto dets = grounder.ground(records[i].image, p, params).detections;
        return std::make_pair(std::move(p), std::move(dets));
      });
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (i == 0) row.prompt = per_image[i].first;
        row.detections[records[i].image.id] = std::move(per_image[i].second);
      }
      row.report = evaluate(row.detections, gt, categories, config_digest);
    } catch (const std::exception& e) {
      row.error = e.what();
      row.report.reset();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_table(const std::vector<SweepRow>& rows, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "rows", ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + dir.string() + ": " + ec.message());
  json table = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json r = rows[i].to_json();
    const std::string name = std::to_string(i) + "_detections.json";
    r["detections_file"] = "rows/" + name;
    table.push_back(std::move(r));
    std::ofstream out(dir / "rows" / name);
    out << detections_to_json(rows[i].detections).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write sweep row " + name);
  }
  std::ofstream out(dir / "sweep.json");
  out << json{{"rows", table}}.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write sweep table in " + dir.string());
}

json SeedAggregate::to_json() const { return {{"mean", mean}, {"std", std}, {"n_seeds", n_seeds}}; }

json SeedSummary::to_json() const {
  json cats = json::object();
  for (const auto& [c, a] : category_ap) cats[c] = {{"ap", a.to_json()}, {"ap50", category_ap50.at(c).to_json()}};
  return {{"mean_ap", mean_ap.to_json()}, {"mean_ap50", mean_ap50.to_json()}, {"per_category", cats}};
}

SeedAggregate aggregate_values(const std::vector<double>& values) {
  if (values.empty()) throw Error(ErrorCode::kInvalidArgument, "no values to aggregate");
  // Welford's running update.
  double mean = 0, m2 = 0;
  std::size_t n = 0;
  for (double x : values) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  return {mean, std::sqrt(std::max(0.0, m2 / static_cast<double>(n))), n};
}

SeedSummary aggregate_seeds(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw Error(ErrorCode::kInvalidArgument, "aggregate_seeds needs at least one report");
  for (const auto& r : reports) {
    if (r.per_category.size() != reports[0].per_category.size() ||
        !std::equal(r.per_category.begin(), r.per_category.end(), reports[0].per_category.begin(),
                    [](const auto& a, const auto& b) { return a.first == b.first; }))
      throw Error(ErrorCode::kCategorySetMismatch, "seed reports cover different categories");
  }
  auto collect = [&](auto&& get) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(get(r));
    return aggregate_values(v);
  };
  SeedSummary s;
  s.mean_ap = collect([](const EvalReport& r) { return r.mean_ap; });
  s.mean_ap50 = collect([](const EvalReport& r) { return r.mean_ap50; });
  for (const auto& [c, m] : reports[0].per_category) {
    s.category_ap[c] = collect([&](const EvalReport& r) { return r.per_category.at(c).ap; });
    s.category_ap50[c] = collect([&](const EvalReport& r) { return r.per_category.at(c).ap50; });
  }
  return s;
}

}  // namespace medprompt
