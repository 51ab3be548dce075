#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/box.hpp"
#include "medprompt/dataset.hpp"
#include "medprompt/grounder.hpp"

namespace medprompt {

using ImageDetections = std::map<std::string, std::vector<Detection>>;    // image id -> detections
using ImageGroundTruth = std::map<std::string, std::vector<LabeledBox>>;  // image id -> boxes

// 0.50, 0.55, ..., 0.95
std::vector<double> coco_iou_thresholds();

struct ApOptions {
  std::vector<double> iou_thresholds = coco_iou_thresholds();
  std::size_t max_detections_per_image = 100;  // 0 = unlimited
};

// Single-class AP per IoU threshold (categories are ignored; filter first).
// Per image, the top max_detections_per_image detections by score are
// matched in descending score order to the unmatched ground truth of highest
// IoU (>= threshold; ties go to the earlier box). All matched flags are then
// merged in descending score order (stable over image id, then detection
// order) and integrated with 101-point interpolated precision.
// Throws no-ground-truth when no image has a box.
std::vector<double> average_precision(const ImageDetections& detections, const ImageGroundTruth& ground_truth,
                                      const ApOptions& options = {});

struct CategoryMetrics {
  double ap = 0;
  double ap50 = 0;
  std::size_t num_gt = 0;

  friend bool operator==(const CategoryMetrics&, const CategoryMetrics&) = default;
};

struct EvalReport {
  std::map<std::string, CategoryMetrics> per_category;  // categories with >= 1 ground-truth box
  std::vector<std::string> excluded_categories;        // no ground truth
  double mean_ap = 0;
  double mean_ap50 = 0;
  std::size_t num_images = 0;
  std::size_t num_gt_boxes = 0;
  std::string config_digest;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// Every ground-truth image must have an entry in `detections` (possibly
// empty) and vice versa, otherwise split-mismatch.
EvalReport evaluate(const ImageDetections& detections, const ImageGroundTruth& ground_truth,
                    const std::vector<std::string>& categories, const std::string& config_digest,
                    const ApOptions& options = {});

ImageGroundTruth ground_truth_of(const std::vector<AnnotationRecord>& records);

nlohmann::json detections_to_json(const ImageDetections& detections);
ImageDetections detections_from_json(const nlohmann::json& j);

struct SweepVariant {
  std::string label;
  // Prompt used for a given image; shared prompts ignore the argument.
  std::function<ComposedPrompt(const ImageRef&)> prompt_for;

  static SweepVariant fixed(std::string label, ComposedPrompt prompt);
};

struct SweepRow {
  std::string label;
  std::optional<ComposedPrompt> prompt;  // prompt of the first image
  std::optional<EvalReport> report;
  ImageDetections detections;
  std::optional<std::string> error;

  nlohmann::json to_json() const;
};

// Grounds every record with each variant under identical settings. A variant
// that fails records its error and the sweep continues. Rows follow input order.
std::vector<SweepRow> prompt_sweep(const std::vector<SweepVariant>& variants,
                                   const std::vector<AnnotationRecord>& records,
                                   const std::vector<std::string>& categories, const Grounder& grounder,
                                   const DecodeParams& params, const std::string& config_digest = "",
                                   std::size_t parallelism = 1);

// Writes <dir>/sweep.json (labels, prompts, reports, errors) and
// <dir>/rows/<index>_detections.json.
void write_sweep_table(const std::vector<SweepRow>& rows, const std::filesystem::path& dir);

struct SeedAggregate {
  double mean = 0;
  double std = 0;  // population standard deviation
  std::size_t n_seeds = 0;

  nlohmann::json to_json() const;
};

struct SeedSummary {
  SeedAggregate mean_ap;
  SeedAggregate mean_ap50;
  std::map<std::string, SeedAggregate> category_ap;
  std::map<std::string, SeedAggregate> category_ap50;

  nlohmann::json to_json() const;
};

SeedAggregate aggregate_values(const std::vector<double>& values);
SeedSummary aggregate_seeds(const std::vector<EvalReport>& reports);

}  // namespace medprompt
