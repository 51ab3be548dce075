#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/dataset.hpp"
#include "medprompt/grounder.hpp"
#include "medprompt/mlm.hpp"
#include "medprompt/vqa.hpp"

namespace medprompt {

enum class PromptMode { kDefaultClass, kManual, kMlm, kVqa, kHybrid };
std::string_view to_string(PromptMode m);
PromptMode parse_prompt_mode(std::string_view s);

// sentence: composed text as is; phrases: rearranged comma-phrase form.
enum class PromptForm { kSentence, kPhrases };

struct DecodeConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;

  DecodeParams params() const { return {score_threshold, nms_iou, max_detections}; }
};

// Relative paths are resolved against `base_dir` (the config file's
// directory) when used; they are stored and hashed as written.
struct ExperimentConfig {
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> dataset_root;  // default: manifest directory
  std::string eval_split = "test";
  std::string train_split = "train";
  std::string val_split = "val";

  PromptMode prompt_mode = PromptMode::kManual;
  PromptForm prompt_form = PromptForm::kSentence;
  std::optional<std::filesystem::path> prompt_config;
  std::string template_name = "default";
  std::vector<std::string> attributes;  // restricts category slots when non-empty
  std::optional<std::size_t> k;         // mlm only

  std::optional<MaskedLmBackendDescriptor> mlm_backend;
  std::optional<VqaBackendDescriptor> vqa_backend;
  std::filesystem::path encoder;
  ProposalGrid proposals;

  int input_size = 800;
  bool freeze_image_layers = false;
  bool freeze_text_layers = false;
  std::optional<FewShotSpec> shots;  // absent: zero-shot
  std::size_t epochs = 200;
  double learning_rate = 1e-4;
  double text_learning_rate = 1e-5;
  double weight_decay = 0.05;
  double lr_decay_factor = 0.1;
  std::size_t plateau_patience = 3;
  double plateau_min_delta = 1e-4;
  std::size_t validate_every = 10;  // epochs between validation passes

  DecodeConfig decode;
  std::filesystem::path output_dir = "runs";
  std::size_t parallelism = 1;

  std::filesystem::path base_dir;  // not serialized

  void validate() const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j, std::filesystem::path base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
};

// FNV-1a 64 of the canonical (sorted-key, compact) JSON of the config
// without output_dir and parallelism, as 16 hex digits.
std::string config_digest(const ExperimentConfig& config);
std::string json_digest(const nlohmann::json& j);

}  // namespace medprompt
