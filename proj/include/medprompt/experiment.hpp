#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/config.hpp"
#include "medprompt/eval.hpp"
#include "medprompt/prompt_config.hpp"

namespace medprompt {

// What to generate and from which values.
struct PromptRequest {
  PromptMode mode = PromptMode::kManual;
  PromptForm form = PromptForm::kSentence;
  std::vector<CategorySpec> categories;
  PromptTemplate tmpl{"[OBJ]"};
  std::map<std::string, AttributeMap> values;        // manual mode
  std::map<std::string, std::string> heads;           // phrases form
  std::size_t k = 1;                                  // mlm mode
  StopList stop_list = StopList::defaults();
  std::string cloze_pattern = std::string(kDefaultClozePattern);
  QuestionSet questions = default_questions();
};

struct PromptBackends {
  const MaskedLmBackend* mlm = nullptr;
  const VqaBackend* vqa = nullptr;
};

bool image_specific(PromptMode mode);

// Prompts shared by every image: one for default_class and manual, one per
// available rank for mlm. Image-specific modes return nothing.
std::vector<ComposedPrompt> shared_prompts(const PromptRequest& request, const PromptBackends& backends,
                                           std::size_t parallelism = 1);

// One prompt for `image` in vqa or hybrid mode.
ComposedPrompt image_prompt(const PromptRequest& request, const PromptBackends& backends, const ImageRef& image);

// Category list after the optional attribute restriction.
std::vector<CategorySpec> restrict_attributes(std::vector<CategorySpec> categories,
                                              const std::vector<std::string>& attributes);

struct RunArtifact {
  std::string config_digest;
  nlohmann::json config;
  std::vector<ComposedPrompt> prompts;  // shared prompts, or one per evaluated image
  ImageDetections detections;           // headline variant (mlm rank 1)
  EvalReport report;
  std::vector<EvalReport> rank_reports;  // mlm: one per rank
  std::vector<double> train_losses;
  std::vector<std::string> log;
  std::filesystem::path directory;
};

// Generates prompts, optionally fine-tunes the toy encoder on sampled shots,
// grounds and evaluates the eval split, and persists config.json,
// prompts.json, detections.json, report.json and log.txt under
// output_dir/<digest>/. Holds an exclusive lock on output_dir meanwhile.
RunArtifact run_experiment(const ExperimentConfig& config);

// Shared loading used by run_experiment, the CLI and the service.
struct ExperimentInputs {
  DatasetManifest manifest;
  LoadedDataset dataset;
  PromptRequest request;
  std::unique_ptr<MaskedLmBackend> mlm;
  std::unique_ptr<VqaBackend> vqa;
  EncoderDescriptor encoder;

  PromptBackends backends() const { return {mlm.get(), vqa.get()}; }
  std::vector<std::string> category_names() const;
};

ExperimentInputs load_inputs(const ExperimentConfig& config);

// Reads a persisted run directory back as one JSON object with keys config,
// prompts, detections, report, log (and ranks when present).
nlohmann::json read_run_artifact(const std::filesystem::path& directory);
std::vector<std::string> list_runs(const std::filesystem::path& output_dir);

}  // namespace medprompt
