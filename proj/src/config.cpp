#include "medprompt/config.hpp"

#include <fstream>

#include "medprompt/error.hpp"
#include "medprompt/text.hpp"

namespace medprompt {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(PromptMode m) {
  switch (m) {
    case PromptMode::kDefaultClass: return "default_class";
    case PromptMode::kManual: return "manual";
    case PromptMode::kMlm: return "mlm";
    case PromptMode::kVqa: return "vqa";
    case PromptMode::kHybrid: return "hybrid";
  }
  return "manual";
}

PromptMode parse_prompt_mode(std::string_view s) {
  for (auto m : {PromptMode::kDefaultClass, PromptMode::kManual, PromptMode::kMlm, PromptMode::kVqa, PromptMode::kHybrid})
    if (to_string(m) == s) return m;
  throw Error(ErrorCode::kInvalidMode, "unknown prompt mode '" + std::string(s) + "'");
}

void ExperimentConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kConfigInvalid, m); };
  if (manifest.empty()) bad("dataset manifest is required");
  if (encoder.empty()) bad("encoder is required");
  if (eval_split.empty()) bad("eval split is empty");
  if ((prompt_mode == PromptMode::kMlm) != k.has_value()) bad("k must be present iff prompt_mode is mlm");
  if (k && *k < 1) bad("k must be >= 1");
  if ((prompt_mode == PromptMode::kMlm || prompt_mode == PromptMode::kHybrid) && !mlm_backend)
    bad(std::string(to_string(prompt_mode)) + " mode needs an mlm backend");
  if ((prompt_mode == PromptMode::kVqa || prompt_mode == PromptMode::kHybrid) && !vqa_backend)
    bad(std::string(to_string(prompt_mode)) + " mode needs a vqa backend");
  if (prompt_mode == PromptMode::kManual && !prompt_config) bad("manual mode needs a prompt config");
  if (input_size <= 0) bad("input_size must be positive");
  if (!(learning_rate > 0) || !(text_learning_rate > 0)) bad("learning rates must be positive");
  if (weight_decay < 0) bad("weight_decay must be >= 0");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) bad("lr_decay_factor must be in (0, 1]");
  if (plateau_patience < 1 || validate_every < 1) bad("plateau_patience and validate_every must be >= 1");
  if (!(decode.score_threshold >= 0 && decode.score_threshold <= 1)) bad("score_threshold must be in [0, 1]");
  if (!(decode.nms_iou >= 0 && decode.nms_iou <= 1)) bad("nms_iou must be in [0, 1]");
  if (parallelism < 1) bad("parallelism must be >= 1");
  proposals.validate();
  if (mlm_backend) mlm_backend->validate();
  if (vqa_backend) vqa_backend->validate();
}

fs::path ExperimentConfig::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
  return (base_dir / p).lexically_normal();
}

json ExperimentConfig::to_json() const {
  json dataset{{"manifest", manifest.generic_string()},
               {"eval_split", eval_split},
               {"train_split", train_split},
               {"val_split", val_split}};
  if (dataset_root) dataset["root"] = dataset_root->generic_string();

  json prompts{{"mode", to_string(prompt_mode)},
               {"form", prompt_form == PromptForm::kPhrases ? "phrases" : "sentence"},
               {"template", template_name},
               {"attributes", attributes}};
  if (prompt_config) prompts["config"] = prompt_config->generic_string();
  if (k) prompts["k"] = *k;

  json backends{{"encoder", encoder.generic_string()}, {"proposals", proposals.to_json()}};
  if (mlm_backend) backends["mlm"] = mlm_backend->to_json();
  if (vqa_backend) backends["vqa"] = vqa_backend->to_json();

  json training{{"input_size", input_size},
                {"freeze_image_layers", freeze_image_layers},
                {"freeze_text_layers", freeze_text_layers},
                {"shots", shots ? shots->to_json() : json(nullptr)},
                {"epochs", epochs},
                {"learning_rate", learning_rate},
                {"text_learning_rate", text_learning_rate},
                {"weight_decay", weight_decay},
                {"lr_decay_factor", lr_decay_factor},
                {"plateau_patience", plateau_patience},
                {"plateau_min_delta", plateau_min_delta},
                {"validate_every", validate_every}};

  return {{"dataset", dataset},
          {"prompts", prompts},
          {"backends", backends},
          {"training", training},
          {"decode",
           {{"score_threshold", decode.score_threshold},
            {"nms_iou", decode.nms_iou},
            {"max_detections", decode.max_detections}}},
          {"output_dir", output_dir.generic_string()},
          {"parallelism", parallelism}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j, fs::path base) {
  ExperimentConfig c;
  c.base_dir = std::move(base);
  try {
    const json& d = j.at("dataset");
    c.manifest = d.at("manifest").get<std::string>();
    if (d.contains("root")) c.dataset_root = d.at("root").get<std::string>();
    c.eval_split = d.value("eval_split", c.eval_split);
    c.train_split = d.value("train_split", c.train_split);
    c.val_split = d.value("val_split", c.val_split);

    const json p = j.value("prompts", json::object());
    c.prompt_mode = parse_prompt_mode(p.value("mode", "manual"));
    const std::string form = p.value("form", "sentence");
    if (form == "phrases") c.prompt_form = PromptForm::kPhrases;
    else if (form != "sentence") throw Error(ErrorCode::kConfigInvalid, "prompt form must be sentence or phrases");
    if (p.contains("config")) c.prompt_config = p.at("config").get<std::string>();
    c.template_name = p.value("template", c.template_name);
    c.attributes = p.value("attributes", c.attributes);
    if (p.contains("k")) c.k = p.at("k").get<std::size_t>();

    const json& b = j.at("backends");
    c.encoder = b.at("encoder").get<std::string>();
    if (b.contains("proposals")) c.proposals = ProposalGrid::from_json(b.at("proposals"));
    if (b.contains("mlm")) c.mlm_backend = MaskedLmBackendDescriptor::from_json(b.at("mlm"));
    if (b.contains("vqa")) c.vqa_backend = VqaBackendDescriptor::from_json(b.at("vqa"));

    const json t = j.value("training", json::object());
    c.input_size = t.value("input_size", c.input_size);
    c.freeze_image_layers = t.value("freeze_image_layers", c.freeze_image_layers);
    c.freeze_text_layers = t.value("freeze_text_layers", c.freeze_text_layers);
    if (t.contains("shots") && !t.at("shots").is_null()) c.shots = FewShotSpec::from_json(t.at("shots"));
    c.epochs = t.value("epochs", c.epochs);
    c.learning_rate = t.value("learning_rate", c.learning_rate);
    c.text_learning_rate = t.value("text_learning_rate", c.text_learning_rate);
    c.weight_decay = t.value("weight_decay", c.weight_decay);
    c.lr_decay_factor = t.value("lr_decay_factor", c.lr_decay_factor);
    c.plateau_patience = t.value("plateau_patience", c.plateau_patience);
    c.plateau_min_delta = t.value("plateau_min_delta", c.plateau_min_delta);
    c.validate_every = t.value("validate_every", c.validate_every);

    const json dc = j.value("decode", json::object());
    c.decode.score_threshold = dc.value("score_threshold", c.decode.score_threshold);
    c.decode.nms_iou = dc.value("nms_iou", c.decode.nms_iou);
    c.decode.max_detections = dc.value("max_detections", c.decode.max_detections);

    c.output_dir = j.value("output_dir", std::string("runs"));
    c.parallelism = j.value("parallelism", c.parallelism);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

std::string json_digest(const json& j) { return text::hex64(text::fnv1a64(j.dump())); }

std::string config_digest(const ExperimentConfig& config) {
  json j = config.to_json();
  j.erase("output_dir");
  j.erase("parallelism");
  return json_digest(j);
}

}  // namespace medprompt
