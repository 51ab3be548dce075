#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "medprompt/config.hpp"
#include "medprompt/error.hpp"
#include "medprompt/experiment.hpp"
#include "medprompt/fixture.hpp"
#include "medprompt/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace medprompt;

namespace {

constexpr const char* kRootEnv = "MEDPROMPT_DATA_ROOT";

// Flags that override ExperimentConfig fields, shared by every verb that runs
// prompts or grounding.
struct ConfigFlags {
  std::string config;
  std::string mode;
  std::string manifest, dataset_root, split, prompts, template_name, form, encoder, output_dir;
  std::vector<std::string> attributes;
  std::optional<std::size_t> k, shots, epochs, max_detections, parallelism;
  std::optional<std::uint64_t> seed;
  std::optional<int> input_size;
  std::optional<double> lr, text_lr, weight_decay, score_threshold, nms_iou;
  std::string mlm_vocab, mlm_endpoint, vqa_answers, vqa_endpoint;
  bool freeze_image = false, freeze_text = false;

  void add(CLI::App& app, bool with_mode = true) {
    app.add_option("--config", config, "experiment config JSON");
    app.add_option("--manifest", manifest, "dataset manifest");
    app.add_option("--dataset-root", dataset_root, "dataset directory (default: manifest directory)");
    app.add_option("--split", split, "evaluation split");
    app.add_option("--prompts", prompts, "prompt config JSON");
    if (with_mode)
      app.add_option("--mode", mode, "prompt mode")
          ->check(CLI::IsMember({"default_class", "manual", "mlm", "vqa", "hybrid"}));
    app.add_option("--template", template_name, "template name in the prompt config");
    app.add_option("--form", form, "sentence or phrases")->check(CLI::IsMember({"sentence", "phrases"}));
    app.add_option("--attributes", attributes, "restrict attribute slots");
    app.add_option("--k", k, "mlm candidates per slot");
    app.add_option("--mlm-vocab", mlm_vocab, "mock masked-LM table");
    app.add_option("--mlm-endpoint", mlm_endpoint, "masked-LM HTTP endpoint");
    app.add_option("--vqa-answers", vqa_answers, "mock VQA answer table");
    app.add_option("--vqa-endpoint", vqa_endpoint, "VQA HTTP endpoint");
    app.add_option("--encoder", encoder, "encoder JSON");
    app.add_option("--input-size", input_size);
    app.add_flag("--freeze-image", freeze_image, "freeze image-side parameters");
    app.add_flag("--freeze-text", freeze_text, "freeze text-side parameters");
    app.add_option("--shots", shots, "few-shot training images (omit for zero-shot)");
    app.add_option("--seed", seed, "few-shot sampling seed");
    app.add_option("--epochs", epochs);
    app.add_option("--lr", lr, "image-side learning rate");
    app.add_option("--text-lr", text_lr, "text-side learning rate");
    app.add_option("--weight-decay", weight_decay);
    app.add_option("--score-threshold", score_threshold);
    app.add_option("--nms-iou", nms_iou);
    app.add_option("--max-detections", max_detections);
    app.add_option("--output-dir", output_dir);
    app.add_option("--parallelism", parallelism);
  }

  ExperimentConfig build(std::optional<PromptMode> mode = {}) const {
    if (!mode && !this->mode.empty()) mode = parse_prompt_mode(this->mode);
    ExperimentConfig c;
    if (!config.empty()) {
      c = ExperimentConfig::load(config);
    } else {
      c.base_dir = fs::current_path();
      c.prompt_mode = PromptMode::kDefaultClass;
    }
    if (!manifest.empty()) c.manifest = manifest;
    if (!dataset_root.empty()) c.dataset_root = fs::path(dataset_root);
    if (!split.empty()) c.eval_split = split;
    if (!prompts.empty()) c.prompt_config = fs::path(prompts);
    if (!template_name.empty()) c.template_name = template_name;
    if (!form.empty()) c.prompt_form = form == "phrases" ? PromptForm::kPhrases : PromptForm::kSentence;
    if (!attributes.empty()) c.attributes = attributes;
    if (mode) {
      c.prompt_mode = *mode;
      if (*mode != PromptMode::kMlm) c.k.reset();
      else if (!c.k) c.k = 3;
    }
    if (k) c.k = *k;
    if (!mlm_vocab.empty() || !mlm_endpoint.empty()) {
      MaskedLmBackendDescriptor d;
      if (!mlm_endpoint.empty()) {
        d.kind = MaskedLmBackendDescriptor::Kind::kExternal;
        d.endpoint = mlm_endpoint;
      } else {
        d.vocabulary_path = fs::absolute(mlm_vocab);
      }
      c.mlm_backend = d;
    }
    if (!vqa_answers.empty() || !vqa_endpoint.empty()) {
      VqaBackendDescriptor d;
      if (!vqa_endpoint.empty()) {
        d.kind = VqaBackendDescriptor::Kind::kExternal;
        d.endpoint = vqa_endpoint;
      } else {
        d.answers_path = fs::absolute(vqa_answers);
      }
      c.vqa_backend = d;
    }
    if (!encoder.empty()) c.encoder = encoder;
    if (input_size) c.input_size = *input_size;
    if (freeze_image) c.freeze_image_layers = true;
    if (freeze_text) c.freeze_text_layers = true;
    if (shots) c.shots = FewShotSpec{*shots, seed.value_or(c.shots ? c.shots->seed : 0)};
    else if (seed && c.shots) c.shots->seed = *seed;
    if (epochs) c.epochs = *epochs;
    if (lr) c.learning_rate = *lr;
    if (text_lr) c.text_learning_rate = *text_lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (score_threshold) c.decode.score_threshold = *score_threshold;
    if (nms_iou) c.decode.nms_iou = *nms_iou;
    if (max_detections) c.decode.max_detections = *max_detections;
    if (!output_dir.empty()) c.output_dir = fs::absolute(output_dir);
    if (parallelism) c.parallelism = *parallelism;
    return c;
  }
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + p.string());
  return json::parse(in);
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream os(out);
  if (!os) throw Error(ErrorCode::kIoFailure, "cannot write " + out);
  os << j.dump(2) << "\n";
}

const std::vector<AnnotationRecord>& split_records(const ExperimentInputs& in, const std::string& split) {
  auto it = in.dataset.splits.find(split);
  if (it == in.dataset.splits.end()) throw Error(ErrorCode::kMissingSplit, "dataset has no split '" + split + "'");
  return it->second;
}

const AnnotationRecord& find_image(const ExperimentInputs& in, const std::string& id) {
  for (const auto& [split, records] : in.dataset.splits)
    for (const auto& r : records)
      if (r.image.id == id) return r;
  throw Error(ErrorCode::kNotFound, "unknown image '" + id + "'");
}

// Same result shape as POST /api/prompts/auto.
json promptgen(const ExperimentConfig& config, const std::vector<std::string>& image_ids) {
  const ExperimentInputs in = load_inputs(config);
  json prompts = json::array();
  if (image_specific(config.prompt_mode)) {
    std::vector<ImageRef> images;
    if (image_ids.empty())
      for (const auto& r : split_records(in, config.eval_split)) images.push_back(r.image);
    for (const auto& id : image_ids) images.push_back(find_image(in, id).image);
    for (const auto& im : images) prompts.push_back(to_json(image_prompt(in.request, in.backends(), im)));
  } else {
    for (const auto& p : shared_prompts(in.request, in.backends(), config.parallelism)) prompts.push_back(to_json(p));
  }
  return {{"mode", to_string(config.prompt_mode)}, {"prompts", prompts}};
}

json ground(const ExperimentConfig& config, const std::string& image_id, const std::string& text,
            const std::string& spans, std::size_t rank) {
  const ExperimentInputs in = load_inputs(config);
  const AnnotationRecord& rec = find_image(in, image_id);
  ComposedPrompt prompt;
  if (!text.empty()) {
    prompt = prompt_from_text(text, spans_from_json(json::parse(spans)));
  } else if (image_specific(config.prompt_mode)) {
    prompt = image_prompt(in.request, in.backends(), rec.image);
  } else {
    const auto shared = shared_prompts(in.request, in.backends());
    if (rank < 1 || rank > shared.size()) throw Error(ErrorCode::kInvalidArgument, "rank unavailable");
    prompt = shared[rank - 1];
  }
  const auto grounder = make_grounder(in.encoder, config.proposals, config.input_size);
  const GroundingResult g = grounder->ground(rec.image, prompt, config.decode.params());
  json dets = json::array();
  for (const auto& d : g.detections) dets.push_back(detection_to_json(d));
  return {{"image_id", image_id}, {"prompt", to_json(prompt)}, {"detections", dets}};
}

std::vector<CategorySpec> document_categories(const json& doc) {
  std::vector<CategorySpec> cats;
  for (const auto& c : doc.at("categories")) cats.push_back(CategorySpec{c.at("name").get<std::string>(), {}, {}, {}});
  return cats;
}

json eval(const std::string& detections, const std::string& annotations, const std::string& digest) {
  const json doc = read_json(annotations);
  const auto cats = document_categories(doc);
  const auto records = parse_annotations(doc, fs::path(annotations).parent_path(), cats);
  std::vector<std::string> names;
  for (const auto& c : cats) names.push_back(c.name);
  json dj = read_json(detections);
  if (dj.contains("detections") && dj.at("detections").is_object()) dj = dj.at("detections");
  return evaluate(detections_from_json(dj), ground_truth_of(records), names, digest).to_json();
}

json sweep_ladder(const ExperimentConfig& config, const std::string& ladder, const std::string& out) {
  const ExperimentInputs in = load_inputs(config);
  std::vector<SweepVariant> variants;
  for (auto& row : load_ladder(ladder)) variants.push_back(SweepVariant::fixed(row.label, row.prompt));
  const auto grounder = make_grounder(in.encoder, config.proposals, config.input_size);
  const auto rows = prompt_sweep(variants, split_records(in, config.eval_split), in.category_names(), *grounder,
                                 config.decode.params(), config_digest(config), config.parallelism);
  write_sweep_table(rows, out);
  json summary = json::array();
  for (const auto& r : rows) {
    json s{{"label", r.label}};
    if (r.report) s["mean_ap"] = r.report->mean_ap, s["mean_ap50"] = r.report->mean_ap50;
    if (r.error) s["error"] = *r.error;
    summary.push_back(s);
  }
  return {{"directory", out}, {"rows", summary}};
}

json respond(const ServiceResponse& r) {
  if (r.status >= 400) {
    const json j = r.json();
    throw std::runtime_error(j.value("error", "error") + ": " + j.value("message", ""));
  }
  return r.json();
}

std::string data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kRootEnv)) return env;
  throw Error(ErrorCode::kInvalidArgument, std::string("pass --root or set ") + kRootEnv);
}

HttpServer* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-aware prompt generation, grounding and evaluation for medical detection"};
  app.require_subcommand(1);

  ConfigFlags pg_flags, ground_flags, sweep_flags, run_flags;

  auto* pg = app.add_subcommand("promptgen", "generate prompts (manual|mlm|vqa|hybrid|default_class)");
  std::string pg_mode, pg_out;
  std::vector<std::string> pg_images;
  pg->add_option("mode", pg_mode)->required()->check(CLI::IsMember({"default_class", "manual", "mlm", "vqa", "hybrid"}));
  pg->add_option("--image", pg_images, "image ids for vqa/hybrid (default: every image of the split)");
  pg->add_option("-o,--out", pg_out, "write JSON here instead of stdout");
  pg_flags.add(*pg, false);

  auto* gr = app.add_subcommand("ground", "ground one image");
  std::string gr_image, gr_text, gr_spans = "[]", gr_out;
  std::size_t gr_rank = 1;
  gr->add_option("--image", gr_image)->required();
  gr->add_option("--text", gr_text, "prompt text (default: generate from the config)");
  gr->add_option("--spans", gr_spans, "JSON spans for --text");
  gr->add_option("--rank", gr_rank, "mlm rank to use");
  gr->add_option("-o,--out", gr_out);
  ground_flags.add(*gr);

  auto* ev = app.add_subcommand("eval", "evaluate detections against canonical annotations");
  std::string ev_dets, ev_ann, ev_digest, ev_out;
  ev->add_option("--detections", ev_dets)->required()->check(CLI::ExistingFile);
  ev->add_option("--annotations", ev_ann)->required()->check(CLI::ExistingFile);
  ev->add_option("--digest", ev_digest, "config digest recorded in the report");
  ev->add_option("-o,--out", ev_out);

  auto* sw = app.add_subcommand("sweep", "compare prompt variants under identical settings");
  std::string sw_ladder, sw_request, sw_root, sw_out;
  sw->add_option("--ladder", sw_ladder, "prompt ladder JSON")->check(CLI::ExistingFile);
  sw->add_option("--request", sw_request, "sweep request JSON in the HTTP API format")->check(CLI::ExistingFile);
  sw->add_option("--root", sw_root, "data root for --request");
  sw->add_option("-o,--out", sw_out, "output directory for --ladder");
  sweep_flags.add(*sw);

  auto* ds = app.add_subcommand("dataset", "dataset tools");
  ds->require_subcommand(1);
  auto* conv = ds->add_subcommand("convert", "convert masks or re-export annotations in canonical form");
  std::string cv_images, cv_masks, cv_category, cv_mode = "binary", cv_from, cv_manifest, cv_out;
  int cv_min_area = 10;
  conv->add_option("--images", cv_images, "directory of <stem>.ppm images");
  conv->add_option("--masks", cv_masks, "directory of <stem>.pgm masks");
  conv->add_option("--category", cv_category, "category for mask boxes");
  conv->add_option("--mode", cv_mode)->check(CLI::IsMember({"binary", "instance"}));
  conv->add_option("--min-area", cv_min_area);
  conv->add_option("--from", cv_from, "existing canonical annotations to validate and re-export")->check(CLI::ExistingFile);
  conv->add_option("--manifest", cv_manifest, "manifest whose categories to use")->check(CLI::ExistingFile);
  conv->add_option("-o,--out", cv_out)->required();

  auto* run = app.add_subcommand("run", "run an experiment and persist its artifact");
  run_flags.add(*run);

  auto* sv = app.add_subcommand("serve", "serve the HTTP API");
  std::string sv_root, sv_host = "127.0.0.1";
  int sv_port = 8080;
  sv->add_option("--root", sv_root, std::string("data root (default: $") + kRootEnv + ")");
  sv->add_option("--host", sv_host);
  sv->add_option("--port", sv_port);

  auto* fx = app.add_subcommand("fixture", "write the synthetic fixture");
  std::string fx_out;
  fx->add_option("-o,--out", fx_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pg) {
      emit(promptgen(pg_flags.build(parse_prompt_mode(pg_mode)), pg_images), pg_out);
    } else if (*gr) {
      emit(ground(ground_flags.build(), gr_image, gr_text, gr_spans, gr_rank), gr_out);
    } else if (*ev) {
      emit(eval(ev_dets, ev_ann, ev_digest), ev_out);
    } else if (*sw) {
      if (!sw_request.empty()) {
        const PromptService service(data_root(sw_root));
        const json created = respond(service.handle("POST", "/api/sweeps", {}, read_json(sw_request).dump()));
        emit(respond(service.handle("GET", "/api/sweeps/" + created.at("id").get<std::string>(), {}, "")), sw_out);
      } else if (!sw_ladder.empty()) {
        if (sw_out.empty()) throw Error(ErrorCode::kInvalidArgument, "--ladder needs --out");
        emit(sweep_ladder(sweep_flags.build(), sw_ladder, sw_out), "");
      } else {
        throw Error(ErrorCode::kInvalidArgument, "sweep needs --ladder or --request");
      }
    } else if (*conv) {
      std::vector<CategorySpec> cats;
      if (!cv_manifest.empty()) cats = DatasetManifest::load(cv_manifest).categories;
      std::vector<AnnotationRecord> records;
      if (!cv_from.empty()) {
        const json doc = read_json(cv_from);
        if (cats.empty()) cats = document_categories(doc);
        records = parse_annotations(doc, fs::path(cv_from).parent_path(), cats);
      } else {
        if (cv_images.empty() || cv_masks.empty() || cv_category.empty())
          throw Error(ErrorCode::kInvalidArgument, "mask conversion needs --images, --masks and --category");
        if (cats.empty()) cats.push_back(CategorySpec{cv_category, {}, {}, {}});
        records = convert_mask_split(cv_images, cv_masks, cv_category, parse_mask_mode(cv_mode), cv_min_area);
      }
      for (const auto& r : records) r.validate(cats);
      fs::path out = fs::absolute(cv_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      export_canonical(records, cats, out);
      std::cout << json{{"images", records.size()}, {"boxes", count_boxes(records)}, {"out", out.string()}}.dump(2) << "\n";
    } else if (*run) {
      const RunArtifact art = run_experiment(run_flags.build());
      std::cout << json{{"config_digest", art.config_digest},
                        {"directory", art.directory.string()},
                        {"mean_ap", art.report.mean_ap},
                        {"mean_ap50", art.report.mean_ap50}}
                       .dump(2)
                << "\n";
    } else if (*sv) {
      auto service = std::make_shared<const PromptService>(data_root(sv_root));
      HttpServer server(service);
      const int port = server.bind(sv_host, sv_port);
      g_server = &server;
      std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
      std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
      std::cerr << "listening on http://" << sv_host << ":" << port << "\n";
      server.listen();
      g_server = nullptr;
    } else if (*fx) {
      const FixturePaths p = write_synthetic_fixture(fx_out);
      std::cout << json{{"root", p.root.string()}, {"experiment", p.experiment.string()}}.dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
