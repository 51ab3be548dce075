#include "medprompt/experiment.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

#include "medprompt/error.hpp"
#include "medprompt/parallel.hpp"

namespace medprompt {

namespace fs = std::filesystem;
using nlohmann::json;

bool image_specific(PromptMode mode) { return mode == PromptMode::kVqa || mode == PromptMode::kHybrid; }

namespace {

ComposedPrompt finish(const PromptRequest& r, ComposedPrompt p) {
  if (r.form == PromptForm::kPhrases) return rearrange_prompt(p, r.categories, r.heads);
  return p;
}

class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    const std::string path = (dir / ".lock").string();
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0 || ::flock(fd_, LOCK_EX) != 0) throw Error(ErrorCode::kIoFailure, "cannot lock " + path);
  }
  ~DirectoryLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "missing " + path.string());
  return json::parse(in);
}

json prompts_json(const std::vector<ComposedPrompt>& prompts) {
  json arr = json::array();
  for (const auto& p : prompts) arr.push_back(to_json(p));
  return arr;
}

struct Logger {
  std::vector<std::string>& lines;
  template <typename... Parts>
  void operator()(const Parts&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    lines.push_back(os.str());
  }
};

}  // namespace

std::vector<CategorySpec> restrict_attributes(std::vector<CategorySpec> categories,
                                              const std::vector<std::string>& attributes) {
  if (attributes.empty()) return categories;
  for (auto& c : categories)
    std::erase_if(c.attribute_slots, [&](const AttributeName& a) {
      return std::find(attributes.begin(), attributes.end(), a.name()) == attributes.end();
    });
  return categories;
}

std::vector<ComposedPrompt> shared_prompts(const PromptRequest& r, const PromptBackends& backends,
                                           std::size_t parallelism) {
  switch (r.mode) {
    case PromptMode::kDefaultClass: {
      std::vector<PromptEntry> entries;
      for (const auto& c : r.categories) entries.push_back({CategorySpec{c.name, {}, {}, SynonymDisplay::kNameOnly}, {}, {}});
      return {compose_prompt(entries, PromptTemplate::class_name(r.tmpl.joiner()))};
    }
    case PromptMode::kManual: {
      std::vector<PromptEntry> entries;
      for (const auto& c : r.categories) {
        auto it = r.values.find(c.name);
        entries.push_back({c, it == r.values.end() ? AttributeMap{} : it->second, {}});
      }
      return {finish(r, compose_prompt(entries, r.tmpl))};
    }
    case PromptMode::kMlm: {
      if (!backends.mlm) throw Error(ErrorCode::kConfigInvalid, "mlm mode needs an mlm backend");
      MlmOptions o;
      o.k = r.k;
      o.stop_list = r.stop_list;
      o.cloze_pattern = r.cloze_pattern;
      o.parallelism = parallelism;
      auto gen = generate_mlm_prompts(r.categories, r.tmpl, *backends.mlm, o);
      if (gen.prompts.empty()) throw Error(ErrorCode::kEmptyDistribution, "no slot produced any usable prediction");
      for (auto& p : gen.prompts) p = finish(r, std::move(p));
      return gen.prompts;
    }
    case PromptMode::kVqa:
    case PromptMode::kHybrid:
      return {};
  }
  return {};
}

ComposedPrompt image_prompt(const PromptRequest& r, const PromptBackends& backends, const ImageRef& image) {
  if (!backends.vqa) throw Error(ErrorCode::kConfigInvalid, "image-specific prompts need a vqa backend");
  if (r.mode == PromptMode::kVqa) return finish(r, generate_vqa_prompt(image, r.categories, r.questions, *backends.vqa, r.tmpl));
  if (r.mode == PromptMode::kHybrid) {
    if (!backends.mlm) throw Error(ErrorCode::kConfigInvalid, "hybrid mode needs an mlm backend");
    HybridSources s{*backends.vqa, *backends.mlm, r.cloze_pattern, r.stop_list};
    return finish(r, generate_hybrid_prompt(image, r.categories, r.questions, s, r.tmpl));
  }
  throw Error(ErrorCode::kInvalidMode, std::string(to_string(r.mode)) + " prompts are not image-specific");
}

std::vector<std::string> ExperimentInputs::category_names() const {
  std::vector<std::string> out;
  for (const auto& c : manifest.categories) out.push_back(c.name);
  return out;
}

ExperimentInputs load_inputs(const ExperimentConfig& config) {
  config.validate();
  ExperimentInputs in;
  const fs::path manifest_path = config.resolve(config.manifest);
  in.manifest = DatasetManifest::load(manifest_path);
  const fs::path root = config.dataset_root ? config.resolve(*config.dataset_root) : manifest_path.parent_path();
  in.dataset = load_dataset(in.manifest, root, false);

  PromptRequest& r = in.request;
  r.mode = config.prompt_mode;
  r.form = config.prompt_form;
  r.k = config.k.value_or(1);
  r.categories = in.manifest.categories;
  if (config.prompt_config) {
    const PromptConfig pc = PromptConfig::load(config.resolve(*config.prompt_config));
    for (auto& c : r.categories)
      for (const auto& d : pc.categories)
        if (d.name == c.name) c = d;
    r.tmpl = pc.get_template(config.template_name);
    r.values = pc.values;
    r.heads = pc.heads;
  } else {
    r.tmpl = PromptTemplate::class_name();
  }
  r.categories = restrict_attributes(std::move(r.categories), config.attributes);

  if (config.mlm_backend) {
    auto d = *config.mlm_backend;
    if (d.vocabulary_path) d.vocabulary_path = config.resolve(*d.vocabulary_path);
    in.mlm = make_mlm_backend(d);
  }
  if (config.vqa_backend) {
    auto d = *config.vqa_backend;
    if (d.answers_path) d.answers_path = config.resolve(*d.answers_path);
    in.vqa = make_vqa_backend(d);
  }
  in.encoder = load_encoder(config.resolve(config.encoder), {config.freeze_image_layers, config.freeze_text_layers});
  return in;
}

namespace {

std::vector<ComposedPrompt> prompts_for(const ExperimentInputs& in, const std::vector<AnnotationRecord>& records,
                                        const std::vector<ComposedPrompt>& shared, std::size_t rank,
                                        std::size_t parallelism) {
  if (!image_specific(in.request.mode)) return std::vector<ComposedPrompt>(records.size(), shared.at(rank));
  return parallel_map(records.size(), parallelism,
                      [&](std::size_t i) { return image_prompt(in.request, in.backends(), records[i].image); });
}

ImageDetections ground_all(const Grounder& grounder, const std::vector<AnnotationRecord>& records,
                           const std::vector<ComposedPrompt>& prompts, const DecodeParams& params,
                           std::size_t parallelism) {
  auto dets = parallel_map(records.size(), parallelism, [&](std::size_t i) {
    return grounder.ground(records[i].image, prompts[i], params).detections;
  });
  ImageDetections out;
  for (std::size_t i = 0; i < records.size(); ++i) out[records[i].image.id] = std::move(dets[i]);
  return out;
}

const std::vector<AnnotationRecord>& split_of(const ExperimentInputs& in, const std::string& split) {
  auto it = in.dataset.splits.find(split);
  if (it == in.dataset.splits.end())
    throw Error(ErrorCode::kMissingSplit, in.manifest.name + " has no split '" + split + "'");
  return it->second;
}

EncoderDescriptor fine_tune(const ExperimentConfig& config, const ExperimentInputs& in,
                            const std::vector<ComposedPrompt>& shared, RunArtifact& art, Logger& log) {
  if (in.encoder.kind != EncoderDescriptor::Kind::kToy)
    throw Error(ErrorCode::kConfigInvalid, "fine-tuning needs the toy encoder");
  const auto shots = sample_few_shot(split_of(in, config.train_split), *config.shots);
  log("few-shot: ", shots.size(), " training images (", config.shots->label(), ", seed ", config.shots->seed, ")");

  const auto train_prompts = prompts_for(in, shots, shared, 0, config.parallelism);
  std::vector<RgbImage> images;
  for (const auto& r : shots) images.push_back(read_ppm(r.image.uri));
  std::vector<TrainingSample> batch;
  for (std::size_t i = 0; i < shots.size(); ++i) {
    TrainingSample s;
    s.image = &images[i];
    s.proposals = config.proposals.generate(images[i].width, images[i].height);
    s.prompt = train_prompts[i];
    s.targets = build_targets(s.proposals, static_cast<Index>(s.proposals.size()), s.prompt.spans,
                              static_cast<Index>(s.prompt.tokens().size()), shots[i].boxes);
    batch.push_back(std::move(s));
  }

  const std::vector<AnnotationRecord>* val = nullptr;
  if (auto it = in.dataset.splits.find(config.val_split); it != in.dataset.splits.end() && !it->second.empty())
    val = &it->second;
  std::vector<ComposedPrompt> val_prompts;
  if (val) val_prompts = prompts_for(in, *val, shared, 0, config.parallelism);

  EncoderDescriptor enc = in.encoder;
  StepOptions opts{config.learning_rate, config.text_learning_rate, config.weight_decay};
  double best = -1;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto step = toy_train_step(std::move(enc), batch, opts);
    enc = std::move(step.descriptor);
    art.train_losses.push_back(step.loss);
    if (!val || epoch % config.validate_every != 0) continue;
    ToyGrounder g(std::make_shared<const EncoderDescriptor>(enc), config.proposals);
    const auto dets = ground_all(g, *val, val_prompts, config.decode.params(), config.parallelism);
    const double score = evaluate(dets, ground_truth_of(*val), in.category_names(), "").mean_ap;
    if (score >= best + config.plateau_min_delta) {
      best = score;
      stale = 0;
    } else if (++stale >= config.plateau_patience) {
      opts.image_learning_rate *= config.lr_decay_factor;
      opts.text_learning_rate *= config.lr_decay_factor;
      stale = 0;
      log("epoch ", epoch, ": validation mAP plateaued at ", best, ", learning rate now ", opts.image_learning_rate);
    }
  }
  if (!art.train_losses.empty())
    log("training loss ", art.train_losses.front(), " -> ", art.train_losses.back(), " over ", config.epochs, " epochs");
  return enc;
}

}  // namespace

RunArtifact run_experiment(const ExperimentConfig& config) {
  config.validate();
  RunArtifact art;
  art.config = config.to_json();
  art.config_digest = config_digest(config);
  const fs::path out_root = config.resolve(config.output_dir);
  std::error_code ec;
  fs::create_directories(out_root, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + out_root.string() + ": " + ec.message());
  DirectoryLock lock(out_root);
  art.directory = out_root / art.config_digest;
  fs::create_directories(art.directory, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + art.directory.string());

  Logger log{art.log};
  auto flush_log = [&] {
    std::ofstream out(art.directory / "log.txt", std::ios::binary);
    for (const auto& l : art.log) out << l << '\n';
  };

  try {
    log("config ", art.config_digest, ", mode ", to_string(config.prompt_mode));
    write_json(art.directory / "config.json", art.config);
    const ExperimentInputs in = load_inputs(config);
    for (const auto& w : in.dataset.warnings) log("warning: ", w);
    const auto& records = split_of(in, config.eval_split);
    log("dataset ", in.manifest.name, ": ", records.size(), " ", config.eval_split, " images");

    const auto shared = shared_prompts(in.request, in.backends(), config.parallelism);
    const std::size_t ranks = image_specific(config.prompt_mode) ? 1 : shared.size();

    EncoderDescriptor encoder = config.shots ? fine_tune(config, in, shared, art, log) : in.encoder;
    const auto grounder = make_grounder(encoder, config.proposals, config.input_size);
    const ImageGroundTruth gt = ground_truth_of(records);

    for (std::size_t rank = 0; rank < ranks; ++rank) {
      const auto prompts = prompts_for(in, records, shared, rank, config.parallelism);
      auto dets = ground_all(*grounder, records, prompts, config.decode.params(), config.parallelism);
      EvalReport report = evaluate(dets, gt, in.category_names(), art.config_digest);
      log(ranks > 1 ? "rank " + std::to_string(rank + 1) + ": " : "", "mAP ", report.mean_ap, ", mAP50 ",
          report.mean_ap50);
      art.rank_reports.push_back(report);
      if (rank == 0) {
        art.report = std::move(report);
        art.detections = std::move(dets);
        art.prompts = image_specific(config.prompt_mode) ? prompts : shared;
      }
    }

    write_json(art.directory / "prompts.json", prompts_json(art.prompts));
    write_json(art.directory / "detections.json", detections_to_json(art.detections));
    write_json(art.directory / "report.json", art.report.to_json());
    if (art.rank_reports.size() > 1) {
      json ranks_json = json::array();
      for (const auto& r : art.rank_reports) ranks_json.push_back(r.to_json());
      write_json(art.directory / "ranks.json", ranks_json);
    }
    if (!art.train_losses.empty()) write_json(art.directory / "train_losses.json", art.train_losses);
  } catch (const std::exception& e) {
    log("error: ", e.what());
    flush_log();
    throw;
  }
  flush_log();
  return art;
}

json read_run_artifact(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kNotFound, "no run at " + dir.string());
  json j{{"config", read_json(dir / "config.json")},
         {"prompts", read_json(dir / "prompts.json")},
         {"detections", read_json(dir / "detections.json")},
         {"report", read_json(dir / "report.json")},
         {"digest", dir.filename().string()}};
  if (fs::exists(dir / "ranks.json")) j["ranks"] = read_json(dir / "ranks.json");
  std::ifstream log(dir / "log.txt");
  std::string line;
  j["log"] = json::array();
  while (std::getline(log, line)) j["log"].push_back(line);
  return j;
}

std::vector<std::string> list_runs(const fs::path& output_dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(output_dir)) return out;
  for (const auto& e : fs::directory_iterator(output_dir))
    if (e.is_directory() && fs::exists(e.path() / "report.json")) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace medprompt
