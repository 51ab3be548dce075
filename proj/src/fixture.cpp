#include "medprompt/fixture.hpp"

#include <fstream>
#include <numeric>
#include <random>

#include "medprompt/config.hpp"
#include "medprompt/dataset.hpp"
#include "medprompt/error.hpp"
#include "medprompt/mlm.hpp"
#include "medprompt/prompt_config.hpp"
#include "medprompt/vqa.hpp"

namespace medprompt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kImageSize = 64;
constexpr int kCell = 16;

struct FixtureCategory {
  const char* name;
  std::uint8_t rgb[3];
  const char* color;
  const char* shapes[3];
  const char* location;
};

constexpr FixtureCategory kCategories[] = {
    {"cyst", {220, 40, 40}, "red", {"round", "oval", "square"}, "skin"},
    {"nodule", {40, 200, 40}, "green", {"irregular", "lobulated", "smooth"}, "lung"},
};

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

std::vector<CategorySpec> fixture_categories() {
  std::vector<CategorySpec> out;
  for (const auto& c : kCategories)
    out.push_back({c.name, {}, {AttributeName::canonical("shape"), AttributeName::canonical("color"), AttributeName::canonical("location")},
                   SynonymDisplay::kNameOnly});
  return out;
}

json mlm_table() {
  const std::string pattern(kDefaultClozePattern);
  auto key = [&](const char* attr, const char* obj) { return build_cloze(AttributeName::canonical(attr), obj, pattern).text; };
  return {
      {key("color", "cyst"), {{"red", 0.42}, {"pink", 0.21}, {"cyst", 0.12}, {"dark", 0.1}, {"##ish", 0.08}, {".", 0.07}}},
      {key("shape", "cyst"), {{"round", 0.5}, {"oval", 0.3}, {"irregular", 0.2}}},
      {key("location", "cyst"), {{"skin", 0.45}, {"liver", 0.35}, {"kidney", 0.2}}},
      {key("color", "nodule"), {{"green", 0.4}, {"gray", 0.3}, {"white", 0.2}, {"nodule", 0.1}}},
      {key("shape", "nodule"), {{"irregular", 0.45}, {"round", 0.35}, {"lobulated", 0.2}}},
      {key("location", "nodule"), {{"lung", 0.5}, {"thyroid", 0.3}, {"skin", 0.2}}},
  };
}

}  // namespace

ToyParameters aligned_fixture_parameters() {
  ToyParameters p;
  p.bins_per_channel = 2;
  p.hash_buckets = 16;
  p.vocabulary = {"red", "green", "cyst", "nodule"};
  const Index dim = p.histogram_bins();
  p.region_projection = Matrix<double>::Identity(dim, dim);
  p.token_embeddings = Matrix<double>::Zero(static_cast<Index>(p.vocabulary.size() + p.hash_buckets), dim);
  for (std::size_t i = 0; i < std::size(kCategories); ++i) {
    const auto& c = kCategories[i];
    const auto bin = static_cast<Index>(histogram_bin(c.rgb[0], c.rgb[1], c.rgb[2], p.bins_per_channel));
    p.token_embeddings(p.token_row(c.color), bin) = 4.0;
    p.token_embeddings.row(p.token_row(c.name)).setConstant(0.5);
  }
  p.validate();
  return p;
}

ToyParameters random_fixture_parameters(std::uint64_t seed) {
  return ToyParameters::random({"red", "green", "cyst", "nodule"}, 8, 2, 16, seed, 0.1);
}

FixturePaths write_synthetic_fixture(const fs::path& root, const FixtureOptions& options) {
  FixturePaths paths;
  paths.root = root;
  paths.dataset_dir = root / "datasets" / "synthetic";
  paths.manifest = paths.dataset_dir / "manifest.json";
  paths.prompts = root / "prompts.json";
  paths.mlm_vocabulary = root / "backends" / "mlm_vocab.json";
  paths.vqa_answers = root / "backends" / "vqa_answers.json";
  paths.encoder = root / "encoder.json";
  paths.random_encoder = root / "encoder_random.json";
  paths.backends = root / "backends.json";
  paths.experiment = root / "experiment.json";

  const auto categories = fixture_categories();
  std::mt19937_64 rng(options.seed);
  json answers = json::object();
  const QuestionSet questions = default_questions();
  const std::pair<const char*, std::size_t> splits[] = {
      {"train", options.train_images}, {"val", options.val_images}, {"test", options.test_images}};

  DatasetManifest manifest;
  manifest.name = "synthetic";
  manifest.modality = "cytology";
  manifest.categories = categories;
  manifest.label_source = LabelSource::kBbox;
  manifest.layout = "<split>/annotations.json with images under <split>/images";
  std::size_t total_boxes = 0;

  for (const auto& [split, count] : splits) {
    std::vector<AnnotationRecord> records;
    fs::create_directories(paths.dataset_dir / split / "images");
    for (std::size_t n = 0; n < count; ++n) {
      const std::string id = "syn-" + std::string(split) + "-" + std::to_string(n);
      RgbImage img(kImageSize, kImageSize);
      std::vector<int> cells(16);
      std::iota(cells.begin(), cells.end(), 0);
      std::size_t used = 0;
      AnnotationRecord rec{{id, (paths.dataset_dir / split / "images" / (id + ".ppm")).string(), kImageSize, kImageSize}, {}};
      for (const auto& c : kCategories) {
        const auto instances = 1 + bounded_draw(rng, 2);
        for (std::uint64_t k = 0; k < instances; ++k, ++used) {
          std::swap(cells[used], cells[used + bounded_draw(rng, cells.size() - used)]);
          const int x = (cells[used] % 4) * kCell, y = (cells[used] / 4) * kCell;
          img.fill_rect(x, y, x + kCell, y + kCell, c.rgb[0], c.rgb[1], c.rgb[2]);
          rec.boxes.push_back({Box{double(x), double(y), double(x + kCell), double(y + kCell)}, c.name});
        }
      }
      write_ppm(rec.image.uri, img);
      json& qa = answers[id];
      for (std::size_t ci = 0; ci < std::size(kCategories); ++ci) {
        const auto& c = kCategories[ci];
        const CategorySpec& spec = categories[ci];
        qa[build_question(questions.at("color"), spec)] = std::string(c.color) + ".";
        qa[build_question(questions.at("shape"), spec)] = c.shapes[n % 3];
        qa[build_question(questions.at("location"), spec)] = c.location;
      }
      total_boxes += rec.boxes.size();
      records.push_back(std::move(rec));
    }
    export_canonical(records, categories, paths.dataset_dir / split / "annotations.json");
    manifest.splits[split] = count;
  }
  manifest.expected_boxes = total_boxes;
  write_json(paths.manifest, manifest.to_json());
  write_json(paths.vqa_answers, answers);
  write_json(paths.mlm_vocabulary, mlm_table());

  json cats = json::array();
  for (const auto& c : categories) cats.push_back(to_json(c));
  json values = json::object(), heads = json::object();
  for (const auto& c : kCategories) {
    values[c.name] = {{"shape", c.shapes[0]}, {"color", c.color}, {"location", c.location}};
    heads[c.name] = c.name;
  }
  write_json(paths.prompts, {{"attributes", {"shape", "color", "location"}},
                             {"categories", cats},
                             {"templates",
                              {{"default", "[ATTR:shape], [ATTR:color] [OBJ]"},
                               {"color", "[ATTR:color] [OBJ]"},
                               {"full", "[ATTR:shape], [ATTR:color] [OBJ] in the [ATTR:location]"},
                               {"name", "[OBJ]"}}},
                             {"values", values},
                             {"heads", heads}});

  write_json(paths.encoder, {{"kind", "toy"}, {"parameters", aligned_fixture_parameters().to_json()}});
  write_json(paths.random_encoder, {{"kind", "toy"}, {"parameters", random_fixture_parameters().to_json()}});

  MaskedLmBackendDescriptor mlm;
  mlm.kind = MaskedLmBackendDescriptor::Kind::kMock;
  mlm.vocabulary_path = "backends/mlm_vocab.json";
  mlm.name = "mock-mlm";
  VqaBackendDescriptor vqa;
  vqa.kind = VqaBackendDescriptor::Kind::kMock;
  vqa.answers_path = "backends/vqa_answers.json";
  vqa.name = "mock-vqa";
  ProposalGrid grid{{kCell}, 1.0};

  write_json(paths.backends, {{"mlm", mlm.to_json()},
                              {"vqa", vqa.to_json()},
                              {"encoder", "encoder.json"},
                              {"proposals", grid.to_json()},
                              {"prompts", "prompts.json"},
                              {"template", "default"}});

  ExperimentConfig cfg;
  cfg.manifest = "datasets/synthetic/manifest.json";
  cfg.prompt_mode = PromptMode::kManual;
  cfg.prompt_config = "prompts.json";
  cfg.template_name = "default";
  cfg.mlm_backend = mlm;
  cfg.vqa_backend = vqa;
  cfg.encoder = "encoder.json";
  cfg.proposals = grid;
  cfg.output_dir = "runs";
  cfg.validate();
  write_json(paths.experiment, cfg.to_json());
  return paths;
}

}  // namespace medprompt
