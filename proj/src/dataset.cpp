#include "medprompt/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include "medprompt/error.hpp"
#include "medprompt/prompt_config.hpp"

namespace medprompt {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(LabelSource s) {
  switch (s) {
    case LabelSource::kBbox: return "bbox";
    case LabelSource::kBinaryMask: return "binary_mask";
    case LabelSource::kInstanceMask: return "instance_mask";
  }
  return "bbox";
}

LabelSource parse_label_source(std::string_view s) {
  if (s == "bbox") return LabelSource::kBbox;
  if (s == "binary_mask") return LabelSource::kBinaryMask;
  if (s == "instance_mask") return LabelSource::kInstanceMask;
  throw Error(ErrorCode::kConfigInvalid, "unknown label source: " + std::string(s));
}

void DatasetManifest::validate() const {
  if (name.empty()) throw Error(ErrorCode::kConfigInvalid, "manifest has no name");
  if (std::find(std::begin(kModalities), std::end(kModalities), modality) == std::end(kModalities))
    throw Error(ErrorCode::kConfigInvalid, "manifest '" + name + "': unknown modality '" + modality + "'");
  if (categories.empty()) throw Error(ErrorCode::kConfigInvalid, "manifest '" + name + "' lists no categories");
  for (std::size_t i = 0; i < categories.size(); ++i) {
    categories[i].validate();
    for (std::size_t j = 0; j < i; ++j)
      if (categories[j].name == categories[i].name)
        throw Error(ErrorCode::kDuplicateCategory, "manifest '" + name + "' repeats '" + categories[i].name + "'");
  }
  for (const auto& [split, n] : splits)
    if (n == 0) throw Error(ErrorCode::kConfigInvalid, "manifest '" + name + "': split '" + split + "' expects 0 images");
}

const CategorySpec* DatasetManifest::category(std::string_view n) const {
  for (const auto& c : categories)
    if (c.name == n) return &c;
  return nullptr;
}

json DatasetManifest::to_json() const {
  json cats = json::array();
  for (const auto& c : categories) cats.push_back(medprompt::to_json(c));
  json j{{"name", name},
         {"modality", modality},
         {"categories", cats},
         {"splits", splits},
         {"label_source", to_string(label_source)}};
  if (expected_boxes) j["expected_boxes"] = *expected_boxes;
  if (!layout.empty()) j["layout"] = layout;
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.modality = j.at("modality").get<std::string>();
    for (const auto& c : j.at("categories")) m.categories.push_back(category_from_json(c));
    m.splits = j.at("splits").get<std::map<std::string, std::size_t>>();
    if (j.contains("expected_boxes")) m.expected_boxes = j.at("expected_boxes").get<std::size_t>();
    m.label_source = parse_label_source(j.value("label_source", "bbox"));
    m.layout = j.value("layout", "");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open manifest " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
}

void AnnotationRecord::validate(const std::vector<CategorySpec>& categories) const {
  image.validate();
  for (const auto& b : boxes) {
    if (!b.box.valid() || b.box.x1 < 0 || b.box.y1 < 0 || b.box.x2 > image.width || b.box.y2 > image.height)
      throw Error(ErrorCode::kUnparsableAnnotation, "box outside image '" + image.id + "'");
    if (std::none_of(categories.begin(), categories.end(), [&](const CategorySpec& c) { return c.name == b.category; }))
      throw Error(ErrorCode::kCategoryNotFound, "image '" + image.id + "' uses unknown category '" + b.category + "'");
  }
}

std::string FewShotSpec::label() const { return n_shot ? std::to_string(*n_shot) : "full"; }

json FewShotSpec::to_json() const {
  json n = n_shot ? json(*n_shot) : json("full");
  return {{"n_shot", n}, {"seed", seed}};
}

FewShotSpec FewShotSpec::from_json(const json& j) {
  FewShotSpec s;
  const json& n = j.at("n_shot");
  if (n.is_string()) {
    if (n.get<std::string>() != "full") throw Error(ErrorCode::kConfigInvalid, "n_shot must be a count or \"full\"");
  } else {
    s.n_shot = n.get<std::size_t>();
    if (*s.n_shot == 0) throw Error(ErrorCode::kConfigInvalid, "n_shot must be positive");
  }
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

MaskMode parse_mask_mode(std::string_view s) {
  if (s == "binary") return MaskMode::kBinary;
  if (s == "instance") return MaskMode::kInstance;
  throw Error(ErrorCode::kInvalidMode, "mask mode must be binary or instance, got '" + std::string(s) + "'");
}

namespace {

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

struct Extent {
  long x1, y1, x2, y2;
  long area = 0;
  std::size_t first;
  void add(long x, long y) {
    x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x + 1), y2 = std::max(y2, y + 1);
    ++area;
  }
};

std::vector<Box> collect(std::map<std::size_t, Extent>& by_key, long min_area) {
  std::vector<Extent> ext;
  for (auto& [k, e] : by_key)
    if (e.area >= min_area) ext.push_back(e);
  std::sort(ext.begin(), ext.end(), [](const Extent& a, const Extent& b) { return a.first < b.first; });
  std::vector<Box> out;
  for (const auto& e : ext) out.push_back({double(e.x1), double(e.y1), double(e.x2), double(e.y2)});
  return out;
}

}  // namespace

std::vector<Box> mask_to_boxes(const LabelImage& mask, MaskMode mode, int min_area) {
  if (mask.size() == 0) throw Error(ErrorCode::kInvalidArgument, "mask is empty");
  const long h = mask.rows(), w = mask.cols();
  std::map<std::size_t, Extent> by_key;
  auto touch = [&](std::size_t key, long x, long y) {
    auto [it, fresh] = by_key.try_emplace(key, Extent{x, y, x + 1, y + 1, 0, std::size_t(y * w + x)});
    it->second.add(x, y);
  };

  if (mode == MaskMode::kInstance) {
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const auto v = mask(y, x);
        if (v < 0) throw Error(ErrorCode::kInvalidMode, "instance mask has negative id");
        if (v > 0) touch(static_cast<std::size_t>(v), x, y);
      }
    return collect(by_key, 1);
  }

  DisjointSet ds(static_cast<std::size_t>(w * h));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const auto v = mask(y, x);
      if (v != 0 && v != 1) throw Error(ErrorCode::kInvalidMode, "binary mask has value " + std::to_string(v));
      if (!v) continue;
      if (x > 0 && mask(y, x - 1)) ds.unite(y * w + x, y * w + x - 1);
      if (y > 0 && mask(y - 1, x)) ds.unite(y * w + x, (y - 1) * w + x);
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      if (mask(y, x)) touch(ds.find(y * w + x), x, y);
  return collect(by_key, min_area);
}

std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound) {
  if (bound == 0) throw Error(ErrorCode::kInvalidArgument, "bounded_draw needs a positive bound");
  const std::uint64_t floor = (0 - bound) % bound;  // (2^64 - bound) mod bound
  std::uint64_t r;
  do r = rng();
  while (r < floor);
  return r % bound;
}

std::vector<AnnotationRecord> sample_few_shot(const std::vector<AnnotationRecord>& records, const FewShotSpec& spec) {
  if (!spec.n_shot) return records;
  const std::size_t n = *spec.n_shot;
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "n_shot must be positive");
  if (n > records.size())
    throw Error(ErrorCode::kNExceedsSplit,
                std::to_string(n) + "-shot requested from a split of " + std::to_string(records.size()));
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + bounded_draw(rng, idx.size() - i)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<AnnotationRecord> out;
  for (auto i : idx) out.push_back(records[i]);
  return out;
}

std::vector<AnnotationRecord> parse_annotations(const json& doc, const fs::path& base_dir,
                                                const std::vector<CategorySpec>& categories) {
  std::vector<AnnotationRecord> records;
  try {
    std::map<long long, std::string> category_names;
    for (const auto& c : doc.at("categories")) category_names[c.at("id").get<long long>()] = c.at("name").get<std::string>();

    auto id_text = [](const json& v) { return v.is_string() ? v.get<std::string>() : std::to_string(v.get<long long>()); };
    std::map<std::string, std::size_t> index;
    for (const auto& im : doc.at("images")) {
      AnnotationRecord r;
      r.image.id = id_text(im.at("id"));
      const fs::path file = im.at("file_name").get<std::string>();
      r.image.uri = (file.is_absolute() ? file : base_dir / file).lexically_normal().string();
      r.image.width = im.at("width").get<int>();
      r.image.height = im.at("height").get<int>();
      if (!index.emplace(r.image.id, records.size()).second)
        throw Error(ErrorCode::kUnparsableAnnotation, "duplicate image id '" + r.image.id + "'");
      records.push_back(std::move(r));
    }
    for (const auto& a : doc.at("annotations")) {
      const std::string image_id = id_text(a.at("image_id"));
      auto it = index.find(image_id);
      if (it == index.end()) throw Error(ErrorCode::kUnparsableAnnotation, "annotation for unknown image '" + image_id + "'");
      auto cat = category_names.find(a.at("category_id").get<long long>());
      if (cat == category_names.end()) throw Error(ErrorCode::kUnparsableAnnotation, "annotation with unknown category id");
      const auto& b = a.at("bbox");
      records[it->second].boxes.push_back(
          {Box::from_xywh(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()),
           cat->second});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kUnparsableAnnotation, e.what());
  }
  for (const auto& r : records) {
    try {
      r.validate(categories);
    } catch (const Error& e) {
      throw Error(ErrorCode::kUnparsableAnnotation, e.what());
    }
  }
  return records;
}

std::vector<AnnotationRecord> load_annotations(const fs::path& path, const std::vector<CategorySpec>& categories) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingSplit, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kUnparsableAnnotation, path.string() + ": " + e.what());
  }
  return parse_annotations(doc, path.parent_path(), categories);
}

json canonical_document(const std::vector<AnnotationRecord>& records, const std::vector<CategorySpec>& categories,
                        const fs::path& base_dir) {
  json images = json::array(), annotations = json::array(), cats = json::array();
  std::map<std::string, int> category_ids;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    category_ids[categories[i].name] = static_cast<int>(i + 1);
    cats.push_back({{"id", i + 1}, {"name", categories[i].name}});
  }
  const fs::path base = base_dir.empty() ? fs::path(".") : base_dir;
  for (const auto& r : records) {
    r.validate(categories);
    fs::path rel = fs::path(r.image.uri).lexically_normal().lexically_relative(base.lexically_normal());
    if (rel.empty()) rel = r.image.uri;
    images.push_back({{"id", r.image.id}, {"file_name", rel.generic_string()}, {"width", r.image.width}, {"height", r.image.height}});
    for (const auto& b : r.boxes)
      annotations.push_back({{"id", annotations.size() + 1},
                             {"image_id", r.image.id},
                             {"category_id", category_ids.at(b.category)},
                             {"bbox", {b.box.x1, b.box.y1, b.box.width(), b.box.height()}}});
  }
  return {{"images", images}, {"annotations", annotations}, {"categories", cats}};
}

void export_canonical(const std::vector<AnnotationRecord>& records, const std::vector<CategorySpec>& categories,
                      const fs::path& path) {
  const json doc = canonical_document(records, categories, path.parent_path());
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed for " + path.string());
}

std::size_t count_boxes(const std::vector<AnnotationRecord>& records) {
  std::size_t n = 0;
  for (const auto& r : records) n += r.boxes.size();
  return n;
}

LoadedDataset load_dataset(const DatasetManifest& manifest, const fs::path& root, bool strict) {
  manifest.validate();
  if (!fs::is_directory(root)) throw Error(ErrorCode::kMissingSplit, "dataset root " + root.string() + " is not a directory");
  LoadedDataset out;
  auto report = [&](const std::string& msg) {
    if (strict) throw Error(ErrorCode::kCountMismatch, msg);
    out.warnings.push_back(msg);
  };
  std::size_t total_boxes = 0;
  for (const auto& [split, expected] : manifest.splits) {
    const fs::path file = root / split / "annotations.json";
    if (!fs::exists(file)) throw Error(ErrorCode::kMissingSplit, manifest.name + ": missing split '" + split + "' (" + file.string() + ")");
    auto records = load_annotations(file, manifest.categories);
    if (records.size() != expected)
      report(manifest.name + "/" + split + ": " + std::to_string(records.size()) + " images, expected " +
             std::to_string(expected));
    total_boxes += count_boxes(records);
    out.splits.emplace(split, std::move(records));
  }
  if (manifest.expected_boxes && total_boxes != *manifest.expected_boxes)
    report(manifest.name + ": " + std::to_string(total_boxes) + " boxes, expected " + std::to_string(*manifest.expected_boxes));
  return out;
}

std::vector<AnnotationRecord> convert_mask_split(const fs::path& images_dir, const fs::path& masks_dir,
                                                 const std::string& category, MaskMode mode, int min_area) {
  if (!fs::is_directory(images_dir)) throw Error(ErrorCode::kMissingSplit, images_dir.string() + " is not a directory");
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.path().extension() == ".ppm") images.push_back(e.path());
  std::sort(images.begin(), images.end());
  std::vector<AnnotationRecord> out;
  for (const auto& p : images) {
    const RgbImage img = read_ppm(p);
    const LabelImage mask = read_pgm(masks_dir / (p.stem().string() + ".pgm"));
    if (mask.rows() != img.height || mask.cols() != img.width)
      throw Error(ErrorCode::kUnparsableAnnotation, "mask size differs from image " + p.string());
    AnnotationRecord r{{p.stem().string(), p.string(), img.width, img.height}, {}};
    for (const auto& b : mask_to_boxes(mask, mode, min_area)) r.boxes.push_back({b, category});
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace medprompt
