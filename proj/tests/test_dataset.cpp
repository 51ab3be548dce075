#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "medprompt/dataset.hpp"
#include "medprompt/error.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace medprompt;
using nlohmann::json;

namespace {

std::vector<CategorySpec> cats(std::initializer_list<const char*> names) {
  std::vector<CategorySpec> out;
  for (const char* n : names) out.push_back(CategorySpec{n});
  return out;
}

std::vector<AnnotationRecord> synthetic_records(std::size_t n, const std::vector<std::string>& names,
                                                std::size_t boxes_each, const std::string& prefix) {
  std::vector<AnnotationRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    AnnotationRecord r{{prefix + std::to_string(i), prefix + std::to_string(i) + ".ppm", 64, 48}, {}};
    for (std::size_t b = 0; b < boxes_each; ++b)
      r.boxes.push_back({Box{double(b), 1, double(b + 10), 20}, names[(i + b) % names.size()]});
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST_CASE("mask conversion examples") {
  LabelImage m = LabelImage::Zero(8, 10);
  m.block(2, 3, 3, 4).setOnes();
  const auto boxes = mask_to_boxes(m, MaskMode::kBinary);
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0] == Box{3, 2, 7, 5});

  CHECK(mask_to_boxes(LabelImage::Zero(6, 6), MaskMode::kBinary).empty());

  LabelImage diag = LabelImage::Zero(12, 12);
  diag.block(0, 0, 4, 4).setOnes();
  diag.block(4, 4, 4, 4).setOnes();
  const auto two = mask_to_boxes(diag, MaskMode::kBinary);
  CHECK(two.size() == 2);
  CHECK(two[0] == Box{0, 0, 4, 4});
  CHECK(two[1] == Box{4, 4, 8, 8});

  LabelImage small = LabelImage::Zero(5, 5);
  small.block(0, 0, 3, 3).setOnes();
  CHECK(mask_to_boxes(small, MaskMode::kBinary).empty());
  CHECK(mask_to_boxes(small, MaskMode::kBinary, 9).size() == 1);

  LabelImage inst = LabelImage::Zero(6, 6);
  inst(0, 0) = 7;
  inst(5, 5) = 7;
  inst(2, 3) = 2;
  const auto ib = mask_to_boxes(inst, MaskMode::kInstance);
  REQUIRE(ib.size() == 2);
  CHECK(ib[0] == Box{0, 0, 6, 6});
  CHECK(ib[1] == Box{3, 2, 4, 3});

  CHECK_THROWS_AS(mask_to_boxes(inst, MaskMode::kBinary), Error);
  CHECK(parse_mask_mode("instance") == MaskMode::kInstance);
  CHECK_THROWS_AS(parse_mask_mode("blob"), Error);
}

TEST_CASE("mask conversion agrees with flood fill") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 150; ++trial) {
    const int h = 1 + rng() % 24, w = 1 + rng() % 24;
    LabelImage m(h, w);
    const double density = (rng() % 100) / 100.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (rng() % 1000) / 1000.0 < density;
    const int min_area = rng() % 6;
    const auto binary = mask_to_boxes(m, MaskMode::kBinary, min_area);
    CHECK(binary == oracle::flood_boxes(m, min_area));
    for (const auto& b : binary) {
      const int x1 = static_cast<int>(b.x1), y1 = static_cast<int>(b.y1);
      const int x2 = static_cast<int>(b.x2) - 1, y2 = static_cast<int>(b.y2) - 1;
      const auto box = m.block(y1, x1, y2 - y1 + 1, x2 - x1 + 1);
      CHECK(box.row(0).any());
      CHECK(box.row(box.rows() - 1).any());
      CHECK(box.col(0).any());
      CHECK(box.col(box.cols() - 1).any());
    }

    LabelImage ids(h, w);
    for (Eigen::Index i = 0; i < ids.size(); ++i) ids.data()[i] = (rng() % 3 == 0) ? 0 : 1 + rng() % 5;
    const auto boxes = mask_to_boxes(ids, MaskMode::kInstance);
    CHECK(boxes == oracle::instance_boxes(ids));
    for (const auto& b : boxes) {
      CHECK(b.valid());
      CHECK(b.x2 <= w);
      CHECK(b.y2 <= h);
    }
  }
}

TEST_CASE("few-shot sampling") {
  const auto records = synthetic_records(10, {"a"}, 1, "img");
  const auto three = sample_few_shot(records, {3, 1});
  CHECK(three.size() == 3);
  CHECK(sample_few_shot(records, {3, 1}) == three);
  CHECK(sample_few_shot(records, FewShotSpec::full()) == records);
  CHECK(sample_few_shot(records, {10, 4}) == records);
  CHECK_THROWS_AS(sample_few_shot(records, {11, 4}), Error);
  CHECK(FewShotSpec{5, 0}.label() == "5");
  CHECK_THROWS_AS(sample_few_shot(records, {0, 4}), Error);
  CHECK(FewShotSpec::full().label() == "full");

  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t n = 1 + seed % 10;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(records.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t bound = idx.size() - i;
      const std::uint64_t floor = (0 - bound) % bound;
      std::uint64_t r;
      do r = rng();
      while (r < floor);
      std::swap(idx[i], idx[i + r % bound]);
    }
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + n);
    std::sort(chosen.begin(), chosen.end());
    const auto got = sample_few_shot(records, {n, seed});
    REQUIRE(got.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(got[i] == records[chosen[i]]);
  }

  const auto hundred = synthetic_records(100, {"a"}, 1, "r");
  std::set<std::string> seen_ids;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto pick = sample_few_shot(hundred, {10, seed});
    CHECK(pick.size() == 10);
    for (const auto& r : pick) seen_ids.insert(r.image.id);
  }
  CHECK(seen_ids.size() > 10);

  std::mt19937_64 a(3), b(3);
  for (int i = 0; i < 100; ++i) {
    const auto v = bounded_draw(a, 7);
    CHECK(v < 7);
    CHECK(v == b() % 7);
  }
}

TEST_CASE("canonical export") {
  testing::TempDir dir("canonical");
  const auto categories = cats({"a", "b"});
  export_canonical({}, categories, dir.path() / "empty.json");
  const json empty = testing::read_json(dir.path() / "empty.json");
  CHECK(empty["images"].empty());
  CHECK(empty["annotations"].empty());
  CHECK(empty["categories"].size() == 2);

  std::vector<AnnotationRecord> records = synthetic_records(50, {"a", "b"}, 3, "");
  for (auto& r : records) r.image.uri = (dir.path() / "imgs" / (r.image.id + ".ppm")).string();
  export_canonical(records, categories, dir.path() / "one.json");
  export_canonical(records, categories, dir.path() / "two.json");
  CHECK(testing::read_file(dir.path() / "one.json") == testing::read_file(dir.path() / "two.json"));
  const json doc = testing::read_json(dir.path() / "one.json");
  CHECK(doc["images"][0]["file_name"] == "imgs/0.ppm");
  CHECK(doc["annotations"][0]["bbox"] == json::array({0.0, 1.0, 10.0, 19.0}));
  CHECK(load_annotations(dir.path() / "one.json", categories) == records);

  auto bad = records;
  bad[0].boxes[0].category = "c";
  CHECK_THROWS_AS(export_canonical(bad, categories, dir.path() / "bad.json"), Error);
  bad = records;
  bad[0].boxes[0].box.x2 = 100;
  CHECK_THROWS_AS(export_canonical(bad, categories, dir.path() / "bad.json"), Error);
}

TEST_CASE("annotation parsing rejects broken documents") {
  const auto categories = cats({"a"});
  const json ok = {{"images", {{{"id", 1}, {"file_name", "x.ppm"}, {"width", 10}, {"height", 10}}}},
                   {"annotations", {{{"id", 1}, {"image_id", 1}, {"category_id", 1}, {"bbox", {1, 2, 3, 4}}}}},
                   {"categories", {{{"id", 1}, {"name", "a"}}}}};
  const auto recs = parse_annotations(ok, "/data", categories);
  CHECK(recs[0].image.id == "1");
  CHECK(recs[0].image.uri == "/data/x.ppm");
  CHECK(recs[0].boxes[0].box == Box{1, 2, 4, 6});

  json orphan = ok;
  orphan["annotations"][0]["image_id"] = 2;
  CHECK_THROWS_AS(parse_annotations(orphan, "/data", categories), Error);
  json missing = ok;
  missing.erase("images");
  CHECK_THROWS_AS(parse_annotations(missing, "/data", categories), Error);
  CHECK_THROWS_AS(parse_annotations(ok, "/data", cats({"z"})), Error);
}

TEST_CASE("loading split layouts") {
  testing::TempDir dir("layouts");
  const auto isic = DatasetManifest::load(testing::source_dir() / "data/manifests/isic2016.json");
  const std::vector<std::string> lesion{"skin lesion"};
  std::size_t placed = 0;
  for (const auto& [split, count] : isic.splits) {
    const std::size_t per = split == "train" ? 2 : 1;
    auto recs = synthetic_records(count, lesion, per, split);
    if (split == "test") recs[0].boxes.pop_back();
    placed += count_boxes(recs);
    export_canonical(recs, isic.categories, dir.path() / "isic" / split / "annotations.json");
  }
  const auto loaded = load_dataset(isic, dir.path() / "isic");
  CHECK(loaded.splits.at("train").size() == 720);
  CHECK(loaded.splits.at("val").size() == 180);
  CHECK(loaded.splits.at("test").size() == 379);
  CHECK(placed != 1282);
  CHECK(loaded.warnings.size() == 1);
  CHECK_THROWS_AS(load_dataset(isic, dir.path() / "isic", true), Error);

  const auto bccd = DatasetManifest::load(testing::source_dir() / "data/manifests/bccd.json");
  std::vector<std::string> blood;
  for (const auto& c : bccd.categories) blood.push_back(c.name);
  std::size_t boxes = 0;
  for (const auto& [split, count] : bccd.splits) {
    auto recs = synthetic_records(count, blood, 13, split);
    boxes += count_boxes(recs);
    export_canonical(recs, bccd.categories, dir.path() / "bccd" / split / "annotations.json");
  }
  // 874 images x 13 boxes = 11362; top up to the published total on the last train record.
  auto train = load_annotations(dir.path() / "bccd/train/annotations.json", bccd.categories);
  while (boxes < 11789) {
    train.back().boxes.push_back({Box{0, 0, 5, 5}, blood[boxes % 3]});
    ++boxes;
  }
  export_canonical(train, bccd.categories, dir.path() / "bccd/train/annotations.json");
  const auto strict = load_dataset(bccd, dir.path() / "bccd", true);
  CHECK(strict.warnings.empty());
  CHECK(strict.splits.at("train").size() == 765);
  CHECK(strict.splits.at("val").size() == 73);
  CHECK(strict.splits.at("test").size() == 36);
  std::size_t total = 0;
  for (const auto& [_, r] : strict.splits) total += count_boxes(r);
  CHECK(total == 11789);

  std::filesystem::create_directories(dir.path() / "nothing");
  CHECK_THROWS_AS(load_dataset(bccd, dir.path() / "nothing"), Error);
  try {
    load_dataset(bccd, dir.path() / "nothing");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingSplit);
  }
}

TEST_CASE("bundled manifests are valid") {
  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(testing::source_dir() / "data/manifests")) {
    const auto m = DatasetManifest::load(e.path());
    names.insert(m.name);
    CHECK(DatasetManifest::from_json(m.to_json()).to_json() == m.to_json());
    for (const auto& c : m.categories) CHECK(!c.attribute_slots.empty());
  }
  CHECK(names == std::set<std::string>{"adni", "bccd", "cpm17", "dfuc2020", "isic2016", "luna16", "polyp", "tbx11k", "tn3k"});
  json bad = DatasetManifest::load(testing::source_dir() / "data/manifests/tn3k.json").to_json();
  bad["modality"] = "sonar";
  CHECK_THROWS_AS(DatasetManifest::from_json(bad).validate(), Error);
}

TEST_CASE("mask split conversion") {
  testing::TempDir dir("convert");
  std::filesystem::create_directories(dir.path() / "images");
  std::filesystem::create_directories(dir.path() / "masks");
  for (int i = 0; i < 3; ++i) {
    RgbImage img(20, 10);
    write_ppm(dir.path() / "images" / ("p" + std::to_string(i) + ".ppm"), img);
    LabelImage m = LabelImage::Zero(10, 20);
    m.block(1, 2 + i, 4, 5).setOnes();
    write_pgm(dir.path() / "masks" / ("p" + std::to_string(i) + ".pgm"), m);
  }
  const auto recs = convert_mask_split(dir.path() / "images", dir.path() / "masks", "polyp", MaskMode::kBinary);
  REQUIRE(recs.size() == 3);
  CHECK(recs[1].image.id == "p1");
  CHECK(recs[1].boxes == std::vector<LabeledBox>{{Box{3, 1, 8, 5}, "polyp"}});
  write_pgm(dir.path() / "masks" / "p2.pgm", LabelImage::Zero(3, 3));
  CHECK_THROWS_AS(convert_mask_split(dir.path() / "images", dir.path() / "masks", "polyp", MaskMode::kBinary), Error);
}
