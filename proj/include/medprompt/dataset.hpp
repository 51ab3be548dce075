#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/box.hpp"
#include "medprompt/image.hpp"
#include "medprompt/prompt.hpp"
#include "medprompt/vqa.hpp"

namespace medprompt {

enum class LabelSource { kBbox, kBinaryMask, kInstanceMask };

std::string_view to_string(LabelSource s);
LabelSource parse_label_source(std::string_view s);

inline constexpr std::string_view kModalities[] = {"photography", "endoscopy", "cytology", "histopathology",
                                                   "xray",        "ct",        "mri",      "ultrasound"};

struct DatasetManifest {
  std::string name;
  std::string modality;
  std::vector<CategorySpec> categories;
  std::map<std::string, std::size_t> splits;  // split -> expected image count
  std::optional<std::size_t> expected_boxes;
  LabelSource label_source = LabelSource::kBbox;
  std::string layout;  // free-form notes on the on-disk layout

  void validate() const;
  const CategorySpec* category(std::string_view name) const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  static DatasetManifest load(const std::filesystem::path& path);
};

struct AnnotationRecord {
  ImageRef image;
  std::vector<LabeledBox> boxes;

  // Boxes within image bounds and categories known to the manifest.
  void validate(const std::vector<CategorySpec>& categories) const;
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

using SplitRecords = std::map<std::string, std::vector<AnnotationRecord>>;

// n_shot absent means the full split.
struct FewShotSpec {
  std::optional<std::size_t> n_shot;
  std::uint64_t seed = 0;

  static FewShotSpec full(std::uint64_t seed = 0) { return {std::nullopt, seed}; }
  std::string label() const;  // "full" or the shot count
  nlohmann::json to_json() const;
  static FewShotSpec from_json(const nlohmann::json& j);
};

enum class MaskMode { kBinary, kInstance };
MaskMode parse_mask_mode(std::string_view s);

// Binary: one box per 4-connected foreground component with at least
// `min_area` pixels (mask values must be 0/1). Instance: one box per distinct
// nonzero id regardless of connectivity. Boxes are tight with exclusive
// right/bottom edges, ordered by first pixel in row-major scan.
std::vector<Box> mask_to_boxes(const LabelImage& mask, MaskMode mode, int min_area = 10);

// Uniform integer in [0, bound) from a 64-bit engine, by rejection of the
// biased low range: draws r until r >= (2^64 - bound) % bound, returns r % bound.
std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound);

// Partial Fisher-Yates over record indices with std::mt19937_64(seed): for
// i = 0..n-1 swap index i with i + bounded_draw(size - i). The first n
// indices are returned in ascending order.
std::vector<AnnotationRecord> sample_few_shot(const std::vector<AnnotationRecord>& records, const FewShotSpec& spec);

// Canonical annotation document: {"images": [{"id", "file_name", "width",
// "height"}], "annotations": [{"id", "image_id", "category_id", "bbox":
// [x, y, w, h]}], "categories": [{"id", "name"}]}. file_name is resolved
// relative to the document's directory.
std::vector<AnnotationRecord> parse_annotations(const nlohmann::json& doc, const std::filesystem::path& base_dir,
                                                const std::vector<CategorySpec>& categories);
std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path,
                                               const std::vector<CategorySpec>& categories);
nlohmann::json canonical_document(const std::vector<AnnotationRecord>& records,
                                  const std::vector<CategorySpec>& categories, const std::filesystem::path& base_dir);
void export_canonical(const std::vector<AnnotationRecord>& records, const std::vector<CategorySpec>& categories,
                      const std::filesystem::path& path);

struct LoadedDataset {
  SplitRecords splits;
  std::vector<std::string> warnings;  // count mismatches when not strict
};

// Reads root/<split>/annotations.json for every split in the manifest.
LoadedDataset load_dataset(const DatasetManifest& manifest, const std::filesystem::path& root, bool strict = false);

// Converts a mask-labelled split: every <stem>.ppm under `images_dir` pairs
// with <stem>.pgm under `masks_dir`. All boxes take `category`.
std::vector<AnnotationRecord> convert_mask_split(const std::filesystem::path& images_dir,
                                                 const std::filesystem::path& masks_dir, const std::string& category,
                                                 MaskMode mode, int min_area = 10);

std::size_t count_boxes(const std::vector<AnnotationRecord>& records);

}  // namespace medprompt
