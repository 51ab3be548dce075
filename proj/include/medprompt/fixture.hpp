#pragma once

#include <filesystem>
#include <string>

#include "medprompt/toy_encoder.hpp"

namespace medprompt {

// Layout written by write_synthetic_fixture(root):
//   datasets/synthetic/manifest.json, <split>/annotations.json, <split>/images/*.ppm
//   prompts.json        prompt config (templates "default", "color", "full")
//   backends/mlm_vocab.json, backends/vqa_answers.json   mock backend tables
//   encoder.json        toy encoder whose color tokens point at their colors' histogram bins
//   encoder_random.json toy encoder with small random weights
//   backends.json       service defaults (backends, encoder, proposals, prompts)
//   experiment.json     manual-mode zero-shot config over the test split
//
// Images are 64x64, black, with 16x16 squares on a 4x4 cell grid: red squares
// are "cyst", green squares are "nodule". Proposals are the 16 grid cells.
struct FixturePaths {
  std::filesystem::path root;
  std::filesystem::path dataset_dir;
  std::filesystem::path manifest;
  std::filesystem::path prompts;
  std::filesystem::path mlm_vocabulary;
  std::filesystem::path vqa_answers;
  std::filesystem::path encoder;
  std::filesystem::path random_encoder;
  std::filesystem::path backends;
  std::filesystem::path experiment;
};

struct FixtureOptions {
  std::size_t train_images = 8;
  std::size_t val_images = 3;
  std::size_t test_images = 6;
  std::uint64_t seed = 2024;
};

FixturePaths write_synthetic_fixture(const std::filesystem::path& root, const FixtureOptions& options = {});

// The constructed and random toy encoders used by the fixture.
ToyParameters aligned_fixture_parameters();
ToyParameters random_fixture_parameters(std::uint64_t seed = 7);

}  // namespace medprompt
