#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "medprompt/grounding.hpp"
#include "medprompt/image.hpp"
#include "medprompt/prompt.hpp"

namespace medprompt {

// Weights of the deterministic stand-in encoders.
//
// Text: each whitespace token is normalized (lowercase, edge punctuation
// stripped) and looked up in `vocabulary`; unknown tokens map to row
// vocabulary.size() + fnv1a64(token) % hash_buckets of `token_embeddings`.
//
// Image: each proposal's pixels are quantized to bins_per_channel^3 RGB bins
// (bin = (r*q/256 * q + g*q/256) * q + b*q/256), the histogram is normalized
// to sum 1, and the region feature is region_projection * histogram.
struct ToyParameters {
  int bins_per_channel = 2;
  std::size_t hash_buckets = 16;
  std::vector<std::string> vocabulary;
  Matrix<double> token_embeddings;   // (vocabulary + hash_buckets) x dim
  Matrix<double> region_projection;  // dim x bins

  Index dim() const { return region_projection.rows(); }
  Index histogram_bins() const {
    return static_cast<Index>(bins_per_channel) * bins_per_channel * bins_per_channel;
  }
  Index token_row(std::string_view token) const;
  void validate() const;

  // Gaussian initialization (std::mt19937_64 seeded with `seed`).
  static ToyParameters random(std::vector<std::string> vocabulary, Index dim, int bins_per_channel,
                              std::size_t hash_buckets, std::uint64_t seed, double scale = 0.1);

  nlohmann::json to_json() const;
  static ToyParameters from_json(const nlohmann::json& j);
};

std::string normalize_token(std::string_view token);
std::size_t histogram_bin(std::uint8_t r, std::uint8_t g, std::uint8_t b, int bins_per_channel);

// Which parameter groups stay fixed during training.
struct FreezeMask {
  bool image_layers = false;
  bool text_layers = false;

  static FreezeMask all() { return {true, true}; }
  static FreezeMask none() { return {false, false}; }
};

struct EncoderDescriptor {
  enum class Kind { kToy, kExternal } kind = Kind::kToy;
  Index dim = 0;
  std::optional<std::string> endpoint;       // external only
  std::optional<ToyParameters> parameters;   // toy only
  FreezeMask freeze;

  void validate() const;
  static EncoderDescriptor toy(ToyParameters parameters, FreezeMask freeze = {});
};

// Normalized per-proposal color histograms (proposals x bins).
Matrix<double> region_histograms(const RgbImage& image, const std::vector<BoxProposal>& proposals,
                                 int bins_per_channel);

FeatureMatrix<double> toy_encode_text(const EncoderDescriptor& descriptor, const ComposedPrompt& prompt);

std::pair<std::vector<BoxProposal>, FeatureMatrix<double>> toy_encode_image(const EncoderDescriptor& descriptor,
                                                                            const RgbImage& image,
                                                                            std::vector<BoxProposal> proposals);

struct TrainingSample {
  const RgbImage* image = nullptr;
  std::vector<BoxProposal> proposals;
  ComposedPrompt prompt;
  TargetMatrix<double> targets;
};

struct StepOptions {
  double image_learning_rate = 1e-4;
  double text_learning_rate = 1e-4;
  double weight_decay = 0.0;

  static StepOptions uniform(double lr) { return {lr, lr, 0.0}; }
};

struct TrainStepResult {
  EncoderDescriptor descriptor;
  double loss = 0;  // batch loss before the update
};

// Mean batch grounding loss back-propagated through both toy encoders; one
// SGD update of every unfrozen group.
TrainStepResult toy_train_step(EncoderDescriptor descriptor, const std::vector<TrainingSample>& batch,
                               const StepOptions& options);

double toy_batch_loss(const EncoderDescriptor& descriptor, const std::vector<TrainingSample>& batch);

}  // namespace medprompt
