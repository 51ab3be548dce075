#include "medprompt/toy_encoder.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "medprompt/error.hpp"
#include "medprompt/text.hpp"

namespace medprompt {

using nlohmann::json;

namespace {

// Box-Muller standard normals drawn from mt19937_64.
class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
  double operator()() {
    const double u1 = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 rng_;
};

json matrix_to_json(const Matrix<double>& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix<double> matrix_from_json(const json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j.at(0).size()) : 0;
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j.at(i).size()) != cols) throw Error(ErrorCode::kConfigInvalid, "ragged matrix");
    for (Index k = 0; k < cols; ++k) m(i, k) = j.at(i).at(k).get<double>();
  }
  return m;
}

const ToyParameters& toy_params(const EncoderDescriptor& d) {
  if (d.kind != EncoderDescriptor::Kind::kToy || !d.parameters)
    throw Error(ErrorCode::kInvalidArgument, "descriptor is not a loaded toy encoder");
  return *d.parameters;
}

std::vector<Index> token_rows(const ToyParameters& p, const ComposedPrompt& prompt) {
  const auto toks = prompt.tokens();
  if (toks.empty()) throw Error(ErrorCode::kEmptyPrompt, "prompt has no tokens");
  std::vector<Index> rows;
  rows.reserve(toks.size());
  for (const auto& t : toks) rows.push_back(p.token_row(t));
  return rows;
}

}  // namespace

std::string normalize_token(std::string_view token) {
  constexpr std::string_view kPunct = ",.;:!?()\"'";
  std::size_t b = 0, e = token.size();
  while (b < e && kPunct.find(token[b]) != std::string_view::npos) ++b;
  while (e > b && kPunct.find(token[e - 1]) != std::string_view::npos) --e;
  return text::to_lower(token.substr(b, e - b));
}

std::size_t histogram_bin(std::uint8_t r, std::uint8_t g, std::uint8_t b, int q) {
  const auto level = [q](std::uint8_t v) { return static_cast<std::size_t>(v) * q / 256; };
  return (level(r) * q + level(g)) * q + level(b);
}

Index ToyParameters::token_row(std::string_view token) const {
  const std::string norm = normalize_token(token);
  for (std::size_t i = 0; i < vocabulary.size(); ++i)
    if (vocabulary[i] == norm) return static_cast<Index>(i);
  return static_cast<Index>(vocabulary.size() + text::fnv1a64(norm) % hash_buckets);
}

void ToyParameters::validate() const {
  if (bins_per_channel < 1 || bins_per_channel > 16)
    throw Error(ErrorCode::kInvalidArgument, "bins_per_channel must be in [1, 16]");
  if (hash_buckets < 1) throw Error(ErrorCode::kInvalidArgument, "hash_buckets must be >= 1");
  if (region_projection.cols() != histogram_bins())
    throw Error(ErrorCode::kDimensionMismatch, "region projection must have one column per histogram bin");
  if (token_embeddings.rows() != static_cast<Index>(vocabulary.size() + hash_buckets))
    throw Error(ErrorCode::kDimensionMismatch, "token table must have vocabulary + hash_buckets rows");
  if (token_embeddings.cols() != region_projection.rows() || dim() <= 0)
    throw Error(ErrorCode::kDimensionMismatch, "token and region feature dims differ");
  if (!token_embeddings.allFinite() || !region_projection.allFinite())
    throw Error(ErrorCode::kInvalidArgument, "toy parameters contain non-finite values");
}

ToyParameters ToyParameters::random(std::vector<std::string> vocabulary, Index dim, int bins_per_channel,
                                    std::size_t hash_buckets, std::uint64_t seed, double scale) {
  ToyParameters p;
  p.bins_per_channel = bins_per_channel;
  p.hash_buckets = hash_buckets;
  for (auto& v : vocabulary) v = normalize_token(v);
  p.vocabulary = std::move(vocabulary);
  Gaussian g(seed);
  p.token_embeddings.resize(static_cast<Index>(p.vocabulary.size() + hash_buckets), dim);
  for (Index i = 0; i < p.token_embeddings.size(); ++i) p.token_embeddings.data()[i] = scale * g();
  p.region_projection.resize(dim, p.histogram_bins());
  for (Index i = 0; i < p.region_projection.size(); ++i) p.region_projection.data()[i] = scale * g();
  p.validate();
  return p;
}

json ToyParameters::to_json() const {
  return {{"bins_per_channel", bins_per_channel},
          {"hash_buckets", hash_buckets},
          {"vocabulary", vocabulary},
          {"token_embeddings", matrix_to_json(token_embeddings)},
          {"region_projection", matrix_to_json(region_projection)}};
}

ToyParameters ToyParameters::from_json(const json& j) {
  ToyParameters p;
  try {
    p.bins_per_channel = j.at("bins_per_channel").get<int>();
    p.hash_buckets = j.at("hash_buckets").get<std::size_t>();
    p.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    p.token_embeddings = matrix_from_json(j.at("token_embeddings"));
    p.region_projection = matrix_from_json(j.at("region_projection"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("toy parameters: ") + e.what());
  }
  p.validate();
  return p;
}

void EncoderDescriptor::validate() const {
  if ((kind == Kind::kExternal) != endpoint.has_value())
    throw Error(ErrorCode::kConfigInvalid, "encoder: endpoint must be present iff kind is external");
  if ((kind == Kind::kToy) != parameters.has_value())
    throw Error(ErrorCode::kConfigInvalid, "encoder: parameters must be present iff kind is toy");
  if (parameters) {
    parameters->validate();
    if (parameters->dim() != dim) throw Error(ErrorCode::kDimensionMismatch, "encoder dim does not match parameters");
  }
}

EncoderDescriptor EncoderDescriptor::toy(ToyParameters parameters, FreezeMask freeze) {
  EncoderDescriptor d;
  d.kind = Kind::kToy;
  d.dim = parameters.dim();
  d.parameters = std::move(parameters);
  d.freeze = freeze;
  d.validate();
  return d;
}

Matrix<double> region_histograms(const RgbImage& image, const std::vector<BoxProposal>& proposals,
                                 int bins_per_channel) {
  if (image.width <= 0 || image.height <= 0 ||
      image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3)
    throw Error(ErrorCode::kUndecodableImage, "image raster is empty or inconsistent");
  const Index bins = static_cast<Index>(bins_per_channel) * bins_per_channel * bins_per_channel;
  Matrix<double> h = Matrix<double>::Zero(static_cast<Index>(proposals.size()), bins);
  for (std::size_t r = 0; r < proposals.size(); ++r) {
    const Box& b = proposals[r].box;
    const int x1 = std::max(0, static_cast<int>(std::floor(b.x1)));
    const int y1 = std::max(0, static_cast<int>(std::floor(b.y1)));
    const int x2 = std::min(image.width, static_cast<int>(std::ceil(b.x2)));
    const int y2 = std::min(image.height, static_cast<int>(std::ceil(b.y2)));
    if (x1 >= x2 || y1 >= y2) throw Error(ErrorCode::kInvalidArgument, "proposal lies outside the image");
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) {
        const auto* p = image.at(x, y);
        h(static_cast<Index>(r), static_cast<Index>(histogram_bin(p[0], p[1], p[2], bins_per_channel))) += 1.0;
      }
    h.row(static_cast<Index>(r)) /= static_cast<double>((x2 - x1) * (y2 - y1));
  }
  return h;
}

FeatureMatrix<double> toy_encode_text(const EncoderDescriptor& descriptor, const ComposedPrompt& prompt) {
  const ToyParameters& p = toy_params(descriptor);
  const auto rows = token_rows(p, prompt);
  FeatureMatrix<double> out{Matrix<double>(static_cast<Index>(rows.size()), p.dim()), FeatureRole::kTextTokens};
  for (std::size_t i = 0; i < rows.size(); ++i) out.data.row(static_cast<Index>(i)) = p.token_embeddings.row(rows[i]);
  return out;
}

std::pair<std::vector<BoxProposal>, FeatureMatrix<double>> toy_encode_image(const EncoderDescriptor& descriptor,
                                                                            const RgbImage& image,
                                                                            std::vector<BoxProposal> proposals) {
  const ToyParameters& p = toy_params(descriptor);
  if (proposals.empty()) throw Error(ErrorCode::kEmptyProposals, "toy image encoder needs proposals");
  for (std::size_t i = 0; i < proposals.size(); ++i) proposals[i].region_index = static_cast<Index>(i);
  const Matrix<double> hist = region_histograms(image, proposals, p.bins_per_channel);
  FeatureMatrix<double> out{hist * p.region_projection.transpose(), FeatureRole::kImageRegions};
  return {std::move(proposals), std::move(out)};
}

namespace {

struct Forward {
  Matrix<double> hist;         // R x bins
  FeatureMatrix<double> regions;
  FeatureMatrix<double> tokens;
  std::vector<Index> rows;
  GroundingScores<double> scores;
};

Forward forward(const ToyParameters& p, const TrainingSample& s) {
  if (!s.image) throw Error(ErrorCode::kUndecodableImage, "training sample has no image");
  if (s.proposals.empty()) throw Error(ErrorCode::kEmptyProposals, "training sample has no proposals");
  Forward f;
  f.hist = region_histograms(*s.image, s.proposals, p.bins_per_channel);
  f.regions = {f.hist * p.region_projection.transpose(), FeatureRole::kImageRegions};
  f.rows = token_rows(p, s.prompt);
  f.tokens = {Matrix<double>(static_cast<Index>(f.rows.size()), p.dim()), FeatureRole::kTextTokens};
  for (std::size_t i = 0; i < f.rows.size(); ++i) f.tokens.data.row(static_cast<Index>(i)) = p.token_embeddings.row(f.rows[i]);
  f.scores = alignment_scores(f.regions, f.tokens);
  return f;
}

}  // namespace

double toy_batch_loss(const EncoderDescriptor& descriptor, const std::vector<TrainingSample>& batch) {
  const ToyParameters& p = toy_params(descriptor);
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty training batch");
  double loss = 0;
  for (const auto& s : batch) loss += grounding_loss(forward(p, s).scores, s.targets);
  return loss / static_cast<double>(batch.size());
}

TrainStepResult toy_train_step(EncoderDescriptor descriptor, const std::vector<TrainingSample>& batch,
                               const StepOptions& options) {
  if (options.image_learning_rate <= 0 || options.text_learning_rate <= 0)
    throw Error(ErrorCode::kInvalidArgument, "learning rates must be positive");
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty training batch");
  toy_params(descriptor);
  ToyParameters& p = *descriptor.parameters;

  Matrix<double> grad_projection = Matrix<double>::Zero(p.region_projection.rows(), p.region_projection.cols());
  Matrix<double> grad_embeddings = Matrix<double>::Zero(p.token_embeddings.rows(), p.token_embeddings.cols());
  double loss = 0;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const Forward f = forward(p, s);
    loss += grounding_loss(f.scores, s.targets) * inv_batch;
    const Matrix<double> g = loss_gradient(f.scores, s.targets) * inv_batch;  // R x M
    // S = O P^T with O = H W^T: dW = (G P)^T H, dP = G^T O.
    grad_projection.noalias() += (g * f.tokens.data).transpose() * f.hist;
    const Matrix<double> grad_tokens = g.transpose() * f.regions.data;
    for (std::size_t j = 0; j < f.rows.size(); ++j) grad_embeddings.row(f.rows[j]) += grad_tokens.row(static_cast<Index>(j));
  }

  if (!descriptor.freeze.image_layers) {
    grad_projection += options.weight_decay * p.region_projection;
    p.region_projection -= options.image_learning_rate * grad_projection;
  }
  if (!descriptor.freeze.text_layers) {
    grad_embeddings += options.weight_decay * p.token_embeddings;
    p.token_embeddings -= options.text_learning_rate * grad_embeddings;
  }
  return {std::move(descriptor), loss};
}

}  // namespace medprompt
