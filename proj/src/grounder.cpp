#include "medprompt/grounder.hpp"

#include <cmath>
#include <fstream>

#include "medprompt/error.hpp"
#include "medprompt/http_client.hpp"
#include "medprompt/prompt_config.hpp"

namespace medprompt {

using nlohmann::json;

namespace {

std::vector<int> window_starts(int extent, int size, int stride) {
  std::vector<int> starts;
  for (int p = 0; p + size <= extent; p += stride) starts.push_back(p);
  if (!starts.empty() && starts.back() + size < extent) starts.push_back(extent - size);
  return starts;
}

}  // namespace

void ProposalGrid::validate() const {
  if (sizes.empty()) throw Error(ErrorCode::kConfigInvalid, "proposal grid needs at least one window size");
  for (int s : sizes)
    if (s <= 0) throw Error(ErrorCode::kConfigInvalid, "window sizes must be positive");
  if (!(stride_fraction > 0 && stride_fraction <= 1))
    throw Error(ErrorCode::kConfigInvalid, "stride_fraction must be in (0, 1]");
}

std::vector<BoxProposal> ProposalGrid::generate(int width, int height) const {
  validate();
  std::vector<BoxProposal> out;
  for (int s : sizes) {
    const int stride = std::max(1, static_cast<int>(std::lround(s * stride_fraction)));
    const auto xs = window_starts(width, s, stride);
    const auto ys = window_starts(height, s, stride);
    for (int y : ys)
      for (int x : xs)
        out.push_back({Box{double(x), double(y), double(x + s), double(y + s)}, static_cast<Index>(out.size())});
  }
  if (out.empty()) {
    // Image smaller than every window: fall back to the whole frame.
    out.push_back({Box{0, 0, double(width), double(height)}, 0});
  }
  return out;
}

json ProposalGrid::to_json() const { return {{"sizes", sizes}, {"stride_fraction", stride_fraction}}; }

ProposalGrid ProposalGrid::from_json(const json& j) {
  ProposalGrid g;
  g.sizes = j.value("sizes", g.sizes);
  g.stride_fraction = j.value("stride_fraction", g.stride_fraction);
  g.validate();
  return g;
}

GroundingResult toy_ground(const EncoderDescriptor& encoder, const RgbImage& image,
                           const std::vector<BoxProposal>& proposals, const ComposedPrompt& prompt,
                           const DecodeParams& params) {
  auto [props, regions] = toy_encode_image(encoder, image, proposals);
  const auto tokens = toy_encode_text(encoder, prompt);
  auto scores = alignment_scores(regions, tokens);
  GroundingResult r;
  r.detections = decode_detections(scores, props, prompt.spans, params);
  r.proposals = std::move(props);
  r.scores = std::move(scores);
  return r;
}

ToyGrounder::ToyGrounder(std::shared_ptr<const EncoderDescriptor> encoder, ProposalGrid grid)
    : encoder_(std::move(encoder)), grid_(std::move(grid)) {
  if (!encoder_) throw Error(ErrorCode::kInvalidArgument, "toy grounder needs an encoder");
  encoder_->validate();
  grid_.validate();
}

GroundingResult ToyGrounder::ground(const ImageRef& image, const ComposedPrompt& prompt,
                                    const DecodeParams& params) const {
  const RgbImage raster = read_ppm(image.uri);
  return toy_ground(*encoder_, raster, grid_.generate(raster.width, raster.height), prompt, params);
}

HttpGrounder::HttpGrounder(std::string endpoint, int input_size, std::chrono::milliseconds timeout, int retries)
    : endpoint_(std::move(endpoint)), input_size_(input_size), timeout_(timeout), retries_(retries) {}

GroundingResult HttpGrounder::ground(const ImageRef& image, const ComposedPrompt& prompt,
                                     const DecodeParams& params) const {
  const json reply = post_json(endpoint_,
                               {{"image_id", image.id},
                                {"image_uri", image.uri},
                                {"prompt", prompt.text},
                                {"spans", spans_to_json(prompt.spans)},
                                {"input_size", input_size_}},
                               timeout_, retries_);
  GroundingResult r;
  try {
    if (reply.contains("detections")) {
      for (const auto& d : reply.at("detections")) r.detections.push_back(detection_from_json(d));
      r.detections = non_max_suppression(std::move(r.detections), 1.0);
      std::erase_if(r.detections, [&](const Detection& d) { return d.score < params.score_threshold; });
      if (params.max_detections > 0 && r.detections.size() > params.max_detections)
        r.detections.resize(params.max_detections);
      return r;
    }
    for (const auto& p : reply.at("proposals"))
      r.proposals.push_back({Box{p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>(), p.at(3).get<double>()},
                             static_cast<Index>(r.proposals.size())});
    const auto& rows = reply.at("scores");
    const Index n = static_cast<Index>(rows.size());
    const Index m = n ? static_cast<Index>(rows.at(0).size()) : 0;
    Matrix<double> s(n, m);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) s(i, j) = rows.at(i).at(j).get<double>();
    r.scores = GroundingScores<double>{std::move(s)};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBackendUnreachable, endpoint_ + " reply is malformed: " + e.what());
  }
  r.detections = decode_detections(*r.scores, r.proposals, prompt.spans, params);
  return r;
}

std::unique_ptr<Grounder> make_grounder(const EncoderDescriptor& encoder, const ProposalGrid& grid, int input_size) {
  encoder.validate();
  if (encoder.kind == EncoderDescriptor::Kind::kExternal) return std::make_unique<HttpGrounder>(*encoder.endpoint, input_size);
  return std::make_unique<ToyGrounder>(std::make_shared<const EncoderDescriptor>(encoder), grid);
}

EncoderDescriptor load_encoder(const std::filesystem::path& path, FreezeMask freeze) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open encoder " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
  const std::string kind = j.value("kind", "toy");
  if (kind == "external") {
    EncoderDescriptor d;
    d.kind = EncoderDescriptor::Kind::kExternal;
    d.endpoint = j.at("endpoint").get<std::string>();
    d.dim = j.value("dim", 0);
    d.freeze = freeze;
    d.validate();
    return d;
  }
  if (kind != "toy") throw Error(ErrorCode::kConfigInvalid, "unknown encoder kind: " + kind);
  return EncoderDescriptor::toy(ToyParameters::from_json(j.contains("parameters") ? j.at("parameters") : j), freeze);
}

json encoder_to_json(const EncoderDescriptor& e) {
  if (e.kind == EncoderDescriptor::Kind::kExternal) return {{"kind", "external"}, {"endpoint", *e.endpoint}, {"dim", e.dim}};
  return {{"kind", "toy"}, {"parameters", e.parameters->to_json()}};
}

json detection_to_json(const Detection& d) {
  return {{"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}}, {"category", d.category}, {"score", d.score}};
}

Detection detection_from_json(const json& j) {
  const auto& b = j.at("bbox");
  Detection d{Box::from_xywh(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()),
              j.at("category").get<std::string>(), j.at("score").get<double>()};
  if (!d.box.valid()) throw Error(ErrorCode::kInvalidArgument, "detection box has non-positive extent");
  if (!(d.score >= 0 && d.score <= 1)) throw Error(ErrorCode::kInvalidArgument, "detection score outside [0, 1]");
  return d;
}

}  // namespace medprompt
