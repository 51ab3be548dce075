#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/grounding.hpp"
#include "medprompt/image.hpp"
#include "medprompt/toy_encoder.hpp"
#include "medprompt/vqa.hpp"

namespace medprompt {

// Sliding-window proposals: square windows of each size, stepped by
// round(size * stride_fraction). Windows larger than the image are skipped;
// the last window in each row/column is snapped to the image edge.
struct ProposalGrid {
  std::vector<int> sizes{16};
  double stride_fraction = 1.0;

  std::vector<BoxProposal> generate(int width, int height) const;
  void validate() const;
  nlohmann::json to_json() const;
  static ProposalGrid from_json(const nlohmann::json& j);
};

struct GroundingResult {
  std::vector<Detection> detections;
  std::vector<BoxProposal> proposals;
  std::optional<GroundingScores<double>> scores;  // absent when the backend decodes itself
};

class Grounder {
 public:
  virtual ~Grounder() = default;
  virtual GroundingResult ground(const ImageRef& image, const ComposedPrompt& prompt,
                                 const DecodeParams& params) const = 0;
};

// Encodes, scores and decodes one image with the toy encoders.
GroundingResult toy_ground(const EncoderDescriptor& encoder, const RgbImage& image,
                           const std::vector<BoxProposal>& proposals, const ComposedPrompt& prompt,
                           const DecodeParams& params);

// Reads the image from ImageRef::uri (PPM) and grounds it with grid proposals.
// Parameters are shared read-only; concurrent calls are safe.
class ToyGrounder final : public Grounder {
 public:
  ToyGrounder(std::shared_ptr<const EncoderDescriptor> encoder, ProposalGrid grid);

  GroundingResult ground(const ImageRef& image, const ComposedPrompt& prompt,
                         const DecodeParams& params) const override;
  const EncoderDescriptor& encoder() const { return *encoder_; }
  const ProposalGrid& grid() const { return grid_; }

 private:
  std::shared_ptr<const EncoderDescriptor> encoder_;
  ProposalGrid grid_;
};

// Remote detector. Request: {"image_id", "image_uri", "prompt", "spans",
// "input_size"}. Reply: either {"detections": [{"bbox": [x,y,w,h], "category",
// "score"}]} or {"proposals": [[x1,y1,x2,y2], ...], "scores": [[...], ...]}
// (one score row per proposal, one column per token), decoded locally.
class HttpGrounder final : public Grounder {
 public:
  HttpGrounder(std::string endpoint, int input_size = 800,
               std::chrono::milliseconds timeout = std::chrono::milliseconds(60000), int retries = 2);

  GroundingResult ground(const ImageRef& image, const ComposedPrompt& prompt,
                         const DecodeParams& params) const override;

 private:
  std::string endpoint_;
  int input_size_;
  std::chrono::milliseconds timeout_;
  int retries_;
};

std::unique_ptr<Grounder> make_grounder(const EncoderDescriptor& encoder, const ProposalGrid& grid,
                                        int input_size = 800);

// Encoder file: {"kind": "toy", "parameters": {...}} or
// {"kind": "external", "endpoint": "..."}; a bare parameter object is read as toy.
EncoderDescriptor load_encoder(const std::filesystem::path& path, FreezeMask freeze = {});
nlohmann::json encoder_to_json(const EncoderDescriptor& encoder);

nlohmann::json detection_to_json(const Detection& d);
Detection detection_from_json(const nlohmann::json& j);

}  // namespace medprompt
