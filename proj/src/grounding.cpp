#include "medprompt/grounding.hpp"

namespace medprompt {

std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (auto& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.category == d.category && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

TargetMatrix<double> build_targets(const std::vector<BoxProposal>& proposals, Index num_regions,
                                   const std::vector<PhraseSpan>& spans, Index num_tokens,
                                   const std::vector<LabeledBox>& ground_truth, double iou_threshold) {
  auto t = TargetMatrix<double>::zeros(num_regions, num_tokens);
  for (const auto& p : proposals) {
    if (p.region_index < 0 || p.region_index >= num_regions)
      throw Error(ErrorCode::kProposalIndexOutOfRange, "proposal region " + std::to_string(p.region_index));
    for (const auto& s : spans) {
      if (static_cast<Index>(s.end) > num_tokens)
        throw Error(ErrorCode::kSpanOutOfRange, "span for '" + s.category + "' exceeds token count");
      const bool hit = std::any_of(ground_truth.begin(), ground_truth.end(), [&](const LabeledBox& g) {
        return g.category == s.category && iou(p.box, g.box) >= iou_threshold;
      });
      if (hit)
        t.data.block(p.region_index, static_cast<Index>(s.begin), 1, static_cast<Index>(s.end - s.begin)).setOnes();
    }
  }
  return t;
}

}  // namespace medprompt
