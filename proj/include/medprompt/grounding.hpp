#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "medprompt/box.hpp"
#include "medprompt/error.hpp"
#include "medprompt/prompt.hpp"

namespace medprompt {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

enum class FeatureRole { kImageRegions, kTextTokens };

// Row-per-item feature block: image regions (N x d) or text tokens (M x d).
template <typename Scalar = double>
struct FeatureMatrix {
  Matrix<Scalar> data;
  FeatureRole role = FeatureRole::kImageRegions;

  Index rows() const { return data.rows(); }
  Index dim() const { return data.cols(); }

  void validate() const {
    if (data.rows() <= 0 || data.cols() <= 0)
      throw Error(ErrorCode::kDimensionMismatch, "feature matrix must have positive extents");
    if (!data.allFinite()) throw Error(ErrorCode::kInvalidArgument, "feature matrix has non-finite values");
  }
};

// Region x token alignment scores.
template <typename Scalar = double>
struct GroundingScores {
  Matrix<Scalar> data;

  Index num_regions() const { return data.rows(); }
  Index num_tokens() const { return data.cols(); }
};

// Binary region x token targets.
template <typename Scalar = double>
struct TargetMatrix {
  Matrix<Scalar> data;

  TargetMatrix() = default;
  explicit TargetMatrix(Matrix<Scalar> d) : data(std::move(d)) {
    for (Index i = 0; i < data.size(); ++i)
      if (data.data()[i] != Scalar(0) && data.data()[i] != Scalar(1))
        throw Error(ErrorCode::kInvalidArgument, "target matrix must be binary");
  }
  static TargetMatrix zeros(Index rows, Index cols) { return TargetMatrix(Matrix<Scalar>::Zero(rows, cols)); }
};

template <typename Scalar>
Scalar logistic(Scalar s) {
  if (s >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-s));
  const Scalar e = std::exp(s);
  return e / (Scalar(1) + e);
}

// Element-wise binary cross-entropy with logits, averaged over all cells:
// max(s, 0) - s t + log(1 + exp(-|s|)).
template <typename DerivedS, typename DerivedT>
typename DerivedS::Scalar bce_with_logits_mean(const Eigen::MatrixBase<DerivedS>& scores,
                                               const Eigen::MatrixBase<DerivedT>& targets) {
  using Scalar = typename DerivedS::Scalar;
  const auto s = scores.array();
  const auto t = targets.template cast<Scalar>().array();
  const auto cell = s.max(Scalar(0)) - s * t + (-s.abs()).exp().log1p();
  return cell.sum() / static_cast<Scalar>(scores.size());
}

// d(mean BCE)/d(score) = (logistic(s) - t) / (rows * cols).
template <typename DerivedS, typename DerivedT>
Matrix<typename DerivedS::Scalar> bce_with_logits_mean_gradient(const Eigen::MatrixBase<DerivedS>& scores,
                                                                const Eigen::MatrixBase<DerivedT>& targets) {
  using Scalar = typename DerivedS::Scalar;
  Matrix<Scalar> g = scores.unaryExpr([](Scalar s) { return logistic(s); });
  g -= targets.template cast<Scalar>();
  return g / static_cast<Scalar>(scores.size());
}

template <typename Scalar>
GroundingScores<Scalar> alignment_scores(const FeatureMatrix<Scalar>& regions, const FeatureMatrix<Scalar>& tokens) {
  if (regions.dim() != tokens.dim())
    throw Error(ErrorCode::kDimensionMismatch, "region dim " + std::to_string(regions.dim()) + " != token dim " +
                                                   std::to_string(tokens.dim()));
  return {regions.data * tokens.data.transpose()};
}

template <typename Scalar>
void check_extents(const GroundingScores<Scalar>& scores, const TargetMatrix<Scalar>& targets) {
  if (scores.data.rows() != targets.data.rows() || scores.data.cols() != targets.data.cols())
    throw Error(ErrorCode::kExtentMismatch, "scores and targets differ in shape");
  if (scores.data.size() == 0) throw Error(ErrorCode::kExtentMismatch, "empty score matrix");
}

template <typename Scalar>
Scalar grounding_loss(const GroundingScores<Scalar>& scores, const TargetMatrix<Scalar>& targets) {
  check_extents(scores, targets);
  return bce_with_logits_mean(scores.data, targets.data);
}

template <typename Scalar>
Matrix<Scalar> loss_gradient(const GroundingScores<Scalar>& scores, const TargetMatrix<Scalar>& targets) {
  check_extents(scores, targets);
  return bce_with_logits_mean_gradient(scores.data, targets.data);
}

struct BoxProposal {
  Box box;
  Index region_index = 0;

  friend bool operator==(const BoxProposal&, const BoxProposal&) = default;
};

struct DecodeParams {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;  // 0 = unlimited
};

// Per-category greedy suppression: in descending score order, a detection is
// dropped when its IoU with an already kept one of the same category exceeds
// `iou_threshold`. Output is sorted by descending score (stable on input).
std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold);

template <typename Scalar>
std::vector<Detection> decode_detections(const GroundingScores<Scalar>& scores,
                                         const std::vector<BoxProposal>& proposals,
                                         const std::vector<PhraseSpan>& spans, const DecodeParams& params = {}) {
  for (const auto& s : spans)
    if (s.begin >= s.end || static_cast<Index>(s.end) > scores.num_tokens())
      throw Error(ErrorCode::kSpanOutOfRange, "span for '" + s.category + "' outside " +
                                                  std::to_string(scores.num_tokens()) + " tokens");
  for (const auto& p : proposals)
    if (p.region_index < 0 || p.region_index >= scores.num_regions())
      throw Error(ErrorCode::kProposalIndexOutOfRange, "proposal region " + std::to_string(p.region_index));

  // Candidates are generated in (proposal, span) order; the stable sort in
  // non_max_suppression keeps that order for equal scores.
  std::vector<Detection> candidates;
  for (const auto& p : proposals) {
    for (const auto& s : spans) {
      const Scalar best =
          scores.data.row(p.region_index).segment(static_cast<Index>(s.begin), static_cast<Index>(s.end - s.begin)).maxCoeff();
      const double score = static_cast<double>(logistic(best));
      if (score >= params.score_threshold) candidates.push_back({p.box, s.category, score});
    }
  }
  auto kept = non_max_suppression(std::move(candidates), params.nms_iou);
  if (params.max_detections > 0 && kept.size() > params.max_detections) kept.resize(params.max_detections);
  return kept;
}

// T[i][j] = 1 iff proposal i overlaps (IoU >= iou_threshold) a ground-truth
// box of the category whose span owns token j.
TargetMatrix<double> build_targets(const std::vector<BoxProposal>& proposals, Index num_regions,
                                   const std::vector<PhraseSpan>& spans, Index num_tokens,
                                   const std::vector<LabeledBox>& ground_truth, double iou_threshold = 0.5);

}  // namespace medprompt
