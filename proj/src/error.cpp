#include "medprompt/error.hpp"

namespace medprompt {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kMissingAttributeValue: return "missing-attribute-value";
    case ErrorCode::kMalformedTemplate: return "malformed-template";
    case ErrorCode::kDuplicateCategory: return "duplicate-category";
    case ErrorCode::kCategoryNotFound: return "category-not-found";
    case ErrorCode::kBackendUnreachable: return "backend-unreachable";
    case ErrorCode::kEmptyDistribution: return "empty-distribution";
    case ErrorCode::kEmptyAnswer: return "empty-answer";
    case ErrorCode::kMixedFailure: return "mixed-failure";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kExtentMismatch: return "extent-mismatch";
    case ErrorCode::kSpanOutOfRange: return "span-out-of-range";
    case ErrorCode::kProposalIndexOutOfRange: return "proposal-index-out-of-range";
    case ErrorCode::kEmptyPrompt: return "empty-prompt";
    case ErrorCode::kUndecodableImage: return "undecodable-image";
    case ErrorCode::kEmptyProposals: return "empty-proposals";
    case ErrorCode::kInvalidMode: return "invalid-mode";
    case ErrorCode::kMissingSplit: return "missing-split";
    case ErrorCode::kCountMismatch: return "count-mismatch";
    case ErrorCode::kUnparsableAnnotation: return "unparsable-annotation";
    case ErrorCode::kNExceedsSplit: return "n-exceeds-split";
    case ErrorCode::kIoFailure: return "io-failure";
    case ErrorCode::kSplitMismatch: return "split-mismatch";
    case ErrorCode::kCategorySetMismatch: return "category-set-mismatch";
    case ErrorCode::kConfigInvalid: return "config-invalid";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kNoGroundTruth: return "no-ground-truth";
    case ErrorCode::kBindFailure: return "bind-failure";
  }
  return "unknown";
}

}  // namespace medprompt
