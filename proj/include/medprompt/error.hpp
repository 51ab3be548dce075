#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace medprompt {

enum class ErrorCode {
  kInvalidArgument,
  kMissingAttributeValue,
  kMalformedTemplate,
  kDuplicateCategory,
  kCategoryNotFound,
  kBackendUnreachable,
  kEmptyDistribution,
  kEmptyAnswer,
  kMixedFailure,
  kDimensionMismatch,
  kExtentMismatch,
  kSpanOutOfRange,
  kProposalIndexOutOfRange,
  kEmptyPrompt,
  kUndecodableImage,
  kEmptyProposals,
  kInvalidMode,
  kMissingSplit,
  kCountMismatch,
  kUnparsableAnnotation,
  kNExceedsSplit,
  kIoFailure,
  kSplitMismatch,
  kCategorySetMismatch,
  kConfigInvalid,
  kNotFound,
  kNoGroundTruth,
  kBindFailure,
};

std::string_view to_string(ErrorCode code);

// Library failure tagged with one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace medprompt
