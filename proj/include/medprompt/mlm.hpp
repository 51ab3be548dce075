#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "medprompt/prompt.hpp"

namespace medprompt {

inline constexpr std::string_view kMaskMarker = "[MASK]";
// "[ATTR]" and "[OBJ]" are substituted; the article is kept verbatim.
inline constexpr std::string_view kDefaultClozePattern = "The [ATTR] of an [OBJ] is [MASK]";

struct ClozeQuery {
  AttributeName attribute;
  std::string object_name;
  std::string text;
};

ClozeQuery build_cloze(const AttributeName& attribute, std::string_view object_name,
                       std::string_view pattern = kDefaultClozePattern);

// Ranked token -> probability list for one mask position.
class VocabDistribution {
 public:
  struct Entry {
    std::string token;
    double probability = 0;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  VocabDistribution() = default;
  // Entries must already be ranked; throws if any invariant fails.
  explicit VocabDistribution(std::vector<Entry> entries);
  // Ranks by (probability desc, token asc), optionally normalizing to sum 1.
  static VocabDistribution from_scores(std::vector<Entry> entries, bool normalize);

  const std::vector<Entry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

class MaskedLmBackend {
 public:
  virtual ~MaskedLmBackend() = default;
  // Returns up to `top_n` ranked predictions for the single mask in `text`.
  virtual VocabDistribution fill_mask(const std::string& text, std::size_t top_n) const = 0;
  virtual std::string name() const = 0;
};

// Lookup table keyed by cloze text. The vocabulary file maps each cloze text
// to either {"token": probability, ...} or [["token", probability], ...].
class MockMaskedLm final : public MaskedLmBackend {
 public:
  explicit MockMaskedLm(const nlohmann::json& table, std::string name = "mock-mlm");
  static MockMaskedLm load(const std::filesystem::path& path);

  VocabDistribution fill_mask(const std::string& text, std::size_t top_n) const override;
  std::string name() const override { return name_; }

 private:
  std::map<std::string, VocabDistribution> table_;
  std::string name_;
};

// POSTs {"text", "top_n"} to `endpoint` and expects
// {"predictions": [{"token", "probability"}, ...]}.
class HttpMaskedLm final : public MaskedLmBackend {
 public:
  HttpMaskedLm(std::string endpoint, std::chrono::milliseconds timeout, int retries, std::string name = "external-mlm");

  VocabDistribution fill_mask(const std::string& text, std::size_t top_n) const override;
  std::string name() const override { return name_; }

 private:
  std::string endpoint_;
  std::chrono::milliseconds timeout_;
  int retries_;
  std::string name_;
};

struct MaskedLmBackendDescriptor {
  enum class Kind { kMock, kExternal } kind = Kind::kMock;
  std::optional<std::string> endpoint;                 // external only
  std::optional<std::filesystem::path> vocabulary_path;  // mock only
  std::string name = "mlm";
  std::chrono::milliseconds timeout{10000};
  int retries = 2;

  void validate() const;
  static MaskedLmBackendDescriptor from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

std::unique_ptr<MaskedLmBackend> make_mlm_backend(const MaskedLmBackendDescriptor& descriptor);

struct StopList {
  std::set<std::string> tokens;  // compared lowercase
  bool drop_punctuation = true;
  bool drop_subwords = true;      // "##"-prefixed continuation pieces
  bool drop_object_name = true;   // any word of the queried object name

  static StopList defaults() { return {}; }
  static StopList none() { return {{}, false, false, false}; }
  bool blocks(std::string_view token, std::string_view object_name) const;
};

struct AttributePrediction {
  std::vector<AttributeValue> values;  // rank 1..n, source mlm
  bool shortfall = false;              // fewer than k candidates survived
};

AttributePrediction predict_attribute(const MaskedLmBackend& backend, const ClozeQuery& query, std::size_t k,
                                      const StopList& stop_list = StopList::defaults());

enum class Combination {
  kRankAligned,  // prompt j uses the rank-j value for every slot
  kCartesian,    // every combination of the top-k values, rank tuples in lexicographic order
};

struct MlmOptions {
  std::size_t k = 3;
  StopList stop_list = StopList::defaults();
  std::string cloze_pattern = std::string(kDefaultClozePattern);
  Combination combination = Combination::kRankAligned;
  std::size_t parallelism = 1;
  std::size_t max_cartesian = 4096;
};

struct MlmGeneration {
  std::vector<ComposedPrompt> prompts;
  // Smallest number of candidates any slot produced (capped at k).
  std::size_t available_rank = 0;
  bool truncated = false;
};

MlmGeneration generate_mlm_prompts(const std::vector<CategorySpec>& categories, const PromptTemplate& tmpl,
                                   const MaskedLmBackend& backend, const MlmOptions& options = {});

}  // namespace medprompt
