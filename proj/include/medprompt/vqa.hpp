#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "medprompt/mlm.hpp"
#include "medprompt/prompt.hpp"

namespace medprompt {

struct ImageRef {
  std::string id;
  std::string uri;  // file path or URL
  int width = 0;
  int height = 0;

  void validate() const;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

struct AttributeQuestion {
  AttributeName attribute;
  std::string pattern;  // ends with '?', contains "[OBJ]" once

  AttributeQuestion(AttributeName attribute, std::string pattern);
};

using QuestionSet = std::map<std::string, AttributeQuestion>;

// Default phrasing per canonical attribute; overridable from config.
QuestionSet default_questions();

std::string build_question(const AttributeQuestion& question, const CategorySpec& category);

class VqaBackend {
 public:
  virtual ~VqaBackend() = default;
  virtual std::string answer(const ImageRef& image, const std::string& question) const = 0;
  virtual std::string name() const = 0;
};

// Fixture of {image id: {question text: answer}}; unmatched lookups throw.
class MockVqa final : public VqaBackend {
 public:
  explicit MockVqa(const nlohmann::json& table, std::string name = "mock-vqa");
  static MockVqa load(const std::filesystem::path& path);

  std::string answer(const ImageRef& image, const std::string& question) const override;
  std::string name() const override { return name_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> table_;
  std::string name_;
};

// POSTs {"image_id", "image_uri", "question"} and expects {"answer"}.
class HttpVqa final : public VqaBackend {
 public:
  HttpVqa(std::string endpoint, std::chrono::milliseconds timeout, int retries, std::string name = "external-vqa");

  std::string answer(const ImageRef& image, const std::string& question) const override;
  std::string name() const override { return name_; }

 private:
  std::string endpoint_;
  std::chrono::milliseconds timeout_;
  int retries_;
  std::string name_;
};

struct VqaBackendDescriptor {
  enum class Kind { kMock, kExternal } kind = Kind::kMock;
  std::optional<std::string> endpoint;
  std::optional<std::filesystem::path> answers_path;
  std::string name = "vqa";
  std::chrono::milliseconds timeout{10000};
  int retries = 2;

  void validate() const;
  static VqaBackendDescriptor from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

std::unique_ptr<VqaBackend> make_vqa_backend(const VqaBackendDescriptor& descriptor);

// Lowercases, trims and strips trailing punctuation from a raw answer.
std::string normalize_answer(std::string_view raw);

ComposedPrompt generate_vqa_prompt(const ImageRef& image, const std::vector<CategorySpec>& categories,
                                   const QuestionSet& questions, const VqaBackend& backend,
                                   const PromptTemplate& tmpl);

// Batch form; output order follows `images` regardless of completion order.
std::vector<ComposedPrompt> generate_vqa_prompts(const std::vector<ImageRef>& images,
                                                 const std::vector<CategorySpec>& categories,
                                                 const QuestionSet& questions, const VqaBackend& backend,
                                                 const PromptTemplate& tmpl, std::size_t parallelism = 1);

struct HybridSources {
  const VqaBackend& vqa;
  const MaskedLmBackend& mlm;
  std::string cloze_pattern = std::string(kDefaultClozePattern);
  StopList stop_list = StopList::defaults();
};

// Location-kind slots come from the masked LM (rank 1), every other slot
// from the VQA backend for this image.
ComposedPrompt generate_hybrid_prompt(const ImageRef& image, const std::vector<CategorySpec>& categories,
                                      const QuestionSet& questions, const HybridSources& sources,
                                      const PromptTemplate& tmpl);

std::vector<ComposedPrompt> generate_hybrid_prompts(const std::vector<ImageRef>& images,
                                                    const std::vector<CategorySpec>& categories,
                                                    const QuestionSet& questions, const HybridSources& sources,
                                                    const PromptTemplate& tmpl, std::size_t parallelism = 1);

}  // namespace medprompt
