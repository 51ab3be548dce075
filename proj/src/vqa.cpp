#include "medprompt/vqa.hpp"

#include <fstream>

#include "medprompt/error.hpp"
#include "medprompt/parallel.hpp"
#include "medprompt/text.hpp"

namespace medprompt {

using nlohmann::json;

void ImageRef::validate() const {
  if (id.empty()) throw Error(ErrorCode::kInvalidArgument, "image id is empty");
  if (width <= 0 || height <= 0) throw Error(ErrorCode::kInvalidArgument, "image '" + id + "' has non-positive size");
}

AttributeQuestion::AttributeQuestion(AttributeName attr, std::string pat)
    : attribute(std::move(attr)), pattern(std::move(pat)) {
  const auto first = pattern.find("[OBJ]");
  if (first == std::string::npos || pattern.find("[OBJ]", first + 1) != std::string::npos)
    throw Error(ErrorCode::kInvalidArgument, "question must contain [OBJ] exactly once: " + pattern);
  if (text::trim(pattern).empty() || text::trim(pattern).back() != '?')
    throw Error(ErrorCode::kInvalidArgument, "question must end with '?': " + pattern);
}

QuestionSet default_questions() {
  QuestionSet q;
  auto add = [&](std::string_view name, std::string pattern) {
    q.emplace(std::string(name), AttributeQuestion(AttributeName::canonical(name), std::move(pattern)));
  };
  add("color", "What color is this [OBJ]?");
  add("shape", "What shape is this [OBJ]?");
  add("texture", "What texture is this [OBJ]?");
  add("size", "What size is this [OBJ]?");
  add("location", "Where is the [OBJ] located?");
  add("modality", "What kind of image shows this [OBJ]?");
  return q;
}

std::string build_question(const AttributeQuestion& question, const CategorySpec& category) {
  std::string out = question.pattern;
  out.replace(out.find("[OBJ]"), 5, category.display_name());
  return text::trim(out);
}

MockVqa::MockVqa(const json& table, std::string name) : name_(std::move(name)) {
  if (!table.is_object()) throw Error(ErrorCode::kConfigInvalid, "mock answers must be an object");
  for (const auto& [image, qa] : table.items())
    for (const auto& [question, answer] : qa.items()) table_[image][question] = answer.get<std::string>();
}

MockVqa MockVqa::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kBackendUnreachable, "cannot open mock answers " + path.string());
  try {
    return MockVqa(json::parse(in), "mock:" + path.filename().string());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
}

std::string MockVqa::answer(const ImageRef& image, const std::string& question) const {
  auto img = table_.find(image.id);
  if (img != table_.end()) {
    auto it = img->second.find(question);
    if (it != img->second.end()) return it->second;
  }
  throw Error(ErrorCode::kNotFound, "mock VQA has no answer for (" + image.id + ", \"" + question + "\")");
}

void VqaBackendDescriptor::validate() const {
  if ((kind == Kind::kExternal) != endpoint.has_value())
    throw Error(ErrorCode::kConfigInvalid, "vqa backend: endpoint must be present iff kind is external");
  if ((kind == Kind::kMock) != answers_path.has_value())
    throw Error(ErrorCode::kConfigInvalid, "vqa backend: answers_path must be present iff kind is mock");
}

VqaBackendDescriptor VqaBackendDescriptor::from_json(const json& j) {
  VqaBackendDescriptor d;
  const std::string kind = j.value("kind", "mock");
  if (kind == "mock") d.kind = Kind::kMock;
  else if (kind == "external") d.kind = Kind::kExternal;
  else throw Error(ErrorCode::kConfigInvalid, "unknown vqa backend kind: " + kind);
  if (j.contains("endpoint")) d.endpoint = j.at("endpoint").get<std::string>();
  if (j.contains("answers_path")) d.answers_path = j.at("answers_path").get<std::string>();
  d.name = j.value("name", d.name);
  d.timeout = std::chrono::milliseconds(j.value("timeout_ms", 10000));
  d.retries = j.value("retries", 2);
  d.validate();
  return d;
}

json VqaBackendDescriptor::to_json() const {
  json j{{"kind", kind == Kind::kMock ? "mock" : "external"},
         {"name", name},
         {"timeout_ms", timeout.count()},
         {"retries", retries}};
  if (endpoint) j["endpoint"] = *endpoint;
  if (answers_path) j["answers_path"] = answers_path->string();
  return j;
}

std::unique_ptr<VqaBackend> make_vqa_backend(const VqaBackendDescriptor& d) {
  d.validate();
  if (d.kind == VqaBackendDescriptor::Kind::kMock) return std::make_unique<MockVqa>(MockVqa::load(*d.answers_path));
  return std::make_unique<HttpVqa>(*d.endpoint, d.timeout, d.retries, d.name);
}

std::string normalize_answer(std::string_view raw) {
  std::string s = text::normalize_space(text::to_lower(raw));
  while (!s.empty() && std::string_view(".,;:!?").find(s.back()) != std::string_view::npos) s.pop_back();
  return text::trim(s);
}

namespace {

AttributeValue ask(const ImageRef& image, const CategorySpec& category, const AttributeName& attribute,
                   const QuestionSet& questions, const VqaBackend& backend) {
  auto q = questions.find(attribute.name());
  if (q == questions.end())
    throw Error(ErrorCode::kInvalidArgument,
                "no question for attribute '" + attribute.name() + "' of '" + category.name + "'");
  const std::string question = build_question(q->second, category);
  const std::string answer = normalize_answer(backend.answer(image, question));
  if (answer.empty())
    throw Error(ErrorCode::kEmptyAnswer,
                "slot " + category.name + "/" + attribute.name() + " unanswered for image " + image.id);
  return AttributeValue::vqa(answer, question);
}

}  // namespace

ComposedPrompt generate_vqa_prompt(const ImageRef& image, const std::vector<CategorySpec>& categories,
                                   const QuestionSet& questions, const VqaBackend& backend,
                                   const PromptTemplate& tmpl) {
  image.validate();
  if (categories.empty()) throw Error(ErrorCode::kInvalidArgument, "no categories");
  std::vector<PromptEntry> entries;
  for (const auto& c : categories) {
    PromptEntry e{c, {}, {}};
    for (const auto& a : c.attribute_slots) e.values.emplace(a.name(), ask(image, c, a, questions, backend));
    entries.push_back(std::move(e));
  }
  return compose_prompt(entries, tmpl, PromptVariant::vqa(), image.id);
}

std::vector<ComposedPrompt> generate_vqa_prompts(const std::vector<ImageRef>& images,
                                                 const std::vector<CategorySpec>& categories,
                                                 const QuestionSet& questions, const VqaBackend& backend,
                                                 const PromptTemplate& tmpl, std::size_t parallelism) {
  return parallel_map(images.size(), parallelism, [&](std::size_t i) {
    return generate_vqa_prompt(images[i], categories, questions, backend, tmpl);
  });
}

ComposedPrompt generate_hybrid_prompt(const ImageRef& image, const std::vector<CategorySpec>& categories,
                                      const QuestionSet& questions, const HybridSources& sources,
                                      const PromptTemplate& tmpl) {
  image.validate();
  if (categories.empty()) throw Error(ErrorCode::kInvalidArgument, "no categories");

  std::vector<PromptEntry> entries;
  std::vector<std::string> failures;
  std::optional<Error> first_error;
  bool vqa_failed = false, mlm_failed = false;

  for (const auto& c : categories) {
    int locations = 0;
    for (const auto& a : c.attribute_slots) locations += a.kind() == AttributeKind::kLocation;
    if (locations > 1)
      throw Error(ErrorCode::kInvalidArgument, "category '" + c.name + "' lists more than one location attribute");
    for (const auto& a : c.attribute_slots)
      if (a.kind() != AttributeKind::kLocation && !questions.count(a.name()))
        throw Error(ErrorCode::kInvalidArgument, "no question for attribute '" + a.name() + "' of '" + c.name + "'");

    PromptEntry e{c, {}, {}};
    for (const auto& a : c.attribute_slots) {
      const bool from_mlm = a.kind() == AttributeKind::kLocation;
      try {
        if (from_mlm) {
          const ClozeQuery q = build_cloze(a, c.name, sources.cloze_pattern);
          auto pred = predict_attribute(sources.mlm, q, 1, sources.stop_list);
          if (pred.values.empty())
            throw Error(ErrorCode::kEmptyDistribution, "no usable prediction for '" + q.text + "'");
          e.values.emplace(a.name(), pred.values.front());
        } else {
          e.values.emplace(a.name(), ask(image, c, a, questions, sources.vqa));
        }
      } catch (const Error& err) {
        (from_mlm ? mlm_failed : vqa_failed) = true;
        failures.push_back(c.name + "/" + a.name() + " (" + (from_mlm ? "mlm" : "vqa") + "): " + err.what());
        if (!first_error) first_error = err;
      }
    }
    entries.push_back(std::move(e));
  }

  if (!failures.empty()) {
    if (vqa_failed && mlm_failed) throw Error(ErrorCode::kMixedFailure, text::join(failures, "; "));
    throw Error(first_error->code(), text::join(failures, "; "));
  }
  return compose_prompt(entries, tmpl, PromptVariant::hybrid(), image.id);
}

std::vector<ComposedPrompt> generate_hybrid_prompts(const std::vector<ImageRef>& images,
                                                    const std::vector<CategorySpec>& categories,
                                                    const QuestionSet& questions, const HybridSources& sources,
                                                    const PromptTemplate& tmpl, std::size_t parallelism) {
  return parallel_map(images.size(), parallelism, [&](std::size_t i) {
    return generate_hybrid_prompt(images[i], categories, questions, sources, tmpl);
  });
}

}  // namespace medprompt
