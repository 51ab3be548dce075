#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/prompt.hpp"

namespace medprompt {

// Template, category and attribute definitions loaded from a JSON document
// with top-level keys `attributes`, `categories` and `templates`. Optional
// `values` (category -> attribute -> text) and `heads` (category -> head noun)
// carry manual attribute values and rearrangement heads. See docs/config.md.
struct PromptConfig {
  std::vector<AttributeName> attributes;
  std::vector<CategorySpec> categories;
  std::map<std::string, PromptTemplate> templates;
  std::map<std::string, AttributeMap> values;
  std::map<std::string, std::string> heads;

  const PromptTemplate& get_template(const std::string& name) const;
  const CategorySpec& category(const std::string& name) const;
  // Entries in category order using the manual values (missing -> empty map).
  std::vector<PromptEntry> manual_entries() const;

  static PromptConfig from_json(const nlohmann::json& doc);
  static PromptConfig load(const std::filesystem::path& path);
};

// Wire/artifact representations.
nlohmann::json to_json(const AttributeValue& v);
AttributeValue attribute_value_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ComposedPrompt& p);
ComposedPrompt composed_prompt_from_json(const nlohmann::json& j);
nlohmann::json spans_to_json(const std::vector<PhraseSpan>& spans);
std::vector<PhraseSpan> spans_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CategorySpec& c);
// Resolves attribute slot names against `attributes` (custom kinds), falling
// back to the canonical set.
CategorySpec category_from_json(const nlohmann::json& j, const std::vector<AttributeName>& attributes = {});
nlohmann::json to_json(const PromptTemplate& t);
PromptTemplate template_from_json(const nlohmann::json& j);

// A ladder of hand-written prompt variants (one per row) for sweeps. Each
// row is {"group", "label"?, "template", "entries": [{"category", "name"?,
// "synonyms"?, "display"?, "values"?, "pattern"?}], "expected"?}. "name" is
// the rendered category text; spans are labelled with "category" so rows can
// be evaluated against the dataset's own category names.
struct LadderRow {
  std::string label;
  ComposedPrompt prompt;
  std::optional<std::string> expected;
};

std::vector<LadderRow> ladder_from_json(const nlohmann::json& doc);
std::vector<LadderRow> load_ladder(const std::filesystem::path& path);

}  // namespace medprompt
