#include "medprompt/prompt_config.hpp"

#include <algorithm>
#include <fstream>

#include "medprompt/error.hpp"

namespace medprompt {

using nlohmann::json;

namespace {

SynonymDisplay parse_display(const std::string& s) {
  if (s == "name") return SynonymDisplay::kNameOnly;
  if (s == "or") return SynonymDisplay::kOr;
  if (s == "comma") return SynonymDisplay::kComma;
  throw Error(ErrorCode::kConfigInvalid, "unknown synonym display: " + s);
}

std::string display_label(SynonymDisplay d) {
  switch (d) {
    case SynonymDisplay::kNameOnly: return "name";
    case SynonymDisplay::kOr: return "or";
    case SynonymDisplay::kComma: return "comma";
  }
  return "name";
}

AttributeName resolve_attribute(const std::string& name, const std::vector<AttributeName>& declared) {
  for (const auto& a : declared)
    if (a.name() == name) return a;
  return AttributeName::canonical(name);
}

}  // namespace

json to_json(const AttributeValue& v) {
  json j{{"value", v.value}, {"source", std::string(to_string(v.source))}};
  if (v.rank) j["rank"] = *v.rank;
  if (v.probability) j["probability"] = *v.probability;
  if (v.query) j["query"] = *v.query;
  return j;
}

AttributeValue attribute_value_from_json(const json& j) {
  if (j.is_string()) return AttributeValue::manual(j.get<std::string>());
  AttributeValue v;
  v.value = j.at("value").get<std::string>();
  v.source = parse_value_source(j.value("source", "manual"));
  if (j.contains("rank")) v.rank = j.at("rank").get<int>();
  if (j.contains("probability")) v.probability = j.at("probability").get<double>();
  if (j.contains("query")) v.query = j.at("query").get<std::string>();
  v.validate();
  return v;
}

json spans_to_json(const std::vector<PhraseSpan>& spans) {
  json arr = json::array();
  for (const auto& s : spans) arr.push_back({{"category", s.category}, {"begin", s.begin}, {"end", s.end}});
  return arr;
}

std::vector<PhraseSpan> spans_from_json(const json& j) {
  std::vector<PhraseSpan> out;
  for (const auto& s : j)
    out.push_back({s.at("category").get<std::string>(), s.at("begin").get<std::size_t>(),
                   s.at("end").get<std::size_t>()});
  return out;
}

json to_json(const ComposedPrompt& p) {
  json prov = json::array();
  for (const auto& c : p.provenance) {
    json values = json::object();
    for (const auto& [k, v] : c.values) values[k] = to_json(v);
    prov.push_back({{"category", c.category}, {"values", values}});
  }
  json j{{"text", p.text},
         {"spans", spans_to_json(p.spans)},
         {"variant", p.variant.label()},
         {"joiner", p.joiner},
         {"provenance", prov}};
  j["image_ref"] = p.image_ref ? json(*p.image_ref) : json(nullptr);
  return j;
}

ComposedPrompt composed_prompt_from_json(const json& j) {
  ComposedPrompt p;
  p.text = j.at("text").get<std::string>();
  p.spans = spans_from_json(j.at("spans"));
  p.variant = PromptVariant::parse(j.value("variant", "manual"));
  p.joiner = j.value("joiner", ". ");
  if (j.contains("image_ref") && !j.at("image_ref").is_null()) p.image_ref = j.at("image_ref").get<std::string>();
  if (j.contains("provenance")) {
    for (const auto& c : j.at("provenance")) {
      CategoryProvenance cp{c.at("category").get<std::string>(), {}};
      for (const auto& [k, v] : c.at("values").items()) cp.values.emplace(k, attribute_value_from_json(v));
      p.provenance.push_back(std::move(cp));
    }
  }
  check_span_structure(p);
  return p;
}

json to_json(const CategorySpec& c) {
  json slots = json::array();
  for (const auto& a : c.attribute_slots) slots.push_back(a.name());
  return {{"name", c.name}, {"synonyms", c.synonyms}, {"attributes", slots}, {"display", display_label(c.display)}};
}

CategorySpec category_from_json(const json& j, const std::vector<AttributeName>& attributes) {
  CategorySpec c;
  if (j.is_string()) {
    c.name = j.get<std::string>();
  } else {
    c.name = j.at("name").get<std::string>();
    c.synonyms = j.value("synonyms", std::vector<std::string>{});
    for (const auto& a : j.value("attributes", std::vector<std::string>{}))
      c.attribute_slots.push_back(resolve_attribute(a, attributes));
    c.display = parse_display(j.value("display", "name"));
  }
  c.validate();
  return c;
}

json to_json(const PromptTemplate& t) { return {{"pattern", t.pattern()}, {"joiner", t.joiner()}}; }

PromptTemplate template_from_json(const json& j) {
  if (j.is_string()) return PromptTemplate(j.get<std::string>());
  return PromptTemplate(j.at("pattern").get<std::string>(), j.value("joiner", ". "));
}

const PromptTemplate& PromptConfig::get_template(const std::string& name) const {
  auto it = templates.find(name);
  if (it == templates.end()) throw Error(ErrorCode::kNotFound, "no template named '" + name + "'");
  return it->second;
}

const CategorySpec& PromptConfig::category(const std::string& name) const {
  auto it = std::find_if(categories.begin(), categories.end(), [&](const CategorySpec& c) { return c.name == name; });
  if (it == categories.end()) throw Error(ErrorCode::kNotFound, "no category named '" + name + "'");
  return *it;
}

std::vector<PromptEntry> PromptConfig::manual_entries() const {
  std::vector<PromptEntry> out;
  for (const auto& c : categories) {
    auto it = values.find(c.name);
    out.push_back({c, it == values.end() ? AttributeMap{} : it->second, {}});
  }
  return out;
}

PromptConfig PromptConfig::from_json(const json& doc) {
  PromptConfig cfg;
  try {
    for (const auto& a : doc.value("attributes", json::array())) {
      if (a.is_string()) {
        cfg.attributes.push_back(AttributeName::canonical(a.get<std::string>()));
      } else {
        std::optional<AttributeKind> kind;
        if (a.contains("kind")) kind = parse_attribute_kind(a.at("kind").get<std::string>());
        cfg.attributes.push_back(AttributeName::make(a.at("name").get<std::string>(), kind));
      }
    }
    for (const auto& c : doc.value("categories", json::array()))
      cfg.categories.push_back(category_from_json(c, cfg.attributes));
    const json templates_doc = doc.value("templates", json::object());
    for (const auto& [name, t] : templates_doc.items())
      cfg.templates.emplace(name, template_from_json(t));
    const json values_doc = doc.value("values", json::object());
    for (const auto& [cat, attrs] : values_doc.items()) {
      AttributeMap m;
      for (const auto& [k, v] : attrs.items()) m.emplace(k, attribute_value_from_json(v));
      cfg.values.emplace(cat, std::move(m));
    }
    const json heads_doc = doc.value("heads", json::object());
    for (const auto& [cat, head] : heads_doc.items())
      cfg.heads.emplace(cat, head.get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, e.what());
  }
  return cfg;
}

PromptConfig PromptConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
  return from_json(doc);
}

std::vector<LadderRow> ladder_from_json(const json& doc) {
  std::vector<LadderRow> rows;
  try {
    std::vector<AttributeName> attributes;
    for (const auto& a : doc.value("attributes", json::array())) {
      std::optional<AttributeKind> kind;
      if (a.is_object() && a.contains("kind")) kind = parse_attribute_kind(a.at("kind").get<std::string>());
      attributes.push_back(AttributeName::make(a.is_string() ? a.get<std::string>() : a.at("name").get<std::string>(), kind));
    }
    std::map<std::string, int> seen;
    for (const auto& r : doc.at("rows")) {
      const std::string group = r.value("group", "row");
      const int n = ++seen[group];
      const PromptTemplate tmpl = template_from_json(r.at("template"));
      std::vector<PromptEntry> entries;
      std::vector<std::string> dataset_names;
      for (const auto& e : r.at("entries")) {
        const std::string category = e.at("category").get<std::string>();
        json spec{{"name", e.value("name", category)},
                  {"synonyms", e.value("synonyms", std::vector<std::string>{})},
                  {"display", e.value("display", "name")},
                  {"attributes", json::array()}};
        AttributeMap values;
        const json values_doc = e.value("values", json::object());
        for (const auto& [k, v] : values_doc.items()) {
          spec["attributes"].push_back(k);
          values.emplace(k, attribute_value_from_json(v));
        }
        PromptEntry entry{category_from_json(spec, attributes), std::move(values), {}};
        if (e.contains("pattern")) entry.pattern_override = PromptTemplate(e.at("pattern").get<std::string>(), tmpl.joiner());
        entries.push_back(std::move(entry));
        dataset_names.push_back(category);
      }
      ComposedPrompt p = compose_prompt(entries, tmpl);
      for (std::size_t i = 0; i < p.spans.size(); ++i) p.spans[i].category = dataset_names[i];
      for (std::size_t i = 0; i < p.provenance.size(); ++i) p.provenance[i].category = dataset_names[i];
      LadderRow row{r.value("label", group + " " + std::to_string(n)), std::move(p), std::nullopt};
      if (r.contains("expected")) row.expected = r.at("expected").get<std::string>();
      rows.push_back(std::move(row));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("prompt ladder: ") + e.what());
  }
  return rows;
}

std::vector<LadderRow> load_ladder(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  try {
    return ladder_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
}

}  // namespace medprompt
