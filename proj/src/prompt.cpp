#include "medprompt/prompt.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>

#include "medprompt/error.hpp"
#include "medprompt/text.hpp"

namespace medprompt {

namespace {

struct CanonicalAttribute {
  std::string_view name;
  AttributeKind kind;
};

constexpr std::array<CanonicalAttribute, 6> kCanonical{{
    {"shape", AttributeKind::kIntrinsic},
    {"color", AttributeKind::kIntrinsic},
    {"texture", AttributeKind::kIntrinsic},
    {"location", AttributeKind::kLocation},
    {"size", AttributeKind::kIntrinsic},
    {"modality", AttributeKind::kOther},
}};

void check_attribute_label(std::string_view name) {
  if (name.empty()) throw Error(ErrorCode::kInvalidArgument, "attribute name is empty");
  for (char c : name) {
    if (c == '.' || c == ',')
      throw Error(ErrorCode::kInvalidArgument, "attribute name contains a separator: " + std::string(name));
    if (c == '[' || c == ']' || std::isspace(static_cast<unsigned char>(c)))
      throw Error(ErrorCode::kInvalidArgument, "attribute name contains an invalid character: " + std::string(name));
  }
  if (text::to_lower(name) != name)
    throw Error(ErrorCode::kInvalidArgument, "attribute name must be lowercase: " + std::string(name));
}

// Joiners look like "<punct>" followed by whitespace, e.g. ". " or " ".
std::string joiner_mark(const std::string& joiner) { return text::trim(joiner); }

void check_joiner(const std::string& joiner) {
  if (joiner.empty() || !std::isspace(static_cast<unsigned char>(joiner.back())))
    throw Error(ErrorCode::kMalformedTemplate, "joiner must end in whitespace: '" + joiner + "'");
  if (std::isspace(static_cast<unsigned char>(joiner.front())) && !text::trim(joiner).empty())
    throw Error(ErrorCode::kMalformedTemplate, "joiner may not start with whitespace: '" + joiner + "'");
  const std::string mark = joiner_mark(joiner);
  if (text::tokenize(mark).size() > 1)
    throw Error(ErrorCode::kMalformedTemplate, "joiner mark may not contain whitespace: '" + joiner + "'");
}

std::string strip_edge_punct(std::string_view tok) {
  constexpr std::string_view kPunct = ",.;:!?";
  std::size_t b = 0, e = tok.size();
  while (b < e && kPunct.find(tok[b]) != std::string_view::npos) ++b;
  while (e > b && kPunct.find(tok[e - 1]) != std::string_view::npos) --e;
  return std::string(tok.substr(b, e - b));
}

std::string strip_trailing_punct(std::string_view tok) {
  constexpr std::string_view kPunct = ",.;:!?";
  std::size_t e = tok.size();
  while (e > 0 && kPunct.find(tok[e - 1]) != std::string_view::npos) --e;
  return std::string(tok.substr(0, e));
}

std::string match_key(std::string_view tok) { return text::to_lower(strip_edge_punct(tok)); }

bool is_copula(const std::string& key) {
  return key == "is" || key == "are" || key == "was" || key == "were";
}

bool is_determiner(const std::string& key) { return key == "a" || key == "an" || key == "the"; }

}  // namespace

std::string_view to_string(AttributeKind kind) {
  switch (kind) {
    case AttributeKind::kIntrinsic: return "intrinsic";
    case AttributeKind::kLocation: return "location";
    case AttributeKind::kOther: return "other";
  }
  return "other";
}

AttributeKind parse_attribute_kind(std::string_view s) {
  if (s == "intrinsic") return AttributeKind::kIntrinsic;
  if (s == "location") return AttributeKind::kLocation;
  if (s == "other") return AttributeKind::kOther;
  throw Error(ErrorCode::kInvalidArgument, "unknown attribute kind: " + std::string(s));
}

bool AttributeName::is_canonical(std::string_view name) {
  return std::any_of(kCanonical.begin(), kCanonical.end(),
                     [&](const CanonicalAttribute& c) { return c.name == name; });
}

AttributeName AttributeName::canonical(std::string_view name) {
  for (const auto& c : kCanonical)
    if (c.name == name) return AttributeName(std::string(name), c.kind);
  throw Error(ErrorCode::kInvalidArgument,
              "'" + std::string(name) + "' is not a canonical attribute; declare its kind explicitly");
}

AttributeName AttributeName::custom(std::string_view name, AttributeKind kind) {
  check_attribute_label(name);
  if (is_canonical(name)) {
    const bool location_name = name == "location";
    if (location_name != (kind == AttributeKind::kLocation))
      throw Error(ErrorCode::kInvalidArgument,
                  "canonical attribute '" + std::string(name) + "' cannot have kind " +
                      std::string(to_string(kind)));
  }
  return AttributeName(std::string(name), kind);
}

AttributeName AttributeName::make(std::string_view name, std::optional<AttributeKind> kind) {
  return kind ? custom(name, *kind) : canonical(name);
}

std::string_view to_string(ValueSource source) {
  switch (source) {
    case ValueSource::kManual: return "manual";
    case ValueSource::kMlm: return "mlm";
    case ValueSource::kVqa: return "vqa";
  }
  return "manual";
}

ValueSource parse_value_source(std::string_view s) {
  if (s == "manual") return ValueSource::kManual;
  if (s == "mlm") return ValueSource::kMlm;
  if (s == "vqa") return ValueSource::kVqa;
  throw Error(ErrorCode::kInvalidArgument, "unknown value source: " + std::string(s));
}

AttributeValue AttributeValue::manual(std::string value) {
  AttributeValue v{std::move(value), ValueSource::kManual, {}, {}, {}};
  v.validate();
  return v;
}

AttributeValue AttributeValue::mlm(std::string value, int rank, double probability,
                                   std::optional<std::string> query) {
  AttributeValue v{std::move(value), ValueSource::kMlm, rank, probability, std::move(query)};
  v.validate();
  return v;
}

AttributeValue AttributeValue::vqa(std::string value, std::optional<std::string> question) {
  AttributeValue v{std::move(value), ValueSource::kVqa, {}, {}, std::move(question)};
  v.validate();
  return v;
}

void AttributeValue::validate() const {
  if (text::trim(value).empty()) throw Error(ErrorCode::kInvalidArgument, "attribute value is empty");
  const bool is_mlm = source == ValueSource::kMlm;
  if (rank.has_value() != is_mlm || probability.has_value() != is_mlm)
    throw Error(ErrorCode::kInvalidArgument, "rank and probability must be present iff source is mlm");
  if (rank && *rank < 1) throw Error(ErrorCode::kInvalidArgument, "rank must be >= 1");
  if (probability && !(*probability >= 0.0 && *probability <= 1.0))
    throw Error(ErrorCode::kInvalidArgument, "probability must lie in [0, 1]");
}

std::string CategorySpec::display_name() const {
  if (display == SynonymDisplay::kNameOnly || synonyms.empty()) return name;
  std::vector<std::string> parts = synonyms;
  parts.push_back(name);
  return text::join(parts, display == SynonymDisplay::kOr ? " or " : ", ");
}

bool CategorySpec::has_slot(std::string_view attribute) const {
  return std::any_of(attribute_slots.begin(), attribute_slots.end(),
                     [&](const AttributeName& a) { return a.name() == attribute; });
}

void CategorySpec::validate() const {
  if (text::trim(name).empty()) throw Error(ErrorCode::kInvalidArgument, "category name is empty");
  std::set<std::string> seen_syn;
  for (const auto& s : synonyms) {
    if (s == name) throw Error(ErrorCode::kInvalidArgument, "synonym duplicates category name: " + s);
    if (!seen_syn.insert(s).second) throw Error(ErrorCode::kInvalidArgument, "duplicate synonym: " + s);
  }
  std::set<std::string> seen;
  for (const auto& a : attribute_slots)
    if (!seen.insert(a.name()).second)
      throw Error(ErrorCode::kInvalidArgument, "duplicate attribute slot '" + a.name() + "' in " + name);
}

PromptTemplate::PromptTemplate(std::string pattern, std::string joiner)
    : pattern_(std::move(pattern)), joiner_(std::move(joiner)) {
  check_joiner(joiner_);
  int objects = 0;
  std::set<std::string> seen;
  std::string literal;
  for (std::size_t i = 0; i < pattern_.size(); ++i) {
    const char c = pattern_[i];
    if (c == ']') throw Error(ErrorCode::kMalformedTemplate, "unbalanced ']' in '" + pattern_ + "'");
    if (c != '[') {
      literal += c;
      continue;
    }
    const std::size_t close = pattern_.find(']', i + 1);
    const std::size_t reopen = pattern_.find('[', i + 1);
    if (close == std::string::npos || (reopen != std::string::npos && reopen < close))
      throw Error(ErrorCode::kMalformedTemplate, "unbalanced '[' in '" + pattern_ + "'");
    const std::string body = pattern_.substr(i + 1, close - i - 1);
    if (!literal.empty()) segments_.push_back({Segment::Kind::kLiteral, std::move(literal)});
    literal.clear();
    if (body == "OBJ") {
      ++objects;
      segments_.push_back({Segment::Kind::kObject, {}});
    } else if (body.rfind("ATTR:", 0) == 0 && body.size() > 5) {
      std::string name = body.substr(5);
      if (!seen.insert(name).second)
        throw Error(ErrorCode::kMalformedTemplate, "placeholder [ATTR:" + name + "] appears twice");
      attributes_.push_back(name);
      segments_.push_back({Segment::Kind::kAttribute, std::move(name)});
    } else {
      throw Error(ErrorCode::kMalformedTemplate, "unknown placeholder [" + body + "]");
    }
    i = close;
  }
  if (!literal.empty()) segments_.push_back({Segment::Kind::kLiteral, std::move(literal)});
  if (objects != 1)
    throw Error(ErrorCode::kMalformedTemplate, "[OBJ] must appear exactly once in '" + pattern_ + "'");
}

PromptTemplate PromptTemplate::class_name(std::string joiner) { return PromptTemplate("[OBJ]", std::move(joiner)); }

std::string fill_template(const PromptTemplate& tmpl, const AttributeMap& values, const CategorySpec& category) {
  const std::string mark = joiner_mark(tmpl.joiner());
  std::string out;
  for (const auto& seg : tmpl.segments_) {
    switch (seg.kind) {
      case PromptTemplate::Segment::Kind::kLiteral:
        out += seg.text;
        break;
      case PromptTemplate::Segment::Kind::kObject:
        out += category.display_name();
        break;
      case PromptTemplate::Segment::Kind::kAttribute: {
        auto it = values.find(seg.text);
        if (it == values.end())
          throw Error(ErrorCode::kMissingAttributeValue,
                      "[ATTR:" + seg.text + "] has no value for category '" + category.name + "'");
        const std::string v = text::normalize_space(it->second.value);
        if (v.empty()) throw Error(ErrorCode::kInvalidArgument, "empty value for [ATTR:" + seg.text + "]");
        if (v.find_first_of("[]") != std::string::npos)
          throw Error(ErrorCode::kInvalidArgument, "value for [ATTR:" + seg.text + "] contains brackets");
        if (!mark.empty() && text::contains(v, tmpl.joiner()))
          throw Error(ErrorCode::kInvalidArgument,
                      "value for [ATTR:" + seg.text + "] contains the joiner '" + tmpl.joiner() + "'");
        out += v;
        break;
      }
    }
  }
  return text::normalize_space(out);
}

std::string PromptVariant::label() const {
  switch (kind) {
    case VariantKind::kManual: return "manual";
    case VariantKind::kMlm: return "mlm@" + std::to_string(rank);
    case VariantKind::kVqa: return "vqa";
    case VariantKind::kHybrid: return "hybrid";
  }
  return "manual";
}

PromptVariant PromptVariant::parse(std::string_view label) {
  if (label == "manual") return manual();
  if (label == "vqa") return vqa();
  if (label == "hybrid") return hybrid();
  if (label.rfind("mlm@", 0) == 0) {
    const int rank = std::stoi(std::string(label.substr(4)));
    if (rank < 1) throw Error(ErrorCode::kInvalidArgument, "mlm rank must be >= 1");
    return mlm(rank);
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown prompt variant: " + std::string(label));
}

std::vector<std::string> ComposedPrompt::tokens() const { return text::tokenize(text); }

std::vector<std::string> ComposedPrompt::phrases() const {
  const auto toks = tokens();
  const std::string mark = joiner_mark(joiner);
  std::vector<std::string> out;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    std::vector<std::string> part(toks.begin() + static_cast<std::ptrdiff_t>(spans[s].begin),
                                  toks.begin() + static_cast<std::ptrdiff_t>(spans[s].end));
    if (s + 1 < spans.size() && !mark.empty() && !part.empty()) {
      std::string& last = part.back();
      if (last.size() > mark.size() && last.compare(last.size() - mark.size(), mark.size(), mark) == 0)
        last.resize(last.size() - mark.size());
    }
    out.push_back(text::join(part, " "));
  }
  return out;
}

const PhraseSpan* ComposedPrompt::span_for(std::string_view category) const {
  for (const auto& s : spans)
    if (s.category == category) return &s;
  return nullptr;
}

ComposedPrompt compose_phrases(const std::vector<std::pair<std::string, std::string>>& phrases,
                               const std::string& joiner, PromptVariant variant,
                               std::vector<CategoryProvenance> provenance,
                               std::optional<std::string> image_ref) {
  check_joiner(joiner);
  if (phrases.empty()) throw Error(ErrorCode::kInvalidArgument, "no categories to compose");
  if (variant.image_specific() != image_ref.has_value())
    throw Error(ErrorCode::kInvalidArgument, "image_ref must be present iff the variant is image-specific");
  ComposedPrompt out;
  out.variant = variant;
  out.joiner = joiner;
  out.image_ref = std::move(image_ref);
  out.provenance = std::move(provenance);
  std::set<std::string> seen;
  std::vector<std::string> rendered;
  std::size_t cursor = 0;
  for (const auto& [category, phrase] : phrases) {
    if (!seen.insert(category).second)
      throw Error(ErrorCode::kDuplicateCategory, "category '" + category + "' appears twice");
    std::string norm = text::normalize_space(phrase);
    if (norm.empty()) throw Error(ErrorCode::kInvalidArgument, "empty phrase for '" + category + "'");
    const std::size_t n = text::tokenize(norm).size();
    out.spans.push_back({category, cursor, cursor + n});
    cursor += n;
    rendered.push_back(std::move(norm));
  }
  out.text = text::join(rendered, joiner);
  return out;
}

ComposedPrompt compose_prompt(const std::vector<PromptEntry>& entries, const PromptTemplate& tmpl,
                              PromptVariant variant, std::optional<std::string> image_ref) {
  if (entries.empty()) throw Error(ErrorCode::kInvalidArgument, "compose_prompt needs at least one entry");
  std::vector<std::pair<std::string, std::string>> phrases;
  std::vector<CategoryProvenance> provenance;
  std::set<std::string> seen;
  for (const auto& e : entries) {
    e.category.validate();
    if (!seen.insert(e.category.name).second)
      throw Error(ErrorCode::kDuplicateCategory, "category '" + e.category.name + "' appears twice");
    for (const auto& [_, v] : e.values) v.validate();
    // A category without attribute slots or values renders as its bare name
    // unless the template needs no attributes at all.
    const PromptTemplate& own = e.pattern_override ? *e.pattern_override : tmpl;
    const bool bare = e.category.attribute_slots.empty() && e.values.empty() && !own.attributes().empty();
    std::string phrase = bare ? e.category.display_name() : fill_template(own, e.values, e.category);
    phrases.emplace_back(e.category.name, std::move(phrase));
    AttributeMap used;
    if (!bare)
      for (const auto& a : own.attributes()) used.emplace(a, e.values.at(a));
    provenance.push_back({e.category.name, std::move(used)});
  }
  return compose_phrases(phrases, tmpl.joiner(), variant, std::move(provenance), std::move(image_ref));
}

ComposedPrompt prompt_from_text(std::string text_in, std::vector<PhraseSpan> spans, std::string joiner) {
  check_joiner(joiner);
  ComposedPrompt p;
  p.text = std::move(text_in);
  p.spans = std::move(spans);
  p.joiner = std::move(joiner);
  check_span_structure(p);
  return p;
}

void check_span_structure(const ComposedPrompt& prompt) {
  const std::size_t n = prompt.tokens().size();
  if (n == 0) throw Error(ErrorCode::kEmptyPrompt, "prompt text has no tokens");
  if (prompt.spans.empty()) throw Error(ErrorCode::kInvalidArgument, "prompt has no spans");
  std::set<std::string> seen;
  std::size_t prev_end = 0;
  for (const auto& s : prompt.spans) {
    if (s.begin >= s.end) throw Error(ErrorCode::kSpanOutOfRange, "empty span for '" + s.category + "'");
    if (s.end > n) throw Error(ErrorCode::kSpanOutOfRange, "span for '" + s.category + "' exceeds token count");
    if (s.begin < prev_end)
      throw Error(ErrorCode::kInvalidArgument, "spans overlap or are unordered at '" + s.category + "'");
    if (!seen.insert(s.category).second)
      throw Error(ErrorCode::kDuplicateCategory, "category '" + s.category + "' has two spans");
    prev_end = s.end;
  }
}

void check_span_invariants(const ComposedPrompt& prompt, const std::vector<CategorySpec>& categories) {
  check_span_structure(prompt);
  if (prompt.spans.size() != categories.size())
    throw Error(ErrorCode::kInvalidArgument, "span count does not match category count");
  const auto toks = prompt.tokens();
  for (const auto& c : categories) {
    const PhraseSpan* s = prompt.span_for(c.name);
    if (!s) throw Error(ErrorCode::kCategoryNotFound, "no span for category '" + c.name + "'");
    std::vector<std::string> part(toks.begin() + static_cast<std::ptrdiff_t>(s->begin),
                                  toks.begin() + static_cast<std::ptrdiff_t>(s->end));
    const std::string joined = text::join(part, " ");
    bool found = text::contains(joined, c.name);
    for (const auto& syn : c.synonyms) found = found || text::contains(joined, syn);
    if (!found)
      throw Error(ErrorCode::kCategoryNotFound, "span for '" + c.name + "' does not contain the category name");
  }
  if (prompt.variant.image_specific() != prompt.image_ref.has_value())
    throw Error(ErrorCode::kInvalidArgument, "image_ref must be present iff the variant is image-specific");
}

std::string rearrange_for_grounding(std::string_view sentence, std::string_view head) {
  const auto toks = text::tokenize(sentence);
  const auto head_toks = text::tokenize(head);
  if (head_toks.empty()) throw Error(ErrorCode::kInvalidArgument, "head noun is empty");
  std::vector<std::string> head_keys;
  for (const auto& h : head_toks) head_keys.push_back(match_key(h));

  std::size_t at = toks.size();
  for (std::size_t i = 0; i + head_toks.size() <= toks.size() && at == toks.size(); ++i) {
    bool match = true;
    for (std::size_t k = 0; k < head_toks.size() && match; ++k) match = match_key(toks[i + k]) == head_keys[k];
    if (match) at = i;
  }
  if (at == toks.size())
    throw Error(ErrorCode::kCategoryNotFound, "'" + std::string(head) + "' not found in '" + std::string(sentence) + "'");

  std::vector<std::string> out;

  // Prefix: drop any subject clause ending in a copula, then split the
  // descriptors on commas and "and".
  std::size_t start = 0;
  for (std::size_t i = 0; i < at; ++i)
    if (is_copula(match_key(toks[i]))) start = i + 1;
  std::vector<std::string> current;
  auto flush = [&](std::vector<std::string>& words) {
    while (!words.empty() && is_determiner(match_key(words.front()))) words.erase(words.begin());
    if (!words.empty()) {
      words.back() = strip_trailing_punct(words.back());
      std::string phrase = text::join(words, " ");
      if (!text::trim(phrase).empty()) out.push_back(text::trim(phrase));
    }
    words.clear();
  };
  for (std::size_t i = start; i < at; ++i) {
    const std::string& tok = toks[i];
    const std::string key = match_key(tok);
    if (key.empty() || key == "and") {
      flush(current);
      continue;
    }
    current.push_back(tok);
    if (tok.back() == ',') flush(current);
  }
  flush(current);

  std::vector<std::string> head_words(toks.begin() + static_cast<std::ptrdiff_t>(at),
                                      toks.begin() + static_cast<std::ptrdiff_t>(at + head_toks.size()));
  head_words.back() = strip_trailing_punct(head_words.back());
  out.push_back(text::join(head_words, " "));

  // Suffix: keep wording, split on commas.
  std::vector<std::string> tail;
  auto flush_tail = [&] {
    if (!tail.empty()) {
      tail.back() = strip_trailing_punct(tail.back());
      std::string phrase = text::trim(text::join(tail, " "));
      if (!phrase.empty()) out.push_back(phrase);
    }
    tail.clear();
  };
  for (std::size_t i = at + head_toks.size(); i < toks.size(); ++i) {
    const std::string& tok = toks[i];
    if (match_key(tok).empty()) {
      flush_tail();
      continue;
    }
    tail.push_back(tok);
    if (tok.back() == ',') flush_tail();
  }
  flush_tail();
  return text::join(out, ", ");
}

std::string rearrange_for_grounding(std::string_view sentence, const CategorySpec& category) {
  std::vector<std::string> heads{category.display_name(), category.name};
  heads.insert(heads.end(), category.synonyms.begin(), category.synonyms.end());
  for (const auto& h : heads) {
    try {
      return rearrange_for_grounding(sentence, h);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kCategoryNotFound) throw;
    }
  }
  throw Error(ErrorCode::kCategoryNotFound,
              "category '" + category.name + "' not found in '" + std::string(sentence) + "'");
}

ComposedPrompt rearrange_prompt(const ComposedPrompt& prompt, const std::vector<CategorySpec>& categories,
                                const std::map<std::string, std::string>& heads) {
  const auto phrases = prompt.phrases();
  std::vector<std::pair<std::string, std::string>> rearranged;
  for (std::size_t i = 0; i < prompt.spans.size(); ++i) {
    const std::string& cat = prompt.spans[i].category;
    auto head = heads.find(cat);
    if (head != heads.end()) {
      rearranged.emplace_back(cat, rearrange_for_grounding(phrases[i], head->second));
      continue;
    }
    auto spec = std::find_if(categories.begin(), categories.end(),
                             [&](const CategorySpec& c) { return c.name == cat; });
    if (spec == categories.end()) throw Error(ErrorCode::kCategoryNotFound, "no spec for category '" + cat + "'");
    rearranged.emplace_back(cat, rearrange_for_grounding(phrases[i], *spec));
  }
  return compose_phrases(rearranged, prompt.joiner, prompt.variant, prompt.provenance, prompt.image_ref);
}

}  // namespace medprompt
