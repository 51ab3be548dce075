#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace medprompt {

enum class AttributeKind { kIntrinsic, kLocation, kOther };

std::string_view to_string(AttributeKind kind);
AttributeKind parse_attribute_kind(std::string_view s);

// An attribute label such as "color" or "location". Canonical names carry an
// implied kind; any other name must be created with an explicit kind.
class AttributeName {
 public:
  static AttributeName canonical(std::string_view name);
  static AttributeName custom(std::string_view name, AttributeKind kind);
  // Canonical lookup when `kind` is empty, otherwise an explicit declaration.
  static AttributeName make(std::string_view name, std::optional<AttributeKind> kind = {});
  static bool is_canonical(std::string_view name);

  const std::string& name() const { return name_; }
  AttributeKind kind() const { return kind_; }

  friend bool operator==(const AttributeName&, const AttributeName&) = default;

 private:
  AttributeName(std::string name, AttributeKind kind) : name_(std::move(name)), kind_(kind) {}
  std::string name_;
  AttributeKind kind_;
};

enum class ValueSource { kManual, kMlm, kVqa };

std::string_view to_string(ValueSource source);
ValueSource parse_value_source(std::string_view s);

struct AttributeValue {
  std::string value;
  ValueSource source = ValueSource::kManual;
  std::optional<int> rank;             // mlm only, >= 1
  std::optional<double> probability;   // mlm only, in [0, 1]
  std::optional<std::string> query;    // cloze text or question sent to a backend

  static AttributeValue manual(std::string value);
  static AttributeValue mlm(std::string value, int rank, double probability,
                            std::optional<std::string> query = {});
  static AttributeValue vqa(std::string value, std::optional<std::string> question = {});

  void validate() const;

  friend bool operator==(const AttributeValue&, const AttributeValue&) = default;
};

// Attribute name -> value.
using AttributeMap = std::map<std::string, AttributeValue>;

enum class SynonymDisplay {
  kNameOnly,  // "platelet"
  kOr,        // "thrombocyte or blood platelet"
  kComma,     // "thrombocyte, blood platelet"
};

struct CategorySpec {
  std::string name;
  std::vector<std::string> synonyms;
  std::vector<AttributeName> attribute_slots;
  SynonymDisplay display = SynonymDisplay::kNameOnly;

  // Synonyms come first, then the name, joined per `display`.
  std::string display_name() const;
  bool has_slot(std::string_view attribute) const;
  void validate() const;
};

// Pattern text with one "[OBJ]" and any number of distinct "[ATTR:<name>]"
// placeholders. Literal text may not contain brackets.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string pattern, std::string joiner = ". ");

  // The bare class-name template "[OBJ]".
  static PromptTemplate class_name(std::string joiner = ". ");

  const std::string& pattern() const { return pattern_; }
  const std::string& joiner() const { return joiner_; }
  const std::vector<std::string>& attributes() const { return attributes_; }

  friend bool operator==(const PromptTemplate& a, const PromptTemplate& b) {
    return a.pattern_ == b.pattern_ && a.joiner_ == b.joiner_;
  }

 private:
  friend std::string fill_template(const PromptTemplate&, const AttributeMap&, const CategorySpec&);

  struct Segment {
    enum class Kind { kLiteral, kObject, kAttribute } kind;
    std::string text;  // literal text or attribute name
  };

  std::string pattern_;
  std::string joiner_;
  std::vector<Segment> segments_;
  std::vector<std::string> attributes_;
};

struct PhraseSpan {
  std::string category;
  std::size_t begin = 0;  // first token index
  std::size_t end = 0;    // one past the last token index

  friend bool operator==(const PhraseSpan&, const PhraseSpan&) = default;
};

enum class VariantKind { kManual, kMlm, kVqa, kHybrid };

struct PromptVariant {
  VariantKind kind = VariantKind::kManual;
  int rank = 0;  // mlm rank (1-based); 0 otherwise

  static PromptVariant manual() { return {VariantKind::kManual, 0}; }
  static PromptVariant mlm(int rank) { return {VariantKind::kMlm, rank}; }
  static PromptVariant vqa() { return {VariantKind::kVqa, 0}; }
  static PromptVariant hybrid() { return {VariantKind::kHybrid, 0}; }

  bool image_specific() const { return kind == VariantKind::kVqa || kind == VariantKind::kHybrid; }
  // "manual", "mlm@2", "vqa", "hybrid"
  std::string label() const;
  static PromptVariant parse(std::string_view label);

  friend bool operator==(const PromptVariant&, const PromptVariant&) = default;
};

struct CategoryProvenance {
  std::string category;
  AttributeMap values;

  friend bool operator==(const CategoryProvenance&, const CategoryProvenance&) = default;
};

struct ComposedPrompt {
  std::string text;
  std::vector<PhraseSpan> spans;
  PromptVariant variant;
  std::vector<CategoryProvenance> provenance;
  std::optional<std::string> image_ref;
  std::string joiner = ". ";

  std::vector<std::string> tokens() const;
  // Per-span phrase text with the joiner punctuation removed; joining these
  // with `joiner` reproduces `text`.
  std::vector<std::string> phrases() const;
  const PhraseSpan* span_for(std::string_view category) const;

  friend bool operator==(const ComposedPrompt&, const ComposedPrompt&) = default;
};

struct PromptEntry {
  CategorySpec category;
  AttributeMap values;
  // Replaces the shared template's pattern for this category only.
  std::optional<PromptTemplate> pattern_override;
};

std::string fill_template(const PromptTemplate& tmpl, const AttributeMap& values,
                          const CategorySpec& category);

ComposedPrompt compose_prompt(const std::vector<PromptEntry>& entries, const PromptTemplate& tmpl,
                              PromptVariant variant = PromptVariant::manual(),
                              std::optional<std::string> image_ref = {});

// Builds a prompt from already rendered per-category phrases.
ComposedPrompt compose_phrases(const std::vector<std::pair<std::string, std::string>>& phrases,
                               const std::string& joiner, PromptVariant variant,
                               std::vector<CategoryProvenance> provenance = {},
                               std::optional<std::string> image_ref = {});

// Rebuilds a prompt from raw text plus spans (as received over the wire) and
// checks the structural span invariants.
ComposedPrompt prompt_from_text(std::string text, std::vector<PhraseSpan> spans,
                                std::string joiner = ". ");

// Throws if spans overlap, are unordered, out of range, or repeat a category.
void check_span_structure(const ComposedPrompt& prompt);
// Structure plus: each span contains its category name or a synonym verbatim.
void check_span_invariants(const ComposedPrompt& prompt, const std::vector<CategorySpec>& categories);

// Comma-separated phrase form for grounding: descriptors before the head
// noun become prefix phrases, text after it becomes suffix phrases.
std::string rearrange_for_grounding(std::string_view sentence, std::string_view head);
// Uses the category name, then each synonym, as the head noun.
std::string rearrange_for_grounding(std::string_view sentence, const CategorySpec& category);

// Applies rearrange_for_grounding to every span phrase. `heads` optionally
// overrides the head noun per category.
ComposedPrompt rearrange_prompt(const ComposedPrompt& prompt, const std::vector<CategorySpec>& categories,
                                const std::map<std::string, std::string>& heads = {});

}  // namespace medprompt
