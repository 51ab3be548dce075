#include "medprompt/mlm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "medprompt/error.hpp"
#include "medprompt/parallel.hpp"
#include "medprompt/text.hpp"

namespace medprompt {

using nlohmann::json;

namespace {

std::size_t count_of(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

bool ranks_before(const VocabDistribution::Entry& a, const VocabDistribution::Entry& b) {
  if (a.probability != b.probability) return a.probability > b.probability;
  return a.token < b.token;
}

}  // namespace

ClozeQuery build_cloze(const AttributeName& attribute, std::string_view object_name, std::string_view pattern) {
  if (text::trim(object_name).empty()) throw Error(ErrorCode::kInvalidArgument, "object name is empty");
  if (count_of(pattern, kMaskMarker) != 1)
    throw Error(ErrorCode::kInvalidArgument, "cloze pattern must contain [MASK] exactly once");
  std::string out = replace_all(std::string(pattern), "[ATTR]", attribute.name());
  out = replace_all(std::move(out), "[OBJ]", object_name);
  if (count_of(out, kMaskMarker) != 1 || !text::contains(out, object_name))
    throw Error(ErrorCode::kInvalidArgument, "cloze pattern must name the object and keep one mask: " + out);
  return {attribute, std::string(object_name), std::move(out)};
}

VocabDistribution::VocabDistribution(std::vector<Entry> entries) : entries_(std::move(entries)) {
  std::set<std::string> seen;
  double sum = 0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (!(e.probability > 0.0 && e.probability <= 1.0))
      throw Error(ErrorCode::kInvalidArgument, "probability out of (0, 1] for token '" + e.token + "'");
    if (i > 0 && e.probability > entries_[i - 1].probability)
      throw Error(ErrorCode::kInvalidArgument, "distribution is not ranked at token '" + e.token + "'");
    if (!seen.insert(e.token).second) throw Error(ErrorCode::kInvalidArgument, "duplicate token '" + e.token + "'");
    sum += e.probability;
  }
  if (sum > 1.0 + 1e-6) throw Error(ErrorCode::kInvalidArgument, "probabilities sum above 1");
}

VocabDistribution VocabDistribution::from_scores(std::vector<Entry> entries, bool normalize) {
  if (normalize) {
    double sum = 0;
    for (const auto& e : entries) {
      if (!(e.probability > 0) || !std::isfinite(e.probability))
        throw Error(ErrorCode::kInvalidArgument, "score for '" + e.token + "' must be positive and finite");
      sum += e.probability;
    }
    for (auto& e : entries) e.probability /= sum;
  }
  std::sort(entries.begin(), entries.end(), ranks_before);
  return VocabDistribution(std::move(entries));
}

MockMaskedLm::MockMaskedLm(const json& table, std::string name) : name_(std::move(name)) {
  if (!table.is_object()) throw Error(ErrorCode::kConfigInvalid, "mock vocabulary must be an object");
  for (const auto& [cloze, preds] : table.items()) {
    std::vector<VocabDistribution::Entry> entries;
    if (preds.is_object()) {
      for (const auto& [tok, p] : preds.items()) entries.push_back({tok, p.get<double>()});
    } else {
      for (const auto& pair : preds) entries.push_back({pair.at(0).get<std::string>(), pair.at(1).get<double>()});
    }
    table_.emplace(cloze, entries.empty() ? VocabDistribution{} : VocabDistribution::from_scores(std::move(entries), true));
  }
}

MockMaskedLm MockMaskedLm::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kBackendUnreachable, "cannot open mock vocabulary " + path.string());
  try {
    return MockMaskedLm(json::parse(in), "mock:" + path.filename().string());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
}

VocabDistribution MockMaskedLm::fill_mask(const std::string& text_in, std::size_t top_n) const {
  auto it = table_.find(text_in);
  if (it == table_.end() || it->second.empty())
    throw Error(ErrorCode::kEmptyDistribution, "no predictions for '" + text_in + "'");
  auto entries = it->second.entries();
  if (entries.size() > top_n) entries.resize(top_n);
  return VocabDistribution(std::move(entries));
}

void MaskedLmBackendDescriptor::validate() const {
  if ((kind == Kind::kExternal) != endpoint.has_value())
    throw Error(ErrorCode::kConfigInvalid, "mlm backend: endpoint must be present iff kind is external");
  if ((kind == Kind::kMock) != vocabulary_path.has_value())
    throw Error(ErrorCode::kConfigInvalid, "mlm backend: vocabulary_path must be present iff kind is mock");
}

MaskedLmBackendDescriptor MaskedLmBackendDescriptor::from_json(const json& j) {
  MaskedLmBackendDescriptor d;
  const std::string kind = j.value("kind", "mock");
  if (kind == "mock") d.kind = Kind::kMock;
  else if (kind == "external") d.kind = Kind::kExternal;
  else throw Error(ErrorCode::kConfigInvalid, "unknown mlm backend kind: " + kind);
  if (j.contains("endpoint")) d.endpoint = j.at("endpoint").get<std::string>();
  if (j.contains("vocabulary_path")) d.vocabulary_path = j.at("vocabulary_path").get<std::string>();
  d.name = j.value("name", d.name);
  d.timeout = std::chrono::milliseconds(j.value("timeout_ms", 10000));
  d.retries = j.value("retries", 2);
  d.validate();
  return d;
}

json MaskedLmBackendDescriptor::to_json() const {
  json j{{"kind", kind == Kind::kMock ? "mock" : "external"},
         {"name", name},
         {"timeout_ms", timeout.count()},
         {"retries", retries}};
  if (endpoint) j["endpoint"] = *endpoint;
  if (vocabulary_path) j["vocabulary_path"] = vocabulary_path->string();
  return j;
}

std::unique_ptr<MaskedLmBackend> make_mlm_backend(const MaskedLmBackendDescriptor& d) {
  d.validate();
  if (d.kind == MaskedLmBackendDescriptor::Kind::kMock)
    return std::make_unique<MockMaskedLm>(MockMaskedLm::load(*d.vocabulary_path));
  return std::make_unique<HttpMaskedLm>(*d.endpoint, d.timeout, d.retries, d.name);
}

bool StopList::blocks(std::string_view token, std::string_view object_name) const {
  const std::string lower = text::to_lower(text::trim(token));
  if (lower.empty()) return true;
  if (tokens.count(lower)) return true;
  if (drop_punctuation &&
      std::all_of(lower.begin(), lower.end(), [](unsigned char c) { return std::ispunct(c) != 0; }))
    return true;
  if (drop_subwords && lower.rfind("##", 0) == 0) return true;
  if (drop_object_name) {
    const std::string obj = text::to_lower(object_name);
    if (lower == obj) return true;
    for (const auto& w : text::tokenize(obj))
      if (lower == w) return true;
  }
  return false;
}

AttributePrediction predict_attribute(const MaskedLmBackend& backend, const ClozeQuery& query, std::size_t k,
                                      const StopList& stop_list) {
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  // Ask for enough candidates that filtering can still leave k.
  const std::size_t top_n = k + stop_list.tokens.size() + 32;
  const VocabDistribution dist = backend.fill_mask(query.text, top_n);
  if (dist.empty()) throw Error(ErrorCode::kEmptyDistribution, "no predictions for '" + query.text + "'");

  std::vector<VocabDistribution::Entry> kept;
  for (const auto& e : dist.entries())
    if (!stop_list.blocks(e.token, query.object_name)) kept.push_back(e);
  std::stable_sort(kept.begin(), kept.end(), ranks_before);

  AttributePrediction out;
  for (std::size_t i = 0; i < kept.size() && i < k; ++i)
    out.values.push_back(AttributeValue::mlm(text::trim(kept[i].token), static_cast<int>(i + 1), kept[i].probability,
                                             query.text));
  out.shortfall = out.values.size() < k;
  return out;
}

MlmGeneration generate_mlm_prompts(const std::vector<CategorySpec>& categories, const PromptTemplate& tmpl,
                                   const MaskedLmBackend& backend, const MlmOptions& options) {
  if (categories.empty()) throw Error(ErrorCode::kInvalidArgument, "no categories");
  if (options.k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");

  struct Slot {
    std::size_t category;
    const AttributeName* attribute;
  };
  std::vector<Slot> slots;
  for (std::size_t c = 0; c < categories.size(); ++c) {
    categories[c].validate();
    if (categories[c].attribute_slots.empty())
      throw Error(ErrorCode::kInvalidArgument, "category '" + categories[c].name + "' has no attribute slots");
    for (const auto& a : categories[c].attribute_slots) slots.push_back({c, &a});
  }

  const auto predictions = parallel_map(slots.size(), options.parallelism, [&](std::size_t i) {
    const Slot& s = slots[i];
    const ClozeQuery q = build_cloze(*s.attribute, categories[s.category].name, options.cloze_pattern);
    return predict_attribute(backend, q, options.k, options.stop_list);
  });

  MlmGeneration out;
  out.available_rank = options.k;
  for (const auto& p : predictions) out.available_rank = std::min(out.available_rank, p.values.size());

  auto build = [&](const std::vector<std::size_t>& pick, int rank_label) {
    std::vector<PromptEntry> entries;
    for (const auto& c : categories) entries.push_back({c, {}, {}});
    for (std::size_t i = 0; i < slots.size(); ++i)
      entries[slots[i].category].values.emplace(slots[i].attribute->name(), predictions[i].values[pick[i]]);
    return compose_prompt(entries, tmpl, PromptVariant::mlm(rank_label));
  };

  if (options.combination == Combination::kRankAligned) {
    out.truncated = out.available_rank < options.k;
    for (std::size_t j = 0; j < out.available_rank; ++j)
      out.prompts.push_back(build(std::vector<std::size_t>(slots.size(), j), static_cast<int>(j + 1)));
    return out;
  }

  // Cartesian: mixed-radix counter over each slot's candidates, last slot fastest.
  std::size_t total = 1;
  for (const auto& p : predictions) {
    if (p.values.empty()) {
      out.truncated = true;
      return out;
    }
    total *= p.values.size();
    if (total > options.max_cartesian)
      throw Error(ErrorCode::kInvalidArgument, "cartesian combination exceeds " + std::to_string(options.max_cartesian));
  }
  out.truncated = out.available_rank < options.k;
  std::vector<std::size_t> pick(slots.size(), 0);
  for (std::size_t n = 0; n < total; ++n) {
    out.prompts.push_back(build(pick, static_cast<int>(n + 1)));
    for (std::size_t i = slots.size(); i-- > 0;) {
      if (++pick[i] < predictions[i].values.size()) break;
      pick[i] = 0;
    }
  }
  return out;
}

}  // namespace medprompt
