#include "medprompt/service.hpp"

#include <fstream>
#include <sstream>

#include "httplib.h"
#include "medprompt/error.hpp"
#include "medprompt/text.hpp"

namespace medprompt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound:
    case ErrorCode::kCategoryNotFound:
      return 404;
    case ErrorCode::kBackendUnreachable:
      return 502;
    case ErrorCode::kIoFailure:
      return 500;
    default:
      return 400;
  }
}

ServiceResponse json_response(const json& j, int status = 200) { return {status, j.dump(), "application/json"}; }

ServiceResponse error_response(int status, std::string_view code, const std::string& message) {
  return json_response({{"error", code}, {"message", message}}, status);
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + p.string());
  return json::parse(in);
}

bool is_digest(std::string_view s) {
  return !s.empty() && s.size() <= 64 &&
         std::all_of(s.begin(), s.end(), [](char c) { return std::isxdigit(static_cast<unsigned char>(c)); });
}

}  // namespace

PromptService::PromptService(fs::path data_root) : root_(std::move(data_root)) {
  if (!fs::is_directory(root_)) throw Error(ErrorCode::kIoFailure, "data root " + root_.string() + " is not a directory");
  if (fs::is_directory(root_ / "datasets")) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root_ / "datasets"))
      if (fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      Dataset ds{DatasetManifest::load(d / "manifest.json"), {}};
      ds.data = load_dataset(ds.manifest, d, false);
      for (const auto& [split, records] : ds.data.splits)
        for (const auto& r : records) images_.emplace(r.image.id, ImageEntry{ds.manifest.name, split, r.image});
      datasets_.emplace(ds.manifest.name, std::move(ds));
    }
  }
  if (datasets_.empty()) throw Error(ErrorCode::kIoFailure, "data root " + root_.string() + " has no loadable dataset");

  const fs::path backends = root_ / "backends.json";
  if (fs::exists(backends)) {
    const json b = read_json_file(backends);
    auto rel = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : root_ / p; };
    if (b.contains("mlm")) {
      auto d = MaskedLmBackendDescriptor::from_json(b.at("mlm"));
      if (d.vocabulary_path) d.vocabulary_path = rel(d.vocabulary_path->string());
      mlm_ = make_mlm_backend(d);
    }
    if (b.contains("vqa")) {
      auto d = VqaBackendDescriptor::from_json(b.at("vqa"));
      if (d.answers_path) d.answers_path = rel(d.answers_path->string());
      vqa_ = make_vqa_backend(d);
    }
    if (b.contains("prompts")) prompt_config_ = PromptConfig::load(rel(b.at("prompts").get<std::string>()));
    template_name_ = b.value("template", template_name_);
    if (b.contains("encoder")) {
      const ProposalGrid grid = b.contains("proposals") ? ProposalGrid::from_json(b.at("proposals")) : ProposalGrid{};
      grounder_ = make_grounder(load_encoder(rel(b.at("encoder").get<std::string>())), grid, b.value("input_size", 800));
    }
  }
}

ServiceResponse PromptService::handle(const std::string& method, const std::string& path,
                                      const std::map<std::string, std::string>& query, const std::string& body) const {
  try {
    const auto seg = split_path(path);
    if (seg.size() < 2 || seg[0] != "api") return error_response(404, "not-found", "no route " + path);
    json req = json::object();
    if (method == "POST" && !text::trim(body).empty()) {
      try {
        req = json::parse(body);
      } catch (const json::parse_error& e) {
        return error_response(400, "invalid-argument", std::string("malformed JSON body: ") + e.what());
      }
    }
    const std::string& r = seg[1];
    if (method == "POST") {
      if (r == "prompts" && seg.size() == 3 && seg[2] == "compose") return json_response(compose(req));
      if (r == "prompts" && seg.size() == 3 && seg[2] == "auto") return json_response(auto_prompts(req));
      if (r == "ground" && seg.size() == 2) return json_response(ground(req));
      if (r == "sweeps" && seg.size() == 2) return json_response(create_sweep(req), 201);
    } else if (method == "GET") {
      if (r == "datasets" && seg.size() == 2) return json_response(datasets());
      if (r == "datasets" && seg.size() == 4 && seg[3] == "images") return json_response(dataset_images(seg[2], query));
      if (r == "images" && seg.size() == 3) return image_bytes(seg[2]);
      if (r == "runs" && seg.size() == 2) return json_response(runs());
      if (r == "runs" && seg.size() == 3) {
        if (!is_digest(seg[2])) return error_response(404, "not-found", "no run " + seg[2]);
        return json_response(read_run_artifact(root_ / "runs" / seg[2]));
      }
      if (r == "sweeps" && seg.size() == 3) return json_response(get_sweep(seg[2]));
    }
    return error_response(404, "not-found", "no route " + method + " " + path);
  } catch (const Error& e) {
    return error_response(status_for(e.code()), to_string(e.code()), e.what());
  } catch (const json::exception& e) {
    return error_response(400, "invalid-argument", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

const PromptService::ImageEntry& PromptService::image(const std::string& id) const {
  auto it = images_.find(id);
  if (it == images_.end()) throw Error(ErrorCode::kNotFound, "unknown image '" + id + "'");
  return it->second;
}

const PromptService::Dataset& PromptService::dataset(const std::string& name) const {
  auto it = datasets_.find(name);
  if (it == datasets_.end()) throw Error(ErrorCode::kNotFound, "unknown dataset '" + name + "'");
  return it->second;
}

PromptRequest PromptService::base_request(const json& req) const {
  PromptRequest r;
  std::vector<AttributeName> attributes;
  if (prompt_config_) attributes = prompt_config_->attributes;

  if (req.contains("categories")) {
    for (const auto& c : req.at("categories")) {
      if (c.is_string() && prompt_config_) {
        const auto name = c.get<std::string>();
        auto it = std::find_if(prompt_config_->categories.begin(), prompt_config_->categories.end(),
                               [&](const CategorySpec& s) { return s.name == name; });
        r.categories.push_back(it != prompt_config_->categories.end() ? *it : category_from_json(c));
      } else {
        r.categories.push_back(category_from_json(c, attributes));
      }
    }
  } else if (prompt_config_) {
    r.categories = prompt_config_->categories;
  } else {
    throw Error(ErrorCode::kInvalidArgument, "request needs categories");
  }

  if (req.contains("template")) {
    const json& t = req.at("template");
    if (t.is_string() && prompt_config_ && prompt_config_->templates.count(t.get<std::string>()))
      r.tmpl = prompt_config_->get_template(t.get<std::string>());
    else
      r.tmpl = template_from_json(t);
  } else if (prompt_config_ && prompt_config_->templates.count(template_name_)) {
    r.tmpl = prompt_config_->get_template(template_name_);
  } else {
    r.tmpl = PromptTemplate::class_name();
  }

  if (req.contains("values")) {
    for (const auto& [cat, attrs] : req.at("values").items()) {
      AttributeMap m;
      for (const auto& [k, v] : attrs.items()) m.emplace(k, attribute_value_from_json(v));
      r.values.emplace(cat, std::move(m));
    }
  } else if (prompt_config_) {
    r.values = prompt_config_->values;
  }
  if (prompt_config_) r.heads = prompt_config_->heads;
  const json heads_doc = req.value("heads", json::object());
  for (const auto& [cat, head] : heads_doc.items()) r.heads[cat] = head.get<std::string>();
  const std::string form = req.value("form", "sentence");
  r.form = form == "phrases" ? PromptForm::kPhrases : PromptForm::kSentence;
  r.mode = parse_prompt_mode(req.value("mode", "manual"));
  r.k = req.value("k", std::size_t{3});
  return r;
}

json PromptService::compose(const json& req) const {
  json base = req;
  base.erase("mode");
  PromptRequest r = base_request(base);
  std::vector<PromptEntry> entries;
  const json patterns = req.value("patterns", json::object());
  for (const auto& c : r.categories) {
    auto it = r.values.find(c.name);
    PromptEntry e{c, it == r.values.end() ? AttributeMap{} : it->second, {}};
    if (patterns.contains(c.name)) e.pattern_override = PromptTemplate(patterns.at(c.name).get<std::string>(), r.tmpl.joiner());
    entries.push_back(std::move(e));
  }
  const ComposedPrompt p = compose_prompt(entries, r.tmpl);
  json out = to_json(p);
  out["phrases"] = p.phrases();
  if (r.form == PromptForm::kPhrases) out["rearranged"] = to_json(rearrange_prompt(p, r.categories, r.heads));
  return out;
}

json PromptService::auto_prompts(const json& req) const {
  if (!req.contains("mode")) throw Error(ErrorCode::kInvalidArgument, "auto prompts need a mode");
  const PromptRequest r = base_request(req);
  const PromptBackends b{mlm_.get(), vqa_.get()};
  std::vector<ComposedPrompt> prompts;
  if (image_specific(r.mode)) {
    if (!req.contains("image_id")) throw Error(ErrorCode::kInvalidArgument, "image-specific modes need image_id");
    prompts.push_back(image_prompt(r, b, image(req.at("image_id").get<std::string>()).image));
  } else {
    prompts = shared_prompts(r, b);
  }
  json arr = json::array();
  for (const auto& p : prompts) arr.push_back(to_json(p));
  return {{"mode", to_string(r.mode)}, {"prompts", arr}};
}

json PromptService::ground(const json& req) const {
  if (!grounder_) throw Error(ErrorCode::kConfigInvalid, "no encoder configured in backends.json");
  const ImageEntry& entry = image(req.at("image_id").get<std::string>());
  const ComposedPrompt prompt = prompt_from_text(req.at("prompt_text").get<std::string>(), spans_from_json(req.at("spans")),
                                                 req.value("joiner", std::string(". ")));
  DecodeParams params;
  params.score_threshold = req.value("score_threshold", params.score_threshold);
  params.nms_iou = req.value("nms_iou", params.nms_iou);
  params.max_detections = req.value("max_detections", params.max_detections);
  const GroundingResult g = grounder_->ground(entry.image, prompt, params);

  json dets = json::array();
  for (const auto& d : g.detections) dets.push_back(detection_to_json(d));
  json summary{{"num_proposals", g.proposals.size()}};
  if (g.scores) {
    const auto& s = g.scores->data;
    summary["num_regions"] = s.rows();
    summary["num_tokens"] = s.cols();
    summary["min"] = s.minCoeff();
    summary["max"] = s.maxCoeff();
    json per = json::object();
    for (const auto& span : prompt.spans)
      per[span.category] = logistic(s.middleCols(static_cast<Index>(span.begin), static_cast<Index>(span.end - span.begin)).maxCoeff());
    summary["category_max_score"] = per;
  }
  return {{"image_id", entry.image.id}, {"detections", dets}, {"scores", summary}};
}

json PromptService::datasets() const {
  json out = json::array();
  for (const auto& [name, ds] : datasets_) {
    json m = ds.manifest.to_json();
    json loaded = json::object();
    for (const auto& [split, records] : ds.data.splits) loaded[split] = records.size();
    m["loaded"] = loaded;
    m["warnings"] = ds.data.warnings;
    out.push_back(std::move(m));
  }
  return out;
}

json PromptService::dataset_images(const std::string& name, const std::map<std::string, std::string>& query) const {
  const Dataset& ds = dataset(name);
  auto q = query.find("split");
  const std::string split = q == query.end() ? "test" : q->second;
  auto it = ds.data.splits.find(split);
  if (it == ds.data.splits.end()) throw Error(ErrorCode::kNotFound, name + " has no split '" + split + "'");
  std::size_t limit = 50, offset = 0;
  if (auto l = query.find("limit"); l != query.end()) limit = std::stoul(l->second);
  if (auto o = query.find("offset"); o != query.end()) offset = std::stoul(o->second);
  json images = json::array();
  for (std::size_t i = offset; i < it->second.size() && images.size() < limit; ++i) {
    const auto& r = it->second[i];
    images.push_back({{"id", r.image.id},
                      {"width", r.image.width},
                      {"height", r.image.height},
                      {"url", "/api/images/" + r.image.id},
                      {"num_boxes", r.boxes.size()}});
  }
  return {{"dataset", name}, {"split", split}, {"total", it->second.size()}, {"images", images}};
}

ServiceResponse PromptService::image_bytes(const std::string& id) const {
  const ImageEntry& e = image(id);
  std::ifstream in(e.image.uri, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read image " + e.image.uri);
  std::ostringstream os;
  os << in.rdbuf();
  return {200, os.str(), "image/x-portable-pixmap"};
}

json PromptService::runs() const {
  json out = json::array();
  for (const auto& digest : list_runs(root_ / "runs")) {
    const json report = read_json_file(root_ / "runs" / digest / "report.json");
    const json config = read_json_file(root_ / "runs" / digest / "config.json");
    out.push_back({{"digest", digest},
                   {"mean_ap", report.value("mean_ap", 0.0)},
                   {"mean_ap50", report.value("mean_ap50", 0.0)},
                   {"mode", config.at("prompts").value("mode", "")}});
  }
  return out;
}

json PromptService::create_sweep(const json& req) const {
  if (!grounder_) throw Error(ErrorCode::kConfigInvalid, "no encoder configured in backends.json");
  const Dataset& ds = dataset(req.value("dataset", datasets_.begin()->first));
  const std::string split = req.value("split", "test");
  auto it = ds.data.splits.find(split);
  if (it == ds.data.splits.end()) throw Error(ErrorCode::kNotFound, ds.manifest.name + " has no split '" + split + "'");
  const auto& variants_json = req.at("variants");
  if (!variants_json.is_array() || variants_json.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep needs variants");

  std::vector<SweepVariant> variants;
  for (const auto& v : variants_json) {
    const std::string label = v.value("label", "");
    if (v.contains("text")) {
      variants.push_back(SweepVariant::fixed(
          label, prompt_from_text(v.at("text").get<std::string>(), spans_from_json(v.at("spans")), v.value("joiner", std::string(". ")))));
      continue;
    }
    auto r = std::make_shared<const PromptRequest>(base_request(v));
    const PromptBackends b{mlm_.get(), vqa_.get()};
    if (image_specific(r->mode)) {
      variants.push_back({label, [r, b](const ImageRef& im) { return image_prompt(*r, b, im); }});
    } else {
      const std::size_t rank = v.value("rank", std::size_t{1});
      try {
        auto shared = shared_prompts(*r, b);
        if (rank < 1 || rank > shared.size()) throw Error(ErrorCode::kInvalidArgument, "rank " + std::to_string(rank) + " unavailable");
        variants.push_back(SweepVariant::fixed(label, shared[rank - 1]));
      } catch (const Error& e) {
        const std::string msg = e.what();
        const ErrorCode code = e.code();
        variants.push_back({label, [msg, code](const ImageRef&) -> ComposedPrompt { throw Error(code, msg); }});
      }
    }
  }
  std::vector<std::string> categories;
  for (const auto& c : ds.manifest.categories) categories.push_back(c.name);
  const std::string id = json_digest(req);
  const auto rows = prompt_sweep(variants, it->second, categories, *grounder_, DecodeParams{}, id);
  {
    std::lock_guard<std::mutex> lock(sweep_mutex_);
    write_sweep_table(rows, root_ / "sweeps" / id);
  }
  return {{"id", id}, {"rows", rows.size()}};
}

json PromptService::get_sweep(const std::string& id) const {
  if (!is_digest(id)) throw Error(ErrorCode::kNotFound, "no sweep " + id);
  const fs::path p = root_ / "sweeps" / id / "sweep.json";
  if (!fs::exists(p)) throw Error(ErrorCode::kNotFound, "no sweep " + id);
  std::lock_guard<std::mutex> lock(sweep_mutex_);
  json j = read_json_file(p);
  j["id"] = id;
  return j;
}

struct HttpServer::Impl {
  std::shared_ptr<const PromptService> service;
  httplib::Server server;
};

HttpServer::HttpServer(std::shared_ptr<const PromptService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto handler = [svc = impl_->service](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const ServiceResponse r = svc->handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  impl_->server.Get(".*", handler);
  impl_->server.Post(".*", handler);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(ErrorCode::kBindFailure, "cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace medprompt
