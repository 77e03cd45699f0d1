#include "mmcl/service.hpp"

#include <charconv>
#include <httplib.h>

namespace mmcl {

namespace {

using json = nlohmann::ordered_json;

constexpr std::size_t kPreviewChars = 160;

ServiceResponse json_response(int status, const json& body) { return {status, body.dump(), "application/json"}; }

ServiceResponse error_response(int status, const std::string& message) {
  return json_response(status, json{{"error", message}});
}

std::optional<Modality> parse_filter(std::string_view s) {
  if (s.empty() || s == "all") return std::nullopt;
  if (s == "image") return Modality::image;
  if (s == "text") return Modality::text;
  throw UsageError("filter must be 'image' or 'text'");
}

std::size_t parse_k(std::string_view s) {
  long long k = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), k);
  if (ec != std::errc() || end != s.data() + s.size()) throw UsageError("k must be an integer");
  if (k < 1) throw UsageError("k must be at least 1");
  return static_cast<std::size_t>(k);
}

std::string preview(const IndexItem& it) {
  if (it.modality == Modality::image) return it.image_ref;
  if (it.text.size() <= kPreviewChars) return it.text;
  return it.text.substr(0, kPreviewChars) + "...";
}

std::string image_mime(const std::filesystem::path& p) {
  const std::string ext = to_lower(p.extension().string());
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  return "application/octet-stream";
}

void reply(httplib::Response& res, const ServiceResponse& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

}  // namespace

IndexService::IndexService(EmbeddingIndex index, Checkpoint ckpt, std::string checkpoint_hash,
                           ServiceOptions options)
    : index_(std::move(index)),
      ckpt_(std::move(ckpt)),
      checkpoint_hash_(std::move(checkpoint_hash)),
      options_(std::move(options)),
      encoder_(ckpt_) {
  if (index_.checkpoint_hash() != checkpoint_hash_) {
    throw Error("index was built with checkpoint " + index_.checkpoint_hash() + " but " + checkpoint_hash_ +
                " was loaded");
  }
  if (index_.size() > 0 && index_.dim() != ckpt_.model->config().shared_dim) {
    throw Error("index dimension does not match the checkpoint");
  }
}

ServiceResponse IndexService::health() const {
  return json_response(200, json{{"status", "ok"},
                                 {"index_size", index_.size()},
                                 {"checkpoint_hash", checkpoint_hash_},
                                 {"text_queries", ckpt_.model->has_text()}});
}

ServiceResponse IndexService::respond(const Eigen::RowVectorXd& vector, std::size_t k,
                                      std::optional<Modality> filter) const {
  const QueryResult r = query(index_, vector, k, filter);
  json results = json::array();
  for (const auto& hit : r.hits) {
    const IndexItem& it = index_.item(hit.item);
    results.push_back({{"id", it.id},
                       {"score", hit.score},
                       {"label", label_code(it.label)},
                       {"modality", modality_name(it.modality)},
                       {"dataset", it.dataset},
                       {"sample_id", it.sample_id},
                       {"preview", preview(it)}});
  }
  json body{{"results", std::move(results)}};
  if (!r.warning.empty()) body["warning"] = r.warning;
  return json_response(200, body);
}

ServiceResponse IndexService::query_text(std::string_view body) const {
  try {
    const auto req = nlohmann::json::parse(body);
    if (!req.is_object()) throw UsageError("request body must be a JSON object");
    std::size_t k = 10;
    if (req.contains("k")) {
      if (!req.at("k").is_number_integer() || req.at("k").get<long long>() < 1) {
        throw UsageError("k must be a positive integer");
      }
      k = req.at("k").get<std::size_t>();
    }
    std::optional<Modality> filter;
    if (req.contains("filter") && !req.at("filter").is_null()) filter = parse_filter(req.at("filter").get<std::string>());
    if (req.contains("seed_id") && !req.at("seed_id").is_null()) {
      const auto id = req.at("seed_id").get<std::string>();
      const auto pos = index_.find(id);
      if (!pos) return error_response(404, "unknown item '" + id + "'");
      return respond(index_.vectors().row(static_cast<Eigen::Index>(*pos)), k, filter);
    }
    if (!req.contains("text") || !req.at("text").is_string()) throw UsageError("text is required");
    if (!ckpt_.model->has_text()) return error_response(422, "checkpoint has no text branch");
    const auto text = req.at("text").get<std::string>();
    if (trim(text).empty()) return error_response(422, "query text is empty");
    return respond(encoder_.encode_text(text), k, filter);
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, std::string("malformed request: ") + e.what());
  } catch (const UsageError& e) {
    return error_response(400, e.what());
  } catch (const Error& e) {
    return error_response(422, e.what());
  }
}

ServiceResponse IndexService::query_image(std::string_view image_bytes, std::string_view k,
                                          std::string_view filter) const {
  try {
    const std::size_t kk = k.empty() ? 10 : parse_k(k);
    const auto f = parse_filter(filter);
    if (image_bytes.empty()) throw UsageError("image is required");
    Eigen::RowVectorXd v;
    try {
      v = encoder_.encode_image(image_bytes);
    } catch (const Error& e) {
      return error_response(422, std::string("cannot encode image: ") + e.what());
    }
    return respond(v, kk, f);
  } catch (const UsageError& e) {
    return error_response(400, e.what());
  } catch (const Error& e) {
    return error_response(422, e.what());
  }
}

ServiceResponse IndexService::item(std::string_view id) const {
  const auto pos = index_.find(id);
  if (!pos) return error_response(404, "unknown item '" + std::string(id) + "'");
  const IndexItem& it = index_.item(*pos);
  json body{{"id", it.id},
            {"modality", modality_name(it.modality)},
            {"sample_id", it.sample_id},
            {"label", label_code(it.label)},
            {"label_name", label_name(it.label)},
            {"dataset", it.dataset},
            {"image_ref", it.image_ref}};
  if (it.strategy) {
    body["strategy"] = strategy_code(*it.strategy);
    body["text"] = it.text;
  } else {
    const auto path = options_.image_root / it.image_ref;
    if (std::filesystem::is_regular_file(path)) {
      body["image_mime"] = image_mime(path);
      body["image_base64"] = base64_encode(read_file(path));
    } else {
      body["image_base64"] = nullptr;
    }
  }
  return json_response(200, body);
}

void IndexService::mount(httplib::Server& server) const {
  const std::string origin = options_.cors_origin;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/health", [this](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  server.Post("/query/text", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, query_text(req.body));
  });
  server.Post("/query/image", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data() || !req.has_file("image")) {
      reply(res, error_response(400, "expected multipart form data with an 'image' part"));
      return;
    }
    const std::string k = req.has_file("k") ? req.get_file_value("k").content : "";
    const std::string filter = req.has_file("filter") ? req.get_file_value("filter").content : "";
    reply(res, query_image(req.get_file_value("image").content, k, filter));
  });
  server.Get(R"(/item/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, item(httplib::detail::decode_url(req.matches[1].str(), false)));
  });
}

void IndexService::listen(const std::string& host, int port) const {
  httplib::Server server;
  mount(server);
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace mmcl
