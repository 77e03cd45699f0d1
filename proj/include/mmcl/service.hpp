#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "mmcl/index.hpp"

namespace httplib {
class Server;
}

namespace mmcl {

struct ServiceResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

struct ServiceOptions {
  /// Resolves item image_ref paths for GET /item.
  std::filesystem::path image_root;
  /// Value of Access-Control-Allow-Origin.
  std::string cors_origin = "*";
};

/// JSON retrieval API over a read-only index. Handlers are plain methods so
/// they can be exercised without a socket; `mount` wires them to HTTP routes.
class IndexService {
 public:
  /// Throws when the index was built from a different checkpoint.
  IndexService(EmbeddingIndex index, Checkpoint ckpt, std::string checkpoint_hash, ServiceOptions options = {});
  IndexService(const IndexService&) = delete;
  IndexService& operator=(const IndexService&) = delete;

  ServiceResponse health() const;
  /// Body: {"text": str, "k": int, "filter": "image"|"text"?, "seed_id": str?}.
  /// With seed_id the stored vector of that item is the query and text may
  /// be omitted.
  ServiceResponse query_text(std::string_view body) const;
  ServiceResponse query_image(std::string_view image_bytes, std::string_view k, std::string_view filter) const;
  ServiceResponse item(std::string_view id) const;

  void mount(httplib::Server& server) const;
  /// Blocks until the server stops.
  void listen(const std::string& host, int port) const;

  const EmbeddingIndex& index() const { return index_; }

 private:
  ServiceResponse respond(const Eigen::RowVectorXd& vector, std::size_t k, std::optional<Modality> filter) const;

  EmbeddingIndex index_;
  Checkpoint ckpt_;
  std::string checkpoint_hash_;
  ServiceOptions options_;
  QueryEncoder encoder_;
};

}  // namespace mmcl
