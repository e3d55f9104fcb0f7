#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "vizprompt/error.hpp"
#include "vizprompt/mllm.hpp"

namespace vizprompt::mllm {

namespace {

class HttplibTransport final : public HttpTransport {
 public:
  HttplibTransport(std::string origin, std::string path, std::string api_key, double timeout_s)
      : origin_(std::move(origin)), path_(std::move(path)), api_key_(std::move(api_key)), timeout_s_(timeout_s) {}

  HttpReply post(const nlohmann::json& body) override {
    // httplib clients are not shareable across threads; one per request.
    httplib::Client client(origin_);
    const auto timeout = std::chrono::duration<double>(timeout_s_);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
    const auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) return {0, "transport error: " + httplib::to_string(res.error())};
    return {res->status, res->body};
  }

 private:
  std::string origin_, path_, api_key_;
  double timeout_s_;
};

}  // namespace

std::shared_ptr<HttpTransport> make_http_transport(const Endpoint& endpoint) {
  if (endpoint.api_key.empty()) throw Error(ErrorKind::AuthMissing, "VIZPROMPT_API_KEY is not set");
  const auto scheme_end = endpoint.url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorKind::BadConfig, "endpoint URL needs a scheme: " + endpoint.url);
  const auto path_start = endpoint.url.find('/', scheme_end + 3);
  const std::string origin = endpoint.url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : endpoint.url.substr(path_start);
  return std::make_shared<HttplibTransport>(origin, path, endpoint.api_key, endpoint.timeout_s);
}

}  // namespace vizprompt::mllm
