#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vizprompt/prompt.hpp"

namespace vizprompt::mllm {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string base64_encode(std::string_view data);

struct Usage {
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;
  bool operator==(const Usage&) const = default;
};

struct ChatRequest {
  std::string model_name;
  std::vector<PromptMessage> messages;
  double temperature = 0.0;
  int max_output_tokens = 1024;
};

// Canonical form hashed by canonical_digest: sorted keys, images reduced to
// their size and the SHA-256 of their RGB bytes. Part and message order is kept.
nlohmann::json canonical_json(const ChatRequest& request);
std::string canonical_digest(const ChatRequest& request);

enum class Transport { live, replay };
std::string_view to_string(Transport t);

struct ChatResponse {
  std::string text;
  std::optional<Usage> usage;
  Transport transport = Transport::live;
  // The only way `text` may legitimately be empty.
  bool empty_response = false;
};

// Append-only digest -> response map persisted as JSON lines:
// {"digest","model","response_text","usage","recorded_at"[,"empty_response"]}.
// An empty path keeps the store in memory.
class TranscriptStore {
 public:
  explicit TranscriptStore(std::string path = {});

  // Throws Error(BadTranscript) on malformed lines or a repeated digest.
  static std::shared_ptr<TranscriptStore> open(const std::string& path);

  std::optional<ChatResponse> find(const std::string& digest) const;
  // Returns false (and writes nothing) when the digest is already stored.
  bool append(const std::string& digest, const std::string& model, const ChatResponse& response);
  // The stored line for `digest`, as written to the file.
  std::optional<nlohmann::json> record_json(const std::string& digest) const;
  std::size_t size() const;
  std::vector<std::string> digests() const;  // insertion order
  const std::string& path() const { return path_; }

 private:
  struct Record {
    std::string model;
    ChatResponse response;
    std::string recorded_at;
  };
  static nlohmann::json line_json(const std::string& digest, const Record& r);
  std::string path_;
  mutable std::mutex mutex_;
  std::map<std::string, Record> records_;
  std::vector<std::string> order_;
};

struct HttpReply {
  int status = 0;
  std::string body;
};

// Delivers one serialized chat-completions request; no retries.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpReply post(const nlohmann::json& body) = 0;
};

struct Endpoint {
  std::string url = "https://api.openai.com/v1/chat/completions";
  std::string api_key;
  std::string model = "gpt-4o";
  double timeout_s = 120.0;
};

// VIZPROMPT_ENDPOINT, VIZPROMPT_API_KEY and VIZPROMPT_MODEL over the defaults above.
Endpoint endpoint_from_env();

std::shared_ptr<HttpTransport> make_http_transport(const Endpoint& endpoint);

// Answers requests in-process: `reply` maps the request body to a reply.
class ScriptedTransport final : public HttpTransport {
 public:
  using Handler = std::function<HttpReply(const nlohmann::json& body)>;
  explicit ScriptedTransport(Handler reply) : reply_(std::move(reply)) {}

  // Wraps `text_for` output as a 200 chat-completions body.
  static std::shared_ptr<ScriptedTransport> answering(std::function<std::string(const nlohmann::json& body)> text_for);

  HttpReply post(const nlohmann::json& body) override;
  std::size_t calls() const { return calls_.load(); }

 private:
  Handler reply_;
  std::atomic<std::size_t> calls_{0};
};

// Chat-completions wire body: image parts become data-URL base64 PNGs.
nlohmann::json wire_body(const ChatRequest& request);
// Reads choices[0].message.content and usage. Throws Error(HttpError).
ChatResponse parse_wire_response(const std::string& body);
// The concatenated text of every text part of the wire body.
std::string wire_text(const nlohmann::json& body);

enum class Mode { live, record, replay };
std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view name);  // throws Error(BadConfig)

struct ClientConfig {
  Mode mode = Mode::replay;
  std::string model = "gpt-4o";
  double temperature = 0.0;
  int max_output_tokens = 1024;
  std::size_t max_in_flight = 4;
  int max_tries = 5;
  double backoff_base_s = 1.0;
  double backoff_factor = 2.0;
  // Waits between retries; replaced in tests.
  std::function<void(double seconds)> sleep;
};

// Thread-safe. live sends every request; record replays stored digests and
// sends the rest; replay never touches the network. Responses that were sent
// are stored whenever a store is attached.
class MllmClient {
 public:
  // transport may be null in replay mode; store may be null in live mode.
  MllmClient(ClientConfig config, std::shared_ptr<TranscriptStore> store, std::shared_ptr<HttpTransport> transport);

  ChatRequest make_request(std::vector<PromptMessage> messages) const;
  ChatResponse send(const ChatRequest& request);
  ChatResponse send(PromptMessage message) { return send(make_request({std::move(message)})); }

  const ClientConfig& config() const { return config_; }
  std::size_t sends() const { return sends_.load(); }          // every send() call
  std::size_t network_calls() const { return network_.load(); }  // HTTP attempts
  std::shared_ptr<TranscriptStore> store() const { return store_; }
  // Digests of every send() call in call order, including ones that failed.
  std::vector<std::string> sent_digests(std::size_t from = 0) const;

 private:
  ChatResponse send_live(const ChatRequest& request);

  ClientConfig config_;
  std::shared_ptr<TranscriptStore> store_;
  std::shared_ptr<HttpTransport> transport_;
  std::counting_semaphore<1024> slots_;
  std::atomic<std::size_t> sends_{0};
  std::atomic<std::size_t> network_{0};
  mutable std::mutex log_mutex_;
  std::vector<std::string> log_;
};

enum class ExtractMethod { format, fuzzy };
std::string_view to_string(ExtractMethod m);

struct ExtractedLabel {
  std::string label;
  ExtractMethod method = ExtractMethod::format;
};

// The last "Answer: <x>" line whose <x> equals a label (ignoring case,
// surrounding quotes, brackets, markdown emphasis and trailing punctuation)
// wins. Otherwise exactly one label must occur as a whole word (occurrences
// inside a longer matching label do not count).
// Throws NoLabelFound, AmbiguousLabel, or BadParams for an empty label set.
ExtractedLabel extract_label(std::string_view response, const std::vector<std::string>& label_set);

}  // namespace vizprompt::mllm
