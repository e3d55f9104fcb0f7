#include "vizprompt/mllm.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <thread>

#include "vizprompt/error.hpp"

namespace vizprompt::mllm {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool word_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string_view role_name(Role r) { return r == Role::system ? "system" : "user"; }

void check_response(const ChatResponse& r) {
  if (r.text.empty() && !r.empty_response) throw Error(ErrorKind::HttpError, "empty response text");
}

nlohmann::json usage_json(const std::optional<Usage>& u) {
  if (!u) return nullptr;
  return {{"prompt_tokens", u->prompt_tokens}, {"completion_tokens", u->completion_tokens}};
}

std::optional<Usage> usage_from(const nlohmann::json& j) {
  if (!j.is_object()) return std::nullopt;
  Usage u;
  u.prompt_tokens = j.value("prompt_tokens", std::size_t{0});
  u.completion_tokens = j.value("completion_tokens", std::size_t{0});
  return u;
}

bool transient(int status) { return status == 429 || status >= 500 || status <= 0; }

// Trims quotes, brackets, emphasis and trailing punctuation around an answer.
std::string clean_answer(std::string_view s) {
  auto junk = [](unsigned char c) {
    return std::isspace(c) || c == '"' || c == '\'' || c == '*' || c == '`' || c == '<' || c == '>' || c == '[' ||
           c == ']' || c == '(' || c == ')' || c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '_';
  };
  while (!s.empty() && junk(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && junk(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::BadParams, "SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string base64_encode(std::string_view data) {
  std::string out(4 * ((data.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(data.data()), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

nlohmann::json canonical_json(const ChatRequest& request) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : request.messages) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : m.parts) {
      if (const auto* t = std::get_if<TextPart>(&p)) {
        parts.push_back({{"text", t->text}});
      } else {
        const auto& img = std::get<ImagePart>(p).image;
        const std::string_view px(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
        parts.push_back({{"image", {{"width", img.width_px}, {"height", img.height_px}, {"rgb_sha256", sha256_hex(px)}}}});
      }
    }
    messages.push_back({{"role", role_name(m.role)}, {"parts", parts}});
  }
  return {{"model", request.model_name},
          {"temperature", request.temperature},
          {"max_output_tokens", request.max_output_tokens},
          {"messages", messages}};
}

std::string canonical_digest(const ChatRequest& request) { return sha256_hex(canonical_json(request).dump()); }

std::string_view to_string(Transport t) { return t == Transport::live ? "live" : "replay"; }

// ---- transcript store ------------------------------------------------------

TranscriptStore::TranscriptStore(std::string path) : path_(std::move(path)) {}

std::shared_ptr<TranscriptStore> TranscriptStore::open(const std::string& path) {
  auto store = std::make_shared<TranscriptStore>(path);
  std::ifstream in(path);
  if (!in) return store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::BadTranscript, where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("digest") || !j.contains("response_text") || !j["digest"].is_string() ||
        !j["response_text"].is_string()) {
      throw Error(ErrorKind::BadTranscript, where + ": missing digest or response_text");
    }
    Record r;
    r.model = j.value("model", "");
    r.recorded_at = j.value("recorded_at", "");
    r.response.text = j["response_text"].get<std::string>();
    r.response.usage = usage_from(j.value("usage", nlohmann::json()));
    r.response.empty_response = j.value("empty_response", false);
    r.response.transport = Transport::replay;
    const auto digest = j["digest"].get<std::string>();
    if (!store->records_.emplace(digest, std::move(r)).second) {
      throw Error(ErrorKind::BadTranscript, where + ": digest " + digest + " recorded twice");
    }
    store->order_.push_back(digest);
  }
  return store;
}

std::optional<ChatResponse> TranscriptStore::find(const std::string& digest) const {
  std::lock_guard lock(mutex_);
  const auto it = records_.find(digest);
  if (it == records_.end()) return std::nullopt;
  ChatResponse r = it->second.response;
  r.transport = Transport::replay;
  return r;
}

bool TranscriptStore::append(const std::string& digest, const std::string& model, const ChatResponse& response) {
  std::lock_guard lock(mutex_);
  if (records_.count(digest)) return false;
  Record r{model, response, utc_now()};
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error(ErrorKind::BadTranscript, "cannot write " + path_);
    out << line_json(digest, r).dump() << '\n';
  }
  records_.emplace(digest, std::move(r));
  order_.push_back(digest);
  return true;
}

nlohmann::json TranscriptStore::line_json(const std::string& digest, const Record& r) {
  nlohmann::json j = {{"digest", digest},
                      {"model", r.model},
                      {"response_text", r.response.text},
                      {"usage", usage_json(r.response.usage)},
                      {"recorded_at", r.recorded_at}};
  if (r.response.empty_response) j["empty_response"] = true;
  return j;
}

std::optional<nlohmann::json> TranscriptStore::record_json(const std::string& digest) const {
  std::lock_guard lock(mutex_);
  const auto it = records_.find(digest);
  if (it == records_.end()) return std::nullopt;
  return line_json(digest, it->second);
}

std::size_t TranscriptStore::size() const {
  std::lock_guard lock(mutex_);
  return records_.size();
}

std::vector<std::string> TranscriptStore::digests() const {
  std::lock_guard lock(mutex_);
  return order_;
}

// ---- wire format -----------------------------------------------------------

Endpoint endpoint_from_env() {
  Endpoint e;
  if (const char* v = std::getenv("VIZPROMPT_ENDPOINT"); v && *v) e.url = v;
  if (const char* v = std::getenv("VIZPROMPT_API_KEY"); v && *v) e.api_key = v;
  if (const char* v = std::getenv("VIZPROMPT_MODEL"); v && *v) e.model = v;
  return e;
}

nlohmann::json wire_body(const ChatRequest& request) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : request.messages) {
    nlohmann::json content = nlohmann::json::array();
    for (const auto& p : m.parts) {
      if (const auto* t = std::get_if<TextPart>(&p)) {
        content.push_back({{"type", "text"}, {"text", t->text}});
      } else {
        const auto png = encode_png(std::get<ImagePart>(p).image);
        const std::string_view bytes(reinterpret_cast<const char*>(png.data()), png.size());
        content.push_back({{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + base64_encode(bytes)}}}});
      }
    }
    messages.push_back({{"role", role_name(m.role)}, {"content", content}});
  }
  return {{"model", request.model_name},
          {"messages", messages},
          {"temperature", request.temperature},
          {"max_tokens", request.max_output_tokens}};
}

std::string wire_text(const nlohmann::json& body) {
  std::string out;
  for (const auto& m : body.at("messages")) {
    for (const auto& c : m.at("content")) {
      if (c.value("type", "") == "text") {
        if (!out.empty()) out += "\n\n";
        out += c.at("text").get<std::string>();
      }
    }
  }
  return out;
}

ChatResponse parse_wire_response(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    const auto& msg = j.at("choices").at(0).at("message");
    ChatResponse r;
    r.transport = Transport::live;
    if (msg.contains("content") && msg["content"].is_string()) r.text = msg["content"].get<std::string>();
    r.empty_response = r.text.empty();
    r.usage = usage_from(j.value("usage", nlohmann::json()));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::HttpError, std::string("unreadable chat response: ") + e.what());
  }
}

std::shared_ptr<ScriptedTransport> ScriptedTransport::answering(
    std::function<std::string(const nlohmann::json& body)> text_for) {
  return std::make_shared<ScriptedTransport>([text_for = std::move(text_for)](const nlohmann::json& body) {
    nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", text_for(body)}}}}}},
                            {"usage", {{"prompt_tokens", 0}, {"completion_tokens", 0}}}};
    return HttpReply{200, reply.dump()};
  });
}

HttpReply ScriptedTransport::post(const nlohmann::json& body) {
  ++calls_;
  return reply_(body);
}

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::live: return "live";
    case Mode::record: return "record";
    default: return "replay";
  }
}

Mode mode_from_string(std::string_view name) {
  if (name == "live") return Mode::live;
  if (name == "record") return Mode::record;
  if (name == "replay") return Mode::replay;
  throw Error(ErrorKind::BadConfig, "unknown mode '" + std::string(name) + "' (expected live, record or replay)");
}

// ---- client ----------------------------------------------------------------

MllmClient::MllmClient(ClientConfig config, std::shared_ptr<TranscriptStore> store,
                       std::shared_ptr<HttpTransport> transport)
    : config_(std::move(config)),
      store_(std::move(store)),
      transport_(std::move(transport)),
      slots_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(config_.max_in_flight, 1, 1024))) {
  if (config_.mode != Mode::replay && !transport_) throw Error(ErrorKind::BadConfig, "live and record modes need a transport");
  if (config_.mode != Mode::live && !store_) throw Error(ErrorKind::BadConfig, "record and replay modes need a transcript store");
  if (config_.max_tries < 1) throw Error(ErrorKind::BadConfig, "max_tries must be at least 1");
  if (!config_.sleep) {
    config_.sleep = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
  }
}

ChatRequest MllmClient::make_request(std::vector<PromptMessage> messages) const {
  return ChatRequest{config_.model, std::move(messages), config_.temperature, config_.max_output_tokens};
}

std::vector<std::string> MllmClient::sent_digests(std::size_t from) const {
  std::lock_guard lock(log_mutex_);
  if (from >= log_.size()) return {};
  return {log_.begin() + static_cast<std::ptrdiff_t>(from), log_.end()};
}

ChatResponse MllmClient::send(const ChatRequest& request) {
  ++sends_;
  for (const auto& m : request.messages) m.validate();
  const std::string digest = canonical_digest(request);
  {
    std::lock_guard lock(log_mutex_);
    log_.push_back(digest);
  }
  if (config_.mode != Mode::live) {
    if (auto hit = store_->find(digest)) return *hit;
    if (config_.mode == Mode::replay) {
      throw Error(ErrorKind::MissingTranscript, "no recorded response for request " + digest);
    }
  }
  ChatResponse r = send_live(request);
  if (store_) store_->append(digest, request.model_name, r);
  return r;
}

ChatResponse MllmClient::send_live(const ChatRequest& request) {
  const auto body = wire_body(request);
  slots_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{slots_};

  double delay = config_.backoff_base_s;
  HttpReply reply;
  for (int attempt = 1; attempt <= config_.max_tries; ++attempt) {
    ++network_;
    reply = transport_->post(body);
    if (reply.status >= 200 && reply.status < 300) {
      auto r = parse_wire_response(reply.body);
      check_response(r);
      return r;
    }
    if (reply.status == 401 || reply.status == 403) {
      throw Error(ErrorKind::AuthMissing, "endpoint rejected the credential (HTTP " + std::to_string(reply.status) + ")");
    }
    if (!transient(reply.status) || attempt == config_.max_tries) break;
    config_.sleep(delay);
    delay *= config_.backoff_factor;
  }
  std::string snippet = reply.body.substr(0, 200);
  throw Error(ErrorKind::HttpError, "HTTP " + std::to_string(reply.status) + ": " + snippet);
}

// ---- label extraction -------------------------------------------------------

std::string_view to_string(ExtractMethod m) { return m == ExtractMethod::format ? "format" : "fuzzy"; }

ExtractedLabel extract_label(std::string_view response, const std::vector<std::string>& label_set) {
  if (label_set.empty()) throw Error(ErrorKind::BadParams, "label set is empty");
  const std::string text = lower(response);

  // Format pass: scan every "answer:" and keep the last one naming a label.
  std::optional<std::string> formatted;
  for (std::size_t pos = text.find("answer"); pos != std::string::npos; pos = text.find("answer", pos + 1)) {
    if (pos > 0 && word_char(static_cast<unsigned char>(text[pos - 1]))) continue;
    std::size_t k = pos + 6;
    while (k < text.size() && (text[k] == ' ' || text[k] == '*')) ++k;
    if (k >= text.size() || text[k] != ':') continue;
    const auto eol = text.find('\n', k);
    const std::string value = clean_answer(std::string_view(text).substr(k + 1, eol == std::string::npos ? std::string::npos : eol - k - 1));
    for (const auto& l : label_set) {
      if (lower(l) == value) formatted = l;
    }
  }
  if (formatted) return {*formatted, ExtractMethod::format};

  // Fuzzy pass: whole-word occurrences not covered by a longer label's occurrence.
  struct Hit {
    std::size_t label, begin, end;
  };
  std::vector<Hit> hits;
  for (std::size_t li = 0; li < label_set.size(); ++li) {
    const std::string needle = lower(label_set[li]);
    if (needle.empty()) continue;
    for (auto p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) {
      const std::size_t e = p + needle.size();
      const bool left = p == 0 || !word_char(static_cast<unsigned char>(text[p - 1]));
      const bool right = e == text.size() || !word_char(static_cast<unsigned char>(text[e]));
      if (left && right) hits.push_back({li, p, e});
    }
  }
  std::vector<bool> matched(label_set.size(), false);
  for (const auto& h : hits) {
    const bool covered = std::any_of(hits.begin(), hits.end(), [&](const Hit& o) {
      return o.label != h.label && o.begin <= h.begin && o.end >= h.end && o.end - o.begin > h.end - h.begin;
    });
    if (!covered) matched[h.label] = true;
  }
  std::vector<std::string> found;
  for (std::size_t li = 0; li < label_set.size(); ++li) {
    if (matched[li]) found.push_back(label_set[li]);
  }
  if (found.size() == 1) return {found.front(), ExtractMethod::fuzzy};
  if (found.empty()) throw Error(ErrorKind::NoLabelFound, "no label from the label set in the response");
  std::string names;
  for (const auto& f : found) names += (names.empty() ? "" : ", ") + f;
  throw Error(ErrorKind::AmbiguousLabel, "several labels in the response: " + names);
}

}  // namespace vizprompt::mllm
