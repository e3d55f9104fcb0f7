#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "vizprompt/render.hpp"
#include "vizprompt/signal.hpp"

namespace vizprompt {

enum class Role { system, user };

struct TextPart {
  std::string text;
};

struct ImagePart {
  PlotImage image;
};

using Part = std::variant<TextPart, ImagePart>;

struct PromptMessage {
  Role role = Role::user;
  std::vector<Part> parts;
  // Set when parity features were dropped to stay under the token limit.
  bool feature_fallback = false;

  std::size_t image_count() const;
  std::size_t text_part_count() const;
  // All text parts joined by blank lines.
  std::string joined_text() const;
  // Throws Error(BadParams) when empty or when a system message holds an image.
  void validate() const;
};

struct TaskSpec {
  std::string task_description;
  std::string data_description;
  std::vector<std::string> label_set;
  // Empty means the bundled answer_format template.
  std::string answer_format_instruction;

  // Throws Error(BadParams) for an empty or duplicated label set.
  void validate() const;
};

// ---- templates ----------------------------------------------------------

// Replaces every {{name}} with values.at(name). Throws Error(TemplateError)
// for a placeholder without a value or an unterminated "{{".
std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

// The instruction templates. Defaults come from the embedded templates/
// directory; load_dir overrides any file present in another directory.
struct Templates {
  std::map<std::string, std::string> files;  // stem -> text

  const std::string& get(const std::string& stem) const;

  static const Templates& builtin();
  static Templates load_dir(const std::string& dir);
};

// ---- tokenizers ---------------------------------------------------------

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::size_t count(std::string_view text) const = 0;
  virtual bool approximate() const = 0;
  virtual std::string name() const = 0;
};

// Deterministic estimator used when no vocabulary file is configured.
// The text is scanned left to right into units, each costing:
//   - letter run ([A-Za-z] and bytes >= 0x80): 1 token per started 10 bytes
//   - number: optional sign (+/-, only when not preceded by a letter or digit
//     and followed by a digit), then the integer digits in groups of 3 (the
//     sign rides on the first group); if a '.' follows with at least one digit,
//     the '.' and fractional digits add 1 token per started group of 3
//   - punctuation run (anything else except whitespace, stopping before a
//     sign that starts a number): 1 token
//   - whitespace run: 0 tokens if it is exactly one ' ', otherwise 1
// So "1.02 -0.88 0.43" costs 2 + 2 + 2 = 6, and appending text never lowers
// the count.
class FallbackTokenizer final : public Tokenizer {
 public:
  std::size_t count(std::string_view text) const override;
  bool approximate() const override { return true; }
  std::string name() const override { return "fallback"; }
};

// Byte-level BPE over a tiktoken-format vocabulary ("<base64 token> <rank>"
// per line). Pre-tokenization follows the o200k split pattern with ASCII
// character classes; every non-ASCII byte is a letter of both cases (like
// \p{Lo}), so counts are exact for ASCII text.
class BpeTokenizer final : public Tokenizer {
 public:
  // Throws Error(TokenizerUnavailable) if the file is missing or malformed.
  static std::shared_ptr<BpeTokenizer> load(const std::string& path);
  static std::shared_ptr<BpeTokenizer> from_ranks(std::unordered_map<std::string, std::size_t> ranks,
                                                  std::string name);

  std::size_t count(std::string_view text) const override;
  std::vector<std::string> encode_pieces(std::string_view text) const;
  bool approximate() const override { return false; }
  std::string name() const override { return name_; }

 private:
  std::unordered_map<std::string, std::size_t> ranks_;
  std::string name_;
  std::size_t bpe_count(std::string_view piece, std::vector<std::string>* out) const;
};

// o200k-style pre-tokenizer split, exposed for tests.
std::vector<std::string_view> pretokenize(std::string_view text);

// Counts with `tokenizer`; throws Error(TokenizerUnavailable) when null.
std::size_t count_text_tokens(std::string_view text, const Tokenizer* tokenizer);

// BPE from VIZPROMPT_TOKENIZER_VOCAB when set and loadable, else fallback.
std::shared_ptr<const Tokenizer> default_tokenizer();

// ---- token accounting -----------------------------------------------------

// 85 + 170 * ceil(w/512) * ceil(h/512).
std::size_t image_token_cost(int width_px, int height_px);

struct PartTokens {
  std::size_t index = 0;
  bool image = false;
  std::size_t tokens = 0;
};

struct TokenReport {
  std::size_t text_tokens = 0;
  std::size_t image_tokens = 0;
  std::size_t total = 0;
  std::vector<PartTokens> per_part;
  bool approximate = false;
  bool feature_fallback = false;
  std::string tokenizer;

  // Adds counts and flags; per_part entries are appended.
  TokenReport& operator+=(const TokenReport& other);
};

TokenReport token_report(const PromptMessage& message, const Tokenizer& tokenizer);

// ---- prompt construction --------------------------------------------------

struct VisualPromptOptions {
  RenderStyle style;
  const Templates* templates = nullptr;  // null means Templates::builtin()
};

// [instruction] + one image per example (titled with its label) + the target
// image titled "target data". Throws IncompatibleModality if windows mix modalities.
PromptMessage build_visual_prompt(const std::vector<std::pair<Window, std::string>>& examples, const Window& target,
                                  const VizTool& tool, const TaskSpec& task, const VisualPromptOptions& options = {});

struct FeatureBlock {
  std::string title;
  std::string body;
};

struct TextPromptOptions {
  int decimals = 2;
  // Parity features mirror what this tool's plot shows; nullopt or
  // raw_waveform adds none.
  std::optional<VizTool> parity_tool;
  // Appended after the computed features of the target.
  std::vector<FeatureBlock> target_features;
  std::size_t token_limit = 128000;
  const Tokenizer* tokenizer = nullptr;  // null means default_tokenizer()
  const Templates* templates = nullptr;
};

// Per-channel "name: v1, v2, ..." lines preceded by a sampling-rate statement.
std::string serialize_window(const Window& window, int decimals);

// Structured text carrying the information of `tool`'s plot of `window`.
std::vector<FeatureBlock> parity_features(const Window& window, const VizTool& tool, int decimals);

// "Detected peaks (index: value):" block body, e.g. "100: 0.95, 200: 0.91".
std::string format_peaks(const std::vector<std::size_t>& indices, std::span<const double> values, int decimals);

PromptMessage build_text_prompt(const std::vector<std::pair<Window, std::string>>& examples, const Window& target,
                                const TaskSpec& task, const TextPromptOptions& options = {});

inline constexpr std::string_view kCotSuffix = "Let's think step-by-step.";

// Appends kCotSuffix as a new final line of the last text part. Applying it
// twice appends it twice. Throws Error(NoTextPart) for image-only messages.
PromptMessage apply_cot(PromptMessage prompt);

// Stage 1 of the summarized text pipeline: one text part with the serialized
// target and the summarize instruction.
PromptMessage build_summarization_prompt(const Window& target, const TaskSpec& task, int decimals = 2,
                                         const Templates* templates = nullptr);

// Stage 2: classification from summaries only. Throws Error(EmptySummary) if
// the target summary (or any example summary) is blank.
PromptMessage build_summary_classification_prompt(const std::vector<std::pair<std::string, std::string>>& example_summaries,
                                                  const std::string& target_summary, const TaskSpec& task,
                                                  const Templates* templates = nullptr);

}  // namespace vizprompt
