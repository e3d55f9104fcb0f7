#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vizprompt {

// Every failure the library reports is an Error tagged with one of these kinds.
enum class ErrorKind {
  // signal_core
  MalformedRow,
  ChannelCountMismatch,
  EmptyInput,
  InvalidSeries,
  NoDataForUser,
  ChannelLayoutMismatch,
  WindowLongerThanSeries,
  BadMetadata,
  // dsp
  SignalTooShort,
  BadParams,
  BadBand,
  TooFewPeaks,
  // render
  IncompatibleModality,
  TooManyChannels,
  EmptyLabel,
  BadImage,
  // prompt
  TokenizerUnavailable,
  NoTextPart,
  EmptySummary,
  TemplateError,
  // visgen
  EmptyCatalog,
  UnknownTool,
  NoJsonArray,
  AllIdsUnknown,
  TooFewCandidates,
  FilterFailed,
  SelectionFailed,
  // mllm
  MissingTranscript,
  HttpError,
  AuthMissing,
  NoLabelFound,
  AmbiguousLabel,
  BadTranscript,
  // eval
  InsufficientSamples,
  UnknownDataset,
  BadConfig,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Raised by load_timeseries when a data cell does not parse; row is 1-based over data rows.
class MalformedRowError : public Error {
 public:
  MalformedRowError(std::size_t row, std::size_t column, const std::string& cell)
      : Error(ErrorKind::MalformedRow, "row " + std::to_string(row) + ", column " +
                                           std::to_string(column) + ": '" + cell + "'"),
        row_(row),
        column_(column) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

}  // namespace vizprompt
