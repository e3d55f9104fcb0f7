#include "vizprompt/error.hpp"

namespace vizprompt {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedRow: return "MalformedRow";
    case ErrorKind::ChannelCountMismatch: return "ChannelCountMismatch";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::InvalidSeries: return "InvalidSeries";
    case ErrorKind::NoDataForUser: return "NoDataForUser";
    case ErrorKind::ChannelLayoutMismatch: return "ChannelLayoutMismatch";
    case ErrorKind::WindowLongerThanSeries: return "WindowLongerThanSeries";
    case ErrorKind::BadMetadata: return "BadMetadata";
    case ErrorKind::SignalTooShort: return "SignalTooShort";
    case ErrorKind::BadParams: return "BadParams";
    case ErrorKind::BadBand: return "BadBand";
    case ErrorKind::TooFewPeaks: return "TooFewPeaks";
    case ErrorKind::IncompatibleModality: return "IncompatibleModality";
    case ErrorKind::TooManyChannels: return "TooManyChannels";
    case ErrorKind::EmptyLabel: return "EmptyLabel";
    case ErrorKind::BadImage: return "BadImage";
    case ErrorKind::TokenizerUnavailable: return "TokenizerUnavailable";
    case ErrorKind::NoTextPart: return "NoTextPart";
    case ErrorKind::EmptySummary: return "EmptySummary";
    case ErrorKind::TemplateError: return "TemplateError";
    case ErrorKind::EmptyCatalog: return "EmptyCatalog";
    case ErrorKind::UnknownTool: return "UnknownTool";
    case ErrorKind::NoJsonArray: return "NoJsonArray";
    case ErrorKind::AllIdsUnknown: return "AllIdsUnknown";
    case ErrorKind::TooFewCandidates: return "TooFewCandidates";
    case ErrorKind::FilterFailed: return "FilterFailed";
    case ErrorKind::SelectionFailed: return "SelectionFailed";
    case ErrorKind::MissingTranscript: return "MissingTranscript";
    case ErrorKind::HttpError: return "HttpError";
    case ErrorKind::AuthMissing: return "AuthMissing";
    case ErrorKind::NoLabelFound: return "NoLabelFound";
    case ErrorKind::AmbiguousLabel: return "AmbiguousLabel";
    case ErrorKind::BadTranscript: return "BadTranscript";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::UnknownDataset: return "UnknownDataset";
    case ErrorKind::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

}  // namespace vizprompt
