#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace itexp {

enum class Errc {
  malformed_line,
  malformed_tree,
  cyclic_tree,
  non_projective_input,
  io_failure,
  schema_mismatch,
  malformed_pattern,
  pad_at_placeholder,
  chain_mismatch,
  query_off_reference_path,
  empty_corpus,
  sequence_too_long,
  shape_mismatch,
  divergence,
  predictor_failure,
  zero_mass_after_masking,
  invalid_argument,
};

inline std::string_view errc_name(Errc e) {
  switch (e) {
    case Errc::malformed_line: return "MalformedLine";
    case Errc::malformed_tree: return "MalformedTree";
    case Errc::cyclic_tree: return "CyclicTree";
    case Errc::non_projective_input: return "NonProjectiveInput";
    case Errc::io_failure: return "IoFailure";
    case Errc::schema_mismatch: return "SchemaMismatch";
    case Errc::malformed_pattern: return "MalformedPattern";
    case Errc::pad_at_placeholder: return "PadAtPlaceholder";
    case Errc::chain_mismatch: return "ChainMismatch";
    case Errc::query_off_reference_path: return "QueryOffReferencePath";
    case Errc::empty_corpus: return "EmptyCorpus";
    case Errc::sequence_too_long: return "SequenceTooLong";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::divergence: return "Divergence";
    case Errc::predictor_failure: return "PredictorFailure";
    case Errc::zero_mass_after_masking: return "ZeroMassAfterMasking";
    case Errc::invalid_argument: return "InvalidArgument";
  }
  return "Unknown";
}

// All library failures are reported as Error; code() tells them apart.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace itexp
