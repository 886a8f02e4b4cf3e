#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace citelm {

// Every failure raised by the library derives from Error so callers can
// catch one type; the subclasses exist so tests can assert the exact kind.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CITELM_DEFINE_ERROR(Name)       \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

// corpus
CITELM_DEFINE_ERROR(OutOfRangeMarker);
CITELM_DEFINE_ERROR(MalformedMarker);
CITELM_DEFINE_ERROR(VocabularyExhausted);
CITELM_DEFINE_ERROR(InvalidExample);

// backbone
CITELM_DEFINE_ERROR(SequenceTooLong);
CITELM_DEFINE_ERROR(UnknownToken);
CITELM_DEFINE_ERROR(NonFiniteLoss);
CITELM_DEFINE_ERROR(InvalidConfig);
CITELM_DEFINE_ERROR(CheckpointError);

// fusion
CITELM_DEFINE_ERROR(EmptyDocument);
CITELM_DEFINE_ERROR(UnknownMarker);

// heads
CITELM_DEFINE_ERROR(NonFiniteInput);
CITELM_DEFINE_ERROR(LengthMismatch);
CITELM_DEFINE_ERROR(EmptyCitationSet);
CITELM_DEFINE_ERROR(MarkerOutOfRange);

// attention shaping
CITELM_DEFINE_ERROR(ZeroNorm);

#undef CITELM_DEFINE_ERROR

// JSONL and config parsing; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace citelm
