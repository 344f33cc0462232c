#pragma once

#include <stdexcept>
#include <string>

namespace ewa {

// Base type for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Cholesky failed even at the jitter cap, or a matrix required to be PSD is not.
struct NotPsdError : Error {
  using Error::Error;
};

// s'Vs fell below tolerance in a chi-squared contraction.
struct DegenerateDirectionError : Error {
  using Error::Error;
};

// Matrix/vector dimensions do not match the operation.
struct ShapeError : Error {
  using Error::Error;
};

// Argument outside the mathematical domain of the function.
struct DomainError : Error {
  using Error::Error;
};

// Root bracket does not straddle a sign change; never silently extrapolated.
struct BracketFailureError : Error {
  using Error::Error;
};

// ReLU/Erf kernel maps need strictly positive self-variances.
struct NonpositiveDiagonalError : Error {
  using Error::Error;
};

// A stride chain reduced the patch count to zero.
struct PatchUnderflowError : Error {
  using Error::Error;
};

// Sampler loss exceeded the configured ceiling (step size too large).
struct DivergenceError : Error {
  using Error::Error;
};

// Series too short for the blocking analysis.
struct TooShortError : Error {
  using Error::Error;
};

struct TooFewChainsError : Error {
  using Error::Error;
};

struct TooFewSamplesError : Error {
  using Error::Error;
};

// Malformed dataset file; message carries the byte offset.
struct ParseError : Error {
  using Error::Error;
};

struct InsufficientSamplesError : Error {
  using Error::Error;
};

struct DegenerateDataError : Error {
  using Error::Error;
};

// Invalid experiment configuration; message carries the key path.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace ewa
