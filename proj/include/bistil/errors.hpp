// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy. The CLI maps these onto exit codes: usage/config -> 1,
// data/parse -> 2, training -> 3.

#pragma once

#include <stdexcept>
#include <string>

namespace bistil {

// Shape or rank disagreement between tensors or mapped structures.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input outside the mathematical domain of an operation (empty tensor,
// empty corpus, zero-count reduction).
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller broke an API contract (non-scalar loss, index out of range,
// mismatched label spaces).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid runtime input (token id out of range, sequence too long).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file content; message carries the line number where known.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Well-formed file with semantically invalid content.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged or hit a non-finite loss; message carries the step.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Delta composition onto a mismatched base.
struct CompositionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bistil
