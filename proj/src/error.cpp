// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/error.hpp"

namespace forge {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::oov: return "oov";
    case ErrorKind::capacity: return "capacity";
    case ErrorKind::io: return "io";
    case ErrorKind::length: return "length";
    case ErrorKind::degenerate_batch: return "degenerate_batch";
    case ErrorKind::degenerate_gradient: return "degenerate_gradient";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::empty_dataset: return "empty_dataset";
  }
  return "unknown";
}

}  // namespace forge
