#pragma once

// Naive reference forward pass, written straight from the layer equations and
// kept independent of the library's implementation. Tests compare the two.

#include <vector>

#include "conflictheads/model.hpp"
#include "conflictheads/patching.hpp"

namespace oracle {

// One per-head activation override for the naive forward.
struct Splice {
    conflictheads::HeadId head;
    bool zero = false;           // zero the head output instead of replacing it
    bool all_positions = false;  // otherwise only the last position
    std::vector<double> rows;    // d_head values, or seq*d_head when all_positions
};

std::vector<double> logits(const conflictheads::Weights& weights,
                           const conflictheads::TokenSequence& input,
                           const std::vector<Splice>& splices = {});

// The head's attention-weighted value rows, [seq][d_head] flattened.
std::vector<double> head_rows(const conflictheads::Weights& weights,
                              const conflictheads::TokenSequence& input,
                              conflictheads::HeadId head);

// advantage(conflict with `head` spliced from the clean run) computed purely
// with the naive forward.
double patched_advantage(const conflictheads::Weights& weights,
                         const conflictheads::PatchSample& sample,
                         conflictheads::HeadId head, conflictheads::PositionScope scope);

}  // namespace oracle
