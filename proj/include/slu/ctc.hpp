#pragma once

#include <vector>

#include "slu/common.hpp"

namespace slu {

// Blank symbol index in every CTC vocabulary.
constexpr int kBlank = 0;

// Log-space CTC loss over the blank-augmented target lattice.
//
// `logp` is T x V with normalized rows (logsumexp == 0); labels are in
// [1, V). Returns the negative log-likelihood and the gradient taken with
// respect to pre-softmax logits when rows are log-softmax outputs
// (grad[t][v] = exp(logp[t][v]) - occupancy[t][v]; rows sum to zero).
// Throws if no valid alignment exists (T too short for the target).
LossResult ctc_loss(const Matrix& logp, const std::vector<int>& labels);

// Oracle: enumerates all V^T paths, collapses blanks/repeats, and returns the
// negative log of the summed probability of paths collapsing to `labels`.
// Enforces V^T <= 1e6.
double ctc_brute_force(const Matrix& logp, const std::vector<int>& labels);

// Central finite differences of ctc_loss under per-row re-normalization
// (i.e. perturbing the logits) against the analytic gradient. Returns the
// max relative error over all (t, v).
double ctc_grad_check(const Matrix& logp, const std::vector<int>& labels, double h);

// Number of adjacent equal pairs in a label sequence; the minimum feasible
// input length is labels.size() + this.
int adjacent_duplicates(const std::vector<int>& labels);

// Re-normalizes rows of a logit matrix into log-probabilities.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace slu
