#pragma once

#include <span>
#include <vector>

#include "slu/common.hpp"

namespace slu {

// Onset/offset boundary probabilities derived from event probabilities.
struct BoundaryProbs {
    Matrix on;   // T x E, max(0, y[t] - y[t-1]) with y[-1] := 0
    Matrix off;  // T x E, max(0, y[t-1] - y[t])
};

// Boundary-label alphabet convention.
//   OnsetOnly:   label id == event id, alphabet size == E
//   OnsetOffset: onset(e) == 2e, offset(e) == 2e + 1, alphabet size == 2E
enum class CtlMode { OnsetOnly, OnsetOffset };

struct CtlTarget {
    std::vector<int> labels;  // boundary-label ids, in emission order
    int alphabet_size = 0;
    CtlMode mode = CtlMode::OnsetOnly;
};

BoundaryProbs rectified_delta(const Matrix& y);

// Probability of emitting exactly the subset `emitted` of boundary labels at
// one frame under mutual independence: prod_{l in S} z(l) * prod_{l not in S} (1 - z(l)).
double emission_prob(std::span<const double> z, const std::vector<int>& emitted);

// CTL loss via the emission-count recurrence, linear space with per-frame
// rescaling. Gradient is with respect to the event probabilities y (T x E);
// the rectified-delta subgradient is 0 at ties y[t] == y[t-1].
// Throws "unreachable target" when every emission path has probability 0.
LossResult ctl_loss(const Matrix& y, const CtlTarget& target);

// Oracle: enumerates all per-frame emission subsets over the alphabet and
// returns the negative log of the summed products whose concatenation equals
// the target. Enforces (2^alphabet)^T <= 1e6.
double ctl_brute_force(const Matrix& y, const CtlTarget& target);

// Linear softmax pooling: yhat(e) = sum_t y[t][e]^2 / sum_t y[t][e], 0 when
// the column is all zero.
std::vector<double> mil_pool(const Matrix& y);

// bag_label(e) = 1 iff any boundary label of event e appears in the target.
std::vector<int> bag_from_target(const CtlTarget& target, int n_events);

// Weighted average of ctl_loss and binary cross-entropy on pooled
// recording-level probabilities. Requires w_ctl + w_mil == 1, both >= 0.
LossResult ctl_mil_loss(const Matrix& y, const CtlTarget& target,
                        const std::vector<int>& bag_labels,
                        double w_ctl = 0.5, double w_mil = 0.5);

// Central finite differences of ctl_loss on y vs the analytic gradient;
// returns max relative error. Call on instances away from rectifier ties.
double ctl_grad_check(const Matrix& y, const CtlTarget& target, double h);

}  // namespace slu
