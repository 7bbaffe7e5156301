#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "slu/common.hpp"
#include "slu/network.hpp"

namespace slu {

struct DecodeEvent {
    enum class Head { Intent, Slot };
    Head head;
    int label = 0;   // vocabulary class id (blank never emitted)
    int frame = 0;   // index in head-rate frames
    double score = 0.0;

    bool operator==(const DecodeEvent&) const = default;
};

// One line per event, stable field order for diff-based tests.
std::string format_event(const std::string& session_id, const DecodeEvent& ev);

// Greedy best-path CTC: emit argmax iff non-blank and different from the
// previously observed argmax.
struct GreedyCtcState {
    int last_symbol = 0;  // blank
};
std::optional<DecodeEvent> greedy_ctc_step(GreedyCtcState& state,
                                           std::span<const double> logprob_row,
                                           DecodeEvent::Head head, int frame);

// Threshold decode on onset boundary probabilities: emits every label with
// z >= theta, in label-id order. No collapse, no blank.
std::vector<DecodeEvent> ctl_threshold_step(std::span<const double> z_row, double theta,
                                            DecodeEvent::Head head, int frame);

struct DecodeResult {
    std::vector<int> intent_labels;
    std::vector<int> slot_labels;
    std::vector<DecodeEvent> events;
};

// Incremental decoder. Chunks of raw (already CMVN-normalized, un-stacked)
// feature frames go through push(); finish() flushes the zero-padded partial
// time-reduction groups. The decode is prefix consistent: any chunking of
// the same utterance yields outputs identical to a single-shot call.
class StreamDecoder {
public:
    StreamDecoder(const ModelConfig& cfg, const ModelParams& params, double theta = 0.5);

    std::vector<DecodeEvent> push(const Matrix& chunk);
    std::vector<DecodeEvent> finish();

    const std::vector<DecodeEvent>& events() const { return events_; }
    const std::vector<int>& intent_labels() const { return intent_labels_; }
    const std::vector<int>& slot_labels() const { return slot_labels_; }
    int slot_steps() const { return slot_step_; }
    int intent_steps() const { return intent_step_; }

private:
    void process_stacked_row(const std::vector<double>& conv_row, std::vector<DecodeEvent>* out);
    void process_conv1_row(std::vector<double> row, std::vector<DecodeEvent>* out);
    void emit_slot_step(std::vector<DecodeEvent>* out);
    void emit_intent_step(std::vector<DecodeEvent>* out);

    const ModelConfig cfg_;
    const ModelParams& params_;
    ParamLayout lay_;
    double theta_;
    bool finished_ = false;

    std::deque<std::vector<double>> raw_buf_;    // pending raw frames (stacker)
    std::deque<std::vector<double>> conv1_buf_;  // pending conv1 input rows
    std::deque<std::vector<double>> conv2_buf_;  // pending conv2 input rows
    detail::LstmState lstm1_, lstm2_, lstm3_;
    std::vector<std::vector<double>> tr2_buf_;   // h1 rows awaiting a full group
    std::vector<std::vector<double>> tr3_buf_;   // h2 rows awaiting a full group
    std::vector<double> slot_feed_last_;
    std::vector<double> prev_slot_probs_, prev_intent_probs_;  // ctl rectified delta memory
    GreedyCtcState slot_ctc_, intent_ctc_;
    int slot_step_ = 0, intent_step_ = 0;

    std::vector<DecodeEvent> events_;
    std::vector<int> intent_labels_, slot_labels_;
};

// Decodes chunked input and returns per-head label sequences plus the event
// log. Chunks must partition one utterance and share the feature dim.
DecodeResult stream_decode(const ModelConfig& cfg, const ModelParams& params,
                           const std::vector<Matrix>& chunks, double theta = 0.5);

// Single-shot reference decode built directly on forward() outputs.
DecodeResult decode_outputs(const ModelConfig& cfg, const ForwardOutput& out, double theta = 0.5);

// 1 iff the sequences are identical in content and order.
int sequence_exact(const std::vector<int>& pred, const std::vector<int>& truth);

}  // namespace slu
