#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slu/common.hpp"

namespace slu {

enum class HeadMode { Ctc, Ctl };

// Architecture: stacked features -> two valid 3D convolutions over
// (time, feature, stack) -> LSTM1 -> time-reduce R2 + projection -> LSTM2
// -> slot head; time-reduce R3 + projection, concatenated with the slot
// head's softmax at the nearest preceding slot step -> LSTM3 -> intent head.
struct ModelConfig {
    int feat_dim = 16;
    int stack_width = 8;
    int stack_stride = 3;

    // shared by both conv layers; valid padding
    int conv_kernel_t = 5, conv_kernel_f = 5, conv_kernel_s = 1;
    int conv_stride_t = 2, conv_stride_f = 2, conv_stride_s = 1;
    int conv1_channels = 16;
    int conv2_channels = 32;

    int hidden1 = 32, hidden2 = 32, hidden3 = 32;
    int proj2 = 32, proj3 = 32;
    int time_reduction2 = 4;
    int time_reduction3 = 4;

    int slot_vocab = 8;    // class count, excluding blank
    int intent_vocab = 15; // class count, excluding blank
    HeadMode head_mode = HeadMode::Ctc;

    // Head output widths (blank-augmented in CTC mode).
    int slot_out_dim() const { return head_mode == HeadMode::Ctc ? slot_vocab + 1 : slot_vocab; }
    int intent_out_dim() const {
        return head_mode == HeadMode::Ctc ? intent_vocab + 1 : intent_vocab;
    }

    // Valid-convolution output extents; throws if a spatial dim collapses.
    int conv_out(int in, int kernel, int stride) const;
    int conv_feat1() const { return conv_out(feat_dim, conv_kernel_f, conv_stride_f); }
    int conv_feat2() const { return conv_out(conv_feat1(), conv_kernel_f, conv_stride_f); }
    int conv_stack_out() const;
    int lstm1_input_dim() const { return conv_feat2() * conv_stack_out() * conv2_channels; }
    int lstm3_input_dim() const { return proj3 + slot_out_dim(); }

    // Closed-form sequence lengths given a stacked input of length t_stacked.
    int conv_time1(int t_stacked) const { return conv_out(t_stacked, conv_kernel_t, conv_stride_t); }
    int conv_time2(int t_stacked) const { return conv_out(conv_time1(t_stacked), conv_kernel_t, conv_stride_t); }
    int slot_steps(int t_stacked) const;    // ceil(conv_time2 / R2)
    int intent_steps(int t_stacked) const;  // ceil(slot_steps / R3)

    // Minimum stacked input length for both conv layers to be valid.
    int min_stacked_length() const {
        return (conv_kernel_t - 1) * conv_stride_t + conv_kernel_t;
    }

    uint64_t digest() const;
    void validate() const;
};

// Flat little-endian parameter block offsets derived from a config.
struct ParamLayout {
    explicit ParamLayout(const ModelConfig& cfg);
    size_t conv1_w, conv1_b;
    size_t conv2_w, conv2_b;
    size_t lstm1_wx, lstm1_wh, lstm1_b;
    size_t proj2_w, proj2_b;
    size_t lstm2_wx, lstm2_wh, lstm2_b;
    size_t slot_w, slot_b;
    size_t proj3_w, proj3_b;
    size_t lstm3_wx, lstm3_wh, lstm3_b;
    size_t intent_w, intent_b;
    size_t total;
};

struct ModelParams {
    std::vector<double> flat;
};

// Seeded uniform init in +-1/sqrt(fan_in) per weight block.
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

struct ForwardOutput {
    Matrix slot_out;    // T2 x slot_out_dim: log-probs (ctc) or sigmoid probs (ctl)
    Matrix intent_out;  // T3 x intent_out_dim
    int rate_ratio = 1; // slot steps per intent step (== time_reduction3)
};

// Intermediate activations recorded by forward for reverse accumulation.
struct Tape {
    ModelConfig cfg;
    Matrix stacked;           // forward input
    Matrix conv1_act;         // T1 x (F1*S*C1), post-ReLU
    Matrix conv2_act;         // T2c x (F2*S*C2), post-ReLU
    Matrix lstm1_i, lstm1_f, lstm1_g, lstm1_o, lstm1_c, lstm1_h;
    Matrix h1_dropped;
    Matrix proj2_out;         // slot-rate inputs to LSTM2
    Matrix lstm2_i, lstm2_f, lstm2_g, lstm2_o, lstm2_c, lstm2_h;
    Matrix h2_dropped;
    Matrix slot_logits;
    Matrix slot_feed;         // softmax (ctc) / sigmoid (ctl) of slot logits
    Matrix lstm3_in;          // [proj3 ; slot feed] rows
    Matrix lstm3_i, lstm3_f, lstm3_g, lstm3_o, lstm3_c, lstm3_h;
    Matrix h3_dropped;
    Matrix intent_logits;
    Matrix drop_mask1, drop_mask2, drop_mask3;  // empty when dropout off
    std::vector<int> feed_index;  // slot step feeding each intent step
};

struct ForwardOptions {
    bool training = false;
    double dropout = 0.0;
    uint64_t dropout_seed = 0;
};

// Runs the model on a CMVN-normalized, stacked feature matrix. Strictly
// causal in time. Throws when the input is shorter than min_stacked_length().
ForwardOutput forward(const ModelParams& params, const Matrix& stacked,
                      const ModelConfig& cfg, Tape* tape = nullptr,
                      const ForwardOptions& opts = {});

// Exact reverse-accumulation gradient of the composed loss w.r.t. every
// parameter. Upstream gradients are taken w.r.t. the raw head logits
// (CTC losses already produce these; sigmoid-head losses must be chained
// through y(1-y) first). Requires the tape from the matching forward.
std::vector<double> backward(const ModelParams& params, const Tape& tape,
                             const Matrix& d_slot_logits, const Matrix& d_intent_logits);

// Partial reverse accumulation for layer-1 pretraining: a gradient taken
// w.r.t. the raw LSTM1 hidden states is propagated through LSTM1 and both
// conv layers only; every other parameter gradient stays zero.
std::vector<double> backward_from_h1(const ModelParams& params, const Tape& tape,
                                     const Matrix& d_h1);

// Standalone time reduction: groups of R consecutive states concatenated
// (last group zero-padded) and linearly projected by proj_w (H' x R*H) + b.
Matrix time_reduce(const Matrix& states, int factor, const Matrix& proj_w,
                   const std::vector<double>& proj_b);

// combined = w_seq * seq_loss + w_ce * cross-entropy of the final-step
// softmax against `label`. Sequence gradient must already be in logit space;
// the returned gradient matches its shape.
LossResult last_step_ce(const LossResult& seq, const Matrix& head_logits, int label,
                        double w_seq = 0.6, double w_ce = 0.4);

// Checkpoint container: magic "CKPT", version u32, config digest u64,
// parameter count u64, flat little-endian f32 parameters. Loading verifies
// the digest against `cfg`.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path, const ModelConfig& cfg);

// Last stacked-frame index inside the receptive field of a slot or intent
// step (unclamped closed form, for causality tests).
int slot_receptive_end(const ModelConfig& cfg, int slot_step);
int intent_receptive_end(const ModelConfig& cfg, int intent_step);

// Elementwise sigmoid / row softmax helpers shared with the harness.
Matrix sigmoid_rows(const Matrix& logits);
std::vector<double> softmax(std::span<const double> logits);

// Single-step building blocks shared between batch forward and the streaming
// decoder. Both paths must produce bitwise-identical activations, so the
// accumulation order lives here exactly once.
namespace detail {

double sigmoid(double x);

struct ConvDims {
    int f_in, s_in, c_in;
    int f_out, s_out, c_out;
};

// One valid-conv output row (ReLU applied) from conv_kernel_t consecutive
// input rows supplied as pointers.
void conv_step(const ModelConfig& cfg, const ConvDims& d, const double* w, const double* b,
               std::span<const double* const> in_rows, double* out_row);

struct LstmState {
    std::vector<double> h, c;
    explicit LstmState(int hidden) : h(hidden, 0.0), c(hidden, 0.0) {}
};

// Advances an LSTM cell by one step; optionally records post-nonlinearity
// gates for backward.
void lstm_step(const double* wx, const double* wh, const double* b, int hidden,
               std::span<const double> input, LstmState& state,
               double* gi = nullptr, double* gf = nullptr, double* gg = nullptr,
               double* go = nullptr);

// One row of a dense affine map.
void linear_step(const double* w, const double* b, int out_dim, int in_dim,
                 const double* x, double* out);

// Reorders one stacked feature row [frame w][feat f] into the conv layout
// (f * stack_width + s).
void remap_stacked_row(const ModelConfig& cfg, const double* stacked_row, double* conv_row);

ConvDims conv1_dims(const ModelConfig& cfg);
ConvDims conv2_dims(const ModelConfig& cfg);

}  // namespace detail

}  // namespace slu
