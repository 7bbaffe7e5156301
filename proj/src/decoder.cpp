#include "slu/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "slu/ctl.hpp"

namespace slu {

std::string format_event(const std::string& session_id, const DecodeEvent& ev) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "session=%s head=%s frame=%d label=%d score=%.6f",
                  session_id.c_str(), ev.head == DecodeEvent::Head::Intent ? "intent" : "slot",
                  ev.frame, ev.label, ev.score);
    return buf;
}

std::optional<DecodeEvent> greedy_ctc_step(GreedyCtcState& state,
                                           std::span<const double> logprob_row,
                                           DecodeEvent::Head head, int frame) {
    int argmax = 0;
    for (size_t v = 1; v < logprob_row.size(); ++v)
        if (logprob_row[v] > logprob_row[argmax]) argmax = static_cast<int>(v);
    std::optional<DecodeEvent> ev;
    if (argmax != 0 && argmax != state.last_symbol)
        ev = DecodeEvent{head, argmax, frame, std::exp(logprob_row[argmax])};
    state.last_symbol = argmax;
    return ev;
}

std::vector<DecodeEvent> ctl_threshold_step(std::span<const double> z_row, double theta,
                                            DecodeEvent::Head head, int frame) {
    if (!(theta > 0.0 && theta < 1.0))
        throw std::invalid_argument("ctl_threshold_step: theta must lie in (0,1)");
    std::vector<DecodeEvent> out;
    for (size_t l = 0; l < z_row.size(); ++l)
        if (z_row[l] >= theta) out.push_back({head, static_cast<int>(l), frame, z_row[l]});
    return out;
}

StreamDecoder::StreamDecoder(const ModelConfig& cfg, const ModelParams& params, double theta)
    : cfg_(cfg),
      params_(params),
      lay_(cfg),
      theta_(theta),
      lstm1_(cfg.hidden1),
      lstm2_(cfg.hidden2),
      lstm3_(cfg.hidden3),
      slot_feed_last_(cfg.slot_out_dim(), 0.0),
      prev_slot_probs_(cfg.slot_out_dim(), 0.0),
      prev_intent_probs_(cfg.intent_out_dim(), 0.0) {
    cfg_.validate();
    if (params_.flat.size() != lay_.total)
        throw std::invalid_argument("StreamDecoder: parameter vector does not match config");
}

std::vector<DecodeEvent> StreamDecoder::push(const Matrix& chunk) {
    if (finished_) throw std::logic_error("StreamDecoder: push after finish");
    if (chunk.cols() != cfg_.feat_dim)
        throw std::invalid_argument("StreamDecoder: chunk feature dim mismatch");
    std::vector<DecodeEvent> out;
    for (int t = 0; t < chunk.rows(); ++t) {
        raw_buf_.emplace_back(chunk.row(t), chunk.row(t) + chunk.cols());
        if (raw_buf_.size() >= static_cast<size_t>(cfg_.stack_width)) {
            // stacked row [frame w][feat f], remapped into the conv layout
            std::vector<double> stacked(static_cast<size_t>(cfg_.stack_width) * cfg_.feat_dim);
            for (int w = 0; w < cfg_.stack_width; ++w)
                std::memcpy(stacked.data() + static_cast<size_t>(w) * cfg_.feat_dim,
                            raw_buf_[w].data(), sizeof(double) * cfg_.feat_dim);
            std::vector<double> conv_row(stacked.size());
            detail::remap_stacked_row(cfg_, stacked.data(), conv_row.data());
            process_stacked_row(conv_row, &out);
            for (int s = 0; s < cfg_.stack_stride && !raw_buf_.empty(); ++s)
                raw_buf_.pop_front();
        }
    }
    events_.insert(events_.end(), out.begin(), out.end());
    return out;
}

void StreamDecoder::process_stacked_row(const std::vector<double>& conv_row,
                                        std::vector<DecodeEvent>* out) {
    conv1_buf_.push_back(conv_row);
    if (conv1_buf_.size() < static_cast<size_t>(cfg_.conv_kernel_t)) return;
    detail::ConvDims d1 = detail::conv1_dims(cfg_);
    std::vector<const double*> window(cfg_.conv_kernel_t);
    for (int dt = 0; dt < cfg_.conv_kernel_t; ++dt) window[dt] = conv1_buf_[dt].data();
    std::vector<double> row(static_cast<size_t>(d1.f_out) * d1.s_out * d1.c_out);
    detail::conv_step(cfg_, d1, params_.flat.data() + lay_.conv1_w,
                      params_.flat.data() + lay_.conv1_b, window, row.data());
    for (int s = 0; s < cfg_.conv_stride_t && !conv1_buf_.empty(); ++s) conv1_buf_.pop_front();
    process_conv1_row(std::move(row), out);
}

void StreamDecoder::process_conv1_row(std::vector<double> row, std::vector<DecodeEvent>* out) {
    conv2_buf_.push_back(std::move(row));
    if (conv2_buf_.size() < static_cast<size_t>(cfg_.conv_kernel_t)) return;
    detail::ConvDims d2 = detail::conv2_dims(cfg_);
    std::vector<const double*> window(cfg_.conv_kernel_t);
    for (int dt = 0; dt < cfg_.conv_kernel_t; ++dt) window[dt] = conv2_buf_[dt].data();
    std::vector<double> u(static_cast<size_t>(d2.f_out) * d2.s_out * d2.c_out);
    detail::conv_step(cfg_, d2, params_.flat.data() + lay_.conv2_w,
                      params_.flat.data() + lay_.conv2_b, window, u.data());
    for (int s = 0; s < cfg_.conv_stride_t && !conv2_buf_.empty(); ++s) conv2_buf_.pop_front();
    detail::lstm_step(params_.flat.data() + lay_.lstm1_wx, params_.flat.data() + lay_.lstm1_wh,
                      params_.flat.data() + lay_.lstm1_b, cfg_.hidden1, u, lstm1_);
    tr2_buf_.push_back(lstm1_.h);
    if (static_cast<int>(tr2_buf_.size()) == cfg_.time_reduction2) emit_slot_step(out);
}

void StreamDecoder::emit_slot_step(std::vector<DecodeEvent>* out) {
    const double* P = params_.flat.data();
    std::vector<double> grouped(static_cast<size_t>(cfg_.time_reduction2) * cfg_.hidden1, 0.0);
    for (size_t r = 0; r < tr2_buf_.size(); ++r)
        std::memcpy(grouped.data() + r * cfg_.hidden1, tr2_buf_[r].data(),
                    sizeof(double) * cfg_.hidden1);
    tr2_buf_.clear();
    std::vector<double> p2(cfg_.proj2);
    detail::linear_step(P + lay_.proj2_w, P + lay_.proj2_b, cfg_.proj2,
                        cfg_.time_reduction2 * cfg_.hidden1, grouped.data(), p2.data());
    detail::lstm_step(P + lay_.lstm2_wx, P + lay_.lstm2_wh, P + lay_.lstm2_b, cfg_.hidden2, p2,
                      lstm2_);
    std::vector<double> logits(cfg_.slot_out_dim());
    detail::linear_step(P + lay_.slot_w, P + lay_.slot_b, cfg_.slot_out_dim(), cfg_.hidden2,
                        lstm2_.h.data(), logits.data());
    if (cfg_.head_mode == HeadMode::Ctc) {
        std::vector<double> feed = softmax(logits);
        std::vector<double> logp(feed.size());
        for (size_t v = 0; v < feed.size(); ++v) logp[v] = std::log(feed[v]);
        if (auto ev = greedy_ctc_step(slot_ctc_, logp, DecodeEvent::Head::Slot, slot_step_)) {
            out->push_back(*ev);
            slot_labels_.push_back(ev->label - 1);  // drop the blank offset
        }
        slot_feed_last_ = std::move(feed);
    } else {
        std::vector<double> probs(logits.size());
        for (size_t v = 0; v < logits.size(); ++v) probs[v] = detail::sigmoid(logits[v]);
        std::vector<double> z(probs.size());
        for (size_t v = 0; v < probs.size(); ++v)
            z[v] = std::max(0.0, probs[v] - prev_slot_probs_[v]);
        for (const DecodeEvent& ev :
             ctl_threshold_step(z, theta_, DecodeEvent::Head::Slot, slot_step_)) {
            out->push_back(ev);
            slot_labels_.push_back(ev.label);
        }
        prev_slot_probs_ = probs;
        slot_feed_last_ = std::move(probs);
    }
    ++slot_step_;
    tr3_buf_.push_back(lstm2_.h);
    if (static_cast<int>(tr3_buf_.size()) == cfg_.time_reduction3) emit_intent_step(out);
}

void StreamDecoder::emit_intent_step(std::vector<DecodeEvent>* out) {
    const double* P = params_.flat.data();
    std::vector<double> grouped(static_cast<size_t>(cfg_.time_reduction3) * cfg_.hidden2, 0.0);
    for (size_t r = 0; r < tr3_buf_.size(); ++r)
        std::memcpy(grouped.data() + r * cfg_.hidden2, tr3_buf_[r].data(),
                    sizeof(double) * cfg_.hidden2);
    tr3_buf_.clear();
    std::vector<double> input(cfg_.lstm3_input_dim());
    detail::linear_step(P + lay_.proj3_w, P + lay_.proj3_b, cfg_.proj3,
                        cfg_.time_reduction3 * cfg_.hidden2, grouped.data(), input.data());
    std::copy(slot_feed_last_.begin(), slot_feed_last_.end(), input.begin() + cfg_.proj3);
    detail::lstm_step(P + lay_.lstm3_wx, P + lay_.lstm3_wh, P + lay_.lstm3_b, cfg_.hidden3, input,
                      lstm3_);
    std::vector<double> logits(cfg_.intent_out_dim());
    detail::linear_step(P + lay_.intent_w, P + lay_.intent_b, cfg_.intent_out_dim(), cfg_.hidden3,
                        lstm3_.h.data(), logits.data());
    if (cfg_.head_mode == HeadMode::Ctc) {
        std::vector<double> sm = softmax(logits);
        std::vector<double> logp(sm.size());
        for (size_t v = 0; v < sm.size(); ++v) logp[v] = std::log(sm[v]);
        if (auto ev = greedy_ctc_step(intent_ctc_, logp, DecodeEvent::Head::Intent, intent_step_)) {
            out->push_back(*ev);
            intent_labels_.push_back(ev->label - 1);
        }
    } else {
        std::vector<double> probs(logits.size());
        for (size_t v = 0; v < logits.size(); ++v) probs[v] = detail::sigmoid(logits[v]);
        std::vector<double> z(probs.size());
        for (size_t v = 0; v < probs.size(); ++v)
            z[v] = std::max(0.0, probs[v] - prev_intent_probs_[v]);
        for (const DecodeEvent& ev :
             ctl_threshold_step(z, theta_, DecodeEvent::Head::Intent, intent_step_)) {
            out->push_back(ev);
            intent_labels_.push_back(ev.label);
        }
        prev_intent_probs_ = probs;
    }
    ++intent_step_;
}

std::vector<DecodeEvent> StreamDecoder::finish() {
    if (finished_) return {};
    finished_ = true;
    std::vector<DecodeEvent> out;
    if (!tr2_buf_.empty()) emit_slot_step(&out);   // zero-padded partial group
    if (!tr3_buf_.empty()) emit_intent_step(&out);
    events_.insert(events_.end(), out.begin(), out.end());
    return out;
}

DecodeResult stream_decode(const ModelConfig& cfg, const ModelParams& params,
                           const std::vector<Matrix>& chunks, double theta) {
    StreamDecoder dec(cfg, params, theta);
    for (const Matrix& c : chunks) dec.push(c);
    dec.finish();
    return {dec.intent_labels(), dec.slot_labels(), dec.events()};
}

DecodeResult decode_outputs(const ModelConfig& cfg, const ForwardOutput& out, double theta) {
    DecodeResult res;
    if (cfg.head_mode == HeadMode::Ctc) {
        GreedyCtcState slot_state, intent_state;
        for (int t = 0; t < out.slot_out.rows(); ++t)
            if (auto ev = greedy_ctc_step(slot_state,
                                          std::span<const double>(out.slot_out.row(t),
                                                                  out.slot_out.cols()),
                                          DecodeEvent::Head::Slot, t)) {
                res.events.push_back(*ev);
                res.slot_labels.push_back(ev->label - 1);
            }
        for (int t = 0; t < out.intent_out.rows(); ++t)
            if (auto ev = greedy_ctc_step(intent_state,
                                          std::span<const double>(out.intent_out.row(t),
                                                                  out.intent_out.cols()),
                                          DecodeEvent::Head::Intent, t)) {
                res.events.push_back(*ev);
                res.intent_labels.push_back(ev->label - 1);
            }
    } else {
        BoundaryProbs slot_b = rectified_delta(out.slot_out);
        for (int t = 0; t < slot_b.on.rows(); ++t)
            for (const DecodeEvent& ev :
                 ctl_threshold_step(std::span<const double>(slot_b.on.row(t), slot_b.on.cols()),
                                    theta, DecodeEvent::Head::Slot, t)) {
                res.events.push_back(ev);
                res.slot_labels.push_back(ev.label);
            }
        BoundaryProbs intent_b = rectified_delta(out.intent_out);
        for (int t = 0; t < intent_b.on.rows(); ++t)
            for (const DecodeEvent& ev :
                 ctl_threshold_step(std::span<const double>(intent_b.on.row(t), intent_b.on.cols()),
                                    theta, DecodeEvent::Head::Intent, t)) {
                res.events.push_back(ev);
                res.intent_labels.push_back(ev.label);
            }
    }
    return res;
}

int sequence_exact(const std::vector<int>& pred, const std::vector<int>& truth) {
    return pred == truth ? 1 : 0;
}

}  // namespace slu
