#include "slu/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace slu {

int ModelConfig::conv_out(int in, int kernel, int stride) const {
    if (in < kernel) return 0;
    return (in - kernel) / stride + 1;
}

int ModelConfig::conv_stack_out() const {
    int s1 = conv_out(stack_width, conv_kernel_s, conv_stride_s);
    return conv_out(s1, conv_kernel_s, conv_stride_s);
}

int ModelConfig::slot_steps(int t_stacked) const {
    int t = conv_time2(t_stacked);
    return (t + time_reduction2 - 1) / time_reduction2;
}

int ModelConfig::intent_steps(int t_stacked) const {
    int s = slot_steps(t_stacked);
    return (s + time_reduction3 - 1) / time_reduction3;
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* what) {
        if (v < 1) throw std::invalid_argument(std::string("ModelConfig: ") + what + " must be >= 1");
    };
    positive(feat_dim, "feat_dim");
    positive(stack_width, "stack_width");
    positive(stack_stride, "stack_stride");
    positive(conv1_channels, "conv1_channels");
    positive(conv2_channels, "conv2_channels");
    positive(hidden1, "hidden1");
    positive(hidden2, "hidden2");
    positive(hidden3, "hidden3");
    positive(proj2, "proj2");
    positive(proj3, "proj3");
    positive(time_reduction2, "time_reduction2");
    positive(time_reduction3, "time_reduction3");
    positive(slot_vocab, "slot_vocab");
    positive(intent_vocab, "intent_vocab");
    if (conv_feat1() < 1 || conv_feat2() < 1)
        throw std::invalid_argument("ModelConfig: feature axis collapses in the conv stack");
    if (conv_stack_out() < 1)
        throw std::invalid_argument("ModelConfig: stack axis collapses in the conv stack");
}

uint64_t ModelConfig::digest() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    for (int v : {feat_dim, stack_width, stack_stride, conv_kernel_t, conv_kernel_f,
                  conv_kernel_s, conv_stride_t, conv_stride_f, conv_stride_s,
                  conv1_channels, conv2_channels, hidden1, hidden2, hidden3, proj2, proj3,
                  time_reduction2, time_reduction3, slot_vocab, intent_vocab,
                  static_cast<int>(head_mode)})
        mix(static_cast<uint64_t>(v));
    return h;
}

ParamLayout::ParamLayout(const ModelConfig& c) {
    size_t off = 0;
    auto take = [&off](size_t n) {
        size_t at = off;
        off += n;
        return at;
    };
    const size_t kvol = static_cast<size_t>(c.conv_kernel_t) * c.conv_kernel_f * c.conv_kernel_s;
    conv1_w = take(static_cast<size_t>(c.conv1_channels) * kvol);
    conv1_b = take(c.conv1_channels);
    conv2_w = take(static_cast<size_t>(c.conv2_channels) * c.conv1_channels * kvol);
    conv2_b = take(c.conv2_channels);
    const int i1 = c.lstm1_input_dim();
    lstm1_wx = take(static_cast<size_t>(4 * c.hidden1) * i1);
    lstm1_wh = take(static_cast<size_t>(4 * c.hidden1) * c.hidden1);
    lstm1_b = take(4 * c.hidden1);
    proj2_w = take(static_cast<size_t>(c.proj2) * c.time_reduction2 * c.hidden1);
    proj2_b = take(c.proj2);
    lstm2_wx = take(static_cast<size_t>(4 * c.hidden2) * c.proj2);
    lstm2_wh = take(static_cast<size_t>(4 * c.hidden2) * c.hidden2);
    lstm2_b = take(4 * c.hidden2);
    slot_w = take(static_cast<size_t>(c.slot_out_dim()) * c.hidden2);
    slot_b = take(c.slot_out_dim());
    proj3_w = take(static_cast<size_t>(c.proj3) * c.time_reduction3 * c.hidden2);
    proj3_b = take(c.proj3);
    const int i3 = c.lstm3_input_dim();
    lstm3_wx = take(static_cast<size_t>(4 * c.hidden3) * i3);
    lstm3_wh = take(static_cast<size_t>(4 * c.hidden3) * c.hidden3);
    lstm3_b = take(4 * c.hidden3);
    intent_w = take(static_cast<size_t>(c.intent_out_dim()) * c.hidden3);
    intent_b = take(c.intent_out_dim());
    total = off;
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamLayout lay(cfg);
    ModelParams p;
    p.flat.assign(lay.total, 0.0);
    std::mt19937_64 rng(mix_seed(seed, 0xA11CE));
    const size_t kvol = static_cast<size_t>(cfg.conv_kernel_t) * cfg.conv_kernel_f * cfg.conv_kernel_s;

    struct Block {
        size_t off, n;
        int fan_in;
    };
    const std::vector<Block> blocks = {
        {lay.conv1_w, static_cast<size_t>(cfg.conv1_channels) * kvol, static_cast<int>(kvol)},
        {lay.conv1_b, static_cast<size_t>(cfg.conv1_channels), static_cast<int>(kvol)},
        {lay.conv2_w, static_cast<size_t>(cfg.conv2_channels) * cfg.conv1_channels * kvol,
         static_cast<int>(kvol) * cfg.conv1_channels},
        {lay.conv2_b, static_cast<size_t>(cfg.conv2_channels), static_cast<int>(kvol) * cfg.conv1_channels},
        {lay.lstm1_wx, static_cast<size_t>(4 * cfg.hidden1) * cfg.lstm1_input_dim(), cfg.lstm1_input_dim()},
        {lay.lstm1_wh, static_cast<size_t>(4 * cfg.hidden1) * cfg.hidden1, cfg.hidden1},
        {lay.lstm1_b, static_cast<size_t>(4 * cfg.hidden1), cfg.lstm1_input_dim()},
        {lay.proj2_w, static_cast<size_t>(cfg.proj2) * cfg.time_reduction2 * cfg.hidden1,
         cfg.time_reduction2 * cfg.hidden1},
        {lay.proj2_b, static_cast<size_t>(cfg.proj2), cfg.time_reduction2 * cfg.hidden1},
        {lay.lstm2_wx, static_cast<size_t>(4 * cfg.hidden2) * cfg.proj2, cfg.proj2},
        {lay.lstm2_wh, static_cast<size_t>(4 * cfg.hidden2) * cfg.hidden2, cfg.hidden2},
        {lay.lstm2_b, static_cast<size_t>(4 * cfg.hidden2), cfg.proj2},
        {lay.slot_w, static_cast<size_t>(cfg.slot_out_dim()) * cfg.hidden2, cfg.hidden2},
        {lay.slot_b, static_cast<size_t>(cfg.slot_out_dim()), cfg.hidden2},
        {lay.proj3_w, static_cast<size_t>(cfg.proj3) * cfg.time_reduction3 * cfg.hidden2,
         cfg.time_reduction3 * cfg.hidden2},
        {lay.proj3_b, static_cast<size_t>(cfg.proj3), cfg.time_reduction3 * cfg.hidden2},
        {lay.lstm3_wx, static_cast<size_t>(4 * cfg.hidden3) * cfg.lstm3_input_dim(), cfg.lstm3_input_dim()},
        {lay.lstm3_wh, static_cast<size_t>(4 * cfg.hidden3) * cfg.hidden3, cfg.hidden3},
        {lay.lstm3_b, static_cast<size_t>(4 * cfg.hidden3), cfg.lstm3_input_dim()},
        {lay.intent_w, static_cast<size_t>(cfg.intent_out_dim()) * cfg.hidden3, cfg.hidden3},
        {lay.intent_b, static_cast<size_t>(cfg.intent_out_dim()), cfg.hidden3},
    };
    for (const Block& b : blocks) {
        double bound = 1.0 / std::sqrt(static_cast<double>(b.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (size_t i = 0; i < b.n; ++i) p.flat[b.off + i] = dist(rng);
    }
    return p;
}

namespace detail {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void conv_step(const ModelConfig& cfg, const ConvDims& d, const double* w, const double* b,
               std::span<const double* const> in_rows, double* out_row) {
    const int kt = cfg.conv_kernel_t, kf = cfg.conv_kernel_f, ks = cfg.conv_kernel_s;
    for (int f = 0; f < d.f_out; ++f) {
        for (int s = 0; s < d.s_out; ++s) {
            for (int co = 0; co < d.c_out; ++co) {
                double acc = b[co];
                for (int ci = 0; ci < d.c_in; ++ci)
                    for (int dt = 0; dt < kt; ++dt)
                        for (int df = 0; df < kf; ++df)
                            for (int ds = 0; ds < ks; ++ds) {
                                int fi = f * cfg.conv_stride_f + df;
                                int si = s * cfg.conv_stride_s + ds;
                                double x = in_rows[dt][(fi * d.s_in + si) * d.c_in + ci];
                                double wv = w[(((static_cast<size_t>(co) * d.c_in + ci) * kt + dt) * kf + df) * ks + ds];
                                acc += wv * x;
                            }
                out_row[(f * d.s_out + s) * d.c_out + co] = std::max(0.0, acc);
            }
        }
    }
}

void lstm_step(const double* wx, const double* wh, const double* b, int hidden,
               std::span<const double> input, LstmState& state,
               double* gi_out, double* gf_out, double* gg_out, double* go_out) {
    const int in_dim = static_cast<int>(input.size());
    std::vector<double> z(4 * hidden);
    for (int j = 0; j < 4 * hidden; ++j) {
        double acc = b[j];
        const double* row = wx + static_cast<size_t>(j) * in_dim;
        for (int k = 0; k < in_dim; ++k) acc += row[k] * input[k];
        const double* rh = wh + static_cast<size_t>(j) * hidden;
        for (int k = 0; k < hidden; ++k) acc += rh[k] * state.h[k];
        z[j] = acc;
    }
    for (int k = 0; k < hidden; ++k) {
        double gi = sigmoid(z[k]);
        double gf = sigmoid(z[hidden + k]);
        double gg = std::tanh(z[2 * hidden + k]);
        double go = sigmoid(z[3 * hidden + k]);
        double c = gf * state.c[k] + gi * gg;
        state.c[k] = c;
        state.h[k] = go * std::tanh(c);
        if (gi_out) gi_out[k] = gi;
        if (gf_out) gf_out[k] = gf;
        if (gg_out) gg_out[k] = gg;
        if (go_out) go_out[k] = go;
    }
}

void linear_step(const double* w, const double* b, int out_dim, int in_dim,
                 const double* x, double* out) {
    for (int j = 0; j < out_dim; ++j) {
        double acc = b[j];
        const double* row = w + static_cast<size_t>(j) * in_dim;
        for (int k = 0; k < in_dim; ++k) acc += row[k] * x[k];
        out[j] = acc;
    }
}

void remap_stacked_row(const ModelConfig& cfg, const double* stacked_row, double* conv_row) {
    for (int s = 0; s < cfg.stack_width; ++s)
        for (int f = 0; f < cfg.feat_dim; ++f)
            conv_row[f * cfg.stack_width + s] = stacked_row[s * cfg.feat_dim + f];
}

ConvDims conv1_dims(const ModelConfig& cfg) {
    int s1 = cfg.conv_out(cfg.stack_width, cfg.conv_kernel_s, cfg.conv_stride_s);
    return ConvDims{cfg.feat_dim, cfg.stack_width, 1, cfg.conv_feat1(), s1, cfg.conv1_channels};
}

ConvDims conv2_dims(const ModelConfig& cfg) {
    ConvDims d1 = conv1_dims(cfg);
    return ConvDims{d1.f_out, d1.s_out, cfg.conv1_channels, cfg.conv_feat2(),
                    cfg.conv_stack_out(), cfg.conv2_channels};
}

}  // namespace detail

namespace {

using detail::ConvDims;
using detail::sigmoid;

void conv_forward(const ModelConfig& cfg, const Matrix& in, const ConvDims& d,
                  const double* w, const double* b, Matrix* out) {
    const int t_out = cfg.conv_out(in.rows(), cfg.conv_kernel_t, cfg.conv_stride_t);
    *out = Matrix(t_out, d.f_out * d.s_out * d.c_out);
    std::vector<const double*> window(cfg.conv_kernel_t);
    for (int t = 0; t < t_out; ++t) {
        for (int dt = 0; dt < cfg.conv_kernel_t; ++dt)
            window[dt] = in.row(t * cfg.conv_stride_t + dt);
        detail::conv_step(cfg, d, w, b, window, out->row(t));
    }
}

// ReLU-masked conv backward: accumulates weight/bias grads and, when
// d_in != nullptr, the gradient w.r.t. the layer input.
void conv_backward(const ModelConfig& cfg, const Matrix& in, const Matrix& act,
                   const Matrix& d_act, const ConvDims& d, const double* w,
                   double* dw, double* db, Matrix* d_in) {
    const int kt = cfg.conv_kernel_t, kf = cfg.conv_kernel_f, ks = cfg.conv_kernel_s;
    if (d_in) *d_in = Matrix(in.rows(), in.cols());
    for (int t = 0; t < act.rows(); ++t) {
        for (int f = 0; f < d.f_out; ++f) {
            for (int s = 0; s < d.s_out; ++s) {
                for (int co = 0; co < d.c_out; ++co) {
                    int oc = (f * d.s_out + s) * d.c_out + co;
                    if (act(t, oc) <= 0.0) continue;  // ReLU inactive
                    double g = d_act(t, oc);
                    if (g == 0.0) continue;
                    db[co] += g;
                    for (int ci = 0; ci < d.c_in; ++ci)
                        for (int dt = 0; dt < kt; ++dt)
                            for (int df = 0; df < kf; ++df)
                                for (int ds = 0; ds < ks; ++ds) {
                                    int fi = f * cfg.conv_stride_f + df;
                                    int si = s * cfg.conv_stride_s + ds;
                                    int ic = (fi * d.s_in + si) * d.c_in + ci;
                                    int ti = t * cfg.conv_stride_t + dt;
                                    size_t wi = (((static_cast<size_t>(co) * d.c_in + ci) * kt + dt) * kf + df) * ks + ds;
                                    dw[wi] += g * in(ti, ic);
                                    if (d_in) (*d_in)(ti, ic) += g * w[wi];
                                }
                }
            }
        }
    }
}

struct LstmActs {
    Matrix i, f, g, o, c, h;
};

void lstm_forward(const Matrix& inputs, const double* wx, const double* wh,
                  const double* b, int hidden, LstmActs* a) {
    const int T = inputs.rows();
    const int in_dim = inputs.cols();
    a->i = Matrix(T, hidden);
    a->f = Matrix(T, hidden);
    a->g = Matrix(T, hidden);
    a->o = Matrix(T, hidden);
    a->c = Matrix(T, hidden);
    a->h = Matrix(T, hidden);
    detail::LstmState state(hidden);
    for (int t = 0; t < T; ++t) {
        detail::lstm_step(wx, wh, b, hidden, std::span<const double>(inputs.row(t), in_dim),
                          state, a->i.row(t), a->f.row(t), a->g.row(t), a->o.row(t));
        std::memcpy(a->c.row(t), state.c.data(), sizeof(double) * hidden);
        std::memcpy(a->h.row(t), state.h.data(), sizeof(double) * hidden);
    }
}

// BPTT given dL/dh per step; returns dL/dinputs and accumulates weight grads.
void lstm_backward(const Matrix& inputs, const LstmActs& a, const Matrix& dh_out,
                   const double* wx, const double* wh, int hidden,
                   double* dwx, double* dwh, double* db, Matrix* d_inputs) {
    const int T = inputs.rows();
    const int in_dim = inputs.cols();
    *d_inputs = Matrix(T, in_dim);
    std::vector<double> dh(hidden, 0.0), dc(hidden, 0.0), dz(4 * hidden);
    for (int t = T - 1; t >= 0; --t) {
        for (int k = 0; k < hidden; ++k) dh[k] += dh_out(t, k);
        for (int k = 0; k < hidden; ++k) {
            double tc = std::tanh(a.c(t, k));
            double go = a.o(t, k), gi = a.i(t, k), gf = a.f(t, k), gg = a.g(t, k);
            double d_o = dh[k] * tc;
            double d_c = dc[k] + dh[k] * go * (1.0 - tc * tc);
            double cp = t > 0 ? a.c(t - 1, k) : 0.0;
            double d_i = d_c * gg;
            double d_f = d_c * cp;
            double d_g = d_c * gi;
            dc[k] = d_c * gf;  // carried to t-1
            dz[k] = d_i * gi * (1.0 - gi);
            dz[hidden + k] = d_f * gf * (1.0 - gf);
            dz[2 * hidden + k] = d_g * (1.0 - gg * gg);
            dz[3 * hidden + k] = d_o * go * (1.0 - go);
        }
        std::fill(dh.begin(), dh.end(), 0.0);
        for (int j = 0; j < 4 * hidden; ++j) {
            double g = dz[j];
            if (g == 0.0) continue;
            db[j] += g;
            double* dwrow = dwx + static_cast<size_t>(j) * in_dim;
            const double* x = inputs.row(t);
            double* din = d_inputs->row(t);
            const double* wrow = wx + static_cast<size_t>(j) * in_dim;
            for (int k = 0; k < in_dim; ++k) {
                dwrow[k] += g * x[k];
                din[k] += g * wrow[k];
            }
            if (t > 0) {
                double* dwhrow = dwh + static_cast<size_t>(j) * hidden;
                const double* hp = a.h.row(t - 1);
                const double* whrow = wh + static_cast<size_t>(j) * hidden;
                for (int k = 0; k < hidden; ++k) {
                    dwhrow[k] += g * hp[k];
                    dh[k] += g * whrow[k];
                }
            }
        }
    }
}

// Zero-padded group concatenation of R consecutive rows.
Matrix group_concat(const Matrix& states, int factor) {
    const int T = states.rows();
    const int H = states.cols();
    const int G = (T + factor - 1) / factor;
    Matrix out(G, factor * H);
    for (int g = 0; g < G; ++g)
        for (int r = 0; r < factor; ++r) {
            int t = g * factor + r;
            if (t >= T) break;
            std::memcpy(out.row(g) + static_cast<size_t>(r) * H, states.row(t), sizeof(double) * H);
        }
    return out;
}

void linear_forward(const Matrix& in, const double* w, const double* b, int out_dim, Matrix* out) {
    *out = Matrix(in.rows(), out_dim);
    for (int t = 0; t < in.rows(); ++t)
        detail::linear_step(w, b, out_dim, in.cols(), in.row(t), out->row(t));
}

void linear_backward(const Matrix& in, const Matrix& d_out, const double* w,
                     double* dw, double* db, Matrix* d_in) {
    const int out_dim = d_out.cols();
    if (d_in) *d_in = Matrix(in.rows(), in.cols());
    for (int t = 0; t < in.rows(); ++t)
        for (int j = 0; j < out_dim; ++j) {
            double g = d_out(t, j);
            if (g == 0.0) continue;
            db[j] += g;
            double* dwrow = dw + static_cast<size_t>(j) * in.cols();
            const double* x = in.row(t);
            for (int k = 0; k < in.cols(); ++k) dwrow[k] += g * x[k];
            if (d_in) {
                const double* wrow = w + static_cast<size_t>(j) * in.cols();
                double* di = d_in->row(t);
                for (int k = 0; k < in.cols(); ++k) di[k] += g * wrow[k];
            }
        }
}

Matrix apply_dropout(const Matrix& h, double rate, std::mt19937_64& rng, Matrix* mask_out) {
    Matrix mask(h.rows(), h.cols());
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale = 1.0 / (1.0 - rate);
    Matrix out(h.rows(), h.cols());
    for (size_t i = 0; i < h.size(); ++i) {
        double m = keep(rng) ? scale : 0.0;
        mask.data()[i] = m;
        out.data()[i] = h.data()[i] * m;
    }
    *mask_out = mask;
    return out;
}

}  // namespace

Matrix sigmoid_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (size_t i = 0; i < logits.size(); ++i) out.data()[i] = sigmoid(logits.data()[i]);
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    double m = kNegInf;
    for (double v : logits) m = std::max(m, v);
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) z += (out[i] = std::exp(logits[i] - m));
    for (double& v : out) v /= z;
    return out;
}

Matrix time_reduce(const Matrix& states, int factor, const Matrix& proj_w,
                   const std::vector<double>& proj_b) {
    if (factor < 1) throw std::invalid_argument("time_reduce: factor >= 1");
    Matrix grouped = group_concat(states, factor);
    if (proj_w.cols() != grouped.cols())
        throw std::invalid_argument("time_reduce: projection shape mismatch");
    Matrix out;
    linear_forward(grouped, proj_w.data().data(), proj_b.data(), proj_w.rows(), &out);
    return out;
}

ForwardOutput forward(const ModelParams& params, const Matrix& stacked,
                      const ModelConfig& cfg, Tape* tape, const ForwardOptions& opts) {
    cfg.validate();
    ParamLayout lay(cfg);
    if (params.flat.size() != lay.total)
        throw std::invalid_argument("forward: parameter vector does not match config");
    if (stacked.cols() != cfg.stack_width * cfg.feat_dim)
        throw std::invalid_argument("forward: stacked input dim mismatch");
    if (stacked.rows() < cfg.min_stacked_length())
        throw std::invalid_argument(
            "forward: input too short; need at least " +
            std::to_string(cfg.min_stacked_length()) + " stacked frames");

    const double* P = params.flat.data();
    Tape local;
    Tape& tp = tape ? *tape : local;
    tp.cfg = cfg;
    tp.stacked = stacked;

    // stacked row layout is [frame w][feat f] -> conv layout (f * S + s) * 1.
    Matrix conv_in(stacked.rows(), cfg.feat_dim * cfg.stack_width);
    for (int t = 0; t < stacked.rows(); ++t)
        detail::remap_stacked_row(cfg, stacked.row(t), conv_in.row(t));

    ConvDims d1 = detail::conv1_dims(cfg);
    conv_forward(cfg, conv_in, d1, P + lay.conv1_w, P + lay.conv1_b, &tp.conv1_act);
    ConvDims d2 = detail::conv2_dims(cfg);
    conv_forward(cfg, tp.conv1_act, d2, P + lay.conv2_w, P + lay.conv2_b, &tp.conv2_act);

    LstmActs l1;
    lstm_forward(tp.conv2_act, P + lay.lstm1_wx, P + lay.lstm1_wh, P + lay.lstm1_b, cfg.hidden1, &l1);
    tp.lstm1_i = l1.i; tp.lstm1_f = l1.f; tp.lstm1_g = l1.g;
    tp.lstm1_o = l1.o; tp.lstm1_c = l1.c; tp.lstm1_h = l1.h;

    const bool drop = opts.training && opts.dropout > 0.0;
    std::mt19937_64 drop_rng(mix_seed(opts.dropout_seed, 0xD80));
    tp.h1_dropped = drop ? apply_dropout(l1.h, opts.dropout, drop_rng, &tp.drop_mask1) : l1.h;

    Matrix g2 = group_concat(tp.h1_dropped, cfg.time_reduction2);
    linear_forward(g2, P + lay.proj2_w, P + lay.proj2_b, cfg.proj2, &tp.proj2_out);

    LstmActs l2;
    lstm_forward(tp.proj2_out, P + lay.lstm2_wx, P + lay.lstm2_wh, P + lay.lstm2_b, cfg.hidden2, &l2);
    tp.lstm2_i = l2.i; tp.lstm2_f = l2.f; tp.lstm2_g = l2.g;
    tp.lstm2_o = l2.o; tp.lstm2_c = l2.c; tp.lstm2_h = l2.h;
    tp.h2_dropped = drop ? apply_dropout(l2.h, opts.dropout, drop_rng, &tp.drop_mask2) : l2.h;

    linear_forward(tp.h2_dropped, P + lay.slot_w, P + lay.slot_b, cfg.slot_out_dim(), &tp.slot_logits);

    const int T2 = tp.slot_logits.rows();
    tp.slot_feed = Matrix(T2, cfg.slot_out_dim());
    for (int t = 0; t < T2; ++t) {
        if (cfg.head_mode == HeadMode::Ctc) {
            std::vector<double> sm = softmax(std::span<const double>(tp.slot_logits.row(t),
                                                                     cfg.slot_out_dim()));
            std::copy(sm.begin(), sm.end(), tp.slot_feed.row(t));
        } else {
            for (int v = 0; v < cfg.slot_out_dim(); ++v)
                tp.slot_feed(t, v) = sigmoid(tp.slot_logits(t, v));
        }
    }

    Matrix g3 = group_concat(tp.h2_dropped, cfg.time_reduction3);
    Matrix p3;
    linear_forward(g3, P + lay.proj3_w, P + lay.proj3_b, cfg.proj3, &p3);
    const int T3 = p3.rows();
    tp.lstm3_in = Matrix(T3, cfg.lstm3_input_dim());
    tp.feed_index.resize(T3);
    for (int g = 0; g < T3; ++g) {
        int fs = std::min((g + 1) * cfg.time_reduction3 - 1, T2 - 1);
        tp.feed_index[g] = fs;
        std::memcpy(tp.lstm3_in.row(g), p3.row(g), sizeof(double) * cfg.proj3);
        std::memcpy(tp.lstm3_in.row(g) + cfg.proj3, tp.slot_feed.row(fs),
                    sizeof(double) * cfg.slot_out_dim());
    }

    LstmActs l3;
    lstm_forward(tp.lstm3_in, P + lay.lstm3_wx, P + lay.lstm3_wh, P + lay.lstm3_b, cfg.hidden3, &l3);
    tp.lstm3_i = l3.i; tp.lstm3_f = l3.f; tp.lstm3_g = l3.g;
    tp.lstm3_o = l3.o; tp.lstm3_c = l3.c; tp.lstm3_h = l3.h;
    tp.h3_dropped = drop ? apply_dropout(l3.h, opts.dropout, drop_rng, &tp.drop_mask3) : l3.h;

    linear_forward(tp.h3_dropped, P + lay.intent_w, P + lay.intent_b, cfg.intent_out_dim(),
                   &tp.intent_logits);

    ForwardOutput out;
    out.rate_ratio = cfg.time_reduction3;
    if (cfg.head_mode == HeadMode::Ctc) {
        out.slot_out = Matrix(T2, cfg.slot_out_dim());
        for (int t = 0; t < T2; ++t)
            for (int v = 0; v < cfg.slot_out_dim(); ++v)
                out.slot_out(t, v) = std::log(tp.slot_feed(t, v));
        Matrix il = tp.intent_logits;
        out.intent_out = Matrix(T3, cfg.intent_out_dim());
        for (int g = 0; g < T3; ++g) {
            std::vector<double> sm = softmax(std::span<const double>(il.row(g), cfg.intent_out_dim()));
            for (int v = 0; v < cfg.intent_out_dim(); ++v) out.intent_out(g, v) = std::log(sm[v]);
        }
    } else {
        out.slot_out = tp.slot_feed;
        out.intent_out = sigmoid_rows(tp.intent_logits);
    }
    return out;
}

std::vector<double> backward(const ModelParams& params, const Tape& tp,
                             const Matrix& d_slot_logits, const Matrix& d_intent_logits) {
    const ModelConfig& cfg = tp.cfg;
    ParamLayout lay(cfg);
    if (params.flat.size() != lay.total)
        throw std::invalid_argument("backward: parameter vector does not match config");
    if (d_slot_logits.rows() != tp.slot_logits.rows() ||
        d_slot_logits.cols() != tp.slot_logits.cols() ||
        d_intent_logits.rows() != tp.intent_logits.rows() ||
        d_intent_logits.cols() != tp.intent_logits.cols())
        throw std::invalid_argument("backward: upstream gradient shape does not match tape");

    const double* P = params.flat.data();
    std::vector<double> grad(lay.total, 0.0);
    double* G = grad.data();

    auto undrop = [](const Matrix& d, const Matrix& mask) {
        if (mask.empty()) return d;
        Matrix out = d;
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] *= mask.data()[i];
        return out;
    };

    // intent head
    Matrix dh3d;
    linear_backward(tp.h3_dropped, d_intent_logits, P + lay.intent_w, G + lay.intent_w,
                    G + lay.intent_b, &dh3d);
    Matrix dh3 = undrop(dh3d, tp.drop_mask3);

    LstmActs l3{tp.lstm3_i, tp.lstm3_f, tp.lstm3_g, tp.lstm3_o, tp.lstm3_c, tp.lstm3_h};
    Matrix d_lstm3_in;
    lstm_backward(tp.lstm3_in, l3, dh3, P + lay.lstm3_wx, P + lay.lstm3_wh, cfg.hidden3,
                  G + lay.lstm3_wx, G + lay.lstm3_wh, G + lay.lstm3_b, &d_lstm3_in);

    const int T3 = tp.lstm3_in.rows();
    const int T2 = tp.slot_logits.rows();
    const int T1 = tp.lstm1_h.rows();
    Matrix d_p3(T3, cfg.proj3);
    Matrix d_feed(T2, cfg.slot_out_dim());
    for (int g = 0; g < T3; ++g) {
        std::memcpy(d_p3.row(g), d_lstm3_in.row(g), sizeof(double) * cfg.proj3);
        const double* df = d_lstm3_in.row(g) + cfg.proj3;
        double* acc = d_feed.row(tp.feed_index[g]);
        for (int v = 0; v < cfg.slot_out_dim(); ++v) acc[v] += df[v];
    }

    // proj3 + group scatter back onto h2_dropped
    Matrix g3 = group_concat(tp.h2_dropped, cfg.time_reduction3);
    Matrix d_g3;
    linear_backward(g3, d_p3, P + lay.proj3_w, G + lay.proj3_w, G + lay.proj3_b, &d_g3);
    Matrix dh2d(T2, cfg.hidden2);
    for (int g = 0; g < d_g3.rows(); ++g)
        for (int r = 0; r < cfg.time_reduction3; ++r) {
            int t = g * cfg.time_reduction3 + r;
            if (t >= T2) break;
            const double* src = d_g3.row(g) + static_cast<size_t>(r) * cfg.hidden2;
            double* dst = dh2d.row(t);
            for (int k = 0; k < cfg.hidden2; ++k) dst[k] += src[k];
        }

    // slot feed VJP back onto slot logits, plus the upstream slot-loss grad
    Matrix d_sl = d_slot_logits;
    for (int t = 0; t < T2; ++t) {
        const double* f = tp.slot_feed.row(t);
        const double* df = d_feed.row(t);
        double* out = d_sl.row(t);
        if (cfg.head_mode == HeadMode::Ctc) {
            double dot = 0.0;
            for (int v = 0; v < cfg.slot_out_dim(); ++v) dot += f[v] * df[v];
            for (int v = 0; v < cfg.slot_out_dim(); ++v) out[v] += f[v] * (df[v] - dot);
        } else {
            for (int v = 0; v < cfg.slot_out_dim(); ++v) out[v] += df[v] * f[v] * (1.0 - f[v]);
        }
    }

    Matrix dh2d_head;
    linear_backward(tp.h2_dropped, d_sl, P + lay.slot_w, G + lay.slot_w, G + lay.slot_b, &dh2d_head);
    for (size_t i = 0; i < dh2d.size(); ++i) dh2d.data()[i] += dh2d_head.data()[i];
    Matrix dh2 = undrop(dh2d, tp.drop_mask2);

    LstmActs l2{tp.lstm2_i, tp.lstm2_f, tp.lstm2_g, tp.lstm2_o, tp.lstm2_c, tp.lstm2_h};
    Matrix d_p2;
    lstm_backward(tp.proj2_out, l2, dh2, P + lay.lstm2_wx, P + lay.lstm2_wh, cfg.hidden2,
                  G + lay.lstm2_wx, G + lay.lstm2_wh, G + lay.lstm2_b, &d_p2);

    Matrix g2 = group_concat(tp.h1_dropped, cfg.time_reduction2);
    Matrix d_g2;
    linear_backward(g2, d_p2, P + lay.proj2_w, G + lay.proj2_w, G + lay.proj2_b, &d_g2);
    Matrix dh1d(T1, cfg.hidden1);
    for (int g = 0; g < d_g2.rows(); ++g)
        for (int r = 0; r < cfg.time_reduction2; ++r) {
            int t = g * cfg.time_reduction2 + r;
            if (t >= T1) break;
            const double* src = d_g2.row(g) + static_cast<size_t>(r) * cfg.hidden1;
            double* dst = dh1d.row(t);
            for (int k = 0; k < cfg.hidden1; ++k) dst[k] += src[k];
        }
    Matrix dh1 = undrop(dh1d, tp.drop_mask1);

    LstmActs l1{tp.lstm1_i, tp.lstm1_f, tp.lstm1_g, tp.lstm1_o, tp.lstm1_c, tp.lstm1_h};
    Matrix d_conv2_act;
    lstm_backward(tp.conv2_act, l1, dh1, P + lay.lstm1_wx, P + lay.lstm1_wh, cfg.hidden1,
                  G + lay.lstm1_wx, G + lay.lstm1_wh, G + lay.lstm1_b, &d_conv2_act);

    // conv stack backward (input gradient of conv1 is not needed)
    Matrix conv_in(tp.stacked.rows(), cfg.feat_dim * cfg.stack_width);
    for (int t = 0; t < tp.stacked.rows(); ++t)
        detail::remap_stacked_row(cfg, tp.stacked.row(t), conv_in.row(t));
    ConvDims d1 = detail::conv1_dims(cfg);
    ConvDims d2 = detail::conv2_dims(cfg);
    Matrix d_conv1_act;
    conv_backward(cfg, tp.conv1_act, tp.conv2_act, d_conv2_act, d2, P + lay.conv2_w,
                  G + lay.conv2_w, G + lay.conv2_b, &d_conv1_act);
    conv_backward(cfg, conv_in, tp.conv1_act, d_conv1_act, d1, P + lay.conv1_w,
                  G + lay.conv1_w, G + lay.conv1_b, nullptr);
    return grad;
}

std::vector<double> backward_from_h1(const ModelParams& params, const Tape& tp,
                                     const Matrix& d_h1) {
    const ModelConfig& cfg = tp.cfg;
    ParamLayout lay(cfg);
    if (params.flat.size() != lay.total)
        throw std::invalid_argument("backward_from_h1: parameter vector does not match config");
    if (d_h1.rows() != tp.lstm1_h.rows() || d_h1.cols() != tp.lstm1_h.cols())
        throw std::invalid_argument("backward_from_h1: gradient shape does not match tape");

    const double* P = params.flat.data();
    std::vector<double> grad(lay.total, 0.0);
    double* G = grad.data();

    LstmActs l1{tp.lstm1_i, tp.lstm1_f, tp.lstm1_g, tp.lstm1_o, tp.lstm1_c, tp.lstm1_h};
    Matrix d_conv2_act;
    lstm_backward(tp.conv2_act, l1, d_h1, P + lay.lstm1_wx, P + lay.lstm1_wh, cfg.hidden1,
                  G + lay.lstm1_wx, G + lay.lstm1_wh, G + lay.lstm1_b, &d_conv2_act);

    Matrix conv_in(tp.stacked.rows(), cfg.feat_dim * cfg.stack_width);
    for (int t = 0; t < tp.stacked.rows(); ++t)
        detail::remap_stacked_row(cfg, tp.stacked.row(t), conv_in.row(t));
    Matrix d_conv1_act;
    conv_backward(cfg, tp.conv1_act, tp.conv2_act, d_conv2_act, detail::conv2_dims(cfg),
                  P + lay.conv2_w, G + lay.conv2_w, G + lay.conv2_b, &d_conv1_act);
    conv_backward(cfg, conv_in, tp.conv1_act, d_conv1_act, detail::conv1_dims(cfg),
                  P + lay.conv1_w, G + lay.conv1_w, G + lay.conv1_b, nullptr);
    return grad;
}

LossResult last_step_ce(const LossResult& seq, const Matrix& head_logits, int label,
                        double w_seq, double w_ce) {
    if (std::fabs(w_seq + w_ce - 1.0) > 1e-9 || w_seq < 0.0 || w_ce < 0.0)
        throw std::invalid_argument("last_step_ce: weights must be nonnegative and sum to 1");
    if (head_logits.rows() < 1) throw std::invalid_argument("last_step_ce: no steps");
    if (label < 0 || label >= head_logits.cols())
        throw std::invalid_argument("last_step_ce: label out of vocabulary");
    const int last = head_logits.rows() - 1;
    std::vector<double> p = softmax(std::span<const double>(head_logits.row(last), head_logits.cols()));
    LossResult out;
    out.loss = w_seq * seq.loss + w_ce * -std::log(std::max(p[label], 1e-300));
    out.grad = Matrix(head_logits.rows(), head_logits.cols());
    for (int t = 0; t < seq.grad.rows(); ++t)
        for (int v = 0; v < seq.grad.cols(); ++v) out.grad(t, v) = w_seq * seq.grad(t, v);
    for (int v = 0; v < head_logits.cols(); ++v)
        out.grad(last, v) += w_ce * (p[v] - (v == label ? 1.0 : 0.0));
    return out;
}

namespace {

void put_u32f(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32f(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_u64f(std::ostream& os, uint64_t v) {
    put_u32f(os, static_cast<uint32_t>(v));
    put_u32f(os, static_cast<uint32_t>(v >> 32));
}

uint64_t get_u64f(std::istream& is) {
    uint64_t lo = get_u32f(is);
    uint64_t hi = get_u32f(is);
    return lo | (hi << 32);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("CKPT", 4);
    put_u32f(os, 1);
    put_u64f(os, cfg.digest());
    put_u64f(os, params.flat.size());
    for (double v : params.flat) {
        float f = static_cast<float>(v);
        uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32f(os, u);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed on " + path);
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig& cfg) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CKPT", 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    if (get_u32f(is) != 1) throw std::runtime_error("load_checkpoint: unsupported version");
    uint64_t digest = get_u64f(is);
    if (digest != cfg.digest())
        throw std::runtime_error("load_checkpoint: config digest mismatch");
    uint64_t n = get_u64f(is);
    ParamLayout lay(cfg);
    if (n != lay.total) throw std::runtime_error("load_checkpoint: parameter count mismatch");
    ModelParams p;
    p.flat.resize(n);
    for (uint64_t i = 0; i < n; ++i) {
        uint32_t u = get_u32f(is);
        float f;
        std::memcpy(&f, &u, 4);
        p.flat[i] = f;
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated " + path);
    return p;
}

int slot_receptive_end(const ModelConfig& cfg, int slot_step) {
    int conv2_end = (slot_step + 1) * cfg.time_reduction2 - 1;
    int conv1_end = conv2_end * cfg.conv_stride_t + cfg.conv_kernel_t - 1;
    return conv1_end * cfg.conv_stride_t + cfg.conv_kernel_t - 1;
}

int intent_receptive_end(const ModelConfig& cfg, int intent_step) {
    int slot_end = (intent_step + 1) * cfg.time_reduction3 - 1;
    return slot_receptive_end(cfg, slot_end);
}

}  // namespace slu
