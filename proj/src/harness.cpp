#include "slu/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "slu/ctc.hpp"
#include "slu/ctl.hpp"
#include "slu/decoder.hpp"

using nlohmann::json;

namespace slu {

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::Ctc: return "ctc";
        case LossKind::Ctl: return "ctl";
        case LossKind::CtcCe: return "ctc+ce";
        case LossKind::CtlCe: return "ctl+ce";
        case LossKind::CtlMil: return "ctl+mil";
    }
    throw std::invalid_argument("to_string: bad LossKind");
}

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "ctc") return LossKind::Ctc;
    if (s == "ctl") return LossKind::Ctl;
    if (s == "ctc+ce") return LossKind::CtcCe;
    if (s == "ctl+ce") return LossKind::CtlCe;
    if (s == "ctl+mil") return LossKind::CtlMil;
    throw std::invalid_argument("unknown loss kind: " + s);
}

ExperimentConfig::ExperimentConfig() {
    // desk-scale model: ~30k parameters, trains in seconds
    model.conv1_channels = 8;
    model.conv2_channels = 16;
    model.hidden1 = model.hidden2 = model.hidden3 = 24;
    model.proj2 = model.proj3 = 24;
    model.time_reduction2 = 1;
    model.time_reduction3 = 2;
    resolve();
}

void ExperimentConfig::resolve() {
    model.feat_dim = corpus.feat_dim;
    model.slot_vocab = corpus.n_slots;
    model.intent_vocab = corpus.n_intents;
    model.head_mode = uses_ctl(loss) ? HeadMode::Ctl : HeadMode::Ctc;
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_experiment: cannot open " + path);
    json j = json::parse(in);
    ExperimentConfig cfg;
    if (j.contains("loss")) cfg.loss = loss_kind_from_string(j.at("loss"));
    maybe(j, "pretrain_layer1", cfg.pretrain_layer1);
    maybe(j, "pretrain_epochs", cfg.pretrain_epochs);
    maybe(j, "train_labels", cfg.train_labels);
    maybe(j, "test_labels", cfg.test_labels);
    maybe(j, "train_size", cfg.train_size);
    maybe(j, "test_size", cfg.test_size);
    maybe(j, "epochs", cfg.epochs);
    maybe(j, "batch", cfg.batch);
    maybe(j, "lr", cfg.lr);
    maybe(j, "weight_decay", cfg.weight_decay);
    maybe(j, "dropout", cfg.dropout);
    maybe(j, "w_seq", cfg.w_seq);
    maybe(j, "w_ce", cfg.w_ce);
    maybe(j, "w_ctl", cfg.w_ctl);
    maybe(j, "w_mil", cfg.w_mil);
    maybe(j, "theta", cfg.theta);
    maybe(j, "seed", cfg.seed);
    if (j.contains("corpus")) {
        const json& c = j.at("corpus");
        maybe(c, "n_intents", cfg.corpus.n_intents);
        maybe(c, "n_slots", cfg.corpus.n_slots);
        maybe(c, "feat_dim", cfg.corpus.feat_dim);
        maybe(c, "n_speakers", cfg.corpus.n_speakers);
        maybe(c, "command_min", cfg.corpus.command_min);
        maybe(c, "command_max", cfg.corpus.command_max);
        maybe(c, "silence_min", cfg.corpus.silence_min);
        maybe(c, "silence_max", cfg.corpus.silence_max);
        maybe(c, "noise_sigma", cfg.corpus.noise_sigma);
        maybe(c, "speaker_scale", cfg.corpus.speaker_scale);
        maybe(c, "seed", cfg.corpus.seed);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        maybe(m, "stack_width", cfg.model.stack_width);
        maybe(m, "stack_stride", cfg.model.stack_stride);
        maybe(m, "conv1_channels", cfg.model.conv1_channels);
        maybe(m, "conv2_channels", cfg.model.conv2_channels);
        maybe(m, "hidden1", cfg.model.hidden1);
        maybe(m, "hidden2", cfg.model.hidden2);
        maybe(m, "hidden3", cfg.model.hidden3);
        maybe(m, "proj2", cfg.model.proj2);
        maybe(m, "proj3", cfg.model.proj3);
        maybe(m, "time_reduction2", cfg.model.time_reduction2);
        maybe(m, "time_reduction3", cfg.model.time_reduction3);
    }
    cfg.resolve();
    return cfg;
}

void save_experiment(const std::string& path, const ExperimentConfig& cfg) {
    json j{{"loss", to_string(cfg.loss)},
           {"pretrain_layer1", cfg.pretrain_layer1},
           {"pretrain_epochs", cfg.pretrain_epochs},
           {"train_labels", cfg.train_labels},
           {"test_labels", cfg.test_labels},
           {"train_size", cfg.train_size},
           {"test_size", cfg.test_size},
           {"epochs", cfg.epochs},
           {"batch", cfg.batch},
           {"lr", cfg.lr},
           {"weight_decay", cfg.weight_decay},
           {"dropout", cfg.dropout},
           {"w_seq", cfg.w_seq},
           {"w_ce", cfg.w_ce},
           {"w_ctl", cfg.w_ctl},
           {"w_mil", cfg.w_mil},
           {"theta", cfg.theta},
           {"seed", cfg.seed}};
    j["corpus"] = {{"n_intents", cfg.corpus.n_intents},
                   {"n_slots", cfg.corpus.n_slots},
                   {"feat_dim", cfg.corpus.feat_dim},
                   {"n_speakers", cfg.corpus.n_speakers},
                   {"command_min", cfg.corpus.command_min},
                   {"command_max", cfg.corpus.command_max},
                   {"silence_min", cfg.corpus.silence_min},
                   {"silence_max", cfg.corpus.silence_max},
                   {"noise_sigma", cfg.corpus.noise_sigma},
                   {"speaker_scale", cfg.corpus.speaker_scale},
                   {"seed", cfg.corpus.seed}};
    j["model"] = {{"stack_width", cfg.model.stack_width},
                  {"stack_stride", cfg.model.stack_stride},
                  {"conv1_channels", cfg.model.conv1_channels},
                  {"conv2_channels", cfg.model.conv2_channels},
                  {"hidden1", cfg.model.hidden1},
                  {"hidden2", cfg.model.hidden2},
                  {"hidden3", cfg.model.hidden3},
                  {"proj2", cfg.model.proj2},
                  {"proj3", cfg.model.proj3},
                  {"time_reduction2", cfg.model.time_reduction2},
                  {"time_reduction3", cfg.model.time_reduction3}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_experiment: cannot write " + path);
    out << j.dump(1) << "\n";
}

AdamW::AdamW(size_t n, double lr, double beta1, double beta2, double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay), m_(n, 0.0), v_(n, 0.0) {}

void AdamW::set_frozen(std::vector<uint8_t> mask) {
    if (!mask.empty() && mask.size() != m_.size())
        throw std::invalid_argument("AdamW: frozen mask size mismatch");
    frozen_ = std::move(mask);
}

void AdamW::step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
        throw std::invalid_argument("AdamW: vector size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < m_.size(); ++i) {
        if (!frozen_.empty() && frozen_[i]) continue;
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
        double update = (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
        params[i] -= lr_ * (update + wd_ * params[i]);
    }
}

DataBundle make_datasets(const ExperimentConfig& cfg) {
    cfg.corpus.validate();
    if (cfg.corpus.n_speakers < 2)
        throw std::invalid_argument("make_datasets: need at least two speakers for the split");
    const int n_test_spk = std::max(1, cfg.corpus.n_speakers / 4);

    auto build = [&](int count, int labels, bool test) {
        std::vector<SyntheticUtterance> out;
        out.reserve(count);
        uint64_t domain = cfg.seed ^ (test ? 0x7465737453ULL : 0x747261696eULL);
        for (int i = 0; i < count; ++i) {
            uint64_t s = mix_seed(domain, static_cast<uint64_t>(i));
            std::mt19937_64 rng(s);
            std::uniform_int_distribution<int> spk(test ? 0 : n_test_spk,
                                                  test ? n_test_spk - 1
                                                       : cfg.corpus.n_speakers - 1);
            std::uniform_int_distribution<int> in(0, cfg.corpus.n_intents - 1);
            std::uniform_int_distribution<int> sl(0, cfg.corpus.n_slots - 1);
            int speaker = spk(rng);
            SyntheticUtterance u =
                make_utterance(cfg.corpus, speaker, in(rng), sl(rng), mix_seed(s, 1));
            if (labels == 2) {
                SyntheticUtterance v =
                    make_utterance(cfg.corpus, speaker, in(rng), sl(rng), mix_seed(s, 2));
                u = concat_utterances(cfg.corpus, u, v, mix_seed(s, 3));
            }
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s-%04d", test ? "te" : "tr", i);
            u.id = buf;
            out.push_back(std::move(u));
        }
        return out;
    };

    DataBundle data;
    data.train = build(cfg.train_size, cfg.train_labels, false);
    data.test = build(cfg.test_size, cfg.test_labels, true);
    std::vector<Matrix> feats;
    feats.reserve(data.train.size());
    for (const auto& u : data.train) feats.push_back(u.features);
    data.cmvn = accumulate_cmvn(feats);
    return data;
}

Matrix prepare_input(const Matrix& features, const CmvnStats& cmvn, const ModelConfig& model) {
    return stack_frames(apply_cmvn(features, cmvn), model.stack_width, model.stack_stride);
}

std::vector<int> collapse_frame_targets(const std::vector<int>& frame_targets) {
    std::vector<int> out;
    int prev = 0;
    for (int t : frame_targets) {
        if (t != 0 && t != prev) out.push_back(t);
        prev = t;
    }
    return out;
}

namespace {

std::vector<int> shift_up(const std::vector<int>& labels) {
    std::vector<int> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] + 1;  // make room for blank
    return out;
}

// gradient w.r.t. sigmoid outputs -> gradient w.r.t. logits
void chain_sigmoid(const Matrix& y, Matrix* grad) {
    for (size_t i = 0; i < y.size(); ++i)
        grad->data()[i] *= y.data()[i] * (1.0 - y.data()[i]);
}

}  // namespace

UttGrad head_losses(const ExperimentConfig& cfg, const Tape& tape, const ForwardOutput& out,
                    const SyntheticUtterance& u) {
    if (u.slot_labels.empty() || u.intent_labels.empty())
        throw std::invalid_argument("head_losses: utterance without labels");
    LossResult slot, intent;
    if (!uses_ctl(cfg.loss)) {
        slot = ctc_loss(out.slot_out, shift_up(u.slot_labels));
        intent = ctc_loss(out.intent_out, shift_up(u.intent_labels));
        if (cfg.loss == LossKind::CtcCe) {
            slot = last_step_ce(slot, tape.slot_logits, u.slot_labels.back() + 1, cfg.w_seq,
                                cfg.w_ce);
            intent = last_step_ce(intent, tape.intent_logits, u.intent_labels.back() + 1,
                                  cfg.w_seq, cfg.w_ce);
        }
    } else {
        CtlTarget st{u.slot_labels, cfg.model.slot_vocab, CtlMode::OnsetOnly};
        CtlTarget it{u.intent_labels, cfg.model.intent_vocab, CtlMode::OnsetOnly};
        if (cfg.loss == LossKind::CtlMil) {
            slot = ctl_mil_loss(out.slot_out, st, bag_from_target(st, cfg.model.slot_vocab),
                                cfg.w_ctl, cfg.w_mil);
            intent = ctl_mil_loss(out.intent_out, it,
                                  bag_from_target(it, cfg.model.intent_vocab), cfg.w_ctl,
                                  cfg.w_mil);
        } else {
            slot = ctl_loss(out.slot_out, st);
            intent = ctl_loss(out.intent_out, it);
        }
        chain_sigmoid(out.slot_out, &slot.grad);
        chain_sigmoid(out.intent_out, &intent.grad);
        if (cfg.loss == LossKind::CtlCe) {
            slot = last_step_ce(slot, tape.slot_logits, u.slot_labels.back(), cfg.w_seq, cfg.w_ce);
            intent = last_step_ce(intent, tape.intent_logits, u.intent_labels.back(), cfg.w_seq,
                                  cfg.w_ce);
        }
    }
    return {slot.loss + intent.loss, std::move(slot.grad), std::move(intent.grad)};
}

namespace {

// aux CTC head over LSTM1 states used only during layer-1 pretraining
struct AuxHead {
    int vocab, hidden;
    std::vector<double> w, b;  // vocab x hidden, vocab

    AuxHead(int vocab_, int hidden_, uint64_t seed) : vocab(vocab_), hidden(hidden_) {
        w.resize(static_cast<size_t>(vocab) * hidden);
        b.assign(vocab, 0.0);
        std::mt19937_64 rng(seed);
        double r = 1.0 / std::sqrt(hidden);
        std::uniform_real_distribution<double> dist(-r, r);
        for (double& x : w) x = dist(rng);
    }

    Matrix logits(const Matrix& h1) const {
        Matrix out(h1.rows(), vocab);
        for (int t = 0; t < h1.rows(); ++t)
            for (int v = 0; v < vocab; ++v) {
                double a = b[v];
                const double* wr = w.data() + static_cast<size_t>(v) * hidden;
                for (int k = 0; k < hidden; ++k) a += wr[k] * h1(t, k);
                out(t, v) = a;
            }
        return out;
    }
};

}  // namespace

TrainResult train_model(const ExperimentConfig& cfg_in, const DataBundle& data,
                        std::ostream* metrics) {
    ExperimentConfig cfg = cfg_in;
    cfg.resolve();
    cfg.model.validate();
    if (cfg.epochs < 1 || cfg.batch < 1) throw std::invalid_argument("train_model: bad schedule");

    ParamLayout lay(cfg.model);
    ModelParams params = init_params(cfg.model, cfg.seed);

    std::vector<Matrix> inputs;
    inputs.reserve(data.train.size());
    for (const auto& u : data.train) inputs.push_back(prepare_input(u.features, data.cmvn, cfg.model));

    std::vector<uint8_t> layer1(lay.total, 0);
    std::fill(layer1.begin(), layer1.begin() + lay.proj2_w, 1);

    TrainResult result;
    auto emit = [&](const json& j) {
        if (metrics) *metrics << j.dump() << "\n";
    };
    json ident{{"loss", to_string(cfg.loss)},
               {"train_labels", cfg.train_labels},
               {"test_labels", cfg.test_labels},
               {"pretrain", cfg.pretrain_layer1},
               {"seed", cfg.seed}};

    if (cfg.pretrain_layer1) {
        AuxHead aux(cfg.corpus.n_intents + cfg.corpus.n_slots + 1, cfg.model.hidden1,
                    mix_seed(cfg.seed, 0xA00));
        AdamW main_opt(lay.total, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        std::vector<uint8_t> not_layer1(lay.total, 1);
        for (size_t i = 0; i < lay.proj2_w; ++i) not_layer1[i] = 0;
        main_opt.set_frozen(not_layer1);  // pretraining touches layer 1 only
        AdamW aux_opt(aux.w.size() + aux.b.size(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, 0.0);

        for (int ep = 0; ep < cfg.pretrain_epochs; ++ep) {
            std::vector<int> order(data.train.size());
            std::iota(order.begin(), order.end(), 0);
            std::mt19937_64 rng(mix_seed(cfg.seed ^ 0x505245ULL, ep));
            std::shuffle(order.begin(), order.end(), rng);
            double total = 0.0;
            int n_ok = 0;
            for (size_t start = 0; start < order.size(); start += cfg.batch) {
                std::vector<double> grad(lay.total, 0.0);
                std::vector<double> aux_grad(aux.w.size() + aux.b.size(), 0.0);
                int in_batch = 0;
                for (size_t k = start; k < std::min(order.size(), start + cfg.batch); ++k) {
                    const SyntheticUtterance& u = data.train[order[k]];
                    if (inputs[order[k]].rows() < cfg.model.min_stacked_length()) continue;
                    Tape tape;
                    ForwardOutput fo = forward(params, inputs[order[k]], cfg.model, &tape);
                    (void)fo;
                    Matrix logits = aux.logits(tape.lstm1_h);
                    std::vector<int> labels = collapse_frame_targets(u.frame_targets);
                    LossResult r;
                    try {
                        r = ctc_loss(log_softmax_rows(logits), labels);
                    } catch (const std::invalid_argument&) {
                        ++result.skipped;
                        continue;
                    }
                    total += r.loss;
                    ++n_ok;
                    ++in_batch;
                    // aux head grads + d(h1)
                    Matrix d_h1(tape.lstm1_h.rows(), cfg.model.hidden1);
                    for (int t = 0; t < r.grad.rows(); ++t)
                        for (int v = 0; v < aux.vocab; ++v) {
                            double g = r.grad(t, v);
                            if (g == 0.0) continue;
                            aux_grad[aux.w.size() + v] += g;
                            const double* wr = aux.w.data() + static_cast<size_t>(v) * aux.hidden;
                            double* dwr = aux_grad.data() + static_cast<size_t>(v) * aux.hidden;
                            for (int k2 = 0; k2 < aux.hidden; ++k2) {
                                dwr[k2] += g * tape.lstm1_h(t, k2);
                                d_h1(t, k2) += g * wr[k2];
                            }
                        }
                    std::vector<double> g1 = backward_from_h1(params, tape, d_h1);
                    for (size_t i = 0; i < grad.size(); ++i) grad[i] += g1[i];
                }
                if (in_batch == 0) continue;
                for (double& g : grad) g /= in_batch;
                for (double& g : aux_grad) g /= in_batch;
                main_opt.step(params.flat, grad);
                std::vector<double> aux_flat(aux.w);
                aux_flat.insert(aux_flat.end(), aux.b.begin(), aux.b.end());
                aux_opt.step(aux_flat, aux_grad);
                std::copy(aux_flat.begin(), aux_flat.begin() + aux.w.size(), aux.w.begin());
                std::copy(aux_flat.begin() + aux.w.size(), aux_flat.end(), aux.b.begin());
            }
            json j = ident;
            j["record"] = "pretrain";
            j["epoch"] = ep;
            j["loss"] = n_ok ? total / n_ok : 0.0;
            emit(j);
        }
    }

    AdamW opt(lay.total, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    if (cfg.pretrain_layer1) opt.set_frozen(layer1);  // freeze the pretrained stack

    for (int ep = 0; ep < cfg.epochs; ++ep) {
        std::vector<int> order(data.train.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(mix_seed(cfg.seed ^ 0xEA0C5ULL, ep));
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        int n_ok = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch) {
            std::vector<double> grad(lay.total, 0.0);
            int in_batch = 0;
            for (size_t k = start; k < std::min(order.size(), start + cfg.batch); ++k) {
                int idx = order[k];
                if (inputs[idx].rows() < cfg.model.min_stacked_length()) {
                    ++result.skipped;
                    continue;
                }
                Tape tape;
                ForwardOptions fopts;
                fopts.training = true;
                fopts.dropout = cfg.dropout;
                fopts.dropout_seed = mix_seed(cfg.seed, (static_cast<uint64_t>(ep) << 24) + k);
                ForwardOutput fo = forward(params, inputs[idx], cfg.model, &tape, fopts);
                UttGrad ug;
                try {
                    ug = head_losses(cfg, tape, fo, data.train[idx]);
                } catch (const std::invalid_argument&) {
                    ++result.skipped;
                    continue;
                } catch (const std::runtime_error&) {
                    ++result.skipped;
                    continue;
                }
                std::vector<double> g = backward(params, tape, ug.d_slot, ug.d_intent);
                for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
                total += ug.loss;
                ++n_ok;
                ++in_batch;
            }
            if (in_batch == 0) continue;
            for (double& g : grad) g /= in_batch;
            opt.step(params.flat, grad);
        }
        result.final_loss = n_ok ? total / n_ok : 0.0;
        json j = ident;
        j["record"] = "train";
        j["epoch"] = ep;
        j["loss"] = result.final_loss;
        j["skipped"] = result.skipped;
        emit(j);
    }
    result.params = std::move(params);
    return result;
}

EvalResult evaluate_model(const ExperimentConfig& cfg_in, const ModelParams& params,
                          std::span<const SyntheticUtterance> test, const CmvnStats& cmvn) {
    ExperimentConfig cfg = cfg_in;
    cfg.resolve();
    EvalResult res;
    for (const SyntheticUtterance& u : test) {
        ++res.count;
        Matrix stacked = prepare_input(u.features, cmvn, cfg.model);
        if (stacked.rows() < cfg.model.min_stacked_length()) continue;  // counted as wrong
        ForwardOutput out = forward(params, stacked, cfg.model);
        DecodeResult dec = decode_outputs(cfg.model, out, cfg.theta);
        int iok = sequence_exact(dec.intent_labels, u.intent_labels);
        int sok = sequence_exact(dec.slot_labels, u.slot_labels);
        res.intent_acc += iok;
        res.slot_acc += sok;
        res.joint_acc += iok && sok;
    }
    if (res.count) {
        res.intent_acc /= res.count;
        res.slot_acc /= res.count;
        res.joint_acc /= res.count;
    }
    return res;
}

std::string metrics_line(const ExperimentConfig& cfg, const std::string& split,
                         const EvalResult& eval) {
    json j{{"record", "eval"},
           {"split", split},
           {"loss", to_string(cfg.loss)},
           {"train_labels", cfg.train_labels},
           {"test_labels", cfg.test_labels},
           {"pretrain", cfg.pretrain_layer1},
           {"seed", cfg.seed},
           {"count", eval.count},
           {"intent_acc", eval.intent_acc},
           {"slot_acc", eval.slot_acc},
           {"joint_acc", eval.joint_acc}};
    return j.dump();
}

// ---------------------------------------------------------------------------
// verification suite

namespace {

struct Check {
    std::ostream& log;
    bool all_ok = true;
    void report(const std::string& name, bool ok, const std::string& detail = "") {
        log << "verify " << name << ": " << (ok ? "ok" : "FAIL")
            << (detail.empty() ? "" : " (" + detail + ")") << "\n";
        all_ok = all_ok && ok;
    }
};

Matrix random_logp(std::mt19937_64& rng, int T, int V) {
    std::normal_distribution<double> dist(0.0, 1.5);
    Matrix m(T, V);
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return log_softmax_rows(m);
}

Matrix random_probs(std::mt19937_64& rng, int T, int E) {
    std::uniform_real_distribution<double> dist(0.05, 0.95);
    Matrix m(T, E);
    for (int attempt = 0; attempt < 200; ++attempt) {
        for (size_t i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
        // keep clear of the rectifier kink so finite differences are valid
        bool ok = true;
        for (int t = 0; t < T && ok; ++t)
            for (int e = 0; e < E && ok; ++e) {
                double prev = t > 0 ? m(t - 1, e) : 0.0;
                if (std::fabs(m(t, e) - prev) < 5e-3) ok = false;
            }
        if (ok) break;
    }
    return m;
}

ModelConfig verify_model(HeadMode mode) {
    ModelConfig cfg;
    cfg.feat_dim = 7;
    cfg.stack_width = 4;
    cfg.stack_stride = 2;
    cfg.conv_kernel_t = cfg.conv_kernel_f = 3;
    cfg.conv1_channels = 2;
    cfg.conv2_channels = 3;
    cfg.hidden1 = cfg.hidden2 = cfg.hidden3 = 5;
    cfg.proj2 = cfg.proj3 = 5;
    cfg.time_reduction2 = 2;
    cfg.time_reduction3 = 2;
    cfg.slot_vocab = 3;
    cfg.intent_vocab = 4;
    cfg.head_mode = mode;
    return cfg;
}

}  // namespace

int run_verification(std::ostream& log, bool mutate_ctl_grad) {
    Check chk{log};
    std::mt19937_64 rng(20240817);

    {  // CTC forward vs brute force
        int tested = 0;
        double worst = 0.0;
        for (int it = 0; it < 200; ++it) {
            int T = 1 + static_cast<int>(rng() % 5);
            int V = 2 + static_cast<int>(rng() % 3);
            int U = static_cast<int>(rng() % 3);
            std::vector<int> labels(U);
            for (int& l : labels) l = 1 + static_cast<int>(rng() % (V - 1));
            Matrix logp = random_logp(rng, T, V);
            bool dyn_throws = false, bf_throws = false;
            double loss = 0.0, bf = 0.0;
            try {
                loss = ctc_loss(logp, labels).loss;
            } catch (const std::invalid_argument&) {
                dyn_throws = true;
            }
            try {
                bf = ctc_brute_force(logp, labels);
            } catch (const std::invalid_argument&) {
                bf_throws = true;
            }
            if (dyn_throws != bf_throws) {
                chk.report("ctc-oracle", false, "feasibility disagreement");
                return 2;
            }
            if (dyn_throws) continue;
            ++tested;
            worst = std::max(worst, std::fabs(loss - bf) / std::max(1.0, std::fabs(loss)));
        }
        chk.report("ctc-oracle", tested > 100 && worst < 1e-9,
                   "max rel err " + std::to_string(worst));
    }

    {  // CTC gradient
        double worst = 0.0;
        for (int it = 0; it < 20; ++it) {
            int T = 3 + static_cast<int>(rng() % 3);
            std::vector<int> labels = {1 + static_cast<int>(rng() % 2)};
            if (rng() % 2) labels.push_back(1 + static_cast<int>(rng() % 2));
            worst = std::max(worst, ctc_grad_check(random_logp(rng, T, 3), labels, 1e-5));
        }
        chk.report("ctc-grad", worst < 1e-4, "max rel err " + std::to_string(worst));
    }

    {  // CTL forward vs brute force (includes empty and repeated targets)
        int tested = 0;
        double worst = 0.0;
        for (int it = 0; it < 200; ++it) {
            int T = 1 + static_cast<int>(rng() % 4);
            int A = 2 + static_cast<int>(rng() % 2);
            int U = static_cast<int>(rng() % 3);
            CtlTarget target;
            target.alphabet_size = A;
            for (int u2 = 0; u2 < U; ++u2)
                target.labels.push_back(static_cast<int>(rng() % A));
            Matrix y = random_probs(rng, T, A);
            bool dyn_throws = false, bf_throws = false;
            double loss = 0.0, bf = 0.0;
            try {
                loss = ctl_loss(y, target).loss;
            } catch (const std::runtime_error&) {
                dyn_throws = true;
            }
            try {
                bf = ctl_brute_force(y, target);
            } catch (const std::runtime_error&) {
                bf_throws = true;
            }
            if (dyn_throws != bf_throws) {
                chk.report("ctl-oracle", false, "feasibility disagreement");
                return 2;
            }
            if (dyn_throws) continue;
            ++tested;
            worst = std::max(worst, std::fabs(loss - bf) / std::max(1.0, std::fabs(loss)));
        }
        chk.report("ctl-oracle", tested > 100 && worst < 1e-9,
                   "max rel err " + std::to_string(worst));
    }

    {  // CTL gradient (the mutation flips the analytic sign; must be caught)
        double worst = 0.0;
        const double h = 1e-6;
        for (int it = 0; it < 15; ++it) {
            int T = 2 + static_cast<int>(rng() % 3);
            int A = 2;
            CtlTarget target;
            target.alphabet_size = A;
            target.labels = {static_cast<int>(rng() % A)};
            Matrix y = random_probs(rng, T, A);
            LossResult r;
            try {
                r = ctl_loss(y, target);
            } catch (const std::runtime_error&) {
                continue;
            }
            for (int t = 0; t < T; ++t)
                for (int e = 0; e < A; ++e) {
                    Matrix yp = y, ym = y;
                    yp(t, e) += h;
                    ym(t, e) -= h;
                    double fd = (ctl_loss(yp, target).loss - ctl_loss(ym, target).loss) / (2 * h);
                    double g = r.grad(t, e) * (mutate_ctl_grad ? -1.0 : 1.0);
                    double denom = std::max({std::fabs(fd), std::fabs(g), 1e-8});
                    if (std::fabs(fd) < 1e-7 && std::fabs(g) < 1e-7) continue;
                    worst = std::max(worst, std::fabs(fd - g) / denom);
                }
        }
        chk.report("ctl-grad", worst < 1e-4, "max rel err " + std::to_string(worst));
    }

    {  // streaming prefix consistency
        bool ok = true;
        for (HeadMode mode : {HeadMode::Ctc, HeadMode::Ctl}) {
            ModelConfig cfg = verify_model(mode);
            ModelParams params = init_params(cfg, 31);
            for (int rep = 0; rep < 6 && ok; ++rep) {
                int T = 40 + 9 * rep;
                Matrix raw(T, cfg.feat_dim);
                std::normal_distribution<double> dist(0.0, 1.0);
                for (size_t i = 0; i < raw.size(); ++i) raw.data()[i] = dist(rng);
                DecodeResult whole = stream_decode(cfg, params, {raw}, 0.3);
                for (int chunk : {1, 3, 8}) {
                    std::vector<Matrix> chunks;
                    for (int s = 0; s < T; s += chunk) {
                        int n = std::min(chunk, T - s);
                        Matrix c(n, cfg.feat_dim);
                        for (int t = 0; t < n; ++t)
                            for (int d = 0; d < cfg.feat_dim; ++d) c(t, d) = raw(s + t, d);
                        chunks.push_back(std::move(c));
                    }
                    DecodeResult piece = stream_decode(cfg, params, chunks, 0.3);
                    ok = ok && piece.events == whole.events &&
                         piece.intent_labels == whole.intent_labels &&
                         piece.slot_labels == whole.slot_labels;
                }
            }
        }
        chk.report("prefix-consistency", ok);
    }

    {  // output shapes and strict causality
        ModelConfig cfg = verify_model(HeadMode::Ctc);
        ModelParams params = init_params(cfg, 77);
        Matrix raw(50, cfg.feat_dim);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (size_t i = 0; i < raw.size(); ++i) raw.data()[i] = dist(rng);
        Matrix stacked = stack_frames(raw, cfg.stack_width, cfg.stack_stride);
        ForwardOutput out = forward(params, stacked, cfg);
        bool ok = out.slot_out.rows() == cfg.slot_steps(stacked.rows()) &&
                  out.intent_out.rows() == cfg.intent_steps(stacked.rows()) &&
                  out.slot_out.cols() == cfg.slot_out_dim() &&
                  out.intent_out.cols() == cfg.intent_out_dim() &&
                  out.rate_ratio == cfg.time_reduction3;
        // perturbing the last stacked frame must leave every step whose
        // receptive field ends earlier bitwise unchanged
        Matrix perturbed = stacked;
        for (int d = 0; d < perturbed.cols(); ++d) perturbed(perturbed.rows() - 1, d) += 3.0;
        ForwardOutput out2 = forward(params, perturbed, cfg);
        for (int t = 0; t < out.slot_out.rows(); ++t) {
            if (slot_receptive_end(cfg, t) >= stacked.rows() - 1) continue;
            for (int v = 0; v < out.slot_out.cols(); ++v)
                ok = ok && out.slot_out(t, v) == out2.slot_out(t, v);
        }
        for (int g = 0; g < out.intent_out.rows(); ++g) {
            if (intent_receptive_end(cfg, g) >= stacked.rows() - 1) continue;
            for (int v = 0; v < out.intent_out.cols(); ++v)
                ok = ok && out.intent_out(g, v) == out2.intent_out(g, v);
        }
        chk.report("shapes-causality", ok);
    }

    return chk.all_ok ? 0 : 2;
}

}  // namespace slu
