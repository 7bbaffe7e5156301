#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "slu/harness.hpp"

using namespace slu;

namespace {

// small corpus + model so a full train run takes well under a second
ExperimentConfig smoke_config() {
    ExperimentConfig cfg;
    cfg.corpus.n_intents = 4;
    cfg.corpus.n_slots = 3;
    cfg.corpus.feat_dim = 8;
    cfg.corpus.n_speakers = 6;
    cfg.corpus.command_min = 24;
    cfg.corpus.command_max = 36;
    cfg.corpus.silence_min = 4;
    cfg.corpus.silence_max = 8;
    cfg.corpus.seed = 5;
    cfg.model.conv_kernel_t = cfg.model.conv_kernel_f = 3;  // feat_dim 8 fits
    cfg.model.conv1_channels = 4;
    cfg.model.conv2_channels = 8;
    cfg.model.hidden1 = cfg.model.hidden2 = cfg.model.hidden3 = 12;
    cfg.model.proj2 = cfg.model.proj3 = 12;
    cfg.train_size = 16;
    cfg.test_size = 8;
    cfg.epochs = 2;
    cfg.batch = 4;
    cfg.resolve();
    return cfg;
}

}  // namespace

TEST_CASE("loss kind string round trip") {
    for (LossKind k : {LossKind::Ctc, LossKind::Ctl, LossKind::CtcCe, LossKind::CtlCe,
                       LossKind::CtlMil})
        CHECK(loss_kind_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(loss_kind_from_string("mse"), std::invalid_argument);
    CHECK(uses_ctl(LossKind::CtlMil));
    CHECK_FALSE(uses_ctl(LossKind::CtcCe));
}

TEST_CASE("resolve syncs model with corpus and loss") {
    ExperimentConfig cfg = smoke_config();
    cfg.loss = LossKind::Ctl;
    cfg.resolve();
    CHECK(cfg.model.head_mode == HeadMode::Ctl);
    CHECK(cfg.model.slot_vocab == cfg.corpus.n_slots);
    CHECK(cfg.model.intent_vocab == cfg.corpus.n_intents);
    cfg.loss = LossKind::CtcCe;
    cfg.resolve();
    CHECK(cfg.model.head_mode == HeadMode::Ctc);
}

TEST_CASE("experiment config round-trips through JSON") {
    ExperimentConfig cfg = smoke_config();
    cfg.loss = LossKind::CtlMil;
    cfg.pretrain_layer1 = true;
    cfg.lr = 3e-3;
    cfg.seed = 42;
    cfg.model.time_reduction3 = 3;
    cfg.resolve();
    auto path = (std::filesystem::temp_directory_path() / "slu_exp.json").string();
    save_experiment(path, cfg);
    ExperimentConfig back = load_experiment(path);
    CHECK(back.loss == LossKind::CtlMil);
    CHECK(back.pretrain_layer1);
    CHECK(back.lr == cfg.lr);
    CHECK(back.seed == cfg.seed);
    CHECK(back.corpus.n_intents == cfg.corpus.n_intents);
    CHECK(back.model.time_reduction3 == 3);
    CHECK(back.model.head_mode == HeadMode::Ctl);
    std::filesystem::remove(path);
}

TEST_CASE("AdamW minimizes a quadratic and honors the frozen mask") {
    std::vector<double> p = {5.0, -3.0, 2.0};
    AdamW opt(3, 0.05, 0.9, 0.999, 1e-8, 0.0);
    opt.set_frozen({0, 0, 1});
    for (int it = 0; it < 400; ++it) {
        std::vector<double> g = {2 * p[0], 2 * p[1], 2 * p[2]};
        opt.step(p, g);
    }
    CHECK(std::fabs(p[0]) < 1e-3);
    CHECK(std::fabs(p[1]) < 1e-3);
    CHECK(p[2] == 2.0);  // frozen: no update, no decay

    std::vector<double> q = {1.0};
    AdamW decay(1, 0.01, 0.9, 0.999, 1e-8, 0.5);
    std::vector<double> zero = {0.0};
    for (int it = 0; it < 50; ++it) decay.step(q, zero);
    CHECK(q[0] < 1.0);  // decoupled decay acts even with zero gradient
    CHECK(q[0] > 0.0);
}

TEST_CASE("collapse_frame_targets merges runs and drops silence") {
    CHECK(collapse_frame_targets({0, 0, 2, 2, 2, 0, 0, 3, 3}) == std::vector<int>{2, 3});
    CHECK(collapse_frame_targets({1, 1, 1}) == std::vector<int>{1});
    CHECK(collapse_frame_targets({0, 0}) == std::vector<int>{});
    CHECK(collapse_frame_targets({2, 0, 2}) == std::vector<int>{2, 2});
    CHECK(collapse_frame_targets({}) == std::vector<int>{});
}

TEST_CASE("make_datasets: sizes, label counts, speaker disjointness, determinism") {
    ExperimentConfig cfg = smoke_config();
    cfg.train_labels = 2;
    DataBundle data = make_datasets(cfg);
    CHECK(static_cast<int>(data.train.size()) == cfg.train_size);
    CHECK(static_cast<int>(data.test.size()) == cfg.test_size);
    std::set<int> train_spk, test_spk;
    for (const auto& u : data.train) {
        CHECK(u.intent_labels.size() == 2);
        train_spk.insert(u.speaker);
    }
    for (const auto& u : data.test) {
        CHECK(u.intent_labels.size() == 1);
        test_spk.insert(u.speaker);
    }
    for (int s : test_spk) CHECK(train_spk.count(s) == 0);
    CHECK(data.cmvn.dim() == cfg.corpus.feat_dim);
    CHECK(data.cmvn.count > 0);

    DataBundle again = make_datasets(cfg);
    for (size_t i = 0; i < data.train.size(); ++i)
        CHECK(again.train[i].features == data.train[i].features);
}

TEST_CASE("head_losses produces matching gradient shapes for every strategy") {
    for (LossKind loss : {LossKind::Ctc, LossKind::CtcCe, LossKind::Ctl, LossKind::CtlCe,
                          LossKind::CtlMil}) {
        CAPTURE(to_string(loss));
        ExperimentConfig cfg = smoke_config();
        cfg.loss = loss;
        cfg.train_labels = 2;  // two-label sequences exercise the lattice
        cfg.resolve();
        DataBundle data = make_datasets(cfg);
        ModelParams params = init_params(cfg.model, 9);
        int done = 0;
        for (const auto& u : data.train) {
            Matrix stacked = prepare_input(u.features, data.cmvn, cfg.model);
            Tape tape;
            ForwardOutput out = forward(params, stacked, cfg.model, &tape);
            UttGrad ug;
            try {
                ug = head_losses(cfg, tape, out, u);
            } catch (const std::runtime_error&) {
                continue;  // unreachable ctl target at random init
            }
            CHECK(std::isfinite(ug.loss));
            CHECK(ug.d_slot.rows() == tape.slot_logits.rows());
            CHECK(ug.d_slot.cols() == tape.slot_logits.cols());
            CHECK(ug.d_intent.rows() == tape.intent_logits.rows());
            CHECK(ug.d_intent.cols() == tape.intent_logits.cols());
            // gradients must be usable by backward()
            auto g = backward(params, tape, ug.d_slot, ug.d_intent);
            double norm = 0.0;
            for (double v : g) norm += v * v;
            CHECK(std::isfinite(norm));
            CHECK(norm > 0.0);
            if (++done == 3) break;
        }
        CHECK(done >= 1);
    }
}

TEST_CASE("ce variant changes the loss value of the plain variant") {
    ExperimentConfig cfg = smoke_config();
    cfg.resolve();
    DataBundle data = make_datasets(cfg);
    ModelParams params = init_params(cfg.model, 10);
    const auto& u = data.train[0];
    Matrix stacked = prepare_input(u.features, data.cmvn, cfg.model);
    Tape tape;
    ForwardOutput out = forward(params, stacked, cfg.model, &tape);
    cfg.loss = LossKind::Ctc;
    double plain = head_losses(cfg, tape, out, u).loss;
    cfg.loss = LossKind::CtcCe;
    double mixed = head_losses(cfg, tape, out, u).loss;
    CHECK(plain != mixed);
}

TEST_CASE("train_model runs, reduces loss, and writes parseable metrics") {
    ExperimentConfig cfg = smoke_config();
    cfg.epochs = 6;
    std::ostringstream metrics;
    TrainResult first = train_model(cfg, make_datasets(cfg), &metrics);
    CHECK(first.params.flat.size() == ParamLayout(cfg.model).total);
    CHECK(std::isfinite(first.final_loss));

    int lines = 0;
    double first_loss = -1, last_loss = -1;
    std::istringstream in(metrics.str());
    std::string line;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);  // throws on malformed output
        CHECK(j.at("loss").is_number());
        CHECK(j.at("record") == "train");
        CHECK(j.at("train_labels") == cfg.train_labels);
        if (first_loss < 0) first_loss = j.at("loss");
        last_loss = j.at("loss");
        ++lines;
    }
    CHECK(lines == cfg.epochs);
    CHECK(last_loss < first_loss);
}

TEST_CASE("layer-1 pretraining freezes the conv/LSTM1 block afterwards") {
    ExperimentConfig cfg = smoke_config();
    cfg.pretrain_layer1 = true;
    cfg.pretrain_epochs = 1;
    cfg.epochs = 1;
    DataBundle data = make_datasets(cfg);

    // capture the pretrained layer-1 block by running with zero main epochs?
    // train_model always runs the main loop, so instead verify the block is
    // identical across two runs that differ only in main-loop length.
    TrainResult short_run = train_model(cfg, data);
    cfg.epochs = 3;
    TrainResult long_run = train_model(cfg, data);
    ParamLayout lay(cfg.model);
    for (size_t i = 0; i < lay.proj2_w; ++i)
        CHECK(short_run.params.flat[i] == long_run.params.flat[i]);
    // upper layers did move
    bool differs = false;
    for (size_t i = lay.proj2_w; i < lay.total; ++i)
        differs = differs || short_run.params.flat[i] != long_run.params.flat[i];
    CHECK(differs);
}

TEST_CASE("evaluate_model and metrics_line") {
    ExperimentConfig cfg = smoke_config();
    DataBundle data = make_datasets(cfg);
    ModelParams params = init_params(cfg.model, 2);
    EvalResult ev = evaluate_model(cfg, params, data.test, data.cmvn);
    CHECK(ev.count == cfg.test_size);
    CHECK(ev.intent_acc >= 0.0);
    CHECK(ev.intent_acc <= 1.0);
    CHECK(ev.joint_acc <= std::min(ev.intent_acc, ev.slot_acc));
    auto j = nlohmann::json::parse(metrics_line(cfg, "test", ev));
    CHECK(j.at("split") == "test");
    CHECK(j.at("count") == cfg.test_size);
    CHECK(j.at("loss") == to_string(cfg.loss));
}

TEST_CASE("verification suite passes and catches a mutated ctl gradient") {
    std::ostringstream log;
    CHECK(run_verification(log) == 0);
    CHECK(log.str().find("FAIL") == std::string::npos);
    CHECK(log.str().find("ctc-oracle: ok") != std::string::npos);
    CHECK(log.str().find("prefix-consistency: ok") != std::string::npos);

    std::ostringstream bad;
    CHECK(run_verification(bad, /*mutate_ctl_grad=*/true) == 2);
    CHECK(bad.str().find("ctl-grad: FAIL") != std::string::npos);
}
