// slu: command-line front end for the streaming SLU harness.
//
// Subcommands: gen, train, eval, stream, verify. Exit codes: 0 success,
// 1 usage/runtime error, 2 verification failure.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "slu/decoder.hpp"
#include "slu/features.hpp"
#include "slu/harness.hpp"

namespace {

slu::ExperimentConfig load_or_default(const std::string& path) {
    if (path.empty()) return slu::ExperimentConfig{};
    return slu::load_experiment(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streaming spoken-language-understanding harness"};
    app.require_subcommand(1);
    bool deterministic = false;
    app.add_flag("--deterministic", deterministic,
                 "force fully reproducible runs (always on; flag kept for scripts)");

    std::string config_path, out_path, ckpt_path, metrics_path, input_path, session = "cli";
    uint64_t seed = 0;
    bool seed_set = false;
    int gen_size = 200, gen_labels = 1, chunk = 16;
    double theta = -1.0;
    bool mutate = false;

    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus directory");
    gen->add_option("--config", config_path, "experiment JSON (corpus section is used)");
    gen->add_option("--out", out_path, "output corpus directory")->required();
    gen->add_option("--size", gen_size, "number of utterances");
    gen->add_option("--labels", gen_labels, "commands per utterance (1 or 2)");
    gen->add_option("--seed", seed, "override corpus seed")->each([&](const std::string&) {
        seed_set = true;
    });

    auto* train = app.add_subcommand("train", "train a model from an experiment config");
    train->add_option("--config", config_path, "experiment JSON")->required();
    train->add_option("--out", ckpt_path, "checkpoint output path")->required();
    train->add_option("--metrics", metrics_path, "append per-epoch JSONL records here");
    train->add_option("--seed", seed, "override experiment seed")->each([&](const std::string&) {
        seed_set = true;
    });

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    eval->add_option("--config", config_path, "experiment JSON")->required();
    eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    eval->add_option("--metrics", metrics_path, "append the eval JSONL record here");

    auto* stream = app.add_subcommand("stream", "stream a FEAT file through a checkpoint");
    stream->add_option("--config", config_path, "experiment JSON")->required();
    stream->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    stream->add_option("--input", input_path, "FEAT feature file")->required();
    stream->add_option("--chunk", chunk, "frames per push")->check(CLI::PositiveNumber);
    stream->add_option("--theta", theta, "ctl decode threshold override");
    stream->add_option("--session", session, "session id in the event log");

    auto* verify = app.add_subcommand("verify", "run the oracle/gradient/streaming self-checks");
    verify->add_flag("--mutate", mutate,
                     "flip the ctl gradient sign to prove the checks catch it");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            slu::ExperimentConfig cfg = load_or_default(config_path);
            if (seed_set) cfg.corpus.seed = seed;
            auto corpus = slu::generate_corpus(cfg.corpus, gen_size, gen_labels);
            slu::write_corpus(out_path, cfg.corpus, corpus);
            std::cout << "wrote " << corpus.size() << " utterances to " << out_path << "\n";
        } else if (*train) {
            slu::ExperimentConfig cfg = slu::load_experiment(config_path);
            if (seed_set) cfg.seed = seed;
            slu::DataBundle data = slu::make_datasets(cfg);
            std::ofstream metrics;
            if (!metrics_path.empty()) {
                metrics.open(metrics_path, std::ios::app);
                if (!metrics) throw std::runtime_error("cannot open metrics file");
            }
            slu::TrainResult res =
                slu::train_model(cfg, data, metrics.is_open() ? &metrics : nullptr);
            slu::save_checkpoint(ckpt_path, cfg.model, res.params);
            slu::write_cmvn_file(ckpt_path + ".cmvn", data.cmvn);
            slu::EvalResult ev = slu::evaluate_model(cfg, res.params, data.test, data.cmvn);
            std::string line = slu::metrics_line(cfg, "test", ev);
            if (metrics.is_open()) metrics << line << "\n";
            std::cout << line << "\n";
        } else if (*eval) {
            slu::ExperimentConfig cfg = slu::load_experiment(config_path);
            cfg.resolve();
            slu::ModelParams params = slu::load_checkpoint(ckpt_path, cfg.model);
            slu::DataBundle data = slu::make_datasets(cfg);
            slu::CmvnStats cmvn = data.cmvn;
            std::ifstream probe(ckpt_path + ".cmvn");
            if (probe.good()) cmvn = slu::read_cmvn_file(ckpt_path + ".cmvn");
            slu::EvalResult ev = slu::evaluate_model(cfg, params, data.test, cmvn);
            std::string line = slu::metrics_line(cfg, "test", ev);
            if (!metrics_path.empty()) {
                std::ofstream metrics(metrics_path, std::ios::app);
                metrics << line << "\n";
            }
            std::cout << line << "\n";
        } else if (*stream) {
            slu::ExperimentConfig cfg = slu::load_experiment(config_path);
            cfg.resolve();
            slu::ModelParams params = slu::load_checkpoint(ckpt_path, cfg.model);
            slu::CmvnStats cmvn = slu::read_cmvn_file(ckpt_path + ".cmvn");
            slu::Matrix feats = slu::read_feature_file(input_path);
            slu::Matrix norm = slu::apply_cmvn(feats, cmvn);
            double th = theta > 0.0 ? theta : cfg.theta;
            slu::StreamDecoder dec(cfg.model, params, th);
            for (int start = 0; start < norm.rows(); start += chunk) {
                int n = std::min(chunk, norm.rows() - start);
                slu::Matrix c(n, norm.cols());
                for (int t = 0; t < n; ++t)
                    for (int d = 0; d < norm.cols(); ++d) c(t, d) = norm(start + t, d);
                for (const auto& ev : dec.push(c))
                    std::cout << slu::format_event(session, ev) << "\n";
            }
            for (const auto& ev : dec.finish())
                std::cout << slu::format_event(session, ev) << "\n";
        } else if (*verify) {
            return slu::run_verification(std::cout, mutate);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
