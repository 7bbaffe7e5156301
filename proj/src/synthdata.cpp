#include "slu/synthdata.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "json.hpp"
#include "slu/features.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace slu {

void CorpusSpec::validate() const {
    if (n_intents < 1 || n_slots < 1) throw std::invalid_argument("CorpusSpec: empty class set");
    if (feat_dim < 2 || feat_dim % 2 != 0)
        throw std::invalid_argument("CorpusSpec: feat_dim must be even (intent/slot halves)");
    int half = feat_dim / 2;
    // every class needs a distinct sign pattern on its half
    if (half < 30 && (n_intents >= (1 << half) || n_slots >= (1 << half)))
        throw std::invalid_argument("CorpusSpec: feat_dim too small for the class count");
    if (command_min < 3 || command_max < command_min || silence_min < 1 ||
        silence_max < silence_min)
        throw std::invalid_argument("CorpusSpec: bad span ranges");
    if (noise_sigma < 0.0 || n_speakers < 1)
        throw std::invalid_argument("CorpusSpec: bad noise/speaker settings");
}

std::vector<double> class_template(const CorpusSpec& spec, bool slot_head, int cls) {
    spec.validate();
    int n = slot_head ? spec.n_slots : spec.n_intents;
    if (cls < 0 || cls >= n) throw std::out_of_range("class_template: class id");
    int half = spec.feat_dim / 2;
    std::vector<double> v(spec.feat_dim, 0.0);
    int base = slot_head ? half : 0;
    // sign pattern = binary code of (cls + 1); zero never collides with silence
    for (int j = 0; j < half; ++j)
        v[base + j] = (static_cast<unsigned>(cls + 1) >> (j % 31)) & 1u ? 1.0 : -1.0;
    return v;
}

std::vector<double> speaker_offset(const CorpusSpec& spec, int speaker) {
    std::mt19937_64 rng(mix_seed(spec.seed ^ 0xa5a5a5a5a5a5a5a5ULL, speaker));
    std::uniform_real_distribution<double> dist(-spec.speaker_scale, spec.speaker_scale);
    std::vector<double> off(spec.feat_dim);
    for (double& o : off) o = dist(rng);
    return off;
}

namespace {

// every stored feature must survive the f32 file format bit exactly
double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void fill_frames(Matrix& x, int t0, int t1, const std::vector<double>& base, double sigma,
                 std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int t = t0; t < t1; ++t)
        for (int d = 0; d < x.cols(); ++d)
            x(t, d) = f32(base[d] + (sigma > 0.0 ? sigma * noise(rng) : 0.0));
}

std::vector<double> add(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

}  // namespace

SyntheticUtterance make_utterance(const CorpusSpec& spec, int speaker, int intent, int slot,
                                  uint64_t seed) {
    spec.validate();
    if (speaker < 0 || speaker >= spec.n_speakers)
        throw std::out_of_range("make_utterance: speaker id");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> sil(spec.silence_min, spec.silence_max);
    std::uniform_int_distribution<int> cmd(spec.command_min, spec.command_max);
    int lead = sil(rng), cmd_len = cmd(rng), trail = sil(rng);
    int T = lead + cmd_len + trail;

    SyntheticUtterance u;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "s%02d-i%02d-l%02d-%016llx", speaker, intent, slot,
                  static_cast<unsigned long long>(seed));
    u.id = buf;
    u.speaker = speaker;
    u.intent_labels = {intent};
    u.slot_labels = {slot};

    Segment seg;
    seg.start = lead;
    seg.end = lead + cmd_len;
    seg.intent = intent;
    seg.slot = slot;
    seg.slot_start = lead + cmd_len / 3;      // slot cue on the middle third
    seg.slot_end = lead + 2 * cmd_len / 3;
    u.segments = {seg};

    std::vector<double> spk = speaker_offset(spec, speaker);
    std::vector<double> intent_cue = add(spk, class_template(spec, false, intent));
    std::vector<double> both = add(intent_cue, class_template(spec, true, slot));

    u.features = Matrix(T, spec.feat_dim);
    fill_frames(u.features, 0, seg.start, spk, spec.noise_sigma, rng);
    fill_frames(u.features, seg.start, seg.slot_start, intent_cue, spec.noise_sigma, rng);
    fill_frames(u.features, seg.slot_start, seg.slot_end, both, spec.noise_sigma, rng);
    fill_frames(u.features, seg.slot_end, seg.end, intent_cue, spec.noise_sigma, rng);
    fill_frames(u.features, seg.end, T, spk, spec.noise_sigma, rng);

    // pretraining targets, character-analog: the command span reads as
    // "intent phones, slot phones, intent phones" around the slot cue
    u.frame_targets.assign(T, 0);
    for (int t = seg.start; t < seg.end; ++t) u.frame_targets[t] = 1 + intent;
    for (int t = seg.slot_start; t < seg.slot_end; ++t)
        u.frame_targets[t] = 1 + spec.n_intents + slot;
    return u;
}

SyntheticUtterance concat_utterances(const CorpusSpec& spec, const SyntheticUtterance& a,
                                     const SyntheticUtterance& b, uint64_t seed) {
    spec.validate();
    if (a.speaker != b.speaker)
        throw std::invalid_argument("concat_utterances: speaker mismatch");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> sil(spec.silence_min, spec.silence_max);
    int gap = sil(rng);
    int Ta = a.features.rows(), Tb = b.features.rows();

    SyntheticUtterance u;
    u.id = a.id + "+" + b.id;
    u.speaker = a.speaker;
    u.intent_labels = a.intent_labels;
    u.intent_labels.insert(u.intent_labels.end(), b.intent_labels.begin(), b.intent_labels.end());
    u.slot_labels = a.slot_labels;
    u.slot_labels.insert(u.slot_labels.end(), b.slot_labels.begin(), b.slot_labels.end());

    u.features = Matrix(Ta + gap + Tb, spec.feat_dim);
    for (int t = 0; t < Ta; ++t)
        std::copy(a.features.row(t), a.features.row(t) + spec.feat_dim, u.features.row(t));
    fill_frames(u.features, Ta, Ta + gap, speaker_offset(spec, a.speaker), spec.noise_sigma, rng);
    for (int t = 0; t < Tb; ++t)
        std::copy(b.features.row(t), b.features.row(t) + spec.feat_dim,
                  u.features.row(Ta + gap + t));

    u.frame_targets = a.frame_targets;
    u.frame_targets.resize(Ta + gap, 0);
    u.frame_targets.insert(u.frame_targets.end(), b.frame_targets.begin(), b.frame_targets.end());

    u.segments = a.segments;
    for (Segment seg : b.segments) {
        int off = Ta + gap;
        seg.start += off;
        seg.end += off;
        seg.slot_start += off;
        seg.slot_end += off;
        u.segments.push_back(seg);
    }
    return u;
}

std::vector<SyntheticUtterance> generate_corpus(const CorpusSpec& spec, int size,
                                                int labels_per_utt) {
    spec.validate();
    if (labels_per_utt != 1 && labels_per_utt != 2)
        throw std::invalid_argument("generate_corpus: labels_per_utt must be 1 or 2");
    std::vector<SyntheticUtterance> corpus;
    corpus.reserve(size);
    for (int i = 0; i < size; ++i) {
        uint64_t s = mix_seed(spec.seed, static_cast<uint64_t>(i));
        std::mt19937_64 rng(s);
        std::uniform_int_distribution<int> spk(0, spec.n_speakers - 1);
        std::uniform_int_distribution<int> in(0, spec.n_intents - 1);
        std::uniform_int_distribution<int> sl(0, spec.n_slots - 1);
        int speaker = spk(rng);
        SyntheticUtterance u =
            make_utterance(spec, speaker, in(rng), sl(rng), mix_seed(s, 1));
        if (labels_per_utt == 2) {
            SyntheticUtterance v =
                make_utterance(spec, speaker, in(rng), sl(rng), mix_seed(s, 2));
            u = concat_utterances(spec, u, v, mix_seed(s, 3));
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "utt-%05d", i);
        u.id = buf;
        corpus.push_back(std::move(u));
    }
    return corpus;
}

CorpusSplit speaker_disjoint_split(const std::vector<SyntheticUtterance>& corpus,
                                   double test_fraction) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw std::invalid_argument("speaker_disjoint_split: fraction must be in (0,1)");
    std::map<int, int> per_speaker;  // speaker -> utterance count
    for (const auto& u : corpus) ++per_speaker[u.speaker];
    if (per_speaker.size() < 2)
        throw std::invalid_argument("speaker_disjoint_split: need at least two speakers");

    // stable speaker order independent of speaker ids: hash, then id tiebreak
    std::vector<std::pair<uint64_t, int>> order;
    for (const auto& [spk, n] : per_speaker)
        order.push_back({mix_seed(0x5b1177e8d1ceULL, static_cast<uint64_t>(spk)), spk});
    std::sort(order.begin(), order.end());

    size_t want = static_cast<size_t>(test_fraction * corpus.size());
    size_t have = 0;
    std::vector<int> test_speakers;
    for (size_t k = 0; k < order.size() - 1 && have < std::max<size_t>(want, 1); ++k) {
        test_speakers.push_back(order[k].second);
        have += per_speaker[order[k].second];
    }

    CorpusSplit split;
    for (size_t i = 0; i < corpus.size(); ++i) {
        bool test = std::find(test_speakers.begin(), test_speakers.end(), corpus[i].speaker) !=
                    test_speakers.end();
        (test ? split.test : split.train).push_back(static_cast<int>(i));
    }
    return split;
}

namespace {

json spec_to_json(const CorpusSpec& s) {
    return json{{"n_intents", s.n_intents},       {"n_slots", s.n_slots},
                {"feat_dim", s.feat_dim},         {"n_speakers", s.n_speakers},
                {"command_min", s.command_min},   {"command_max", s.command_max},
                {"silence_min", s.silence_min},   {"silence_max", s.silence_max},
                {"noise_sigma", s.noise_sigma},   {"speaker_scale", s.speaker_scale},
                {"seed", s.seed}};
}

CorpusSpec spec_from_json(const json& j) {
    CorpusSpec s;
    s.n_intents = j.at("n_intents");
    s.n_slots = j.at("n_slots");
    s.feat_dim = j.at("feat_dim");
    s.n_speakers = j.at("n_speakers");
    s.command_min = j.at("command_min");
    s.command_max = j.at("command_max");
    s.silence_min = j.at("silence_min");
    s.silence_max = j.at("silence_max");
    s.noise_sigma = j.at("noise_sigma");
    s.speaker_scale = j.at("speaker_scale");
    s.seed = j.at("seed");
    return s;
}

}  // namespace

void write_corpus(const std::string& dir, const CorpusSpec& spec,
                  const std::vector<SyntheticUtterance>& corpus) {
    fs::create_directories(fs::path(dir) / "feats");
    json manifest;
    manifest["spec"] = spec_to_json(spec);
    manifest["utterances"] = json::array();
    for (const auto& u : corpus) {
        std::string feat_rel = "feats/" + u.id + ".feat";
        write_feature_file((fs::path(dir) / feat_rel).string(), u.features);
        json segs = json::array();
        for (const auto& s : u.segments)
            segs.push_back({{"start", s.start},
                            {"end", s.end},
                            {"intent", s.intent},
                            {"slot", s.slot},
                            {"slot_start", s.slot_start},
                            {"slot_end", s.slot_end}});
        manifest["utterances"].push_back({{"id", u.id},
                                          {"speaker", u.speaker},
                                          {"features", feat_rel},
                                          {"intent_labels", u.intent_labels},
                                          {"slot_labels", u.slot_labels},
                                          {"frame_targets", u.frame_targets},
                                          {"segments", segs}});
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("write_corpus: cannot write manifest in " + dir);
    out << manifest.dump(1) << "\n";
}

std::pair<CorpusSpec, std::vector<SyntheticUtterance>> read_corpus(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("read_corpus: no manifest.json in " + dir);
    json manifest = json::parse(in);
    CorpusSpec spec = spec_from_json(manifest.at("spec"));
    std::vector<SyntheticUtterance> corpus;
    for (const json& j : manifest.at("utterances")) {
        SyntheticUtterance u;
        u.id = j.at("id");
        u.speaker = j.at("speaker");
        u.features = read_feature_file((fs::path(dir) / j.at("features").get<std::string>()).string());
        u.intent_labels = j.at("intent_labels").get<std::vector<int>>();
        u.slot_labels = j.at("slot_labels").get<std::vector<int>>();
        u.frame_targets = j.at("frame_targets").get<std::vector<int>>();
        for (const json& sj : j.at("segments")) {
            Segment s;
            s.start = sj.at("start");
            s.end = sj.at("end");
            s.intent = sj.at("intent");
            s.slot = sj.at("slot");
            s.slot_start = sj.at("slot_start");
            s.slot_end = sj.at("slot_end");
            u.segments.push_back(s);
        }
        corpus.push_back(std::move(u));
    }
    return {spec, corpus};
}

}  // namespace slu
