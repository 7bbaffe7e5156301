#pragma once

#include <string>
#include <vector>

#include "slu/common.hpp"

namespace slu {

// Half-open frame span carrying one (intent, slot) command.
struct Segment {
    int start = 0, end = 0;  // raw frame range [start, end)
    int intent = 0;
    int slot = 0;
    int slot_start = 0, slot_end = 0;  // slot cue sub-span inside the command

    bool operator==(const Segment&) const = default;
};

struct SyntheticUtterance {
    std::string id;
    int speaker = 0;
    Matrix features;               // T x feat_dim, every value f32-exact
    std::vector<int> intent_labels;
    std::vector<int> slot_labels;
    std::vector<Segment> segments;
    // Per raw frame, character-analog pretraining classes: 0 silence,
    // 1 + intent id on the command span, 1 + n_intents + slot id on the
    // slot cue sub-span.
    std::vector<int> frame_targets;
};

struct CorpusSpec {
    int n_intents = 15;
    int n_slots = 8;
    int feat_dim = 16;
    int n_speakers = 12;

    int command_min = 36, command_max = 60;  // frames per command
    int silence_min = 8, silence_max = 16;   // leading / trailing / gap silence
    double noise_sigma = 0.3;
    double speaker_scale = 0.25;  // amplitude of the per-speaker offset

    uint64_t seed = 1;

    void validate() const;
};

// Deterministic +-1 band pattern for a class. Intent cues live on feature
// dims [0, feat_dim/2); slot cues on [feat_dim/2, feat_dim). Returns the
// full-width vector, zero outside the head's half.
std::vector<double> class_template(const CorpusSpec& spec, bool slot_head, int cls);

// Per-speaker additive offset, deterministic in (spec.seed, speaker).
std::vector<double> speaker_offset(const CorpusSpec& spec, int speaker);

// One single-command utterance: silence, command span with the intent cue
// active throughout and the slot cue on its middle third, silence. All
// randomness (lengths, noise) derives from `seed` alone.
SyntheticUtterance make_utterance(const CorpusSpec& spec, int speaker, int intent, int slot,
                                  uint64_t seed);

// Joins two utterances of the same speaker with a silence gap; label
// sequences concatenate and segments re-index. Throws on speaker mismatch.
SyntheticUtterance concat_utterances(const CorpusSpec& spec, const SyntheticUtterance& a,
                                     const SyntheticUtterance& b, uint64_t seed);

// `size` utterances with `labels_per_utt` (1 or 2) commands each. Item i is a
// pure function of (spec, i): classes and speaker are drawn from
// mix_seed(spec.seed, i), so corpora are reproducible and order independent.
std::vector<SyntheticUtterance> generate_corpus(const CorpusSpec& spec, int size,
                                                int labels_per_utt);

struct CorpusSplit {
    std::vector<int> train, test;  // indices into the corpus
};

// Deterministic speaker-disjoint split: speakers are hashed into the test
// pool until it holds at least `test_fraction` of the utterances.
CorpusSplit speaker_disjoint_split(const std::vector<SyntheticUtterance>& corpus,
                                   double test_fraction);

// Persists features as FEAT files under dir/ plus a manifest.json describing
// the spec and every utterance. read_corpus() round-trips bit exactly.
void write_corpus(const std::string& dir, const CorpusSpec& spec,
                  const std::vector<SyntheticUtterance>& corpus);
std::pair<CorpusSpec, std::vector<SyntheticUtterance>> read_corpus(const std::string& dir);

}  // namespace slu
