// Google Speech Commands v2 ingestion: subtask vocabularies, deterministic
// manifest construction from the dataset's shipped split lists, silence
// sampling from the noise bank, and shuffled batch plans with balanced
// unknown/silence composition.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "lambdakws/audio.hpp"
#include "lambdakws/augment.hpp"
#include "lambdakws/error.hpp"
#include "lambdakws/rng.hpp"

namespace lambdakws {

inline constexpr const char* kUnknownLabel = "_unknown_";
inline constexpr const char* kSilenceLabel = "_silence_";
inline constexpr const char* kNoiseFolder = "_background_noise_";

inline const std::vector<std::string>& core10_keywords() {
    static const std::vector<std::string> kws = {"yes", "no",  "up",   "down", "left",
                                                 "right", "on", "off", "stop", "go"};
    return kws;
}

inline const std::vector<std::string>& digit_keywords() {
    static const std::vector<std::string> kws = {"zero", "one", "two",   "three", "four",
                                                 "five", "six", "seven", "eight", "nine"};
    return kws;
}

enum class Split { kTrain, kValidation, kTest };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kValidation: return "validation";
        case Split::kTest: return "test";
    }
    return "?";
}

// Output classes per subtask: 10 keywords + unknown + silence (12 classes),
// 20 keywords + unknown (21 classes), or every dataset keyword (35 classes,
// no auxiliary labels).
struct SubtaskVocabulary {
    int subtask = 10;
    std::vector<std::string> core;     // in-vocabulary keywords
    std::vector<std::string> classes;  // model output classes, fixed order
    bool has_unknown = false;
    bool has_silence = false;

    std::int64_t num_classes() const { return static_cast<std::int64_t>(classes.size()); }

    std::int64_t class_index(const std::string& label) const {
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i] == label) return static_cast<std::int64_t>(i);
        }
        throw ContractError("vocabulary: label '" + label + "' is not a class");
    }

    bool in_core(const std::string& keyword) const {
        return std::find(core.begin(), core.end(), keyword) != core.end();
    }
};

// `discovered` lists the keyword folders actually on disk; required for
// subtask 35, ignored otherwise.
inline SubtaskVocabulary subtask_vocabulary(int subtask,
                                            std::vector<std::string> discovered = {}) {
    SubtaskVocabulary vocab;
    vocab.subtask = subtask;
    if (subtask == 10) {
        vocab.core = core10_keywords();
        vocab.classes = vocab.core;
        vocab.classes.push_back(kUnknownLabel);
        vocab.classes.push_back(kSilenceLabel);
        vocab.has_unknown = true;
        vocab.has_silence = true;
    } else if (subtask == 20) {
        vocab.core = core10_keywords();
        for (const auto& d : digit_keywords()) vocab.core.push_back(d);
        vocab.classes = vocab.core;
        vocab.classes.push_back(kUnknownLabel);
        vocab.has_unknown = true;
    } else if (subtask == 35) {
        if (discovered.empty()) {
            throw ConfigError("vocabulary: subtask 35 needs the discovered keyword list");
        }
        std::sort(discovered.begin(), discovered.end());
        vocab.core = discovered;
        vocab.classes = vocab.core;
    } else {
        throw ConfigError("vocabulary: subtask must be 10, 20 or 35, got " +
                          std::to_string(subtask));
    }
    return vocab;
}

struct ManifestEntry {
    std::string path;          // relative to the dataset root, e.g. "yes/abc_nohash_0.wav"
    std::string keyword;       // folder name
    std::string label;         // class label after vocabulary mapping
    std::string speaker;       // filename prefix before _nohash_
    Split split = Split::kTrain;
};

struct DatasetManifest {
    std::string root;
    SubtaskVocabulary vocabulary;
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> split_entries(Split split) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries) {
            if (e.split == split) out.push_back(&e);
        }
        return out;
    }
};

namespace detail {

inline std::set<std::string> read_split_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("manifest: missing split list " + path.string());
    std::set<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n' || line.back() == ' ')) {
            line.pop_back();
        }
        if (!line.empty()) lines.insert(line);
    }
    return lines;
}

inline std::string speaker_of(const std::string& filename) {
    const auto pos = filename.find("_nohash_");
    if (pos != std::string::npos) return filename.substr(0, pos);
    const auto dot = filename.rfind('.');
    return dot == std::string::npos ? filename : filename.substr(0, dot);
}

}  // namespace detail

// Deterministic manifest over an extracted dataset directory. Split
// assignment is taken from the dataset's validation/testing list files;
// everything else is train. Out-of-vocabulary keywords are relabeled
// "_unknown_" for subtasks 10 and 20.
inline DatasetManifest build_manifest(const std::string& root, int subtask) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) {
        throw IoError("manifest: dataset root is not a directory: " + root);
    }
    const auto validation = detail::read_split_list(fs::path(root) / "validation_list.txt");
    const auto testing = detail::read_split_list(fs::path(root) / "testing_list.txt");

    std::vector<std::string> keywords;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        const auto name = entry.path().filename().string();
        if (name == kNoiseFolder || name.empty() || name[0] == '.') continue;
        keywords.push_back(name);
    }
    std::sort(keywords.begin(), keywords.end());
    if (keywords.empty()) {
        throw IoError("manifest: no keyword folders under " + root);
    }

    DatasetManifest manifest;
    manifest.root = root;
    manifest.vocabulary = subtask_vocabulary(subtask, keywords);

    for (const auto& keyword : keywords) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / keyword)) {
            if (entry.is_regular_file() && entry.path().extension() == ".wav") {
                files.push_back(entry.path().filename().string());
            }
        }
        if (files.empty()) {
            throw IoError("manifest: keyword folder has no wav files: " +
                          (fs::path(root) / keyword).string());
        }
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            ManifestEntry e;
            e.path = keyword + "/" + file;
            e.keyword = keyword;
            e.label = manifest.vocabulary.in_core(keyword) || subtask == 35
                          ? keyword
                          : kUnknownLabel;
            e.speaker = detail::speaker_of(file);
            if (testing.count(e.path)) {
                e.split = Split::kTest;
            } else if (validation.count(e.path)) {
                e.split = Split::kValidation;
            } else {
                e.split = Split::kTrain;
            }
            manifest.entries.push_back(std::move(e));
        }
    }
    return manifest;
}

inline void write_manifest_csv(const DatasetManifest& manifest, std::ostream& out) {
    out << "path,label,split\n";
    for (const auto& e : manifest.entries) {
        out << e.path << ',' << e.label << ',' << split_name(e.split) << '\n';
    }
}

// Random one-second crop of a random background-noise waveform at a random
// gain in [0, 1], labeled silence.
inline AudioClip sample_silence(const NoiseBank& bank, Rng& rng) {
    if (bank.waveforms.empty()) {
        throw ConfigError("sample_silence: noise bank is empty");
    }
    const auto& noise = bank.waveforms[rng.uniform_index(bank.waveforms.size())];
    const auto max_offset = noise.size() - static_cast<std::size_t>(kClipSamples);
    const auto offset = max_offset == 0 ? 0 : rng.uniform_index(max_offset + 1);
    const double gain = rng.uniform(0.0, 1.0);
    AudioClip clip;
    clip.label = kSilenceLabel;
    clip.samples.resize(static_cast<std::size_t>(kClipSamples));
    for (std::int64_t i = 0; i < kClipSamples; ++i) {
        clip.samples[static_cast<std::size_t>(i)] =
            gain * noise[offset + static_cast<std::size_t>(i)];
    }
    return clip;
}

// ---------------------------------------------------------------------------
// Batch composition

struct BatchItem {
    const ManifestEntry* entry = nullptr;  // null for synthesized silence
    std::uint64_t silence_seed = 0;
    std::int64_t class_index = 0;
};

using Batch = std::vector<BatchItem>;

// One epoch of shuffled batches. In-vocabulary entries are visited exactly
// once; for vocabularies with auxiliary classes, silence and unknown items
// are interleaved so each makes up about `aux_fraction` of the stream
// (unknowns drawn from the split's out-of-vocabulary pool). The final short
// batch is kept.
inline std::vector<Batch> make_batches(const DatasetManifest& manifest, Split split,
                                       std::int64_t batch_size, Rng& rng,
                                       double aux_fraction = 0.1) {
    if (batch_size < 1) {
        throw ConfigError("make_batches: batch size must be at least 1");
    }
    const auto& vocab = manifest.vocabulary;
    std::vector<const ManifestEntry*> core;
    std::vector<const ManifestEntry*> unknown_pool;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        if (e.label == kUnknownLabel) {
            unknown_pool.push_back(&e);
        } else {
            core.push_back(&e);
        }
    }
    if (core.empty() && unknown_pool.empty()) {
        throw ContractError("make_batches: split '" + std::string(split_name(split)) +
                            "' is empty");
    }

    auto shuffle = [&rng](auto& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[rng.uniform_index(i)]);
        }
    };
    shuffle(core);

    const bool inject_silence = vocab.has_silence;
    const bool inject_unknown = vocab.has_unknown && !unknown_pool.empty();

    std::vector<Batch> batches;
    Batch current;
    auto push = [&](BatchItem item) {
        current.push_back(item);
        if (static_cast<std::int64_t>(current.size()) == batch_size) {
            batches.push_back(std::move(current));
            current.clear();
        }
    };

    for (std::size_t next_core = 0; next_core < core.size();) {
        const double u = rng.uniform();
        if (inject_silence && u < aux_fraction) {
            push({nullptr, rng.next_u64(), vocab.class_index(kSilenceLabel)});
        } else if (inject_unknown && u < 2.0 * aux_fraction) {
            const auto* e = unknown_pool[rng.uniform_index(unknown_pool.size())];
            push({e, 0, vocab.class_index(kUnknownLabel)});
        } else {
            const auto* e = core[next_core++];
            push({e, 0, vocab.class_index(e->label)});
        }
    }
    if (core.empty()) {
        // Unknown-only split (degenerate but legal): emit the pool once.
        for (const auto* e : unknown_pool) {
            push({e, 0, vocab.class_index(kUnknownLabel)});
        }
    }
    if (!current.empty()) batches.push_back(std::move(current));
    return batches;
}

// Deterministic evaluation item list: every entry of the split in manifest
// order, plus floor(aux_fraction * n) seeded silence clips when the
// vocabulary has a silence class.
inline std::vector<BatchItem> make_eval_items(const DatasetManifest& manifest, Split split,
                                              std::uint64_t seed, double aux_fraction = 0.1) {
    const auto& vocab = manifest.vocabulary;
    std::vector<BatchItem> items;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        items.push_back({&e, 0, vocab.class_index(e.label)});
    }
    if (vocab.has_silence) {
        const auto n_silence = static_cast<std::int64_t>(
            aux_fraction * static_cast<double>(items.size()));
        Rng rng(Rng::mix(seed, Rng::hash_string("eval-silence")));
        for (std::int64_t i = 0; i < n_silence; ++i) {
            items.push_back({nullptr, rng.next_u64(), vocab.class_index(kSilenceLabel)});
        }
    }
    return items;
}

}  // namespace lambdakws
