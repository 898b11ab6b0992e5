#include "ttsrl/world.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"

namespace ttsrl {

using nlohmann::json;

const SynthLanguage& World::language(int id) const {
    for (const auto& l : languages) {
        if (l.language_id == id) return l;
    }
    throw InvalidInput("unknown language id " + std::to_string(id));
}

const SynthSpeaker& World::speaker(int id) const {
    for (const auto& s : speakers) {
        if (s.speaker_id == id) return s;
    }
    throw InvalidInput("unknown speaker id " + std::to_string(id));
}

World gen_world(const WorldConfig& config) {
    const int v = config.audio_vocab;
    if (v < 8) throw ConfigError("audio_vocab too small");
    if (config.channels < 2) throw ConfigError("need at least content + speaker channels");
    if (config.n_languages < 1 || config.n_speakers < 1 || config.alphabet_size < 1)
        throw ConfigError("world counts must be positive");
    if (config.alphabet_size > config.letter_pool_size)
        throw ConfigError("alphabet_size exceeds letter pool");
    if (config.letter_pool_size > kTextVocab - 2)
        throw ConfigError("letter pool exceeds byte vocabulary");

    // Ids 0 (speaker-channel filler at BOS/EOS), EOS, and BOS are reserved.
    const int reserved = 3;
    if (config.n_languages * config.alphabet_size + reserved > v)
        throw WorldTooLarge("content code space exhausted: " +
                            std::to_string(config.n_languages * config.alphabet_size + reserved) +
                            " > " + std::to_string(v));
    if (config.n_speakers * kSignatureSize + reserved > v)
        throw WorldTooLarge("speaker code space exhausted");

    World world;
    world.config = config;

    std::vector<FrameToken> usable;
    usable.reserve(static_cast<size_t>(v - reserved));
    for (int id = 1; id <= v - 3; ++id) usable.push_back(static_cast<FrameToken>(id));

    Rng content_rng(derive_seed(config.seed, {0x77, 1}));
    std::vector<FrameToken> content_pool = usable;
    content_rng.shuffle(content_pool);

    Rng alpha_rng(derive_seed(config.seed, {0x77, 2}));
    world.inverse_content.assign(static_cast<size_t>(v), -1);

    size_t next_code = 0;
    for (int l = 0; l < config.n_languages; ++l) {
        SynthLanguage lang;
        lang.language_id = l;
        lang.content_map.fill(-1);

        std::vector<TextToken> pool(static_cast<size_t>(config.letter_pool_size));
        for (int i = 0; i < config.letter_pool_size; ++i)
            pool[static_cast<size_t>(i)] = static_cast<TextToken>(2 + i);
        alpha_rng.shuffle(pool);
        lang.alphabet.assign(pool.begin(), pool.begin() + config.alphabet_size);
        std::sort(lang.alphabet.begin(), lang.alphabet.end());

        for (TextToken t : lang.alphabet) {
            const FrameToken code = content_pool[next_code++];
            lang.content_map[t] = static_cast<int16_t>(code);
            world.inverse_content[code] = static_cast<int16_t>(t);
        }
        world.languages.push_back(std::move(lang));
    }

    Rng spk_rng(derive_seed(config.seed, {0x77, 3}));
    std::vector<FrameToken> speaker_pool = usable;
    spk_rng.shuffle(speaker_pool);
    size_t next_spk = 0;
    for (int s = 0; s < config.n_speakers; ++s) {
        SynthSpeaker spk;
        spk.speaker_id = s;
        for (int i = 0; i < kSignatureSize; ++i)
            spk.signature[static_cast<size_t>(i)] = speaker_pool[next_spk++];
        world.speakers.push_back(spk);
    }
    return world;
}

World gen_world(uint64_t seed, int n_languages, int n_speakers, int alphabet_size) {
    WorldConfig cfg;
    cfg.seed = seed;
    cfg.n_languages = n_languages;
    cfg.n_speakers = n_speakers;
    cfg.alphabet_size = alphabet_size;
    return gen_world(cfg);
}

AudioFrameSeq synthesize_reference(const World& world, const SynthLanguage& lang,
                                   const SynthSpeaker& spk, const TextSeq& text) {
    const int c = world.config.channels;
    AudioFrameSeq audio(c);
    audio.data.reserve((text.size() + 1) * static_cast<size_t>(c));
    std::vector<FrameToken> frame(static_cast<size_t>(c), 0);
    for (size_t i = 0; i < text.size(); ++i) {
        const TextToken t = text.tokens[i];
        if (!lang.in_alphabet(t))
            throw UnknownSymbol("token " + std::to_string(int(t)) + " not in language " +
                                std::to_string(lang.language_id));
        frame[0] = static_cast<FrameToken>(lang.content_map[t]);
        frame[1] = spk.signature[i % kSignatureSize];
        for (int ch = 2; ch < c; ++ch) frame[static_cast<size_t>(ch)] = 0;
        audio.push_frame(frame);
    }
    frame.assign(static_cast<size_t>(c), 0);
    frame[0] = eos_id(world.config.audio_vocab);
    audio.push_frame(frame);
    return audio;
}

TextSeq asr_decode(const World& world, const AudioFrameSeq& audio) {
    TextSeq text;
    const size_t n = non_eos_frames(audio, world.config.audio_vocab);
    text.tokens.reserve(n);
    for (size_t f = 0; f < n; ++f) {
        const FrameToken code = audio.at(f, 0);
        const int16_t inv = world.inverse_content[code];
        text.tokens.push_back(inv >= 0 ? static_cast<TextToken>(inv) : kGarbageTextToken);
    }
    return text;
}

double character_error_rate(const TextSeq& ref, const TextSeq& hyp) {
    if (ref.empty()) throw InvalidInput("character_error_rate: empty reference");
    const size_t n = ref.size();
    const size_t m = hyp.size();
    // Single-row Levenshtein.
    std::vector<size_t> row(m + 1);
    std::iota(row.begin(), row.end(), size_t{0});
    for (size_t i = 1; i <= n; ++i) {
        size_t diag = row[0];
        row[0] = i;
        for (size_t j = 1; j <= m; ++j) {
            const size_t cost = (ref.tokens[i - 1] == hyp.tokens[j - 1]) ? 0 : 1;
            const size_t next = std::min({row[j] + 1, row[j - 1] + 1, diag + cost});
            diag = row[j];
            row[j] = next;
        }
    }
    const double raw = static_cast<double>(row[m]) / static_cast<double>(n);
    return std::min(raw, 1.0);
}

namespace {

// L2-normalized histogram of speaker-channel ids over non-EOS frames.
// Returns false when there is nothing to count.
bool speaker_histogram(const World& world, const AudioFrameSeq& audio,
                       std::vector<double>& hist) {
    hist.assign(static_cast<size_t>(world.config.audio_vocab), 0.0);
    const size_t n = non_eos_frames(audio, world.config.audio_vocab);
    if (n == 0) return false;
    for (size_t f = 0; f < n; ++f) hist[audio.at(f, 1)] += 1.0;
    double norm2 = 0.0;
    for (double v : hist) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    for (double& v : hist) v /= norm;
    return true;
}

bool speaker_bigram_histogram(const World& world, const AudioFrameSeq& audio,
                              std::map<uint32_t, double>& hist) {
    hist.clear();
    const size_t n = non_eos_frames(audio, world.config.audio_vocab);
    if (n < 2) return false;
    for (size_t f = 0; f + 1 < n; ++f) {
        const uint32_t key = (static_cast<uint32_t>(audio.at(f, 1)) << 16) |
                             static_cast<uint32_t>(audio.at(f + 1, 1));
        hist[key] += 1.0;
    }
    double norm2 = 0.0;
    for (const auto& [k, v] : hist) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    for (auto& [k, v] : hist) v /= norm;
    return true;
}

}  // namespace

double speaker_similarity(const World& world, const AudioFrameSeq& context,
                          const AudioFrameSeq& generated) {
    std::vector<double> a, b;
    const bool ok_a = speaker_histogram(world, context, a);
    const bool ok_b = speaker_histogram(world, generated, b);
    if (!ok_a || !ok_b) {
        log_warn("speaker_similarity: empty or EOS-only input, scoring 0");
        return 0.0;
    }
    double dot = 0.0;
    for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot;
}

double speaker_similarity_bigram(const World& world, const AudioFrameSeq& context,
                                 const AudioFrameSeq& generated) {
    std::map<uint32_t, double> a, b;
    const bool ok_a = speaker_bigram_histogram(world, context, a);
    const bool ok_b = speaker_bigram_histogram(world, generated, b);
    if (!ok_a || !ok_b) {
        log_warn("speaker_similarity_bigram: too few frames, scoring 0");
        return 0.0;
    }
    double dot = 0.0;
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        if (it != b.end()) dot += v * it->second;
    }
    return dot;
}

double quality_score(const World& world, const AudioFrameSeq& audio) {
    const QualityWeights w;
    const size_t n = non_eos_frames(audio, world.config.audio_vocab);
    if (n == 0) return -0.5;

    size_t valid = 0;
    for (size_t f = 0; f < n; ++f) {
        if (world.code_mapped(audio.at(f, 0))) ++valid;
    }
    const double q_valid = static_cast<double>(valid) / static_cast<double>(n);

    size_t best_owned = 0;
    for (const auto& spk : world.speakers) {
        size_t owned = 0;
        for (size_t f = 0; f < n; ++f) {
            const FrameToken id = audio.at(f, 1);
            for (FrameToken sig : spk.signature) {
                if (sig == id) {
                    ++owned;
                    break;
                }
            }
        }
        best_owned = std::max(best_owned, owned);
    }
    const double q_consistent = static_cast<double>(best_owned) / static_cast<double>(n);
    return -0.5 + 5.0 * (w.validity * q_valid + w.consistency * q_consistent);
}

namespace {

TextSeq random_text(const SynthLanguage& lang, Rng& rng, int min_len, int max_len) {
    const int len = min_len + static_cast<int>(rng.below(static_cast<uint64_t>(max_len - min_len + 1)));
    TextSeq text;
    text.tokens.reserve(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i)
        text.tokens.push_back(lang.alphabet[rng.below(lang.alphabet.size())]);
    return text;
}

}  // namespace

std::vector<PairedExample> make_paired_dataset(const World& world, int language_id,
                                               int n_examples, uint64_t seed) {
    if (n_examples < 1) throw InvalidInput("make_paired_dataset: n_examples must be >= 1");
    const SynthLanguage& lang = world.language(language_id);
    std::vector<PairedExample> out;
    out.reserve(static_cast<size_t>(n_examples));
    for (int i = 0; i < n_examples; ++i) {
        Rng rng(derive_seed(seed, {0xDA7A, static_cast<uint64_t>(language_id),
                                   static_cast<uint64_t>(i)}));
        PairedExample ex;
        ex.language_id = language_id;
        ex.speaker_id = static_cast<int>(rng.below(world.speakers.size()));
        const SynthSpeaker& spk = world.speakers[static_cast<size_t>(ex.speaker_id)];
        ex.text = random_text(lang, rng, 4, 16);
        TextSeq ctx_text = random_text(lang, rng, 4, 16);
        while (ctx_text == ex.text) ctx_text = random_text(lang, rng, 4, 16);
        ex.context_audio = synthesize_reference(world, lang, spk, ctx_text);
        ex.target_audio = synthesize_reference(world, lang, spk, ex.text);
        out.push_back(std::move(ex));
    }
    return out;
}

PromptSet make_prompt_set(const World& world, const std::vector<int>& language_ids,
                          int n_per_language, uint64_t seed) {
    PromptSet prompts;
    prompts.reserve(language_ids.size() * static_cast<size_t>(n_per_language));
    for (int lang_id : language_ids) {
        const SynthLanguage& lang = world.language(lang_id);
        for (int i = 0; i < n_per_language; ++i) {
            Rng rng(derive_seed(seed, {0x9209, static_cast<uint64_t>(lang_id),
                                       static_cast<uint64_t>(i)}));
            Prompt p;
            p.language_id = lang_id;
            p.text = random_text(lang, rng, 4, 16);
            const auto& spk = world.speakers[rng.below(world.speakers.size())];
            const TextSeq ctx_text = random_text(lang, rng, 4, 16);
            p.context_audio = synthesize_reference(world, lang, spk, ctx_text);
            prompts.push_back(std::move(p));
        }
    }
    return prompts;
}

std::string world_to_json(const World& world) {
    json j;
    j["version"] = 1;
    j["seed"] = world.config.seed;
    j["n_languages"] = world.config.n_languages;
    j["n_speakers"] = world.config.n_speakers;
    j["alphabet_size"] = world.config.alphabet_size;
    j["letter_pool_size"] = world.config.letter_pool_size;
    j["audio_vocab"] = world.config.audio_vocab;
    j["channels"] = world.config.channels;
    j["languages"] = json::array();
    for (const auto& lang : world.languages) {
        json jl;
        jl["language_id"] = lang.language_id;
        jl["alphabet"] = lang.alphabet;
        json map = json::array();
        for (TextToken t : lang.alphabet)
            map.push_back(json::array({int(t), int(lang.content_map[t])}));
        jl["content_map"] = map;
        j["languages"].push_back(jl);
    }
    j["speakers"] = json::array();
    for (const auto& spk : world.speakers) {
        json js;
        js["speaker_id"] = spk.speaker_id;
        js["signature"] = spk.signature;
        j["speakers"].push_back(js);
    }
    return j.dump(2) + "\n";
}

World world_from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    if (j.at("version").get<int>() != 1) throw IoError("unsupported world file version");
    World world;
    world.config.seed = j.at("seed").get<uint64_t>();
    world.config.n_languages = j.at("n_languages").get<int>();
    world.config.n_speakers = j.at("n_speakers").get<int>();
    world.config.alphabet_size = j.at("alphabet_size").get<int>();
    world.config.letter_pool_size = j.at("letter_pool_size").get<int>();
    world.config.audio_vocab = j.at("audio_vocab").get<int>();
    world.config.channels = j.at("channels").get<int>();
    world.inverse_content.assign(static_cast<size_t>(world.config.audio_vocab), -1);
    for (const auto& jl : j.at("languages")) {
        SynthLanguage lang;
        lang.language_id = jl.at("language_id").get<int>();
        lang.alphabet = jl.at("alphabet").get<std::vector<TextToken>>();
        lang.content_map.fill(-1);
        for (const auto& pair : jl.at("content_map")) {
            const int t = pair.at(0).get<int>();
            const int code = pair.at(1).get<int>();
            lang.content_map[static_cast<size_t>(t)] = static_cast<int16_t>(code);
            world.inverse_content[static_cast<size_t>(code)] = static_cast<int16_t>(t);
        }
        world.languages.push_back(std::move(lang));
    }
    for (const auto& js : j.at("speakers")) {
        SynthSpeaker spk;
        spk.speaker_id = js.at("speaker_id").get<int>();
        const auto sig = js.at("signature").get<std::vector<FrameToken>>();
        if (sig.size() != kSignatureSize) throw IoError("bad speaker signature size");
        std::copy(sig.begin(), sig.end(), spk.signature.begin());
        world.speakers.push_back(spk);
    }
    return world;
}

void save_world(const World& world, const std::string& path) {
    write_file(path, world_to_json(world));
}

World load_world(const std::string& path) { return world_from_json(read_file(path)); }

}  // namespace ttsrl
