// Deterministic synthetic multilingual "speech" universe plus the judge
// oracles that stand in for ASR, speaker verification, and quality scoring.
//
// Each language is an injective map from a small byte alphabet to a disjoint
// range of content-channel codes; each speaker is a 4-id signature replayed
// cyclically on the speaker channel. Reference synthesis is exactly
// invertible, so the ASR oracle is a lookup through the union of all
// language maps.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ttsrl/tokens.hpp"

namespace ttsrl {

constexpr int kSignatureSize = 4;

struct SynthLanguage {
    int language_id = 0;
    std::vector<TextToken> alphabet;              // sorted, distinct
    std::array<int16_t, kTextVocab> content_map;  // text id -> code, -1 if absent

    bool in_alphabet(TextToken t) const { return content_map[t] >= 0; }
};

struct SynthSpeaker {
    int speaker_id = 0;
    std::array<FrameToken, kSignatureSize> signature;
};

struct WorldConfig {
    uint64_t seed = 0;
    int n_languages = 4;
    int n_speakers = 8;
    int alphabet_size = 16;
    // Alphabets are drawn from the byte pool [2, 2 + letter_pool_size), so
    // distinct languages share letters the way natural languages share IPA
    // symbols. Ids 0 and 1 never appear (1 is the ASR garbage token).
    int letter_pool_size = 48;
    int audio_vocab = 256;
    int channels = 2;
};

struct World {
    WorldConfig config;
    std::vector<SynthLanguage> languages;
    std::vector<SynthSpeaker> speakers;
    std::vector<int16_t> inverse_content;  // code -> text id, -1 if unmapped

    const SynthLanguage& language(int id) const;
    const SynthSpeaker& speaker(int id) const;
    bool code_mapped(FrameToken code) const {
        return inverse_content[code] >= 0;
    }
};

struct RawScores {
    double cer = 0.0;   // clipped to <= 1
    double ssim = 0.0;  // cosine in [-1, 1]
    double pesq = 0.0;  // [-0.5, 4.5]
};

struct PairedExample {
    int language_id = 0;
    int speaker_id = 0;
    TextSeq text;
    AudioFrameSeq context_audio;  // same speaker, different text
    AudioFrameSeq target_audio;
};

struct Prompt {
    int language_id = 0;
    TextSeq text;
    AudioFrameSeq context_audio;  // content independent of text
};

using PromptSet = std::vector<Prompt>;

// Deterministic in seed; throws WorldTooLarge when the code space cannot hold
// the requested languages/speakers next to the reserved ids.
World gen_world(const WorldConfig& config);
World gen_world(uint64_t seed, int n_languages, int n_speakers, int alphabet_size);

// frame i = (content_map(text[i]), signature[i mod 4]), then an (EOS, 0)
// terminator. Out-of-alphabet token -> UnknownSymbol.
AudioFrameSeq synthesize_reference(const World& world, const SynthLanguage& lang,
                                   const SynthSpeaker& spk, const TextSeq& text);

// Inverts content codes through the union of all language maps, stopping at
// the first EOS; unmapped codes come out as the garbage token.
TextSeq asr_decode(const World& world, const AudioFrameSeq& audio);

// Levenshtein distance / |ref|, clipped at 1. Empty reference -> InvalidInput.
double character_error_rate(const TextSeq& ref, const TextSeq& hyp);

// Cosine similarity of L2-normalized speaker-channel histograms over non-EOS
// frames. Empty/EOS-only input scores 0 with a logged warning.
double speaker_similarity(const World& world, const AudioFrameSeq& context,
                          const AudioFrameSeq& generated);

// Evaluation-only alternative embedding: histogram over consecutive
// speaker-channel id bigrams (mirrors using a different SV model for eval).
double speaker_similarity_bigram(const World& world, const AudioFrameSeq& context,
                                 const AudioFrameSeq& generated);

// -0.5 + 5 * (0.7 * valid-code fraction + 0.3 * single-speaker consistency),
// over non-EOS frames; empty input -> -0.5.
double quality_score(const World& world, const AudioFrameSeq& audio);

struct QualityWeights {
    double validity = 0.7;
    double consistency = 0.3;
};

// Deterministic in seed; context audio shares the speaker but not the text.
std::vector<PairedExample> make_paired_dataset(const World& world, int language_id,
                                               int n_examples, uint64_t seed);

// n_per_language prompts per listed language; text and context audio are
// independent draws (text lengths uniform in [4, 16]).
PromptSet make_prompt_set(const World& world, const std::vector<int>& language_ids,
                          int n_per_language, uint64_t seed);

// Versioned JSON serialization so all pipeline stages share one universe.
std::string world_to_json(const World& world);
World world_from_json(const std::string& json_text);
void save_world(const World& world, const std::string& path);
World load_world(const std::string& path);

}  // namespace ttsrl
