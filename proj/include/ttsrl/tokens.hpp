// Byte-level text tokens and multi-channel audio frame sequences.
//
// Text lives on a fixed 256-symbol byte vocabulary. Audio frames carry one
// token id per codebook channel; channel 0 is linguistic content, channel 1
// (and up) speaker identity. The top two content-channel ids are reserved:
// V-1 is BOS, V-2 is EOS. Non-content channels are fixed to id 0 at BOS/EOS
// positions.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ttsrl/common.hpp"

namespace ttsrl {

constexpr int kTextVocab = 256;
// Text token id emitted by the ASR oracle for audio codes it cannot invert.
constexpr uint8_t kGarbageTextToken = 1;

using TextToken = uint8_t;

struct TextSeq {
    std::vector<TextToken> tokens;

    size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
    bool operator==(const TextSeq&) const = default;
};

using FrameToken = uint16_t;

inline FrameToken bos_id(int audio_vocab) { return static_cast<FrameToken>(audio_vocab - 1); }
inline FrameToken eos_id(int audio_vocab) { return static_cast<FrameToken>(audio_vocab - 2); }

// Frame-major, channel-contiguous token storage: data[f * channels + c].
struct AudioFrameSeq {
    int channels = 2;
    std::vector<FrameToken> data;

    AudioFrameSeq() = default;
    explicit AudioFrameSeq(int c) : channels(c) {}

    size_t frames() const { return channels > 0 ? data.size() / static_cast<size_t>(channels) : 0; }
    bool empty() const { return data.empty(); }

    FrameToken at(size_t frame, int channel) const {
        return data[frame * static_cast<size_t>(channels) + static_cast<size_t>(channel)];
    }
    void set(size_t frame, int channel, FrameToken t) {
        data[frame * static_cast<size_t>(channels) + static_cast<size_t>(channel)] = t;
    }
    void push_frame(const std::vector<FrameToken>& frame) {
        data.insert(data.end(), frame.begin(), frame.end());
    }

    bool operator==(const AudioFrameSeq&) const = default;
};

// BOS frame: (BOS, 0, 0, ...).
AudioFrameSeq make_bos_frame(int channels, int audio_vocab);

// Count of leading frames whose content-channel id is not EOS; the oracles
// treat everything from the first EOS onward as silence.
size_t non_eos_frames(const AudioFrameSeq& audio, int audio_vocab);

// One token per byte, in order. Empty input -> InvalidInput.
TextSeq encode_text(const std::string& raw);

// Inverse of encode_text; total on any TextSeq (byte vocabulary is exactly 256).
std::string decode_text(const TextSeq& seq);

}  // namespace ttsrl
