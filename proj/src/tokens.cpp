#include "ttsrl/tokens.hpp"

namespace ttsrl {

AudioFrameSeq make_bos_frame(int channels, int audio_vocab) {
    AudioFrameSeq seq(channels);
    seq.data.assign(static_cast<size_t>(channels), 0);
    seq.data[0] = bos_id(audio_vocab);
    return seq;
}

size_t non_eos_frames(const AudioFrameSeq& audio, int audio_vocab) {
    const FrameToken eos = eos_id(audio_vocab);
    const size_t n = audio.frames();
    for (size_t f = 0; f < n; ++f) {
        if (audio.at(f, 0) == eos) return f;
    }
    return n;
}

TextSeq encode_text(const std::string& raw) {
    if (raw.empty()) throw InvalidInput("encode_text: empty input");
    TextSeq seq;
    seq.tokens.reserve(raw.size());
    for (char ch : raw) seq.tokens.push_back(static_cast<uint8_t>(ch));
    return seq;
}

std::string decode_text(const TextSeq& seq) {
    std::string out;
    out.reserve(seq.tokens.size());
    for (TextToken t : seq.tokens) out.push_back(static_cast<char>(t));
    return out;
}

}  // namespace ttsrl
