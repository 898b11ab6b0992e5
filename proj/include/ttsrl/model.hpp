// Policy parameterization: one flat f64 vector plus a layout describing every
// tensor's offset and shape. Flat storage keeps optimizer updates and
// finite-difference gradient checks trivial.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ttsrl/common.hpp"

namespace ttsrl {

struct ModelConfig {
    int width = 48;          // residual stream dimension
    int enc_blocks = 2;
    int dec_blocks = 2;
    int heads = 4;
    int channels = 2;        // parallel output heads
    int text_vocab = 256;    // byte-level, fixed
    int audio_vocab = 256;
    int max_text_len = 32;
    int max_audio_len = 96;  // context + BOS + generated frames
    int mlp_mult = 4;
    double p_drop = 0.1;     // conditioning dropout probability (CFG training)
    int64_t param_budget = 1'000'000;

    int head_dim() const { return width / heads; }
    int mlp_dim() const { return width * mlp_mult; }
    void validate() const;  // throws ConfigError
    bool operator==(const ModelConfig&) const = default;
};

// Offsets into the flat parameter vector. Matrices are row-major [rows][cols]
// with out = W * in convention (rows = output dim).
struct EncBlockLayout {
    int64_t norm_attn, wq, wk, wv, wo;
    int64_t norm_mlp, w_up, w_down;
};

struct DecBlockLayout {
    int64_t norm_self, wq, wk, wv, wo;
    int64_t norm_cross, cq, ck, cv, co;
    int64_t norm_mlp, w_up, w_down;
};

struct ParamLayout {
    int64_t text_embed;      // [text_vocab][D]
    int64_t enc_pos;         // [max_text_len][D]
    int64_t null_text;       // [D]
    std::vector<EncBlockLayout> enc;
    int64_t enc_final_norm;  // [D]
    int64_t frame_embed;     // [C][audio_vocab][D]
    int64_t dec_pos;         // [max_audio_len][D]
    int64_t null_context;    // [D]
    std::vector<DecBlockLayout> dec;
    int64_t dec_final_norm;  // [D]
    int64_t out_heads;       // [C][audio_vocab][D]
    int64_t total = 0;

    static ParamLayout build(const ModelConfig& config);
};

struct PolicyParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<double> theta;

    int64_t param_count() const { return layout.total; }
    std::span<const double> tensor(int64_t offset, int64_t count) const {
        return std::span<const double>(theta.data() + offset, static_cast<size_t>(count));
    }
};

// Deterministic in seed; random weights ~ N(0, 1/width), norm gains start at 1.
PolicyParams init_params(const ModelConfig& config, uint64_t seed);

// Flat gradient buffer matching PolicyParams::theta.
using GradBuffer = std::vector<double>;

double grad_norm(const GradBuffer& g);

// Checkpoint container: magic + JSON header (config, stage tag, rng state,
// hash) + raw little-endian f64 block. Reload is bit-exact.
struct Checkpoint {
    PolicyParams params;
    std::string stage;                      // "init", "pretrain", "sft", "grpo", "dpo"
    std::array<uint64_t, 4> rng_state{};    // training-loop RNG at save time
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ttsrl
