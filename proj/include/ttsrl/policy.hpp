// Differentiable autoregressive encoder-decoder policy over audio frames:
// non-autoregressive text encoder, causal frame decoder with cross-attention,
// one output head per codebook channel, CFG-capable sampling via learned null
// embeddings, exact log-likelihoods and hand-derived gradients.
//
// Teacher-forced scoring and incremental sampling share the same per-position
// kernels, so both paths produce bit-identical hidden states.
#pragma once

#include <memory>
#include <vector>

#include "ttsrl/model.hpp"
#include "ttsrl/tokens.hpp"

namespace ttsrl {

struct Conditioning {
    const TextSeq* text = nullptr;          // nullptr => dropped (null embedding)
    const AudioFrameSeq* context = nullptr; // nullptr => dropped (null embedding)
};

struct ConditioningFlags {
    bool drop_text = false;
    bool drop_context = false;
};

struct SampleSettings {
    double temperature = 0.7;
    bool use_cfg = false;
    double cfg_scale = 2.5;
    bool greedy = false;  // argmax limit of temperature -> 0
    int max_frames = 0;   // 0 => 2 * |text| + 8
};

struct SampledResponse {
    AudioFrameSeq response;
    double logprob_conditional = 0.0;  // temp-1 conditional log-likelihood
    bool sampled_with_cfg = false;
    double cfg_scale = 1.0;
};

// Opaque forward activations kept for the backward pass.
struct ForwardTrace;

struct ScoredForward {
    double logprob = 0.0;
    size_t response_frames = 0;
    std::shared_ptr<ForwardTrace> trace;
};

// Teacher-forced pass over [context|null, BOS, response[0..n-2]] scoring all
// n response frames on every channel. Throws LengthExceeded past the
// configured windows, InvalidInput on an empty response.
ScoredForward score_response(const PolicyParams& params, const Conditioning& cond,
                             const AudioFrameSeq& response);

// Accumulates scale * d(logprob)/d(theta) into grad. grad must have
// param_count entries.
void backward_logprob(const PolicyParams& params, const ForwardTrace& trace, double scale,
                      GradBuffer& grad);

// Sum over response frames and channels of log softmax at the realized
// token; conditional on the full prompt (text + context).
double log_prob(const PolicyParams& params, const TextSeq& text,
                const AudioFrameSeq& context, const AudioFrameSeq& response);

// Exact gradient of log_prob with respect to every parameter.
GradBuffer grad_log_prob(const PolicyParams& params, const TextSeq& text,
                         const AudioFrameSeq& context, const AudioFrameSeq& response);

// Logits for the next frame after `prefix` generated frames, one vector of
// length audio_vocab per channel. Dropped conditioning routes through the
// learned null embeddings.
std::vector<std::vector<double>> next_frame_logits(const PolicyParams& params,
                                                   const TextSeq* text,
                                                   const AudioFrameSeq* context,
                                                   const AudioFrameSeq& prefix,
                                                   ConditioningFlags flags = {});

// uncond + scale * (cond - uncond), per channel, computed from the same
// kernels sampling uses. The unconditional branch drops text and context.
std::vector<std::vector<double>> guided_next_frame_logits(const PolicyParams& params,
                                                          const TextSeq& text,
                                                          const AudioFrameSeq& context,
                                                          const AudioFrameSeq& prefix,
                                                          double cfg_scale);

// Multinomial sampling at the given temperature, optionally CFG-guided;
// stops at EOS on the content channel or at the frame cap.
// logprob_conditional is always the temp-1 conditional likelihood.
SampledResponse sample_response(const PolicyParams& params, const TextSeq& text,
                                const AudioFrameSeq& context, const SampleSettings& settings,
                                Rng& rng);

}  // namespace ttsrl
