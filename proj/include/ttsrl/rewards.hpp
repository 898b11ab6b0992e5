// Reward normalization and aggregation: raw oracle scores are mapped to [0,1]
// through a three-point piecewise-linear anchor scheme (worst -> 0, baseline
// mean -> 0.5, best -> 1), PESQ divides by 4.5, and the total reward is a
// weighted sum.
#pragma once

#include <string>
#include <vector>

#include "ttsrl/model.hpp"
#include "ttsrl/world.hpp"

namespace ttsrl {

struct RewardWeights {
    double w_cer = 0.45;
    double w_ssim = 0.45;
    double w_pesq = 0.1;
};

// Warns (does not fail) when the weights do not sum to 1.
void check_weights(const RewardWeights& weights);

enum class Orientation { kLowerIsBetter, kHigherIsBetter };

struct AnchorSpec {
    Orientation orientation = Orientation::kLowerIsBetter;
    double worst = 1.0;
    double baseline_mean = 0.5;
    double best = 0.0;
    // Set when the baseline mean collapsed onto an endpoint; normalization
    // falls back to the single segment worst -> 0, best -> 1.
    bool degenerate = false;
};

struct NormalizedRewards {
    double r_cer = 0.0;
    double r_ssim = 0.0;
    double r_pesq = 0.0;
    double r_total = 0.0;
};

// Piecewise-linear map with exact anchor values: f(worst)=0,
// f(baseline_mean)=0.5, f(best)=1, clipped outside [worst, best].
// Equal worst/best anchors -> ConfigError.
double normalize_piecewise(double raw, const AnchorSpec& spec);

// clip(raw, 0, 4.5) / 4.5
double normalize_pesq(double raw);

// Weighted sum; components outside [0,1] -> InvalidInput.
double aggregate(double r_cer, double r_ssim, double r_pesq, const RewardWeights& weights);

struct AnchorSet {
    AnchorSpec cer;   // worst 1, best 0
    AnchorSpec ssim;  // worst 0, best 1 (histogram cosine is nonnegative)
    RewardWeights weights;
};

NormalizedRewards normalize_scores(const RawScores& raw, const AnchorSet& anchors);

struct AnchorEstimate {
    AnchorSet anchors;
    double mean_raw_cer = 0.0;
    double mean_raw_ssim = 0.0;
    double mean_raw_pesq = 0.0;
    int n_scored = 0;
};

struct AnchorSampling {
    double temperature = 0.7;
    double cfg_probability = 0.5;
    double cfg_scale = 2.5;
    int n_samples = 1;  // per prompt
};

// Generates n_samples responses per prompt from the baseline policy (same
// sampling regime GRPO uses), averages raw CER/SSIM over them, and freezes
// those means as the 0.5 anchors. Deterministic in seed.
AnchorEstimate estimate_baseline_anchors(const PolicyParams& params, const World& world,
                                         const PromptSet& prompts, const RewardWeights& weights,
                                         const AnchorSampling& sampling, uint64_t seed,
                                         int threads);

// Raw oracle scores for one generated response against its prompt.
RawScores score_response_oracles(const World& world, const Prompt& prompt,
                                 const AudioFrameSeq& response);

std::string anchors_to_json(const AnchorEstimate& est);
AnchorEstimate anchors_from_json(const std::string& text);
void save_anchors(const AnchorEstimate& est, const std::string& path);
AnchorEstimate load_anchors(const std::string& path);

}  // namespace ttsrl
