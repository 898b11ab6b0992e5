// The three training stages: supervised next-frame training with mixed-data
// upsampling, online GRPO (group-mean baseline, advantage-weighted
// log-likelihood, no KL term), and an offline DPO comparator.
#pragma once

#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ttsrl/policy.hpp"
#include "ttsrl/rewards.hpp"
#include "ttsrl/world.hpp"

namespace ttsrl {

// --------------------------------------------------------------- logging ---

// Append-only JSON-lines training log.
class TrainLogWriter {
public:
    TrainLogWriter() = default;
    explicit TrainLogWriter(const std::string& path);
    void line(const std::string& json_line);
    bool open() const { return out_.is_open(); }

private:
    std::ofstream out_;
};

// ------------------------------------------------------------- optimizer ---

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::vector<double> m, v;

    void init(size_t n);
    // Descent step: theta -= lr * mhat / (sqrt(vhat) + eps)
    void step(std::vector<double>& theta, const GradBuffer& grad);
};

// ------------------------------------------------------------------- SFT ---

struct SftConfig {
    double learning_rate = 1e-3;
    int max_steps = 1000;
    int batch_size = 16;
    double upsample_factor = 5.0;  // low-resource boost during mixing
    int val_interval = 100;        // checkpoint rule: lowest validation loss
    uint64_t seed = 0;
};

// Mean over target frames of summed per-channel cross-entropy; with
// probability p_drop per example the conditioning (text and context) is
// replaced by the null embeddings. Context frames carry no loss.
std::pair<double, GradBuffer> sft_step(const PolicyParams& params,
                                       const std::vector<const PairedExample*>& batch,
                                       double p_drop, Rng& rng, int threads);

// Validation loss: same objective, conditioning never dropped.
double sft_validation_loss(const PolicyParams& params,
                           const std::vector<PairedExample>& examples, int threads);

// Seeded two-stream mixer. Low-resource examples are drawn with probability
// min(1, upsample_factor * natural_proportion); factor 1 preserves the
// natural proportion. Either stream empty -> InvalidInput.
class MixedStream {
public:
    MixedStream(const std::vector<PairedExample>* pretrain,
                const std::vector<PairedExample>* lowres, double upsample_factor,
                uint64_t seed);
    const PairedExample& next();
    double low_share() const { return low_share_; }

private:
    const std::vector<PairedExample>* pretrain_;
    const std::vector<PairedExample>* lowres_;
    double low_share_;
    Rng rng_;
};

struct SftResult {
    PolicyParams best_params;
    double best_val_loss = 0.0;
    int best_step = -1;
    double final_loss = 0.0;
};

// Adam on sft_step batches drawn from `draw`; keeps the parameters with the
// lowest validation loss.
SftResult sft_train(const PolicyParams& start, const SftConfig& config,
                    const std::function<const PairedExample*(Rng&)>& draw,
                    const std::vector<PairedExample>& val_examples, int threads,
                    TrainLogWriter* log);

// ------------------------------------------------------------------ GRPO ---

struct GrpoConfig {
    int group_size = 12;        // K; paper 12, desk profile 6
    int prompts_per_batch = 8;  // M; paper 64
    double temperature = 0.7;
    double cfg_probability = 0.5;
    double cfg_scale = 2.5;
    double learning_rate = 1e-3;  // paper 2e-7; desk-scale default 1e-3
    int max_iterations = 300;     // paper 2000
    int validation_interval = 50;
    std::string select_on = "r_cer";  // "r_cer" (normalized) or "raw_cer"
    uint64_t seed = 0;

    void validate() const;
};

struct RolloutGroup {
    size_t prompt_index = 0;
    std::vector<SampledResponse> responses;  // K entries
    std::vector<RawScores> raw_scores;
    std::vector<double> rewards;  // R_total per response
    double group_mean = 0.0;
    std::vector<double> advantages;  // reward - group mean
};

// mu = mean(rewards); A_k = rewards_k - mu. Sum of advantages is 0 up to
// rounding.
std::pair<double, std::vector<double>> compute_advantages(const std::vector<double>& rewards);

// Samples K responses (each independently CFG-guided with probability
// cfg_probability), scores them with the oracles, normalizes rewards, and
// centers advantages. An oracle failure scores that response 0 and is logged.
RolloutGroup rollout_group(const PolicyParams& params, const World& world, const Prompt& prompt,
                           size_t prompt_index, const GrpoConfig& config,
                           const AnchorSet& anchors, uint64_t seed);

// loss = -(1/(M K)) sum_i sum_k A_{i,k} log pi(y_{i,k} | x_i), exact gradient.
// No KL term. Prompts are looked up by each group's prompt_index.
std::pair<double, GradBuffer> grpo_loss(const PolicyParams& params,
                                        const std::vector<RolloutGroup>& groups,
                                        const PromptSet& prompts, int threads);

struct ValidationRecord {
    int iteration = 0;
    double r_cer = 0.0;    // normalized, frozen anchors
    double raw_cer = 0.0;
    double ssim = 0.0;
    double mean_reward = 0.0;
};

struct GrpoTrainResult {
    PolicyParams best_params;
    ValidationRecord best_validation;
    std::vector<ValidationRecord> validations;
    int iterations_run = 0;
};

// One optimizer update per rollout mini-batch (sampling policy == gradient
// policy); plain gradient ascent on the objective; validates every
// validation_interval iterations and returns the checkpoint with the best
// validation R_cer. Non-finite loss aborts with a diagnostic dump.
GrpoTrainResult grpo_train(const PolicyParams& start, const World& world,
                           const GrpoConfig& config, const AnchorSet& anchors,
                           const PromptSet& train_prompts, const PromptSet& val_prompts,
                           int threads, TrainLogWriter* log);

// ------------------------------------------------------------------- DPO ---

struct PreferencePair {
    size_t prompt_index = 0;
    AudioFrameSeq winner;
    AudioFrameSeq loser;
    double reward_gap = 0.0;
};

// Per prompt: K samples under the same regime as GRPO rollouts; winner =
// argmax R_total, loser = argmin (ties broken by lowest sample index); the
// prompt is skipped when the gap is below delta_min.
std::vector<PreferencePair> build_preference_pairs(const PolicyParams& params,
                                                   const World& world, const PromptSet& prompts,
                                                   const std::vector<size_t>& prompt_indices,
                                                   const GrpoConfig& sampling,
                                                   const AnchorSet& anchors, double delta_min,
                                                   uint64_t seed, int threads);

// loss = -mean log sigmoid(beta * [(log pi(y_w) - log ref(y_w)) -
//                                  (log pi(y_l) - log ref(y_l))])
std::pair<double, GradBuffer> dpo_loss(const PolicyParams& params,
                                       const PolicyParams& reference,
                                       const std::vector<PreferencePair>& pairs,
                                       const PromptSet& prompts, double beta, int threads);

struct DpoConfig {
    double beta = 0.1;
    double delta_min = 0.1;
    double learning_rate = 1e-3;
    int steps = 300;
    int batch_pairs = 8;
    uint64_t seed = 0;
};

PolicyParams dpo_train(const PolicyParams& start, const std::vector<PreferencePair>& pairs,
                       const PromptSet& prompts, const DpoConfig& config, int threads,
                       TrainLogWriter* log);

}  // namespace ttsrl
