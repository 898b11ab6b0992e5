#include "ttsrl/rewards.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "ttsrl/policy.hpp"

namespace ttsrl {

using nlohmann::json;

void check_weights(const RewardWeights& weights) {
    if (weights.w_cer < 0 || weights.w_ssim < 0 || weights.w_pesq < 0)
        throw ConfigError("reward weights must be nonnegative");
    const double sum = weights.w_cer + weights.w_ssim + weights.w_pesq;
    if (std::abs(sum - 1.0) > 1e-9)
        log_warn("reward weights sum to " + std::to_string(sum) + ", not 1");
}

namespace {

double clip(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

double normalize_piecewise(double raw, const AnchorSpec& spec) {
    const double lo = std::min(spec.worst, spec.best);
    const double hi = std::max(spec.worst, spec.best);
    if (!(hi > lo)) throw ConfigError("normalize_piecewise: worst and best anchors coincide");
    const double x = clip(raw, lo, hi);

    const bool lower_better = spec.orientation == Orientation::kLowerIsBetter;
    if (spec.degenerate) {
        // single segment worst -> 0, best -> 1
        const double t = (x - spec.worst) / (spec.best - spec.worst);
        return clip(t, 0.0, 1.0);
    }
    const double mean = spec.baseline_mean;
    if (lower_better) {
        // worst > mean > best numerically (e.g. CER 1 / mean / 0)
        if (x >= mean) return 0.5 * (spec.worst - x) / (spec.worst - mean);
        return 0.5 + 0.5 * (mean - x) / (mean - spec.best);
    }
    if (x <= mean) return 0.5 * (x - spec.worst) / (mean - spec.worst);
    return 0.5 + 0.5 * (x - mean) / (spec.best - mean);
}

double normalize_pesq(double raw) { return clip(raw, 0.0, 4.5) / 4.5; }

double aggregate(double r_cer, double r_ssim, double r_pesq, const RewardWeights& weights) {
    auto in_range = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_range(r_cer) || !in_range(r_ssim) || !in_range(r_pesq))
        throw InvalidInput("aggregate: reward component out of [0,1]");
    return weights.w_cer * r_cer + weights.w_ssim * r_ssim + weights.w_pesq * r_pesq;
}

NormalizedRewards normalize_scores(const RawScores& raw, const AnchorSet& anchors) {
    NormalizedRewards r;
    r.r_cer = normalize_piecewise(raw.cer, anchors.cer);
    r.r_ssim = normalize_piecewise(raw.ssim, anchors.ssim);
    r.r_pesq = normalize_pesq(raw.pesq);
    r.r_total = aggregate(r.r_cer, r.r_ssim, r.r_pesq, anchors.weights);
    return r;
}

RawScores score_response_oracles(const World& world, const Prompt& prompt,
                                 const AudioFrameSeq& response) {
    RawScores raw;
    raw.cer = character_error_rate(prompt.text, asr_decode(world, response));
    raw.ssim = speaker_similarity(world, prompt.context_audio, response);
    raw.pesq = quality_score(world, response);
    return raw;
}

namespace {

AnchorSpec finalize_anchor(Orientation orientation, double worst, double best, double mean,
                           const char* name) {
    AnchorSpec spec;
    spec.orientation = orientation;
    spec.worst = worst;
    spec.best = best;
    spec.baseline_mean = mean;
    const double lo = std::min(worst, best);
    const double hi = std::max(worst, best);
    const double margin = 1e-9 * (hi - lo);
    if (!(mean > lo + margin) || !(mean < hi - margin)) {
        log_warn(std::string("baseline mean anchor for ") + name +
                 " is degenerate; falling back to a single linear segment");
        spec.degenerate = true;
        spec.baseline_mean = 0.5 * (worst + best);
    }
    return spec;
}

}  // namespace

AnchorEstimate estimate_baseline_anchors(const PolicyParams& params, const World& world,
                                         const PromptSet& prompts, const RewardWeights& weights,
                                         const AnchorSampling& sampling, uint64_t seed,
                                         int threads) {
    if (prompts.empty()) throw InvalidInput("estimate_baseline_anchors: empty prompt set");
    if (sampling.n_samples < 1)
        throw InvalidInput("estimate_baseline_anchors: n_samples must be >= 1");
    check_weights(weights);

    const size_t total = prompts.size() * static_cast<size_t>(sampling.n_samples);
    std::vector<RawScores> scores(total);
    parallel_for(total, threads, [&](size_t idx) {
        const size_t pi = idx / static_cast<size_t>(sampling.n_samples);
        Rng rng(derive_seed(seed, {0xA2C4, idx}));
        SampleSettings settings;
        settings.temperature = sampling.temperature;
        settings.use_cfg = rng.bernoulli(sampling.cfg_probability);
        settings.cfg_scale = sampling.cfg_scale;
        const SampledResponse sampled =
            sample_response(params, prompts[pi].text, prompts[pi].context_audio, settings, rng);
        scores[idx] = score_response_oracles(world, prompts[pi], sampled.response);
    });

    double sum_cer = 0.0, sum_ssim = 0.0, sum_pesq = 0.0;
    for (const RawScores& s : scores) {
        sum_cer += s.cer;  // already clipped at 1 by the CER oracle
        sum_ssim += s.ssim;
        sum_pesq += s.pesq;
    }
    const double n = static_cast<double>(total);

    AnchorEstimate est;
    est.n_scored = static_cast<int>(total);
    est.mean_raw_cer = sum_cer / n;
    est.mean_raw_ssim = sum_ssim / n;
    est.mean_raw_pesq = sum_pesq / n;
    est.anchors.weights = weights;
    est.anchors.cer =
        finalize_anchor(Orientation::kLowerIsBetter, 1.0, 0.0, est.mean_raw_cer, "cer");
    est.anchors.ssim =
        finalize_anchor(Orientation::kHigherIsBetter, 0.0, 1.0, est.mean_raw_ssim, "ssim");
    return est;
}

namespace {

json anchor_to_json(const AnchorSpec& a) {
    return json{{"orientation",
                 a.orientation == Orientation::kLowerIsBetter ? "lower_is_better"
                                                              : "higher_is_better"},
                {"worst", a.worst},
                {"baseline_mean", a.baseline_mean},
                {"best", a.best},
                {"degenerate", a.degenerate}};
}

AnchorSpec anchor_from_json(const json& j) {
    AnchorSpec a;
    a.orientation = j.at("orientation").get<std::string>() == "lower_is_better"
                        ? Orientation::kLowerIsBetter
                        : Orientation::kHigherIsBetter;
    a.worst = j.at("worst").get<double>();
    a.baseline_mean = j.at("baseline_mean").get<double>();
    a.best = j.at("best").get<double>();
    a.degenerate = j.at("degenerate").get<bool>();
    return a;
}

}  // namespace

std::string anchors_to_json(const AnchorEstimate& est) {
    json j;
    j["version"] = 1;
    j["cer"] = anchor_to_json(est.anchors.cer);
    j["ssim"] = anchor_to_json(est.anchors.ssim);
    j["weights"] = json{{"cer", est.anchors.weights.w_cer},
                        {"ssim", est.anchors.weights.w_ssim},
                        {"pesq", est.anchors.weights.w_pesq}};
    j["mean_raw_cer"] = est.mean_raw_cer;
    j["mean_raw_ssim"] = est.mean_raw_ssim;
    j["mean_raw_pesq"] = est.mean_raw_pesq;
    j["n_scored"] = est.n_scored;
    return j.dump(2) + "\n";
}

AnchorEstimate anchors_from_json(const std::string& text) {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != 1) throw IoError("unsupported anchors file version");
    AnchorEstimate est;
    est.anchors.cer = anchor_from_json(j.at("cer"));
    est.anchors.ssim = anchor_from_json(j.at("ssim"));
    est.anchors.weights.w_cer = j.at("weights").at("cer").get<double>();
    est.anchors.weights.w_ssim = j.at("weights").at("ssim").get<double>();
    est.anchors.weights.w_pesq = j.at("weights").at("pesq").get<double>();
    est.mean_raw_cer = j.at("mean_raw_cer").get<double>();
    est.mean_raw_ssim = j.at("mean_raw_ssim").get<double>();
    est.mean_raw_pesq = j.at("mean_raw_pesq").get<double>();
    est.n_scored = j.at("n_scored").get<int>();
    return est;
}

void save_anchors(const AnchorEstimate& est, const std::string& path) {
    write_file(path, anchors_to_json(est));
}

AnchorEstimate load_anchors(const std::string& path) {
    return anchors_from_json(read_file(path));
}

}  // namespace ttsrl
