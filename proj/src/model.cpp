#include "ttsrl/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace ttsrl {

using nlohmann::json;

void ModelConfig::validate() const {
    if (width < 2) throw ConfigError("width must be >= 2");
    if (heads < 1 || width % heads != 0)
        throw ConfigError("width must be divisible by head count");
    if (enc_blocks < 1 || dec_blocks < 1) throw ConfigError("need at least one block per stack");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (text_vocab != kTextVocab) throw ConfigError("text vocabulary is fixed at 256");
    if (audio_vocab < 4) throw ConfigError("audio_vocab must be >= 4");
    if (max_text_len < 1 || max_audio_len < 2) throw ConfigError("sequence limits too small");
    if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ConfigError("p_drop must be in [0,1)");
    if (mlp_mult < 1) throw ConfigError("mlp_mult must be >= 1");
}

ParamLayout ParamLayout::build(const ModelConfig& config) {
    config.validate();
    const int64_t d = config.width;
    const int64_t h = config.mlp_dim();
    ParamLayout layout;
    int64_t at = 0;
    auto take = [&at](int64_t n) {
        const int64_t offset = at;
        at += n;
        return offset;
    };

    layout.text_embed = take(int64_t(config.text_vocab) * d);
    layout.enc_pos = take(int64_t(config.max_text_len) * d);
    layout.null_text = take(d);
    for (int b = 0; b < config.enc_blocks; ++b) {
        EncBlockLayout blk;
        blk.norm_attn = take(d);
        blk.wq = take(d * d);
        blk.wk = take(d * d);
        blk.wv = take(d * d);
        blk.wo = take(d * d);
        blk.norm_mlp = take(d);
        blk.w_up = take(h * d);
        blk.w_down = take(d * h);
        layout.enc.push_back(blk);
    }
    layout.enc_final_norm = take(d);
    layout.frame_embed = take(int64_t(config.channels) * config.audio_vocab * d);
    layout.dec_pos = take(int64_t(config.max_audio_len) * d);
    layout.null_context = take(d);
    for (int b = 0; b < config.dec_blocks; ++b) {
        DecBlockLayout blk;
        blk.norm_self = take(d);
        blk.wq = take(d * d);
        blk.wk = take(d * d);
        blk.wv = take(d * d);
        blk.wo = take(d * d);
        blk.norm_cross = take(d);
        blk.cq = take(d * d);
        blk.ck = take(d * d);
        blk.cv = take(d * d);
        blk.co = take(d * d);
        blk.norm_mlp = take(d);
        blk.w_up = take(h * d);
        blk.w_down = take(d * h);
        layout.dec.push_back(blk);
    }
    layout.dec_final_norm = take(d);
    layout.out_heads = take(int64_t(config.channels) * config.audio_vocab * d);
    layout.total = at;
    return layout;
}

PolicyParams init_params(const ModelConfig& config, uint64_t seed) {
    config.validate();
    PolicyParams params;
    params.config = config;
    params.layout = ParamLayout::build(config);
    if (params.layout.total > config.param_budget)
        throw ConfigError("parameter count " + std::to_string(params.layout.total) +
                          " exceeds budget " + std::to_string(config.param_budget));
    params.theta.assign(static_cast<size_t>(params.layout.total), 0.0);

    Rng rng(derive_seed(seed, {0x1217}));
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.width));
    for (double& w : params.theta) w = rng.normal() * scale;

    // Norm gains start at identity.
    auto set_ones = [&params, &config](int64_t offset) {
        for (int i = 0; i < config.width; ++i)
            params.theta[static_cast<size_t>(offset + i)] = 1.0;
    };
    for (const auto& blk : params.layout.enc) {
        set_ones(blk.norm_attn);
        set_ones(blk.norm_mlp);
    }
    set_ones(params.layout.enc_final_norm);
    for (const auto& blk : params.layout.dec) {
        set_ones(blk.norm_self);
        set_ones(blk.norm_cross);
        set_ones(blk.norm_mlp);
    }
    set_ones(params.layout.dec_final_norm);

    log_info("init_params: " + std::to_string(params.layout.total) + " parameters (budget " +
             std::to_string(config.param_budget) + ")");
    return params;
}

double grad_norm(const GradBuffer& g) {
    double s = 0.0;
    for (double v : g) s += v * v;
    return std::sqrt(s);
}

namespace {

constexpr char kCkptMagic[] = "TTSRLCKPT1";

json config_to_json(const ModelConfig& c) {
    return json{{"width", c.width},
                {"enc_blocks", c.enc_blocks},
                {"dec_blocks", c.dec_blocks},
                {"heads", c.heads},
                {"channels", c.channels},
                {"text_vocab", c.text_vocab},
                {"audio_vocab", c.audio_vocab},
                {"max_text_len", c.max_text_len},
                {"max_audio_len", c.max_audio_len},
                {"mlp_mult", c.mlp_mult},
                {"p_drop", c.p_drop},
                {"param_budget", c.param_budget}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.width = j.at("width").get<int>();
    c.enc_blocks = j.at("enc_blocks").get<int>();
    c.dec_blocks = j.at("dec_blocks").get<int>();
    c.heads = j.at("heads").get<int>();
    c.channels = j.at("channels").get<int>();
    c.text_vocab = j.at("text_vocab").get<int>();
    c.audio_vocab = j.at("audio_vocab").get<int>();
    c.max_text_len = j.at("max_text_len").get<int>();
    c.max_audio_len = j.at("max_audio_len").get<int>();
    c.mlp_mult = j.at("mlp_mult").get<int>();
    c.p_drop = j.at("p_drop").get<double>();
    c.param_budget = j.at("param_budget").get<int64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json header;
    header["model"] = config_to_json(ckpt.params.config);
    header["stage"] = ckpt.stage;
    header["rng_state"] = ckpt.rng_state;
    header["param_count"] = ckpt.params.param_count();
    header["theta_hash"] =
        hex64(fnv1a64(ckpt.params.theta.data(), ckpt.params.theta.size() * sizeof(double)));
    const std::string head = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kCkptMagic, sizeof(kCkptMagic) - 1);
    const uint64_t head_len = head.size();
    out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(reinterpret_cast<const char*>(ckpt.params.theta.data()),
              static_cast<std::streamsize>(ckpt.params.theta.size() * sizeof(double)));
    if (!out) throw IoError("checkpoint write failure: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[sizeof(kCkptMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw IoError("bad checkpoint magic: " + path);
    uint64_t head_len = 0;
    in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
    std::string head(head_len, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    const json header = json::parse(head);

    Checkpoint ckpt;
    ckpt.params.config = config_from_json(header.at("model"));
    ckpt.params.layout = ParamLayout::build(ckpt.params.config);
    ckpt.stage = header.at("stage").get<std::string>();
    const auto rng = header.at("rng_state").get<std::vector<uint64_t>>();
    if (rng.size() != 4) throw IoError("bad rng state in checkpoint");
    std::copy(rng.begin(), rng.end(), ckpt.rng_state.begin());

    const int64_t count = header.at("param_count").get<int64_t>();
    if (count != ckpt.params.layout.total)
        throw IoError("checkpoint parameter count mismatch");
    ckpt.params.theta.resize(static_cast<size_t>(count));
    in.read(reinterpret_cast<char*>(ckpt.params.theta.data()),
            static_cast<std::streamsize>(ckpt.params.theta.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint tensor block: " + path);

    const std::string expect = header.at("theta_hash").get<std::string>();
    const std::string got =
        hex64(fnv1a64(ckpt.params.theta.data(), ckpt.params.theta.size() * sizeof(double)));
    if (expect != got) throw IoError("checkpoint hash mismatch: " + path);
    return ckpt;
}

}  // namespace ttsrl
