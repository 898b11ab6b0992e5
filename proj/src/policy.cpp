#include "ttsrl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ttsrl {

namespace {

constexpr double kRmsEps = 1e-6;

// out = W x, W row-major [rows][cols]
inline void matvec(const double* w, const double* x, double* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* wr = w + static_cast<size_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += wr[c] * x[c];
        out[r] = acc;
    }
}

// dx += W^T dy
inline void matvec_t_add(const double* w, const double* dy, double* dx, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* wr = w + static_cast<size_t>(r) * cols;
        const double g = dy[r];
        if (g == 0.0) continue;
        for (int c = 0; c < cols; ++c) dx[c] += wr[c] * g;
    }
}

// dW += dy x^T
inline void outer_add(double* dw, const double* dy, const double* x, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double* dwr = dw + static_cast<size_t>(r) * cols;
        const double g = dy[r];
        if (g == 0.0) continue;
        for (int c = 0; c < cols; ++c) dwr[c] += g * x[c];
    }
}

inline double rms_of(const double* x, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += x[i] * x[i];
    return std::sqrt(s / d + kRmsEps);
}

inline void rms_fwd(const double* x, const double* gain, double* y, int d, double* rms_out) {
    const double r = rms_of(x, d);
    const double inv = 1.0 / r;
    for (int i = 0; i < d; ++i) y[i] = gain[i] * x[i] * inv;
    *rms_out = r;
}

// y_i = g_i x_i / r with r = sqrt(mean(x^2)+eps):
//   dx_i += g_i dy_i / r - x_i * sum_j(dy_j g_j x_j) / (d r^3)
//   dg_i += dy_i x_i / r
inline void rms_bwd(const double* x, const double* gain, double rms, const double* dy,
                    double* dx_add, double* dg_add, int d) {
    const double inv = 1.0 / rms;
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += dy[i] * gain[i] * x[i];
    const double k = s * inv * inv * inv / d;
    for (int i = 0; i < d; ++i) {
        dx_add[i] += gain[i] * dy[i] * inv - x[i] * k;
        dg_add[i] += dy[i] * x[i] * inv;
    }
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double silu(double v) { return v * sigmoid(v); }
inline double silu_deriv(double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
}

// In-place softmax with max subtraction, fixed ascending accumulation order.
inline void softmax_inplace(double* v, int n) {
    double m = v[0];
    for (int i = 1; i < n; ++i) m = std::max(m, v[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - m);
        z += v[i];
    }
    const double inv = 1.0 / z;
    for (int i = 0; i < n; ++i) v[i] *= inv;
}

inline double log_sum_exp(const double* v, int n) {
    double m = v[0];
    for (int i = 1; i < n; ++i) m = std::max(m, v[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(v[i] - m);
    return m + std::log(z);
}

struct EncBlockTrace {
    std::vector<double> xin, n1, q, k, v, attnout, xmid, n2, h_up, h_act;
    std::vector<double> rms1, rms2;
    std::vector<double> att;  // [heads][len][len]
};

struct EncTraceImpl {
    bool dropped = false;
    int len = 0;
    std::vector<TextToken> tokens;
    std::vector<EncBlockTrace> blocks;
    std::vector<double> xfinal;
    std::vector<double> rmsF;
    std::vector<double> out;  // [len*D]
};

enum class PosKind : uint8_t { kContextFrame, kNullContext, kBos, kResponseFrame };

struct DecBlockState {
    std::vector<double> ck, cv;  // cross K/V from encoder output [enc_len*D]
    std::vector<double> k, v;    // causal self-attention caches [len*D]
    std::vector<double> xin, n1, q, attnout, xmid, n2, qc, cattout, xmid2, n3, h_up, h_act;
    std::vector<double> rms1, rms2, rms3;
    std::vector<double> att;  // ragged: heads*(p+1) doubles per position
    std::vector<size_t> att_off;
    std::vector<double> catt;  // [len][heads][enc_len]
};

struct DecState {
    int len = 0;
    std::vector<PosKind> kinds;
    std::vector<FrameToken> tokens;  // [len*C], zeros at null position
    std::vector<DecBlockState> blocks;
    std::vector<double> xfinal;  // [len*D]
};

struct ScoredHead {
    std::vector<int> positions;      // decoder positions carrying a loss
    std::vector<double> hnorm;       // [n][D]
    std::vector<double> rmsF;        // [n]
    std::vector<double> probs;       // [n][C][V]
    std::vector<FrameToken> target;  // [n*C]
};

}  // namespace

struct ForwardTrace {
    EncTraceImpl enc;
    DecState dec;
    ScoredHead head;
};

namespace {

class Net {
public:
    explicit Net(const PolicyParams& params)
        : P(params),
          C(params.config),
          L(params.layout),
          D(params.config.width),
          NH(params.config.heads),
          HD(params.config.head_dim()),
          H(params.config.mlp_dim()),
          V(params.config.audio_vocab),
          inv_sqrt_hd(1.0 / std::sqrt(static_cast<double>(params.config.head_dim()))) {}

    const double* th(int64_t off) const { return P.theta.data() + off; }

    // ------------------------------------------------------------ encoder ---

    EncTraceImpl encode(const TextSeq* text) const {
        EncTraceImpl tr;
        tr.dropped = (text == nullptr);
        if (text != nullptr) {
            if (text->empty()) throw InvalidInput("encoder: empty text");
            if (static_cast<int>(text->size()) > C.max_text_len)
                throw LengthExceeded("text length " + std::to_string(text->size()) +
                                     " exceeds max_text_len");
            tr.tokens = text->tokens;
            tr.len = static_cast<int>(text->size());
        } else {
            tr.len = 1;
        }
        const int n = tr.len;
        std::vector<double> x(static_cast<size_t>(n) * D);
        for (int p = 0; p < n; ++p) {
            const double* emb = tr.dropped
                                    ? th(L.null_text)
                                    : th(L.text_embed + int64_t(tr.tokens[static_cast<size_t>(p)]) * D);
            const double* pos = th(L.enc_pos + int64_t(p) * D);
            double* xp = x.data() + static_cast<size_t>(p) * D;
            for (int i = 0; i < D; ++i) xp[i] = emb[i] + pos[i];
        }

        tr.blocks.resize(static_cast<size_t>(C.enc_blocks));
        for (int b = 0; b < C.enc_blocks; ++b) {
            auto& blk = tr.blocks[static_cast<size_t>(b)];
            const auto& lay = L.enc[static_cast<size_t>(b)];
            blk.xin = x;
            blk.n1.resize(x.size());
            blk.q.resize(x.size());
            blk.k.resize(x.size());
            blk.v.resize(x.size());
            blk.rms1.resize(static_cast<size_t>(n));
            for (int p = 0; p < n; ++p) {
                const double* xp = blk.xin.data() + static_cast<size_t>(p) * D;
                double* np = blk.n1.data() + static_cast<size_t>(p) * D;
                rms_fwd(xp, th(lay.norm_attn), np, D, &blk.rms1[static_cast<size_t>(p)]);
                matvec(th(lay.wq), np, blk.q.data() + static_cast<size_t>(p) * D, D, D);
                matvec(th(lay.wk), np, blk.k.data() + static_cast<size_t>(p) * D, D, D);
                matvec(th(lay.wv), np, blk.v.data() + static_cast<size_t>(p) * D, D, D);
            }
            // bidirectional attention
            blk.att.assign(static_cast<size_t>(NH) * n * n, 0.0);
            blk.attnout.assign(x.size(), 0.0);
            std::vector<double> scores(static_cast<size_t>(n));
            for (int p = 0; p < n; ++p) {
                for (int h = 0; h < NH; ++h) {
                    const double* qh = blk.q.data() + static_cast<size_t>(p) * D + h * HD;
                    for (int j = 0; j < n; ++j) {
                        const double* kh = blk.k.data() + static_cast<size_t>(j) * D + h * HD;
                        double s = 0.0;
                        for (int i = 0; i < HD; ++i) s += qh[i] * kh[i];
                        scores[static_cast<size_t>(j)] = s * inv_sqrt_hd;
                    }
                    softmax_inplace(scores.data(), n);
                    double* att =
                        blk.att.data() + (static_cast<size_t>(h) * n + p) * n;
                    std::copy(scores.begin(), scores.end(), att);
                    double* ctx = blk.attnout.data() + static_cast<size_t>(p) * D + h * HD;
                    for (int j = 0; j < n; ++j) {
                        const double* vh = blk.v.data() + static_cast<size_t>(j) * D + h * HD;
                        const double pj = att[j];
                        for (int i = 0; i < HD; ++i) ctx[i] += pj * vh[i];
                    }
                }
            }
            blk.xmid.resize(x.size());
            std::vector<double> proj(static_cast<size_t>(D));
            for (int p = 0; p < n; ++p) {
                matvec(th(lay.wo), blk.attnout.data() + static_cast<size_t>(p) * D, proj.data(), D, D);
                const double* xp = blk.xin.data() + static_cast<size_t>(p) * D;
                double* mp = blk.xmid.data() + static_cast<size_t>(p) * D;
                for (int i = 0; i < D; ++i) mp[i] = xp[i] + proj[i];
            }
            // MLP
            blk.n2.resize(x.size());
            blk.rms2.resize(static_cast<size_t>(n));
            blk.h_up.resize(static_cast<size_t>(n) * H);
            blk.h_act.resize(static_cast<size_t>(n) * H);
            std::vector<double> down(static_cast<size_t>(D));
            for (int p = 0; p < n; ++p) {
                const double* mp = blk.xmid.data() + static_cast<size_t>(p) * D;
                double* np = blk.n2.data() + static_cast<size_t>(p) * D;
                rms_fwd(mp, th(lay.norm_mlp), np, D, &blk.rms2[static_cast<size_t>(p)]);
                double* up = blk.h_up.data() + static_cast<size_t>(p) * H;
                matvec(th(lay.w_up), np, up, H, D);
                double* act = blk.h_act.data() + static_cast<size_t>(p) * H;
                for (int i = 0; i < H; ++i) act[i] = silu(up[i]);
                matvec(th(lay.w_down), act, down.data(), D, H);
                double* xp = x.data() + static_cast<size_t>(p) * D;
                for (int i = 0; i < D; ++i) xp[i] = mp[i] + down[i];
            }
        }
        tr.xfinal = x;
        tr.rmsF.resize(static_cast<size_t>(n));
        tr.out.resize(x.size());
        for (int p = 0; p < n; ++p) {
            rms_fwd(x.data() + static_cast<size_t>(p) * D, th(L.enc_final_norm),
                    tr.out.data() + static_cast<size_t>(p) * D, D, &tr.rmsF[static_cast<size_t>(p)]);
        }
        return tr;
    }

    // ------------------------------------------------------------ decoder ---

    void dec_init(DecState& st, const EncTraceImpl& enc) const {
        st.blocks.resize(static_cast<size_t>(C.dec_blocks));
        const int el = enc.len;
        for (int b = 0; b < C.dec_blocks; ++b) {
            auto& blk = st.blocks[static_cast<size_t>(b)];
            const auto& lay = L.dec[static_cast<size_t>(b)];
            blk.ck.resize(static_cast<size_t>(el) * D);
            blk.cv.resize(static_cast<size_t>(el) * D);
            for (int j = 0; j < el; ++j) {
                const double* ej = enc.out.data() + static_cast<size_t>(j) * D;
                matvec(th(lay.ck), ej, blk.ck.data() + static_cast<size_t>(j) * D, D, D);
                matvec(th(lay.cv), ej, blk.cv.data() + static_cast<size_t>(j) * D, D, D);
            }
        }
    }

    // Processes one decoder position. tokens must have C.channels entries for
    // frame positions and may be null for the null-context position.
    void dec_feed(DecState& st, const EncTraceImpl& enc, PosKind kind,
                  const FrameToken* tokens) const {
        const int p = st.len;
        if (p >= C.max_audio_len)
            throw LengthExceeded("decoder length " + std::to_string(p + 1) +
                                 " exceeds max_audio_len");
        st.kinds.push_back(kind);
        for (int c = 0; c < C.channels; ++c)
            st.tokens.push_back(kind == PosKind::kNullContext ? FrameToken{0} : tokens[c]);

        std::vector<double> x(static_cast<size_t>(D));
        {
            const double* pos = th(L.dec_pos + int64_t(p) * D);
            if (kind == PosKind::kNullContext) {
                const double* nc = th(L.null_context);
                for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = nc[i] + pos[i];
            } else {
                for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = pos[i];
                for (int c = 0; c < C.channels; ++c) {
                    const double* emb =
                        th(L.frame_embed + (int64_t(c) * V + tokens[c]) * D);
                    for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] += emb[i];
                }
            }
        }

        std::vector<double> tmp_d(static_cast<size_t>(D));
        std::vector<double> tmp_h(static_cast<size_t>(H));
        std::vector<double> scores(static_cast<size_t>(std::max(p + 1, enc.len)));

        for (int b = 0; b < C.dec_blocks; ++b) {
            auto& blk = st.blocks[static_cast<size_t>(b)];
            const auto& lay = L.dec[static_cast<size_t>(b)];
            auto append = [](std::vector<double>& vec, const double* src, int count) {
                vec.insert(vec.end(), src, src + count);
            };
            append(blk.xin, x.data(), D);
            const double* xin = blk.xin.data() + static_cast<size_t>(p) * D;

            // causal self-attention
            double rms = 0.0;
            rms_fwd(xin, th(lay.norm_self), tmp_d.data(), D, &rms);
            blk.rms1.push_back(rms);
            append(blk.n1, tmp_d.data(), D);
            const double* n1 = blk.n1.data() + static_cast<size_t>(p) * D;

            std::vector<double> qv(static_cast<size_t>(D));
            matvec(th(lay.wq), n1, qv.data(), D, D);
            append(blk.q, qv.data(), D);
            matvec(th(lay.wk), n1, tmp_d.data(), D, D);
            append(blk.k, tmp_d.data(), D);
            matvec(th(lay.wv), n1, tmp_d.data(), D, D);
            append(blk.v, tmp_d.data(), D);

            blk.att_off.push_back(blk.att.size());
            std::vector<double> attnout(static_cast<size_t>(D), 0.0);
            for (int h = 0; h < NH; ++h) {
                const double* qh = qv.data() + h * HD;
                for (int j = 0; j <= p; ++j) {
                    const double* kh = blk.k.data() + static_cast<size_t>(j) * D + h * HD;
                    double s = 0.0;
                    for (int i = 0; i < HD; ++i) s += qh[i] * kh[i];
                    scores[static_cast<size_t>(j)] = s * inv_sqrt_hd;
                }
                softmax_inplace(scores.data(), p + 1);
                blk.att.insert(blk.att.end(), scores.begin(), scores.begin() + p + 1);
                double* ctx = attnout.data() + h * HD;
                for (int j = 0; j <= p; ++j) {
                    const double* vh = blk.v.data() + static_cast<size_t>(j) * D + h * HD;
                    const double pj = scores[static_cast<size_t>(j)];
                    for (int i = 0; i < HD; ++i) ctx[i] += pj * vh[i];
                }
            }
            append(blk.attnout, attnout.data(), D);
            matvec(th(lay.wo), attnout.data(), tmp_d.data(), D, D);
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = xin[i] + tmp_d[static_cast<size_t>(i)];
            append(blk.xmid, x.data(), D);
            const double* xmid = blk.xmid.data() + static_cast<size_t>(p) * D;

            // cross-attention over encoder output
            rms_fwd(xmid, th(lay.norm_cross), tmp_d.data(), D, &rms);
            blk.rms2.push_back(rms);
            append(blk.n2, tmp_d.data(), D);
            std::vector<double> qc(static_cast<size_t>(D));
            matvec(th(lay.cq), blk.n2.data() + static_cast<size_t>(p) * D, qc.data(), D, D);
            append(blk.qc, qc.data(), D);

            std::vector<double> cattnout(static_cast<size_t>(D), 0.0);
            for (int h = 0; h < NH; ++h) {
                const double* qh = qc.data() + h * HD;
                for (int j = 0; j < enc.len; ++j) {
                    const double* kh = blk.ck.data() + static_cast<size_t>(j) * D + h * HD;
                    double s = 0.0;
                    for (int i = 0; i < HD; ++i) s += qh[i] * kh[i];
                    scores[static_cast<size_t>(j)] = s * inv_sqrt_hd;
                }
                softmax_inplace(scores.data(), enc.len);
                blk.catt.insert(blk.catt.end(), scores.begin(), scores.begin() + enc.len);
                double* ctx = cattnout.data() + h * HD;
                for (int j = 0; j < enc.len; ++j) {
                    const double* vh = blk.cv.data() + static_cast<size_t>(j) * D + h * HD;
                    const double pj = scores[static_cast<size_t>(j)];
                    for (int i = 0; i < HD; ++i) ctx[i] += pj * vh[i];
                }
            }
            append(blk.cattout, cattnout.data(), D);
            matvec(th(lay.co), cattnout.data(), tmp_d.data(), D, D);
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = xmid[i] + tmp_d[static_cast<size_t>(i)];
            append(blk.xmid2, x.data(), D);
            const double* xmid2 = blk.xmid2.data() + static_cast<size_t>(p) * D;

            // MLP
            rms_fwd(xmid2, th(lay.norm_mlp), tmp_d.data(), D, &rms);
            blk.rms3.push_back(rms);
            append(blk.n3, tmp_d.data(), D);
            matvec(th(lay.w_up), blk.n3.data() + static_cast<size_t>(p) * D, tmp_h.data(), H, D);
            append(blk.h_up, tmp_h.data(), H);
            for (int i = 0; i < H; ++i) tmp_h[static_cast<size_t>(i)] = silu(tmp_h[static_cast<size_t>(i)]);
            append(blk.h_act, tmp_h.data(), H);
            matvec(th(lay.w_down), tmp_h.data(), tmp_d.data(), D, H);
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = xmid2[i] + tmp_d[static_cast<size_t>(i)];
        }
        st.xfinal.insert(st.xfinal.end(), x.begin(), x.end());
        st.len += 1;
    }

    // Final norm + per-channel heads at one position. logits has C*V entries.
    void head_logits(const DecState& st, int p, double* hnorm, double* rms_out,
                     double* logits) const {
        rms_fwd(st.xfinal.data() + static_cast<size_t>(p) * D, th(L.dec_final_norm), hnorm, D,
                rms_out);
        for (int c = 0; c < C.channels; ++c)
            matvec(th(L.out_heads + int64_t(c) * V * D), hnorm, logits + static_cast<size_t>(c) * V,
                   V, D);
    }

    // ----------------------------------------------------------- backward ---

    void backward(const ForwardTrace& tr, double scale, GradBuffer& grad) const {
        const DecState& st = tr.dec;
        const EncTraceImpl& enc = tr.enc;
        const int n = st.len;
        const int el = enc.len;

        std::vector<double> dxfinal(static_cast<size_t>(n) * D, 0.0);
        std::vector<double> dhnorm(static_cast<size_t>(D));
        std::vector<double> dlogits(static_cast<size_t>(V));

        // heads + decoder final norm
        const auto& head = tr.head;
        for (size_t s = 0; s < head.positions.size(); ++s) {
            const int p = head.positions[s];
            const double* hn = head.hnorm.data() + s * static_cast<size_t>(D);
            std::fill(dhnorm.begin(), dhnorm.end(), 0.0);
            for (int c = 0; c < C.channels; ++c) {
                const double* probs =
                    head.probs.data() + (s * C.channels + static_cast<size_t>(c)) * V;
                const FrameToken t = head.target[s * C.channels + static_cast<size_t>(c)];
                for (int i = 0; i < V; ++i) dlogits[static_cast<size_t>(i)] = -scale * probs[i];
                dlogits[t] += scale;
                double* dw = grad.data() + L.out_heads + int64_t(c) * V * D;
                outer_add(dw, dlogits.data(), hn, V, D);
                matvec_t_add(th(L.out_heads + int64_t(c) * V * D), dlogits.data(), dhnorm.data(),
                             V, D);
            }
            rms_bwd(st.xfinal.data() + static_cast<size_t>(p) * D, th(L.dec_final_norm),
                    head.rmsF[s], dhnorm.data(), dxfinal.data() + static_cast<size_t>(p) * D,
                    grad.data() + L.dec_final_norm, D);
        }

        // decoder blocks, reversed
        std::vector<double> dx = dxfinal;  // gradient wrt current stage output
        std::vector<double> dEncOut(static_cast<size_t>(el) * D, 0.0);
        std::vector<double> dh_act(static_cast<size_t>(H)), dh_up(static_cast<size_t>(H));
        std::vector<double> dn(static_cast<size_t>(D));
        std::vector<double> dq(static_cast<size_t>(n) * D), dk(static_cast<size_t>(n) * D),
            dv(static_cast<size_t>(n) * D);
        std::vector<double> dck(static_cast<size_t>(el) * D), dcv(static_cast<size_t>(el) * D);
        std::vector<double> dattn(static_cast<size_t>(D));
        std::vector<double> dprob(static_cast<size_t>(std::max(n, el)));

        for (int b = C.dec_blocks - 1; b >= 0; --b) {
            const auto& blk = st.blocks[static_cast<size_t>(b)];
            const auto& lay = L.dec[static_cast<size_t>(b)];

            // MLP: xout = xmid2 + W_down silu(W_up n3(xmid2))
            for (int p = 0; p < n; ++p) {
                const double* dxp = dx.data() + static_cast<size_t>(p) * D;
                const double* act = blk.h_act.data() + static_cast<size_t>(p) * H;
                const double* up = blk.h_up.data() + static_cast<size_t>(p) * H;
                outer_add(grad.data() + lay.w_down, dxp, act, D, H);
                std::fill(dh_act.begin(), dh_act.end(), 0.0);
                matvec_t_add(th(lay.w_down), dxp, dh_act.data(), D, H);
                for (int i = 0; i < H; ++i)
                    dh_up[static_cast<size_t>(i)] = dh_act[static_cast<size_t>(i)] * silu_deriv(up[i]);
                const double* n3 = blk.n3.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.w_up, dh_up.data(), n3, H, D);
                std::fill(dn.begin(), dn.end(), 0.0);
                matvec_t_add(th(lay.w_up), dh_up.data(), dn.data(), H, D);
                rms_bwd(blk.xmid2.data() + static_cast<size_t>(p) * D, th(lay.norm_mlp),
                        blk.rms3[static_cast<size_t>(p)], dn.data(),
                        dx.data() + static_cast<size_t>(p) * D, grad.data() + lay.norm_mlp, D);
            }
            // dx is now d(xmid2)

            // cross-attention: xmid2 = xmid + Co catt(qc(n2(xmid)), ck, cv)
            std::fill(dck.begin(), dck.end(), 0.0);
            std::fill(dcv.begin(), dcv.end(), 0.0);
            for (int p = 0; p < n; ++p) {
                const double* dxp = dx.data() + static_cast<size_t>(p) * D;
                const double* cattout = blk.cattout.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.co, dxp, cattout, D, D);
                std::fill(dattn.begin(), dattn.end(), 0.0);
                matvec_t_add(th(lay.co), dxp, dattn.data(), D, D);

                std::vector<double> dqc(static_cast<size_t>(D), 0.0);
                const double* qc = blk.qc.data() + static_cast<size_t>(p) * D;
                for (int h = 0; h < NH; ++h) {
                    const double* probs =
                        blk.catt.data() + (static_cast<size_t>(p) * NH + h) * el;
                    const double* da = dattn.data() + h * HD;
                    double s_dot = 0.0;
                    for (int j = 0; j < el; ++j) {
                        const double* vh = blk.cv.data() + static_cast<size_t>(j) * D + h * HD;
                        double dp = 0.0;
                        for (int i = 0; i < HD; ++i) dp += da[i] * vh[i];
                        dprob[static_cast<size_t>(j)] = dp;
                        s_dot += probs[j] * dp;
                    }
                    for (int j = 0; j < el; ++j) {
                        const double ds = probs[j] * (dprob[static_cast<size_t>(j)] - s_dot) *
                                          inv_sqrt_hd;
                        const double* kh = blk.ck.data() + static_cast<size_t>(j) * D + h * HD;
                        double* dqh = dqc.data() + h * HD;
                        double* dkh = dck.data() + static_cast<size_t>(j) * D + h * HD;
                        double* dvh = dcv.data() + static_cast<size_t>(j) * D + h * HD;
                        const double* qh = qc + h * HD;
                        const double pj = probs[j];
                        for (int i = 0; i < HD; ++i) {
                            dqh[i] += ds * kh[i];
                            dkh[i] += ds * qh[i];
                            dvh[i] += pj * da[i];
                        }
                    }
                }
                const double* n2 = blk.n2.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.cq, dqc.data(), n2, D, D);
                std::fill(dn.begin(), dn.end(), 0.0);
                matvec_t_add(th(lay.cq), dqc.data(), dn.data(), D, D);
                rms_bwd(blk.xmid.data() + static_cast<size_t>(p) * D, th(lay.norm_cross),
                        blk.rms2[static_cast<size_t>(p)], dn.data(),
                        dx.data() + static_cast<size_t>(p) * D, grad.data() + lay.norm_cross, D);
            }
            for (int j = 0; j < el; ++j) {
                const double* ej = enc.out.data() + static_cast<size_t>(j) * D;
                const double* dckj = dck.data() + static_cast<size_t>(j) * D;
                const double* dcvj = dcv.data() + static_cast<size_t>(j) * D;
                outer_add(grad.data() + lay.ck, dckj, ej, D, D);
                outer_add(grad.data() + lay.cv, dcvj, ej, D, D);
                matvec_t_add(th(lay.ck), dckj, dEncOut.data() + static_cast<size_t>(j) * D, D, D);
                matvec_t_add(th(lay.cv), dcvj, dEncOut.data() + static_cast<size_t>(j) * D, D, D);
            }
            // dx is now d(xmid)

            // causal self-attention: xmid = xin + Wo att(q,k,v over n1(xin))
            std::fill(dq.begin(), dq.end(), 0.0);
            std::fill(dk.begin(), dk.end(), 0.0);
            std::fill(dv.begin(), dv.end(), 0.0);
            for (int p = 0; p < n; ++p) {
                const double* dxp = dx.data() + static_cast<size_t>(p) * D;
                const double* attnout = blk.attnout.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.wo, dxp, attnout, D, D);
                std::fill(dattn.begin(), dattn.end(), 0.0);
                matvec_t_add(th(lay.wo), dxp, dattn.data(), D, D);

                const double* qp = blk.q.data() + static_cast<size_t>(p) * D;
                for (int h = 0; h < NH; ++h) {
                    const double* probs = blk.att.data() + blk.att_off[static_cast<size_t>(p)] +
                                          static_cast<size_t>(h) * (p + 1);
                    const double* da = dattn.data() + h * HD;
                    double s_dot = 0.0;
                    for (int j = 0; j <= p; ++j) {
                        const double* vh = blk.v.data() + static_cast<size_t>(j) * D + h * HD;
                        double dp = 0.0;
                        for (int i = 0; i < HD; ++i) dp += da[i] * vh[i];
                        dprob[static_cast<size_t>(j)] = dp;
                        s_dot += probs[j] * dp;
                    }
                    for (int j = 0; j <= p; ++j) {
                        const double ds = probs[j] * (dprob[static_cast<size_t>(j)] - s_dot) *
                                          inv_sqrt_hd;
                        const double* kh = blk.k.data() + static_cast<size_t>(j) * D + h * HD;
                        const double* qh = qp + h * HD;
                        double* dqh = dq.data() + static_cast<size_t>(p) * D + h * HD;
                        double* dkh = dk.data() + static_cast<size_t>(j) * D + h * HD;
                        double* dvh = dv.data() + static_cast<size_t>(j) * D + h * HD;
                        const double pj = probs[j];
                        for (int i = 0; i < HD; ++i) {
                            dqh[i] += ds * kh[i];
                            dkh[i] += ds * qh[i];
                            dvh[i] += pj * da[i];
                        }
                    }
                }
            }
            for (int p = 0; p < n; ++p) {
                const double* n1 = blk.n1.data() + static_cast<size_t>(p) * D;
                const double* dqp = dq.data() + static_cast<size_t>(p) * D;
                const double* dkp = dk.data() + static_cast<size_t>(p) * D;
                const double* dvp = dv.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.wq, dqp, n1, D, D);
                outer_add(grad.data() + lay.wk, dkp, n1, D, D);
                outer_add(grad.data() + lay.wv, dvp, n1, D, D);
                std::fill(dn.begin(), dn.end(), 0.0);
                matvec_t_add(th(lay.wq), dqp, dn.data(), D, D);
                matvec_t_add(th(lay.wk), dkp, dn.data(), D, D);
                matvec_t_add(th(lay.wv), dvp, dn.data(), D, D);
                rms_bwd(blk.xin.data() + static_cast<size_t>(p) * D, th(lay.norm_self),
                        blk.rms1[static_cast<size_t>(p)], dn.data(),
                        dx.data() + static_cast<size_t>(p) * D, grad.data() + lay.norm_self, D);
            }
            // dx is now d(xin) = d(previous block output)
        }

        // decoder embeddings
        for (int p = 0; p < n; ++p) {
            const double* dxp = dx.data() + static_cast<size_t>(p) * D;
            double* dpos = grad.data() + L.dec_pos + int64_t(p) * D;
            for (int i = 0; i < D; ++i) dpos[i] += dxp[i];
            if (st.kinds[static_cast<size_t>(p)] == PosKind::kNullContext) {
                double* dnul = grad.data() + L.null_context;
                for (int i = 0; i < D; ++i) dnul[i] += dxp[i];
            } else {
                for (int c = 0; c < C.channels; ++c) {
                    const FrameToken t = st.tokens[static_cast<size_t>(p) * C.channels +
                                                   static_cast<size_t>(c)];
                    double* demb = grad.data() + L.frame_embed + (int64_t(c) * V + t) * D;
                    for (int i = 0; i < D; ++i) demb[i] += dxp[i];
                }
            }
        }

        backward_encoder(enc, dEncOut, grad);
    }

    void backward_encoder(const EncTraceImpl& enc, const std::vector<double>& dEncOut,
                          GradBuffer& grad) const {
        const int n = enc.len;
        std::vector<double> dx(static_cast<size_t>(n) * D, 0.0);
        for (int p = 0; p < n; ++p) {
            rms_bwd(enc.xfinal.data() + static_cast<size_t>(p) * D, th(L.enc_final_norm),
                    enc.rmsF[static_cast<size_t>(p)], dEncOut.data() + static_cast<size_t>(p) * D,
                    dx.data() + static_cast<size_t>(p) * D, grad.data() + L.enc_final_norm, D);
        }

        std::vector<double> dh_act(static_cast<size_t>(H)), dh_up(static_cast<size_t>(H));
        std::vector<double> dn(static_cast<size_t>(D));
        std::vector<double> dattn(static_cast<size_t>(D));
        std::vector<double> dprob(static_cast<size_t>(n));
        std::vector<double> dq(static_cast<size_t>(n) * D), dk(static_cast<size_t>(n) * D),
            dv(static_cast<size_t>(n) * D);

        for (int b = C.enc_blocks - 1; b >= 0; --b) {
            const auto& blk = enc.blocks[static_cast<size_t>(b)];
            const auto& lay = L.enc[static_cast<size_t>(b)];

            for (int p = 0; p < n; ++p) {
                const double* dxp = dx.data() + static_cast<size_t>(p) * D;
                const double* act = blk.h_act.data() + static_cast<size_t>(p) * H;
                const double* up = blk.h_up.data() + static_cast<size_t>(p) * H;
                outer_add(grad.data() + lay.w_down, dxp, act, D, H);
                std::fill(dh_act.begin(), dh_act.end(), 0.0);
                matvec_t_add(th(lay.w_down), dxp, dh_act.data(), D, H);
                for (int i = 0; i < H; ++i)
                    dh_up[static_cast<size_t>(i)] = dh_act[static_cast<size_t>(i)] * silu_deriv(up[i]);
                const double* n2 = blk.n2.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.w_up, dh_up.data(), n2, H, D);
                std::fill(dn.begin(), dn.end(), 0.0);
                matvec_t_add(th(lay.w_up), dh_up.data(), dn.data(), H, D);
                rms_bwd(blk.xmid.data() + static_cast<size_t>(p) * D, th(lay.norm_mlp),
                        blk.rms2[static_cast<size_t>(p)], dn.data(),
                        dx.data() + static_cast<size_t>(p) * D, grad.data() + lay.norm_mlp, D);
            }
            // dx = d(xmid)

            std::fill(dq.begin(), dq.end(), 0.0);
            std::fill(dk.begin(), dk.end(), 0.0);
            std::fill(dv.begin(), dv.end(), 0.0);
            for (int p = 0; p < n; ++p) {
                const double* dxp = dx.data() + static_cast<size_t>(p) * D;
                const double* attnout = blk.attnout.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.wo, dxp, attnout, D, D);
                std::fill(dattn.begin(), dattn.end(), 0.0);
                matvec_t_add(th(lay.wo), dxp, dattn.data(), D, D);

                const double* qp = blk.q.data() + static_cast<size_t>(p) * D;
                for (int h = 0; h < NH; ++h) {
                    const double* probs =
                        blk.att.data() + (static_cast<size_t>(h) * n + p) * n;
                    const double* da = dattn.data() + h * HD;
                    double s_dot = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double* vh = blk.v.data() + static_cast<size_t>(j) * D + h * HD;
                        double dp = 0.0;
                        for (int i = 0; i < HD; ++i) dp += da[i] * vh[i];
                        dprob[static_cast<size_t>(j)] = dp;
                        s_dot += probs[j] * dp;
                    }
                    for (int j = 0; j < n; ++j) {
                        const double ds = probs[j] * (dprob[static_cast<size_t>(j)] - s_dot) *
                                          inv_sqrt_hd;
                        const double* kh = blk.k.data() + static_cast<size_t>(j) * D + h * HD;
                        const double* qh = qp + h * HD;
                        double* dqh = dq.data() + static_cast<size_t>(p) * D + h * HD;
                        double* dkh = dk.data() + static_cast<size_t>(j) * D + h * HD;
                        double* dvh = dv.data() + static_cast<size_t>(j) * D + h * HD;
                        const double pj = probs[j];
                        for (int i = 0; i < HD; ++i) {
                            dqh[i] += ds * kh[i];
                            dkh[i] += ds * qh[i];
                            dvh[i] += pj * da[i];
                        }
                    }
                }
            }
            for (int p = 0; p < n; ++p) {
                const double* n1 = blk.n1.data() + static_cast<size_t>(p) * D;
                const double* dqp = dq.data() + static_cast<size_t>(p) * D;
                const double* dkp = dk.data() + static_cast<size_t>(p) * D;
                const double* dvp = dv.data() + static_cast<size_t>(p) * D;
                outer_add(grad.data() + lay.wq, dqp, n1, D, D);
                outer_add(grad.data() + lay.wk, dkp, n1, D, D);
                outer_add(grad.data() + lay.wv, dvp, n1, D, D);
                std::fill(dn.begin(), dn.end(), 0.0);
                matvec_t_add(th(lay.wq), dqp, dn.data(), D, D);
                matvec_t_add(th(lay.wk), dkp, dn.data(), D, D);
                matvec_t_add(th(lay.wv), dvp, dn.data(), D, D);
                rms_bwd(blk.xin.data() + static_cast<size_t>(p) * D, th(lay.norm_attn),
                        blk.rms1[static_cast<size_t>(p)], dn.data(),
                        dx.data() + static_cast<size_t>(p) * D, grad.data() + lay.norm_attn, D);
            }
        }

        for (int p = 0; p < n; ++p) {
            const double* dxp = dx.data() + static_cast<size_t>(p) * D;
            double* dpos = grad.data() + L.enc_pos + int64_t(p) * D;
            for (int i = 0; i < D; ++i) dpos[i] += dxp[i];
            double* demb = enc.dropped
                               ? grad.data() + L.null_text
                               : grad.data() + L.text_embed +
                                     int64_t(enc.tokens[static_cast<size_t>(p)]) * D;
            for (int i = 0; i < D; ++i) demb[i] += dxp[i];
        }
    }

    const PolicyParams& P;
    const ModelConfig& C;
    const ParamLayout& L;
    int D, NH, HD, H, V;
    double inv_sqrt_hd;
};

void validate_audio(const ModelConfig& config, const AudioFrameSeq& audio, const char* what) {
    if (audio.channels != config.channels)
        throw InvalidInput(std::string(what) + ": channel count mismatch");
    for (FrameToken t : audio.data) {
        if (t >= config.audio_vocab)
            throw InvalidInput(std::string(what) + ": token id out of audio vocabulary");
    }
}

// Feeds [context|null, BOS] and returns the count of prefix positions.
int feed_prefix(const Net& net, DecState& st, const EncTraceImpl& enc,
                const AudioFrameSeq* context) {
    const auto& config = net.P.config;
    int prefix = 0;
    if (context == nullptr) {
        net.dec_feed(st, enc, PosKind::kNullContext, nullptr);
        prefix = 1;
    } else {
        for (size_t f = 0; f < context->frames(); ++f) {
            net.dec_feed(st, enc, PosKind::kContextFrame,
                         context->data.data() + f * static_cast<size_t>(context->channels));
        }
        prefix = static_cast<int>(context->frames());
    }
    const AudioFrameSeq bos = make_bos_frame(config.channels, config.audio_vocab);
    net.dec_feed(st, enc, PosKind::kBos, bos.data.data());
    return prefix + 1;
}

}  // namespace

ScoredForward score_response(const PolicyParams& params, const Conditioning& cond,
                             const AudioFrameSeq& response) {
    if (response.empty()) throw InvalidInput("score_response: empty response");
    validate_audio(params.config, response, "response");
    if (cond.context != nullptr) validate_audio(params.config, *cond.context, "context");

    Net net(params);
    auto trace = std::make_shared<ForwardTrace>();
    trace->enc = net.encode(cond.text);
    net.dec_init(trace->dec, trace->enc);

    const int prefix = feed_prefix(net, trace->dec, trace->enc, cond.context);
    const size_t n_frames = response.frames();
    for (size_t f = 0; f + 1 < n_frames; ++f) {
        net.dec_feed(trace->dec, trace->enc, PosKind::kResponseFrame,
                     response.data.data() + f * static_cast<size_t>(response.channels));
    }

    const int cc = params.config.channels;
    const int v = params.config.audio_vocab;
    auto& head = trace->head;
    head.positions.resize(n_frames);
    head.hnorm.resize(n_frames * static_cast<size_t>(params.config.width));
    head.rmsF.resize(n_frames);
    head.probs.resize(n_frames * static_cast<size_t>(cc) * v);
    head.target.resize(n_frames * static_cast<size_t>(cc));

    std::vector<double> logits(static_cast<size_t>(cc) * v);
    double logprob = 0.0;
    for (size_t f = 0; f < n_frames; ++f) {
        const int p = prefix - 1 + static_cast<int>(f);
        head.positions[f] = p;
        net.head_logits(trace->dec, p,
                        head.hnorm.data() + f * static_cast<size_t>(params.config.width),
                        &head.rmsF[f], logits.data());
        for (int c = 0; c < cc; ++c) {
            const double* z = logits.data() + static_cast<size_t>(c) * v;
            const FrameToken t = response.at(f, c);
            const double lse = log_sum_exp(z, v);
            logprob += z[t] - lse;
            double* probs = head.probs.data() + (f * static_cast<size_t>(cc) + c) * v;
            for (int i = 0; i < v; ++i) probs[i] = std::exp(z[i] - lse);
            head.target[f * static_cast<size_t>(cc) + static_cast<size_t>(c)] = t;
        }
    }

    ScoredForward out;
    out.logprob = logprob;
    out.response_frames = n_frames;
    out.trace = std::move(trace);
    return out;
}

void backward_logprob(const PolicyParams& params, const ForwardTrace& trace, double scale,
                      GradBuffer& grad) {
    if (grad.size() != params.theta.size())
        throw InvalidInput("backward_logprob: gradient buffer size mismatch");
    Net net(params);
    net.backward(trace, scale, grad);
}

double log_prob(const PolicyParams& params, const TextSeq& text, const AudioFrameSeq& context,
                const AudioFrameSeq& response) {
    Conditioning cond{&text, &context};
    return score_response(params, cond, response).logprob;
}

GradBuffer grad_log_prob(const PolicyParams& params, const TextSeq& text,
                         const AudioFrameSeq& context, const AudioFrameSeq& response) {
    Conditioning cond{&text, &context};
    const ScoredForward fwd = score_response(params, cond, response);
    GradBuffer grad(params.theta.size(), 0.0);
    backward_logprob(params, *fwd.trace, 1.0, grad);
    return grad;
}

std::vector<std::vector<double>> next_frame_logits(const PolicyParams& params,
                                                   const TextSeq* text,
                                                   const AudioFrameSeq* context,
                                                   const AudioFrameSeq& prefix,
                                                   ConditioningFlags flags) {
    if (flags.drop_text) text = nullptr;
    if (flags.drop_context) context = nullptr;
    if (!prefix.empty()) validate_audio(params.config, prefix, "prefix");
    if (context != nullptr) validate_audio(params.config, *context, "context");

    Net net(params);
    ForwardTrace trace;
    trace.enc = net.encode(text);
    net.dec_init(trace.dec, trace.enc);
    feed_prefix(net, trace.dec, trace.enc, context);
    for (size_t f = 0; f < prefix.frames(); ++f) {
        net.dec_feed(trace.dec, trace.enc, PosKind::kResponseFrame,
                     prefix.data.data() + f * static_cast<size_t>(prefix.channels));
    }

    const int cc = params.config.channels;
    const int v = params.config.audio_vocab;
    std::vector<double> hnorm(static_cast<size_t>(params.config.width));
    std::vector<double> logits(static_cast<size_t>(cc) * v);
    double rms = 0.0;
    net.head_logits(trace.dec, trace.dec.len - 1, hnorm.data(), &rms, logits.data());

    std::vector<std::vector<double>> out(static_cast<size_t>(cc));
    for (int c = 0; c < cc; ++c)
        out[static_cast<size_t>(c)].assign(logits.begin() + static_cast<size_t>(c) * v,
                                           logits.begin() + (static_cast<size_t>(c) + 1) * v);
    return out;
}

std::vector<std::vector<double>> guided_next_frame_logits(const PolicyParams& params,
                                                          const TextSeq& text,
                                                          const AudioFrameSeq& context,
                                                          const AudioFrameSeq& prefix,
                                                          double cfg_scale) {
    auto cond = next_frame_logits(params, &text, &context, prefix, {});
    auto uncond = next_frame_logits(params, nullptr, nullptr, prefix, {});
    for (size_t c = 0; c < cond.size(); ++c) {
        for (size_t i = 0; i < cond[c].size(); ++i)
            cond[c][i] = uncond[c][i] + cfg_scale * (cond[c][i] - uncond[c][i]);
    }
    return cond;
}

SampledResponse sample_response(const PolicyParams& params, const TextSeq& text,
                                const AudioFrameSeq& context, const SampleSettings& settings,
                                Rng& rng) {
    if (!settings.greedy && !(settings.temperature > 0.0))
        throw InvalidInput("sample_response: temperature must be > 0");
    validate_audio(params.config, context, "context");
    if (text.empty()) throw InvalidInput("sample_response: empty text");

    Net net(params);
    ForwardTrace cond;
    cond.enc = net.encode(&text);
    net.dec_init(cond.dec, cond.enc);
    const int prefix_len = feed_prefix(net, cond.dec, cond.enc, &context);

    ForwardTrace uncond;
    if (settings.use_cfg) {
        uncond.enc = net.encode(nullptr);
        net.dec_init(uncond.dec, uncond.enc);
        feed_prefix(net, uncond.dec, uncond.enc, nullptr);
    }

    int max_frames = settings.max_frames > 0
                         ? settings.max_frames
                         : 2 * static_cast<int>(text.size()) + 8;
    const int room = params.config.max_audio_len - prefix_len;
    if (room < 1) throw LengthExceeded("sample_response: no room after context prefix");
    if (max_frames > room) max_frames = room;

    const int cc = params.config.channels;
    const int v = params.config.audio_vocab;
    const FrameToken eos = eos_id(v);

    SampledResponse out;
    out.response = AudioFrameSeq(cc);
    out.sampled_with_cfg = settings.use_cfg;
    out.cfg_scale = settings.use_cfg ? settings.cfg_scale : 1.0;

    std::vector<double> logits_c(static_cast<size_t>(cc) * v);
    std::vector<double> logits_u(static_cast<size_t>(cc) * v);
    std::vector<double> guided(static_cast<size_t>(v));
    std::vector<double> hnorm(static_cast<size_t>(params.config.width));
    std::vector<FrameToken> frame(static_cast<size_t>(cc));
    double rms = 0.0;

    for (int step = 0; step < max_frames; ++step) {
        net.head_logits(cond.dec, cond.dec.len - 1, hnorm.data(), &rms, logits_c.data());
        if (settings.use_cfg)
            net.head_logits(uncond.dec, uncond.dec.len - 1, hnorm.data(), &rms, logits_u.data());

        for (int c = 0; c < cc; ++c) {
            const double* zc = logits_c.data() + static_cast<size_t>(c) * v;
            if (settings.use_cfg) {
                const double* zu = logits_u.data() + static_cast<size_t>(c) * v;
                for (int i = 0; i < v; ++i)
                    guided[static_cast<size_t>(i)] = zu[i] + settings.cfg_scale * (zc[i] - zu[i]);
            } else {
                std::copy(zc, zc + v, guided.begin());
            }

            FrameToken tok = 0;
            if (settings.greedy) {
                int best = 0;
                for (int i = 1; i < v; ++i)
                    if (guided[static_cast<size_t>(i)] > guided[static_cast<size_t>(best)]) best = i;
                tok = static_cast<FrameToken>(best);
            } else {
                for (int i = 0; i < v; ++i) guided[static_cast<size_t>(i)] /= settings.temperature;
                softmax_inplace(guided.data(), v);
                const double u = rng.uniform01();
                double acc = 0.0;
                int pick = v - 1;
                for (int i = 0; i < v; ++i) {
                    acc += guided[static_cast<size_t>(i)];
                    if (u < acc) {
                        pick = i;
                        break;
                    }
                }
                tok = static_cast<FrameToken>(pick);
            }
            frame[static_cast<size_t>(c)] = tok;
            // conditional temp-1 log-likelihood of the realized token
            out.logprob_conditional += zc[tok] - log_sum_exp(zc, v);
        }
        out.response.push_frame(frame);
        const bool stop = (frame[0] == eos) || (step + 1 == max_frames);
        if (stop) break;
        net.dec_feed(cond.dec, cond.enc, PosKind::kResponseFrame, frame.data());
        if (settings.use_cfg)
            net.dec_feed(uncond.dec, uncond.enc, PosKind::kResponseFrame, frame.data());
    }
    return out;
}

}  // namespace ttsrl
