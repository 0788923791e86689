#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "muv/grid.hpp"
#include "muv/rng.hpp"
#include "muv/rope.hpp"
#include "muv/seqspace.hpp"

namespace muv {

// Parameter groups. MV base can be frozen (fine-tune mode) while LoRA pairs,
// the UV branch, and the shared embedders/heads stay trainable.
enum ParamGroup { GROUP_SHARED = 0, GROUP_MV_BASE = 1, GROUP_MV_LORA = 2, GROUP_UV_FULL = 3 };

inline const char* group_name(int g) {
    switch (g) {
        case GROUP_SHARED: return "shared";
        case GROUP_MV_BASE: return "mv_base";
        case GROUP_MV_LORA: return "mv_lora";
        case GROUP_UV_FULL: return "uv_full";
    }
    return "?";
}

struct ModelConfig {
    int patch = 4;
    int dim = 192;
    int heads = 4;
    int head_dim = 48;
    int depth = 6;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    int h_mv = 32, w_mv = 32;
    int h_uv = 64, w_uv = 64;
    int label_vocab = 1;
    // Ablation switches: geometry term in attention, decoupled MV/UV streams,
    // UV-frame-only sequence.
    bool geo_attention = true;
    bool decoupled = true;
    bool uv_only = false;

    int patch_vec() const { return patch * patch * 3; }
    int geo_vec() const { return patch * patch * 7; }
    int mv_tokens_per_frame() const { return (h_mv / patch) * (w_mv / patch); }
    int mv_tokens() const { return 4 * mv_tokens_per_frame(); }
    int uv_tokens() const { return (h_uv / patch) * (w_uv / patch); }

    void validate() const {
        require(patch > 0 && dim > 0 && heads > 0 && depth > 0, ErrKind::Usage, "model: non-positive size");
        require(head_dim % 6 == 0, ErrKind::Usage, "model: head_dim must be divisible by 6");
        require(dim == heads * head_dim, ErrKind::Usage, "model: dim must equal heads*head_dim");
        require(h_mv % patch == 0 && w_mv % patch == 0 && h_uv % patch == 0 && w_uv % patch == 0,
                ErrKind::Usage, "model: frame sizes must be divisible by patch");
        require(h_uv == 2 * h_mv && w_uv == 2 * w_mv, ErrKind::Usage,
                "model: UV resolution must be 2x the MV resolution");
        require(label_vocab >= 1, ErrKind::Usage, "model: label_vocab must be >= 1");
        require(lora_rank >= 1, ErrKind::Usage, "model: lora_rank must be >= 1");
    }

    std::map<std::string, std::string> to_kv() const;
    static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Geometry conditioning: one 7-channel grid (position | normal | validity)
// per frame slot; frames 0-3 at MV resolution, frame 4 at UV resolution.
struct GeoConditioning {
    std::array<Grid, 5> frames;
};

struct ViewBuffers;        // geomesh.hpp
struct UVGeometryMaps;     // geomesh.hpp
GeoConditioning make_geo_conditioning(const std::vector<ViewBuffers>& views,
                                      const UVGeometryMaps& uvgeo);

// One example as the network consumes it.
struct NetSample {
    std::array<Grid, 5> frames;      // noised frames, [-1,1]
    std::array<double, 5> timesteps{};
    GeoConditioning geo;
    int label = 0;
};

template <typename S>
using NetMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// cos/sin tables from a phase table (one row per token).
template <typename S>
std::pair<NetMat<S>, NetMat<S>> rope_tables(const Eigen::MatrixXd& phases) {
    NetMat<S> c = phases.array().cos().cast<S>();
    NetMat<S> s = phases.array().sin().cast<S>();
    return {std::move(c), std::move(s)};
}

namespace detail {

template <typename S>
void apply_rope_rows(NetMat<S>& x, const NetMat<S>& cosT, const NetMat<S>& sinT, int row_offset,
                     int heads, int head_dim, bool inverse) {
    const int pairs = head_dim / 2;
    for (int r = 0; r < x.rows(); ++r) {
        const int tr = row_offset + r;
        for (int h = 0; h < heads; ++h) {
            const int base = h * head_dim;
            for (int j = 0; j < pairs; ++j) {
                S c = cosT(tr, j);
                S s = inverse ? -sinT(tr, j) : sinT(tr, j);
                S a = x(r, base + 2 * j);
                S b = x(r, base + 2 * j + 1);
                x(r, base + 2 * j) = a * c - b * s;
                x(r, base + 2 * j + 1) = a * s + b * c;
            }
        }
    }
}

template <typename S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}
template <typename S>
S gelu_grad(S x) {
    S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
    S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
    return cdf + x * pdf;
}
template <typename S>
S silu(S x) {
    return x / (S(1) + std::exp(-x));
}
template <typename S>
S silu_grad(S x) {
    S sig = S(1) / (S(1) + std::exp(-x));
    return sig * (S(1) + x * (S(1) - sig));
}

}  // namespace detail

// Cache for one scaled-dot-product pass; reused by the backward pass.
template <typename S>
struct AttnCache {
    NetMat<S> q_rot, k_rot;           // post rope (+ geo)
    NetMat<S> v;
    std::vector<NetMat<S>> probs;     // per head
    NetMat<S> ctx;
};

// Geometry-informed attention: rotary rotation on Q and K, geometry embedding
// added after rotation, V untouched. token_q/token_e are pre-projection token
// matrices; weights are the effective (LoRA-merged) projections.
template <typename S>
NetMat<S> geo_attention(const NetMat<S>& token_q, const NetMat<S>& token_e, const NetMat<S>& geo_q,
                        const NetMat<S>& geo_e, const NetMat<S>& rope_cos, const NetMat<S>& rope_sin,
                        int rope_offset_q, int rope_offset_e, const NetMat<S>& wq,
                        const NetMat<S>& wk, const NetMat<S>& wv, const NetMat<S>& wo, int heads,
                        AttnCache<S>* cache = nullptr) {
    require(geo_q.rows() == 0 || geo_q.rows() == token_q.rows(), ErrKind::Usage,
            "geo_attention: geo_q rows must match token_q");
    require(geo_e.rows() == 0 || geo_e.rows() == token_e.rows(), ErrKind::Usage,
            "geo_attention: geo_e rows must match token_e");
    const int dim = static_cast<int>(wq.rows());
    const int head_dim = dim / heads;
    const S scale = S(1) / std::sqrt(S(head_dim));

    NetMat<S> q = token_q * wq.transpose();
    NetMat<S> k = token_e * wk.transpose();
    NetMat<S> v = token_e * wv.transpose();
    detail::apply_rope_rows(q, rope_cos, rope_sin, rope_offset_q, heads, head_dim, false);
    detail::apply_rope_rows(k, rope_cos, rope_sin, rope_offset_e, heads, head_dim, false);
    if (geo_q.rows() > 0) q += geo_q;
    if (geo_e.rows() > 0) k += geo_e;

    NetMat<S> ctx(token_q.rows(), dim);
    std::vector<NetMat<S>> probs(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols(h * head_dim, head_dim);
        auto kh = k.middleCols(h * head_dim, head_dim);
        NetMat<S> scores = (qh * kh.transpose()) * scale;
        for (int r = 0; r < scores.rows(); ++r) {
            S mx = scores.row(r).maxCoeff();
            double sum = 0.0;
            for (int c = 0; c < scores.cols(); ++c) {
                S e = std::exp(scores(r, c) - mx);
                scores(r, c) = e;
                sum += static_cast<double>(e);
            }
            scores.row(r) *= S(1.0 / sum);
        }
        ctx.middleCols(h * head_dim, head_dim).noalias() =
            scores * v.middleCols(h * head_dim, head_dim);
        probs[static_cast<size_t>(h)] = std::move(scores);
    }
    NetMat<S> out = ctx * wo.transpose();
    if (cache) {
        cache->q_rot = std::move(q);
        cache->k_rot = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->ctx = std::move(ctx);
    }
    return out;
}

template <typename S>
class MuvNet {
public:
    using Mat = NetMat<S>;

    struct Param {
        std::string name;
        int group;
        bool trainable = true;
        Mat w;
    };

    using GradBuffer = std::vector<Mat>;

    explicit MuvNet(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        register_params();
        RopeShape mv{4, cfg_.h_mv / cfg_.patch, cfg_.w_mv / cfg_.patch};
        RopeShape uv{1, cfg_.h_uv / cfg_.patch, cfg_.w_uv / cfg_.patch};
        rope_phases_ = rope_3d(mv, uv, cfg_.head_dim);
        std::tie(rope_cos_, rope_sin_) = rope_tables<S>(rope_phases_);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    const Eigen::MatrixXd& rope_phases() const { return rope_phases_; }

    int param_index(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), ErrKind::Data, "unknown parameter '" + name + "'");
        return it->second;
    }
    Mat& weight(const std::string& name) { return params_[static_cast<size_t>(param_index(name))].w; }

    void set_trainable(int group, bool trainable) {
        for (auto& p : params_)
            if (p.group == group) p.trainable = trainable;
    }

    GradBuffer make_grad_buffer() const {
        GradBuffer g;
        g.reserve(params_.size());
        for (const auto& p : params_) g.emplace_back(Mat::Zero(p.w.rows(), p.w.cols()));
        return g;
    }

    void init_weights(Rng& rng) {
        for (auto& p : params_) fill_param(p, rng);
        // UV branch starts as a copy of the MV base weights.
        for (int b = 0; b < cfg_.depth; ++b) {
            for (const char* leaf : {"mod_w", "mod_b", "wq", "wk", "wv", "wo", "geo_w", "ff_w1",
                                     "ff_b1", "ff_w2", "ff_b2"}) {
                weight(blk_name(b, "uv", leaf)) = weight(blk_name(b, "mv", leaf));
            }
        }
    }

    // Deterministic inference pass.
    std::array<Grid, 5> forward(const NetSample& sample) const {
        Fwd fwd;
        run_forward(sample, fwd);
        return extract_preds(fwd);
    }

    // Training pass: flow-matching loss over DF frames, with gradients
    // accumulated into `grads` (aligned with params()) when non-null.
    double loss_and_grad(const NetSample& sample, const std::array<Grid, 5>& target,
                         const std::array<FrameRole, 5>& roles, double t_df,
                         GradBuffer* grads) const {
        Fwd fwd;
        run_forward(sample, fwd);
        std::array<Grid, 5> preds = extract_preds(fwd);

        // Masked, reweighted MSE over DF frames.
        double sum = 0.0;
        size_t count = 0;
        for (int f = 0; f < 5; ++f) {
            if (!frame_active(f) || roles[static_cast<size_t>(f)] != FrameRole::DF) continue;
            const Grid& p = preds[static_cast<size_t>(f)];
            const Grid& t = target[static_cast<size_t>(f)];
            require_same_shape(p, t, "loss pred/target");
            for (size_t i = 0; i < p.size(); ++i) {
                double d = p.data[i] - t.data[i];
                sum += d * d;
            }
            count += p.size();
        }
        double weight = loss_weight(t_df);
        double loss = count ? weight * sum / static_cast<double>(count) : 0.0;
        if (!grads || count == 0) return loss;

        std::array<Grid, 5> dpred;
        double coef = 2.0 * weight / static_cast<double>(count);
        for (int f = 0; f < 5; ++f) {
            if (!frame_active(f)) continue;
            const Grid& p = preds[static_cast<size_t>(f)];
            Grid d(p.h, p.w, p.c);
            if (roles[static_cast<size_t>(f)] == FrameRole::DF) {
                const Grid& t = target[static_cast<size_t>(f)];
                for (size_t i = 0; i < p.size(); ++i) d.data[i] = coef * (p.data[i] - t.data[i]);
            }
            dpred[static_cast<size_t>(f)] = std::move(d);
        }
        run_backward(sample, fwd, dpred, *grads);
        return loss;
    }

    // Patch rearrangement helpers (exact inverses of each other).
    static Mat patchify_grid(const Grid& g, int patch) {
        require(g.h % patch == 0 && g.w % patch == 0, ErrKind::Usage,
                "patchify: frame dims must be divisible by patch");
        const int gh = g.h / patch, gw = g.w / patch;
        Mat out(gh * gw, patch * patch * g.c);
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px) {
                int tok = py * gw + px;
                int col = 0;
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        for (int ch = 0; ch < g.c; ++ch)
                            out(tok, col++) = static_cast<S>(g.at(py * patch + dy, px * patch + dx, ch));
            }
        return out;
    }

    static Grid unpatchify_grid(const Mat& tokens, int patch, int h, int w, int c) {
        require(tokens.rows() == (h / patch) * (w / patch) && tokens.cols() == patch * patch * c,
                ErrKind::Usage, "unpatchify: token shape mismatch");
        Grid g(h, w, c);
        const int gw = w / patch;
        for (int tok = 0; tok < tokens.rows(); ++tok) {
            int py = tok / gw, px = tok % gw;
            int col = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int ch = 0; ch < c; ++ch)
                        g.at(py * patch + dy, px * patch + dx, ch) = static_cast<double>(tokens(tok, col++));
        }
        return g;
    }

    const NetMat<S>& rope_cos() const { return rope_cos_; }
    const NetMat<S>& rope_sin() const { return rope_sin_; }

private:
    // ---- parameter registration -------------------------------------------

    static std::string blk_name(int b, const char* stream, const char* leaf) {
        return "blk" + std::to_string(b) + "/" + stream + "/" + leaf;
    }

    int add_param(const std::string& name, int group, int rows, int cols) {
        params_.push_back({name, group, true, Mat::Zero(rows, cols)});
        index_[name] = static_cast<int>(params_.size()) - 1;
        return index_[name];
    }

    void register_params() {
        const int d = cfg_.dim, pv = cfg_.patch_vec(), gv = cfg_.geo_vec(), hid = 4 * cfg_.dim;
        add_param("shared/t_w1", GROUP_SHARED, d, d);
        add_param("shared/t_b1", GROUP_SHARED, 1, d);
        add_param("shared/t_w2", GROUP_SHARED, d, d);
        add_param("shared/t_b2", GROUP_SHARED, 1, d);
        add_param("shared/label", GROUP_SHARED, cfg_.label_vocab, d);
        add_param("shared/patch_mv_w", GROUP_SHARED, d, pv);
        add_param("shared/patch_mv_b", GROUP_SHARED, 1, d);
        add_param("shared/patch_uv_w", GROUP_SHARED, d, pv);
        add_param("shared/patch_uv_b", GROUP_SHARED, 1, d);
        add_param("shared/finmod_mv_w", GROUP_SHARED, 2 * d, d);
        add_param("shared/finmod_mv_b", GROUP_SHARED, 1, 2 * d);
        add_param("shared/finmod_uv_w", GROUP_SHARED, 2 * d, d);
        add_param("shared/finmod_uv_b", GROUP_SHARED, 1, 2 * d);
        add_param("shared/head_mv_w", GROUP_SHARED, pv, d);
        add_param("shared/head_mv_b", GROUP_SHARED, 1, pv);
        add_param("shared/head_uv_w", GROUP_SHARED, pv, d);
        add_param("shared/head_uv_b", GROUP_SHARED, 1, pv);
        for (int b = 0; b < cfg_.depth; ++b) {
            for (const char* stream : {"mv", "uv"}) {
                int group = std::string(stream) == "mv" ? GROUP_MV_BASE : GROUP_UV_FULL;
                add_param(blk_name(b, stream, "mod_w"), group, 4 * d, d);
                add_param(blk_name(b, stream, "mod_b"), group, 1, 4 * d);
                add_param(blk_name(b, stream, "wq"), group, d, d);
                add_param(blk_name(b, stream, "wk"), group, d, d);
                add_param(blk_name(b, stream, "wv"), group, d, d);
                add_param(blk_name(b, stream, "wo"), group, d, d);
                add_param(blk_name(b, stream, "geo_w"), group, d, gv);
                add_param(blk_name(b, stream, "ff_w1"), group, hid, d);
                add_param(blk_name(b, stream, "ff_b1"), group, 1, hid);
                add_param(blk_name(b, stream, "ff_w2"), group, d, hid);
                add_param(blk_name(b, stream, "ff_b2"), group, 1, d);
            }
            for (const char* proj : {"q", "k", "v", "o"}) {
                add_param(blk_name(b, "mv", (std::string("lora_") + proj + "_a").c_str()),
                          GROUP_MV_LORA, cfg_.lora_rank, d);
                add_param(blk_name(b, "mv", (std::string("lora_") + proj + "_b").c_str()),
                          GROUP_MV_LORA, d, cfg_.lora_rank);
            }
        }
    }

    void fill_param(Param& p, Rng& rng) {
        // Zero-started: all biases and LoRA B (identity adapters), modulation
        // linears (identity modulation), and the velocity heads.
        const bool zero = p.name.ends_with("_b") || p.name.ends_with("_b1") ||
                          p.name.ends_with("_b2") || p.name.find("mod") != std::string::npos ||
                          p.name.find("head_") != std::string::npos;
        if (zero) {
            p.w.setZero();
            return;
        }
        const S std_w = S(0.02);
        for (int r = 0; r < p.w.rows(); ++r)
            for (int c = 0; c < p.w.cols(); ++c) p.w(r, c) = S(rng.normal()) * std_w;
    }

    // ---- forward ------------------------------------------------------------

    bool frame_active(int f) const { return cfg_.uv_only ? f == 4 : true; }

    int frame_of_mv_token(int tok) const { return tok / cfg_.mv_tokens_per_frame(); }

    struct StreamCache {
        Mat xh1;                   // normalized block input (token_q side)
        std::vector<double> rstd1;
        Mat qin;                   // modulated token_q
        Mat ein;                   // modulated token_e (uv stream only)
        Mat mod_vals;              // per frame: [sh1 sc1 sh2 sc2]
        Mat geo_q, geo_e;
        Mat wq_eff, wk_eff, wv_eff, wo_eff;
        AttnCache<S> attn;
        Mat attn_out;
        Mat xmid;
        Mat xh2;
        std::vector<double> rstd2;
        Mat fin;
        Mat u1, a1;
        Mat out;
    };

    struct BlockCache {
        Mat mv_in, uv_in;
        StreamCache mv, uv;
    };

    struct Fwd {
        Mat cond_emb, cond_h1, cond_hs, cond, cond_silu;  // 5 x dim each
        Mat x_mv_raw, x_uv_raw;                           // raw patch vectors
        Mat g_mv_raw, g_uv_raw;                           // raw geo vectors
        Mat x_mv0, x_uv0;                                 // embedded tokens
        std::vector<BlockCache> blocks;
        Mat fin_vals_mv, fin_vals_uv;                     // per frame [shf scf]
        Mat xhf_mv, xhf_uv;
        std::vector<double> rstdf_mv, rstdf_uv;
        Mat yf_mv, yf_uv;
        Mat tok_out_mv, tok_out_uv;
    };

    void layer_norm(const Mat& x, Mat& xh, std::vector<double>& rstd) const {
        const int n = static_cast<int>(x.rows()), d = static_cast<int>(x.cols());
        xh.resize(n, d);
        rstd.assign(static_cast<size_t>(n), 0.0);
        for (int r = 0; r < n; ++r) {
            double mu = 0.0;
            for (int c = 0; c < d; ++c) mu += static_cast<double>(x(r, c));
            mu /= d;
            double var = 0.0;
            for (int c = 0; c < d; ++c) {
                double dv = static_cast<double>(x(r, c)) - mu;
                var += dv * dv;
            }
            var /= d;
            double rs = 1.0 / std::sqrt(var + 1e-6);
            rstd[static_cast<size_t>(r)] = rs;
            for (int c = 0; c < d; ++c)
                xh(r, c) = static_cast<S>((static_cast<double>(x(r, c)) - mu) * rs);
        }
    }

    // d(x) for y = layer_norm(x) given dy, the normalized values and 1/std.
    Mat layer_norm_backward(const Mat& dy, const Mat& xh, const std::vector<double>& rstd) const {
        const int n = static_cast<int>(dy.rows()), d = static_cast<int>(dy.cols());
        Mat dx(n, d);
        for (int r = 0; r < n; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (int c = 0; c < d; ++c) {
                m1 += static_cast<double>(dy(r, c));
                m2 += static_cast<double>(dy(r, c)) * static_cast<double>(xh(r, c));
            }
            m1 /= d;
            m2 /= d;
            for (int c = 0; c < d; ++c)
                dx(r, c) = static_cast<S>(rstd[static_cast<size_t>(r)] *
                                          (static_cast<double>(dy(r, c)) - m1 -
                                           static_cast<double>(xh(r, c)) * m2));
        }
        return dx;
    }

    // y[i] = xh[i]*(1+scale[frame]) + shift[frame]; chunk selects which
    // (shift,scale) pair of the modulation row to use.
    void modulate(const Mat& xh, const Mat& mod_vals, int chunk, bool uv_rows, Mat& out) const {
        const int d = cfg_.dim;
        out.resize(xh.rows(), d);
        for (int r = 0; r < xh.rows(); ++r) {
            int f = uv_rows ? 4 : frame_of_mv_token(r);
            for (int c = 0; c < d; ++c) {
                S sh = mod_vals(f, chunk * 2 * d + c);
                S sc = mod_vals(f, chunk * 2 * d + d + c);
                out(r, c) = xh(r, c) * (S(1) + sc) + sh;
            }
        }
    }

    void modulate_backward(const Mat& dout, const Mat& xh, const Mat& mod_vals, int chunk,
                           bool uv_rows, Mat& dxh, Mat& dmod_vals) const {
        const int d = cfg_.dim;
        dxh.resize(xh.rows(), d);
        for (int r = 0; r < xh.rows(); ++r) {
            int f = uv_rows ? 4 : frame_of_mv_token(r);
            for (int c = 0; c < d; ++c) {
                S sc = mod_vals(f, chunk * 2 * d + d + c);
                dxh(r, c) = dout(r, c) * (S(1) + sc);
                dmod_vals(f, chunk * 2 * d + c) += dout(r, c);
                dmod_vals(f, chunk * 2 * d + d + c) += dout(r, c) * xh(r, c);
            }
        }
    }

    Mat effective_weight(int b, const char* proj) const {
        const Mat& base = params_[static_cast<size_t>(index_.at(blk_name(b, "mv", (std::string("w") + proj).c_str())))].w;
        const Mat& a = params_[static_cast<size_t>(index_.at(blk_name(b, "mv", (std::string("lora_") + proj + "_a").c_str())))].w;
        const Mat& bb = params_[static_cast<size_t>(index_.at(blk_name(b, "mv", (std::string("lora_") + proj + "_b").c_str())))].w;
        return base + (S(cfg_.lora_alpha) / S(cfg_.lora_rank)) * (bb * a);
    }

    Mat sin_embed(double t) const {
        const int half = cfg_.dim / 2;
        Mat e(1, cfg_.dim);
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / half);
            double arg = 1000.0 * t * freq;
            e(0, i) = static_cast<S>(std::cos(arg));
            e(0, half + i) = static_cast<S>(std::sin(arg));
        }
        return e;
    }

    void run_cond(const NetSample& sample, Fwd& fwd) const {
        const int d = cfg_.dim;
        require(sample.label >= 0 && sample.label < cfg_.label_vocab, ErrKind::Data,
                "label id " + std::to_string(sample.label) + " outside vocab of size " +
                    std::to_string(cfg_.label_vocab));
        const Mat& w1 = pw("shared/t_w1");
        const Mat& b1 = pw("shared/t_b1");
        const Mat& w2 = pw("shared/t_w2");
        const Mat& b2 = pw("shared/t_b2");
        const Mat& label = pw("shared/label");
        fwd.cond_emb.resize(5, d);
        fwd.cond_h1.resize(5, d);
        fwd.cond_hs.resize(5, d);
        fwd.cond.resize(5, d);
        fwd.cond_silu.resize(5, d);
        for (int f = 0; f < 5; ++f) {
            fwd.cond_emb.row(f) = sin_embed(sample.timesteps[static_cast<size_t>(f)]);
            fwd.cond_h1.row(f) = fwd.cond_emb.row(f) * w1.transpose() + b1;
            for (int c = 0; c < d; ++c) fwd.cond_hs(f, c) = detail::silu(fwd.cond_h1(f, c));
            fwd.cond.row(f) = fwd.cond_hs.row(f) * w2.transpose() + b2 + label.row(sample.label);
            for (int c = 0; c < d; ++c) fwd.cond_silu(f, c) = detail::silu(fwd.cond(f, c));
        }
    }

    const Mat& pw(const std::string& name) const {
        return params_[static_cast<size_t>(index_.at(name))].w;
    }

    Mat mod_vals_for(const std::string& w_name, const std::string& b_name, const Mat& cond_silu) const {
        return cond_silu * pw(w_name).transpose() + pw(b_name).replicate(5, 1);
    }

    void run_forward(const NetSample& sample, Fwd& fwd) const {
        const int d = cfg_.dim;
        run_cond(sample, fwd);

        const bool with_mv = !cfg_.uv_only;
        if (with_mv) {
            fwd.x_mv_raw.resize(cfg_.mv_tokens(), cfg_.patch_vec());
            fwd.g_mv_raw.resize(cfg_.mv_tokens(), cfg_.geo_vec());
            for (int f = 0; f < 4; ++f) {
                const Grid& fr = sample.frames[static_cast<size_t>(f)];
                require(fr.h == cfg_.h_mv && fr.w == cfg_.w_mv && fr.c == 3, ErrKind::Data,
                        "frame " + std::to_string(f) + ": expected " + std::to_string(cfg_.h_mv) +
                            "x" + std::to_string(cfg_.w_mv) + "x3");
                const Grid& ge = sample.geo.frames[static_cast<size_t>(f)];
                require(ge.h == cfg_.h_mv && ge.w == cfg_.w_mv && ge.c == 7, ErrKind::Data,
                        "geo frame " + std::to_string(f) + ": expected 7 channels at MV resolution");
                fwd.x_mv_raw.middleRows(f * cfg_.mv_tokens_per_frame(), cfg_.mv_tokens_per_frame()) =
                    patchify_grid(fr, cfg_.patch);
                fwd.g_mv_raw.middleRows(f * cfg_.mv_tokens_per_frame(), cfg_.mv_tokens_per_frame()) =
                    patchify_grid(ge, cfg_.patch);
            }
            fwd.x_mv0 = fwd.x_mv_raw * pw("shared/patch_mv_w").transpose() +
                        pw("shared/patch_mv_b").replicate(cfg_.mv_tokens(), 1);
        }
        {
            const Grid& fr = sample.frames[4];
            require(fr.h == cfg_.h_uv && fr.w == cfg_.w_uv && fr.c == 3, ErrKind::Data,
                    "frame 4: expected " + std::to_string(cfg_.h_uv) + "x" + std::to_string(cfg_.w_uv) + "x3");
            const Grid& ge = sample.geo.frames[4];
            require(ge.h == cfg_.h_uv && ge.w == cfg_.w_uv && ge.c == 7, ErrKind::Data,
                    "geo frame 4: expected 7 channels at UV resolution");
            fwd.x_uv_raw = patchify_grid(fr, cfg_.patch);
            fwd.g_uv_raw = patchify_grid(ge, cfg_.patch);
            fwd.x_uv0 = fwd.x_uv_raw * pw("shared/patch_uv_w").transpose() +
                        pw("shared/patch_uv_b").replicate(cfg_.uv_tokens(), 1);
        }

        Mat x_mv = fwd.x_mv0, x_uv = fwd.x_uv0;
        fwd.blocks.resize(static_cast<size_t>(cfg_.depth));
        for (int b = 0; b < cfg_.depth; ++b) {
            BlockCache& bc = fwd.blocks[static_cast<size_t>(b)];
            bc.mv_in = x_mv;
            bc.uv_in = x_uv;
            if (cfg_.uv_only) {
                run_stream_uv_only(b, bc, fwd);
                x_uv = bc.uv.out;
            } else if (!cfg_.decoupled) {
                run_stream_fused(b, bc, fwd);
                x_mv = bc.mv.out.topRows(cfg_.mv_tokens());
                x_uv = bc.mv.out.bottomRows(cfg_.uv_tokens());
            } else {
                run_stream_mv(b, bc, fwd);
                run_stream_uv(b, bc, fwd);
                x_mv = bc.mv.out;
                x_uv = bc.uv.out;
            }
        }

        // Final norm + per-frame modulation + per-domain linear head.
        if (with_mv) {
            fwd.fin_vals_mv = mod_vals_for("shared/finmod_mv_w", "shared/finmod_mv_b", fwd.cond_silu);
            layer_norm(x_mv, fwd.xhf_mv, fwd.rstdf_mv);
            fwd.yf_mv.resize(x_mv.rows(), d);
            for (int r = 0; r < x_mv.rows(); ++r) {
                int f = frame_of_mv_token(r);
                for (int c = 0; c < d; ++c)
                    fwd.yf_mv(r, c) = fwd.xhf_mv(r, c) * (S(1) + fwd.fin_vals_mv(f, d + c)) +
                                      fwd.fin_vals_mv(f, c);
            }
            fwd.tok_out_mv = fwd.yf_mv * pw("shared/head_mv_w").transpose() +
                             pw("shared/head_mv_b").replicate(x_mv.rows(), 1);
        }
        {
            fwd.fin_vals_uv = mod_vals_for("shared/finmod_uv_w", "shared/finmod_uv_b", fwd.cond_silu);
            layer_norm(x_uv, fwd.xhf_uv, fwd.rstdf_uv);
            fwd.yf_uv.resize(x_uv.rows(), d);
            for (int r = 0; r < x_uv.rows(); ++r) {
                for (int c = 0; c < d; ++c)
                    fwd.yf_uv(r, c) = fwd.xhf_uv(r, c) * (S(1) + fwd.fin_vals_uv(4, d + c)) +
                                      fwd.fin_vals_uv(4, c);
            }
            fwd.tok_out_uv = fwd.yf_uv * pw("shared/head_uv_w").transpose() +
                             pw("shared/head_uv_b").replicate(x_uv.rows(), 1);
        }
    }

    // MV stream: attention over MV tokens only, with LoRA-merged projections.
    void run_stream_mv(int b, BlockCache& bc, Fwd& fwd) const {
        StreamCache& sc = bc.mv;
        sc.mod_vals = mod_vals_for(blk_name(b, "mv", "mod_w"), blk_name(b, "mv", "mod_b"), fwd.cond_silu);
        layer_norm(bc.mv_in, sc.xh1, sc.rstd1);
        modulate(sc.xh1, sc.mod_vals, 0, false, sc.qin);
        sc.wq_eff = effective_weight(b, "q");
        sc.wk_eff = effective_weight(b, "k");
        sc.wv_eff = effective_weight(b, "v");
        sc.wo_eff = effective_weight(b, "o");
        if (cfg_.geo_attention) sc.geo_q = fwd.g_mv_raw * pw(blk_name(b, "mv", "geo_w")).transpose();
        sc.attn_out = geo_attention(sc.qin, sc.qin, sc.geo_q, sc.geo_q, rope_cos_, rope_sin_, 0, 0,
                                    sc.wq_eff, sc.wk_eff, sc.wv_eff, sc.wo_eff, cfg_.heads, &sc.attn);
        finish_stream(b, "mv", bc.mv_in, sc, false);
    }

    // UV stream: queries are UV tokens, keys/values span MV then UV tokens.
    void run_stream_uv(int b, BlockCache& bc, Fwd& fwd) const {
        StreamCache& sc = bc.uv;
        sc.mod_vals = mod_vals_for(blk_name(b, "uv", "mod_w"), blk_name(b, "uv", "mod_b"), fwd.cond_silu);
        layer_norm(bc.uv_in, sc.xh1, sc.rstd1);
        modulate(sc.xh1, sc.mod_vals, 0, true, sc.qin);
        // e-side reuses the MV stream's normalized input with this stream's modulation.
        modulate(bc.mv.xh1, sc.mod_vals, 0, false, sc.ein);
        Mat token_e(cfg_.mv_tokens() + cfg_.uv_tokens(), cfg_.dim);
        token_e.topRows(cfg_.mv_tokens()) = sc.ein;
        token_e.bottomRows(cfg_.uv_tokens()) = sc.qin;

        const Mat& wq = pw(blk_name(b, "uv", "wq"));
        const Mat& wk = pw(blk_name(b, "uv", "wk"));
        const Mat& wv = pw(blk_name(b, "uv", "wv"));
        const Mat& wo = pw(blk_name(b, "uv", "wo"));
        if (cfg_.geo_attention) {
            const Mat& gw = pw(blk_name(b, "uv", "geo_w"));
            sc.geo_q = fwd.g_uv_raw * gw.transpose();
            sc.geo_e.resize(cfg_.mv_tokens() + cfg_.uv_tokens(), cfg_.dim);
            sc.geo_e.topRows(cfg_.mv_tokens()) = fwd.g_mv_raw * gw.transpose();
            sc.geo_e.bottomRows(cfg_.uv_tokens()) = sc.geo_q;
        }
        sc.attn_out = geo_attention(sc.qin, token_e, sc.geo_q, sc.geo_e, rope_cos_, rope_sin_,
                                    cfg_.mv_tokens(), 0, wq, wk, wv, wo, cfg_.heads, &sc.attn);
        finish_stream(b, "uv", bc.uv_in, sc, true);
    }

    // UV-only ablation: a single stream of UV tokens through the UV weights.
    void run_stream_uv_only(int b, BlockCache& bc, Fwd& fwd) const {
        StreamCache& sc = bc.uv;
        sc.mod_vals = mod_vals_for(blk_name(b, "uv", "mod_w"), blk_name(b, "uv", "mod_b"), fwd.cond_silu);
        layer_norm(bc.uv_in, sc.xh1, sc.rstd1);
        modulate(sc.xh1, sc.mod_vals, 0, true, sc.qin);
        if (cfg_.geo_attention)
            sc.geo_q = fwd.g_uv_raw * pw(blk_name(b, "uv", "geo_w")).transpose();
        sc.attn_out = geo_attention(sc.qin, sc.qin, sc.geo_q, sc.geo_q, rope_cos_, rope_sin_,
                                    cfg_.mv_tokens(), cfg_.mv_tokens(),
                                    pw(blk_name(b, "uv", "wq")), pw(blk_name(b, "uv", "wk")),
                                    pw(blk_name(b, "uv", "wv")), pw(blk_name(b, "uv", "wo")),
                                    cfg_.heads, &sc.attn);
        finish_stream(b, "uv", bc.uv_in, sc, true);
    }

    // No-decoupling ablation: one shared branch (MV weights) over MV||UV.
    void run_stream_fused(int b, BlockCache& bc, Fwd& fwd) const {
        StreamCache& sc = bc.mv;
        sc.mod_vals = mod_vals_for(blk_name(b, "mv", "mod_w"), blk_name(b, "mv", "mod_b"), fwd.cond_silu);
        Mat x_all(cfg_.mv_tokens() + cfg_.uv_tokens(), cfg_.dim);
        x_all.topRows(cfg_.mv_tokens()) = bc.mv_in;
        x_all.bottomRows(cfg_.uv_tokens()) = bc.uv_in;
        layer_norm(x_all, sc.xh1, sc.rstd1);
        fused_modulate(sc.xh1, sc.mod_vals, 0, sc.qin);
        sc.wq_eff = effective_weight(b, "q");
        sc.wk_eff = effective_weight(b, "k");
        sc.wv_eff = effective_weight(b, "v");
        sc.wo_eff = effective_weight(b, "o");
        if (cfg_.geo_attention) {
            const Mat& gw = pw(blk_name(b, "mv", "geo_w"));
            sc.geo_q.resize(x_all.rows(), cfg_.dim);
            sc.geo_q.topRows(cfg_.mv_tokens()) = fwd.g_mv_raw * gw.transpose();
            sc.geo_q.bottomRows(cfg_.uv_tokens()) = fwd.g_uv_raw * gw.transpose();
        }
        sc.attn_out = geo_attention(sc.qin, sc.qin, sc.geo_q, sc.geo_q, rope_cos_, rope_sin_, 0, 0,
                                    sc.wq_eff, sc.wk_eff, sc.wv_eff, sc.wo_eff, cfg_.heads, &sc.attn);
        finish_stream_fused(b, x_all, sc);
    }

    int fused_frame_of(int row) const {
        return row < cfg_.mv_tokens() ? frame_of_mv_token(row) : 4;
    }

    void fused_modulate(const Mat& xh, const Mat& mod_vals, int chunk, Mat& out) const {
        const int d = cfg_.dim;
        out.resize(xh.rows(), d);
        for (int r = 0; r < xh.rows(); ++r) {
            int f = fused_frame_of(r);
            for (int c = 0; c < d; ++c)
                out(r, c) = xh(r, c) * (S(1) + mod_vals(f, chunk * 2 * d + d + c)) +
                            mod_vals(f, chunk * 2 * d + c);
        }
    }

    void finish_stream(int b, const char* stream, const Mat& x_in, StreamCache& sc, bool uv_rows) const {
        sc.xmid = x_in + sc.attn_out;
        layer_norm(sc.xmid, sc.xh2, sc.rstd2);
        modulate(sc.xh2, sc.mod_vals, 1, uv_rows, sc.fin);
        ff_forward(b, stream, sc);
    }

    void finish_stream_fused(int b, const Mat& x_in, StreamCache& sc) const {
        sc.xmid = x_in + sc.attn_out;
        layer_norm(sc.xmid, sc.xh2, sc.rstd2);
        fused_modulate(sc.xh2, sc.mod_vals, 1, sc.fin);
        ff_forward(b, "mv", sc);
    }

    void ff_forward(int b, const char* stream, StreamCache& sc) const {
        const Mat& w1 = pw(blk_name(b, stream, "ff_w1"));
        const Mat& b1 = pw(blk_name(b, stream, "ff_b1"));
        const Mat& w2 = pw(blk_name(b, stream, "ff_w2"));
        const Mat& b2 = pw(blk_name(b, stream, "ff_b2"));
        sc.u1 = sc.fin * w1.transpose() + b1.replicate(sc.fin.rows(), 1);
        sc.a1.resize(sc.u1.rows(), sc.u1.cols());
        for (int r = 0; r < sc.u1.rows(); ++r)
            for (int c = 0; c < sc.u1.cols(); ++c) sc.a1(r, c) = detail::gelu(sc.u1(r, c));
        sc.out = sc.xmid + sc.a1 * w2.transpose() + b2.replicate(sc.fin.rows(), 1);
    }

    std::array<Grid, 5> extract_preds(const Fwd& fwd) const {
        std::array<Grid, 5> preds;
        if (!cfg_.uv_only) {
            for (int f = 0; f < 4; ++f) {
                Mat tok = fwd.tok_out_mv.middleRows(f * cfg_.mv_tokens_per_frame(),
                                                    cfg_.mv_tokens_per_frame());
                preds[static_cast<size_t>(f)] = unpatchify_grid(tok, cfg_.patch, cfg_.h_mv, cfg_.w_mv, 3);
            }
        } else {
            for (int f = 0; f < 4; ++f) preds[static_cast<size_t>(f)] = Grid();
        }
        preds[4] = unpatchify_grid(fwd.tok_out_uv, cfg_.patch, cfg_.h_uv, cfg_.w_uv, 3);
        return preds;
    }

    // ---- backward -----------------------------------------------------------

    void acc(GradBuffer& g, const std::string& name, const Mat& dv) const {
        int idx = static_cast<int>(index_.at(name));
        if (!params_[static_cast<size_t>(idx)].trainable) return;
        g[static_cast<size_t>(idx)] += dv;
    }

    // Distributes the gradient of an effective LoRA weight onto base + pair.
    void acc_lora(GradBuffer& g, int b, const char* proj, const Mat& dw_eff) const {
        acc(g, blk_name(b, "mv", (std::string("w") + proj).c_str()), dw_eff);
        const S s = S(cfg_.lora_alpha) / S(cfg_.lora_rank);
        const Mat& a = pw(blk_name(b, "mv", (std::string("lora_") + proj + "_a").c_str()));
        const Mat& bb = pw(blk_name(b, "mv", (std::string("lora_") + proj + "_b").c_str()));
        acc(g, blk_name(b, "mv", (std::string("lora_") + proj + "_b").c_str()), s * (dw_eff * a.transpose()));
        acc(g, blk_name(b, "mv", (std::string("lora_") + proj + "_a").c_str()), s * (bb.transpose() * dw_eff));
    }

    struct AttnGrads {
        Mat d_token_q, d_token_e, d_geo_q, d_geo_e;
        Mat dwq, dwk, dwv, dwo;
    };

    AttnGrads attention_backward(const Mat& dout, const Mat& token_q, const Mat& token_e,
                                 const AttnCache<S>& cache, const Mat& wq, const Mat& wk,
                                 const Mat& wv, const Mat& wo, int rope_offset_q,
                                 int rope_offset_e) const {
        const int dim = cfg_.dim, hd = cfg_.head_dim;
        const S scale = S(1) / std::sqrt(S(hd));
        AttnGrads gr;
        gr.dwo = dout.transpose() * cache.ctx;
        Mat dctx = dout * wo;
        Mat dq(token_q.rows(), dim), dk(token_e.rows(), dim), dv(token_e.rows(), dim);
        for (int h = 0; h < cfg_.heads; ++h) {
            const Mat& probs = cache.probs[static_cast<size_t>(h)];
            auto vh = cache.v.middleCols(h * hd, hd);
            auto dctx_h = dctx.middleCols(h * hd, hd);
            dv.middleCols(h * hd, hd).noalias() = probs.transpose() * dctx_h;
            Mat dprobs = dctx_h * vh.transpose();
            Mat dscores(probs.rows(), probs.cols());
            for (int r = 0; r < probs.rows(); ++r) {
                double dot = 0.0;
                for (int c = 0; c < probs.cols(); ++c)
                    dot += static_cast<double>(dprobs(r, c)) * static_cast<double>(probs(r, c));
                for (int c = 0; c < probs.cols(); ++c)
                    dscores(r, c) = probs(r, c) * (dprobs(r, c) - static_cast<S>(dot)) * scale;
            }
            dq.middleCols(h * hd, hd).noalias() = dscores * cache.k_rot.middleCols(h * hd, hd);
            dk.middleCols(h * hd, hd).noalias() = dscores.transpose() * cache.q_rot.middleCols(h * hd, hd);
        }
        gr.d_geo_q = dq;
        gr.d_geo_e = dk;
        detail::apply_rope_rows(dq, rope_cos_, rope_sin_, rope_offset_q, cfg_.heads, hd, true);
        detail::apply_rope_rows(dk, rope_cos_, rope_sin_, rope_offset_e, cfg_.heads, hd, true);
        gr.dwq = dq.transpose() * token_q;
        gr.dwk = dk.transpose() * token_e;
        gr.dwv = dv.transpose() * token_e;
        gr.d_token_q = dq * wq;
        gr.d_token_e = dk * wk + dv * wv;
        return gr;
    }

    void ff_backward(int b, const char* stream, const StreamCache& sc, const Mat& dout,
                     GradBuffer& g, Mat& dxmid, Mat& dfin) const {
        const Mat& w1 = pw(blk_name(b, stream, "ff_w1"));
        const Mat& w2 = pw(blk_name(b, stream, "ff_w2"));
        dxmid = dout;
        acc(g, blk_name(b, stream, "ff_w2"), dout.transpose() * sc.a1);
        acc(g, blk_name(b, stream, "ff_b2"), dout.colwise().sum());
        Mat da1 = dout * w2;
        Mat du1(da1.rows(), da1.cols());
        for (int r = 0; r < du1.rows(); ++r)
            for (int c = 0; c < du1.cols(); ++c)
                du1(r, c) = da1(r, c) * detail::gelu_grad(sc.u1(r, c));
        acc(g, blk_name(b, stream, "ff_w1"), du1.transpose() * sc.fin);
        acc(g, blk_name(b, stream, "ff_b1"), du1.colwise().sum());
        dfin = du1 * w1;
    }

    void mod_linear_backward(int b, const char* stream, const Mat& dmod_vals, const Fwd& fwd,
                             GradBuffer& g, Mat& dcond_silu) const {
        acc(g, blk_name(b, stream, "mod_w"), dmod_vals.transpose() * fwd.cond_silu);
        acc(g, blk_name(b, stream, "mod_b"), dmod_vals.colwise().sum());
        dcond_silu += dmod_vals * pw(blk_name(b, stream, "mod_w"));
    }

    void run_backward(const NetSample& sample, const Fwd& fwd, const std::array<Grid, 5>& dpred,
                      GradBuffer& g) const {
        const int d = cfg_.dim;
        const bool with_mv = !cfg_.uv_only;
        Mat dcond_silu = Mat::Zero(5, d);

        // Heads and final modulation.
        Mat dx_mv, dx_uv;
        if (with_mv) {
            Mat dtok(cfg_.mv_tokens(), cfg_.patch_vec());
            for (int f = 0; f < 4; ++f)
                dtok.middleRows(f * cfg_.mv_tokens_per_frame(), cfg_.mv_tokens_per_frame()) =
                    patchify_grid(dpred[static_cast<size_t>(f)], cfg_.patch);
            acc(g, "shared/head_mv_w", dtok.transpose() * fwd.yf_mv);
            acc(g, "shared/head_mv_b", dtok.colwise().sum());
            Mat dyf = dtok * pw("shared/head_mv_w");
            Mat dxhf(dyf.rows(), d);
            Mat dfin_vals = Mat::Zero(5, 2 * d);
            for (int r = 0; r < dyf.rows(); ++r) {
                int f = frame_of_mv_token(r);
                for (int c = 0; c < d; ++c) {
                    dxhf(r, c) = dyf(r, c) * (S(1) + fwd.fin_vals_mv(f, d + c));
                    dfin_vals(f, c) += dyf(r, c);
                    dfin_vals(f, d + c) += dyf(r, c) * fwd.xhf_mv(r, c);
                }
            }
            acc(g, "shared/finmod_mv_w", dfin_vals.transpose() * fwd.cond_silu);
            acc(g, "shared/finmod_mv_b", dfin_vals.colwise().sum());
            dcond_silu += dfin_vals * pw("shared/finmod_mv_w");
            dx_mv = layer_norm_backward(dxhf, fwd.xhf_mv, fwd.rstdf_mv);
        }
        {
            Mat dtok = patchify_grid(dpred[4], cfg_.patch);
            acc(g, "shared/head_uv_w", dtok.transpose() * fwd.yf_uv);
            acc(g, "shared/head_uv_b", dtok.colwise().sum());
            Mat dyf = dtok * pw("shared/head_uv_w");
            Mat dxhf(dyf.rows(), d);
            Mat dfin_vals = Mat::Zero(5, 2 * d);
            for (int r = 0; r < dyf.rows(); ++r) {
                for (int c = 0; c < d; ++c) {
                    dxhf(r, c) = dyf(r, c) * (S(1) + fwd.fin_vals_uv(4, d + c));
                    dfin_vals(4, c) += dyf(r, c);
                    dfin_vals(4, d + c) += dyf(r, c) * fwd.xhf_uv(r, c);
                }
            }
            acc(g, "shared/finmod_uv_w", dfin_vals.transpose() * fwd.cond_silu);
            acc(g, "shared/finmod_uv_b", dfin_vals.colwise().sum());
            dcond_silu += dfin_vals * pw("shared/finmod_uv_w");
            dx_uv = layer_norm_backward(dxhf, fwd.xhf_uv, fwd.rstdf_uv);
        }

        // Blocks in reverse.
        for (int b = cfg_.depth - 1; b >= 0; --b) {
            const BlockCache& bc = fwd.blocks[static_cast<size_t>(b)];
            if (cfg_.uv_only) {
                backward_stream_uv_only(b, bc, fwd, dx_uv, g, dcond_silu);
            } else if (!cfg_.decoupled) {
                backward_stream_fused(b, bc, fwd, dx_mv, dx_uv, g, dcond_silu);
            } else {
                Mat dxh1_mv_from_uv;  // e-side grad, lands in the MV stream's ln
                backward_stream_uv(b, bc, fwd, dx_uv, g, dcond_silu, dxh1_mv_from_uv);
                backward_stream_mv(b, bc, fwd, dx_mv, g, dcond_silu, dxh1_mv_from_uv);
            }
        }

        // Patch embedders.
        if (with_mv) {
            acc(g, "shared/patch_mv_w", dx_mv.transpose() * fwd.x_mv_raw);
            acc(g, "shared/patch_mv_b", dx_mv.colwise().sum());
        }
        acc(g, "shared/patch_uv_w", dx_uv.transpose() * fwd.x_uv_raw);
        acc(g, "shared/patch_uv_b", dx_uv.colwise().sum());

        // Conditioning pathway.
        Mat dcond(5, d);
        for (int f = 0; f < 5; ++f)
            for (int c = 0; c < d; ++c)
                dcond(f, c) = dcond_silu(f, c) * detail::silu_grad(fwd.cond(f, c));
        Mat dlabel = Mat::Zero(cfg_.label_vocab, d);
        for (int f = 0; f < 5; ++f) dlabel.row(sample.label) += dcond.row(f);
        acc(g, "shared/label", dlabel);
        acc(g, "shared/t_w2", dcond.transpose() * fwd.cond_hs);
        acc(g, "shared/t_b2", dcond.colwise().sum());
        Mat dhs = dcond * pw("shared/t_w2");
        Mat dh1(5, d);
        for (int f = 0; f < 5; ++f)
            for (int c = 0; c < d; ++c) dh1(f, c) = dhs(f, c) * detail::silu_grad(fwd.cond_h1(f, c));
        acc(g, "shared/t_w1", dh1.transpose() * fwd.cond_emb);
        acc(g, "shared/t_b1", dh1.colwise().sum());
    }

    // Shared tail of every stream backward: ff + ln2 + modulation chunk 1.
    // Returns d(xmid); accumulates the chunk-1 dmod entries.
    Mat backward_tail(int b, const char* stream, const StreamCache& sc, const Mat& dout,
                      GradBuffer& g, Mat& dmod_vals, bool uv_rows, bool fused) const {
        Mat dxmid, dfin;
        ff_backward(b, stream, sc, dout, g, dxmid, dfin);
        Mat dxh2(dfin.rows(), cfg_.dim);
        const int d = cfg_.dim;
        for (int r = 0; r < dfin.rows(); ++r) {
            int f = fused ? fused_frame_of(r) : (uv_rows ? 4 : frame_of_mv_token(r));
            for (int c = 0; c < d; ++c) {
                dxh2(r, c) = dfin(r, c) * (S(1) + sc.mod_vals(f, 2 * d + d + c));
                dmod_vals(f, 2 * d + c) += dfin(r, c);
                dmod_vals(f, 2 * d + d + c) += dfin(r, c) * sc.xh2(r, c);
            }
        }
        dxmid += layer_norm_backward(dxh2, sc.xh2, sc.rstd2);
        return dxmid;
    }

    void backward_stream_mv(int b, const BlockCache& bc, const Fwd& fwd, Mat& dx_mv, GradBuffer& g,
                            Mat& dcond_silu, const Mat& dxh1_from_uv) const {
        const StreamCache& sc = bc.mv;
        const int d = cfg_.dim;
        Mat dmod_vals = Mat::Zero(5, 4 * d);
        Mat dxmid = backward_tail(b, "mv", sc, dx_mv, g, dmod_vals, false, false);
        Mat dattn = dxmid;
        AttnGrads gr = attention_backward(dattn, sc.qin, sc.qin, sc.attn, sc.wq_eff, sc.wk_eff,
                                          sc.wv_eff, sc.wo_eff, 0, 0);
        acc_lora(g, b, "q", gr.dwq);
        acc_lora(g, b, "k", gr.dwk);
        acc_lora(g, b, "v", gr.dwv);
        acc_lora(g, b, "o", gr.dwo);
        if (cfg_.geo_attention)
            acc(g, blk_name(b, "mv", "geo_w"), (gr.d_geo_q + gr.d_geo_e).transpose() * fwd.g_mv_raw);
        Mat dqin = gr.d_token_q + gr.d_token_e;

        Mat dxh1(dqin.rows(), d);
        for (int r = 0; r < dqin.rows(); ++r) {
            int f = frame_of_mv_token(r);
            for (int c = 0; c < d; ++c) {
                dxh1(r, c) = dqin(r, c) * (S(1) + sc.mod_vals(f, d + c));
                dmod_vals(f, c) += dqin(r, c);
                dmod_vals(f, d + c) += dqin(r, c) * sc.xh1(r, c);
            }
        }
        // The UV stream borrowed xh1 for its e-side; fold its grad in.
        if (dxh1_from_uv.rows() > 0) dxh1 += dxh1_from_uv;
        mod_linear_backward(b, "mv", dmod_vals, fwd, g, dcond_silu);
        dx_mv = dxmid + layer_norm_backward(dxh1, sc.xh1, sc.rstd1);
    }

    void backward_stream_uv(int b, const BlockCache& bc, const Fwd& fwd, Mat& dx_uv, GradBuffer& g,
                            Mat& dcond_silu, Mat& dxh1_mv_out) const {
        const StreamCache& sc = bc.uv;
        const int d = cfg_.dim;
        const int nmv = cfg_.mv_tokens(), nuv = cfg_.uv_tokens();
        Mat dmod_vals = Mat::Zero(5, 4 * d);
        Mat dxmid = backward_tail(b, "uv", sc, dx_uv, g, dmod_vals, true, false);
        Mat dattn = dxmid;

        Mat token_e(nmv + nuv, d);
        token_e.topRows(nmv) = sc.ein;
        token_e.bottomRows(nuv) = sc.qin;
        AttnGrads gr = attention_backward(dattn, sc.qin, token_e, sc.attn,
                                          pw(blk_name(b, "uv", "wq")), pw(blk_name(b, "uv", "wk")),
                                          pw(blk_name(b, "uv", "wv")), pw(blk_name(b, "uv", "wo")),
                                          nmv, 0);
        acc(g, blk_name(b, "uv", "wq"), gr.dwq);
        acc(g, blk_name(b, "uv", "wk"), gr.dwk);
        acc(g, blk_name(b, "uv", "wv"), gr.dwv);
        acc(g, blk_name(b, "uv", "wo"), gr.dwo);
        if (cfg_.geo_attention) {
            Mat dgw = gr.d_geo_q.transpose() * fwd.g_uv_raw;
            dgw += gr.d_geo_e.topRows(nmv).transpose() * fwd.g_mv_raw;
            dgw += gr.d_geo_e.bottomRows(nuv).transpose() * fwd.g_uv_raw;
            acc(g, blk_name(b, "uv", "geo_w"), dgw);
        }
        Mat dqin = gr.d_token_q + gr.d_token_e.bottomRows(nuv);
        Mat dein = gr.d_token_e.topRows(nmv);

        // q-side (UV rows, frame 4).
        Mat dxh1(nuv, d);
        for (int r = 0; r < nuv; ++r)
            for (int c = 0; c < d; ++c) {
                dxh1(r, c) = dqin(r, c) * (S(1) + sc.mod_vals(4, d + c));
                dmod_vals(4, c) += dqin(r, c);
                dmod_vals(4, d + c) += dqin(r, c) * sc.xh1(r, c);
            }
        // e-side (MV rows, frames 0..3) modulated MV xh1 with UV weights.
        Mat dxh1_mv(nmv, d);
        for (int r = 0; r < nmv; ++r) {
            int f = frame_of_mv_token(r);
            for (int c = 0; c < d; ++c) {
                dxh1_mv(r, c) = dein(r, c) * (S(1) + sc.mod_vals(f, d + c));
                dmod_vals(f, c) += dein(r, c);
                dmod_vals(f, d + c) += dein(r, c) * bc.mv.xh1(r, c);
            }
        }
        dxh1_mv_out = std::move(dxh1_mv);
        mod_linear_backward(b, "uv", dmod_vals, fwd, g, dcond_silu);
        dx_uv = dxmid + layer_norm_backward(dxh1, sc.xh1, sc.rstd1);
    }

    void backward_stream_uv_only(int b, const BlockCache& bc, const Fwd& fwd, Mat& dx_uv,
                                 GradBuffer& g, Mat& dcond_silu) const {
        const StreamCache& sc = bc.uv;
        const int d = cfg_.dim;
        Mat dmod_vals = Mat::Zero(5, 4 * d);
        Mat dxmid = backward_tail(b, "uv", sc, dx_uv, g, dmod_vals, true, false);
        AttnGrads gr = attention_backward(dxmid, sc.qin, sc.qin, sc.attn,
                                          pw(blk_name(b, "uv", "wq")), pw(blk_name(b, "uv", "wk")),
                                          pw(blk_name(b, "uv", "wv")), pw(blk_name(b, "uv", "wo")),
                                          cfg_.mv_tokens(), cfg_.mv_tokens());
        acc(g, blk_name(b, "uv", "wq"), gr.dwq);
        acc(g, blk_name(b, "uv", "wk"), gr.dwk);
        acc(g, blk_name(b, "uv", "wv"), gr.dwv);
        acc(g, blk_name(b, "uv", "wo"), gr.dwo);
        if (cfg_.geo_attention)
            acc(g, blk_name(b, "uv", "geo_w"), (gr.d_geo_q + gr.d_geo_e).transpose() * fwd.g_uv_raw);
        Mat dqin = gr.d_token_q + gr.d_token_e;
        Mat dxh1(dqin.rows(), d);
        for (int r = 0; r < dqin.rows(); ++r)
            for (int c = 0; c < d; ++c) {
                dxh1(r, c) = dqin(r, c) * (S(1) + sc.mod_vals(4, d + c));
                dmod_vals(4, c) += dqin(r, c);
                dmod_vals(4, d + c) += dqin(r, c) * sc.xh1(r, c);
            }
        mod_linear_backward(b, "uv", dmod_vals, fwd, g, dcond_silu);
        dx_uv = dxmid + layer_norm_backward(dxh1, sc.xh1, sc.rstd1);
    }

    void backward_stream_fused(int b, const BlockCache& bc, const Fwd& fwd, Mat& dx_mv, Mat& dx_uv,
                               GradBuffer& g, Mat& dcond_silu) const {
        const StreamCache& sc = bc.mv;
        const int d = cfg_.dim;
        const int nmv = cfg_.mv_tokens(), nuv = cfg_.uv_tokens();
        Mat dout(nmv + nuv, d);
        dout.topRows(nmv) = dx_mv;
        dout.bottomRows(nuv) = dx_uv;
        Mat dmod_vals = Mat::Zero(5, 4 * d);
        Mat dxmid = backward_tail(b, "mv", sc, dout, g, dmod_vals, false, true);
        AttnGrads gr = attention_backward(dxmid, sc.qin, sc.qin, sc.attn, sc.wq_eff, sc.wk_eff,
                                          sc.wv_eff, sc.wo_eff, 0, 0);
        acc_lora(g, b, "q", gr.dwq);
        acc_lora(g, b, "k", gr.dwk);
        acc_lora(g, b, "v", gr.dwv);
        acc_lora(g, b, "o", gr.dwo);
        if (cfg_.geo_attention) {
            Mat dgeo = gr.d_geo_q + gr.d_geo_e;
            Mat dgw = dgeo.topRows(nmv).transpose() * fwd.g_mv_raw;
            dgw += dgeo.bottomRows(nuv).transpose() * fwd.g_uv_raw;
            acc(g, blk_name(b, "mv", "geo_w"), dgw);
        }
        Mat dqin = gr.d_token_q + gr.d_token_e;
        Mat dxh1(dqin.rows(), d);
        for (int r = 0; r < dqin.rows(); ++r) {
            int f = fused_frame_of(r);
            for (int c = 0; c < d; ++c) {
                dxh1(r, c) = dqin(r, c) * (S(1) + sc.mod_vals(f, d + c));
                dmod_vals(f, c) += dqin(r, c);
                dmod_vals(f, d + c) += dqin(r, c) * sc.xh1(r, c);
            }
        }
        mod_linear_backward(b, "mv", dmod_vals, fwd, g, dcond_silu);
        Mat dx_all = dxmid + layer_norm_backward(dxh1, sc.xh1, sc.rstd1);
        dx_mv = dx_all.topRows(nmv);
        dx_uv = dx_all.bottomRows(nuv);
    }

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::map<std::string, int> index_;
    Eigen::MatrixXd rope_phases_;
    Mat rope_cos_, rope_sin_;
};

using MuvModel = MuvNet<float>;

}  // namespace muv
