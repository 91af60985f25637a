#pragma once

#include <string>
#include <unordered_map>

#include "tandepth/attention_core.hpp"
#include "tandepth/autodiff.hpp"
#include "tandepth/geo_embedding.hpp"
#include "tandepth/patch_pipeline.hpp"

namespace tandepth {

// Encoder/decoder widths and attention geometry. Every parameter shape is
// derivable from this struct alone. The defaults are the desk-scale
// configuration (stage widths are half of the 16/64/128 full setting).
struct ModelConfig {
    int in_channels = 3;
    int c0 = 8;    // encoder stage 0 (stride 2)
    int c1 = 32;   // encoder stage 1 (stride 2); geometric fusion happens here
    int c2 = 64;   // encoder stage 2 (stride 2), the deep/token features
    int embed_hidden = 32;
    int reduce_channels = 4;  // 1x1 reduction before tokens
    int blocks = 6;           // transformer depth L
    int heads = 4;            // attention heads H
    int patch_res = 64;
    int n_patches = 18;

    int feat_res() const { return patch_res / 4; }
    int deep_res() const { return patch_res / 8; }
    int token_dim() const { return reduce_channels * deep_res() * deep_res(); }

    void validate() const {
        if (in_channels < 1 || c0 < 1 || c1 < 1 || c2 < 1 || embed_hidden < 1 || reduce_channels < 1 ||
            blocks < 1 || heads < 1 || n_patches < 1)
            throw std::invalid_argument("model config: all sizes must be positive");
        if (patch_res < 8 || patch_res % 8 != 0)
            throw std::invalid_argument("model config: patch_res must be a positive multiple of 8");
        if (token_dim() % heads != 0)
            throw std::invalid_argument("model config: token dim " + std::to_string(token_dim()) +
                                        " not divisible by heads");
    }
};

// Named, ordered parameter collection; the registration order is the
// serialization order.
template <class T>
struct ParamStoreT {
    struct Entry {
        std::string name;
        VarT<T> var;
    };
    std::vector<Entry> entries;
    std::unordered_map<std::string, int> index;

    VarT<T> add(const std::string& name, std::vector<int> dims) {
        if (index.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        VarT<T> v = make_leaf(TensorT<T>::make(std::move(dims)), true);
        index[name] = static_cast<int>(entries.size());
        entries.push_back({name, v});
        return v;
    }
    VarT<T> get(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::invalid_argument("unknown parameter: " + name);
        return entries[it->second].var;
    }
    void zero_grads() {
        for (auto& e : entries) {
            e.var.n->grad = e.var.n->val;
            e.var.n->grad.fill(T(0));
        }
    }
    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.var.val().numel();
        return n;
    }
};

// The patch-shared encoder-decoder with geometric fusion, global attention
// over patch tokens, and separate depth/confidence heads.
template <class T>
struct ModelT {
    ModelConfig cfg;
    ParamStoreT<T> params;

    VarT<T> embed_w1, embed_b1, embed_w2, embed_b2;
    VarT<T> enc_w[3], enc_b[3];
    VarT<T> reduce_w, reduce_b, e_pos, expand_w, expand_b;
    std::vector<AttentionBlockT<T>> attn;
    VarT<T> dec_w[3], dec_b[3];
    VarT<T> depth_w, depth_b, conf_w, conf_b;

    struct Output {
        VarT<T> depth;  // (N,1,R,R), softplus: strictly positive
        VarT<T> conf;   // (N,1,R,R), sigmoid: in (0,1)
    };

    // Deterministic fan-in-scaled uniform init; layer-norm gains 1, biases 0,
    // positional embedding small uniform.
    static ModelT init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelT m;
        m.cfg = cfg;
        Rng rng(seed);

        auto fill_uniform = [&rng](VarT<T> v, double bound) {
            for (auto& x : v.n->val.v) x = static_cast<T>(rng.uniform(-bound, bound));
        };
        auto weight = [&](const std::string& name, std::vector<int> dims, int fan_in) {
            VarT<T> v = m.params.add(name, std::move(dims));
            fill_uniform(v, 1.0 / std::sqrt(static_cast<double>(fan_in)));
            return v;
        };
        auto zeros = [&](const std::string& name, std::vector<int> dims) { return m.params.add(name, std::move(dims)); };
        auto ones = [&](const std::string& name, std::vector<int> dims) {
            VarT<T> v = m.params.add(name, std::move(dims));
            v.n->val.fill(T(1));
            return v;
        };

        m.embed_w1 = weight("embed.w1", {cfg.embed_hidden, 5, 1, 1}, 5);
        m.embed_b1 = zeros("embed.b1", {cfg.embed_hidden});
        m.embed_w2 = weight("embed.w2", {cfg.c1, cfg.embed_hidden, 1, 1}, cfg.embed_hidden);
        m.embed_b2 = zeros("embed.b2", {cfg.c1});

        const int enc_in[3] = {cfg.in_channels, cfg.c0, cfg.c1};
        const int enc_out[3] = {cfg.c0, cfg.c1, cfg.c2};
        for (int s = 0; s < 3; ++s) {
            m.enc_w[s] = weight("enc" + std::to_string(s) + ".w", {enc_out[s], enc_in[s], 3, 3}, enc_in[s] * 9);
            m.enc_b[s] = zeros("enc" + std::to_string(s) + ".b", {enc_out[s]});
        }

        const int d = cfg.token_dim();
        m.reduce_w = weight("attn.reduce.w", {cfg.reduce_channels, cfg.c2, 1, 1}, cfg.c2);
        m.reduce_b = zeros("attn.reduce.b", {cfg.reduce_channels});
        m.e_pos = m.params.add("attn.e_pos", {cfg.n_patches, d});
        fill_uniform(m.e_pos, 0.02);
        for (int l = 0; l < cfg.blocks; ++l) {
            const std::string pre = "attn.block" + std::to_string(l) + ".";
            AttentionBlockT<T> b;
            b.wq = weight(pre + "wq", {d, d}, d);
            b.wk = weight(pre + "wk", {d, d}, d);
            b.wv = weight(pre + "wv", {d, d}, d);
            b.wo = weight(pre + "wo", {d, d}, d);
            b.ln1_g = ones(pre + "ln1.g", {d});
            b.ln1_b = zeros(pre + "ln1.b", {d});
            b.ffn_w1 = weight(pre + "ffn.w1", {d, 4 * d}, d);
            b.ffn_b1 = zeros(pre + "ffn.b1", {4 * d});
            b.ffn_w2 = weight(pre + "ffn.w2", {4 * d, d}, 4 * d);
            b.ffn_b2 = zeros(pre + "ffn.b2", {d});
            b.ln2_g = ones(pre + "ln2.g", {d});
            b.ln2_b = zeros(pre + "ln2.b", {d});
            m.attn.push_back(b);
        }
        m.expand_w = weight("attn.expand.w", {cfg.c2, cfg.reduce_channels, 1, 1}, cfg.reduce_channels);
        m.expand_b = zeros("attn.expand.b", {cfg.c2});

        const int dec_in[3] = {cfg.c2 + cfg.c1, cfg.c1 + cfg.c0, cfg.c0};
        const int dec_out[3] = {cfg.c1, cfg.c0, cfg.c0};
        for (int s = 0; s < 3; ++s) {
            m.dec_w[s] = weight("dec" + std::to_string(s) + ".w", {dec_out[s], dec_in[s], 3, 3}, dec_in[s] * 9);
            m.dec_b[s] = zeros("dec" + std::to_string(s) + ".b", {dec_out[s]});
        }
        m.depth_w = weight("head.depth.w", {1, cfg.c0, 3, 3}, cfg.c0 * 9);
        m.depth_b = zeros("head.depth.b", {1});
        m.conf_w = weight("head.conf.w", {1, cfg.c0, 3, 3}, cfg.c0 * 9);
        m.conf_b = zeros("head.conf.b", {1});
        return m;
    }

    // Geometric features for the given attrs; with rho from the tape when
    // `rho` is defined, otherwise from the constant attrs tensor. For fixed
    // parameters these are input-image-independent (iteration 1 can cache
    // them).
    VarT<T> geo_features(const GeomAttrs& attrs, VarT<T> rho) const {
        VarT<T> a5 = rho.defined() ? attrs_var_with_rho(attrs, rho) : constant(attrs_tensor<T>(attrs));
        return embed(a5, embed_w1, embed_b1, embed_w2, embed_b2);
    }

    Output forward(VarT<T> patches, const GeomAttrs& attrs, VarT<T> rho = VarT<T>()) const {
        const auto& pd = patches.val().dims;
        if (patches.val().nd != 4 || pd[0] != cfg.n_patches || pd[1] != cfg.in_channels || pd[2] != cfg.patch_res ||
            pd[3] != cfg.patch_res)
            throw std::invalid_argument("forward: patch stack is " + patches.val().shape_str() + ", config wants (" +
                                        std::to_string(cfg.n_patches) + "," + std::to_string(cfg.in_channels) + "," +
                                        std::to_string(cfg.patch_res) + "," + std::to_string(cfg.patch_res) + ")");
        if (attrs.n != cfg.n_patches || attrs.res != cfg.feat_res())
            throw std::invalid_argument("forward: attrs resolution mismatch");

        VarT<T> x0 = silu(conv2d(patches, enc_w[0], enc_b[0], 2, 1));     // (N,c0,R/2)
        VarT<T> x1 = silu(conv2d(x0, enc_w[1], enc_b[1], 2, 1));          // (N,c1,R/4)
        VarT<T> fused = fuse(x1, geo_features(attrs, rho));
        VarT<T> deep = silu(conv2d(fused, enc_w[2], enc_b[2], 2, 1));     // (N,c2,R/8)

        VarT<T> z = tokenize(deep, reduce_w, reduce_b, e_pos);
        for (const auto& b : attn) z = transformer_block(z, b, cfg.heads);
        VarT<T> deep2 = detokenize(z, expand_w, expand_b, deep);

        VarT<T> d0 = silu(conv2d(concat_channels<T>({bilinear_up(deep2, 2), fused}), dec_w[0], dec_b[0], 1, 1));
        VarT<T> d1 = silu(conv2d(concat_channels<T>({bilinear_up(d0, 2), x0}), dec_w[1], dec_b[1], 1, 1));
        VarT<T> d2 = silu(conv2d(bilinear_up(d1, 2), dec_w[2], dec_b[2], 1, 1));

        Output out;
        out.depth = softplus(conv2d(d2, depth_w, depth_b, 1, 1));
        out.conf = sigmoid(conv2d(d2, conf_w, conf_b, 1, 1));
        return out;
    }
};

// Adam with bias correction ("default setting": beta1 0.9, beta2 0.999,
// eps 1e-8). Moments are kept per parameter in registration order.
template <class T>
struct AdamT {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t t = 0;
    std::vector<TensorT<T>> m, v;

    void step(ParamStoreT<T>& params, double lr) {
        if (m.empty()) {
            for (auto& e : params.entries) {
                TensorT<T> z = e.var.val();
                z.fill(T(0));
                m.push_back(z);
                v.push_back(z);
            }
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.entries.size(); ++i) {
            auto& p = params.entries[i].var.n->val;
            const auto& g = params.entries[i].var.n->grad;
            if (g.numel() != p.numel()) continue;  // never backpropagated: keep
            for (int64_t k = 0; k < p.numel(); ++k) {
                const double gk = static_cast<double>(g.v[k]);
                const double mk = beta1 * static_cast<double>(m[i].v[k]) + (1.0 - beta1) * gk;
                const double vk = beta2 * static_cast<double>(v[i].v[k]) + (1.0 - beta2) * gk * gk;
                m[i].v[k] = static_cast<T>(mk);
                v[i].v[k] = static_cast<T>(vk);
                p.v[k] -= static_cast<T>(lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps));
            }
        }
    }
};

// Cosine-annealed learning rate: lr(0) = lr0, lr(total) = 0.
inline double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0) return lr0;
    const double x = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * x));
}

template <class T>
TensorT<T> stack_to_tensor(const PatchStack& s) {
    TensorT<T> t = TensorT<T>::make({s.n, s.channels, s.res, s.res});
    for (int64_t i = 0; i < t.numel(); ++i) t.v[i] = static_cast<T>(s.data[i]);
    return t;
}

template <class T>
PatchStack tensor_to_stack(const TensorT<T>& t) {
    PatchStack s = PatchStack::make(t.dims[0], t.dims[2], t.dims[1]);
    for (int64_t i = 0; i < t.numel(); ++i) s.data[i] = static_cast<float>(t.v[i]);
    return s;
}

using Model = ModelT<float>;

}  // namespace tandepth
