#pragma once

#include "hgct/config.hpp"
#include "hgct/ops.hpp"
#include "hgct/topology.hpp"

namespace hgct {

// Parameter visitation: fn(name, tensor, decay). Weight decay applies to conv
// and affine weights plus the adjacency parameters, not to norm gains/biases
// or embeddings.

template <typename T>
struct Conv2dTV {
    Tensor<T> weight;  // [Cout, Cin/groups, kt, 1]
    Tensor<T> bias;    // undefined when bias-less
    ConvOpts opts;

    static Conv2dTV make(int64_t cin, int64_t cout, int64_t kt, ConvOpts opts, bool with_bias,
                         Rng& rng) {
        Conv2dTV c;
        c.opts = opts;
        const int64_t fan_in = (cin / opts.groups) * kt;
        const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
        c.weight = Tensor<T>::randn({cout, cin / opts.groups, kt, 1}, rng, std);
        c.weight.set_requires_grad(true);
        if (with_bias) {
            c.bias = Tensor<T>({cout}, T(0));
            c.bias.set_requires_grad(true);
        }
        return c;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return conv_tv(x, weight, bias.defined() ? std::optional<Tensor<T>>(bias) : std::nullopt,
                       opts);
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        fn(prefix + ".w", weight, true);
        if (bias.defined()) fn(prefix + ".b", bias, true);
    }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gain, bias;
    Tensor<T> running_mean, running_var, num_batches;  // buffers
    T momentum = static_cast<T>(0.1);
    T eps = static_cast<T>(1e-5);
    mutable bool warned_uninitialized = false;

    static BatchNorm2d make(int64_t c) {
        BatchNorm2d bn;
        bn.gain = Tensor<T>({c}, T(1));
        bn.gain.set_requires_grad(true);
        bn.bias = Tensor<T>({c}, T(0));
        bn.bias.set_requires_grad(true);
        bn.running_mean = Tensor<T>({c}, T(0));
        bn.running_var = Tensor<T>({c}, T(1));
        bn.num_batches = Tensor<T>({1}, T(0));
        return bn;
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        if (training) {
            num_batches.data()[0] += T(1);
        } else if (num_batches.values()[0] == T(0) && !warned_uninitialized) {
            warned_uninitialized = true;
            log_warn("batch_norm evaluated before any training step; using init stats");
        }
        return batch_norm(x, gain, bias, running_mean, running_var, training, momentum, eps);
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        fn(prefix + ".gain", gain, false);
        fn(prefix + ".bias", bias, false);
    }
    template <typename F>
    void visit_buffers(const std::string& prefix, F&& fn) {
        fn(prefix + ".running_mean", running_mean);
        fn(prefix + ".running_var", running_var);
        fn(prefix + ".num_batches", num_batches);
    }
};

template <typename T>
struct LayerNormCh {
    Tensor<T> gain, bias;
    int64_t axis;

    static LayerNormCh make(int64_t c, int64_t axis) {
        LayerNormCh ln;
        ln.axis = axis;
        ln.gain = Tensor<T>({c}, T(1));
        ln.gain.set_requires_grad(true);
        ln.bias = Tensor<T>({c}, T(0));
        ln.bias.set_requires_grad(true);
        return ln;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return layer_norm(x, axis, gain, bias, static_cast<T>(1e-5));
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        fn(prefix + ".gain", gain, false);
        fn(prefix + ".bias", bias, false);
    }
};

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out], undefined when bias-less

    static Linear make(int64_t in, int64_t out, Rng& rng, bool with_bias = true) {
        Linear l;
        const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
        l.weight = Tensor<T>::uniform({in, out}, rng, -limit, limit);
        l.weight.set_requires_grad(true);
        if (with_bias) {
            l.bias = Tensor<T>({out}, T(0));
            l.bias.set_requires_grad(true);
        }
        return l;
    }

    // x: [..., in] -> [..., out]
    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> y = matmul(x, weight);
        if (!bias.defined()) return y;
        Shape bshape(x.shape().size(), 1);
        bshape.back() = bias.numel();
        return add(y, reshape(bias, bshape));
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        fn(prefix + ".w", weight, true);
        if (bias.defined()) fn(prefix + ".b", bias, false);
    }
};

// Standard multi-head scaled dot-product self-attention over [R, L, C].
template <typename T>
struct Mhsa {
    Linear<T> wq, wk, wv, wo;
    int64_t heads = 1;
    int64_t c = 0;
    double attn_drop = 0.0;

    static Mhsa make(int64_t c, int64_t heads, double attn_drop, Rng& rng) {
        if (heads < 1 || c % heads != 0) throw ConfigError("mhsa: heads must divide channels");
        Mhsa m;
        m.heads = heads;
        m.c = c;
        m.attn_drop = attn_drop;
        m.wq = Linear<T>::make(c, c, rng);
        // a key bias shifts every logit in a softmax row equally, so it can
        // never affect the output; not allocated
        m.wk = Linear<T>::make(c, c, rng, /*with_bias=*/false);
        m.wv = Linear<T>::make(c, c, rng);
        m.wo = Linear<T>::make(c, c, rng);
        return m;
    }

    // attn_out, when given, receives the post-softmax weights [R, H, L, L].
    Tensor<T> forward(const Tensor<T>& tokens, bool training = false, Rng* rng = nullptr,
                      Tensor<T>* attn_out = nullptr) const {
        const Shape& s = tokens.shape();
        if (s.size() != 3 || s[2] != c) throw ShapeError("mhsa expects [R, L, C] tokens");
        const int64_t r = s[0], l = s[1], dh = c / heads;
        auto split = [&](const Tensor<T>& t) {
            // [R, L, C] -> [R, H, L, Dh]
            return permute(reshape(t, {r, l, heads, dh}), {0, 2, 1, 3});
        };
        Tensor<T> q = split(wq.forward(tokens));
        Tensor<T> k = split(wk.forward(tokens));
        Tensor<T> v = split(wv.forward(tokens));
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor<T> scores = mul_scalar(matmul(q, k, false, true), scale);  // [R, H, L, L]
        Tensor<T> attn = softmax(scores, 3);
        if (attn_out) *attn_out = attn;
        if (training && attn_drop > 0.0) {
            if (!rng) throw UsageError("mhsa dropout needs an rng in training mode");
            attn = dropout(attn, attn_drop, training, *rng);
        }
        Tensor<T> ctx = matmul(attn, v);  // [R, H, L, Dh]
        Tensor<T> merged = reshape(permute(ctx, {0, 2, 1, 3}), {r, l, c});
        return wo.forward(merged);
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        wq.visit_params(prefix + ".q", fn);
        wk.visit_params(prefix + ".k", fn);
        wv.visit_params(prefix + ".v", fn);
        wo.visit_params(prefix + ".o", fn);
    }
};

// ---------------------------------------------------------------------------
// STGC: partitioned spatial graph convolution + multiscale temporal conv
// ---------------------------------------------------------------------------

// Contract the joint axis: out[..., v] = sum_u f[..., u] * A[u, v].
template <typename T>
Tensor<T> joint_contract(const Tensor<T>& f, const Tensor<T>& adj) {
    const Shape& s = f.shape();
    const int64_t v = s.back();
    if (adj.shape() != Shape{v, v}) throw ShapeError("adjacency must be [V, V]");
    Tensor<T> flat = reshape(f, {f.numel() / v, v});
    return reshape(matmul(flat, adj), s);
}

template <typename T>
struct SpatialGraphConv {
    std::array<Conv2dTV<T>, 3> convs;  // per-partition 1x1, C_in -> C_out
    BatchNorm2d<T> bn;

    static SpatialGraphConv make(int64_t cin, int64_t cout, Rng& rng) {
        SpatialGraphConv s;
        // bias-less: the batch norm behind the sum absorbs any channel offset
        for (int k = 0; k < 3; ++k)
            s.convs[k] = Conv2dTV<T>::make(cin, cout, 1, ConvOpts{}, false, rng);
        s.bn = BatchNorm2d<T>::make(cout);
        return s;
    }

    Tensor<T> forward(const Tensor<T>& x, const std::array<Tensor<T>, 3>& adj, bool training) {
        Tensor<T> acc;
        for (int k = 0; k < 3; ++k) {
            Tensor<T> branch = convs[k].forward(joint_contract(x, adj[k]));
            acc = k == 0 ? branch : add(acc, branch);
        }
        return relu(bn.forward(acc, training));
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        for (int k = 0; k < 3; ++k)
            convs[k].visit_params(prefix + ".part" + std::to_string(k), fn);
        bn.visit_params(prefix + ".bn", fn);
    }
    template <typename F>
    void visit_buffers(const std::string& prefix, F&& fn) {
        bn.visit_buffers(prefix + ".bn", fn);
    }
};

// Four branches of width C/4: two dilated 5x1 convs, one 3x1 max pool, one
// 1x1 bottleneck; concat, add the module input, ReLU.
template <typename T>
struct MultiScaleTcn {
    Conv2dTV<T> reduce_a, conv_a;
    BatchNorm2d<T> bn_a1, bn_a2;
    Conv2dTV<T> reduce_b, conv_b;
    BatchNorm2d<T> bn_b1, bn_b2;
    Conv2dTV<T> reduce_c;
    BatchNorm2d<T> bn_c1, bn_c2;
    Conv2dTV<T> bottleneck;
    BatchNorm2d<T> bn_d;

    static MultiScaleTcn make(int64_t c, Rng& rng) {
        if (c % 4 != 0) throw ConfigError("multiscale temporal conv requires channels % 4 == 0");
        const int64_t cb = c / 4;
        MultiScaleTcn m;
        // every conv here feeds a batch norm, so biases are omitted
        m.reduce_a = Conv2dTV<T>::make(c, cb, 1, ConvOpts{}, false, rng);
        m.conv_a = Conv2dTV<T>::make(cb, cb, 5, ConvOpts{1, 2, 1, 1}, false, rng);
        m.bn_a1 = BatchNorm2d<T>::make(cb);
        m.bn_a2 = BatchNorm2d<T>::make(cb);
        m.reduce_b = Conv2dTV<T>::make(c, cb, 1, ConvOpts{}, false, rng);
        m.conv_b = Conv2dTV<T>::make(cb, cb, 5, ConvOpts{1, 4, 2, 1}, false, rng);
        m.bn_b1 = BatchNorm2d<T>::make(cb);
        m.bn_b2 = BatchNorm2d<T>::make(cb);
        m.reduce_c = Conv2dTV<T>::make(c, cb, 1, ConvOpts{}, false, rng);
        m.bn_c1 = BatchNorm2d<T>::make(cb);
        m.bn_c2 = BatchNorm2d<T>::make(cb);
        m.bottleneck = Conv2dTV<T>::make(c, cb, 1, ConvOpts{}, false, rng);
        m.bn_d = BatchNorm2d<T>::make(cb);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        Tensor<T> a = bn_a2.forward(
            conv_a.forward(relu(bn_a1.forward(reduce_a.forward(x), training))), training);
        Tensor<T> b = bn_b2.forward(
            conv_b.forward(relu(bn_b1.forward(reduce_b.forward(x), training))), training);
        Tensor<T> c = bn_c2.forward(
            max_pool_t(relu(bn_c1.forward(reduce_c.forward(x), training)), 3, 1), training);
        Tensor<T> d = bn_d.forward(bottleneck.forward(x), training);
        return relu(add(concat<T>({a, b, c, d}, 1), x));
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        reduce_a.visit_params(prefix + ".a.reduce", fn);
        bn_a1.visit_params(prefix + ".a.bn1", fn);
        conv_a.visit_params(prefix + ".a.conv", fn);
        bn_a2.visit_params(prefix + ".a.bn2", fn);
        reduce_b.visit_params(prefix + ".b.reduce", fn);
        bn_b1.visit_params(prefix + ".b.bn1", fn);
        conv_b.visit_params(prefix + ".b.conv", fn);
        bn_b2.visit_params(prefix + ".b.bn2", fn);
        reduce_c.visit_params(prefix + ".c.reduce", fn);
        bn_c1.visit_params(prefix + ".c.bn1", fn);
        bn_c2.visit_params(prefix + ".c.bn2", fn);
        bottleneck.visit_params(prefix + ".d.conv", fn);
        bn_d.visit_params(prefix + ".d.bn", fn);
    }
    template <typename F>
    void visit_buffers(const std::string& prefix, F&& fn) {
        bn_a1.visit_buffers(prefix + ".a.bn1", fn);
        bn_a2.visit_buffers(prefix + ".a.bn2", fn);
        bn_b1.visit_buffers(prefix + ".b.bn1", fn);
        bn_b2.visit_buffers(prefix + ".b.bn2", fn);
        bn_c1.visit_buffers(prefix + ".c.bn1", fn);
        bn_c2.visit_buffers(prefix + ".c.bn2", fn);
        bn_d.visit_buffers(prefix + ".d.bn", fn);
    }
};

template <typename T>
struct StgcBlock {
    PartitionedAdjacency<T> adjacency;
    SpatialGraphConv<T> spatial;
    MultiScaleTcn<T> temporal;
    Conv2dTV<T> residual;  // defined only when C_in != C_out
    bool has_residual_proj = false;

    static StgcBlock make(int64_t cin, int64_t cout, const SkeletonGraph& graph,
                          TopologyMode mode, int freeze_epochs, Rng& rng) {
        StgcBlock b;
        b.adjacency = PartitionedAdjacency<T>::make(graph, mode, freeze_epochs);
        b.spatial = SpatialGraphConv<T>::make(cin, cout, rng);
        b.temporal = MultiScaleTcn<T>::make(cout, rng);
        if (cin != cout) {
            b.residual = Conv2dTV<T>::make(cin, cout, 1, ConvOpts{}, true, rng);
            b.has_residual_proj = true;
        }
        return b;
    }

    Tensor<T> forward(const Tensor<T>& x, int epoch, bool training) {
        const auto adj = adjacency.effective(epoch);
        Tensor<T> h = temporal.forward(spatial.forward(x, adj, training), training);
        Tensor<T> res = has_residual_proj ? residual.forward(x) : x;
        return relu(add(h, res));
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        adjacency.visit_params(prefix + ".adjacency", fn);
        spatial.visit_params(prefix + ".spatial", fn);
        temporal.visit_params(prefix + ".temporal", fn);
        if (has_residual_proj) residual.visit_params(prefix + ".residual", fn);
    }
    template <typename F>
    void visit_buffers(const std::string& prefix, F&& fn) {
        spatial.visit_buffers(prefix + ".spatial", fn);
        temporal.visit_buffers(prefix + ".temporal", fn);
    }
};

// ---------------------------------------------------------------------------
// DSTT: disentangle, global spatial/temporal attention, CwFF
// ---------------------------------------------------------------------------

// [B,C,T,V] -> joint tokens [B*T, V, C]
template <typename T>
Tensor<T> to_joint_tokens(const Tensor<T>& f) {
    const Shape& s = f.shape();
    return reshape(permute(f, {0, 2, 3, 1}), {s[0] * s[2], s[3], s[1]});
}
template <typename T>
Tensor<T> from_joint_tokens(const Tensor<T>& tok, int64_t b, int64_t t, int64_t v) {
    const int64_t c = tok.shape()[2];
    return permute(reshape(tok, {b, t, v, c}), {0, 3, 1, 2});
}

// [B,C,T,V] -> frame tokens [B*V, T, C]
template <typename T>
Tensor<T> to_frame_tokens(const Tensor<T>& f) {
    const Shape& s = f.shape();
    return reshape(permute(f, {0, 3, 2, 1}), {s[0] * s[3], s[2], s[1]});
}
template <typename T>
Tensor<T> from_frame_tokens(const Tensor<T>& tok, int64_t b, int64_t t, int64_t v) {
    const int64_t c = tok.shape()[2];
    return permute(reshape(tok, {b, v, t, c}), {0, 3, 2, 1});
}

// Sinusoidal frame-order encoding, [C, T]: channel 2i is sin(t * w_i),
// channel 2i+1 is cos(t * w_i) with w_i = 10000^(-2i/C).
template <typename T>
std::vector<T> sinusoidal_encoding(int64_t c, int64_t t) {
    std::vector<T> pe(static_cast<size_t>(c * t), T(0));
    for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t i = ch / 2;
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(c));
        for (int64_t ti = 0; ti < t; ++ti) {
            const double arg = static_cast<double>(ti) * w;
            pe[static_cast<size_t>(ch * t + ti)] =
                static_cast<T>(ch % 2 == 0 ? std::sin(arg) : std::cos(arg));
        }
    }
    return pe;
}

// Captured per-stage activations for the feature-response dump.
template <typename T>
struct BlockTrace {
    Tensor<T> f_spatial;   // disentangled spatial stream
    Tensor<T> f_temporal;  // disentangled temporal stream
    Tensor<T> output;      // block output
};

template <typename T>
struct DsttBlock {
    DsttConfig cfg;
    int stage_index = 0;
    Conv2dTV<T> embed_spatial;   // 1x1, C -> C_e^S
    Conv2dTV<T> embed_temporal;  // 3x1, C -> C_e^T
    Tensor<T> joint_embed;       // [C_e^S, V], first stage only
    LayerNormCh<T> norm_s, norm_t;
    Mhsa<T> gsa, gta;
    LayerNormCh<T> norm_ff;
    Conv2dTV<T> ff_expand, ff_depthwise, ff_squeeze;

    static DsttBlock make(int64_t cin, const DsttConfig& cfg, int stage_index, int64_t v,
                          Rng& rng) {
        cfg.validate();
        DsttBlock d;
        d.cfg = cfg;
        d.stage_index = stage_index;
        const int64_t cs = cfg.c_s(), ct = cfg.c_t(), ce = cfg.c_e;
        d.embed_spatial = Conv2dTV<T>::make(cin, cs, 1, ConvOpts{}, true, rng);
        d.embed_temporal = Conv2dTV<T>::make(cin, ct, 3, ConvOpts{1, 1, 1, 1}, true, rng);
        if (stage_index == 0) {
            // allocated regardless of the toggle so parameter counts match
            // across the on/off variants
            d.joint_embed = Tensor<T>::randn({cs, v}, rng, static_cast<T>(0.02));
            d.joint_embed.set_requires_grad(true);
        }
        d.norm_s = LayerNormCh<T>::make(cs, 2);
        d.norm_t = LayerNormCh<T>::make(ct, 2);
        d.gsa = Mhsa<T>::make(cs, cfg.s_heads, cfg.attn_drop, rng);
        d.gta = Mhsa<T>::make(ct, cfg.t_heads, cfg.attn_drop, rng);
        d.norm_ff = LayerNormCh<T>::make(ce, 1);
        const int64_t hidden = static_cast<int64_t>(cfg.gamma) * ce;
        d.ff_expand = Conv2dTV<T>::make(ce, hidden, 1, ConvOpts{}, true, rng);
        d.ff_depthwise =
            Conv2dTV<T>::make(hidden, hidden, 3, ConvOpts{1, 1, 1, hidden}, true, rng);
        d.ff_squeeze = Conv2dTV<T>::make(hidden, ce, 1, ConvOpts{}, true, rng);
        return d;
    }

    Tensor<T> cwff(const Tensor<T>& y, bool training, Rng* rng) const {
        Tensor<T> h = norm_ff.forward(y);
        h = gelu(ff_expand.forward(h));
        h = gelu(ff_depthwise.forward(h));
        h = ff_squeeze.forward(h);
        if (training && cfg.ff_drop > 0.0) {
            if (!rng) throw UsageError("cwff dropout needs an rng in training mode");
            h = dropout(h, cfg.ff_drop, training, *rng);
        }
        return h;
    }

    Tensor<T> forward(const Tensor<T>& x, bool training, Rng* rng = nullptr,
                      BlockTrace<T>* trace = nullptr) const {
        const Shape& s = x.shape();
        const int64_t b = s[0], t = s[2], v = s[3];
        Tensor<T> f_s = embed_spatial.forward(x);
        Tensor<T> f_t = embed_temporal.forward(x);
        if (stage_index == 0) {
            if (cfg.use_joint_type)
                f_s = add(f_s, reshape(joint_embed, {1, cfg.c_s(), 1, v}));
            if (cfg.use_frame_order) {
                Tensor<T> pe = Tensor<T>::from_data({1, cfg.c_t(), t, 1},
                                                    sinusoidal_encoding<T>(cfg.c_t(), t));
                f_t = add(f_t, pe);
            }
        }
        if (trace) {
            trace->f_spatial = f_s.detach();
            trace->f_temporal = f_t.detach();
        }
        // GSA over joint tokens and GTA over frame tokens, pre-norm residual
        Tensor<T> a_s = add(
            f_s, from_joint_tokens(gsa.forward(norm_s.forward(to_joint_tokens(f_s)), training, rng),
                                   b, t, v));
        Tensor<T> a_t = add(
            f_t, from_frame_tokens(gta.forward(norm_t.forward(to_frame_tokens(f_t)), training, rng),
                                   b, t, v));
        Tensor<T> y = concat<T>({a_s, a_t}, 1);
        Tensor<T> out = add(y, cwff(y, training, rng));
        if (trace) trace->output = out.detach();
        return out;
    }

    template <typename F>
    void visit_params(const std::string& prefix, F&& fn) {
        embed_spatial.visit_params(prefix + ".embed_s", fn);
        embed_temporal.visit_params(prefix + ".embed_t", fn);
        if (stage_index == 0) fn(prefix + ".joint_embed", joint_embed, false);
        norm_s.visit_params(prefix + ".norm_s", fn);
        norm_t.visit_params(prefix + ".norm_t", fn);
        gsa.visit_params(prefix + ".gsa", fn);
        gta.visit_params(prefix + ".gta", fn);
        norm_ff.visit_params(prefix + ".norm_ff", fn);
        ff_expand.visit_params(prefix + ".ff.expand", fn);
        ff_depthwise.visit_params(prefix + ".ff.depthwise", fn);
        ff_squeeze.visit_params(prefix + ".ff.squeeze", fn);
    }
};

}  // namespace hgct
