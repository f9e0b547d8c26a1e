#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstring>
#include <optional>

#include "hgct/tensor.hpp"

namespace hgct {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using EStrideMap = Eigen::Map<EMat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
template <typename T>
using ECStrideMap = Eigen::Map<const EMat<T>, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (size_t i = 0; i < n; ++i) {
        const int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `shape` aligned to the right of `out`, zero on broadcast dims.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    const auto st = row_strides(shape);
    std::vector<int64_t> r(out.size(), 0);
    const size_t off = out.size() - shape.size();
    for (size_t i = 0; i < shape.size(); ++i)
        r[off + i] = shape[i] == 1 ? 0 : st[i];
    return r;
}

// Copies src into dst with dst laid out as src permuted by `perm`
// (dst dim i = src dim perm[i]). Uses contiguous inner runs when the source's
// fastest dim stays last, otherwise a 32x32 tiled transpose over the two
// contiguous dims.
template <typename T>
void permute_copy(const T* src, T* dst, const Shape& src_shape,
                  const std::vector<int64_t>& perm) {
    const size_t nd = src_shape.size();
    const auto src_st = row_strides(src_shape);
    Shape dst_shape(nd);
    std::vector<int64_t> gather_st(nd);  // src stride per dst dim
    for (size_t i = 0; i < nd; ++i) {
        dst_shape[i] = src_shape[perm[i]];
        gather_st[i] = src_st[perm[i]];
    }
    const int64_t total = shape_numel(src_shape);
    if (total == 0) return;
    if (nd == 0 || perm.back() == static_cast<int64_t>(nd) - 1) {
        // inner run contiguous in both: memcpy blocks
        const int64_t run = src_shape.back();
        const int64_t blocks = total / std::max<int64_t>(run, 1);
        std::vector<int64_t> coord(nd, 0);
        int64_t so = 0;
        for (int64_t blk = 0; blk < blocks; ++blk) {
            std::memcpy(dst + blk * run, src + so, static_cast<size_t>(run) * sizeof(T));
            for (size_t d = nd - 1; d-- > 0;) {
                ++coord[d];
                so += gather_st[d];
                if (coord[d] < dst_shape[d]) break;
                so -= gather_st[d] * dst_shape[d];
                coord[d] = 0;
            }
        }
        return;
    }
    // position (in dst order) of the src-contiguous dim
    size_t a = 0;
    for (size_t i = 0; i < nd; ++i)
        if (perm[i] == static_cast<int64_t>(nd) - 1) a = i;
    const size_t b = nd - 1;
    const int64_t na = dst_shape[a], nb = dst_shape[b];
    const int64_t sa_dst = [&] {
        auto st = row_strides(dst_shape);
        return st[a];
    }();
    const int64_t sb_src = gather_st[b];
    // odometer over the remaining dims
    std::vector<size_t> rest;
    for (size_t i = 0; i < nd; ++i)
        if (i != a && i != b) rest.push_back(i);
    std::vector<int64_t> coord(rest.size(), 0);
    const auto dst_st = row_strides(dst_shape);
    int64_t so = 0, dso = 0;
    constexpr int64_t kTile = 32;
    while (true) {
        for (int64_t ia0 = 0; ia0 < na; ia0 += kTile)
            for (int64_t ib0 = 0; ib0 < nb; ib0 += kTile) {
                const int64_t ia1 = std::min(na, ia0 + kTile);
                const int64_t ib1 = std::min(nb, ib0 + kTile);
                for (int64_t ia = ia0; ia < ia1; ++ia) {
                    const T* s = src + so + ia + ib0 * sb_src;
                    T* d = dst + dso + ia * sa_dst + ib0;
                    for (int64_t ib = 0; ib < ib1 - ib0; ++ib) d[ib] = s[ib * sb_src];
                }
            }
        size_t k = rest.size();
        bool done = true;
        while (k-- > 0) {
            const size_t dim = rest[k];
            ++coord[k];
            so += gather_st[dim];
            dso += dst_st[dim];
            if (coord[k] < dst_shape[dim]) {
                done = false;
                break;
            }
            so -= gather_st[dim] * dst_shape[dim];
            dso -= dst_st[dim] * dst_shape[dim];
            coord[k] = 0;
        }
        if (done) break;
    }
}

// Odometer walk over `out_shape`, invoking fn(out_index, a_offset, b_offset).
template <typename Fn>
void broadcast_walk(const Shape& out_shape, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, Fn&& fn) {
    const int64_t n = shape_numel(out_shape);
    const size_t nd = out_shape.size();
    if (nd == 0) {
        if (n > 0) fn(0, 0, 0);
        return;
    }
    std::vector<int64_t> coord(nd, 0);
    int64_t ao = 0, bo = 0;
    for (int64_t i = 0; i < n; ++i) {
        fn(i, ao, bo);
        for (size_t d = nd; d-- > 0;) {
            ++coord[d];
            ao += sa[d];
            bo += sb[d];
            if (coord[d] < out_shape[d]) break;
            ao -= sa[d] * out_shape[d];
            bo -= sb[d] * out_shape[d];
            coord[d] = 0;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast binaries
// ---------------------------------------------------------------------------

enum class BinOp { Add, Sub, Mul };

namespace detail {

// Fast-path classification for broadcast binaries: `a` covers the full output
// and `b` repeats a single value along a contiguous suffix of the output dims.
struct SuffixBroadcast {
    bool applies = false;
    size_t lead_dims = 0;
    int64_t inner = 1;
};

inline SuffixBroadcast suffix_broadcast(const Shape& out_shape, const Shape& a_shape,
                                        const std::vector<int64_t>& sb) {
    SuffixBroadcast r;
    if (a_shape != out_shape) return r;
    size_t k = sb.size();
    while (k > 0 && sb[k - 1] == 0) --k;
    for (size_t d = k; d < out_shape.size(); ++d) r.inner *= out_shape[d];
    r.lead_dims = k;
    r.applies = true;
    return r;
}

}  // namespace detail

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinOp op, const char* name) {
    const Shape out_shape = detail::broadcast_shapes(a.shape(), b.shape());
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    const T* av = a.values().data();
    const T* bv = b.values().data();

    // fast-path layouts: identical shapes, or one operand constant over a
    // contiguous suffix of the other
    const bool same = a.shape() == b.shape();
    const bool commutable = op != BinOp::Sub;
    auto sfx_b = detail::suffix_broadcast(out_shape, a.shape(), sb);
    auto sfx_a = commutable ? detail::suffix_broadcast(out_shape, b.shape(), sa)
                            : detail::SuffixBroadcast{};

    if (same) {
        const size_t n = out.size();
        switch (op) {
            case BinOp::Add: for (size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i]; break;
            case BinOp::Sub: for (size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i]; break;
            case BinOp::Mul: for (size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i]; break;
        }
    } else if (sfx_b.applies || sfx_a.applies) {
        const auto& fx = sfx_b.applies ? sfx_b : sfx_a;
        const T* full = sfx_b.applies ? av : bv;
        const T* scal = sfx_b.applies ? bv : av;
        const auto& sscal = sfx_b.applies ? sb : sa;
        const Shape lead(out_shape.begin(), out_shape.begin() + fx.lead_dims);
        const std::vector<int64_t> slead(sscal.begin(), sscal.begin() + fx.lead_dims);
        const std::vector<int64_t> zero(fx.lead_dims, 0);
        detail::broadcast_walk(lead, slead, zero, [&](int64_t blk, int64_t so, int64_t) {
            const T s = scal[so];
            const T* f = full + blk * fx.inner;
            T* o = out.data() + blk * fx.inner;
            switch (op) {
                case BinOp::Add: for (int64_t i = 0; i < fx.inner; ++i) o[i] = f[i] + s; break;
                case BinOp::Sub: for (int64_t i = 0; i < fx.inner; ++i) o[i] = f[i] - s; break;
                case BinOp::Mul: for (int64_t i = 0; i < fx.inner; ++i) o[i] = f[i] * s; break;
            }
        });
    } else {
        detail::broadcast_walk(out_shape, sa, sb, [&](int64_t i, int64_t ao, int64_t bo) {
            switch (op) {
                case BinOp::Add: out[i] = av[ao] + bv[bo]; break;
                case BinOp::Sub: out[i] = av[ao] - bv[bo]; break;
                case BinOp::Mul: out[i] = av[ao] * bv[bo]; break;
            }
        });
    }

    auto bw = [a, b, op, out_shape, sa, sb, same, sfx_b, sfx_a](Node<T>& self) {
        Node<T>& an = *a.node();
        Node<T>& bn = *b.node();
        const T* g = self.grad.data();
        const T* av = an.values.data();
        const T* bv = bn.values.data();
        const bool ga = an.needs_grad, gb = bn.needs_grad;
        if (ga) an.ensure_grad();
        if (gb) bn.ensure_grad();
        if (same) {
            const size_t n = self.grad.size();
            T* da = ga ? an.grad.data() : nullptr;
            T* db = gb ? bn.grad.data() : nullptr;
            switch (op) {
                case BinOp::Add:
                    if (da) for (size_t i = 0; i < n; ++i) da[i] += g[i];
                    if (db) for (size_t i = 0; i < n; ++i) db[i] += g[i];
                    break;
                case BinOp::Sub:
                    if (da) for (size_t i = 0; i < n; ++i) da[i] += g[i];
                    if (db) for (size_t i = 0; i < n; ++i) db[i] -= g[i];
                    break;
                case BinOp::Mul:
                    if (da) for (size_t i = 0; i < n; ++i) da[i] += g[i] * bv[i];
                    if (db) for (size_t i = 0; i < n; ++i) db[i] += g[i] * av[i];
                    break;
            }
            return;
        }
        if (sfx_b.applies || sfx_a.applies) {
            const bool b_is_scalar = sfx_b.applies;
            const auto& fx = b_is_scalar ? sfx_b : sfx_a;
            Node<T>& full_n = b_is_scalar ? an : bn;
            Node<T>& scal_n = b_is_scalar ? bn : an;
            const T* full_v = b_is_scalar ? av : bv;
            const T* scal_v = b_is_scalar ? bv : av;
            const auto& sscal = b_is_scalar ? sb : sa;
            // Sub only reaches here with b scalar-broadcast (non-commuted)
            const T scal_sign = (op == BinOp::Sub) ? T(-1) : T(1);
            const Shape lead(out_shape.begin(), out_shape.begin() + fx.lead_dims);
            const std::vector<int64_t> slead(sscal.begin(), sscal.begin() + fx.lead_dims);
            const std::vector<int64_t> zero(fx.lead_dims, 0);
            detail::broadcast_walk(lead, slead, zero, [&](int64_t blk, int64_t so, int64_t) {
                const T* gp = g + blk * fx.inner;
                if (full_n.needs_grad) {
                    T* df = full_n.grad.data() + blk * fx.inner;
                    if (op == BinOp::Mul) {
                        const T s = scal_v[so];
                        for (int64_t i = 0; i < fx.inner; ++i) df[i] += gp[i] * s;
                    } else {
                        for (int64_t i = 0; i < fx.inner; ++i) df[i] += gp[i];
                    }
                }
                if (scal_n.needs_grad) {
                    const T* fp = full_v + blk * fx.inner;
                    T acc = T(0);
                    if (op == BinOp::Mul)
                        for (int64_t i = 0; i < fx.inner; ++i) acc += gp[i] * fp[i];
                    else
                        for (int64_t i = 0; i < fx.inner; ++i) acc += gp[i];
                    scal_n.grad[so] += scal_sign * acc;
                }
            });
            return;
        }
        detail::broadcast_walk(out_shape, sa, sb, [&](int64_t i, int64_t ao, int64_t bo) {
            switch (op) {
                case BinOp::Add:
                    if (ga) an.grad[ao] += g[i];
                    if (gb) bn.grad[bo] += g[i];
                    break;
                case BinOp::Sub:
                    if (ga) an.grad[ao] += g[i];
                    if (gb) bn.grad[bo] -= g[i];
                    break;
                case BinOp::Mul:
                    if (ga) an.grad[ao] += g[i] * bv[bo];
                    if (gb) bn.grad[bo] += g[i] * av[ao];
                    break;
            }
        });
    };
    return make_op<T>(out_shape, std::move(out), {a, b}, std::move(bw), name);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, BinOp::Add, "add"); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, BinOp::Sub, "sub"); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, BinOp::Mul, "mul"); }

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (T& x : out) x *= s;
    auto bw = [a, s](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * s;
    };
    return make_op<T>(a.shape(), std::move(out), {a}, std::move(bw), "mul_scalar");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (T& x : out) x += s;
    auto bw = [a](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        accum_grad(an, self.grad.data(), self.grad.size());
    };
    return make_op<T>(a.shape(), std::move(out), {a}, std::move(bw), "add_scalar");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (T& x : out) x = x > T(0) ? x : T(0);
    auto bw = [a](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        const T* x = an.values.data();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (x[i] > T(0)) an.grad[i] += self.grad[i];
    };
    return make_op<T>(a.shape(), std::move(out), {a}, std::move(bw), "relu");
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<T> out(a.values().size());
    const T* x = a.values().data();
    for (size_t i = 0; i < out.size(); ++i) {
        const double xi = static_cast<double>(x[i]);
        out[i] = static_cast<T>(0.5 * xi * (1.0 + std::erf(xi * inv_sqrt2)));
    }
    auto bw = [a](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        const T* x = an.values.data();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double xi = static_cast<double>(x[i]);
            const double d = 0.5 * (1.0 + std::erf(xi * inv_sqrt2)) +
                             xi * inv_sqrt2pi * std::exp(-0.5 * xi * xi);
            an.grad[i] += self.grad[i] * static_cast<T>(d);
        }
    };
    return make_op<T>(a.shape(), std::move(out), {a}, std::move(bw), "gelu");
}

// Inverted dropout; identity when not training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng& rng) {
    if (!training || p <= 0.0) return a;
    if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(a.values().size());
    for (T& m : mask) m = rng.uniform01() < p ? T(0) : scale;
    std::vector<T> out(a.values().size());
    const T* x = a.values().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    auto bw = [a, mask = std::move(mask)](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * mask[i];
    };
    return make_op<T>(a.shape(), std::move(out), {a}, std::move(bw), "dropout");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    std::vector<T> out(a.values().begin(), a.values().end());
    auto bw = [a](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        accum_grad(an, self.grad.data(), self.grad.size());
    };
    return make_op<T>(std::move(new_shape), std::move(out), {a}, std::move(bw), "reshape");
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int64_t>& perm) {
    const size_t nd = a.shape().size();
    if (perm.size() != nd) throw ShapeError("permute rank mismatch");
    {
        std::vector<bool> seen(nd, false);
        for (int64_t p : perm) {
            if (p < 0 || p >= static_cast<int64_t>(nd) || seen[static_cast<size_t>(p)])
                throw ShapeError("invalid permutation");
            seen[static_cast<size_t>(p)] = true;
        }
    }
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = a.shape()[perm[i]];
    std::vector<T> out(static_cast<size_t>(a.numel()));
    detail::permute_copy(a.values().data(), out.data(), a.shape(), perm);
    auto bw = [a, out_shape, perm](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        // gradient flows through the inverse permutation
        std::vector<int64_t> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = i;
        std::vector<T> tmp(self.grad.size());
        detail::permute_copy(self.grad.data(), tmp.data(), out_shape, inv);
        T* dst = an.grad.data();
        for (size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
    };
    return make_op<T>(out_shape, std::move(out), {a}, std::move(bw), "permute");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    const size_t nd = s0.size();
    Shape out_shape = s0;
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != nd) throw ShapeError("concat rank mismatch");
        for (size_t d = 0; d < nd; ++d)
            if (d != static_cast<size_t>(axis) && p.shape()[d] != s0[d])
                throw ShapeError("concat shape mismatch on non-concat axis");
        total += p.shape()[axis];
    }
    out_shape[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s0[d];
    for (size_t d = axis + 1; d < nd; ++d) inner *= s0[d];
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t col = 0;
    for (const auto& p : parts) {
        const int64_t len = p.shape()[axis] * inner;
        const T* src = p.values().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * total * inner + col, src + o * len,
                        static_cast<size_t>(len) * sizeof(T));
        col += len;
    }
    auto bw = [parts, outer, inner, total](Node<T>& self) {
        int64_t col = 0;
        for (const auto& p : parts) {
            Node<T>& pn = *p.node();
            const int64_t plen = static_cast<int64_t>(pn.values.size()) / outer;
            if (pn.needs_grad) {
                pn.ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* g = self.grad.data() + o * total * inner + col;
                    T* dst = pn.grad.data() + o * plen;
                    for (int64_t i = 0; i < plen; ++i) dst[i] += g[i];
                }
            }
            col += plen;
        }
    };
    return make_op<T>(out_shape, std::move(out), parts, std::move(bw), "concat");
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, int64_t axis, int64_t start, int64_t len) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= static_cast<int64_t>(s.size()) || start < 0 || start + len > s[axis])
        throw ShapeError("narrow out of range");
    Shape out_shape = s;
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
    const T* x = a.values().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, x + (o * s[axis] + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(T));
    auto bw = [a, outer, inner, start, len, ax_len = s[axis]](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const T* g = self.grad.data() + o * len * inner;
            T* dst = an.grad.data() + (o * ax_len + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
        }
    };
    return make_op<T>(out_shape, std::move(out), {a}, std::move(bw), "narrow");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& a, std::vector<int64_t> axes, bool keepdims = false) {
    const Shape& s = a.shape();
    std::vector<bool> red(s.size(), false);
    for (int64_t ax : axes) {
        if (ax < 0 || ax >= static_cast<int64_t>(s.size())) throw ShapeError("sum axis out of range");
        red[ax] = true;
    }
    Shape kept = s;
    for (size_t d = 0; d < s.size(); ++d)
        if (red[d]) kept[d] = 1;
    // strides into the kept-shape output, 0 on reduced dims
    const auto out_st = detail::broadcast_strides(kept, s);
    std::vector<T> out(static_cast<size_t>(shape_numel(kept)), T(0));
    const T* x = a.values().data();
    const std::vector<int64_t> zero(s.size(), 0);
    detail::broadcast_walk(s, out_st, zero,
                           [&](int64_t i, int64_t oo, int64_t) { out[oo] += x[i]; });
    Shape out_shape;
    if (keepdims) {
        out_shape = kept;
    } else {
        for (size_t d = 0; d < s.size(); ++d)
            if (!red[d]) out_shape.push_back(s[d]);
        if (out_shape.empty()) out_shape.push_back(1);
    }
    auto bw = [a, in_shape = s, out_st, zero](Node<T>& self) {
        Node<T>& an = *a.node();
        if (!an.needs_grad) return;
        an.ensure_grad();
        const T* g = self.grad.data();
        detail::broadcast_walk(in_shape, out_st, zero,
                               [&](int64_t i, int64_t oo, int64_t) { an.grad[i] += g[oo]; });
    };
    return make_op<T>(out_shape, std::move(out), {a}, std::move(bw), "sum_axes");
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& a, std::vector<int64_t> axes, bool keepdims = false) {
    int64_t count = 1;
    for (int64_t ax : axes) count *= a.shape()[ax];
    return mul_scalar(sum_axes(a, std::move(axes), keepdims), static_cast<T>(1.0 / count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    std::vector<int64_t> axes(a.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    return sum_axes(a, axes, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), static_cast<T>(1.0 / a.numel()));
}

// ---------------------------------------------------------------------------
// Batched matrix multiply
// ---------------------------------------------------------------------------

// a: [..., m, k], b: [..., k, n] with broadcastable leading dims; trans_a /
// trans_b transpose the trailing two dims logically.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul requires rank >= 2");
    const int64_t am = sa[sa.size() - 2], ak = sa[sa.size() - 1];
    const int64_t bk = sb[sb.size() - 2], bn = sb[sb.size() - 1];
    const int64_t m = trans_a ? ak : am;
    const int64_t k = trans_a ? am : ak;
    const int64_t kb = trans_b ? bn : bk;
    const int64_t n = trans_b ? bk : bn;
    if (k != kb)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(sa) + " x " +
                         shape_str(sb));
    const Shape abatch(sa.begin(), sa.end() - 2);
    const Shape bbatch(sb.begin(), sb.end() - 2);
    const Shape obatch = detail::broadcast_shapes(abatch, bbatch);
    Shape out_shape = obatch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    // shared rank-2 rhs: flatten the batch into one GEMM
    if (sb.size() == 2 && !trans_a) {
        const int64_t rows = shape_numel(abatch) * m;
        std::vector<T> out(static_cast<size_t>(rows * n));
        ECMap<T> A(a.values().data(), rows, k, Eigen::OuterStride<>(k));
        ECMap<T> B(b.values().data(), bk, bn, Eigen::OuterStride<>(bn));
        EMap<T> C(out.data(), rows, n, Eigen::OuterStride<>(n));
        if (!trans_b) C.noalias() = A * B;
        else C.noalias() = A * B.transpose();
        auto bw = [a, b, trans_b, rows, k, n, bk, bn](Node<T>& self) {
            Node<T>& an = *a.node();
            Node<T>& bn_ = *b.node();
            ECMap<T> G(self.grad.data(), rows, n, Eigen::OuterStride<>(n));
            ECMap<T> A(an.values.data(), rows, k, Eigen::OuterStride<>(k));
            ECMap<T> B(bn_.values.data(), bk, bn, Eigen::OuterStride<>(bn));
            if (an.needs_grad) {
                an.ensure_grad();
                EMap<T> dA(an.grad.data(), rows, k, Eigen::OuterStride<>(k));
                if (!trans_b) dA.noalias() += G * B.transpose();
                else dA.noalias() += G * B;
            }
            if (bn_.needs_grad) {
                bn_.ensure_grad();
                EMap<T> dB(bn_.grad.data(), bk, bn, Eigen::OuterStride<>(bn));
                if (!trans_b) dB.noalias() += A.transpose() * G;
                else dB.noalias() += G.transpose() * A;
            }
        };
        return make_op<T>(out_shape, std::move(out), {a, b}, std::move(bw), "matmul");
    }

    const int64_t nbatch = shape_numel(obatch);
    const int64_t a_mat = am * ak, b_mat = bk * bn, o_mat = m * n;
    // per-batch offsets (0-stride on broadcast dims)
    auto batch_offsets = [&](const Shape& bs) {
        std::vector<int64_t> offs(static_cast<size_t>(nbatch), 0);
        if (obatch.empty()) return offs;
        const auto st = detail::broadcast_strides(bs, obatch);
        const std::vector<int64_t> zero(obatch.size(), 0);
        detail::broadcast_walk(obatch, st, zero,
                               [&](int64_t i, int64_t o, int64_t) { offs[i] = o; });
        return offs;
    };
    const auto aoffs = batch_offsets(abatch);
    const auto boffs = batch_offsets(bbatch);

    std::vector<T> out(static_cast<size_t>(nbatch * o_mat));
    const T* av = a.values().data();
    const T* bv = b.values().data();
    for (int64_t bi = 0; bi < nbatch; ++bi) {
        ECMap<T> A(av + aoffs[bi] * a_mat, am, ak, Eigen::OuterStride<>(ak));
        ECMap<T> B(bv + boffs[bi] * b_mat, bk, bn, Eigen::OuterStride<>(bn));
        EMap<T> C(out.data() + bi * o_mat, m, n, Eigen::OuterStride<>(n));
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
    }

    auto bw = [a, b, trans_a, trans_b, nbatch, aoffs, boffs, am, ak, bk, bn, m, n, a_mat, b_mat,
               o_mat](Node<T>& self) {
        Node<T>& an = *a.node();
        Node<T>& bn_ = *b.node();
        const T* g = self.grad.data();
        const T* av = an.values.data();
        const T* bv = bn_.values.data();
        if (an.needs_grad) an.ensure_grad();
        if (bn_.needs_grad) bn_.ensure_grad();
        for (int64_t bi = 0; bi < nbatch; ++bi) {
            ECMap<T> A(av + aoffs[bi] * a_mat, am, ak, Eigen::OuterStride<>(ak));
            ECMap<T> B(bv + boffs[bi] * b_mat, bk, bn, Eigen::OuterStride<>(bn));
            ECMap<T> G(g + bi * o_mat, m, n, Eigen::OuterStride<>(n));
            if (an.needs_grad) {
                EMap<T> dA(an.grad.data() + aoffs[bi] * a_mat, am, ak, Eigen::OuterStride<>(ak));
                // dAhat = G * Bhat^T, then undo trans_a
                if (!trans_a) {
                    if (!trans_b) dA.noalias() += G * B.transpose();
                    else dA.noalias() += G * B;
                } else {
                    if (!trans_b) dA.noalias() += B * G.transpose();
                    else dA.noalias() += B.transpose() * G.transpose();
                }
            }
            if (bn_.needs_grad) {
                EMap<T> dB(bn_.grad.data() + boffs[bi] * b_mat, bk, bn, Eigen::OuterStride<>(bn));
                // dBhat = Ahat^T * G, then undo trans_b
                if (!trans_b) {
                    if (!trans_a) dB.noalias() += A.transpose() * G;
                    else dB.noalias() += A * G;
                } else {
                    if (!trans_a) dB.noalias() += G.transpose() * A;
                    else dB.noalias() += G.transpose() * A.transpose();
                }
            }
        }
    };
    return make_op<T>(out_shape, std::move(out), {a, b}, std::move(bw), "matmul");
}

// ---------------------------------------------------------------------------
// Convolution over the (T, V) grid with k_v == 1 kernels
// ---------------------------------------------------------------------------

struct ConvOpts {
    int64_t stride_t = 1;
    int64_t padding_t = 0;
    int64_t dilation_t = 1;
    int64_t groups = 1;
};

inline int64_t conv_out_len(int64_t T_in, int64_t k_t, const ConvOpts& o) {
    return (T_in + 2 * o.padding_t - o.dilation_t * (k_t - 1) - 1) / o.stride_t + 1;
}

namespace detail {

// Valid output-t range for one kernel tap (stride 1 gives contiguous blocks).
struct TapRange {
    int64_t t_lo, t_hi;  // inclusive output range; empty if t_hi < t_lo
};

inline TapRange tap_range(int64_t T_in, int64_t Tp, int64_t j, const ConvOpts& o) {
    // input index t*stride + dilation*j - padding must lie in [0, T_in)
    const int64_t shift = o.dilation_t * j - o.padding_t;
    int64_t lo, hi;
    if (o.stride_t == 1) {
        lo = std::max<int64_t>(0, -shift);
        hi = std::min<int64_t>(Tp - 1, T_in - 1 - shift);
    } else {
        lo = std::max<int64_t>(0, (-shift + o.stride_t - 1) / o.stride_t);
        hi = std::min<int64_t>(Tp - 1, (T_in - 1 - shift) / o.stride_t);
    }
    return {lo, hi};
}

}  // namespace detail

template <typename T>
Tensor<T> conv_tv(const Tensor<T>& x, const Tensor<T>& w,
                  const std::optional<Tensor<T>>& bias, const ConvOpts& opts) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4) throw ShapeError("conv_tv input must be [B,C,T,V], got " + shape_str(xs));
    if (ws.size() != 4) throw ShapeError("conv_tv weight must be [C_out,C_in/g,k_t,k_v]");
    if (ws[3] != 1) throw ShapeError("conv_tv requires k_v == 1");
    const int64_t B = xs[0], Cin = xs[1], T_in = xs[2], V = xs[3];
    const int64_t Cout = ws[0], Cig = ws[1], Kt = ws[2];
    const int64_t g = opts.groups;
    if (g < 1 || Cin % g != 0 || Cout % g != 0)
        throw ConfigError("conv_tv groups must divide both channel counts");
    if (Cig != Cin / g)
        throw ShapeError("conv_tv weight C_in/groups mismatch: weight " + shape_str(ws) +
                         ", input " + shape_str(xs));
    if (bias && bias->numel() != Cout) throw ShapeError("conv_tv bias length != C_out");
    if (opts.stride_t < 1 || opts.dilation_t < 1 || opts.padding_t < 0)
        throw ConfigError("conv_tv invalid stride/dilation/padding");
    const int64_t Tp = conv_out_len(T_in, Kt, opts);
    if (Tp < 1) throw ShapeError("conv_tv produces empty output");
    const int64_t Cog = Cout / g;

    std::vector<T> out(static_cast<size_t>(B * Cout * Tp * V), T(0));
    if (bias) {
        const T* bv = bias->values().data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < Cout; ++c)
                std::fill_n(out.data() + (b * Cout + c) * Tp * V, Tp * V, bv[c]);
    }
    const T* xv = x.values().data();
    const T* wv = w.values().data();

    auto run_fwd = [&](int64_t b) {
        for (int64_t gi = 0; gi < g; ++gi) {
            for (int64_t j = 0; j < Kt; ++j) {
                const auto r = detail::tap_range(T_in, Tp, j, opts);
                if (r.t_hi < r.t_lo) continue;
                ECStrideMap<T> Wj(wv + (gi * Cog) * Cig * Kt + j, Cog, Cig,
                                  Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(Cig * Kt, Kt));
                if (opts.stride_t == 1) {
                    const int64_t nt = r.t_hi - r.t_lo + 1;
                    const int64_t tin0 = r.t_lo + opts.dilation_t * j - opts.padding_t;
                    ECMap<T> X(xv + ((b * Cin + gi * Cig) * T_in + tin0) * V, Cig, nt * V,
                               Eigen::OuterStride<>(T_in * V));
                    EMap<T> Y(out.data() + ((b * Cout + gi * Cog) * Tp + r.t_lo) * V, Cog, nt * V,
                              Eigen::OuterStride<>(Tp * V));
                    Y.noalias() += Wj * X;
                } else {
                    for (int64_t t = r.t_lo; t <= r.t_hi; ++t) {
                        const int64_t tin = t * opts.stride_t + opts.dilation_t * j - opts.padding_t;
                        ECMap<T> X(xv + ((b * Cin + gi * Cig) * T_in + tin) * V, Cig, V,
                                   Eigen::OuterStride<>(T_in * V));
                        EMap<T> Y(out.data() + ((b * Cout + gi * Cog) * Tp + t) * V, Cog, V,
                                  Eigen::OuterStride<>(Tp * V));
                        Y.noalias() += Wj * X;
                    }
                }
            }
        }
    };
#pragma omp parallel for schedule(static) if (B > 1)
    for (int64_t b = 0; b < B; ++b) run_fwd(b);

    std::vector<Tensor<T>> ins{x, w};
    if (bias) ins.push_back(*bias);
    auto bw = [x, w, bias, opts, B, Cin, Cout, T_in, Tp, V, Cig, Cog, Kt, g](Node<T>& self) {
        Node<T>& xn = *x.node();
        Node<T>& wn = *w.node();
        const T* gv = self.grad.data();
        const T* xv = xn.values.data();
        const T* wv = wn.values.data();
        if (xn.needs_grad) {
            xn.ensure_grad();
            auto run_dx = [&](int64_t b) {
                for (int64_t gi = 0; gi < g; ++gi)
                    for (int64_t j = 0; j < Kt; ++j) {
                        const auto r = detail::tap_range(T_in, Tp, j, opts);
                        if (r.t_hi < r.t_lo) continue;
                        ECStrideMap<T> Wj(wv + (gi * Cog) * Cig * Kt + j, Cog, Cig,
                                          Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(Cig * Kt, Kt));
                        if (opts.stride_t == 1) {
                            const int64_t nt = r.t_hi - r.t_lo + 1;
                            const int64_t tin0 = r.t_lo + opts.dilation_t * j - opts.padding_t;
                            EMap<T> dX(xn.grad.data() + ((b * Cin + gi * Cig) * T_in + tin0) * V,
                                       Cig, nt * V, Eigen::OuterStride<>(T_in * V));
                            ECMap<T> G(gv + ((b * Cout + gi * Cog) * Tp + r.t_lo) * V, Cog, nt * V,
                                       Eigen::OuterStride<>(Tp * V));
                            dX.noalias() += Wj.transpose() * G;
                        } else {
                            for (int64_t t = r.t_lo; t <= r.t_hi; ++t) {
                                const int64_t tin =
                                    t * opts.stride_t + opts.dilation_t * j - opts.padding_t;
                                EMap<T> dX(xn.grad.data() + ((b * Cin + gi * Cig) * T_in + tin) * V,
                                           Cig, V, Eigen::OuterStride<>(T_in * V));
                                ECMap<T> G(gv + ((b * Cout + gi * Cog) * Tp + t) * V, Cog, V,
                                           Eigen::OuterStride<>(Tp * V));
                                dX.noalias() += Wj.transpose() * G;
                            }
                        }
                    }
            };
#pragma omp parallel for schedule(static) if (B > 1)
            for (int64_t b = 0; b < B; ++b) run_dx(b);
        }
        if (wn.needs_grad) {
            wn.ensure_grad();
            // sequential over the batch so accumulation order is fixed
            for (int64_t gi = 0; gi < g; ++gi)
                for (int64_t j = 0; j < Kt; ++j) {
                    const auto r = detail::tap_range(T_in, Tp, j, opts);
                    if (r.t_hi < r.t_lo) continue;
                    EStrideMap<T> dWj(wn.grad.data() + (gi * Cog) * Cig * Kt + j, Cog, Cig,
                                      Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>(Cig * Kt, Kt));
                    for (int64_t b = 0; b < B; ++b) {
                        if (opts.stride_t == 1) {
                            const int64_t nt = r.t_hi - r.t_lo + 1;
                            const int64_t tin0 = r.t_lo + opts.dilation_t * j - opts.padding_t;
                            ECMap<T> X(xv + ((b * Cin + gi * Cig) * T_in + tin0) * V, Cig, nt * V,
                                       Eigen::OuterStride<>(T_in * V));
                            ECMap<T> G(gv + ((b * Cout + gi * Cog) * Tp + r.t_lo) * V, Cog,
                                       nt * V, Eigen::OuterStride<>(Tp * V));
                            dWj.noalias() += G * X.transpose();
                        } else {
                            for (int64_t t = r.t_lo; t <= r.t_hi; ++t) {
                                const int64_t tin =
                                    t * opts.stride_t + opts.dilation_t * j - opts.padding_t;
                                ECMap<T> X(xv + ((b * Cin + gi * Cig) * T_in + tin) * V, Cig, V,
                                           Eigen::OuterStride<>(T_in * V));
                                ECMap<T> G(gv + ((b * Cout + gi * Cog) * Tp + t) * V, Cog, V,
                                           Eigen::OuterStride<>(Tp * V));
                                dWj.noalias() += G * X.transpose();
                            }
                        }
                    }
                }
        }
        if (bias && bias->node()->needs_grad) {
            Node<T>& bn = *bias->node();
            bn.ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < Cout; ++c) {
                    const T* gp = gv + (b * Cout + c) * Tp * V;
                    T acc = T(0);
                    for (int64_t i = 0; i < Tp * V; ++i) acc += gp[i];
                    bn.grad[c] += acc;
                }
        }
    };
    return make_op<T>({B, Cout, Tp, V}, std::move(out), std::move(ins), std::move(bw), "conv_tv");
}

// ---------------------------------------------------------------------------
// Temporal max pooling (k x 1), padding ignored positions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool_t(const Tensor<T>& x, int64_t k, int64_t padding_t, int64_t stride_t = 1) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("max_pool_t input must be [B,C,T,V]");
    const int64_t B = xs[0], C = xs[1], T_in = xs[2], V = xs[3];
    ConvOpts o{stride_t, padding_t, 1, 1};
    const int64_t Tp = conv_out_len(T_in, k, o);
    if (Tp < 1) throw ShapeError("max_pool_t produces empty output");
    std::vector<T> out(static_cast<size_t>(B * C * Tp * V));
    std::vector<int32_t> arg(out.size());
    const T* xv = x.values().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* xp = xv + (b * C + c) * T_in * V;
            T* op = out.data() + (b * C + c) * Tp * V;
            int32_t* ap = arg.data() + (b * C + c) * Tp * V;
            for (int64_t t = 0; t < Tp; ++t)
                for (int64_t v = 0; v < V; ++v) {
                    T best = -std::numeric_limits<T>::infinity();
                    int32_t besti = -1;
                    for (int64_t j = 0; j < k; ++j) {
                        const int64_t ti = t * stride_t + j - padding_t;
                        if (ti < 0 || ti >= T_in) continue;
                        const T val = xp[ti * V + v];
                        if (val > best) {
                            best = val;
                            besti = static_cast<int32_t>(ti);
                        }
                    }
                    op[t * V + v] = best;
                    ap[t * V + v] = besti;
                }
        }
    auto bw = [x, arg = std::move(arg), B, C, Tp, V, T_in](Node<T>& self) {
        Node<T>& xn = *x.node();
        if (!xn.needs_grad) return;
        xn.ensure_grad();
        const T* g = self.grad.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                T* dx = xn.grad.data() + (b * C + c) * T_in * V;
                const T* gp = g + (b * C + c) * Tp * V;
                const int32_t* ap = arg.data() + (b * C + c) * Tp * V;
                for (int64_t i = 0; i < Tp * V; ++i) {
                    const int64_t v = i % V;
                    if (ap[i] >= 0) dx[ap[i] * V + v] += gp[i];
                }
            }
    };
    return make_op<T>({B, C, Tp, V}, std::move(out), {x}, std::move(bw), "max_pool_t");
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted)
// ---------------------------------------------------------------------------

namespace detail {
struct AxisSplit {
    int64_t outer, len, inner;
};
inline AxisSplit axis_split(const Shape& s, int64_t axis) {
    if (axis < 0) axis += static_cast<int64_t>(s.size());
    if (axis < 0 || axis >= static_cast<int64_t>(s.size())) throw ShapeError("axis out of range");
    AxisSplit r{1, s[axis], 1};
    for (int64_t d = 0; d < axis; ++d) r.outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
    return r;
}
}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int64_t axis) {
    const auto sp = detail::axis_split(x.shape(), axis);
    std::vector<T> out(static_cast<size_t>(x.numel()));
    const T* xv = x.values().data();
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * sp.len * sp.inner + i;
            T m = xv[base];
            for (int64_t j = 1; j < sp.len; ++j) m = std::max(m, xv[base + j * sp.inner]);
            T s = T(0);
            for (int64_t j = 0; j < sp.len; ++j) {
                const T e = std::exp(xv[base + j * sp.inner] - m);
                out[base + j * sp.inner] = e;
                s += e;
            }
            const T inv = T(1) / s;
            for (int64_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] *= inv;
        }
    auto bw = [x, sp](Node<T>& self) {
        Node<T>& xn = *x.node();
        if (!xn.needs_grad) return;
        xn.ensure_grad();
        const T* y = self.values.data();
        const T* g = self.grad.data();
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t i = 0; i < sp.inner; ++i) {
                const int64_t base = o * sp.len * sp.inner + i;
                T dot = T(0);
                for (int64_t j = 0; j < sp.len; ++j)
                    dot += g[base + j * sp.inner] * y[base + j * sp.inner];
                for (int64_t j = 0; j < sp.len; ++j) {
                    const int64_t idx = base + j * sp.inner;
                    xn.grad[idx] += y[idx] * (g[idx] - dot);
                }
            }
    };
    return make_op<T>(x.shape(), std::move(out), {x}, std::move(bw), "softmax");
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int64_t axis) {
    const auto sp = detail::axis_split(x.shape(), axis);
    std::vector<T> out(static_cast<size_t>(x.numel()));
    const T* xv = x.values().data();
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * sp.len * sp.inner + i;
            T m = xv[base];
            for (int64_t j = 1; j < sp.len; ++j) m = std::max(m, xv[base + j * sp.inner]);
            T s = T(0);
            for (int64_t j = 0; j < sp.len; ++j) s += std::exp(xv[base + j * sp.inner] - m);
            const T lse = m + std::log(s);
            for (int64_t j = 0; j < sp.len; ++j)
                out[base + j * sp.inner] = xv[base + j * sp.inner] - lse;
        }
    auto bw = [x, sp](Node<T>& self) {
        Node<T>& xn = *x.node();
        if (!xn.needs_grad) return;
        xn.ensure_grad();
        const T* y = self.values.data();
        const T* g = self.grad.data();
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t i = 0; i < sp.inner; ++i) {
                const int64_t base = o * sp.len * sp.inner + i;
                T gsum = T(0);
                for (int64_t j = 0; j < sp.len; ++j) gsum += g[base + j * sp.inner];
                for (int64_t j = 0; j < sp.len; ++j) {
                    const int64_t idx = base + j * sp.inner;
                    xn.grad[idx] += g[idx] - std::exp(y[idx]) * gsum;
                }
            }
    };
    return make_op<T>(x.shape(), std::move(out), {x}, std::move(bw), "log_softmax");
}

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

// Per-position normalization over one axis; gain/bias are rank-1 of that
// axis extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int64_t axis, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = static_cast<T>(1e-5)) {
    const auto sp = detail::axis_split(x.shape(), axis);
    if (gain.numel() != sp.len || bias.numel() != sp.len)
        throw ShapeError("layer_norm gain/bias length mismatch");
    if (!(eps > T(0))) throw ConfigError("layer_norm eps must be positive");
    std::vector<T> out(static_cast<size_t>(x.numel()));
    std::vector<T> xhat(out.size());
    std::vector<T> inv_std(static_cast<size_t>(sp.outer * sp.inner));
    const T* xv = x.values().data();
    const T* gv = gain.values().data();
    const T* bv = bias.values().data();
    const T invlen = T(1) / static_cast<T>(sp.len);
    if (sp.inner == 1) {
        for (int64_t o = 0; o < sp.outer; ++o) {
            const int64_t base = o * sp.len;
            T mean = T(0);
            for (int64_t j = 0; j < sp.len; ++j) mean += xv[base + j];
            mean *= invlen;
            T var = T(0);
            for (int64_t j = 0; j < sp.len; ++j) {
                const T d = xv[base + j] - mean;
                var += d * d;
            }
            var *= invlen;
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[o] = is;
            for (int64_t j = 0; j < sp.len; ++j) {
                const T xh = (xv[base + j] - mean) * is;
                xhat[base + j] = xh;
                out[base + j] = xh * gv[j] + bv[j];
            }
        }
    } else {
        // accumulate across the strided axis with contiguous inner sweeps
        std::vector<T> mean(static_cast<size_t>(sp.inner));
        for (int64_t o = 0; o < sp.outer; ++o) {
            const int64_t base = o * sp.len * sp.inner;
            std::fill(mean.begin(), mean.end(), T(0));
            for (int64_t j = 0; j < sp.len; ++j) {
                const T* row = xv + base + j * sp.inner;
                for (int64_t i = 0; i < sp.inner; ++i) mean[i] += row[i];
            }
            for (int64_t i = 0; i < sp.inner; ++i) mean[i] *= invlen;
            T* var = inv_std.data() + o * sp.inner;
            std::fill(var, var + sp.inner, T(0));
            for (int64_t j = 0; j < sp.len; ++j) {
                const T* row = xv + base + j * sp.inner;
                for (int64_t i = 0; i < sp.inner; ++i) {
                    const T d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
            for (int64_t i = 0; i < sp.inner; ++i)
                var[i] = T(1) / std::sqrt(var[i] * invlen + eps);
            for (int64_t j = 0; j < sp.len; ++j) {
                const T* row = xv + base + j * sp.inner;
                T* xh = xhat.data() + base + j * sp.inner;
                T* op = out.data() + base + j * sp.inner;
                const T gj = gv[j], bj = bv[j];
                for (int64_t i = 0; i < sp.inner; ++i) {
                    xh[i] = (row[i] - mean[i]) * var[i];
                    op[i] = xh[i] * gj + bj;
                }
            }
        }
    }
    auto bw = [x, gain, bias, sp, xhat = std::move(xhat),
               inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& xn = *x.node();
        Node<T>& gn = *gain.node();
        Node<T>& bn = *bias.node();
        const T* g = self.grad.data();
        const T* gv = gn.values.data();
        if (xn.needs_grad) xn.ensure_grad();
        if (gn.needs_grad) gn.ensure_grad();
        if (bn.needs_grad) bn.ensure_grad();
        const T invlen = T(1) / static_cast<T>(sp.len);
        if (sp.inner == 1) {
            for (int64_t o = 0; o < sp.outer; ++o) {
                const int64_t base = o * sp.len;
                if (gn.needs_grad || bn.needs_grad)
                    for (int64_t j = 0; j < sp.len; ++j) {
                        if (gn.needs_grad) gn.grad[j] += g[base + j] * xhat[base + j];
                        if (bn.needs_grad) bn.grad[j] += g[base + j];
                    }
                if (xn.needs_grad) {
                    T m1 = T(0), m2 = T(0);
                    for (int64_t j = 0; j < sp.len; ++j) {
                        const T dxh = g[base + j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat[base + j];
                    }
                    m1 *= invlen;
                    m2 *= invlen;
                    const T is = inv_std[o];
                    for (int64_t j = 0; j < sp.len; ++j) {
                        const T dxh = g[base + j] * gv[j];
                        xn.grad[base + j] += is * (dxh - m1 - xhat[base + j] * m2);
                    }
                }
            }
            return;
        }
        std::vector<T> m1(static_cast<size_t>(sp.inner)), m2(static_cast<size_t>(sp.inner));
        for (int64_t o = 0; o < sp.outer; ++o) {
            const int64_t base = o * sp.len * sp.inner;
            if (gn.needs_grad || bn.needs_grad)
                for (int64_t j = 0; j < sp.len; ++j) {
                    const T* gp = g + base + j * sp.inner;
                    const T* xh = xhat.data() + base + j * sp.inner;
                    T accg = T(0), accb = T(0);
                    for (int64_t i = 0; i < sp.inner; ++i) {
                        accg += gp[i] * xh[i];
                        accb += gp[i];
                    }
                    if (gn.needs_grad) gn.grad[j] += accg;
                    if (bn.needs_grad) bn.grad[j] += accb;
                }
            if (xn.needs_grad) {
                std::fill(m1.begin(), m1.end(), T(0));
                std::fill(m2.begin(), m2.end(), T(0));
                for (int64_t j = 0; j < sp.len; ++j) {
                    const T* gp = g + base + j * sp.inner;
                    const T* xh = xhat.data() + base + j * sp.inner;
                    const T gj = gv[j];
                    for (int64_t i = 0; i < sp.inner; ++i) {
                        const T dxh = gp[i] * gj;
                        m1[i] += dxh;
                        m2[i] += dxh * xh[i];
                    }
                }
                for (int64_t i = 0; i < sp.inner; ++i) {
                    m1[i] *= invlen;
                    m2[i] *= invlen;
                }
                const T* is = inv_std.data() + o * sp.inner;
                for (int64_t j = 0; j < sp.len; ++j) {
                    const T* gp = g + base + j * sp.inner;
                    const T* xh = xhat.data() + base + j * sp.inner;
                    T* dx = xn.grad.data() + base + j * sp.inner;
                    const T gj = gv[j];
                    for (int64_t i = 0; i < sp.inner; ++i) {
                        const T dxh = gp[i] * gj;
                        dx[i] += is[i] * (dxh - m1[i] - xh[i] * m2[i]);
                    }
                }
            }
        }
    };
    return make_op<T>(x.shape(), std::move(out), {x, gain, bias}, std::move(bw), "layer_norm");
}

// Channel batch norm for [B,C,T,V]; running stats (buffers, not graph nodes)
// are updated in-place in training mode with the usual EMA.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = static_cast<T>(0.1), T eps = static_cast<T>(1e-5)) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("batch_norm input must be [B,C,T,V]");
    const int64_t B = xs[0], C = xs[1], Tt = xs[2], V = xs[3];
    if (gain.numel() != C || bias.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw ShapeError("batch_norm parameter length mismatch");
    const int64_t n = B * Tt * V;
    if (training && n < 2) throw ShapeError("batch_norm training requires B*T*V >= 2");

    std::vector<T> out(static_cast<size_t>(x.numel()));
    std::vector<T> mean_c(C), istd_c(C);
    const T* xv = x.values().data();
    const T* gv = gain.values().data();
    const T* bv = bias.values().data();
    const int64_t tv = Tt * V;
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double mean = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* xp = xv + (b * C + c) * tv;
                for (int64_t i = 0; i < tv; ++i) mean += xp[i];
            }
            mean /= static_cast<double>(n);
            double var = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* xp = xv + (b * C + c) * tv;
                for (int64_t i = 0; i < tv; ++i) {
                    const double d = xp[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(n);
            mean_c[c] = static_cast<T>(mean);
            istd_c[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            // EMA update; running variance uses the unbiased estimate
            T& rm = running_mean.data()[c];
            T& rv = running_var.data()[c];
            const double unbiased = n > 1 ? var * n / (n - 1.0) : var;
            rm = (T(1) - momentum) * rm + momentum * static_cast<T>(mean);
            rv = (T(1) - momentum) * rv + momentum * static_cast<T>(unbiased);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean_c[c] = running_mean.values()[c];
            istd_c[c] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(running_var.values()[c]) +
                                static_cast<double>(eps)));
        }
    }
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* xp = xv + (b * C + c) * tv;
            T* op = out.data() + (b * C + c) * tv;
            const T mu = mean_c[c], is = istd_c[c], gc = gv[c], bc = bv[c];
            for (int64_t i = 0; i < tv; ++i) op[i] = (xp[i] - mu) * is * gc + bc;
        }

    auto bw = [x, gain, bias, training, B, C, tv, n, mean_c = std::move(mean_c),
               istd_c = std::move(istd_c)](Node<T>& self) {
        Node<T>& xn = *x.node();
        Node<T>& gn = *gain.node();
        Node<T>& bn = *bias.node();
        const T* g = self.grad.data();
        const T* xv = xn.values.data();
        const T* gv = gn.values.data();
        if (xn.needs_grad) xn.ensure_grad();
        if (gn.needs_grad) gn.ensure_grad();
        if (bn.needs_grad) bn.ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
            const T mu = mean_c[c], is = istd_c[c];
            double sum_g = 0, sum_gx = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* gp = g + (b * C + c) * tv;
                const T* xp = xv + (b * C + c) * tv;
                for (int64_t i = 0; i < tv; ++i) {
                    sum_g += gp[i];
                    sum_gx += gp[i] * ((xp[i] - mu) * is);
                }
            }
            if (gn.needs_grad) gn.grad[c] += static_cast<T>(sum_gx);
            if (bn.needs_grad) bn.grad[c] += static_cast<T>(sum_g);
            if (xn.needs_grad) {
                const T gc = gv[c];
                if (training) {
                    const T k1 = static_cast<T>(sum_g / n);
                    const T k2 = static_cast<T>(sum_gx / n);
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gp = g + (b * C + c) * tv;
                        const T* xp = xv + (b * C + c) * tv;
                        T* dx = xn.grad.data() + (b * C + c) * tv;
                        for (int64_t i = 0; i < tv; ++i) {
                            const T xh = (xp[i] - mu) * is;
                            dx[i] += gc * is * (gp[i] - k1 - xh * k2);
                        }
                    }
                } else {
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gp = g + (b * C + c) * tv;
                        T* dx = xn.grad.data() + (b * C + c) * tv;
                        for (int64_t i = 0; i < tv; ++i) dx[i] += gp[i] * gc * is;
                    }
                }
            }
        }
    };
    return make_op<T>(x.shape(), std::move(out), {x, gain, bias}, std::move(bw), "batch_norm");
}

}  // namespace hgct
