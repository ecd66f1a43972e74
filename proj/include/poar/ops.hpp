#pragma once

// Differentiable tensor ops recorded on a Tape.
//
// Sequences are stored token-major: a [n × D] matrix has one row per token.
// Additive attention masks hold 0 for visible entries and mask_sentinel
// (or -inf) for blocked ones; blocked softmax outputs are set to exactly 0.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "poar/kernels.hpp"
#include "poar/tape.hpp"
#include "poar/tensor.hpp"

namespace poar {

template <class Real>
inline constexpr Real mask_sentinel = Real(-1e30);

template <class Real>
constexpr bool is_blocked(Real m) {
    return m < Real(0);
}

namespace detail {

template <class Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

template <class Real>
void check_mask_values(const BasicTensor<Real>& mask) {
    for (Real m : mask.storage())
        if (!(m == Real(0) || m <= mask_sentinel<Real> || std::isinf(m)))
            throw mask_error("additive mask entries must be 0 or the blocking sentinel");
}

// Softmax of (logits + mask) over one row; blocked slots are written as 0.
template <class Real>
void masked_softmax_row(const Real* logits, const Real* mask, Real* out, std::size_t n) {
    Real mx = -std::numeric_limits<Real>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
        if (mask && is_blocked(mask[j])) continue;
        any = true;
        mx = std::max(mx, logits[j]);
    }
    if (!any) throw mask_error("degenerate mask: every position is blocked");
    Real sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (mask && is_blocked(mask[j])) {
            out[j] = 0;
            continue;
        }
        out[j] = std::exp(logits[j] - mx);
        sum += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
}

// dz = a ∘ (da − <da, a>) for one softmax row.
template <class Real>
void softmax_row_backward(const Real* a, const Real* da, Real* dz, std::size_t n) {
    Real dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += da[j] * a[j];
    for (std::size_t j = 0; j < n; ++j) dz[j] += a[j] * (da[j] - dot);
}

template <class Real>
Real gelu_value(Real x) {
    const Real c = std::sqrt(Real(2) / std::numbers::pi_v<Real>);
    return Real(0.5) * x * (Real(1) + std::tanh(c * (x + Real(0.044715) * x * x * x)));
}

template <class Real>
Real gelu_derivative(Real x) {
    const Real c = std::sqrt(Real(2) / std::numbers::pi_v<Real>);
    const Real u = c * (x + Real(0.044715) * x * x * x);
    const Real t = std::tanh(u);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * c * (Real(1) + Real(3 * 0.044715) * x * x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    if (a.cols() != b.rows())
        throw shape_error("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                          shape_string(b.shape()));
    BasicTensor<Real> c = BasicTensor<Real>::matrix(a.rows(), b.cols());
    kernels::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
    return c;
}

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    auto& tape = a.tape();
    BasicTensor<Real> out = matmul(a.value(), b.value());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const std::size_t ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, [=](Tape<Real>& t, std::size_t self) {
        const Real* g = t.grad(self).data().data();
        if (t.requires_grad(ia))
            kernels::gemm_nt(g, t.value(ib).data().data(), t.grad(ia).data().data(), m, n, k);
        if (t.requires_grad(ib))
            kernels::gemm_tn(t.value(ia).data().data(), g, t.grad(ib).data().data(), k, m, n);
    });
}

template <class Real>
Var<Real> transpose(Var<Real> a) {
    const std::size_t ia = a.id();
    return a.tape().record(a.value().transposed(), {ia}, [=](Tape<Real>& t, std::size_t self) {
        t.accumulate(ia, t.grad(self).transposed().reshaped(t.value(ia).shape()));
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    BasicTensor<Real> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [=](Tape<Real>& t, std::size_t self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(ib, t.grad(self));
    });
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    BasicTensor<Real> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [=](Tape<Real>& t, std::size_t self) {
        t.accumulate(ia, t.grad(self));
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib);
            const auto& g = t.grad(self);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    BasicTensor<Real> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [=](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto& ga = t.grad(ia);
            const auto& vb = t.value(ib);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib);
            const auto& va = t.value(ia);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

template <class Real>
Var<Real> scale(Var<Real> a, Real c) {
    BasicTensor<Real> out = a.value();
    for (auto& v : out.storage()) v *= c;
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {ia}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        auto& ga = t.grad(ia);
        const auto& g = t.grad(self);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * g[i];
    });
}

// a[r×n] + bias broadcast over rows; bias is [n] or [1×n].
template <class Real>
Var<Real> add_row(Var<Real> a, Var<Real> bias) {
    const std::size_t n = a.cols();
    if (bias.value().size() != n)
        throw shape_error("add_row: bias of shape " + shape_string(bias.shape()) + " for rows of width " +
                          std::to_string(n));
    BasicTensor<Real> out = a.value();
    const auto& b = bias.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) out(r, c) += b[c];
    const std::size_t ia = a.id(), ib = bias.id();
    return a.tape().record(std::move(out), {ia, ib}, [=](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        t.accumulate(ia, g);
        if (t.requires_grad(ib)) {
            auto& gb = t.grad(ib);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
        }
    });
}

template <class Real>
Var<Real> gelu(Var<Real> a) {
    BasicTensor<Real> out = a.value();
    for (auto& v : out.storage()) v = detail::gelu_value(v);
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {ia}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto& x = t.value(ia);
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * detail::gelu_derivative(x[i]);
    });
}

template <class Real>
BasicTensor<Real> gelu(const BasicTensor<Real>& a) {
    BasicTensor<Real> out = a;
    for (auto& v : out.storage()) v = detail::gelu_value(v);
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <class Real>
Var<Real> sum(Var<Real> a) {
    Real s = 0;
    for (Real v : a.value().storage()) s += v;
    const std::size_t ia = a.id();
    return a.tape().record(BasicTensor<Real>::scalar(s), {ia}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Real g = t.grad(self)[0];
        for (auto& v : t.grad(ia).storage()) v += g;
    });
}

// Averages each run of `group` consecutive rows: [R×C] -> [R/group × C].
template <class Real>
Var<Real> mean_row_groups(Var<Real> a, std::size_t group) {
    if (group == 0 || a.rows() % group != 0)
        throw shape_error("mean_row_groups: " + std::to_string(a.rows()) + " rows not divisible by " +
                          std::to_string(group));
    const std::size_t out_rows = a.rows() / group, c = a.cols();
    BasicTensor<Real> out = BasicTensor<Real>::matrix(out_rows, c);
    const auto& x = a.value();
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out(r / group, j) += x(r, j) / Real(group);
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {ia}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t r = 0; r < ga.rows(); ++r)
            for (std::size_t j = 0; j < c; ++j) ga(r, j) += g(r / group, j) / Real(group);
    });
}

// out[i] = a[indices[i]]; gradient scatter-adds back.
template <class Real>
Var<Real> gather_rows(Var<Real> a, std::vector<std::size_t> indices) {
    const auto& x = a.value();
    const std::size_t c = x.cols();
    BasicTensor<Real> out = BasicTensor<Real>::matrix(indices.size(), c);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= x.rows())
            throw shape_error("gather_rows: index " + std::to_string(indices[i]) + " out of " +
                              std::to_string(x.rows()) + " rows");
        std::copy_n(x.row(indices[i]).begin(), c, out.row(i).begin());
    }
    const std::size_t ia = a.id();
    return a.tape().record(std::move(out), {ia}, [=, idx = std::move(indices)](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const auto& g = t.grad(self);
        auto& ga = t.grad(ia);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto src = g.row(i);
            auto dst = ga.row(idx[i]);
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
}

template <class Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts) {
    if (parts.empty()) throw shape_error("concat_rows: no inputs");
    const std::size_t c = parts.front().cols();
    std::size_t rows = 0;
    for (auto& p : parts) {
        if (p.cols() != c) throw shape_error("concat_rows: column counts differ");
        rows += p.rows();
    }
    BasicTensor<Real> out = BasicTensor<Real>::matrix(rows, c);
    std::vector<std::size_t> ids, offsets;
    std::size_t at = 0;
    for (auto& p : parts) {
        std::copy(p.value().storage().begin(), p.value().storage().end(), out.storage().begin() + at * c);
        ids.push_back(p.id());
        offsets.push_back(at);
        at += p.rows();
    }
    auto parents = ids;
    return parts.front().tape().record(std::move(out), std::move(parents),
                                       [=](Tape<Real>& t, std::size_t self) {
                                           const auto& g = t.grad(self);
                                           for (std::size_t k = 0; k < ids.size(); ++k) {
                                               if (!t.requires_grad(ids[k])) continue;
                                               auto& gk = t.grad(ids[k]);
                                               const Real* src = g.data().data() + offsets[k] * c;
                                               for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += src[i];
                                           }
                                       });
}

// ---------------------------------------------------------------------------
// Normalization

template <class Real>
BasicTensor<Real> masked_softmax(const BasicTensor<Real>& logits, const BasicTensor<Real>& mask) {
    detail::require_same_shape(logits, mask, "masked_softmax");
    detail::check_mask_values(mask);
    BasicTensor<Real> out(logits.shape());
    const std::size_t n = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r)
        detail::masked_softmax_row(logits.data().data() + r * n, mask.data().data() + r * n,
                                   out.data().data() + r * n, n);
    return out;
}

// Row-wise softmax(logits + mask). `mask` is a constant.
template <class Real>
Var<Real> masked_softmax(Var<Real> logits, const BasicTensor<Real>& mask) {
    BasicTensor<Real> out = masked_softmax(logits.value(), mask);
    const std::size_t il = logits.id(), n = logits.cols();
    return logits.tape().record(std::move(out), {il}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(il)) return;
        const auto& a = t.value(self);
        const auto& g = t.grad(self);
        auto& gl = t.grad(il);
        for (std::size_t r = 0; r < a.rows(); ++r)
            detail::softmax_row_backward(a.data().data() + r * n, g.data().data() + r * n,
                                         gl.data().data() + r * n, n);
    });
}

// Row-wise (x − mean)/sqrt(var + eps) · gain + bias.
template <class Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias, Real eps = Real(1e-5)) {
    const std::size_t n = x.cols(), rows = x.rows();
    if (n < 2) throw shape_error("layer_norm needs at least 2 features");
    if (gain.value().size() != n || bias.value().size() != n) throw shape_error("layer_norm: gain/bias width");
    auto xhat = std::make_shared<BasicTensor<Real>>(x.shape());
    auto inv_std = std::make_shared<std::vector<Real>>(rows);
    BasicTensor<Real> out(x.shape());
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r) {
        auto xr = xv.row(r);
        Real mean = 0;
        for (Real v : xr) mean += v;
        mean /= Real(n);
        Real var = 0;
        for (Real v : xr) var += (v - mean) * (v - mean);
        var /= Real(n);
        const Real is = Real(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const Real h = (xr[j] - mean) * is;
            (*xhat)(r, j) = h;
            out(r, j) = h * gv[j] + bv[j];
        }
    }
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.tape().record(std::move(out), {ix, ig, ib}, [=](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv2 = t.value(ig);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) {
                    if (t.requires_grad(ig)) t.grad(ig)[j] += g(r, j) * (*xhat)(r, j);
                    if (t.requires_grad(ib)) t.grad(ib)[j] += g(r, j);
                }
        }
        if (!t.requires_grad(ix)) return;
        auto& gx = t.grad(ix);
        std::vector<Real> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
            Real mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < n; ++j) {
                dh[j] = g(r, j) * gv2[j];
                mean_dh += dh[j];
                mean_dh_h += dh[j] * (*xhat)(r, j);
            }
            mean_dh /= Real(n);
            mean_dh_h /= Real(n);
            for (std::size_t j = 0; j < n; ++j)
                gx(r, j) += (*inv_std)[r] * (dh[j] - mean_dh - (*xhat)(r, j) * mean_dh_h);
        }
    });
}

// Scales every row to unit L2 norm.
template <class Real>
Var<Real> l2_normalize_rows(Var<Real> x) {
    const std::size_t n = x.cols(), rows = x.rows();
    BasicTensor<Real> out = x.value();
    auto norms = std::make_shared<std::vector<Real>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        Real s = 0;
        for (Real v : out.row(r)) s += v * v;
        const Real nr = std::sqrt(s);
        if (!(nr > Real(0)) || !std::isfinite(nr)) throw numeric_error("cannot normalize a zero-norm embedding");
        (*norms)[r] = nr;
        for (auto& v : out.row(r)) v /= nr;
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(ix)) return;
        const auto& y = t.value(self);
        const auto& g = t.grad(self);
        auto& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            Real dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += y(r, j) * g(r, j);
            for (std::size_t j = 0; j < n; ++j) gx(r, j) += (g(r, j) - y(r, j) * dot) / (*norms)[r];
        }
    });
}

// ---------------------------------------------------------------------------
// Multi-head attention

// Head-averaged attention weights, one [n × n] matrix per block.
template <class Real>
using AttentionRecord = std::vector<BasicTensor<Real>>;

// Scaled dot-product attention over `blocks` independent sequences of
// `block_rows` rows each, stacked in q/k/v. `masks` is either one
// [n × n] additive mask shared by all blocks or [blocks·n × n].
template <class Real>
Var<Real> multi_head_attention(Var<Real> q, Var<Real> k, Var<Real> v, const BasicTensor<Real>& masks,
                               std::size_t heads, std::size_t block_rows, AttentionRecord<Real>* record = nullptr) {
    const std::size_t d = q.cols(), total = q.rows(), n = block_rows;
    if (k.shape() != q.shape() || v.shape() != q.shape()) throw shape_error("attention: q/k/v shapes differ");
    if (heads == 0 || d % heads != 0) throw shape_error("attention: width not divisible by head count");
    if (n == 0 || total % n != 0) throw shape_error("attention: rows not divisible by block length");
    const std::size_t blocks = total / n, hd = d / heads;
    const bool shared_mask = masks.rows() == n;
    if (masks.cols() != n || !(shared_mask || masks.rows() == total))
        throw shape_error("attention: mask shape " + shape_string(masks.shape()) + " for blocks of " +
                          std::to_string(n));
    const Real scale = Real(1) / std::sqrt(Real(hd));

    // weights[(b·heads + h)] is the [n × n] softmax matrix
    auto weights = std::make_shared<std::vector<BasicTensor<Real>>>();
    weights->reserve(blocks * heads);
    BasicTensor<Real> out = BasicTensor<Real>::matrix(total, d);
    std::vector<Real> qh(n * hd), kh(n * hd), vh(n * hd), oh(n * hd), logits(n * n);
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    if (record) record->assign(blocks, BasicTensor<Real>::matrix(n, n));

    for (std::size_t b = 0; b < blocks; ++b) {
        const Real* mask = masks.data().data() + (shared_mask ? 0 : b * n * n);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < hd; ++j) {
                    qh[i * hd + j] = qv(b * n + i, h * hd + j);
                    kh[i * hd + j] = kv(b * n + i, h * hd + j);
                    vh[i * hd + j] = vv(b * n + i, h * hd + j);
                }
            std::fill(logits.begin(), logits.end(), Real(0));
            kernels::gemm_nt(qh.data(), kh.data(), logits.data(), n, hd, n);
            for (auto& l : logits) l *= scale;
            BasicTensor<Real> a = BasicTensor<Real>::matrix(n, n);
            for (std::size_t i = 0; i < n; ++i)
                detail::masked_softmax_row(logits.data() + i * n, mask + i * n, a.data().data() + i * n, n);
            std::fill(oh.begin(), oh.end(), Real(0));
            kernels::gemm_nn(a.data().data(), vh.data(), oh.data(), n, n, hd);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < hd; ++j) out(b * n + i, h * hd + j) = oh[i * hd + j];
            if (record) {
                auto& avg = (*record)[b];
                for (std::size_t i = 0; i < n * n; ++i) avg[i] += a[i] / Real(heads);
            }
            weights->push_back(std::move(a));
        }
    }

    const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
    return q.tape().record(std::move(out), {iq, ik, iv}, [=](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& qv2 = t.value(iq);
        const auto& kv2 = t.value(ik);
        const auto& vv2 = t.value(iv);
        std::vector<Real> qh2(n * hd), kh2(n * hd), vh2(n * hd), gh(n * hd), da(n * n), dz(n * n),
            dq(n * hd), dk(n * hd), dv(n * hd);
        for (std::size_t b = 0; b < blocks; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const auto& a = (*weights)[b * heads + h];
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < hd; ++j) {
                        qh2[i * hd + j] = qv2(b * n + i, h * hd + j);
                        kh2[i * hd + j] = kv2(b * n + i, h * hd + j);
                        vh2[i * hd + j] = vv2(b * n + i, h * hd + j);
                        gh[i * hd + j] = g(b * n + i, h * hd + j);
                    }
                // O = A·V  =>  dV = Aᵀ·dO, dA = dO·Vᵀ
                std::fill(dv.begin(), dv.end(), Real(0));
                kernels::gemm_tn(a.data().data(), gh.data(), dv.data(), n, n, hd);
                std::fill(da.begin(), da.end(), Real(0));
                kernels::gemm_nt(gh.data(), vh2.data(), da.data(), n, hd, n);
                std::fill(dz.begin(), dz.end(), Real(0));
                for (std::size_t i = 0; i < n; ++i)
                    detail::softmax_row_backward(a.data().data() + i * n, da.data() + i * n, dz.data() + i * n, n);
                for (auto& x : dz) x *= scale;
                // Z = Q·Kᵀ  =>  dQ = dZ·K, dK = dZᵀ·Q
                std::fill(dq.begin(), dq.end(), Real(0));
                kernels::gemm_nn(dz.data(), kh2.data(), dq.data(), n, n, hd);
                std::fill(dk.begin(), dk.end(), Real(0));
                kernels::gemm_tn(dz.data(), qh2.data(), dk.data(), n, n, hd);
                auto scatter = [&](std::size_t id, const std::vector<Real>& src) {
                    if (!t.requires_grad(id)) return;
                    auto& dst = t.grad(id);
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < hd; ++j) dst(b * n + i, h * hd + j) += src[i * hd + j];
                };
                scatter(iq, dq);
                scatter(ik, dk);
                scatter(iv, dv);
            }
        }
    });
}

// Attention over a prefix tree: row i attends to the rows on its path from
// the root (itself included), listed in order in
// paths.rows[paths.offsets[i] .. paths.offsets[i+1]). For sequences stored
// as a tree of shared prefixes this equals causal attention on each
// sequence.
struct PathTable {
    std::vector<std::size_t> offsets{0};
    std::vector<std::size_t> rows;

    std::size_t size() const { return offsets.size() - 1; }
};

template <class Real>
Var<Real> path_attention(Var<Real> q, Var<Real> k, Var<Real> v, std::shared_ptr<const PathTable> paths,
                         std::size_t heads) {
    const std::size_t d = q.cols(), n = q.rows();
    if (k.shape() != q.shape() || v.shape() != q.shape()) throw shape_error("attention: q/k/v shapes differ");
    if (heads == 0 || d % heads != 0) throw shape_error("attention: width not divisible by head count");
    if (paths->size() != n) throw shape_error("path_attention: path table does not match row count");
    const std::size_t hd = d / heads;
    const Real scale = Real(1) / std::sqrt(Real(hd));
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    // weights[offsets[i]·heads + h·len + j]: row i, head h, j-th path entry
    auto weights = std::make_shared<std::vector<Real>>(paths->rows.size() * heads);
    BasicTensor<Real> out = BasicTensor<Real>::matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t begin = paths->offsets[i], len = paths->offsets[i + 1] - begin;
        if (len == 0 || paths->rows[begin + len - 1] != i) throw shape_error("path_attention: path must end at its row");
        for (std::size_t h = 0; h < heads; ++h) {
            Real* w = weights->data() + begin * heads + h * len;
            const Real* qi = qv.data().data() + i * d + h * hd;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                const Real* kj = kv.data().data() + paths->rows[begin + j] * d + h * hd;
                Real s = 0;
                for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                w[j] = s * scale;
                mx = std::max(mx, w[j]);
            }
            Real z = 0;
            for (std::size_t j = 0; j < len; ++j) {
                w[j] = std::exp(w[j] - mx);
                z += w[j];
            }
            Real* oi = out.data().data() + i * d + h * hd;
            for (std::size_t j = 0; j < len; ++j) {
                w[j] /= z;
                const Real* vj = vv.data().data() + paths->rows[begin + j] * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) oi[c] += w[j] * vj[c];
            }
        }
    }
    const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
    return q.tape().record(std::move(out), {iq, ik, iv}, [=](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Real* qd = t.value(iq).data().data();
        const Real* kd = t.value(ik).data().data();
        const Real* vd = t.value(iv).data().data();
        Real* dq = t.requires_grad(iq) ? t.grad(iq).data().data() : nullptr;
        Real* dk = t.requires_grad(ik) ? t.grad(ik).data().data() : nullptr;
        Real* dv = t.requires_grad(iv) ? t.grad(iv).data().data() : nullptr;
        std::vector<Real> dz;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t begin = paths->offsets[i], len = paths->offsets[i + 1] - begin;
            dz.resize(len);
            for (std::size_t h = 0; h < heads; ++h) {
                const Real* w = weights->data() + begin * heads + h * len;
                const Real* gi = g.data().data() + i * d + h * hd;
                Real dot = 0;
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t r = paths->rows[begin + j];
                    const Real* vj = vd + r * d + h * hd;
                    Real da = 0;
                    for (std::size_t c = 0; c < hd; ++c) da += gi[c] * vj[c];
                    dz[j] = da;
                    dot += w[j] * da;
                    if (dv)
                        for (std::size_t c = 0; c < hd; ++c) dv[r * d + h * hd + c] += w[j] * gi[c];
                }
                const Real* qi = qd + i * d + h * hd;
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t r = paths->rows[begin + j];
                    const Real gz = w[j] * (dz[j] - dot) * scale;
                    if (dq) {
                        const Real* kj = kd + r * d + h * hd;
                        for (std::size_t c = 0; c < hd; ++c) dq[i * d + h * hd + c] += gz * kj[c];
                    }
                    if (dk)
                        for (std::size_t c = 0; c < hd; ++c) dk[r * d + h * hd + c] += gz * qi[c];
                }
            }
        }
    });
}

}  // namespace poar
