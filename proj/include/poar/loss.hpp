#pragma once

// Many-to-many contrastive loss between attribute-token embeddings and
// prompt embeddings, and the one-to-one paragraph baseline.
//
//   L_v2t = −Σ_i Σ_{j∈pos(i)} log( exp(s_ij/τ) / Σ_{k=1..t} exp(s_ik/τ) )
//   L_t2v = −Σ_j Σ_{i∈pos(j)} log( exp(s_ij/τ) / Σ_{k=1..v} exp(s_kj/τ) )
//   L     = L_v2t + L_t2v
//
// s is the cosine similarity matrix (rows: tokens in batch order, columns:
// prompts). Rows (columns) with no positive are left out of the outer sum.
// The denominators run over every prompt (token) in the batch, including
// those of other groups.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "poar/catalog.hpp"
#include "poar/encoder_config.hpp"
#include "poar/ops.hpp"

namespace poar {

// Dense boolean matrix, row-major.
struct PositiveMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> bits;

    PositiveMask() = default;
    PositiveMask(std::size_t r, std::size_t c) : rows(r), cols(c), bits(r * c, 0) {}

    bool operator()(std::size_t i, std::size_t j) const { return bits[i * cols + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v = true) { bits[i * cols + j] = v ? 1 : 0; }

    PositiveMask transposed() const {
        PositiveMask t(cols, rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) t.set(j, i, (*this)(i, j));
        return t;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto b : bits) n += b;
        return n;
    }
    friend bool operator==(const PositiveMask&, const PositiveMask&) = default;
};

// Per-image annotation: group key → true attribute values.
using Labels = std::map<std::string, std::vector<std::string>>;

// Prompt columns of a batch, each tied to one attribute.
struct PromptIndex {
    std::vector<AttributeRef> attributes;
    std::vector<Prompt> prompts;

    std::size_t size() const { return attributes.size(); }

    void add(const AttributeCatalog& catalog, const AttributeRef& ref) {
        attributes.push_back(ref);
        prompts.push_back(render_prompt(catalog.group(ref.group), ref.value));
    }

    std::optional<std::size_t> find(const AttributeRef& ref) const {
        for (std::size_t j = 0; j < attributes.size(); ++j)
            if (attributes[j] == ref) return j;
        return std::nullopt;
    }
};

// One column per catalog attribute, in catalog order.
inline PromptIndex catalog_prompts(const AttributeCatalog& catalog) {
    PromptIndex index;
    for (auto& ref : catalog.attributes()) index.add(catalog, ref);
    return index;
}

// Token rows are ordered image by image, `config.token_count()` per image.
// Token t of an image is positive to prompt j iff the image carries j's
// attribute and t is the token of j's group.
inline PositiveMask positive_mask(const std::vector<Labels>& batch, const AttributeCatalog& catalog,
                                  const PromptIndex& prompts, const EncoderConfig& config) {
    const std::size_t k = config.token_count();
    PositiveMask mask(batch.size() * k, prompts.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (auto& [key, values] : batch[b]) {
            auto g = catalog.group_index(key);
            if (!g) throw annotation_error("unknown group '" + key + "' in annotation");
            for (auto& value : values) {
                auto col = prompts.find({*g, value});
                if (!col) throw annotation_error("attribute '" + key + ":" + value + "' has no prompt in the batch");
                mask.set(b * k + config.token_for_group(*g), *col);
            }
        }
    }
    return mask;
}

// Cosine similarity between every row of `a` and every row of `b`.
template <class Real>
Var<Real> similarity_matrix(Var<Real> a, Var<Real> b) {
    if (a.cols() != b.cols()) throw shape_error("similarity_matrix: embedding widths differ");
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

template <class Real>
BasicTensor<Real> similarity_matrix(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    Tape<Real> tape(false);
    return similarity_matrix(tape.constant(a), tape.constant(b)).value();
}

template <class Real>
struct ContrastiveValue {
    Real loss = 0;
    std::size_t active_rows = 0;  // rows with at least one positive
    BasicTensor<Real> grad;       // dloss/dsim, same shape as sim
};

// Visual→text term over rows of `sim`, with its gradient.
template <class Real>
ContrastiveValue<Real> contrastive_rows(const BasicTensor<Real>& sim, const PositiveMask& pos, Real tau) {
    if (sim.rows() != pos.rows || sim.cols() != pos.cols) throw shape_error("contrastive loss: mask shape");
    if (!(tau > Real(0))) throw validation_error("temperature must be positive");
    ContrastiveValue<Real> out;
    out.grad = BasicTensor<Real>(sim.shape());
    const std::size_t t = sim.cols();
    std::vector<Real> p(t);
    for (std::size_t i = 0; i < sim.rows(); ++i) {
        std::size_t ti = 0;
        for (std::size_t j = 0; j < t; ++j) ti += pos(i, j);
        if (ti == 0) continue;
        ++out.active_rows;
        Real mx = sim(i, 0) / tau;
        for (std::size_t j = 1; j < t; ++j) mx = std::max(mx, sim(i, j) / tau);
        Real z = 0;
        for (std::size_t j = 0; j < t; ++j) {
            p[j] = std::exp(sim(i, j) / tau - mx);
            z += p[j];
        }
        const Real lse = mx + std::log(z);
        for (std::size_t j = 0; j < t; ++j) {
            p[j] /= z;
            if (pos(i, j)) out.loss += lse - sim(i, j) / tau;
            out.grad(i, j) = (Real(ti) * p[j] - (pos(i, j) ? Real(1) : Real(0))) / tau;
        }
    }
    return out;
}

template <class Real>
Real loss_v2t(const BasicTensor<Real>& sim, const PositiveMask& pos, Real tau) {
    return contrastive_rows(sim, pos, tau).loss;
}

template <class Real>
Real loss_t2v(const BasicTensor<Real>& sim, const PositiveMask& pos, Real tau) {
    return contrastive_rows(sim.transposed(), pos.transposed(), tau).loss;
}

template <class Real>
Real loss_total(const BasicTensor<Real>& sim, const PositiveMask& pos, Real tau) {
    return loss_v2t(sim, pos, tau) + loss_t2v(sim, pos, tau);
}

// Tape versions.
template <class Real>
Var<Real> loss_v2t(Var<Real> sim, const PositiveMask& pos, Real tau) {
    auto v = contrastive_rows(sim.value(), pos, tau);
    auto grad = std::make_shared<BasicTensor<Real>>(std::move(v.grad));
    const std::size_t is = sim.id();
    return sim.tape().record(BasicTensor<Real>::scalar(v.loss), {is}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(is)) return;
        const Real g = t.grad(self)[0];
        auto& gs = t.grad(is);
        for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g * (*grad)[i];
    });
}

template <class Real>
Var<Real> loss_t2v(Var<Real> sim, const PositiveMask& pos, Real tau) {
    auto v = contrastive_rows(sim.value().transposed(), pos.transposed(), tau);
    auto grad = std::make_shared<BasicTensor<Real>>(v.grad.transposed());
    const std::size_t is = sim.id();
    return sim.tape().record(BasicTensor<Real>::scalar(v.loss), {is}, [=](Tape<Real>& t, std::size_t self) {
        if (!t.requires_grad(is)) return;
        const Real g = t.grad(self)[0];
        auto& gs = t.grad(is);
        for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g * (*grad)[i];
    });
}

template <class Real>
Var<Real> loss_total(Var<Real> sim, const PositiveMask& pos, Real tau) {
    return add(loss_v2t(sim, pos, tau), loss_t2v(sim, pos, tau));
}

// ---------------------------------------------------------------------------
// One-to-one baseline: each image is paired with a paragraph made of all its
// rendered attribute sentences, in catalog group order.

inline std::string paragraph_for(const Labels& labels, const AttributeCatalog& catalog) {
    std::string text;
    for (auto& g : catalog.groups()) {
        auto it = labels.find(g.key);
        if (it == labels.end()) continue;
        for (auto& value : it->second) {
            if (!text.empty()) text += ' ';
            text += render_prompt(g, value).sentence;
        }
    }
    return text;
}

// Distinct paragraphs of a batch and the column of each image. Identical
// paragraphs share one column.
struct ParagraphBatch {
    std::vector<std::string> paragraphs;
    std::vector<std::size_t> column_of_image;

    PositiveMask positives() const {
        PositiveMask m(column_of_image.size(), paragraphs.size());
        for (std::size_t i = 0; i < column_of_image.size(); ++i) m.set(i, column_of_image[i]);
        return m;
    }
};

inline ParagraphBatch paragraph_batch(const std::vector<Labels>& batch, const AttributeCatalog& catalog) {
    ParagraphBatch out;
    for (auto& labels : batch) {
        std::string p = paragraph_for(labels, catalog);
        std::size_t col = out.paragraphs.size();
        for (std::size_t j = 0; j < out.paragraphs.size(); ++j)
            if (out.paragraphs[j] == p) col = j;
        if (col == out.paragraphs.size()) out.paragraphs.push_back(std::move(p));
        out.column_of_image.push_back(col);
    }
    return out;
}

// Symmetric InfoNCE between image embeddings (mean of the K tokens) and
// paragraph embeddings. `tokens` is [B·K × D], `paragraphs` [t × D].
template <class Real>
Var<Real> otoc_loss(Var<Real> tokens, std::size_t tokens_per_image, Var<Real> paragraphs, const PositiveMask& pos,
                    Real tau) {
    Var<Real> images = mean_row_groups(tokens, tokens_per_image);
    return loss_total(similarity_matrix(images, paragraphs), pos, tau);
}

}  // namespace poar
