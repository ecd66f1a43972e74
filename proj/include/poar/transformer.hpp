#pragma once

// Pre-norm transformer block shared by the image and text encoders:
//
//   V̂ = MSA(LN(V)) + V
//   V' = MLP(LN(V̂)) + V̂
//
// Keys carry no bias.

#include <string>

#include "poar/ops.hpp"
#include "poar/params.hpp"

namespace poar {

template <class Real>
struct TransformerBlock {
    Parameter<Real>* ln1_gain;
    Parameter<Real>* ln1_bias;
    Parameter<Real>* wq;
    Parameter<Real>* bq;
    Parameter<Real>* wk;
    Parameter<Real>* wv;
    Parameter<Real>* bv;
    Parameter<Real>* wo;
    Parameter<Real>* bo;
    Parameter<Real>* ln2_gain;
    Parameter<Real>* ln2_bias;
    Parameter<Real>* w1;
    Parameter<Real>* b1;
    Parameter<Real>* w2;
    Parameter<Real>* b2;
    std::size_t heads = 1;

    static TransformerBlock create(ParameterStore<Real>& store, const std::string& prefix, std::size_t width,
                                   std::size_t heads, std::size_t mlp_width, Rng& rng) {
        auto vec = [&](const char* name, Real fill) -> Parameter<Real>* {
            return &store.add(prefix + name, BasicTensor<Real>({width}, fill));
        };
        auto proj = [&](const char* name, std::size_t in, std::size_t out) -> Parameter<Real>* {
            return &store.add(prefix + name, projection_init<Real>(in, out, rng));
        };
        TransformerBlock b{};
        b.heads = heads;
        b.ln1_gain = vec("ln1.gain", 1);
        b.ln1_bias = vec("ln1.bias", 0);
        b.wq = proj("attn.wq", width, width);
        b.bq = vec("attn.bq", 0);
        b.wk = proj("attn.wk", width, width);
        b.wv = proj("attn.wv", width, width);
        b.bv = vec("attn.bv", 0);
        b.wo = proj("attn.wo", width, width);
        b.bo = vec("attn.bo", 0);
        b.ln2_gain = vec("ln2.gain", 1);
        b.ln2_bias = vec("ln2.bias", 0);
        b.w1 = proj("mlp.w1", width, mlp_width);
        b.b1 = &store.add(prefix + "mlp.b1", BasicTensor<Real>({mlp_width}, Real(0)));
        b.w2 = proj("mlp.w2", mlp_width, width);
        b.b2 = vec("mlp.b2", 0);
        return b;
    }

    static TransformerBlock bind(ParameterStore<Real>& store, const std::string& prefix, std::size_t heads) {
        TransformerBlock b{};
        b.heads = heads;
        auto get = [&](const char* name) { return &store.at(prefix + name); };
        b.ln1_gain = get("ln1.gain");
        b.ln1_bias = get("ln1.bias");
        b.wq = get("attn.wq");
        b.bq = get("attn.bq");
        b.wk = get("attn.wk");
        b.wv = get("attn.wv");
        b.bv = get("attn.bv");
        b.wo = get("attn.wo");
        b.bo = get("attn.bo");
        b.ln2_gain = get("ln2.gain");
        b.ln2_bias = get("ln2.bias");
        b.w1 = get("mlp.w1");
        b.b1 = get("mlp.b1");
        b.w2 = get("mlp.w2");
        b.b2 = get("mlp.b2");
        return b;
    }

    // Attention branch with the score/mix step supplied by `attend(q, k, v)`.
    template <class Attend>
    Var<Real> attention_with(Var<Real> x, Attend attend) const {
        auto& t = x.tape();
        auto h = layer_norm(x, t.param(*ln1_gain), t.param(*ln1_bias));
        auto q = add_row(matmul(h, t.param(*wq)), t.param(*bq));
        auto k = matmul(h, t.param(*wk));
        auto v = add_row(matmul(h, t.param(*wv)), t.param(*bv));
        return add_row(matmul(attend(q, k, v), t.param(*wo)), t.param(*bo));
    }

    // Multi-head self-attention over stacked blocks of `block_rows` rows.
    Var<Real> attention(Var<Real> x, const BasicTensor<Real>& mask, std::size_t block_rows,
                        AttentionRecord<Real>* record = nullptr) const {
        return attention_with(x, [&](Var<Real> q, Var<Real> k, Var<Real> v) {
            return multi_head_attention(q, k, v, mask, heads, block_rows, record);
        });
    }

    Var<Real> mlp(Var<Real> x) const {
        auto& t = x.tape();
        auto h = layer_norm(x, t.param(*ln2_gain), t.param(*ln2_bias));
        auto u = gelu(add_row(matmul(h, t.param(*w1)), t.param(*b1)));
        return add_row(matmul(u, t.param(*w2)), t.param(*b2));
    }

    Var<Real> forward(Var<Real> x, const BasicTensor<Real>& mask, std::size_t block_rows,
                      AttentionRecord<Real>* record = nullptr) const {
        auto mid = add(x, attention(x, mask, block_rows, record));
        return add(mid, mlp(mid));
    }

    // Same block with prefix-tree attention (see path_attention).
    Var<Real> forward(Var<Real> x, const std::shared_ptr<const PathTable>& paths) const {
        auto mid = add(x, attention_with(x, [&](Var<Real> q, Var<Real> k, Var<Real> v) {
                           return path_attention(q, k, v, paths, heads);
                       }));
        return add(mid, mlp(mid));
    }
};

}  // namespace poar
