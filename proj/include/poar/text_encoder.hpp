#pragma once

// Prompt encoder: byte embeddings plus learned positions, causal
// transformer blocks, read out at the END token.
//
// With causal attention a row depends only on the tokens up to it, so
// sequences sharing a prefix share those rows. A call stores its sequences
// as a prefix tree, computes each distinct prefix once, and attends along
// root-to-node paths. Pad positions lie after END and are never read.

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poar/encoder_config.hpp"
#include "poar/tokenizer.hpp"
#include "poar/transformer.hpp"

namespace poar {

// Distinct prefixes of a set of token sequences. Node rows are in
// creation order, so every parent precedes its children.
struct PrefixTree {
    std::vector<std::size_t> token;     // token id of each node
    std::vector<std::size_t> position;  // depth, 0 for START
    std::vector<std::size_t> end_node;  // node of each sequence's END token
    std::shared_ptr<PathTable> paths = std::make_shared<PathTable>();

    static PrefixTree build(std::span<const TokenSequence> sequences) {
        PrefixTree tree;
        std::vector<std::size_t> parent;
        std::map<std::pair<std::size_t, std::size_t>, std::size_t> child;  // (parent+1, token) → node
        for (auto& s : sequences) {
            std::size_t at = 0;  // 0: virtual root, else node+1
            for (std::size_t i = 0; i < s.valid_length; ++i) {
                const int id = s.ids[i];
                if (id < 0 || static_cast<std::size_t>(id) >= vocabulary_size)
                    throw shape_error("token id out of vocabulary");
                auto [it, fresh] = child.try_emplace({at, static_cast<std::size_t>(id)}, tree.token.size());
                if (fresh) {
                    tree.token.push_back(static_cast<std::size_t>(id));
                    tree.position.push_back(i);
                    parent.push_back(at);
                    auto& p = *tree.paths;
                    if (at) p.rows.insert(p.rows.end(), p.rows.begin() + p.offsets[at - 1], p.rows.begin() + p.offsets[at]);
                    p.rows.push_back(it->second);
                    p.offsets.push_back(p.rows.size());
                }
                at = it->second + 1;
            }
            tree.end_node.push_back(at - 1);
        }
        return tree;
    }
};

template <class Real>
class TextEncoder {
public:
    static TextEncoder create(ParameterStore<Real>& store, const EncoderConfig& config, Rng& rng) {
        TextEncoder e;
        e.config_ = config;
        const std::size_t d = config.embed_dim;
        e.token_embedding_ = &store.add("text.token_embedding", gaussian_init<Real>({vocabulary_size, d}, 0.02, rng));
        e.positions_ = &store.add("text.positions", gaussian_init<Real>({config.text_context(), d}, 0.01, rng));
        for (std::size_t l = 0; l < config.text_layers; ++l)
            e.blocks_.push_back(TransformerBlock<Real>::create(store, "text.block" + std::to_string(l) + ".", d,
                                                               config.text_heads, d * config.mlp_ratio, rng));
        return e;
    }

    static TextEncoder bind(ParameterStore<Real>& store, const EncoderConfig& config) {
        TextEncoder e;
        e.config_ = config;
        e.token_embedding_ = &store.at("text.token_embedding");
        e.positions_ = &store.at("text.positions");
        for (std::size_t l = 0; l < config.text_layers; ++l)
            e.blocks_.push_back(
                TransformerBlock<Real>::bind(store, "text.block" + std::to_string(l) + ".", config.text_heads));
        return e;
    }

    // One embedding row per sequence, [m × D].
    Var<Real> encode(Tape<Real>& tape, std::span<const TokenSequence> sequences) const {
        if (sequences.empty()) throw shape_error("encode_prompts: no sequences");
        const std::size_t length = sequences.front().length();
        for (auto& s : sequences) {
            if (s.length() != length) throw shape_error("encode_prompts: sequences must share one length");
            if (s.valid_length < 2 || s.valid_length > length) throw shape_error("encode_prompts: bad valid_length");
            if (s.valid_length > config_.text_context())
                throw shape_error("encode_prompts: sequence of " + std::to_string(s.valid_length) +
                                  " tokens exceeds context " + std::to_string(config_.text_context()));
        }
        PrefixTree tree = PrefixTree::build(sequences);
        Var<Real> x = add(gather_rows(tape.param(*token_embedding_), tree.token),
                          gather_rows(tape.param(*positions_), tree.position));
        std::shared_ptr<const PathTable> paths = tree.paths;
        for (auto& block : blocks_) x = block.forward(x, paths);
        return gather_rows(x, std::move(tree.end_node));
    }

private:
    EncoderConfig config_;
    Parameter<Real>* token_embedding_ = nullptr;
    Parameter<Real>* positions_ = nullptr;
    std::vector<TransformerBlock<Real>> blocks_;
};

}  // namespace poar
