#pragma once

// Both encoders over one parameter store.

#include <span>
#include <vector>

#include "poar/catalog.hpp"
#include "poar/text_encoder.hpp"
#include "poar/vision_encoder.hpp"

namespace poar {

template <class Real>
class PoarModel {
public:
    PoarModel(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        vision_ = VisionEncoder<Real>::create(store_, config_, rng);
        text_ = TextEncoder<Real>::create(store_, config_, rng);
    }

    // Takes ownership of parameters that were created elsewhere (loaded or
    // converted); names and shapes must match what create() would make.
    PoarModel(const EncoderConfig& config, ParameterStore<Real> store) : config_(config), store_(std::move(store)) {
        config_.validate();
        PoarModel reference(config_, 0);
        auto expected = reference.store_.all();
        if (expected.size() != store_.size())
            throw compatibility_error("parameter count does not match encoder config");
        for (auto* p : expected) {
            auto* q = store_.find(p->name);
            if (!q) throw compatibility_error("missing parameter '" + p->name + "'");
            if (q->value.shape() != p->value.shape())
                throw compatibility_error("parameter '" + p->name + "' has shape " + shape_string(q->value.shape()) +
                                          ", expected " + shape_string(p->value.shape()));
        }
        vision_ = VisionEncoder<Real>::bind(store_, config_);
        text_ = TextEncoder<Real>::bind(store_, config_);
    }

    PoarModel(const PoarModel&) = delete;
    PoarModel& operator=(const PoarModel&) = delete;

    const EncoderConfig& config() const { return config_; }
    ParameterStore<Real>& parameters() { return store_; }
    const ParameterStore<Real>& parameters() const { return store_; }
    const VisionEncoder<Real>& vision() const { return vision_; }
    const TextEncoder<Real>& text() const { return text_; }

    Var<Real> encode_images(Tape<Real>& tape, std::span<const Image> images, const MaskSpec& masks,
                            VisionRecords<Real>* records = nullptr) const {
        return vision_.encode(tape, images, masks, records);
    }

    Var<Real> encode_sentences(Tape<Real>& tape, const std::vector<std::string>& sentences,
                               std::size_t length) const {
        std::vector<TokenSequence> seqs;
        seqs.reserve(sentences.size());
        for (auto& s : sentences) seqs.push_back(tokenize(s, length));
        return text_.encode(tape, seqs);
    }

    Var<Real> encode_prompts(Tape<Real>& tape, const std::vector<Prompt>& prompts) const {
        std::vector<std::string> sentences;
        for (auto& p : prompts) sentences.push_back(p.sentence);
        return encode_sentences(tape, sentences, config_.text_length);
    }

    // Same parameters in another precision.
    template <class Other>
    PoarModel<Other> cast() const {
        ParameterStore<Other> other;
        for (auto* p : store_.all()) other.add(p->name, p->value.template cast<Other>());
        return PoarModel<Other>(config_, std::move(other));
    }

private:
    EncoderConfig config_;
    ParameterStore<Real> store_;
    VisionEncoder<Real> vision_;
    TextEncoder<Real> text_;
};

}  // namespace poar
