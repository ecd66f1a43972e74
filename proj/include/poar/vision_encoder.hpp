#pragma once

// Image encoder with K learnable attribute tokens.
//
// An image is cut into S = (H/r)(W/r) patches, each projected to a
// D-vector. The K tokens are placed in front of the patches and learnable
// positional encodings are added, giving a (K+S) × D sequence. The
// attention mask enforces, at every layer:
//   - token rows: no attention to other tokens or to themselves (token mask),
//     and no attention to patches outside the group's region (region mask);
//   - patch rows: full attention over patches, none to tokens.
// The encoder output is the K token rows of the last layer.

#include <span>
#include <string>
#include <vector>

#include "poar/catalog.hpp"
#include "poar/encoder_config.hpp"
#include "poar/image.hpp"
#include "poar/transformer.hpp"

namespace poar {

// Vertical extent of each group's body region, as fractions of the image
// height; one entry per catalog group.
struct RegionLayout {
    struct Interval {
        double lo = 0.0;
        double hi = 1.0;
        friend bool operator==(const Interval&, const Interval&) = default;
    };
    std::vector<Interval> intervals;
};

inline RegionLayout::Interval default_region(std::string_view group_key) {
    if (group_key == "Hair" || group_key == "Accessory") return {0.0, 0.25};
    if (group_key == "Gender" || group_key == "Age") return {0.0, 1.0};
    if (group_key == "Upperbody" || group_key == "Carry") return {0.2, 0.6};
    if (group_key == "Lowerbody") return {0.55, 0.9};
    if (group_key == "Foot") return {0.85, 1.0};
    return {0.0, 1.0};
}

inline RegionLayout default_region_layout(const AttributeCatalog& catalog) {
    RegionLayout layout;
    for (auto& g : catalog.groups()) layout.intervals.push_back(default_region(g.key));
    return layout;
}

// True when grid row `row` of `rows` has its center inside the interval.
inline bool row_in_interval(std::size_t row, std::size_t rows, const RegionLayout::Interval& iv) {
    const double center = (static_cast<double>(row) + 0.5) / static_cast<double>(rows);
    return center >= iv.lo && center < iv.hi;
}

struct MaskSpec {
    std::size_t tokens = 0;
    std::size_t patches = 0;
    Tensor token_mask;   // tokens × tokens
    Tensor region_mask;  // tokens × patches
    Tensor attention;    // (tokens+patches)², the mask the encoder applies

    bool patch_visible(std::size_t token, std::size_t patch) const { return region_mask(token, patch) == 0.0; }
};

inline Tensor compose_attention_mask(const Tensor& token_mask, const Tensor& region_mask) {
    const std::size_t k = token_mask.rows(), s = region_mask.cols(), n = k + s;
    Tensor m = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i < k)
                m(i, j) = j < k ? token_mask(i, j) : region_mask(i, j - k);
            else
                m(i, j) = j < k ? mask_sentinel<double> : 0.0;
        }
    return m;
}

inline MaskSpec build_mask(const RegionLayout& layout, const EncoderConfig& config) {
    config.validate();
    const std::size_t k = config.token_count(), s = config.patch_count();
    const std::size_t rows = config.grid_rows(), cols = config.grid_cols();
    if (!config.single_token && layout.intervals.size() != k)
        throw mask_error("region layout has " + std::to_string(layout.intervals.size()) + " groups, encoder has " +
                         std::to_string(k) + " tokens");
    MaskSpec spec;
    spec.tokens = k;
    spec.patches = s;
    spec.token_mask = Tensor::matrix(k, k, config.token_mask ? mask_sentinel<double> : 0.0);
    spec.region_mask = Tensor::matrix(k, s);
    for (std::size_t t = 0; t < k; ++t) {
        const auto iv = config.single_token ? RegionLayout::Interval{} : layout.intervals[t];
        if (!(iv.lo >= 0.0 && iv.hi <= 1.0 && iv.lo < iv.hi))
            throw mask_error("region interval of group " + std::to_string(t) + " is not inside [0, 1)");
        std::size_t visible = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            const bool in = row_in_interval(r, rows, iv);
            visible += in ? cols : 0;
            if (config.region_mask && !in)
                for (std::size_t c = 0; c < cols; ++c) spec.region_mask(t, r * cols + c) = mask_sentinel<double>;
        }
        if (visible == 0)
            throw mask_error("region interval of group " + std::to_string(t) + " covers no patch row");
    }
    spec.attention = compose_attention_mask(spec.token_mask, spec.region_mask);
    return spec;
}

// Raw patches in row-major grid order; each row is one r×r×3 patch
// flattened as (y, x, channel).
inline Tensor patchify(const Image& image, std::size_t r) {
    if (r == 0 || image.height % r || image.width % r)
        throw shape_error("patch size " + std::to_string(r) + " does not divide " + std::to_string(image.height) +
                          "x" + std::to_string(image.width));
    const std::size_t gr = image.height / r, gc = image.width / r;
    Tensor out = Tensor::matrix(gr * gc, r * r * 3);
    for (std::size_t py = 0; py < gr; ++py)
        for (std::size_t px = 0; px < gc; ++px) {
            auto row = out.row(py * gc + px);
            std::size_t at = 0;
            for (std::size_t y = 0; y < r; ++y)
                for (std::size_t x = 0; x < r; ++x)
                    for (std::size_t c = 0; c < 3; ++c) row[at++] = image.at(py * r + y, px * r + x, c);
        }
    return out;
}

// V = [Z; X] + E with tokens first (token-major rows).
template <class Real>
BasicTensor<Real> assemble_input(const BasicTensor<Real>& tokens, const BasicTensor<Real>& patches,
                                 const BasicTensor<Real>& positions) {
    if (tokens.cols() != patches.cols() || positions.cols() != tokens.cols() ||
        positions.rows() != tokens.rows() + patches.rows())
        throw shape_error("assemble_input: tokens " + shape_string(tokens.shape()) + ", patches " +
                          shape_string(patches.shape()) + ", positions " + shape_string(positions.shape()));
    BasicTensor<Real> v = positions;
    for (std::size_t i = 0; i < tokens.size(); ++i) v[i] += tokens[i];
    for (std::size_t i = 0; i < patches.size(); ++i) v[tokens.size() + i] += patches[i];
    return v;
}

template <class Real>
Var<Real> assemble_input(Var<Real> tokens, Var<Real> patches, Var<Real> positions) {
    if (positions.rows() != tokens.rows() + patches.rows())
        throw shape_error("assemble_input: positional encodings must cover tokens and patches");
    return add(concat_rows<Real>({tokens, patches}), positions);
}

// Head-averaged attention, indexed [layer][image] → (K+S) × (K+S).
template <class Real>
using VisionRecords = std::vector<AttentionRecord<Real>>;

template <class Real>
class VisionEncoder {
public:
    static VisionEncoder create(ParameterStore<Real>& store, const EncoderConfig& config, Rng& rng) {
        VisionEncoder e;
        e.config_ = config;
        const std::size_t d = config.embed_dim;
        e.patch_proj_ = &store.add("vision.patch.weight", projection_init<Real>(config.patch_dim(), d, rng));
        e.patch_bias_ = &store.add("vision.patch.bias", BasicTensor<Real>({d}));
        e.tokens_ = &store.add("vision.tokens", gaussian_init<Real>({config.token_count(), d}, 0.02, rng));
        e.positions_ = &store.add("vision.positions", gaussian_init<Real>({config.sequence_length(), d}, 0.02, rng));
        for (std::size_t l = 0; l < config.vision_layers; ++l)
            e.blocks_.push_back(TransformerBlock<Real>::create(store, "vision.block" + std::to_string(l) + ".", d,
                                                               config.vision_heads, d * config.mlp_ratio, rng));
        return e;
    }

    static VisionEncoder bind(ParameterStore<Real>& store, const EncoderConfig& config) {
        VisionEncoder e;
        e.config_ = config;
        e.patch_proj_ = &store.at("vision.patch.weight");
        e.patch_bias_ = &store.at("vision.patch.bias");
        e.tokens_ = &store.at("vision.tokens");
        e.positions_ = &store.at("vision.positions");
        for (std::size_t l = 0; l < config.vision_layers; ++l)
            e.blocks_.push_back(
                TransformerBlock<Real>::bind(store, "vision.block" + std::to_string(l) + ".", config.vision_heads));
        return e;
    }

    const EncoderConfig& config() const { return config_; }
    const std::vector<TransformerBlock<Real>>& blocks() const { return blocks_; }

    // Patch embeddings X for a batch, [B·S × D].
    Var<Real> embed_patches(Tape<Real>& tape, std::span<const Image> images) const {
        const std::size_t s = config_.patch_count(), pd = config_.patch_dim();
        BasicTensor<Real> raw = BasicTensor<Real>::matrix(images.size() * s, pd);
        for (std::size_t b = 0; b < images.size(); ++b) {
            if (images[b].height != config_.image_height || images[b].width != config_.image_width)
                throw shape_error("image size does not match encoder config");
            Tensor p = patchify(images[b], config_.patch_size);
            std::copy(p.storage().begin(), p.storage().end(), raw.storage().begin() + b * s * pd);
        }
        return add_row(matmul(tape.constant(std::move(raw)), tape.param(*patch_proj_)), tape.param(*patch_bias_));
    }

    // Ẑ for a batch: K token rows per image, stacked, [B·K × D].
    Var<Real> encode(Tape<Real>& tape, std::span<const Image> images, const MaskSpec& masks,
                     VisionRecords<Real>* records = nullptr) const {
        if (images.empty()) throw shape_error("encode: empty image batch");
        const std::size_t k = config_.token_count(), s = config_.patch_count(), n = k + s;
        if (masks.tokens != k || masks.patches != s) throw mask_error("mask spec does not match encoder config");
        Var<Real> x = embed_patches(tape, images);
        Var<Real> z = tape.param(*tokens_);
        Var<Real> e = tape.param(*positions_);
        std::vector<Var<Real>> seqs;
        for (std::size_t b = 0; b < images.size(); ++b) {
            std::vector<std::size_t> rows(s);
            for (std::size_t i = 0; i < s; ++i) rows[i] = b * s + i;
            seqs.push_back(assemble_input(z, gather_rows(x, rows), e));
        }
        Var<Real> v = seqs.size() == 1 ? seqs.front() : concat_rows(seqs);
        const BasicTensor<Real> mask = masks.attention.template cast<Real>();
        if (records) records->assign(blocks_.size(), {});
        for (std::size_t l = 0; l < blocks_.size(); ++l)
            v = blocks_[l].forward(v, mask, n, records ? &(*records)[l] : nullptr);
        std::vector<std::size_t> token_rows;
        for (std::size_t b = 0; b < images.size(); ++b)
            for (std::size_t t = 0; t < k; ++t) token_rows.push_back(b * n + t);
        return gather_rows(v, token_rows);
    }

private:
    EncoderConfig config_;
    Parameter<Real>* patch_proj_ = nullptr;
    Parameter<Real>* patch_bias_ = nullptr;
    Parameter<Real>* tokens_ = nullptr;
    Parameter<Real>* positions_ = nullptr;
    std::vector<TransformerBlock<Real>> blocks_;
};

// One grid per (layer, token): the token's head-averaged attention over
// patches, laid out rows × cols in patch-grid order.
struct AttentionMap {
    std::size_t layer = 0;
    std::size_t token = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
};

template <class Real>
std::vector<AttentionMap> attention_maps(const VisionRecords<Real>& records, const EncoderConfig& config,
                                         std::size_t image_index = 0) {
    if (records.empty() && config.vision_layers > 0)
        throw usage_error("attention maps need an encode pass with records enabled");
    std::vector<AttentionMap> maps;
    const std::size_t k = config.token_count(), s = config.patch_count();
    for (std::size_t l = 0; l < records.size(); ++l) {
        if (image_index >= records[l].size()) throw usage_error("no attention record for requested image");
        const auto& a = records[l][image_index];
        for (std::size_t t = 0; t < k; ++t) {
            AttentionMap m{l, t, config.grid_rows(), config.grid_cols(), std::vector<double>(s)};
            for (std::size_t p = 0; p < s; ++p) m.values[p] = static_cast<double>(a(t, k + p));
            maps.push_back(std::move(m));
        }
    }
    return maps;
}

}  // namespace poar
