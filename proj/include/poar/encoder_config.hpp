#pragma once

#include <cstddef>
#include <sstream>
#include <string>

#include "poar/errors.hpp"

namespace poar {

// Architecture of both encoders plus the masking toggles, which change what
// the image encoder computes and therefore travel with a checkpoint.
struct EncoderConfig {
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 32;
    std::size_t groups = 8;  // K, one attribute token per catalog group
    std::size_t vision_layers = 2;
    std::size_t vision_heads = 2;
    std::size_t text_layers = 2;
    std::size_t text_heads = 2;
    std::size_t text_length = 64;        // L
    std::size_t paragraph_length = 384;  // sequence length for one-to-one paragraph prompts
    std::size_t mlp_ratio = 4;
    bool token_mask = true;     // block token→token attention
    bool region_mask = true;    // block patches outside each group's region
    bool single_token = false;  // one attribute token shared by every group

    std::size_t grid_rows() const { return image_height / patch_size; }
    std::size_t grid_cols() const { return image_width / patch_size; }
    std::size_t patch_count() const { return grid_rows() * grid_cols(); }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }
    std::size_t token_count() const { return single_token ? 1 : groups; }
    std::size_t sequence_length() const { return token_count() + patch_count(); }
    std::size_t text_context() const { return text_length > paragraph_length ? text_length : paragraph_length; }
    std::size_t token_for_group(std::size_t k) const { return single_token ? 0 : k; }

    void validate() const {
        if (patch_size == 0 || image_height == 0 || image_width == 0)
            throw validation_error("image size and patch size must be positive");
        if (image_height % patch_size || image_width % patch_size)
            throw shape_error("patch size " + std::to_string(patch_size) + " must divide image size " +
                              std::to_string(image_height) + "x" + std::to_string(image_width));
        if (embed_dim < 2) throw validation_error("embed_dim must be at least 2");
        if (vision_heads == 0 || embed_dim % vision_heads)
            throw validation_error("embed_dim must be divisible by vision_heads");
        if (text_heads == 0 || embed_dim % text_heads)
            throw validation_error("embed_dim must be divisible by text_heads");
        if (groups == 0) throw validation_error("groups must be positive");
        if (text_length < 3 || paragraph_length < 3) throw validation_error("text lengths must be at least 3");
        if (mlp_ratio == 0) throw validation_error("mlp_ratio must be positive");
    }

    // Canonical text form; used for checkpoint compatibility digests.
    std::string describe() const {
        std::ostringstream os;
        os << "image_height=" << image_height << ";image_width=" << image_width << ";patch_size=" << patch_size
           << ";embed_dim=" << embed_dim << ";groups=" << groups << ";vision_layers=" << vision_layers
           << ";vision_heads=" << vision_heads << ";text_layers=" << text_layers << ";text_heads=" << text_heads
           << ";text_length=" << text_length << ";paragraph_length=" << paragraph_length
           << ";mlp_ratio=" << mlp_ratio << ";token_mask=" << token_mask << ";region_mask=" << region_mask
           << ";single_token=" << single_token;
        return os.str();
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

}  // namespace poar
