#pragma once

// Synthetic pedestrian images. Every attribute value is drawn as a colour
// and texture inside its group's vertical region, restricted to a set of
// column lanes that is mirror-symmetric, so a horizontal flip keeps every
// group inside its own pixels.
//
// Rules are keyed by the attribute word: "plaid" looks the same whether it
// is worn on the upper or the lower body.
//
// Manifest: one JSON object per line,
//   {"image": "images/train_00000.ppm", "labels": {"Hair": ["long"], ...}}
// Image paths are relative to the manifest's directory.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "poar/catalog.hpp"
#include "poar/image.hpp"
#include "poar/loss.hpp"
#include "poar/rng.hpp"
#include "poar/vision_encoder.hpp"

namespace poar {

enum class Texture { solid, stripes, checker, dots };

inline const char* texture_name(Texture t) {
    switch (t) {
        case Texture::solid: return "solid";
        case Texture::stripes: return "stripes";
        case Texture::checker: return "checker";
        case Texture::dots: return "dots";
    }
    return "?";
}

using Color = std::array<double, 3>;

struct RenderRule {
    Color color{};
    Texture texture = Texture::solid;
    friend bool operator==(const RenderRule&, const RenderRule&) = default;
};

namespace palette {
inline constexpr Color black{0.05, 0.05, 0.05};
inline constexpr Color white{0.95, 0.95, 0.95};
inline constexpr Color gray{0.2, 0.2, 0.2};
inline constexpr Color red{0.9, 0.1, 0.1};
inline constexpr Color green{0.1, 0.75, 0.2};
inline constexpr Color blue{0.15, 0.25, 0.9};
inline constexpr Color yellow{0.95, 0.85, 0.1};
inline constexpr Color cyan{0.1, 0.85, 0.85};
inline constexpr Color magenta{0.85, 0.15, 0.8};
inline constexpr Color orange{0.95, 0.5, 0.05};
inline constexpr Color brown{0.5, 0.3, 0.1};
inline constexpr Color purple{0.45, 0.1, 0.7};
}  // namespace palette

inline const std::map<std::string, RenderRule>& default_render_rules() {
    using namespace palette;
    static const std::map<std::string, RenderRule> rules = {
        {"long", {black, Texture::solid}},        {"short", {white, Texture::checker}},
        {"bald", {brown, Texture::dots}},         {"male", {blue, Texture::solid}},
        {"female", {magenta, Texture::solid}},    {"child", {yellow, Texture::solid}},
        {"less15", {green, Texture::solid}},      {"less30", {cyan, Texture::stripes}},
        {"less45", {blue, Texture::checker}},     {"less60", {orange, Texture::dots}},
        {"larger60", {white, Texture::solid}},    {"backpack", {red, Texture::solid}},
        {"messengerbag", {green, Texture::checker}}, {"plasticbags", {yellow, Texture::stripes}},
        {"nothing", {gray, Texture::dots}},       {"sunglasses", {black, Texture::checker}},
        {"hat", {red, Texture::stripes}},         {"muffler", {purple, Texture::solid}},
        {"leathershoes", {brown, Texture::solid}}, {"sandals", {yellow, Texture::checker}},
        {"sneaker", {white, Texture::solid}},     {"shoes", {black, Texture::stripes}},
        {"casual", {cyan, Texture::solid}},       {"formal", {black, Texture::solid}},
        {"jacket", {brown, Texture::checker}},    {"jeans", {blue, Texture::solid}},
        {"plaid", {red, Texture::checker}},       {"stripe", {white, Texture::stripes}},
    };
    return rules;
}

// Fallback for words without a listed rule: colour and texture from a hash
// of the word.
inline RenderRule hashed_render_rule(std::string_view word) {
    static constexpr std::array<Color, 12> colors{palette::black,  palette::white,  palette::gray,    palette::red,
                                                  palette::green,  palette::blue,   palette::yellow,  palette::cyan,
                                                  palette::magenta, palette::orange, palette::brown, palette::purple};
    const std::uint64_t h = fnv1a64(word);
    return {colors[h % colors.size()], static_cast<Texture>((h / colors.size()) % 4)};
}

// Column lanes as fractions of the width; each is listed with its mirror.
struct Lane {
    double lo = 0.0;
    double hi = 1.0;
};

inline std::vector<Lane> default_lanes(std::string_view group_key) {
    if (group_key == "Gender") return {{0.0, 0.125}, {0.875, 1.0}};
    if (group_key == "Age") return {{0.125, 0.25}, {0.75, 0.875}};
    if (group_key == "Hair" || group_key == "Upperbody") return {{0.375, 0.625}};
    if (group_key == "Accessory" || group_key == "Carry") return {{0.25, 0.375}, {0.625, 0.75}};
    if (group_key == "Lowerbody" || group_key == "Foot") return {{0.25, 0.75}};
    return {{0.0, 1.0}};
}

struct SyntheticSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    AttributeCatalog catalog;
    RegionLayout layout;
    std::vector<std::vector<Lane>> lanes;  // per group
    std::map<std::string, RenderRule> rules;
    double noise = 0.05;
    double background = 0.5;
    std::uint64_t seed = 0;

    const RenderRule& rule(const std::string& word) const {
        auto it = rules.find(word);
        if (it == rules.end()) throw generation_error("no render rule for attribute '" + word + "'");
        return it->second;
    }

    void validate() const {
        if (layout.intervals.size() != catalog.group_count() || lanes.size() != catalog.group_count())
            throw validation_error("synthetic spec: region layout and lanes need one entry per group");
        for (std::size_t k = 0; k < catalog.group_count(); ++k) {
            std::set<std::pair<Color, Texture>> used;
            for (auto& a : catalog.group(k).attributes) {
                auto& r = rule(a);
                if (!used.insert({r.color, r.texture}).second)
                    throw validation_error("synthetic spec: two attributes of group '" + catalog.group(k).key +
                                           "' share colour and texture");
            }
        }
    }
};

// Default rules, lanes and regions for every word and group of `catalog`.
inline SyntheticSpec make_synthetic_spec(const AttributeCatalog& catalog, std::uint64_t seed, double noise = 0.05) {
    SyntheticSpec spec;
    spec.catalog = catalog;
    spec.layout = default_region_layout(catalog);
    spec.noise = noise;
    spec.seed = seed;
    for (auto& g : catalog.groups()) {
        spec.lanes.push_back(default_lanes(g.key));
        for (auto& a : g.attributes) {
            auto it = default_render_rules().find(a);
            spec.rules[a] = it != default_render_rules().end() ? it->second : hashed_render_rule(a);
        }
    }
    spec.validate();
    return spec;
}

// Texture intensity factor at pixel (y, x): 1 on the pattern, 0.35 off it.
inline double texture_factor(Texture t, std::size_t y, std::size_t x) {
    switch (t) {
        case Texture::solid: return 1.0;
        case Texture::stripes: return (y / 2) % 2 == 0 ? 1.0 : 0.35;
        case Texture::checker: return ((y / 2) + (x / 2)) % 2 == 0 ? 1.0 : 0.35;
        case Texture::dots: return (y % 4 == 1 || y % 4 == 2) && (x % 4 == 1 || x % 4 == 2) ? 1.0 : 0.35;
    }
    return 1.0;
}

// Groups are painted widest region first (catalog order among equals), so
// narrow regions stay on top where they overlap.
inline std::vector<std::size_t> paint_order(const RegionLayout& layout) {
    std::vector<std::size_t> order(layout.intervals.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        auto& ia = layout.intervals[a];
        auto& ib = layout.intervals[b];
        return ia.hi - ia.lo > ib.hi - ib.lo;
    });
    return order;
}

inline bool pixel_in(std::size_t i, std::size_t n, double lo, double hi) {
    const double c = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    return c >= lo && c < hi;
}

struct SampleRecord {
    std::string image;
    Labels labels;
    friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

// Renders one image for `labels` (values may be outside the catalog's lists
// as long as a rule exists). Several values in one group split its lanes'
// rows evenly.
inline Image generate_sample(const SyntheticSpec& spec, const Labels& labels, Rng& rng) {
    Image img(spec.height, spec.width, spec.background);
    for (std::size_t k : paint_order(spec.layout)) {
        auto it = labels.find(spec.catalog.group(k).key);
        if (it == labels.end() || it->second.empty()) continue;
        const auto& iv = spec.layout.intervals[k];
        std::vector<std::size_t> rows;
        for (std::size_t y = 0; y < spec.height; ++y)
            if (pixel_in(y, spec.height, iv.lo, iv.hi)) rows.push_back(y);
        const std::size_t parts = it->second.size();
        for (std::size_t p = 0; p < parts; ++p) {
            const RenderRule& rule = spec.rule(it->second[p]);
            for (std::size_t ri = rows.size() * p / parts; ri < rows.size() * (p + 1) / parts; ++ri) {
                const std::size_t y = rows[ri];
                for (std::size_t x = 0; x < spec.width; ++x) {
                    bool in = false;
                    for (auto& lane : spec.lanes[k]) in = in || pixel_in(x, spec.width, lane.lo, lane.hi);
                    if (!in) continue;
                    const double f = texture_factor(rule.texture, y, x);
                    for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = f * rule.color[c];
                }
            }
        }
    }
    if (spec.noise > 0)
        for (auto& v : img.pixels) v = std::clamp(v + rng.normal(0.0, spec.noise), 0.0, 1.0);
    return img;
}

// One value per group, uniform over `allowed[k]`.
inline Labels sample_labels(const AttributeCatalog& catalog, const std::vector<std::vector<std::string>>& allowed,
                            Rng& rng) {
    Labels labels;
    for (std::size_t k = 0; k < catalog.group_count(); ++k) {
        const auto& values = allowed[k];
        if (values.empty()) continue;
        labels[catalog.group(k).key] = {values[rng.below(values.size())]};
    }
    return labels;
}

struct GeneratedSplit {
    std::vector<SampleRecord> records;
    std::vector<Image> images;
};

// Train samples draw from seen values only; test samples from every value
// of the catalog, held-out ones included.
inline GeneratedSplit generate_split(const SyntheticSpec& spec, const CatalogSplit& split, std::size_t n,
                                     bool train, const std::string& prefix) {
    std::vector<std::vector<std::string>> allowed;
    for (std::size_t k = 0; k < spec.catalog.group_count(); ++k)
        allowed.push_back(train ? split.seen.group(k).attributes : spec.catalog.group(k).attributes);
    GeneratedSplit out;
    const std::uint64_t stream_base = train ? 0 : (1ull << 32);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(Rng::derive(spec.seed, stream_base + i));
        Labels labels = sample_labels(spec.catalog, allowed, rng);
        out.images.push_back(generate_sample(spec, labels, rng));
        char name[64];
        std::snprintf(name, sizeof name, "images/%s_%05zu.ppm", prefix.c_str(), i);
        out.records.push_back({name, std::move(labels)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
    double flip_probability = 0.5;
    double erase_probability = 0.25;
    double erase_min_area = 0.02;
    double erase_max_area = 0.20;
};

struct AugmentInfo {
    bool flipped = false;
    bool erased = false;
    std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
};

inline Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
    return out;
}

inline Image augment(const Image& img, Rng& rng, const AugmentOptions& opt = {}, AugmentInfo* info = nullptr) {
    AugmentInfo local;
    Image out = img;
    if (rng.bernoulli(opt.flip_probability)) {
        out = flip_horizontal(out);
        local.flipped = true;
    }
    if (rng.bernoulli(opt.erase_probability)) {
        const double total = static_cast<double>(img.height * img.width);
        const auto min_px = static_cast<std::size_t>(std::ceil(opt.erase_min_area * total));
        const auto max_px = static_cast<std::size_t>(std::floor(opt.erase_max_area * total));
        const double target = rng.uniform(opt.erase_min_area, opt.erase_max_area) * total;
        const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
        std::size_t h = std::clamp<std::size_t>(std::lround(std::sqrt(target * aspect)), 1, img.height);
        std::size_t w = std::clamp<std::size_t>(std::lround(target / static_cast<double>(h)), 1, img.width);
        while (h * w > max_px) (w > h ? w : h) -= 1;
        while (h * w < min_px) {
            if (w < img.width && (w <= h || h == img.height))
                ++w;
            else
                ++h;
        }
        local.erased = true;
        local.h = h;
        local.w = w;
        local.y0 = rng.below(img.height - h + 1);
        local.x0 = rng.below(img.width - w + 1);
        for (std::size_t y = local.y0; y < local.y0 + h; ++y)
            for (std::size_t x = local.x0; x < local.x0 + w; ++x)
                for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = rng.uniform();
    }
    if (info) *info = local;
    return out;
}

// ---------------------------------------------------------------------------
// Manifests

inline std::string record_to_json(const SampleRecord& r) {
    nlohmann::ordered_json j;
    j["image"] = r.image;
    nlohmann::ordered_json labels = nlohmann::ordered_json::object();
    for (auto& [k, v] : r.labels) labels[k] = v;
    j["labels"] = labels;
    return j.dump();
}

inline void write_manifest(const std::vector<SampleRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write manifest " + path);
    for (auto& r : records) out << record_to_json(r) << '\n';
}

// Parses a manifest. With a catalog, every group key must belong to it and
// every value must be one of the group's values.
inline std::vector<SampleRecord> parse_manifest(std::string_view text, const AttributeCatalog* catalog = nullptr) {
    std::vector<SampleRecord> records;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        SampleRecord r;
        try {
            auto j = nlohmann::json::parse(line);
            r.image = j.at("image").get<std::string>();
            for (auto& [k, v] : j.at("labels").items()) r.labels[k] = v.get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(std::string("manifest: ") + e.what(), lineno);
        }
        if (catalog) {
            for (auto& [k, values] : r.labels) {
                auto g = catalog->group_index(k);
                if (!g)
                    throw validation_error("manifest line " + std::to_string(lineno) + ": unknown group '" + k + "'");
                for (auto& v : values)
                    if (!catalog->group(*g).contains(v))
                        throw validation_error("manifest line " + std::to_string(lineno) + ": unknown attribute '" +
                                               k + ":" + v + "'");
            }
        }
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<SampleRecord> read_manifest(const std::string& path, const AttributeCatalog* catalog = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error("cannot open manifest " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), catalog);
}

// ---------------------------------------------------------------------------
// Dataset directory:
//   catalog.jsonl  full catalog
//   holdout.txt    held-out attribute ids, one per line
//   train.jsonl, test.jsonl, images/

struct DatasetPaths {
    std::filesystem::path root;
    std::filesystem::path catalog() const { return root / "catalog.jsonl"; }
    std::filesystem::path holdout() const { return root / "holdout.txt"; }
    std::filesystem::path train() const { return root / "train.jsonl"; }
    std::filesystem::path test() const { return root / "test.jsonl"; }
    std::filesystem::path images() const { return root / "images"; }
};

inline void write_holdout(const std::vector<std::string>& ids, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write " + path);
    for (auto& id : ids) out << id << '\n';
}

inline std::vector<std::string> read_holdout(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {};
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    return ids;
}

inline void generate_dataset(const SyntheticSpec& spec, const std::vector<std::string>& holdout,
                             std::size_t n_train, std::size_t n_test, const std::filesystem::path& root) {
    const CatalogSplit split = split_attributes(spec.catalog, holdout);
    DatasetPaths paths{root};
    std::filesystem::create_directories(paths.images());
    save_catalog(spec.catalog, paths.catalog().string());
    write_holdout(holdout, paths.holdout().string());
    for (bool train : {true, false}) {
        auto part = generate_split(spec, split, train ? n_train : n_test, train, train ? "train" : "test");
        for (std::size_t i = 0; i < part.images.size(); ++i)
            write_ppm(part.images[i], (root / part.records[i].image).string());
        write_manifest(part.records, (train ? paths.train() : paths.test()).string());
    }
}

struct Dataset {
    std::vector<SampleRecord> records;
    std::vector<Image> images;
};

inline Dataset load_dataset(const std::filesystem::path& manifest, const AttributeCatalog* catalog = nullptr) {
    Dataset d;
    d.records = read_manifest(manifest.string(), catalog);
    const auto dir = manifest.parent_path();
    for (auto& r : d.records) d.images.push_back(read_ppm((dir / r.image).string()));
    return d;
}

}  // namespace poar
