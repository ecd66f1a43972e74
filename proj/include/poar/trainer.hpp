#pragma once

// Training: config file parsing, SGD or AdamW updates, the epoch loop, and
// binary checkpoints.
//
// Config file: one `key = value` per line, `#` starts a comment. Unknown
// keys are rejected.
//
// Checkpoint layout (little-endian):
//   "POARCKPT" u32 version
//   u64 config digest, str config description
//   u64 catalog hash, u32 group count, str group key...
//   u64 step, u32 section count
//   per section: str name, u32 rank, u64 dim..., f64 value...
// where str is u32 byte length followed by the bytes.

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "poar/loss.hpp"
#include "poar/model.hpp"
#include "poar/synth.hpp"

namespace poar {

enum class LossKind { mtmc, otoc, both };
enum class OptimizerKind { sgd, adamw };

inline const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::mtmc: return "mtmc";
        case LossKind::otoc: return "otoc";
        case LossKind::both: return "both";
    }
    return "?";
}

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adamw"; }

struct TrainConfig {
    double learning_rate = 0.0;
    double weight_decay = 0.0;
    std::size_t epochs = 0;
    std::size_t batch_size = 0;
    std::uint64_t seed = 0;
    double temperature = 1.0;
    LossKind loss = LossKind::mtmc;
    OptimizerKind optimizer = OptimizerKind::sgd;
    bool augment = true;
    std::size_t eval_every = 0;  // epochs between test evaluations, 0 = never
    EncoderConfig encoder;

    std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        os << "learning_rate=" << learning_rate << ";weight_decay=" << weight_decay << ";epochs=" << epochs
           << ";batch_size=" << batch_size << ";seed=" << seed << ";temperature=" << temperature
           << ";loss=" << loss_name(loss) << ";optimizer=" << optimizer_name(optimizer) << ";augment=" << augment << ";eval_every=" << eval_every << ";"
           << encoder.describe();
        return os.str();
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        n = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size()) throw validation_error("'" + key + "' must be a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(n);
}

inline double parse_real(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(x))
        throw validation_error("'" + key + "' must be a finite number, got '" + v + "'");
    return x;
}

inline bool parse_flag(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw validation_error("'" + key + "' must be true or false, got '" + v + "'");
}

}  // namespace detail

// Sets one encoder field; false when `key` is not an encoder field.
inline bool set_encoder_field(EncoderConfig& c, const std::string& key, const std::string& v) {
    std::map<std::string, std::size_t*> counts = {
        {"image_height", &c.image_height},   {"image_width", &c.image_width},
        {"patch_size", &c.patch_size},       {"embed_dim", &c.embed_dim},
        {"groups", &c.groups},               {"vision_layers", &c.vision_layers},
        {"vision_heads", &c.vision_heads},   {"text_layers", &c.text_layers},
        {"text_heads", &c.text_heads},       {"text_length", &c.text_length},
        {"paragraph_length", &c.paragraph_length}, {"mlp_ratio", &c.mlp_ratio},
    };
    std::map<std::string, bool*> flags = {
        {"token_mask", &c.token_mask}, {"region_mask", &c.region_mask}, {"single_token", &c.single_token}};
    if (auto it = counts.find(key); it != counts.end()) {
        *it->second = detail::parse_count(key, v);
        return true;
    }
    if (auto it = flags.find(key); it != flags.end()) {
        *it->second = detail::parse_flag(key, v);
        return true;
    }
    return false;
}

// Inverse of EncoderConfig::describe().
inline EncoderConfig parse_encoder_description(std::string_view text) {
    EncoderConfig c;
    std::string item;
    std::istringstream in{std::string(text)};
    while (std::getline(in, item, ';')) {
        auto eq = item.find('=');
        if (eq == std::string::npos || !set_encoder_field(c, item.substr(0, eq), item.substr(eq + 1)))
            throw parse_error("bad encoder description item '" + item + "'");
    }
    return c;
}

inline TrainConfig parse_train_config(std::string_view text) {
    TrainConfig cfg;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = detail::trim(line);
        if (body.empty()) continue;
        auto eq = body.find('=');
        if (eq == std::string::npos) throw parse_error("config: expected 'key = value'", lineno);
        const std::string key = detail::trim(body.substr(0, eq));
        const std::string value = detail::trim(body.substr(eq + 1));
        if (!seen.insert(key).second) throw validation_error("config: key '" + key + "' given twice");
        try {
            if (key == "learning_rate")
                cfg.learning_rate = detail::parse_real(key, value);
            else if (key == "weight_decay")
                cfg.weight_decay = detail::parse_real(key, value);
            else if (key == "epochs")
                cfg.epochs = detail::parse_count(key, value);
            else if (key == "batch_size")
                cfg.batch_size = detail::parse_count(key, value);
            else if (key == "seed")
                cfg.seed = detail::parse_count(key, value);
            else if (key == "temperature")
                cfg.temperature = detail::parse_real(key, value);
            else if (key == "augment")
                cfg.augment = detail::parse_flag(key, value);
            else if (key == "eval_every")
                cfg.eval_every = detail::parse_count(key, value);
            else if (key == "optimizer") {
                if (value == "sgd")
                    cfg.optimizer = OptimizerKind::sgd;
                else if (value == "adamw")
                    cfg.optimizer = OptimizerKind::adamw;
                else
                    throw validation_error("'optimizer' must be sgd or adamw, got '" + value + "'");
            } else if (key == "loss") {
                if (value == "mtmc")
                    cfg.loss = LossKind::mtmc;
                else if (value == "otoc")
                    cfg.loss = LossKind::otoc;
                else if (value == "both")
                    cfg.loss = LossKind::both;
                else
                    throw validation_error("'loss' must be mtmc, otoc or both, got '" + value + "'");
            } else if (key == "groups" || !set_encoder_field(cfg.encoder, key, value))
                throw validation_error("unknown config key '" + key + "'");
        } catch (const validation_error& e) {
            throw validation_error(std::string("config line ") + std::to_string(lineno) + ": " + e.what());
        }
    }
    for (const char* required : {"learning_rate", "weight_decay", "epochs", "batch_size", "seed"})
        if (!seen.count(required)) throw validation_error(std::string("config: missing required key '") + required + "'");
    if (!(cfg.learning_rate > 0)) throw validation_error("config: learning_rate must be positive");
    if (cfg.weight_decay < 0) throw validation_error("config: weight_decay must be non-negative");
    if (cfg.batch_size == 0) throw validation_error("config: batch_size must be positive");
    if (!(cfg.temperature > 0)) throw validation_error("config: temperature must be positive");
    return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

template <class Real>
void check_gradients(const std::vector<Parameter<Real>*>& params) {
    for (auto* p : params)
        for (std::size_t i = 0; i < p->grad.size(); ++i)
            if (!std::isfinite(static_cast<double>(p->grad[i])))
                throw divergence_error("non-finite gradient in parameter '" + p->name + "' at index " +
                                       std::to_string(i));
}

// p ← p − lr·(g + wd·p)
template <class Real>
void sgd_step(const std::vector<Parameter<Real>*>& params, Real lr, Real wd) {
    check_gradients(params);
    for (auto* p : params) {
        auto v = p->value.data();
        auto g = p->grad.data();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (g[i] + wd * v[i]);
    }
}

// AdamW with decoupled decay:
//   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
//   p ← p − lr·( m/(1−β1ᵗ) / (√(v/(1−β2ᵗ)) + ε) + wd·p )
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void step(const std::vector<Parameter<double>*>& params, double lr, double wd) {
        check_gradients(params);
        if (m_.empty())
            for (auto* p : params) {
                m_.emplace_back(p->value.size(), 0.0);
                v_.emplace_back(p->value.size(), 0.0);
            }
        if (m_.size() != params.size()) throw usage_error("AdamW: parameter list changed between steps");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto val = params[k]->value.data();
            auto g = params[k]->grad.data();
            auto& m = m_[k];
            auto& v = v_[k];
            if (m.size() != val.size()) throw usage_error("AdamW: parameter size changed between steps");
            for (std::size_t i = 0; i < val.size(); ++i) {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                val[i] -= lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + eps) + wd * val[i]);
            }
        }
    }

    std::uint64_t steps() const { return t_; }

private:
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t t_ = 0;
};

// Applies the configured update rule.
class Optimizer {
public:
    explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(const std::vector<Parameter<double>*>& params) {
        if (cfg_.optimizer == OptimizerKind::sgd)
            sgd_step(params, cfg_.learning_rate, cfg_.weight_decay);
        else
            adam_.step(params, cfg_.learning_rate, cfg_.weight_decay);
    }

private:
    TrainConfig cfg_;
    AdamW adam_;
};

// ---------------------------------------------------------------------------

struct TrainBatch {
    std::span<const Image> images;
    std::vector<Labels> labels;
};

// Everything a step needs besides the batch.
struct TrainContext {
    const TrainConfig& config;
    const AttributeCatalog& seen;  // training catalog
    PromptIndex prompts;
    MaskSpec masks;

    TrainContext(const TrainConfig& c, const AttributeCatalog& catalog)
        : config(c), seen(catalog), prompts(catalog_prompts(catalog)),
          masks(build_mask(default_region_layout(catalog), c.encoder)) {}
};

// Builds the training loss for one batch on `tape`.
template <class Real>
Var<Real> batch_loss(Tape<Real>& tape, const PoarModel<Real>& model, const TrainContext& ctx, const TrainBatch& batch) {
    const EncoderConfig& enc = model.config();
    const Real tau = static_cast<Real>(ctx.config.temperature);
    Var<Real> tokens = model.encode_images(tape, batch.images, ctx.masks);
    std::optional<Var<Real>> loss;
    if (ctx.config.loss != LossKind::otoc) {
        Var<Real> text = model.encode_prompts(tape, ctx.prompts.prompts);
        auto pos = positive_mask(batch.labels, ctx.seen, ctx.prompts, enc);
        loss = loss_total(similarity_matrix(tokens, text), pos, tau);
    }
    if (ctx.config.loss != LossKind::mtmc) {
        auto pb = paragraph_batch(batch.labels, ctx.seen);
        Var<Real> text = model.encode_sentences(tape, pb.paragraphs, enc.paragraph_length);
        auto term = otoc_loss(tokens, enc.token_count(), text, pb.positives(), tau);
        loss = loss ? add(*loss, term) : term;
    }
    return *loss;
}

// One update; returns the loss before it.
inline double train_step(PoarModel<double>& model, const TrainContext& ctx, const TrainBatch& batch,
                         Optimizer& optimizer) {
    Tape<double> tape;
    Var<double> loss;
    try {
        loss = batch_loss(tape, model, ctx, batch);
    } catch (const numeric_error& e) {
        throw divergence_error(std::string("forward pass: ") + e.what());
    }
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw divergence_error("loss is not finite");
    model.parameters().zero_grad();
    tape.backward(loss);
    optimizer.step(model.parameters().all());
    return value;
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    std::uint64_t step = 0;
    double mean_loss = 0;
    std::size_t batches = 0;
};

using EpochHook = std::function<void(const EpochLog&, PoarModel<double>&)>;

// Runs cfg.epochs epochs over `data` (labels restricted to the seen
// catalog). The model must have been built with cfg.encoder. Order and
// augmentation draws depend only on cfg.seed and the epoch.
inline std::uint64_t train(PoarModel<double>& model, const TrainConfig& cfg, const AttributeCatalog& seen,
                           const Dataset& data, const EpochHook& on_epoch = {}, std::uint64_t step = 0) {
    if (data.records.empty()) throw validation_error("training set is empty");
    if (data.images.size() != data.records.size()) throw validation_error("dataset images and records differ");
    TrainContext ctx(cfg, seen);
    Optimizer optimizer(cfg);
    std::vector<std::size_t> order(data.records.size());
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(Rng::derive(cfg.seed, 0x7000'0000ull + epoch));
        rng.shuffle(order.begin(), order.end());
        EpochLog log{epoch, step, 0.0, 0};
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Image> images;
            TrainBatch batch;
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t idx = order[i];
                images.push_back(cfg.augment ? augment(data.images[idx], rng) : data.images[idx]);
                batch.labels.push_back(data.records[idx].labels);
            }
            batch.images = images;
            log.mean_loss += train_step(model, ctx, batch, optimizer);
            ++log.batches;
            ++step;
        }
        log.mean_loss /= static_cast<double>(log.batches);
        log.step = step;
        if (on_epoch) on_epoch(log, model);
    }
    return step;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    EncoderConfig config;
    std::uint64_t catalog_hash = 0;
    std::vector<std::string> group_keys;
    std::uint64_t step = 0;
    ParameterStore<double> parameters;
};

inline std::uint64_t config_digest(const EncoderConfig& c) { return fnv1a64(c.describe()); }

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes.append(s);
    }
    std::string bytes;

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
};

class ByteReader {
public:
    explicit ByteReader(std::string_view b) : bytes_(b) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(get(8)); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(bytes_.substr(at_, n));
        at_ += n;
        return s;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(bytes_.substr(at_, n));
        at_ += n;
        return s;
    }
    bool done() const { return at_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - at_ < n) throw parse_error("checkpoint is truncated");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[at_ + i])) << (8 * i);
        at_ += static_cast<std::size_t>(n);
        return v;
    }
    std::string_view bytes_;
    std::size_t at_ = 0;
};

inline constexpr std::string_view checkpoint_magic = "POARCKPT";
inline constexpr std::uint32_t checkpoint_version = 1;

}  // namespace detail

inline std::string serialize_checkpoint(const EncoderConfig& config, const AttributeCatalog& catalog,
                                        std::uint64_t step, const ParameterStore<double>& params) {
    detail::ByteWriter w;
    w.bytes.append(detail::checkpoint_magic);
    w.u32(detail::checkpoint_version);
    w.u64(config_digest(config));
    w.str(config.describe());
    w.u64(catalog.hash());
    w.u32(static_cast<std::uint32_t>(catalog.group_count()));
    for (auto& g : catalog.groups()) w.str(g.key);
    w.u64(step);
    auto all = params.all();
    w.u32(static_cast<std::uint32_t>(all.size()));
    for (auto* p : all) {
        w.str(p->name);
        w.u32(static_cast<std::uint32_t>(p->value.shape().size()));
        for (auto d : p->value.shape()) w.u64(d);
        for (double v : p->value.storage()) w.f64(v);
    }
    return std::move(w.bytes);
}

// Writes to a temporary file first, so an interrupted save never replaces
// a good checkpoint with a partial one.
inline void save_checkpoint(const std::string& path, const EncoderConfig& config, const AttributeCatalog& catalog,
                            std::uint64_t step, const ParameterStore<double>& params) {
    const std::string bytes = serialize_checkpoint(config, catalog, step, params);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw error("cannot write checkpoint " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw error("cannot write checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (r.raw(detail::checkpoint_magic.size()) != detail::checkpoint_magic) throw parse_error("not a checkpoint file");
    if (r.u32() != detail::checkpoint_version) throw compatibility_error("unsupported checkpoint version");
    Checkpoint ck;
    const std::uint64_t digest = r.u64();
    ck.config = parse_encoder_description(r.str());
    if (config_digest(ck.config) != digest) throw parse_error("checkpoint config digest does not match its config");
    ck.catalog_hash = r.u64();
    const std::uint32_t groups = r.u32();
    for (std::uint32_t i = 0; i < groups; ++i) ck.group_keys.push_back(r.str());
    ck.step = r.u64();
    const std::uint32_t sections = r.u32();
    for (std::uint32_t s = 0; s < sections; ++s) {
        std::string name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 4) throw parse_error("checkpoint section '" + name + "' has bad rank");
        Shape shape;
        std::size_t count = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape.push_back(static_cast<std::size_t>(r.u64()));
            if (shape.back() == 0 || shape.back() > (std::size_t{1} << 32))
                throw parse_error("checkpoint section '" + name + "' has bad shape");
            count *= shape.back();
        }
        if (count > bytes.size() / 8) throw parse_error("checkpoint is truncated");
        Tensor t(shape);
        for (auto& v : t.storage()) v = r.f64();
        ck.parameters.add(std::move(name), std::move(t));
    }
    if (!r.done()) throw parse_error("trailing bytes after checkpoint");
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

// Refuses a checkpoint trained against another catalog.
inline void check_catalog(const Checkpoint& ck, const AttributeCatalog& catalog) {
    if (ck.catalog_hash != catalog.hash())
        throw compatibility_error("checkpoint was trained with a different catalog (hash mismatch)");
}

inline PoarModel<double> model_from_checkpoint(Checkpoint&& ck) {
    return PoarModel<double>(ck.config, std::move(ck.parameters));
}

}  // namespace poar
