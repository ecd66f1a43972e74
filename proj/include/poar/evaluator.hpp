#pragma once

// Retrieval evaluation. Each image's group token is compared with the
// prompts of that group's candidate values (image→text), each prompt with
// the same-group token of every test image (text→image), and top-1 picks
// per group give binary predictions for mA and F1.
//
// Ties are broken by candidate order (catalog order for prompts, manifest
// order for images), so results are exact and repeatable.

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "poar/loss.hpp"
#include "poar/model.hpp"
#include "poar/synth.hpp"

namespace poar {

// Scores of one group: rows are images, columns candidates. `truth[i]`
// lists the true candidate columns of image i; empty means the image is not
// annotated for this group.
struct GroupScores {
    std::string group;
    std::vector<std::string> candidates;
    Tensor scores;
    std::vector<std::vector<std::size_t>> truth;
};

// 0-based rank of column c in row r: better scores first, equal scores in
// column order.
inline std::size_t rank_in_row(std::span<const double> row, std::size_t c) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] > row[c] || (row[j] == row[c] && j < c)) ++rank;
    return rank;
}

struct RecallResult {
    std::vector<std::optional<double>> per_group;  // nullopt: no annotated pairs
    std::vector<std::size_t> pairs;
    std::optional<double> overall;
    std::size_t total_pairs = 0;
};

// Image→text R@K. A pair (image, group) is a hit when any true candidate
// ranks in the top K. `include(i, g)` can drop pairs (seen/unseen splits).
template <class Filter>
RecallResult recall_i2t(const std::vector<GroupScores>& groups, std::size_t k, Filter include) {
    if (k == 0) throw validation_error("recall_i2t: K must be positive");
    RecallResult out;
    std::size_t hits_all = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& gs = groups[g];
        std::size_t hits = 0, pairs = 0;
        for (std::size_t i = 0; i < gs.truth.size(); ++i) {
            if (gs.truth[i].empty() || !include(i, g)) continue;
            ++pairs;
            std::size_t best = std::numeric_limits<std::size_t>::max();
            for (std::size_t c : gs.truth[i]) best = std::min(best, rank_in_row(gs.scores.row(i), c));
            hits += best < std::min(k, gs.candidates.size()) ? 1 : 0;
        }
        out.pairs.push_back(pairs);
        out.per_group.push_back(pairs ? std::optional<double>(100.0 * hits / pairs) : std::nullopt);
        hits_all += hits;
        out.total_pairs += pairs;
    }
    if (out.total_pairs) out.overall = 100.0 * hits_all / out.total_pairs;
    return out;
}

inline RecallResult recall_i2t(const std::vector<GroupScores>& groups, std::size_t k) {
    return recall_i2t(groups, k, [](std::size_t, std::size_t) { return true; });
}

struct TextRecall {
    std::optional<double> value;
    std::size_t queries = 0;
    std::vector<std::string> excluded;  // "Group:value" prompts with no positive image
};

// Text→image R@K: every candidate prompt of every group is a query over all
// images, scored with the images' same-group token.
inline TextRecall recall_t2i(const std::vector<GroupScores>& groups, std::size_t k) {
    if (k == 0) throw validation_error("recall_t2i: K must be positive");
    TextRecall out;
    std::size_t hits = 0;
    for (auto& gs : groups) {
        const std::size_t n = gs.truth.size();
        std::vector<double> column(n);
        for (std::size_t c = 0; c < gs.candidates.size(); ++c) {
            std::vector<std::size_t> positives;
            for (std::size_t i = 0; i < n; ++i) {
                column[i] = gs.scores(i, c);
                if (std::find(gs.truth[i].begin(), gs.truth[i].end(), c) != gs.truth[i].end()) positives.push_back(i);
            }
            if (positives.empty()) {
                out.excluded.push_back(gs.group + ":" + gs.candidates[c]);
                continue;
            }
            ++out.queries;
            std::size_t best = n;
            for (std::size_t i : positives) best = std::min(best, rank_in_row(column, i));
            hits += best < k ? 1 : 0;
        }
    }
    if (out.queries) out.value = 100.0 * hits / out.queries;
    return out;
}

// ---------------------------------------------------------------------------
// Binary predictions: rows images, columns attributes; 1 positive,
// 0 negative, -1 not annotated (skipped by both metrics).

using BinaryTable = std::vector<std::vector<int>>;

struct MeanAccuracy {
    std::optional<double> value;
    std::size_t counted = 0;
    std::vector<std::size_t> excluded;  // attribute columns with no positives or no negatives
};

// mA = 100/(2M') Σ_a (TP_a/P_a + TN_a/N_a) over attributes with P_a>0, N_a>0.
inline MeanAccuracy compute_mA(const BinaryTable& pred, const BinaryTable& truth) {
    if (pred.size() != truth.size()) throw shape_error("compute_mA: prediction and truth row counts differ");
    MeanAccuracy out;
    const std::size_t m = truth.empty() ? 0 : truth.front().size();
    double total = 0;
    for (std::size_t a = 0; a < m; ++a) {
        std::size_t p = 0, n = 0, tp = 0, tn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (truth[i].size() != m || pred[i].size() != m) throw shape_error("compute_mA: ragged table");
            if (truth[i][a] < 0) continue;
            if (truth[i][a] > 0) {
                ++p;
                tp += pred[i][a] > 0;
            } else {
                ++n;
                tn += pred[i][a] <= 0;
            }
        }
        if (p == 0 || n == 0) {
            out.excluded.push_back(a);
            continue;
        }
        total += static_cast<double>(tp) / p + static_cast<double>(tn) / n;
        ++out.counted;
    }
    if (out.counted) out.value = 100.0 * total / (2.0 * out.counted);
    return out;
}

// Instance F1: per image 2PR/(P+R) over predicted and true positive sets;
// an image with both sets empty scores 1.
inline std::optional<double> compute_F1(const BinaryTable& pred, const BinaryTable& truth) {
    if (pred.size() != truth.size()) throw shape_error("compute_F1: prediction and truth row counts differ");
    if (truth.empty()) return std::nullopt;
    double total = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (pred[i].size() != truth[i].size()) throw shape_error("compute_F1: ragged table");
        std::size_t predicted = 0, actual = 0, both = 0;
        for (std::size_t a = 0; a < truth[i].size(); ++a) {
            if (truth[i][a] < 0) continue;
            const bool p = pred[i][a] > 0, t = truth[i][a] > 0;
            predicted += p;
            actual += t;
            both += p && t;
        }
        if (predicted == 0 && actual == 0)
            total += 1.0;
        else if (both > 0)
            total += 2.0 * both / static_cast<double>(predicted + actual);
    }
    return 100.0 * total / truth.size();
}

// Top-1 (or every candidate at or above `threshold`) per annotated group,
// laid out with one column per (group, candidate) in group order.
inline void materialize_predictions(const std::vector<GroupScores>& groups, std::optional<double> threshold,
                                    BinaryTable& pred, BinaryTable& truth) {
    const std::size_t n = groups.empty() ? 0 : groups.front().truth.size();
    pred.assign(n, {});
    truth.assign(n, {});
    for (auto& gs : groups) {
        for (std::size_t i = 0; i < n; ++i) {
            const bool annotated = !gs.truth[i].empty();
            auto row = gs.scores.row(i);
            for (std::size_t c = 0; c < gs.candidates.size(); ++c) {
                if (!annotated) {
                    pred[i].push_back(-1);
                    truth[i].push_back(-1);
                    continue;
                }
                const bool positive = threshold ? row[c] >= *threshold : rank_in_row(row, c) == 0;
                pred[i].push_back(positive ? 1 : 0);
                truth[i].push_back(std::find(gs.truth[i].begin(), gs.truth[i].end(), c) != gs.truth[i].end());
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Model-driven evaluation

enum class EvalMode { i2t, t2i, open };

struct EvalOptions {
    EvalMode mode = EvalMode::i2t;
    bool all_prompts = false;  // rank a group token against every prompt, not just its group's
    std::optional<double> threshold;
    std::size_t threads = 0;  // 0: POAR_THREADS or hardware concurrency
};

inline std::size_t eval_threads(std::size_t requested) {
    std::size_t n = requested;
    if (n == 0) {
        n = std::max(1u, std::thread::hardware_concurrency());
        if (const char* env = std::getenv("POAR_THREADS")) {
            char* end = nullptr;
            const long v = std::strtol(env, &end, 10);
            if (end != env && *end == '\0' && v > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
        }
    }
    return std::max<std::size_t>(1, n);
}

inline RegionLayout region_layout_for_keys(const std::vector<std::string>& keys) {
    RegionLayout layout;
    for (auto& k : keys) layout.intervals.push_back(default_region(k));
    return layout;
}

// Token embeddings of every image, L2-normalized, [N·K × D]. Images are
// encoded in fixed chunks, so the result does not depend on thread count.
inline Tensor encode_image_tokens(const PoarModel<double>& model, const std::vector<std::string>& model_keys,
                                  const std::vector<Image>& images, std::size_t threads) {
    const auto& enc = model.config();
    const MaskSpec masks = build_mask(region_layout_for_keys(model_keys), enc);
    const std::size_t k = enc.token_count(), d = enc.embed_dim, chunk = 16;
    Tensor out = Tensor::matrix(std::max<std::size_t>(1, images.size() * k), d);
    if (images.empty()) return out;
    const std::size_t chunks = (images.size() + chunk - 1) / chunk;
    auto work = [&](std::size_t first) {
        for (std::size_t c = first; c < chunks; c += threads) {
            const std::size_t b = c * chunk, e = std::min(images.size(), b + chunk);
            Tape<double> tape(false);
            auto z = l2_normalize_rows(model.encode_images(tape, std::span(images).subspan(b, e - b), masks));
            std::copy(z.value().storage().begin(), z.value().storage().end(), out.storage().begin() + b * k * d);
        }
    };
    threads = std::min(threads, chunks);
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(work, t);
    work(0);
    for (auto& t : pool) t.join();
    return out;
}

inline Tensor encode_sentences_normalized(const PoarModel<double>& model, const std::vector<std::string>& sentences) {
    Tape<double> tape(false);
    return l2_normalize_rows(model.encode_sentences(tape, sentences, model.config().text_length)).value();
}

struct GroupReport {
    std::string group;
    std::size_t candidates = 0;
    std::size_t unseen_candidates = 0;
    std::size_t pairs = 0;
    std::optional<double> r1, r2;
    std::size_t seen_pairs = 0, unseen_pairs = 0;
    std::optional<double> seen_r1, seen_r2, unseen_r1, unseen_r2;
};

struct MetricsReport {
    std::string mode;
    std::size_t images = 0;
    std::optional<double> r1, r2;
    std::optional<double> t2i_r1, t2i_r5, t2i_r10;
    std::size_t t2i_queries = 0;
    std::vector<std::string> t2i_excluded;
    std::optional<double> mA, F1;
    std::size_t mA_attributes = 0;
    std::size_t seen_pairs = 0, unseen_pairs = 0;
    std::optional<double> seen_r1, seen_r2, unseen_r1, unseen_r2;
    std::vector<GroupReport> groups;
    std::vector<std::string> skipped_groups;
    std::size_t skipped_pairs = 0;  // true value absent from the candidate set

    // True when a metric that has data came out NaN.
    bool has_nan() const {
        auto bad = [](const std::optional<double>& v) { return v && std::isnan(*v); };
        for (auto* v : {&r1, &r2, &t2i_r1, &t2i_r5, &t2i_r10, &mA, &F1, &seen_r1, &seen_r2, &unseen_r1, &unseen_r2})
            if (bad(*v)) return true;
        return false;
    }
};

struct EvalInputs {
    const PoarModel<double>& model;
    std::vector<std::string> model_keys;  // group key of each model token, training order
    const AttributeCatalog& catalog;      // catalog of the evaluated data, held-out values included
    std::vector<std::string> holdout;     // held-out attribute ids
    const Dataset& data;
};

// Scores for every catalog group that maps onto a model token by key;
// unmapped groups land in `skipped`. Open mode adds held-out values to the
// candidate sets; the closed modes use seen values only.
inline std::vector<GroupScores> score_groups(const EvalInputs& in, const EvalOptions& opt, const Tensor& tokens,
                                             std::vector<std::string>& skipped, std::vector<std::size_t>& group_ids,
                                             std::size_t& skipped_pairs) {
    const auto split = split_attributes(in.catalog, in.holdout);
    const auto& enc = in.model.config();
    const std::size_t k = enc.token_count();
    std::vector<std::size_t> token_of_group;
    for (std::size_t g = 0; g < in.catalog.group_count(); ++g) {
        auto it = std::find(in.model_keys.begin(), in.model_keys.end(), in.catalog.group(g).key);
        if (it == in.model_keys.end()) {
            skipped.push_back(in.catalog.group(g).key);
            continue;
        }
        group_ids.push_back(g);
        token_of_group.push_back(enc.token_for_group(static_cast<std::size_t>(it - in.model_keys.begin())));
    }
    // Candidate lists and prompt sentences.
    std::vector<std::vector<AttributeRef>> cands(group_ids.size());
    std::vector<std::string> sentences;
    std::vector<AttributeRef> all_refs;
    for (std::size_t gi = 0; gi < group_ids.size(); ++gi) {
        const std::size_t g = group_ids[gi];
        auto values = opt.mode == EvalMode::open ? in.catalog.group(g).attributes : split.seen.group(g).attributes;
        for (auto& v : values) {
            cands[gi].push_back({g, v});
            all_refs.push_back({g, v});
            sentences.push_back(render_prompt(in.catalog.group(g), v).sentence);
        }
    }
    const Tensor prompts = sentences.empty() ? Tensor::matrix(1, enc.embed_dim) : encode_sentences_normalized(in.model, sentences);
    std::vector<std::size_t> offset(group_ids.size() + 1, 0);
    for (std::size_t gi = 0; gi < group_ids.size(); ++gi) offset[gi + 1] = offset[gi] + cands[gi].size();

    const std::size_t n = in.data.records.size(), d = enc.embed_dim;
    std::vector<GroupScores> out;
    for (std::size_t gi = 0; gi < group_ids.size(); ++gi) {
        const std::size_t g = group_ids[gi];
        GroupScores gs;
        gs.group = in.catalog.group(g).key;
        const std::size_t first = opt.all_prompts ? 0 : offset[gi];
        const std::size_t last = opt.all_prompts ? all_refs.size() : offset[gi + 1];
        for (std::size_t j = first; j < last; ++j)
            gs.candidates.push_back(opt.all_prompts ? in.catalog.id(all_refs[j]) : all_refs[j].value);
        gs.scores = Tensor::matrix(std::max<std::size_t>(1, n), std::max<std::size_t>(1, last - first));
        gs.truth.assign(n, {});
        for (std::size_t i = 0; i < n; ++i) {
            auto tok = tokens.row(i * k + token_of_group[gi]);
            for (std::size_t j = first; j < last; ++j) {
                double s = 0;
                auto p = prompts.row(j);
                for (std::size_t t = 0; t < d; ++t) s += tok[t] * p[t];
                gs.scores(i, j - first) = s;
            }
            auto it = in.data.records[i].labels.find(gs.group);
            if (it == in.data.records[i].labels.end()) continue;
            for (auto& v : it->second) {
                bool found = false;
                for (std::size_t j = first; j < last; ++j)
                    if (all_refs[j] == AttributeRef{g, v}) {
                        gs.truth[i].push_back(j - first);
                        found = true;
                    }
                if (!found) ++skipped_pairs;
            }
        }
        out.push_back(std::move(gs));
    }
    return out;
}

inline MetricsReport evaluate(const EvalInputs& in, const EvalOptions& opt = {}) {
    MetricsReport rep;
    rep.mode = opt.mode == EvalMode::i2t ? "i2t" : opt.mode == EvalMode::t2i ? "t2i" : "open";
    rep.images = in.data.records.size();
    const Tensor tokens = encode_image_tokens(in.model, in.model_keys, in.data.images, eval_threads(opt.threads));
    std::vector<std::size_t> group_ids;
    auto groups = score_groups(in, opt, tokens, rep.skipped_groups, group_ids, rep.skipped_pairs);

    const auto split = split_attributes(in.catalog, in.holdout);
    std::set<AttributeRef> unseen(split.unseen.begin(), split.unseen.end());
    // A pair counts as unseen when any of its true values is held out.
    auto pair_unseen = [&](std::size_t i, std::size_t gi) {
        auto it = in.data.records[i].labels.find(groups[gi].group);
        if (it == in.data.records[i].labels.end()) return false;
        for (auto& v : it->second)
            if (unseen.count({group_ids[gi], v})) return true;
        return false;
    };

    auto r1 = recall_i2t(groups, 1), r2 = recall_i2t(groups, 2);
    rep.r1 = r1.overall;
    rep.r2 = r2.overall;
    auto s1 = recall_i2t(groups, 1, [&](std::size_t i, std::size_t g) { return !pair_unseen(i, g); });
    auto s2 = recall_i2t(groups, 2, [&](std::size_t i, std::size_t g) { return !pair_unseen(i, g); });
    auto u1 = recall_i2t(groups, 1, pair_unseen);
    auto u2 = recall_i2t(groups, 2, pair_unseen);
    rep.seen_pairs = s1.total_pairs;
    rep.unseen_pairs = u1.total_pairs;
    rep.seen_r1 = s1.overall;
    rep.seen_r2 = s2.overall;
    rep.unseen_r1 = u1.overall;
    rep.unseen_r2 = u2.overall;

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        GroupReport g;
        g.group = groups[gi].group;
        g.candidates = groups[gi].candidates.size();
        g.unseen_candidates = opt.mode == EvalMode::open ? split.unseen_in_group(group_ids[gi]).size() : 0;
        g.pairs = r1.pairs[gi];
        g.r1 = r1.per_group[gi];
        g.r2 = r2.per_group[gi];
        g.seen_pairs = s1.pairs[gi];
        g.unseen_pairs = u1.pairs[gi];
        g.seen_r1 = s1.per_group[gi];
        g.seen_r2 = s2.per_group[gi];
        g.unseen_r1 = u1.per_group[gi];
        g.unseen_r2 = u2.per_group[gi];
        rep.groups.push_back(std::move(g));
    }

    auto t1 = recall_t2i(groups, 1);
    rep.t2i_r1 = t1.value;
    rep.t2i_r5 = recall_t2i(groups, 5).value;
    rep.t2i_r10 = recall_t2i(groups, 10).value;
    rep.t2i_queries = t1.queries;
    rep.t2i_excluded = t1.excluded;

    if (!opt.all_prompts) {
        BinaryTable pred, truth;
        materialize_predictions(groups, opt.threshold, pred, truth);
        auto ma = compute_mA(pred, truth);
        rep.mA = ma.value;
        rep.mA_attributes = ma.counted;
        rep.F1 = compute_F1(pred, truth);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Report files

inline nlohmann::ordered_json metric_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline std::string report_json(const MetricsReport& r) {
    using json = nlohmann::ordered_json;
    json j;
    j["mode"] = r.mode;
    j["images"] = r.images;
    j["overall"] = {{"R@1", metric_json(r.r1)}, {"R@2", metric_json(r.r2)},
                    {"mA", metric_json(r.mA)},  {"F1", metric_json(r.F1)},
                    {"mA_attributes", r.mA_attributes}};
    j["text_to_image"] = {{"R@1", metric_json(r.t2i_r1)},
                          {"R@5", metric_json(r.t2i_r5)},
                          {"R@10", metric_json(r.t2i_r10)},
                          {"queries", r.t2i_queries},
                          {"excluded", r.t2i_excluded}};
    j["seen"] = {{"pairs", r.seen_pairs}, {"R@1", metric_json(r.seen_r1)}, {"R@2", metric_json(r.seen_r2)}};
    j["unseen"] = {{"pairs", r.unseen_pairs}, {"R@1", metric_json(r.unseen_r1)}, {"R@2", metric_json(r.unseen_r2)}};
    json groups = json::array();
    for (auto& g : r.groups)
        groups.push_back({{"group", g.group},
                          {"candidates", g.candidates},
                          {"unseen_candidates", g.unseen_candidates},
                          {"pairs", g.pairs},
                          {"R@1", metric_json(g.r1)},
                          {"R@2", metric_json(g.r2)},
                          {"seen_pairs", g.seen_pairs},
                          {"seen_R@1", metric_json(g.seen_r1)},
                          {"seen_R@2", metric_json(g.seen_r2)},
                          {"unseen_pairs", g.unseen_pairs},
                          {"unseen_R@1", metric_json(g.unseen_r1)},
                          {"unseen_R@2", metric_json(g.unseen_r2)}});
    j["groups"] = groups;
    j["skipped_groups"] = r.skipped_groups;
    j["skipped_pairs"] = r.skipped_pairs;
    return j.dump(2) + "\n";
}

inline std::string format_metric(const std::optional<double>& v) {
    if (!v) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return buf;
}

// One row per group plus an "all" row; columns suit bar plots of seen vs.
// unseen R@1.
inline std::string report_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "group,pairs,R@1,R@2,seen_pairs,seen_R@1,seen_R@2,unseen_pairs,unseen_R@1,unseen_R@2\n";
    for (auto& g : r.groups)
        os << g.group << ',' << g.pairs << ',' << format_metric(g.r1) << ',' << format_metric(g.r2) << ','
           << g.seen_pairs << ',' << format_metric(g.seen_r1) << ',' << format_metric(g.seen_r2) << ','
           << g.unseen_pairs << ',' << format_metric(g.unseen_r1) << ',' << format_metric(g.unseen_r2) << '\n';
    std::size_t pairs = 0;
    for (auto& g : r.groups) pairs += g.pairs;
    os << "all," << pairs << ',' << format_metric(r.r1) << ',' << format_metric(r.r2) << ',' << r.seen_pairs << ','
       << format_metric(r.seen_r1) << ',' << format_metric(r.seen_r2) << ',' << r.unseen_pairs << ','
       << format_metric(r.unseen_r1) << ',' << format_metric(r.unseen_r2) << '\n';
    return os.str();
}

inline std::string report_table(const MetricsReport& r) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %6s %8s %8s %10s %10s\n", "group", "pairs", "R@1", "R@2", "seen R@1",
                  "unseen R@1");
    os << line;
    auto cell = [](const std::optional<double>& v) { return v ? format_metric(v) : std::string("-"); };
    for (auto& g : r.groups) {
        std::snprintf(line, sizeof line, "%-12s %6zu %8s %8s %10s %10s\n", g.group.c_str(), g.pairs,
                      cell(g.r1).c_str(), cell(g.r2).c_str(), cell(g.seen_r1).c_str(), cell(g.unseen_r1).c_str());
        os << line;
    }
    std::snprintf(line, sizeof line, "%-12s %6s %8s %8s %10s %10s\n", "all", "", cell(r.r1).c_str(),
                  cell(r.r2).c_str(), cell(r.seen_r1).c_str(), cell(r.unseen_r1).c_str());
    os << line;
    os << "text->image R@1/5/10: " << cell(r.t2i_r1) << " / " << cell(r.t2i_r5) << " / " << cell(r.t2i_r10)
       << "   mA: " << cell(r.mA) << "   F1: " << cell(r.F1) << '\n';
    return os.str();
}

}  // namespace poar
