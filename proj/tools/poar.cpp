// poar: generate synthetic data, train, evaluate, export attention maps and
// check gradients.
//
// Exit codes: 0 ok, 1 other error, 2 invalid input, 3 divergence or
// non-finite result, 4 incompatible checkpoint, 5 gradient check failed.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "poar/poar.hpp"

namespace fs = std::filesystem;
using namespace poar;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* tool_version = "1.0.0";

enum Exit { ok = 0, failure = 1, invalid = 2, diverged = 3, incompatible = 4, gradcheck_failed = 5 };

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write " + path.string());
    out << text;
}

void write_run_manifest(const fs::path& path, const std::string& subcommand, const ojson& args,
                        const ojson& resolved) {
    ojson j;
    j["tool"] = "poar";
    j["version"] = tool_version;
    j["subcommand"] = subcommand;
    j["args"] = args;
    j["resolved"] = resolved;
    write_text(path, j.dump(2) + "\n");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (auto t = detail::trim(item); !t.empty()) out.push_back(t);
    return out;
}

AttributeCatalog catalog_or_desk(const std::string& path) { return path.empty() ? desk_catalog() : load_catalog(path); }

// ---------------------------------------------------------------------------

struct GenArgs {
    std::string out, holdout, catalog;
    std::size_t n = 0, n_test = 0;
    bool n_test_set = false;
    std::uint64_t seed = 0;
    double noise = 0.05;
};

int cmd_gen_data(const GenArgs& a) {
    const AttributeCatalog catalog = catalog_or_desk(a.catalog);
    const auto holdout = split_list(a.holdout);
    split_attributes(catalog, holdout);
    const std::size_t n_test = a.n_test_set ? a.n_test : a.n / 4;
    const SyntheticSpec spec = make_synthetic_spec(catalog, a.seed, a.noise);
    generate_dataset(spec, holdout, a.n, n_test, a.out);
    ojson args{{"out", a.out}, {"n", a.n}, {"n_test", n_test}, {"seed", a.seed}, {"holdout", holdout},
               {"catalog", a.catalog.empty() ? "desk" : a.catalog}, {"noise", a.noise}};
    ojson resolved{{"catalog_hash", catalog.hash()}, {"train_records", a.n}, {"test_records", n_test}};
    write_run_manifest(fs::path(a.out) / "run_manifest.json", "gen-data", args, resolved);
    std::printf("wrote %zu train and %zu test samples to %s\n", a.n, n_test, a.out.c_str());
    return ok;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, config, out;
};

ojson metrics_line(const MetricsReport& r) {
    return ojson{{"R@1", metric_json(r.r1)}, {"R@2", metric_json(r.r2)}, {"mA", metric_json(r.mA)}};
}

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg = load_train_config(a.config);
    DatasetPaths paths{a.data};
    const AttributeCatalog catalog = load_catalog(paths.catalog().string());
    const auto holdout = read_holdout(paths.holdout().string());
    const CatalogSplit split = split_attributes(catalog, holdout);
    cfg.encoder.groups = catalog.group_count();
    cfg.encoder.validate();
    const Dataset train_set = load_dataset(paths.train(), &split.seen);
    std::optional<Dataset> test_set;
    if (cfg.eval_every) test_set = load_dataset(paths.test(), &catalog);
    std::vector<std::string> keys;
    for (auto& g : catalog.groups()) keys.push_back(g.key);

    PoarModel<double> model(cfg.encoder, cfg.seed);
    write_run_manifest(a.out + ".run.json", "train", ojson{{"data", a.data}, {"config", a.config}, {"out", a.out}},
                       ojson{{"config", cfg.describe()}, {"seed", cfg.seed}, {"catalog_hash", catalog.hash()},
                             {"holdout", holdout}, {"train_records", train_set.records.size()}});
    save_checkpoint(a.out, cfg.encoder, catalog, 0, model.parameters());
    const auto t0 = std::chrono::steady_clock::now();
    auto on_epoch = [&](const EpochLog& log, PoarModel<double>& m) {
        save_checkpoint(a.out, cfg.encoder, catalog, log.step, m.parameters());
        ojson line{{"epoch", log.epoch}, {"step", log.step}, {"loss", log.mean_loss}};
        if (test_set && (log.epoch % cfg.eval_every == 0 || log.epoch == cfg.epochs)) {
            EvalInputs in{m, keys, catalog, holdout, *test_set};
            line["test"] = metrics_line(evaluate(in, {}));
        }
        line["seconds"] = std::round(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() * 10) / 10;
        std::cout << line.dump() << std::endl;
    };
    train(model, cfg, split.seen, train_set, on_epoch);
    return ok;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, data, mode = "i2t", report, split = "test";
    bool all_prompts = false, cross_catalog = false;
    std::optional<double> threshold;
};

int cmd_eval(const EvalArgs& a) {
    DatasetPaths paths{a.data};
    const AttributeCatalog catalog = load_catalog(paths.catalog().string());
    const auto holdout = read_holdout(paths.holdout().string());
    Checkpoint ck = load_checkpoint(a.ckpt);
    if (!a.cross_catalog) check_catalog(ck, catalog);
    if (a.split != "test" && a.split != "train") throw validation_error("--split must be test or train");
    const Dataset data = load_dataset(a.split == "test" ? paths.test() : paths.train(), &catalog);
    const auto keys = ck.group_keys;
    PoarModel<double> model = model_from_checkpoint(std::move(ck));
    EvalOptions opt;
    opt.mode = a.mode == "open" ? EvalMode::open : a.mode == "t2i" ? EvalMode::t2i : EvalMode::i2t;
    opt.all_prompts = a.all_prompts;
    opt.threshold = a.threshold;
    const MetricsReport rep = evaluate(EvalInputs{model, keys, catalog, holdout, data}, opt);
    const fs::path report(a.report);
    write_text(report, report_json(rep));
    fs::path csv = report;
    csv.replace_extension(".csv");
    write_text(csv, report_csv(rep));
    fs::path manifest = report;
    manifest.replace_extension(".run.json");
    write_run_manifest(manifest, "eval",
                       ojson{{"ckpt", a.ckpt}, {"data", a.data}, {"mode", a.mode}, {"report", a.report},
                             {"split", a.split}, {"all_prompts", a.all_prompts}, {"cross_catalog", a.cross_catalog},
                             {"threshold", a.threshold ? ojson(*a.threshold) : ojson(nullptr)}},
                       ojson{{"config", model.config().describe()}, {"catalog_hash", catalog.hash()},
                             {"holdout", holdout}, {"images", data.records.size()}});
    std::cout << report_table(rep);
    if (!rep.skipped_groups.empty()) {
        std::cout << "skipped groups:";
        for (auto& g : rep.skipped_groups) std::cout << ' ' << g;
        std::cout << '\n';
    }
    if (!rep.t2i_excluded.empty())
        std::cout << rep.t2i_excluded.size() << " text queries had no matching image and were excluded\n";
    if (rep.has_nan()) {
        std::cerr << "error: a metric is NaN\n";
        return diverged;
    }
    return ok;
}

// ---------------------------------------------------------------------------

struct AttnArgs {
    std::string ckpt, image, out;
};

int cmd_attnmap(const AttnArgs& a) {
    Checkpoint ck = load_checkpoint(a.ckpt);
    const auto keys = ck.group_keys;
    PoarModel<double> model = model_from_checkpoint(std::move(ck));
    const auto& enc = model.config();
    const Image image = read_ppm(a.image);
    const MaskSpec masks = build_mask(region_layout_for_keys(keys), enc);
    Tape<double> tape(false);
    VisionRecords<double> records;
    model.encode_images(tape, std::span(&image, 1), masks, &records);
    fs::create_directories(a.out);
    std::size_t files = 0;
    for (auto& m : attention_maps(records, enc)) {
        const std::string name = enc.single_token ? "shared" : keys.at(m.token);
        const std::string stem = "attn_" + name + "_" + std::to_string(m.layer);
        std::string csv;
        char buf[40];
        for (std::size_t r = 0; r < m.rows; ++r) {
            for (std::size_t c = 0; c < m.cols; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", m.values[r * m.cols + c]);
                csv += (c ? "," : "");
                csv += buf;
            }
            csv += '\n';
        }
        write_text(fs::path(a.out) / (stem + ".csv"), csv);
        write_pgm(m.values, m.rows, m.cols, (fs::path(a.out) / (stem + ".pgm")).string());
        files += 2;
    }
    write_run_manifest(fs::path(a.out) / "run_manifest.json", "attnmap",
                       ojson{{"ckpt", a.ckpt}, {"image", a.image}, {"out", a.out}},
                       ojson{{"config", enc.describe()}, {"files", files}});
    std::printf("wrote %zu files to %s\n", files, a.out.c_str());
    return ok;
}

// ---------------------------------------------------------------------------

struct GradArgs {
    std::string config, catalog, precision = "extended";
    std::uint64_t seed = 0;
    std::size_t samples = 8;
    bool inject_fault = false;
};

template <class Real>
GradCheckReport run_gradcheck(const PoarModel<double>& base, const TrainContext& ctx, const TrainBatch& batch,
                              const GradArgs& a) {
    PoarModel<Real> model = base.template cast<Real>();
    GradCheckOptions opt;
    opt.samples_per_param = a.samples;
    opt.seed = a.seed;
    if (a.inject_fault) opt.fault_scale = 1.01;
    return grad_check<Real>([&](Tape<Real>& t) { return batch_loss(t, model, ctx, batch); },
                            model.parameters().all(), opt);
}

int cmd_gradcheck(const GradArgs& a) {
    TrainConfig cfg = load_train_config(a.config);
    const AttributeCatalog catalog = catalog_or_desk(a.catalog);
    cfg.encoder.groups = catalog.group_count();
    cfg.encoder.validate();
    const SyntheticSpec spec = make_synthetic_spec(catalog, a.seed);
    const auto part = generate_split(spec, split_attributes(catalog, {}), 2, true, "gradcheck");
    TrainBatch batch{part.images, {part.records[0].labels, part.records[1].labels}};
    PoarModel<double> model(cfg.encoder, a.seed);
    TrainContext ctx(cfg, catalog);
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport rep;
    if (a.precision == "extended")
        rep = run_gradcheck<long double>(model, ctx, batch, a);
    else if (a.precision == "double")
        rep = run_gradcheck<double>(model, ctx, batch, a);
    else
        throw validation_error("--precision must be extended or double");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-36s %8s %14s %14s %10s\n", "parameter", "index", "analytic", "numeric", "rel.err");
    for (auto& c : rep.worst_per_param)
        std::printf("%-36s %8zu %14.6e %14.6e %10.2e\n", c.param.c_str(), c.index, c.analytic, c.numeric,
                    c.rel_error);
    const double threshold = 1e-5;
    std::printf("checked %zu coordinates in %.1f s (%s precision); max relative error %.3e (threshold %.0e)\n",
                rep.checked, secs, a.precision.c_str(), rep.max_rel_error, threshold);
    return rep.max_rel_error < threshold ? ok : gradcheck_failed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pedestrian open-attribute recognition on synthetic data"};
    app.require_subcommand(1);
    app.set_version_flag("--version", tool_version);

    GenArgs gen;
    auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--n", gen.n, "Number of training samples")->required();
    g->add_option("--n-test", gen.n_test, "Number of test samples (default n/4)");
    g->add_option("--seed", gen.seed, "Random seed")->required();
    g->add_option("--holdout", gen.holdout, "Comma-separated held-out attribute ids, e.g. Upperbody:plaid");
    g->add_option("--catalog", gen.catalog, "Catalog file (default: built-in desk catalog)");
    g->add_option("--noise", gen.noise, "Pixel noise standard deviation");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model on a dataset directory");
    t->add_option("--data", tr.data, "Dataset directory")->required();
    t->add_option("--config", tr.config, "Training config file")->required();
    t->add_option("--out", tr.out, "Checkpoint path")->required();

    EvalArgs ev;
    std::string mode = "i2t";
    double threshold = 0;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
    e->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
    e->add_option("--data", ev.data, "Dataset directory")->required();
    e->add_option("--mode", ev.mode, "i2t, t2i or open")->check(CLI::IsMember({"i2t", "t2i", "open"}));
    e->add_option("--report", ev.report, "Report path (JSON; a .csv is written next to it)")->required();
    e->add_option("--split", ev.split, "Manifest to evaluate: test or train")->check(CLI::IsMember({"test", "train"}));
    e->add_flag("--all-prompts", ev.all_prompts, "Rank each group token against every prompt");
    e->add_flag("--cross-catalog", ev.cross_catalog, "Map groups by key instead of requiring the training catalog");
    auto* thr = e->add_option("--threshold", threshold, "Predict every attribute scoring at least this");

    AttnArgs at;
    auto* m = app.add_subcommand("attnmap", "Export per-token attention maps for one image");
    m->add_option("--ckpt", at.ckpt, "Checkpoint path")->required();
    m->add_option("--image", at.image, "PPM image")->required();
    m->add_option("--out", at.out, "Output directory")->required();

    GradArgs gc;
    auto* c = app.add_subcommand("gradcheck", "Compare tape gradients with central finite differences");
    c->add_option("--config", gc.config, "Training config file")->required();
    c->add_option("--seed", gc.seed, "Seed for parameters, data and sampled coordinates")->required();
    c->add_option("--catalog", gc.catalog, "Catalog file (default: built-in desk catalog)");
    c->add_option("--samples", gc.samples, "Coordinates sampled per parameter");
    c->add_option("--precision", gc.precision, "extended or double")->check(CLI::IsMember({"extended", "double"}));
    c->add_flag("--inject-fault", gc.inject_fault, "Scale one analytic gradient by 1.01 (test hook)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? ok : invalid;
    }
    gen.n_test_set = g->get_option("--n-test")->count() > 0;
    if (thr->count()) ev.threshold = threshold;

    try {
        if (*g) return cmd_gen_data(gen);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_eval(ev);
        if (*m) return cmd_attnmap(at);
        if (*c) return cmd_gradcheck(gc);
    } catch (const divergence_error& err) {
        std::cerr << "error: training diverged: " << err.what() << '\n';
        return diverged;
    } catch (const compatibility_error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return incompatible;
    } catch (const validation_error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return invalid;
    } catch (const parse_error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return invalid;
    } catch (const shape_error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return invalid;
    } catch (const numeric_error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return diverged;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return failure;
    }
    return failure;
}
