#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "poar/trainer.hpp"
#include "test_util.hpp"

using namespace poar;
using poar::testing::source_path;
namespace fs = std::filesystem;

namespace {

const char* minimal_config = "learning_rate = 0.01\nweight_decay = 0\nepochs = 1\nbatch_size = 2\nseed = 3\n";

TrainConfig tiny_config() {
    TrainConfig cfg = parse_train_config(minimal_config);
    cfg.encoder.embed_dim = 8;
    cfg.encoder.vision_layers = 1;
    cfg.encoder.text_layers = 1;
    cfg.encoder.mlp_ratio = 2;
    return cfg;
}

Dataset tiny_data(const AttributeCatalog& catalog, std::size_t n, std::uint64_t seed) {
    auto spec = make_synthetic_spec(catalog, seed);
    auto part = generate_split(spec, split_attributes(catalog, {}), n, true, "train");
    return {part.records, part.images};
}

std::vector<double> flat_parameters(const PoarModel<double>& m) {
    std::vector<double> out;
    for (auto* p : m.parameters().all()) out.insert(out.end(), p->value.storage().begin(), p->value.storage().end());
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Sgd, UpdateRule) {
    Parameter<double> p{"p", Tensor::vector({1.0})};
    p.grad = Tensor::vector({0.0});
    sgd_step<double>({&p}, 0.1, 0.0);
    EXPECT_EQ(p.value[0], 1.0);
    p.grad = Tensor::vector({1.0});
    sgd_step<double>({&p}, 0.1, 0.0);
    EXPECT_DOUBLE_EQ(p.value[0], 0.9);
    p.value[0] = 1.0;
    p.grad = Tensor::vector({0.0});
    sgd_step<double>({&p}, 0.1, 0.2);
    EXPECT_DOUBLE_EQ(p.value[0], 0.98);
    p.grad = Tensor::vector({std::nan("")});
    EXPECT_THROW(sgd_step<double>({&p}, 0.1, 0.0), divergence_error);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    Parameter<double> p{"p", Tensor::vector({1.0, -2.0})};
    p.grad = Tensor::vector({0.5, -3.0});
    AdamW adam;
    adam.step({&p}, 0.1, 0.0);
    EXPECT_NEAR(p.value[0], 0.9, 1e-8);
    EXPECT_NEAR(p.value[1], -1.9, 1e-8);
    Parameter<double> q{"q", Tensor::vector({1.0})};
    q.grad = Tensor::vector({0.0});
    AdamW decay;
    decay.step({&q}, 0.1, 0.2);
    EXPECT_DOUBLE_EQ(q.value[0], 0.98);
}

TEST(Config, ParsesKeysAndComments) {
    auto cfg = parse_train_config(
        "# desk\nlearning_rate = 0.5  # inline\nweight_decay=0.1\nepochs = 7\nbatch_size = 4\nseed = 9\n"
        "temperature = 0.5\nloss = both\noptimizer = adamw\naugment = false\nembed_dim = 16\ntoken_mask = off\n");
    EXPECT_EQ(cfg.learning_rate, 0.5);
    EXPECT_EQ(cfg.weight_decay, 0.1);
    EXPECT_EQ(cfg.epochs, 7u);
    EXPECT_EQ(cfg.batch_size, 4u);
    EXPECT_EQ(cfg.seed, 9u);
    EXPECT_EQ(cfg.temperature, 0.5);
    EXPECT_EQ(cfg.loss, LossKind::both);
    EXPECT_EQ(cfg.optimizer, OptimizerKind::adamw);
    EXPECT_FALSE(cfg.augment);
    EXPECT_EQ(cfg.encoder.embed_dim, 16u);
    EXPECT_FALSE(cfg.encoder.token_mask);
    EXPECT_TRUE(cfg.encoder.region_mask);
}

TEST(Config, MissingKeyIsNamed) {
    try {
        parse_train_config("learning_rate = 0.1\nweight_decay = 0\nepochs = 1\nseed = 0\n");
        FAIL();
    } catch (const validation_error& e) {
        EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
    }
}

TEST(Config, Rejections) {
    const std::string base = minimal_config;
    for (const char* extra : {"colour = red\n", "seed = 4\n", "groups = 8\n", "loss = triplet\n", "augment = maybe\n",
                              "temperature = 0\n", "optimizer = lbfgs\n", "embed_dim = -3\n", "oops\n"})
        EXPECT_ANY_THROW(parse_train_config(base + extra)) << extra;
    EXPECT_THROW(parse_train_config("learning_rate = x\nweight_decay = 0\nepochs = 1\nbatch_size = 2\nseed = 0\n"),
                 validation_error);
    EXPECT_THROW(parse_train_config("learning_rate = 0\nweight_decay = 0\nepochs = 1\nbatch_size = 2\nseed = 0\n"),
                 validation_error);
    EXPECT_THROW(parse_train_config("learning_rate = 1\nweight_decay = 0\nepochs = 1\nbatch_size = 0\nseed = 0\n"),
                 validation_error);
}

TEST(Config, ShippedFilesLoad) {
    auto desk = load_train_config(source_path("configs/desk.conf"));
    EXPECT_EQ(desk.encoder.image_height, 32u);
    EXPECT_EQ(desk.encoder.patch_size, 8u);
    EXPECT_EQ(desk.encoder.embed_dim, 32u);
    EXPECT_EQ(desk.encoder.vision_layers, 2u);
    EXPECT_EQ(desk.batch_size, 8u);
    EXPECT_LE(desk.epochs, 100u);
    auto full = load_train_config(source_path("configs/full.conf"));
    EXPECT_EQ(full.learning_rate, 0.05);
    EXPECT_EQ(full.weight_decay, 0.2);
    EXPECT_EQ(full.epochs, 100u);
    EXPECT_EQ(full.temperature, 1.0);
    EXPECT_EQ(full.encoder.patch_count(), 196u);
    EXPECT_EQ(full.encoder.vision_layers, 12u);
}

TEST(Config, EncoderDescriptionRoundTrip) {
    EncoderConfig c;
    c.embed_dim = 48;
    c.single_token = true;
    EXPECT_EQ(parse_encoder_description(c.describe()), c);
    EXPECT_THROW(parse_encoder_description("embed_dim=4;bogus=1"), parse_error);
}

TEST(Train, DeterministicTrajectory) {
    auto catalog = desk_catalog();
    auto cfg = tiny_config();
    auto data = tiny_data(catalog, 4, 1);
    auto run = [&] {
        PoarModel<double> model(cfg.encoder, cfg.seed);
        std::vector<double> losses;
        train(model, cfg, catalog, data, [&](const EpochLog& log, PoarModel<double>&) { losses.push_back(log.mean_loss); });
        return std::make_pair(losses, flat_parameters(model));
    };
    auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    ASSERT_EQ(a.first.size(), 1u);
    EXPECT_TRUE(std::isfinite(a.first[0]));
}

TEST(Train, LossDecreasesOnFixedBatch) {
    auto catalog = desk_catalog();
    auto cfg = tiny_config();
    cfg.temperature = 0.25;
    for (auto kind : {LossKind::mtmc, LossKind::otoc, LossKind::both}) {
        cfg.loss = kind;
        auto data = tiny_data(catalog, 4, 2);
        PoarModel<double> model(cfg.encoder, 5);
        TrainContext ctx(cfg, catalog);
        Optimizer opt(cfg);
        std::vector<Labels> labels;
        for (auto& r : data.records) labels.push_back(r.labels);
        TrainBatch batch{data.images, labels};
        const double first = train_step(model, ctx, batch, opt);
        double last = first;
        for (int i = 0; i < 50; ++i) last = train_step(model, ctx, batch, opt);
        EXPECT_LT(last, first) << loss_name(kind);
    }
}

TEST(Train, NonFiniteParameterDiverges) {
    auto catalog = desk_catalog();
    auto cfg = tiny_config();
    auto data = tiny_data(catalog, 2, 3);
    PoarModel<double> model(cfg.encoder, 1);
    model.parameters().at("vision.tokens").value[0] = std::nan("");
    EXPECT_THROW(train(model, cfg, catalog, data), divergence_error);
}

TEST(Train, RejectsEmptyData) {
    auto cfg = tiny_config();
    PoarModel<double> model(cfg.encoder, 1);
    EXPECT_THROW(train(model, cfg, desk_catalog(), Dataset{}), validation_error);
}

TEST(Checkpoint, RoundTripReencodesBitIdentically) {
    auto catalog = desk_catalog();
    auto cfg = tiny_config();
    PoarModel<double> model(cfg.encoder, 8);
    auto data = tiny_data(catalog, 2, 4);
    auto path = (fs::temp_directory_path() / "poar_test_roundtrip.ckpt").string();
    save_checkpoint(path, cfg.encoder, catalog, 17, model.parameters());
    EXPECT_FALSE(fs::exists(path + ".tmp"));
    auto ck = load_checkpoint(path);
    EXPECT_EQ(ck.step, 17u);
    EXPECT_EQ(ck.config, cfg.encoder);
    EXPECT_EQ(ck.group_keys.front(), "Hair");
    EXPECT_NO_THROW(check_catalog(ck, catalog));
    EXPECT_THROW(check_catalog(ck, peta_catalog()), compatibility_error);
    auto loaded = model_from_checkpoint(std::move(ck));
    auto masks = build_mask(default_region_layout(catalog), cfg.encoder);
    Tape<double> t1(false), t2(false);
    EXPECT_EQ(model.encode_images(t1, data.images, masks).value(), loaded.encode_images(t2, data.images, masks).value());
    EXPECT_EQ(serialize_checkpoint(cfg.encoder, catalog, 17, loaded.parameters()), read_file(path));
    fs::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
    auto catalog = desk_catalog();
    auto cfg = tiny_config();
    PoarModel<double> model(cfg.encoder, 8);
    const std::string bytes = serialize_checkpoint(cfg.encoder, catalog, 0, model.parameters());
    for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1})
        EXPECT_THROW(parse_checkpoint(bytes.substr(0, cut)), parse_error) << cut;
    EXPECT_THROW(parse_checkpoint(bytes + "x"), parse_error);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(parse_checkpoint(bad), parse_error);
    std::string version = bytes;
    version[8] = 9;
    EXPECT_THROW(parse_checkpoint(version), compatibility_error);
    EXPECT_THROW(load_checkpoint("/nonexistent/poar.ckpt"), parse_error);
}

TEST(Checkpoint, ShapeMismatchIsIncompatible) {
    auto cfg = tiny_config();
    PoarModel<double> model(cfg.encoder, 8);
    ParameterStore<double> store;
    for (auto* p : model.parameters().all()) store.add(p->name, p->value);
    EncoderConfig other = cfg.encoder;
    other.embed_dim = 16;
    EXPECT_THROW((PoarModel<double>(other, std::move(store))), compatibility_error);
}
