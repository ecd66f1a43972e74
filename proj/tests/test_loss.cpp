#include <gtest/gtest.h>

#include <cmath>

#include "poar/gradcheck.hpp"
#include "poar/loss.hpp"
#include "test_util.hpp"

using namespace poar;
using poar::testing::random_tensor;

namespace {

const double log_e_over_e1 = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));

// Direct transcription of the visual→text sum with a naive denominator.
double oracle_v2t(const Tensor& s, const PositiveMask& pos, double tau) {
    double loss = 0;
    for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = 0; j < s.cols(); ++j) {
            if (!pos(i, j)) continue;
            long double denom = 0;
            for (std::size_t k = 0; k < s.cols(); ++k) denom += std::exp(static_cast<long double>(s(i, k)) / tau);
            loss -= static_cast<double>(std::log(std::exp(static_cast<long double>(s(i, j)) / tau) / denom));
        }
    return loss;
}

double oracle_t2v(const Tensor& s, const PositiveMask& pos, double tau) {
    double loss = 0;
    for (std::size_t j = 0; j < s.cols(); ++j)
        for (std::size_t i = 0; i < s.rows(); ++i) {
            if (!pos(i, j)) continue;
            long double denom = 0;
            for (std::size_t k = 0; k < s.rows(); ++k) denom += std::exp(static_cast<long double>(s(k, j)) / tau);
            loss -= static_cast<double>(std::log(std::exp(static_cast<long double>(s(i, j)) / tau) / denom));
        }
    return loss;
}

PositiveMask random_mask(std::size_t r, std::size_t c, Rng& rng) {
    PositiveMask m(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m.set(i, j, rng.bernoulli(0.3));
    return m;
}

}  // namespace

TEST(Similarity, CosineCases) {
    auto a = Tensor::from_rows({{1, 2, 3}, {1, 0, 0}});
    auto b = Tensor::from_rows({{2, 4, 6}, {0, 5, 0}});
    auto s = similarity_matrix(a, b);
    EXPECT_NEAR(s(0, 0), 1.0, 1e-15);
    EXPECT_EQ(s(1, 1), 0.0);
    EXPECT_THROW(similarity_matrix(a, Tensor::matrix(2, 4)), shape_error);
}

TEST(Similarity, MatchesNormalizedDotLoop) {
    Rng rng(1);
    auto a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
    auto s = similarity_matrix(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t d = 0; d < 4; ++d) {
                dot += a(i, d) * b(j, d);
                na += a(i, d) * a(i, d);
                nb += b(j, d) * b(j, d);
            }
            EXPECT_NEAR(s(i, j), dot / std::sqrt(na * nb), 1e-12);
        }
}

TEST(PositiveMask, OneImageOneAttributePerGroup) {
    auto c = desk_catalog();
    EncoderConfig enc;
    Labels labels;
    PromptIndex prompts;
    for (std::size_t g = 0; g < c.group_count(); ++g) {
        labels[c.group(g).key] = {c.group(g).attributes[0]};
        prompts.add(c, {g, c.group(g).attributes[0]});
    }
    auto m = positive_mask({labels}, c, prompts, enc);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(m(i, j), i == j);
}

TEST(PositiveMask, SharedAttributeAndGroupConsistency) {
    auto c = desk_catalog();
    EncoderConfig enc;
    auto prompts = catalog_prompts(c);
    std::vector<Labels> batch{{{"Gender", {"female"}}, {"Hair", {"long"}}}, {{"Gender", {"female"}}}};
    auto m = positive_mask(batch, c, prompts, enc);
    const std::size_t female = *prompts.find(c.parse_id("Gender:female"));
    const std::size_t gender = *c.group_index("Gender");
    EXPECT_TRUE(m(gender, female));
    EXPECT_TRUE(m(8 + gender, female));
    std::size_t vj = 0;
    for (std::size_t i = 0; i < 16; ++i) vj += m(i, female);
    EXPECT_EQ(vj, 2u);
    const std::size_t hair = *c.group_index("Hair");
    for (auto& a : c.group(*c.group_index("Foot")).attributes) EXPECT_FALSE(m(hair, *prompts.find(c.parse_id("Foot:" + a))));
    EXPECT_EQ(m.count(), 3u);
    EXPECT_THROW(positive_mask({{{"Hat", {"x"}}}}, c, prompts, enc), annotation_error);
    EXPECT_THROW(positive_mask({{{"Hair", {"purple"}}}}, c, prompts, enc), annotation_error);
}

TEST(PositiveMask, SingleTokenMode) {
    auto c = desk_catalog();
    EncoderConfig enc;
    enc.single_token = true;
    auto prompts = catalog_prompts(c);
    auto m = positive_mask({{{"Gender", {"male"}}, {"Hair", {"long"}}}}, c, prompts, enc);
    EXPECT_EQ(m.rows, 1u);
    EXPECT_EQ(m.count(), 2u);
}

TEST(ContrastiveLoss, ClosedForms) {
    PositiveMask pos(1, 2);
    pos.set(0, 0);
    EXPECT_NEAR(loss_v2t(Tensor::from_rows({{0.3, 0.3}}), pos, 1.0), std::log(2.0), 1e-15);
    EXPECT_NEAR(loss_v2t(Tensor::from_rows({{1.0, 0.0}}), pos, 1.0), 0.3132616875182228, 1e-15);
    EXPECT_NEAR(log_e_over_e1, 0.3132616875182228, 1e-15);
    PositiveMask one(1, 1);
    one.set(0, 0);
    EXPECT_EQ(loss_v2t(Tensor::from_rows({{0.7}}), one, 1.0), 0.0);
    EXPECT_EQ(loss_t2v(Tensor::from_rows({{0.7}}), one, 1.0), 0.0);
}

TEST(ContrastiveLoss, RowsWithoutPositivesAreSkipped) {
    PositiveMask pos(2, 2);
    pos.set(0, 0);
    auto s = Tensor::from_rows({{1.0, 0.0}, {0.5, -0.5}});
    auto v = contrastive_rows(s, pos, 1.0);
    EXPECT_EQ(v.active_rows, 1u);
    EXPECT_EQ(v.grad(1, 0), 0.0);
    EXPECT_EQ(v.grad(1, 1), 0.0);
    EXPECT_THROW(loss_v2t(s, pos, 0.0), validation_error);
    EXPECT_THROW(loss_v2t(s, PositiveMask(2, 3), 1.0), shape_error);
}

TEST(ContrastiveLoss, TransposeSymmetryAndOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
        auto s = random_tensor({r, c}, rng);
        auto pos = random_mask(r, c, rng);
        const double tau = rng.uniform(0.2, 2.0);
        EXPECT_NEAR(loss_t2v(s, pos, tau), loss_v2t(s.transposed(), pos.transposed(), tau), 1e-12);
        EXPECT_NEAR(loss_v2t(s, pos, tau), oracle_v2t(s, pos, tau), 1e-10);
        EXPECT_NEAR(loss_t2v(s, pos, tau), oracle_t2v(s, pos, tau), 1e-10);
        EXPECT_NEAR(loss_total(s, pos, tau), oracle_v2t(s, pos, tau) + oracle_t2v(s, pos, tau), 1e-10);
    }
}

TEST(ContrastiveLoss, PositiveSimilarityLowersLoss) {
    PositiveMask pos(2, 3);
    pos.set(0, 1);
    pos.set(1, 2);
    auto s = Tensor::from_rows({{0.1, 0.2, -0.3}, {0.4, 0.0, 0.1}});
    const double before = loss_total(s, pos, 1.0);
    s(0, 1) += 0.3;
    EXPECT_LT(loss_total(s, pos, 1.0), before);
    s(0, 0) += 0.5;
    EXPECT_GT(loss_total(s, pos, 1.0), loss_total(Tensor::from_rows({{0.1, 0.5, -0.3}, {0.4, 0.0, 0.1}}), pos, 1.0));
}

TEST(ContrastiveLoss, GradientThroughEmbeddings) {
    Rng rng(3);
    Parameter<double> a{"a", random_tensor({4, 5}, rng)};
    Parameter<double> b{"b", random_tensor({3, 5}, rng)};
    auto pos = random_mask(4, 3, rng);
    pos.set(0, 0);
    auto loss = [&](Tape<double>& t) { return loss_total(similarity_matrix(t.param(a), t.param(b)), pos, 0.7); };
    EXPECT_LT(grad_check<double>(loss, {&a, &b}).max_rel_error, 1e-7);
}

TEST(Paragraph, CatalogOrderAndMerging) {
    auto c = desk_catalog();
    Labels l{{"Upperbody", {"jacket"}}, {"Hair", {"long"}}};
    EXPECT_EQ(paragraph_for(l, c), "This person has long hair. This person is wearing jacket in upper body.");
    auto pb = paragraph_batch({l, {{"Hair", {"bald"}}}, l}, c);
    EXPECT_EQ(pb.paragraphs.size(), 2u);
    EXPECT_EQ(pb.column_of_image, (std::vector<std::size_t>{0, 1, 0}));
    auto pos = pb.positives();
    EXPECT_TRUE(pos(2, 0));
    EXPECT_EQ(pos.count(), 3u);
}

TEST(OneToOneLoss, ClosedForms) {
    Tape<double> tape(false);
    PositiveMask one(1, 1);
    one.set(0, 0);
    auto single = otoc_loss(tape.constant(Tensor::from_rows({{1, 2}, {3, 1}})), 2,
                            tape.constant(Tensor::from_rows({{0.5, 0.5}})), one, 1.0);
    EXPECT_EQ(single.value().item(), 0.0);

    PositiveMask diag(2, 2);
    diag.set(0, 0);
    diag.set(1, 1);
    auto emb = Tensor::from_rows({{1, 0}, {0, 1}});
    auto pair = otoc_loss(tape.constant(emb), 1, tape.constant(emb), diag, 1.0);
    EXPECT_NEAR(pair.value().item(), 2 * (2 * log_e_over_e1), 1e-14);
}

TEST(OneToOneLoss, SingleTokenReducesToContrastive) {
    Rng rng(4);
    Tape<double> tape(false);
    auto z = tape.constant(random_tensor({3, 6}, rng));
    auto y = tape.constant(random_tensor({3, 6}, rng));
    PositiveMask diag(3, 3);
    for (std::size_t i = 0; i < 3; ++i) diag.set(i, i);
    EXPECT_NEAR(otoc_loss(z, 1, y, diag, 1.0).value().item(),
                loss_total(similarity_matrix(z, y), diag, 1.0).value().item(), 1e-14);
}

TEST(OneToOneLoss, ImageEmbeddingIsTokenMean) {
    Rng rng(5);
    Tape<double> tape(false);
    auto tokens = random_tensor({4, 3}, rng);
    auto y = random_tensor({2, 3}, rng);
    auto means = Tensor::matrix(2, 3);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t d = 0; d < 3; ++d) means(b, d) = (tokens(2 * b, d) + tokens(2 * b + 1, d)) / 2;
    PositiveMask diag(2, 2);
    diag.set(0, 0);
    diag.set(1, 1);
    EXPECT_NEAR(otoc_loss(tape.constant(tokens), 2, tape.constant(y), diag, 1.0).value().item(),
                loss_total(similarity_matrix(means, y), diag, 1.0), 1e-14);
}
