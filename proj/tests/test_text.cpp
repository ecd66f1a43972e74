#include <gtest/gtest.h>

#include "poar/gradcheck.hpp"
#include "poar/model.hpp"
#include "test_util.hpp"

using namespace poar;

namespace {

// Dense reference: every sequence padded to L, causal attention with pad
// keys blocked, read out at END.
Tensor causal_pad_mask(const TokenSequence& s) {
    const std::size_t n = s.length();
    Tensor m = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (j > i || (j >= s.valid_length && j != i)) m(i, j) = mask_sentinel<double>;
    return m;
}

Tensor dense_encode(PoarModel<double>& model, const std::vector<TokenSequence>& seqs) {
    auto& store = model.parameters();
    const auto& cfg = model.config();
    Tensor out = Tensor::matrix(seqs.size(), cfg.embed_dim);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        Tape<double> tape(false);
        const std::size_t n = seqs[s].length();
        std::vector<std::size_t> ids, pos;
        for (std::size_t i = 0; i < n; ++i) {
            ids.push_back(static_cast<std::size_t>(seqs[s].ids[i]));
            pos.push_back(i);
        }
        auto x = add(gather_rows(tape.param(store.at("text.token_embedding")), ids),
                     gather_rows(tape.param(store.at("text.positions")), pos));
        for (std::size_t l = 0; l < cfg.text_layers; ++l) {
            auto block = TransformerBlock<double>::bind(store, "text.block" + std::to_string(l) + ".", cfg.text_heads);
            x = block.forward(x, causal_pad_mask(seqs[s]), n);
        }
        auto row = x.value().row(seqs[s].end_position());
        std::copy(row.begin(), row.end(), out.storage().begin() + s * cfg.embed_dim);
    }
    return out;
}

EncoderConfig small_config() {
    EncoderConfig c;
    c.embed_dim = 8;
    c.text_heads = 2;
    c.text_layers = 2;
    c.vision_layers = 1;
    c.text_length = 48;
    c.paragraph_length = 48;
    c.mlp_ratio = 2;
    return c;
}

}  // namespace

TEST(Tokenizer, SingleByte) {
    auto s = tokenize("a", 4);
    EXPECT_EQ(s.ids, (std::vector<int>{token_start, 97, token_end, token_pad}));
    EXPECT_EQ(s.valid_length, 3u);
    EXPECT_EQ(s.end_position(), 2u);
}

TEST(Tokenizer, DeterministicAndTruncating) {
    EXPECT_EQ(tokenize("This person is male.", 64), tokenize("This person is male.", 64));
    auto s = tokenize("abcdefgh", 6);
    EXPECT_EQ(s.valid_length, 6u);
    EXPECT_EQ(s.ids, (std::vector<int>{token_start, 'a', 'b', 'c', 'd', token_end}));
    EXPECT_THROW(tokenize("", 8), validation_error);
    EXPECT_THROW(tokenize("a", 2), validation_error);
}

TEST(Tokenizer, NonAsciiBytesStayInVocabulary) {
    auto s = tokenize("\xc3\xa9", 8);
    EXPECT_EQ(s.ids[1], 0xc3);
    EXPECT_EQ(s.ids[2], 0xa9);
}

TEST(PrefixTree, SharesCommonPrefixes) {
    std::vector<TokenSequence> seqs{tokenize("ab", 8), tokenize("ac", 8), tokenize("ab", 8)};
    auto tree = PrefixTree::build(seqs);
    // START, a, b, END, c, END
    EXPECT_EQ(tree.token.size(), 6u);
    EXPECT_EQ(tree.end_node[0], tree.end_node[2]);
    EXPECT_NE(tree.end_node[0], tree.end_node[1]);
    auto& p = *tree.paths;
    for (std::size_t i = 0; i < tree.token.size(); ++i) {
        EXPECT_EQ(p.rows[p.offsets[i + 1] - 1], i);
        EXPECT_EQ(p.offsets[i + 1] - p.offsets[i], tree.position[i] + 1);
    }
}

TEST(TextEncoder, OneRowPerSequence) {
    PoarModel<double> model(small_config(), 3);
    Tape<double> tape(false);
    auto y = model.encode_sentences(tape, {"This person is male."}, 48);
    EXPECT_EQ(y.value().shape(), (Shape{1, 8}));
}

TEST(TextEncoder, MatchesDenseCausalReference) {
    PoarModel<double> model(small_config(), 11);
    Rng rng(5);
    for (auto* p : model.parameters().all())
        if (p->name.find("gain") == std::string::npos)
            for (auto& v : p->value.storage()) v = rng.normal(0.0, 0.3);
    std::vector<std::string> sentences{"This person is male.", "This person is female.", "This person is male.",
                                       "This person has long hair.", "x"};
    std::vector<TokenSequence> seqs;
    for (auto& s : sentences) seqs.push_back(tokenize(s, 48));
    Tape<double> tape(false);
    Tensor fast = model.text().encode(tape, seqs).value();
    Tensor ref = dense_encode(model, seqs);
    ASSERT_EQ(fast.shape(), ref.shape());
    for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], ref[i], 1e-12) << i;
}

TEST(TextEncoder, IndependentOfBatchCompanions) {
    PoarModel<double> model(small_config(), 2);
    Tape<double> t1(false), t2(false);
    auto alone = model.encode_sentences(t1, {"This person is wearing jeans in lower body."}, 48).value();
    auto batch = model.encode_sentences(t2, {"This person is male.", "This person is wearing jeans in lower body."}, 48)
                     .value();
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(alone(0, d), batch(1, d), 1e-12);
}

TEST(TextEncoder, PadLengthDoesNotMatter) {
    PoarModel<double> model(small_config(), 4);
    Tape<double> t1(false), t2(false);
    auto a = model.encode_sentences(t1, {"This person has short hair."}, 32).value();
    auto b = model.encode_sentences(t2, {"This person has short hair."}, 48).value();
    for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(a(0, d), b(0, d));
}

TEST(TextEncoder, RejectsOverlongSequences) {
    PoarModel<double> model(small_config(), 4);
    Tape<double> tape(false);
    EXPECT_THROW(model.encode_sentences(tape, {std::string(60, 'a')}, 64), shape_error);
}

TEST(TextEncoder, GradientMatchesFiniteDifferences) {
    auto cfg = small_config();
    cfg.text_layers = 1;
    PoarModel<long double> model(cfg, 9);
    std::vector<Parameter<long double>*> params;
    for (auto* p : model.parameters().all())
        if (p->name.rfind("text.", 0) == 0) params.push_back(p);
    Rng rng(1);
    BasicTensor<long double> w({2, 8});
    for (auto& v : w.storage()) v = rng.normal();
    auto loss = [&](Tape<long double>& t) {
        auto y = model.encode_sentences(t, {"ab c", "ab d"}, 48);
        return sum(mul(y, t.constant(w)));
    };
    GradCheckOptions opt;
    opt.samples_per_param = 6;
    auto rep = grad_check<long double>(loss, params, opt);
    EXPECT_LT(rep.max_rel_error, 1e-6);
}
