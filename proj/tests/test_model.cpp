#include <doctest.h>

#include <random>

#include "hybridsel/calibration.hpp"
#include "hybridsel/model.hpp"
#include "support.hpp"

using namespace hybridsel;
using hybridsel::test::random_mask;
using hybridsel::test::random_tokens;

namespace {

ModelSpec small_spec() {
    ModelSpec s;
    s.num_layers = 2;
    s.heads_per_layer = 2;
    s.kv_groups = 2;
    s.vocab_size = 16;
    s.max_seq_len = 64;
    return s;
}

PlantedCircuit two_layer_induction() {
    PlantedCircuit c;
    c.prev_token_heads = {{0, 0}};
    c.induction_heads = {{1, 0}};
    return c;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("two-layer induction circuit completes A B ... A with B") {
    const auto model = build_planted_model(small_spec(), two_layer_induction(), 7);
    const auto mask = HeadMask::all_full(model.spec().mask_shape());
    // every ordered pair of distinct tokens, placed in fixed filler
    int wrong = 0, total = 0;
    for (int a = 0; a < 16; ++a) {
        for (int b = 0; b < 16; ++b) {
            if (a == b) continue;
            std::vector<int> tokens;
            for (int i = 0; i < 20; ++i) {
                int f = (i * 7 + 3) % 16;
                while (f == a || f == b) f = (f + 1) % 16;
                tokens.push_back(f);
            }
            tokens[4] = a;
            tokens[5] = b;
            tokens.back() = a;
            const int last = static_cast<int>(tokens.size()) - 1;
            const std::vector<int> pos{last};
            wrong += predict_at(model, mask, tokens, 64, pos)[0] != b;
            ++total;
        }
    }
    CHECK(total == 240);
    CHECK(wrong == 0);
}

TEST_CASE("building is deterministic") {
    const auto a = build_planted_model(small_spec(), two_layer_induction(), 7);
    const auto b = build_planted_model(small_spec(), two_layer_induction(), 7);
    CHECK(weights_to_blob(a) == weights_to_blob(b));
    const auto c = build_planted_model(small_spec(), two_layer_induction(), 8);
    CHECK(weights_to_blob(a) != weights_to_blob(c));
}

TEST_CASE("induction below its prev-token head is rejected") {
    PlantedCircuit c;
    c.prev_token_heads = {{1, 0}};
    c.induction_heads = {{0, 0}};
    CHECK_THROWS(build_planted_model(small_spec(), c, 0));
    CHECK_THROWS(c.validate(small_spec()));
}

TEST_CASE("artifact round trip") {
    const auto m = build_planted_model(standard_toy_spec(), standard_toy_circuit(), 3);
    const auto blob = weights_to_blob(m);
    const auto back = model_from_artifacts(model_manifest(m), blob);
    CHECK(weights_to_blob(back) == blob);
    CHECK(spec_hash(back.spec()) == spec_hash(m.spec()));
    CHECK(spec_to_json(spec_from_json(spec_to_json(m.spec()))) == spec_to_json(m.spec()));
    auto bad = blob;
    bad.pop_back();
    CHECK_THROWS(model_from_artifacts(model_manifest(m), bad));
}

TEST_CASE("SWA row support") {
    const auto model = build_random_model(small_spec(), 1);
    const auto mask = HeadMask::all_swa(model.spec().mask_shape());
    std::mt19937_64 rng(1);
    const auto tokens = random_tokens(16, 16, rng);
    const auto tr = forward(model, mask, tokens, 4, {.attention = true});
    // 0-based row 9 is the tenth position; it sees 6..9
    for (int h = 0; h < 2; ++h) {
        const auto& a = tr.attn(0, h);
        for (int j = 0; j < 16; ++j) CHECK((a(9, j) > 0) == (j >= 6 && j <= 9));
        CHECK(a.row(9).sum() == doctest::Approx(1.0));
    }
}

TEST_CASE("partitioned forward equals the per-head reference") {
    std::mt19937_64 rng(5);
    for (int seed = 0; seed < 4; ++seed) {
        ModelSpec s = small_spec();
        s.num_layers = 3;
        s.heads_per_layer = 4;
        s.head_dim = 8;
        const auto model = build_random_model(s, seed);
        const auto mask = random_mask(s.mask_shape(), rng);
        const auto tokens = random_tokens(24, 16, rng);
        const auto got = forward(model, mask, tokens, 5).logits;
        const auto want = test::reference_logits(model, mask, tokens, 5);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("a window covering the sequence reproduces full attention") {
    std::mt19937_64 rng(9);
    const auto model = build_planted_model(standard_toy_spec(), standard_toy_circuit(), 0);
    const auto tokens = random_tokens(40, 16, rng);
    const auto full = forward(model, HeadMask::all_full(model.spec().mask_shape()), tokens, 40).logits;
    for (int i = 0; i < 10; ++i) {
        const auto mask = random_mask(model.spec().mask_shape(), rng);
        CHECK((forward(model, mask, tokens, 40 + i).logits - full).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("attention gradients match central differences") {
    std::mt19937_64 rng(11);
    ModelSpec s = small_spec();
    s.max_seq_len = 16;
    s.head_dim = 8;
    const auto model = build_random_model(s, 4);
    const auto mask = random_mask(s.mask_shape(), rng);
    const auto tokens = random_tokens(16, 16, rng);
    const LossTargets targets{{5, 11, 15}, {3, 7, 1}};
    const auto grads = attention_grads(model, mask, tokens, targets, 6);
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int l = rng() % 2, h = rng() % 2, t = rng() % 16;
        const int lo = mask.head_full(l, h) ? 0 : std::max(0, t - 6 + 1);
        const int j = lo + static_cast<int>(rng() % (t - lo + 1));
        const double eps = 1e-4;
        const double up = test::mean_ce(test::reference_logits(model, mask, tokens, 6, test::Bump{l, h, t, j, eps}), targets);
        const double dn = test::mean_ce(test::reference_logits(model, mask, tokens, 6, test::Bump{l, h, t, j, -eps}), targets);
        const double fd = (up - dn) / (2 * eps);
        const double g = grads[l * 2 + h](t, j);
        CHECK(std::abs(g - fd) <= 1e-3 * std::max(std::abs(fd), 1e-4));
        ++checked;
    }
    CHECK(checked == 100);
    // strictly upper-triangular entries are structural zeros
    for (const auto& g : grads)
        for (int t = 0; t < 16; ++t)
            for (int j = t + 1; j < 16; ++j) CHECK(g(t, j) == 0.0);
}

TEST_CASE("uniform logits give finite gradients") {
    ModelSpec s = small_spec();
    s.max_seq_len = 8;
    ModelWeights w = build_random_model(s, 2).weights();
    w.unembedding.setZero();
    w.logit_bias.setZero();
    const ToyModel model(s, static_cast<int>(w.unembedding.rows()), w);
    const std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 8};
    const auto tr = forward_with_grads(model, HeadMask::all_full(s.mask_shape()), tokens, 8, {{7}, {2}},
                                       {.attention_grads = true});
    CHECK(tr.loss == doctest::Approx(std::log(16.0)));
    for (const auto& g : tr.attention_grads) CHECK(g.allFinite());
}

TEST_CASE("retrieval groups under SWA lose far needles") {
    const auto model = build_planted_model(standard_toy_spec(), standard_toy_circuit(), 0);
    const auto shape = model.spec().mask_shape();
    const auto mask = HeadMask::from_swa_groups(shape, standard_toy_circuit().retrieval_groups(model.spec()));
    NiahSpec ns;
    ns.seed = 21;
    const auto set = generate(ns, 200);
    int far = 0, lost = 0;
    for (const auto& ex : set.examples) {
        if (ex.needle_distance() <= 16) continue;
        ++far;
        const auto pred = predict_at(model, mask, ex.tokens, 16, ex.answer_positions);
        lost += pred[0] != ex.answer_tokens[0];
    }
    REQUIRE(far > 100);
    CHECK(lost >= 0.9 * far);
}

TEST_CASE("standard toy layout") {
    const auto s = standard_toy_spec();
    const auto c = standard_toy_circuit();
    CHECK(c.retrieval_groups(s) == std::vector<int>{1, 4, 5, 8, 9, 10});
    CHECK(c.group_role(s, 0, 0) == HeadRole::PrevToken);
    CHECK(c.group_role(s, 3, 2) == HeadRole::Local);
}

}
