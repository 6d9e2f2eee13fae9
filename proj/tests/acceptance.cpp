// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero when
// a criterion fails, except for failures listed as known below (still printed
// as FAIL). --strict makes those count too.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "hybridsel/analysis.hpp"
#include "hybridsel/baselines.hpp"
#include "hybridsel/hash.hpp"
#include "hybridsel/parallel.hpp"
#include "hybridsel/pipeline.hpp"
#include "support.hpp"

using namespace hybridsel;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
    bool known_failure = false;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

LossParams unit_params(double rho) {
    LossParams p;
    p.anchors = {0.0, 1.0};
    p.target_ratio = rho;
    return p;
}

// Deterministic rugged landscape over group bits: per-group weights plus
// pairwise couplings, so search order matters.
Oracle::ScoreFn landscape(std::uint64_t seed, int groups) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> w(groups);
    for (auto& x : w) x = u(rng);
    std::vector<std::tuple<int, int, double>> pairs;
    for (int k = 0; k < 2 * groups; ++k) pairs.emplace_back(rng() % groups, rng() % groups, u(rng) - 0.3);
    return [w, pairs](const HeadMask& m) {
        double s = 0;
        for (std::size_t g = 0; g < w.size(); ++g) s += m.group_full(static_cast<int>(g)) ? w[g] : 0.0;
        for (auto [a, b, c] : pairs)
            if (a != b && m.group_full(a) && m.group_full(b)) s += c;
        return s / static_cast<double>(w.size());
    };
}

HeadMask keep_only(const HeadMask& m, const std::function<bool(int)>& keep_group) {
    std::vector<int> swa;
    for (int g : m.swa_groups())
        if (keep_group(g)) swa.push_back(g);
    return HeadMask::from_swa_groups(m.shape(), swa);
}

double exhaustive_min(Oracle& oracle, const HeadMask& base, const std::vector<int>& groups, int quota,
                      const Penalty& pen) {
    std::vector<int> sub;
    FeasibleStream st(groups, quota);
    double best = 1e300;
    while (st.next(sub)) {
        HeadMask m = base;
        for (int g : groups) m = m.with_flat_group(g, true);
        for (int g : sub) m = m.with_flat_group(g, false);
        best = std::min(best, oracle.evaluate(m, pen).loss);
    }
    return best;
}

// ---------------------------------------------------------------- criterion 1

Outcome planted_recovery() {
    const auto spec = standard_toy_spec();
    const auto circuit = standard_toy_circuit();
    const auto retrieval = circuit.retrieval_groups(spec);
    int bosch_clean = 0;
    double single_kept = 0, layer_kept = 0;
    auto kept = [&](const HeadMask& m) {
        int k = 0;
        for (int g : retrieval) k += m.group_full(g);
        return k;
    };
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto model = build_planted_model(spec, circuit, seed);
        NiahSpec ns;
        ns.seed = derive_seed(seed, "calibration");
        const auto set = generate(ns, 64);
        BoschConfig cfg;
        cfg.rho = 10.0 / 16;
        cfg.window = 16;
        cfg.kappa = 100;
        cfg.seed = seed;
        Scorer scorer(model, set, cfg.window);
        auto oracle = make_search_oracle(scorer, cfg);
        const auto shape = spec.mask_shape();
        bosch_clean += kept(bosch(*oracle, shape, cfg).final_mask) == 6;
        single_kept += kept(ablation_single(*oracle, shape, cfg).final_mask);
        layer_kept += kept(ablation_layer(*oracle, shape, cfg).final_mask);
    }
    single_kept /= 10;
    layer_kept /= 10;
    const bool bosch_ok = bosch_clean >= 9;
    const bool ablations_ok = single_kept >= 4 && layer_kept >= 4;
    Outcome o;
    o.pass = bosch_ok && ablations_ok;
    o.detail = fmt("BOSCH keeps all 6 retrieval groups full in %d/10 seeds (need 9); B-single keeps %.1f/6, "
                   "B-layer %.1f/6 on average (need 4 each)",
                   bosch_clean, single_kept, layer_kept);
    // With ceil(rho*G) = 3 of 4 groups SWA per layer, B-single can keep at most one
    // group per layer (3 retrieval-hosting layers), and B-layer keeps one whole
    // layer (at most 3 retrieval groups). No arrangement of 6 groups over 4 layers
    // lets both reach 4, so only the BOSCH clause and the ceiling are checkable.
    if (bosch_ok && !ablations_ok && single_kept <= 3 && layer_kept <= 3) {
        o.known_failure = true;
        o.detail += "; the ablation clause exceeds the structural ceiling of 3";
    }
    return o;
}

// ---------------------------------------------------------------- criterion 2

Outcome brute_force_optimality() {
    const std::vector<MaskShape> shapes{{2, 4, 4}, {3, 4, 2}, {4, 8, 4}, {3, 6, 3}, {2, 8, 8}, {5, 4, 4}};
    const std::vector<double> rhos{0.25, 0.375, 0.5, 0.625, 0.75};
    const std::vector<std::uint64_t> kappas{10, 30, 100};
    int instances = 0, checked = 0, mismatches = 0;
    std::mt19937_64 rng(77);
    for (int inst = 0; inst < 24; ++inst) {
        const MaskShape shape = shapes[rng() % shapes.size()];
        BoschConfig cfg;
        cfg.rho = rhos[rng() % rhos.size()];
        cfg.kappa = kappas[rng() % kappas.size()];
        cfg.seed = rng();
        Oracle oracle(landscape(rng(), shape.num_groups()), unit_params(cfg.rho));
        const auto s1 = stage1(oracle, shape, cfg);
        const auto s2 = stage2(s1.s_best, s1.s_orig, cfg.rho, shape.heads, cfg);
        const auto plan = stage3(oracle, shape, s2, cfg);
        ++instances;

        // stage 1: layer l was solved with every deeper layer already committed
        const int q = ceil_count(cfg.rho * shape.groups);
        if (binomial(shape.groups, q) <= cfg.kappa) {
            for (int l = 0; l < shape.layers; ++l) {
                std::vector<int> groups(shape.groups);
                std::iota(groups.begin(), groups.end(), l * shape.groups);
                const auto base = keep_only(s1.mask_after, [&](int g) { return g / shape.groups > l; });
                const auto got = keep_only(s1.mask_after, [&](int g) { return g / shape.groups >= l; });
                const Penalty pen{heads_of_groups(shape, groups), double(q) / shape.groups};
                mismatches += oracle.evaluate(got, pen).loss != exhaustive_min(oracle, base, groups, q, pen);
                ++checked;
            }
        }
        // stage 3: buckets in descending ratio order, each on top of the earlier ones
        std::set<int> done_layers;
        for (const auto& e : plan.metadata.at("stage3")) {
            const auto layers = e.at("layers").get<std::vector<int>>();
            const double r = e.at("ratio").get<double>();
            std::vector<int> groups;
            int quota = 0;
            for (int l : layers) {
                for (int g = 0; g < shape.groups; ++g) groups.push_back(l * shape.groups + g);
                quota += std::min(shape.groups, ceil_count(r * shape.groups));
            }
            const bool small = r > 0 && quota < static_cast<int>(groups.size()) &&
                               binomial(static_cast<int>(groups.size()), quota) <= cfg.kappa * layers.size();
            if (small) {
                if (!e.value("brute_force", false)) ++mismatches;
                const auto base = keep_only(plan.final_mask, [&](int g) { return done_layers.count(g / shape.groups); });
                auto with = done_layers;
                with.insert(layers.begin(), layers.end());
                const auto got = keep_only(plan.final_mask, [&](int g) { return with.count(g / shape.groups); });
                const Penalty pen{heads_of_groups(shape, groups), double(quota) / groups.size()};
                mismatches += oracle.evaluate(got, pen).loss != exhaustive_min(oracle, base, groups, quota, pen);
                ++checked;
            }
            done_layers.insert(layers.begin(), layers.end());
        }
    }
    Outcome o;
    o.pass = instances >= 20 && checked >= 20 && mismatches == 0;
    o.detail = fmt("%d randomized instances, %d brute-force subproblems checked against enumeration, %d mismatches",
                   instances, checked, mismatches);
    return o;
}

// ---------------------------------------------------------------- criterion 3

Outcome gradient_oracle() {
    int entries = 0, bad = 0;
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ModelSpec s;
        s.num_layers = 2;
        s.heads_per_layer = 2;
        s.kv_groups = 1 + static_cast<int>(seed % 2);
        s.head_dim = 8;
        s.max_seq_len = 16;
        const auto model = build_random_model(s, seed);
        std::mt19937_64 rng(seed + 100);
        const auto mask = test::random_mask(s.mask_shape(), rng);
        const auto tokens = test::random_tokens(16, 16, rng);
        const LossTargets targets{{7, 12, 15}, {1, 4, 9}};
        const auto grads = attention_grads(model, mask, tokens, targets, 5);
        for (int k = 0; k < 30; ++k) {
            // probe only entries the head can see; the rest are structural zeros
            const int l = rng() % 2, h = rng() % 2, t = 3 + rng() % 13;
            const int lo = mask.head_full(l, h) ? 0 : std::max(0, t - 5 + 1);
            const int j = lo + static_cast<int>(rng() % (t - lo + 1));
            const double eps = 1e-4;
            const double up =
                test::mean_ce(test::reference_logits(model, mask, tokens, 5, test::Bump{l, h, t, j, eps}), targets);
            const double dn =
                test::mean_ce(test::reference_logits(model, mask, tokens, 5, test::Bump{l, h, t, j, -eps}), targets);
            const double fd = (up - dn) / (2 * eps);
            const double g = grads[l * 2 + h](t, j);
            // relative error with a 1e-4 floor on the denominator
            const double rel = std::abs(g - fd) / std::max(std::abs(fd), 1e-4);
            worst = std::max(worst, rel);
            bad += rel > 1e-3;
            ++entries;
        }
        for (int l = 0; l < 2; ++l)
            for (int h = 0; h < 2; ++h)
                for (int t = 0; t < 16; ++t)
                    for (int j = 0; j < 16; ++j) {
                        const bool visible = j <= t && (mask.head_full(l, h) || j > t - 5);
                        bad += !visible && grads[l * 2 + h](t, j) != 0.0;
                    }
    }
    Outcome o;
    o.pass = entries >= 100 && bad == 0;
    o.detail = fmt("%d in-support entries over 5 models, max relative error %.2e; masked entries exactly zero", entries, worst);
    return o;
}

// ---------------------------------------------------------------- criterion 4

Outcome swa_identity() {
    const auto model = build_planted_model(standard_toy_spec(), standard_toy_circuit(), 0);
    std::mt19937_64 rng(4);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const int T = 32 + static_cast<int>(rng() % 97);
        const auto tokens = test::random_tokens(T, 16, rng);
        const auto full = forward(model, HeadMask::all_full(model.spec().mask_shape()), tokens, T).logits;
        const auto mask = test::random_mask(model.spec().mask_shape(), rng);
        const int W = T + static_cast<int>(rng() % 8);
        worst = std::max(worst, (forward(model, mask, tokens, W).logits - full).cwiseAbs().maxCoeff());
    }
    Outcome o;
    o.pass = worst <= 1e-5;
    o.detail = fmt("100 random masks with W >= T, max |logit difference| %.2e", worst);
    return o;
}

// ---------------------------------------------------------------- criterion 5

Outcome turnover_arithmetic() {
    struct Cell {
        double rs, rl;
        int t, tt;
    };
    const Cell table[] = {{0.25, 0.5, 30, 30}, {0.5, 0.75, 15, 30}, {0.75, 0.875, 6, 36},
                          {0.25, 0.5, 26, 26}, {0.5, 0.75, 15, 29}, {0.75, 0.875, 7, 44},
                          {0.25, 0.5, 28, 28}, {0.5, 0.75, 16, 31}, {0.75, 0.875, 5, 31},
                          {0.25, 0.5, 29, 29}, {0.5, 0.75, 16, 31}, {0.75, 0.875, 6, 34}};
    const bool tmax = turnover_max(0.5, 0.75) == 0.5;
    const double cell = 100 * 0.06 / turnover_max(0.75, 0.875);
    int consistent = 0;
    for (const auto& c : table) {
        const double tm = turnover_max(c.rs, c.rl);
        consistent += c.tt + 0.5 >= (c.t - 0.5) / tm && c.tt - 0.5 <= (c.t + 0.5) / tm;
    }
    // and the implemented turnover() agrees with the closed form on a concrete pair
    const MaskShape shape{4, 8, 4};
    const auto t = turnover({"x", 0.5, shape, {0, 1, 2, 3, 4, 5, 6, 7}}, {"x", 0.75, shape, {0, 1, 2, 3, 4, 5, 8, 9, 10, 11, 12, 13}});
    Outcome o;
    o.pass = tmax && std::abs(cell - 36) <= 0.5 && consistent == 12 && t.t_tilde == 0.5;
    o.detail = fmt("T_max(0.5,0.75) = %g, 6%% at (0.75,0.875) -> %.2f%%, %d/12 table pairs consistent",
                   turnover_max(0.5, 0.75), cell, consistent);
    return o;
}

// ---------------------------------------------------------------- criterion 6

Outcome quota_invariants() {
    int made = 0, violations = 0;
    std::map<std::string, int> by_producer;
    std::mt19937_64 rng(606);
    auto check = [&](const char* producer, const HeadMask& m, int expected_swa) {
        ++made;
        ++by_producer[producer];
        const auto& s = m.shape();
        const auto bits = m.head_bits();
        bool ok = static_cast<int>(bits.size()) == s.num_heads();
        for (int l = 0; ok && l < s.layers; ++l)
            for (int h = 0; h < s.heads; ++h) ok = ok && bits[l * s.heads + h] == m.group_full(l, s.group_of_head(h));
        ok = ok && HeadMask::from_head_bits(s, bits) == m;
        ok = ok && mask_from_json(mask_to_json(m, "h")) == m;
        if (expected_swa >= 0) ok = ok && m.swa_group_count() == expected_swa;
        violations += !ok;
    };
    const std::vector<MaskShape> shapes{{2, 4, 4}, {3, 4, 2}, {4, 8, 4}, {2, 6, 3}, {3, 8, 8}, {4, 4, 1}};
    const std::vector<double> rhos{0.0, 0.25, 0.3, 0.5, 0.625, 0.75, 1.0};
    for (int i = 0; made < 10000; ++i) {
        const MaskShape s = shapes[rng() % shapes.size()];
        const double rho = rhos[rng() % rhos.size()];
        const int n = s.num_groups();
        std::vector<int> all(n);
        std::iota(all.begin(), all.end(), 0);
        switch (i % 10) {
            case 0: {
                std::vector<int> swa;
                for (int g = 0; g < n; ++g)
                    if (rng() & 1) swa.push_back(g);
                check("from_swa_groups", HeadMask::from_swa_groups(s, swa), static_cast<int>(swa.size()));
                break;
            }
            case 1: {
                HeadMask m = HeadMask::all_full(s);
                for (int e = 0; e < 5; ++e) m = m.with_group(rng() % s.layers, rng() % s.groups, rng() & 1);
                check("with_group", m, -1);
                break;
            }
            case 2: {
                const int q = static_cast<int>(rng() % (n + 1));
                FeasibleStream st(all, q);
                std::vector<int> sub;
                for (int k = 0; k < 8 && st.next(sub); ++k) check("enumerate_feasible", HeadMask::from_swa_groups(s, sub), q);
                break;
            }
            case 3:
            case 4: {
                const int q = static_cast<int>(rng() % (n + 1));
                Oracle oracle(landscape(rng(), n), unit_params(rho));
                const std::uint64_t budget = 5 + rng() % 40;
                const auto r = solve_groups(all, q, HeadMask::all_full(s), budget, rng(), oracle, 2 + rng() % 12);
                check("solve_groups", r.best_mask, q);
                for (const auto& sh : split_into_subproblems(all, q, 3, budget))
                    check("shard", HeadMask::from_swa_groups(s, sh.groups), static_cast<int>(sh.groups.size()));
                break;
            }
            case 5: {
                BoschConfig cfg;
                cfg.rho = rho;
                cfg.kappa = 3 + rng() % 10;
                cfg.seed = rng();
                Oracle oracle(landscape(rng(), n), unit_params(rho));
                const auto s1 = stage1(oracle, s, cfg);
                check("stage1", s1.mask_after, s.layers * ceil_count(rho * s.groups));
                const auto s2 = stage2(s1.s_best, s1.s_orig, rho, s.heads, cfg);
                int want = 0;
                for (double r : s2.r) want += std::min(s.groups, ceil_count(r * s.groups));
                check("stage3", stage3(oracle, s, s2, cfg).final_mask, want);
                break;
            }
            case 6: {
                BoschConfig cfg;
                cfg.rho = rho;
                cfg.kappa = 3 + rng() % 10;
                Oracle oracle(landscape(rng(), n), unit_params(rho));
                const int lpb = 1 + static_cast<int>(rng() % s.layers);
                check("b-multi", ablation_multi(oracle, s, cfg, lpb).final_mask, s.layers * ceil_count(rho * s.groups));
                check("b-layer", ablation_layer(oracle, s, cfg).final_mask, ceil_count(rho * s.layers) * s.groups);
                break;
            }
            case 7: {
                for (auto k : {LayerHeuristic::Rand, LayerHeuristic::Bme, LayerHeuristic::Intr})
                    check("heuristic", heuristic(k, s, rho, rng()).final_mask, ceil_count(rho * s.layers) * s.groups);
                break;
            }
            case 8: {
                HeadScoreTable t;
                t.layers = s.layers;
                t.heads = s.heads;
                t.direction = rng() & 1 ? Direction::ConvertHighestFirst : Direction::ConvertLowestFirst;
                for (int h = 0; h < s.num_heads(); ++h) t.scores.push_back(static_cast<double>(rng() % 7));
                check("select_mask", select_mask(t, rho, s), std::min(n, ceil_count(rho * n)));
                break;
            }
            default: {
                std::vector<int> large, small;
                for (int g = 0; g < n; ++g) {
                    if (rng() % 3) large.push_back(g);
                    if (rng() % 4 == 0) small.push_back(g);
                }
                const SelectionSet L{"x", 0.5, s, large}, S{"x", 0.25, s, small};
                bool any_new = false;
                for (int g : small) any_new = any_new || !std::binary_search(large.begin(), large.end(), g);
                int missing = 0;
                for (int g : small) missing += !std::binary_search(large.begin(), large.end(), g);
                if (any_new && missing <= static_cast<int>(large.size()))
                    check("head_swap", head_swap_experiment(L, S, rng()), static_cast<int>(large.size()));
                else
                    check("from_swa_groups", HeadMask::from_swa_groups(s, large), static_cast<int>(large.size()));
            }
        }
    }
    Outcome o;
    o.pass = violations == 0;
    o.detail = fmt("%d masks from %zu producers, %d coupling or quota violations", made, by_producer.size(), violations);
    return o;
}

// ---------------------------------------------------------------- criterion 7

Outcome stage2_identity() {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0, 1);
    BoschConfig cfg;
    double min_gap = 1;
    for (std::size_t i = 1; i < cfg.buckets.size(); ++i) min_gap = std::min(min_gap, cfg.buckets[i] - cfg.buckets[i - 1]);
    int exact = 0, bounded = 0, reported = 0, non_grid = 0;
    auto random_scores = [&](int L) {
        std::vector<double> s(L);
        double v = 1.0;
        for (int l = L - 1; l >= 0; --l) s[l] = v -= 0.1 * u(rng) * v;
        return s;
    };
    for (int i = 0; i < 50; ++i) {
        const int L = 2 + static_cast<int>(rng() % 30), H = 4 * (1 + static_cast<int>(rng() % 4));
        // rho * L * H on the grid of H/4 steps
        const int k = static_cast<int>(rng() % (4 * L + 1));
        const double rho = static_cast<double>(k) / (4 * L);
        const auto r = stage2(random_scores(L), 1.0, rho, H, cfg);
        double heads = 0;
        for (double x : r.r) heads += x * H;
        exact += r.residual == 0.0 && std::abs(heads - rho * L * H) < 1e-9;
    }
    for (int i = 0; i < 50; ++i) {
        const int L = 2 + static_cast<int>(rng() % 30), H = 4 * (1 + static_cast<int>(rng() % 4));
        const double rho = u(rng);
        const double target = rho * L * H, step = H * min_gap;
        if (std::abs(target / step - std::round(target / step)) < 1e-9) continue;
        ++non_grid;
        const auto r = stage2(random_scores(L), 1.0, rho, H, cfg);
        double heads = 0;
        for (double x : r.r) heads += x * H;
        bounded += std::abs(r.residual) < step;
        reported += r.residual != 0.0 && std::abs(r.residual - (target - heads)) < 1e-9;
    }
    Outcome o;
    o.pass = exact == 50 && non_grid > 0 && bounded == non_grid && reported == non_grid;
    o.detail = fmt("grid budgets: %d/50 exact; off-grid: %d/%d within H*min gap, %d/%d residual reported", exact,
                   bounded, non_grid, reported, non_grid);
    return o;
}

// ---------------------------------------------------------------- criterion 8

Outcome baseline_sanity() {
    const auto spec = standard_toy_spec();
    const auto circuit = standard_toy_circuit();
    const auto retrieval = circuit.retrieval_groups(spec);
    const auto shape = spec.mask_shape();
    int rank_fail = 0, mono_fail = 0, runs = 0;
    double worst_share = 1.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto model = build_planted_model(spec, circuit, seed);
        NiahSpec ns;
        ns.seed = derive_seed(seed, "calibration");
        const auto set = generate(ns, 32);
        for (auto method : {BaselineMethod::Razor, BaselineMethod::Fisher}) {
            BaselineConfig cfg;
            cfg.seed = seed;
            const auto order = conversion_order(run_baseline(method, model, set, cfg), shape);
            // globality = position in conversion order (converted last = most global)
            std::vector<int> pos(order.size());
            for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = static_cast<int>(i);
            std::vector<int> others;
            for (int g = 0; g < shape.num_groups(); ++g)
                if (!std::count(retrieval.begin(), retrieval.end(), g)) others.push_back(pos[g]);
            for (int g : retrieval) {
                const double share =
                    std::count_if(others.begin(), others.end(), [&](int p) { return p < pos[g]; }) / double(others.size());
                worst_share = std::min(worst_share, share);
                rank_fail += share < 0.75;
            }
            ++runs;
        }
        for (auto method : {BaselineMethod::Dcam, BaselineMethod::Fisher}) {
            std::vector<std::vector<double>> by_w;
            for (int W : {4, 8, 16, 32}) {
                BaselineConfig cfg;
                cfg.window = W;
                by_w.push_back(run_baseline(method, model, set, cfg).scores);
            }
            for (std::size_t h = 0; h < by_w[0].size(); ++h)
                for (std::size_t k = 1; k < by_w.size(); ++k) mono_fail += by_w[k][h] < by_w[k - 1][h];
        }
    }
    Outcome o;
    o.pass = rank_fail == 0 && mono_fail == 0;
    o.detail = fmt("Razor and Fisher over %d runs: every retrieval group more global than >= %.0f%% of the other groups "
                   "(need 75%%); %d window-monotonicity violations",
                   runs, 100 * worst_share, mono_fail);
    return o;
}

// ---------------------------------------------------------------- criterion 9

Outcome qada_exactness() {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0, 1);
    double worst = 0;
    int rows = 0;
    for (int inst = 0; inst < 20; ++inst) {
        const int T = 48 + static_cast<int>(rng() % 80), W = 4 + static_cast<int>(rng() % 16), dk = 4 + static_cast<int>(rng() % 12);
        const int buffer = 1 + static_cast<int>(rng() % 16);
        const double tau = 0.1 + 0.4 * std::abs(n(rng));
        Matrix keys(T, dk);
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < dk; ++c) keys(t, c) = n(rng);
        Eigen::RowVectorXd far(dk), q(dk);
        for (int c = 0; c < dk; ++c) far(c) = n(rng), q(c) = n(rng);
        for (int t = W; t < T; ++t) {
            Matrix k = keys;
            for (int j = 0; j <= t - W; ++j) k.row(j) = far;
            worst = std::max(worst, std::abs(qada_row(q, k, t, W, buffer, tau) - exact_local_fraction(q, k, t, W, tau)));
            ++rows;
        }
    }
    Outcome o;
    o.pass = worst <= 1e-6;
    o.detail = fmt("%d rows with constant far keys, max |estimate - exact| %.2e", rows, worst);
    return o;
}

// ---------------------------------------------------------------- criterion 10

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        out[e.path().filename().string()] = ss.str();
    }
    return out;
}

Outcome cli_determinism(const std::string& cli) {
    Outcome o;
    if (cli.empty() || !fs::exists(cli)) {
        o.detail = "CLI binary not found (pass --cli)";
        return o;
    }
    const auto root = fs::temp_directory_path() / "hybridsel_acceptance";
    fs::remove_all(root);
    const std::vector<std::string> methods{"bosch", "b-single", "b-multi", "b-layer", "rand", "bme", "intr",
                                           "dcam",  "apl",      "proxy",   "qada",    "razor", "fisher"};
    int failures = 0, commands = 0;
    std::map<std::string, std::string> reference;
    std::string first_diff;
    for (const auto& [label, threads] : std::vector<std::pair<std::string, int>>{{"t1", 1}, {"t1b", 1}, {"t4", 4}, {"t8", 8}}) {
        const fs::path dir = root / label;
        auto run = [&](const std::string& args) {
            const std::string cmd = "\"" + cli + "\" " + args + " --out \"" + dir.string() + "\" --threads " +
                                    std::to_string(threads) + " --seed 3 > /dev/null";
            ++commands;
            failures += std::system(cmd.c_str()) != 0;
        };
        run("gen");
        std::string plans;
        for (const auto& m : methods) {
            run("search --method " + m + " --rho 0.625");
            plans += " \"" + (dir / ("plan_" + m + "_rho0.625.json")).string() + "\"";
        }
        run("search --method bosch --rho 0.25");
        plans += " \"" + (dir / "plan_bosch_rho0.25.json").string() + "\"";
        run("eval" + plans);
        run("analyze" + plans);
        const auto snap = snapshot(dir);
        if (reference.empty()) {
            reference = snap;
        } else if (snap != reference && first_diff.empty()) {
            for (const auto& [name, bytes] : reference)
                if (!snap.count(name) || snap.at(name) != bytes) {
                    first_diff = label + ":" + name;
                    break;
                }
            if (first_diff.empty()) first_diff = label + ": file set differs";
        }
    }
    o.pass = failures == 0 && first_diff.empty() && reference.size() >= 30;
    o.detail = fmt("%d commands (gen, search x %zu, eval, analyze) at 1, 1, 4, 8 threads; %zu files compared; %d failed "
                   "commands%s%s",
                   commands, methods.size() + 1, reference.size(), failures, first_diff.empty() ? "" : "; first difference ",
                   first_diff.c_str());
    if (o.pass) fs::remove_all(root);
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string cli;
    std::vector<int> only;
    bool strict = false;
    app.add_option("--cli", cli, "path to the hybridsel binary");
    app.add_option("--criterion", only, "run only these criteria");
    app.add_flag("--strict", strict, "count known failures");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"planted recovery", planted_recovery},
        {"brute-force optimality", brute_force_optimality},
        {"gradient oracle", gradient_oracle},
        {"SWA identity", swa_identity},
        {"turnover arithmetic", turnover_arithmetic},
        {"quota/GQA invariants", quota_invariants},
        {"stage-2 budget identity", stage2_identity},
        {"baseline sanity", baseline_sanity},
        {"QAdA degenerate exactness", qada_exactness},
        {"determinism", [&] { return cli_determinism(cli); }},
    };
    int hard_failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
                  << (o.known_failure && !o.pass ? " [known, see README]" : "") << " [" << fmt("%.1fs", secs) << "]"
                  << std::endl;
        if (!o.pass && (strict || !o.known_failure)) ++hard_failures;
    }
    return hard_failures == 0 ? 0 : 1;
}
