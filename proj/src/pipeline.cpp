#include "hybridsel/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "hybridsel/error.hpp"
#include "hybridsel/hash.hpp"

namespace hybridsel {

namespace {

constexpr double kEps = 1e-9;

std::uint64_t stream_seed(std::uint64_t seed, const std::string& name) { return derive_seed(seed, name); }

std::vector<int> layer_groups(const MaskShape& shape, int layer) {
    std::vector<int> out(shape.groups);
    std::iota(out.begin(), out.end(), layer * shape.groups);
    return out;
}

// numpy.percentile with linear interpolation.
double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

HybridPlan make_plan(std::string method, HeadMask mask, double rho, std::uint64_t evals) {
    HybridPlan p;
    p.method = std::move(method);
    p.achieved_ratio = ratio(mask);
    p.final_mask = std::move(mask);
    p.target_ratio = rho;
    p.evals = evals;
    return p;
}

nlohmann::json stage1_json(const StageOneReport& r) {
    return {{"s_best", r.s_best}, {"s_orig", r.s_orig}, {"evals", r.evals}};
}

}  // namespace

int ceil_count(double x) { return static_cast<int>(std::ceil(x - kEps)); }

void BoschConfig::validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
    if (window < 1) throw ConfigError("window must be >= 1");
    if (kappa < 1) throw ConfigError("kappa must be >= 1");
    if (buckets.size() < 2) throw ConfigError("need at least two bucket ratios");
    for (std::size_t i = 0; i < buckets.size(); ++i) {
        if (buckets[i] < 0.0 || buckets[i] > 1.0) throw ConfigError("bucket ratios must lie in [0, 1]");
        if (i > 0 && !(buckets[i] > buckets[i - 1])) throw ConfigError("bucket ratios must be strictly increasing");
    }
    if (!(p_low >= 0.0 && p_low < p_high && p_high <= 100.0)) throw ConfigError("need 0 <= p_low < p_high <= 100");
    if (!(alpha > 0.0) || !(gamma > 0.0)) throw ConfigError("alpha and gamma must be positive");
    if (max_vars < 2) throw ConfigError("max_vars must be >= 2");
}

std::unique_ptr<Oracle> make_search_oracle(Scorer& scorer, const BoschConfig& config) {
    config.validate();
    const auto shape = scorer.model().spec().mask_shape();
    const HeadMask full = HeadMask::all_full(shape), swa = HeadMask::all_swa(shape);
    const double s_full = scorer.score(full), s_swa = scorer.score(swa);
    LossParams params;
    params.alpha = config.alpha;
    params.gamma = config.gamma;
    params.target_ratio = config.rho;
    params.anchors = anchors_from_scores(s_swa, s_full, config.gamma);
    auto oracle = std::make_unique<Oracle>([&scorer](const HeadMask& m) { return scorer.score(m); }, params);
    oracle->prime(full, s_full);
    oracle->prime(swa, s_swa);
    return oracle;
}

StageOneReport stage1(Oracle& oracle, const MaskShape& shape, const BoschConfig& config, int layers_per_block) {
    config.validate();
    if (layers_per_block < 1) throw ConfigError("layers_per_group must be >= 1");
    const int L = shape.layers;
    const int per_layer = ceil_count(config.rho * shape.groups);
    StageOneReport rep;
    rep.s_best.assign(L, 0.0);
    rep.s_orig = oracle.evaluate(HeadMask::all_full(shape)).score;
    HeadMask mask = HeadMask::all_full(shape);
    // Blocks are aligned from layer 0 and visited deepest first.
    const int blocks = (L + layers_per_block - 1) / layers_per_block;
    for (int b = blocks - 1; b >= 0; --b) {
        const int lo = b * layers_per_block, hi = std::min(L, lo + layers_per_block);
        std::vector<int> groups;
        for (int l = lo; l < hi; ++l) {
            const auto g = layer_groups(shape, l);
            groups.insert(groups.end(), g.begin(), g.end());
        }
        const int nl = hi - lo;
        const SearchResult r =
            solve_groups(groups, per_layer * nl, mask, config.kappa * nl,
                         stream_seed(config.seed, "stage1/" + std::to_string(lo)), oracle, config.max_vars, config.swap);
        mask = r.best_mask;
        // Re-read the committed mask's score; it is a cache hit.
        const double s = oracle.evaluate(mask).score;
        for (int l = lo; l < hi; ++l) rep.s_best[l] = s;
        rep.evals.push_back(r.evals_used);
    }
    rep.mask_after = std::move(mask);
    return rep;
}

AdaptiveRatios stage2(const std::vector<double>& s_best, double s_orig, double rho, int heads_per_layer,
                      const BoschConfig& config) {
    config.validate();
    if (!(s_orig > 0.0)) throw DegenerateError("stage 2: the full-attention score is zero");
    const int L = static_cast<int>(s_best.size());
    if (L == 0) throw std::invalid_argument("stage 2: no layers");
    const int B = static_cast<int>(config.buckets.size());
    const double H = heads_per_layer;
    const auto& b = config.buckets;

    AdaptiveRatios out;
    out.rows.resize(L);
    std::vector<double> delta(L + 1, 0.0), d(L);
    for (int l = 0; l < L; ++l) delta[l] = (s_orig - s_best[l]) / s_orig;
    for (int l = 0; l < L; ++l) d[l] = delta[l] - delta[l + 1];
    const double qlo = percentile(d, config.p_low), qhi = percentile(d, config.p_high);
    std::vector<double> w(L, 0.0);
    for (int l = 0; l < L; ++l) {
        const double clipped = std::min(std::max(d[l], qlo), qhi);
        w[l] = qhi > qlo ? (clipped - qlo) / (qhi - qlo) : 0.0;
    }

    // Hardest first; equal weights keep layer order, so deeper layers count as easier.
    std::vector<int> hard(L);
    std::iota(hard.begin(), hard.end(), 0);
    std::stable_sort(hard.begin(), hard.end(), [&](int x, int y) { return w[x] > w[y]; });
    const std::vector<int> easy(hard.rbegin(), hard.rend());

    std::vector<int> rank(L);
    for (int j = 0, at = 0; j < B; ++j) {
        const int size = L / B + (j < L % B ? 1 : 0);
        for (int k = 0; k < size; ++k) rank[hard[at++]] = j;
    }
    for (int l = 0; l < L; ++l) out.rows[l].initial_rank = rank[l];

    out.target_heads = rho * L * H;
    double gap = out.target_heads;
    for (int l = 0; l < L; ++l) gap -= b[rank[l]] * H;

    // A pass that cannot move any layer without overshooting ends the loop and
    // leaves the residual on record.
    while (std::abs(gap) > kEps) {
        bool moved = false;
        if (gap > 0) {
            for (int l : easy) {
                if (rank[l] >= B - 1) continue;
                const double step = H * (b[rank[l] + 1] - b[rank[l]]);
                if (step <= gap + kEps) {
                    ++rank[l];
                    gap -= step;
                    moved = true;
                    ++out.moves;
                    if (std::abs(gap) <= kEps) break;
                }
            }
        } else {
            for (int l : hard) {
                if (rank[l] <= 0) continue;
                const double step = H * (b[rank[l]] - b[rank[l] - 1]);
                if (step <= -gap + kEps) {
                    --rank[l];
                    gap += step;
                    moved = true;
                    ++out.moves;
                    if (std::abs(gap) <= kEps) break;
                }
            }
        }
        if (!moved) break;
    }
    out.residual = std::abs(gap) <= kEps ? 0.0 : gap;
    out.r.resize(L);
    for (int l = 0; l < L; ++l) {
        out.r[l] = b[rank[l]];
        out.rows[l].delta = delta[l];
        out.rows[l].d = d[l];
        out.rows[l].w = w[l];
        out.rows[l].rank = rank[l];
    }
    return out;
}

HybridPlan stage3(Oracle& oracle, const MaskShape& shape, const AdaptiveRatios& ratios, const BoschConfig& config) {
    config.validate();
    const int L = shape.layers, G = shape.groups;
    if (static_cast<int>(ratios.r.size()) != L) throw std::invalid_argument("stage 3: one ratio per layer expected");
    std::map<double, std::vector<int>, std::greater<>> buckets;
    for (int l = 0; l < L; ++l) buckets[ratios.r[l]].push_back(l);

    HeadMask mask = HeadMask::all_full(shape);
    std::uint64_t evals = 0;
    nlohmann::json log = nlohmann::json::array();
    for (const auto& [r, layers] : buckets) {
        nlohmann::json entry{{"ratio", r}, {"layers", layers}, {"evals", 0}, {"searched", false}};
        if (r <= kEps) {
            log.push_back(std::move(entry));
            continue;
        }
        std::vector<int> groups;
        int quota = 0;
        for (int l : layers) {
            const auto g = layer_groups(shape, l);
            groups.insert(groups.end(), g.begin(), g.end());
            quota += std::min(G, ceil_count(r * G));
        }
        if (quota == static_cast<int>(groups.size())) {
            GroupVector bits = mask.groups();
            for (int g : groups) bits.full[g] = 0;
            mask = HeadMask::from_groups(shape, std::move(bits));
            log.push_back(std::move(entry));
            continue;
        }
        const SearchResult res =
            solve_groups(groups, quota, mask, config.kappa * layers.size(),
                         stream_seed(config.seed, "stage3/" + std::to_string(layers.front())), oracle,
                         config.max_vars, config.swap);
        mask = res.best_mask;
        evals += res.evals_used;
        entry["evals"] = res.evals_used;
        entry["searched"] = true;
        entry["brute_force"] = res.brute_force;
        log.push_back(std::move(entry));
    }
    HybridPlan plan = make_plan("bosch", std::move(mask), config.rho, evals);
    plan.metadata["stage3"] = std::move(log);
    return plan;
}

HybridPlan bosch(Oracle& oracle, const MaskShape& shape, const BoschConfig& config) {
    const StageOneReport s1 = stage1(oracle, shape, config);
    const AdaptiveRatios s2 = stage2(s1.s_best, s1.s_orig, config.rho, shape.heads, config);
    HybridPlan plan = stage3(oracle, shape, s2, config);
    std::uint64_t stage1_evals = 0;
    for (auto e : s1.evals) stage1_evals += e;
    plan.evals += stage1_evals;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : s2.rows) {
        rows.push_back({{"delta", row.delta}, {"d", row.d}, {"w", row.w}, {"initial_rank", row.initial_rank},
                        {"rank", row.rank}});
    }
    plan.metadata["stage1"] = stage1_json(s1);
    plan.metadata["stage2"] = {{"r", s2.r}, {"layers", rows}, {"target_heads", s2.target_heads},
                               {"residual", s2.residual}, {"moves", s2.moves}};
    return plan;
}

HybridPlan bosch(const ToyModel& model, const CalibrationSet& set, const BoschConfig& config) {
    Scorer scorer(model, set, config.window);
    auto oracle = make_search_oracle(scorer, config);
    return bosch(*oracle, model.spec().mask_shape(), config);
}

HybridPlan ablation_single(Oracle& oracle, const MaskShape& shape, const BoschConfig& config) {
    const StageOneReport s1 = stage1(oracle, shape, config);
    std::uint64_t evals = std::accumulate(s1.evals.begin(), s1.evals.end(), std::uint64_t{0});
    HybridPlan plan = make_plan("b-single", s1.mask_after, config.rho, evals);
    plan.metadata["stage1"] = stage1_json(s1);
    return plan;
}

HybridPlan ablation_multi(Oracle& oracle, const MaskShape& shape, const BoschConfig& config, int layers_per_group) {
    const StageOneReport s1 = stage1(oracle, shape, config, layers_per_group);
    std::uint64_t evals = std::accumulate(s1.evals.begin(), s1.evals.end(), std::uint64_t{0});
    HybridPlan plan = make_plan("b-multi", s1.mask_after, config.rho, evals);
    plan.metadata["stage1"] = stage1_json(s1);
    plan.metadata["layers_per_group"] = layers_per_group;
    return plan;
}

HybridPlan ablation_layer(Oracle& oracle, const MaskShape& shape, const BoschConfig& config) {
    config.validate();
    SearchProblem p;
    for (int l = 0; l < shape.layers; ++l) p.units.push_back(layer_groups(shape, l));
    p.quota = ceil_count(config.rho * shape.layers);
    p.frozen = HeadMask::all_full(shape);
    p.budget = config.kappa * shape.layers;
    p.max_vars = config.max_vars;
    p.seed = stream_seed(config.seed, "layer");
    const SearchResult r = solve(p, oracle, config.swap);
    HybridPlan plan = make_plan("b-layer", r.best_mask, config.rho, r.evals_used);
    plan.metadata["swa_layers"] = r.best_units;
    plan.metadata["brute_force"] = r.brute_force;
    return plan;
}

std::vector<int> heuristic_full_layers(LayerHeuristic kind, int L, double rho, std::uint64_t seed) {
    if (L < 1) throw std::invalid_argument("heuristic: need at least one layer");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("heuristic: rho must lie in [0, 1]");
    const int n_swa = ceil_count(rho * L);
    const int n_full = L - n_swa;
    std::vector<int> full;
    switch (kind) {
        case LayerHeuristic::Rand: {
            std::mt19937_64 rng(seed);
            std::vector<int> ids(L);
            std::iota(ids.begin(), ids.end(), 0);
            for (int i = 0; i < L - 1; ++i) std::swap(ids[i], ids[i + rng() % (L - i)]);
            full.assign(ids.begin() + n_swa, ids.end());
            break;
        }
        case LayerHeuristic::Intr:
            for (int k = 0; k < n_full; ++k) full.push_back(static_cast<int>(std::llround(double(k) * L / n_full)));
            break;
        case LayerHeuristic::Bme: {
            int prefix = n_full / 3, middle = n_full / 3, suffix = n_full / 3;
            if (n_full % 3 == 1) ++middle;
            if (n_full % 3 == 2) ++prefix, ++suffix;
            for (int i = 0; i < prefix; ++i) full.push_back(i);
            const int gap_lo = prefix, gap_len = L - prefix - suffix;
            const int start = gap_lo + (gap_len - middle) / 2;
            for (int i = 0; i < middle; ++i) full.push_back(start + i);
            for (int i = 0; i < suffix; ++i) full.push_back(L - suffix + i);
            break;
        }
    }
    std::sort(full.begin(), full.end());
    return full;
}

HybridPlan heuristic(LayerHeuristic kind, const MaskShape& shape, double rho, std::uint64_t seed) {
    shape.validate();
    const auto full = heuristic_full_layers(kind, shape.layers, rho, seed);
    GroupVector bits{std::vector<std::uint8_t>(shape.num_groups(), 0)};
    for (int l : full)
        for (int g : layer_groups(shape, l)) bits.full[g] = 1;
    static const char* names[] = {"rand", "bme", "intr"};
    HybridPlan plan = make_plan(names[static_cast<int>(kind)], HeadMask::from_groups(shape, std::move(bits)), rho, 0);
    plan.metadata["full_layers"] = full;
    return plan;
}

nlohmann::json plan_to_json(const HybridPlan& plan, const std::string& model_spec_hash) {
    nlohmann::json doc = mask_to_json(plan.final_mask, model_spec_hash);
    doc["method"] = plan.method;
    doc["target_ratio"] = plan.target_ratio;
    doc["achieved_ratio"] = plan.achieved_ratio;
    doc["evals"] = plan.evals;
    doc["metadata"] = plan.metadata;
    return doc;
}

HybridPlan plan_from_json(const nlohmann::json& doc) {
    HybridPlan p;
    p.final_mask = mask_from_json(doc);
    p.method = doc.value("method", std::string("unknown"));
    p.target_ratio = doc.value("target_ratio", ratio(p.final_mask));
    p.achieved_ratio = ratio(p.final_mask);
    p.evals = doc.value("evals", std::uint64_t{0});
    p.metadata = doc.value("metadata", nlohmann::json::object());
    return p;
}

}  // namespace hybridsel
