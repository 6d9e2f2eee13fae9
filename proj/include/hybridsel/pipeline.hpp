#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridsel/calibration.hpp"
#include "hybridsel/objective.hpp"
#include "hybridsel/optimizer.hpp"

namespace hybridsel {

struct BoschConfig {
    double rho = 0.5;
    int window = 16;
    std::uint64_t kappa = 100;
    std::vector<double> buckets{0.0, 0.25, 0.5, 0.75, 1.0};
    double p_low = 2.5;
    double p_high = 97.5;
    double alpha = 100.0;
    double gamma = 0.2;
    int max_vars = 50;
    std::uint64_t seed = 0;
    SwapOptions swap;

    void validate() const;
};

// ceil() that ignores floating-point fuzz just above an integer (0.625 * 16 etc).
int ceil_count(double x);

struct StageOneReport {
    std::vector<double> s_best;  // per layer, after committing that layer
    double s_orig = 0.0;
    HeadMask mask_after;
    std::vector<std::uint64_t> evals;  // per searched block, top block first
};

struct StageTwoRow {
    double delta = 0.0;  // relative drop from the full model, positive = worse
    double d = 0.0;      // drop added by this layer
    double w = 0.0;      // normalized weight, low = easy to localize
    int initial_rank = 0;
    int rank = 0;
};

struct AdaptiveRatios {
    std::vector<double> r;
    std::vector<StageTwoRow> rows;
    double target_heads = 0.0;
    double residual = 0.0;  // target minus assigned SWA heads after reconciliation
    int moves = 0;
};

struct HybridPlan {
    std::string method;
    HeadMask final_mask;
    double target_ratio = 0.0;
    double achieved_ratio = 0.0;
    std::uint64_t evals = 0;
    nlohmann::json metadata = nlohmann::json::object();
};

// Oracle over a Scorer with anchors measured up front. The two anchor masks are
// primed into the cache, so they never count as search evaluations.
std::unique_ptr<Oracle> make_search_oracle(Scorer& scorer, const BoschConfig& config);

// Top-down per-layer search with quota ceil(rho * G) groups and budget kappa per
// layer. layers_per_block > 1 searches consecutive layer blocks jointly.
StageOneReport stage1(Oracle& oracle, const MaskShape& shape, const BoschConfig& config, int layers_per_block = 1);

AdaptiveRatios stage2(const std::vector<double>& s_best, double s_orig, double rho, int heads_per_layer,
                      const BoschConfig& config);

// Searches layers bucket by bucket, from the largest ratio down.
HybridPlan stage3(Oracle& oracle, const MaskShape& shape, const AdaptiveRatios& ratios, const BoschConfig& config);

HybridPlan bosch(Oracle& oracle, const MaskShape& shape, const BoschConfig& config);
HybridPlan bosch(const ToyModel& model, const CalibrationSet& set, const BoschConfig& config);

HybridPlan ablation_single(Oracle& oracle, const MaskShape& shape, const BoschConfig& config);
HybridPlan ablation_multi(Oracle& oracle, const MaskShape& shape, const BoschConfig& config, int layers_per_group);
HybridPlan ablation_layer(Oracle& oracle, const MaskShape& shape, const BoschConfig& config);

enum class LayerHeuristic { Rand, Bme, Intr };

// Whole-layer selections: ceil(rho * L) layers become fully SWA.
HybridPlan heuristic(LayerHeuristic kind, const MaskShape& shape, double rho, std::uint64_t seed);
// Indices of the layers kept at full attention.
std::vector<int> heuristic_full_layers(LayerHeuristic kind, int num_layers, double rho, std::uint64_t seed);

nlohmann::json plan_to_json(const HybridPlan& plan, const std::string& model_spec_hash);
HybridPlan plan_from_json(const nlohmann::json& doc);

}  // namespace hybridsel
