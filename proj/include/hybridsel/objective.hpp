#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "hybridsel/calibration.hpp"
#include "hybridsel/masks.hpp"

namespace hybridsel {

struct LossParams {
    double alpha = 100.0;
    double gamma = 0.2;
    double target_ratio = 0.5;
    Anchors anchors{0.0, 1.0};

    void validate() const;
};

// (S - a) / (b - a)
double normalized_score(double s, const Anchors& anchors);

// -s_hat + alpha * (ratio - target)^2, given the raw score S.
double penalized_loss(double s, double ratio, double target, const LossParams& params);

// Loss of a mask with the penalty over every head.
double loss(const HeadMask& mask, const ToyModel& model, const CalibrationSet& set, int window,
            const LossParams& params);

// Loss with the ratio penalty computed only over `subset` (flat head indices)
// against target `rho_bar`.
double restricted_loss(const HeadMask& mask, const std::vector<int>& subset, double rho_bar,
                       const ToyModel& model, const CalibrationSet& set, int window, const LossParams& params);

// Which heads the ratio penalty looks at. Empty heads = all heads against
// LossParams::target_ratio.
struct Penalty {
    std::vector<int> heads;
    double target = 0.0;
};

struct Evaluation {
    double score = 0.0;
    double loss = 0.0;
    std::uint64_t index = 0;  // order of first evaluation, 0-based
    bool cached = false;
};

// Memoizing evaluation oracle. Raw scores are cached by canonical mask key;
// only cache misses count against the budget. Safe to share across threads.
class Oracle {
public:
    using ScoreFn = std::function<double(const HeadMask&)>;
    static constexpr std::uint64_t kUnlimited = std::numeric_limits<std::uint64_t>::max();
    static constexpr std::uint64_t kPrimed = std::numeric_limits<std::uint64_t>::max();

    Oracle(ScoreFn score, LossParams params, std::uint64_t budget = kUnlimited);

    // Throws BudgetExhausted if the mask is new and the budget is spent.
    Evaluation evaluate(const HeadMask& mask, const Penalty& penalty = {});
    double loss_of(double score, const HeadMask& mask, const Penalty& penalty) const;
    bool contains(const HeadMask& mask) const;
    // Records an externally measured score without charging the budget.
    void prime(const HeadMask& mask, double score);

    const LossParams& params() const { return params_; }
    std::uint64_t eval_count() const;
    std::uint64_t budget() const { return budget_; }
    void set_budget(std::uint64_t budget) { budget_ = budget; }

    // One row per distinct mask, in evaluation order:
    // eval_index,mask_hash,ratio,score,loss (loss under the global penalty).
    void write_ledger_csv(std::ostream& out) const;

private:
    struct Entry {
        double score;
        std::uint64_t index;
        HeadMask mask;
    };
    ScoreFn score_;
    LossParams params_;
    std::uint64_t budget_;
    mutable std::mutex mu_;
    std::map<std::string, Entry> cache_;
    std::uint64_t count_ = 0;
};

// Oracle scoring against a calibration set through a prefix-caching Scorer.
Oracle make_oracle(Scorer& scorer, const LossParams& params, std::uint64_t budget = Oracle::kUnlimited);

// Short content hash of a mask's canonical key.
std::string mask_hash(const HeadMask& mask);

}  // namespace hybridsel
