#include "hybridsel/objective.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "hybridsel/error.hpp"
#include "hybridsel/hash.hpp"

namespace hybridsel {

void LossParams::validate() const {
    if (!(alpha > 0.0)) throw ConfigError("loss: alpha must be positive");
    if (!(gamma > 0.0)) throw ConfigError("loss: gamma must be positive");
    if (!(target_ratio >= 0.0 && target_ratio <= 1.0)) throw ConfigError("loss: target ratio must lie in [0, 1]");
    if (!(anchors.b > anchors.a)) throw DegenerateError("loss: anchors need b > a");
}

double normalized_score(double s, const Anchors& anchors) {
    const double span = anchors.b - anchors.a;
    if (!(span > 0.0)) throw DegenerateError("normalized_score: anchors have zero or negative span");
    return (s - anchors.a) / span;
}

double penalized_loss(double s, double ratio, double target, const LossParams& params) {
    const double gap = ratio - target;
    return -normalized_score(s, params.anchors) + params.alpha * gap * gap;
}

double loss(const HeadMask& mask, const ToyModel& model, const CalibrationSet& set, int window,
            const LossParams& params) {
    return penalized_loss(score(model, mask, set, window), ratio(mask), params.target_ratio, params);
}

double restricted_loss(const HeadMask& mask, const std::vector<int>& subset, double rho_bar,
                       const ToyModel& model, const CalibrationSet& set, int window, const LossParams& params) {
    if (subset.empty()) throw std::invalid_argument("restricted_loss: empty head subset");
    return penalized_loss(score(model, mask, set, window), subset_ratio(mask, subset), rho_bar, params);
}

Oracle::Oracle(ScoreFn score, LossParams params, std::uint64_t budget)
    : score_(std::move(score)), params_(params), budget_(budget) {
    params_.validate();
}

double Oracle::loss_of(double score, const HeadMask& mask, const Penalty& penalty) const {
    if (penalty.heads.empty()) return penalized_loss(score, ratio(mask), params_.target_ratio, params_);
    return penalized_loss(score, subset_ratio(mask, penalty.heads), penalty.target, params_);
}

Evaluation Oracle::evaluate(const HeadMask& mask, const Penalty& penalty) {
    const std::string key = mask.canonical_key();
    {
        std::lock_guard lock(mu_);
        auto it = cache_.find(key);
        if (it != cache_.end()) {
            return {it->second.score, loss_of(it->second.score, mask, penalty), it->second.index, true};
        }
        if (count_ >= budget_) {
            throw BudgetExhausted("oracle budget of " + std::to_string(budget_) + " evaluations is spent");
        }
    }
    const double s = score_(mask);
    std::lock_guard lock(mu_);
    auto [it, inserted] = cache_.emplace(key, Entry{s, count_, mask});
    if (inserted) ++count_;
    return {it->second.score, loss_of(it->second.score, mask, penalty), it->second.index, !inserted};
}

bool Oracle::contains(const HeadMask& mask) const {
    std::lock_guard lock(mu_);
    return cache_.count(mask.canonical_key()) > 0;
}

void Oracle::prime(const HeadMask& mask, double score) {
    std::lock_guard lock(mu_);
    cache_.emplace(mask.canonical_key(), Entry{score, kPrimed, mask});
}

std::uint64_t Oracle::eval_count() const {
    std::lock_guard lock(mu_);
    return count_;
}

void Oracle::write_ledger_csv(std::ostream& out) const {
    std::vector<const Entry*> rows;
    {
        std::lock_guard lock(mu_);
        for (const auto& [key, e] : cache_) rows.push_back(&e);
    }
    std::sort(rows.begin(), rows.end(), [](const Entry* a, const Entry* b) { return a->index < b->index; });
    out << "eval_index,mask_hash,ratio,score,loss\n";
    out << std::setprecision(17);
    for (const Entry* e : rows) {
        if (e->index == kPrimed) continue;
        out << e->index << ',' << mask_hash(e->mask) << ',' << ratio(e->mask) << ',' << e->score << ','
            << loss_of(e->score, e->mask, {}) << '\n';
    }
}

Oracle make_oracle(Scorer& scorer, const LossParams& params, std::uint64_t budget) {
    return Oracle([&scorer](const HeadMask& m) { return scorer.score(m); }, params, budget);
}

std::string mask_hash(const HeadMask& mask) { return sha256_hex(mask.canonical_key()).substr(0, 16); }

}  // namespace hybridsel
