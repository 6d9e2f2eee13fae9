#include "hybridsel/optimizer.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "hybridsel/error.hpp"

namespace hybridsel {

SearchProblem SearchProblem::over_groups(const std::vector<int>& free_groups, int quota, HeadMask frozen,
                                         std::uint64_t budget, std::uint64_t seed, int max_vars) {
    SearchProblem p;
    for (int g : free_groups) p.units.push_back({g});
    p.quota = quota;
    p.frozen = std::move(frozen);
    p.budget = budget;
    p.seed = seed;
    p.max_vars = max_vars;
    return p;
}

void SearchProblem::validate() const {
    if (units.empty()) throw std::invalid_argument("search problem has no free units");
    if (quota < 0 || quota > num_units()) {
        throw std::invalid_argument("search problem quota " + std::to_string(quota) + " is infeasible for " +
                                    std::to_string(num_units()) + " units");
    }
    if (budget < 1) throw std::invalid_argument("search problem needs a budget of at least 1");
    std::vector<int> all;
    for (const auto& u : units) {
        if (u.empty()) throw std::invalid_argument("search problem has an empty unit");
        for (int g : u) {
            if (g < 0 || g >= frozen.shape().num_groups()) throw std::out_of_range("search unit group out of range");
            all.push_back(g);
        }
    }
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
        throw std::invalid_argument("search units overlap");
    }
}

HeadMask SearchProblem::assemble(const std::vector<int>& swa_units) const {
    GroupVector bits = frozen.groups();
    for (const auto& u : units)
        for (int g : u) bits.full[g] = 1;
    for (int i : swa_units)
        for (int g : units.at(i)) bits.full[g] = 0;
    return HeadMask::from_groups(frozen.shape(), std::move(bits));
}

Penalty SearchProblem::penalty() const {
    std::vector<int> groups;
    for (const auto& u : units) groups.insert(groups.end(), u.begin(), u.end());
    std::sort(groups.begin(), groups.end());
    return {heads_of_groups(frozen.shape(), groups), static_cast<double>(quota) / num_units()};
}

namespace {

struct Point {
    double loss = 0.0;
    double score = 0.0;
    std::vector<int> swa;  // canonical tie-break key: flat SWA groups of the full mask
};

// Lower loss wins; equal losses go to the smaller canonical encoding.
bool better(const Point& a, const Point& b) {
    if (a.loss != b.loss) return a.loss < b.loss;
    return a.swa < b.swa;
}

SearchResult finish(const SearchProblem& p, const std::vector<int>& units, const Point& pt, std::uint64_t evals,
                    std::vector<TraceEntry> trace, bool brute) {
    SearchResult r;
    r.best_units = units;
    r.best_mask = p.assemble(units);
    r.best_loss = pt.loss;
    r.best_score = pt.score;
    r.evals_used = evals;
    r.brute_force = brute;
    r.trace = std::move(trace);
    return r;
}

// Largest-remainder apportionment of `total` over `weights`, ties to the earlier slot.
std::vector<std::uint64_t> apportion(std::uint64_t total, const std::vector<int>& weights) {
    const std::uint64_t sum = std::accumulate(weights.begin(), weights.end(), std::uint64_t{0});
    std::vector<std::uint64_t> out(weights.size());
    std::vector<std::pair<std::uint64_t, std::size_t>> rem;
    std::uint64_t given = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const unsigned __int128 num = static_cast<unsigned __int128>(total) * weights[i];
        out[i] = static_cast<std::uint64_t>(num / sum);
        rem.emplace_back(static_cast<std::uint64_t>(num % sum), i);
        given += out[i];
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; given < total; ++k, ++given) ++out[rem[k].second];
    return out;
}

}  // namespace

SearchResult brute_force(const SearchProblem& problem, Oracle& oracle) {
    problem.validate();
    const int n = problem.num_units();
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    FeasibleStream stream(ids, problem.quota);
    if (stream.size() > problem.budget) {
        throw std::invalid_argument("brute force needs " + std::to_string(stream.size()) +
                                    " evaluations but the budget is " + std::to_string(problem.budget));
    }
    const Penalty pen = problem.penalty();
    std::vector<TraceEntry> trace;
    std::vector<int> subset, best_units;
    Point best;
    bool have = false;
    std::uint64_t evals = 0;
    while (stream.next(subset)) {
        const HeadMask m = problem.assemble(subset);
        const Evaluation e = oracle.evaluate(m, pen);
        Point pt{e.loss, e.score, m.swa_groups()};
        const bool accept = !have || better(pt, best);
        trace.push_back({evals++, mask_hash(m), e.loss, true, accept});
        if (accept) {
            best = std::move(pt);
            best_units = subset;
            have = true;
        }
    }
    return finish(problem, best_units, best, evals, std::move(trace), true);
}

namespace {

class SwapRun {
public:
    SwapRun(const SearchProblem& p, Oracle& oracle, const SwapOptions& opt)
        : p_(p), oracle_(oracle), opt_(opt), pen_(p.penalty()), n_(p.num_units()), q_(p.quota) {
        patience_ = opt.stall_patience > 0 ? opt.stall_patience : std::max(10, n_);
        rng_.seed(p.seed);
        const std::uint64_t per = static_cast<std::uint64_t>(std::max(1, opt.attempts_per_eval));
        attempt_cap_ = p.budget > (UINT64_MAX - 1000) / per ? UINT64_MAX : p.budget * per + 1000;
    }

    void restore(const nlohmann::json& cp);
    nlohmann::json checkpoint() const;
    SearchResult run();

private:
    struct Probe {
        Point pt;
        bool fresh = false;
    };
    std::optional<Probe> probe(const std::vector<int>& units);
    std::vector<int> random_assignment();
    std::vector<int> swap_move(const std::vector<int>& from);
    void consider_best(const std::vector<int>& units, const Point& pt);
    void accept(const std::vector<int>& units, const Probe& pr);
    std::uint64_t below(std::uint64_t n) { return rng_() % n; }

    const SearchProblem& p_;
    Oracle& oracle_;
    SwapOptions opt_;
    Penalty pen_;
    int n_, q_, patience_;
    std::uint64_t attempt_cap_;

    // resumable state
    std::mt19937_64 rng_;
    std::map<std::vector<int>, Point> memo_;
    std::uint64_t evals_ = 0, attempts_ = 0, feasible_seen_ = 0;
    std::vector<TraceEntry> trace_;
    int phase_ = 0, sweep_i_ = 0, stall_ = 0;
    std::vector<double> sweep_loss_;
    std::vector<int> current_, best_;
    Point current_pt_, best_pt_;
    bool have_best_ = false;
    std::optional<std::vector<int>> pending_;
};

std::optional<SwapRun::Probe> SwapRun::probe(const std::vector<int>& units) {
    auto it = memo_.find(units);
    if (it != memo_.end()) return Probe{it->second, false};
    if (evals_ >= p_.budget) return std::nullopt;
    const HeadMask m = p_.assemble(units);
    const Evaluation e = oracle_.evaluate(m, pen_);
    Point pt{e.loss, e.score, m.swa_groups()};
    const bool feasible = static_cast<int>(units.size()) == q_;
    trace_.push_back({evals_++, mask_hash(m), e.loss, feasible, false});
    if (feasible) ++feasible_seen_;
    memo_.emplace(units, pt);
    return Probe{std::move(pt), true};
}

std::vector<int> SwapRun::random_assignment() {
    std::vector<int> ids(n_);
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < q_; ++i) std::swap(ids[i], ids[i + below(n_ - i)]);
    std::vector<int> out(ids.begin(), ids.begin() + q_);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<int> SwapRun::swap_move(const std::vector<int>& from) {
    std::vector<int> full;
    for (int i = 0, k = 0; i < n_; ++i) {
        if (k < q_ && from[k] == i) {
            ++k;
        } else {
            full.push_back(i);
        }
    }
    std::vector<int> out = from;
    out[below(q_)] = full[below(full.size())];
    std::sort(out.begin(), out.end());
    return out;
}

void SwapRun::consider_best(const std::vector<int>& units, const Point& pt) {
    if (!have_best_ || better(pt, best_pt_)) {
        best_ = units;
        best_pt_ = pt;
        have_best_ = true;
        stall_ = 0;
    } else {
        ++stall_;
    }
}

void SwapRun::accept(const std::vector<int>& units, const Probe& pr) {
    current_ = units;
    current_pt_ = pr.pt;
    if (pr.fresh) trace_.back().accepted = true;
}

SearchResult SwapRun::run() {
    const std::uint64_t feasible_total = p_.feasible_count();
    auto take_pending = [&](auto make) {
        std::vector<int> c = pending_ ? *pending_ : make();
        pending_.reset();
        return c;
    };
    while (attempts_ < attempt_cap_ && feasible_seen_ < feasible_total) {
        if (phase_ == 0) {
            const auto cand = take_pending([&] { return random_assignment(); });
            const auto pr = probe(cand);
            if (!pr) {
                pending_ = cand;
                break;
            }
            ++attempts_;
            accept(cand, *pr);
            consider_best(cand, pr->pt);
            const bool sweep = opt_.greedy_seed && p_.budget >= static_cast<std::uint64_t>(n_) + 2;
            phase_ = sweep ? 1 : 3;
        } else if (phase_ == 1) {
            if (sweep_i_ == n_) {
                phase_ = 2;
                continue;
            }
            const std::vector<int> cand{sweep_i_};
            const auto pr = probe(cand);
            if (!pr) break;
            ++attempts_;
            sweep_loss_.push_back(pr->pt.loss);
            if (q_ == 1) consider_best(cand, pr->pt);
            ++sweep_i_;
        } else if (phase_ == 2) {
            std::vector<int> order(n_);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return sweep_loss_[a] < sweep_loss_[b]; });
            std::vector<int> cand(order.begin(), order.begin() + q_);
            std::sort(cand.begin(), cand.end());
            const auto pr = probe(cand);
            if (!pr) break;
            ++attempts_;
            if (!better(current_pt_, pr->pt)) accept(cand, *pr);
            consider_best(cand, pr->pt);
            phase_ = 3;
        } else if (stall_ >= patience_) {
            const auto cand = take_pending([&] { return random_assignment(); });
            const auto pr = probe(cand);
            if (!pr) {
                pending_ = cand;
                break;
            }
            ++attempts_;
            accept(cand, *pr);
            consider_best(cand, pr->pt);
            stall_ = 0;
        } else {
            const auto cand = take_pending([&] { return swap_move(current_); });
            const auto pr = probe(cand);
            if (!pr) {
                pending_ = cand;
                break;
            }
            ++attempts_;
            if (pr->pt.loss <= current_pt_.loss) accept(cand, *pr);
            consider_best(cand, pr->pt);
        }
    }
    SearchResult r = finish(p_, best_, best_pt_, evals_, trace_, false);
    r.checkpoint = checkpoint();
    return r;
}

nlohmann::json point_json(const Point& p) { return {{"loss", p.loss}, {"score", p.score}, {"swa", p.swa}}; }

Point point_from(const nlohmann::json& j) {
    return {j.at("loss").get<double>(), j.at("score").get<double>(), j.at("swa").get<std::vector<int>>()};
}

nlohmann::json SwapRun::checkpoint() const {
    std::ostringstream rng;
    rng << rng_;
    nlohmann::json memo = nlohmann::json::array();
    for (const auto& [units, pt] : memo_) memo.push_back({{"units", units}, {"point", point_json(pt)}});
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : trace_) {
        trace.push_back({t.eval, t.mask_hash, t.loss, t.feasible, t.accepted});
    }
    nlohmann::json cp{{"rng", rng.str()},
                      {"memo", std::move(memo)},
                      {"evals", evals_},
                      {"attempts", attempts_},
                      {"feasible_seen", feasible_seen_},
                      {"trace", std::move(trace)},
                      {"phase", phase_},
                      {"sweep_i", sweep_i_},
                      {"stall", stall_},
                      {"sweep_loss", sweep_loss_},
                      {"current", current_},
                      {"current_point", point_json(current_pt_)},
                      {"best", best_},
                      {"best_point", point_json(best_pt_)},
                      {"have_best", have_best_}};
    cp["pending"] = pending_ ? nlohmann::json(*pending_) : nlohmann::json(nullptr);
    return cp;
}

void SwapRun::restore(const nlohmann::json& cp) {
    std::istringstream rng(cp.at("rng").get<std::string>());
    rng >> rng_;
    memo_.clear();
    for (const auto& m : cp.at("memo")) memo_.emplace(m.at("units").get<std::vector<int>>(), point_from(m.at("point")));
    evals_ = cp.at("evals").get<std::uint64_t>();
    attempts_ = cp.at("attempts").get<std::uint64_t>();
    feasible_seen_ = cp.at("feasible_seen").get<std::uint64_t>();
    trace_.clear();
    for (const auto& t : cp.at("trace")) {
        trace_.push_back({t.at(0).get<std::uint64_t>(), t.at(1).get<std::string>(), t.at(2).get<double>(),
                          t.at(3).get<bool>(), t.at(4).get<bool>()});
    }
    phase_ = cp.at("phase").get<int>();
    sweep_i_ = cp.at("sweep_i").get<int>();
    stall_ = cp.at("stall").get<int>();
    sweep_loss_ = cp.at("sweep_loss").get<std::vector<double>>();
    current_ = cp.at("current").get<std::vector<int>>();
    current_pt_ = point_from(cp.at("current_point"));
    best_ = cp.at("best").get<std::vector<int>>();
    best_pt_ = point_from(cp.at("best_point"));
    have_best_ = cp.at("have_best").get<bool>();
    if (cp.at("pending").is_null()) {
        pending_.reset();
    } else {
        pending_ = cp.at("pending").get<std::vector<int>>();
    }
}

}  // namespace

SearchResult swap_search(const SearchProblem& problem, Oracle& oracle, const SwapOptions& options,
                         const nlohmann::json* resume) {
    problem.validate();
    SwapRun run(problem, oracle, options);
    if (resume) run.restore(*resume);
    return run.run();
}

SearchResult solve(const SearchProblem& problem, Oracle& oracle, const SwapOptions& options) {
    problem.validate();
    if (problem.feasible_count() <= problem.budget) return brute_force(problem, oracle);
    return swap_search(problem, oracle, options);
}

std::vector<Shard> split_into_subproblems(const std::vector<int>& free_groups, int quota, int max_vars,
                                          std::uint64_t budget) {
    if (max_vars < 2) throw std::invalid_argument("split_into_subproblems: max_vars must be at least 2");
    const int n = static_cast<int>(free_groups.size());
    if (quota < 0 || quota > n) throw std::invalid_argument("split_into_subproblems: infeasible quota");
    if (n == 0) return {};
    const int k = (n + max_vars - 1) / max_vars;
    std::vector<int> sizes(k, n / k);
    for (int i = 0; i < n % k; ++i) ++sizes[i];
    const auto quotas = apportion(static_cast<std::uint64_t>(quota), sizes);
    const auto budgets = apportion(budget, sizes);
    std::vector<Shard> out;
    int at = 0;
    for (int i = 0; i < k; ++i) {
        Shard s;
        s.groups.assign(free_groups.begin() + at, free_groups.begin() + at + sizes[i]);
        s.quota = static_cast<int>(quotas[i]);
        s.budget = budgets[i];
        at += sizes[i];
        out.push_back(std::move(s));
    }
    return out;
}

SearchResult solve_groups(const std::vector<int>& free_groups, int quota, const HeadMask& frozen,
                          std::uint64_t budget, std::uint64_t seed, Oracle& oracle, int max_vars,
                          const SwapOptions& options) {
    const int n = static_cast<int>(free_groups.size());
    if (n <= max_vars) {
        return solve(SearchProblem::over_groups(free_groups, quota, frozen, budget, seed, max_vars), oracle, options);
    }
    const auto shards = split_into_subproblems(free_groups, quota, max_vars, budget);
    HeadMask current = frozen;
    SearchResult total;
    total.brute_force = true;
    std::uint64_t shard_index = 0;
    for (const auto& s : shards) {
        const auto prob = SearchProblem::over_groups(s.groups, s.quota, current, std::max<std::uint64_t>(1, s.budget),
                                                     seed + 0x9e3779b97f4a7c15ULL * ++shard_index, max_vars);
        SearchResult r = solve(prob, oracle, options);
        for (auto t : r.trace) {
            t.eval += total.evals_used;
            total.trace.push_back(std::move(t));
        }
        total.evals_used += r.evals_used;
        total.brute_force = total.brute_force && r.brute_force;
        current = r.best_mask;
    }
    const auto whole = SearchProblem::over_groups(free_groups, quota, frozen, budget, seed, max_vars);
    const Evaluation e = oracle.evaluate(current, whole.penalty());
    total.best_mask = current;
    for (int i = 0; i < n; ++i)
        if (!current.group_full(free_groups[i])) total.best_units.push_back(i);
    total.best_loss = e.loss;
    total.best_score = e.score;
    return total;
}

}  // namespace hybridsel
