#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridsel/masks.hpp"
#include "hybridsel/objective.hpp"

namespace hybridsel {

// A restricted subproblem: pick exactly `quota` of the units to convert to SWA,
// everything outside the units stays as in `frozen`. A unit is a set of flat
// group indices switched together (one group for head-level search, a whole
// layer for layer-level search). The ratio penalty covers the units' heads with
// the target implied by the quota, so it vanishes on every feasible candidate.
struct SearchProblem {
    std::vector<std::vector<int>> units;
    int quota = 0;
    HeadMask frozen;
    std::uint64_t budget = 100;
    int max_vars = 50;
    std::uint64_t seed = 0;

    static SearchProblem over_groups(const std::vector<int>& free_groups, int quota, HeadMask frozen,
                                     std::uint64_t budget, std::uint64_t seed, int max_vars = 50);

    int num_units() const { return static_cast<int>(units.size()); }
    // Units with the chosen indices SWA, the other units full.
    HeadMask assemble(const std::vector<int>& swa_units) const;
    Penalty penalty() const;
    std::uint64_t feasible_count() const { return binomial(num_units(), quota); }
    void validate() const;
};

struct TraceEntry {
    std::uint64_t eval = 0;  // 0-based evaluation index within the solve
    std::string mask_hash;
    double loss = 0.0;
    bool feasible = true;   // false for single-unit sweep probes
    bool accepted = false;  // became the search's current point
};

struct SearchResult {
    HeadMask best_mask;
    std::vector<int> best_units;  // sorted unit indices set to SWA
    double best_loss = 0.0;
    double best_score = 0.0;
    std::uint64_t evals_used = 0;
    bool brute_force = false;
    std::vector<TraceEntry> trace;
    // Present for swap search: everything needed to continue with more budget.
    std::optional<nlohmann::json> checkpoint;
};

struct SwapOptions {
    int stall_patience = 0;  // <= 0 selects max(10, #units)
    bool greedy_seed = true;
    // Upper bound on candidate proposals (including cache hits) per unit of
    // budget; keeps the loop finite on landscapes the memo has covered.
    int attempts_per_eval = 50;
};

// Brute force when C(#units, quota) <= budget, swap search otherwise.
SearchResult solve(const SearchProblem& problem, Oracle& oracle, const SwapOptions& options = {});

SearchResult brute_force(const SearchProblem& problem, Oracle& oracle);

// Cardinality-preserving (1+1) search: random start and a greedy start built
// from a one-pass single-unit sweep, then swap one SWA unit with one full unit,
// accepting non-worsening moves, restarting after `stall_patience` proposals
// without a new best. Passing a checkpoint from an earlier result continues that
// run with this problem's (larger) budget as if it had never stopped.
SearchResult swap_search(const SearchProblem& problem, Oracle& oracle, const SwapOptions& options = {},
                         const nlohmann::json* resume = nullptr);

struct Shard {
    std::vector<int> groups;
    int quota = 0;
    std::uint64_t budget = 0;
};

// Contiguous, equally sized shards of at most max_vars groups (sizes differ by
// at most one, larger first). Quota and budget are shared in proportion to
// shard size with largest-remainder rounding, ties to the earlier shard.
std::vector<Shard> split_into_subproblems(const std::vector<int>& free_groups, int quota, int max_vars,
                                          std::uint64_t budget = 0);

// solve() over groups, sharding first when there are more than max_vars of them.
// Shards run in order, each frozen on the decisions of the ones before it.
SearchResult solve_groups(const std::vector<int>& free_groups, int quota, const HeadMask& frozen,
                          std::uint64_t budget, std::uint64_t seed, Oracle& oracle, int max_vars = 50,
                          const SwapOptions& options = {});

}  // namespace hybridsel
