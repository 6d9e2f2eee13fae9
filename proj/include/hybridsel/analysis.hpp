#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "hybridsel/masks.hpp"
#include "hybridsel/model.hpp"

namespace hybridsel {

// SWA groups picked by one method at one ratio, as sorted flat group indices.
struct SelectionSet {
    std::string method;
    double rho = 0.0;
    MaskShape shape;
    std::vector<int> swa_groups;

    static SelectionSet from_mask(std::string method, double rho, const HeadMask& mask);
    // Head-level view (flat head indices), for reporting in head counts.
    std::vector<int> swa_heads() const;
};

// 1 - |A n B| / |A u B|, 0 for two empty sets.
double jaccard_distance(const SelectionSet& a, const SelectionSet& b);

struct Turnover {
    double t = 0.0;
    double t_max = 0.0;
    double t_tilde = 0.0;
};

// Largest possible share of the small-ratio set that can be missing from the
// large-ratio set: min(1, (1 - rho_l) / rho_s).
double turnover_max(double rho_s, double rho_l);
// T = |A_s \ A_l| / |A_s|, normalized by turnover_max.
Turnover turnover(const SelectionSet& small, const SelectionSet& large);

struct DistanceMatrix {
    std::vector<std::string> labels;
    Matrix d;
};

DistanceMatrix distance_matrix(const std::vector<SelectionSet>& sets);

// Replaces |A_s \ A_l| seeded-random members of A_l with A_s \ A_l, keeping the
// size of A_l.
HeadMask head_swap_experiment(const SelectionSet& large, const SelectionSet& small, std::uint64_t seed);

void write_distance_csv(const DistanceMatrix& m, std::ostream& out);

struct TurnoverRow {
    std::string method;
    double rho_s = 0.0;
    double rho_l = 0.0;
    Turnover value;
};
// One row per adjacent ratio pair within each method.
std::vector<TurnoverRow> adjacent_turnover(const std::vector<SelectionSet>& sets);
void write_turnover_csv(const std::vector<TurnoverRow>& rows, std::ostream& out);

}  // namespace hybridsel
