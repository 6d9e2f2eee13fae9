#include "hybridsel/analysis.hpp"

#include <algorithm>
#include <iomanip>
#include <iterator>
#include <map>
#include <random>
#include <stdexcept>

#include "hybridsel/error.hpp"

namespace hybridsel {

SelectionSet SelectionSet::from_mask(std::string method, double rho, const HeadMask& mask) {
    return {std::move(method), rho, mask.shape(), mask.swa_groups()};
}

std::vector<int> SelectionSet::swa_heads() const { return heads_of_groups(shape, swa_groups); }

namespace {

void same_shape(const SelectionSet& a, const SelectionSet& b) {
    if (!(a.shape == b.shape)) {
        throw std::invalid_argument("selection sets '" + a.method + "' and '" + b.method + "' differ in model shape");
    }
}

std::vector<int> minus(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

}  // namespace

double jaccard_distance(const SelectionSet& a, const SelectionSet& b) {
    same_shape(a, b);
    std::vector<int> inter, uni;
    std::set_intersection(a.swa_groups.begin(), a.swa_groups.end(), b.swa_groups.begin(), b.swa_groups.end(),
                          std::back_inserter(inter));
    std::set_union(a.swa_groups.begin(), a.swa_groups.end(), b.swa_groups.begin(), b.swa_groups.end(),
                   std::back_inserter(uni));
    if (uni.empty()) return 0.0;
    return 1.0 - static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

double turnover_max(double rho_s, double rho_l) {
    if (!(rho_s > 0.0) || !(rho_s < rho_l) || rho_l > 1.0) {
        throw std::invalid_argument("turnover needs 0 < rho_s < rho_l <= 1");
    }
    return std::min(1.0, (1.0 - rho_l) / rho_s);
}

Turnover turnover(const SelectionSet& small, const SelectionSet& large) {
    same_shape(small, large);
    if (small.swa_groups.empty()) throw std::invalid_argument("turnover: the small-ratio set is empty");
    Turnover out;
    out.t_max = turnover_max(small.rho, large.rho);
    out.t = static_cast<double>(minus(small.swa_groups, large.swa_groups).size()) / small.swa_groups.size();
    out.t_tilde = out.t_max > 0.0 ? out.t / out.t_max : 0.0;
    return out;
}

DistanceMatrix distance_matrix(const std::vector<SelectionSet>& sets) {
    DistanceMatrix m;
    const auto n = static_cast<Eigen::Index>(sets.size());
    m.d = Matrix::Zero(n, n);
    for (const auto& s : sets) m.labels.push_back(s.method);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) m.d(i, j) = m.d(j, i) = jaccard_distance(sets[i], sets[j]);
    return m;
}

HeadMask head_swap_experiment(const SelectionSet& large, const SelectionSet& small, std::uint64_t seed) {
    same_shape(large, small);
    const auto delta = minus(small.swa_groups, large.swa_groups);
    if (delta.empty()) throw std::invalid_argument("head swap: every small-ratio group is already in the large set");
    if (delta.size() > large.swa_groups.size()) {
        throw std::invalid_argument("head swap: more groups to insert than the large set holds");
    }
    std::vector<int> pool = large.swa_groups;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < delta.size(); ++i) std::swap(pool[i], pool[i + rng() % (pool.size() - i)]);
    std::vector<int> kept(pool.begin() + static_cast<std::ptrdiff_t>(delta.size()), pool.end());
    kept.insert(kept.end(), delta.begin(), delta.end());
    return HeadMask::from_swa_groups(large.shape, kept);
}

void write_distance_csv(const DistanceMatrix& m, std::ostream& out) {
    out << "method";
    for (const auto& l : m.labels) out << ',' << l;
    out << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
        out << m.labels[i];
        for (std::size_t j = 0; j < m.labels.size(); ++j) out << ',' << m.d(i, j);
        out << '\n';
    }
}

std::vector<TurnoverRow> adjacent_turnover(const std::vector<SelectionSet>& sets) {
    std::map<std::string, std::vector<const SelectionSet*>> by_method;
    for (const auto& s : sets) by_method[s.method].push_back(&s);
    std::vector<TurnoverRow> rows;
    for (auto& [method, list] : by_method) {
        std::stable_sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->rho < b->rho; });
        for (std::size_t i = 0; i + 1 < list.size(); ++i) {
            if (!(list[i]->rho < list[i + 1]->rho) || list[i]->swa_groups.empty()) continue;
            rows.push_back({method, list[i]->rho, list[i + 1]->rho, turnover(*list[i], *list[i + 1])});
        }
    }
    return rows;
}

void write_turnover_csv(const std::vector<TurnoverRow>& rows, std::ostream& out) {
    out << "method,rho_s,rho_l,T,T_max,T_tilde\n" << std::setprecision(17);
    for (const auto& r : rows) {
        out << r.method << ',' << r.rho_s << ',' << r.rho_l << ',' << r.value.t << ',' << r.value.t_max << ','
            << r.value.t_tilde << '\n';
    }
}

}  // namespace hybridsel
