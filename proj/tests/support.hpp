#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "hybridsel/model.hpp"

namespace hybridsel::test {

// Plain per-head reference forward written straight from the definition, with
// no head partitioning. An optional additive bump on one attention probability
// (layer, head, row, col) lets finite differences treat alpha as an input.
struct Bump {
    int layer, head, row, col;
    double eps;
};

inline Matrix reference_logits(const ToyModel& model, const HeadMask& mask, const std::vector<int>& tokens,
                               int window, std::optional<Bump> bump = std::nullopt) {
    const auto& s = model.spec();
    const auto& w = model.weights();
    const int T = static_cast<int>(tokens.size()), dk = s.head_dim, per = s.heads_per_layer / s.kv_groups;
    Matrix x(T, model.residual_dim());
    for (int t = 0; t < T; ++t) x.row(t) = w.token_embedding.row(tokens[t]) + w.position_embedding.row(t);
    for (int l = 0; l < s.num_layers; ++l) {
        const auto& lw = w.layers[l];
        Matrix delta = Matrix::Zero(T, model.residual_dim());
        for (int h = 0; h < s.heads_per_layer; ++h) {
            const int g = h / per;
            const Matrix q = x * lw.wq.middleCols(h * dk, dk);
            const Matrix k = x * lw.wk.middleCols(g * dk, dk);
            const Matrix v = x * lw.wv.middleCols(g * dk, dk);
            Matrix a = Matrix::Zero(T, T);
            for (int t = 0; t < T; ++t) {
                const int lo = mask.head_full(l, h) ? 0 : std::max(0, t - window + 1);
                double m = -INFINITY;
                for (int j = lo; j <= t; ++j) m = std::max(m, s.tau() * q.row(t).dot(k.row(j)));
                double z = 0;
                for (int j = lo; j <= t; ++j) z += a(t, j) = std::exp(s.tau() * q.row(t).dot(k.row(j)) - m);
                for (int j = lo; j <= t; ++j) a(t, j) /= z;
            }
            if (bump && bump->layer == l && bump->head == h) a(bump->row, bump->col) += bump->eps;
            delta += (a * v) * lw.wo.middleRows(h * dk, dk);
        }
        x += delta;
    }
    Matrix logits = x * w.unembedding;
    logits.rowwise() += w.logit_bias.transpose();
    return logits;
}

inline double mean_ce(const Matrix& logits, const LossTargets& targets) {
    double total = 0;
    for (std::size_t i = 0; i < targets.positions.size(); ++i) {
        const auto row = logits.row(targets.positions[i]);
        const double m = row.maxCoeff();
        total += -(row(targets.tokens[i]) - m - std::log((row.array() - m).exp().sum()));
    }
    return total / static_cast<double>(targets.positions.size());
}

inline HeadMask random_mask(const MaskShape& shape, std::mt19937_64& rng) {
    GroupVector g;
    for (int i = 0; i < shape.num_groups(); ++i) g.full.push_back(static_cast<std::uint8_t>(rng() & 1));
    return HeadMask::from_groups(shape, g);
}

inline std::vector<int> random_tokens(int n, int vocab, std::mt19937_64& rng) {
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
    return t;
}

}  // namespace hybridsel::test
