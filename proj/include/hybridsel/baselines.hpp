#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "hybridsel/calibration.hpp"
#include "hybridsel/masks.hpp"
#include "hybridsel/model.hpp"

namespace hybridsel {

// Which end of a score ranking gets converted to SWA first.
enum class Direction { ConvertHighestFirst, ConvertLowestFirst };

enum class BaselineMethod { Dcam, Apl, Proxy, Qada, Razor, Fisher };

std::string method_name(BaselineMethod m);
BaselineMethod method_from_name(const std::string& name);
Direction method_direction(BaselineMethod m);

struct HeadScoreTable {
    std::string method;
    Direction direction = Direction::ConvertHighestFirst;
    int layers = 0;
    int heads = 0;
    std::vector<double> scores;  // layer-major, L * H

    double at(int layer, int head) const { return scores.at(static_cast<std::size_t>(layer) * heads + head); }
};

struct BaselineConfig {
    int window = 16;
    int proxy_block = 16;
    double proxy_mass = 0.9;
    int proxy_head = -1;    // < 0: the head with the highest mean attention entropy
    int qada_buffer = 0;    // <= 0: window / 4
    int razor_block = 0;    // <= 0: seq_len / 4
    // Use m - K + 1 (the token after the earlier occurrence) for the induction
    // probe instead of m - 1 - K.
    bool razor_standard_induction = false;
    std::uint64_t seed = 0;

    int buffer() const { return qada_buffer > 0 ? qada_buffer : std::max(1, window / 4); }
};

// Per-head kernels over one head's attention matrices (one per example).
// Lags include d = 0.
double dcam_score(const std::vector<const Matrix*>& attention, int window);
double fisher_score(const std::vector<const Matrix*>& attention, const std::vector<const Matrix*>& grads,
                    int window);
// Lag of the attention peak at row t_star (lowest j on ties).
int peak_lag(const Matrix& attention, int t_star);
double apl_score(const std::vector<int>& lags, int window);
// Mean over rows of (top-ranked blocks needed for `mass` of the head's row mass)
// / (blocks visible from that row). Blocks are ranked by the proxy's mass.
double proxy_score(const std::vector<const Matrix*>& head, const std::vector<const Matrix*>& proxy, int block,
                   double mass);
double mean_entropy(const std::vector<const Matrix*>& attention);

// In-window share of attention estimated with a Gaussian model of the far keys
// fitted on the `buffer` keys just outside the window. Row t (0-based) must have
// far keys, i.e. t >= window.
double qada_row(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Matrix& keys, int t, int window, int buffer,
                double tau);
// Exact in-window share of softmax(tau * q . k) over keys[0..t].
double exact_local_fraction(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Matrix& keys, int t, int window,
                            double tau);
double qada_score(const std::vector<const Matrix*>& queries, const std::vector<const Matrix*>& keys, int window,
                  int buffer, double tau);

struct RazorProbe {
    std::vector<int> tokens;
    int block = 0;
};
RazorProbe razor_probe(int block, int vocab, std::uint64_t seed);
// Echo and induction attention averages for one head on the probe.
std::pair<double, double> razor_echo_induction(const Matrix& attention, int block, bool standard_induction);
// max(z_echo, z_induction) per head; population std, z = 0 when std = 0.
std::vector<double> razor_scores(const std::vector<double>& echo, const std::vector<double>& induction);

// Full-attention traces of every calibration example, cut at the last answer.
std::vector<ForwardTrace> capture_traces(const ToyModel& model, const CalibrationSet& set, CaptureFlags flags);

HeadScoreTable run_baseline(BaselineMethod method, const ToyModel& model, const CalibrationSet& set,
                            const BaselineConfig& config);

// Mean head score per KV group, layer-major.
std::vector<double> pool_groups(const HeadScoreTable& table, const MaskShape& shape);
// Groups in conversion order (most local first), ties by flat index.
std::vector<int> conversion_order(const HeadScoreTable& table, const MaskShape& shape);
// First ceil(rho * L * G) groups of the conversion order become SWA.
HeadMask select_mask(const HeadScoreTable& table, double rho, const MaskShape& shape);

// layer,head,group,raw_score,pooled_score,rank (rank of the head's group in
// conversion order, 0 = converted first).
void write_score_csv(const HeadScoreTable& table, const MaskShape& shape, std::ostream& out);

}  // namespace hybridsel
