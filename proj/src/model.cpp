#include "hybridsel/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <set>
#include <stdexcept>

#include "hybridsel/error.hpp"
#include "hybridsel/hash.hpp"

namespace hybridsel {

namespace {

constexpr double kCopyGain = 4.0;
constexpr double kEchoTokenWeight = 1.6;   // x copy_strength
constexpr double kLocalStrength = 10.0;
constexpr int kMaxLocalLag = 3;
constexpr double kNoiseValueStd = 0.3;
constexpr double kNoiseOutputStd = 0.002;
constexpr double kNoiseKeyStd = 0.05;
constexpr double kNoiseQueryStd = 0.1;

// Position-code frequencies: a geometric ladder chosen so that the normalized
// code similarity has its largest off-peak value (about 0.53) well below 1 for
// every offset up to a few hundred positions.
double position_frequency(int i) { return 2.75 / std::pow(1.3, i); }

// Row-convention map taking position_code(t) to position_code(t + shift).
Matrix shift_map(int dim, int shift) {
    Matrix m = Matrix::Zero(dim, dim);
    for (int i = 0; i < dim / 2; ++i) {
        const double a = position_frequency(i) * shift;
        const double c = std::cos(a), s = std::sin(a);
        // out = in * m with in = (cos wt, sin wt)
        m(2 * i, 2 * i) = c;
        m(2 * i, 2 * i + 1) = s;
        m(2 * i + 1, 2 * i) = -s;
        m(2 * i + 1, 2 * i + 1) = c;
    }
    return m;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

std::string coord_str(const HeadCoord& c) {
    return "(" + std::to_string(c.layer) + ", " + std::to_string(c.head) + ")";
}

}  // namespace

double ModelSpec::tau() const {
    return softmax_temperature > 0.0 ? softmax_temperature : 1.0 / std::sqrt(static_cast<double>(head_dim));
}

void ModelSpec::validate() const {
    require(num_layers > 0 && heads_per_layer > 0 && kv_groups > 0 && head_dim > 0 &&
                vocab_size > 0 && max_seq_len > 0,
            "model spec: all dimensions must be positive");
    require(heads_per_layer % kv_groups == 0, "model spec: heads_per_layer must be a multiple of kv_groups");
    require(head_dim >= 2, "model spec: head_dim must be at least 2");
    require(std::isfinite(softmax_temperature), "model spec: softmax_temperature must be finite");
}

HeadRole PlantedCircuit::role_of(int layer, int head) const {
    const HeadCoord c{layer, head};
    auto has = [&](const std::vector<HeadCoord>& v) { return std::find(v.begin(), v.end(), c) != v.end(); };
    if (has(prev_token_heads)) return HeadRole::PrevToken;
    if (has(induction_heads)) return HeadRole::Induction;
    if (has(echo_heads)) return HeadRole::Echo;
    if (has(pointer_heads)) return HeadRole::Pointer;
    return HeadRole::Local;
}

HeadRole PlantedCircuit::group_role(const ModelSpec& spec, int layer, int group) const {
    const int per = spec.heads_per_layer / spec.kv_groups;
    for (int k = 0; k < per; ++k) {
        const HeadRole r = role_of(layer, group * per + k);
        if (r != HeadRole::Local) return r;
    }
    return HeadRole::Local;
}

void PlantedCircuit::validate(const ModelSpec& spec) const {
    spec.validate();
    require(copy_strength > 0.0 && std::isfinite(copy_strength), "circuit: copy_strength must be positive");
    require(recall_thresholds.empty() || static_cast<int>(recall_thresholds.size()) == spec.vocab_size,
            "circuit: recall_thresholds must be empty or have one entry per token");
    std::set<HeadCoord> seen;
    for (const auto* list : {&prev_token_heads, &induction_heads, &echo_heads, &pointer_heads}) {
        for (const auto& c : *list) {
            if (c.layer < 0 || c.layer >= spec.num_layers || c.head < 0 || c.head >= spec.heads_per_layer) {
                throw std::out_of_range("circuit: head " + coord_str(c) + " outside the " +
                                        std::to_string(spec.num_layers) + "x" +
                                        std::to_string(spec.heads_per_layer) + " model");
            }
            if (!seen.insert(c).second) {
                throw std::invalid_argument("circuit: head " + coord_str(c) + " has more than one role");
            }
        }
    }
    const int per = spec.heads_per_layer / spec.kv_groups;
    for (int l = 0; l < spec.num_layers; ++l) {
        for (int g = 0; g < spec.kv_groups; ++g) {
            HeadRole found = HeadRole::Local;
            for (int k = 0; k < per; ++k) {
                const HeadRole r = role_of(l, g * per + k);
                if (r == HeadRole::Local) continue;
                if (found != HeadRole::Local && found != r) {
                    throw std::invalid_argument("circuit: KV group (" + std::to_string(l) + ", " +
                                                std::to_string(g) + ") mixes planted roles");
                }
                found = r;
            }
        }
    }
    auto check_order = [](const std::vector<HeadCoord>& writers, const std::vector<HeadCoord>& readers,
                          const char* wname, const char* rname) {
        for (const auto& w : writers) {
            for (const auto& r : readers) {
                if (w.layer >= r.layer) {
                    throw std::invalid_argument(std::string("circuit: ") + wname + " head " + coord_str(w) +
                                                " must sit in an earlier layer than " + rname + " head " +
                                                coord_str(r));
                }
            }
        }
    };
    check_order(prev_token_heads, induction_heads, "prev-token", "induction");
    check_order(echo_heads, pointer_heads, "echo", "pointer");
}

std::vector<int> PlantedCircuit::retrieval_groups(const ModelSpec& spec) const {
    std::vector<int> out;
    for (int l = 0; l < spec.num_layers; ++l) {
        for (int g = 0; g < spec.kv_groups; ++g) {
            const HeadRole r = group_role(spec, l, g);
            if (r == HeadRole::Induction || r == HeadRole::Echo || r == HeadRole::Pointer) {
                out.push_back(l * spec.kv_groups + g);
            }
        }
    }
    return out;
}

ResidualLayout planted_layout(const ModelSpec& spec) {
    ResidualLayout lay;
    int pos_dim = std::min(16, (spec.head_dim / 2) / 2 * 2);
    lay.position_dim = pos_dim;
    lay.token_code_dim = spec.head_dim - pos_dim;
    const int v = spec.vocab_size;
    lay.token = 0;
    lay.position = v;
    lay.prev_token = v + pos_dim;
    lay.pointer = 2 * v + pos_dim;
    lay.answer = 2 * v + 2 * pos_dim;
    lay.width = 3 * v + 2 * pos_dim;
    return lay;
}

Vector position_code(int position, int dim) {
    Vector out(dim);
    const double scale = std::sqrt(2.0 / dim);
    for (int i = 0; i < dim / 2; ++i) {
        const double a = position_frequency(i) * position;
        out(2 * i) = scale * std::cos(a);
        out(2 * i + 1) = scale * std::sin(a);
    }
    return out;
}

ToyModel::ToyModel(ModelSpec spec, int residual_dim, ModelWeights weights,
                   std::optional<PlantedCircuit> circuit, std::uint64_t seed)
    : spec_(spec), residual_dim_(residual_dim), weights_(std::move(weights)), circuit_(std::move(circuit)),
      seed_(seed) {
    spec_.validate();
    const int d = residual_dim_, v = spec_.vocab_size, t = spec_.max_seq_len;
    const int hq = spec_.heads_per_layer * spec_.head_dim, gk = spec_.kv_groups * spec_.head_dim;
    auto shape_ok = [](const Matrix& m, int r, int c) { return m.rows() == r && m.cols() == c; };
    require(shape_ok(weights_.token_embedding, v, d) && shape_ok(weights_.position_embedding, t, d) &&
                shape_ok(weights_.unembedding, d, v) && weights_.logit_bias.size() == v &&
                static_cast<int>(weights_.layers.size()) == spec_.num_layers,
            "model weights do not match the spec");
    for (const auto& l : weights_.layers) {
        require(shape_ok(l.wq, d, hq) && shape_ok(l.wk, d, gk) && shape_ok(l.wv, d, gk) && shape_ok(l.wo, hq, d),
                "layer weights do not match the spec");
    }
}

ModelSpec standard_toy_spec() { return ModelSpec{}; }

PlantedCircuit standard_toy_circuit() {
    PlantedCircuit c;
    c.prev_token_heads = {{0, 0}};
    c.echo_heads = {{0, 2}};
    c.induction_heads = {{1, 0}, {2, 0}, {2, 2}};
    c.pointer_heads = {{1, 2}, {2, 4}};
    const int paths = 5;
    c.recall_thresholds.assign(16, paths + 1.0);
    for (int k = 0; k < paths; ++k) c.recall_thresholds[9 + k] = k + 0.5;
    c.recall_thresholds[15] = 0.0;
    return c;
}

ToyModel build_planted_model(const ModelSpec& spec, const PlantedCircuit& circuit, std::uint64_t seed) {
    circuit.validate(spec);
    const ResidualLayout lay = planted_layout(spec);
    if (lay.position_dim < 2 || lay.token_code_dim < 2) {
        throw std::invalid_argument("build_planted_model: head_dim " + std::to_string(spec.head_dim) +
                                    " is too small to host token-identity and position channels (need >= 8)");
    }
    const int V = spec.vocab_size, D = lay.width, dk = spec.head_dim, dp = lay.position_dim,
              dt = lay.token_code_dim, H = spec.heads_per_layer, G = spec.kv_groups, per = H / G;
    const double tau = spec.tau();
    const double s = circuit.copy_strength;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto noise = [&](Eigen::Ref<Matrix> m, double stddev) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) += stddev * normal(rng);
    };

    // Token code matrix, V x dt (row v = code of token v): one-hot when it fits.
    Matrix code = Matrix::Zero(V, dt);
    if (V <= dt) {
        for (int v = 0; v < V; ++v) code(v, v) = 1.0;
    } else {
        for (int v = 0; v < V; ++v) {
            for (int j = 0; j < dt; ++j) code(v, j) = normal(rng);
            code.row(v).normalize();
        }
    }
    const Matrix eye_p = Matrix::Identity(dp, dp);

    ModelWeights w;
    w.token_embedding = Matrix::Zero(V, D);
    for (int v = 0; v < V; ++v) w.token_embedding(v, lay.token + v) = 1.0;
    w.position_embedding = Matrix::Zero(spec.max_seq_len, D);
    for (int t = 0; t < spec.max_seq_len; ++t) {
        w.position_embedding.block(t, lay.position, 1, dp) = position_code(t, dp).transpose();
    }
    w.unembedding = Matrix::Zero(D, V);
    for (int v = 0; v < V; ++v) w.unembedding(lay.answer + v, v) = kCopyGain;
    w.logit_bias = Vector::Zero(V);
    for (int v = 0; v < static_cast<int>(circuit.recall_thresholds.size()); ++v) {
        w.logit_bias(v) = -kCopyGain * circuit.recall_thresholds[v];
    }

    const int tok_c = 0, pos_c = dt;  // head-space column offsets
    for (int l = 0; l < spec.num_layers; ++l) {
        LayerWeights lw;
        lw.wq = Matrix::Zero(D, H * dk);
        lw.wk = Matrix::Zero(D, G * dk);
        lw.wv = Matrix::Zero(D, G * dk);
        lw.wo = Matrix::Zero(H * dk, D);
        for (int g = 0; g < G; ++g) {
            const HeadRole role = circuit.group_role(spec, l, g);
            const int kc = g * dk;
            int listed = 0;
            for (int k = 0; k < per; ++k) listed += circuit.role_of(l, g * per + k) != HeadRole::Local;
            const double share = listed > 0 ? 1.0 / listed : 0.0;

            switch (role) {
                case HeadRole::PrevToken:
                    lw.wk.block(lay.position, kc + pos_c, dp, dp) = eye_p;
                    lw.wv.block(lay.token, kc + tok_c, V, dt) = code;
                    break;
                case HeadRole::Induction:
                    lw.wk.block(lay.prev_token, kc + tok_c, V, dt) = code;
                    lw.wv.block(lay.token, kc + tok_c, V, dt) = code;
                    break;
                case HeadRole::Echo:
                    lw.wk.block(lay.token, kc + tok_c, V, dt) = code;
                    lw.wk.block(lay.position, kc + pos_c, dp, dp) = eye_p;
                    lw.wv.block(lay.position, kc + pos_c, dp, dp) = eye_p;
                    break;
                case HeadRole::Pointer:
                    lw.wk.block(lay.position, kc + pos_c, dp, dp) = eye_p;
                    lw.wv.block(lay.token, kc + tok_c, V, dt) = code;
                    break;
                case HeadRole::Local:
                    lw.wk.block(lay.position, kc + pos_c, dp, dp) = eye_p;
                    noise(lw.wk.middleCols(kc, dk), kNoiseKeyStd);
                    noise(lw.wv.middleCols(kc, dk), kNoiseValueStd);
                    break;
            }

            for (int k = 0; k < per; ++k) {
                const int h = g * per + k;
                const int qc = h * dk;
                auto q = lw.wq.middleCols(qc, dk);
                auto o = lw.wo.middleRows(qc, dk);
                const HeadRole mine = circuit.role_of(l, h);
                if (role != HeadRole::Local && mine == HeadRole::Local) {
                    // unlisted head riding on a planted group's keys/values
                    noise(q, kNoiseQueryStd / tau);
                    noise(o, kNoiseOutputStd);
                    continue;
                }
                switch (mine) {
                    case HeadRole::PrevToken:
                        q.block(lay.position, pos_c, dp, dp) = shift_map(dp, -1) * (s / tau);
                        o.block(tok_c, lay.prev_token, dt, V) = code.transpose() * share;
                        break;
                    case HeadRole::Induction:
                        q.block(lay.token, tok_c, V, dt) = code * (s / tau);
                        o.block(tok_c, lay.answer, dt, V) = code.transpose() * share;
                        break;
                    case HeadRole::Echo:
                        q.block(lay.token, tok_c, V, dt) = code * (kEchoTokenWeight * s / tau);
                        q.block(lay.position, pos_c, dp, dp) = eye_p * (-s / tau);
                        o.block(pos_c, lay.pointer, dp, dp) = eye_p * share;
                        break;
                    case HeadRole::Pointer:
                        q.block(lay.pointer, pos_c, dp, dp) = shift_map(dp, +1) * (s / tau);
                        o.block(tok_c, lay.answer, dt, V) = code.transpose() * share;
                        break;
                    case HeadRole::Local: {
                        const int lag = static_cast<int>(rng() % (kMaxLocalLag + 1));
                        q.block(lay.position, pos_c, dp, dp) = shift_map(dp, -lag) * (kLocalStrength / tau);
                        noise(q, kNoiseQueryStd / tau);
                        noise(o, kNoiseOutputStd);
                        break;
                    }
                }
            }
        }
        w.layers.push_back(std::move(lw));
    }
    return ToyModel(spec, D, std::move(w), circuit, seed);
}

ToyModel build_random_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    const int D = spec.model_dim(), V = spec.vocab_size, dk = spec.head_dim, H = spec.heads_per_layer,
              G = spec.kv_groups;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gaussian = [&](int r, int c, double stddev) {
        Matrix m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = stddev * normal(rng);
        return m;
    };
    const double proj = 1.0 / std::sqrt(static_cast<double>(D));
    ModelWeights w;
    w.token_embedding = gaussian(V, D, 1.0);
    w.position_embedding = gaussian(spec.max_seq_len, D, 0.5);
    w.unembedding = gaussian(D, V, proj);
    w.logit_bias = Vector::Zero(V);
    for (int l = 0; l < spec.num_layers; ++l) {
        LayerWeights lw;
        lw.wq = gaussian(D, H * dk, 2.0 * proj);
        lw.wk = gaussian(D, G * dk, 2.0 * proj);
        lw.wv = gaussian(D, G * dk, proj);
        lw.wo = gaussian(H * dk, D, 1.0 / std::sqrt(static_cast<double>(H * dk)));
        w.layers.push_back(std::move(lw));
    }
    return ToyModel(spec, D, std::move(w), std::nullopt, seed);
}

// ----------------------------------------------------------------------------
// forward / backward

namespace {

struct LayerState {
    Matrix x_in;
    Matrix q, k, v;
    std::vector<Matrix> alpha;  // per head, head-index order
    std::vector<int> order;     // [SA heads..., SWA heads...]
    Matrix wo_perm;
};

int window_start(bool full, int t, int window) { return full ? 0 : std::max(0, t - window + 1); }

template <class In, class Out>
void softmax_row(const In& row, bool full, int window, int t, Out&& out) {
    const int lo = window_start(full, t, window);
    const int n = t - lo + 1;
    const auto seg = row.segment(lo, n).array();
    const double m = seg.maxCoeff();
    Eigen::ArrayXd e = (seg - m).exp().transpose();
    out.segment(lo, n) = (e / e.sum()).transpose().matrix();
}

void softmax_rows(const Matrix& scores, bool full, int window, Matrix& alpha) {
    const int T = static_cast<int>(scores.rows());
    alpha.setZero(scores.rows(), scores.cols());
    for (int t = 0; t < T; ++t) {
        softmax_row(scores.row(t), full, window, t, alpha.row(t));
    }
}

void check_inputs(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens, int window) {
    const auto& spec = model.spec();
    if (!(mask.shape() == spec.mask_shape())) {
        throw std::invalid_argument("forward: mask shape does not match the model");
    }
    if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > spec.max_seq_len) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq_len " + std::to_string(spec.max_seq_len));
    }
    if (window < 1) throw std::invalid_argument("forward: window must be >= 1");
    for (int tok : tokens) {
        if (tok < 0 || tok >= spec.vocab_size) throw std::out_of_range("forward: token id out of range");
    }
}

Matrix layer_step(const ToyModel& model, const HeadMask& mask, int l, const Matrix& x, int window,
                  CaptureFlags capture, ForwardTrace* trace, LayerState* st) {
    const auto& spec = model.spec();
    const auto& lw = model.weights().layers[l];
    const int T = static_cast<int>(x.rows());
    const int H = spec.heads_per_layer, G = spec.kv_groups, dk = spec.head_dim;
    const int per = H / G;
    const double tau = spec.tau();

    Matrix q = x * lw.wq;
    Matrix k = x * lw.wk;
    Matrix v = x * lw.wv;

    std::vector<int> order;
    for (int h = 0; h < H; ++h)
        if (mask.head_full(l, h)) order.push_back(h);
    for (int h = 0; h < H; ++h)
        if (!mask.head_full(l, h)) order.push_back(h);

    Matrix o_cat(T, H * dk);
    Matrix wo_perm(H * dk, model.residual_dim());
    Matrix scores, alpha;
    if (st) st->alpha.resize(H);
    for (int slot = 0; slot < H; ++slot) {
        const int h = order[slot];
        const int g = h / per;
        const bool full = mask.head_full(l, h);
        scores.noalias() = tau * (q.middleCols(h * dk, dk) * k.middleCols(g * dk, dk).transpose());
        softmax_rows(scores, full, window, alpha);
        o_cat.middleCols(slot * dk, dk).noalias() = alpha * v.middleCols(g * dk, dk);
        wo_perm.middleRows(slot * dk, dk) = lw.wo.middleRows(h * dk, dk);
        if (capture.attention) trace->attention[l * H + h] = alpha;
        if (st) st->alpha[h] = alpha;
    }
    if (capture.queries_keys) {
        for (int h = 0; h < H; ++h) trace->queries[l * H + h] = q.middleCols(h * dk, dk);
        for (int g = 0; g < G; ++g) trace->keys[l * G + g] = k.middleCols(g * dk, dk);
    }
    Matrix x_next = x;
    x_next.noalias() += o_cat * wo_perm;
    if (st) {
        st->x_in = x;
        st->q = std::move(q);
        st->k = std::move(k);
        st->v = std::move(v);
        st->order = std::move(order);
        st->wo_perm = std::move(wo_perm);
    }
    return x_next;
}

ForwardTrace run(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens, int window,
                 CaptureFlags capture, const LossTargets* targets, const std::vector<int>* logit_rows) {
    check_inputs(model, mask, tokens, window);
    const auto& spec = model.spec();
    const auto& w = model.weights();
    const int T = static_cast<int>(tokens.size());
    const int L = spec.num_layers, H = spec.heads_per_layer, G = spec.kv_groups, dk = spec.head_dim;
    const int per = H / G;
    const double tau = spec.tau();
    const bool need_states = targets != nullptr;

    ForwardTrace trace;
    trace.layers = L;
    trace.heads = H;
    trace.groups = G;
    if (capture.attention) trace.attention.resize(static_cast<std::size_t>(L) * H);
    if (capture.queries_keys) {
        trace.queries.resize(static_cast<std::size_t>(L) * H);
        trace.keys.resize(static_cast<std::size_t>(L) * G);
    }

    std::vector<LayerState> states;
    if (need_states) states.resize(L);
    Matrix x = embed(model, tokens);
    for (int l = 0; l < L; ++l) {
        x = layer_step(model, mask, l, x, window, capture, &trace, need_states ? &states[l] : nullptr);
    }

    if (logit_rows) {
        trace.logits.resize(static_cast<Eigen::Index>(logit_rows->size()), spec.vocab_size);
        for (std::size_t i = 0; i < logit_rows->size(); ++i) {
            trace.logits.row(i) = x.row((*logit_rows)[i]) * w.unembedding + w.logit_bias.transpose();
        }
        return trace;
    }
    trace.logits = x * w.unembedding;
    trace.logits.rowwise() += w.logit_bias.transpose();

    if (!targets) return trace;

    // mean token cross-entropy over targets
    const int n = static_cast<int>(targets->positions.size());
    Matrix dlogits = Matrix::Zero(T, spec.vocab_size);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const int p = targets->positions[i];
        const int y = targets->tokens[i];
        auto row = trace.logits.row(p);
        const double m = row.maxCoeff();
        Eigen::RowVectorXd e = (row.array() - m).exp();
        const double z = e.sum();
        loss += -(row(y) - m - std::log(z));
        dlogits.row(p) += e / (z * n);
        dlogits(p, y) -= 1.0 / n;
    }
    trace.loss = loss / n;

    if (capture.attention_grads) trace.attention_grads.resize(static_cast<std::size_t>(L) * H);
    Matrix dx = dlogits * w.unembedding.transpose();
    Matrix dalpha, ds;
    for (int l = L - 1; l >= 0; --l) {
        const auto& lw = w.layers[l];
        const LayerState& st = states[l];
        const Matrix do_cat = dx * st.wo_perm.transpose();
        Matrix dq = Matrix::Zero(T, H * dk);
        Matrix dk_m = Matrix::Zero(T, G * dk);
        Matrix dv = Matrix::Zero(T, G * dk);
        for (int slot = 0; slot < H; ++slot) {
            const int h = st.order[slot];
            const int g = h / per;
            const Matrix& a = st.alpha[h];
            const auto d_o = do_cat.middleCols(slot * dk, dk);
            dalpha.noalias() = d_o * st.v.middleCols(g * dk, dk).transpose();
            const bool full = mask.head_full(l, h);
            for (int t = 0; t < T; ++t) {
                const int lo = window_start(full, t, window);
                for (int j = 0; j < lo; ++j) dalpha(t, j) = 0.0;
                for (int j = t + 1; j < T; ++j) dalpha(t, j) = 0.0;
            }
            dv.middleCols(g * dk, dk).noalias() += a.transpose() * d_o;
            ds = a.cwiseProduct(dalpha);
            const Eigen::VectorXd rs = ds.rowwise().sum();
            ds -= a.cwiseProduct(rs.replicate(1, T));
            dq.middleCols(h * dk, dk).noalias() += tau * (ds * st.k.middleCols(g * dk, dk));
            dk_m.middleCols(g * dk, dk).noalias() += tau * (ds.transpose() * st.q.middleCols(h * dk, dk));
            if (capture.attention_grads) trace.attention_grads[l * H + h] = dalpha;
        }
        dx.noalias() += dq * lw.wq.transpose();
        dx.noalias() += dk_m * lw.wk.transpose();
        dx.noalias() += dv * lw.wv.transpose();
    }
    return trace;
}

}  // namespace

ForwardTrace forward(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens, int window,
                     CaptureFlags capture) {
    capture.attention_grads = false;
    return run(model, mask, tokens, window, capture, nullptr, nullptr);
}

ForwardTrace forward_with_grads(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens,
                                int window, const LossTargets& targets, CaptureFlags capture) {
    if (targets.positions.empty()) {
        throw std::invalid_argument("attention gradients need at least one target position");
    }
    if (targets.positions.size() != targets.tokens.size()) {
        throw std::invalid_argument("target positions and tokens differ in length");
    }
    for (std::size_t i = 0; i < targets.positions.size(); ++i) {
        const int p = targets.positions[i];
        if (p < 0 || p >= static_cast<int>(tokens.size())) throw std::out_of_range("target position out of range");
        if (targets.tokens[i] < 0 || targets.tokens[i] >= model.spec().vocab_size) {
            throw std::out_of_range("target token out of range");
        }
    }
    return run(model, mask, tokens, window, capture, &targets, nullptr);
}

std::vector<Matrix> attention_grads(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens,
                                    const LossTargets& targets, int window) {
    CaptureFlags flags;
    flags.attention_grads = true;
    return forward_with_grads(model, mask, tokens, window, targets, flags).attention_grads;
}

std::vector<int> predict_at(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens, int window,
                            std::span<const int> positions) {
    std::vector<int> rows(positions.begin(), positions.end());
    for (int p : rows) {
        if (p < 0 || p >= static_cast<int>(tokens.size())) throw std::out_of_range("predict_at: position out of range");
    }
    const ForwardTrace tr = run(model, mask, tokens, window, {}, nullptr, &rows);
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        Eigen::Index arg = 0;
        tr.logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
        out[i] = static_cast<int>(arg);
    }
    return out;
}

Matrix embed(const ToyModel& model, std::span<const int> tokens) {
    const auto& w = model.weights();
    Matrix x(static_cast<Eigen::Index>(tokens.size()), model.residual_dim());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        x.row(static_cast<Eigen::Index>(t)) = w.token_embedding.row(tokens[t]) + w.position_embedding.row(t);
    }
    return x;
}

Matrix apply_layer(const ToyModel& model, const HeadMask& mask, int layer, const Matrix& x, int window) {
    return layer_step(model, mask, layer, x, window, {}, nullptr, nullptr);
}

Matrix apply_layer_rows(const ToyModel& model, const HeadMask& mask, int layer, const Matrix& x, int window,
                        std::span<const int> rows) {
    const auto& spec = model.spec();
    const auto& lw = model.weights().layers[layer];
    const int H = spec.heads_per_layer, G = spec.kv_groups, dk = spec.head_dim, per = H / G;
    const int R = static_cast<int>(rows.size());
    Matrix xr(R, x.cols());
    for (int i = 0; i < R; ++i) xr.row(i) = x.row(rows[i]);
    const Matrix q = xr * lw.wq;
    const Matrix k = x * lw.wk;
    const Matrix v = x * lw.wv;
    Matrix out = xr;
    Matrix scores;
    Eigen::RowVectorXd alpha(x.rows());
    for (int h = 0; h < H; ++h) {
        const int g = h / per;
        const bool full = mask.head_full(layer, h);
        scores.noalias() = spec.tau() * (q.middleCols(h * dk, dk) * k.middleCols(g * dk, dk).transpose());
        for (int i = 0; i < R; ++i) {
            alpha.setZero();
            softmax_row(scores.row(i), full, window, rows[i], alpha);
            out.row(i).noalias() += (alpha * v.middleCols(g * dk, dk)) * lw.wo.middleRows(h * dk, dk);
        }
    }
    return out;
}

int argmax_logit(const ToyModel& model, const Matrix& x, int position) {
    const auto& w = model.weights();
    const Eigen::RowVectorXd logits = x.row(position) * w.unembedding + w.logit_bias.transpose();
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    return static_cast<int>(arg);
}

// ----------------------------------------------------------------------------
// serialization

nlohmann::json spec_to_json(const ModelSpec& spec) {
    return {{"num_layers", spec.num_layers},     {"heads_per_layer", spec.heads_per_layer},
            {"kv_groups", spec.kv_groups},       {"head_dim", spec.head_dim},
            {"vocab_size", spec.vocab_size},     {"max_seq_len", spec.max_seq_len},
            {"softmax_temperature", spec.tau()}};
}

// Missing keys keep their defaults.
ModelSpec spec_from_json(const nlohmann::json& doc) {
    ModelSpec s;
    s.num_layers = doc.value("num_layers", s.num_layers);
    s.heads_per_layer = doc.value("heads_per_layer", s.heads_per_layer);
    s.kv_groups = doc.value("kv_groups", s.kv_groups);
    s.head_dim = doc.value("head_dim", s.head_dim);
    s.vocab_size = doc.value("vocab_size", s.vocab_size);
    s.max_seq_len = doc.value("max_seq_len", s.max_seq_len);
    s.softmax_temperature = doc.value("softmax_temperature", s.softmax_temperature);
    s.validate();
    return s;
}

namespace {
nlohmann::json coords_to_json(const std::vector<HeadCoord>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& c : v) a.push_back({c.layer, c.head});
    return a;
}
std::vector<HeadCoord> coords_from_json(const nlohmann::json& doc, const char* key) {
    std::vector<HeadCoord> out;
    if (!doc.contains(key)) return out;
    for (const auto& c : doc.at(key)) out.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
    return out;
}
}  // namespace

nlohmann::json circuit_to_json(const PlantedCircuit& c) {
    return {{"prev_token_heads", coords_to_json(c.prev_token_heads)},
            {"induction_heads", coords_to_json(c.induction_heads)},
            {"echo_heads", coords_to_json(c.echo_heads)},
            {"pointer_heads", coords_to_json(c.pointer_heads)},
            {"copy_strength", c.copy_strength},
            {"recall_thresholds", c.recall_thresholds}};
}

PlantedCircuit circuit_from_json(const nlohmann::json& doc) {
    PlantedCircuit c;
    c.prev_token_heads = coords_from_json(doc, "prev_token_heads");
    c.induction_heads = coords_from_json(doc, "induction_heads");
    c.echo_heads = coords_from_json(doc, "echo_heads");
    c.pointer_heads = coords_from_json(doc, "pointer_heads");
    c.copy_strength = doc.value("copy_strength", 50.0);
    c.recall_thresholds = doc.value("recall_thresholds", std::vector<double>{});
    return c;
}

nlohmann::json model_manifest(const ToyModel& model) {
    nlohmann::json doc{{"spec", spec_to_json(model.spec())},
                       {"residual_dim", model.residual_dim()},
                       {"seed", model.seed()},
                       {"kind", model.circuit() ? "planted" : "random"}};
    if (model.circuit()) doc["circuit"] = circuit_to_json(*model.circuit());
    return doc;
}

namespace {

constexpr char kMagic[4] = {'H', 'S', 'W', 'B'};
constexpr std::uint16_t kBlobVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

void put_matrix(std::vector<std::uint8_t>& out, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
}

class BlobReader {
public:
    explicit BlobReader(std::span<const std::uint8_t> b) : bytes_(b) {}
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    void matrix(Matrix& m, int r, int c) {
        m.resize(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = f64();
    }
    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }
    bool done() const { return pos_ == bytes_.size(); }
    std::span<const std::uint8_t> head(std::size_t n) const { return bytes_.subspan(0, n); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw ConfigError("weight blob is truncated");
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> weights_to_blob(const ToyModel& model) {
    const auto& s = model.spec();
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u16(out, kBlobVersion);
    for (int d : {s.num_layers, s.heads_per_layer, s.kv_groups, s.head_dim, s.vocab_size}) {
        put_u16(out, static_cast<std::uint16_t>(d));
    }
    const auto& w = model.weights();
    put_matrix(out, w.token_embedding);
    put_matrix(out, w.position_embedding);
    put_matrix(out, w.unembedding);
    for (Eigen::Index i = 0; i < w.logit_bias.size(); ++i) put_f64(out, w.logit_bias(i));
    for (const auto& l : w.layers) {
        put_matrix(out, l.wq);
        put_matrix(out, l.wk);
        put_matrix(out, l.wv);
        put_matrix(out, l.wo);
    }
    return out;
}

ToyModel model_from_artifacts(const nlohmann::json& manifest, std::span<const std::uint8_t> blob) {
    const ModelSpec spec = spec_from_json(manifest.at("spec"));
    const int D = manifest.at("residual_dim").get<int>();
    BlobReader r(blob);
    if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, 4) != 0) throw ConfigError("weight blob: bad magic");
    r.skip(4);
    if (r.u16() != kBlobVersion) throw ConfigError("weight blob: unsupported version");
    for (int d : {spec.num_layers, spec.heads_per_layer, spec.kv_groups, spec.head_dim, spec.vocab_size}) {
        if (r.u16() != d) throw ConfigError("weight blob dimensions do not match the manifest");
    }
    const int V = spec.vocab_size, dk = spec.head_dim, H = spec.heads_per_layer, G = spec.kv_groups;
    ModelWeights w;
    r.matrix(w.token_embedding, V, D);
    r.matrix(w.position_embedding, spec.max_seq_len, D);
    r.matrix(w.unembedding, D, V);
    w.logit_bias.resize(V);
    for (int i = 0; i < V; ++i) w.logit_bias(i) = r.f64();
    for (int l = 0; l < spec.num_layers; ++l) {
        LayerWeights lw;
        r.matrix(lw.wq, D, H * dk);
        r.matrix(lw.wk, D, G * dk);
        r.matrix(lw.wv, D, G * dk);
        r.matrix(lw.wo, H * dk, D);
        w.layers.push_back(std::move(lw));
    }
    if (!r.done()) throw ConfigError("weight blob has trailing bytes");
    std::optional<PlantedCircuit> circuit;
    if (manifest.contains("circuit")) circuit = circuit_from_json(manifest.at("circuit"));
    return ToyModel(spec, D, std::move(w), std::move(circuit), manifest.value("seed", std::uint64_t{0}));
}

std::string spec_hash(const ModelSpec& spec) { return sha256_hex(spec_to_json(spec).dump()).substr(0, 16); }

}  // namespace hybridsel
