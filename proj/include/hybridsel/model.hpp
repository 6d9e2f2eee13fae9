#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hybridsel/masks.hpp"

namespace hybridsel {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelSpec {
    int num_layers = 4;
    int heads_per_layer = 8;
    int kv_groups = 4;
    int head_dim = 32;
    int vocab_size = 16;
    int max_seq_len = 128;
    // <= 0 selects the scaled dot-product default 1/sqrt(head_dim).
    double softmax_temperature = 0.0;

    int model_dim() const { return heads_per_layer * head_dim; }
    double tau() const;
    MaskShape mask_shape() const { return {num_layers, heads_per_layer, kv_groups}; }
    void validate() const;
    bool operator==(const ModelSpec&) const = default;
};

struct HeadCoord {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadCoord&) const = default;
};

enum class HeadRole { Local, PrevToken, Induction, Echo, Pointer };

// Hand-wired circuitry planted into the toy model.
//
//  prev-token  attends to t-1, writes the previous token into a shifted-identity block
//  induction   matches the current token against the shifted identities and copies
//              the token that followed the earlier occurrence
//  echo        attends to the earlier occurrence of the current token and writes its
//              position into a pointer block
//  pointer     follows that pointer one step forward and copies the token found there
//
// Induction, echo and pointer heads are the global (retrieval) heads. Prev-token heads
// only look one position back and keep working under any window W >= 2. Heads not
// listed are local noise heads with small random value/output weights.
struct PlantedCircuit {
    std::vector<HeadCoord> prev_token_heads;
    std::vector<HeadCoord> induction_heads;
    std::vector<HeadCoord> echo_heads;
    std::vector<HeadCoord> pointer_heads;
    double copy_strength = 50.0;
    // Optional per-token logit offsets in units of one copied token. Empty means 0.
    std::vector<double> recall_thresholds;

    void validate(const ModelSpec& spec) const;
    HeadRole role_of(int layer, int head) const;
    // Role of a KV group: the role shared by its listed heads, Local if none.
    HeadRole group_role(const ModelSpec& spec, int layer, int group) const;
    // Flat (layer * G + group) indices of groups hosting global heads, sorted.
    std::vector<int> retrieval_groups(const ModelSpec& spec) const;
};

// Residual stream blocks of a planted model (column offsets).
struct ResidualLayout {
    int token = 0;
    int position = 0;
    int prev_token = 0;
    int pointer = 0;
    int answer = 0;
    int position_dim = 0;
    int token_code_dim = 0;
    int width = 0;
};

ResidualLayout planted_layout(const ModelSpec& spec);

struct LayerWeights {
    Matrix wq;  // residual x (H * d_k)
    Matrix wk;  // residual x (G * d_k)
    Matrix wv;  // residual x (G * d_k)
    Matrix wo;  // (H * d_k) x residual, rows grouped by head
};

struct ModelWeights {
    Matrix token_embedding;     // V x residual
    Matrix position_embedding;  // T_max x residual
    Matrix unembedding;         // residual x V
    Vector logit_bias;          // V
    std::vector<LayerWeights> layers;
};

// Attention-only decoder: residual stream, per-layer multi-head attention with
// KV-group sharing, final unembedding. No MLPs, no normalization.
class ToyModel {
public:
    ToyModel(ModelSpec spec, int residual_dim, ModelWeights weights,
             std::optional<PlantedCircuit> circuit = std::nullopt, std::uint64_t seed = 0);

    const ModelSpec& spec() const { return spec_; }
    int residual_dim() const { return residual_dim_; }
    const ModelWeights& weights() const { return weights_; }
    const std::optional<PlantedCircuit>& circuit() const { return circuit_; }
    std::uint64_t seed() const { return seed_; }

private:
    ModelSpec spec_;
    int residual_dim_;
    ModelWeights weights_;
    std::optional<PlantedCircuit> circuit_;
    std::uint64_t seed_;
};

// Unit-norm sinusoidal position code used by the planted construction.
Vector position_code(int position, int dim);

// The 4-layer, 8-head, 4-group toy used throughout the tests. Heads 2g and 2g+1
// form KV group g; the first head of a planted group carries the role.
//   layer 0: prev-token g0, echo g1
//   layer 1: induction g0, pointer g1
//   layer 2: induction g0, induction g1, pointer g2
//   layer 3: noise only
// That gives five independent recall paths through six retrieval groups. The
// logit offsets make value token 9+k need at least k+1 intact paths, with
// token 15 as the zero-offset fallback, so the score degrades path by path.
ModelSpec standard_toy_spec();
PlantedCircuit standard_toy_circuit();

ToyModel build_planted_model(const ModelSpec& spec, const PlantedCircuit& circuit, std::uint64_t seed);
// Dense Gaussian weights; residual width = H * d_k.
ToyModel build_random_model(const ModelSpec& spec, std::uint64_t seed);

struct CaptureFlags {
    bool attention = false;
    bool attention_grads = false;
    bool queries_keys = false;
};

// Positions whose next token is scored, and the expected tokens.
struct LossTargets {
    std::vector<int> positions;
    std::vector<int> tokens;
};

struct ForwardTrace {
    int layers = 0;
    int heads = 0;
    int groups = 0;
    Matrix logits;                        // T x V
    std::vector<Matrix> attention;        // [L*H] of T x T, row-causal
    std::vector<Matrix> attention_grads;  // [L*H] of T x T, d(mean CE)/d(alpha)
    std::vector<Matrix> queries;          // [L*H] of T x d_k
    std::vector<Matrix> keys;             // [L*G] of T x d_k
    double loss = 0.0;                    // mean CE over targets, when grads captured

    const Matrix& attn(int layer, int head) const { return attention.at(layer * heads + head); }
    const Matrix& attn_grad(int layer, int head) const {
        return attention_grads.at(layer * heads + head);
    }
};

// Full-attention heads (z = 1) see [0, t]; SWA heads see [max(0, t - W + 1), t].
// Per layer the heads are split into an SA and an SWA subset, computed separately,
// concatenated as [SA, SWA] and projected with a matching row permutation of W_o.
ForwardTrace forward(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens,
                     int window, CaptureFlags capture = {});

// forward() plus reverse-mode gradients of the mean target cross-entropy with
// respect to every attention probability (treated as an independent intermediate).
ForwardTrace forward_with_grads(const ToyModel& model, const HeadMask& mask,
                                std::span<const int> tokens, int window, const LossTargets& targets,
                                CaptureFlags capture = {});

std::vector<Matrix> attention_grads(const ToyModel& model, const HeadMask& mask,
                                    std::span<const int> tokens, const LossTargets& targets,
                                    int window);

// Argmax next-token prediction at each requested position (lowest index wins ties).
std::vector<int> predict_at(const ToyModel& model, const HeadMask& mask, std::span<const int> tokens,
                            int window, std::span<const int> positions);

// Layer-at-a-time pieces of forward(), used by callers that cache residual
// prefixes. Rows of x are positions.
Matrix embed(const ToyModel& model, std::span<const int> tokens);
Matrix apply_layer(const ToyModel& model, const HeadMask& mask, int layer, const Matrix& x, int window);
// Output rows of apply_layer restricted to the given positions (same values).
Matrix apply_layer_rows(const ToyModel& model, const HeadMask& mask, int layer, const Matrix& x, int window,
                        std::span<const int> rows);
int argmax_logit(const ToyModel& model, const Matrix& x, int position);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& doc);
nlohmann::json circuit_to_json(const PlantedCircuit& circuit);
PlantedCircuit circuit_from_json(const nlohmann::json& doc);

// Manifest (spec, circuit, seed, residual width) and weight blob. The blob is a
// 16-byte header (magic "HSWB", u16 version, u16 L, H, G, d_k, V) followed by
// every tensor as little-endian f64 in a fixed order.
nlohmann::json model_manifest(const ToyModel& model);
std::vector<std::uint8_t> weights_to_blob(const ToyModel& model);
ToyModel model_from_artifacts(const nlohmann::json& manifest, std::span<const std::uint8_t> blob);

// Hash of the canonical spec document; ties mask files to a model shape.
std::string spec_hash(const ModelSpec& spec);

}  // namespace hybridsel
