#pragma once

#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridsel/model.hpp"

namespace hybridsel {

// Needle-in-a-haystack layout. Each example is filler text with one needle
// "k_1 .. k_K v_1 .. v_V" starting inside [needle_min, needle_max] and, at a
// random later position, the query "marker k_1 .. k_K" followed by the value
// tokens again. The value tokens of the query are the prediction targets, so
// every one of them is scored during a single prefill pass.
struct NiahSpec {
    int seq_len = 128;
    std::vector<int> filler_tokens{0, 1, 2, 3, 4};
    std::vector<int> key_tokens{5, 6, 7, 8};
    std::vector<int> value_tokens{9, 10, 11, 12, 13};
    int marker_token = 14;
    int key_len = 2;
    int value_len = 1;
    int needle_min = 8;
    int needle_max = 96;
    std::uint64_t seed = 0;

    // Length of the query block (marker + key + values).
    int query_len() const { return 1 + key_len + value_len; }
    void validate() const;
};

struct CalibrationExample {
    std::vector<int> tokens;
    std::vector<int> answer_positions;  // next token at p is answer_tokens[i]
    std::vector<int> answer_tokens;
    int needle_position = 0;
    int query_position = 0;

    // Offset between the needle's first value token and the query's last key
    // token, i.e. the attention distance the retrieval step has to span.
    int needle_distance() const;
    // Only tokens up to the last answer position influence the scored logits.
    int scored_length() const { return answer_positions.back() + 1; }
};

struct CalibrationSet {
    NiahSpec spec;
    std::vector<CalibrationExample> examples;
};

CalibrationSet generate(const NiahSpec& spec, int n);

// Fraction of examples whose every answer position predicts its target.
double score(const ToyModel& model, const HeadMask& mask, const CalibrationSet& set, int window);

struct Anchors {
    double a = 0.0;  // all-SWA score
    double b = 0.0;  // (1 + gamma) * full-attention score
};

Anchors anchors(const ToyModel& model, const CalibrationSet& set, int window, double gamma);
// Same, from already measured scores. Throws DegenerateError unless full
// attention beats all-SWA.
Anchors anchors_from_scores(double s_swa, double s_full, double gamma);

// Scores masks against one calibration set, caching the residual stream entering
// each layer keyed by the mask of the layers below it. Masks that only differ in
// deep layers then share the shallow part of the forward pass. Results are
// identical to score().
class Scorer {
public:
    Scorer(const ToyModel& model, const CalibrationSet& set, int window, std::size_t cache_entries = 12);

    double score(const HeadMask& mask);
    std::vector<std::uint8_t> correct(const HeadMask& mask);

    const ToyModel& model() const { return *model_; }
    const CalibrationSet& set() const { return *set_; }
    int window() const { return window_; }
    std::uint64_t forward_passes() const { return passes_; }

private:
    using Residuals = std::vector<Matrix>;
    std::shared_ptr<const Residuals> lookup(const std::string& key);
    void store(const std::string& key, std::shared_ptr<const Residuals> value);

    const ToyModel* model_;
    const CalibrationSet* set_;
    int window_;
    std::size_t capacity_;
    std::shared_ptr<const Residuals> embedded_;
    std::mutex mu_;
    std::list<std::pair<std::string, std::shared_ptr<const Residuals>>> lru_;
    std::unordered_map<std::string, decltype(lru_)::iterator> index_;
    std::uint64_t passes_ = 0;
};

nlohmann::json niah_spec_to_json(const NiahSpec& spec);
NiahSpec niah_spec_from_json(const nlohmann::json& doc);
nlohmann::json calibration_to_json(const CalibrationSet& set);
CalibrationSet calibration_from_json(const nlohmann::json& doc);

}  // namespace hybridsel
