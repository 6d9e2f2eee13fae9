#include "hybridsel/calibration.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <stdexcept>

#include "hybridsel/error.hpp"
#include "hybridsel/parallel.hpp"

namespace hybridsel {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("niah spec: " + what);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::vector<int> distinct_sample(std::mt19937_64& rng, const std::vector<int>& alphabet, int k) {
    std::vector<int> pool = alphabet;
    std::vector<int> out;
    for (int i = 0; i < k; ++i) {
        const int j = uniform_int(rng, i, static_cast<int>(pool.size()) - 1);
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

}  // namespace

void NiahSpec::validate() const {
    require(seq_len > 0, "seq_len must be positive");
    require(key_len >= 1 && value_len >= 1, "key_len and value_len must be at least 1");
    require(!filler_tokens.empty(), "filler alphabet is empty");
    require(static_cast<int>(key_tokens.size()) >= key_len, "key alphabet smaller than key_len");
    require(static_cast<int>(value_tokens.size()) >= value_len, "value alphabet smaller than value_len");
    std::set<int> seen;
    for (const auto* alpha : {&filler_tokens, &key_tokens, &value_tokens}) {
        for (int t : *alpha) {
            require(t >= 0, "token ids must be non-negative");
            require(seen.insert(t).second, "token alphabets must be pairwise disjoint");
        }
    }
    require(seen.insert(marker_token).second && marker_token >= 0, "marker token must be outside every alphabet");
    require(needle_min >= 0 && needle_min <= needle_max, "needle position range is empty");
    require(needle_max + key_len + value_len + query_len() <= seq_len,
            "needle (ending by " + std::to_string(needle_max + key_len + value_len) + ") plus query (" +
                std::to_string(query_len()) + " tokens) does not fit in seq_len " + std::to_string(seq_len));
}

int CalibrationExample::needle_distance() const {
    const int key_len = answer_positions.front() - query_position;  // marker precedes the key
    return answer_positions.front() - (needle_position + key_len);
}

CalibrationSet generate(const NiahSpec& spec, int n) {
    spec.validate();
    if (n < 1) throw ConfigError("generate: need at least one example");
    std::mt19937_64 rng(spec.seed);
    CalibrationSet set{spec, {}};
    set.examples.reserve(n);
    const int needle_len = spec.key_len + spec.value_len;
    for (int i = 0; i < n; ++i) {
        CalibrationExample ex;
        ex.tokens.resize(spec.seq_len);
        for (int& t : ex.tokens) t = spec.filler_tokens[uniform_int(rng, 0, static_cast<int>(spec.filler_tokens.size()) - 1)];
        const std::vector<int> key = distinct_sample(rng, spec.key_tokens, spec.key_len);
        const std::vector<int> value = distinct_sample(rng, spec.value_tokens, spec.value_len);
        ex.needle_position = uniform_int(rng, spec.needle_min, spec.needle_max);
        ex.query_position = uniform_int(rng, ex.needle_position + needle_len, spec.seq_len - spec.query_len());

        int p = ex.needle_position;
        for (int k : key) ex.tokens[p++] = k;
        for (int v : value) ex.tokens[p++] = v;
        p = ex.query_position;
        ex.tokens[p++] = spec.marker_token;
        for (int k : key) ex.tokens[p++] = k;
        for (int j = 0; j < spec.value_len; ++j) {
            ex.answer_positions.push_back(p - 1);
            ex.answer_tokens.push_back(value[j]);
            ex.tokens[p++] = value[j];
        }
        set.examples.push_back(std::move(ex));
    }
    return set;
}

double score(const ToyModel& model, const HeadMask& mask, const CalibrationSet& set, int window) {
    return Scorer(model, set, window, 0).score(mask);
}

Anchors anchors_from_scores(double s_swa, double s_full, double gamma) {
    if (!(gamma > 0.0)) throw ConfigError("anchors: gamma must be positive");
    Anchors out{s_swa, (1.0 + gamma) * s_full};
    // Equal scores leave nothing for the search to trade off, even though gamma
    // keeps b - a positive.
    if (!(s_full > s_swa) || !(out.b > out.a)) {
        throw DegenerateError("anchors: b = " + std::to_string(out.b) + " does not exceed a = " +
                              std::to_string(out.a) + "; the calibration set cannot separate full attention from SWA");
    }
    return out;
}

Anchors anchors(const ToyModel& model, const CalibrationSet& set, int window, double gamma) {
    Scorer scorer(model, set, window, 0);
    const auto shape = model.spec().mask_shape();
    return anchors_from_scores(scorer.score(HeadMask::all_swa(shape)), scorer.score(HeadMask::all_full(shape)),
                               gamma);
}

Scorer::Scorer(const ToyModel& model, const CalibrationSet& set, int window, std::size_t cache_entries)
    : model_(&model), set_(&set), window_(window), capacity_(cache_entries) {
    if (window < 1) throw ConfigError("window must be >= 1");
    if (set.examples.empty()) throw ConfigError("calibration set is empty");
    const auto& spec = model.spec();
    auto emb = std::make_shared<Residuals>(set.examples.size());
    for (std::size_t i = 0; i < set.examples.size(); ++i) {
        const auto& ex = set.examples[i];
        if (static_cast<int>(ex.tokens.size()) > spec.max_seq_len) {
            throw ConfigError("calibration example of length " + std::to_string(ex.tokens.size()) +
                              " exceeds the model's max_seq_len " + std::to_string(spec.max_seq_len));
        }
        for (int t : ex.tokens) {
            if (t < 0 || t >= spec.vocab_size) throw ConfigError("calibration token outside the model vocabulary");
        }
        (*emb)[i] = embed(model, std::span<const int>(ex.tokens).first(ex.scored_length()));
    }
    embedded_ = std::move(emb);
}

std::shared_ptr<const Scorer::Residuals> Scorer::lookup(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = index_.find(key);
    if (it == index_.end()) return nullptr;
    lru_.splice(lru_.begin(), lru_, it->second);
    return it->second->second;
}

void Scorer::store(const std::string& key, std::shared_ptr<const Residuals> value) {
    if (capacity_ == 0) return;
    std::lock_guard lock(mu_);
    if (index_.count(key)) return;
    lru_.emplace_front(key, std::move(value));
    index_[key] = lru_.begin();
    while (lru_.size() > capacity_) {
        index_.erase(lru_.back().first);
        lru_.pop_back();
    }
}

std::vector<std::uint8_t> Scorer::correct(const HeadMask& mask) {
    const auto& spec = model_->spec();
    if (!(mask.shape() == spec.mask_shape())) throw std::invalid_argument("score: mask shape does not match the model");
    const int L = spec.num_layers, G = spec.kv_groups;
    const auto& bits = mask.groups().full;
    auto prefix_key = [&](int layer) { return std::string(bits.begin(), bits.begin() + layer * G); };

    int start = 0;
    std::shared_ptr<const Residuals> cur = embedded_;
    for (int l = L - 1; l >= 1 && capacity_ > 0; --l) {
        if (auto hit = lookup(prefix_key(l))) {
            start = l;
            cur = std::move(hit);
            break;
        }
    }
    const std::size_t n = set_->examples.size();
    for (int l = start; l + 1 < L; ++l) {
        auto next = std::make_shared<Residuals>(n);
        parallel_for(n, [&](std::size_t i) { (*next)[i] = apply_layer(*model_, mask, l, (*cur)[i], window_); });
        cur = std::move(next);
        store(prefix_key(l + 1), cur);
    }
    // The last layer only matters at the answer rows.
    std::vector<std::uint8_t> ok(n, 1);
    parallel_for(n, [&](std::size_t i) {
        const auto& ex = set_->examples[i];
        const Matrix out = apply_layer_rows(*model_, mask, L - 1, (*cur)[i], window_, ex.answer_positions);
        for (std::size_t j = 0; j < ex.answer_positions.size(); ++j) {
            if (argmax_logit(*model_, out, static_cast<int>(j)) != ex.answer_tokens[j]) {
                ok[i] = 0;
                break;
            }
        }
    });
    {
        std::lock_guard lock(mu_);
        ++passes_;
    }
    return ok;
}

double Scorer::score(const HeadMask& mask) {
    const auto ok = correct(mask);
    std::size_t hits = 0;
    for (auto v : ok) hits += v;
    return static_cast<double>(hits) / static_cast<double>(ok.size());
}

nlohmann::json niah_spec_to_json(const NiahSpec& s) {
    return {{"seq_len", s.seq_len},         {"filler_tokens", s.filler_tokens}, {"key_tokens", s.key_tokens},
            {"value_tokens", s.value_tokens}, {"marker_token", s.marker_token}, {"key_len", s.key_len},
            {"value_len", s.value_len},     {"needle_min", s.needle_min},       {"needle_max", s.needle_max},
            {"seed", s.seed}};
}

NiahSpec niah_spec_from_json(const nlohmann::json& doc) {
    NiahSpec s;
    s.seq_len = doc.value("seq_len", s.seq_len);
    s.filler_tokens = doc.value("filler_tokens", s.filler_tokens);
    s.key_tokens = doc.value("key_tokens", s.key_tokens);
    s.value_tokens = doc.value("value_tokens", s.value_tokens);
    s.marker_token = doc.value("marker_token", s.marker_token);
    s.key_len = doc.value("key_len", s.key_len);
    s.value_len = doc.value("value_len", s.value_len);
    s.needle_min = doc.value("needle_min", s.needle_min);
    s.needle_max = doc.value("needle_max", s.needle_max);
    s.seed = doc.value("seed", s.seed);
    s.validate();
    return s;
}

nlohmann::json calibration_to_json(const CalibrationSet& set) {
    nlohmann::json ex = nlohmann::json::array();
    for (const auto& e : set.examples) {
        ex.push_back({{"tokens", e.tokens},
                      {"answer_positions", e.answer_positions},
                      {"answer_tokens", e.answer_tokens},
                      {"needle_position", e.needle_position},
                      {"query_position", e.query_position}});
    }
    return {{"spec", niah_spec_to_json(set.spec)}, {"examples", std::move(ex)}};
}

CalibrationSet calibration_from_json(const nlohmann::json& doc) {
    CalibrationSet set;
    set.spec = niah_spec_from_json(doc.at("spec"));
    for (const auto& e : doc.at("examples")) {
        CalibrationExample ex;
        ex.tokens = e.at("tokens").get<std::vector<int>>();
        ex.answer_positions = e.at("answer_positions").get<std::vector<int>>();
        ex.answer_tokens = e.at("answer_tokens").get<std::vector<int>>();
        ex.needle_position = e.at("needle_position").get<int>();
        ex.query_position = e.at("query_position").get<int>();
        if (ex.answer_positions.empty() || ex.answer_positions.size() != ex.answer_tokens.size()) {
            throw ConfigError("calibration example has mismatched answer positions and tokens");
        }
        for (std::size_t i = 0; i < ex.answer_positions.size(); ++i) {
            const int p = ex.answer_positions[i];
            if (p < 0 || p >= static_cast<int>(ex.tokens.size()) || (i > 0 && p <= ex.answer_positions[i - 1])) {
                throw ConfigError("calibration answer positions must be strictly increasing and inside the sequence");
            }
        }
        set.examples.push_back(std::move(ex));
    }
    return set;
}

}  // namespace hybridsel
