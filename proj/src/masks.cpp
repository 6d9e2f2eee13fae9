#include "hybridsel/masks.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hybridsel/error.hpp"

namespace hybridsel {

void MaskShape::validate() const {
    if (layers <= 0 || heads <= 0 || groups <= 0) {
        throw std::invalid_argument("mask shape needs positive layers, heads and groups");
    }
    if (heads % groups != 0) {
        throw std::invalid_argument("heads per layer must be a multiple of KV groups");
    }
}

HeadMask HeadMask::all_full(const MaskShape& shape) {
    shape.validate();
    return HeadMask(shape, GroupVector{std::vector<std::uint8_t>(shape.num_groups(), 1)});
}

HeadMask HeadMask::all_swa(const MaskShape& shape) {
    shape.validate();
    return HeadMask(shape, GroupVector{std::vector<std::uint8_t>(shape.num_groups(), 0)});
}

HeadMask HeadMask::from_groups(const MaskShape& shape, GroupVector groups) {
    shape.validate();
    if (static_cast<int>(groups.full.size()) != shape.num_groups()) {
        throw std::invalid_argument("group vector length does not match L*G");
    }
    for (auto& b : groups.full) b = b ? 1 : 0;
    return HeadMask(shape, std::move(groups));
}

HeadMask HeadMask::from_head_bits(const MaskShape& shape, const std::vector<bool>& bits) {
    shape.validate();
    if (static_cast<int>(bits.size()) != shape.num_heads()) {
        throw std::invalid_argument("head bit vector length does not match L*H");
    }
    GroupVector groups{std::vector<std::uint8_t>(shape.num_groups(), 1)};
    const int per = shape.heads_per_group();
    for (int l = 0; l < shape.layers; ++l) {
        for (int g = 0; g < shape.groups; ++g) {
            const bool first = bits[l * shape.heads + g * per];
            for (int k = 1; k < per; ++k) {
                if (bits[l * shape.heads + g * per + k] != first) {
                    throw std::invalid_argument("head bits violate KV-group coupling at layer " +
                                                std::to_string(l) + " group " + std::to_string(g));
                }
            }
            groups.full[l * shape.groups + g] = first ? 1 : 0;
        }
    }
    return HeadMask(shape, std::move(groups));
}

HeadMask HeadMask::from_swa_groups(const MaskShape& shape, const std::vector<int>& swa_groups) {
    HeadMask mask = all_full(shape);
    for (int g : swa_groups) {
        if (g < 0 || g >= shape.num_groups()) throw std::out_of_range("flat group index out of range");
        mask.bits_.full[g] = 0;
    }
    return mask;
}

bool HeadMask::group_full(int layer, int group) const {
    if (layer < 0 || layer >= shape_.layers || group < 0 || group >= shape_.groups) {
        throw std::out_of_range("group coordinate out of range");
    }
    return bits_.full[layer * shape_.groups + group] != 0;
}

bool HeadMask::head_full(int layer, int head) const {
    if (head < 0 || head >= shape_.heads) throw std::out_of_range("head index out of range");
    return group_full(layer, shape_.group_of_head(head));
}

bool HeadMask::head_full(int flat_head) const {
    return head_full(flat_head / shape_.heads, flat_head % shape_.heads);
}

std::vector<bool> HeadMask::head_bits() const {
    std::vector<bool> out(shape_.num_heads());
    for (int i = 0; i < shape_.num_heads(); ++i) out[i] = head_full(i);
    return out;
}

int HeadMask::swa_group_count() const {
    return static_cast<int>(std::count(bits_.full.begin(), bits_.full.end(), 0));
}

int HeadMask::swa_group_count_in_layer(int layer) const {
    int n = 0;
    for (int g = 0; g < shape_.groups; ++g) n += group_full(layer, g) ? 0 : 1;
    return n;
}

std::vector<int> HeadMask::swa_groups() const {
    std::vector<int> out;
    for (int g = 0; g < shape_.num_groups(); ++g) {
        if (!bits_.full[g]) out.push_back(g);
    }
    return out;
}

std::string HeadMask::canonical_key() const {
    std::ostringstream os;
    for (int l = 0; l < shape_.layers; ++l) {
        if (l) os << '|';
        bool first = true;
        for (int g = 0; g < shape_.groups; ++g) {
            if (group_full(l, g)) continue;
            if (!first) os << ',';
            os << g;
            first = false;
        }
    }
    return os.str();
}

HeadMask HeadMask::with_group(int layer, int group, bool full) const {
    if (layer < 0 || layer >= shape_.layers || group < 0 || group >= shape_.groups) {
        throw std::out_of_range("with_group: coordinate (" + std::to_string(layer) + ", " +
                                std::to_string(group) + ") out of range");
    }
    return with_flat_group(layer * shape_.groups + group, full);
}

HeadMask HeadMask::with_flat_group(int flat_group, bool full) const {
    if (flat_group < 0 || flat_group >= shape_.num_groups()) {
        throw std::out_of_range("flat group index out of range");
    }
    HeadMask out = *this;
    out.bits_.full[flat_group] = full ? 1 : 0;
    return out;
}

double ratio(const HeadMask& mask) {
    const auto& s = mask.shape();
    return static_cast<double>(mask.swa_group_count() * s.heads_per_group()) / s.num_heads();
}

double subset_ratio(const HeadMask& mask, const std::vector<int>& flat_heads) {
    if (flat_heads.empty()) throw std::invalid_argument("subset_ratio: empty head subset");
    int swa = 0;
    for (int i : flat_heads) swa += mask.head_full(i) ? 0 : 1;
    return static_cast<double>(swa) / static_cast<double>(flat_heads.size());
}

std::vector<int> heads_of_groups(const MaskShape& shape, const std::vector<int>& flat_groups) {
    std::vector<int> heads;
    const int per = shape.heads_per_group();
    for (int fg : flat_groups) {
        const int l = fg / shape.groups;
        const int g = fg % shape.groups;
        for (int k = 0; k < per; ++k) heads.push_back(l * shape.heads + g * per + k);
    }
    return heads;
}

std::uint64_t binomial(int n, int k) {
    if (k < 0 || n < 0 || k > n) return 0;
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (int i = 1; i <= k; ++i) {
        const std::uint64_t num = static_cast<std::uint64_t>(n - k + i);
        // r * num / i stays exact because r * num is divisible by i.
        if (r > std::numeric_limits<std::uint64_t>::max() / num) {
            return std::numeric_limits<std::uint64_t>::max();
        }
        r = r * num / static_cast<std::uint64_t>(i);
    }
    return r;
}

FeasibleStream::FeasibleStream(std::vector<int> free_groups, int quota)
    : free_(std::move(free_groups)), quota_(quota) {
    if (quota_ < 0 || quota_ > static_cast<int>(free_.size())) {
        throw std::invalid_argument("enumerate_feasible: quota " + std::to_string(quota_) +
                                    " exceeds free set of size " + std::to_string(free_.size()));
    }
}

bool FeasibleStream::next(std::vector<int>& swa_subset) {
    if (done_) return false;
    const int n = static_cast<int>(free_.size());
    if (!started_) {
        started_ = true;
        cursor_.resize(quota_);
        std::iota(cursor_.begin(), cursor_.end(), 0);
    } else {
        int i = quota_ - 1;
        while (i >= 0 && cursor_[i] == n - quota_ + i) --i;
        if (i < 0) {
            done_ = true;
            return false;
        }
        ++cursor_[i];
        for (int j = i + 1; j < quota_; ++j) cursor_[j] = cursor_[j - 1] + 1;
    }
    swa_subset.resize(quota_);
    for (int i = 0; i < quota_; ++i) swa_subset[i] = free_[cursor_[i]];
    if (quota_ == 0) done_ = true;
    return true;
}

FeasibleStream enumerate_feasible(std::vector<int> free_groups, int quota) {
    return FeasibleStream(std::move(free_groups), quota);
}

nlohmann::json mask_to_json(const HeadMask& mask, const std::string& model_spec_hash) {
    const auto& s = mask.shape();
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < s.layers; ++l) {
        nlohmann::json swa = nlohmann::json::array();
        for (int g = 0; g < s.groups; ++g) {
            if (!mask.group_full(l, g)) swa.push_back(g);
        }
        layers.push_back(std::move(swa));
    }
    return nlohmann::json{{"model_spec_hash", model_spec_hash},
                          {"L", s.layers},
                          {"H", s.heads},
                          {"G", s.groups},
                          {"swa_groups", std::move(layers)},
                          {"ratio", ratio(mask)}};
}

HeadMask mask_from_json(const nlohmann::json& doc) {
    MaskShape shape{doc.at("L").get<int>(), doc.at("H").get<int>(), doc.at("G").get<int>()};
    shape.validate();
    const auto& layers = doc.at("swa_groups");
    if (static_cast<int>(layers.size()) != shape.layers) {
        throw ConfigError("mask file: swa_groups must list one entry per layer");
    }
    std::vector<int> swa;
    for (int l = 0; l < shape.layers; ++l) {
        for (const auto& g : layers[l]) {
            const int gi = g.get<int>();
            if (gi < 0 || gi >= shape.groups) throw ConfigError("mask file: group index out of range");
            swa.push_back(l * shape.groups + gi);
        }
    }
    return HeadMask::from_swa_groups(shape, swa);
}

}  // namespace hybridsel
