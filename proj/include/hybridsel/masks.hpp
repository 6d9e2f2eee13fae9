#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace hybridsel {

// Layer/head/KV-group geometry shared by every mask. All indices are 0-based;
// head h of a layer belongs to KV group h / (H / G).
struct MaskShape {
    int layers = 0;
    int heads = 0;
    int groups = 0;

    int heads_per_group() const { return heads / groups; }
    int num_heads() const { return layers * heads; }
    int num_groups() const { return layers * groups; }
    int group_of_head(int head) const { return head / heads_per_group(); }
    void validate() const;
    bool operator==(const MaskShape&) const = default;
};

// Reduced decision vector: one bit per (layer, KV group), 1 = full attention.
struct GroupVector {
    std::vector<std::uint8_t> full;
    bool operator==(const GroupVector&) const = default;
};

// Binary head mask z (1 = full self-attention, 0 = SWA). Stored per KV group,
// so the GQA coupling holds by construction.
class HeadMask {
public:
    HeadMask() = default;

    static HeadMask all_full(const MaskShape& shape);
    static HeadMask all_swa(const MaskShape& shape);
    static HeadMask from_groups(const MaskShape& shape, GroupVector groups);
    // Throws if two heads of one KV group disagree.
    static HeadMask from_head_bits(const MaskShape& shape, const std::vector<bool>& bits);
    // Every group full except the listed flat group indices.
    static HeadMask from_swa_groups(const MaskShape& shape, const std::vector<int>& swa_groups);

    const MaskShape& shape() const { return shape_; }
    bool group_full(int flat_group) const { return bits_.full.at(flat_group) != 0; }
    bool group_full(int layer, int group) const;
    bool head_full(int layer, int head) const;
    bool head_full(int flat_head) const;

    std::vector<bool> head_bits() const;
    const GroupVector& groups() const { return bits_; }
    int swa_group_count() const;
    int swa_group_count_in_layer(int layer) const;

    // Sorted flat indices of SWA groups; the canonical encoding used for
    // cache keys, tie-breaks and hashes.
    std::vector<int> swa_groups() const;
    std::string canonical_key() const;

    HeadMask with_group(int layer, int group, bool full) const;
    HeadMask with_flat_group(int flat_group, bool full) const;

    bool operator==(const HeadMask&) const = default;

private:
    HeadMask(MaskShape shape, GroupVector bits) : shape_(shape), bits_(std::move(bits)) {}

    MaskShape shape_;
    GroupVector bits_;
};

// Fraction of SWA heads, (1/N) * sum(1 - z_i).
double ratio(const HeadMask& mask);

// Fraction of SWA heads among the given flat head indices.
double subset_ratio(const HeadMask& mask, const std::vector<int>& flat_heads);

// Flat head indices of the given flat group indices.
std::vector<int> heads_of_groups(const MaskShape& shape, const std::vector<int>& flat_groups);

// Saturating binomial coefficient.
std::uint64_t binomial(int n, int k);

// Lexicographic stream over all ways to pick `quota` of `free_groups` as SWA.
class FeasibleStream {
public:
    FeasibleStream(std::vector<int> free_groups, int quota);

    // Writes the next SWA subset (in free_groups order) and returns true, or
    // returns false once exhausted.
    bool next(std::vector<int>& swa_subset);
    std::uint64_t size() const { return binomial(static_cast<int>(free_.size()), quota_); }

private:
    std::vector<int> free_;
    int quota_;
    std::vector<int> cursor_;
    bool started_ = false;
    bool done_ = false;
};

FeasibleStream enumerate_feasible(std::vector<int> free_groups, int quota);

// Mask file document. Keys are sorted so equal masks serialize byte-identically.
nlohmann::json mask_to_json(const HeadMask& mask, const std::string& model_spec_hash);
HeadMask mask_from_json(const nlohmann::json& doc);

}  // namespace hybridsel
