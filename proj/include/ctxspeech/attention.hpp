#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

enum class AttentionVariant { Softmax, Linearized, LinearizedRpe };
enum class KernelKind { EluPlusOne };
enum class RpeRole { Query, Key };

const char* variant_name(AttentionVariant v);
std::optional<AttentionVariant> variant_from_name(std::string_view name);

// Relative position encoding state for one head: a permutation of the feature
// dimension plus a positive decay base. Position p maps a kernel-mapped row x
// to decay^{+p} * P^p x (query side) or decay^{-p} * P^p x (key side).
struct RpeConfig {
    std::vector<std::uint32_t> permutation; // image of each index, 0-based
    double decay = 1.0;
    std::uint64_t seed = 0;

    static RpeConfig random(std::size_t dim, std::uint64_t seed, double decay = 1.0);
    static RpeConfig identity(std::size_t dim, double decay = 1.0);
    void validate() const;
    std::size_t dim() const { return permutation.size(); }
    std::vector<std::uint32_t> inverse() const;
};

// gather-index form of B^p for |p| <= max_position, built once and immutable
class RpePowers {
public:
    RpePowers(const RpeConfig& cfg, std::size_t max_position);
    bool covers(std::int64_t p) const;
    std::span<const std::uint32_t> row(std::int64_t p) const; // requires covers(p)
    std::size_t max_position() const { return max_position_; }

private:
    std::size_t dim_;
    std::size_t max_position_;
    std::vector<std::uint32_t> forward_;  // (max+1) x dim
    std::vector<std::uint32_t> backward_; // (max+1) x dim, inverse powers
};

// B composed with itself p times (inverse for negative p), uncached
std::vector<std::uint32_t> perm_power(const RpeConfig& cfg, std::int64_t p);

// Spec for drawing per-head permutations inside multi-head attention.
struct RpeSpec {
    double decay = 1.0;
    std::uint64_t seed = 7;
    bool shared_across_heads = false; // default: a distinct permutation per head
};

struct AttentionConfig {
    std::size_t num_heads = 4;
    std::size_t head_dim = 96;
    KernelKind kernel = KernelKind::EluPlusOne;
    AttentionVariant variant = AttentionVariant::LinearizedRpe;
    std::optional<RpeSpec> rpe = RpeSpec{};

    std::size_t hidden() const { return num_heads * head_dim; }
    void validate() const;
};

// Per-head permutations and their cached powers, built at configuration time.
struct PreparedRpe {
    std::vector<RpeConfig> heads;
    std::vector<std::shared_ptr<const RpePowers>> powers;

    static PreparedRpe build(const AttentionConfig& cfg, std::size_t max_positions);
    const RpeConfig& head(std::size_t h) const { return heads[h]; }
    const RpePowers* powers_for(std::size_t h) const { return powers[h].get(); }
};

struct MhaWeights {
    Tensor w_q, w_k, w_v, w_o; // each [D x D], bias-free
};

// softmax(q kᵀ · scale) v — materializes the [Lq x Lk] score matrix, so both
// time and transient memory are quadratic in sequence length.
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale);

// Ground-truth normalized kernel attention, computed as the literal O(Lq·Lk)
// double loop over sim(q_i,k_j) = φ(q_i)·φ(k_j). Deliberately naive; not
// differentiable (never recorded on a tape).
Tensor kernel_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                               KernelKind kernel = KernelKind::EluPlusOne);

// The normalized weight matrix implied by the oracle (rows sum to 1).
Tensor kernel_attention_weights(const Tensor& q, const Tensor& k,
                                KernelKind kernel = KernelKind::EluPlusOne);

// Factored form: S = Σ φ(k_j) v_jᵀ and z = Σ φ(k_j) are built once, each query
// costs O(d·dv). Mathematically identical to the oracle.
Tensor linearized_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            KernelKind kernel = KernelKind::EluPlusOne);

// Same factored computation on rows that are already kernel-mapped (and
// possibly position-encoded). Denominators must stay strictly positive.
Tensor linearized_premapped(const Tensor& qm, const Tensor& km, const Tensor& v);

// Rowwise position transform: row at position p becomes decay^{±p} · P^p · row.
// `powers` is consulted when it covers p; otherwise the power is composed on
// the fly (negative p uses the inverse permutation).
Tensor apply_rpe(const Tensor& x, std::span<const std::int64_t> positions, const RpeConfig& rpe,
                 RpeRole role, const RpePowers* powers = nullptr);

// Heads are column slices of the projected inputs; per-head outputs are
// concatenated and output-projected. Empty position spans mean 0..L-1.
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const MhaWeights& w,
                            const AttentionConfig& cfg, std::span<const std::int64_t> positions_q = {},
                            std::span<const std::int64_t> positions_kv = {},
                            const PreparedRpe* prepared = nullptr);

// Randomized linearized-vs-oracle agreement check (the `equivcheck` backend).
// Relative error is |a-b| / max(1, |a|, |b|).
struct EquivalenceReport {
    double max_rel_error = 0.0;
    std::uint64_t worst_seed = 0;
    std::size_t trials = 0;
};
EquivalenceReport run_oracle_equivalence(std::size_t trials, std::size_t max_len, std::size_t max_dim,
                                         std::uint64_t seed);

} // namespace ctxspeech
