#include "ctxspeech/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ctxspeech/errors.hpp"
#include "ctxspeech/flops.hpp"
#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"
#include "ctxspeech/tape.hpp"

namespace ctxspeech {

namespace {

double phi_elu1(double x) { return x > 0.0 ? x + 1.0 : std::exp(x); }

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    if (tape::active() == nullptr) return false;
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2)
        throw ShapeError(std::string(what) + " must be rank-2, got shape " + shape_str(t.shape()));
}

} // namespace

const char* variant_name(AttentionVariant v) {
    switch (v) {
    case AttentionVariant::Softmax: return "softmax";
    case AttentionVariant::Linearized: return "linearized";
    case AttentionVariant::LinearizedRpe: return "linearized_rpe";
    }
    return "unknown";
}

std::optional<AttentionVariant> variant_from_name(std::string_view name) {
    if (name == "softmax") return AttentionVariant::Softmax;
    if (name == "linearized") return AttentionVariant::Linearized;
    if (name == "linearized_rpe") return AttentionVariant::LinearizedRpe;
    return std::nullopt;
}

RpeConfig RpeConfig::random(std::size_t dim, std::uint64_t seed, double decay) {
    RpeConfig cfg;
    cfg.decay = decay;
    cfg.seed = seed;
    cfg.permutation.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) cfg.permutation[i] = static_cast<std::uint32_t>(i);
    Rng rng(seed);
    rng.shuffle(cfg.permutation);
    cfg.validate();
    return cfg;
}

RpeConfig RpeConfig::identity(std::size_t dim, double decay) {
    RpeConfig cfg;
    cfg.decay = decay;
    cfg.permutation.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) cfg.permutation[i] = static_cast<std::uint32_t>(i);
    cfg.validate();
    return cfg;
}

void RpeConfig::validate() const {
    if (permutation.empty()) throw ConfigError("rpe permutation must be non-empty");
    if (!(decay > 0.0) || !std::isfinite(decay))
        throw ConfigError("rpe decay must be a finite positive value, got " + std::to_string(decay));
    std::vector<bool> seen(permutation.size(), false);
    for (std::uint32_t img : permutation) {
        if (img >= permutation.size())
            throw ConfigError("rpe permutation entry " + std::to_string(img) + " out of range for dim " +
                              std::to_string(permutation.size()));
        if (seen[img])
            throw ConfigError("rpe permutation maps two indices to " + std::to_string(img) +
                              ", not a bijection");
        seen[img] = true;
    }
}

std::vector<std::uint32_t> RpeConfig::inverse() const {
    std::vector<std::uint32_t> inv(permutation.size());
    for (std::size_t i = 0; i < permutation.size(); ++i)
        inv[permutation[i]] = static_cast<std::uint32_t>(i);
    return inv;
}

RpePowers::RpePowers(const RpeConfig& cfg, std::size_t max_position)
    : dim_(cfg.dim()), max_position_(max_position) {
    cfg.validate();
    const std::vector<std::uint32_t> inv = cfg.inverse();
    forward_.resize((max_position + 1) * dim_);
    backward_.resize((max_position + 1) * dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
        forward_[i] = static_cast<std::uint32_t>(i);
        backward_[i] = static_cast<std::uint32_t>(i);
    }
    for (std::size_t p = 1; p <= max_position; ++p) {
        const std::uint32_t* fprev = forward_.data() + (p - 1) * dim_;
        const std::uint32_t* bprev = backward_.data() + (p - 1) * dim_;
        std::uint32_t* fcur = forward_.data() + p * dim_;
        std::uint32_t* bcur = backward_.data() + p * dim_;
        for (std::size_t i = 0; i < dim_; ++i) {
            fcur[i] = fprev[cfg.permutation[i]];
            bcur[i] = bprev[inv[i]];
        }
    }
}

bool RpePowers::covers(std::int64_t p) const {
    const std::uint64_t mag = p >= 0 ? static_cast<std::uint64_t>(p) : static_cast<std::uint64_t>(-(p + 1)) + 1;
    return mag <= max_position_;
}

std::span<const std::uint32_t> RpePowers::row(std::int64_t p) const {
    if (!covers(p))
        throw ContractError("rpe power " + std::to_string(p) + " outside cached range ±" +
                            std::to_string(max_position_));
    const std::size_t mag = static_cast<std::size_t>(p >= 0 ? p : -p);
    const std::vector<std::uint32_t>& table = p >= 0 ? forward_ : backward_;
    return {table.data() + mag * dim_, dim_};
}

std::vector<std::uint32_t> perm_power(const RpeConfig& cfg, std::int64_t p) {
    cfg.validate();
    const std::size_t d = cfg.dim();
    std::vector<std::uint32_t> base = p >= 0 ? cfg.permutation : cfg.inverse();
    std::vector<std::uint32_t> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<std::uint32_t>(i);
    std::vector<std::uint32_t> tmp(d);
    std::uint64_t n = p >= 0 ? static_cast<std::uint64_t>(p) : static_cast<std::uint64_t>(-(p + 1)) + 1;
    // square-and-multiply on the permutation group
    while (n > 0) {
        if (n & 1) {
            for (std::size_t i = 0; i < d; ++i) tmp[i] = out[base[i]];
            out.swap(tmp);
        }
        n >>= 1;
        if (n > 0) {
            for (std::size_t i = 0; i < d; ++i) tmp[i] = base[base[i]];
            base.swap(tmp);
        }
    }
    return out;
}

void AttentionConfig::validate() const {
    std::vector<std::string> problems;
    if (num_heads == 0) problems.push_back("attention num_heads must be >= 1");
    if (head_dim == 0) problems.push_back("attention head_dim must be >= 1");
    if (variant == AttentionVariant::LinearizedRpe && !rpe.has_value())
        problems.push_back("linearized_rpe attention requires an rpe spec");
    if (rpe.has_value() && (!(rpe->decay > 0.0) || !std::isfinite(rpe->decay)))
        problems.push_back("rpe decay must be a finite positive value");
    if (!problems.empty()) {
        std::string joined = problems.front();
        for (std::size_t i = 1; i < problems.size(); ++i) joined += "; " + problems[i];
        throw ConfigError(joined);
    }
}

PreparedRpe PreparedRpe::build(const AttentionConfig& cfg, std::size_t max_positions) {
    cfg.validate();
    if (!cfg.rpe.has_value()) throw ConfigError("PreparedRpe::build needs an rpe spec on the config");
    PreparedRpe out;
    out.heads.reserve(cfg.num_heads);
    out.powers.reserve(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const std::uint64_t hseed = mix_seed(cfg.rpe->seed, cfg.rpe->shared_across_heads ? 0 : h);
        out.heads.push_back(RpeConfig::random(cfg.head_dim, hseed, cfg.rpe->decay));
        out.powers.push_back(std::make_shared<RpePowers>(out.heads.back(), max_positions));
    }
    return out;
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
    require_matrix(q, "softmax_attention q");
    require_matrix(k, "softmax_attention k");
    require_matrix(v, "softmax_attention v");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("softmax_attention feature dims differ: q " + shape_str(q.shape()) + " vs k " +
                         shape_str(k.shape()));
    if (k.dim(0) != v.dim(0))
        throw ShapeError("softmax_attention k rows " + std::to_string(k.dim(0)) + " != v rows " +
                         std::to_string(v.dim(0)));
    if (!std::isfinite(scale)) throw ContractError("softmax_attention scale must be finite");
    const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1), dv = v.dim(1);
    if (lq == 0 || lk == 0) throw ShapeError("softmax_attention needs non-empty q and k");

    const double* qd = q.ptr();
    const double* kd = k.ptr();
    const double* vd = v.ptr();

    // The full score matrix is materialized on purpose: quadratic transient
    // memory is part of this variant's contract.
    std::vector<double> probs(lq * lk);
    for (std::size_t i = 0; i < lq; ++i) {
        double* row = probs.data() + i * lk;
        const double* qi = qd + i * d;
        for (std::size_t j = 0; j < lk; ++j) {
            const double* kj = kd + j * d;
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += qi[c] * kj[c];
            row[j] = acc * scale;
        }
        double mx = row[0];
        for (std::size_t j = 1; j < lk; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
            row[j] = std::exp(row[j] - mx);
            denom += row[j];
        }
        const double inv = 1.0 / denom;
        for (std::size_t j = 0; j < lk; ++j) row[j] *= inv;
    }
    Tensor p = Tensor::from_vec({lq, lk}, std::move(probs));

    std::vector<double> out(lq * dv, 0.0);
    const double* pd = p.ptr();
    for (std::size_t i = 0; i < lq; ++i) {
        const double* prow = pd + i * lk;
        double* orow = out.data() + i * dv;
        for (std::size_t j = 0; j < lk; ++j) {
            const double pij = prow[j];
            const double* vj = vd + j * dv;
            for (std::size_t b = 0; b < dv; ++b) orow[b] += pij * vj[b];
        }
    }
    flops::add(lq * lk * d + lq * lk * dv);
    Tensor result = Tensor::from_vec({lq, dv}, std::move(out));

    if (any_requires_grad({&q, &k, &v})) {
        result.set_requires_grad(true);
        tape::active()->record(
            "softmax_attention", {q, k, v}, result,
            [q, k, v, p, scale, lq, lk, dv](const Tensor& grad_out, GradSink& sink) {
                Tensor dv_grad = matmul(transpose(p), grad_out);
                Tensor dp = matmul(grad_out, transpose(v));
                const double* pd2 = p.ptr();
                const double* dpd = dp.ptr();
                std::vector<double> ds(lq * lk);
                for (std::size_t i = 0; i < lq; ++i) {
                    const double* prow = pd2 + i * lk;
                    const double* dprow = dpd + i * lk;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < lk; ++j) dot += prow[j] * dprow[j];
                    double* dsrow = ds.data() + i * lk;
                    for (std::size_t j = 0; j < lk; ++j) dsrow[j] = prow[j] * (dprow[j] - dot);
                }
                Tensor ds_t = Tensor::from_vec({lq, lk}, std::move(ds));
                sink.add(q, scalar_mul(matmul(ds_t, k), scale));
                sink.add(k, scalar_mul(matmul(transpose(ds_t), q), scale));
                sink.add(v, std::move(dv_grad));
                (void)dv;
            });
    }
    return result;
}

namespace {

// Shared by the oracle and its weight-matrix variant: fills `weights` (when
// non-null) with normalized rows and `out` (when non-null) with the attention
// output, using the literal double loop.
void oracle_core(const Tensor& q, const Tensor& k, const Tensor& v, KernelKind kernel,
                 std::vector<double>* weights, std::vector<double>* out) {
    if (kernel != KernelKind::EluPlusOne) throw ConfigError("unsupported kernel kind");
    require_matrix(q, "kernel attention q");
    require_matrix(k, "kernel attention k");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("kernel attention feature dims differ: q " + shape_str(q.shape()) + " vs k " +
                         shape_str(k.shape()));
    const std::size_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
    if (lq == 0 || lk == 0) throw ShapeError("kernel attention needs non-empty q and k");
    std::size_t dvw = 0;
    const double* vd = nullptr;
    if (out != nullptr) {
        require_matrix(v, "kernel attention v");
        if (k.dim(0) != v.dim(0))
            throw ShapeError("kernel attention k rows " + std::to_string(k.dim(0)) + " != v rows " +
                             std::to_string(v.dim(0)));
        dvw = v.dim(1);
        vd = v.ptr();
        out->assign(lq * dvw, 0.0);
    }
    if (weights != nullptr) weights->assign(lq * lk, 0.0);

    std::vector<double> phiq(lq * d), phik(lk * d);
    {
        const double* qd = q.ptr();
        const double* kd = k.ptr();
        for (std::size_t i = 0; i < lq * d; ++i) phiq[i] = phi_elu1(qd[i]);
        for (std::size_t i = 0; i < lk * d; ++i) phik[i] = phi_elu1(kd[i]);
    }

    std::vector<double> sims(lk);
    for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = phiq.data() + i * d;
        double den = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
            const double* kj = phik.data() + j * d;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
            sims[j] = s;
            den += s;
        }
        if (!(den > 0.0) || !std::isfinite(den))
            throw ContractError("kernel attention denominator " + std::to_string(den) +
                                " at query row " + std::to_string(i) +
                                " is not strictly positive and finite");
        const double inv = 1.0 / den;
        if (weights != nullptr) {
            double* wrow = weights->data() + i * lk;
            for (std::size_t j = 0; j < lk; ++j) wrow[j] = sims[j] * inv;
        }
        if (out != nullptr) {
            double* orow = out->data() + i * dvw;
            for (std::size_t j = 0; j < lk; ++j) {
                const double w = sims[j] * inv;
                const double* vj = vd + j * dvw;
                for (std::size_t b = 0; b < dvw; ++b) orow[b] += w * vj[b];
            }
        }
    }
    flops::add(lq * lk * d + (out != nullptr ? lq * lk * dvw : 0));
}

} // namespace

Tensor kernel_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, KernelKind kernel) {
    std::vector<double> out;
    oracle_core(q, k, v, kernel, nullptr, &out);
    return Tensor::from_vec({q.dim(0), v.dim(1)}, std::move(out));
}

Tensor kernel_attention_weights(const Tensor& q, const Tensor& k, KernelKind kernel) {
    std::vector<double> weights;
    oracle_core(q, k, Tensor(), kernel, &weights, nullptr);
    return Tensor::from_vec({q.dim(0), k.dim(0)}, std::move(weights));
}

Tensor linearized_premapped(const Tensor& qm, const Tensor& km, const Tensor& v) {
    require_matrix(qm, "linearized_premapped qm");
    require_matrix(km, "linearized_premapped km");
    require_matrix(v, "linearized_premapped v");
    if (qm.dim(1) != km.dim(1))
        throw ShapeError("linearized_premapped feature dims differ: qm " + shape_str(qm.shape()) +
                         " vs km " + shape_str(km.shape()));
    if (km.dim(0) != v.dim(0))
        throw ShapeError("linearized_premapped km rows " + std::to_string(km.dim(0)) + " != v rows " +
                         std::to_string(v.dim(0)));
    const std::size_t lq = qm.dim(0), lk = km.dim(0), d = qm.dim(1), dv = v.dim(1);
    if (lq == 0 || lk == 0) throw ShapeError("linearized_premapped needs non-empty qm and km");

    const double* qd = qm.ptr();
    const double* kd = km.ptr();
    const double* vd = v.ptr();

    // One pass over keys builds S = Σ φ(k_j) v_jᵀ and z = Σ φ(k_j); memory for
    // the summaries is O(d·dv) however long the sequence is.
    auto summary = std::make_shared<std::vector<double>>(d * dv, 0.0);
    auto zsum = std::make_shared<std::vector<double>>(d, 0.0);
    double* S = summary->data();
    double* z = zsum->data();
    for (std::size_t j = 0; j < lk; ++j) {
        const double* kj = kd + j * d;
        const double* vj = vd + j * dv;
        for (std::size_t a = 0; a < d; ++a) {
            const double ka = kj[a];
            double* srow = S + a * dv;
            for (std::size_t b = 0; b < dv; ++b) srow[b] += ka * vj[b];
            z[a] += ka;
        }
    }

    auto dens = std::make_shared<std::vector<double>>(lq, 0.0);
    std::vector<double> out(lq * dv, 0.0);
    for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = qd + i * d;
        double* orow = out.data() + i * dv;
        double den = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
            const double qa = qi[a];
            const double* srow = S + a * dv;
            for (std::size_t b = 0; b < dv; ++b) orow[b] += qa * srow[b];
            den += qa * z[a];
        }
        if (!(den > 0.0) || !std::isfinite(den))
            throw ContractError("linearized attention denominator " + std::to_string(den) +
                                " at query row " + std::to_string(i) +
                                " is not strictly positive and finite; inputs must be kernel-mapped");
        const double inv = 1.0 / den;
        for (std::size_t b = 0; b < dv; ++b) orow[b] *= inv;
        (*dens)[i] = den;
    }
    flops::add(lk * d * dv + lk * d + lq * (d * dv + d));
    Tensor result = Tensor::from_vec({lq, dv}, std::move(out));

    if (any_requires_grad({&qm, &km, &v})) {
        result.set_requires_grad(true);
        tape::active()->record(
            "linearized_premapped", {qm, km, v}, result,
            [qm, km, v, result, summary, zsum, dens, lq, lk, d, dv](const Tensor& grad_out, GradSink& sink) {
                const double* qd2 = qm.ptr();
                const double* kd2 = km.ptr();
                const double* vd2 = v.ptr();
                const double* od = result.ptr();
                const double* gd = grad_out.ptr();
                const double* S2 = summary->data();
                const double* z2 = zsum->data();

                std::vector<double> dqm(lq * d, 0.0);
                std::vector<double> dS(d * dv, 0.0);
                std::vector<double> dz(d, 0.0);
                for (std::size_t i = 0; i < lq; ++i) {
                    const double* gi = gd + i * dv;
                    const double* oi = od + i * dv;
                    const double* qi = qd2 + i * d;
                    const double inv = 1.0 / (*dens)[i];
                    double og = 0.0;
                    for (std::size_t b = 0; b < dv; ++b) og += oi[b] * gi[b];
                    const double dden = -og * inv;
                    double* dqi = dqm.data() + i * d;
                    for (std::size_t a = 0; a < d; ++a) {
                        const double* srow = S2 + a * dv;
                        double acc = 0.0;
                        for (std::size_t b = 0; b < dv; ++b) acc += srow[b] * gi[b];
                        dqi[a] = acc * inv + dden * z2[a];
                        double* dsrow = dS.data() + a * dv;
                        const double qscale = qi[a] * inv;
                        for (std::size_t b = 0; b < dv; ++b) dsrow[b] += qscale * gi[b];
                        dz[a] += dden * qi[a];
                    }
                }
                std::vector<double> dkm(lk * d, 0.0);
                std::vector<double> dvv(lk * dv, 0.0);
                for (std::size_t j = 0; j < lk; ++j) {
                    const double* vj = vd2 + j * dv;
                    const double* kj = kd2 + j * d;
                    double* dkj = dkm.data() + j * d;
                    double* dvj = dvv.data() + j * dv;
                    for (std::size_t a = 0; a < d; ++a) {
                        const double* dsrow = dS.data() + a * dv;
                        double acc = 0.0;
                        for (std::size_t b = 0; b < dv; ++b) {
                            acc += dsrow[b] * vj[b];
                            dvj[b] += dsrow[b] * kj[a];
                        }
                        dkj[a] = acc + dz[a];
                    }
                }
                flops::add(lq * d * dv * 2 + lk * d * dv * 2);
                sink.add(qm, Tensor::from_vec({lq, d}, std::move(dqm)));
                sink.add(km, Tensor::from_vec({lk, d}, std::move(dkm)));
                sink.add(v, Tensor::from_vec({lk, dv}, std::move(dvv)));
            });
    }
    return result;
}

Tensor linearized_attention(const Tensor& q, const Tensor& k, const Tensor& v, KernelKind kernel) {
    if (kernel != KernelKind::EluPlusOne) throw ConfigError("unsupported kernel kind");
    return linearized_premapped(elu_plus_one(q), elu_plus_one(k), v);
}

Tensor apply_rpe(const Tensor& x, std::span<const std::int64_t> positions, const RpeConfig& rpe,
                 RpeRole role, const RpePowers* powers) {
    require_matrix(x, "apply_rpe input");
    const std::size_t l = x.dim(0), d = x.dim(1);
    if (rpe.dim() != d)
        throw ShapeError("rpe permutation dim " + std::to_string(rpe.dim()) + " != feature dim " +
                         std::to_string(d));
    if (positions.size() != l)
        throw ShapeError("apply_rpe got " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(l) + " rows");

    const double decay_sign = role == RpeRole::Query ? 1.0 : -1.0;
    const double* xd = x.ptr();
    std::vector<double> out(l * d);

    const bool rec = any_requires_grad({&x});
    auto gathers = rec ? std::make_shared<std::vector<std::uint32_t>>(l * d) : nullptr;
    auto factors = rec ? std::make_shared<std::vector<double>>(l) : nullptr;

    std::vector<std::uint32_t> scratch;
    for (std::size_t i = 0; i < l; ++i) {
        const std::int64_t p = positions[i];
        const std::uint32_t* g;
        if (powers != nullptr && powers->covers(p)) {
            g = powers->row(p).data();
        } else {
            scratch = perm_power(rpe, p);
            g = scratch.data();
        }
        double factor = 1.0;
        if (rpe.decay != 1.0) {
            factor = std::pow(rpe.decay, decay_sign * static_cast<double>(p));
            if (!std::isfinite(factor) || factor <= 0.0)
                throw ContractError("rpe decay factor " + std::to_string(rpe.decay) + "^" +
                                    std::to_string(decay_sign * static_cast<double>(p)) +
                                    " degenerated at position " + std::to_string(p));
        }
        const double* xr = xd + i * d;
        double* orow = out.data() + i * d;
        for (std::size_t a = 0; a < d; ++a) orow[a] = factor * xr[g[a]];
        if (rec) {
            std::memcpy(gathers->data() + i * d, g, d * sizeof(std::uint32_t));
            (*factors)[i] = factor;
        }
    }
    flops::add(l * d);
    Tensor result = Tensor::from_vec({l, d}, std::move(out));

    if (rec) {
        result.set_requires_grad(true);
        tape::active()->record("apply_rpe", {x}, result,
                               [x, gathers, factors, l, d](const Tensor& grad_out, GradSink& sink) {
                                   const double* gd = grad_out.ptr();
                                   std::vector<double> dx(l * d, 0.0);
                                   for (std::size_t i = 0; i < l; ++i) {
                                       const std::uint32_t* g = gathers->data() + i * d;
                                       const double f = (*factors)[i];
                                       const double* grow = gd + i * d;
                                       double* drow = dx.data() + i * d;
                                       for (std::size_t a = 0; a < d; ++a) drow[g[a]] += f * grow[a];
                                   }
                                   sink.add(x, Tensor::from_vec({l, d}, std::move(dx)));
                               });
    }
    return result;
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const MhaWeights& w,
                            const AttentionConfig& cfg, std::span<const std::int64_t> positions_q,
                            std::span<const std::int64_t> positions_kv, const PreparedRpe* prepared) {
    cfg.validate();
    const std::size_t dmodel = cfg.hidden();
    require_matrix(x_q, "attention query input");
    require_matrix(x_kv, "attention key/value input");
    if (x_q.dim(1) != dmodel || x_kv.dim(1) != dmodel)
        throw ShapeError("attention inputs must have width " + std::to_string(dmodel) + ", got q " +
                         shape_str(x_q.shape()) + " and kv " + shape_str(x_kv.shape()));
    for (const Tensor* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) {
        require_matrix(*m, "attention projection");
        if (m->dim(0) != dmodel || m->dim(1) != dmodel)
            throw ShapeError("attention projection must be [" + std::to_string(dmodel) + " x " +
                             std::to_string(dmodel) + "], got " + shape_str(m->shape()));
    }
    const std::size_t lq = x_q.dim(0), lkv = x_kv.dim(0);

    std::vector<std::int64_t> default_q, default_kv;
    if (positions_q.empty()) {
        default_q.resize(lq);
        for (std::size_t i = 0; i < lq; ++i) default_q[i] = static_cast<std::int64_t>(i);
        positions_q = default_q;
    }
    if (positions_kv.empty()) {
        default_kv.resize(lkv);
        for (std::size_t i = 0; i < lkv; ++i) default_kv[i] = static_cast<std::int64_t>(i);
        positions_kv = default_kv;
    }
    if (positions_q.size() != lq)
        throw ShapeError("attention got " + std::to_string(positions_q.size()) + " query positions for " +
                         std::to_string(lq) + " rows");
    if (positions_kv.size() != lkv)
        throw ShapeError("attention got " + std::to_string(positions_kv.size()) +
                         " key positions for " + std::to_string(lkv) + " rows");

    Tensor q = matmul(x_q, w.w_q);
    Tensor k = matmul(x_kv, w.w_k);
    Tensor v = matmul(x_kv, w.w_v);

    PreparedRpe local;
    const PreparedRpe* rpe = prepared;
    if (cfg.variant == AttentionVariant::LinearizedRpe && rpe == nullptr) {
        std::int64_t maxp = 0;
        for (std::int64_t p : positions_q) maxp = std::max(maxp, p >= 0 ? p : -p);
        for (std::int64_t p : positions_kv) maxp = std::max(maxp, p >= 0 ? p : -p);
        local = PreparedRpe::build(cfg, static_cast<std::size_t>(maxp));
        rpe = &local;
    }
    if (rpe != nullptr && cfg.variant == AttentionVariant::LinearizedRpe &&
        rpe->heads.size() != cfg.num_heads)
        throw ConfigError("prepared rpe has " + std::to_string(rpe->heads.size()) + " heads, config wants " +
                          std::to_string(cfg.num_heads));

    std::vector<Tensor> head_outs;
    head_outs.reserve(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        Tensor qh = slice(q, 1, h * cfg.head_dim, cfg.head_dim);
        Tensor kh = slice(k, 1, h * cfg.head_dim, cfg.head_dim);
        Tensor vh = slice(v, 1, h * cfg.head_dim, cfg.head_dim);
        switch (cfg.variant) {
        case AttentionVariant::Softmax:
            head_outs.push_back(
                softmax_attention(qh, kh, vh, 1.0 / std::sqrt(static_cast<double>(cfg.head_dim))));
            break;
        case AttentionVariant::Linearized:
            head_outs.push_back(linearized_attention(qh, kh, vh, cfg.kernel));
            break;
        case AttentionVariant::LinearizedRpe: {
            Tensor qm = apply_rpe(elu_plus_one(qh), positions_q, rpe->head(h), RpeRole::Query,
                                  rpe->powers_for(h));
            Tensor km = apply_rpe(elu_plus_one(kh), positions_kv, rpe->head(h), RpeRole::Key,
                                  rpe->powers_for(h));
            head_outs.push_back(linearized_premapped(qm, km, vh));
            break;
        }
        }
    }
    Tensor merged = cfg.num_heads == 1 ? head_outs.front() : concat(head_outs, 1);
    return matmul(merged, w.w_o);
}

EquivalenceReport run_oracle_equivalence(std::size_t trials, std::size_t max_len, std::size_t max_dim,
                                         std::uint64_t seed) {
    if (trials == 0) throw ConfigError("equivalence check needs at least one trial");
    if (max_len == 0 || max_dim == 0) throw ConfigError("equivalence check bounds must be >= 1");
    EquivalenceReport report;
    report.trials = trials;
    Rng root(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        const std::uint64_t trial_seed = root.next_u64();
        Rng rng(trial_seed);
        const std::size_t lq = 1 + rng.below(max_len);
        const std::size_t lk = 1 + rng.below(max_len);
        const std::size_t d = 1 + rng.below(max_dim);
        const std::size_t dv = 1 + rng.below(max_dim);
        Tensor q = random_uniform({lq, d}, rng, -3.0, 3.0);
        Tensor k = random_uniform({lk, d}, rng, -3.0, 3.0);
        Tensor v = random_uniform({lk, dv}, rng, -3.0, 3.0);
        Tensor fast = linearized_attention(q, k, v);
        Tensor slow = kernel_attention_oracle(q, k, v);
        const double* fa = fast.ptr();
        const double* sl = slow.ptr();
        for (std::size_t i = 0; i < fast.size(); ++i) {
            const double rel =
                std::abs(fa[i] - sl[i]) / std::max({1.0, std::abs(fa[i]), std::abs(sl[i])});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_seed = trial_seed;
            }
        }
    }
    return report;
}

} // namespace ctxspeech
