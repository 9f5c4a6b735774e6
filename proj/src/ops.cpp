#include "ctxspeech/ops.hpp"

#include <algorithm>
#include <cmath>

#include "ctxspeech/errors.hpp"
#include "ctxspeech/flops.hpp"

namespace ctxspeech {

namespace {

bool wants_record(std::initializer_list<const Tensor*> inputs) {
    if (!tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void finish(const char* op, std::vector<Tensor> inputs, Tensor& result, BackwardFn fn, bool record) {
    if (record) {
        result.set_requires_grad(true);
        tape::active()->record(op, std::move(inputs), result, std::move(fn));
    }
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                         shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

Tensor map_unary(const Tensor& x, double (*f)(double)) {
    std::vector<double> out(x.size());
    auto d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
    return Tensor::from_vec(x.shape(), std::move(out));
}

// raw product used by several backward closures
std::vector<double> hadamard(std::span<const double> a, std::span<const double> b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    flops::add(static_cast<std::uint64_t>(m) * k * n);
    std::vector<double> out(m * n, 0.0);
    const double* A = a.ptr();
    const double* B = b.ptr();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = B + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tensor result = Tensor::from_vec({m, n}, std::move(out));
    bool rec = wants_record({&a, &b});
    finish(
        "matmul", {a, b}, result,
        [a, b](const Tensor& g, GradSink& sink) {
            sink.add(a, matmul(g, transpose(b)));
            sink.add(b, matmul(transpose(a), g));
        },
        rec);
    return result;
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n);
    const double* X = x.ptr();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = X[i * n + j];
    Tensor result = Tensor::from_vec({n, m}, std::move(out));
    bool rec = wants_record({&x});
    finish(
        "transpose", {x}, result, [x](const Tensor& g, GradSink& sink) { sink.add(x, transpose(g)); }, rec);
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
    Tensor result = Tensor::from_vec(a.shape(), std::move(out));
    bool rec = wants_record({&a, &b});
    finish(
        "add", {a, b}, result,
        [a, b](const Tensor& g, GradSink& sink) {
            sink.add(a, g);
            sink.add(b, g);
        },
        rec);
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    auto da = a.data(), db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
    Tensor result = Tensor::from_vec(a.shape(), std::move(out));
    bool rec = wants_record({&a, &b});
    finish(
        "sub", {a, b}, result,
        [a, b](const Tensor& g, GradSink& sink) {
            sink.add(a, g);
            sink.add(b, scalar_mul(g, -1.0));
        },
        rec);
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor result = Tensor::from_vec(a.shape(), hadamard(a.data(), b.data()));
    bool rec = wants_record({&a, &b});
    finish(
        "mul", {a, b}, result,
        [a, b](const Tensor& g, GradSink& sink) {
            sink.add(a, Tensor::from_vec(g.shape(), hadamard(g.data(), b.data())));
            sink.add(b, Tensor::from_vec(g.shape(), hadamard(g.data(), a.data())));
        },
        rec);
    return result;
}

Tensor scalar_mul(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    auto d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] * c;
    Tensor result = Tensor::from_vec(x.shape(), std::move(out));
    bool rec = wants_record({&x});
    finish(
        "scalar_mul", {x}, result, [x, c](const Tensor& g, GradSink& sink) { sink.add(x, scalar_mul(g, c)); },
        rec);
    return result;
}

Tensor broadcast_add(const Tensor& x, const Tensor& bias) {
    require_rank(x, 2, "broadcast_add");
    require_rank(bias, 1, "broadcast_add");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (bias.dim(0) != n) {
        throw ShapeError("broadcast_add: bias " + shape_str(bias.shape()) + " does not match columns of " +
                         shape_str(x.shape()));
    }
    std::vector<double> out(m * n);
    const double* X = x.ptr();
    const double* B = bias.ptr();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + B[j];
    Tensor result = Tensor::from_vec({m, n}, std::move(out));
    bool rec = wants_record({&x, &bias});
    finish(
        "broadcast_add", {x, bias}, result,
        [x, bias, m, n](const Tensor& g, GradSink& sink) {
            sink.add(x, g);
            std::vector<double> db(n, 0.0);
            const double* G = g.ptr();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) db[j] += G[i * n + j];
            sink.add(bias, Tensor::from_vec({n}, std::move(db)));
        },
        rec);
    return result;
}

Tensor relu(const Tensor& x) {
    Tensor result = map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
    bool rec = wants_record({&x});
    finish(
        "relu", {x}, result,
        [x](const Tensor& g, GradSink& sink) {
            std::vector<double> dx(g.size());
            auto gd = g.data(), xd = x.data();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = xd[i] > 0.0 ? gd[i] : 0.0;
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor sigmoid(const Tensor& x) {
    Tensor result = map_unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    bool rec = wants_record({&x});
    Tensor y = result;
    finish(
        "sigmoid", {x}, result,
        [x, y](const Tensor& g, GradSink& sink) {
            std::vector<double> dx(g.size());
            auto gd = g.data(), yd = y.data();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gd[i] * yd[i] * (1.0 - yd[i]);
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor tanh_op(const Tensor& x) {
    Tensor result = map_unary(x, [](double v) { return std::tanh(v); });
    bool rec = wants_record({&x});
    Tensor y = result;
    finish(
        "tanh", {x}, result,
        [x, y](const Tensor& g, GradSink& sink) {
            std::vector<double> dx(g.size());
            auto gd = g.data(), yd = y.data();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gd[i] * (1.0 - yd[i] * yd[i]);
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor elu_plus_one(const Tensor& x) {
    Tensor result = map_unary(x, [](double v) { return v > 0.0 ? v + 1.0 : std::exp(v); });
    bool rec = wants_record({&x});
    finish(
        "elu_plus_one", {x}, result,
        [x](const Tensor& g, GradSink& sink) {
            std::vector<double> dx(g.size());
            auto gd = g.data(), xd = x.data();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gd[i] * (xd[i] > 0.0 ? 1.0 : std::exp(xd[i]));
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor softmax_last_axis(const Tensor& x) {
    const std::size_t n = last_dim(x);
    if (n == 0) throw ShapeError("softmax: empty last axis in " + shape_str(x.shape()));
    const std::size_t rows = x.size() / n;
    std::vector<double> out(x.size());
    const double* X = x.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = X + r * n;
        double* orow = out.data() + r * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= denom;
    }
    Tensor result = Tensor::from_vec(x.shape(), std::move(out));
    bool rec = wants_record({&x});
    Tensor p = result;
    finish(
        "softmax", {x}, result,
        [x, p, n](const Tensor& g, GradSink& sink) {
            const std::size_t rows = g.size() / n;
            std::vector<double> dx(g.size());
            auto gd = g.data(), pd = p.data();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += gd[r * n + j] * pd[r * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    dx[r * n + j] = pd[r * n + j] * (gd[r * n + j] - dot);
            }
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    require_rank(gamma, 1, "layer_norm");
    require_rank(beta, 1, "layer_norm");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gamma.dim(0) != n || beta.dim(0) != n) {
        throw ShapeError("layer_norm: params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(x.shape()));
    }
    std::vector<double> out(m * n);
    std::vector<double> xhat(m * n);
    std::vector<double> inv_std(m);
    const double* X = x.ptr();
    const double* G = gamma.ptr();
    const double* B = beta.ptr();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = X + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (row[j] - mean) * inv;
            xhat[i * n + j] = xh;
            out[i * n + j] = G[j] * xh + B[j];
        }
    }
    Tensor result = Tensor::from_vec({m, n}, std::move(out));
    bool rec = wants_record({&x, &gamma, &beta});
    if (rec) {
        auto xhat_s = std::make_shared<std::vector<double>>(std::move(xhat));
        auto inv_s = std::make_shared<std::vector<double>>(std::move(inv_std));
        finish(
            "layer_norm", {x, gamma, beta}, result,
            [x, gamma, beta, xhat_s, inv_s, m, n](const Tensor& g, GradSink& sink) {
                const double* Gd = g.ptr();
                const double* W = gamma.ptr();
                std::vector<double> dgamma(n, 0.0), dbeta(n, 0.0), dx(m * n);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = Gd + i * n;
                    const double* xh = xhat_s->data() + i * n;
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dgamma[j] += grow[j] * xh[j];
                        dbeta[j] += grow[j];
                        const double dxh = grow[j] * W[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(n);
                    mean_dxhat_xhat /= static_cast<double>(n);
                    const double inv = (*inv_s)[i];
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = grow[j] * W[j];
                        dx[i * n + j] = inv * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                sink.add(x, Tensor::from_vec({m, n}, std::move(dx)));
                sink.add(gamma, Tensor::from_vec({n}, std::move(dgamma)));
                sink.add(beta, Tensor::from_vec({n}, std::move(dbeta)));
            },
            true);
    }
    return result;
}

namespace {

// same padding: output length equals input length, window starts at l - (K-1)/2
std::size_t conv_pad(std::size_t k) { return (k - 1) / 2; }

} // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(x, 2, "conv1d");
    require_rank(w, 3, "conv1d");
    const std::size_t L = x.dim(0), cin = x.dim(1);
    const std::size_t K = w.dim(0), wcin = w.dim(1), cout = w.dim(2);
    if (cin != wcin) {
        throw ShapeError("conv1d: input channels " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    }
    const bool has_bias = bias.size() > 0;
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("conv1d: bias " + shape_str(bias.shape()) + " does not match out channels " +
                         std::to_string(cout));
    }
    const std::size_t pad = conv_pad(K);
    flops::add(static_cast<std::uint64_t>(L) * K * cin * cout);
    std::vector<double> out(L * cout, 0.0);
    const double* X = x.ptr();
    const double* W = w.ptr();
    if (has_bias) {
        const double* B = bias.ptr();
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t co = 0; co < cout; ++co) out[l * cout + co] = B[co];
    }
    for (std::size_t l = 0; l < L; ++l) {
        double* orow = out.data() + l * cout;
        for (std::size_t kk = 0; kk < K; ++kk) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + kk) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
            const double* xrow = X + static_cast<std::size_t>(src) * cin;
            const double* wk = W + kk * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double xv = xrow[ci];
                const double* wrow = wk + ci * cout;
                for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * wrow[co];
            }
        }
    }
    Tensor result = Tensor::from_vec({L, cout}, std::move(out));
    bool rec = wants_record({&x, &w, &bias});
    std::vector<Tensor> inputs{x, w};
    if (has_bias) inputs.push_back(bias);
    finish(
        "conv1d", std::move(inputs), result,
        [x, w, bias, L, cin, K, cout, pad, has_bias](const Tensor& g, GradSink& sink) {
            const double* Gd = g.ptr();
            const double* X = x.ptr();
            const double* W = w.ptr();
            std::vector<double> dx(L * cin, 0.0), dw(K * cin * cout, 0.0);
            for (std::size_t l = 0; l < L; ++l) {
                const double* grow = Gd + l * cout;
                for (std::size_t kk = 0; kk < K; ++kk) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(l + kk) - static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                    const double* xrow = X + static_cast<std::size_t>(src) * cin;
                    double* dxrow = dx.data() + static_cast<std::size_t>(src) * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* wrow = W + (kk * cin + ci) * cout;
                        double* dwrow = dw.data() + (kk * cin + ci) * cout;
                        double acc = 0.0;
                        const double xv = xrow[ci];
                        for (std::size_t co = 0; co < cout; ++co) {
                            acc += grow[co] * wrow[co];
                            dwrow[co] += xv * grow[co];
                        }
                        dxrow[ci] += acc;
                    }
                }
            }
            sink.add(x, Tensor::from_vec({L, cin}, std::move(dx)));
            sink.add(w, Tensor::from_vec({K, cin, cout}, std::move(dw)));
            if (has_bias) {
                std::vector<double> db(cout, 0.0);
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t co = 0; co < cout; ++co) db[co] += Gd[l * cout + co];
                sink.add(bias, Tensor::from_vec({cout}, std::move(db)));
            }
        },
        rec);
    return result;
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank(x, 2, "depthwise_conv1d");
    require_rank(w, 2, "depthwise_conv1d");
    const std::size_t L = x.dim(0), C = x.dim(1);
    const std::size_t K = w.dim(0);
    if (w.dim(1) != C) {
        throw ShapeError("depthwise_conv1d: channels " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    }
    const bool has_bias = bias.size() > 0;
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != C)) {
        throw ShapeError("depthwise_conv1d: bias " + shape_str(bias.shape()) + " does not match channels " +
                         std::to_string(C));
    }
    const std::size_t pad = conv_pad(K);
    flops::add(static_cast<std::uint64_t>(L) * K * C);
    std::vector<double> out(L * C, 0.0);
    const double* X = x.ptr();
    const double* W = w.ptr();
    for (std::size_t l = 0; l < L; ++l) {
        double* orow = out.data() + l * C;
        if (has_bias) {
            const double* B = bias.ptr();
            for (std::size_t c = 0; c < C; ++c) orow[c] = B[c];
        }
        for (std::size_t kk = 0; kk < K; ++kk) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + kk) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
            const double* xrow = X + static_cast<std::size_t>(src) * C;
            const double* wrow = W + kk * C;
            for (std::size_t c = 0; c < C; ++c) orow[c] += xrow[c] * wrow[c];
        }
    }
    Tensor result = Tensor::from_vec({L, C}, std::move(out));
    bool rec = wants_record({&x, &w, &bias});
    std::vector<Tensor> inputs{x, w};
    if (has_bias) inputs.push_back(bias);
    finish(
        "depthwise_conv1d", std::move(inputs), result,
        [x, w, bias, L, C, K, pad, has_bias](const Tensor& g, GradSink& sink) {
            const double* Gd = g.ptr();
            const double* X = x.ptr();
            const double* W = w.ptr();
            std::vector<double> dx(L * C, 0.0), dw(K * C, 0.0);
            for (std::size_t l = 0; l < L; ++l) {
                const double* grow = Gd + l * C;
                for (std::size_t kk = 0; kk < K; ++kk) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(l + kk) - static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                    const double* xrow = X + static_cast<std::size_t>(src) * C;
                    double* dxrow = dx.data() + static_cast<std::size_t>(src) * C;
                    const double* wrow = W + kk * C;
                    double* dwrow = dw.data() + kk * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        dxrow[c] += grow[c] * wrow[c];
                        dwrow[c] += grow[c] * xrow[c];
                    }
                }
            }
            sink.add(x, Tensor::from_vec({L, C}, std::move(dx)));
            sink.add(w, Tensor::from_vec({K, C}, std::move(dw)));
            if (has_bias) {
                std::vector<double> db(C, 0.0);
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t c = 0; c < C; ++c) db[c] += Gd[l * C + c];
                sink.add(bias, Tensor::from_vec({C}, std::move(db)));
            }
        },
        rec);
    return result;
}

Tensor glu(const Tensor& x) {
    require_rank(x, 2, "glu");
    const std::size_t L = x.dim(0), twoc = x.dim(1);
    if (twoc % 2 != 0) throw ShapeError("glu: channel dim must be even, got " + shape_str(x.shape()));
    const std::size_t C = twoc / 2;
    std::vector<double> out(L * C);
    const double* X = x.ptr();
    for (std::size_t l = 0; l < L; ++l) {
        const double* row = X + l * twoc;
        for (std::size_t c = 0; c < C; ++c) {
            out[l * C + c] = row[c] / (1.0 + std::exp(-row[C + c]));
        }
    }
    Tensor result = Tensor::from_vec({L, C}, std::move(out));
    bool rec = wants_record({&x});
    finish(
        "glu", {x}, result,
        [x, L, C, twoc](const Tensor& g, GradSink& sink) {
            const double* Gd = g.ptr();
            const double* X = x.ptr();
            std::vector<double> dx(L * twoc, 0.0);
            for (std::size_t l = 0; l < L; ++l) {
                const double* row = X + l * twoc;
                const double* grow = Gd + l * C;
                double* drow = dx.data() + l * twoc;
                for (std::size_t c = 0; c < C; ++c) {
                    const double s = 1.0 / (1.0 + std::exp(-row[C + c]));
                    drow[c] = grow[c] * s;
                    drow[C + c] = grow[c] * row[c] * s * (1.0 - s);
                }
            }
            sink.add(x, Tensor::from_vec({L, twoc}, std::move(dx)));
        },
        rec);
    return result;
}

Tensor dropout(const Tensor& x, double rate, std::uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ContractError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return x;
    const double scale = 1.0 / (1.0 - rate);
    Rng rng(seed);
    auto mask = std::make_shared<std::vector<double>>(x.size());
    std::vector<double> out(x.size());
    auto d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double keep = rng.next_unit() >= rate ? scale : 0.0;
        (*mask)[i] = keep;
        out[i] = d[i] * keep;
    }
    Tensor result = Tensor::from_vec(x.shape(), std::move(out));
    bool rec = wants_record({&x});
    finish(
        "dropout", {x}, result,
        [x, mask](const Tensor& g, GradSink& sink) {
            std::vector<double> dx(g.size());
            auto gd = g.data();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gd[i] * (*mask)[i];
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

namespace {

struct AxisSplit {
    std::size_t outer, axis_dim, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

} // namespace

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
    std::size_t total_axis = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != s0.size()) {
            throw ShapeError("concat: rank mismatch " + shape_str(t.shape()) + " vs " + shape_str(s0));
        }
        for (std::size_t i = 0; i < s0.size(); ++i) {
            if (i != axis && t.dim(i) != s0[i]) {
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(s0) +
                                 " at axis " + std::to_string(i));
            }
        }
        total_axis += t.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[axis] = total_axis;
    AxisSplit sp = split_at(out_shape, axis);
    std::vector<double> out(sp.outer * total_axis * sp.inner);
    std::size_t offset = 0;
    for (const Tensor& t : xs) {
        const std::size_t block = t.dim(axis) * sp.inner;
        const double* src = t.ptr();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy(src + o * block, src + (o + 1) * block,
                      out.data() + o * total_axis * sp.inner + offset * sp.inner);
        }
        offset += t.dim(axis);
    }
    Tensor result = Tensor::from_vec(std::move(out_shape), std::move(out));
    bool rec = false;
    if (tape::active()) {
        for (const Tensor& t : xs)
            if (t.requires_grad()) rec = true;
    }
    std::vector<Tensor> inputs(xs.begin(), xs.end());
    finish(
        "concat", inputs, result,
        [xs, axis](const Tensor& g, GradSink& sink) {
            std::size_t offset = 0;
            for (const Tensor& t : xs) {
                sink.add(t, slice(g, axis, offset, t.dim(axis)));
                offset += t.dim(axis);
            }
        },
        rec);
    return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) throw ShapeError("slice: axis out of range for " + shape_str(x.shape()));
    if (start + len > x.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds " + shape_str(x.shape()) + " at axis " + std::to_string(axis));
    }
    AxisSplit sp = split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::vector<double> out(sp.outer * len * sp.inner);
    const double* X = x.ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = X + (o * sp.axis_dim + start) * sp.inner;
        std::copy(src, src + len * sp.inner, out.data() + o * len * sp.inner);
    }
    Tensor result = Tensor::from_vec(std::move(out_shape), std::move(out));
    bool rec = wants_record({&x});
    finish(
        "slice", {x}, result,
        [x, axis, start, len, sp](const Tensor& g, GradSink& sink) {
            std::vector<double> dx(x.size(), 0.0);
            const double* G = g.ptr();
            for (std::size_t o = 0; o < sp.outer; ++o) {
                double* dst = dx.data() + (o * sp.axis_dim + start) * sp.inner;
                std::copy(G + o * len * sp.inner, G + (o + 1) * len * sp.inner, dst);
            }
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor last_rows(const Tensor& x, std::size_t count) {
    if (x.rank() == 0) throw ShapeError("last_rows: scalar input");
    if (count > x.dim(0)) {
        throw ShapeError("last_rows: " + std::to_string(count) + " rows from " + shape_str(x.shape()));
    }
    return slice(x, 0, x.dim(0) - count, count);
}

Tensor repeat_rows(const Tensor& x, std::span<const std::size_t> counts) {
    if (x.rank() != 2) throw ShapeError("repeat_rows expects rank-2 input, got " + shape_str(x.shape()));
    if (counts.size() != x.dim(0)) {
        throw ShapeError("repeat_rows: " + std::to_string(counts.size()) + " counts for " +
                         std::to_string(x.dim(0)) + " rows");
    }
    const std::size_t cols = x.dim(1);
    std::size_t total = 0;
    for (std::size_t c : counts) {
        if (c == 0) throw ShapeError("repeat_rows: counts must be >= 1");
        total += c;
    }
    std::vector<double> out(total * cols);
    const double* src = x.ptr();
    double* dst = out.data();
    for (std::size_t i = 0; i < counts.size(); ++i) {
        for (std::size_t r = 0; r < counts[i]; ++r) {
            std::copy(src + i * cols, src + (i + 1) * cols, dst);
            dst += cols;
        }
    }
    Tensor result = Tensor::from_vec({total, cols}, std::move(out));
    bool rec = wants_record({&x});
    auto counts_copy = std::make_shared<std::vector<std::size_t>>(counts.begin(), counts.end());
    finish(
        "repeat_rows", {x}, result,
        [x, counts_copy, cols](const Tensor& grad_out, GradSink& sink) {
            std::vector<double> dx(x.size(), 0.0);
            const double* g = grad_out.ptr();
            std::size_t row = 0;
            for (std::size_t i = 0; i < counts_copy->size(); ++i) {
                double* drow = dx.data() + i * cols;
                for (std::size_t r = 0; r < (*counts_copy)[i]; ++r, ++row) {
                    const double* grow = g + row * cols;
                    for (std::size_t c = 0; c < cols; ++c) drow[c] += grow[c];
                }
            }
            sink.add(x, Tensor::from_vec(x.shape(), std::move(dx)));
        },
        rec);
    return result;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor result = Tensor::scalar(acc);
    bool rec = wants_record({&x});
    finish(
        "sum", {x}, result,
        [x](const Tensor& g, GradSink& sink) { sink.add(x, Tensor::full(x.shape(), g.item())); }, rec);
    return result;
}

Tensor stop_gradient(const Tensor& x) {
    Tensor result = x.detach();
    if (GradTape* t = tape::active()) {
        t->record("stop_gradient", {x}, result, nullptr);
        t->add_barrier(result);
    }
    return result;
}

Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_vec(std::move(shape), std::move(v));
}

} // namespace ctxspeech
