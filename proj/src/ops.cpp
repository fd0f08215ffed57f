#include "wavenerf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "wavenerf/errors.hpp"
#include "wavenerf/parallel.hpp"

namespace wavenerf {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

// Elementwise binary op with per-element partial derivatives da, db.
template <typename Fwd, typename Da, typename Db>
Tensor ew_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    check_same_shape(a, b, name);
    const int64_t n = a.numel();
    return make_op(
        name, a.shape(), {a, b},
        [&](TensorImpl& out) {
            const double* pa = a.raw();
            const double* pb = b.raw();
            double* po = out.values.data();
            parallel_for(n, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) po[i] = fwd(pa[i], pb[i]);
            });
        },
        [a, b, da, db](TensorImpl* out) {
            const double* g = out->grad.data();
            const int64_t n = out->numel();
            if (a.requires_grad()) {
                double* ga = a.impl_raw()->grad_data();
                const double* pa = a.raw();
                const double* pb = b.raw();
                parallel_for(n, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) ga[i] += g[i] * da(pa[i], pb[i]);
                });
            }
            if (b.requires_grad()) {
                double* gb = b.impl_raw()->grad_data();
                const double* pa = a.raw();
                const double* pb = b.raw();
                parallel_for(n, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) gb[i] += g[i] * db(pa[i], pb[i]);
                });
            }
        });
}

// Elementwise unary op; derivative receives (x, y).
template <typename Fwd, typename Dx>
Tensor ew_unary(const char* name, const Tensor& a, Fwd fwd, Dx dx) {
    const int64_t n = a.numel();
    return make_op(
        name, a.shape(), {a},
        [&](TensorImpl& out) {
            const double* pa = a.raw();
            double* po = out.values.data();
            parallel_for(n, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) po[i] = fwd(pa[i]);
            });
        },
        [a, dx](TensorImpl* out) {
            if (!a.requires_grad()) return;
            const double* g = out->grad.data();
            const double* pa = a.raw();
            const double* py = out->values.data();
            double* ga = a.impl_raw()->grad_data();
            parallel_for(out->numel(), [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) ga[i] += g[i] * dx(pa[i], py[i]);
            });
        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return ew_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return ew_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return ew_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor neg(const Tensor& a) {
    return ew_unary(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double s) {
    return ew_unary(
        "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return ew_unary(
        "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return ew_unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor elu(const Tensor& a) {
    return ew_unary(
        "elu", a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
        [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Tensor softplus(const Tensor& a) {
    return ew_unary(
        "softplus", a,
        [](double x) {
            if (x > 40.0) return x;
            if (x < -40.0) return std::exp(x);
            return std::log1p(std::exp(x));
        },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor exp(const Tensor& a) {
    // Clamp keeps outputs finite on any finite input.
    return ew_unary(
        "exp", a, [](double x) { return std::exp(std::min(x, 700.0)); },
        [](double x, double y) { return x < 700.0 ? y : 0.0; });
}

Tensor abs(const Tensor& a) {
    return ew_unary(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& a) {
    return make_op(
        "sum", {1}, {a},
        [&](TensorImpl& out) {
            double acc = 0.0;
            const double* pa = a.raw();
            for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
            out.values[0] = acc;
        },
        [a](TensorImpl* out) {
            if (!a.requires_grad()) return;
            const double g = out->grad[0];
            double* ga = a.impl_raw()->grad_data();
            for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
        });
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    return make_op(
        "mean", {1}, {a},
        [&](TensorImpl& out) {
            double acc = 0.0;
            const double* pa = a.raw();
            for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
            out.values[0] = acc * inv;
        },
        [a, inv](TensorImpl* out) {
            if (!a.requires_grad()) return;
            const double g = out->grad[0] * inv;
            double* ga = a.impl_raw()->grad_data();
            for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
        });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.ndim() < 1 || s.ndim() != x.ndim() || s.dim(s.ndim() - 1) != 1) {
        throw DimensionError("scale_rows: scale must be [...,1], got " + shape_str(s.shape()));
    }
    for (int i = 0; i + 1 < x.ndim(); ++i) {
        if (x.dim(i) != s.dim(i)) {
            throw DimensionError("scale_rows: leading extents differ " + shape_str(x.shape()) +
                                 " vs " + shape_str(s.shape()));
        }
    }
    const int64_t c = x.dim(x.ndim() - 1);
    const int64_t rows = x.numel() / c;
    return make_op(
        "scale_rows", x.shape(), {x, s},
        [&](TensorImpl& out) {
            const double* px = x.raw();
            const double* ps = s.raw();
            double* po = out.values.data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const double sv = ps[r];
                    for (int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] * sv;
                }
            });
        },
        [x, s, rows, c](TensorImpl* out) {
            const double* g = out->grad.data();
            if (x.requires_grad()) {
                double* gx = x.impl_raw()->grad_data();
                const double* ps = s.raw();
                parallel_for(rows, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r)
                        for (int64_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * ps[r];
                });
            }
            if (s.requires_grad()) {
                double* gs = s.impl_raw()->grad_data();
                const double* px = x.raw();
                parallel_for(rows, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < c; ++j) acc += g[r * c + j] * px[r * c + j];
                        gs[r] += acc;
                    }
                });
            }
        });
}

Tensor sum_mid(const Tensor& x) {
    if (x.ndim() != 3) throw DimensionError("sum_mid: expected [A,B,C], got " + shape_str(x.shape()));
    const int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
    return make_op(
        "sum_mid", {static_cast<int>(a), static_cast<int>(c)}, {x},
        [&](TensorImpl& out) {
            const double* px = x.raw();
            double* po = out.values.data();
            parallel_for(a, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    for (int64_t j = 0; j < b; ++j)
                        for (int64_t t = 0; t < c; ++t) po[i * c + t] += px[(i * b + j) * c + t];
            }, 1024);
        },
        [x, a, b, c](TensorImpl* out) {
            if (!x.requires_grad()) return;
            const double* g = out->grad.data();
            double* gx = x.impl_raw()->grad_data();
            parallel_for(a, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i)
                    for (int64_t j = 0; j < b; ++j)
                        for (int64_t t = 0; t < c; ++t) gx[(i * b + j) * c + t] += g[i * c + t];
            }, 1024);
        });
}

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    return make_op(
        "reshape", std::move(shape), {a},
        [&](TensorImpl& out) { out.values = std::vector<double>(a.data().begin(), a.data().end()); },
        [a](TensorImpl* out) {
            if (!a.requires_grad()) return;
            double* ga = a.impl_raw()->grad_data();
            const double* g = out->grad.data();
            for (int64_t i = 0; i < out->numel(); ++i) ga[i] += g[i];
        });
}

namespace {

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> s(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        s[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return s;
}

// out[idx] = in[perm(idx)] index mapping for permute.
void permute_copy(const double* in, double* out, const Shape& in_shape,
                  const std::vector<int>& perm, bool inverse) {
    const size_t nd = in_shape.size();
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
    const auto in_strides = row_major_strides(in_shape);
    const auto out_strides = row_major_strides(out_shape);
    const int64_t n = shape_numel(in_shape);
    parallel_for(n, [&](int64_t lo, int64_t hi) {
        std::vector<int64_t> idx(nd);
        for (int64_t o = lo; o < hi; ++o) {
            int64_t rem = o;
            for (size_t d = 0; d < nd; ++d) {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            int64_t src = 0;
            for (size_t d = 0; d < nd; ++d) src += idx[d] * in_strides[static_cast<size_t>(perm[d])];
            if (inverse) {
                out[src] += in[o];
            } else {
                out[o] = in[src];
            }
        }
    });
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    if (static_cast<int>(perm.size()) != a.ndim()) {
        throw DimensionError("permute: rank mismatch for " + shape_str(a.shape()));
    }
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
    return make_op(
        "permute", out_shape, {a},
        [&](TensorImpl& out) { permute_copy(a.raw(), out.values.data(), a.shape(), perm, false); },
        [a, perm](TensorImpl* out) {
            if (!a.requires_grad()) return;
            // Inverse scatter is only parallel-safe per source element;
            // reuse the same index walk with += into the source layout.
            permute_copy(out->grad.data(), a.impl_raw()->grad_data(), a.shape(), perm, true);
        });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw DimensionError("concat: empty input list");
    const int nd = xs[0].ndim();
    if (axis < 0 || axis >= nd) throw DimensionError("concat: bad axis");
    Shape out_shape = xs[0].shape();
    int total = 0;
    for (const Tensor& x : xs) {
        if (x.ndim() != nd) throw DimensionError("concat: rank mismatch");
        for (int d = 0; d < nd; ++d) {
            if (d != axis && x.dim(d) != out_shape[static_cast<size_t>(d)]) {
                throw DimensionError("concat: shape mismatch " + shape_str(x.shape()) + " vs " +
                                     shape_str(xs[0].shape()));
            }
        }
        total += x.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<size_t>(d)];
    const int64_t out_row = static_cast<int64_t>(total) * inner;

    return make_op(
        "concat", out_shape, xs,
        [&](TensorImpl& out) {
            double* po = out.values.data();
            int64_t offset = 0;
            for (const Tensor& x : xs) {
                const int64_t block = static_cast<int64_t>(x.dim(axis)) * inner;
                const double* px = x.raw();
                parallel_for(outer, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                        std::memcpy(po + r * out_row + offset, px + r * block,
                                    static_cast<size_t>(block) * sizeof(double));
                    }
                });
                offset += block;
            }
        },
        [xs, outer, inner, out_row, axis](TensorImpl* out) {
            const double* g = out->grad.data();
            int64_t offset = 0;
            for (const Tensor& x : xs) {
                const int64_t block = static_cast<int64_t>(x.dim(axis)) * inner;
                if (x.requires_grad()) {
                    double* gx = x.impl_raw()->grad_data();
                    parallel_for(outer, [&](int64_t lo, int64_t hi) {
                        for (int64_t r = lo; r < hi; ++r)
                            for (int64_t j = 0; j < block; ++j)
                                gx[r * block + j] += g[r * out_row + offset + j];
                    });
                }
                offset += block;
            }
        });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    const int nd = a.ndim();
    if (axis < 0 || axis >= nd) throw DimensionError("slice: bad axis");
    if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
        throw DimensionError("slice: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of extent " +
                             std::to_string(a.dim(axis)));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < nd; ++d) inner *= a.dim(d);
    const int64_t in_row = static_cast<int64_t>(a.dim(axis)) * inner;
    const int64_t out_block = static_cast<int64_t>(len) * inner;
    const int64_t skip = static_cast<int64_t>(start) * inner;

    return make_op(
        "slice", out_shape, {a},
        [&](TensorImpl& out) {
            double* po = out.values.data();
            const double* pa = a.raw();
            parallel_for(outer, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r)
                    std::memcpy(po + r * out_block, pa + r * in_row + skip,
                                static_cast<size_t>(out_block) * sizeof(double));
            });
        },
        [a, outer, in_row, out_block, skip](TensorImpl* out) {
            if (!a.requires_grad()) return;
            double* ga = a.impl_raw()->grad_data();
            const double* g = out->grad.data();
            parallel_for(outer, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r)
                    for (int64_t j = 0; j < out_block; ++j)
                        ga[r * in_row + skip + j] += g[r * out_block + j];
            });
        });
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    return make_op(
        "matmul", {static_cast<int>(m), static_cast<int>(n)}, {a, b},
        [&](TensorImpl& out) {
            const double* pa = a.raw();
            const double* pb = b.raw();
            double* po = out.values.data();
            parallel_for(m, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    for (int64_t t = 0; t < k; ++t) {
                        const double av = pa[i * k + t];
                        if (av == 0.0) continue;
                        const double* brow = pb + t * n;
                        double* orow = po + i * n;
                        for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                    }
                }
            }, 64);
        },
        [a, b, m, k, n](TensorImpl* out) {
            const double* g = out->grad.data();
            if (a.requires_grad()) {
                double* ga = a.impl_raw()->grad_data();
                const double* pb = b.raw();
                parallel_for(m, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i)
                        for (int64_t t = 0; t < k; ++t) {
                            double acc = 0.0;
                            for (int64_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[t * n + j];
                            ga[i * k + t] += acc;
                        }
                }, 64);
            }
            if (b.requires_grad()) {
                double* gb = b.impl_raw()->grad_data();
                const double* pa = a.raw();
                // Gather per (t, j) keeps accumulation order fixed.
                parallel_for(k, [&](int64_t lo, int64_t hi) {
                    for (int64_t t = lo; t < hi; ++t)
                        for (int64_t j = 0; j < n; ++j) {
                            double acc = 0.0;
                            for (int64_t i = 0; i < m; ++i) acc += pa[i * k + t] * g[i * n + j];
                            gb[t * n + j] += acc;
                        }
                }, 64);
            }
        });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.ndim() != 2) throw DimensionError("linear: weight must be 2-D");
    const int64_t in = w.dim(0), out_w = w.dim(1);
    if (x.dim(x.ndim() - 1) != in) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
    }
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != out_w)) {
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " vs weight " +
                             shape_str(w.shape()));
    }
    const int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = static_cast<int>(out_w);

    std::vector<Tensor> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    return make_op(
        "linear", out_shape, inputs,
        [&](TensorImpl& out) {
            const double* px = x.raw();
            const double* pw = w.raw();
            const double* pb = b.defined() ? b.raw() : nullptr;
            double* po = out.values.data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    double* orow = po + r * out_w;
                    if (pb) {
                        std::memcpy(orow, pb, static_cast<size_t>(out_w) * sizeof(double));
                    }
                    const double* xrow = px + r * in;
                    for (int64_t t = 0; t < in; ++t) {
                        const double xv = xrow[t];
                        if (xv == 0.0) continue;
                        const double* wrow = pw + t * out_w;
                        for (int64_t j = 0; j < out_w; ++j) orow[j] += xv * wrow[j];
                    }
                }
            }, 64);
        },
        [x, w, b, rows, in, out_w](TensorImpl* out) {
            const double* g = out->grad.data();
            if (x.requires_grad()) {
                double* gx = x.impl_raw()->grad_data();
                const double* pw = w.raw();
                parallel_for(rows, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r)
                        for (int64_t t = 0; t < in; ++t) {
                            double acc = 0.0;
                            const double* wrow = pw + t * out_w;
                            const double* grow = g + r * out_w;
                            for (int64_t j = 0; j < out_w; ++j) acc += grow[j] * wrow[j];
                            gx[r * in + t] += acc;
                        }
                }, 64);
            }
            if (w.requires_grad()) {
                double* gw = w.impl_raw()->grad_data();
                const double* px = x.raw();
                parallel_for(in, [&](int64_t lo, int64_t hi) {
                    for (int64_t t = lo; t < hi; ++t)
                        for (int64_t r = 0; r < rows; ++r) {
                            const double xv = px[r * in + t];
                            if (xv == 0.0) continue;
                            const double* grow = g + r * out_w;
                            double* wrow = gw + t * out_w;
                            for (int64_t j = 0; j < out_w; ++j) wrow[j] += xv * grow[j];
                        }
                }, 64);
            }
            if (b.defined() && b.requires_grad()) {
                double* gb = b.impl_raw()->grad_data();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < out_w; ++j) gb[j] += g[r * out_w + j];
            }
        });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    return make_op(
        "bmm", {static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)}, {a, b},
        [&](TensorImpl& out) {
            const double* pa = a.raw();
            const double* pb = b.raw();
            double* po = out.values.data();
            parallel_for(bs, [&](int64_t lo, int64_t hi) {
                for (int64_t s = lo; s < hi; ++s) {
                    const double* as = pa + s * m * k;
                    const double* bsb = pb + s * k * n;
                    double* os = po + s * m * n;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t t = 0; t < k; ++t) {
                            const double av = as[i * k + t];
                            for (int64_t j = 0; j < n; ++j) os[i * n + j] += av * bsb[t * n + j];
                        }
                }
            }, 16);
        },
        [a, b, bs, m, k, n](TensorImpl* out) {
            const double* g = out->grad.data();
            if (a.requires_grad()) {
                double* ga = a.impl_raw()->grad_data();
                const double* pb = b.raw();
                parallel_for(bs, [&](int64_t lo, int64_t hi) {
                    for (int64_t s = lo; s < hi; ++s)
                        for (int64_t i = 0; i < m; ++i)
                            for (int64_t t = 0; t < k; ++t) {
                                double acc = 0.0;
                                for (int64_t j = 0; j < n; ++j)
                                    acc += g[(s * m + i) * n + j] * pb[(s * k + t) * n + j];
                                ga[(s * m + i) * k + t] += acc;
                            }
                }, 16);
            }
            if (b.requires_grad()) {
                double* gb = b.impl_raw()->grad_data();
                const double* pa = a.raw();
                parallel_for(bs, [&](int64_t lo, int64_t hi) {
                    for (int64_t s = lo; s < hi; ++s)
                        for (int64_t t = 0; t < k; ++t)
                            for (int64_t j = 0; j < n; ++j) {
                                double acc = 0.0;
                                for (int64_t i = 0; i < m; ++i)
                                    acc += pa[(s * m + i) * k + t] * g[(s * m + i) * n + j];
                                gb[(s * k + t) * n + j] += acc;
                            }
                }, 16);
            }
        });
}

// ---- softmax & moments ------------------------------------------------------

namespace {

Tensor softmax_impl(const char* name, const Tensor& x, const std::vector<uint8_t>* mask) {
    const int64_t k = x.dim(x.ndim() - 1);
    const int64_t rows = x.numel() / k;
    if (mask && static_cast<int64_t>(mask->size()) != x.numel()) {
        throw DimensionError("masked_softmax: mask size does not match tensor");
    }
    std::vector<uint8_t> mask_copy = mask ? *mask : std::vector<uint8_t>();
    return make_op(
        name, x.shape(), {x},
        [&](TensorImpl& out) {
            const double* px = x.raw();
            double* po = out.values.data();
            const uint8_t* pm = mask ? mask_copy.data() : nullptr;
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const double* xr = px + r * k;
                    double* orow = po + r * k;
                    double mx = -1e300;
                    for (int64_t j = 0; j < k; ++j)
                        if (!pm || pm[r * k + j]) mx = std::max(mx, xr[j]);
                    if (mx == -1e300) continue;  // fully masked row stays zero
                    double z = 0.0;
                    for (int64_t j = 0; j < k; ++j) {
                        if (!pm || pm[r * k + j]) {
                            orow[j] = std::exp(xr[j] - mx);
                            z += orow[j];
                        }
                    }
                    const double inv = 1.0 / z;
                    for (int64_t j = 0; j < k; ++j) orow[j] *= inv;
                }
            }, 2048);
        },
        [x, rows, k](TensorImpl* out) {
            if (!x.requires_grad()) return;
            const double* g = out->grad.data();
            const double* y = out->values.data();
            double* gx = x.impl_raw()->grad_data();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
                    for (int64_t j = 0; j < k; ++j)
                        gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
                }
            }, 2048);
        });
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) { return softmax_impl("softmax", x, nullptr); }

Tensor masked_softmax_lastdim(const Tensor& x, const std::vector<uint8_t>& mask) {
    return softmax_impl("masked_softmax", x, &mask);
}

Tensor masked_moments_views(const Tensor& x, const std::vector<uint8_t>& mask) {
    if (x.ndim() != 3) throw DimensionError("masked_moments_views: expected [P,V,C]");
    const int64_t p = x.dim(0), v = x.dim(1), c = x.dim(2);
    if (static_cast<int64_t>(mask.size()) != p * v) {
        throw DimensionError("masked_moments_views: mask size must be P*V");
    }
    std::vector<uint8_t> m = mask;
    return make_op(
        "masked_moments", {static_cast<int>(p), static_cast<int>(2 * c)}, {x},
        [&](TensorImpl& out) {
            const double* px = x.raw();
            double* po = out.values.data();
            parallel_for(p, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    int n = 0;
                    for (int64_t j = 0; j < v; ++j) n += m[i * v + j] ? 1 : 0;
                    if (n == 0) continue;
                    const double inv = 1.0 / n;
                    double* mu = po + i * 2 * c;
                    double* var = mu + c;
                    for (int64_t j = 0; j < v; ++j) {
                        if (!m[i * v + j]) continue;
                        const double* row = px + (i * v + j) * c;
                        for (int64_t t = 0; t < c; ++t) {
                            mu[t] += row[t] * inv;
                            var[t] += row[t] * row[t] * inv;
                        }
                    }
                    for (int64_t t = 0; t < c; ++t) var[t] -= mu[t] * mu[t];
                }
            }, 512);
        },
        [x, m, p, v, c](TensorImpl* out) {
            if (!x.requires_grad()) return;
            const double* g = out->grad.data();
            const double* px = x.raw();
            const double* po = out->values.data();
            double* gx = x.impl_raw()->grad_data();
            parallel_for(p, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    int n = 0;
                    for (int64_t j = 0; j < v; ++j) n += m[i * v + j] ? 1 : 0;
                    if (n == 0) continue;
                    const double inv = 1.0 / n;
                    const double* gmu = g + i * 2 * c;
                    const double* gvar = gmu + c;
                    const double* mu = po + i * 2 * c;
                    for (int64_t j = 0; j < v; ++j) {
                        if (!m[i * v + j]) continue;
                        const double* row = px + (i * v + j) * c;
                        double* grow = gx + (i * v + j) * c;
                        for (int64_t t = 0; t < c; ++t) {
                            grow[t] += inv * (gmu[t] + 2.0 * (row[t] - mu[t]) * gvar[t]);
                        }
                    }
                }
            }, 512);
        });
}

// ---- convolution ------------------------------------------------------------

Conv2dOpts conv_opts(int stride, int dilation, int padding) {
    return Conv2dOpts{stride, stride, dilation, dilation, padding, padding};
}

namespace {

struct ConvDims {
    int c, h, w;      // dense side ("x")
    int o, kh, kw;    // kernel
    int oh, ow;       // strided side ("y")
    Conv2dOpts opts;
};

// y[o,i,j] += sum_{c,ky,kx} w[o,c,ky,kx] * x[c, i*sh - ph + ky*dh, j*sw - pw + kx*dw]
void conv_gather_out(const double* x, const double* w, double* y, const ConvDims& d, bool accumulate) {
    const auto& o = d.opts;
    parallel_for(static_cast<int64_t>(d.o) * d.oh, [&](int64_t lo, int64_t hi) {
        for (int64_t row = lo; row < hi; ++row) {
            const int oc = static_cast<int>(row / d.oh);
            const int i = static_cast<int>(row % d.oh);
            double* yrow = y + (static_cast<int64_t>(oc) * d.oh + i) * d.ow;
            if (!accumulate) std::fill(yrow, yrow + d.ow, 0.0);
            for (int c = 0; c < d.c; ++c) {
                const double* xc = x + static_cast<int64_t>(c) * d.h * d.w;
                const double* wc = w + ((static_cast<int64_t>(oc) * d.c + c) * d.kh) * d.kw;
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int yy = i * o.stride_h - o.pad_h + ky * o.dil_h;
                    if (yy < 0 || yy >= d.h) continue;
                    const double* xrow = xc + static_cast<int64_t>(yy) * d.w;
                    const double* wrow = wc + static_cast<int64_t>(ky) * d.kw;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const double wv = wrow[kx];
                        if (wv == 0.0) continue;
                        const int x0 = -o.pad_w + kx * o.dil_w;
                        int j0 = 0, j1 = d.ow;
                        if (o.stride_w == 1) {
                            j0 = std::max(0, -x0);
                            j1 = std::min(d.ow, d.w - x0);
                            for (int j = j0; j < j1; ++j) yrow[j] += wv * xrow[x0 + j];
                        } else {
                            for (int j = j0; j < j1; ++j) {
                                const int xx = j * o.stride_w + x0;
                                if (xx >= 0 && xx < d.w) yrow[j] += wv * xrow[xx];
                            }
                        }
                    }
                }
            }
        }
    }, 8);
}

// x[c,i,j] += sum over (o,ky,kx) hits of w[o,c,ky,kx] * y[o,oh,ow]
void conv_gather_in(const double* y, const double* w, double* x, const ConvDims& d, bool accumulate) {
    const auto& o = d.opts;
    parallel_for(static_cast<int64_t>(d.c) * d.h, [&](int64_t lo, int64_t hi) {
        for (int64_t row = lo; row < hi; ++row) {
            const int c = static_cast<int>(row / d.h);
            const int i = static_cast<int>(row % d.h);
            double* xrow = x + (static_cast<int64_t>(c) * d.h + i) * d.w;
            if (!accumulate) std::fill(xrow, xrow + d.w, 0.0);
            for (int oc = 0; oc < d.o; ++oc) {
                const double* yc = y + static_cast<int64_t>(oc) * d.oh * d.ow;
                const double* wc = w + ((static_cast<int64_t>(oc) * d.c + c) * d.kh) * d.kw;
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int num = i + o.pad_h - ky * o.dil_h;
                    if (num < 0 || num % o.stride_h != 0) continue;
                    const int oy = num / o.stride_h;
                    if (oy >= d.oh) continue;
                    const double* ycrow = yc + static_cast<int64_t>(oy) * d.ow;
                    const double* wrow = wc + static_cast<int64_t>(ky) * d.kw;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const double wv = wrow[kx];
                        if (wv == 0.0) continue;
                        for (int j = 0; j < d.w; ++j) {
                            const int numx = j + o.pad_w - kx * o.dil_w;
                            if (numx < 0 || numx % o.stride_w != 0) continue;
                            const int ox = numx / o.stride_w;
                            if (ox >= d.ow) continue;
                            xrow[j] += wv * ycrow[ox];
                        }
                    }
                }
            }
        }
    }, 8);
}

// dw[o,c,ky,kx] += sum_{oh,ow} y[o,oh,ow] * x[c, oh*sh - ph + ky*dh, ...]
void conv_gather_w(const double* x, const double* y, double* dw, const ConvDims& d) {
    const auto& o = d.opts;
    parallel_for(static_cast<int64_t>(d.o) * d.c, [&](int64_t lo, int64_t hi) {
        for (int64_t oc_c = lo; oc_c < hi; ++oc_c) {
            const int oc = static_cast<int>(oc_c / d.c);
            const int c = static_cast<int>(oc_c % d.c);
            const double* yc = y + static_cast<int64_t>(oc) * d.oh * d.ow;
            const double* xc = x + static_cast<int64_t>(c) * d.h * d.w;
            double* wc = dw + oc_c * d.kh * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int yy = oy * o.stride_h - o.pad_h + ky * o.dil_h;
                        if (yy < 0 || yy >= d.h) continue;
                        const double* yrow = yc + static_cast<int64_t>(oy) * d.ow;
                        const double* xrow = xc + static_cast<int64_t>(yy) * d.w;
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int xx = ox * o.stride_w - o.pad_w + kx * o.dil_w;
                            if (xx >= 0 && xx < d.w) acc += yrow[ox] * xrow[xx];
                        }
                    }
                    wc[static_cast<int64_t>(ky) * d.kw + kx] += acc;
                }
            }
        }
    }, 1);
}

ConvDims make_conv_dims(const Tensor& x_like, const Tensor& w, const Conv2dOpts& opts,
                        bool transposed) {
    if (w.ndim() != 4) throw DimensionError("conv: kernel must be [O,C,kh,kw]");
    if (opts.stride_h < 1 || opts.stride_w < 1 || opts.dil_h < 1 || opts.dil_w < 1 ||
        opts.pad_h < 0 || opts.pad_w < 0) {
        throw ContractError("conv: stride and dilation must be >= 1, padding >= 0");
    }
    ConvDims d;
    d.o = w.dim(0);
    d.c = w.dim(1);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.opts = opts;
    if (!transposed) {
        if (x_like.ndim() != 3 || x_like.dim(0) != d.c) {
            throw DimensionError("conv2d: input " + shape_str(x_like.shape()) +
                                 " does not match kernel " + shape_str(w.shape()));
        }
        d.h = x_like.dim(1);
        d.w = x_like.dim(2);
        d.oh = (d.h + 2 * opts.pad_h - opts.dil_h * (d.kh - 1) - 1) / opts.stride_h + 1;
        d.ow = (d.w + 2 * opts.pad_w - opts.dil_w * (d.kw - 1) - 1) / opts.stride_w + 1;
        if (d.h + 2 * opts.pad_h < opts.dil_h * (d.kh - 1) + 1 ||
            d.w + 2 * opts.pad_w < opts.dil_w * (d.kw - 1) + 1) {
            throw DimensionError("conv2d: kernel " + shape_str(w.shape()) +
                                 " larger than padded input " + shape_str(x_like.shape()));
        }
    } else {
        if (x_like.ndim() != 3 || x_like.dim(0) != d.o) {
            throw DimensionError("deconv2d: input " + shape_str(x_like.shape()) +
                                 " does not match kernel " + shape_str(w.shape()));
        }
        d.oh = x_like.dim(1);
        d.ow = x_like.dim(2);
        d.h = (d.oh - 1) * opts.stride_h - 2 * opts.pad_h + opts.dil_h * (d.kh - 1) + 1;
        d.w = (d.ow - 1) * opts.stride_w - 2 * opts.pad_w + opts.dil_w * (d.kw - 1) + 1;
        if (d.h <= 0 || d.w <= 0) {
            throw DimensionError("deconv2d: output extent would be non-positive for input " +
                                 shape_str(x_like.shape()));
        }
    }
    return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dOpts& opts) {
    const ConvDims d = make_conv_dims(x, w, opts, false);
    return make_op(
        "conv2d", {d.o, d.oh, d.ow}, {x, w},
        [&](TensorImpl& out) { conv_gather_out(x.raw(), w.raw(), out.values.data(), d, false); },
        [x, w, d](TensorImpl* out) {
            const double* g = out->grad.data();
            if (x.requires_grad()) {
                conv_gather_in(g, w.raw(), x.impl_raw()->grad_data(), d, true);
            }
            if (w.requires_grad()) {
                conv_gather_w(x.raw(), g, w.impl_raw()->grad_data(), d);
            }
        });
}

Tensor deconv2d(const Tensor& y, const Tensor& w, const Conv2dOpts& opts) {
    const ConvDims d = make_conv_dims(y, w, opts, true);
    return make_op(
        "deconv2d", {d.c, d.h, d.w}, {y, w},
        [&](TensorImpl& out) { conv_gather_in(y.raw(), w.raw(), out.values.data(), d, false); },
        [y, w, d](TensorImpl* out) {
            const double* g = out->grad.data();
            if (y.requires_grad()) {
                conv_gather_out(g, w.raw(), y.impl_raw()->grad_data(), d, true);
            }
            if (w.requires_grad()) {
                conv_gather_w(g, y.raw(), w.impl_raw()->grad_data(), d);
            }
        });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 3 || b.ndim() != 1 || b.dim(0) != x.dim(0)) {
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " + " +
                             shape_str(b.shape()));
    }
    const int64_t c = x.dim(0), hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    return make_op(
        "add_channel_bias", x.shape(), {x, b},
        [&](TensorImpl& out) {
            const double* px = x.raw();
            const double* pb = b.raw();
            double* po = out.values.data();
            parallel_for(c, [&](int64_t lo, int64_t hi) {
                for (int64_t ch = lo; ch < hi; ++ch)
                    for (int64_t i = 0; i < hw; ++i) po[ch * hw + i] = px[ch * hw + i] + pb[ch];
            }, 8);
        },
        [x, b, c, hw](TensorImpl* out) {
            const double* g = out->grad.data();
            if (x.requires_grad()) {
                double* gx = x.impl_raw()->grad_data();
                parallel_for(c * hw, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) gx[i] += g[i];
                });
            }
            if (b.requires_grad()) {
                double* gb = b.impl_raw()->grad_data();
                for (int64_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; ++i) acc += g[ch * hw + i];
                    gb[ch] += acc;
                }
            }
        });
}

// ---- interpolation ----------------------------------------------------------

namespace {

// Clamp to [0, n-1]; valid when within kClampMargin of the grid.
inline bool clamp_coord(double v, int n, double& out) {
    const bool ok = v >= -kClampMargin && v <= static_cast<double>(n - 1) + kClampMargin;
    out = std::min(std::max(v, 0.0), static_cast<double>(n - 1));
    return ok;
}

struct LerpAxis {
    int i0, i1;
    double w0, w1;
};

inline LerpAxis lerp_axis(double v, int n) {
    LerpAxis a;
    a.i0 = static_cast<int>(std::floor(v));
    if (a.i0 > n - 2) a.i0 = n - 2;
    if (a.i0 < 0) a.i0 = 0;
    a.i1 = a.i0 + 1;
    const double f = v - a.i0;
    a.w0 = 1.0 - f;
    a.w1 = f;
    if (n == 1) {
        a.i0 = a.i1 = 0;
        a.w0 = 1.0;
        a.w1 = 0.0;
    }
    return a;
}

}  // namespace

SampleResult interpolate_bilinear(const Tensor& map, const std::vector<double>& uv) {
    if (map.ndim() != 3) throw DimensionError("interpolate_bilinear: map must be [C,H,W]");
    if (uv.size() % 2 != 0) throw DimensionError("interpolate_bilinear: uv must be [P,2]");
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    const int64_t p = static_cast<int64_t>(uv.size() / 2);
    SampleResult res;
    res.valid.assign(static_cast<size_t>(p), 1);
    std::vector<double> coords = uv;
    for (int64_t i = 0; i < p; ++i) {
        double cx, cy;
        const bool okx = clamp_coord(uv[2 * i], w, cx);
        const bool oky = clamp_coord(uv[2 * i + 1], h, cy);
        coords[2 * i] = cx;
        coords[2 * i + 1] = cy;
        if (!okx || !oky) res.valid[static_cast<size_t>(i)] = 0;
    }
    res.values = make_op(
        "bilinear", {static_cast<int>(p), c}, {map},
        [&](TensorImpl& out) {
            const double* pm = map.raw();
            double* po = out.values.data();
            parallel_for(p, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    const LerpAxis ax = lerp_axis(coords[2 * i], w);
                    const LerpAxis ay = lerp_axis(coords[2 * i + 1], h);
                    for (int ch = 0; ch < c; ++ch) {
                        const double* m = pm + static_cast<int64_t>(ch) * h * w;
                        po[i * c + ch] = ay.w0 * (ax.w0 * m[ay.i0 * w + ax.i0] + ax.w1 * m[ay.i0 * w + ax.i1]) +
                                         ay.w1 * (ax.w0 * m[ay.i1 * w + ax.i0] + ax.w1 * m[ay.i1 * w + ax.i1]);
                    }
                }
            }, 512);
        },
        [map, coords, p, c, h, w](TensorImpl* out) {
            if (!map.requires_grad()) return;
            const double* g = out->grad.data();
            double* gm = map.impl_raw()->grad_data();
            // Scatter sliced by channel: threads own disjoint channels.
            parallel_for(c, [&](int64_t clo, int64_t chi) {
                for (int64_t ch = clo; ch < chi; ++ch) {
                    double* m = gm + ch * h * w;
                    for (int64_t i = 0; i < p; ++i) {
                        const LerpAxis ax = lerp_axis(coords[2 * i], w);
                        const LerpAxis ay = lerp_axis(coords[2 * i + 1], h);
                        const double gv = g[i * c + ch];
                        m[ay.i0 * w + ax.i0] += gv * ay.w0 * ax.w0;
                        m[ay.i0 * w + ax.i1] += gv * ay.w0 * ax.w1;
                        m[ay.i1 * w + ax.i0] += gv * ay.w1 * ax.w0;
                        m[ay.i1 * w + ax.i1] += gv * ay.w1 * ax.w1;
                    }
                }
            }, 1);
        });
    return res;
}

SampleResult interpolate_trilinear(const Tensor& vol, const std::vector<double>& xyz) {
    if (vol.ndim() != 4) throw DimensionError("interpolate_trilinear: volume must be [D,C,H,W]");
    if (xyz.size() % 3 != 0) throw DimensionError("interpolate_trilinear: coords must be [P,3]");
    const int dpl = vol.dim(0), c = vol.dim(1), h = vol.dim(2), w = vol.dim(3);
    const int64_t p = static_cast<int64_t>(xyz.size() / 3);
    SampleResult res;
    res.valid.assign(static_cast<size_t>(p), 1);
    std::vector<double> coords = xyz;
    for (int64_t i = 0; i < p; ++i) {
        double cx, cy, cz;
        const bool okx = clamp_coord(xyz[3 * i], w, cx);
        const bool oky = clamp_coord(xyz[3 * i + 1], h, cy);
        const bool okz = clamp_coord(xyz[3 * i + 2], dpl, cz);
        coords[3 * i] = cx;
        coords[3 * i + 1] = cy;
        coords[3 * i + 2] = cz;
        if (!okx || !oky || !okz) res.valid[static_cast<size_t>(i)] = 0;
    }
    const int64_t chw = static_cast<int64_t>(c) * h * w;
    res.values = make_op(
        "trilinear", {static_cast<int>(p), c}, {vol},
        [&](TensorImpl& out) {
            const double* pv = vol.raw();
            double* po = out.values.data();
            parallel_for(p, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    const LerpAxis ax = lerp_axis(coords[3 * i], w);
                    const LerpAxis ay = lerp_axis(coords[3 * i + 1], h);
                    const LerpAxis az = lerp_axis(coords[3 * i + 2], dpl);
                    for (int ch = 0; ch < c; ++ch) {
                        const double* v0 = pv + az.i0 * chw + static_cast<int64_t>(ch) * h * w;
                        const double* v1 = pv + az.i1 * chw + static_cast<int64_t>(ch) * h * w;
                        const double s0 = ay.w0 * (ax.w0 * v0[ay.i0 * w + ax.i0] + ax.w1 * v0[ay.i0 * w + ax.i1]) +
                                          ay.w1 * (ax.w0 * v0[ay.i1 * w + ax.i0] + ax.w1 * v0[ay.i1 * w + ax.i1]);
                        const double s1 = ay.w0 * (ax.w0 * v1[ay.i0 * w + ax.i0] + ax.w1 * v1[ay.i0 * w + ax.i1]) +
                                          ay.w1 * (ax.w0 * v1[ay.i1 * w + ax.i0] + ax.w1 * v1[ay.i1 * w + ax.i1]);
                        po[i * c + ch] = az.w0 * s0 + az.w1 * s1;
                    }
                }
            }, 256);
        },
        [vol, coords, p, c, h, w, dpl, chw](TensorImpl* out) {
            if (!vol.requires_grad()) return;
            const double* g = out->grad.data();
            double* gv = vol.impl_raw()->grad_data();
            parallel_for(c, [&](int64_t clo, int64_t chi) {
                for (int64_t ch = clo; ch < chi; ++ch) {
                    for (int64_t i = 0; i < p; ++i) {
                        const LerpAxis ax = lerp_axis(coords[3 * i], w);
                        const LerpAxis ay = lerp_axis(coords[3 * i + 1], h);
                        const LerpAxis az = lerp_axis(coords[3 * i + 2], dpl);
                        const double gval = g[i * c + ch];
                        double* v0 = gv + az.i0 * chw + ch * h * w;
                        double* v1 = gv + az.i1 * chw + ch * h * w;
                        v0[ay.i0 * w + ax.i0] += gval * az.w0 * ay.w0 * ax.w0;
                        v0[ay.i0 * w + ax.i1] += gval * az.w0 * ay.w0 * ax.w1;
                        v0[ay.i1 * w + ax.i0] += gval * az.w0 * ay.w1 * ax.w0;
                        v0[ay.i1 * w + ax.i1] += gval * az.w0 * ay.w1 * ax.w1;
                        v1[ay.i0 * w + ax.i0] += gval * az.w1 * ay.w0 * ax.w0;
                        v1[ay.i0 * w + ax.i1] += gval * az.w1 * ay.w0 * ax.w1;
                        v1[ay.i1 * w + ax.i0] += gval * az.w1 * ay.w1 * ax.w0;
                        v1[ay.i1 * w + ax.i1] += gval * az.w1 * ay.w1 * ax.w1;
                    }
                }
            }, 1);
        });
    return res;
}

Tensor upsample2x_bilinear(const Tensor& x) {
    if (x.ndim() != 3) throw DimensionError("upsample2x_bilinear: input must be [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int oh = 2 * h, ow = 2 * w;
    // Output pixel i samples input at (i + 0.5)/2 - 0.5 (half-pixel alignment).
    auto axis_of = [](int i, int n) {
        double v = (i + 0.5) * 0.5 - 0.5;
        v = std::min(std::max(v, 0.0), static_cast<double>(n - 1));
        return lerp_axis(v, n);
    };
    return make_op(
        "upsample2x", {c, oh, ow}, {x},
        [&](TensorImpl& out) {
            const double* px = x.raw();
            double* po = out.values.data();
            parallel_for(static_cast<int64_t>(c) * oh, [&](int64_t lo, int64_t hi) {
                for (int64_t row = lo; row < hi; ++row) {
                    const int ch = static_cast<int>(row / oh);
                    const int i = static_cast<int>(row % oh);
                    const LerpAxis ay = axis_of(i, h);
                    const double* m = px + static_cast<int64_t>(ch) * h * w;
                    double* orow = po + row * ow;
                    for (int j = 0; j < ow; ++j) {
                        const LerpAxis ax = axis_of(j, w);
                        orow[j] = ay.w0 * (ax.w0 * m[ay.i0 * w + ax.i0] + ax.w1 * m[ay.i0 * w + ax.i1]) +
                                  ay.w1 * (ax.w0 * m[ay.i1 * w + ax.i0] + ax.w1 * m[ay.i1 * w + ax.i1]);
                    }
                }
            }, 16);
        },
        [x, c, h, w, oh, ow, axis_of](TensorImpl* out) {
            if (!x.requires_grad()) return;
            const double* g = out->grad.data();
            double* gx = x.impl_raw()->grad_data();
            parallel_for(c, [&](int64_t clo, int64_t chi) {
                for (int64_t ch = clo; ch < chi; ++ch) {
                    double* m = gx + ch * h * w;
                    for (int i = 0; i < oh; ++i) {
                        const LerpAxis ay = axis_of(i, h);
                        const double* grow = g + (ch * oh + i) * ow;
                        for (int j = 0; j < ow; ++j) {
                            const LerpAxis ax = axis_of(j, w);
                            m[ay.i0 * w + ax.i0] += grow[j] * ay.w0 * ax.w0;
                            m[ay.i0 * w + ax.i1] += grow[j] * ay.w0 * ax.w1;
                            m[ay.i1 * w + ax.i0] += grow[j] * ay.w1 * ax.w0;
                            m[ay.i1 * w + ax.i1] += grow[j] * ay.w1 * ax.w1;
                        }
                    }
                }
            }, 1);
        });
}

}  // namespace wavenerf
