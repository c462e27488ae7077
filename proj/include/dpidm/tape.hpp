#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "dpidm/tensor.hpp"

namespace dpidm {

// Handle into a Tape. Invalid (id < 0) means "absent", e.g. a skipped bias.
struct Value {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {
template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using MapC = Eigen::Map<const EMat<T>>;
}  // namespace detail

// Reverse-mode autodiff tape over dense tensors. Ops append nodes; backward()
// walks the nodes in reverse creation order. Single-threaded and fully
// deterministic. The tape is not copyable: backward closures capture `this`.
template <typename T>
class Tape {
  public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    size_t size() const { return nodes_.size(); }

    Value constant(Tensor<T> v) { return push(std::move(v), false); }
    Value leaf(Tensor<T> v) { return push(std::move(v), grad_enabled_); }

    const Tensor<T>& val(Value v) const { return node(v).value; }
    Shape shape(Value v) const { return node(v).value.shape; }

    bool has_grad(Value v) const { return node(v).grad.numel() > 0; }

    const Tensor<T>& grad(Value v) const {
        const Node& n = node(v);
        if (n.grad.numel() == 0) {
            static thread_local Tensor<T> zero;
            zero = Tensor<T>(n.value.shape);
            return zero;
        }
        return n.grad;
    }

    // ---- elementwise ----

    Value add(Value a, Value b) {
        check_same(a, b, "add");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return unary_binary(std::move(out), a, b, [this](Value a, Value b, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            });
            accum(b, [&](Tensor<T>& gb) {
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            });
        });
    }

    Value sub(Value a, Value b) {
        check_same(a, b, "sub");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
        return unary_binary(std::move(out), a, b, [this](Value a, Value b, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            });
            accum(b, [&](Tensor<T>& gb) {
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
            });
        });
    }

    Value mul(Value a, Value b) {
        check_same(a, b, "mul");
        Tensor<T> out = val(a);
        const Tensor<T>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        return unary_binary(std::move(out), a, b, [this](Value a, Value b, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& va = node(a).value;
            const Tensor<T>& vb = node(b).value;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
            });
            accum(b, [&](Tensor<T>& gb) {
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
            });
        });
    }

    Value scale(Value a, T c) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v *= c;
        return unary(std::move(out), a, [this, c](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
            });
        });
    }

    Value silu(Value a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
        return unary(std::move(out), a, [this](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(a).value;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const T s = T(1) / (T(1) + std::exp(-x[i]));
                    ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
                }
            });
        });
    }

    // Exact GELU: x * Phi(x).
    Value gelu(Value a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data)
            v = v * T(0.5) * (T(1) + std::erf(v * T(0.70710678118654752440)));
        return unary(std::move(out), a, [this](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(a).value;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const T phi = T(0.5) * (T(1) + std::erf(x[i] * T(0.70710678118654752440)));
                    const T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * x[i] * x[i]);
                    ga[i] += g[i] * (phi + x[i] * pdf);
                }
            });
        });
    }

    Value sigmoid(Value a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        return unary(std::move(out), a, [this](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& y = node(o).value;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
            });
        });
    }

    Value abs(Value a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = std::abs(v);
        return unary(std::move(out), a, [this](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(a).value;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i)
                    ga[i] += g[i] * (x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0)));
            });
        });
    }

    // ---- shape ----

    Value reshape(Value a, Shape s) {
        Tensor<T> out = val(a).reshaped(std::move(s));
        return unary(std::move(out), a, [this](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            });
        });
    }

    Value permute(Value a, std::vector<int> perm) {
        const Tensor<T>& x = val(a);
        Tensor<T> out = permute_copy(x, perm);
        return unary(std::move(out), a, [this, perm](Value a, Value o) {
            std::vector<int> inv(perm.size());
            for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
            Tensor<T> gp = permute_copy(node(o).grad, inv);
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < gp.numel(); ++i) ga[i] += gp[i];
            });
        });
    }

    Value concat(int axis, const std::vector<Value>& items) {
        if (items.empty()) throw ShapeError("concat of empty list");
        const Shape& s0 = shape(items[0]);
        Shape out_shape = s0;
        int64_t cat = 0;
        for (Value v : items) {
            const Shape& s = shape(v);
            if (static_cast<int>(s.size()) != static_cast<int>(s0.size()))
                throw ShapeError("concat rank mismatch");
            for (size_t i = 0; i < s.size(); ++i)
                if (static_cast<int>(i) != axis && s[i] != s0[i])
                    throw ShapeError("concat dim mismatch at axis " + std::to_string(i));
            cat += s[static_cast<size_t>(axis)];
        }
        out_shape[static_cast<size_t>(axis)] = cat;
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
        for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

        Tensor<T> out(out_shape);
        int64_t off = 0;
        for (Value v : items) {
            const Tensor<T>& x = val(v);
            const int64_t len = x.shape[static_cast<size_t>(axis)] * inner;
            for (int64_t ou = 0; ou < outer; ++ou)
                std::copy_n(x.ptr() + ou * len, len, out.ptr() + ou * cat * inner + off);
            off += len;
        }
        std::vector<Value> srcs = items;
        return nary(std::move(out), srcs, [this, srcs, axis, outer, inner, cat](Value o) {
            const Tensor<T>& g = node(o).grad;
            int64_t off = 0;
            for (Value v : srcs) {
                const int64_t len = node(v).value.shape[static_cast<size_t>(axis)] * inner;
                accum(v, [&](Tensor<T>& gv) {
                    for (int64_t ou = 0; ou < outer; ++ou) {
                        const T* src = g.ptr() + ou * cat * inner + off;
                        T* dst = gv.ptr() + ou * len;
                        for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                });
                off += len;
            }
        });
    }

    Value slice(Value a, int axis, int64_t lo, int64_t hi) {
        const Tensor<T>& x = val(a);
        const Shape& s = x.shape;
        if (lo < 0 || hi > s[static_cast<size_t>(axis)] || lo >= hi)
            throw ShapeError("slice bounds [" + std::to_string(lo) + "," + std::to_string(hi) +
                             ") on axis size " + std::to_string(s[static_cast<size_t>(axis)]));
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
        for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
        const int64_t full = s[static_cast<size_t>(axis)] * inner;
        const int64_t len = (hi - lo) * inner;
        Shape out_shape = s;
        out_shape[static_cast<size_t>(axis)] = hi - lo;
        Tensor<T> out(out_shape);
        for (int64_t ou = 0; ou < outer; ++ou)
            std::copy_n(x.ptr() + ou * full + lo * inner, len, out.ptr() + ou * len);
        return unary(std::move(out), a, [this, axis, lo, outer, inner, full, len](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t ou = 0; ou < outer; ++ou) {
                    const T* src = g.ptr() + ou * len;
                    T* dst = ga.ptr() + ou * full + lo * inner;
                    for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
                }
            });
        });
    }

    // Repeats x along a new leading axis: [s...] -> [n, s...].
    Value tile0(Value a, int64_t n) {
        const Tensor<T>& x = val(a);
        Shape out_shape;
        out_shape.push_back(n);
        for (int64_t d : x.shape) out_shape.push_back(d);
        Tensor<T> out(out_shape);
        for (int64_t i = 0; i < n; ++i) std::copy_n(x.ptr(), x.numel(), out.ptr() + i * x.numel());
        return unary(std::move(out), a, [this, n](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            const int64_t m = node(a).value.numel();
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < n; ++i) {
                    const T* src = g.ptr() + i * m;
                    for (int64_t j = 0; j < m; ++j) ga[j] += src[j];
                }
            });
        });
    }

    Value mean_axis(Value a, int axis) {
        const Tensor<T>& x = val(a);
        const Shape& s = x.shape;
        int64_t outer = 1, inner = 1;
        const int64_t n = s[static_cast<size_t>(axis)];
        for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
        for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
        Shape out_shape;
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis) out_shape.push_back(s[i]);
        Tensor<T> out(out_shape);
        for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t k = 0; k < n; ++k) {
                const T* src = x.ptr() + (ou * n + k) * inner;
                T* dst = out.ptr() + ou * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        const T invn = T(1) / static_cast<T>(n);
        for (auto& v : out.data) v *= invn;
        return unary(std::move(out), a, [this, axis, outer, inner, n, invn](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t ou = 0; ou < outer; ++ou)
                    for (int64_t k = 0; k < n; ++k) {
                        const T* src = g.ptr() + ou * inner;
                        T* dst = ga.ptr() + (ou * n + k) * inner;
                        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * invn;
                    }
            });
        });
    }

    Value mean_all(Value a) {
        const Tensor<T>& x = val(a);
        T acc = 0;
        for (const auto& v : x.data) acc += v;
        Tensor<T> out(Shape{1});
        out[0] = acc / static_cast<T>(x.numel());
        return unary(std::move(out), a, [this](Value a, Value o) {
            const T g = node(o).grad[0] / static_cast<T>(node(a).value.numel());
            accum(a, [&](Tensor<T>& ga) {
                for (auto& v : ga.data) v += g;
            });
        });
    }

    // ---- dense algebra ----

    Value matmul(Value a, Value b) {
        const Tensor<T>& x = val(a);
        const Tensor<T>& w = val(b);
        if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0])
            throw ShapeError("matmul " + shape_str(x.shape) + " x " + shape_str(w.shape));
        Tensor<T> out(Shape{x.shape[0], w.shape[1]});
        detail::MapM<T>(out.ptr(), out.shape[0], out.shape[1]).noalias() =
            detail::MapC<T>(x.ptr(), x.shape[0], x.shape[1]) *
            detail::MapC<T>(w.ptr(), w.shape[0], w.shape[1]);
        return unary_binary(std::move(out), a, b, [this](Value a, Value b, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(a).value;
            const Tensor<T>& w = node(b).value;
            detail::MapC<T> G(g.ptr(), g.shape[0], g.shape[1]);
            detail::MapC<T> X(x.ptr(), x.shape[0], x.shape[1]);
            detail::MapC<T> W(w.ptr(), w.shape[0], w.shape[1]);
            accum(a, [&](Tensor<T>& ga) {
                detail::MapM<T>(ga.ptr(), ga.shape[0], ga.shape[1]).noalias() += G * W.transpose();
            });
            accum(b, [&](Tensor<T>& gb) {
                detail::MapM<T>(gb.ptr(), gb.shape[0], gb.shape[1]).noalias() += X.transpose() * G;
            });
        });
    }

    // y = x w + b with x [R,din], w [din,dout], optional b [dout].
    Value linear(Value xv, Value wv, Value bv = {}) {
        const Tensor<T>& x = val(xv);
        const Tensor<T>& w = val(wv);
        if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0])
            throw ShapeError("linear " + shape_str(x.shape) + " x " + shape_str(w.shape));
        Tensor<T> out(Shape{x.shape[0], w.shape[1]});
        detail::MapM<T> O(out.ptr(), out.shape[0], out.shape[1]);
        O.noalias() = detail::MapC<T>(x.ptr(), x.shape[0], x.shape[1]) *
                      detail::MapC<T>(w.ptr(), w.shape[0], w.shape[1]);
        if (bv.valid()) {
            const Tensor<T>& b = val(bv);
            for (int64_t r = 0; r < out.shape[0]; ++r)
                for (int64_t c = 0; c < out.shape[1]; ++c) out.at(r, c) += b[c];
        }
        std::vector<Value> srcs = bv.valid() ? std::vector<Value>{xv, wv, bv} : std::vector<Value>{xv, wv};
        return nary(std::move(out), srcs, [this, xv, wv, bv](Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(xv).value;
            const Tensor<T>& w = node(wv).value;
            detail::MapC<T> G(g.ptr(), g.shape[0], g.shape[1]);
            accum(xv, [&](Tensor<T>& gx) {
                detail::MapM<T>(gx.ptr(), gx.shape[0], gx.shape[1]).noalias() +=
                    G * detail::MapC<T>(w.ptr(), w.shape[0], w.shape[1]).transpose();
            });
            accum(wv, [&](Tensor<T>& gw) {
                detail::MapM<T>(gw.ptr(), gw.shape[0], gw.shape[1]).noalias() +=
                    detail::MapC<T>(x.ptr(), x.shape[0], x.shape[1]).transpose() * G;
            });
            if (bv.valid())
                accum(bv, [&](Tensor<T>& gb) {
                    for (int64_t r = 0; r < g.shape[0]; ++r)
                        for (int64_t c = 0; c < g.shape[1]; ++c) gb[c] += g.at(r, c);
                });
        });
    }

    // x [N,C,H,W] conv with w [Co,C,kh,kw], optional b [Co]; zero padding.
    Value conv2d(Value xv, Value wv, Value bv, int stride, int pad) {
        const Tensor<T>& x = val(xv);
        const Tensor<T>& w = val(wv);
        if (x.rank() != 4 || w.rank() != 4 || x.shape[1] != w.shape[1])
            throw ShapeError("conv2d " + shape_str(x.shape) + " w " + shape_str(w.shape));
        const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int64_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
        const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d output would be empty");
        Tensor<T> out(Shape{N, Co, Ho, Wo});
        const int64_t K = C * kh * kw, P = Ho * Wo;
        std::vector<T> cols(static_cast<size_t>(K * P));
        for (int64_t n = 0; n < N; ++n) {
            im2col(x.ptr() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
            detail::MapM<T> O(out.ptr() + n * Co * P, Co, P);
            O.noalias() = detail::MapC<T>(w.ptr(), Co, K) * detail::MapC<T>(cols.data(), K, P);
            if (bv.valid()) {
                const Tensor<T>& b = val(bv);
                for (int64_t c = 0; c < Co; ++c) O.row(c).array() += b[c];
            }
        }
        std::vector<Value> srcs = bv.valid() ? std::vector<Value>{xv, wv, bv} : std::vector<Value>{xv, wv};
        return nary(std::move(out), srcs, [this, xv, wv, bv, stride, pad, Ho, Wo](Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(xv).value;
            const Tensor<T>& w = node(wv).value;
            const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            const int64_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
            const int64_t K = C * kh * kw, P = Ho * Wo;
            std::vector<T> cols(static_cast<size_t>(K * P));
            std::vector<T> dcols(static_cast<size_t>(K * P));
            const bool need_x = node(xv).requires_grad;
            const bool need_w = node(wv).requires_grad;
            for (int64_t n = 0; n < N; ++n) {
                detail::MapC<T> G(g.ptr() + n * Co * P, Co, P);
                if (need_w) {
                    im2col(x.ptr() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
                    accum(wv, [&](Tensor<T>& gw) {
                        detail::MapM<T>(gw.ptr(), Co, K).noalias() +=
                            G * detail::MapC<T>(cols.data(), K, P).transpose();
                    });
                }
                if (need_x) {
                    detail::MapM<T>(dcols.data(), K, P).noalias() =
                        detail::MapC<T>(w.ptr(), Co, K).transpose() * G;
                    accum(xv, [&](Tensor<T>& gx) {
                        col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                                   gx.ptr() + n * C * H * W);
                    });
                }
            }
            if (bv.valid())
                accum(bv, [&](Tensor<T>& gb) {
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t c = 0; c < Co; ++c) {
                            const T* row = g.ptr() + (n * Co + c) * P;
                            T acc = 0;
                            for (int64_t p = 0; p < P; ++p) acc += row[p];
                            gb[c] += acc;
                        }
                });
        });
    }

    Value nearest_up2(Value a) {
        const Tensor<T>& x = val(a);
        const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        Tensor<T> out(Shape{N, C, 2 * H, 2 * W});
        for (int64_t nc = 0; nc < N * C; ++nc)
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    const T v = x.ptr()[(nc * H + i) * W + j];
                    T* base = out.ptr() + (nc * 2 * H + 2 * i) * 2 * W + 2 * j;
                    base[0] = v;
                    base[1] = v;
                    base[2 * W] = v;
                    base[2 * W + 1] = v;
                }
        return unary(std::move(out), a, [this, N, C, H, W](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t nc = 0; nc < N * C; ++nc)
                    for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j) {
                            const T* base = g.ptr() + (nc * 2 * H + 2 * i) * 2 * W + 2 * j;
                            ga.ptr()[(nc * H + i) * W + j] +=
                                base[0] + base[1] + base[2 * W] + base[2 * W + 1];
                        }
            });
        });
    }

    // Average pool with kernel == stride == k.
    Value avg_pool(Value a, int k) {
        const Tensor<T>& x = val(a);
        const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        if (H % k || W % k) throw ShapeError("avg_pool dims not divisible by " + std::to_string(k));
        const int64_t Ho = H / k, Wo = W / k;
        Tensor<T> out(Shape{N, C, Ho, Wo});
        const T inv = T(1) / static_cast<T>(k * k);
        for (int64_t nc = 0; nc < N * C; ++nc)
            for (int64_t i = 0; i < Ho; ++i)
                for (int64_t j = 0; j < Wo; ++j) {
                    T acc = 0;
                    for (int64_t di = 0; di < k; ++di)
                        for (int64_t dj = 0; dj < k; ++dj)
                            acc += x.ptr()[(nc * H + i * k + di) * W + j * k + dj];
                    out.ptr()[(nc * Ho + i) * Wo + j] = acc * inv;
                }
        return unary(std::move(out), a, [this, N, C, H, W, Ho, Wo, k, inv](Value a, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(a, [&](Tensor<T>& ga) {
                for (int64_t nc = 0; nc < N * C; ++nc)
                    for (int64_t i = 0; i < Ho; ++i)
                        for (int64_t j = 0; j < Wo; ++j) {
                            const T gv = g.ptr()[(nc * Ho + i) * Wo + j] * inv;
                            for (int64_t di = 0; di < k; ++di)
                                for (int64_t dj = 0; dj < k; ++dj)
                                    ga.ptr()[(nc * H + i * k + di) * W + j * k + dj] += gv;
                        }
            });
        });
    }

    // Per-channel bias over [N,C,H,W].
    Value add_bias_chan(Value xv, Value bv) {
        const Tensor<T>& x = val(xv);
        const Tensor<T>& b = val(bv);
        if (x.rank() != 4 || b.numel() != x.shape[1]) throw ShapeError("add_bias_chan");
        Tensor<T> out = x;
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                T* row = out.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) row[i] += b[c];
            }
        return unary_binary(std::move(out), xv, bv, [this, N, C, HW](Value xv, Value bv, Value o) {
            const Tensor<T>& g = node(o).grad;
            accum(xv, [&](Tensor<T>& gx) {
                for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
            });
            accum(bv, [&](Tensor<T>& gb) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* row = g.ptr() + (n * C + c) * HW;
                        T acc = 0;
                        for (int64_t i = 0; i < HW; ++i) acc += row[i];
                        gb[c] += acc;
                    }
            });
        });
    }

    // Per-channel scale over [N,C,H,W].
    Value mul_chan(Value xv, Value sv) {
        const Tensor<T>& x = val(xv);
        const Tensor<T>& s = val(sv);
        if (x.rank() != 4 || s.numel() != x.shape[1]) throw ShapeError("mul_chan");
        Tensor<T> out = x;
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                T* row = out.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) row[i] *= s[c];
            }
        return unary_binary(std::move(out), xv, sv, [this, N, C, HW](Value xv, Value sv, Value o) {
            const Tensor<T>& g = node(o).grad;
            const Tensor<T>& x = node(xv).value;
            const Tensor<T>& s = node(sv).value;
            accum(xv, [&](Tensor<T>& gx) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* row = g.ptr() + (n * C + c) * HW;
                        T* dst = gx.ptr() + (n * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) dst[i] += row[i] * s[c];
                    }
            });
            accum(sv, [&](Tensor<T>& gs) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* row = g.ptr() + (n * C + c) * HW;
                        const T* xr = x.ptr() + (n * C + c) * HW;
                        T acc = 0;
                        for (int64_t i = 0; i < HW; ++i) acc += row[i] * xr[i];
                        gs[c] += acc;
                    }
            });
        });
    }

    // GroupNorm over [N,C,H,W] with affine per-channel gamma/beta.
    Value group_norm(Value xv, int groups, Value gv, Value bv, T eps = T(1e-5)) {
        const Tensor<T>& x = val(xv);
        if (x.rank() != 4 || x.shape[1] % groups) throw ShapeError("group_norm channels/groups");
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        const int64_t gs = C / groups, m = gs * HW;
        const Tensor<T>& gamma = val(gv);
        const Tensor<T>& beta = val(bv);
        Tensor<T> out(x.shape);
        auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(2 * N * groups));
        for (int64_t n = 0; n < N; ++n)
            for (int64_t g = 0; g < groups; ++g) {
                const T* base = x.ptr() + (n * C + g * gs) * HW;
                T mu = 0;
                for (int64_t i = 0; i < m; ++i) mu += base[i];
                mu /= static_cast<T>(m);
                T var = 0;
                for (int64_t i = 0; i < m; ++i) {
                    const T d = base[i] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(m);
                const T rstd = T(1) / std::sqrt(var + eps);
                (*stats)[static_cast<size_t>(2 * (n * groups + g))] = mu;
                (*stats)[static_cast<size_t>(2 * (n * groups + g) + 1)] = rstd;
                T* po = out.ptr() + (n * C + g * gs) * HW;
                for (int64_t c = 0; c < gs; ++c) {
                    const T ga = gamma[g * gs + c], be = beta[g * gs + c];
                    for (int64_t i = 0; i < HW; ++i)
                        po[c * HW + i] = (base[c * HW + i] - mu) * rstd * ga + be;
                }
            }
        std::vector<Value> srcs{xv, gv, bv};
        return nary(std::move(out), srcs, [this, xv, gv, bv, groups, stats, N, C, HW, gs, m](Value o) {
            const Tensor<T>& gout = node(o).grad;
            const Tensor<T>& x = node(xv).value;
            const Tensor<T>& gamma = node(gv).value;
            accum(gv, [&](Tensor<T>& gg) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t g = 0; g < groups; ++g) {
                        const T mu = (*stats)[static_cast<size_t>(2 * (n * groups + g))];
                        const T rstd = (*stats)[static_cast<size_t>(2 * (n * groups + g) + 1)];
                        for (int64_t c = 0; c < gs; ++c) {
                            const T* px = x.ptr() + (n * C + g * gs + c) * HW;
                            const T* pg = gout.ptr() + (n * C + g * gs + c) * HW;
                            T acc = 0;
                            for (int64_t i = 0; i < HW; ++i) acc += pg[i] * (px[i] - mu) * rstd;
                            gg[g * gs + c] += acc;
                        }
                    }
            });
            accum(bv, [&](Tensor<T>& gb) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const T* pg = gout.ptr() + (n * C + c) * HW;
                        T acc = 0;
                        for (int64_t i = 0; i < HW; ++i) acc += pg[i];
                        gb[c] += acc;
                    }
            });
            accum(xv, [&](Tensor<T>& gx) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t g = 0; g < groups; ++g) {
                        const T mu = (*stats)[static_cast<size_t>(2 * (n * groups + g))];
                        const T rstd = (*stats)[static_cast<size_t>(2 * (n * groups + g) + 1)];
                        const T* bx = x.ptr() + (n * C + g * gs) * HW;
                        const T* bg = gout.ptr() + (n * C + g * gs) * HW;
                        // dxhat = dy * gamma; reduce sums then distribute.
                        T sum_dxhat = 0, sum_dxhat_xhat = 0;
                        for (int64_t c = 0; c < gs; ++c) {
                            const T ga = gamma[g * gs + c];
                            for (int64_t i = 0; i < HW; ++i) {
                                const T dxhat = bg[c * HW + i] * ga;
                                const T xhat = (bx[c * HW + i] - mu) * rstd;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        T* bo = gx.ptr() + (n * C + g * gs) * HW;
                        const T invm = T(1) / static_cast<T>(m);
                        for (int64_t c = 0; c < gs; ++c) {
                            const T ga = gamma[g * gs + c];
                            for (int64_t i = 0; i < HW; ++i) {
                                const T dxhat = bg[c * HW + i] * ga;
                                const T xhat = (bx[c * HW + i] - mu) * rstd;
                                bo[c * HW + i] +=
                                    rstd * (dxhat - invm * sum_dxhat - xhat * invm * sum_dxhat_xhat);
                            }
                        }
                    }
            });
        });
    }

    // Batched scaled dot-product attention. q [B,Sq,dh], k/v [B,Sk,dh].
    // Returns {out [B,Sq,dh], probs [B,Sq,Sk]}; probs participates in autodiff
    // (the joint backward handles gradients arriving via either output).
    std::pair<Value, Value> attention(Value qv, Value kv, Value vv, T att_scale) {
        const Tensor<T>& q = val(qv);
        const Tensor<T>& k = val(kv);
        const Tensor<T>& v = val(vv);
        if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.shape[0] != k.shape[0] ||
            k.shape != v.shape || q.shape[2] != k.shape[2])
            throw ShapeError("attention shapes q" + shape_str(q.shape) + " k" + shape_str(k.shape) +
                             " v" + shape_str(v.shape));
        const int64_t B = q.shape[0], Sq = q.shape[1], Sk = k.shape[1], dh = q.shape[2];
        Tensor<T> probs(Shape{B, Sq, Sk});
        Tensor<T> out(Shape{B, Sq, dh});
        for (int64_t b = 0; b < B; ++b) {
            detail::MapC<T> Q(q.ptr() + b * Sq * dh, Sq, dh);
            detail::MapC<T> K(k.ptr() + b * Sk * dh, Sk, dh);
            detail::MapC<T> V(v.ptr() + b * Sk * dh, Sk, dh);
            detail::MapM<T> P(probs.ptr() + b * Sq * Sk, Sq, Sk);
            P.noalias() = Q * K.transpose();
            P *= att_scale;
            for (int64_t r = 0; r < Sq; ++r) {
                T mx = P(r, 0);
                for (int64_t c = 1; c < Sk; ++c) mx = std::max(mx, P(r, c));
                T sum = 0;
                for (int64_t c = 0; c < Sk; ++c) {
                    const T e = std::exp(P(r, c) - mx);
                    P(r, c) = e;
                    sum += e;
                }
                const T inv = T(1) / sum;
                for (int64_t c = 0; c < Sk; ++c) P(r, c) *= inv;
            }
            detail::MapM<T>(out.ptr() + b * Sq * dh, Sq, dh).noalias() = P * V;
        }
        const bool rq = grad_enabled_ && (node(qv).requires_grad || node(kv).requires_grad ||
                                          node(vv).requires_grad);
        // probs first, out second; the joint backward sits on probs so that it
        // runs after every consumer of either output.
        Value probs_v = push(std::move(probs), rq);
        Value out_v = push(std::move(out), rq);
        if (rq) {
            // Eager grad buffers: ensures the joint closure fires even when
            // only one of the two outputs is consumed downstream.
            node(probs_v).grad = Tensor<T>(node(probs_v).value.shape);
            node(out_v).grad = Tensor<T>(node(out_v).value.shape);
            node(probs_v).backfn = [this, qv, kv, vv, probs_v, out_v, att_scale, B, Sq, Sk, dh]() {
                const Tensor<T>& pr = node(probs_v).value;
                const Tensor<T>& gp_ext = node(probs_v).grad;
                const Tensor<T>& go = node(out_v).grad;
                const Tensor<T>& q = node(qv).value;
                const Tensor<T>& k = node(kv).value;
                const Tensor<T>& v = node(vv).value;
                Tensor<T> dP(Shape{Sq, Sk});
                for (int64_t b = 0; b < B; ++b) {
                    detail::MapC<T> P(pr.ptr() + b * Sq * Sk, Sq, Sk);
                    detail::MapC<T> GO(go.ptr() + b * Sq * dh, Sq, dh);
                    detail::MapC<T> GPe(gp_ext.ptr() + b * Sq * Sk, Sq, Sk);
                    detail::MapC<T> Q(q.ptr() + b * Sq * dh, Sq, dh);
                    detail::MapC<T> K(k.ptr() + b * Sk * dh, Sk, dh);
                    detail::MapC<T> V(v.ptr() + b * Sk * dh, Sk, dh);
                    detail::MapM<T> DP(dP.ptr(), Sq, Sk);
                    DP.noalias() = GO * V.transpose();
                    DP += GPe;
                    // softmax backward: ds = P o (dP - rowsum(dP o P))
                    for (int64_t r = 0; r < Sq; ++r) {
                        T dot = 0;
                        for (int64_t c = 0; c < Sk; ++c) dot += DP(r, c) * P(r, c);
                        for (int64_t c = 0; c < Sk; ++c) DP(r, c) = P(r, c) * (DP(r, c) - dot);
                    }
                    DP *= att_scale;
                    accum(qv, [&](Tensor<T>& gq) {
                        detail::MapM<T>(gq.ptr() + b * Sq * dh, Sq, dh).noalias() += DP * K;
                    });
                    accum(kv, [&](Tensor<T>& gk) {
                        detail::MapM<T>(gk.ptr() + b * Sk * dh, Sk, dh).noalias() +=
                            DP.transpose() * Q;
                    });
                    accum(vv, [&](Tensor<T>& gv2) {
                        detail::MapM<T>(gv2.ptr() + b * Sk * dh, Sk, dh).noalias() +=
                            P.transpose() * GO;
                    });
                }
            };
        }
        return {out_v, probs_v};
    }

    // Mean squared error over all elements.
    Value mse(Value av, Value bv) {
        check_same(av, bv, "mse");
        const Tensor<T>& a = val(av);
        const Tensor<T>& b = val(bv);
        T acc = 0;
        for (int64_t i = 0; i < a.numel(); ++i) {
            const T d = a[i] - b[i];
            acc += d * d;
        }
        Tensor<T> out(Shape{1});
        out[0] = acc / static_cast<T>(a.numel());
        return unary_binary(std::move(out), av, bv, [this](Value av, Value bv, Value o) {
            const Tensor<T>& a = node(av).value;
            const Tensor<T>& b = node(bv).value;
            const T g = node(o).grad[0] * T(2) / static_cast<T>(a.numel());
            accum(av, [&](Tensor<T>& ga) {
                for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g * (a[i] - b[i]);
            });
            accum(bv, [&](Tensor<T>& gb) {
                for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= g * (a[i] - b[i]);
            });
        });
    }

    void backward(Value root) {
        if (!grad_enabled_) throw Error("backward on a no-grad tape");
        Node& r = node(root);
        if (r.value.numel() != 1) throw ShapeError("backward root must be scalar");
        if (r.grad.numel() == 0) r.grad = Tensor<T>(r.value.shape);
        r.grad[0] = T(1);
        for (int32_t id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.backfn && n.grad.numel() > 0) n.backfn();
        }
    }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void()> backfn;
        bool requires_grad = false;
    };

    std::deque<Node> nodes_;
    bool grad_enabled_;

    Node& node(Value v) { return nodes_.at(static_cast<size_t>(v.id)); }
    const Node& node(Value v) const { return nodes_.at(static_cast<size_t>(v.id)); }

    Value push(Tensor<T> v, bool rq) {
        nodes_.push_back(Node{std::move(v), Tensor<T>{}, nullptr, rq});
        return Value{static_cast<int32_t>(nodes_.size() - 1)};
    }

    void check_same(Value a, Value b, const char* op) const {
        if (!val(a).same_shape(val(b)))
            throw ShapeError(std::string(op) + " shape mismatch " + shape_str(val(a).shape) + " vs " +
                             shape_str(val(b).shape));
    }

    // Accumulate into the grad of `v` if it requires grad.
    template <typename F>
    void accum(Value v, F&& f) {
        Node& n = node(v);
        if (!n.requires_grad) return;
        if (n.grad.numel() == 0) n.grad = Tensor<T>(n.value.shape);
        f(n.grad);
    }

    template <typename F>
    Value unary(Tensor<T> out, Value a, F&& back) {
        const bool rq = grad_enabled_ && node(a).requires_grad;
        Value o = push(std::move(out), rq);
        if (rq)
            node(o).backfn = [this, a, o, back]() { back(a, o); };
        return o;
    }

    template <typename F>
    Value unary_binary(Tensor<T> out, Value a, Value b, F&& back) {
        const bool rq = grad_enabled_ && (node(a).requires_grad || node(b).requires_grad);
        Value o = push(std::move(out), rq);
        if (rq)
            node(o).backfn = [this, a, b, o, back]() { back(a, b, o); };
        return o;
    }

    template <typename F>
    Value nary(Tensor<T> out, const std::vector<Value>& srcs, F&& back) {
        bool rq = false;
        for (Value v : srcs) rq = rq || node(v).requires_grad;
        rq = rq && grad_enabled_;
        Value o = push(std::move(out), rq);
        if (rq)
            node(o).backfn = [o, back]() { back(o); };
        return o;
    }

    static Tensor<T> permute_copy(const Tensor<T>& x, const std::vector<int>& perm) {
        const int r = x.rank();
        if (static_cast<int>(perm.size()) != r) throw ShapeError("permute rank mismatch");
        Shape out_shape(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        Tensor<T> out(out_shape);
        std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
        for (int i = r - 2; i >= 0; --i)
            in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.shape[static_cast<size_t>(i + 1)];
        std::vector<int64_t> strides(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        const int64_t n = x.numel();
        for (int64_t o = 0; o < n; ++o) {
            int64_t src = 0;
            for (int i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * strides[static_cast<size_t>(i)];
            out[o] = x[src];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
        return out;
    }

    static void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                       int stride, int pad, int64_t Ho, int64_t Wo, T* cols) {
        const int64_t P = Ho * Wo;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ki = 0; ki < kh; ++ki)
                for (int64_t kj = 0; kj < kw; ++kj) {
                    T* dst = cols + ((c * kh + ki) * kw + kj) * P;
                    for (int64_t i = 0; i < Ho; ++i) {
                        const int64_t src_i = i * stride + ki - pad;
                        for (int64_t j = 0; j < Wo; ++j) {
                            const int64_t src_j = j * stride + kj - pad;
                            dst[i * Wo + j] =
                                (src_i >= 0 && src_i < H && src_j >= 0 && src_j < W)
                                    ? x[(c * H + src_i) * W + src_j]
                                    : T(0);
                        }
                    }
                }
    }

    static void col2im_add(const T* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                           int stride, int pad, int64_t Ho, int64_t Wo, T* x) {
        const int64_t P = Ho * Wo;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ki = 0; ki < kh; ++ki)
                for (int64_t kj = 0; kj < kw; ++kj) {
                    const T* src = cols + ((c * kh + ki) * kw + kj) * P;
                    for (int64_t i = 0; i < Ho; ++i) {
                        const int64_t dst_i = i * stride + ki - pad;
                        if (dst_i < 0 || dst_i >= H) continue;
                        for (int64_t j = 0; j < Wo; ++j) {
                            const int64_t dst_j = j * stride + kj - pad;
                            if (dst_j >= 0 && dst_j < W) x[(c * H + dst_i) * W + dst_j] += src[i * Wo + j];
                        }
                    }
                }
    }
};

}  // namespace dpidm
