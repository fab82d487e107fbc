#pragma once

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
// The scalar type is a template parameter: float is the training default,
// double backs the finite-difference suites. Matrix products go through
// Eigen maps; everything else is plain loops.

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "lirm/common.hpp"
#include "lirm/rng.hpp"

namespace lirm {

// Live-tensor byte accounting. A cheap proxy for peak working-set used by the
// constant-memory checks on progressive updates.
struct MemMeter {
    static std::atomic<long long>& current() {
        static std::atomic<long long> v{0};
        return v;
    }
    static std::atomic<long long>& peak() {
        static std::atomic<long long> v{0};
        return v;
    }
    static void note_alloc(long long bytes) {
        long long cur = current().fetch_add(bytes) + bytes;
        long long p = peak().load();
        while (cur > p && !peak().compare_exchange_weak(p, cur)) {}
    }
    static void note_free(long long bytes) { current().fetch_sub(bytes); }
    static void reset_peak() { peak().store(current().load()); }
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // empty until touched; same length as value afterwards
    bool requires_grad = false;

    explicit TensorData(Shape s) : shape(std::move(s)) {
        value.assign(shape_numel(shape), T(0));
        MemMeter::note_alloc(static_cast<long long>(value.size() * sizeof(T)));
    }
    ~TensorData() {
        MemMeter::note_free(static_cast<long long>((value.size() + grad.size()) * sizeof(T)));
    }
    TensorData(const TensorData&) = delete;
    TensorData& operator=(const TensorData&) = delete;

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(value.size(), T(0));
            MemMeter::note_alloc(static_cast<long long>(grad.size() * sizeof(T)));
        }
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>(std::move(shape));
        t.d_->requires_grad = requires_grad;
        return t;
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.d_->value.begin(), t.d_->value.end(), v);
        return t;
    }
    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        require(shape_numel(shape) == data.size(),
                "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        Tensor t = zeros(std::move(shape), requires_grad);
        t.d_->value = std::move(data);
        return t;
    }
    static Tensor scalar(T v, bool requires_grad = false) { return full({1}, v, requires_grad); }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t ndim() const { return d_->shape.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape[i]; }
    std::size_t size() const { return d_->value.size(); }

    T* data() { return d_->value.data(); }
    const T* data() const { return d_->value.data(); }
    std::vector<T>& values() { return d_->value; }
    const std::vector<T>& values() const { return d_->value; }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_grad() const { return d_ && !d_->grad.empty(); }
    // allocate-on-touch accumulation buffer; const because Tensor is a shared
    // handle and gradients live on the shared payload
    T* grad_accum() const {
        d_->ensure_grad();
        return d_->grad.data();
    }
    const std::vector<T>& grad() const { return d_->grad; }
    std::vector<T>& grad_vec() const {
        d_->ensure_grad();
        return d_->grad;
    }
    void zero_grad() const {
        if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    T item() const {
        require(size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
        return d_->value[0];
    }

    Tensor detach() const {
        Tensor t = zeros(shape());
        t.d_->value = d_->value;
        return t;
    }

    TensorData<T>* node() const { return d_.get(); }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// Ops push one backward closure each; replay order is the reverse of the
// recording order, which is a valid topological order for define-by-run graphs.
template <typename T>
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    void backward(Tensor<T> loss) {
        require(loss.size() == 1, "backward requires a scalar loss, got " + shape_str(loss.shape()));
        loss.grad_accum()[0] += T(1);
        replay_backward();
    }

    // Replays without seeding; callers inject gradients first (deferred rendering).
    void replay_backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void reset() { ops_.clear(); }
    std::size_t num_ops() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
inline bool any_requires(const Tensor<T>& a) {
    return a.requires_grad();
}
template <typename T, typename... R>
inline bool any_requires(const Tensor<T>& a, const R&... rest) {
    return a.requires_grad() || any_requires(rest...);
}

// Rows of an [*, d] tensor.
template <typename T>
inline std::size_t row_count(const Tensor<T>& x) {
    require(x.ndim() >= 1, "expected tensor with at least 1 dim");
    return x.size() / x.shape().back();
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise and reduction ops

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* py = y.data();
    for (std::size_t i = 0; i < y.size(); ++i) py[i] = pa[i] + pb[i];
    y.set_requires_grad(detail::any_requires(a, b));
    if (tape && y.requires_grad()) {
        tape->record([a, b, y]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            if (a.requires_grad()) {
                T* ga = a.grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "sub shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] - b.data()[i];
    y.set_requires_grad(detail::any_requires(a, b));
    if (tape && y.requires_grad()) {
        tape->record([a, b, y]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            if (a.requires_grad()) {
                T* ga = a.grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
    y.set_requires_grad(detail::any_requires(a, b));
    if (tape && y.requires_grad()) {
        tape->record([a, b, y]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            if (a.requires_grad()) {
                T* ga = a.grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                T* gb = b.grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul_scalar(Tape<T>* tape, const Tensor<T>& a, T s) {
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] * s;
    y.set_requires_grad(a.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([a, y, s]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            T* ga = a.grad_accum();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return y;
}

template <typename T>
Tensor<T> add_scalar(Tape<T>* tape, const Tensor<T>& a, T s) {
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] + s;
    y.set_requires_grad(a.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([a, y]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            T* ga = a.grad_accum();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return y;
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(Tape<T>* tape, const Tensor<T>& a, Fwd fwd, Bwd dydx) {
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = fwd(a.data()[i]);
    y.set_requires_grad(a.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([a, y, dydx]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            T* ga = a.grad_accum();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dydx(a.data()[i], y.data()[i]);
        });
    }
    return y;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        tape, a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        tape, a,
        [](T x) {
            T s = T(1) / (T(1) + std::exp(-x));
            return x * s;
        },
        [](T x, T) {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& a) {
    const T c = T(0.7978845608028654); // sqrt(2/pi)
    const T k = T(0.044715);
    return unary_op(
        tape, a,
        [c, k](T x) {
            T u = c * (x + k * x * x * x);
            return T(0.5) * x * (T(1) + std::tanh(u));
        },
        [c, k](T x, T) {
            T u = c * (x + k * x * x * x);
            T t = std::tanh(u);
            T du = c * (T(1) + T(3) * k * x * x);
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        });
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        tape, a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp_op(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        tape, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> y = Tensor<T>::zeros({1});
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    y.data()[0] = acc;
    y.set_requires_grad(a.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([a, y]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            T* ga = a.grad_accum();
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0];
        });
    }
    return y;
}

template <typename T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& a) {
    return mul_scalar(tape, sum(tape, a), T(1) / static_cast<T>(a.size()));
}

// mean of squared differences over all entries
template <typename T>
Tensor<T> mse(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "mse extent mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros({1});
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        T d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    const T inv_n = T(1) / static_cast<T>(a.size());
    y.data()[0] = acc * inv_n;
    y.set_requires_grad(detail::any_requires(a, b));
    if (tape && y.requires_grad()) {
        tape->record([a, b, y, inv_n]() mutable {
            const std::vector<T>& g = y.grad();
            if (g.empty()) return;
            T s = T(2) * g[0] * inv_n;
            if (a.requires_grad()) {
                T* ga = a.grad_accum();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += s * (a.data()[i] - b.data()[i]);
            }
            if (b.requires_grad()) {
                T* gb = b.grad_accum();
                for (std::size_t i = 0; i < a.size(); ++i) gb[i] -= s * (a.data()[i] - b.data()[i]);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require(a.ndim() == 2 && b.ndim() == 2, "matmul needs rank-2 operands");
    require(a.dim(1) == b.dim(0),
            "matmul inner extent mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> y = Tensor<T>::zeros({m, n});
    {
        detail::CMapMat<T> A(a.data(), m, k), B(b.data(), k, n);
        detail::MapMat<T> Y(y.data(), m, n);
        Y.noalias() = A * B;
    }
    y.set_requires_grad(detail::any_requires(a, b));
    if (tape && y.requires_grad()) {
        tape->record([a, b, y, m, k, n]() mutable {
            if (!y.has_grad()) return;
            detail::CMapMat<T> G(y.grad().data(), m, n);
            if (a.requires_grad()) {
                detail::CMapMat<T> B(b.data(), k, n);
                detail::MapMat<T> GA(a.grad_accum(), m, k);
                GA.noalias() += G * B.transpose();
            }
            if (b.requires_grad()) {
                detail::CMapMat<T> A(a.data(), m, k);
                detail::MapMat<T> GB(b.grad_accum(), k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& a) {
    require(a.ndim() == 2, "transpose needs rank-2 tensor");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor<T> y = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y.data()[j * m + i] = a.data()[i * n + j];
    y.set_requires_grad(a.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([a, y, m, n]() mutable {
            if (!y.has_grad()) return;
            T* ga = a.grad_accum();
            const T* g = y.grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return y;
}

// y = x W + b for x of shape [*, in]; rows are treated independently.
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    require(w.ndim() == 2, "linear weight must be rank-2, got " + shape_str(w.shape()));
    require(x.shape().back() == w.dim(0),
            "linear extent mismatch: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    const std::size_t in = w.dim(0), out = w.dim(1);
    if (b.defined())
        require(b.size() == out,
                "linear bias extent mismatch: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
    const std::size_t rows = x.size() / in;

    Shape out_shape = x.shape();
    out_shape.back() = out;
    Tensor<T> y = Tensor<T>::zeros(out_shape);
    {
        detail::CMapMat<T> X(x.data(), rows, in), W(w.data(), in, out);
        detail::MapMat<T> Y(y.data(), rows, out);
        Y.noalias() = X * W;
        if (b.defined()) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(b.data(), out);
            Y.rowwise() += B;
        }
    }
    bool rg = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
    y.set_requires_grad(rg);
    if (tape && rg) {
        tape->record([x, w, b, y, rows, in, out]() mutable {
            if (!y.has_grad()) return;
            detail::CMapMat<T> G(y.grad().data(), rows, out);
            if (x.requires_grad()) {
                detail::CMapMat<T> W(w.data(), in, out);
                detail::MapMat<T> GX(x.grad_accum(), rows, in);
                GX.noalias() += G * W.transpose();
            }
            if (w.requires_grad()) {
                detail::CMapMat<T> X(x.data(), rows, in);
                detail::MapMat<T> GW(w.grad_accum(), in, out);
                GW.noalias() += X.transpose() * G;
            }
            if (b.defined() && b.requires_grad()) {
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(b.grad_accum(), out);
                GB += G.colwise().sum();
            }
        });
    }
    return y;
}

// Per-row normalization over the last dim, then affine. eps sits inside the sqrt.
template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const std::size_t d = x.shape().back();
    require(d >= 1, "layer_norm needs a non-empty last dim");
    require(gain.size() == d && bias.size() == d,
            "layer_norm affine extent mismatch: gain " + shape_str(gain.shape()) + " bias " +
                shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    Tensor<T> xhat = Tensor<T>::zeros(x.shape()); // kept for backward
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x.data() + r * d;
        T mu = T(0);
        for (std::size_t i = 0; i < d; ++i) mu += px[i];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            T c = px[i] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        T* ph = xhat.data() + r * d;
        T* py = y.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            ph[i] = (px[i] - mu) * inv;
            py[i] = ph[i] * gain.data()[i] + bias.data()[i];
        }
    }
    bool rg = detail::any_requires(x, gain, bias);
    y.set_requires_grad(rg);
    if (tape && rg) {
        tape->record([x, gain, bias, y, xhat, inv_std, rows, d]() mutable {
            if (!y.has_grad()) return;
            const T* g = y.grad().data();
            const T* ph = xhat.data();
            if (gain.requires_grad()) {
                T* gg = gain.grad_accum();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * ph[r * d + i];
            }
            if (bias.requires_grad()) {
                T* gb = bias.grad_accum();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
            }
            if (x.requires_grad()) {
                T* gx = x.grad_accum();
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dh = T(0), mean_dh_h = T(0);
                    for (std::size_t i = 0; i < d; ++i) {
                        T dh = g[r * d + i] * gain.data()[i];
                        mean_dh += dh;
                        mean_dh_h += dh * ph[r * d + i];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        T dh = g[r * d + i] * gain.data()[i];
                        gx[r * d + i] += inv_std[r] * (dh - mean_dh - ph[r * d + i] * mean_dh_h);
                    }
                }
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x.data() + r * d;
        T* py = y.data() + r * d;
        T mx = px[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, px[i]);
        T denom = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            py[i] = std::exp(px[i] - mx);
            denom += py[i];
        }
        for (std::size_t i = 0; i < d; ++i) py[i] /= denom;
    }
    y.set_requires_grad(x.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([x, y, rows, d]() mutable {
            if (!y.has_grad()) return;
            const T* g = y.grad().data();
            T* gx = x.grad_accum();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* p = y.data() + r * d;
                T dot = T(0);
                for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * p[i];
                for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += p[i] * (g[r * d + i] - dot);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    require(x.ndim() == 2 && c0 < c1 && c1 <= x.dim(1), "bad column slice");
    const std::size_t rows = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor<T> y = Tensor<T>::zeros({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(y.data() + r * w, x.data() + r * n + c0, w * sizeof(T));
    y.set_requires_grad(x.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([x, y, rows, n, w, c0]() mutable {
            if (!y.has_grad()) return;
            T* gx = x.grad_accum();
            const T* g = y.grad().data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < w; ++i) gx[r * n + c0 + i] += g[r * w + i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>* tape, const Tensor<T>& x, std::size_t r0, std::size_t r1) {
    require(x.ndim() == 2 && r0 < r1 && r1 <= x.dim(0), "bad row slice");
    const std::size_t n = x.dim(1), h = r1 - r0;
    Tensor<T> y = Tensor<T>::zeros({h, n});
    std::memcpy(y.data(), x.data() + r0 * n, h * n * sizeof(T));
    y.set_requires_grad(x.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([x, y, n, h, r0]() mutable {
            if (!y.has_grad()) return;
            T* gx = x.grad_accum();
            const T* g = y.grad().data();
            for (std::size_t i = 0; i < h * n; ++i) gx[r0 * n + i] += g[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat_cols of nothing");
    const std::size_t rows = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        require(p.ndim() == 2 && p.dim(0) == rows, "concat_cols row mismatch");
        total += p.dim(1);
    }
    Tensor<T> y = Tensor<T>::zeros({rows, total});
    std::size_t off = 0;
    bool rg = false;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            std::memcpy(y.data() + r * total + off, p.data() + r * w, w * sizeof(T));
        off += w;
        rg = rg || p.requires_grad();
    }
    y.set_requires_grad(rg);
    if (tape && rg) {
        tape->record([parts, y, rows, total]() mutable {
            if (!y.has_grad()) return;
            const T* g = y.grad().data();
            std::size_t off = 0;
            for (auto& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    T* gp = p.grad_accum();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t i = 0; i < w; ++i) gp[r * w + i] += g[r * total + off + i];
                }
                off += w;
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat_rows of nothing");
    const std::size_t n = parts[0].dim(1);
    std::size_t rows = 0;
    bool rg = false;
    for (const auto& p : parts) {
        require(p.ndim() == 2 && p.dim(1) == n, "concat_rows column mismatch");
        rows += p.dim(0);
        rg = rg || p.requires_grad();
    }
    Tensor<T> y = Tensor<T>::zeros({rows, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(y.data() + off * n, p.data(), p.size() * sizeof(T));
        off += p.dim(0);
    }
    y.set_requires_grad(rg);
    if (tape && rg) {
        tape->record([parts, y, n]() mutable {
            if (!y.has_grad()) return;
            const T* g = y.grad().data();
            std::size_t off = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    T* gp = p.grad_accum();
                    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off * n + i];
                }
                off += p.dim(0);
            }
        });
    }
    return y;
}

// Row-wise Euclidean norm of an [n,3] tensor -> [n,1].
template <typename T>
Tensor<T> rownorm(Tape<T>* tape, const Tensor<T>& x) {
    require(x.ndim() == 2, "rownorm needs rank-2 input");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    Tensor<T> y = Tensor<T>::zeros({rows, 1});
    for (std::size_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (std::size_t i = 0; i < d; ++i) acc += x.data()[r * d + i] * x.data()[r * d + i];
        y.data()[r] = std::sqrt(acc + T(1e-20));
    }
    y.set_requires_grad(x.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([x, y, rows, d]() mutable {
            if (!y.has_grad()) return;
            T* gx = x.grad_accum();
            const T* g = y.grad().data();
            for (std::size_t r = 0; r < rows; ++r) {
                T inv = T(1) / y.data()[r];
                for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[r] * x.data()[r * d + i] * inv;
            }
        });
    }
    return y;
}

// Row-wise normalize to unit length with an additive stabilizer in the norm.
template <typename T>
Tensor<T> normalize_rows(Tape<T>* tape, const Tensor<T>& x, T eps = T(1e-8)) {
    require(x.ndim() == 2, "normalize_rows needs rank-2 input");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    Tensor<T> y = Tensor<T>::zeros({rows, d});
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T acc = T(0);
        for (std::size_t i = 0; i < d; ++i) acc += x.data()[r * d + i] * x.data()[r * d + i];
        T n = std::sqrt(acc) + eps;
        norms[r] = n;
        for (std::size_t i = 0; i < d; ++i) y.data()[r * d + i] = x.data()[r * d + i] / n;
    }
    y.set_requires_grad(x.requires_grad());
    if (tape && y.requires_grad()) {
        tape->record([x, y, norms, rows, d, eps]() mutable {
            if (!y.has_grad()) return;
            T* gx = x.grad_accum();
            const T* g = y.grad().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T n = norms[r];
                const T raw = n - eps; // ||x||
                T dot = T(0);
                for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * x.data()[r * d + i];
                for (std::size_t i = 0; i < d; ++i) {
                    // d/dx_j (x_i / (||x||+eps)) = delta_ij/n - x_i x_j / (||x|| n^2)
                    T t = raw > T(0) ? dot * x.data()[r * d + i] / (raw * n * n) : T(0);
                    gx[r * d + i] += g[r * d + i] / n - t;
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// attention

template <typename T>
struct AttentionWeights {
    Tensor<T> ln_gain, ln_bias; // pre-normalization affine
    Tensor<T> wq, wk, wv, wo;   // [d,d] projections, no biases
};

// Pre-LN self-attention sub-block: y = x + Proj(Attention(LN(x))).
// Full (non-causal) attention over all rows. probs_out, when given, receives the
// concatenated per-head attention matrices (row-major, heads stacked),
template <typename T>
Tensor<T> self_attention(Tape<T>* tape, const Tensor<T>& x, int heads, const AttentionWeights<T>& w,
                         std::vector<T>* probs_out = nullptr) {
    require(x.ndim() == 2, "self_attention expects [tokens, dim]");
    const std::size_t d = x.dim(1);
    require(heads > 0 && d % static_cast<std::size_t>(heads) == 0,
            strformat("attention dim %zu not divisible by %d heads", d, heads));
    const std::size_t dh = d / static_cast<std::size_t>(heads);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> xn = layer_norm(tape, x, w.ln_gain, w.ln_bias);
    Tensor<T> q = matmul(tape, xn, w.wq);
    Tensor<T> k = matmul(tape, xn, w.wk);
    Tensor<T> v = matmul(tape, xn, w.wv);

    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(heads);
    if (probs_out) probs_out->clear();
    for (int h = 0; h < heads; ++h) {
        std::size_t c0 = static_cast<std::size_t>(h) * dh, c1 = c0 + dh;
        Tensor<T> qh = slice_cols(tape, q, c0, c1);
        Tensor<T> kh = slice_cols(tape, k, c0, c1);
        Tensor<T> vh = slice_cols(tape, v, c0, c1);
        Tensor<T> scores = mul_scalar(tape, matmul(tape, qh, transpose(tape, kh)), scale);
        Tensor<T> probs = softmax_rows(tape, scores);
        if (probs_out)
            probs_out->insert(probs_out->end(), probs.values().begin(), probs.values().end());
        head_outs.push_back(matmul(tape, probs, vh));
    }
    Tensor<T> merged = heads == 1 ? head_outs[0] : concat_cols(tape, head_outs);
    Tensor<T> proj = matmul(tape, merged, w.wo);
    return add(tape, x, proj);
}

// ---------------------------------------------------------------------------
// parameter bookkeeping, optimizer, gradient checking

template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    T lr_scale = T(1); // grids train at a different rate than MLPs
};

template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t, T lr_scale = T(1)) {
        for (const auto& e : entries_) require(e.name != name, "duplicate parameter name " + name);
        t.set_requires_grad(true);
        entries_.push_back({name, std::move(t), lr_scale});
        return entries_.back().tensor;
    }
    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }
    std::size_t count() const { return entries_.size(); }
    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.size();
        return n;
    }
    Tensor<T>* find(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return &e.tensor;
        return nullptr;
    }
    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }
    std::uint64_t version = 0; // bumped by the optimizer on every applied step

private:
    std::vector<ParamEntry<T>> entries_;
};

template <typename T>
struct AdamWConfig {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.95);
    T eps = T(1e-8);
    T weight_decay = T(0);
};

template <typename T>
class AdamW {
public:
    std::uint64_t step_count = 0;

    // Decoupled decay is applied to the parameter before the moment update.
    // A non-finite gradient rejects the whole step and names the offender.
    void step(ParamStore<T>& params, const AdamWConfig<T>& cfg) {
        auto& es = params.entries();
        if (m_.size() != es.size()) {
            m_.assign(es.size(), {});
            v_.assign(es.size(), {});
            for (std::size_t i = 0; i < es.size(); ++i) {
                m_[i].assign(es[i].tensor.size(), T(0));
                v_[i].assign(es[i].tensor.size(), T(0));
            }
        }
        for (auto& e : es) {
            if (!e.tensor.has_grad()) continue;
            for (T g : e.tensor.grad())
                require(std::isfinite(static_cast<double>(g)),
                        "non-finite gradient in parameter '" + e.name + "'; step rejected");
        }
        ++step_count;
        const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(step_count));
        const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(step_count));
        for (std::size_t pi = 0; pi < es.size(); ++pi) {
            auto& e = es[pi];
            const T lr = cfg.lr * e.lr_scale;
            T* p = e.tensor.data();
            const std::size_t sz = e.tensor.size();
            if (cfg.weight_decay != T(0)) {
                const T decay = T(1) - lr * cfg.weight_decay;
                for (std::size_t i = 0; i < sz; ++i) p[i] *= decay;
            }
            if (!e.tensor.has_grad()) continue;
            const T* g = e.tensor.grad().data();
            T* m = m_[pi].data();
            T* v = v_[pi].data();
            for (std::size_t i = 0; i < sz; ++i) {
                m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * g[i] * g[i];
                T mhat = m[i] / bc1;
                T vhat = v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
        params.version++;
    }

    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }

private:
    std::vector<std::vector<T>> m_, v_;
};

template <typename T>
struct FdReport {
    T max_rel_err = T(0);
    std::string worst_param;
    std::size_t worst_index = 0;
    T worst_analytic = T(0);
    T worst_numeric = T(0);
};

// Central-difference check. Callers fill analytic gradients (forward+backward)
// before calling; f re-evaluates the loss from current parameter values.
// Step size scales with the parameter magnitude.
template <typename T>
FdReport<T> finite_difference_check(const std::function<T()>& f, std::vector<ParamEntry<T>*> params,
                                    T h_scale = T(1e-4)) {
    FdReport<T> rep;
    for (ParamEntry<T>* e : params) {
        Tensor<T>& t = e->tensor;
        require(t.has_grad(), "finite_difference_check: parameter '" + e->name + "' has no analytic gradient");
        for (std::size_t i = 0; i < t.size(); ++i) {
            const T saved = t.data()[i];
            const T h = h_scale * (std::abs(saved) + T(1));
            t.data()[i] = saved + h;
            const T fp = f();
            t.data()[i] = saved - h;
            const T fm = f();
            t.data()[i] = saved;
            require(std::isfinite(static_cast<double>(fp)) && std::isfinite(static_cast<double>(fm)),
                    "finite_difference_check: non-finite objective at '" + e->name + "'");
            const T fd = (fp - fm) / (T(2) * h);
            const T an = t.grad()[i];
            const T rel = std::abs(an - fd) / (std::abs(fd) + T(1e-12));
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = e->name;
                rep.worst_index = i;
                rep.worst_analytic = an;
                rep.worst_numeric = fd;
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// small MLP

enum class Act { Relu, Silu, Gelu, None };

template <typename T>
struct Mlp {
    std::vector<Tensor<T>> w, b;
    Act act = Act::Silu;

    // widths = {in, h1, ..., out}
    static Mlp make(const std::vector<std::size_t>& widths, Rng& rng, Act act = Act::Silu,
                    bool zero_last = false) {
        Mlp m;
        m.act = act;
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
            Tensor<T> wt = Tensor<T>::zeros({fan_in, fan_out});
            const bool last = (l + 2 == widths.size());
            if (!(zero_last && last)) {
                const T std = std::sqrt(T(2) / static_cast<T>(fan_in));
                for (auto& v : wt.values()) v = static_cast<T>(rng.gaussian()) * std;
            }
            m.w.push_back(wt);
            m.b.push_back(Tensor<T>::zeros({fan_out}));
        }
        return m;
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
        require(!w.empty(), "forward on empty Mlp");
        require(x.shape().back() == w[0].dim(0),
                strformat("mlp input width %zu does not match first layer %zu", x.shape().back(),
                          w[0].dim(0)));
        Tensor<T> h = x;
        for (std::size_t l = 0; l < w.size(); ++l) {
            h = linear(tape, h, w[l], b[l]);
            if (l + 1 < w.size()) {
                switch (act) {
                    case Act::Relu: h = relu(tape, h); break;
                    case Act::Silu: h = silu(tape, h); break;
                    case Act::Gelu: h = gelu(tape, h); break;
                    case Act::None: break;
                }
            }
        }
        return h;
    }

    void register_params(ParamStore<T>& store, const std::string& prefix, T lr_scale = T(1)) {
        for (std::size_t l = 0; l < w.size(); ++l) {
            store.add(prefix + ".w" + std::to_string(l), w[l], lr_scale);
            store.add(prefix + ".b" + std::to_string(l), b[l], lr_scale);
        }
    }
};

} // namespace lirm
