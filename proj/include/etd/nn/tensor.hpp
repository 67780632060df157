#pragma once

#include <cassert>
#include <cstdint>
#include <string>
#include <vector>

#include "etd/common.hpp"

namespace etd::nn {

/// Row-major matrix. The only container the models need besides std::vector.
template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, T(0)) {}

    T* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
    T& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    T operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), T(0)); }
};

template <class T>
using Vec = std::vector<T>;

// ---------------------------------------------------------------------------
// Kernels. Sixteen independent accumulator lanes keep summation order fixed
// while letting the compiler vectorize the reduction.
// ---------------------------------------------------------------------------

template <class T>
inline T dot(const T* a, const T* b, int n) {
    T s[16] = {};
    int i = 0;
    for (; i + 16 <= n; i += 16)
        for (int j = 0; j < 16; ++j) s[j] += a[i + j] * b[i + j];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    T acc = tail;
    for (int j = 0; j < 16; ++j) acc += s[j];
    return acc;
}

template <class T>
inline void axpy(T* y, T alpha, const T* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// y = W x (+ y when accumulate).
template <class T>
inline void matvec(T* y, const Mat<T>& w, const T* x, bool accumulate = false) {
    for (int r = 0; r < w.rows; ++r) {
        const T v = dot(w.row(r), x, w.cols);
        y[r] = accumulate ? y[r] + v : v;
    }
}

/// y += W^T v, computed as row-wise axpy to stay contiguous.
template <class T>
inline void matvec_transposed_acc(T* y, const Mat<T>& w, const T* v) {
    for (int r = 0; r < w.rows; ++r) {
        if (v[r] != T(0)) axpy(y, v[r], w.row(r), w.cols);
    }
}

/// dW += g x^T.
template <class T>
inline void outer_acc(Mat<T>& dw, const T* g, const T* x) {
    for (int r = 0; r < dw.rows; ++r) {
        if (g[r] != T(0)) axpy(dw.row(r), g[r], x, dw.cols);
    }
}

template <class T>
inline void add_inplace(T* y, const T* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += x[i];
}

template <class T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------
// Named views over a parameter struct, used by the optimizer, the serializer
// and the gradient checker. Structs expose `visit(f)` calling
// f(name, Mat&|Vec&, dims...) in a fixed order; collect() flattens that into
// an indexable list.
// ---------------------------------------------------------------------------

template <class T>
struct TensorRef {
    std::string name;
    T* data = nullptr;
    size_t n = 0;
    std::vector<uint32_t> dims;
};

template <class T>
class RefCollector {
public:
    void operator()(const std::string& name, Mat<T>& m) {
        refs.push_back({name, m.a.data(), m.a.size(),
                        {static_cast<uint32_t>(m.rows), static_cast<uint32_t>(m.cols)}});
    }
    void operator()(const std::string& name, Vec<T>& v) {
        refs.push_back({name, v.data(), v.size(), {static_cast<uint32_t>(v.size())}});
    }
    std::vector<TensorRef<T>> refs;
};

template <class T, class Params>
std::vector<TensorRef<T>> collect_refs(Params& p) {
    RefCollector<T> c;
    p.visit(c);
    return c.refs;
}

template <class Params>
size_t param_count(Params& p) {
    auto refs = collect_refs<typename Params::Scalar>(p);
    size_t n = 0;
    for (const auto& r : refs) n += r.n;
    return n;
}

/// Xavier-uniform init over every matrix in visit order; biases stay zero.
/// fan pairs are encoded by each struct's init() which knows its shapes.
template <class T>
inline void xavier_fill(Mat<T>& m, int fan_in, int fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : m.a) v = static_cast<T>(rng.uniform(-a, a));
}

}  // namespace etd::nn
