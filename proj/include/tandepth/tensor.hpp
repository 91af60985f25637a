#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tandepth {

// Dense row-major tensor, up to 4 axes (batch/patch, channel, height, width).
// Lower-rank tensors keep trailing axes at 1.
template <class T>
struct TensorT {
    std::array<int, 4> dims{1, 1, 1, 1};
    int nd = 0;
    std::vector<T> v;

    TensorT() = default;

    static TensorT make(std::vector<int> d) {
        if (d.empty() || d.size() > 4) throw std::invalid_argument("tensor rank must be 1..4");
        TensorT t;
        t.nd = static_cast<int>(d.size());
        int64_t n = 1;
        for (size_t i = 0; i < d.size(); ++i) {
            if (d[i] <= 0) throw std::invalid_argument("tensor dims must be positive");
            t.dims[i] = d[i];
            n *= d[i];
        }
        t.v.assign(static_cast<size_t>(n), T(0));
        return t;
    }
    static TensorT scalar(T x) {
        TensorT t = make({1});
        t.v[0] = x;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& at(int i) { return v[i]; }
    T& at(int i, int j) { return v[static_cast<size_t>(i) * dims[1] + j]; }
    T& at(int n, int c, int y, int x) {
        return v[((static_cast<size_t>(n) * dims[1] + c) * dims[2] + y) * dims[3] + x];
    }
    const T& at(int i) const { return v[i]; }
    const T& at(int i, int j) const { return v[static_cast<size_t>(i) * dims[1] + j]; }
    const T& at(int n, int c, int y, int x) const {
        return v[((static_cast<size_t>(n) * dims[1] + c) * dims[2] + y) * dims[3] + x];
    }

    bool same_shape(const TensorT& o) const { return nd == o.nd && dims == o.dims; }
    std::string shape_str() const {
        std::string s = "(";
        for (int i = 0; i < nd; ++i) s += std::to_string(dims[i]) + (i + 1 < nd ? "," : "");
        return s + ")";
    }
    void fill(T x) { std::fill(v.begin(), v.end(), x); }
};

// Deterministic RNG. mt19937_64 output is standardized; the raw-bit uniform
// below avoids std::uniform_real_distribution, whose stream is
// implementation-defined.
struct Rng {
    std::mt19937_64 g;
    explicit Rng(uint64_t seed) : g(seed) {}

    double uniform() { return static_cast<double>(g() >> 11) * 0x1.0p-53; }  // [0, 1)
    double uniform(double a, double b) { return a + (b - a) * uniform(); }
    double normal() {  // Box-Muller, one sample per call
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
};

// GEMM kernels. Parallel over output rows only, so every element is written by
// exactly one thread in a fixed order: results are bit-reproducible for any
// thread count.

// C(M,N) = A(M,K) * B(K,N)   (+= when accum)
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int M, int K, int N, bool accum) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        T* crow = C + static_cast<size_t>(m) * N;
        if (!accum)
            for (int n = 0; n < N; ++n) crow[n] = T(0);
        const T* arow = A + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const T a = arow[k];
            if (a == T(0)) continue;
            const T* brow = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

// C(M,N) = A(M,K) * B(N,K)^T
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int M, int K, int N, bool accum) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        const T* arow = A + static_cast<size_t>(m) * K;
        T* crow = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const T* brow = B + static_cast<size_t>(n) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[n] = accum ? crow[n] + acc : acc;
        }
    }
}

// C(M,N) = A(K,M)^T * B(K,N)
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int M, int K, int N, bool accum) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        T* crow = C + static_cast<size_t>(m) * N;
        if (!accum)
            for (int n = 0; n < N; ++n) crow[n] = T(0);
        for (int k = 0; k < K; ++k) {
            const T a = A[static_cast<size_t>(k) * M + m];
            if (a == T(0)) continue;
            const T* brow = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

// Pairwise summation; reduction order is fixed regardless of threading.
template <class T>
double pairwise_sum(const T* x, int64_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
        return s;
    }
    const int64_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

template <class T>
bool all_finite(const TensorT<T>& t) {
    for (const T& x : t.v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

}  // namespace tandepth
