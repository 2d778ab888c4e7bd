#include "flowvc/numerics.hpp"

#include <cmath>
#include <numbers>

namespace flowvc {

SquareMatrix SquareMatrix::identity(int d) {
    SquareMatrix m(d);
    for (int i = 0; i < d; ++i) m.at(i, i) = 1.0;
    return m;
}

uint64_t SeededRng::next_u64() {
    // splitmix64
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double SeededRng::next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::next_normal() {
    if (have_cached_) {
        have_cached_ = false;
        return cached_normal_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    while (u1 <= 0.0) u1 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
}

uint64_t SeededRng::next_below(uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    if (n == 0) throw DomainError("next_below(0)");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

SeededRng SeededRng::child(uint64_t tag) const {
    SeededRng mix(state_ ^ (tag * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
    return SeededRng(mix.next_u64());
}

std::vector<double> sample_standard_normal(SeededRng& rng, size_t n) {
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = rng.next_normal();
    return out;
}

double gaussian_log_density(double v, double mu, double sigma) {
    if (!(sigma > 0.0)) throw DomainError("gaussian_log_density: sigma must be positive");
    constexpr double half_log_2pi = 0.9189385332046727;  // 0.5 * ln(2*pi)
    double z = (v - mu) / sigma;
    return -half_log_2pi - std::log(sigma) - 0.5 * z * z;
}

double gaussian_log_density(std::span<const double> v, std::span<const double> mu,
                            std::span<const double> sigma) {
    if (v.size() != mu.size() || v.size() != sigma.size())
        throw ShapeError("gaussian_log_density: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < v.size(); ++i) acc += gaussian_log_density(v[i], mu[i], sigma[i]);
    return acc;
}

LuDecomposition::LuDecomposition(const SquareMatrix& m)
    : dim_(m.dim), lu_(m.values), perm_(m.dim), log_abs_det_(0.0) {
    const int n = dim_;
    for (int i = 0; i < n; ++i) perm_[i] = i;
    for (int k = 0; k < n; ++k) {
        int pivot_row = k;
        double pivot_mag = std::fabs(lu_[static_cast<size_t>(k) * n + k]);
        for (int i = k + 1; i < n; ++i) {
            double mag = std::fabs(lu_[static_cast<size_t>(i) * n + k]);
            if (mag > pivot_mag) {
                pivot_mag = mag;
                pivot_row = i;
            }
        }
        if (pivot_mag < kSingularTolerance)
            throw SingularMatrixError("pivot " + std::to_string(pivot_mag) + " below tolerance");
        if (pivot_row != k) {
            for (int j = 0; j < n; ++j)
                std::swap(lu_[static_cast<size_t>(k) * n + j],
                          lu_[static_cast<size_t>(pivot_row) * n + j]);
            std::swap(perm_[k], perm_[pivot_row]);
        }
        double pivot = lu_[static_cast<size_t>(k) * n + k];
        log_abs_det_ += std::log(std::fabs(pivot));
        for (int i = k + 1; i < n; ++i) {
            double factor = lu_[static_cast<size_t>(i) * n + k] / pivot;
            lu_[static_cast<size_t>(i) * n + k] = factor;
            for (int j = k + 1; j < n; ++j)
                lu_[static_cast<size_t>(i) * n + j] -= factor * lu_[static_cast<size_t>(k) * n + j];
        }
    }
}

std::vector<double> LuDecomposition::solve(std::span<const double> b) const {
    const int n = dim_;
    if (static_cast<int>(b.size()) != n) throw ShapeError("LU solve: rhs length mismatch");
    std::vector<double> x(n);
    for (int i = 0; i < n; ++i) x[i] = b[perm_[i]];
    // forward substitution (unit lower)
    for (int i = 1; i < n; ++i)
        for (int j = 0; j < i; ++j) x[i] -= lu_[static_cast<size_t>(i) * n + j] * x[j];
    // back substitution
    for (int i = n - 1; i >= 0; --i) {
        for (int j = i + 1; j < n; ++j) x[i] -= lu_[static_cast<size_t>(i) * n + j] * x[j];
        x[i] /= lu_[static_cast<size_t>(i) * n + i];
    }
    return x;
}

SquareMatrix LuDecomposition::inverse() const {
    const int n = dim_;
    SquareMatrix inv(n);
    std::vector<double> e(n, 0.0);
    for (int col = 0; col < n; ++col) {
        e[col] = 1.0;
        auto x = solve(e);
        e[col] = 0.0;
        for (int r = 0; r < n; ++r) inv.at(r, col) = x[r];
    }
    return inv;
}

double logabsdet(const SquareMatrix& m) { return LuDecomposition(m).log_abs_det(); }

SquareMatrix matmul(const SquareMatrix& a, const SquareMatrix& b) {
    if (a.dim != b.dim) throw ShapeError("matmul: dim mismatch");
    const int n = a.dim;
    SquareMatrix out(n);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double aik = a.at(i, k);
            for (int j = 0; j < n; ++j) out.at(i, j) += aik * b.at(k, j);
        }
    return out;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x0, double h) {
    if (!(h > 0.0)) throw DomainError("finite_diff_grad: h must be positive");
    std::vector<double> x(x0.begin(), x0.end());
    std::vector<double> grad(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double orig = x[i];
        x[i] = orig + h;
        double fp = f(x);
        x[i] = orig - h;
        double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw DomainError("finite_diff_grad: non-finite function value");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

SquareMatrix random_orthogonal(int dim, SeededRng& rng) {
    // Gram-Schmidt on a Gaussian matrix.
    SquareMatrix a(dim);
    for (auto& v : a.values) v = rng.next_normal();
    for (int c = 0; c < dim; ++c) {
        for (int prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (int r = 0; r < dim; ++r) dot += a.at(r, c) * a.at(r, prev);
            for (int r = 0; r < dim; ++r) a.at(r, c) -= dot * a.at(r, prev);
        }
        double norm = 0.0;
        for (int r = 0; r < dim; ++r) norm += a.at(r, c) * a.at(r, c);
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw SingularMatrixError("degenerate column in random_orthogonal");
        for (int r = 0; r < dim; ++r) a.at(r, c) /= norm;
    }
    return a;
}

}  // namespace flowvc
