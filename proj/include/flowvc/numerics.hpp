#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "flowvc/errors.hpp"

namespace flowvc {

// Channels x frames matrix of doubles, row-major with channels as the major
// (slow) axis: values[c * frames + t]. Holds mel-spectrograms and latents.
struct FrameMatrix {
    int channels = 0;
    int frames = 0;
    std::vector<double> values;

    FrameMatrix() = default;
    FrameMatrix(int c, int t) : channels(c), frames(t) {
        if (c <= 0 || t <= 0) throw ShapeError("FrameMatrix dims must be positive");
        values.assign(static_cast<size_t>(c) * t, 0.0);
    }

    double& at(int c, int t) { return values[static_cast<size_t>(c) * frames + t]; }
    double at(int c, int t) const { return values[static_cast<size_t>(c) * frames + t]; }
    size_t size() const { return values.size(); }

    // Pointer to the start of one channel's time series.
    double* row(int c) { return values.data() + static_cast<size_t>(c) * frames; }
    const double* row(int c) const { return values.data() + static_cast<size_t>(c) * frames; }
};

struct SquareMatrix {
    int dim = 0;
    std::vector<double> values;  // row-major

    SquareMatrix() = default;
    explicit SquareMatrix(int d) : dim(d), values(static_cast<size_t>(d) * d, 0.0) {}
    static SquareMatrix identity(int d);

    double& at(int r, int c) { return values[static_cast<size_t>(r) * dim + c]; }
    double at(int r, int c) const { return values[static_cast<size_t>(r) * dim + c]; }
};

// Deterministic RNG: splitmix64 over a 64-bit counter stream.  Identical seed
// produces an identical stream on every platform; normals come from a
// Box-Muller transform over consecutive uniforms.
class SeededRng {
  public:
    explicit SeededRng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    // Uniform in [0, 1).
    double next_uniform();
    // Standard normal via Box-Muller (consumes two uniforms per pair).
    double next_normal();
    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n);

    // Derive an independent child stream; used to split RNGs for parallel or
    // per-object use without sharing state.
    SeededRng child(uint64_t tag) const;

    uint64_t seed() const { return state_; }

  private:
    uint64_t state_;
    bool have_cached_ = false;
    double cached_normal_ = 0.0;
};

std::vector<double> sample_standard_normal(SeededRng& rng, size_t n);

// Sum over i of log N(v_i; mu_i, sigma_i^2).
double gaussian_log_density(std::span<const double> v, std::span<const double> mu,
                            std::span<const double> sigma);

// Scalar convenience overload.
double gaussian_log_density(double v, double mu, double sigma);

// LU decomposition with partial pivoting.  Pivot magnitudes below
// kSingularTolerance raise SingularMatrixError.
inline constexpr double kSingularTolerance = 1e-12;

class LuDecomposition {
  public:
    explicit LuDecomposition(const SquareMatrix& m);

    double log_abs_det() const { return log_abs_det_; }
    // Solve A x = b for one right-hand side.
    std::vector<double> solve(std::span<const double> b) const;
    // Columns of A^{-1}, as a SquareMatrix.
    SquareMatrix inverse() const;

  private:
    int dim_;
    std::vector<double> lu_;
    std::vector<int> perm_;
    double log_abs_det_;
};

double logabsdet(const SquareMatrix& m);

SquareMatrix matmul(const SquareMatrix& a, const SquareMatrix& b);

// Central-difference gradient of f at x0 with step h.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x0, double h);

// Random orthogonal matrix (QR of a Gaussian matrix, |det| = 1).
SquareMatrix random_orthogonal(int dim, SeededRng& rng);

}  // namespace flowvc
