#pragma once

#include <span>
#include <string>
#include <vector>

#include "flowvc/numerics.hpp"

namespace flowvc {

// Flat parameter storage shared by a whole model.  Layers hold offsets into
// the value vector; gradients live in a parallel vector of the same layout.
// The flat view is what the optimizer, the checkpoint writer and the
// finite-difference oracle operate on.
class ParamStore {
  public:
    struct Entry {
        std::string name;
        std::vector<int> shape;
        size_t offset = 0;
        size_t size = 0;
    };

    size_t add(const std::string& name, std::vector<int> shape);

    double* values(size_t offset) { return values_.data() + offset; }
    const double* values(size_t offset) const { return values_.data() + offset; }
    double* grads(size_t offset) { return grads_.data() + offset; }

    std::vector<double>& flat_values() { return values_; }
    const std::vector<double>& flat_values() const { return values_; }
    std::vector<double>& flat_grads() { return grads_; }
    const std::vector<double>& flat_grads() const { return grads_; }

    const std::vector<Entry>& entries() const { return entries_; }
    const Entry& find(const std::string& name) const;
    bool has(const std::string& name) const;

    size_t total_size() const { return values_.size(); }
    void zero_grads();

  private:
    std::vector<double> values_;
    std::vector<double> grads_;
    std::vector<Entry> entries_;
};

// 1-D convolution over the time axis with zero ("same") padding.
// Weight layout: [out_ch][in_ch][kernel], bias [out_ch].
struct Conv1d {
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 1;
    size_t w_off = 0;
    size_t b_off = 0;

    void init(ParamStore& store, const std::string& name, int in_channels, int out_channels,
              int kernel_width, SeededRng& rng, double weight_scale);

    FrameMatrix forward(const ParamStore& store, const FrameMatrix& x) const;
    // Accumulates weight/bias gradients and returns dL/dx.
    FrameMatrix backward(ParamStore& store, const FrameMatrix& x, const FrameMatrix& dy) const;
};

// h = tanh(u) * sigmoid(v) where (u, v) are the two channel halves of pre.
FrameMatrix gated_activation(const FrameMatrix& pre);
// Returns dL/dpre given the cached pre-activation.
FrameMatrix gated_activation_backward(const FrameMatrix& pre, const FrameMatrix& dh);

}  // namespace flowvc
