#include "flowvc/nn.hpp"

#include <algorithm>
#include <cmath>

namespace flowvc {

size_t ParamStore::add(const std::string& name, std::vector<int> shape) {
    for (const auto& e : entries_)
        if (e.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    size_t size = 1;
    for (int d : shape) size *= static_cast<size_t>(d);
    Entry e{name, std::move(shape), values_.size(), size};
    values_.resize(values_.size() + size, 0.0);
    grads_.resize(values_.size(), 0.0);
    size_t off = e.offset;
    entries_.push_back(std::move(e));
    return off;
}

const ParamStore::Entry& ParamStore::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e;
    throw LookupError("no parameter entry '" + name + "'");
}

bool ParamStore::has(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const Entry& e) { return e.name == name; });
}

void ParamStore::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void Conv1d::init(ParamStore& store, const std::string& name, int in_channels, int out_channels,
                  int kernel_width, SeededRng& rng, double weight_scale) {
    in_ch = in_channels;
    out_ch = out_channels;
    kernel = kernel_width;
    w_off = store.add(name + ".w", {out_ch, in_ch, kernel});
    b_off = store.add(name + ".b", {out_ch});
    double* w = store.values(w_off);
    size_t n = static_cast<size_t>(out_ch) * in_ch * kernel;
    double fan = std::sqrt(static_cast<double>(in_ch) * kernel);
    for (size_t i = 0; i < n; ++i) w[i] = weight_scale * rng.next_normal() / fan;
    // biases start at zero
}

FrameMatrix Conv1d::forward(const ParamStore& store, const FrameMatrix& x) const {
    if (x.channels != in_ch) throw ShapeError("Conv1d: input channel mismatch");
    const int T = x.frames;
    const int half = kernel / 2;
    FrameMatrix y(out_ch, T);
    const double* w = store.values(w_off);
    const double* b = store.values(b_off);
    for (int o = 0; o < out_ch; ++o) {
        double* yr = y.row(o);
        for (int t = 0; t < T; ++t) yr[t] = b[o];
        for (int i = 0; i < in_ch; ++i) {
            const double* xr = x.row(i);
            const double* wk = w + (static_cast<size_t>(o) * in_ch + i) * kernel;
            for (int k = 0; k < kernel; ++k) {
                double wv = wk[k];
                if (wv == 0.0) continue;
                int shift = k - half;
                int t0 = std::max(0, -shift);
                int t1 = std::min(T, T - shift);
                for (int t = t0; t < t1; ++t) yr[t] += wv * xr[t + shift];
            }
        }
    }
    return y;
}

FrameMatrix Conv1d::backward(ParamStore& store, const FrameMatrix& x, const FrameMatrix& dy) const {
    if (dy.channels != out_ch || dy.frames != x.frames)
        throw ShapeError("Conv1d backward: gradient shape mismatch");
    const int T = x.frames;
    const int half = kernel / 2;
    const double* w = store.values(w_off);
    double* gw = store.grads(w_off);
    double* gb = store.grads(b_off);
    FrameMatrix dx(in_ch, T);
    for (int o = 0; o < out_ch; ++o) {
        const double* dyr = dy.row(o);
        for (int t = 0; t < T; ++t) gb[o] += dyr[t];
        for (int i = 0; i < in_ch; ++i) {
            const double* xr = x.row(i);
            double* dxr = dx.row(i);
            const size_t base = (static_cast<size_t>(o) * in_ch + i) * kernel;
            for (int k = 0; k < kernel; ++k) {
                int shift = k - half;
                int t0 = std::max(0, -shift);
                int t1 = std::min(T, T - shift);
                double acc = 0.0;
                double wv = w[base + k];
                for (int t = t0; t < t1; ++t) {
                    acc += dyr[t] * xr[t + shift];
                    dxr[t + shift] += wv * dyr[t];
                }
                gw[base + k] += acc;
            }
        }
    }
    return dx;
}

FrameMatrix gated_activation(const FrameMatrix& pre) {
    if (pre.channels % 2 != 0) throw ShapeError("gated_activation: odd channel count");
    const int h = pre.channels / 2;
    const int T = pre.frames;
    FrameMatrix out(h, T);
    for (int c = 0; c < h; ++c) {
        const double* u = pre.row(c);
        const double* v = pre.row(c + h);
        double* o = out.row(c);
        for (int t = 0; t < T; ++t) o[t] = std::tanh(u[t]) / (1.0 + std::exp(-v[t]));
    }
    return out;
}

FrameMatrix gated_activation_backward(const FrameMatrix& pre, const FrameMatrix& dh) {
    const int h = pre.channels / 2;
    const int T = pre.frames;
    if (dh.channels != h || dh.frames != T)
        throw ShapeError("gated_activation_backward: shape mismatch");
    FrameMatrix dpre(pre.channels, T);
    for (int c = 0; c < h; ++c) {
        const double* u = pre.row(c);
        const double* v = pre.row(c + h);
        const double* g = dh.row(c);
        double* du = dpre.row(c);
        double* dv = dpre.row(c + h);
        for (int t = 0; t < T; ++t) {
            double tu = std::tanh(u[t]);
            double sv = 1.0 / (1.0 + std::exp(-v[t]));
            du[t] = g[t] * sv * (1.0 - tu * tu);
            dv[t] = g[t] * tu * sv * (1.0 - sv);
        }
    }
    return dpre;
}

}  // namespace flowvc
