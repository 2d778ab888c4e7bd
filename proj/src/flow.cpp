#include "flowvc/flow.hpp"

#include <cmath>

namespace flowvc {

std::vector<int> FlowConfig::split_points() const {
    std::vector<int> points;
    if (split_every <= 0) return points;
    for (int s = split_every; s < n_steps; s += split_every) points.push_back(s);
    return points;
}

std::vector<int> FlowConfig::channels_per_step() const {
    std::vector<int> per_step;
    per_step.reserve(n_steps);
    auto points = split_points();
    int channels = squeezed_channels();
    size_t next_split = 0;
    for (int s = 1; s <= n_steps; ++s) {
        per_step.push_back(channels);
        if (next_split < points.size() && points[next_split] == s) {
            channels -= split_channels;
            ++next_split;
        }
    }
    return per_step;
}

int FlowConfig::final_channels() const {
    return squeezed_channels() -
           split_channels * static_cast<int>(split_points().size());
}

void FlowConfig::validate() const {
    if (mel_dim <= 0 || n_steps < 1 || squeeze_factor < 1)
        throw ConfigError("flow config: bad mel_dim/n_steps/squeeze_factor");
    if (hidden_width <= 0 || speaker_dim <= 0 || coupling_kernel <= 0)
        throw ConfigError("flow config: widths must be positive");
    auto points = split_points();
    if (!points.empty()) {
        if (split_channels <= 0) throw ConfigError("flow config: split_channels must be positive");
        int total_split = split_channels * static_cast<int>(points.size());
        if (total_split >= squeezed_channels())
            throw ConfigError("flow config: splits consume all channels");
    }
    if (final_channels() < 2)
        throw ConfigError("flow config: fewer than 2 channels left for coupling");
}

size_t LatentBundle::total_elements() const {
    size_t n = final_part.size();
    for (const auto& p : split_parts) n += p.size();
    return n;
}

std::vector<double> LatentBundle::flatten() const {
    std::vector<double> out;
    out.reserve(total_elements());
    for (const auto& p : split_parts) out.insert(out.end(), p.values.begin(), p.values.end());
    out.insert(out.end(), final_part.values.begin(), final_part.values.end());
    return out;
}

// ---------------------------------------------------------------------------
// squeeze / split

FrameMatrix squeeze(const FrameMatrix& x, int factor) {
    if (factor < 1) throw ShapeError("squeeze: factor must be >= 1");
    if (factor == 1) return x;
    if (x.frames % factor != 0) throw ShapeError("squeeze: frames not divisible by factor");
    FrameMatrix out(x.channels * factor, x.frames / factor);
    for (int j = 0; j < factor; ++j)
        for (int c = 0; c < x.channels; ++c) {
            double* o = out.row(j * x.channels + c);
            const double* xr = x.row(c);
            for (int t = 0; t < out.frames; ++t) o[t] = xr[t * factor + j];
        }
    return out;
}

FrameMatrix unsqueeze(const FrameMatrix& x, int factor) {
    if (factor < 1) throw ShapeError("unsqueeze: factor must be >= 1");
    if (factor == 1) return x;
    if (x.channels % factor != 0) throw ShapeError("unsqueeze: channels not divisible by factor");
    FrameMatrix out(x.channels / factor, x.frames * factor);
    for (int j = 0; j < factor; ++j)
        for (int c = 0; c < out.channels; ++c) {
            const double* xr = x.row(j * out.channels + c);
            double* o = out.row(c);
            for (int t = 0; t < x.frames; ++t) o[t * factor + j] = xr[t];
        }
    return out;
}

std::pair<FrameMatrix, FrameMatrix> split_channels(const FrameMatrix& x, int k) {
    if (k <= 0 || k >= x.channels) throw ShapeError("split: k must be in (0, channels)");
    FrameMatrix kept(x.channels - k, x.frames);
    FrameMatrix factored(k, x.frames);
    for (int c = 0; c < kept.channels; ++c)
        std::copy(x.row(c), x.row(c) + x.frames, kept.row(c));
    for (int c = 0; c < k; ++c)
        std::copy(x.row(kept.channels + c), x.row(kept.channels + c) + x.frames,
                  factored.row(c));
    return {std::move(kept), std::move(factored)};
}

FrameMatrix merge_channels(const FrameMatrix& kept, const FrameMatrix& factored) {
    if (kept.frames != factored.frames) throw ShapeError("merge: frame mismatch");
    FrameMatrix out(kept.channels + factored.channels, kept.frames);
    for (int c = 0; c < kept.channels; ++c)
        std::copy(kept.row(c), kept.row(c) + kept.frames, out.row(c));
    for (int c = 0; c < factored.channels; ++c)
        std::copy(factored.row(c), factored.row(c) + factored.frames,
                  out.row(kept.channels + c));
    return out;
}

// ---------------------------------------------------------------------------
// ActNorm

void ActNormLayer::build(ParamStore& store, const std::string& name, int n_channels) {
    channels = n_channels;
    log_scale_off = store.add(name + ".log_scale", {channels});
    bias_off = store.add(name + ".bias", {channels});
    initialized = false;
}

void ActNormLayer::data_init(ParamStore& store, const std::vector<const FrameMatrix*>& batch) {
    std::vector<double> mean(channels, 0.0), var(channels, 0.0);
    size_t count = 0;
    for (const auto* m : batch) {
        if (m->channels != channels) throw ShapeError("actnorm data_init: channel mismatch");
        count += static_cast<size_t>(m->frames);
        for (int c = 0; c < channels; ++c) {
            const double* r = m->row(c);
            for (int t = 0; t < m->frames; ++t) mean[c] += r[t];
        }
    }
    if (count == 0) throw ShapeError("actnorm data_init: empty batch");
    for (int c = 0; c < channels; ++c) mean[c] /= static_cast<double>(count);
    for (const auto* m : batch)
        for (int c = 0; c < channels; ++c) {
            const double* r = m->row(c);
            for (int t = 0; t < m->frames; ++t) var[c] += (r[t] - mean[c]) * (r[t] - mean[c]);
        }
    double* ls = store.values(log_scale_off);
    double* b = store.values(bias_off);
    for (int c = 0; c < channels; ++c) {
        double std_c = std::sqrt(var[c] / static_cast<double>(count) + 1e-12);
        ls[c] = -std::log(std_c);
        b[c] = -mean[c] / std_c;
    }
    initialized = true;
}

FrameMatrix ActNormLayer::forward(const ParamStore& store, const FrameMatrix& x,
                                  double* logdet) const {
    if (!initialized) throw std::logic_error("actnorm used before initialization");
    if (x.channels != channels) throw ShapeError("actnorm: channel mismatch");
    const double* ls = store.values(log_scale_off);
    const double* b = store.values(bias_off);
    FrameMatrix y(channels, x.frames);
    double sum_ls = 0.0;
    for (int c = 0; c < channels; ++c) {
        double s = std::exp(ls[c]);
        sum_ls += ls[c];
        const double* xr = x.row(c);
        double* yr = y.row(c);
        for (int t = 0; t < x.frames; ++t) yr[t] = s * xr[t] + b[c];
    }
    if (logdet) *logdet += static_cast<double>(x.frames) * sum_ls;
    return y;
}

FrameMatrix ActNormLayer::inverse(const ParamStore& store, const FrameMatrix& y) const {
    if (!initialized) throw std::logic_error("actnorm inverse before initialization");
    if (y.channels != channels) throw ShapeError("actnorm inverse: channel mismatch");
    const double* ls = store.values(log_scale_off);
    const double* b = store.values(bias_off);
    FrameMatrix x(channels, y.frames);
    for (int c = 0; c < channels; ++c) {
        double inv_s = std::exp(-ls[c]);
        const double* yr = y.row(c);
        double* xr = x.row(c);
        for (int t = 0; t < y.frames; ++t) xr[t] = (yr[t] - b[c]) * inv_s;
    }
    return x;
}

FrameMatrix ActNormLayer::backward(ParamStore& store, const FrameMatrix& x, const FrameMatrix& dy,
                                   double logdet_coef) const {
    const double* ls = store.values(log_scale_off);
    double* gls = store.grads(log_scale_off);
    double* gb = store.grads(bias_off);
    FrameMatrix dx(channels, x.frames);
    for (int c = 0; c < channels; ++c) {
        double s = std::exp(ls[c]);
        const double* xr = x.row(c);
        const double* dyr = dy.row(c);
        double* dxr = dx.row(c);
        double acc_s = 0.0, acc_b = 0.0;
        for (int t = 0; t < x.frames; ++t) {
            acc_s += dyr[t] * xr[t];
            acc_b += dyr[t];
            dxr[t] = s * dyr[t];
        }
        // d(logdet)/d(log_scale) = frames
        gls[c] += acc_s * s + logdet_coef * static_cast<double>(x.frames);
        gb[c] += acc_b;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Invertible channel mixing

void InvLinearLayer::build(ParamStore& store, const std::string& name, int n_channels,
                           SeededRng& rng) {
    channels = n_channels;
    w_off = store.add(name + ".w", {channels, channels});
    SquareMatrix w = random_orthogonal(channels, rng);
    std::copy(w.values.begin(), w.values.end(), store.values(w_off));
}

SquareMatrix InvLinearLayer::weight(const ParamStore& store) const {
    SquareMatrix w(channels);
    std::copy(store.values(w_off), store.values(w_off) + w.values.size(), w.values.begin());
    return w;
}

FrameMatrix InvLinearLayer::forward(const ParamStore& store, const FrameMatrix& x,
                                    double* logdet) const {
    if (x.channels != channels) throw ShapeError("invlinear: channel mismatch");
    const double* w = store.values(w_off);
    FrameMatrix y(channels, x.frames);
    for (int r = 0; r < channels; ++r) {
        double* yr = y.row(r);
        for (int c = 0; c < channels; ++c) {
            double wv = w[static_cast<size_t>(r) * channels + c];
            const double* xr = x.row(c);
            for (int t = 0; t < x.frames; ++t) yr[t] += wv * xr[t];
        }
    }
    if (logdet) *logdet += static_cast<double>(x.frames) * logabsdet(weight(store));
    return y;
}

FrameMatrix InvLinearLayer::inverse(const ParamStore& store, const FrameMatrix& y) const {
    if (y.channels != channels) throw ShapeError("invlinear inverse: channel mismatch");
    LuDecomposition lu(weight(store));
    FrameMatrix x(channels, y.frames);
    std::vector<double> col(channels);
    for (int t = 0; t < y.frames; ++t) {
        for (int c = 0; c < channels; ++c) col[c] = y.at(c, t);
        auto solved = lu.solve(col);
        for (int c = 0; c < channels; ++c) x.at(c, t) = solved[c];
    }
    return x;
}

FrameMatrix InvLinearLayer::backward(ParamStore& store, const FrameMatrix& x,
                                     const FrameMatrix& dy, double logdet_coef) const {
    const double* w = store.values(w_off);
    double* gw = store.grads(w_off);
    FrameMatrix dx(channels, x.frames);
    for (int r = 0; r < channels; ++r) {
        const double* dyr = dy.row(r);
        for (int c = 0; c < channels; ++c) {
            const double* xr = x.row(c);
            double* dxr = dx.row(c);
            double wv = w[static_cast<size_t>(r) * channels + c];
            double acc = 0.0;
            for (int t = 0; t < x.frames; ++t) {
                acc += dyr[t] * xr[t];
                dxr[t] += wv * dyr[t];
            }
            gw[static_cast<size_t>(r) * channels + c] += acc;
        }
    }
    // d(frames * ln|det W|)/dW = frames * W^{-T}
    SquareMatrix inv = LuDecomposition(weight(store)).inverse();
    double coef = logdet_coef * static_cast<double>(x.frames);
    for (int r = 0; r < channels; ++r)
        for (int c = 0; c < channels; ++c)
            gw[static_cast<size_t>(r) * channels + c] += coef * inv.at(c, r);
    return dx;
}

void InvLinearLayer::ensure_nonsingular(ParamStore& store) const {
    double* w = store.values(w_off);
    try {
        SquareMatrix m = weight(store);
        LuDecomposition lu(m);
        // Near-singular also shows up as a very negative log|det|.
        if (lu.log_abs_det() > -20.0 * channels) return;
    } catch (const SingularMatrixError&) {
    }
    for (int i = 0; i < channels; ++i) w[static_cast<size_t>(i) * channels + i] += 1e-4;
}

// ---------------------------------------------------------------------------
// Affine coupling

void AffineCouplingLayer::build(ParamStore& store, const std::string& name, int n_channels,
                                int n_cond, int hidden, int kernel, bool flip_halves,
                                SeededRng& rng) {
    if (n_channels < 2) throw ConfigError("coupling needs >= 2 channels");
    channels = n_channels;
    cond_channels = n_cond;
    ca = (channels + 1) / 2;
    cb = channels - ca;
    flip = flip_halves;
    conv1.init(store, name + ".conv1", ca + cond_channels, 2 * hidden, kernel, rng, 1.0);
    conv2.init(store, name + ".conv2", hidden, 2 * hidden, kernel, rng, 1.0);
    // zero-initialized head: the layer starts as the identity
    conv_out.init(store, name + ".out", hidden, 2 * cb, 1, rng, 0.0);
}

namespace {

// Copy the pass-through / transformed halves according to the flip flag.
void halves(const FrameMatrix& x, int ca, int cb, bool flip, FrameMatrix* xa, FrameMatrix* xb) {
    *xa = FrameMatrix(ca, x.frames);
    *xb = FrameMatrix(cb, x.frames);
    int a0 = flip ? cb : 0;
    int b0 = flip ? 0 : ca;
    for (int c = 0; c < ca; ++c) std::copy(x.row(a0 + c), x.row(a0 + c) + x.frames, xa->row(c));
    for (int c = 0; c < cb; ++c) std::copy(x.row(b0 + c), x.row(b0 + c) + x.frames, xb->row(c));
}

void unhalves(const FrameMatrix& xa, const FrameMatrix& xb, bool flip, FrameMatrix* x) {
    int ca = xa.channels, cb = xb.channels;
    *x = FrameMatrix(ca + cb, xa.frames);
    int a0 = flip ? cb : 0;
    int b0 = flip ? 0 : ca;
    for (int c = 0; c < ca; ++c) std::copy(xa.row(c), xa.row(c) + xa.frames, x->row(a0 + c));
    for (int c = 0; c < cb; ++c) std::copy(xb.row(c), xb.row(c) + xb.frames, x->row(b0 + c));
}

FrameMatrix concat_rows(const FrameMatrix& a, const FrameMatrix& b) {
    if (a.frames != b.frames) throw ShapeError("concat_rows: frame mismatch");
    FrameMatrix out(a.channels + b.channels, a.frames);
    for (int c = 0; c < a.channels; ++c) std::copy(a.row(c), a.row(c) + a.frames, out.row(c));
    for (int c = 0; c < b.channels; ++c)
        std::copy(b.row(c), b.row(c) + b.frames, out.row(a.channels + c));
    return out;
}

}  // namespace

FrameMatrix AffineCouplingLayer::forward(const ParamStore& store, const FrameMatrix& x,
                                         const FrameMatrix& cond, double* logdet,
                                         CouplingCache* cache) const {
    if (x.channels != channels) throw ShapeError("coupling: channel mismatch");
    if (cond.channels != cond_channels || cond.frames != x.frames)
        throw ShapeError("coupling: conditioning shape mismatch");
    FrameMatrix xa, xb;
    halves(x, ca, cb, flip, &xa, &xb);

    FrameMatrix net_in = concat_rows(xa, cond);
    FrameMatrix pre1 = conv1.forward(store, net_in);
    FrameMatrix h1 = gated_activation(pre1);
    FrameMatrix pre2 = conv2.forward(store, h1);
    FrameMatrix h2 = gated_activation(pre2);
    FrameMatrix out = conv_out.forward(store, h2);

    FrameMatrix yb(cb, x.frames);
    double ld = 0.0;
    for (int c = 0; c < cb; ++c) {
        const double* shift = out.row(c);
        const double* prescale = out.row(cb + c);
        const double* xbr = xb.row(c);
        double* ybr = yb.row(c);
        for (int t = 0; t < x.frames; ++t) {
            double log_s = std::tanh(prescale[t]);  // ln s in [-1, 1]
            ld += log_s;
            ybr[t] = std::exp(log_s) * xbr[t] + shift[t];
        }
    }
    if (logdet) *logdet += ld;
    if (cache) {
        cache->net_in = std::move(net_in);
        cache->pre1 = std::move(pre1);
        cache->h1 = std::move(h1);
        cache->pre2 = std::move(pre2);
        cache->h2 = std::move(h2);
        cache->out = std::move(out);
    }
    FrameMatrix y;
    unhalves(xa, yb, flip, &y);
    return y;
}

FrameMatrix AffineCouplingLayer::inverse(const ParamStore& store, const FrameMatrix& y,
                                         const FrameMatrix& cond) const {
    if (y.channels != channels) throw ShapeError("coupling inverse: channel mismatch");
    if (cond.channels != cond_channels || cond.frames != y.frames)
        throw ShapeError("coupling inverse: conditioning shape mismatch");
    FrameMatrix ya, yb;
    halves(y, ca, cb, flip, &ya, &yb);

    FrameMatrix net_in = concat_rows(ya, cond);
    FrameMatrix h1 = gated_activation(conv1.forward(store, net_in));
    FrameMatrix h2 = gated_activation(conv2.forward(store, h1));
    FrameMatrix out = conv_out.forward(store, h2);

    FrameMatrix xb(cb, y.frames);
    for (int c = 0; c < cb; ++c) {
        const double* shift = out.row(c);
        const double* prescale = out.row(cb + c);
        const double* ybr = yb.row(c);
        double* xbr = xb.row(c);
        for (int t = 0; t < y.frames; ++t)
            xbr[t] = (ybr[t] - shift[t]) * std::exp(-std::tanh(prescale[t]));
    }
    FrameMatrix x;
    unhalves(ya, xb, flip, &x);
    return x;
}

FrameMatrix AffineCouplingLayer::backward(ParamStore& store, const FrameMatrix& x,
                                          const CouplingCache& cache, const FrameMatrix& dy,
                                          double logdet_coef, FrameMatrix* dcond) const {
    FrameMatrix xa, xb, dya, dyb;
    halves(x, ca, cb, flip, &xa, &xb);
    halves(dy, ca, cb, flip, &dya, &dyb);

    FrameMatrix dout(2 * cb, x.frames);
    FrameMatrix dxb(cb, x.frames);
    for (int c = 0; c < cb; ++c) {
        const double* prescale = cache.out.row(cb + c);
        const double* xbr = xb.row(c);
        const double* dybr = dyb.row(c);
        double* dshift = dout.row(c);
        double* dprescale = dout.row(cb + c);
        double* dxbr = dxb.row(c);
        for (int t = 0; t < x.frames; ++t) {
            double tp = std::tanh(prescale[t]);
            double s = std::exp(tp);
            dshift[t] = dybr[t];
            // through y_b = s*x_b + shift and through the logdet term sum(tanh p)
            dprescale[t] = (dybr[t] * xbr[t] * s + logdet_coef) * (1.0 - tp * tp);
            dxbr[t] = dybr[t] * s;
        }
    }

    FrameMatrix dh2 = conv_out.backward(store, cache.h2, dout);
    FrameMatrix dpre2 = gated_activation_backward(cache.pre2, dh2);
    FrameMatrix dh1 = conv2.backward(store, cache.h1, dpre2);
    FrameMatrix dpre1 = gated_activation_backward(cache.pre1, dh1);
    FrameMatrix dnet_in = conv1.backward(store, cache.net_in, dpre1);

    FrameMatrix dxa(ca, x.frames);
    for (int c = 0; c < ca; ++c) {
        const double* from_net = dnet_in.row(c);
        const double* from_pass = dya.row(c);
        double* r = dxa.row(c);
        for (int t = 0; t < x.frames; ++t) r[t] = from_net[t] + from_pass[t];
    }
    if (dcond) {
        if (dcond->channels != cond_channels || dcond->frames != x.frames)
            throw ShapeError("coupling backward: dcond shape mismatch");
        for (int c = 0; c < cond_channels; ++c) {
            const double* src = dnet_in.row(ca + c);
            double* dst = dcond->row(c);
            for (int t = 0; t < x.frames; ++t) dst[t] += src[t];
        }
    }
    FrameMatrix dx;
    unhalves(dxa, dxb, flip, &dx);
    return dx;
}

// ---------------------------------------------------------------------------
// FlowStack

void FlowStack::build(ParamStore& store, const FlowConfig& cfg, SeededRng& rng) {
    cfg.validate();
    cfg_ = cfg;
    steps_.clear();
    auto widths = cfg.channels_per_step();
    for (int s = 0; s < cfg.n_steps; ++s) {
        FlowStep step;
        std::string name = "flow.step" + std::to_string(s);
        step.actnorm.build(store, name + ".actnorm", widths[s]);
        step.mix.build(store, name + ".mix", widths[s], rng);
        step.coupling.build(store, name + ".coupling", widths[s], cfg.cond_channels(),
                            cfg.hidden_width, cfg.coupling_kernel, s % 2 == 1, rng);
        steps_.push_back(std::move(step));
    }
}

FrameMatrix FlowStack::build_cond_matrix(const ConditioningSet& cond,
                                         const FrameMatrix* mu_phone) const {
    const int f = cfg_.squeeze_factor;
    const int frames = cond.frames();
    const int trimmed = frames - frames % f;
    if (trimmed <= 0) throw ShapeError("conditioning: fewer frames than squeeze factor");
    const int tq = trimmed / f;
    if (static_cast<int>(cond.speaker.size()) != cfg_.speaker_dim)
        throw ShapeError("conditioning: speaker dim mismatch");
    if (cond.vuv.size() != cond.f0_norm.size())
        throw ShapeError("conditioning: f0/vuv length mismatch");
    if (cfg_.text_conditioned) {
        if (!mu_phone) throw ConfigError("text-conditioned flow requires mu_phone");
        if (mu_phone->channels != cfg_.mel_dim || mu_phone->frames < trimmed)
            throw ShapeError("conditioning: mu_phone shape mismatch");
    }

    FrameMatrix m(cfg_.cond_channels(), tq);
    int row = 0;
    for (int d = 0; d < cfg_.speaker_dim; ++d, ++row)
        for (int t = 0; t < tq; ++t) m.at(row, t) = cond.speaker[d];
    for (int j = 0; j < f; ++j, ++row)
        for (int t = 0; t < tq; ++t) m.at(row, t) = cond.f0_norm[t * f + j];
    for (int j = 0; j < f; ++j, ++row)
        for (int t = 0; t < tq; ++t) m.at(row, t) = cond.vuv[t * f + j] ? 1.0 : 0.0;
    if (cfg_.text_conditioned) {
        for (int j = 0; j < f; ++j)
            for (int c = 0; c < cfg_.mel_dim; ++c, ++row)
                for (int t = 0; t < tq; ++t) m.at(row, t) = mu_phone->at(c, t * f + j);
    }
    return m;
}

FrameMatrix FlowStack::phoneme_cond_grad(const FrameMatrix& dcond) const {
    if (!cfg_.text_conditioned)
        throw ConfigError("phoneme_cond_grad: flow is not text-conditioned");
    const int f = cfg_.squeeze_factor;
    const int tq = dcond.frames;
    FrameMatrix dmu(cfg_.mel_dim, tq * f);
    int row = cfg_.speaker_dim + 2 * f;
    for (int j = 0; j < f; ++j)
        for (int c = 0; c < cfg_.mel_dim; ++c, ++row)
            for (int t = 0; t < tq; ++t) dmu.at(c, t * f + j) = dcond.at(row, t);
    return dmu;
}

EncodeResult FlowStack::encode(const ParamStore& store, const FrameMatrix& x,
                               const FrameMatrix& cond, EncodeCache* cache) const {
    if (x.channels != cfg_.mel_dim) throw ShapeError("encode: mel_dim mismatch");
    const int f = cfg_.squeeze_factor;
    const int trimmed = x.frames % f;
    FrameMatrix input = x;
    if (trimmed != 0) {
        if (x.frames < f) throw ShapeError("encode: fewer frames than squeeze factor");
        input = FrameMatrix(x.channels, x.frames - trimmed);
        for (int c = 0; c < x.channels; ++c)
            std::copy(x.row(c), x.row(c) + input.frames, input.row(c));
    }
    FrameMatrix h = squeeze(input, f);
    if (cond.frames != h.frames) throw ShapeError("encode: conditioning frames mismatch");

    EncodeResult result;
    result.trimmed_frames = trimmed;
    if (cache) cache->steps.resize(steps_.size());

    auto points = cfg_.split_points();
    size_t next_split = 0;
    for (size_t s = 0; s < steps_.size(); ++s) {
        const FlowStep& step = steps_[s];
        StepCache* sc = cache ? &cache->steps[s] : nullptr;
        if (sc) sc->actnorm_in = h;
        h = step.actnorm.forward(store, h, &result.logdet);
        if (sc) sc->mix_in = h;
        h = step.mix.forward(store, h, &result.logdet);
        if (sc) sc->coupling_in = h;
        h = step.coupling.forward(store, h, cond, &result.logdet,
                                  sc ? &sc->coupling : nullptr);
        if (next_split < points.size() && points[next_split] == static_cast<int>(s) + 1) {
            auto [kept, factored] = split_channels(h, cfg_.split_channels);
            result.bundle.split_parts.push_back(std::move(factored));
            h = std::move(kept);
            ++next_split;
        }
    }
    result.bundle.final_part = std::move(h);
    return result;
}

FrameMatrix FlowStack::decode(const ParamStore& store, const LatentBundle& z,
                              const FrameMatrix& cond) const {
    auto points = cfg_.split_points();
    if (z.split_parts.size() != points.size())
        throw ShapeError("decode: split part count does not match schedule");
    if (z.final_part.channels != cfg_.final_channels())
        throw ShapeError("decode: final latent channel mismatch");
    FrameMatrix h = z.final_part;
    size_t split_idx = points.size();
    for (int s = static_cast<int>(steps_.size()) - 1; s >= 0; --s) {
        if (split_idx > 0 && points[split_idx - 1] == s + 1) {
            --split_idx;
            const FrameMatrix& part = z.split_parts[split_idx];
            if (part.channels != cfg_.split_channels || part.frames != h.frames)
                throw ShapeError("decode: split part shape mismatch");
            h = merge_channels(h, part);
        }
        const FlowStep& step = steps_[s];
        h = step.coupling.inverse(store, h, cond);
        h = step.mix.inverse(store, h);
        h = step.actnorm.inverse(store, h);
    }
    return unsqueeze(h, cfg_.squeeze_factor);
}

FrameMatrix FlowStack::backward(ParamStore& store, const EncodeCache& cache,
                                const LatentBundle& dbundle, double logdet_coef,
                                FrameMatrix* dx) const {
    auto points = cfg_.split_points();
    FrameMatrix dh = dbundle.final_part;
    FrameMatrix dcond(cfg_.cond_channels(), dh.frames);
    size_t split_idx = points.size();
    for (int s = static_cast<int>(steps_.size()) - 1; s >= 0; --s) {
        if (split_idx > 0 && points[split_idx - 1] == s + 1) {
            --split_idx;
            dh = merge_channels(dh, dbundle.split_parts[split_idx]);
        }
        const StepCache& sc = cache.steps[s];
        const FlowStep& step = steps_[s];
        dh = step.coupling.backward(store, sc.coupling_in, sc.coupling, dh, logdet_coef, &dcond);
        dh = step.mix.backward(store, sc.mix_in, dh, logdet_coef);
        dh = step.actnorm.backward(store, sc.actnorm_in, dh, logdet_coef);
    }
    if (dx) *dx = unsqueeze(dh, cfg_.squeeze_factor);
    return dcond;
}

LatentBundle FlowStack::route_to_latent_layout(const FrameMatrix& field) const {
    if (field.channels != cfg_.mel_dim) throw ShapeError("route: mel_dim mismatch");
    const int f = cfg_.squeeze_factor;
    FrameMatrix trimmed = field;
    if (field.frames % f != 0) {
        trimmed = FrameMatrix(field.channels, field.frames - field.frames % f);
        for (int c = 0; c < field.channels; ++c)
            std::copy(field.row(c), field.row(c) + trimmed.frames, trimmed.row(c));
    }
    FrameMatrix h = squeeze(trimmed, f);
    LatentBundle bundle;
    for (size_t i = 0; i < cfg_.split_points().size(); ++i) {
        auto [kept, factored] = split_channels(h, cfg_.split_channels);
        bundle.split_parts.push_back(std::move(factored));
        h = std::move(kept);
    }
    bundle.final_part = std::move(h);
    return bundle;
}

FrameMatrix FlowStack::route_from_latent_layout(const LatentBundle& bundle) const {
    FrameMatrix h = bundle.final_part;
    for (size_t i = bundle.split_parts.size(); i > 0; --i)
        h = merge_channels(h, bundle.split_parts[i - 1]);
    return unsqueeze(h, cfg_.squeeze_factor);
}

void FlowStack::data_dependent_init(
    ParamStore& store,
    const std::vector<std::pair<const FrameMatrix*, const FrameMatrix*>>& batch) {
    if (batch.empty()) throw TrainingError("data_dependent_init: empty batch");
    const int f = cfg_.squeeze_factor;
    std::vector<FrameMatrix> acts;
    std::vector<const FrameMatrix*> conds;
    for (const auto& [x, cond] : batch) {
        FrameMatrix input = *x;
        if (input.frames % f != 0) {
            FrameMatrix t(input.channels, input.frames - input.frames % f);
            for (int c = 0; c < input.channels; ++c)
                std::copy(input.row(c), input.row(c) + t.frames, t.row(c));
            input = std::move(t);
        }
        acts.push_back(squeeze(input, f));
        conds.push_back(cond);
    }
    auto points = cfg_.split_points();
    size_t next_split = 0;
    for (size_t s = 0; s < steps_.size(); ++s) {
        FlowStep& step = steps_[s];
        std::vector<const FrameMatrix*> ptrs;
        for (const auto& a : acts) ptrs.push_back(&a);
        step.actnorm.data_init(store, ptrs);
        for (size_t b = 0; b < acts.size(); ++b) {
            FrameMatrix h = step.actnorm.forward(store, acts[b], nullptr);
            h = step.mix.forward(store, h, nullptr);
            h = step.coupling.forward(store, h, *conds[b], nullptr, nullptr);
            acts[b] = std::move(h);
        }
        if (next_split < points.size() && points[next_split] == static_cast<int>(s) + 1) {
            for (auto& a : acts) a = split_channels(a, cfg_.split_channels).first;
            ++next_split;
        }
    }
}

void FlowStack::ensure_nonsingular(ParamStore& store) const {
    for (const auto& step : steps_) step.mix.ensure_nonsingular(store);
}

bool FlowStack::is_initialized() const {
    for (const auto& step : steps_)
        if (!step.actnorm.initialized) return false;
    return true;
}

void FlowStack::mark_initialized() {
    for (auto& step : steps_) step.actnorm.initialized = true;
}

}  // namespace flowvc
