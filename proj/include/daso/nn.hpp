#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "daso/common.hpp"
#include "daso/rng.hpp"

namespace daso {

// Dense matrix, row-major, rows = fan_in and cols = fan_out so that a layer
// maps y_j = sum_i x_i * w(i,j) + b_j.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double& operator()(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
};

struct Layer {
    Mat w;
    Vec b;

    Layer() = default;
    Layer(std::size_t fan_in, std::size_t fan_out) : w(fan_in, fan_out), b(fan_out, 0.0) {}

    std::size_t fan_in() const { return w.rows; }
    std::size_t fan_out() const { return w.cols; }
};

/// Model parameters: ReLU MLP encoder, a linear classifier head, and an EMA
/// shadow of the encoder used for prototype features and evaluation.
struct ModelParams {
    std::vector<Layer> encoder;
    Layer classifier;
    std::vector<Layer> ema_encoder;

    std::size_t input_dim() const { return encoder.empty() ? classifier.fan_in() : encoder.front().fan_in(); }
    std::size_t feature_dim() const { return classifier.fan_in(); }
    std::size_t num_classes() const { return classifier.fan_out(); }
};

/// Builds a model with encoder dims layer_dims[0] -> ... -> layer_dims.back()
/// and a classifier mapping the feature dim to K logits. Weights are uniform
/// in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero, EMA shadow an exact
/// copy of the encoder.
inline ModelParams init_model(const std::vector<int>& layer_dims, int num_classes, std::uint64_t seed) {
    if (layer_dims.empty()) throw ConfigError("init_model: layer_dims must be non-empty");
    for (int d : layer_dims) {
        if (d <= 0) throw ConfigError("init_model: layer_dims entries must be positive");
    }
    if (num_classes < 2) throw ConfigError("init_model: need at least 2 classes");

    Rng rng(derive_seed(seed, "model-init"));
    auto fill = [&rng](Layer& layer) {
        double bound = 1.0 / std::sqrt(static_cast<double>(layer.fan_in()));
        for (double& v : layer.w.a) v = rng.uniform(-bound, bound);
        // biases stay zero
    };

    ModelParams m;
    for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) {
        m.encoder.emplace_back(static_cast<std::size_t>(layer_dims[i]), static_cast<std::size_t>(layer_dims[i + 1]));
        fill(m.encoder.back());
    }
    m.classifier = Layer(static_cast<std::size_t>(layer_dims.back()), static_cast<std::size_t>(num_classes));
    fill(m.classifier);
    m.ema_encoder = m.encoder;
    return m;
}

/// Activations recorded during a forward pass, enough to backpropagate.
/// Tapes produced with the EMA encoder refuse to backpropagate.
struct ForwardTape {
    Vec input;
    std::vector<Vec> pre;   // pre-activations per encoder layer
    std::vector<Vec> act;   // post-ReLU activations per encoder layer
    Vec logits;
    bool from_ema = false;

    const Vec& feature() const { return act.empty() ? input : act.back(); }
};

namespace detail {

inline void affine(const Layer& layer, const Vec& x, Vec& out) {
    if (x.size() != layer.fan_in()) throw ShapeError("forward: input dim " + std::to_string(x.size()) + " != layer fan_in " + std::to_string(layer.fan_in()));
    out = layer.b;
    for (std::size_t i = 0; i < layer.fan_in(); ++i) {
        double xi = x[i];
        if (xi == 0.0) continue;
        const double* wrow = &layer.w.a[i * layer.fan_out()];
        for (std::size_t j = 0; j < layer.fan_out(); ++j) out[j] += xi * wrow[j];
    }
}

}  // namespace detail

inline ForwardTape forward(const ModelParams& m, const Vec& x, bool use_ema_encoder) {
    const std::vector<Layer>& enc = use_ema_encoder ? m.ema_encoder : m.encoder;
    ForwardTape t;
    t.from_ema = use_ema_encoder;
    t.input = x;
    const Vec* cur = &t.input;
    t.pre.resize(enc.size());
    t.act.resize(enc.size());
    for (std::size_t l = 0; l < enc.size(); ++l) {
        detail::affine(enc[l], *cur, t.pre[l]);
        t.act[l] = t.pre[l];
        for (double& v : t.act[l]) v = std::max(0.0, v);
        cur = &t.act[l];
    }
    detail::affine(m.classifier, *cur, t.logits);
    return t;
}

/// Folds the sign pattern of every ReLU pre-activation into a hash. Two
/// evaluations that share the key lie in the same linear region, which is what
/// makes a central difference across them trustworthy.
inline std::uint64_t relu_pattern_key(const ForwardTape& t, std::uint64_t key = 0xcbf29ce484222325ULL) {
    for (const Vec& pre : t.pre) {
        for (double v : pre) {
            key ^= (v > 0.0) ? 0x9e3779b97f4a7c15ULL : 0x2545f4914f6cdd1dULL;
            key *= 0x100000001b3ULL;
        }
    }
    return key;
}

inline Vec softmax(const Vec& logits) {
    double mx = max_entry(logits);
    Vec p(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        p[k] = std::exp(logits[k] - mx);
        sum += p[k];
    }
    for (double& v : p) v /= sum;
    return p;
}

struct SoftmaxCeResult {
    double loss;
    Vec dlogits;
};

/// Cross-entropy of softmax(logits) against a target distribution.
/// loss = -sum_k target_k log softmax(logits)_k, dlogits = softmax - target.
inline SoftmaxCeResult softmax_ce(const Vec& target, const Vec& logits) {
    if (target.size() != logits.size()) throw ShapeError("softmax_ce: target/logits size mismatch");
    check_prob_vector(target, "softmax_ce target");
    double mx = max_entry(logits);
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    double lse = mx + std::log(sum);

    SoftmaxCeResult r;
    r.loss = lse;
    r.dlogits.resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        r.loss -= target[k] * logits[k];
        r.dlogits[k] = std::exp(logits[k] - lse) - target[k];
    }
    return r;
}

/// Gradient buffers shaped like the trainable parameters (encoder + classifier).
struct Grads {
    std::vector<Layer> encoder;
    Layer classifier;

    static Grads zeros_like(const ModelParams& m) {
        Grads g;
        for (const Layer& l : m.encoder) g.encoder.emplace_back(l.fan_in(), l.fan_out());
        g.classifier = Layer(m.classifier.fan_in(), m.classifier.fan_out());
        return g;
    }
};

/// Accumulates scale * d(loss)/d(params) into g given upstream gradients.
/// dlogits enters at the classifier output, dz_extra directly at the feature;
/// either may be null. EMA tapes are rejected: the shadow never takes grads.
inline void backward(const ModelParams& m, const ForwardTape& t, const Vec* dlogits, const Vec* dz_extra, double scale, Grads& g) {
    if (t.from_ema) throw ContractError("backward: tape was produced by the EMA encoder");
    const Vec& z = t.feature();
    Vec dz(z.size(), 0.0);

    if (dlogits != nullptr) {
        if (dlogits->size() != m.classifier.fan_out()) throw ShapeError("backward: dlogits size mismatch");
        for (std::size_t j = 0; j < m.classifier.fan_out(); ++j) g.classifier.b[j] += scale * (*dlogits)[j];
        for (std::size_t i = 0; i < m.classifier.fan_in(); ++i) {
            const double* wrow = &m.classifier.w.a[i * m.classifier.fan_out()];
            double* grow = &g.classifier.w.a[i * m.classifier.fan_out()];
            double acc = 0.0;
            for (std::size_t j = 0; j < m.classifier.fan_out(); ++j) {
                grow[j] += scale * z[i] * (*dlogits)[j];
                acc += wrow[j] * (*dlogits)[j];
            }
            dz[i] += scale * acc;
        }
    }
    if (dz_extra != nullptr) {
        if (dz_extra->size() != z.size()) throw ShapeError("backward: dz size mismatch");
        for (std::size_t i = 0; i < z.size(); ++i) dz[i] += scale * (*dz_extra)[i];
    }

    for (std::size_t l = m.encoder.size(); l-- > 0;) {
        const Layer& layer = m.encoder[l];
        Layer& grad = g.encoder[l];
        // ReLU gate
        for (std::size_t j = 0; j < dz.size(); ++j) {
            if (t.pre[l][j] <= 0.0) dz[j] = 0.0;
        }
        const Vec& in = (l == 0) ? t.input : t.act[l - 1];
        Vec din(in.size(), 0.0);
        for (std::size_t j = 0; j < layer.fan_out(); ++j) grad.b[j] += dz[j];
        for (std::size_t i = 0; i < layer.fan_in(); ++i) {
            const double* wrow = &layer.w.a[i * layer.fan_out()];
            double* grow = &grad.w.a[i * layer.fan_out()];
            double acc = 0.0;
            for (std::size_t j = 0; j < layer.fan_out(); ++j) {
                grow[j] += in[i] * dz[j];
                acc += wrow[j] * dz[j];
            }
            din[i] = acc;
        }
        dz = std::move(din);
    }
}

/// Nesterov-capable SGD with momentum and decoupled-from-nothing weight decay
/// folded into the gradient:
///   v <- momentum * v + (grad + wd * p)
///   p <- p - lr * (grad + wd * p + momentum * v)   (nesterov)
///   p <- p - lr * v                                (plain momentum)
struct OptState {
    double lr = 0.03;
    double momentum = 0.9;
    double weight_decay = 0.0;
    bool nesterov = true;
    std::vector<Layer> velocity_encoder;
    Layer velocity_classifier;

    static OptState make(const ModelParams& m, double lr, double momentum, double weight_decay, bool nesterov) {
        OptState s;
        s.lr = lr;
        s.momentum = momentum;
        s.weight_decay = weight_decay;
        s.nesterov = nesterov;
        Grads z = Grads::zeros_like(m);
        s.velocity_encoder = std::move(z.encoder);
        s.velocity_classifier = std::move(z.classifier);
        return s;
    }
};

namespace detail {

inline void sgd_tensor(std::vector<double>& p, const std::vector<double>& grad, std::vector<double>& vel, const OptState& o) {
    if (p.size() != grad.size() || p.size() != vel.size()) throw ShapeError("sgd_step: shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
        double g = grad[i] + o.weight_decay * p[i];
        vel[i] = o.momentum * vel[i] + g;
        double step = o.nesterov ? g + o.momentum * vel[i] : vel[i];
        p[i] -= o.lr * step;
    }
}

}  // namespace detail

inline void sgd_step(ModelParams& m, const Grads& g, OptState& opt) {
    if (g.encoder.size() != m.encoder.size()) throw ShapeError("sgd_step: encoder layer count mismatch");
    for (std::size_t l = 0; l < m.encoder.size(); ++l) {
        detail::sgd_tensor(m.encoder[l].w.a, g.encoder[l].w.a, opt.velocity_encoder[l].w.a, opt);
        detail::sgd_tensor(m.encoder[l].b, g.encoder[l].b, opt.velocity_encoder[l].b, opt);
    }
    detail::sgd_tensor(m.classifier.w.a, g.classifier.w.a, opt.velocity_classifier.w.a, opt);
    detail::sgd_tensor(m.classifier.b, g.classifier.b, opt.velocity_classifier.b, opt);
}

/// ema <- rho * ema + (1 - rho) * live, entrywise over a layer stack.
inline void ema_update(std::vector<Layer>& ema, const std::vector<Layer>& live, double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("ema_update: rho must be in [0, 1]");
    if (ema.size() != live.size()) throw ShapeError("ema_update: layer count mismatch");
    for (std::size_t l = 0; l < ema.size(); ++l) {
        if (ema[l].w.a.size() != live[l].w.a.size() || ema[l].b.size() != live[l].b.size()) throw ShapeError("ema_update: layer shape mismatch");
        for (std::size_t i = 0; i < ema[l].w.a.size(); ++i) ema[l].w.a[i] = rho * ema[l].w.a[i] + (1.0 - rho) * live[l].w.a[i];
        for (std::size_t i = 0; i < ema[l].b.size(); ++i) ema[l].b[i] = rho * ema[l].b[i] + (1.0 - rho) * live[l].b[i];
    }
}

inline void ema_update(ModelParams& m, double rho) { ema_update(m.ema_encoder, m.encoder, rho); }

}  // namespace daso
