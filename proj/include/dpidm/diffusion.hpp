#pragma once

#include <functional>
#include <vector>

#include "dpidm/attention.hpp"
#include "dpidm/tape.hpp"
#include "dpidm/tensor.hpp"

namespace dpidm {

// Linear-beta DDPM schedule; alpha_bar[i] = prod_{k<=i} (1 - beta[k]).
struct NoiseSchedule {
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    static NoiseSchedule linear(int64_t num_steps, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (num_steps < 1) throw ConfigError("schedule needs at least 1 step");
        if (!(beta_start > 0) || !(beta_end < 1) || !(beta_start < beta_end))
            throw ConfigError("schedule betas must satisfy 0 < start < end < 1");
        NoiseSchedule s;
        s.beta.resize(static_cast<size_t>(num_steps));
        s.alpha_bar.resize(static_cast<size_t>(num_steps));
        double prod = 1.0;
        for (int64_t i = 0; i < num_steps; ++i) {
            const double b = num_steps == 1
                                 ? beta_start
                                 : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                       static_cast<double>(num_steps - 1);
            s.beta[static_cast<size_t>(i)] = b;
            prod *= 1.0 - b;
            s.alpha_bar[static_cast<size_t>(i)] = prod;
        }
        return s;
    }

    int64_t num_steps() const { return static_cast<int64_t>(beta.size()); }

    double alpha_bar_at(int64_t t) const {
        if (t < -1 || t >= num_steps()) throw Error("timestep " + std::to_string(t) + " out of range");
        return t < 0 ? 1.0 : alpha_bar[static_cast<size_t>(t)];
    }
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, const NoiseSchedule& sched, int64_t t) {
    if (!z0.same_shape(eps)) throw ShapeError("add_noise: z0/eps shape mismatch");
    if (t < 0 || t >= sched.num_steps()) throw Error("add_noise: timestep out of range");
    const T a = static_cast<T>(std::sqrt(sched.alpha_bar_at(t)));
    const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
    Tensor<T> out(z0.shape);
    for (int64_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

template <typename T>
T ldm_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps) {
    if (!eps_pred.same_shape(eps)) throw ShapeError("ldm_loss shape mismatch");
    double acc = 0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
        const double d = static_cast<double>(eps_pred[i]) - static_cast<double>(eps[i]);
        acc += d * d;
    }
    return static_cast<T>(acc / static_cast<double>(eps.numel()));
}

struct LossConfig {
    double lambda = 1e-3;
    std::vector<double> gamma{0.5, 0.5};  // per TRA layer
};

// L_TRA = sum_i gamma_i sum_{j=2..T} mean|A_i^(j) - A_i^(j-1)|; 0 for T == 1.
template <typename T>
T tra_loss(const std::vector<AttentionRecord<T>>& records, const LossConfig& cfg) {
    double total = 0;
    for (size_t i = 0; i < records.size(); ++i) {
        const Tensor<T>& a = records[i].probs;
        if (a.rank() != 3) throw ShapeError("tra_loss: record must be [T,S,K]");
        const int64_t T_ = a.shape[0], m = a.shape[1] * a.shape[2];
        const double gamma = i < cfg.gamma.size() ? cfg.gamma[i] : 0.5;
        for (int64_t j = 1; j < T_; ++j) {
            double acc = 0;
            const T* cur = a.ptr() + j * m;
            const T* prev = a.ptr() + (j - 1) * m;
            for (int64_t p = 0; p < m; ++p) acc += std::abs(static_cast<double>(cur[p]) - static_cast<double>(prev[p]));
            total += gamma * acc / static_cast<double>(m);
        }
    }
    return static_cast<T>(total);
}

template <typename T>
T total_loss(const Tensor<T>& eps_pred, const Tensor<T>& eps,
             const std::vector<AttentionRecord<T>>& records, const LossConfig& cfg) {
    return ldm_loss(eps_pred, eps) + static_cast<T>(cfg.lambda) * tra_loss(records, cfg);
}

// Tape forms used by the training loop.
template <typename T>
Value tra_loss_tape(Tape<T>& tape, const std::vector<Value>& records, const LossConfig& cfg) {
    Value total = tape.constant(Tensor<T>(Shape{1}));
    for (size_t i = 0; i < records.size(); ++i) {
        const Shape& s = tape.shape(records[i]);
        if (s.size() != 3) throw ShapeError("tra_loss: record must be [T,S,K]");
        const double gamma = i < cfg.gamma.size() ? cfg.gamma[i] : 0.5;
        for (int64_t j = 1; j < s[0]; ++j) {
            Value d = tape.sub(tape.slice(records[i], 0, j, j + 1), tape.slice(records[i], 0, j - 1, j));
            Value m = tape.mean_all(tape.abs(d));
            total = tape.add(total, tape.scale(m, static_cast<T>(gamma)));
        }
    }
    return total;
}

template <typename T>
struct TotalLossValues {
    Value total, ldm, tra;
};

template <typename T>
TotalLossValues<T> total_loss_tape(Tape<T>& tape, Value eps_pred, Value eps,
                                   const std::vector<Value>& records, const LossConfig& cfg) {
    Value ldm = tape.mse(eps_pred, eps);
    Value tra = tra_loss_tape(tape, records, cfg);
    Value total = tape.add(ldm, tape.scale(tra, static_cast<T>(cfg.lambda)));
    return {total, ldm, tra};
}

// Deterministic DDIM (eta = 0) with classifier-free guidance. `eps_fn`
// evaluates the denoiser at (z_t, t); the flag selects the unconditional
// branch. guidance 1 evaluates only the conditional branch, guidance 0 only
// the unconditional one.
template <typename T>
using EpsFn = std::function<Tensor<T>(const Tensor<T>& z_t, int64_t t, bool uncond)>;

template <typename T>
Tensor<T> ddim_sample(const Tensor<T>& init_noise, const NoiseSchedule& sched, int64_t steps,
                      double guidance_scale, const EpsFn<T>& eps_fn) {
    if (steps <= 0) throw ConfigError("ddim: steps must be positive");
    if (steps > sched.num_steps()) throw ConfigError("ddim: steps exceed schedule length");
    if (guidance_scale < 0) throw ConfigError("ddim: guidance scale must be >= 0");
    const int64_t N = sched.num_steps();
    Tensor<T> z = init_noise;
    for (int64_t i = steps; i >= 1; --i) {
        const int64_t t = i * N / steps - 1;
        const int64_t t_prev = (i - 1) * N / steps - 1;
        Tensor<T> eps_hat;
        if (guidance_scale == 1.0) {
            eps_hat = eps_fn(z, t, false);
        } else if (guidance_scale == 0.0) {
            eps_hat = eps_fn(z, t, true);
        } else {
            const Tensor<T> cond = eps_fn(z, t, false);
            const Tensor<T> uncond = eps_fn(z, t, true);
            eps_hat = uncond;
            const T s = static_cast<T>(guidance_scale);
            for (int64_t p = 0; p < eps_hat.numel(); ++p)
                eps_hat[p] += s * (cond[p] - uncond[p]);
        }
        if (!eps_hat.same_shape(z)) throw ShapeError("ddim: eps shape mismatch");
        const T sa = static_cast<T>(std::sqrt(sched.alpha_bar_at(t)));
        const T sb = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
        const T pa = static_cast<T>(std::sqrt(sched.alpha_bar_at(t_prev)));
        const T pb = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar_at(t_prev)));
        for (int64_t p = 0; p < z.numel(); ++p) {
            const T x0 = (z[p] - sb * eps_hat[p]) / sa;
            z[p] = pa * x0 + pb * eps_hat[p];
        }
    }
    return z;
}

}  // namespace dpidm
