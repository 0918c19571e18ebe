#pragma once

#include "d2l/tensor.hpp"

#include <span>
#include <vector>

namespace d2l {

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // params[i] is updated with grads[i]; state is keyed by position.
    void step(std::span<Matrix* const> params, std::span<Matrix* const> grads, float lr);
    int steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    std::vector<Matrix>& first_moments() { return m_; }
    std::vector<Matrix>& second_moments() { return v_; }
    const std::vector<Matrix>& first_moments() const { return m_; }
    const std::vector<Matrix>& second_moments() const { return v_; }
    void set_steps(int t) { t_ = t; }

private:
    AdamConfig cfg_;
    std::vector<Matrix> m_, v_;
    int t_ = 0;
};

// Plain gradient descent: p -= lr * g.
void sgd_step(std::span<Matrix* const> params, std::span<Matrix* const> grads, float lr);

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the norm before clipping. Empty gradient buffers are treated as zero.
double clip_grad_norm(std::span<Matrix* const> grads, double max_norm);

double global_norm(std::span<Matrix* const> grads);

// Linear warmup then cosine decay to floor * peak.
float warmup_cosine(int step, int total, float peak, float warmup_frac, float floor = 0.1f);

}  // namespace d2l
