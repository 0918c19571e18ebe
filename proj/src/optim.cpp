#include "d2l/optim.hpp"

#include <cmath>
#include <numbers>

namespace d2l {

void Adam::step(std::span<Matrix* const> params, std::span<Matrix* const> grads, float lr) {
    require_shape(params.size() == grads.size(), "adam: params/grads count mismatch");
    if (m_.size() != params.size()) {
        m_.resize(params.size());
        v_.resize(params.size());
    }
    ++t_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = *grads[i];
        if (m_[i].size() == 0) {
            m_[i] = Matrix::Zero(p.rows(), p.cols());
            v_[i] = Matrix::Zero(p.rows(), p.cols());
        }
        if (g.size() == 0) continue;
        require_shape(g.rows() == p.rows() && g.cols() == p.cols(), "adam: gradient shape mismatch");
        m_[i] = cfg_.beta1 * m_[i] + (1.0f - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0f - cfg_.beta2) * g.cwiseProduct(g);
        if (cfg_.weight_decay > 0.0f) p *= (1.0f - lr * cfg_.weight_decay);
        p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
}

void sgd_step(std::span<Matrix* const> params, std::span<Matrix* const> grads, float lr) {
    require_shape(params.size() == grads.size(), "sgd: params/grads count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i]->size() == 0) continue;
        *params[i] -= lr * *grads[i];
    }
}

double global_norm(std::span<Matrix* const> grads) {
    double sq = 0.0;
    for (const Matrix* g : grads) {
        if (g->size() > 0) sq += static_cast<double>(g->squaredNorm());
    }
    return std::sqrt(sq);
}

double clip_grad_norm(std::span<Matrix* const> grads, double max_norm) {
    const double n = global_norm(grads);
    if (n > max_norm && n > 0.0) {
        const float s = static_cast<float>(max_norm / n);
        for (Matrix* g : grads) {
            if (g->size() > 0) *g *= s;
        }
    }
    return n;
}

float warmup_cosine(int step, int total, float peak, float warmup_frac, float floor) {
    if (total <= 0) return peak;
    const int warm = std::max(1, static_cast<int>(std::lround(warmup_frac * static_cast<float>(total))));
    if (step < warm) return peak * static_cast<float>(step + 1) / static_cast<float>(warm);
    const double prog = static_cast<double>(step - warm) / std::max(1, total - warm);
    const double cosv = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, prog)));
    return static_cast<float>(peak * (floor + (1.0 - floor) * cosv));
}

}  // namespace d2l
