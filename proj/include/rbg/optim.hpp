#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "nn.hpp"

namespace rbg {

struct AdamConfig {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    /// Global gradient-norm clip; <= 0 disables clipping.
    double clip_norm = 1.0;
};

/// Adam with decoupled weight decay. Parameters marked non-trainable are
/// left untouched, including by the decay term.
template <typename T>
class AdamW {
  public:
    AdamW() = default;
    AdamW(const ParameterSet<T>& ps, AdamConfig config) : m_config(config), m_m(ps.zero_grads()), m_v(ps.zero_grads())
    {
    }

    [[nodiscard]] const AdamConfig& config() const { return m_config; }
    [[nodiscard]] std::uint64_t steps() const { return m_t; }
    [[nodiscard]] const std::vector<Matrix<T>>& first_moment() const { return m_m; }
    [[nodiscard]] const std::vector<Matrix<T>>& second_moment() const { return m_v; }

    void restore(std::uint64_t t, std::vector<Matrix<T>> m, std::vector<Matrix<T>> v)
    {
        m_t = t;
        m_m = std::move(m);
        m_v = std::move(v);
    }

    /// Global L2 norm of the trainable gradients.
    static double grad_norm(const ParameterSet<T>& ps, const std::vector<Matrix<T>>& grads)
    {
        double sq = 0;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (ps[i].trainable) {
                sq += static_cast<double>(grads[i].squaredNorm());
            }
        }
        return std::sqrt(sq);
    }

    /// Applies one update; returns the pre-clip gradient norm.
    double step(ParameterSet<T>& ps, std::vector<Matrix<T>>& grads)
    {
        const double norm = grad_norm(ps, grads);
        const double clip = (m_config.clip_norm > 0 && norm > m_config.clip_norm) ? m_config.clip_norm / norm : 1.0;
        ++m_t;
        const double bc1 = 1.0 - std::pow(m_config.beta1, static_cast<double>(m_t));
        const double bc2 = 1.0 - std::pow(m_config.beta2, static_cast<double>(m_t));
        const T lr = static_cast<T>(m_config.learning_rate);
        const T b1 = static_cast<T>(m_config.beta1);
        const T b2 = static_cast<T>(m_config.beta2);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (!ps[i].trainable) {
                continue;
            }
            auto& p = ps[i].value;
            const Matrix<T> g = grads[i] * static_cast<T>(clip);
            m_m[i] = b1 * m_m[i] + (T(1) - b1) * g;
            m_v[i] = b2 * m_v[i] + (T(1) - b2) * g.cwiseProduct(g);
            p *= T(1) - lr * static_cast<T>(m_config.weight_decay);
            const auto mhat = (m_m[i].array() / static_cast<T>(bc1));
            const auto vhat = (m_v[i].array() / static_cast<T>(bc2));
            p.array() -= lr * mhat / (vhat.sqrt() + static_cast<T>(m_config.eps));
        }
        return norm;
    }

  private:
    AdamConfig m_config;
    std::vector<Matrix<T>> m_m;
    std::vector<Matrix<T>> m_v;
    std::uint64_t m_t = 0;
};

}  // namespace rbg
