#pragma once

#include "m3face/core/autograd.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace m3face::nn {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with moments keyed by parameter name, so the state survives model
/// copies and can be checkpointed.
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }

    /// Applies one update to every trainable parameter that has a gradient,
    /// with the gradient divided by `grad_divisor` (micro-batch averaging).
    template <typename Model>
    void step(Model& model, double grad_divisor = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        model.visit_params([&](ag::Param& p) {
            if (!p.trainable || p.grad.size() != p.value.size()) return;
            auto& m = m_[p.name];
            auto& v = v_[p.name];
            if (m.size() != p.value.size()) {
                m.assign(p.value.size(), 0.0);
                v.assign(p.value.size(), 0.0);
            }
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i] / grad_divisor;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                p.value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
        });
    }

    /// Update for a free-standing tensor (e.g. an optimized embedding).
    void step_tensor(const std::string& key, std::vector<double>& value, const std::vector<double>& grad) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        auto& m = m_[key];
        auto& v = v_[key];
        if (m.size() != value.size()) {
            m.assign(value.size(), 0.0);
            v.assign(value.size(), 0.0);
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }

    std::map<std::string, std::vector<double>>& first_moments() { return m_; }
    std::map<std::string, std::vector<double>>& second_moments() { return v_; }
    const std::map<std::string, std::vector<double>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<double>>& second_moments() const { return v_; }

private:
    AdamConfig cfg_{};
    long t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

}  // namespace m3face::nn
