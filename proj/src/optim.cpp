#include "wavenerf/optim.hpp"

#include <cmath>

#include "wavenerf/errors.hpp"

namespace wavenerf {

Tensor ParamStore::add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : entries_) {
        if (n == name) throw ContractError("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    t.impl_raw()->grad_data();  // pre-allocate so untouched params read zero grad
    entries_.emplace_back(name, t);
    return t;
}

Tensor ParamStore::make(const std::string& name, Shape shape, double init_scale, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = init_scale * rng.normal();
    return add(name, Tensor::from_data(std::move(shape), std::move(data)));
}

Tensor ParamStore::make_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape)));
}

Tensor ParamStore::find(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw ContractError("unknown parameter: " + name);
}

void ParamStore::zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
}

int64_t ParamStore::total_parameters() const {
    int64_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
}

AdamState::AdamState(const ParamStore& params) {
    for (const auto& [_, t] : params.entries()) {
        m_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
        sizes_.push_back(t.numel());
    }
}

void AdamState::step(ParamStore& params, const AdamConfig& cfg, double lr_override) {
    if (params.size() != m_.size()) {
        throw ContractError("optimizer state tracks " + std::to_string(m_.size()) +
                            " parameters, store has " + std::to_string(params.size()));
    }
    const double lr = lr_override >= 0.0 ? lr_override : cfg.lr;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < m_.size(); ++pi) {
        auto& [name, t] = const_cast<std::vector<std::pair<std::string, Tensor>>&>(params.entries())[pi];
        if (t.numel() != sizes_[pi]) {
            throw ContractError("optimizer state shape mismatch for " + name);
        }
        auto g = t.grad();
        if (g.empty()) continue;
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        double* p = t.raw();
        for (int64_t i = 0; i < t.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
        }
    }
}

}  // namespace wavenerf
