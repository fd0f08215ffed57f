#pragma once

#include <string>
#include <vector>

#include "wavenerf/rng.hpp"
#include "wavenerf/tensor.hpp"

namespace wavenerf {

// Named, grad-enabled tensors shared by the extractor and renderer.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor t);
    Tensor make(const std::string& name, Shape shape, double init_scale, Rng& rng);
    Tensor make_zeros(const std::string& name, Shape shape);

    Tensor find(const std::string& name) const;  // throws ContractError if missing
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    void zero_grad();
    int64_t total_parameters() const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

struct AdamConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One (m, v) pair per parameter plus the shared step counter.
class AdamState {
public:
    explicit AdamState(const ParamStore& params);
    int64_t step_count() const { return step_; }

    // Applies one bias-corrected Adam update in place from the parameters'
    // accumulated gradients; lr may vary per call (cosine decay).
    void step(ParamStore& params, const AdamConfig& cfg, double lr_override = -1.0);

private:
    std::vector<std::vector<double>> m_, v_;
    std::vector<int64_t> sizes_;
    int64_t step_ = 0;
};

}  // namespace wavenerf
