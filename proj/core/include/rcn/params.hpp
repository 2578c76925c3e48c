#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "rcn/tensor.hpp"

namespace rcn {

// Named parameter registry. Iteration order is the lexicographic name order
// of the underlying map, which fixes the optimizer's update order.
class ParamStore {
public:
    // Registers a tensor under a unique name and marks it trainable.
    Tensor& add(const std::string& name, Tensor t);

    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    // Frozen parameters are excluded from optimizer updates and stop
    // recording gradients.
    void freeze(const std::string& name);
    void freeze_prefix(const std::string& prefix);
    bool is_frozen(const std::string& name) const;

    std::vector<std::string> names() const;
    size_t size() const { return params_.size(); }
    int64_t param_count() const;

    void zero_grads();

    const std::map<std::string, Tensor>& entries() const { return params_; }
    const std::set<std::string>& frozen() const { return frozen_; }

    // Optimizer scratch, keyed like params_. Exposed for checkpoint resume.
    std::map<std::string, std::vector<double>>& velocities() { return velocity_; }

private:
    std::map<std::string, Tensor> params_;
    std::set<std::string> frozen_;
    std::map<std::string, std::vector<double>> velocity_;

    friend void sgd_step(ParamStore&, double, double);
};

// v <- momentum*v + grad; p <- p - lr*v for every non-frozen parameter, in
// name order; grads of updated parameters are zeroed afterwards.
void sgd_step(ParamStore& params, double lr, double momentum);

}  // namespace rcn
