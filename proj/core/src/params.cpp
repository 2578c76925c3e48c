#include "rcn/params.hpp"

#include <algorithm>

namespace rcn {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (name.empty()) throw InvalidArgument("ParamStore: empty name");
    if (!t.defined()) throw InvalidArgument("ParamStore: undefined tensor for '" + name + "'");
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw InvalidArgument("ParamStore: duplicate name '" + name + "'");
    it->second.set_requires_grad(true);
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("ParamStore: unknown name '" + name + "'");
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("ParamStore: unknown name '" + name + "'");
    return it->second;
}

bool ParamStore::contains(const std::string& name) const { return params_.count(name) != 0; }

void ParamStore::freeze(const std::string& name) {
    get(name).set_requires_grad(false);
    frozen_.insert(name);
}

void ParamStore::freeze_prefix(const std::string& prefix) {
    for (auto& [name, t] : params_) {
        if (name.rfind(prefix, 0) == 0) {
            t.set_requires_grad(false);
            frozen_.insert(name);
        }
    }
}

bool ParamStore::is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(name);
    return out;
}

int64_t ParamStore::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

void sgd_step(ParamStore& params, double lr, double momentum) {
    if (lr <= 0.0) throw InvalidArgument("sgd_step: lr must be > 0");
    if (momentum < 0.0) throw InvalidArgument("sgd_step: momentum must be >= 0");
    for (auto& [name, t] : params.params_) {
        if (params.frozen_.count(name)) continue;
        if (!t.has_grad()) throw InvalidState("sgd_step: missing grad on '" + name + "'");
        auto g = t.grad();
        auto& v = params.velocity_[name];
        if (v.empty()) v.assign(g.size(), 0.0);
        auto d = t.data();
        for (size_t i = 0; i < g.size(); ++i) {
            v[i] = momentum * v[i] + g[i];
            d[i] -= lr * v[i];
        }
        t.zero_grad();
    }
}

}  // namespace rcn
