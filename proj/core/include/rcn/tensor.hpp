#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rcn/error.hpp"
#include "rcn/rng.hpp"

namespace rcn {

using Shape = std::vector<int>;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    uint64_t id = 0;  // creation order; backward replays nodes in decreasing id
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const TensorImpl&)> backprop;  // accumulates into parents' grad

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

uint64_t next_node_id();

}  // namespace detail

// Toggles graph recording on the current thread. Inference paths wrap
// themselves in a NoGradGuard so no tape is built.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor of 64-bit reals with reverse-mode autograd.
// Copies are shallow; the buffer (and any recorded graph edge) is shared.
// The compute graph is recorded implicitly on op application: each result
// keeps its parents plus a closure that routes gradients to them, and nodes
// carry a monotonically increasing id so one backward pass can replay them
// in a fixed (reverse-creation) order.
class Tensor {
public:
    Tensor() = default;  // undefined tensor
    explicit Tensor(Shape shape, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);  // rank-0
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    int dim(int i) const;
    int64_t size() const;
    bool requires_grad() const;
    void set_requires_grad(bool v);

    std::span<double> data();
    std::span<const double> data() const;
    bool has_grad() const;
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();

    double value() const;  // single-element accessor
    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    // Deep copy of values (no graph edge, fresh buffer).
    Tensor clone() const;

    uint64_t node_id() const;
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_op_result(Shape shape, std::vector<Tensor> parents,
                                 std::function<void(const detail::TensorImpl&)> backprop);
};

// --- primitive ops (all differentiable unless noted) ---

// Cross-correlation-style convolution (no kernel flip) with per-channel bias.
// input [N,C,H,W], kernel [O,C,k,k], bias [O] or undefined for none.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int pad);

// Affine map: input [N,D], weight [M,D], bias [M] -> [N,M].
Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// Windowed max; gradient routes to the first arg-max in row-major order.
Tensor max_pool2d(const Tensor& input, int k, int stride);

// Mean over N of the stable log-sum form of -[y log s(l) + (1-y) log(1-s(l))].
// labels must be exactly 0 or 1 and never require grad.
Tensor sigmoid_cross_entropy(const Tensor& logits, const Tensor& labels);

// Dense valid-mode correlation: window [D,Hf,Wf] x template [D,hf,wf] -> [1,Hc,Wc],
// C(p) = sum_q f(p+q).h(q) over channels and template support. Bilinear.
Tensor xcorr2d(const Tensor& window_feat, const Tensor& template_feat);

Tensor sum(const Tensor& x);                        // -> rank-0
Tensor mean(const Tensor& x);                       // -> rank-0
Tensor reshape(const Tensor& x, Shape new_shape);   // size-preserving copy
Tensor flatten_row(const Tensor& x);                // -> [1, numel]
Tensor concat_cols(const Tensor& a, const Tensor& b);            // [N,A],[N,B] -> [N,A+B]
Tensor stack_batch(const std::vector<Tensor>& items);            // k x [C,H,W] -> [k,C,H,W]
Tensor slice_batch(const Tensor& x, int index);                  // [N,C,H,W] -> [C,H,W]
Tensor mean_of(const std::vector<Tensor>& scalars);              // fixed-order mean -> rank-0

// Populates grad for every requires-grad tensor reachable from loss.
// loss must hold exactly one element. Accumulation order is fixed by node id.
void backward(const Tensor& loss);

}  // namespace rcn
