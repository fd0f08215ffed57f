#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace wavenerf {

// Extents of a dense row-major array.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

// Node of the define-by-run graph. A tensor produced by an operation keeps
// shared ownership of its differentiable inputs plus a closure that routes
// its gradient to them; leaves have neither. Values are written once by the
// producing operation and treated as immutable afterwards.
struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    std::vector<TensorImplPtr> parents;  // differentiable inputs only
    std::function<void()> backprop;      // accumulates this->grad into parents
    const char* op = "";

    int64_t numel() const { return static_cast<int64_t>(values.size()); }

    // Allocates and zeroes the gradient buffer on first use.
    double* grad_data();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
    int64_t numel() const { return impl_->numel(); }

    std::span<double> data() { return impl_->values; }
    std::span<const double> data() const { return impl_->values; }
    double* raw() { return impl_->values.data(); }
    const double* raw() const { return impl_->values.data(); }

    // Scalar read; throws ContractError unless numel() == 1.
    double value() const;
    double operator[](int64_t i) const { return impl_->values[static_cast<size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> grad_mut() { return impl_->grad; }
    void zero_grad();

    // Value copy detached from the graph.
    Tensor detach() const;

    const TensorImplPtr& impl() const { return impl_; }
    TensorImpl* impl_raw() const { return impl_.get(); }

private:
    TensorImplPtr impl_;
};

// Topologically ordered record of the operations reachable from a root;
// parents precede children. Rebuilt per backward pass.
struct ComputeGraph {
    std::vector<TensorImpl*> order;
    static ComputeGraph build(const Tensor& root);
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// grad-enabled tensor reachable from the loss; leaf gradients are not
// zeroed first, so successive calls add up until zero_grad.
void backward(const Tensor& loss);

// Constructs an operation output: allocates the value buffer, runs fill,
// and if any input requires grad wires the backprop closure. The closure
// must read out->grad and accumulate into the inputs' grad buffers.
Tensor make_op(const char* name, Shape out_shape, const std::vector<Tensor>& inputs,
               const std::function<void(TensorImpl&)>& fill,
               std::function<void(TensorImpl*)> backprop);

// While alive on a thread, operations do not record the graph; forward
// values are unchanged. Used for evaluation renders.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

}  // namespace wavenerf
