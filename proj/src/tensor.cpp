#include "wavenerf/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "wavenerf/errors.hpp"

namespace wavenerf {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

double* TensorImpl::grad_data() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->values.assign(static_cast<size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    if (values.empty()) {
        impl->values.assign(static_cast<size_t>(n), 0.0);
    } else {
        if (static_cast<int64_t>(values.size()) != n) {
            throw DimensionError("data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        impl->values = std::move(values);
    }
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("expected scalar tensor, got shape " + shape_str(shape()));
    }
    return impl_->values[0];
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->values = impl_->values;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

ComputeGraph ComputeGraph::build(const Tensor& root) {
    ComputeGraph g;
    std::unordered_set<TensorImpl*> visited;
    // Iterative post-order DFS: parents land before children.
    struct Frame {
        TensorImpl* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    TensorImpl* r = root.impl_raw();
    if (r == nullptr) return g;
    stack.push_back({r, 0});
    visited.insert(r);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            g.order.push_back(f.node);
            stack.pop_back();
        }
    }
    return g;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    ComputeGraph graph = ComputeGraph::build(loss);
    TensorImpl* root = loss.impl_raw();
    root->grad_data()[0] += 1.0;
    for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->backprop) continue;
        node->grad_data();  // children may have skipped zero contributions
        node->backprop();
    }
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_op(const char* name, Shape out_shape, const std::vector<Tensor>& inputs,
               const std::function<void(TensorImpl&)>& fill,
               std::function<void(TensorImpl*)> backprop) {
    auto impl = std::make_shared<TensorImpl>();
    impl->values.assign(static_cast<size_t>(shape_numel(out_shape)), 0.0);
    impl->shape = std::move(out_shape);
    impl->op = name;
    fill(*impl);
    bool needs_grad = false;
    if (g_grad_enabled) {
        for (const Tensor& in : inputs) {
            if (in.requires_grad()) needs_grad = true;
        }
    }
    if (needs_grad) {
        impl->requires_grad = true;
        for (const Tensor& in : inputs) {
            if (in.requires_grad()) impl->parents.push_back(in.impl());
        }
        // The closure owns the input handles it captured; binding the raw
        // output pointer here avoids a shared_ptr cycle through the node.
        TensorImpl* self = impl.get();
        impl->backprop = [self, fn = std::move(backprop)]() { fn(self); };
    }
    return Tensor(std::move(impl));
}

}  // namespace wavenerf
