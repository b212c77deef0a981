#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mapex {

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

// Node in the dynamic compute graph. Values are 64-bit floats in row-major
// order; the graph is rebuilt on every forward pass and discarded after
// backward.
struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    std::vector<TensorImplPtr> parents;
    std::function<void(TensorImpl&)> backward_fn;  // reads this->grad, accumulates into parents

    std::size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int size() const { return static_cast<int>(impl_->value.size()); }
    int rows() const;
    int cols() const;

    std::vector<double>& value() { return impl_->value; }
    const std::vector<double>& value() const { return impl_->value; }
    std::vector<double>& grad();
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
    void zero_grad() { impl_->grad.assign(impl_->value.size(), 0.0); }
    double item() const;

    TensorImplPtr impl() const { return impl_; }

private:
    TensorImplPtr impl_;
};

// ---- ops ----------------------------------------------------------------
// b may be a row vector broadcast over the rows of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// multiply / divide every element by a scalar tensor (gradient flows to both)
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor div_by(const Tensor& a, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor gather_cols(const Tensor& a, const std::vector<int>& idx);

Tensor softmax(const Tensor& a, int axis);
Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// mean of (pred - target)^2 over elements where mask == 1; target and mask
// are treated as constants
Tensor mse_masked(const Tensor& pred, const Tensor& target, const Tensor& mask);
// mean over rows of -log softmax(logits)[label]
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Reverse-mode sweep from a scalar loss. Visits each node once in reverse
// topological order; grads accumulate (caller zeroes between steps).
void backward(const Tensor& loss);

}  // namespace mapex
