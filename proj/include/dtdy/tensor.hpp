#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "dtdy/rng.hpp"

namespace dtdy {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    bool leaf = true;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copying a Tensor copies the handle,
/// not the buffer; ops always allocate fresh outputs.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }

    /// Gradient buffer; allocates (zeroed) on first access.
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->value.size(), 0.0);
    }

    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    /// Same data, detached from any graph (no grad tracking).
    Tensor detached() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

  private:
    std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode tape. Constructing a Tape makes it the active recorder for
/// the current thread (stack discipline); ops record themselves while any
/// input requires gradients. One tape per thread of execution.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Accumulates d(loss)/d(leaf) into every reachable grad-enabled leaf.
    /// Intermediate adjoints are reset per call, so repeated calls add up.
    void backward(const Tensor& loss);

    std::size_t size() const { return steps_.size(); }

    static Tape* active();

    struct Step {
        std::shared_ptr<detail::Node> out;
        std::function<void()> back;
    };
    void record(std::shared_ptr<detail::Node> out, std::function<void()> back);

  private:
    std::vector<Step> steps_;
    Tape* prev_ = nullptr;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// b's dims must equal a's or be 1 (b broadcasts into a).
Tensor add_bcast(const Tensor& a, const Tensor& b);
Tensor mul_bcast(const Tensor& a, const Tensor& b);
Tensor div_bcast(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // rejects non-positive inputs
Tensor sqrt(const Tensor& a);  // rejects negative inputs
Tensor clamp_min(const Tensor& a, double floor);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);
Tensor index_select(const Tensor& a, int axis, const std::vector<std::int64_t>& idx);

// ---- reductions ----
Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes);
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes);
Tensor softmax(const Tensor& a, int axis);
/// sqrt(sum of squares) over one axis (axis removed).
Tensor l2_norm(const Tensor& a, int axis);

// ---- linear algebra ----
/// a: [..., m, n], b: [..., n, p] -> [..., m, p]. Batch dims must match,
/// or one argument may be rank-2 and is shared across the other's batch.
Tensor matmul_batched(const Tensor& a, const Tensor& b);
/// x: [..., n], weight: [m, n], bias: [m] -> [..., m];  y = x W^T + b.
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv2dGeom {
    std::int64_t stride_f = 1, stride_t = 1;
    std::int64_t pad_f = 0, pad_t = 0;
};
/// x: [B, C_in, F, T], kernel: [C_out, C_in, kf, kt]; cross-correlation,
/// zero padding.  F' = (F + 2*pad_f - kf) / stride_f + 1, same for T.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Conv2dGeom& g);

/// x: [B, C, F, T]. Train mode normalizes per channel over (B, F, T) with
/// eps = 1e-5 and updates running stats in place (momentum 0.1, population
/// variance); eval mode uses the running stats.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

// ---- init ----
Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);
Tensor rand_gaussian(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng, bool requires_grad = true);

// ---- verification ----
/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for d f() / d wrt[i].  f must be scalar-valued and finite near the point.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                  double h = 1e-5);

}  // namespace dtdy
