#include "dtdy/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dtdy/errors.hpp"

namespace dtdy {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

thread_local Tape* g_tape = nullptr;

struct PauseTape {
    Tape* saved;
    PauseTape() : saved(g_tape) { g_tape = nullptr; }
    ~PauseTape() { g_tape = saved; }
};

void check_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

bool tracking(std::initializer_list<const Tensor*> ins) {
    if (!g_tape) return false;
    for (const Tensor* t : ins) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

Tensor make_out(Shape shape, std::vector<double> vals, bool tracked) {
    Tensor out(std::move(shape), std::move(vals));
    if (tracked) {
        out.node()->requires_grad = true;
        out.node()->leaf = false;
    }
    return out;
}

void push(const Tensor& out, std::function<void()> back) { g_tape->record(out.node(), std::move(back)); }

// Row-major strides with 0 on axes where `shape` has extent 1 (broadcast).
std::vector<std::int64_t> bcast_strides(const Shape& full, const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size());
    std::int64_t s = 1;
    for (std::int64_t d = static_cast<std::int64_t>(shape.size()) - 1; d >= 0; --d) {
        strides[static_cast<std::size_t>(d)] = (shape[static_cast<std::size_t>(d)] == 1) ? 0 : s;
        s *= shape[static_cast<std::size_t>(d)];
    }
    (void)full;
    return strides;
}

void check_bcast(const char* op, const Shape& a, const Shape& b) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(op) + ": ranks differ, " + shape_str(a) + " vs " + shape_str(b));
    for (std::size_t d = 0; d < a.size(); ++d) {
        if (b[d] != a[d] && b[d] != 1)
            throw std::invalid_argument(std::string(op) + ": shape " + shape_str(b) +
                                        " does not broadcast into " + shape_str(a));
    }
}

// Walks every flat index of `full` together with the broadcast flat index of b.
template <typename Fn>
void for_each_bcast(const Shape& full, const Shape& bshape, Fn&& fn) {
    const auto n = shape_numel(full);
    const auto rank = full.size();
    const auto bs = bcast_strides(full, bshape);
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t bi = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        fn(i, bi);
        for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ++idx[ud];
            bi += bs[ud];
            if (idx[ud] < full[ud]) break;
            bi -= bs[ud] * full[ud];
            idx[ud] = 0;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    check_shape(shape);
    node_ = std::make_shared<detail::Node>();
    node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor(Shape{1}, std::vector<double>{v}, requires_grad); }

double Tensor::item() const {
    if (!defined() || numel() != 1) throw std::invalid_argument("item(): tensor is not a scalar");
    return node_->value[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != rank()) throw std::invalid_argument("at(): wrong index rank");
    std::int64_t flat = 0, d = 0;
    for (auto i : idx) {
        if (i < 0 || i >= dim(d)) throw std::invalid_argument("at(): index out of range");
        flat = flat * dim(d) + i;
        ++d;
    }
    return node_->value[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detached() const { return Tensor(node_->shape, node_->value, false); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : prev_(g_tape) { g_tape = this; }

Tape::~Tape() { g_tape = prev_; }

Tape* Tape::active() { return g_tape; }

void Tape::record(std::shared_ptr<detail::Node> out, std::function<void()> back) {
    steps_.push_back(Step{std::move(out), std::move(back)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a defined scalar tensor");
    // Fresh adjoints for everything produced on this tape; leaf gradients are
    // left alone so repeated calls accumulate.
    for (auto& s : steps_) {
        s.out->ensure_grad();
        std::fill(s.out->grad.begin(), s.out->grad.end(), 0.0);
    }
    if (loss.node()->requires_grad) {
        loss.node()->ensure_grad();
        loss.node()->grad[0] += 1.0;
    }
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->back();
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = pa[i] + pb[i];
    bool tr = tracking({&a, &b});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), bn = b.node(), on = out.node();
        push(out, [an, bn, on, n] {
            const double* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[static_cast<std::size_t>(i)] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[static_cast<std::size_t>(i)] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = pa[i] - pb[i];
    bool tr = tracking({&a, &b});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), bn = b.node(), on = out.node();
        push(out, [an, bn, on, n] {
            const double* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[static_cast<std::size_t>(i)] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[static_cast<std::size_t>(i)] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = pa[i] * pb[i];
    bool tr = tracking({&a, &b});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), bn = b.node(), on = out.node();
        push(out, [an, bn, on, n] {
            const double* g = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    an->grad[static_cast<std::size_t>(i)] += g[i] * bn->value[static_cast<std::size_t>(i)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    bn->grad[static_cast<std::size_t>(i)] += g[i] * an->value[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

namespace {

enum class BcastKind { add, mul, div };

Tensor bcast_op(const char* name, BcastKind kind, const Tensor& a, const Tensor& b) {
    check_bcast(name, a.shape(), b.shape());
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for_each_bcast(a.shape(), b.shape(), [&](std::int64_t i, std::int64_t bi) {
        switch (kind) {
            case BcastKind::add: v[static_cast<std::size_t>(i)] = pa[i] + pb[bi]; break;
            case BcastKind::mul: v[static_cast<std::size_t>(i)] = pa[i] * pb[bi]; break;
            case BcastKind::div:
                if (pb[bi] == 0.0) throw numeric_error(std::string(name) + ": division by zero");
                v[static_cast<std::size_t>(i)] = pa[i] / pb[bi];
                break;
        }
    });
    bool tr = tracking({&a, &b});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), bn = b.node(), on = out.node();
        Shape ash = a.shape(), bsh = b.shape();
        push(out, [an, bn, on, ash, bsh, kind] {
            const double* g = on->grad.data();
            const double* pa = an->value.data();
            const double* pb = bn->value.data();
            const bool wa = an->requires_grad, wb = bn->requires_grad;
            if (wa) an->ensure_grad();
            if (wb) bn->ensure_grad();
            for_each_bcast(ash, bsh, [&](std::int64_t i, std::int64_t bi) {
                switch (kind) {
                    case BcastKind::add:
                        if (wa) an->grad[static_cast<std::size_t>(i)] += g[i];
                        if (wb) bn->grad[static_cast<std::size_t>(bi)] += g[i];
                        break;
                    case BcastKind::mul:
                        if (wa) an->grad[static_cast<std::size_t>(i)] += g[i] * pb[bi];
                        if (wb) bn->grad[static_cast<std::size_t>(bi)] += g[i] * pa[i];
                        break;
                    case BcastKind::div:
                        if (wa) an->grad[static_cast<std::size_t>(i)] += g[i] / pb[bi];
                        if (wb) bn->grad[static_cast<std::size_t>(bi)] -= g[i] * pa[i] / (pb[bi] * pb[bi]);
                        break;
                }
            });
        });
    }
    return out;
}

}  // namespace

Tensor add_bcast(const Tensor& a, const Tensor& b) { return bcast_op("add_bcast", BcastKind::add, a, b); }
Tensor mul_bcast(const Tensor& a, const Tensor& b) { return bcast_op("mul_bcast", BcastKind::mul, a, b); }
Tensor div_bcast(const Tensor& a, const Tensor& b) { return bcast_op("div_bcast", BcastKind::div, a, b); }

Tensor scale(const Tensor& a, double s) {
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i)] * s;
    bool tr = tracking({&a});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        push(out, [an, on, s, n] {
            an->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                an->grad[static_cast<std::size_t>(i)] += on->grad[static_cast<std::size_t>(i)] * s;
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i)] + s;
    bool tr = tracking({&a});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        push(out, [an, on, n] {
            an->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                an->grad[static_cast<std::size_t>(i)] += on->grad[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

namespace {

// Unary op whose derivative is expressible from input and output values.
Tensor unary_op(const Tensor& a, double (*fwd)(double), double (*dfdx)(double x, double y)) {
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = fwd(a.data()[static_cast<std::size_t>(i)]);
    bool tr = tracking({&a});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        push(out, [an, on, dfdx, n] {
            an->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                auto u = static_cast<std::size_t>(i);
                an->grad[u] += on->grad[u] * dfdx(an->value[u], on->value[u]);
            }
        });
    }
    return out;
}

}  // namespace

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double x : a.data())
        if (!(x > 0.0)) throw numeric_error("log: input must be strictly positive, got " + std::to_string(x));
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (double x : a.data())
        if (x < 0.0) throw numeric_error("sqrt: input must be non-negative, got " + std::to_string(x));
    return unary_op(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor clamp_min(const Tensor& a, double floor) {
    const auto n = a.numel();
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double x = a.data()[static_cast<std::size_t>(i)];
        v[static_cast<std::size_t>(i)] = x > floor ? x : floor;
    }
    bool tr = tracking({&a});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        push(out, [an, on, floor, n] {
            an->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                auto u = static_cast<std::size_t>(i);
                if (an->value[u] > floor) an->grad[u] += on->grad[u];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    bool tr = tracking({&a});
    Tensor out = make_out(std::move(shape), a.data(), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        const auto n = a.numel();
        push(out, [an, on, n] {
            an->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                an->grad[static_cast<std::size_t>(i)] += on->grad[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

namespace {

// out flat index -> in flat index for a permutation, iterated in out order.
template <typename Fn>
void for_each_permuted(const Shape& out_shape, const Shape& in_shape, const std::vector<int>& perm, Fn&& fn) {
    const auto rank = out_shape.size();
    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::int64_t d = static_cast<std::int64_t>(rank) - 2; d >= 0; --d)
        in_strides[static_cast<std::size_t>(d)] =
            in_strides[static_cast<std::size_t>(d + 1)] * in_shape[static_cast<std::size_t>(d + 1)];
    std::vector<std::int64_t> step(rank);
    for (std::size_t d = 0; d < rank; ++d) step[d] = in_strides[static_cast<std::size_t>(perm[d])];
    const auto n = shape_numel(out_shape);
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        fn(i, src);
        for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ++idx[ud];
            src += step[ud];
            if (idx[ud] < out_shape[ud]) break;
            src -= step[ud] * out_shape[ud];
            idx[ud] = 0;
        }
    }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const auto rank = a.rank();
    if (static_cast<std::int64_t>(perm.size()) != rank) throw std::invalid_argument("permute: wrong rank");
    std::vector<bool> seen(static_cast<std::size_t>(rank), false);
    Shape out_shape(static_cast<std::size_t>(rank));
    for (std::size_t d = 0; d < perm.size(); ++d) {
        if (perm[d] < 0 || perm[d] >= rank || seen[static_cast<std::size_t>(perm[d])])
            throw std::invalid_argument("permute: invalid permutation");
        seen[static_cast<std::size_t>(perm[d])] = true;
        out_shape[d] = a.dim(perm[d]);
    }
    std::vector<double> v(static_cast<std::size_t>(a.numel()));
    const double* pa = a.data().data();
    for_each_permuted(out_shape, a.shape(), perm,
                      [&](std::int64_t o, std::int64_t s) { v[static_cast<std::size_t>(o)] = pa[s]; });
    bool tr = tracking({&a});
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        Shape osh = out_shape, ish = a.shape();
        auto p = perm;
        push(out, [an, on, osh, ish, p] {
            an->ensure_grad();
            const double* g = on->grad.data();
            for_each_permuted(osh, ish, p,
                              [&](std::int64_t o, std::int64_t s) { an->grad[static_cast<std::size_t>(s)] += g[o]; });
        });
    }
    return out;
}

namespace {

std::int64_t outer_size(const Shape& s, int axis) {
    std::int64_t n = 1;
    for (int d = 0; d < axis; ++d) n *= s[static_cast<std::size_t>(d)];
    return n;
}

std::int64_t inner_size(const Shape& s, int axis) {
    std::int64_t n = 1;
    for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < s.size(); ++d) n *= s[d];
    return n;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const auto rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d != axis && p.dim(d) != out_shape[static_cast<std::size_t>(d)])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                            shape_str(parts[0].shape()));
        }
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total_axis;
    const auto outer = outer_size(out_shape, axis);
    const auto inner = inner_size(out_shape, axis);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t axis_off = 0;
    for (const auto& p : parts) {
        const auto pa = p.dim(axis);
        const double* src = p.data().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            double* dst = v.data() + (o * total_axis + axis_off) * inner;
            std::copy(src + o * pa * inner, src + (o + 1) * pa * inner, dst);
        }
        axis_off += pa;
    }
    std::vector<const Tensor*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    bool tr = g_tape != nullptr && std::any_of(ptrs.begin(), ptrs.end(), [](const Tensor* t) { return t->requires_grad(); });
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        std::vector<std::shared_ptr<detail::Node>> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        auto on = out.node();
        push(out, [ins, on, outer, inner, total_axis, axis] {
            const double* g = on->grad.data();
            std::int64_t axis_off = 0;
            for (const auto& an : ins) {
                const auto pa = an->shape[static_cast<std::size_t>(axis)];
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = g + (o * total_axis + axis_off) * inner;
                        double* dst = an->grad.data() + o * pa * inner;
                        for (std::int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                axis_off += pa;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                    ") out of bounds for axis size " + std::to_string(a.dim(axis)));
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    const auto outer = outer_size(a.shape(), axis);
    const auto inner = inner_size(a.shape(), axis);
    const auto da = a.dim(axis);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(out_shape)));
    const double* src = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(src + (o * da + start) * inner, src + (o * da + start + len) * inner, v.data() + o * len * inner);
    bool tr = tracking({&a});
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        push(out, [an, on, outer, inner, da, start, len] {
            an->ensure_grad();
            const double* g = on->grad.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                double* dst = an->grad.data() + (o * da + start) * inner;
                const double* s = g + o * len * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += s[i];
            }
        });
    }
    return out;
}

Tensor index_select(const Tensor& a, int axis, const std::vector<std::int64_t>& idx) {
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("index_select: axis out of range");
    if (idx.empty()) throw std::invalid_argument("index_select: empty index list");
    for (auto i : idx)
        if (i < 0 || i >= a.dim(axis)) throw std::invalid_argument("index_select: index out of range");
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = static_cast<std::int64_t>(idx.size());
    const auto outer = outer_size(a.shape(), axis);
    const auto inner = inner_size(a.shape(), axis);
    const auto da = a.dim(axis);
    const auto k = static_cast<std::int64_t>(idx.size());
    std::vector<double> v(static_cast<std::size_t>(shape_numel(out_shape)));
    const double* src = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < k; ++j)
            std::copy(src + (o * da + idx[static_cast<std::size_t>(j)]) * inner,
                      src + (o * da + idx[static_cast<std::size_t>(j)] + 1) * inner,
                      v.data() + (o * k + j) * inner);
    bool tr = tracking({&a});
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        auto ix = idx;
        push(out, [an, on, outer, inner, da, k, ix] {
            an->ensure_grad();
            const double* g = on->grad.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t j = 0; j < k; ++j) {
                    double* dst = an->grad.data() + (o * da + ix[static_cast<std::size_t>(j)]) * inner;
                    const double* s = g + (o * k + j) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) dst[i] += s[i];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

void check_axes(const Tensor& a, const std::vector<int>& axes) {
    std::vector<bool> seen(static_cast<std::size_t>(a.rank()), false);
    if (axes.empty()) throw std::invalid_argument("reduce: no axes given");
    for (int ax : axes) {
        if (ax < 0 || ax >= a.rank()) throw std::invalid_argument("reduce: axis out of range");
        if (seen[static_cast<std::size_t>(ax)]) throw std::invalid_argument("reduce: repeated axis");
        seen[static_cast<std::size_t>(ax)] = true;
    }
}

// Maps each input flat index to the output flat index with `axes` removed.
template <typename Fn>
void for_each_reduced(const Shape& in_shape, const std::vector<int>& axes, Fn&& fn) {
    const auto rank = in_shape.size();
    std::vector<bool> reduced(rank, false);
    for (int ax : axes) reduced[static_cast<std::size_t>(ax)] = true;
    std::vector<std::int64_t> ostep(rank, 0);
    std::int64_t s = 1;
    for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
        auto ud = static_cast<std::size_t>(d);
        if (!reduced[ud]) {
            ostep[ud] = s;
            s *= in_shape[ud];
        }
    }
    const auto n = shape_numel(in_shape);
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t oi = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        fn(i, oi);
        for (std::int64_t d = static_cast<std::int64_t>(rank) - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ++idx[ud];
            oi += ostep[ud];
            if (idx[ud] < in_shape[ud]) break;
            oi -= ostep[ud] * in_shape[ud];
            idx[ud] = 0;
        }
    }
}

Shape reduced_shape(const Shape& in, const std::vector<int>& axes) {
    std::vector<bool> cut(in.size(), false);
    for (int ax : axes) cut[static_cast<std::size_t>(ax)] = true;
    Shape out;
    for (std::size_t d = 0; d < in.size(); ++d)
        if (!cut[d]) out.push_back(in[d]);
    if (out.empty()) out.push_back(1);  // scalar carrier
    return out;
}

Tensor reduce_impl(const Tensor& a, const std::vector<int>& axes, bool mean) {
    check_axes(a, axes);
    Shape out_shape = reduced_shape(a.shape(), axes);
    std::int64_t cnt = 1;
    for (int ax : axes) cnt *= a.dim(ax);
    std::vector<double> v(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
    const double* pa = a.data().data();
    for_each_reduced(a.shape(), axes, [&](std::int64_t i, std::int64_t oi) { v[static_cast<std::size_t>(oi)] += pa[i]; });
    if (mean)
        for (auto& x : v) x /= static_cast<double>(cnt);
    bool tr = tracking({&a});
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        Shape ish = a.shape();
        auto ax = axes;
        const double w = mean ? 1.0 / static_cast<double>(cnt) : 1.0;
        push(out, [an, on, ish, ax, w] {
            an->ensure_grad();
            const double* g = on->grad.data();
            for_each_reduced(ish, ax,
                             [&](std::int64_t i, std::int64_t oi) { an->grad[static_cast<std::size_t>(i)] += g[oi] * w; });
        });
    }
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes) { return reduce_impl(a, axes, false); }
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes) { return reduce_impl(a, axes, true); }

Tensor softmax(const Tensor& a, int axis) {
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range");
    const auto outer = outer_size(a.shape(), axis);
    const auto inner = inner_size(a.shape(), axis);
    const auto n = a.dim(axis);
    std::vector<double> v(static_cast<std::size_t>(a.numel()));
    const double* pa = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double m = pa[base];
            for (std::int64_t j = 1; j < n; ++j) m = std::max(m, pa[base + j * inner]);
            double sum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                double e = std::exp(pa[base + j * inner] - m);
                v[static_cast<std::size_t>(base + j * inner)] = e;
                sum += e;
            }
            for (std::int64_t j = 0; j < n; ++j) v[static_cast<std::size_t>(base + j * inner)] /= sum;
        }
    bool tr = tracking({&a});
    Tensor out = make_out(a.shape(), std::move(v), tr);
    if (tr) {
        auto an = a.node(), on = out.node();
        push(out, [an, on, outer, inner, n] {
            an->ensure_grad();
            const double* g = on->grad.data();
            const double* y = on->value.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::int64_t j = 0; j < n; ++j) {
                        auto k = static_cast<std::size_t>(base + j * inner);
                        an->grad[k] += y[k] * (g[k] - dot);
                    }
                }
        });
    }
    return out;
}

Tensor l2_norm(const Tensor& a, int axis) { return sqrt(reduce_sum(mul(a, a), {axis})); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul_batched(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) throw std::invalid_argument("matmul_batched: inputs must have rank >= 2");
    const auto m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
    const auto n2 = b.dim(b.rank() - 2), p = b.dim(b.rank() - 1);
    if (n != n2)
        throw std::invalid_argument("matmul_batched: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    if (abatch == bbatch) {
        batch = abatch;
    } else if (abatch.empty()) {
        batch = bbatch;
    } else if (bbatch.empty()) {
        batch = abatch;
    } else {
        throw std::invalid_argument("matmul_batched: batch dimensions disagree, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    const std::int64_t nb = shape_numel(batch);
    const bool a_shared = abatch.empty() && !batch.empty();
    const bool b_shared = bbatch.empty() && !batch.empty();
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(p);
    std::vector<double> v(static_cast<std::size_t>(nb * m * p));
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::int64_t i = 0; i < nb; ++i) {
            ECMap A(pa + (a_shared ? 0 : i * m * n), m, n);
            ECMap B(pb + (b_shared ? 0 : i * n * p), n, p);
            EMap C(v.data() + i * m * p, m, p);
            C.noalias() = A * B;
        }
    }
    bool tr = tracking({&a, &b});
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        auto an = a.node(), bn = b.node(), on = out.node();
        push(out, [an, bn, on, nb, m, n, p, a_shared, b_shared] {
            const double* g = on->grad.data();
            const double* pa = an->value.data();
            const double* pb = bn->value.data();
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::int64_t i = 0; i < nb; ++i) {
                ECMap G(g + i * m * p, m, p);
                if (an->requires_grad) {
                    ECMap B(pb + (b_shared ? 0 : i * n * p), n, p);
                    EMap dA(an->grad.data() + (a_shared ? 0 : i * m * n), m, n);
                    dA.noalias() += G * B.transpose();
                }
                if (bn->requires_grad) {
                    ECMap A(pa + (a_shared ? 0 : i * m * n), m, n);
                    EMap dB(bn->grad.data() + (b_shared ? 0 : i * n * p), n, p);
                    dB.noalias() += A.transpose() * G;
                }
            }
        });
    }
    return out;
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw std::invalid_argument("affine: weight must be rank 2");
    const auto m = weight.dim(0), n = weight.dim(1);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != n)
        throw std::invalid_argument("affine: trailing dimension of x " + shape_str(x.shape()) +
                                    " does not match weight " + shape_str(weight.shape()));
    if (bias.rank() != 1 || bias.dim(0) != m)
        throw std::invalid_argument("affine: bias shape " + shape_str(bias.shape()) + " does not match weight rows " +
                                    std::to_string(m));
    const std::int64_t rows = x.numel() / n;
    Shape out_shape = x.shape();
    out_shape.back() = m;
    std::vector<double> v(static_cast<std::size_t>(rows * m));
    {
        // row-at-a-time so each row's result is bit-independent of the batch
        ECMap W(weight.data().data(), m, n);
        const double* pb = bias.data().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            Eigen::Map<const Eigen::RowVectorXd> xr(x.data().data() + r * n, n);
            Eigen::Map<Eigen::RowVectorXd> yr(v.data() + r * m, m);
            yr.noalias() = xr * W.transpose();
            for (std::int64_t c = 0; c < m; ++c) v[static_cast<std::size_t>(r * m + c)] += pb[c];
        }
    }
    bool tr = tracking({&x, &weight, &bias});
    Tensor out = make_out(out_shape, std::move(v), tr);
    if (tr) {
        auto xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
        push(out, [xn, wn, bn, on, rows, m, n] {
            ECMap G(on->grad.data(), rows, m);
            if (xn->requires_grad) {
                xn->ensure_grad();
                ECMap W(wn->value.data(), m, n);
                EMap dX(xn->grad.data(), rows, n);
                dX.noalias() += G * W;
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                ECMap X(xn->value.data(), rows, n);
                EMap dW(wn->grad.data(), m, n);
                dW.noalias() += G.transpose() * X;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < m; ++c)
                        bn->grad[static_cast<std::size_t>(c)] += on->grad[static_cast<std::size_t>(r * m + c)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t B, C, F, T, O, kf, kt, Fo, To;
};

void im2col(const double* x, const ConvDims& d, const Conv2dGeom& g, std::int64_t b, double* col) {
    // col: [C*kf*kt, Fo*To]
    const std::int64_t plane = d.F * d.T;
    const std::int64_t out_plane = d.Fo * d.To;
    for (std::int64_t c = 0; c < d.C; ++c) {
        const double* xc = x + (b * d.C + c) * plane;
        for (std::int64_t i = 0; i < d.kf; ++i)
            for (std::int64_t j = 0; j < d.kt; ++j) {
                double* row = col + ((c * d.kf + i) * d.kt + j) * out_plane;
                for (std::int64_t fo = 0; fo < d.Fo; ++fo) {
                    const std::int64_t f = fo * g.stride_f - g.pad_f + i;
                    double* dst = row + fo * d.To;
                    if (f < 0 || f >= d.F) {
                        std::fill(dst, dst + d.To, 0.0);
                        continue;
                    }
                    const double* src = xc + f * d.T;
                    for (std::int64_t to = 0; to < d.To; ++to) {
                        const std::int64_t t = to * g.stride_t - g.pad_t + j;
                        dst[to] = (t >= 0 && t < d.T) ? src[t] : 0.0;
                    }
                }
            }
    }
}

void col2im_add(const double* col, const ConvDims& d, const Conv2dGeom& g, std::int64_t b, double* dx) {
    const std::int64_t plane = d.F * d.T;
    const std::int64_t out_plane = d.Fo * d.To;
    for (std::int64_t c = 0; c < d.C; ++c) {
        double* xc = dx + (b * d.C + c) * plane;
        for (std::int64_t i = 0; i < d.kf; ++i)
            for (std::int64_t j = 0; j < d.kt; ++j) {
                const double* row = col + ((c * d.kf + i) * d.kt + j) * out_plane;
                for (std::int64_t fo = 0; fo < d.Fo; ++fo) {
                    const std::int64_t f = fo * g.stride_f - g.pad_f + i;
                    if (f < 0 || f >= d.F) continue;
                    double* dst = xc + f * d.T;
                    const double* src = row + fo * d.To;
                    for (std::int64_t to = 0; to < d.To; ++to) {
                        const std::int64_t t = to * g.stride_t - g.pad_t + j;
                        if (t >= 0 && t < d.T) dst[t] += src[to];
                    }
                }
            }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Conv2dGeom& g) {
    if (x.rank() != 4) throw std::invalid_argument("conv2d: input must be [B,C,F,T], got " + shape_str(x.shape()));
    if (kernel.rank() != 4)
        throw std::invalid_argument("conv2d: kernel must be [C_out,C_in,kf,kt], got " + shape_str(kernel.shape()));
    ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3), 0, 0};
    if (kernel.dim(1) != d.C)
        throw std::invalid_argument("conv2d: input has " + std::to_string(d.C) + " channels but kernel expects " +
                                    std::to_string(kernel.dim(1)) + " input channels");
    if (g.stride_f < 1 || g.stride_t < 1) throw std::invalid_argument("conv2d: stride components must be >= 1");
    if (g.pad_f < 0 || g.pad_t < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if (d.kf > d.F + 2 * g.pad_f || d.kt > d.T + 2 * g.pad_t)
        throw std::invalid_argument("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                                    shape_str(x.shape()));
    d.Fo = (d.F + 2 * g.pad_f - d.kf) / g.stride_f + 1;
    d.To = (d.T + 2 * g.pad_t - d.kt) / g.stride_t + 1;

    const std::int64_t ck = d.C * d.kf * d.kt;
    const std::int64_t out_plane = d.Fo * d.To;
    std::vector<double> v(static_cast<std::size_t>(d.B * d.O * out_plane));
    {
        std::vector<double> col(static_cast<std::size_t>(ck * out_plane));
        ECMap K(kernel.data().data(), d.O, ck);
        for (std::int64_t b = 0; b < d.B; ++b) {
            im2col(x.data().data(), d, g, b, col.data());
            ECMap C(col.data(), ck, out_plane);
            EMap Y(v.data() + b * d.O * out_plane, d.O, out_plane);
            Y.noalias() = K * C;
        }
    }
    bool tr = tracking({&x, &kernel});
    Tensor out = make_out(Shape{d.B, d.O, d.Fo, d.To}, std::move(v), tr);
    if (tr) {
        auto xn = x.node(), kn = kernel.node(), on = out.node();
        Conv2dGeom gg = g;
        push(out, [xn, kn, on, d, gg, ck, out_plane] {
            std::vector<double> col(static_cast<std::size_t>(ck * out_plane));
            if (xn->requires_grad) xn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            for (std::int64_t b = 0; b < d.B; ++b) {
                ECMap G(on->grad.data() + b * d.O * out_plane, d.O, out_plane);
                if (kn->requires_grad) {
                    im2col(xn->value.data(), d, gg, b, col.data());
                    ECMap C(col.data(), ck, out_plane);
                    EMap dK(kn->grad.data(), d.O, ck);
                    dK.noalias() += G * C.transpose();
                }
                if (xn->requires_grad) {
                    ECMap K(kn->value.data(), d.O, ck);
                    EMap dC(col.data(), ck, out_plane);
                    dC.noalias() = K.transpose() * G;
                    col2im_add(col.data(), d, gg, b, xn->grad.data());
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch_norm2d
// ---------------------------------------------------------------------------

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum, double eps) {
    if (x.rank() != 4) throw std::invalid_argument("batch_norm2d: input must be [B,C,F,T]");
    const auto B = x.dim(0), C = x.dim(1), F = x.dim(2), T = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        throw std::invalid_argument("batch_norm2d: per-channel parameter size mismatch");
    const std::int64_t N = B * F * T;
    if (training && N < 2) throw std::invalid_argument("batch_norm2d: need at least 2 elements per channel in train mode");

    std::vector<double> mu(static_cast<std::size_t>(C), 0.0), sd(static_cast<std::size_t>(C), 0.0);
    const double* px = x.data().data();
    const std::int64_t plane = F * T;
    if (training) {
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* p = px + (b * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(N);
            double vs = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* p = px + (b * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) vs += (p[i] - m) * (p[i] - m);
            }
            const double var = vs / static_cast<double>(N);
            mu[static_cast<std::size_t>(c)] = m;
            sd[static_cast<std::size_t>(c)] = std::sqrt(var + eps);
            running_mean.data()[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_mean.data()[static_cast<std::size_t>(c)] + momentum * m;
            running_var.data()[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_var.data()[static_cast<std::size_t>(c)] + momentum * var;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mu[static_cast<std::size_t>(c)] = running_mean.data()[static_cast<std::size_t>(c)];
            sd[static_cast<std::size_t>(c)] = std::sqrt(running_var.data()[static_cast<std::size_t>(c)] + eps);
        }
    }

    std::vector<double> v(static_cast<std::size_t>(x.numel()));
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = px + (b * C + c) * plane;
            double* q = v.data() + (b * C + c) * plane;
            const double m = mu[static_cast<std::size_t>(c)], s = sd[static_cast<std::size_t>(c)];
            const double gc = pg[c], bc = pb[c];
            for (std::int64_t i = 0; i < plane; ++i) q[i] = gc * (p[i] - m) / s + bc;
        }

    bool tr = tracking({&x, &gamma, &beta});
    Tensor out = make_out(x.shape(), std::move(v), tr);
    if (tr) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        push(out, [xn, gn, bn, on, B, C, plane, N, mu, sd, training] {
            const double* g = on->grad.data();
            const double* px = xn->value.data();
            const double* pg = gn->value.data();
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::int64_t c = 0; c < C; ++c) {
                const double m = mu[static_cast<std::size_t>(c)], s = sd[static_cast<std::size_t>(c)];
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const double* gp = g + (b * C + c) * plane;
                    const double* xp = px + (b * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * (xp[i] - m) / s;
                    }
                }
                if (gn->requires_grad) gn->grad[static_cast<std::size_t>(c)] += sum_gx;
                if (bn->requires_grad) bn->grad[static_cast<std::size_t>(c)] += sum_g;
                if (xn->requires_grad) {
                    const double gc = pg[c];
                    if (training) {
                        const double inv_n = 1.0 / static_cast<double>(N);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double* gp = g + (b * C + c) * plane;
                            const double* xp = px + (b * C + c) * plane;
                            double* dxp = xn->grad.data() + (b * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const double xhat = (xp[i] - m) / s;
                                dxp[i] += gc / s * (gp[i] - sum_g * inv_n - xhat * sum_gx * inv_n);
                            }
                        }
                    } else {
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double* gp = g + (b * C + c) * plane;
                            double* dxp = xn->grad.data() + (b * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) dxp[i] += gc / s * gp[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Init + grad check
// ---------------------------------------------------------------------------

Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor rand_gaussian(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.gaussian() * stddev;
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng, bool requires_grad) {
    const double b = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
    return rand_uniform(std::move(shape), rng, -b, b, requires_grad);
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt, double h) {
    std::vector<std::vector<double>> analytic;
    {
        for (const auto& t : wrt) const_cast<Tensor&>(t).zero_grad();
        Tape tape;
        Tensor loss = f();
        if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
        if (!std::isfinite(loss.item())) throw numeric_error("grad_check: f(x) is not finite");
        tape.backward(loss);
        for (const auto& t : wrt) analytic.push_back(t.grad());
    }
    PauseTape pause;
    double max_err = 0.0;
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
        Tensor t = wrt[ti];
        for (std::size_t j = 0; j < t.data().size(); ++j) {
            const double saved = t.data()[j];
            t.data()[j] = saved + h;
            const double fp = f().item();
            t.data()[j] = saved - h;
            const double fm = f().item();
            t.data()[j] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) throw numeric_error("grad_check: f(x +- h) is not finite");
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[ti][j];
            const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace dtdy
