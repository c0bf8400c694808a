#include "cstransfer/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "cstransfer/errors.hpp"

namespace cstransfer {

using detail::Node;
using detail::OpBuilder;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

const NodePtr& node_of(const Tensor& t, std::string_view op) {
    const auto& n = OpBuilder::node(t);
    if (!n) {
        throw std::invalid_argument(std::string(op) + ": undefined tensor");
    }
    return n;
}

void validate_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
        }
    }
}

thread_local bool no_grad_active = false;

// Creates the output node; records inputs only when one of them needs a gradient.
NodePtr make_node(std::string_view op, Shape shape, std::vector<double> data,
                  std::initializer_list<const Tensor*> inputs) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite output");
        }
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool track = false;
    if (!no_grad_active) {
        for (const Tensor* t : inputs) {
            track = track || OpBuilder::node(*t)->requires_grad;
        }
    }
    if (track) {
        n->requires_grad = true;
        for (const Tensor* t : inputs) {
            n->inputs.push_back(OpBuilder::node(*t));
        }
    }
    return n;
}

Node* raw(const Tensor& t) { return OpBuilder::node(t).get(); }

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajorMatrix>;
using ConstMatMap = Eigen::Map<const RowMajorMatrix>;

std::vector<double> transposed(const std::vector<double>& x, std::size_t rows, std::size_t cols) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    return out;
}

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
    }
}

std::size_t check_lengths(std::span<const std::size_t> lengths, std::size_t rows, std::string_view op) {
    std::size_t total = 0;
    for (auto l : lengths) {
        if (l == 0) {
            throw ShapeError(std::string(op) + ": empty segment");
        }
        total += l;
    }
    if (total != rows || lengths.empty()) {
        throw ShapeError(std::string(op) + ": segment lengths sum to " + std::to_string(total) + " but tensor has " +
                         std::to_string(rows) + " rows");
    }
    return total;
}

enum class Broadcast { Same, Row, Scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.rank() == 0) return Broadcast::Scalar;
    if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return Broadcast::Row;
    throw ShapeError(std::string(op) + ": cannot combine " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
}

std::size_t bindex(Broadcast kind, std::size_t i, std::size_t cols) {
    switch (kind) {
        case Broadcast::Same: return i;
        case Broadcast::Row: return i % cols;
        case Broadcast::Scalar: return 0;
    }
    return 0;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
    const auto& na = node_of(a, op);
    const auto& nb = node_of(b, op);
    const Broadcast kind = broadcast_kind(a, b, op);
    const std::size_t cols = a.rank() == 2 ? a.dim(1) : 1;
    std::vector<double> out(na->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(na->data[i], nb->data[bindex(kind, i, cols)]);
    }
    auto n = make_node(op, na->shape, std::move(out), {&a, &b});
    if (n->requires_grad) {
        Node* pa = na.get();
        Node* pb = nb.get();
        n->backward = [pa, pb, kind, cols, da, db](const std::vector<double>& g) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    pa->grad[i] += g[i] * da(pa->data[i], pb->data[bindex(kind, i, cols)]);
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const std::size_t j = bindex(kind, i, cols);
                    pb->grad[j] += g[i] * db(pa->data[i], pb->data[j]);
                }
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

template <typename Fwd, typename Deriv>
Tensor unary_op(std::string_view op, const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto& na = node_of(a, op);
    std::vector<double> out(na->data.size());
    std::transform(na->data.begin(), na->data.end(), out.begin(), fwd);
    auto n = make_node(op, na->shape, std::move(out), {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        Node* po = n.get();
        n->backward = [pa, po, deriv](const std::vector<double>& g) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                pa->grad[i] += g[i] * deriv(pa->data[i], po->data[i]);
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

// Rows x cols view of the last axis for 1-D and 2-D tensors.
std::pair<std::size_t, std::size_t> last_axis_view(const Tensor& t, std::string_view op) {
    if (t.rank() == 1) return {1, t.dim(0)};
    if (t.rank() == 2) return {t.dim(0), t.dim(1)};
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(no_grad_active) { no_grad_active = true; }
NoGradGuard::~NoGradGuard() { no_grad_active = previous_; }

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
    validate_shape(shape);
    std::vector<double> values(shape_numel(shape), fill);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (values.size() != shape_numel(shape)) {
        throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError("tensor: non-finite value");
        }
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, std::vector<double>{value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_of(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this, "numel")->data.size(); }

std::span<const double> Tensor::values() const { return node_of(*this, "values")->data; }

std::span<double> Tensor::mutable_values() { return node_of(*this, "values")->data; }

double Tensor::item() const {
    const auto& n = node_of(*this, "item");
    if (n->data.size() != 1) {
        throw ShapeError("item: tensor has " + std::to_string(n->data.size()) + " elements");
    }
    return n->data[0];
}

double Tensor::at(std::size_t i) const { return values()[i]; }

double Tensor::at(std::size_t row, std::size_t col) const {
    require_rank(*this, 2, "at");
    return values()[row * dim(1) + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    const auto& n = node_of(*this, "set_requires_grad");
    if (!n->inputs.empty()) {
        throw std::logic_error("set_requires_grad: only leaves can change gradient tracking");
    }
    n->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_of(*this, "is_leaf")->inputs.empty(); }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_of(*this, "grad")->grad; }

std::span<double> Tensor::mutable_grad() {
    auto& n = node_of(*this, "grad");
    n->ensure_grad();
    return n->grad;
}

void Tensor::zero_grad() {
    auto& n = node_of(*this, "zero_grad");
    if (!n->grad.empty()) {
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
}

void Tensor::backward() const {
    const auto& root = node_of(*this, "backward");
    if (root->data.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root->shape));
    }
    if (!root->requires_grad) {
        throw std::invalid_argument("backward: loss does not depend on any tensor requiring grad");
    }

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (!n->inputs.empty()) {
            n->grad.assign(n->data.size(), 0.0);
        }
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) {
            n->backward(n->grad);
        }
    }
}

Tensor Tensor::detach() const {
    const auto& n = node_of(*this, "detach");
    return Tensor(n->shape, n->data, false);
}

std::string_view Tensor::op() const { return node_of(*this, "op")->op; }

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto& na = OpBuilder::node(a);
    const auto& nb = OpBuilder::node(b);
    std::vector<double> out(m * n, 0.0);
    MatMap(out.data(), m, n).noalias() = ConstMatMap(na->data.data(), m, k) * ConstMatMap(nb->data.data(), k, n);
    auto node = make_node("matmul", Shape{m, n}, std::move(out), {&a, &b});
    if (node->requires_grad) {
        Node* pa = na.get();
        Node* pb = nb.get();
        node->backward = [pa, pb, m, k, n](const std::vector<double>& g) {
            const ConstMatMap gm(g.data(), m, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                MatMap(pa->grad.data(), m, k).noalias() += gm * ConstMatMap(pb->data.data(), k, n).transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MatMap(pb->grad.data(), k, n).noalias() += ConstMatMap(pa->data.data(), m, k).transpose() * gm;
            }
        };
    }
    return OpBuilder::wrap(std::move(node));
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    const auto& na = OpBuilder::node(a);
    auto n = make_node("transpose", Shape{c, r}, transposed(na->data, r, c), {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        n->backward = [pa, r, c](const std::vector<double>& g) {
            pa->ensure_grad();
            const auto gt = transposed(g, c, r);
            for (std::size_t i = 0; i < gt.size(); ++i) pa->grad[i] += gt[i];
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor reshape(const Tensor& a, Shape shape) {
    const auto& na = node_of(a, "reshape");
    validate_shape(shape);
    if (shape_numel(shape) != na->data.size()) {
        throw ShapeError("reshape: " + shape_str(na->shape) + " -> " + shape_str(shape));
    }
    auto n = make_node("reshape", std::move(shape), na->data, {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        n->backward = [pa](const std::vector<double>& g) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i];
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(
        "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softmax(const Tensor& a) {
    const auto [rows, cols] = last_axis_view(a, "softmax");
    const auto& na = OpBuilder::node(a);
    std::vector<double> out(na->data.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = na->data.data() + r * cols;
        double* y = out.data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            total += y[j];
        }
        for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
    }
    auto n = make_node("softmax", na->shape, std::move(out), {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        Node* po = n.get();
        n->backward = [pa, po, rows, cols](const std::vector<double>& g) {
            pa->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = po->data.data() + r * cols;
                const double* gy = g.data() + r * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
                for (std::size_t j = 0; j < cols; ++j) pa->grad[r * cols + j] += y[j] * (gy[j] - dot);
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto [rows, cols] = last_axis_view(x, "layer_norm");
    require_rank(gain, 1, "layer_norm gain");
    require_rank(bias, 1, "layer_norm bias");
    if (gain.dim(0) != cols || bias.dim(0) != cols) {
        throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(cols));
    }
    if (!(eps > 0.0)) {
        throw std::invalid_argument("layer_norm: eps must be positive");
    }
    const auto& nx = OpBuilder::node(x);
    const auto& ng = OpBuilder::node(gain);
    const auto& nb = OpBuilder::node(bias);
    std::vector<double> xhat(nx->data.size());
    std::vector<double> rstd(rows);
    std::vector<double> out(nx->data.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = nx->data.data() + r * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(cols);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t i = r * cols + j;
            xhat[i] = (xr[j] - mu) * rstd[r];
            out[i] = xhat[i] * ng->data[j] + nb->data[j];
        }
    }
    auto n = make_node("layer_norm", nx->shape, std::move(out), {&x, &gain, &bias});
    if (n->requires_grad) {
        Node* px = nx.get();
        Node* pg = ng.get();
        Node* pb = nb.get();
        n->backward = [px, pg, pb, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](
                          const std::vector<double>& g) {
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (px->requires_grad) px->ensure_grad();
            std::vector<double> dxhat(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const std::size_t i = r * cols + j;
                    if (pg->requires_grad) pg->grad[j] += g[i] * xhat[i];
                    if (pb->requires_grad) pb->grad[j] += g[i];
                    dxhat[j] = g[i] * pg->data[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xhat[i];
                }
                if (!px->requires_grad) continue;
                mean_d /= static_cast<double>(cols);
                mean_dx /= static_cast<double>(cols);
                for (std::size_t j = 0; j < cols; ++j) {
                    const std::size_t i = r * cols + j;
                    px->grad[i] += rstd[r] * (dxhat[j] - mean_d - xhat[i] * mean_dx);
                }
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor mean(const Tensor& a, std::size_t axis) {
    const auto& na = node_of(a, "mean");
    if (a.rank() == 1 && axis == 0) {
        const std::size_t len = a.dim(0);
        double total = 0.0;
        for (double v : na->data) total += v;
        auto n = make_node("mean", Shape{}, {total / static_cast<double>(len)}, {&a});
        if (n->requires_grad) {
            Node* pa = na.get();
            n->backward = [pa, len](const std::vector<double>& g) {
                pa->ensure_grad();
                for (auto& v : pa->grad) v += g[0] / static_cast<double>(len);
            };
        }
        return OpBuilder::wrap(std::move(n));
    }
    if (a.rank() == 2 && axis < 2) {
        const std::size_t rows = a.dim(0), cols = a.dim(1);
        const std::size_t out_len = axis == 0 ? cols : rows;
        const double denom = static_cast<double>(axis == 0 ? rows : cols);
        std::vector<double> out(out_len, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                out[axis == 0 ? c : r] += na->data[r * cols + c];
            }
        }
        for (auto& v : out) v /= denom;
        auto n = make_node("mean", Shape{out_len}, std::move(out), {&a});
        if (n->requires_grad) {
            Node* pa = na.get();
            n->backward = [pa, rows, cols, axis, denom](const std::vector<double>& g) {
                pa->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        pa->grad[r * cols + c] += g[axis == 0 ? c : r] / denom;
                    }
                }
            };
        }
        return OpBuilder::wrap(std::move(n));
    }
    throw ShapeError("mean: axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
}

Tensor sum(const Tensor& a) {
    const auto& na = node_of(a, "sum");
    double total = 0.0;
    for (double v : na->data) total += v;
    auto n = make_node("sum", Shape{}, {total}, {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        n->backward = [pa](const std::vector<double>& g) {
            pa->ensure_grad();
            for (auto& v : pa->grad) v += g[0];
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const std::size_t rank = parts.front().rank();
    if (rank == 0 || rank > 2 || axis >= rank) {
        throw ShapeError("concat: unsupported axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
    }
    for (const auto& p : parts) {
        node_of(p, "concat");
        if (p.rank() != rank || (rank == 2 && p.dim(1 - axis) != parts.front().dim(1 - axis))) {
            throw ShapeError("concat: mismatched part shape " + shape_str(p.shape()));
        }
    }
    // Along axis 0 the parts are contiguous blocks; along axis 1 each row interleaves parts.
    const std::size_t rows = rank == 1 ? 1 : (axis == 0 ? 0 : parts.front().dim(0));
    Shape out_shape = parts.front().shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) out_shape[axis] += p.dim(axis);
    std::vector<double> out;
    out.reserve(shape_numel(out_shape));
    if (rank == 1 || axis == 0) {
        for (const auto& p : parts) {
            const auto v = p.values();
            out.insert(out.end(), v.begin(), v.end());
        }
    } else {
        for (std::size_t r = 0; r < rows; ++r) {
            for (const auto& p : parts) {
                const auto v = p.values();
                const std::size_t c = p.dim(1);
                out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(r * c),
                           v.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
            }
        }
    }
    bool track = false;
    for (const auto& p : parts) track = track || p.requires_grad();
    for (double v : out) {
        if (!std::isfinite(v)) throw NumericError("concat: non-finite output");
    }
    auto n = std::make_shared<Node>();
    n->shape = out_shape;
    n->data = std::move(out);
    n->op = "concat";
    if (track) {
        n->requires_grad = true;
        for (const auto& p : parts) n->inputs.push_back(OpBuilder::node(p));
        std::vector<Node*> ins;
        for (const auto& p : parts) ins.push_back(raw(p));
        const std::size_t total_cols = rank == 2 ? out_shape[1] : 0;
        n->backward = [ins, rank, axis, rows, total_cols](const std::vector<double>& g) {
            if (rank == 1 || axis == 0) {
                std::size_t off = 0;
                for (Node* p : ins) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += g[off + i];
                    }
                    off += p->data.size();
                }
                return;
            }
            std::size_t col_off = 0;
            for (Node* p : ins) {
                const std::size_t c = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < c; ++j) p->grad[r * c + j] += g[r * total_cols + col_off + j];
                    }
                }
                col_off += c;
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    require_rank(a, 2, "gather_rows");
    if (rows.empty()) {
        throw ShapeError("gather_rows: no rows selected");
    }
    const std::size_t n_rows = a.dim(0), cols = a.dim(1);
    const auto& na = OpBuilder::node(a);
    std::vector<double> out(rows.size() * cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n_rows) {
            throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " of " + std::to_string(n_rows));
        }
        std::copy_n(na->data.begin() + static_cast<std::ptrdiff_t>(rows[i] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
    auto n = make_node("gather_rows", Shape{rows.size(), cols}, std::move(out), {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        n->backward = [pa, idx = std::vector<std::size_t>(rows.begin(), rows.end()), cols](
                          const std::vector<double>& g) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double* dst = pa->grad.data() + idx[i] * cols;
                const double* src = g.data() + i * cols;
                for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor take(const Tensor& a, std::span<const std::size_t> indices) {
    require_rank(a, 1, "take");
    if (indices.empty()) {
        throw ShapeError("take: no indices");
    }
    const auto& na = OpBuilder::node(a);
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= na->data.size()) {
            throw std::out_of_range("take: index " + std::to_string(indices[i]) + " of " +
                                    std::to_string(na->data.size()));
        }
        out[i] = na->data[indices[i]];
    }
    auto n = make_node("take", Shape{indices.size()}, std::move(out), {&a});
    if (n->requires_grad) {
        Node* pa = na.get();
        n->backward = [pa, idx = std::vector<std::size_t>(indices.begin(), indices.end())](
                          const std::vector<double>& g) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) pa->grad[idx[i]] += g[i];
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
    require_rank(x, 2, "scale_rows");
    require_rank(w, 1, "scale_rows weights");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (w.dim(0) != rows) {
        throw ShapeError("scale_rows: " + std::to_string(w.dim(0)) + " weights for " + std::to_string(rows) + " rows");
    }
    const auto& nx = OpBuilder::node(x);
    const auto& nw = OpBuilder::node(w);
    std::vector<double> out(nx->data.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = nw->data[r] * nx->data[r * cols + c];
    }
    auto n = make_node("scale_rows", nx->shape, std::move(out), {&x, &w});
    if (n->requires_grad) {
        Node* px = nx.get();
        Node* pw = nw.get();
        n->backward = [px, pw, rows, cols](const std::vector<double>& g) {
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double dw = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    if (px->requires_grad) px->grad[i] += pw->data[r] * g[i];
                    dw += g[i] * px->data[i];
                }
                if (pw->requires_grad) pw->grad[r] += dw;
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor segment_sum(const Tensor& x, std::span<const std::size_t> lengths) {
    const auto [rows, cols] = x.rank() == 1 ? std::pair{x.dim(0), std::size_t{1}} : last_axis_view(x, "segment_sum");
    check_lengths(lengths, rows, "segment_sum");
    const auto& nx = OpBuilder::node(x);
    std::vector<double> out(lengths.size() * cols, 0.0);
    std::size_t row = 0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        for (std::size_t t = 0; t < lengths[s]; ++t, ++row) {
            for (std::size_t c = 0; c < cols; ++c) out[s * cols + c] += nx->data[row * cols + c];
        }
    }
    Shape shape = x.rank() == 1 ? Shape{lengths.size()} : Shape{lengths.size(), cols};
    auto n = make_node("segment_sum", std::move(shape), std::move(out), {&x});
    if (n->requires_grad) {
        Node* px = nx.get();
        n->backward = [px, lens = std::vector<std::size_t>(lengths.begin(), lengths.end()), cols](
                          const std::vector<double>& g) {
            px->ensure_grad();
            std::size_t row = 0;
            for (std::size_t s = 0; s < lens.size(); ++s) {
                for (std::size_t t = 0; t < lens[s]; ++t, ++row) {
                    for (std::size_t c = 0; c < cols; ++c) px->grad[row * cols + c] += g[s * cols + c];
                }
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> lengths) {
    require_rank(scores, 1, "segment_softmax");
    check_lengths(lengths, scores.dim(0), "segment_softmax");
    const auto& ns = OpBuilder::node(scores);
    std::vector<double> out(ns->data.size());
    std::size_t off = 0;
    for (auto len : lengths) {
        const double* x = ns->data.data() + off;
        double* y = out.data() + off;
        const double mx = *std::max_element(x, x + len);
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            y[j] = std::exp(x[j] - mx);
            total += y[j];
        }
        for (std::size_t j = 0; j < len; ++j) y[j] /= total;
        off += len;
    }
    auto n = make_node("segment_softmax", ns->shape, std::move(out), {&scores});
    if (n->requires_grad) {
        Node* ps = ns.get();
        Node* po = n.get();
        n->backward = [ps, po, lens = std::vector<std::size_t>(lengths.begin(), lengths.end())](
                          const std::vector<double>& g) {
            ps->ensure_grad();
            std::size_t off = 0;
            for (auto len : lens) {
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += g[off + j] * po->data[off + j];
                for (std::size_t j = 0; j < len; ++j) ps->grad[off + j] += po->data[off + j] * (g[off + j] - dot);
                off += len;
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor segment_weighted_mean(const Tensor& x, const Tensor& w, std::span<const std::size_t> lengths) {
    require_rank(x, 2, "segment_weighted_mean");
    require_rank(w, 1, "segment_weighted_mean weights");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (w.dim(0) != rows) {
        throw ShapeError("segment_weighted_mean: weight count does not match rows");
    }
    check_lengths(lengths, rows, "segment_weighted_mean");
    const auto& nx = OpBuilder::node(x);
    const auto& nw = OpBuilder::node(w);
    std::vector<double> out(lengths.size() * cols, 0.0);
    std::vector<double> totals(lengths.size(), 0.0);
    std::size_t row = 0;
    for (std::size_t s = 0; s < lengths.size(); ++s) {
        double total = 0.0;
        for (std::size_t t = 0; t < lengths[s]; ++t, ++row) {
            const double wt = nw->data[row];
            total += wt;
            for (std::size_t c = 0; c < cols; ++c) out[s * cols + c] += wt * nx->data[row * cols + c];
        }
        if (!(std::abs(total) >= 1e-9)) {
            throw NumericError("segment_weighted_mean: weight sum " + std::to_string(total) + " below 1e-9 in segment " +
                               std::to_string(s));
        }
        totals[s] = total;
        for (std::size_t c = 0; c < cols; ++c) out[s * cols + c] /= total;
    }
    auto n = make_node("segment_weighted_mean", Shape{lengths.size(), cols}, std::move(out), {&x, &w});
    if (n->requires_grad) {
        Node* px = nx.get();
        Node* pw = nw.get();
        Node* po = n.get();
        n->backward = [px, pw, po, cols, totals = std::move(totals),
                       lens = std::vector<std::size_t>(lengths.begin(), lengths.end())](const std::vector<double>& g) {
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            std::size_t row = 0;
            for (std::size_t s = 0; s < lens.size(); ++s) {
                const double* gs = g.data() + s * cols;
                const double* ps = po->data.data() + s * cols;
                for (std::size_t t = 0; t < lens[s]; ++t, ++row) {
                    const double scale = pw->data[row] / totals[s];
                    double dw = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double xv = px->data[row * cols + c];
                        if (px->requires_grad) px->grad[row * cols + c] += scale * gs[c];
                        dw += gs[c] * (xv - ps[c]);
                    }
                    if (pw->requires_grad) pw->grad[row] += dw / totals[s];
                }
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> lengths,
                            std::size_t n_heads) {
    require_rank(q, 2, "multi_head_attention");
    if (k.shape() != q.shape() || v.shape() != q.shape()) {
        throw ShapeError("multi_head_attention: q, k, v shapes differ");
    }
    const std::size_t rows = q.dim(0), d = q.dim(1);
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("multi_head_attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(n_heads) + " heads");
    }
    check_lengths(lengths, rows, "multi_head_attention");
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& nq = OpBuilder::node(q);
    const auto& nk = OpBuilder::node(k);
    const auto& nv = OpBuilder::node(v);

    std::size_t prob_size = 0;
    for (auto len : lengths) prob_size += len * len * n_heads;
    std::vector<double> probs(prob_size);
    std::vector<double> out(rows * d, 0.0);

    std::size_t off = 0, poff = 0;
    for (auto len : lengths) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < len; ++i) {
                double* p = probs.data() + poff + i * len;
                const double* qi = nq->data.data() + (off + i) * d + c0;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < len; ++j) {
                    const double* kj = nk->data.data() + (off + j) * d + c0;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    p[j] = s * scale;
                    mx = std::max(mx, p[j]);
                }
                double total = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    total += p[j];
                }
                double* oi = out.data() + (off + i) * d + c0;
                for (std::size_t j = 0; j < len; ++j) {
                    p[j] /= total;
                    const double* vj = nv->data.data() + (off + j) * d + c0;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
                }
            }
            poff += len * len;
        }
        off += len;
    }

    auto n = make_node("multi_head_attention", Shape{rows, d}, std::move(out), {&q, &k, &v});
    if (n->requires_grad) {
        Node* pq = nq.get();
        Node* pk = nk.get();
        Node* pv = nv.get();
        n->backward = [pq, pk, pv, d, dh, n_heads, scale, probs = std::move(probs),
                       lens = std::vector<std::size_t>(lengths.begin(), lengths.end())](const std::vector<double>& g) {
            pq->ensure_grad();
            pk->ensure_grad();
            pv->ensure_grad();
            std::vector<double> ds;
            std::size_t off = 0, poff = 0;
            for (auto len : lens) {
                ds.resize(len);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t c0 = h * dh;
                    for (std::size_t i = 0; i < len; ++i) {
                        const double* p = probs.data() + poff + i * len;
                        const double* gi = g.data() + (off + i) * d + c0;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < len; ++j) {
                            const double* vj = pv->data.data() + (off + j) * d + c0;
                            double* gvj = pv->grad.data() + (off + j) * d + c0;
                            double dp = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                dp += gi[c] * vj[c];
                                gvj[c] += p[j] * gi[c];
                            }
                            ds[j] = dp;
                            dot += dp * p[j];
                        }
                        const double* qi = pq->data.data() + (off + i) * d + c0;
                        double* gqi = pq->grad.data() + (off + i) * d + c0;
                        for (std::size_t j = 0; j < len; ++j) {
                            const double dsj = p[j] * (ds[j] - dot) * scale;
                            const double* kj = pk->data.data() + (off + j) * d + c0;
                            double* gkj = pk->grad.data() + (off + j) * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                gqi[c] += dsj * kj[c];
                                gkj[c] += dsj * qi[c];
                            }
                        }
                    }
                    poff += len * len;
                }
                off += len;
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "cosine_rows");
    if (a.shape() != b.shape()) {
        throw ShapeError("cosine: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    const auto& na = OpBuilder::node(a);
    const auto& nb = OpBuilder::node(b);
    std::vector<double> out(rows), dots(rows), norm_a(rows), norm_b(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double x = na->data[r * cols + c], y = nb->data[r * cols + c];
            dot += x * y;
            sa += x * x;
            sb += y * y;
        }
        dots[r] = dot;
        norm_a[r] = std::sqrt(sa);
        norm_b[r] = std::sqrt(sb);
        out[r] = dot / (std::max(norm_a[r], kCosineEps) * std::max(norm_b[r], kCosineEps));
    }
    auto n = make_node("cosine", Shape{rows}, std::move(out), {&a, &b});
    if (n->requires_grad) {
        Node* pa = na.get();
        Node* pb = nb.get();
        Node* po = n.get();
        n->backward = [pa, pb, po, rows, cols, norm_a = std::move(norm_a), norm_b = std::move(norm_b)](
                          const std::vector<double>& g) {
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double na_ = std::max(norm_a[r], kCosineEps);
                const double nb_ = std::max(norm_b[r], kCosineEps);
                const double cos = po->data[r];
                // The clamped norm is constant below eps, so only the dot term contributes there.
                const double ka = norm_a[r] > kCosineEps ? cos / (norm_a[r] * norm_a[r]) : 0.0;
                const double kb = norm_b[r] > kCosineEps ? cos / (norm_b[r] * norm_b[r]) : 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    const double x = pa->data[i], y = pb->data[i];
                    if (pa->requires_grad) pa->grad[i] += g[r] * (y / (na_ * nb_) - ka * x);
                    if (pb->requires_grad) pb->grad[i] += g[r] * (x / (na_ * nb_) - kb * y);
                }
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    require_rank(u, 1, "cosine_similarity");
    require_rank(v, 1, "cosine_similarity");
    if (u.dim(0) != v.dim(0)) {
        throw ShapeError("cosine_similarity: length mismatch " + std::to_string(u.dim(0)) + " vs " +
                         std::to_string(v.dim(0)));
    }
    const Shape row{1, u.dim(0)};
    return reshape(cosine_rows(reshape(u, row), reshape(v, row)), Shape{});
}

Tensor cross_entropy(const Tensor& logits, std::size_t gold) {
    require_rank(logits, 1, "cross_entropy");
    const std::size_t n_cls = logits.dim(0);
    if (gold >= n_cls) {
        throw std::out_of_range("cross_entropy: gold index " + std::to_string(gold) + " with " +
                                std::to_string(n_cls) + " choices");
    }
    const auto& nl = OpBuilder::node(logits);
    const double mx = *std::max_element(nl->data.begin(), nl->data.end());
    std::vector<double> probs(n_cls);
    double total = 0.0;
    for (std::size_t j = 0; j < n_cls; ++j) {
        probs[j] = std::exp(nl->data[j] - mx);
        total += probs[j];
    }
    for (auto& p : probs) p /= total;
    const double loss = mx + std::log(total) - nl->data[gold];
    auto n = make_node("cross_entropy", Shape{}, {loss}, {&logits});
    if (n->requires_grad) {
        Node* pl = nl.get();
        n->backward = [pl, gold, probs = std::move(probs)](const std::vector<double>& g) {
            pl->ensure_grad();
            for (std::size_t j = 0; j < probs.size(); ++j) {
                pl->grad[j] += g[0] * (probs[j] - (j == gold ? 1.0 : 0.0));
            }
        };
    }
    return OpBuilder::wrap(std::move(n));
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
Tensor operator-(double s, const Tensor& a) { return add_scalar(mul_scalar(a, -1.0), s); }
Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

}  // namespace cstransfer
