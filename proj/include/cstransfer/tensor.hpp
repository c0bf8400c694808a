#pragma once

// Minimal 64-bit tensor with a dynamic reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared node. Ops create new nodes and,
// when any input requires a gradient, remember their inputs plus a closure
// that pushes the output gradient back. backward() walks the recorded graph
// once in reverse topological order. Leaf gradients accumulate across calls
// until zero_grad(); interior gradients are recomputed on every call.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace cstransfer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
struct OpBuilder;
}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double fill, bool requires_grad = false);

    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    // Only meaningful on leaves; changing an interior node does not replay the graph.
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t i) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Reverse pass from a scalar. Throws ShapeError for non-scalar tensors.
    void backward() const;

    // Copy of the values with no history.
    Tensor detach() const;

    std::string_view op() const;

    // Identity of the underlying node (two handles to the same tensor compare equal).
    const void* id() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend struct detail::OpBuilder;
};

namespace detail {

using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "no gradient yet"
    bool requires_grad = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

// Internal helper used by op implementations.
struct OpBuilder {
    static std::shared_ptr<Node>& node(Tensor& t) { return t.node_; }
    static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
    static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

}  // namespace detail

// While alive, ops on this thread record no graph (inference only).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---------------------------------------------------------------------------
// Core ops. Every op validates shapes (ShapeError) and rejects non-finite
// results (NumericError).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Elementwise with optional row broadcast: `b` may equal a's shape, or be a
// vector matching the last axis of a 2-D `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Along the last axis.
Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Reduce one axis of a 1-D or 2-D tensor.
Tensor mean(const Tensor& a, std::size_t axis);
Tensor sum(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// Row selection from a 2-D tensor (also serves as embedding lookup), or
// element selection from a 1-D tensor.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor take(const Tensor& a, std::span<const std::size_t> indices);

// Multiply each row i of a 2-D tensor by w[i].
Tensor scale_rows(const Tensor& x, const Tensor& w);

// Ragged-batch helpers. `lengths` partitions the rows of a packed tensor
// into consecutive segments (one per sequence).
Tensor segment_sum(const Tensor& x, std::span<const std::size_t> lengths);
Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> lengths);
// Per segment: sum_t w_t x_t / sum_t w_t. NumericError when a weight sum is below 1e-9.
Tensor segment_weighted_mean(const Tensor& x, const Tensor& w, std::span<const std::size_t> lengths);

// Scaled dot-product self-attention per segment and head. q, k, v are
// (N x d) packed over segments; tokens only attend within their segment.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::span<const std::size_t> lengths, std::size_t n_heads);

inline constexpr double kCosineEps = 1e-12;

// u.v / (max(|u|, eps) * max(|v|, eps)); zero vectors give 0.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);
// Row-wise cosine of two (n x d) tensors, result has n entries.
Tensor cosine_rows(const Tensor& a, const Tensor& b);

// -log softmax(logits)[gold] for a 1-D logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t gold);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator+(const Tensor& a, double s);
Tensor operator+(double s, const Tensor& a);
Tensor operator-(double s, const Tensor& a);
Tensor operator-(const Tensor& a);

// ---------------------------------------------------------------------------
// Binary serialization: "CSTN" magic, u32 version, u32 rank, u64 dims, then
// little-endian IEEE-754 doubles.

inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace cstransfer
