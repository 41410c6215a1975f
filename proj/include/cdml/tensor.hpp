#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cdml {

class Tensor;
struct TensorNode;

using Shape = std::vector<std::size_t>;

/// Formats a shape as "[2x3]" for error messages.
std::string shape_to_string(const Shape& shape);

std::size_t shape_numel(const Shape& shape);

/// One record in the dynamic computation graph. Owned via shared_ptr by the
/// Tensor handles and by child nodes (parents keep the graph alive until the
/// last downstream tensor dies). Construction order is captured in `id`;
/// backward visits reachable nodes exactly once in decreasing id order.
struct TensorNode {
    std::uint64_t id = 0;
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until backward touches this node
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Builds gradient tensors for each parent from the incoming gradient.
    // Expressed in tensor ops so gradients are themselves differentiable.
    std::function<std::vector<Tensor>(const Tensor& self, const Tensor& grad_out)> grad_fn;
    const char* op = "leaf";
};

/// N-dimensional double tensor participating in a reverse-mode autodiff
/// graph. Value semantics over a shared node; copying a Tensor aliases the
/// same node. Scalars are rank-0 (empty shape, one element).
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    /// Identity matrix of extent d.
    static Tensor eye(std::size_t d);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t rank() const { return shape().size(); }
    const std::vector<double>& data() const;
    /// Direct mutation of a leaf's values (parameter updates). Throws on
    /// non-leaf nodes: interior values are owned by the graph.
    std::vector<double>& mutable_data();

    bool requires_grad() const;
    bool is_leaf() const;

    /// Value of a one-element tensor.
    double value() const;
    double at(std::size_t flat_index) const;

    /// Accumulated gradient (zeros if backward never reached this tensor).
    std::vector<double> grad() const;
    void zero_grad();

    /// New leaf with copied values and no graph history.
    Tensor detach(bool requires_grad = false) const;

    std::uint64_t node_id() const;
    const std::shared_ptr<TensorNode>& node() const { return node_; }

    static Tensor wrap(std::shared_ptr<TensorNode> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- differentiable operations ------------------------------------------

/// Matrix product of rank-2 tensors [m x k] . [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Stacks rank-2 tensors with equal column counts along axis 0.
Tensor concat_rows(std::span<const Tensor> parts);
/// Rows [begin, end) of a rank-2 tensor.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Elementwise; shapes must match exactly or one operand must be one-element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor recip(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

/// Sum/mean over the given axes (empty = all axes, yielding a scalar).
Tensor reduce_sum(const Tensor& a, std::vector<std::size_t> axes = {});
Tensor reduce_mean(const Tensor& a, std::vector<std::size_t> axes = {});
/// Inverse of reduce_sum's shape change: replicates `a` along `axes` so the
/// result has `target_shape`. Gradient sums back over those axes.
Tensor expand(const Tensor& a, Shape target_shape, std::vector<std::size_t> axes);

/// v / ||v||_2 for a rank-1 tensor; throws DegenerateInputError on zero input.
Tensor l2_normalize(const Tensor& v);
/// Row-wise l2 normalization of a rank-2 tensor.
Tensor l2_normalize_rows(const Tensor& m);

/// Row-wise numerically stable log(sum(exp(.))) of a rank-2 tensor -> rank-1.
Tensor log_sum_exp_rows(const Tensor& m);

// ---- backward ------------------------------------------------------------

/// Reverse-mode pass from a one-element loss. Adds dloss/dt into the .grad
/// of every reachable tensor with requires_grad. Accumulates: run zero_grad
/// first to re-differentiate; two consecutive calls double the gradients.
void backward(const Tensor& loss);

/// Gradient of `loss` w.r.t. each tensor in `wrt`, returned as graph-connected
/// tensors (differentiable, enabling higher-order gradients). Unreachable
/// entries yield zeros. Does not touch any .grad buffer.
std::vector<Tensor> grad_tensors(const Tensor& loss, std::span<const Tensor> wrt);

// ---- symmetric eigendecomposition (diagnostic; not differentiable) --------

struct SymEigResult {
    std::vector<double> eigenvalues;    // descending
    std::vector<double> eigenvectors;   // d x d row-major; column j pairs with eigenvalue j
    std::size_t dim = 0;

    double vector_entry(std::size_t row, std::size_t col) const {
        return eigenvectors[row * dim + col];
    }
};

/// Cyclic Jacobi eigendecomposition of a symmetric rank-2 tensor.
/// Input must be symmetric within 1e-9; the result satisfies
/// ||V L V^T - M||_F < 1e-8 and ||V^T V - I||_F < 1e-8.
SymEigResult sym_eig(const Tensor& m);

}  // namespace cdml
