#include "cdml/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cdml/errors.hpp"

namespace cdml {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

std::shared_ptr<TensorNode> make_node(
    Shape shape, std::vector<double> data,
    std::vector<std::shared_ptr<TensorNode>> parents,
    std::function<std::vector<Tensor>(const Tensor&, const Tensor&)> grad_fn,
    const char* op) {
    auto node = std::make_shared<TensorNode>();
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->parents = std::move(parents);
    node->grad_fn = std::move(grad_fn);
    node->op = op;
    node->requires_grad = false;
    for (const auto& p : node->parents) {
        if (p->requires_grad) {
            node->requires_grad = true;
            break;
        }
    }
    return node;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_to_string(t.shape()));
    }
}

// Elementwise combine supporting equal shapes plus one-element broadcast.
enum class Broadcast { none, left, right };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::none;
    if (b.numel() == 1) return Broadcast::right;
    if (a.numel() == 1) return Broadcast::left;
    throw DimensionError(std::string(op) + ": incompatible shapes " +
                         shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
}

// Gradient of a one-element operand broadcast across the other: total the
// incoming gradient and restore the operand's original (scalar-like) shape.
Tensor collapse_to(const Tensor& grad, const Shape& shape) {
    if (grad.shape() == shape) return grad;
    return reshape(reduce_sum(grad), shape);
}

std::vector<std::size_t> normalize_axes(std::vector<std::size_t> axes, std::size_t rank,
                                        const char* op) {
    if (axes.empty()) {
        axes.resize(rank);
        std::iota(axes.begin(), axes.end(), 0);
        return axes;
    }
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (auto ax : axes) {
        if (ax >= rank) {
            throw DimensionError(std::string(op) + ": axis " + std::to_string(ax) +
                                 " out of range for rank " + std::to_string(rank));
        }
    }
    return axes;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

// ---- Tensor basics ---------------------------------------------------------

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("from_data: shape " + shape_to_string(shape) + " wants " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
    }
    auto node = make_node(std::move(shape), std::move(data), {}, nullptr, "leaf");
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
    return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), value);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::eye(std::size_t d) {
    std::vector<double> data(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) data[i * d + i] = 1.0;
    return from_data({d, d}, std::move(data));
}

const Shape& Tensor::shape() const {
    check_defined(*this, "shape");
    return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::data() const {
    check_defined(*this, "data");
    return node_->data;
}

std::vector<double>& Tensor::mutable_data() {
    check_defined(*this, "mutable_data");
    if (node_->grad_fn) {
        throw ContractError("mutable_data: only leaf tensors may be mutated");
    }
    return node_->data;
}

bool Tensor::requires_grad() const {
    check_defined(*this, "requires_grad");
    return node_->requires_grad;
}

bool Tensor::is_leaf() const {
    check_defined(*this, "is_leaf");
    return node_->grad_fn == nullptr;
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value: tensor " + shape_to_string(shape()) + " is not one-element");
    }
    return node_->data[0];
}

double Tensor::at(std::size_t flat_index) const {
    if (flat_index >= numel()) throw ContractError("at: index out of range");
    return node_->data[flat_index];
}

std::vector<double> Tensor::grad() const {
    check_defined(*this, "grad");
    if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::detach(bool requires_grad) const {
    check_defined(*this, "detach");
    return from_data(node_->shape, node_->data, requires_grad);
}

std::uint64_t Tensor::node_id() const {
    check_defined(*this, "node_id");
    return node_->id;
}

// ---- structural ops --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = da[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = db.data() + kk * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto grad_fn = [a, b](const Tensor&, const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = matmul(g, transpose(b));
        if (b.requires_grad()) grads[1] = matmul(transpose(a), g);
        return grads;
    };
    return Tensor::wrap(make_node({m, n}, std::move(out), {a.node(), b.node()},
                                  std::move(grad_fn), "matmul"));
}

Tensor transpose(const Tensor& a) {
    check_defined(a, "transpose");
    check_rank2(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    const auto& da = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
    auto grad_fn = [](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{transpose(g)};
    };
    return Tensor::wrap(make_node({n, m}, std::move(out), {a.node()}, grad_fn, "transpose"));
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                             shape_to_string(shape));
    }
    Shape original = a.shape();
    auto grad_fn = [original](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{reshape(g, original)};
    };
    return Tensor::wrap(
        make_node(std::move(shape), a.data(), {a.node()}, std::move(grad_fn), "reshape"));
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    std::size_t cols = 0, rows = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat_rows");
        check_rank2(p, "concat_rows");
        if (cols == 0) cols = p.shape()[1];
        if (p.shape()[1] != cols) {
            throw DimensionError("concat_rows: column mismatch, expected " +
                                 std::to_string(cols) + ", got " + shape_to_string(p.shape()));
        }
        rows += p.shape()[0];
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.node());
    }
    auto grad_fn = [inputs](const Tensor&, const Tensor& g) {
        std::vector<Tensor> grads(inputs.size());
        std::size_t offset = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const std::size_t r = inputs[i].shape()[0];
            if (inputs[i].requires_grad()) grads[i] = slice_rows(g, offset, offset + r);
            offset += r;
        }
        return grads;
    };
    return Tensor::wrap(
        make_node({rows, cols}, std::move(out), std::move(parents), std::move(grad_fn), "concat"));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    check_defined(a, "slice_rows");
    check_rank2(a, "slice_rows");
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    if (begin > end || end > rows) {
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") invalid for " + shape_to_string(a.shape()));
    }
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end * cols));
    auto grad_fn = [begin, end, rows, cols](const Tensor&, const Tensor& g) {
        std::vector<Tensor> parts;
        if (begin > 0) parts.push_back(Tensor::zeros({begin, cols}));
        parts.push_back(g);
        if (end < rows) parts.push_back(Tensor::zeros({rows - end, cols}));
        return std::vector<Tensor>{concat_rows(parts)};
    };
    return Tensor::wrap(
        make_node({end - begin, cols}, std::move(out), {a.node()}, std::move(grad_fn), "slice"));
}

// ---- elementwise ops -------------------------------------------------------

namespace {

template <typename Fn>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fn&& fn,
                 std::function<std::vector<Tensor>(const Tensor&, const Tensor&)> grad_fn) {
    check_defined(a, name);
    check_defined(b, name);
    const Broadcast bc = broadcast_kind(a, b, name);
    const Shape& out_shape = (bc == Broadcast::left) ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double av = (bc == Broadcast::left) ? da[0] : da[i];
        const double bv = (bc == Broadcast::right) ? db[0] : db[i];
        out[i] = fn(av, bv);
    }
    return Tensor::wrap(
        make_node(out_shape, std::move(out), {a.node(), b.node()}, std::move(grad_fn), name));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    auto grad_fn = [a, b](const Tensor&, const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = collapse_to(g, a.shape());
        if (b.requires_grad()) grads[1] = collapse_to(g, b.shape());
        return grads;
    };
    return binary_op(a, b, "add", [](double x, double y) { return x + y; }, std::move(grad_fn));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    auto grad_fn = [a, b](const Tensor&, const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = collapse_to(g, a.shape());
        if (b.requires_grad()) grads[1] = collapse_to(scale(g, -1.0), b.shape());
        return grads;
    };
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; }, std::move(grad_fn));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    auto grad_fn = [a, b](const Tensor&, const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = collapse_to(mul(g, b), a.shape());
        if (b.requires_grad()) grads[1] = collapse_to(mul(g, a), b.shape());
        return grads;
    };
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; }, std::move(grad_fn));
}

Tensor relu(const Tensor& a) {
    check_defined(a, "relu");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    std::vector<double> mask(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        // Subgradient at exactly 0 is 0: the hinge is inactive on the boundary.
        const bool active = da[i] > 0.0;
        out[i] = active ? da[i] : 0.0;
        mask[i] = active ? 1.0 : 0.0;
    }
    Tensor mask_t = Tensor::from_data(a.shape(), std::move(mask));
    auto grad_fn = [mask_t](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{mul(g, mask_t)};
    };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, std::move(grad_fn), "relu"));
}

Tensor exp(const Tensor& a) {
    check_defined(a, "exp");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = std::exp(da[i]);
    auto grad_fn = [](const Tensor& self, const Tensor& g) {
        return std::vector<Tensor>{mul(g, self)};
    };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, grad_fn, "exp"));
}

Tensor log(const Tensor& a) {
    check_defined(a, "log");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        if (da[i] <= 0.0) {
            throw NumericDomainError("log: non-positive input " + std::to_string(da[i]));
        }
        out[i] = std::log(da[i]);
    }
    auto grad_fn = [a](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{mul(g, recip(a))};
    };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, std::move(grad_fn), "log"));
}

Tensor sqrt(const Tensor& a) {
    check_defined(a, "sqrt");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        if (da[i] < 0.0) {
            throw NumericDomainError("sqrt: negative input " + std::to_string(da[i]));
        }
        out[i] = std::sqrt(da[i]);
    }
    auto grad_fn = [](const Tensor& self, const Tensor& g) {
        return std::vector<Tensor>{scale(mul(g, recip(self)), 0.5)};
    };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, grad_fn, "sqrt"));
}

Tensor recip(const Tensor& a) {
    check_defined(a, "recip");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = 1.0 / da[i];
    auto grad_fn = [](const Tensor& self, const Tensor& g) {
        return std::vector<Tensor>{scale(mul(g, mul(self, self)), -1.0)};
    };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, grad_fn, "recip"));
}

Tensor scale(const Tensor& a, double c) {
    check_defined(a, "scale");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] * c;
    auto grad_fn = [c](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{scale(g, c)};
    };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, grad_fn, "scale"));
}

Tensor add_const(const Tensor& a, double c) {
    check_defined(a, "add_const");
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] + c;
    auto grad_fn = [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{g}; };
    return Tensor::wrap(make_node(a.shape(), std::move(out), {a.node()}, grad_fn, "add_const"));
}

// ---- reductions ------------------------------------------------------------

namespace {

Shape drop_axes(const Shape& shape, const std::vector<std::size_t>& axes) {
    Shape out;
    std::size_t ai = 0;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (ai < axes.size() && axes[ai] == i) {
            ++ai;
            continue;
        }
        out.push_back(shape[i]);
    }
    return out;
}

std::vector<double> reduce_sum_data(const Tensor& a, const std::vector<std::size_t>& axes,
                                    const Shape& out_shape) {
    const Shape& in_shape = a.shape();
    const auto in_strides = row_major_strides(in_shape);
    const auto out_strides = row_major_strides(out_shape);
    std::vector<bool> reduced(in_shape.size(), false);
    for (auto ax : axes) reduced[ax] = true;

    std::vector<double> out(shape_numel(out_shape), 0.0);
    const auto& da = a.data();
    std::vector<std::size_t> idx(in_shape.size(), 0);
    for (std::size_t flat = 0; flat < da.size(); ++flat) {
        std::size_t rem = flat, out_flat = 0, oi = 0;
        for (std::size_t d = 0; d < in_shape.size(); ++d) {
            const std::size_t coord = rem / in_strides[d];
            rem %= in_strides[d];
            if (!reduced[d]) {
                out_flat += coord * out_strides[oi];
                ++oi;
            }
        }
        out[out_flat] += da[flat];
    }
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, std::vector<std::size_t> axes) {
    check_defined(a, "reduce_sum");
    axes = normalize_axes(std::move(axes), a.rank(), "reduce_sum");
    Shape out_shape = drop_axes(a.shape(), axes);
    std::vector<double> out = reduce_sum_data(a, axes, out_shape);
    Shape in_shape = a.shape();
    auto grad_fn = [in_shape, axes](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{expand(g, in_shape, axes)};
    };
    return Tensor::wrap(
        make_node(std::move(out_shape), std::move(out), {a.node()}, std::move(grad_fn), "sum"));
}

Tensor reduce_mean(const Tensor& a, std::vector<std::size_t> axes) {
    check_defined(a, "reduce_mean");
    axes = normalize_axes(std::move(axes), a.rank(), "reduce_mean");
    std::size_t count = 1;
    for (auto ax : axes) count *= a.shape()[ax];
    if (count == 0) throw DimensionError("reduce_mean: empty reduction");
    Shape out_shape = drop_axes(a.shape(), axes);
    std::vector<double> out = reduce_sum_data(a, axes, out_shape);
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& v : out) v *= inv;
    Shape in_shape = a.shape();
    auto grad_fn = [in_shape, axes, inv](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{scale(expand(g, in_shape, axes), inv)};
    };
    return Tensor::wrap(
        make_node(std::move(out_shape), std::move(out), {a.node()}, std::move(grad_fn), "mean"));
}

Tensor expand(const Tensor& a, Shape target_shape, std::vector<std::size_t> axes) {
    check_defined(a, "expand");
    axes = normalize_axes(std::move(axes), target_shape.size(), "expand");
    if (drop_axes(target_shape, axes) != a.shape()) {
        throw DimensionError("expand: " + shape_to_string(a.shape()) + " does not match " +
                             shape_to_string(target_shape) + " minus expanded axes");
    }
    const auto out_strides = row_major_strides(target_shape);
    const auto in_strides = row_major_strides(a.shape());
    std::vector<bool> expanded(target_shape.size(), false);
    for (auto ax : axes) expanded[ax] = true;

    std::vector<double> out(shape_numel(target_shape));
    const auto& da = a.data();
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t rem = flat, in_flat = 0, ii = 0;
        for (std::size_t d = 0; d < target_shape.size(); ++d) {
            const std::size_t coord = rem / out_strides[d];
            rem %= out_strides[d];
            if (!expanded[d]) {
                in_flat += coord * in_strides[ii];
                ++ii;
            }
        }
        out[flat] = da[in_flat];
    }
    auto grad_fn = [axes](const Tensor&, const Tensor& g) {
        return std::vector<Tensor>{reduce_sum(g, axes)};
    };
    return Tensor::wrap(
        make_node(std::move(target_shape), std::move(out), {a.node()}, std::move(grad_fn), "expand"));
}

// ---- composites ------------------------------------------------------------

Tensor l2_normalize(const Tensor& v) {
    check_defined(v, "l2_normalize");
    if (v.rank() != 1) {
        throw DimensionError("l2_normalize: expected rank-1 tensor, got " +
                             shape_to_string(v.shape()));
    }
    Tensor norm_sq = reduce_sum(mul(v, v));
    if (!std::isfinite(norm_sq.value())) {
        throw NumericalError("l2_normalize: non-finite input norm");
    }
    if (norm_sq.value() <= 0.0) {
        throw DegenerateInputError("l2_normalize: zero vector");
    }
    return mul(v, recip(sqrt(norm_sq)));
}

Tensor l2_normalize_rows(const Tensor& m) {
    check_defined(m, "l2_normalize_rows");
    check_rank2(m, "l2_normalize_rows");
    Tensor norm_sq = reduce_sum(mul(m, m), {1});
    for (double v : norm_sq.data()) {
        if (!std::isfinite(v)) throw NumericalError("l2_normalize_rows: non-finite row norm");
        if (v <= 0.0) throw DegenerateInputError("l2_normalize_rows: zero row");
    }
    Tensor inv_norm = recip(sqrt(norm_sq));
    return mul(m, expand(inv_norm, m.shape(), {1}));
}

Tensor log_sum_exp_rows(const Tensor& m) {
    check_defined(m, "log_sum_exp_rows");
    check_rank2(m, "log_sum_exp_rows");
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    if (cols == 0) throw DimensionError("log_sum_exp_rows: empty rows");
    std::vector<double> row_max(rows);
    const auto& dm = m.data();
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = dm[i * cols];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, dm[i * cols + j]);
        row_max[i] = mx;
    }
    // The max shift is a constant: its derivative contribution cancels exactly.
    Tensor shift = Tensor::from_data({rows}, row_max);
    Tensor centered = sub(m, expand(shift, m.shape(), {1}));
    Tensor sums = reduce_sum(exp(centered), {1});
    return add(log(sums), shift);
}

// ---- backward --------------------------------------------------------------

namespace {

struct GradFlow {
    std::vector<std::shared_ptr<TensorNode>> order;          // reachable, id-descending
    std::unordered_map<TensorNode*, Tensor> grads;           // node -> gradient tensor
};

// Propagates gradients from a one-element loss through every reachable node
// that requires grad, visiting each node once in reverse construction order.
GradFlow compute_grad_flow(const Tensor& loss) {
    GradFlow flow;
    if (!loss.requires_grad()) return flow;

    std::unordered_set<TensorNode*> seen;
    std::vector<std::shared_ptr<TensorNode>> stack{loss.node()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto node = stack.back();
        stack.pop_back();
        flow.order.push_back(node);
        for (const auto& p : node->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
        }
    }
    std::sort(flow.order.begin(), flow.order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    flow.grads.emplace(loss.node().get(), Tensor::ones(loss.shape()));
    for (const auto& node : flow.order) {
        auto it = flow.grads.find(node.get());
        if (it == flow.grads.end() || !node->grad_fn) continue;
        const Tensor self = Tensor::wrap(node);
        std::vector<Tensor> parent_grads = node->grad_fn(self, it->second);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            const auto& parent = node->parents[i];
            if (!parent->requires_grad || i >= parent_grads.size() ||
                !parent_grads[i].defined()) {
                continue;
            }
            auto [slot, inserted] = flow.grads.emplace(parent.get(), parent_grads[i]);
            if (!inserted) slot->second = add(slot->second, parent_grads[i]);
        }
    }
    return flow;
}

}  // namespace

void backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be one-element, got " +
                            shape_to_string(loss.shape()));
    }
    GradFlow flow = compute_grad_flow(loss);
    for (const auto& node : flow.order) {
        auto it = flow.grads.find(node.get());
        if (it == flow.grads.end()) continue;
        const auto& g = it->second.data();
        if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
}

std::vector<Tensor> grad_tensors(const Tensor& loss, std::span<const Tensor> wrt) {
    check_defined(loss, "grad_tensors");
    if (loss.numel() != 1) {
        throw ContractError("grad_tensors: loss must be one-element, got " +
                            shape_to_string(loss.shape()));
    }
    GradFlow flow = compute_grad_flow(loss);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const auto& t : wrt) {
        check_defined(t, "grad_tensors");
        auto it = flow.grads.find(t.node().get());
        out.push_back(it != flow.grads.end() ? it->second : Tensor::zeros(t.shape()));
    }
    return out;
}

// ---- symmetric eigendecomposition ------------------------------------------

SymEigResult sym_eig(const Tensor& m) {
    check_defined(m, "sym_eig");
    check_rank2(m, "sym_eig");
    const std::size_t d = m.shape()[0];
    if (m.shape()[1] != d) {
        throw DimensionError("sym_eig: expected square matrix, got " + shape_to_string(m.shape()));
    }
    const auto& dm = m.data();
    double frob = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (std::abs(dm[i * d + j] - dm[j * d + i]) > 1e-9) {
                throw ContractError("sym_eig: matrix is not symmetric within 1e-9");
            }
            frob += dm[i * d + j] * dm[i * d + j];
        }
    }
    frob = std::sqrt(frob);

    // Work on the symmetrized copy; V accumulates the rotations.
    std::vector<double> a(d * d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) a[i * d + j] = 0.5 * (dm[i * d + j] + dm[j * d + i]);
    std::vector<double> v(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;

    const double tol = 1e-12 * std::max(1.0, frob);
    const int max_sweeps = 128;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += 2.0 * a[p * d + q] * a[p * d + q];
        if (std::sqrt(off) <= tol) break;

        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::abs(apq) <= tol / static_cast<double>(d * d)) continue;
                const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < d; ++i) {
                    const double aip = a[i * d + p], aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double api = a[p * d + i], aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double vip = v[i * d + p], viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    std::sort(perm.begin(), perm.end(),
              [&](std::size_t x, std::size_t y) { return a[x * d + x] > a[y * d + y]; });

    SymEigResult result;
    result.dim = d;
    result.eigenvalues.resize(d);
    result.eigenvectors.resize(d * d);
    for (std::size_t j = 0; j < d; ++j) {
        result.eigenvalues[j] = a[perm[j] * d + perm[j]];
        for (std::size_t i = 0; i < d; ++i) result.eigenvectors[i * d + j] = v[i * d + perm[j]];
    }
    return result;
}

}  // namespace cdml
