#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ternq/tensor.hpp"

namespace ternq {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

/// Reverse-mode gradient tape. Values are appended in creation order, which is
/// a topological order of the computation; backward() replays it in reverse.
template <class T>
class Tape {
public:
    using TensorT = BasicTensor<T>;
    using BackwardFn = std::function<void(Tape&, const TensorT& out_grad)>;

    Var leaf(TensorT value, bool requires_grad = true);
    Var constant(TensorT value) { return leaf(std::move(value), false); }

    /// Appends an op result. `fn` is dropped when no input requires a gradient.
    Var record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn);

    const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient accumulated by the last backward(); zeros for untouched values.
    TensorT grad(Var v) const;

    /// Adds `g` into the gradient buffer of `v` (no-op when `v` is not tracked).
    void accumulate(Var v, const TensorT& g);
    /// Direct access to the gradient buffer of a tracked value, allocated on demand.
    TensorT& grad_buffer(Var v);

    /// Propagates d(loss)/d(.) to every tracked value. `loss` must hold one element.
    void backward(Var loss);

    /// Ids of ops whose backward rule ran during the last backward(), in call order.
    const std::vector<std::size_t>& last_backward_order() const { return visited_; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        TensorT value;
        TensorT grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::size_t> visited_;
};

extern template class Tape<float>;
extern template class Tape<double>;

enum class ActScheme { none, minmax8, symmetric8 };

namespace ops {

template <class T> Var add(Tape<T>& tape, Var a, Var b);
template <class T> Var sub(Tape<T>& tape, Var a, Var b);
template <class T> Var mul(Tape<T>& tape, Var a, Var b);
template <class T> Var scale(Tape<T>& tape, Var a, T factor);
/// x[r, c] + bias[c]
template <class T> Var add_bias(Tape<T>& tape, Var x, Var bias);

/// a[m x k] * b[k x n]
template <class T> Var matmul(Tape<T>& tape, Var a, Var b);
/// x[m x in] * w[out x in]^T (+ bias[out]); weights use the [out, in] layout.
template <class T> Var linear(Tape<T>& tape, Var x, Var weight);
template <class T> Var linear(Tape<T>& tape, Var x, Var weight, Var bias);

template <class T> Var gelu(Tape<T>& tape, Var x);
template <class T> Var softmax_rows(Tape<T>& tape, Var x);
template <class T> Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, double eps = 1e-12);

/// Per-head raw scores A[b, h, i, j] = sum_c q[b*n + i, h*dh + c] * k[b*n + j, h*dh + c].
template <class T> Var head_scores(Tape<T>& tape, Var q, Var k, std::size_t batch, std::size_t heads);
/// Concatenated heads: out[b*n + i, h*dh + c] = sum_j p[b, h, i, j] * v[b*n + j, h*dh + c].
template <class T> Var head_context(Tape<T>& tape, Var probs, Var v, std::size_t batch, std::size_t heads);

/// Row gather; the backward pass scatter-adds into `table`.
template <class T> Var embedding(Tape<T>& tape, Var table, std::span<const int> ids);
template <class T> Var select_rows(Tape<T>& tape, Var x, std::span<const std::size_t> rows);
/// Elementwise x * mask; mask already carries the 1/(1-p) rescale.
template <class T> Var dropout(Tape<T>& tape, Var x, std::vector<T> mask);

/// Per-tensor 8-bit fake quantization with a clipped straight-through backward.
template <class T> Var fake_quant(Tape<T>& tape, Var x, ActScheme scheme);

template <class T> Var sum(Tape<T>& tape, Var x);
/// Mean of squared differences over all elements.
template <class T> Var mse(Tape<T>& tape, Var a, Var b);
/// -sum softmax(teacher/temp) * log softmax(student/temp), averaged over rows.
template <class T> Var soft_cross_entropy(Tape<T>& tape, Var student_logits, Var teacher_logits,
                                          double temperature = 1.0);
template <class T> Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels);

}  // namespace ops

/// Exact GeLU x * Phi(x).
double gelu_value(double x);

}  // namespace ternq
