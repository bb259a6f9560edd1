#include "ternq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ternq/act_quant.hpp"

namespace ternq {

double gelu_value(double x) { return 0.5 * x * std::erfc(-x / std::numbers::sqrt2); }

namespace {

double gelu_grad(double x) {
    const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

void require_matrix(const Shape& s, const char* op) {
    if (s.size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(s));
}

// c[m x n] = a[m x k] * b[n x k]^T, accumulated in double.
template <class T>
BasicTensor<T> dot_rows(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
    BasicTensor<T> c(Shape{m, n});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* ra = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* rb = pb + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(ra[p]) * static_cast<double>(rb[p]);
            pc[i * n + j] = static_cast<T>(acc);
        }
    }
    return c;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    const std::size_t m = a.rows(), n = a.cols();
    BasicTensor<T> t(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

template <class T>
BasicTensor<T> column_sums(const BasicTensor<T>& g) {
    const std::size_t m = g.rows(), n = g.cols();
    BasicTensor<T> out(Shape{n});
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += g[i * n + j];
        out[j] = static_cast<T>(acc);
    }
    return out;
}

template <class T>
BasicTensor<T> scalar_like(double v) {
    return BasicTensor<T>::scalar(static_cast<T>(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <class T>
Var Tape<T>::leaf(TensorT value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
}

template <class T>
Var Tape<T>::record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool tracked = false;
    for (Var v : inputs) tracked = tracked || nodes_.at(v.id).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, tracked, tracked ? std::move(fn) : BackwardFn{}});
    return Var{nodes_.size() - 1};
}

template <class T>
typename Tape<T>::TensorT Tape<T>::grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.shape() == n.value.shape()) return n.grad;
    return TensorT(n.value.shape());
}

template <class T>
typename Tape<T>::TensorT& Tape<T>::grad_buffer(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.shape() != n.value.shape()) n.grad = TensorT(n.value.shape());
    return n.grad;
}

template <class T>
void Tape<T>::accumulate(Var v, const TensorT& g) {
    if (!nodes_.at(v.id).requires_grad) return;
    TensorT& buf = grad_buffer(v);
    require_same_shape(buf.shape(), g.shape(), "accumulate");
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template <class T>
void Tape<T>::backward(Var loss) {
    if (nodes_.at(loss.id).value.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got shape " +
                            shape_str(nodes_.at(loss.id).value.shape()));
    }
    for (Node& n : nodes_) n.grad = TensorT{};
    visited_.clear();
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss)[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.backward || n.grad.shape() != n.value.shape()) continue;
        visited_.push_back(id);
        n.backward(*this, n.grad);
    }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

namespace ops {

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require_same_shape(va.shape(), vb.shape(), "add");
    BasicTensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

template <class T>
Var sub(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require_same_shape(va.shape(), vb.shape(), "sub");
    BasicTensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(a, g);
        BasicTensor<T> neg(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        t.accumulate(b, neg);
    });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require_same_shape(va.shape(), vb.shape(), "mul");
    BasicTensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xa = t.value(a);
        const auto& xb = t.value(b);
        BasicTensor<T> ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] = g[i] * xb[i];
            gb[i] = g[i] * xa[i];
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
    });
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
    const auto& va = tape.value(a);
    BasicTensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
    return tape.record(std::move(out), {a}, [a, factor](Tape<T>& t, const BasicTensor<T>& g) {
        BasicTensor<T> ga(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * factor;
        t.accumulate(a, ga);
    });
}

template <class T>
Var add_bias(Tape<T>& tape, Var x, Var bias) {
    const auto& vx = tape.value(x);
    const auto& vb = tape.value(bias);
    if (vb.size() != vx.cols()) throw DimensionError("add_bias: bias length does not match last dimension");
    BasicTensor<T> out(vx.shape());
    const std::size_t n = vx.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] + vb[i % n];
    return tape.record(std::move(out), {x, bias}, [x, bias](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(x, g);
        if (t.requires_grad(bias)) {
            auto cs = column_sums(g);
            t.accumulate(bias, BasicTensor<T>(t.value(bias).shape(), cs.storage()));
        }
    });
}

template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require_matrix(va.shape(), "matmul");
    require_matrix(vb.shape(), "matmul");
    if (va.dim(1) != vb.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(va.shape()) + " x " +
                             shape_str(vb.shape()));
    }
    auto out = dot_rows(va, transpose(vb));
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xa = t.value(a);
        const auto& xb = t.value(b);
        if (t.requires_grad(a)) t.accumulate(a, dot_rows(g, xb));
        if (t.requires_grad(b)) t.accumulate(b, dot_rows(transpose(xa), transpose(g)));
    });
}

template <class T>
Var linear(Tape<T>& tape, Var x, Var weight) {
    const auto& vx = tape.value(x);
    const auto& vw = tape.value(weight);
    require_matrix(vx.shape(), "linear");
    require_matrix(vw.shape(), "linear");
    if (vx.dim(1) != vw.dim(1)) {
        throw DimensionError("linear: input width " + std::to_string(vx.dim(1)) + " vs weight " +
                             shape_str(vw.shape()));
    }
    auto out = dot_rows(vx, vw);
    return tape.record(std::move(out), {x, weight}, [x, weight](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xv = t.value(x);
        const auto& wv = t.value(weight);
        if (t.requires_grad(x)) t.accumulate(x, dot_rows(g, transpose(wv)));
        if (t.requires_grad(weight)) t.accumulate(weight, dot_rows(transpose(g), transpose(xv)));
    });
}

template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
    return add_bias(tape, linear(tape, x, weight), bias);
}

template <class T>
Var gelu(Tape<T>& tape, Var x) {
    const auto& vx = tape.value(x);
    BasicTensor<T> out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(gelu_value(vx[i]));
    return tape.record(std::move(out), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xv = t.value(x);
        BasicTensor<T> gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = static_cast<T>(g[i] * gelu_grad(xv[i]));
        t.accumulate(x, gx);
    });
}

template <class T>
Var softmax_rows(Tape<T>& tape, Var x) {
    const auto& vx = tape.value(x);
    const std::size_t n = vx.cols();
    if (n == 0) throw DimensionError("softmax_rows: empty last dimension");
    BasicTensor<T> out(vx.shape());
    for (std::size_t r = 0; r < vx.rows(); ++r) {
        auto in = vx.row(r);
        auto o = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        std::vector<double> e(n);
        for (std::size_t c = 0; c < n; ++c) {
            e[c] = std::exp(static_cast<double>(in[c]) - mx);
            total += e[c];
        }
        for (std::size_t c = 0; c < n; ++c) o[c] = static_cast<T>(e[c] / total);
    }
    const Var self{tape.size()};
    return tape.record(std::move(out), {x}, [x, self](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& y = t.value(self);
        const std::size_t cols = y.cols();
        BasicTensor<T> gx(g.shape());
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c]) * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                gx[r * cols + c] = static_cast<T>(y[r * cols + c] * (g[r * cols + c] - dot));
            }
        }
        t.accumulate(x, gx);
    });
}

template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, double eps) {
    const auto& vx = tape.value(x);
    const std::size_t n = vx.cols();
    if (tape.value(gain).size() != n || tape.value(bias).size() != n) {
        throw DimensionError("layer_norm: gain/bias length must equal last dimension");
    }
    const auto& vg = tape.value(gain);
    const auto& vb = tape.value(bias);
    const std::size_t rows = vx.rows();
    BasicTensor<T> out(vx.shape());
    auto xhat = std::make_shared<std::vector<double>>(vx.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        auto in = vx.row(r);
        double mean = 0.0;
        for (T v : in) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (T v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::size_t c = 0; c < n; ++c) {
            const double h = (in[c] - mean) * inv;
            (*xhat)[r * n + c] = h;
            out[r * n + c] = static_cast<T>(h * vg[c] + vb[c]);
        }
    }
    return tape.record(std::move(out), {x, gain, bias},
                       [x, gain, bias, xhat, inv_std](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto& gv = t.value(gain);
                           const std::size_t cols = gv.size();
                           const std::size_t nrows = g.size() / cols;
                           std::vector<double> dgain(cols, 0.0), dbias(cols, 0.0);
                           BasicTensor<T> gx(g.shape());
                           for (std::size_t r = 0; r < nrows; ++r) {
                               double sum_d = 0.0, sum_dh = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const double gr = g[r * cols + c];
                                   const double h = (*xhat)[r * cols + c];
                                   dgain[c] += gr * h;
                                   dbias[c] += gr;
                                   const double d = gr * gv[c];
                                   sum_d += d;
                                   sum_dh += d * h;
                               }
                               const double inv = (*inv_std)[r];
                               const double nn = static_cast<double>(cols);
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const double d = g[r * cols + c] * static_cast<double>(gv[c]);
                                   const double h = (*xhat)[r * cols + c];
                                   gx[r * cols + c] = static_cast<T>(inv / nn * (nn * d - sum_d - h * sum_dh));
                               }
                           }
                           t.accumulate(x, gx);
                           if (t.requires_grad(gain)) {
                               t.accumulate(gain, BasicTensor<T>(gv.shape(), std::vector<T>(dgain.begin(), dgain.end())));
                           }
                           if (t.requires_grad(bias)) {
                               t.accumulate(bias, BasicTensor<T>(t.value(bias).shape(),
                                                                 std::vector<T>(dbias.begin(), dbias.end())));
                           }
                       });
}

namespace {

struct HeadGeometry {
    std::size_t batch, seq, heads, width, head_dim;
};

HeadGeometry head_geometry(const Shape& s, std::size_t batch, std::size_t heads, const char* op) {
    require_matrix(s, op);
    if (batch == 0 || heads == 0 || s[0] % batch != 0 || s[1] % heads != 0) {
        throw DimensionError(std::string(op) + ": shape " + shape_str(s) + " incompatible with batch " +
                             std::to_string(batch) + " and heads " + std::to_string(heads));
    }
    return {batch, s[0] / batch, heads, s[1], s[1] / heads};
}

}  // namespace

template <class T>
Var head_scores(Tape<T>& tape, Var q, Var k, std::size_t batch, std::size_t heads) {
    const auto& vq = tape.value(q);
    const auto& vk = tape.value(k);
    require_same_shape(vq.shape(), vk.shape(), "head_scores");
    const HeadGeometry geo = head_geometry(vq.shape(), batch, heads, "head_scores");
    const std::size_t n = geo.seq, dh = geo.head_dim, d = geo.width;
    BasicTensor<T> out(Shape{batch, heads, n, n});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                const T* qi = &vq[(b * n + i) * d + h * dh];
                for (std::size_t j = 0; j < n; ++j) {
                    const T* kj = &vk[(b * n + j) * d + h * dh];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += static_cast<double>(qi[c]) * kj[c];
                    out[((b * heads + h) * n + i) * n + j] = static_cast<T>(acc);
                }
            }
    return tape.record(std::move(out), {q, k}, [q, k, geo](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xq = t.value(q);
        const auto& xk = t.value(k);
        const std::size_t n = geo.seq, dh = geo.head_dim, d = geo.width;
        BasicTensor<T> gq(xq.shape()), gk(xk.shape());
        for (std::size_t b = 0; b < geo.batch; ++b)
            for (std::size_t h = 0; h < geo.heads; ++h)
                for (std::size_t c = 0; c < dh; ++c) {
                    const std::size_t col = h * dh + c;
                    for (std::size_t i = 0; i < n; ++i) {
                        double aq = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            aq += static_cast<double>(g[((b * geo.heads + h) * n + i) * n + j]) * xk[(b * n + j) * d + col];
                        }
                        gq[(b * n + i) * d + col] = static_cast<T>(aq);
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        double ak = 0.0;
                        for (std::size_t i = 0; i < n; ++i) {
                            ak += static_cast<double>(g[((b * geo.heads + h) * n + i) * n + j]) * xq[(b * n + i) * d + col];
                        }
                        gk[(b * n + j) * d + col] = static_cast<T>(ak);
                    }
                }
        t.accumulate(q, gq);
        t.accumulate(k, gk);
    });
}

template <class T>
Var head_context(Tape<T>& tape, Var probs, Var v, std::size_t batch, std::size_t heads) {
    const auto& vp = tape.value(probs);
    const auto& vv = tape.value(v);
    const HeadGeometry geo = head_geometry(vv.shape(), batch, heads, "head_context");
    const std::size_t n = geo.seq, dh = geo.head_dim, d = geo.width;
    if (vp.shape() != Shape{batch, heads, n, n}) {
        throw DimensionError("head_context: probabilities have shape " + shape_str(vp.shape()));
    }
    BasicTensor<T> out(vv.shape());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                const T* pi = &vp[((b * heads + h) * n + i) * n];
                for (std::size_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(pi[j]) * vv[(b * n + j) * d + h * dh + c];
                    out[(b * n + i) * d + h * dh + c] = static_cast<T>(acc);
                }
            }
    return tape.record(std::move(out), {probs, v}, [probs, v, geo](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xp = t.value(probs);
        const auto& xv = t.value(v);
        const std::size_t n = geo.seq, dh = geo.head_dim, d = geo.width, H = geo.heads;
        BasicTensor<T> gp(xp.shape()), gv(xv.shape());
        for (std::size_t b = 0; b < geo.batch; ++b)
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            acc += static_cast<double>(g[(b * n + i) * d + h * dh + c]) * xv[(b * n + j) * d + h * dh + c];
                        }
                        gp[((b * H + h) * n + i) * n + j] = static_cast<T>(acc);
                    }
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < n; ++i) {
                            acc += static_cast<double>(xp[((b * H + h) * n + i) * n + j]) * g[(b * n + i) * d + h * dh + c];
                        }
                        gv[(b * n + j) * d + h * dh + c] = static_cast<T>(acc);
                    }
            }
        t.accumulate(probs, gp);
        t.accumulate(v, gv);
    });
}

template <class T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids) {
    const auto& vt = tape.value(table);
    require_matrix(vt.shape(), "embedding");
    const std::size_t vocab = vt.dim(0), d = vt.dim(1);
    BasicTensor<T> out(Shape{ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
            throw std::out_of_range("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                                    std::to_string(vocab) + " rows");
        }
        std::copy_n(&vt[static_cast<std::size_t>(ids[r]) * d], d, &out[r * d]);
    }
    std::vector<int> kept(ids.begin(), ids.end());
    return tape.record(std::move(out), {table}, [table, kept = std::move(kept), d](Tape<T>& t, const BasicTensor<T>& g) {
        auto& buf = t.grad_buffer(table);
        for (std::size_t r = 0; r < kept.size(); ++r)
            for (std::size_t c = 0; c < d; ++c) buf[static_cast<std::size_t>(kept[r]) * d + c] += g[r * d + c];
    });
}

template <class T>
Var select_rows(Tape<T>& tape, Var x, std::span<const std::size_t> rows) {
    const auto& vx = tape.value(x);
    const std::size_t d = vx.cols();
    BasicTensor<T> out(Shape{rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= vx.rows()) throw DimensionError("select_rows: row index out of range");
        std::copy_n(&vx[rows[r] * d], d, &out[r * d]);
    }
    std::vector<std::size_t> kept(rows.begin(), rows.end());
    return tape.record(std::move(out), {x}, [x, kept = std::move(kept), d](Tape<T>& t, const BasicTensor<T>& g) {
        auto& buf = t.grad_buffer(x);
        for (std::size_t r = 0; r < kept.size(); ++r)
            for (std::size_t c = 0; c < d; ++c) buf[kept[r] * d + c] += g[r * d + c];
    });
}

template <class T>
Var dropout(Tape<T>& tape, Var x, std::vector<T> mask) {
    const auto& vx = tape.value(x);
    if (mask.size() != vx.size()) throw DimensionError("dropout: mask length mismatch");
    BasicTensor<T> out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * mask[i];
    return tape.record(std::move(out), {x}, [x, mask = std::move(mask)](Tape<T>& t, const BasicTensor<T>& g) {
        BasicTensor<T> gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i];
        t.accumulate(x, gx);
    });
}

template <class T>
Var fake_quant(Tape<T>& tape, Var x, ActScheme scheme) {
    if (scheme == ActScheme::none) return x;
    const auto& vx = tape.value(x);
    const Tensor as_float = vx.template cast<float>();
    const QuantizedActivation q = quantize_activation(as_float, scheme);
    BasicTensor<T> out = dequantize(q).template cast<T>();
    const ActQuantParams params = q.params;
    return tape.record(std::move(out), {x}, [x, params](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xv = t.value(x);
        const double lo = params.range_lo(), hi = params.range_hi();
        BasicTensor<T> gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<float>(xv[i]);
            gx[i] = (v >= lo && v <= hi) ? g[i] : T{0};
        }
        t.accumulate(x, gx);
    });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
    const auto& vx = tape.value(x);
    double acc = 0.0;
    for (T v : vx.data()) acc += v;
    return tape.record(scalar_like<T>(acc), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(x, BasicTensor<T>(t.value(x).shape(), g[0]));
    });
}

template <class T>
Var mse(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require_same_shape(va.shape(), vb.shape(), "mse");
    if (va.empty()) throw DimensionError("mse: empty operands");
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        const double d = static_cast<double>(va[i]) - vb[i];
        acc += d * d;
    }
    const double n = static_cast<double>(va.size());
    return tape.record(scalar_like<T>(acc / n), {a, b}, [a, b, n](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xa = t.value(a);
        const auto& xb = t.value(b);
        BasicTensor<T> ga(xa.shape()), gb(xa.shape());
        const double s = 2.0 * static_cast<double>(g[0]) / n;
        for (std::size_t i = 0; i < xa.size(); ++i) {
            const double d = s * (static_cast<double>(xa[i]) - xb[i]);
            ga[i] = static_cast<T>(d);
            gb[i] = static_cast<T>(-d);
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
    });
}

namespace {

std::vector<double> log_softmax_row(std::span<const double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double v : z) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
    return out;
}

}  // namespace

template <class T>
Var soft_cross_entropy(Tape<T>& tape, Var student_logits, Var teacher_logits, double temperature) {
    const auto& vs = tape.value(student_logits);
    const auto& vt = tape.value(teacher_logits);
    require_same_shape(vs.shape(), vt.shape(), "soft_cross_entropy");
    if (vs.empty()) throw DimensionError("soft_cross_entropy: empty logits");
    const std::size_t rows = vs.rows(), cols = vs.cols();
    auto student_prob = std::make_shared<std::vector<double>>(vs.size());
    auto teacher_prob = std::make_shared<std::vector<double>>(vs.size());
    double loss = 0.0;
    std::vector<double> zs(cols), zt(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            zs[c] = vs[r * cols + c] / temperature;
            zt[c] = vt[r * cols + c] / temperature;
        }
        const auto ls = log_softmax_row(zs);
        const auto lt = log_softmax_row(zt);
        for (std::size_t c = 0; c < cols; ++c) {
            const double pt = std::exp(lt[c]);
            (*teacher_prob)[r * cols + c] = pt;
            (*student_prob)[r * cols + c] = std::exp(ls[c]);
            loss -= pt * ls[c];
        }
    }
    loss /= static_cast<double>(rows);
    // The teacher side is a fixed target: no gradient flows into teacher_logits.
    return tape.record(scalar_like<T>(loss), {student_logits},
                       [student_logits, student_prob, teacher_prob, rows, temperature](Tape<T>& t,
                                                                                     const BasicTensor<T>& g) {
                           BasicTensor<T> gs(t.value(student_logits).shape());
                           const double s = static_cast<double>(g[0]) / (static_cast<double>(rows) * temperature);
                           for (std::size_t i = 0; i < gs.size(); ++i) {
                               gs[i] = static_cast<T>(s * ((*student_prob)[i] - (*teacher_prob)[i]));
                           }
                           t.accumulate(student_logits, gs);
                       });
}

template <class T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
    const auto& vl = tape.value(logits);
    const std::size_t rows = vl.rows(), cols = vl.cols();
    if (labels.size() != rows || rows == 0) throw DimensionError("cross_entropy: one label per row required");
    auto prob = std::make_shared<std::vector<double>>(vl.size());
    double loss = 0.0;
    std::vector<double> z(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
            throw std::out_of_range("cross_entropy: label outside class range");
        }
        for (std::size_t c = 0; c < cols; ++c) z[c] = vl[r * cols + c];
        const auto ls = log_softmax_row(z);
        for (std::size_t c = 0; c < cols; ++c) (*prob)[r * cols + c] = std::exp(ls[c]);
        loss -= ls[static_cast<std::size_t>(labels[r])];
    }
    loss /= static_cast<double>(rows);
    std::vector<int> kept(labels.begin(), labels.end());
    return tape.record(scalar_like<T>(loss), {logits},
                       [logits, prob, kept = std::move(kept), rows, cols](Tape<T>& t, const BasicTensor<T>& g) {
                           BasicTensor<T> gl(t.value(logits).shape());
                           const double s = static_cast<double>(g[0]) / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const double target = static_cast<std::size_t>(kept[r]) == c ? 1.0 : 0.0;
                                   gl[r * cols + c] = static_cast<T>(s * ((*prob)[r * cols + c] - target));
                               }
                           t.accumulate(logits, gl);
                       });
}

#define TERNQ_INSTANTIATE_OPS(T)                                                                  \
    template Var add<T>(Tape<T>&, Var, Var);                                                      \
    template Var sub<T>(Tape<T>&, Var, Var);                                                      \
    template Var mul<T>(Tape<T>&, Var, Var);                                                      \
    template Var scale<T>(Tape<T>&, Var, T);                                                      \
    template Var add_bias<T>(Tape<T>&, Var, Var);                                                 \
    template Var matmul<T>(Tape<T>&, Var, Var);                                                   \
    template Var linear<T>(Tape<T>&, Var, Var);                                                   \
    template Var linear<T>(Tape<T>&, Var, Var, Var);                                              \
    template Var gelu<T>(Tape<T>&, Var);                                                          \
    template Var softmax_rows<T>(Tape<T>&, Var);                                                  \
    template Var layer_norm<T>(Tape<T>&, Var, Var, Var, double);                                  \
    template Var head_scores<T>(Tape<T>&, Var, Var, std::size_t, std::size_t);                    \
    template Var head_context<T>(Tape<T>&, Var, Var, std::size_t, std::size_t);                   \
    template Var embedding<T>(Tape<T>&, Var, std::span<const int>);                               \
    template Var select_rows<T>(Tape<T>&, Var, std::span<const std::size_t>);                     \
    template Var dropout<T>(Tape<T>&, Var, std::vector<T>);                                       \
    template Var fake_quant<T>(Tape<T>&, Var, ActScheme);                                         \
    template Var sum<T>(Tape<T>&, Var);                                                           \
    template Var mse<T>(Tape<T>&, Var, Var);                                                      \
    template Var soft_cross_entropy<T>(Tape<T>&, Var, Var, double);                               \
    template Var cross_entropy<T>(Tape<T>&, Var, std::span<const int>);

TERNQ_INSTANTIATE_OPS(float)
TERNQ_INSTANTIATE_OPS(double)

#undef TERNQ_INSTANTIATE_OPS

}  // namespace ops
}  // namespace ternq
