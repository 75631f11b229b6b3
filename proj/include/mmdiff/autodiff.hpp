#ifndef MMDIFF_AUTODIFF_HPP
#define MMDIFF_AUTODIFF_HPP

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "mmdiff/tensor.hpp"

namespace mmdiff::ad {

// Reverse-mode tape. Every op appends a node holding the forward value and,
// when the tape is recording, a closure that accumulates parent gradients.
// Creation order is a topological order, so backward() is a single reverse
// sweep. With recording off the same ops run as plain eager evaluation, which
// keeps instrumented and plain forward passes on one code path.

class Tape;

struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Var constant(Tensor value) {
        return push_op(std::move(value), false, nullptr);
    }

    // Trainable leaf. The value is copied onto the tape; after backward() the
    // accumulated gradient is added into *grad_sink.
    Var param(const Tensor& value, Tensor* grad_sink) {
        Var v = push_op(Tensor(value), true, nullptr);
        if (recording_) node(v.id).grad_sink = grad_sink;
        return v;
    }

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

    Tensor& grad(Var v) { return ensure_grad(v.id); }
    bool has_grad(Var v) const { return !nodes_[static_cast<size_t>(v.id)].grad.v.empty(); }

    void backward(Var loss) {
        if (!recording_) throw std::logic_error("backward on non-recording tape");
        if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        ensure_grad(loss.id).v[0] += 1.0;
        for (int32_t id = static_cast<int32_t>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.v.empty()) continue;
            if (n.backprop) n.backprop(*this);
            if (n.grad_sink != nullptr) {
                check_same_shape(*n.grad_sink, n.grad, "param grad sink");
                for (int64_t i = 0; i < n.grad.numel(); ++i) {
                    n.grad_sink->v[static_cast<size_t>(i)] += n.grad[i];
                }
            }
        }
    }

    size_t size() const { return nodes_.size(); }

    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily during backward
        std::function<void(Tape&)> backprop;
        Tensor* grad_sink = nullptr;
        bool requires_grad = false;
    };

    // back(tape, out_id) runs during the reverse sweep with out grad populated.
    Var push_op(Tensor value, bool requires_grad, std::function<void(Tape&, int32_t)> back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = recording_ && requires_grad;
        nodes_.push_back(std::move(n));
        int32_t id = static_cast<int32_t>(nodes_.size() - 1);
        if (nodes_.back().requires_grad && back) {
            nodes_.back().backprop = [back, id](Tape& tp) { back(tp, id); };
        }
        return Var{this, id};
    }

    Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }

    Tensor& ensure_grad(int32_t id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.v.empty()) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

private:
    std::vector<Node> nodes_;
    bool recording_;
};

inline void same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": vars from different tapes");
}

/*================================ elementwise ================================*/

inline Var add(Var a, Var b) {
    same_tape(a, b, "add");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    check_same_shape(av, bv, "add");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        if (ra) {
            Tensor& ga = tp.ensure_grad(ai);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (rb) {
            Tensor& gb = tp.ensure_grad(bi);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    same_tape(a, b, "sub");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    check_same_shape(av, bv, "sub");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        if (ra) {
            Tensor& ga = tp.ensure_grad(ai);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (rb) {
            Tensor& gb = tp.ensure_grad(bi);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    same_tape(a, b, "mul");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    check_same_shape(av, bv, "mul");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        if (ra) {
            Tensor& ga = tp.ensure_grad(ai);
            const Tensor& bvv = tp.node(bi).value;
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bvv[i];
        }
        if (rb) {
            Tensor& gb = tp.ensure_grad(bi);
            const Tensor& avv = tp.node(ai).value;
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * avv[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& e : out.v) e *= c;
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, c](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
}

inline Var add_const(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& e : out.v) e += c;
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

inline Var silu(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& e : out.v) {
        double s = 1.0 / (1.0 + std::exp(-e));
        e = e * s;
    }
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& x = tp.node(ai).value;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-x[i]));
            ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& e : out.v) e = 1.0 / (1.0 + std::exp(-e));
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& y = tp.node(oi).value;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

inline Var abs(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& e : out.v) e = std::fabs(e);
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& x = tp.node(ai).value;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
            ga[i] += g[i] * s;
        }
    });
}

// y = x / s with s a scalar var
inline Var div_scalar(Var a, Var s) {
    same_tape(a, s, "div_scalar");
    Tape& t = *a.tape;
    if (t.val(s).numel() != 1) throw std::invalid_argument("div_scalar: divisor must be scalar");
    double sv = t.val(s)[0];
    Tensor out = t.val(a);
    for (double& e : out.v) e /= sv;
    bool rg = t.requires_grad(a) || t.requires_grad(s);
    int32_t ai = a.id, si = s.id;
    bool ra = t.requires_grad(a), rs = t.requires_grad(s);
    return t.push_op(std::move(out), rg, [ai, si, ra, rs](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& x = tp.node(ai).value;
        double sv2 = tp.node(si).value[0];
        if (ra) {
            Tensor& ga = tp.ensure_grad(ai);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / sv2;
        }
        if (rs) {
            double acc = 0.0;
            for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * (-x[i] / (sv2 * sv2));
            tp.ensure_grad(si)[0] += acc;
        }
    });
}

/*================================ reductions ================================*/

inline Var mean_all(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    double inv = av.numel() > 0 ? 1.0 / static_cast<double>(av.numel()) : 0.0;
    Tensor out = Tensor::scalar(av.sum() * inv);
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, inv](Tape& tp, int32_t oi) {
        double g = tp.node(oi).grad[0];
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g * inv;
    });
}

inline Var sum_all(Var a) {
    Tape& t = *a.tape;
    Tensor out = Tensor::scalar(t.val(a).sum());
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai](Tape& tp, int32_t oi) {
        double g = tp.node(oi).grad[0];
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

// max over all elements; subgradient routes to the first argmax
inline Var max_all(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.numel() == 0) throw std::invalid_argument("max_all: empty tensor");
    int64_t arg = 0;
    for (int64_t i = 1; i < av.numel(); ++i) {
        if (av[i] > av[arg]) arg = i;
    }
    Tensor out = Tensor::scalar(av[arg]);
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, arg](Tape& tp, int32_t oi) {
        tp.ensure_grad(ai)[arg] += tp.node(oi).grad[0];
    });
}

// mean of squared differences (the denoising objective)
inline Var mse(Var a, Var b) {
    same_tape(a, b, "mse");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    check_same_shape(av, bv, "mse");
    double acc = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    double inv = av.numel() > 0 ? 1.0 / static_cast<double>(av.numel()) : 0.0;
    Tensor out = Tensor::scalar(acc * inv);
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb, inv](Tape& tp, int32_t oi) {
        double g = tp.node(oi).grad[0];
        const Tensor& x = tp.node(ai).value;
        const Tensor& y = tp.node(bi).value;
        if (ra) {
            Tensor& ga = tp.ensure_grad(ai);
            for (int64_t i = 0; i < x.numel(); ++i) ga[i] += g * 2.0 * (x[i] - y[i]) * inv;
        }
        if (rb) {
            Tensor& gb = tp.ensure_grad(bi);
            for (int64_t i = 0; i < x.numel(); ++i) gb[i] -= g * 2.0 * (x[i] - y[i]) * inv;
        }
    });
}

/*================================ linear algebra ================================*/

// C[n,m] = A[n,k] * B[k,m]
inline Var matmul(Var a, Var b) {
    same_tape(a, b, "matmul");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[0]) {
        throw std::invalid_argument("matmul: bad shapes " + av.shape_str() + " x " + bv.shape_str());
    }
    int64_t n = av.shape[0], k = av.shape[1], m = bv.shape[1];
    Tensor out({n, m});
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = av.data() + i * k;
        double* orow = out.data() + i * m;
        for (int64_t kk = 0; kk < k; ++kk) {
            double aik = arow[kk];
            const double* brow = bv.data() + kk * m;
            for (int64_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
        }
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb, n, k, m](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& av2 = tp.node(ai).value;
        const Tensor& bv2 = tp.node(bi).value;
        if (ra) {  // dA = g * B^T
            Tensor& ga = tp.ensure_grad(ai);
            for (int64_t i = 0; i < n; ++i) {
                const double* grow = g.data() + i * m;
                double* garow = ga.data() + i * k;
                for (int64_t kk = 0; kk < k; ++kk) {
                    const double* brow = bv2.data() + kk * m;
                    double acc = 0.0;
                    for (int64_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                    garow[kk] += acc;
                }
            }
        }
        if (rb) {  // dB = A^T * g
            Tensor& gb = tp.ensure_grad(bi);
            for (int64_t i = 0; i < n; ++i) {
                const double* arow = av2.data() + i * k;
                const double* grow = g.data() + i * m;
                for (int64_t kk = 0; kk < k; ++kk) {
                    double aik = arow[kk];
                    double* gbrow = gb.data() + kk * m;
                    for (int64_t j = 0; j < m; ++j) gbrow[j] += aik * grow[j];
                }
            }
        }
    });
}

// C[n,m] = A[n,k] * B[m,k]^T
inline Var matmul_nt(Var a, Var b) {
    same_tape(a, b, "matmul_nt");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[1]) {
        throw std::invalid_argument("matmul_nt: bad shapes " + av.shape_str() + " x " + bv.shape_str());
    }
    int64_t n = av.shape[0], k = av.shape[1], m = bv.shape[0];
    Tensor out({n, m});
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = av.data() + i * k;
        double* orow = out.data() + i * m;
        for (int64_t j = 0; j < m; ++j) {
            const double* brow = bv.data() + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            orow[j] = acc;
        }
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb, n, k, m](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& av2 = tp.node(ai).value;
        const Tensor& bv2 = tp.node(bi).value;
        if (ra) {  // dA = g * B
            Tensor& ga = tp.ensure_grad(ai);
            for (int64_t i = 0; i < n; ++i) {
                const double* grow = g.data() + i * m;
                double* garow = ga.data() + i * k;
                for (int64_t j = 0; j < m; ++j) {
                    double gij = grow[j];
                    const double* brow = bv2.data() + j * k;
                    for (int64_t kk = 0; kk < k; ++kk) garow[kk] += gij * brow[kk];
                }
            }
        }
        if (rb) {  // dB = g^T * A
            Tensor& gb = tp.ensure_grad(bi);
            for (int64_t i = 0; i < n; ++i) {
                const double* grow = g.data() + i * m;
                const double* arow = av2.data() + i * k;
                for (int64_t j = 0; j < m; ++j) {
                    double gij = grow[j];
                    double* gbrow = gb.data() + j * k;
                    for (int64_t kk = 0; kk < k; ++kk) gbrow[kk] += gij * arow[kk];
                }
            }
        }
    });
}

// rows of x [..., C] plus bias [C]
inline Var add_bias(Var x, Var b) {
    same_tape(x, b, "add_bias");
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& bv = t.val(b);
    if (bv.ndim() != 1 || xv.ndim() < 1 || xv.shape.back() != bv.shape[0]) {
        throw std::invalid_argument("add_bias: bias width mismatch");
    }
    int64_t c = bv.shape[0];
    int64_t rows = xv.numel() / c;
    Tensor out = xv;
    for (int64_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * c;
        for (int64_t j = 0; j < c; ++j) row[j] += bv[j];
    }
    bool rg = t.requires_grad(x) || t.requires_grad(b);
    int32_t xi = x.id, bi = b.id;
    bool rx = t.requires_grad(x), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [xi, bi, rx, rb, rows, c](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        if (rx) {
            Tensor& gx = tp.ensure_grad(xi);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (rb) {
            Tensor& gb = tp.ensure_grad(bi);
            for (int64_t r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * c;
                for (int64_t j = 0; j < c; ++j) gb[j] += grow[j];
            }
        }
    });
}

/*================================ shape ops ================================*/

inline Var reshape(Var a, std::vector<int64_t> shape) {
    Tape& t = *a.tape;
    Tensor out = t.val(a).reshaped(shape);
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

// contiguous column slice of a [N,M] matrix
inline Var slice_cols(Var a, int64_t c0, int64_t c1) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.ndim() != 2 || c0 < 0 || c1 > av.shape[1] || c0 >= c1) {
        throw std::invalid_argument("slice_cols: bad range");
    }
    int64_t n = av.shape[0], m = av.shape[1], w = c1 - c0;
    Tensor out({n, w});
    for (int64_t i = 0; i < n; ++i) {
        const double* src = av.data() + i * m + c0;
        double* dst = out.data() + i * w;
        for (int64_t j = 0; j < w; ++j) dst[j] = src[j];
    }
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, n, m, w, c0](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * w;
            double* garow = ga.data() + i * m + c0;
            for (int64_t j = 0; j < w; ++j) garow[j] += grow[j];
        }
    });
}

// contiguous row slice of a [N,M] matrix
inline Var slice_rows(Var a, int64_t r0, int64_t r1) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.ndim() != 2 || r0 < 0 || r1 > av.shape[0] || r0 >= r1) {
        throw std::invalid_argument("slice_rows: bad range");
    }
    int64_t m = av.shape[1], h = r1 - r0;
    Tensor out({h, m});
    std::copy(av.data() + r0 * m, av.data() + r1 * m, out.data());
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, r0, m, h](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < h * m; ++i) ga[(r0 * m) + i] += g[i];
    });
}

// stack a list of [N] vectors (or equal-shape tensors) as rows of a matrix
inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
    Tape& t = *rows[0].tape;
    int64_t m = t.val(rows[0]).numel();
    int64_t n = static_cast<int64_t>(rows.size());
    Tensor out({n, m});
    bool rg = false;
    std::vector<int32_t> ids;
    ids.reserve(rows.size());
    for (int64_t i = 0; i < n; ++i) {
        const Tensor& rv = t.val(rows[static_cast<size_t>(i)]);
        if (rv.numel() != m) throw std::invalid_argument("stack_rows: ragged rows");
        std::copy(rv.v.begin(), rv.v.end(), out.data() + i * m);
        rg = rg || t.requires_grad(rows[static_cast<size_t>(i)]);
        ids.push_back(rows[static_cast<size_t>(i)].id);
    }
    return t.push_op(std::move(out), rg, [ids, m](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (!tp.node(ids[i]).requires_grad) continue;
            Tensor& gr = tp.ensure_grad(ids[i]);
            const double* grow = g.data() + static_cast<int64_t>(i) * m;
            for (int64_t j = 0; j < m; ++j) gr[j] += grow[j];
        }
    });
}

// mean over columns [c0,c1) of x [N,M] -> [N]
inline Var cols_mean(Var a, int64_t c0, int64_t c1) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.ndim() != 2 || c0 < 0 || c1 > av.shape[1] || c0 >= c1) {
        throw std::invalid_argument("cols_mean: bad range");
    }
    int64_t n = av.shape[0], m = av.shape[1];
    double inv = 1.0 / static_cast<double>(c1 - c0);
    Tensor out({n});
    for (int64_t i = 0; i < n; ++i) {
        const double* row = av.data() + i * m;
        double acc = 0.0;
        for (int64_t j = c0; j < c1; ++j) acc += row[j];
        out[i] = acc * inv;
    }
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, n, m, c0, c1, inv](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < n; ++i) {
            double gi = g[i] * inv;
            double* garow = ga.data() + i * m;
            for (int64_t j = c0; j < c1; ++j) garow[j] += gi;
        }
    });
}

// mean over rows of x [N,M] -> [M]
inline Var rows_mean(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.ndim() != 2) throw std::invalid_argument("rows_mean: expects 2-d");
    int64_t n = av.shape[0], m = av.shape[1];
    double inv = 1.0 / static_cast<double>(n);
    Tensor out({m});
    for (int64_t i = 0; i < n; ++i) {
        const double* row = av.data() + i * m;
        for (int64_t j = 0; j < m; ++j) out[j] += row[j] * inv;
    }
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, n, m, inv](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < n; ++i) {
            double* garow = ga.data() + i * m;
            for (int64_t j = 0; j < m; ++j) garow[j] += g[j] * inv;
        }
    });
}

/*================================ normalization / softmax ================================*/

inline Var softmax_rows(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.ndim() != 2) throw std::invalid_argument("softmax_rows: expects 2-d");
    int64_t n = av.shape[0], m = av.shape[1];
    Tensor out({n, m});
    for (int64_t i = 0; i < n; ++i) {
        const double* row = av.data() + i * m;
        double* orow = out.data() + i * m;
        double mx = row[0];
        for (int64_t j = 1; j < m; ++j) mx = row[j] > mx ? row[j] : mx;
        double z = 0.0;
        for (int64_t j = 0; j < m; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        double invz = 1.0 / z;
        for (int64_t j = 0; j < m; ++j) orow[j] *= invz;
    }
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, n, m](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& y = tp.node(oi).value;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * m;
            const double* yrow = y.data() + i * m;
            double dot = 0.0;
            for (int64_t j = 0; j < m; ++j) dot += grow[j] * yrow[j];
            double* garow = ga.data() + i * m;
            for (int64_t j = 0; j < m; ++j) garow[j] += yrow[j] * (grow[j] - dot);
        }
    });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    same_tape(x, gamma, "layer_norm");
    same_tape(x, beta, "layer_norm");
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(gamma);
    const Tensor& bv = t.val(beta);
    if (xv.ndim() != 2 || gv.ndim() != 1 || gv.shape[0] != xv.shape[1] || !gv.same_shape(bv)) {
        throw std::invalid_argument("layer_norm: bad shapes");
    }
    int64_t n = xv.shape[0], d = xv.shape[1];
    Tensor out({n, d});
    Tensor stats({n, 2});  // mean, inv_std per row
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv_std = 1.0 / std::sqrt(var + eps);
        stats.at(i, 0) = mu;
        stats.at(i, 1) = inv_std;
        double* orow = out.data() + i * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = (row[j] - mu) * inv_std * gv[j] + bv[j];
    }
    bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    int32_t xi = x.id, gi = gamma.id, bi = beta.id;
    bool rx = t.requires_grad(x), rga = t.requires_grad(gamma), rb = t.requires_grad(beta);
    return t.push_op(std::move(out), rg,
                     [xi, gi, bi, rx, rga, rb, n, d, stats](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& xv2 = tp.node(xi).value;
        const Tensor& gv2 = tp.node(gi).value;
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * d;
            const double* xrow = xv2.data() + i * d;
            double mu = stats.at(i, 0);
            double inv_std = stats.at(i, 1);
            if (rga || rb) {
                for (int64_t j = 0; j < d; ++j) {
                    double xh = (xrow[j] - mu) * inv_std;
                    if (rga) tp.ensure_grad(gi)[j] += grow[j] * xh;
                    if (rb) tp.ensure_grad(bi)[j] += grow[j];
                }
            }
            if (rx) {
                // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double dxh = grow[j] * gv2[j];
                    double xh = (xrow[j] - mu) * inv_std;
                    m1 += dxh;
                    m2 += dxh * xh;
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                Tensor& gx = tp.ensure_grad(xi);
                double* gxrow = gx.data() + i * d;
                for (int64_t j = 0; j < d; ++j) {
                    double dxh = grow[j] * gv2[j];
                    double xh = (xrow[j] - mu) * inv_std;
                    gxrow[j] += inv_std * (dxh - m1 - xh * m2);
                }
            }
        }
    });
}

// GroupNorm over an [H,W,C] activation; statistics per channel group.
inline Var group_norm(Var x, Var gamma, Var beta, int64_t groups, double eps = 1e-5) {
    same_tape(x, gamma, "group_norm");
    same_tape(x, beta, "group_norm");
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(gamma);
    if (xv.ndim() != 3) throw std::invalid_argument("group_norm: expects [H,W,C]");
    int64_t h = xv.shape[0], w = xv.shape[1], c = xv.shape[2];
    if (gv.ndim() != 1 || gv.shape[0] != c) throw std::invalid_argument("group_norm: gamma width");
    if (groups <= 0 || c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    int64_t cpg = c / groups;
    int64_t m = h * w * cpg;
    const Tensor& bv = t.val(beta);
    Tensor out({h, w, c});
    Tensor stats({groups, 2});
    for (int64_t gidx = 0; gidx < groups; ++gidx) {
        double mu = 0.0;
        for (int64_t p = 0; p < h * w; ++p) {
            const double* px = xv.data() + p * c + gidx * cpg;
            for (int64_t j = 0; j < cpg; ++j) mu += px[j];
        }
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (int64_t p = 0; p < h * w; ++p) {
            const double* px = xv.data() + p * c + gidx * cpg;
            for (int64_t j = 0; j < cpg; ++j) {
                double d = px[j] - mu;
                var += d * d;
            }
        }
        var /= static_cast<double>(m);
        double inv_std = 1.0 / std::sqrt(var + eps);
        stats.at(gidx, 0) = mu;
        stats.at(gidx, 1) = inv_std;
        for (int64_t p = 0; p < h * w; ++p) {
            const double* px = xv.data() + p * c + gidx * cpg;
            double* po = out.data() + p * c + gidx * cpg;
            for (int64_t j = 0; j < cpg; ++j) {
                int64_t ch = gidx * cpg + j;
                po[j] = (px[j] - mu) * inv_std * gv[ch] + bv[ch];
            }
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    int32_t xi = x.id, gi = gamma.id, bi = beta.id;
    bool rx = t.requires_grad(x), rga = t.requires_grad(gamma), rb = t.requires_grad(beta);
    return t.push_op(std::move(out), rg,
                     [xi, gi, bi, rx, rga, rb, h, w, c, groups, cpg, m, stats](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& xv2 = tp.node(xi).value;
        const Tensor& gv2 = tp.node(gi).value;
        for (int64_t gidx = 0; gidx < groups; ++gidx) {
            double mu = stats.at(gidx, 0);
            double inv_std = stats.at(gidx, 1);
            if (rga || rb) {
                for (int64_t p = 0; p < h * w; ++p) {
                    const double* px = xv2.data() + p * c + gidx * cpg;
                    const double* pg = g.data() + p * c + gidx * cpg;
                    for (int64_t j = 0; j < cpg; ++j) {
                        int64_t ch = gidx * cpg + j;
                        double xh = (px[j] - mu) * inv_std;
                        if (rga) tp.ensure_grad(gi)[ch] += pg[j] * xh;
                        if (rb) tp.ensure_grad(bi)[ch] += pg[j];
                    }
                }
            }
            if (rx) {
                double m1 = 0.0, m2 = 0.0;
                for (int64_t p = 0; p < h * w; ++p) {
                    const double* px = xv2.data() + p * c + gidx * cpg;
                    const double* pg = g.data() + p * c + gidx * cpg;
                    for (int64_t j = 0; j < cpg; ++j) {
                        int64_t ch = gidx * cpg + j;
                        double dxh = pg[j] * gv2[ch];
                        double xh = (px[j] - mu) * inv_std;
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                }
                m1 /= static_cast<double>(m);
                m2 /= static_cast<double>(m);
                Tensor& gx = tp.ensure_grad(xi);
                for (int64_t p = 0; p < h * w; ++p) {
                    const double* px = xv2.data() + p * c + gidx * cpg;
                    const double* pg = g.data() + p * c + gidx * cpg;
                    double* pgx = gx.data() + p * c + gidx * cpg;
                    for (int64_t j = 0; j < cpg; ++j) {
                        int64_t ch = gidx * cpg + j;
                        double dxh = pg[j] * gv2[ch];
                        double xh = (px[j] - mu) * inv_std;
                        pgx[j] += inv_std * (dxh - m1 - xh * m2);
                    }
                }
            }
        }
    });
}

// L2-normalize each row; rows with tiny norm are left scaled by 1/eps_guard.
inline Var l2_normalize_rows(Var a, double eps = 1e-12) {
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    if (av.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: expects 2-d");
    int64_t n = av.shape[0], d = av.shape[1];
    Tensor out({n, d});
    Tensor norms({n});
    for (int64_t i = 0; i < n; ++i) {
        const double* row = av.data() + i * d;
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += row[j] * row[j];
        double r = std::sqrt(s);
        if (r < eps) r = eps;
        norms[i] = r;
        double* orow = out.data() + i * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = row[j] / r;
    }
    int32_t ai = a.id;
    bool ra = t.requires_grad(a);
    return t.push_op(std::move(out), ra, [ai, n, d, norms](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& y = tp.node(oi).value;
        Tensor& ga = tp.ensure_grad(ai);
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * d;
            const double* yrow = y.data() + i * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += grow[j] * yrow[j];
            double* garow = ga.data() + i * d;
            for (int64_t j = 0; j < d; ++j) garow[j] += (grow[j] - yrow[j] * dot) / norms[i];
        }
    });
}

/*================================ conv / spatial ================================*/

// x [H,W,Cin], w [kh,kw,Cin,Cout], b [Cout]; zero padding
inline Var conv2d(Var x, Var w, Var b, int64_t stride = 1, int64_t pad = 1) {
    same_tape(x, w, "conv2d");
    same_tape(x, b, "conv2d");
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    if (xv.ndim() != 3 || wv.ndim() != 4) throw std::invalid_argument("conv2d: bad ranks");
    int64_t h = xv.shape[0], wd = xv.shape[1], ci = xv.shape[2];
    int64_t kh = wv.shape[0], kw = wv.shape[1];
    if (wv.shape[2] != ci) throw std::invalid_argument("conv2d: channel mismatch");
    int64_t co = wv.shape[3];
    if (bv.ndim() != 1 || bv.shape[0] != co) throw std::invalid_argument("conv2d: bias mismatch");
    int64_t ho = (h + 2 * pad - kh) / stride + 1;
    int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    Tensor out({ho, wo, co});
    for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
            double* opix = out.data() + (oy * wo + ox) * co;
            for (int64_t j = 0; j < co; ++j) opix[j] = bv[j];
            for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    const double* xpix = xv.data() + (iy * wd + ix) * ci;
                    const double* wk = wv.data() + ((ky * kw + kx) * ci) * co;
                    for (int64_t cc = 0; cc < ci; ++cc) {
                        double xi_v = xpix[cc];
                        const double* wrow = wk + cc * co;
                        for (int64_t j = 0; j < co; ++j) opix[j] += xi_v * wrow[j];
                    }
                }
            }
        }
    }
    bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    int32_t xi = x.id, wi = w.id, bi = b.id;
    bool rx = t.requires_grad(x), rw = t.requires_grad(w), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg,
                     [xi, wi, bi, rx, rw, rb, h, wd, ci, kh, kw, co, ho, wo, stride, pad](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        const Tensor& xv2 = tp.node(xi).value;
        const Tensor& wv2 = tp.node(wi).value;
        Tensor* gx = rx ? &tp.ensure_grad(xi) : nullptr;
        Tensor* gw = rw ? &tp.ensure_grad(wi) : nullptr;
        Tensor* gb = rb ? &tp.ensure_grad(bi) : nullptr;
        for (int64_t oy = 0; oy < ho; ++oy) {
            for (int64_t ox = 0; ox < wo; ++ox) {
                const double* gpix = g.data() + (oy * wo + ox) * co;
                if (gb) {
                    for (int64_t j = 0; j < co; ++j) gb->v[static_cast<size_t>(j)] += gpix[j];
                }
                for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= wd) continue;
                        const double* xpix = xv2.data() + (iy * wd + ix) * ci;
                        for (int64_t cc = 0; cc < ci; ++cc) {
                            const double* wrow = wv2.data() + ((ky * kw + kx) * ci + cc) * co;
                            if (gx) {
                                double acc = 0.0;
                                for (int64_t j = 0; j < co; ++j) acc += gpix[j] * wrow[j];
                                gx->v[static_cast<size_t>((iy * wd + ix) * ci + cc)] += acc;
                            }
                            if (gw) {
                                double xval = xpix[cc];
                                double* gwrow = gw->data() + ((ky * kw + kx) * ci + cc) * co;
                                for (int64_t j = 0; j < co; ++j) gwrow[j] += xval * gpix[j];
                            }
                        }
                    }
                }
            }
        }
    });
}

inline Var upsample_nearest2x(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    if (xv.ndim() != 3) throw std::invalid_argument("upsample_nearest2x: expects [H,W,C]");
    int64_t h = xv.shape[0], w = xv.shape[1], c = xv.shape[2];
    Tensor out({h * 2, w * 2, c});
    for (int64_t y = 0; y < h * 2; ++y) {
        for (int64_t x2 = 0; x2 < w * 2; ++x2) {
            const double* src = xv.data() + ((y / 2) * w + (x2 / 2)) * c;
            double* dst = out.data() + (y * 2 * w + x2) * c;
            for (int64_t j = 0; j < c; ++j) dst[j] = src[j];
        }
    }
    int32_t xi = x.id;
    bool rx = t.requires_grad(x);
    return t.push_op(std::move(out), rx, [xi, h, w, c](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& gx = tp.ensure_grad(xi);
        for (int64_t y = 0; y < h * 2; ++y) {
            for (int64_t x2 = 0; x2 < w * 2; ++x2) {
                const double* src = g.data() + (y * 2 * w + x2) * c;
                double* dst = gx.data() + ((y / 2) * w + (x2 / 2)) * c;
                for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        }
    });
}

inline Var concat_channels(Var a, Var b) {
    same_tape(a, b, "concat_channels");
    Tape& t = *a.tape;
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    if (av.ndim() != 3 || bv.ndim() != 3 || av.shape[0] != bv.shape[0] || av.shape[1] != bv.shape[1]) {
        throw std::invalid_argument("concat_channels: spatial mismatch");
    }
    int64_t h = av.shape[0], w = av.shape[1], ca = av.shape[2], cb = bv.shape[2];
    Tensor out({h, w, ca + cb});
    for (int64_t p = 0; p < h * w; ++p) {
        const double* pa = av.data() + p * ca;
        const double* pb = bv.data() + p * cb;
        double* po = out.data() + p * (ca + cb);
        for (int64_t j = 0; j < ca; ++j) po[j] = pa[j];
        for (int64_t j = 0; j < cb; ++j) po[ca + j] = pb[j];
    }
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    int32_t ai = a.id, bi = b.id;
    bool ra = t.requires_grad(a), rb = t.requires_grad(b);
    return t.push_op(std::move(out), rg, [ai, bi, ra, rb, h, w, ca, cb](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        for (int64_t p = 0; p < h * w; ++p) {
            const double* pg = g.data() + p * (ca + cb);
            if (ra) {
                double* pa = tp.ensure_grad(ai).data() + p * ca;
                for (int64_t j = 0; j < ca; ++j) pa[j] += pg[j];
            }
            if (rb) {
                double* pb = tp.ensure_grad(bi).data() + p * cb;
                for (int64_t j = 0; j < cb; ++j) pb[j] += pg[ca + j];
            }
        }
    });
}

// Bilinear resize of a single-channel [H,W] map (half-pixel centers).
inline Var bilinear_resize(Var x, int64_t ho, int64_t wo) {
    Tape& t = *x.tape;
    const Tensor& xv = t.val(x);
    if (xv.ndim() != 2) throw std::invalid_argument("bilinear_resize: expects [H,W]");
    int64_t h = xv.shape[0], w = xv.shape[1];
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("bilinear_resize: bad target");
    Tensor out({ho, wo});
    double sy = static_cast<double>(h) / static_cast<double>(ho);
    double sx = static_cast<double>(w) / static_cast<double>(wo);
    // taps stored for backward: (y0,x0,wy,wx) per output pixel
    std::vector<int32_t> iy0(static_cast<size_t>(ho)), ix0(static_cast<size_t>(wo));
    std::vector<double> fy(static_cast<size_t>(ho)), fx(static_cast<size_t>(wo));
    for (int64_t y = 0; y < ho; ++y) {
        double src = (static_cast<double>(y) + 0.5) * sy - 0.5;
        if (src < 0) src = 0;
        if (src > static_cast<double>(h - 1)) src = static_cast<double>(h - 1);
        int64_t y0 = static_cast<int64_t>(std::floor(src));
        if (y0 > h - 2) y0 = h >= 2 ? h - 2 : 0;
        iy0[static_cast<size_t>(y)] = static_cast<int32_t>(y0);
        fy[static_cast<size_t>(y)] = h >= 2 ? src - static_cast<double>(y0) : 0.0;
    }
    for (int64_t x2 = 0; x2 < wo; ++x2) {
        double src = (static_cast<double>(x2) + 0.5) * sx - 0.5;
        if (src < 0) src = 0;
        if (src > static_cast<double>(w - 1)) src = static_cast<double>(w - 1);
        int64_t x0 = static_cast<int64_t>(std::floor(src));
        if (x0 > w - 2) x0 = w >= 2 ? w - 2 : 0;
        ix0[static_cast<size_t>(x2)] = static_cast<int32_t>(x0);
        fx[static_cast<size_t>(x2)] = w >= 2 ? src - static_cast<double>(x0) : 0.0;
    }
    for (int64_t y = 0; y < ho; ++y) {
        int64_t y0 = iy0[static_cast<size_t>(y)];
        int64_t y1 = h >= 2 ? y0 + 1 : y0;
        double wy = fy[static_cast<size_t>(y)];
        for (int64_t x2 = 0; x2 < wo; ++x2) {
            int64_t x0 = ix0[static_cast<size_t>(x2)];
            int64_t x1 = w >= 2 ? x0 + 1 : x0;
            double wx = fx[static_cast<size_t>(x2)];
            out.at(y, x2) = xv.at(y0, x0) * (1 - wy) * (1 - wx) + xv.at(y0, x1) * (1 - wy) * wx +
                            xv.at(y1, x0) * wy * (1 - wx) + xv.at(y1, x1) * wy * wx;
        }
    }
    int32_t xi = x.id;
    bool rx = t.requires_grad(x);
    return t.push_op(std::move(out), rx, [xi, h, w, ho, wo, iy0, ix0, fy, fx](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& gx = tp.ensure_grad(xi);
        for (int64_t y = 0; y < ho; ++y) {
            int64_t y0 = iy0[static_cast<size_t>(y)];
            int64_t y1 = h >= 2 ? y0 + 1 : y0;
            double wy = fy[static_cast<size_t>(y)];
            for (int64_t x2 = 0; x2 < wo; ++x2) {
                int64_t x0 = ix0[static_cast<size_t>(x2)];
                int64_t x1 = w >= 2 ? x0 + 1 : x0;
                double wx = fx[static_cast<size_t>(x2)];
                double gv = g.at(y, x2);
                gx.at(y0, x0) += gv * (1 - wy) * (1 - wx);
                gx.at(y0, x1) += gv * (1 - wy) * wx;
                gx.at(y1, x0) += gv * wy * (1 - wx);
                gx.at(y1, x1) += gv * wy * wx;
            }
        }
    });
}

/*================================ embedding / losses ================================*/

inline Var gather_rows(Var table, const std::vector<int32_t>& idx) {
    Tape& t = *table.tape;
    const Tensor& tv = t.val(table);
    if (tv.ndim() != 2) throw std::invalid_argument("gather_rows: table must be 2-d");
    int64_t vcount = tv.shape[0], d = tv.shape[1];
    Tensor out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= vcount) throw std::out_of_range("gather_rows: index out of range");
        std::copy(tv.data() + idx[i] * d, tv.data() + (idx[i] + 1) * d,
                  out.data() + static_cast<int64_t>(i) * d);
    }
    int32_t ti = table.id;
    bool rt = t.requires_grad(table);
    return t.push_op(std::move(out), rt, [ti, idx, d](Tape& tp, int32_t oi) {
        const Tensor& g = tp.node(oi).grad;
        Tensor& gt = tp.ensure_grad(ti);
        for (size_t i = 0; i < idx.size(); ++i) {
            const double* grow = g.data() + static_cast<int64_t>(i) * d;
            double* trow = gt.data() + idx[i] * d;
            for (int64_t j = 0; j < d; ++j) trow[j] += grow[j];
        }
    });
}

// mean cross-entropy of logits [B,C] against integer targets
inline Var cross_entropy_logits(Var logits, const std::vector<int32_t>& targets) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.val(logits);
    if (lv.ndim() != 2 || static_cast<size_t>(lv.shape[0]) != targets.size()) {
        throw std::invalid_argument("cross_entropy_logits: bad shapes");
    }
    int64_t b = lv.shape[0], c = lv.shape[1];
    double loss = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        const double* row = lv.data() + i * c;
        double mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = row[j] > mx ? row[j] : mx;
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        loss += std::log(z) + mx - row[targets[static_cast<size_t>(i)]];
    }
    loss /= static_cast<double>(b);
    int32_t li = logits.id;
    bool rl = t.requires_grad(logits);
    return t.push_op(Tensor::scalar(loss), rl, [li, targets, b, c](Tape& tp, int32_t oi) {
        double g = tp.node(oi).grad[0] / static_cast<double>(b);
        const Tensor& lv2 = tp.node(li).value;
        Tensor& gl = tp.ensure_grad(li);
        for (int64_t i = 0; i < b; ++i) {
            const double* row = lv2.data() + i * c;
            double* grow = gl.data() + i * c;
            double mx = row[0];
            for (int64_t j = 1; j < c; ++j) mx = row[j] > mx ? row[j] : mx;
            double z = 0.0;
            for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
            for (int64_t j = 0; j < c; ++j) {
                double p = std::exp(row[j] - mx) / z;
                grow[j] += g * (p - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
            }
        }
    });
}

}  // namespace mmdiff::ad

#endif  // MMDIFF_AUTODIFF_HPP
