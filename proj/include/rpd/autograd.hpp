#pragma once

// Reverse-mode autodiff over Tensor. A Tape owns nodes in creation order;
// backward() walks them in reverse calling per-node closures. Parameter leaves
// reference external value/grad storage (see nn.hpp) so repeated forward passes
// never copy weights and gradient accumulation lands where the optimizer looks.

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "rpd/common.hpp"
#include "rpd/tensor.hpp"

namespace rpd {

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
    struct Node {
        Tensor own_val;
        const Tensor* val = nullptr;
        Tensor grad;
        Tensor* ext_grad = nullptr;
        bool needs_grad = false;
        bool grad_ready = false;
        std::function<void(Tape&)> back;
    };

public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }

    // Leaf bound to external parameter storage. Gradients accumulate into
    // *grad across backward calls; zeroing is the owner's job.
    Var param(const Tensor* value, Tensor* grad, bool needs_grad) {
        RPD_CHECK(value != nullptr, "param: null value");
        RPD_CHECK(!needs_grad || grad != nullptr, "param: trainable leaf needs grad storage");
        RPD_CHECK(grad == nullptr || grad->same_shape(*value), "param: grad shape mismatch");
        auto n = std::make_unique<Node>();
        n->val = value;
        n->ext_grad = needs_grad ? grad : nullptr;
        n->needs_grad = needs_grad;
        return push(std::move(n));
    }

    // Leaf owning a copy of the value. needs_grad=true is for gradient tests
    // on activations; read the result with grad_of().
    Var input(Tensor value, bool needs_grad = false) {
        auto n = std::make_unique<Node>();
        n->own_val = std::move(value);
        n->val = &n->own_val;
        n->needs_grad = needs_grad;
        return push(std::move(n));
    }

    Var constant(Tensor value) { return input(std::move(value), false); }

    const Tensor& val(Var v) const { return *node(v).val; }
    bool needs(Var v) const { return node(v).needs_grad; }

    // Gradient of v after backward(); zeros if nothing reached it.
    Tensor grad_of(Var v) const {
        const Node& n = node(v);
        if (n.ext_grad) return *n.ext_grad;
        if (n.grad_ready) return n.grad;
        return Tensor(n.val->rows, n.val->cols);
    }

    void backward(Var loss) {
        Node& L = node(loss);
        RPD_CHECK(L.val->size() == 1, "backward: loss must be a scalar, got ", L.val->rows, "x",
                  L.val->cols);
        RPD_CHECK_T(std::isfinite(L.val->v[0]), NumericError, "backward: non-finite loss");
        for (auto& n : nodes_) n->grad_ready = false;
        gin(loss).v[0] += 1.0;
        for (int64_t i = int64_t(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = *nodes_[size_t(i)];
            if (!n.needs_grad || !n.back) continue;
            if (!n.grad_ready && !n.ext_grad) continue;
            n.back(*this);
        }
    }

    // ---- ops ----

    Var add(Var a, Var b) {
        const Tensor &A = val(a), &B = val(b);
        RPD_CHECK(A.same_shape(B), "add: shape mismatch ", A.rows, "x", A.cols, " vs ", B.rows,
                  "x", B.cols);
        Tensor out = A;
        axpy(out, 1.0, B);
        Var o = make(std::move(out), needs(a) || needs(b));
        if (needs(o)) set_back(o, [a, b, o](Tape& t) {
            const Tensor& g = t.gout(o);
            if (t.needs(a)) axpy(t.gin(a), 1.0, g);
            if (t.needs(b)) axpy(t.gin(b), 1.0, g);
        });
        return o;
    }

    Var sub(Var a, Var b) {
        const Tensor &A = val(a), &B = val(b);
        RPD_CHECK(A.same_shape(B), "sub: shape mismatch");
        Tensor out = A;
        axpy(out, -1.0, B);
        Var o = make(std::move(out), needs(a) || needs(b));
        if (needs(o)) set_back(o, [a, b, o](Tape& t) {
            const Tensor& g = t.gout(o);
            if (t.needs(a)) axpy(t.gin(a), 1.0, g);
            if (t.needs(b)) axpy(t.gin(b), -1.0, g);
        });
        return o;
    }

    Var mul(Var a, Var b) {
        const Tensor &A = val(a), &B = val(b);
        RPD_CHECK(A.same_shape(B), "mul: shape mismatch");
        Tensor out = A;
        for (int64_t i = 0; i < out.size(); ++i) out.v[size_t(i)] *= B.v[size_t(i)];
        Var o = make(std::move(out), needs(a) || needs(b));
        if (needs(o)) set_back(o, [a, b, o](Tape& t) {
            const Tensor& g = t.gout(o);
            if (t.needs(a)) {
                Tensor& ga = t.gin(a);
                const Tensor& B2 = t.val(b);
                for (int64_t i = 0; i < g.size(); ++i)
                    ga.v[size_t(i)] += g.v[size_t(i)] * B2.v[size_t(i)];
            }
            if (t.needs(b)) {
                Tensor& gb = t.gin(b);
                const Tensor& A2 = t.val(a);
                for (int64_t i = 0; i < g.size(); ++i)
                    gb.v[size_t(i)] += g.v[size_t(i)] * A2.v[size_t(i)];
            }
        });
        return o;
    }

    Var scale(Var a, double s) {
        Tensor out = val(a);
        for (double& x : out.v) x *= s;
        Var o = make(std::move(out), needs(a));
        if (needs(o)) set_back(o, [a, o, s](Tape& t) { axpy(t.gin(a), s, t.gout(o)); });
        return o;
    }

    Var add_scalar(Var a, double s) {
        Tensor out = val(a);
        for (double& x : out.v) x += s;
        Var o = make(std::move(out), needs(a));
        if (needs(o)) set_back(o, [a, o](Tape& t) { axpy(t.gin(a), 1.0, t.gout(o)); });
        return o;
    }

    // a [n,c] plus row vector [1,c] broadcast over rows.
    Var add_row(Var a, Var row) {
        const Tensor &A = val(a), &R = val(row);
        RPD_CHECK(R.rows == 1 && R.cols == A.cols, "add_row: want [1,", A.cols, "], got ", R.rows,
                  "x", R.cols);
        Tensor out = A;
        for (int64_t r = 0; r < out.rows; ++r)
            for (int64_t c = 0; c < out.cols; ++c) out(r, c) += R(0, c);
        Var o = make(std::move(out), needs(a) || needs(row));
        if (needs(o)) set_back(o, [a, row, o](Tape& t) {
            const Tensor& g = t.gout(o);
            if (t.needs(a)) axpy(t.gin(a), 1.0, g);
            if (t.needs(row)) {
                Tensor& gr = t.gin(row);
                for (int64_t r = 0; r < g.rows; ++r)
                    for (int64_t c = 0; c < g.cols; ++c) gr(0, c) += g(r, c);
            }
        });
        return o;
    }

    Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
        Tensor out = rpd::matmul(val(a), val(b), ta, tb);
        Var o = make(std::move(out), needs(a) || needs(b));
        if (needs(o)) set_back(o, [a, b, o, ta, tb](Tape& t) {
            const Tensor& g = t.gout(o);
            const Tensor& A = t.val(a);
            const Tensor& B = t.val(b);
            if (t.needs(a)) {
                Tensor& ga = t.gin(a);
                if (!ta && !tb)
                    matmul_into(ga, g, B, false, true, 1.0);
                else if (!ta && tb)
                    matmul_into(ga, g, B, false, false, 1.0);
                else if (ta && !tb)
                    matmul_into(ga, B, g, false, true, 1.0);
                else
                    matmul_into(ga, B, g, true, true, 1.0);
            }
            if (t.needs(b)) {
                Tensor& gb = t.gin(b);
                if (!ta && !tb)
                    matmul_into(gb, A, g, true, false, 1.0);
                else if (!ta && tb)
                    matmul_into(gb, g, A, true, false, 1.0);
                else if (ta && !tb)
                    matmul_into(gb, A, g, false, false, 1.0);
                else
                    matmul_into(gb, g, A, true, true, 1.0);
            }
        });
        return o;
    }

    Var slice_rows(Var a, int64_t r0, int64_t r1) {
        const Tensor& A = val(a);
        RPD_CHECK(r0 >= 0 && r0 < r1 && r1 <= A.rows, "slice_rows: bad range [", r0, ",", r1,
                  ") of ", A.rows);
        Tensor out(r1 - r0, A.cols);
        std::copy(A.v.begin() + r0 * A.cols, A.v.begin() + r1 * A.cols, out.v.begin());
        Var o = make(std::move(out), needs(a));
        if (needs(o)) set_back(o, [a, o, r0](Tape& t) {
            const Tensor& g = t.gout(o);
            Tensor& ga = t.gin(a);
            for (int64_t r = 0; r < g.rows; ++r)
                for (int64_t c = 0; c < g.cols; ++c) ga(r0 + r, c) += g(r, c);
        });
        return o;
    }

    Var slice_cols(Var a, int64_t c0, int64_t c1) {
        const Tensor& A = val(a);
        RPD_CHECK(c0 >= 0 && c0 < c1 && c1 <= A.cols, "slice_cols: bad range [", c0, ",", c1,
                  ") of ", A.cols);
        Tensor out(A.rows, c1 - c0);
        for (int64_t r = 0; r < A.rows; ++r)
            for (int64_t c = c0; c < c1; ++c) out(r, c - c0) = A(r, c);
        Var o = make(std::move(out), needs(a));
        if (needs(o)) set_back(o, [a, o, c0](Tape& t) {
            const Tensor& g = t.gout(o);
            Tensor& ga = t.gin(a);
            for (int64_t r = 0; r < g.rows; ++r)
                for (int64_t c = 0; c < g.cols; ++c) ga(r, c + c0) += g(r, c);
        });
        return o;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        RPD_CHECK(!parts.empty(), "concat_rows: empty");
        int64_t cols = val(parts[0]).cols, rows = 0;
        bool ng = false;
        for (Var p : parts) {
            RPD_CHECK(val(p).cols == cols, "concat_rows: column mismatch");
            rows += val(p).rows;
            ng = ng || needs(p);
        }
        Tensor out(rows, cols);
        int64_t r = 0;
        for (Var p : parts) {
            const Tensor& P = val(p);
            std::copy(P.v.begin(), P.v.end(), out.v.begin() + r * cols);
            r += P.rows;
        }
        Var o = make(std::move(out), ng);
        if (needs(o)) set_back(o, [parts, o](Tape& t) {
            const Tensor& g = t.gout(o);
            int64_t r = 0;
            for (Var p : parts) {
                int64_t pr = t.val(p).rows;
                if (t.needs(p)) {
                    Tensor& gp = t.gin(p);
                    for (int64_t i = 0; i < pr; ++i)
                        for (int64_t c = 0; c < g.cols; ++c) gp(i, c) += g(r + i, c);
                }
                r += pr;
            }
        });
        return o;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        RPD_CHECK(!parts.empty(), "concat_cols: empty");
        int64_t rows = val(parts[0]).rows, cols = 0;
        bool ng = false;
        for (Var p : parts) {
            RPD_CHECK(val(p).rows == rows, "concat_cols: row mismatch");
            cols += val(p).cols;
            ng = ng || needs(p);
        }
        Tensor out(rows, cols);
        int64_t c0 = 0;
        for (Var p : parts) {
            const Tensor& P = val(p);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < P.cols; ++c) out(r, c0 + c) = P(r, c);
            c0 += P.cols;
        }
        Var o = make(std::move(out), ng);
        if (needs(o)) set_back(o, [parts, o](Tape& t) {
            const Tensor& g = t.gout(o);
            int64_t c0 = 0;
            for (Var p : parts) {
                int64_t pc = t.val(p).cols;
                if (t.needs(p)) {
                    Tensor& gp = t.gin(p);
                    for (int64_t r = 0; r < g.rows; ++r)
                        for (int64_t c = 0; c < pc; ++c) gp(r, c) += g(r, c0 + c);
                }
                c0 += pc;
            }
        });
        return o;
    }

    // out[i,:] = a[idx[i],:]; indices may repeat.
    Var gather_rows(Var a, std::vector<int64_t> idx) {
        const Tensor& A = val(a);
        Tensor out(int64_t(idx.size()), A.cols);
        for (size_t i = 0; i < idx.size(); ++i) {
            RPD_CHECK(idx[i] >= 0 && idx[i] < A.rows, "gather_rows: index ", idx[i], " out of ",
                      A.rows);
            for (int64_t c = 0; c < A.cols; ++c) out(int64_t(i), c) = A(idx[i], c);
        }
        Var o = make(std::move(out), needs(a));
        if (needs(o)) set_back(o, [a, o, idx = std::move(idx)](Tape& t) {
            const Tensor& g = t.gout(o);
            Tensor& ga = t.gin(a);
            for (size_t i = 0; i < idx.size(); ++i)
                for (int64_t c = 0; c < g.cols; ++c) ga(idx[i], c) += g(int64_t(i), c);
        });
        return o;
    }

    Var reshape(Var a, int64_t r, int64_t c) {
        const Tensor& A = val(a);
        RPD_CHECK(r * c == A.size(), "reshape: ", A.rows, "x", A.cols, " -> ", r, "x", c);
        Tensor out(r, c, A.v);
        Var o = make(std::move(out), needs(a));
        if (needs(o)) set_back(o, [a, o](Tape& t) {
            const Tensor& g = t.gout(o);
            Tensor& ga = t.gin(a);
            for (int64_t i = 0; i < g.size(); ++i) ga.v[size_t(i)] += g.v[size_t(i)];
        });
        return o;
    }

    Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
        const Tensor& X = val(x);
        const Tensor &G = val(gamma), &B = val(beta);
        RPD_CHECK(G.rows == 1 && G.cols == X.cols && B.rows == 1 && B.cols == X.cols,
                  "layernorm_rows: gamma/beta must be [1,", X.cols, "]");
        int64_t R = X.rows, C = X.cols;
        Tensor xhat(R, C);
        Tensor inv_std(R, 1);
        Tensor out(R, C);
        for (int64_t r = 0; r < R; ++r) {
            double mu = 0.0;
            for (int64_t c = 0; c < C; ++c) mu += X(r, c);
            mu /= double(C);
            double var = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                double d = X(r, c) - mu;
                var += d * d;
            }
            var /= double(C);
            double s = 1.0 / std::sqrt(var + eps);
            inv_std(r, 0) = s;
            for (int64_t c = 0; c < C; ++c) {
                double xh = (X(r, c) - mu) * s;
                xhat(r, c) = xh;
                out(r, c) = G(0, c) * xh + B(0, c);
            }
        }
        Var o = make(std::move(out), needs(x) || needs(gamma) || needs(beta));
        if (needs(o)) {
            auto xh = std::make_shared<Tensor>(std::move(xhat));
            auto is = std::make_shared<Tensor>(std::move(inv_std));
            set_back(o, [x, gamma, beta, o, xh, is](Tape& t) {
                const Tensor& g = t.gout(o);
                int64_t R = g.rows, C = g.cols;
                if (t.needs(gamma)) {
                    Tensor& gg = t.gin(gamma);
                    for (int64_t r = 0; r < R; ++r)
                        for (int64_t c = 0; c < C; ++c) gg(0, c) += g(r, c) * (*xh)(r, c);
                }
                if (t.needs(beta)) {
                    Tensor& gb = t.gin(beta);
                    for (int64_t r = 0; r < R; ++r)
                        for (int64_t c = 0; c < C; ++c) gb(0, c) += g(r, c);
                }
                if (t.needs(x)) {
                    Tensor& gx = t.gin(x);
                    const Tensor& G = t.val(gamma);
                    for (int64_t r = 0; r < R; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (int64_t c = 0; c < C; ++c) {
                            double dy = g(r, c) * G(0, c);
                            m1 += dy;
                            m2 += dy * (*xh)(r, c);
                        }
                        m1 /= double(C);
                        m2 /= double(C);
                        double s = (*is)(r, 0);
                        for (int64_t c = 0; c < C; ++c) {
                            double dy = g(r, c) * G(0, c);
                            gx(r, c) += s * (dy - m1 - (*xh)(r, c) * m2);
                        }
                    }
                }
            });
        }
        return o;
    }

    Var softmax_rows(Var x) {
        const Tensor& X = val(x);
        Tensor out(X.rows, X.cols);
        for (int64_t r = 0; r < X.rows; ++r) {
            double mx = X(r, 0);
            for (int64_t c = 1; c < X.cols; ++c) mx = std::max(mx, X(r, c));
            double z = 0.0;
            for (int64_t c = 0; c < X.cols; ++c) {
                out(r, c) = std::exp(X(r, c) - mx);
                z += out(r, c);
            }
            for (int64_t c = 0; c < X.cols; ++c) out(r, c) /= z;
        }
        Var o = make(std::move(out), needs(x));
        if (needs(o)) set_back(o, [x, o](Tape& t) {
            const Tensor& g = t.gout(o);
            const Tensor& Y = t.val(o);
            Tensor& gx = t.gin(x);
            for (int64_t r = 0; r < g.rows; ++r) {
                double dot = 0.0;
                for (int64_t c = 0; c < g.cols; ++c) dot += g(r, c) * Y(r, c);
                for (int64_t c = 0; c < g.cols; ++c)
                    gx(r, c) += Y(r, c) * (g(r, c) - dot);
            }
        });
        return o;
    }

    Var log_softmax_rows(Var x) {
        const Tensor& X = val(x);
        Tensor out(X.rows, X.cols);
        for (int64_t r = 0; r < X.rows; ++r) {
            double mx = X(r, 0);
            for (int64_t c = 1; c < X.cols; ++c) mx = std::max(mx, X(r, c));
            double z = 0.0;
            for (int64_t c = 0; c < X.cols; ++c) z += std::exp(X(r, c) - mx);
            double lse = mx + std::log(z);
            for (int64_t c = 0; c < X.cols; ++c) out(r, c) = X(r, c) - lse;
        }
        Var o = make(std::move(out), needs(x));
        if (needs(o)) set_back(o, [x, o](Tape& t) {
            const Tensor& g = t.gout(o);
            const Tensor& Y = t.val(o);
            Tensor& gx = t.gin(x);
            for (int64_t r = 0; r < g.rows; ++r) {
                double gsum = 0.0;
                for (int64_t c = 0; c < g.cols; ++c) gsum += g(r, c);
                for (int64_t c = 0; c < g.cols; ++c)
                    gx(r, c) += g(r, c) - std::exp(Y(r, c)) * gsum;
            }
        });
        return o;
    }

    // Exact (erf) GELU.
    Var gelu(Var x) {
        const Tensor& X = val(x);
        Tensor out(X.rows, X.cols);
        for (int64_t i = 0; i < X.size(); ++i) {
            double v = X.v[size_t(i)];
            out.v[size_t(i)] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
        }
        Var o = make(std::move(out), needs(x));
        if (needs(o)) set_back(o, [x, o](Tape& t) {
            const Tensor& g = t.gout(o);
            const Tensor& X2 = t.val(x);
            Tensor& gx = t.gin(x);
            for (int64_t i = 0; i < g.size(); ++i) {
                double v = X2.v[size_t(i)];
                double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
                double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * kPi);
                gx.v[size_t(i)] += g.v[size_t(i)] * (cdf + v * pdf);
            }
        });
        return o;
    }

    // Inverted dropout; identity when not training or p == 0.
    Var dropout(Var x, double p, uint64_t seed, bool training) {
        RPD_CHECK(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1), got ", p);
        if (!training || p == 0.0) return x;
        const Tensor& X = val(x);
        Rng rng(seed);
        auto mask = std::make_shared<std::vector<uint8_t>>(size_t(X.size()));
        double inv = 1.0 / (1.0 - p);
        Tensor out(X.rows, X.cols);
        for (int64_t i = 0; i < X.size(); ++i) {
            bool keep = rng.uniform() >= p;
            (*mask)[size_t(i)] = keep ? 1 : 0;
            out.v[size_t(i)] = keep ? X.v[size_t(i)] * inv : 0.0;
        }
        Var o = make(std::move(out), needs(x));
        if (needs(o)) set_back(o, [x, o, mask, inv](Tape& t) {
            const Tensor& g = t.gout(o);
            Tensor& gx = t.gin(x);
            for (int64_t i = 0; i < g.size(); ++i)
                if ((*mask)[size_t(i)]) gx.v[size_t(i)] += g.v[size_t(i)] * inv;
        });
        return o;
    }

    // Column-wise max over row groups: out[g,c] = max over rows r with
    // group_of_row[r] == g. Every group must be non-empty. Ties keep the
    // earliest row (that row receives the full gradient).
    Var rowmax_groups(Var x, std::vector<int64_t> group_of_row, int64_t n_groups) {
        const Tensor& X = val(x);
        RPD_CHECK(int64_t(group_of_row.size()) == X.rows, "rowmax_groups: group list size ",
                  group_of_row.size(), " vs rows ", X.rows);
        RPD_CHECK(n_groups > 0, "rowmax_groups: n_groups must be positive");
        Tensor out(n_groups, X.cols);
        auto argrow = std::make_shared<std::vector<int64_t>>(size_t(n_groups * X.cols), -1);
        for (int64_t r = 0; r < X.rows; ++r) {
            int64_t g = group_of_row[size_t(r)];
            RPD_CHECK(g >= 0 && g < n_groups, "rowmax_groups: group ", g, " out of range");
            for (int64_t c = 0; c < X.cols; ++c) {
                int64_t& ar = (*argrow)[size_t(g * X.cols + c)];
                if (ar < 0 || X(r, c) > out(g, c)) {
                    out(g, c) = X(r, c);
                    ar = r;
                }
            }
        }
        for (int64_t g = 0; g < n_groups; ++g)
            RPD_CHECK((*argrow)[size_t(g * X.cols)] >= 0, "rowmax_groups: group ", g, " is empty");
        Var o = make(std::move(out), needs(x));
        if (needs(o)) set_back(o, [x, o, argrow](Tape& t) {
            const Tensor& g = t.gout(o);
            Tensor& gx = t.gin(x);
            for (int64_t i = 0; i < g.rows; ++i)
                for (int64_t c = 0; c < g.cols; ++c)
                    gx((*argrow)[size_t(i * g.cols + c)], c) += g(i, c);
        });
        return o;
    }

    Var sum_all(Var x) {
        const Tensor& X = val(x);
        double s = 0.0;
        for (double v : X.v) s += v;
        Var o = make(Tensor::scalar(s), needs(x));
        if (needs(o)) set_back(o, [x, o](Tape& t) {
            double g = t.gout(o).v[0];
            Tensor& gx = t.gin(x);
            for (double& v : gx.v) v += g;
        });
        return o;
    }

    Var mean_all(Var x) { return scale(sum_all(x), 1.0 / double(val(x).size())); }

    Var select(Var x, int64_t r, int64_t c) {
        const Tensor& X = val(x);
        RPD_CHECK(r >= 0 && r < X.rows && c >= 0 && c < X.cols, "select: (", r, ",", c,
                  ") out of ", X.rows, "x", X.cols);
        Var o = make(Tensor::scalar(X(r, c)), needs(x));
        if (needs(o)) set_back(o, [x, o, r, c](Tape& t) { t.gin(x)(r, c) += t.gout(o).v[0]; });
        return o;
    }

    // Value pass-through that blocks gradient flow.
    Var detach(Var x) { return constant(val(x)); }

    // Escape hatch for ops whose forward internals are not differentiated
    // (e.g. matching-based losses). The caller computes out_val from val(x)
    // and supplies the VJP (x value, upstream grad) -> grad wrt x.
    Var custom(Var x, Tensor out_val,
               std::function<Tensor(const Tensor&, const Tensor&)> vjp) {
        Var o = make(std::move(out_val), needs(x));
        if (needs(o)) set_back(o, [x, o, vjp = std::move(vjp)](Tape& t) {
            Tensor gx = vjp(t.val(x), t.gout(o));
            RPD_CHECK(gx.same_shape(t.val(x)), "custom: vjp shape mismatch");
            axpy(t.gin(x), 1.0, gx);
        });
        return o;
    }

    // Gradient buffer access for backward closures.
    const Tensor& gout(Var v) {
        Node& n = node(v);
        if (n.ext_grad) return *n.ext_grad;
        RPD_CHECK(n.grad_ready, "gout: gradient not populated");
        return n.grad;
    }

    Tensor& gin(Var v) {
        Node& n = node(v);
        if (n.ext_grad) return *n.ext_grad;
        if (!n.grad_ready) {
            if (!n.grad.same_shape(*n.val)) n.grad = Tensor(n.val->rows, n.val->cols);
            else n.grad.fill(0.0);
            n.grad_ready = true;
        }
        return n.grad;
    }

private:
    Var push(std::unique_ptr<Node> n) {
        nodes_.push_back(std::move(n));
        return Var{int32_t(nodes_.size() - 1)};
    }

    Var make(Tensor out, bool needs_grad) {
        auto n = std::make_unique<Node>();
        n->own_val = std::move(out);
        n->val = &n->own_val;
        n->needs_grad = needs_grad;
        return push(std::move(n));
    }

    void set_back(Var v, std::function<void(Tape&)> f) { node(v).back = std::move(f); }

    Node& node(Var v) {
        RPD_CHECK(v.valid() && size_t(v.id) < nodes_.size(), "bad Var");
        return *nodes_[size_t(v.id)];
    }
    const Node& node(Var v) const {
        RPD_CHECK(v.valid() && size_t(v.id) < nodes_.size(), "bad Var");
        return *nodes_[size_t(v.id)];
    }

    std::vector<std::unique_ptr<Node>> nodes_;
};

}  // namespace rpd
