#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mlens/tensor.hpp"

namespace mlens {

// Handle into a Tape.
struct Var {
    std::uint32_t idx = UINT32_MAX;
    bool valid() const { return idx != UINT32_MAX; }
};

namespace kernels {

// Shared forward kernels. Reductions run left to right so repeated runs are
// bit-identical.

inline void matmul(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
    std::fill(out, out + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            double av = a[i * k + t];
            const double* brow = b + t * n;
            double* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
}

inline void softmax_row(const double* x, double* y, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        s += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= s;
}

inline void log_softmax_row(const double* x, double* y, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
    double lse = m + std::log(s);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - lse;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

inline double gelu_grad(double x) {
    double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
    double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
    return phi + x * pdf;
}

// Piecewise-linear row resampling weights: maps s source rows onto m target
// rows with endpoints preserved. frac==0 collapses to a verbatim row copy.
struct InterpTerm {
    std::size_t target, source;
    double weight;
};

inline std::vector<InterpTerm> linear_resample_plan(std::size_t s, std::size_t m) {
    std::vector<InterpTerm> plan;
    plan.reserve(2 * m);
    for (std::size_t j = 0; j < m; ++j) {
        if (s == 1 || m == 1) {
            plan.push_back({j, 0, 1.0});
            continue;
        }
        double t = static_cast<double>(j) * static_cast<double>(s - 1) / static_cast<double>(m - 1);
        auto i0 = static_cast<std::size_t>(t);
        if (i0 >= s - 1) i0 = s - 1;
        double frac = t - static_cast<double>(i0);
        if (frac == 0.0) {
            plan.push_back({j, i0, 1.0});
        } else {
            plan.push_back({j, i0, 1.0 - frac});
            plan.push_back({j, i0 + 1, frac});
        }
    }
    return plan;
}

}  // namespace kernels

// Reverse-mode tape. Recording order is a topological order, so the backward
// sweep walks node indices in reverse. One tape is single-writer; evaluate
// independent forward passes on independent tapes.
class Tape {
public:
    Var input(Tensor value) { return record(std::move(value), false, {}); }

    // Leaf aliased to external storage; gradients are accumulated into
    // t.grad by backward() when t.requires_grad. Registering the same tensor
    // twice returns the same node, which makes weight sharing accumulate
    // naturally across uses.
    Var param(Tensor& t) {
        auto it = leaf_lookup_.find(&t);
        if (it != leaf_lookup_.end()) return it->second;
        Var v = record(t, t.requires_grad, {});
        leaf_lookup_.emplace(&t, v);
        return v;
    }

    const Tensor& value(Var v) const { return nodes_[v.idx].value; }
    std::size_t size() const { return nodes_.size(); }
    bool needs_grad(Var v) const { return nodes_[v.idx].needs_grad; }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw ShapeError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
        return record(std::move(out), any_grad({a, b}), [a, b](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
            tp.accumulate(b, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw ShapeError("mul: shape mismatch");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
        return record(std::move(out), any_grad({a, b}), [a, b](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& va = tp.val(a);
            const Tensor& vb = tp.val(b);
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * vb[i];
            });
            tp.accumulate(b, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * va[i];
            });
        });
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
        return record(std::move(out), any_grad({a}), [a, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
            });
        });
    }

    // Multiply every element by a 1-element tensor (learnable scalar).
    Var mul_scalar(Var a, Var s) {
        const Tensor& ts = val(s);
        if (!ts.is_scalar()) throw ShapeError("mul_scalar: scale must hold one element");
        double sv = ts[0];
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
        return record(std::move(out), any_grad({a, s}), [a, s, sv](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& va = tp.val(a);
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * sv;
            });
            tp.accumulate(s, [&](std::vector<double>& d) {
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * va[i];
                d[0] += acc;
            });
        });
    }

    Var exp_all(Var a) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
        return record(std::move(out), any_grad({a}), [a](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& y = tp.nodes_[self].value;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
            });
        });
    }

    Var gelu(Var a) {
        Tensor out = val(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::gelu(out[i]);
        return record(std::move(out), any_grad({a}), [a](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& x = tp.val(a);
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * kernels::gelu_grad(x[i]);
            });
        });
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
            throw ShapeError("matmul: incompatible shapes " + ta.shape_str() + " * " + tb.shape_str());
        std::size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor out = Tensor::zeros({m, n});
        kernels::matmul(ta.data(), tb.data(), out.data(), m, k, n);
        return record(std::move(out), any_grad({a, b}), [a, b, m, k, n](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& va = tp.val(a);
            const Tensor& vb = tp.val(b);
            tp.accumulate(a, [&](std::vector<double>& d) {
                // dA += dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double gv = g[i * n + j];
                        for (std::size_t t = 0; t < k; ++t) d[i * k + t] += gv * vb[t * n + j];
                    }
            });
            tp.accumulate(b, [&](std::vector<double>& d) {
                // dB += A^T * dC
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        double av = va[i * k + t];
                        for (std::size_t j = 0; j < n; ++j) d[t * n + j] += av * g[i * n + j];
                    }
            });
        });
    }

    // Row vector [k] times matrix [k x n] -> [n].
    Var vecmat(Var v, Var m) {
        const Tensor& tv = val(v);
        const Tensor& tm = val(m);
        if (tv.rank() != 1 || tm.rank() != 2 || tv.size() != tm.rows())
            throw ShapeError("vecmat: incompatible shapes " + tv.shape_str() + " * " + tm.shape_str());
        std::size_t k = tv.size(), n = tm.cols();
        Tensor out = Tensor::zeros({n});
        kernels::matmul(tv.data(), tm.data(), out.data(), 1, k, n);
        return record(std::move(out), any_grad({v, m}), [v, m, k, n](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& vv = tp.val(v);
            const Tensor& vm = tp.val(m);
            tp.accumulate(v, [&](std::vector<double>& d) {
                for (std::size_t t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[j] * vm[t * n + j];
                    d[t] += acc;
                }
            });
            tp.accumulate(m, [&](std::vector<double>& d) {
                for (std::size_t t = 0; t < k; ++t) {
                    double av = vv[t];
                    for (std::size_t j = 0; j < n; ++j) d[t * n + j] += av * g[j];
                }
            });
        });
    }

    Var transpose(Var a) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
        std::size_t r = ta.rows(), c = ta.cols();
        Tensor out = Tensor::zeros({c, r});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ta[i * c + j];
        return record(std::move(out), any_grad({a}), [a, r, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
            });
        });
    }

    // Add a [c] vector to every row of [r x c].
    Var add_rowvec(Var m, Var v) {
        const Tensor& tm = val(m);
        const Tensor& tv = val(v);
        if (tm.rank() != 2 || tv.rank() != 1 || tm.cols() != tv.size())
            throw ShapeError("add_rowvec: incompatible shapes");
        std::size_t r = tm.rows(), c = tm.cols();
        Tensor out = tm;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] += tv[j];
        return record(std::move(out), any_grad({m, v}), [m, v, r, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(m, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
            tp.accumulate(v, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) d[j] += g[i * c + j];
            });
        });
    }

    // ---- normalization ----

    Var softmax_rows(Var a) {
        const Tensor& ta = val(a);
        auto [r, c] = row_view(ta, "softmax_rows");
        Tensor out = ta;
        for (std::size_t i = 0; i < r; ++i) kernels::softmax_row(ta.data() + i * c, out.data() + i * c, c);
        return record(std::move(out), any_grad({a}), [a, r, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& y = tp.nodes_[self].value;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                    for (std::size_t j = 0; j < c; ++j) d[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                }
            });
        });
    }

    Var log_softmax_rows(Var a) {
        const Tensor& ta = val(a);
        auto [r, c] = row_view(ta, "log_softmax_rows");
        Tensor out = ta;
        for (std::size_t i = 0; i < r; ++i) kernels::log_softmax_row(ta.data() + i * c, out.data() + i * c, c);
        return record(std::move(out), any_grad({a}), [a, r, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            const Tensor& y = tp.nodes_[self].value;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i) {
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        d[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
                }
            });
        });
    }

    // Last-axis layer norm with affine output. gamma/beta are [d].
    Var layer_norm(Var x, Var gamma, Var beta, double eps) {
        if (eps <= 0.0) throw ShapeError("layer_norm: eps must be positive");
        const Tensor& tx = val(x);
        auto [r, d] = row_view(tx, "layer_norm");
        const Tensor& tg = val(gamma);
        const Tensor& tb = val(beta);
        if (tg.size() != d || tb.size() != d) throw ShapeError("layer_norm: affine parameters must match last axis");
        Tensor out = tx;
        std::vector<double> xhat(r * d), inv_std(r);
        for (std::size_t i = 0; i < r; ++i) {
            const double* row = tx.data() + i * d;
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += row[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= static_cast<double>(d);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[i] = is;
            for (std::size_t j = 0; j < d; ++j) {
                xhat[i * d + j] = (row[j] - mean) * is;
                out[i * d + j] = tg[j] * xhat[i * d + j] + tb[j];
            }
        }
        return record(std::move(out), any_grad({x, gamma, beta}),
                      [x, gamma, beta, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                          const auto& g = tp.nodes_[self].grad;
                          const Tensor& tg = tp.val(gamma);
                          tp.accumulate(gamma, [&](std::vector<double>& dd) {
                              for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < d; ++j) dd[j] += g[i * d + j] * xhat[i * d + j];
                          });
                          tp.accumulate(beta, [&](std::vector<double>& dd) {
                              for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < d; ++j) dd[j] += g[i * d + j];
                          });
                          tp.accumulate(x, [&](std::vector<double>& dd) {
                              for (std::size_t i = 0; i < r; ++i) {
                                  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                                  for (std::size_t j = 0; j < d; ++j) {
                                      double dxhat = g[i * d + j] * tg[j];
                                      mean_dxhat += dxhat;
                                      mean_dxhat_xhat += dxhat * xhat[i * d + j];
                                  }
                                  mean_dxhat /= static_cast<double>(d);
                                  mean_dxhat_xhat /= static_cast<double>(d);
                                  for (std::size_t j = 0; j < d; ++j) {
                                      double dxhat = g[i * d + j] * tg[j];
                                      dd[i * d + j] += (dxhat - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat) * inv_std[i];
                                  }
                              }
                          });
                      });
    }

    // L2-normalize the last axis. Rejects zero rows rather than returning
    // zeros silently.
    Var l2_normalize_rows(Var x) {
        const Tensor& tx = val(x);
        auto [r, c] = row_view(tx, "l2_normalize_rows");
        Tensor out = tx;
        std::vector<double> norms(r);
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += tx[i * c + j] * tx[i * c + j];
            double n = std::sqrt(s);
            if (n == 0.0) throw NumericError("l2_normalize: zero vector");
            norms[i] = n;
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= n;
        }
        return record(std::move(out), any_grad({x}),
                      [x, r, c, norms = std::move(norms)](Tape& tp, std::size_t self) {
                          const auto& g = tp.nodes_[self].grad;
                          const Tensor& y = tp.nodes_[self].value;
                          tp.accumulate(x, [&](std::vector<double>& d) {
                              for (std::size_t i = 0; i < r; ++i) {
                                  double dot = 0.0;
                                  for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                                  for (std::size_t j = 0; j < c; ++j)
                                      d[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                              }
                          });
                      });
    }

    // ---- attention ----

    // q: [h x m x d], k/v: [h x n x d] -> [h x m x d].
    Var scaled_dot_attention(Var q, Var k, Var v) {
        const Tensor& tq = val(q);
        const Tensor& tk = val(k);
        const Tensor& tv = val(v);
        if (tq.rank() != 3 || tk.rank() != 3 || tv.rank() != 3)
            throw ShapeError("scaled_dot_attention: rank-3 tensors required");
        std::size_t h = tq.dim(0), m = tq.dim(1), d = tq.dim(2);
        std::size_t n = tk.dim(1);
        if (tk.dim(0) != h || tv.dim(0) != h || tk.dim(2) != d || tv.dim(2) != d || tv.dim(1) != n)
            throw ShapeError("scaled_dot_attention: head shapes disagree");
        double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        Tensor out = Tensor::zeros({h, m, d});
        std::vector<double> probs(h * m * n);
        std::vector<double> scores(m * n);
        for (std::size_t hh = 0; hh < h; ++hh) {
            const double* Q = tq.data() + hh * m * d;
            const double* K = tk.data() + hh * n * d;
            const double* V = tv.data() + hh * n * d;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < d; ++t) s += Q[i * d + t] * K[j * d + t];
                    scores[i * n + j] = s * inv_sqrt_d;
                }
            double* P = probs.data() + hh * m * n;
            for (std::size_t i = 0; i < m; ++i) kernels::softmax_row(scores.data() + i * n, P + i * n, n);
            kernels::matmul(P, V, out.data() + hh * m * d, m, n, d);
        }
        return record(std::move(out), any_grad({q, k, v}),
                      [q, k, v, h, m, n, d, inv_sqrt_d, probs = std::move(probs)](Tape& tp, std::size_t self) {
                          const auto& g = tp.nodes_[self].grad;
                          const Tensor& tq2 = tp.val(q);
                          const Tensor& tk2 = tp.val(k);
                          const Tensor& tv2 = tp.val(v);
                          // dS is shared by dQ and dK, so compute it once per head.
                          std::vector<double> ds(m * n);
                          bool need_q = tp.nodes_[q.idx].needs_grad;
                          bool need_k = tp.nodes_[k.idx].needs_grad;
                          bool need_v = tp.nodes_[v.idx].needs_grad;
                          for (std::size_t hh = 0; hh < h; ++hh) {
                              const double* P = probs.data() + hh * m * n;
                              const double* G = g.data() + hh * m * d;
                              const double* V = tv2.data() + hh * n * d;
                              if (need_v) {
                                  tp.accumulate(v, [&](std::vector<double>& dd) {
                                      double* dV = dd.data() + hh * n * d;
                                      for (std::size_t i = 0; i < m; ++i)
                                          for (std::size_t j = 0; j < n; ++j) {
                                              double p = P[i * n + j];
                                              for (std::size_t t = 0; t < d; ++t) dV[j * d + t] += p * G[i * d + t];
                                          }
                                  });
                              }
                              if (need_q || need_k) {
                                  for (std::size_t i = 0; i < m; ++i) {
                                      double row_dot = 0.0;
                                      for (std::size_t j = 0; j < n; ++j) {
                                          double dp = 0.0;
                                          for (std::size_t t = 0; t < d; ++t) dp += G[i * d + t] * V[j * d + t];
                                          ds[i * n + j] = dp;
                                          row_dot += dp * P[i * n + j];
                                      }
                                      for (std::size_t j = 0; j < n; ++j)
                                          ds[i * n + j] = P[i * n + j] * (ds[i * n + j] - row_dot) * inv_sqrt_d;
                                  }
                                  if (need_q) {
                                      const double* K = tk2.data() + hh * n * d;
                                      tp.accumulate(q, [&](std::vector<double>& dd) {
                                          double* dQ = dd.data() + hh * m * d;
                                          for (std::size_t i = 0; i < m; ++i)
                                              for (std::size_t j = 0; j < n; ++j) {
                                                  double sv = ds[i * n + j];
                                                  for (std::size_t t = 0; t < d; ++t) dQ[i * d + t] += sv * K[j * d + t];
                                              }
                                      });
                                  }
                                  if (need_k) {
                                      const double* Q = tq2.data() + hh * m * d;
                                      tp.accumulate(k, [&](std::vector<double>& dd) {
                                          double* dK = dd.data() + hh * n * d;
                                          for (std::size_t i = 0; i < m; ++i)
                                              for (std::size_t j = 0; j < n; ++j) {
                                                  double sv = ds[i * n + j];
                                                  for (std::size_t t = 0; t < d; ++t) dK[j * d + t] += sv * Q[i * d + t];
                                              }
                                      });
                                  }
                              }
                          }
                      });
    }

    // [m x D] -> [h x m x D/h]
    Var split_heads(Var x, std::size_t h) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || h == 0 || tx.cols() % h != 0)
            throw ShapeError("split_heads: columns must divide into heads");
        std::size_t m = tx.rows(), D = tx.cols(), dh = D / h;
        Tensor out = Tensor::zeros({h, m, dh});
        for (std::size_t hh = 0; hh < h; ++hh)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < dh; ++t) out[(hh * m + i) * dh + t] = tx[i * D + hh * dh + t];
        return record(std::move(out), any_grad({x}), [x, h, m, dh](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            std::size_t D = h * dh;
            tp.accumulate(x, [&](std::vector<double>& d) {
                for (std::size_t hh = 0; hh < h; ++hh)
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t t = 0; t < dh; ++t) d[i * D + hh * dh + t] += g[(hh * m + i) * dh + t];
            });
        });
    }

    // [h x m x dh] -> [m x h*dh]
    Var merge_heads(Var x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3) throw ShapeError("merge_heads: rank-3 tensor required");
        std::size_t h = tx.dim(0), m = tx.dim(1), dh = tx.dim(2), D = h * dh;
        Tensor out = Tensor::zeros({m, D});
        for (std::size_t hh = 0; hh < h; ++hh)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < dh; ++t) out[i * D + hh * dh + t] = tx[(hh * m + i) * dh + t];
        return record(std::move(out), any_grad({x}), [x, h, m, dh, D](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(x, [&](std::vector<double>& d) {
                for (std::size_t hh = 0; hh < h; ++hh)
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t t = 0; t < dh; ++t) d[(hh * m + i) * dh + t] += g[i * D + hh * dh + t];
            });
        });
    }

    // ---- structure ----

    Var concat_rows(Var a, Var b) {
        Tensor ta = as_matrix(val(a));
        Tensor tb = as_matrix(val(b));
        if (ta.cols() != tb.cols()) throw ShapeError("concat_rows: column mismatch");
        std::size_t ra = ta.rows(), rb = tb.rows(), c = ta.cols();
        Tensor out = Tensor::zeros({ra + rb, c});
        std::copy(ta.data(), ta.data() + ra * c, out.data());
        std::copy(tb.data(), tb.data() + rb * c, out.data() + ra * c);
        return record(std::move(out), any_grad({a, b}), [a, b, ra, rb, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < ra * c; ++i) d[i] += g[i];
            });
            tp.accumulate(b, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < rb * c; ++i) d[i] += g[ra * c + i];
            });
        });
    }

    Var concat_cols(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows())
            throw ShapeError("concat_cols: row mismatch");
        std::size_t r = ta.rows(), ca = ta.cols(), cb = tb.cols();
        Tensor out = Tensor::zeros({r, ca + cb});
        for (std::size_t i = 0; i < r; ++i) {
            std::copy(ta.data() + i * ca, ta.data() + (i + 1) * ca, out.data() + i * (ca + cb));
            std::copy(tb.data() + i * cb, tb.data() + (i + 1) * cb, out.data() + i * (ca + cb) + ca);
        }
        return record(std::move(out), any_grad({a, b}), [a, b, r, ca, cb](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(a, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < ca; ++j) d[i * ca + j] += g[i * (ca + cb) + j];
            });
            tp.accumulate(b, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < cb; ++j) d[i * cb + j] += g[i * (ca + cb) + ca + j];
            });
        });
    }

    Var take_row(Var x, std::size_t row) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || row >= tx.rows()) throw ShapeError("take_row: row out of range");
        std::size_t c = tx.cols();
        std::vector<double> d(tx.data() + row * c, tx.data() + (row + 1) * c);
        return record(Tensor({c}, std::move(d)), any_grad({x}), [x, row, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(x, [&](std::vector<double>& dd) {
                for (std::size_t j = 0; j < c; ++j) dd[row * c + j] += g[j];
            });
        });
    }

    Var mean_rows(Var x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw ShapeError("mean_rows: rank-2 tensor required");
        std::size_t r = tx.rows(), c = tx.cols();
        Tensor out = Tensor::zeros({c});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[j] += tx[i * c + j];
        for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
        return record(std::move(out), any_grad({x}), [x, r, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(x, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j] / static_cast<double>(r);
            });
        });
    }

    // Column-wise max over fixed-size row groups: [(G*k) x c] -> [G x c].
    // Ties resolve to the lowest row so the backward scatter is unambiguous.
    Var segment_max_rows(Var x, std::size_t k) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || k == 0 || tx.rows() % k != 0)
            throw ShapeError("segment_max_rows: rows must split into groups of k");
        std::size_t groups = tx.rows() / k, c = tx.cols();
        Tensor out = Tensor::zeros({groups, c});
        std::vector<std::size_t> argmax(groups * c);
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t j = 0; j < c; ++j) {
                std::size_t best = g * k;
                double bv = tx[best * c + j];
                for (std::size_t i = 1; i < k; ++i) {
                    double v = tx[(g * k + i) * c + j];
                    if (v > bv) {
                        bv = v;
                        best = g * k + i;
                    }
                }
                out[g * c + j] = bv;
                argmax[g * c + j] = best;
            }
        return record(std::move(out), any_grad({x}),
                      [x, groups, c, argmax = std::move(argmax)](Tape& tp, std::size_t self) {
                          const auto& g = tp.nodes_[self].grad;
                          tp.accumulate(x, [&](std::vector<double>& d) {
                              for (std::size_t i = 0; i < groups * c; ++i) {
                                  std::size_t j = i % c;
                                  d[argmax[i] * c + j] += g[i];
                              }
                          });
                      });
    }

    // Repeat each row k times: [G x c] -> [(G*k) x c].
    Var repeat_rows_grouped(Var x, std::size_t k) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || k == 0) throw ShapeError("repeat_rows_grouped: rank-2 tensor required");
        std::size_t g0 = tx.rows(), c = tx.cols();
        Tensor out = Tensor::zeros({g0 * k, c});
        for (std::size_t g = 0; g < g0; ++g)
            for (std::size_t i = 0; i < k; ++i)
                std::copy(tx.data() + g * c, tx.data() + (g + 1) * c, out.data() + (g * k + i) * c);
        return record(std::move(out), any_grad({x}), [x, g0, k, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            tp.accumulate(x, [&](std::vector<double>& d) {
                for (std::size_t gg = 0; gg < g0; ++gg)
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < c; ++j) d[gg * c + j] += g[(gg * k + i) * c + j];
            });
        });
    }

    Var stack_rows(const std::vector<Var>& rows) {
        if (rows.empty()) throw ShapeError("stack_rows: empty input");
        std::size_t c = val(rows[0]).size();
        bool ng = false;
        Tensor out = Tensor::zeros({rows.size(), c});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const Tensor& t = val(rows[i]);
            if (t.rank() != 1 || t.size() != c) throw ShapeError("stack_rows: rows must be equal-length vectors");
            std::copy(t.data(), t.data() + c, out.data() + i * c);
            ng = ng || nodes_[rows[i].idx].needs_grad;
        }
        return record(std::move(out), ng, [rows, c](Tape& tp, std::size_t self) {
            const auto& g = tp.nodes_[self].grad;
            for (std::size_t i = 0; i < rows.size(); ++i)
                tp.accumulate(rows[i], [&](std::vector<double>& d) {
                    for (std::size_t j = 0; j < c; ++j) d[j] += g[i * c + j];
                });
        });
    }

    // Linear row resampling used for position embeddings: keeps row 0 (CLS)
    // verbatim and resamples the remaining s rows onto m rows.
    Var interpolate_pos(Var pos, std::size_t m) {
        const Tensor& tp0 = val(pos);
        if (tp0.rank() != 2 || tp0.rows() < 2) throw ShapeError("interpolate_pos: need CLS row plus patch rows");
        if (m == 0) throw ShapeError("interpolate_pos: target length must be positive");
        std::size_t s = tp0.rows() - 1, d = tp0.cols();
        auto plan = kernels::linear_resample_plan(s, m);
        Tensor out = Tensor::zeros({m + 1, d});
        std::copy(tp0.data(), tp0.data() + d, out.data());
        for (const auto& term : plan) {
            const double* src = tp0.data() + (term.source + 1) * d;
            double* dst = out.data() + (term.target + 1) * d;
            if (term.weight == 1.0)
                std::copy(src, src + d, dst);
            else
                for (std::size_t j = 0; j < d; ++j) dst[j] += term.weight * src[j];
        }
        return record(std::move(out), any_grad({pos}),
                      [pos, d, plan = std::move(plan)](Tape& tp, std::size_t self) {
                          const auto& g = tp.nodes_[self].grad;
                          tp.accumulate(pos, [&](std::vector<double>& dd) {
                              for (std::size_t j = 0; j < d; ++j) dd[j] += g[j];
                              for (const auto& term : plan)
                                  for (std::size_t j = 0; j < d; ++j)
                                      dd[(term.source + 1) * d + j] += term.weight * g[(term.target + 1) * d + j];
                          });
                      });
    }

    // ---- reductions ----

    Var sum_all(Var x) {
        const Tensor& tx = val(x);
        double s = 0.0;
        for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i];
        return record(Tensor::scalar(s), any_grad({x}), [x](Tape& tp, std::size_t self) {
            double g = tp.nodes_[self].grad[0];
            tp.accumulate(x, [&](std::vector<double>& d) {
                for (auto& v : d) v += g;
            });
        });
    }

    Var diag_sum(Var x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || tx.rows() != tx.cols()) throw ShapeError("diag_sum: square matrix required");
        std::size_t n = tx.rows();
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += tx[i * n + i];
        return record(Tensor::scalar(s), any_grad({x}), [x, n](Tape& tp, std::size_t self) {
            double g = tp.nodes_[self].grad[0];
            tp.accumulate(x, [&](std::vector<double>& d) {
                for (std::size_t i = 0; i < n; ++i) d[i * n + i] += g;
            });
        });
    }

    // ---- backward ----

    // Seeds the scalar output with gradient 1 and replays the tape in exact
    // reverse recording order. Leaf gradients are added into the external
    // tensors' grad buffers; zeroing is the caller's job.
    void backward(Var loss) {
        const Tensor& lt = val(loss);
        if (!lt.is_scalar()) throw ShapeError("backward: loss must be scalar, got " + lt.shape_str());
        grad_of(loss.idx).assign(1, 1.0);
        for (std::size_t i = loss.idx + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
            n.backprop(*this, i);
        }
        for (auto& [tensor, var] : leaf_lookup_) {
            if (!tensor->requires_grad) continue;
            tensor->ensure_grad();
            const auto& g = nodes_[var.idx].grad;
            if (g.empty()) continue;
            auto& dst = *tensor->grad;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;  // empty until touched
        bool needs_grad = false;
        std::function<void(Tape&, std::size_t)> backprop;
    };

    const Tensor& val(Var v) const {
        if (!v.valid() || v.idx >= nodes_.size()) throw ShapeError("invalid tape handle");
        return nodes_[v.idx].value;
    }

    static Tensor as_matrix(const Tensor& t) {
        if (t.rank() == 2) return t;
        if (t.rank() == 1) return Tensor({1, t.size()}, t.values());
        throw ShapeError("expected rank-1 or rank-2 tensor, got " + t.shape_str());
    }

    static std::pair<std::size_t, std::size_t> row_view(const Tensor& t, const char* op) {
        if (t.rank() == 1) return {1, t.size()};
        if (t.rank() == 2) return {t.rows(), t.cols()};
        throw ShapeError(std::string(op) + ": rank-1 or rank-2 tensor required");
    }

    bool any_grad(std::initializer_list<Var> vs) const {
        for (Var v : vs)
            if (nodes_[v.idx].needs_grad) return true;
        return false;
    }

    std::vector<double>& grad_of(std::size_t idx) {
        Node& n = nodes_[idx];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    // Accumulate into a parent only if gradients can flow there.
    template <typename Fn>
    void accumulate(Var parent, Fn&& fn) {
        if (!nodes_[parent.idx].needs_grad) return;
        fn(grad_of(parent.idx));
    }

    Var record(Tensor value, bool needs_grad, std::function<void(Tape&, std::size_t)> backprop) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
    std::unordered_map<Tensor*, Var> leaf_lookup_;
};

}  // namespace mlens
