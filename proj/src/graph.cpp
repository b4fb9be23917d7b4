#include "simt/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "simt/attention.hpp"
#include "simt/rng.hpp"

namespace simt {

namespace {

// Raw matrix helpers used by backward closures. All accumulate over the inner
// index in ascending order so batch and streaming paths agree bitwise.

// C += or = A[m,k] * B[k,n]
void mm(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
    int m = a.rows(), k = a.cols(), n = b.cols();
    if (!accumulate) c.fill(0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* crow = c.data() + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b.data() + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += or = A[m,k] * B[n,k]^T
void mm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
    int m = a.rows(), k = a.cols(), n = b.rows();
    if (!accumulate) c.fill(0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* crow = c.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b.data() + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

// C += or = A[k,m]^T * B[k,n]
void mm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
    int k = a.rows(), m = a.cols(), n = b.cols();
    if (!accumulate) c.fill(0.0);
    for (int l = 0; l < k; ++l) {
        const double* arow = a.data() + static_cast<size_t>(l) * m;
        const double* brow = b.data() + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

constexpr double kLnEps = 1e-5;

} // namespace

int Graph::push(Tensor value, bool needs_grad, std::function<void(Graph&)> back) {
    auto node = std::make_unique<Node>();
    value.set_precision(prec_);
    node->value = std::move(value);
    node->needs_grad = recording_ && needs_grad;
    if (node->needs_grad) node->back = std::move(back);
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buf(int id) {
    Node& n = *nodes_[id];
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

Tensor& Graph::grad(Var v) {
    check_same_graph(v);
    return grad_buf(v.id);
}

void Graph::add_into_grad(int id, const Tensor& g) {
    Tensor& dst = grad_buf(id);
    double* d = dst.data();
    const double* s = g.data();
    for (int64_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

void Graph::check_same_graph(Var a) const {
    if (a.graph != this || a.id < 0 || a.id >= static_cast<int>(nodes_.size())) {
        throw std::invalid_argument("graph: variable does not belong to this graph");
    }
}

Var Graph::leaf(const Parameter& p) {
    const Parameter* pp = &p;
    int id = push(p.value, true, {});
    if (recording_) {
        nodes_[id]->param = pp;
        nodes_[id]->back = [id, pp](Graph& g) {
            const Tensor& ng = g.nodes_[id]->grad;
            double* dst = pp->grad.data();
            const double* src = ng.data();
            for (int64_t i = 0, n = ng.size(); i < n; ++i) dst[i] += src[i];
        };
    }
    return {this, id};
}

Var Graph::constant(Tensor t) {
    return {this, push(std::move(t), false, {})};
}

Var Graph::add(Var a, Var b) {
    check_same_graph(a);
    check_same_graph(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch");
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
    bool ng = nodes_[a.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, b](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            if (g.nodes_[a.id]->needs_grad) g.add_into_grad(a.id, dy);
            if (g.nodes_[b.id]->needs_grad) g.add_into_grad(b.id, dy);
        };
    }
    return {this, id};
}

Var Graph::sub(Var a, Var b) {
    check_same_graph(a);
    check_same_graph(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] - tb[i];
    bool ng = nodes_[a.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, b](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            if (g.nodes_[a.id]->needs_grad) g.add_into_grad(a.id, dy);
            if (g.nodes_[b.id]->needs_grad) {
                Tensor& db = g.grad_buf(b.id);
                for (int64_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
            }
        };
    }
    return {this, id};
}

Var Graph::mul(Var a, Var b) {
    check_same_graph(a);
    check_same_graph(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
    bool ng = nodes_[a.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, b](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& va = g.nodes_[a.id]->value;
            const Tensor& vb = g.nodes_[b.id]->value;
            if (g.nodes_[a.id]->needs_grad) {
                Tensor& da = g.grad_buf(a.id);
                for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * vb[i];
            }
            if (g.nodes_[b.id]->needs_grad) {
                Tensor& db = g.grad_buf(b.id);
                for (int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * va[i];
            }
        };
    }
    return {this, id};
}

Var Graph::scale(Var a, double c) {
    check_same_graph(a);
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * c;
    int id = push(std::move(out), nodes_[a.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, c](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * c;
        };
    }
    return {this, id};
}

Var Graph::relu(Var a) {
    check_same_graph(a);
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
    int id = push(std::move(out), nodes_[a.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& va = g.nodes_[a.id]->value;
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < dy.size(); ++i) {
                if (va[i] > 0.0) da[i] += dy[i];
            }
        };
    }
    return {this, id};
}

Var Graph::sigmoid(Var a) {
    check_same_graph(a);
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
    int id = push(std::move(out), nodes_[a.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& y = g.nodes_[id]->value;
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * y[i] * (1.0 - y[i]);
        };
    }
    return {this, id};
}

Var Graph::abs(Var a) {
    check_same_graph(a);
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.size(); ++i) out[i] = std::fabs(ta[i]);
    int id = push(std::move(out), nodes_[a.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& va = g.nodes_[a.id]->value;
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < dy.size(); ++i) {
                da[i] += va[i] > 0.0 ? dy[i] : (va[i] < 0.0 ? -dy[i] : 0.0);
            }
        };
    }
    return {this, id};
}

Var Graph::matmul(Var a, Var b) {
    check_same_graph(a);
    check_same_graph(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor out = Tensor::matrix(ta.rows(), tb.cols());
    mm(ta, tb, out, false);
    bool ng = nodes_[a.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, b](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            if (g.nodes_[a.id]->needs_grad) {
                mm_nt(dy, g.nodes_[b.id]->value, g.grad_buf(a.id), true);
            }
            if (g.nodes_[b.id]->needs_grad) {
                mm_tn(g.nodes_[a.id]->value, dy, g.grad_buf(b.id), true);
            }
        };
    }
    return {this, id};
}

Var Graph::matmul_nt(Var a, Var b) {
    check_same_graph(a);
    check_same_graph(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    Tensor out = Tensor::matrix(ta.rows(), tb.rows());
    mm_nt(ta, tb, out, false);
    bool ng = nodes_[a.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, b](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            if (g.nodes_[a.id]->needs_grad) {
                mm(dy, g.nodes_[b.id]->value, g.grad_buf(a.id), true);
            }
            if (g.nodes_[b.id]->needs_grad) {
                mm_tn(dy, g.nodes_[a.id]->value, g.grad_buf(b.id), true);
            }
        };
    }
    return {this, id};
}

Var Graph::add_rowvec(Var x, Var b) {
    check_same_graph(x);
    check_same_graph(b);
    const Tensor& tx = value(x);
    const Tensor& tb = value(b);
    if (tb.size() != tx.cols()) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out(tx.shape());
    int r = tx.rows(), c = tx.cols();
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out.at(i, j) = tx.at(i, j) + tb[j];
    }
    bool ng = nodes_[x.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, x, b](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            if (g.nodes_[x.id]->needs_grad) g.add_into_grad(x.id, dy);
            if (g.nodes_[b.id]->needs_grad) {
                Tensor& db = g.grad_buf(b.id);
                int r = dy.rows(), c = dy.cols();
                for (int i = 0; i < r; ++i) {
                    for (int j = 0; j < c; ++j) db[j] += dy.at(i, j);
                }
            }
        };
    }
    return {this, id};
}

Var Graph::sum(Var a) {
    check_same_graph(a);
    const Tensor& ta = value(a);
    double acc = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) acc += ta[i];
    int id = push(Tensor::scalar(acc), nodes_[a.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a](Graph& g) {
            double dy = g.nodes_[id]->grad[0];
            Tensor& da = g.grad_buf(a.id);
            for (int64_t i = 0; i < da.size(); ++i) da[i] += dy;
        };
    }
    return {this, id};
}

Var Graph::row_sum(Var a) {
    check_same_graph(a);
    const Tensor& ta = value(a);
    int r = ta.rows(), c = ta.cols();
    Tensor out({r});
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += ta.at(i, j);
        out[i] = acc;
    }
    int id = push(std::move(out), nodes_[a.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& da = g.grad_buf(a.id);
            int r = da.rows(), c = da.cols();
            for (int i = 0; i < r; ++i) {
                for (int j = 0; j < c; ++j) da.at(i, j) += dy[i];
            }
        };
    }
    return {this, id};
}

Var Graph::row_slice(Var x, int from, int count) {
    check_same_graph(x);
    const Tensor& tx = value(x);
    if (from < 0 || count < 0 || from + count > tx.rows()) {
        throw std::invalid_argument("row_slice: range out of bounds");
    }
    int c = tx.cols();
    Tensor out = Tensor::matrix(count, c);
    std::copy_n(tx.data() + static_cast<size_t>(from) * c, static_cast<size_t>(count) * c,
                out.data());
    int id = push(std::move(out), nodes_[x.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, x, from, count](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& dx = g.grad_buf(x.id);
            int c = dx.cols();
            double* dst = dx.data() + static_cast<size_t>(from) * c;
            const double* src = dy.data();
            for (int64_t i = 0, n = static_cast<int64_t>(count) * c; i < n; ++i) dst[i] += src[i];
        };
    }
    return {this, id};
}

Var Graph::col_slice(Var x, int from, int count) {
    check_same_graph(x);
    const Tensor& tx = value(x);
    if (from < 0 || count < 0 || from + count > tx.cols()) {
        throw std::invalid_argument("col_slice: range out of bounds");
    }
    int r = tx.rows();
    Tensor out = Tensor::matrix(r, count);
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < count; ++j) out.at(i, j) = tx.at(i, from + j);
    }
    int id = push(std::move(out), nodes_[x.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, x, from, count](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& dx = g.grad_buf(x.id);
            int r = dy.rows();
            for (int i = 0; i < r; ++i) {
                for (int j = 0; j < count; ++j) dx.at(i, from + j) += dy.at(i, j);
            }
        };
    }
    return {this, id};
}

Var Graph::concat_rows(Var a, Var b) {
    check_same_graph(a);
    check_same_graph(b);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.cols()) throw std::invalid_argument("concat_rows: width mismatch");
    int ra = ta.rows(), rb = tb.rows(), c = ta.cols();
    Tensor out = Tensor::matrix(ra + rb, c);
    std::copy_n(ta.data(), static_cast<size_t>(ra) * c, out.data());
    std::copy_n(tb.data(), static_cast<size_t>(rb) * c, out.data() + static_cast<size_t>(ra) * c);
    bool ng = nodes_[a.id]->needs_grad || nodes_[b.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, a, b, ra, c](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            if (g.nodes_[a.id]->needs_grad) {
                Tensor& da = g.grad_buf(a.id);
                for (int64_t i = 0, n = da.size(); i < n; ++i) da[i] += dy[i];
            }
            if (g.nodes_[b.id]->needs_grad) {
                Tensor& db = g.grad_buf(b.id);
                const double* src = dy.data() + static_cast<size_t>(ra) * c;
                for (int64_t i = 0, n = db.size(); i < n; ++i) db[i] += src[i];
            }
        };
    }
    return {this, id};
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    int r = value(parts[0]).rows();
    int total = 0;
    bool ng = false;
    for (Var p : parts) {
        check_same_graph(p);
        if (value(p).rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        total += value(p).cols();
        ng = ng || nodes_[p.id]->needs_grad;
    }
    Tensor out = Tensor::matrix(r, total);
    int off = 0;
    for (Var p : parts) {
        const Tensor& tp = value(p);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < tp.cols(); ++j) out.at(i, off + j) = tp.at(i, j);
        }
        off += tp.cols();
    }
    std::vector<Var> ps = parts;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, ps](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            int r = dy.rows();
            int off = 0;
            for (Var p : ps) {
                int c = g.nodes_[p.id]->value.cols();
                if (g.nodes_[p.id]->needs_grad) {
                    Tensor& dp = g.grad_buf(p.id);
                    for (int i = 0; i < r; ++i) {
                        for (int j = 0; j < c; ++j) dp.at(i, j) += dy.at(i, off + j);
                    }
                }
                off += c;
            }
        };
    }
    return {this, id};
}

Var Graph::gather_rows(Var table, std::vector<int> ids) {
    check_same_graph(table);
    const Tensor& tt = value(table);
    int n = tt.rows(), c = tt.cols();
    for (int idx : ids) {
        if (idx < 0 || idx >= n) {
            throw std::invalid_argument("gather_rows: index out of table range");
        }
    }
    Tensor out = Tensor::matrix(static_cast<int>(ids.size()), c);
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(tt.data() + static_cast<size_t>(ids[i]) * c, c,
                    out.data() + i * static_cast<size_t>(c));
    }
    int id = push(std::move(out), nodes_[table.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, table, ids](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& dt = g.grad_buf(table.id);
            int c = dt.cols();
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = dt.data() + static_cast<size_t>(ids[i]) * c;
                const double* src = dy.data() + i * static_cast<size_t>(c);
                for (int j = 0; j < c; ++j) dst[j] += src[j];
            }
        };
    }
    return {this, id};
}

Var Graph::layer_norm(Var x, Var gain, Var bias) {
    check_same_graph(x);
    check_same_graph(gain);
    check_same_graph(bias);
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    int r = tx.rows(), c = tx.cols();
    if (tg.size() != c || tb.size() != c) throw std::invalid_argument("layer_norm: width mismatch");
    Tensor out(tx.shape());
    for (int i = 0; i < r; ++i) {
        layer_norm_row(tx.row(i), tg.values(), tb.values(), out.row(i));
    }
    bool ng = nodes_[x.id]->needs_grad || nodes_[gain.id]->needs_grad ||
              nodes_[bias.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, x, gain, bias](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& tx = g.nodes_[x.id]->value;
            const Tensor& tg = g.nodes_[gain.id]->value;
            int r = tx.rows(), c = tx.cols();
            for (int i = 0; i < r; ++i) {
                double mean = 0.0;
                for (int j = 0; j < c; ++j) mean += tx.at(i, j);
                mean /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) {
                    double d = tx.at(i, j) - mean;
                    var += d * d;
                }
                var /= c;
                double inv = 1.0 / std::sqrt(var + kLnEps);
                double m1 = 0.0, m2 = 0.0; // means of g*dy and g*dy*xhat
                for (int j = 0; j < c; ++j) {
                    double xh = (tx.at(i, j) - mean) * inv;
                    double gd = dy.at(i, j) * tg[j];
                    m1 += gd;
                    m2 += gd * xh;
                }
                m1 /= c;
                m2 /= c;
                if (g.nodes_[x.id]->needs_grad) {
                    Tensor& dx = g.grad_buf(x.id);
                    for (int j = 0; j < c; ++j) {
                        double xh = (tx.at(i, j) - mean) * inv;
                        double gd = dy.at(i, j) * tg[j];
                        dx.at(i, j) += (gd - m1 - xh * m2) * inv;
                    }
                }
                if (g.nodes_[gain.id]->needs_grad) {
                    Tensor& dg = g.grad_buf(gain.id);
                    for (int j = 0; j < c; ++j) {
                        double xh = (tx.at(i, j) - mean) * inv;
                        dg[j] += dy.at(i, j) * xh;
                    }
                }
                if (g.nodes_[bias.id]->needs_grad) {
                    Tensor& db = g.grad_buf(bias.id);
                    for (int j = 0; j < c; ++j) db[j] += dy.at(i, j);
                }
            }
        };
    }
    return {this, id};
}

Var Graph::prefix_softmax(Var scores, std::vector<int> lengths) {
    check_same_graph(scores);
    const Tensor& ts = value(scores);
    int r = ts.rows(), c = ts.cols();
    if (static_cast<int>(lengths.size()) != r) {
        throw std::invalid_argument("prefix_softmax: lengths size mismatch");
    }
    Tensor out = Tensor::matrix(r, c);
    for (int i = 0; i < r; ++i) {
        int len = lengths[i];
        if (len < 1 || len > c) throw std::invalid_argument("prefix_softmax: bad row length");
        softmax_into(std::span<const double>(ts.data() + static_cast<size_t>(i) * c, len),
                     std::span<double>(out.data() + static_cast<size_t>(i) * c, len));
    }
    int id = push(std::move(out), nodes_[scores.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, scores, lengths](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& y = g.nodes_[id]->value;
            Tensor& dx = g.grad_buf(scores.id);
            int r = y.rows(), c = y.cols();
            for (int i = 0; i < r; ++i) {
                int len = lengths[i];
                double dot = 0.0;
                for (int j = 0; j < len; ++j) dot += dy.at(i, j) * y.at(i, j);
                for (int j = 0; j < len; ++j) {
                    dx.at(i, j) += y.at(i, j) * (dy.at(i, j) - dot);
                }
                (void)c;
            }
        };
    }
    return {this, id};
}

Var Graph::prefix_row_mean(Var x) {
    check_same_graph(x);
    const Tensor& tx = value(x);
    int r = tx.rows(), c = tx.cols();
    Tensor out = Tensor::matrix(r, c);
    std::vector<double> acc(c, 0.0);
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
            acc[j] += tx.at(i, j);
            out.at(i, j) = acc[j] / (i + 1);
        }
    }
    int id = push(std::move(out), nodes_[x.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, x](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& dx = g.grad_buf(x.id);
            int r = dy.rows(), c = dy.cols();
            std::vector<double> acc(c, 0.0);
            for (int i = r - 1; i >= 0; --i) {
                for (int j = 0; j < c; ++j) {
                    acc[j] += dy.at(i, j) / (i + 1);
                    dx.at(i, j) += acc[j];
                }
            }
        };
    }
    return {this, id};
}

Var Graph::cross_entropy(Var logits, std::vector<int> targets, double label_smoothing) {
    check_same_graph(logits);
    const Tensor& tl = value(logits);
    int r = tl.rows(), v = tl.cols();
    if (static_cast<int>(targets.size()) != r) {
        throw std::invalid_argument("cross_entropy: target count mismatch");
    }
    for (int t : targets) {
        if (t < 0 || t >= v) throw std::invalid_argument("cross_entropy: target out of vocabulary");
    }
    double total = 0.0;
    for (int i = 0; i < r; ++i) {
        std::span<const double> row(tl.data() + static_cast<size_t>(i) * v, v);
        double mx = row[0];
        for (double x : row) mx = std::max(mx, x);
        double z = 0.0, mean_logit = 0.0;
        for (double x : row) {
            z += std::exp(x - mx);
            mean_logit += x;
        }
        double lse = std::log(z) + mx;
        double target_term = (1.0 - label_smoothing) * row[targets[i]] +
                             label_smoothing * (mean_logit / v);
        total += lse - target_term;
    }
    int id = push(Tensor::scalar(total), nodes_[logits.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, logits, targets, label_smoothing](Graph& g) {
            double seed = g.nodes_[id]->grad[0];
            const Tensor& tl = g.nodes_[logits.id]->value;
            Tensor& dl = g.grad_buf(logits.id);
            int r = tl.rows(), v = tl.cols();
            std::vector<double> sm(v);
            for (int i = 0; i < r; ++i) {
                std::span<const double> row(tl.data() + static_cast<size_t>(i) * v, v);
                softmax_into(row, sm);
                double* drow = dl.data() + static_cast<size_t>(i) * v;
                double uniform = label_smoothing / v;
                for (int j = 0; j < v; ++j) drow[j] += seed * (sm[j] - uniform);
                drow[targets[i]] -= seed * (1.0 - label_smoothing);
            }
        };
    }
    return {this, id};
}

Var Graph::dropout(Var x, double rate, Pcg32& rng) {
    check_same_graph(x);
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    const Tensor& tx = value(x);
    if (rate == 0.0) return x;
    auto mask = std::make_shared<std::vector<double>>(tx.size());
    double keep_scale = 1.0 / (1.0 - rate);
    Tensor out(tx.shape());
    for (int64_t i = 0; i < tx.size(); ++i) {
        (*mask)[i] = rng.next_double() >= rate ? keep_scale : 0.0;
        out[i] = tx[i] * (*mask)[i];
    }
    int id = push(std::move(out), nodes_[x.id]->needs_grad, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, x, mask](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            Tensor& dx = g.grad_buf(x.id);
            for (int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
        };
    }
    return {this, id};
}

Var Graph::ssa_weights(Var p, Var e_src, Var e_tgt, std::vector<int> bounds, Allocation mode) {
    check_same_graph(p);
    check_same_graph(e_src);
    check_same_graph(e_tgt);
    const Tensor& tp = value(p);
    const Tensor& ts = value(e_src);
    const Tensor& tt = value(e_tgt);
    int rows = tp.rows(), src_n = tp.cols();
    if (ts.rows() != rows || ts.cols() != src_n || tt.rows() != rows || tt.cols() != rows) {
        throw std::invalid_argument("ssa_weights: shape mismatch");
    }
    if (static_cast<int>(bounds.size()) != rows) {
        throw std::invalid_argument("ssa_weights: bounds size mismatch");
    }
    Tensor out = Tensor::matrix(rows, src_n + rows);
    for (int i = 0; i < rows; ++i) {
        int bound = bounds[i];
        SsaRow row = ssa_row(tp.row(i).subspan(0, src_n), ts.row(i),
                             tt.row(i).subspan(0, static_cast<size_t>(i) + 1), bound, mode);
        for (int j = 0; j < bound; ++j) out.at(i, j) = row.alpha_src[j];
        for (int k = 0; k <= i; ++k) out.at(i, src_n + k) = row.alpha_tgt[k];
    }
    bool ng = nodes_[p.id]->needs_grad || nodes_[e_src.id]->needs_grad ||
              nodes_[e_tgt.id]->needs_grad;
    int id = push(std::move(out), ng, {});
    if (nodes_[id]->needs_grad) {
        nodes_[id]->back = [id, p, e_src, e_tgt, bounds, mode, src_n](Graph& g) {
            const Tensor& dy = g.nodes_[id]->grad;
            const Tensor& tp = g.nodes_[p.id]->value;
            const Tensor& ts = g.nodes_[e_src.id]->value;
            const Tensor& tt = g.nodes_[e_tgt.id]->value;
            bool need_p = g.nodes_[p.id]->needs_grad;
            bool need_s = g.nodes_[e_src.id]->needs_grad;
            bool need_t = g.nodes_[e_tgt.id]->needs_grad;
            Tensor* dp = need_p ? &g.grad_buf(p.id) : nullptr;
            Tensor* dsrc = need_s ? &g.grad_buf(e_src.id) : nullptr;
            Tensor* dtgt = need_t ? &g.grad_buf(e_tgt.id) : nullptr;
            int rows = tp.rows();
            for (int i = 0; i < rows; ++i) {
                int bound = bounds[i];
                int tn = i + 1;
                std::span<const double> prow = tp.row(i);
                std::span<const double> erow = ts.row(i);
                std::span<const double> frow = tt.row(i);
                const double* das = dy.data() + static_cast<size_t>(i) * dy.cols();
                const double* dat = das + src_n;

                // recompute the target-side softmax
                std::vector<double> tsm(tn);
                softmax_into(frow.subspan(0, tn), tsm);
                double p_total = 0.0;
                for (int m = 0; m < bound; ++m) p_total += prow[m];

                double d_ptotal = 0.0;
                for (int k = 0; k < tn; ++k) d_ptotal -= dat[k] * tsm[k];
                // d e_tgt via softmax backward with upstream (1-P)*dat
                if (need_t) {
                    double dot = 0.0;
                    for (int k = 0; k < tn; ++k) dot += (1.0 - p_total) * dat[k] * tsm[k];
                    for (int k = 0; k < tn; ++k) {
                        dtgt->at(i, k) += tsm[k] * ((1.0 - p_total) * dat[k] - dot);
                    }
                }

                if (mode == Allocation::expected) {
                    double c = erow[0];
                    for (int j = 1; j < bound; ++j) c = std::max(c, erow[j]);
                    std::vector<double> ex(bound), z(bound), w(bound), s(bound);
                    double zacc = 0.0;
                    for (int m = 0; m < bound; ++m) {
                        ex[m] = std::exp(erow[m] - c);
                        zacc += ex[m];
                        z[m] = zacc;
                        w[m] = prow[m] / z[m];
                    }
                    double sacc = 0.0;
                    for (int j = bound - 1; j >= 0; --j) {
                        sacc += w[j];
                        s[j] = sacc;
                    }
                    std::vector<double> dex(bound, 0.0), dw(bound, 0.0);
                    // alpha_src[j] = ex[j]*s[j]; ds flows into all w[m>=j]
                    double ds_cum = 0.0;
                    for (int m = 0; m < bound; ++m) {
                        ds_cum += das[m] * ex[m];
                        dw[m] = ds_cum;
                        dex[m] += das[m] * s[m];
                    }
                    double dz_suffix = 0.0;
                    for (int m = bound - 1; m >= 0; --m) {
                        if (need_p) dp->at(i, m) += dw[m] / z[m] + d_ptotal;
                        double dz = -dw[m] * w[m] / z[m];
                        dz_suffix += dz;
                        dex[m] += dz_suffix;
                    }
                    if (need_s) {
                        for (int m = 0; m < bound; ++m) dsrc->at(i, m) += dex[m] * ex[m];
                    }
                } else {
                    int best = 0;
                    for (int m = 1; m < bound; ++m) {
                        if (prow[m] > prow[best]) best = m;
                    }
                    std::vector<double> ssm(best + 1);
                    softmax_into(erow.subspan(0, best + 1), ssm);
                    for (int j = 0; j <= best; ++j) d_ptotal += das[j] * ssm[j];
                    if (need_s) {
                        double dot = 0.0;
                        for (int j = 0; j <= best; ++j) dot += p_total * das[j] * ssm[j];
                        for (int j = 0; j <= best; ++j) {
                            dsrc->at(i, j) += ssm[j] * (p_total * das[j] - dot);
                        }
                    }
                    if (need_p) {
                        for (int m = 0; m < bound; ++m) dp->at(i, m) += d_ptotal;
                    }
                }
            }
        };
    }
    return {this, id};
}

void Graph::backward(Var loss, double seed) {
    check_same_graph(loss);
    if (!recording_) throw std::invalid_argument("backward: graph is not recording");
    if (value(loss).size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    // independent sweeps: clear any gradients left by a previous backward call
    for (auto& n : nodes_) {
        if (n->grad_alloc) {
            n->grad.fill(0.0);
            n->grad_alloc = false;
        }
    }
    grad_buf(loss.id)[0] = seed;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = *nodes_[i];
        if (!n.needs_grad || !n.grad_alloc || !n.back) continue;
        n.back(*this);
    }
}

} // namespace simt
