#include "mvhuman/graph.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>

namespace mvhuman {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// im2col for [Ci,H,W] -> [Ci*k*k, Ho*Wo]
Tensor im2col(const Tensor& x, int k, int stride, int pad, int ho, int wo) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor col({ci * k * k, ho * wo});
    double* cp = col.data();
    const double* xp = x.data();
    for (int c = 0; c < ci; ++c) {
        for (int di = 0; di < k; ++di) {
            for (int dj = 0; dj < k; ++dj) {
                double* dst =
                    cp + (static_cast<std::size_t>(c) * k * k + di * k + dj) * (ho * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + di - pad;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst + static_cast<std::size_t>(oy) * wo, 0,
                                    sizeof(double) * wo);
                        continue;
                    }
                    const double* src = xp + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + dj - pad;
                        dst[static_cast<std::size_t>(oy) * wo + ox] =
                            (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
    return col;
}

// scatter-add of a column matrix back into [Ci,H,W]
void col2im_accum(const Tensor& col, int k, int stride, int pad, int ho, int wo, Tensor& dx) {
    const int ci = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    const double* cp = col.data();
    double* xp = dx.data();
    for (int c = 0; c < ci; ++c) {
        for (int di = 0; di < k; ++di) {
            for (int dj = 0; dj < k; ++dj) {
                const double* src =
                    cp + (static_cast<std::size_t>(c) * k * k + di * k + dj) * (ho * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + di - pad;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = xp + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + dj - pad;
                        if (ix >= 0 && ix < w)
                            dst[ix] += src[static_cast<std::size_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Param& ParamStore::create(const std::string& name, Tensor init) {
    if (params_.count(name)) throw ConfigError("duplicate parameter: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->grad = Tensor::zeros(init.shape());
    p->value = std::move(init);
    Param& ref = *p;
    params_.emplace(name, std::move(p));
    return ref;
}

Param& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw LookupError("unknown parameter: " + name);
    return *it->second;
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw LookupError("unknown parameter: " + name);
    return *it->second;
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) > 0; }

void ParamStore::zero_grads() {
    for (auto& [_, p] : params_)
        std::fill(p->grad.vec().begin(), p->grad.vec().end(), 0.0);
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, p] : params_)
        if (name.rfind(prefix, 0) == 0) p->trainable = trainable;
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& [_, p] : params_) out.push_back(p.get());
    return out;
}

std::vector<const Param*> ParamStore::all() const {
    std::vector<const Param*> out;
    out.reserve(params_.size());
    for (const auto& [_, p] : params_) out.push_back(p.get());
    return out;
}

long long ParamStore::count_values(const std::string& prefix) const {
    long long n = 0;
    for (const auto& [name, p] : params_)
        if (name.rfind(prefix, 0) == 0) n += p->value.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Graph plumbing
// ---------------------------------------------------------------------------

int Graph::new_node(Tensor value, bool needs_grad, std::function<void(Graph&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_live) {
        n.grad = Tensor::zeros(n.value.shape());
        n.grad_live = true;
    }
    return n.grad;
}

void Graph::accum(int id, const Tensor& g) { accum_raw(id, g.data(), g.numel()); }

void Graph::accum_raw(int id, const double* g, int cnt) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    Tensor& buf = grad_buf(id);
    double* dst = buf.data();
    for (int i = 0; i < cnt; ++i) dst[i] += g[i];
}

const Tensor& Graph::val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

Tensor Graph::grad_at(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad_live) return n.grad;
    return Tensor::zeros(n.value.shape());
}

Var Graph::input(Tensor value) { return Var{new_node(std::move(value), false)}; }

Var Graph::param(Param& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    int id = new_node(p.value, p.trainable);
    param_nodes_.emplace(&p, id);
    if (p.trainable) bound_params_.emplace_back(&p, id);
    return Var{id};
}

void Graph::backward(Var loss) {
    if (val(loss).numel() != 1) throw ShapeError("backward expects a scalar loss node");
    grad_buf(loss.id)[0] += 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_live || !n.back) continue;
        n.back(*this);
    }
    for (auto& [p, id] : bound_params_) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_live) continue;
        double* dst = p->grad.data();
        const double* src = n.grad.data();
        const int m = p->grad.numel();
        for (int i = 0; i < m; ++i) dst[i] += src[i];
    }
}

// ---------------------------------------------------------------------------
// Elementwise / scalar ops
// ---------------------------------------------------------------------------

Var Graph::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "add");
    Tensor out(ta.shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
    const int oid = new_node(std::move(out), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            g.accum(ia, go);
            g.accum(ib, go);
        };
    }
    return Var{oid};
}

Var Graph::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "sub");
    Tensor out(ta.shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = ta[i] - tb[i];
    const int oid = new_node(std::move(out), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            g.accum(ia, go);
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                Tensor neg(go.shape());
                for (int i = 0; i < neg.numel(); ++i) neg[i] = -go[i];
                g.accum(ib, neg);
            }
        };
    }
    return Var{oid};
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "mul");
    Tensor out(ta.shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = ta[i] * tb[i];
    const int oid = new_node(std::move(out), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& ta2 = g.nodes_[static_cast<std::size_t>(ia)].value;
            const Tensor& tb2 = g.nodes_[static_cast<std::size_t>(ib)].value;
            if (g.nodes_[static_cast<std::size_t>(ia)].needs_grad) {
                Tensor da(go.shape());
                for (int i = 0; i < da.numel(); ++i) da[i] = go[i] * tb2[i];
                g.accum(ia, da);
            }
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                Tensor db(go.shape());
                for (int i = 0; i < db.numel(); ++i) db[i] = go[i] * ta2[i];
                g.accum(ib, db);
            }
        };
    }
    return Var{oid};
}

Var Graph::scale(Var a, double s) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = ta[i] * s;
    const int oid = new_node(std::move(out), needs(a));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id;
        nodes_[oid].back = [oid, ia, s](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor da(go.shape());
            for (int i = 0; i < da.numel(); ++i) da[i] = go[i] * s;
            g.accum(ia, da);
        };
    }
    return Var{oid};
}

Var Graph::add_scalar(Var a, double s) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = ta[i] + s;
    const int oid = new_node(std::move(out), needs(a));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id;
        nodes_[oid].back = [oid, ia](Graph& g) { g.accum(ia, g.nodes_[oid].grad); };
    }
    return Var{oid};
}

Var Graph::silu(Var x) {
    const Tensor& tx = val(x);
    Tensor out(tx.shape());
    for (int i = 0; i < out.numel(); ++i) out[i] = tx[i] * sigmoid(tx[i]);
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& tx2 = g.nodes_[static_cast<std::size_t>(ix)].value;
            Tensor dx(go.shape());
            for (int i = 0; i < dx.numel(); ++i) {
                const double s = sigmoid(tx2[i]);
                dx[i] = go[i] * s * (1.0 + tx2[i] * (1.0 - s));
            }
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(0))
        throw ShapeError("matmul: incompatible shapes " + ta.shape_str() + " x " +
                         tb.shape_str());
    const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out({m, n});
    MapM(out.data(), m, n).noalias() = CMapM(ta.data(), m, k) * CMapM(tb.data(), k, n);
    const int oid = new_node(std::move(out), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib, m, k, n](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            CMapM gmap(go.data(), m, n);
            if (g.nodes_[static_cast<std::size_t>(ia)].needs_grad) {
                const Tensor& tb2 = g.nodes_[static_cast<std::size_t>(ib)].value;
                Tensor da({m, k});
                MapM(da.data(), m, k).noalias() = gmap * CMapM(tb2.data(), k, n).transpose();
                g.accum(ia, da);
            }
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                const Tensor& ta2 = g.nodes_[static_cast<std::size_t>(ia)].value;
                Tensor db({k, n});
                MapM(db.data(), k, n).noalias() = CMapM(ta2.data(), m, k).transpose() * gmap;
                g.accum(ib, db);
            }
        };
    }
    return Var{oid};
}

Var Graph::matmul_nt(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + ta.shape_str() + " x " +
                         tb.shape_str() + "^T");
    const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
    Tensor out({m, n});
    MapM(out.data(), m, n).noalias() =
        CMapM(ta.data(), m, k) * CMapM(tb.data(), n, k).transpose();
    const int oid = new_node(std::move(out), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib, m, k, n](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            CMapM gmap(go.data(), m, n);
            if (g.nodes_[static_cast<std::size_t>(ia)].needs_grad) {
                const Tensor& tb2 = g.nodes_[static_cast<std::size_t>(ib)].value;
                Tensor da({m, k});
                MapM(da.data(), m, k).noalias() = gmap * CMapM(tb2.data(), n, k);
                g.accum(ia, da);
            }
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                const Tensor& ta2 = g.nodes_[static_cast<std::size_t>(ia)].value;
                Tensor db({n, k});
                MapM(db.data(), n, k).noalias() =
                    gmap.transpose() * CMapM(ta2.data(), m, k);
                g.accum(ib, db);
            }
        };
    }
    return Var{oid};
}

Var Graph::transpose(Var a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2) throw ShapeError("transpose expects a matrix");
    const int m = ta.dim(0), n = ta.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = ta.at(i, j);
    const int oid = new_node(std::move(out), needs(a));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id;
        nodes_[oid].back = [oid, ia, m, n](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor da({m, n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) da.at(i, j) = go.at(j, i);
            g.accum(ia, da);
        };
    }
    return Var{oid};
}

Var Graph::reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    Tensor out(std::move(shape), ta.vec());
    const int oid = new_node(std::move(out), needs(a));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id;
        nodes_[oid].back = [oid, ia](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            g.accum_raw(ia, go.data(), go.numel());
        };
    }
    return Var{oid};
}

// ---------------------------------------------------------------------------
// Concatenation / selection
// ---------------------------------------------------------------------------

Var Graph::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    if (parts.size() == 1) return parts[0];
    const int d = val(parts[0]).dim(1);
    int total = 0;
    bool ng = false;
    for (Var p : parts) {
        const Tensor& t = val(p);
        if (t.ndim() != 2 || t.dim(1) != d)
            throw ShapeError("concat_rows: token width mismatch");
        total += t.dim(0);
        ng = ng || needs(p);
    }
    Tensor out({total, d});
    int r = 0;
    for (Var p : parts) {
        const Tensor& t = val(p);
        std::memcpy(out.data() + static_cast<std::size_t>(r) * d, t.data(),
                    sizeof(double) * t.numel());
        r += t.dim(0);
    }
    const int oid = new_node(std::move(out), ng);
    if (nodes_[oid].needs_grad) {
        std::vector<int> ids;
        std::vector<int> rows;
        for (Var p : parts) {
            ids.push_back(p.id);
            rows.push_back(val(p).dim(0));
        }
        nodes_[oid].back = [oid, ids, rows, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            int rr = 0;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                g.accum_raw(ids[i], go.data() + static_cast<std::size_t>(rr) * d,
                            rows[i] * d);
                rr += rows[i];
            }
        };
    }
    return Var{oid};
}

Var Graph::concat_cols(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(0) != tb.dim(0))
        throw ShapeError("concat_cols: row count mismatch");
    const int n = ta.dim(0), d1 = ta.dim(1), d2 = tb.dim(1);
    Tensor out({n, d1 + d2});
    for (int r = 0; r < n; ++r) {
        std::memcpy(out.data() + static_cast<std::size_t>(r) * (d1 + d2),
                    ta.data() + static_cast<std::size_t>(r) * d1, sizeof(double) * d1);
        std::memcpy(out.data() + static_cast<std::size_t>(r) * (d1 + d2) + d1,
                    tb.data() + static_cast<std::size_t>(r) * d2, sizeof(double) * d2);
    }
    const int oid = new_node(std::move(out), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib, n, d1, d2](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            if (g.nodes_[static_cast<std::size_t>(ia)].needs_grad) {
                Tensor da({n, d1});
                for (int r = 0; r < n; ++r)
                    std::memcpy(da.data() + static_cast<std::size_t>(r) * d1,
                                go.data() + static_cast<std::size_t>(r) * (d1 + d2),
                                sizeof(double) * d1);
                g.accum(ia, da);
            }
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                Tensor db({n, d2});
                for (int r = 0; r < n; ++r)
                    std::memcpy(db.data() + static_cast<std::size_t>(r) * d2,
                                go.data() + static_cast<std::size_t>(r) * (d1 + d2) + d1,
                                sizeof(double) * d2);
                g.accum(ib, db);
            }
        };
    }
    return Var{oid};
}

Var Graph::concat_channels(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    if (parts.size() == 1) return parts[0];
    const int h = val(parts[0]).dim(1), w = val(parts[0]).dim(2);
    int ctotal = 0;
    bool ng = false;
    for (Var p : parts) {
        const Tensor& t = val(p);
        if (t.ndim() != 3 || t.dim(1) != h || t.dim(2) != w)
            throw ShapeError("concat_channels: spatial dims mismatch");
        ctotal += t.dim(0);
        ng = ng || needs(p);
    }
    Tensor out({ctotal, h, w});
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& t = val(p);
        std::memcpy(out.data() + off, t.data(), sizeof(double) * t.numel());
        off += static_cast<std::size_t>(t.numel());
    }
    const int oid = new_node(std::move(out), ng);
    if (nodes_[oid].needs_grad) {
        std::vector<int> ids;
        std::vector<int> sizes;
        for (Var p : parts) {
            ids.push_back(p.id);
            sizes.push_back(val(p).numel());
        }
        nodes_[oid].back = [oid, ids, sizes](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            std::size_t o2 = 0;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                g.accum_raw(ids[i], go.data() + o2, sizes[i]);
                o2 += static_cast<std::size_t>(sizes[i]);
            }
        };
    }
    return Var{oid};
}

Var Graph::row(Var a, int index) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || index < 0 || index >= ta.dim(0))
        throw ShapeError("row: bad index");
    const int d = ta.dim(1);
    Tensor out({1, d});
    std::memcpy(out.data(), ta.data() + static_cast<std::size_t>(index) * d,
                sizeof(double) * d);
    const int oid = new_node(std::move(out), needs(a));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id;
        nodes_[oid].back = [oid, ia, index, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Node& na = g.nodes_[static_cast<std::size_t>(ia)];
            if (!na.needs_grad) return;
            Tensor& buf = g.grad_buf(ia);
            double* dst = buf.data() + static_cast<std::size_t>(index) * d;
            for (int i = 0; i < d; ++i) dst[i] += go[i];
        };
    }
    return Var{oid};
}

Var Graph::repeat_rows(Var a, int n) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || ta.dim(0) != 1) throw ShapeError("repeat_rows expects [1,D]");
    const int d = ta.dim(1);
    Tensor out({n, d});
    for (int r = 0; r < n; ++r)
        std::memcpy(out.data() + static_cast<std::size_t>(r) * d, ta.data(),
                    sizeof(double) * d);
    const int oid = new_node(std::move(out), needs(a));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id;
        nodes_[oid].back = [oid, ia, n, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor da({1, d});
            for (int r = 0; r < n; ++r)
                for (int i = 0; i < d; ++i) da[i] += go[static_cast<std::size_t>(r) * d + i];
            g.accum(ia, da);
        };
    }
    return Var{oid};
}

Var Graph::add_rows(Var x, Var bias_row) {
    const Tensor& tx = val(x);
    const Tensor& tb = val(bias_row);
    const int n = tx.dim(0), d = tx.dim(1);
    if (tb.numel() != d) throw ShapeError("add_rows: bias width mismatch");
    Tensor out({n, d});
    for (int r = 0; r < n; ++r)
        for (int i = 0; i < d; ++i)
            out.at(r, i) = tx.at(r, i) + tb[i];
    const int oid = new_node(std::move(out), needs(x) || needs(bias_row));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id, ib = bias_row.id;
        nodes_[oid].back = [oid, ix, ib, n, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            g.accum_raw(ix, go.data(), go.numel());
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                Tensor db(g.nodes_[static_cast<std::size_t>(ib)].value.shape());
                for (int r = 0; r < n; ++r)
                    for (int i = 0; i < d; ++i) db[i] += go[static_cast<std::size_t>(r) * d + i];
                g.accum(ib, db);
            }
        };
    }
    return Var{oid};
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops
// ---------------------------------------------------------------------------

Var Graph::conv2d(Var x, Var w, Var bias, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    if (tx.ndim() != 3 || tw.ndim() != 4) throw ShapeError("conv2d: expects [C,H,W] and [Co,Ci,k,k]");
    const int ci = tx.dim(0), h = tx.dim(1), wdt = tx.dim(2);
    const int co = tw.dim(0), k = tw.dim(2);
    if (tw.dim(1) != ci) throw ShapeError("conv2d: input channel mismatch");
    if (tw.dim(3) != k) throw ShapeError("conv2d: non-square kernel");
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wdt + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");

    Tensor col = im2col(tx, k, stride, pad, ho, wo);
    const int kk = ci * k * k, nn = ho * wo;
    Tensor out({co, ho, wo});
    MapM(out.data(), co, nn).noalias() =
        CMapM(tw.data(), co, kk) * CMapM(col.data(), kk, nn);
    if (bias.valid()) {
        const Tensor& tb = val(bias);
        if (tb.numel() != co) throw ShapeError("conv2d: bias size mismatch");
        for (int c = 0; c < co; ++c) {
            double* dst = out.data() + static_cast<std::size_t>(c) * nn;
            for (int i = 0; i < nn; ++i) dst[i] += tb[c];
        }
    }
    const bool ng = needs(x) || needs(w) || (bias.valid() && needs(bias));
    const int oid = new_node(std::move(out), ng);
    if (nodes_[oid].needs_grad) {
        const int ix = x.id, iw = w.id, ib = bias.valid() ? bias.id : -1;
        auto colp = std::make_shared<Tensor>(std::move(col));
        nodes_[oid].back = [oid, ix, iw, ib, colp, ci, co, k, kk, nn, ho, wo, stride,
                            pad](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            CMapM gmap(go.data(), co, nn);
            if (g.nodes_[static_cast<std::size_t>(iw)].needs_grad) {
                Tensor dw(g.nodes_[static_cast<std::size_t>(iw)].value.shape());
                MapM(dw.data(), co, kk).noalias() =
                    gmap * CMapM(colp->data(), kk, nn).transpose();
                g.accum(iw, dw);
            }
            if (ib >= 0 && g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                Tensor db({co});
                for (int c = 0; c < co; ++c) {
                    double s = 0;
                    const double* src = go.data() + static_cast<std::size_t>(c) * nn;
                    for (int i = 0; i < nn; ++i) s += src[i];
                    db[c] = s;
                }
                g.accum(ib, db);
            }
            if (g.nodes_[static_cast<std::size_t>(ix)].needs_grad) {
                const Tensor& tw2 = g.nodes_[static_cast<std::size_t>(iw)].value;
                Tensor dcol({kk, nn});
                MapM(dcol.data(), kk, nn).noalias() =
                    CMapM(tw2.data(), co, kk).transpose() * gmap;
                Node& nx = g.nodes_[static_cast<std::size_t>(ix)];
                Tensor& buf = g.grad_buf(ix);
                (void)nx;
                col2im_accum(dcol, k, stride, pad, ho, wo, buf);
            }
        };
    }
    return Var{oid};
}

Var Graph::upsample_nearest2(Var x) {
    const Tensor& tx = val(x);
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at(cc, y, xx) = tx.at(cc, y / 2, xx / 2);
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, c, h, w](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor dx({c, h, w});
            for (int cc = 0; cc < c; ++cc)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        dx.at(cc, y / 2, xx / 2) += go.at(cc, y, xx);
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

Var Graph::avgpool2(Var x) {
    const Tensor& tx = val(x);
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    if (h % 2 || w % 2) throw ShapeError("avgpool2: odd spatial dims");
    Tensor out({c, h / 2, w / 2});
    for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < h / 2; ++y)
            for (int xx = 0; xx < w / 2; ++xx)
                out.at(cc, y, xx) = 0.25 * (tx.at(cc, 2 * y, 2 * xx) +
                                            tx.at(cc, 2 * y, 2 * xx + 1) +
                                            tx.at(cc, 2 * y + 1, 2 * xx) +
                                            tx.at(cc, 2 * y + 1, 2 * xx + 1));
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, c, h, w](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor dx({c, h, w});
            for (int cc = 0; cc < c; ++cc)
                for (int y = 0; y < h / 2; ++y)
                    for (int xx = 0; xx < w / 2; ++xx) {
                        const double v = 0.25 * go.at(cc, y, xx);
                        dx.at(cc, 2 * y, 2 * xx) += v;
                        dx.at(cc, 2 * y, 2 * xx + 1) += v;
                        dx.at(cc, 2 * y + 1, 2 * xx) += v;
                        dx.at(cc, 2 * y + 1, 2 * xx + 1) += v;
                    }
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

Var Graph::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) throw ShapeError("group_norm expects [C,H,W]");
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    if (groups < 1 || c % groups != 0) throw ConfigError("group_norm: groups must divide C");
    const int cg = c / groups, m = cg * h * w;
    Tensor out({c, h, w});
    std::vector<double> means(groups), istds(groups);
    for (int g2 = 0; g2 < groups; ++g2) {
        const double* src = tx.data() + static_cast<std::size_t>(g2) * m;
        double mean = 0;
        for (int i = 0; i < m; ++i) mean += src[i];
        mean /= m;
        double var = 0;
        for (int i = 0; i < m; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= m;
        means[g2] = mean;
        istds[g2] = 1.0 / std::sqrt(var + eps);
    }
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    if (tg.numel() != c || tb.numel() != c) throw ShapeError("group_norm: affine size mismatch");
    for (int cc = 0; cc < c; ++cc) {
        const int g2 = cc / cg;
        const double* src = tx.data() + static_cast<std::size_t>(cc) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(cc) * h * w;
        const double a = tg[cc] * istds[g2];
        const double b = tb[cc] - means[g2] * a;
        for (int i = 0; i < h * w; ++i) dst[i] = a * src[i] + b;
    }
    const int oid = new_node(std::move(out), needs(x) || needs(gamma) || needs(beta));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id, ig = gamma.id, ib2 = beta.id;
        auto meansp = std::make_shared<std::vector<double>>(std::move(means));
        auto istdsp = std::make_shared<std::vector<double>>(std::move(istds));
        nodes_[oid].back = [oid, ix, ig, ib2, meansp, istdsp, c, h, w, groups, cg](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& tx2 = g.nodes_[static_cast<std::size_t>(ix)].value;
            const Tensor& tg2 = g.nodes_[static_cast<std::size_t>(ig)].value;
            const int hw = h * w, m2 = cg * hw;
            // affine grads
            if (g.nodes_[static_cast<std::size_t>(ig)].needs_grad) {
                Tensor dg({c});
                Tensor db({c});
                for (int cc = 0; cc < c; ++cc) {
                    const int g3 = cc / cg;
                    const double* gsrc = go.data() + static_cast<std::size_t>(cc) * hw;
                    const double* xsrc = tx2.data() + static_cast<std::size_t>(cc) * hw;
                    double sg = 0, sb = 0;
                    for (int i = 0; i < hw; ++i) {
                        const double xh = (xsrc[i] - (*meansp)[g3]) * (*istdsp)[g3];
                        sg += gsrc[i] * xh;
                        sb += gsrc[i];
                    }
                    dg[cc] = sg;
                    db[cc] = sb;
                }
                g.accum(ig, dg);
                g.accum(ib2, db);
            }
            if (g.nodes_[static_cast<std::size_t>(ix)].needs_grad) {
                Tensor dx({c, h, w});
                for (int g3 = 0; g3 < groups; ++g3) {
                    const double mean = (*meansp)[g3];
                    const double istd = (*istdsp)[g3];
                    // dxhat = go * gamma ; reduce over the whole group
                    double sum_dxh = 0, sum_dxh_xh = 0;
                    for (int cc = g3 * cg; cc < (g3 + 1) * cg; ++cc) {
                        const double* gsrc = go.data() + static_cast<std::size_t>(cc) * hw;
                        const double* xsrc = tx2.data() + static_cast<std::size_t>(cc) * hw;
                        for (int i = 0; i < hw; ++i) {
                            const double dxh = gsrc[i] * tg2[cc];
                            const double xh = (xsrc[i] - mean) * istd;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                    }
                    for (int cc = g3 * cg; cc < (g3 + 1) * cg; ++cc) {
                        const double* gsrc = go.data() + static_cast<std::size_t>(cc) * hw;
                        const double* xsrc = tx2.data() + static_cast<std::size_t>(cc) * hw;
                        double* dst = dx.data() + static_cast<std::size_t>(cc) * hw;
                        for (int i = 0; i < hw; ++i) {
                            const double dxh = gsrc[i] * tg2[cc];
                            const double xh = (xsrc[i] - mean) * istd;
                            dst[i] = istd * (dxh - sum_dxh / m2 - xh * sum_dxh_xh / m2);
                        }
                    }
                }
                g.accum(ix, dx);
            }
        };
    }
    return Var{oid};
}

namespace {
// shared layer-norm kernel; gamma/beta may be null
void layer_norm_forward(const Tensor& tx, const double* gamma, const double* beta,
                        double eps, Tensor& out, std::vector<double>& means,
                        std::vector<double>& istds) {
    const int n = tx.dim(0), d = tx.dim(1);
    means.resize(n);
    istds.resize(n);
    for (int r = 0; r < n; ++r) {
        const double* src = tx.data() + static_cast<std::size_t>(r) * d;
        double mean = 0;
        for (int i = 0; i < d; ++i) mean += src[i];
        mean /= d;
        double var = 0;
        for (int i = 0; i < d; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= d;
        const double istd = 1.0 / std::sqrt(var + eps);
        means[r] = mean;
        istds[r] = istd;
        double* dst = out.data() + static_cast<std::size_t>(r) * d;
        for (int i = 0; i < d; ++i) {
            double xh = (src[i] - mean) * istd;
            dst[i] = gamma ? gamma[i] * xh + beta[i] : xh;
        }
    }
}
} // namespace

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2) throw ShapeError("layer_norm expects [N,D]");
    const int n = tx.dim(0), d = tx.dim(1);
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    if (tg.numel() != d || tb.numel() != d) throw ShapeError("layer_norm: affine size mismatch");
    Tensor out({n, d});
    std::vector<double> means, istds;
    layer_norm_forward(tx, tg.data(), tb.data(), eps, out, means, istds);
    const int oid = new_node(std::move(out), needs(x) || needs(gamma) || needs(beta));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id, ig = gamma.id, ib = beta.id;
        auto meansp = std::make_shared<std::vector<double>>(std::move(means));
        auto istdsp = std::make_shared<std::vector<double>>(std::move(istds));
        nodes_[oid].back = [oid, ix, ig, ib, meansp, istdsp, n, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& tx2 = g.nodes_[static_cast<std::size_t>(ix)].value;
            const Tensor& tg2 = g.nodes_[static_cast<std::size_t>(ig)].value;
            if (g.nodes_[static_cast<std::size_t>(ig)].needs_grad) {
                Tensor dg({d});
                Tensor db({d});
                for (int r = 0; r < n; ++r) {
                    const double* gsrc = go.data() + static_cast<std::size_t>(r) * d;
                    const double* xsrc = tx2.data() + static_cast<std::size_t>(r) * d;
                    for (int i = 0; i < d; ++i) {
                        const double xh = (xsrc[i] - (*meansp)[r]) * (*istdsp)[r];
                        dg[i] += gsrc[i] * xh;
                        db[i] += gsrc[i];
                    }
                }
                g.accum(ig, dg);
                g.accum(ib, db);
            }
            if (g.nodes_[static_cast<std::size_t>(ix)].needs_grad) {
                Tensor dx({n, d});
                for (int r = 0; r < n; ++r) {
                    const double* gsrc = go.data() + static_cast<std::size_t>(r) * d;
                    const double* xsrc = tx2.data() + static_cast<std::size_t>(r) * d;
                    double* dst = dx.data() + static_cast<std::size_t>(r) * d;
                    double sum_dxh = 0, sum_dxh_xh = 0;
                    const double mean = (*meansp)[r], istd = (*istdsp)[r];
                    for (int i = 0; i < d; ++i) {
                        const double dxh = gsrc[i] * tg2[i];
                        const double xh = (xsrc[i] - mean) * istd;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for (int i = 0; i < d; ++i) {
                        const double dxh = gsrc[i] * tg2[i];
                        const double xh = (xsrc[i] - mean) * istd;
                        dst[i] = istd * (dxh - sum_dxh / d - xh * sum_dxh_xh / d);
                    }
                }
                g.accum(ix, dx);
            }
        };
    }
    return Var{oid};
}

Var Graph::layer_norm_plain(Var x, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2) throw ShapeError("layer_norm_plain expects [N,D]");
    const int n = tx.dim(0), d = tx.dim(1);
    Tensor out({n, d});
    std::vector<double> means, istds;
    layer_norm_forward(tx, nullptr, nullptr, eps, out, means, istds);
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        auto meansp = std::make_shared<std::vector<double>>(std::move(means));
        auto istdsp = std::make_shared<std::vector<double>>(std::move(istds));
        nodes_[oid].back = [oid, ix, meansp, istdsp, n, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& tx2 = g.nodes_[static_cast<std::size_t>(ix)].value;
            Tensor dx({n, d});
            for (int r = 0; r < n; ++r) {
                const double* gsrc = go.data() + static_cast<std::size_t>(r) * d;
                const double* xsrc = tx2.data() + static_cast<std::size_t>(r) * d;
                double* dst = dx.data() + static_cast<std::size_t>(r) * d;
                double sum_dxh = 0, sum_dxh_xh = 0;
                const double mean = (*meansp)[r], istd = (*istdsp)[r];
                for (int i = 0; i < d; ++i) {
                    const double xh = (xsrc[i] - mean) * istd;
                    sum_dxh += gsrc[i];
                    sum_dxh_xh += gsrc[i] * xh;
                }
                for (int i = 0; i < d; ++i) {
                    const double xh = (xsrc[i] - mean) * istd;
                    dst[i] = istd * (gsrc[i] - sum_dxh / d - xh * sum_dxh_xh / d);
                }
            }
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

// ---------------------------------------------------------------------------
// Softmax, norms, reductions
// ---------------------------------------------------------------------------

Var Graph::softmax_rows(Var x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2) throw ShapeError("softmax_rows expects [N,M]");
    const int n = tx.dim(0), m = tx.dim(1);
    Tensor out({n, m});
    for (int r = 0; r < n; ++r) {
        const double* src = tx.data() + static_cast<std::size_t>(r) * m;
        double* dst = out.data() + static_cast<std::size_t>(r) * m;
        double mx = src[0];
        for (int i = 1; i < m; ++i) mx = std::max(mx, src[i]);
        double sum = 0;
        for (int i = 0; i < m; ++i) {
            dst[i] = std::exp(src[i] - mx);
            sum += dst[i];
        }
        for (int i = 0; i < m; ++i) dst[i] /= sum;
    }
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, n, m](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& y = g.nodes_[oid].value;
            Tensor dx({n, m});
            for (int r = 0; r < n; ++r) {
                const double* gsrc = go.data() + static_cast<std::size_t>(r) * m;
                const double* ysrc = y.data() + static_cast<std::size_t>(r) * m;
                double* dst = dx.data() + static_cast<std::size_t>(r) * m;
                double dot = 0;
                for (int i = 0; i < m; ++i) dot += gsrc[i] * ysrc[i];
                for (int i = 0; i < m; ++i) dst[i] = ysrc[i] * (gsrc[i] - dot);
            }
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

Var Graph::l2norm_rows(Var x, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2) throw ShapeError("l2norm_rows expects [N,D]");
    const int n = tx.dim(0), d = tx.dim(1);
    Tensor out({n, d});
    std::vector<double> inorms(n);
    for (int r = 0; r < n; ++r) {
        const double* src = tx.data() + static_cast<std::size_t>(r) * d;
        double s = eps;
        for (int i = 0; i < d; ++i) s += src[i] * src[i];
        const double inv = 1.0 / std::sqrt(s);
        inorms[r] = inv;
        double* dst = out.data() + static_cast<std::size_t>(r) * d;
        for (int i = 0; i < d; ++i) dst[i] = src[i] * inv;
    }
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        auto inp = std::make_shared<std::vector<double>>(std::move(inorms));
        nodes_[oid].back = [oid, ix, inp, n, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            const Tensor& tx2 = g.nodes_[static_cast<std::size_t>(ix)].value;
            Tensor dx({n, d});
            for (int r = 0; r < n; ++r) {
                const double* gsrc = go.data() + static_cast<std::size_t>(r) * d;
                const double* xsrc = tx2.data() + static_cast<std::size_t>(r) * d;
                double* dst = dx.data() + static_cast<std::size_t>(r) * d;
                const double inv = (*inp)[r];
                double dot = 0;
                for (int i = 0; i < d; ++i) dot += gsrc[i] * xsrc[i];
                for (int i = 0; i < d; ++i)
                    dst[i] = inv * gsrc[i] - xsrc[i] * dot * inv * inv * inv;
            }
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

Var Graph::chw_to_tokens(Var x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) throw ShapeError("chw_to_tokens expects [C,H,W]");
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2), n = h * w;
    Tensor out({n, c});
    for (int cc = 0; cc < c; ++cc)
        for (int i = 0; i < n; ++i) out.at(i, cc) = tx[static_cast<std::size_t>(cc) * n + i];
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, c, n](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor dx(g.nodes_[static_cast<std::size_t>(ix)].value.shape());
            for (int cc = 0; cc < c; ++cc)
                for (int i = 0; i < n; ++i)
                    dx[static_cast<std::size_t>(cc) * n + i] = go.at(i, cc);
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

Var Graph::tokens_to_chw(Var x, int h, int w) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2 || tx.dim(0) != h * w) throw ShapeError("tokens_to_chw: bad token count");
    const int n = h * w, d = tx.dim(1);
    Tensor out({d, h, w});
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < d; ++cc) out[static_cast<std::size_t>(cc) * n + i] = tx.at(i, cc);
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, n, d](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor dx({n, d});
            for (int i = 0; i < n; ++i)
                for (int cc = 0; cc < d; ++cc)
                    dx.at(i, cc) = go[static_cast<std::size_t>(cc) * n + i];
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

Var Graph::mean_hw(Var x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) throw ShapeError("mean_hw expects [C,H,W]");
    const int c = tx.dim(0), n = tx.dim(1) * tx.dim(2);
    Tensor out({1, c});
    for (int cc = 0; cc < c; ++cc) {
        double s = 0;
        const double* src = tx.data() + static_cast<std::size_t>(cc) * n;
        for (int i = 0; i < n; ++i) s += src[i];
        out[cc] = s / n;
    }
    const int oid = new_node(std::move(out), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, c, n](Graph& g) {
            const Tensor& go = g.nodes_[oid].grad;
            Tensor dx(g.nodes_[static_cast<std::size_t>(ix)].value.shape());
            for (int cc = 0; cc < c; ++cc) {
                double* dst = dx.data() + static_cast<std::size_t>(cc) * n;
                const double v = go[cc] / n;
                for (int i = 0; i < n; ++i) dst[i] = v;
            }
            g.accum(ix, dx);
        };
    }
    return Var{oid};
}

Var Graph::sum_all(Var x) {
    const Tensor& tx = val(x);
    double s = 0;
    for (int i = 0; i < tx.numel(); ++i) s += tx[i];
    const int oid = new_node(Tensor::scalar(s), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix](Graph& g) {
            const double gv = g.nodes_[oid].grad[0];
            Node& nx = g.nodes_[static_cast<std::size_t>(ix)];
            if (!nx.needs_grad) return;
            Tensor& buf = g.grad_buf(ix);
            for (int i = 0; i < buf.numel(); ++i) buf[i] += gv;
        };
    }
    return Var{oid};
}

Var Graph::mean_all(Var x) {
    const Tensor& tx = val(x);
    double s = 0;
    for (int i = 0; i < tx.numel(); ++i) s += tx[i];
    const int n = tx.numel();
    const int oid = new_node(Tensor::scalar(s / n), needs(x));
    if (nodes_[oid].needs_grad) {
        const int ix = x.id;
        nodes_[oid].back = [oid, ix, n](Graph& g) {
            const double gv = g.nodes_[oid].grad[0] / n;
            Node& nx = g.nodes_[static_cast<std::size_t>(ix)];
            if (!nx.needs_grad) return;
            Tensor& buf = g.grad_buf(ix);
            for (int i = 0; i < buf.numel(); ++i) buf[i] += gv;
        };
    }
    return Var{oid};
}

Var Graph::mse(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "mse");
    const int n = ta.numel();
    double s = 0;
    for (int i = 0; i < n; ++i) {
        const double d = ta[i] - tb[i];
        s += d * d;
    }
    const int oid = new_node(Tensor::scalar(s / n), needs(a) || needs(b));
    if (nodes_[oid].needs_grad) {
        const int ia = a.id, ib = b.id;
        nodes_[oid].back = [oid, ia, ib, n](Graph& g) {
            const double gv = g.nodes_[oid].grad[0] * 2.0 / n;
            const Tensor& ta2 = g.nodes_[static_cast<std::size_t>(ia)].value;
            const Tensor& tb2 = g.nodes_[static_cast<std::size_t>(ib)].value;
            if (g.nodes_[static_cast<std::size_t>(ia)].needs_grad) {
                Tensor da(ta2.shape());
                for (int i = 0; i < n; ++i) da[i] = gv * (ta2[i] - tb2[i]);
                g.accum(ia, da);
            }
            if (g.nodes_[static_cast<std::size_t>(ib)].needs_grad) {
                Tensor db(tb2.shape());
                for (int i = 0; i < n; ++i) db[i] = gv * (tb2[i] - ta2[i]);
                g.accum(ib, db);
            }
        };
    }
    return Var{oid};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void AdamOptimizer::step(ParamStore& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Param* p : params.all()) {
        if (!p->trainable) continue;
        Slot& slot = state_[p->name];
        if (slot.m.numel() == 0) {
            slot.m = Tensor::zeros(p->value.shape());
            slot.v = Tensor::zeros(p->value.shape());
        }
        const int n = p->value.numel();
        for (int i = 0; i < n; ++i) {
            const double g = p->grad[i];
            slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
            slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            p->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

} // namespace mvhuman
