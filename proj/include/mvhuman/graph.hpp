#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mvhuman/tensor.hpp"

namespace mvhuman {

/// Named learnable tensor with a gradient accumulator.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

/// Owns parameters with stable addresses; iteration order is by name.
class ParamStore {
public:
    Param& create(const std::string& name, Tensor init);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const;
    void zero_grads();
    void set_trainable(const std::string& prefix, bool trainable);
    std::vector<Param*> all();
    std::vector<const Param*> all() const;
    long long count_values(const std::string& prefix = "") const;

private:
    std::map<std::string, std::unique_ptr<Param>> params_;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff tape. Build a fresh graph per forward pass; call
/// backward(loss) once to accumulate into bound Param::grad. Forward-only use
/// (inference) simply never calls backward.
class Graph {
public:
    Var input(Tensor value);
    Var param(Param& p);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);

    Var matmul(Var a, Var b);    // [M,K]x[K,N] -> [M,N]
    Var matmul_nt(Var a, Var b); // [M,K]x[N,K] -> [M,N] (B transposed)
    Var transpose(Var a);        // [M,N] -> [N,M]
    Var reshape(Var a, std::vector<int> shape);

    Var concat_rows(const std::vector<Var>& parts); // [Ni,D] -> [sum N,D]
    Var concat_cols(Var a, Var b);                  // [N,D1]+[N,D2] -> [N,D1+D2]
    Var concat_channels(const std::vector<Var>& parts); // [Ci,H,W] -> [sum C,H,W]
    Var row(Var a, int index);        // [N,D] -> [1,D]
    Var repeat_rows(Var a, int n);    // [1,D] -> [n,D]

    Var conv2d(Var x, Var w, Var bias, int stride, int pad); // bias may be invalid Var
    Var upsample_nearest2(Var x);
    Var avgpool2(Var x); // 2x2 average pool, stride 2

    Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5); // rowwise on [N,D]
    Var layer_norm_plain(Var x, double eps = 1e-5);                // no affine

    Var silu(Var x);
    Var softmax_rows(Var x);
    Var l2norm_rows(Var x, double eps = 1e-12);

    Var add_rows(Var x, Var bias_row); // [N,D] + [D] (or [1,D]) broadcast over rows
    Var chw_to_tokens(Var x);          // [C,H,W] -> [H*W, C]
    Var tokens_to_chw(Var x, int h, int w); // [N,D] -> [D,h,w]
    Var mean_hw(Var x); // [C,H,W] -> [1,C]

    Var sum_all(Var x);  // -> [1]
    Var mean_all(Var x); // -> [1]
    Var mse(Var a, Var b); // mean squared difference -> [1]

    const Tensor& val(Var v) const;
    const std::vector<int>& shape(Var v) const { return val(v).shape(); }

    /// Backpropagates from a scalar node and adds into Param::grad of every
    /// bound trainable parameter.
    void backward(Var loss);

    /// Gradient of the last backward() at a node (for tests). Zeros if unused.
    Tensor grad_at(Var v) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad; // allocated lazily
        bool needs_grad = false;
        bool grad_live = false;
        std::function<void(Graph&)> back;
    };

    int new_node(Tensor value, bool needs_grad, std::function<void(Graph&)> back = nullptr);
    bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
    Tensor& grad_buf(int id);
    void accum(int id, const Tensor& g);
    void accum_raw(int id, const double* g, int n);

    std::vector<Node> nodes_;
    std::map<const Param*, int> param_nodes_;
    std::vector<std::pair<Param*, int>> bound_params_;
};

/// Adam with bias correction; state keyed by parameter name.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& params);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    struct Slot {
        Tensor m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    long long t_ = 0;
    std::map<std::string, Slot> state_;
};

} // namespace mvhuman
