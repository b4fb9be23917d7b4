// Reverse-mode autodiff over an eagerly evaluated tape of tensor operations.
// Creation order is a topological order, so backward() is a single reverse
// sweep that visits every node once.
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "simt/attention.hpp"
#include "simt/tensor.hpp"

namespace simt {

// Trainable tensor with an accumulating gradient buffer. Gradient storage is
// mutable scratch: forward passes over a const model still accumulate into it.
struct Parameter {
    std::string name;
    Tensor value;
    mutable Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape(), value.precision());
    }

    void zero_grad() const { grad.fill(0.0); }
};

class Graph;

struct Var {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Tensor& value() const;
};

class Graph {
public:
    explicit Graph(bool recording = true, Precision prec = Precision::f64)
        : recording_(recording), prec_(prec) {
        nodes_.reserve(256);
    }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }
    Precision precision() const { return prec_; }
    size_t node_count() const { return nodes_.size(); }

    // --- node creation -----------------------------------------------------
    Var leaf(const Parameter& p);
    Var constant(Tensor t);

    // --- elementwise -------------------------------------------------------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var abs(Var a);

    // --- linear algebra ----------------------------------------------------
    Var matmul(Var a, Var b);     // [m,k]x[k,n] -> [m,n]
    Var matmul_nt(Var a, Var b);  // [m,k]x[n,k]^T -> [m,n]
    Var add_rowvec(Var x, Var b); // broadcast [n] over rows of [m,n]

    // --- reductions --------------------------------------------------------
    Var sum(Var a);      // -> [1]
    Var row_sum(Var a);  // [r,c] -> [r]

    // --- shape -------------------------------------------------------------
    Var row_slice(Var x, int from, int count);
    Var col_slice(Var x, int from, int count);
    Var concat_rows(Var a, Var b);
    Var concat_cols(const std::vector<Var>& parts);

    // --- neural net --------------------------------------------------------
    Var gather_rows(Var table, std::vector<int> ids);
    Var layer_norm(Var x, Var gain, Var bias); // per row, eps 1e-5
    // Row r is softmaxed over its first lengths[r] columns, rest zero.
    Var prefix_softmax(Var scores, std::vector<int> lengths);
    // out[r] = mean of rows 0..r of x.
    Var prefix_row_mean(Var x);
    // Sum over rows of -log p(target), optionally label smoothed.
    Var cross_entropy(Var logits, std::vector<int> targets, double label_smoothing = 0.0);
    // Inverted dropout with the given keep mask drawn from rng.
    Var dropout(Var x, double rate, class Pcg32& rng);

    // Streaming self-attention row weights. p:[I,J] allocation, e_src:[I,J]
    // and e_tgt:[I,I] scaled dot-products; bounds[i] in [1,J] is the number of
    // visible source prefixes for target row i. Output [I, J+I]: source weights
    // first, target weights after (zero outside bounds / above the diagonal).
    Var ssa_weights(Var p, Var e_src, Var e_tgt, std::vector<int> bounds, Allocation mode);

    // --- backward ----------------------------------------------------------
    // Seeds d(loss)/d(loss) = seed and accumulates into every reachable
    // Parameter's grad. loss must be a scalar.
    void backward(Var loss, double seed = 1.0);

    const Tensor& value(Var v) const { return nodes_[v.id]->value; }
    Tensor& grad(Var v); // test hook; allocates on demand

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        bool grad_alloc = false;
        const Parameter* param = nullptr;
        std::function<void(Graph&)> back;
    };

    int push(Tensor value, bool needs_grad, std::function<void(Graph&)> back);
    Tensor& grad_buf(int id);
    void add_into_grad(int id, const Tensor& g);
    void check_same_graph(Var a) const;

    std::vector<std::unique_ptr<Node>> nodes_;
    bool recording_ = true;
    Precision prec_ = Precision::f64;

    friend struct Var;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

} // namespace simt
