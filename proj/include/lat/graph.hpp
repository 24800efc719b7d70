#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "lat/tensor.hpp"

namespace lat {

enum class Op {
    Input,
    InputIds,
    Constant,
    Add,
    Mul,
    MatMul,
    Transpose,
    Reshape,
    GatherRows,
    TakePerRow,
    Softmax,
    LogSoftmax,
    Log,
    Sigmoid,
    ClampMax,
    LayerNorm,
    Sum,
    Mean,
    CrossEntropy,
};

const char* op_name(Op op);

// Values bound to named graph inputs at evaluation time. Tensors are borrowed,
// not copied; the caller keeps them alive for the duration of the call.
struct Bindings {
    std::unordered_map<std::string, const Tensor*> named;
    bool allow_nonfinite = false;

    void set(const std::string& name, const Tensor& t) { named[name] = &t; }
    const Tensor* find(const std::string& name) const {
        auto it = named.find(name);
        return it == named.end() ? nullptr : it->second;
    }
};

// Reverse-mode differentiation over a static node list. Build once, then
// evaluate / differentiate repeatedly under different bindings. Node output
// buffers are cached between evaluations, so a Graph instance is not safe for
// concurrent use; clone per thread instead.
class Graph {
   public:
    using Id = int32_t;

    // --- construction ---------------------------------------------------
    Id input(const std::string& name);
    Id input_ids(const std::string& name);
    Id constant(Tensor value);
    Id constant_scalar(float v) { return constant(Tensor::scalar(v)); }

    Id add(Id a, Id b);
    Id mul(Id a, Id b);
    Id matmul(Id a, Id b);
    Id transpose(Id a, std::vector<int> perm);
    Id reshape(Id a, std::vector<int64_t> shape);
    Id gather_rows(Id table, Id ids);
    Id take_per_row(Id mat, Id ids);
    Id softmax(Id a);
    Id log_softmax(Id a);
    Id log(Id a);
    Id sigmoid(Id a);
    Id clamp_max(Id a, float hi);
    Id layer_norm(Id a, float eps = 1e-5f);
    Id sum(Id a);
    Id mean(Id a);
    // sum_i weights[i] * (logsumexp(logits[i,:]) - logits[i, targets[i]])
    Id cross_entropy(Id logits, Id targets, Id weights);

    // composites of the primitives above
    Id neg(Id a) { return mul(a, constant_scalar(-1.0f)); }
    Id sub(Id a, Id b) { return add(a, neg(b)); }
    Id scale(Id a, float s) { return mul(a, constant_scalar(s)); }
    Id add_scalar(Id a, float c) { return add(a, constant_scalar(c)); }

    void set_output(Id node);
    Id output() const { return output_; }

    // --- execution -------------------------------------------------------
    // Runs the forward pass and returns the designated output tensor.
    const Tensor& evaluate(const Bindings& b);

    // Gradient of the scalar output with respect to each requested input.
    std::map<std::string, Tensor> gradients(const Bindings& b, const std::set<std::string>& wrt);

    // Cached value of any node after the most recent evaluate/gradients call.
    const Tensor& node_value(Id id) const;

    // Forward pass of the same node list in double precision. Used by the
    // finite-difference oracle so the reference has more precision than the
    // fp32 gradients it checks. No caching; safe on a const graph.
    double evaluate_scalar_f64(const Bindings& b) const;

    // Analytic gradients with both forward and backward evaluated in double
    // (results rounded to fp32). Verification mode: certifies the
    // differentiation itself, independent of fp32 rounding noise.
    std::map<std::string, Tensor> gradients_f64(const Bindings& b, const std::set<std::string>& wrt) const;

    size_t node_count() const { return nodes_.size(); }

    // internal node record, exposed for the in-file backward implementation
    struct Node {
        Op op;
        std::vector<Id> in;
        std::string name;             // Input / InputIds
        Tensor value;                 // Constant payload, then cached output
        std::vector<int> perm;        // Transpose
        std::vector<int64_t> target;  // Reshape
        float attr = 0.0f;            // ClampMax hi / LayerNorm eps
    };

   private:
    struct F64State {
        std::vector<std::vector<double>> vals;
        std::vector<std::vector<int64_t>> shapes;
        std::vector<const std::vector<int32_t>*> ids;
    };

    Id push(Node n);
    void forward(const Bindings& b);
    void forward_f64(const Bindings& b, F64State& st) const;
    void check(bool cond, Id id, const std::string& msg) const;

    std::vector<Node> nodes_;
    std::unordered_map<std::string, Id> inputs_;
    Id output_ = -1;
};

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)
// for a scalar function of one tensor. Non-finite differences count as infinite.
float finite_difference_error(const std::function<double(const Tensor&)>& fn, const Tensor& point,
                              const Tensor& analytic, float h);

// Convenience wrapper: analytic gradient taken from the graph itself.
float finite_difference_check(Graph& g, const Bindings& b, const std::string& wrt, float h);

}  // namespace lat
