#include "lat/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace lat {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::InputIds: return "input_ids";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::GatherRows: return "gather_rows";
        case Op::TakePerRow: return "take_per_row";
        case Op::Softmax: return "softmax";
        case Op::LogSoftmax: return "log_softmax";
        case Op::Log: return "log";
        case Op::Sigmoid: return "sigmoid";
        case Op::ClampMax: return "clamp_max";
        case Op::LayerNorm: return "layer_norm";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

namespace {

std::string node_tag(Graph::Id id, Op op) {
    return "node " + std::to_string(id) + " (" + op_name(op) + ")";
}

// numpy-style trailing-dim broadcast
bool broadcast_shape(const std::vector<int64_t>& a, const std::vector<int64_t>& b,
                     std::vector<int64_t>& out) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    out.assign(r, 1);
    for (size_t k = 0; k < r; ++k) {
        int64_t da = k < ra ? a[ra - 1 - k] : 1;
        int64_t db = k < rb ? b[rb - 1 - k] : 1;
        if (da != db && da != 1 && db != 1) return false;
        out[r - 1 - k] = std::max(da, db);
    }
    return true;
}

std::vector<int64_t> padded_strides(const std::vector<int64_t>& shape, size_t rank) {
    // strides into `shape`, padded on the left to `rank`; 0 on broadcast dims
    std::vector<int64_t> full(rank, 1), strides(rank, 0);
    size_t off = rank - shape.size();
    for (size_t i = 0; i < shape.size(); ++i) full[off + i] = shape[i];
    int64_t s = 1;
    for (size_t i = rank; i-- > 0;) {
        if (i >= off && shape[i - off] != 1) strides[i] = s;
        if (i >= off) s *= shape[i - off];
    }
    return strides;
}

template <typename F>
void binary_apply(const Tensor& a, const Tensor& b, Tensor& out, F fn) {
    if (a.shape == b.shape) {
        const size_t n = a.f.size();
        for (size_t i = 0; i < n; ++i) out.f[i] = fn(a.f[i], b.f[i]);
        return;
    }
    size_t rank = out.shape.size();
    std::vector<int64_t> astr = padded_strides(a.shape, rank);
    std::vector<int64_t> bstr = padded_strides(b.shape, rank);
    std::vector<int64_t> idx(rank, 0);
    const size_t n = out.f.size();
    for (size_t e = 0; e < n; ++e) {
        int64_t ao = 0, bo = 0;
        for (size_t i = 0; i < rank; ++i) {
            ao += idx[i] * astr[i];
            bo += idx[i] * bstr[i];
        }
        out.f[e] = fn(a.f[static_cast<size_t>(ao)], b.f[static_cast<size_t>(bo)]);
        for (size_t i = rank; i-- > 0;) {
            if (++idx[i] < out.shape[i]) break;
            idx[i] = 0;
        }
    }
}

// rows/cols view of the last dimension
void row_view(const Tensor& t, int64_t& rows, int64_t& cols) {
    cols = t.shape.empty() ? 1 : t.shape.back();
    rows = cols == 0 ? 0 : t.numel() / cols;
}

// (Re)allocate a node's output buffer for `shape`, reusing storage when possible.
void ensure(Tensor& t, const std::vector<int64_t>& shape) {
    size_t n = static_cast<size_t>(Tensor::count(shape));
    if (t.shape != shape || t.f.size() != n || t.dtype != Dtype::F32) {
        t = Tensor{};
        t.shape = shape;
        t.f.assign(n, 0.0f);
    }
}

}  // namespace

Graph::Id Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

void Graph::check(bool cond, Id id, const std::string& msg) const {
    if (!cond) throw std::runtime_error(node_tag(id, nodes_[static_cast<size_t>(id)].op) + ": " + msg);
}

Graph::Id Graph::input(const std::string& name) {
    auto it = inputs_.find(name);
    if (it != inputs_.end()) {
        if (nodes_[static_cast<size_t>(it->second)].op != Op::Input)
            throw std::invalid_argument("graph: input '" + name + "' already declared with another dtype");
        return it->second;
    }
    Node n;
    n.op = Op::Input;
    n.name = name;
    Id id = push(std::move(n));
    inputs_[name] = id;
    return id;
}

Graph::Id Graph::input_ids(const std::string& name) {
    auto it = inputs_.find(name);
    if (it != inputs_.end()) {
        if (nodes_[static_cast<size_t>(it->second)].op != Op::InputIds)
            throw std::invalid_argument("graph: input '" + name + "' already declared with another dtype");
        return it->second;
    }
    Node n;
    n.op = Op::InputIds;
    n.name = name;
    Id id = push(std::move(n));
    inputs_[name] = id;
    return id;
}

Graph::Id Graph::constant(Tensor value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
}

Graph::Id Graph::add(Id a, Id b) { return push({Op::Add, {a, b}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::mul(Id a, Id b) { return push({Op::Mul, {a, b}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::matmul(Id a, Id b) { return push({Op::MatMul, {a, b}, {}, {}, {}, {}, 0.0f}); }

Graph::Id Graph::transpose(Id a, std::vector<int> perm) {
    Node n;
    n.op = Op::Transpose;
    n.in = {a};
    n.perm = std::move(perm);
    return push(std::move(n));
}

Graph::Id Graph::reshape(Id a, std::vector<int64_t> shape) {
    Node n;
    n.op = Op::Reshape;
    n.in = {a};
    n.target = std::move(shape);
    return push(std::move(n));
}

Graph::Id Graph::gather_rows(Id table, Id ids) { return push({Op::GatherRows, {table, ids}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::take_per_row(Id mat, Id ids) { return push({Op::TakePerRow, {mat, ids}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::softmax(Id a) { return push({Op::Softmax, {a}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::log_softmax(Id a) { return push({Op::LogSoftmax, {a}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::log(Id a) { return push({Op::Log, {a}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::sigmoid(Id a) { return push({Op::Sigmoid, {a}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::clamp_max(Id a, float hi) { return push({Op::ClampMax, {a}, {}, {}, {}, {}, hi}); }
Graph::Id Graph::layer_norm(Id a, float eps) { return push({Op::LayerNorm, {a}, {}, {}, {}, {}, eps}); }
Graph::Id Graph::sum(Id a) { return push({Op::Sum, {a}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::mean(Id a) { return push({Op::Mean, {a}, {}, {}, {}, {}, 0.0f}); }
Graph::Id Graph::cross_entropy(Id logits, Id targets, Id weights) {
    return push({Op::CrossEntropy, {logits, targets, weights}, {}, {}, {}, {}, 0.0f});
}

void Graph::set_output(Id node) {
    if (node < 0 || node >= static_cast<Id>(nodes_.size()))
        throw std::invalid_argument("graph: output node out of range");
    output_ = node;
}

const Tensor& Graph::node_value(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size()))
        throw std::invalid_argument("graph: node id out of range");
    return nodes_[static_cast<size_t>(id)].value;
}

void Graph::forward(const Bindings& b) {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        const Id id = static_cast<Id>(i);
        switch (n.op) {
            case Op::Input:
            case Op::InputIds: {
                const Tensor* t = b.find(n.name);
                check(t != nullptr, id, "input '" + n.name + "' unbound");
                check((n.op == Op::Input) == (t->dtype == Dtype::F32), id,
                      "input '" + n.name + "' has wrong dtype");
                if (!b.allow_nonfinite && t->dtype == Dtype::F32) {
                    int64_t bad = t->nan_scan();
                    check(bad < 0, id, "input '" + n.name + "' non-finite at index " + std::to_string(bad));
                }
                n.value = *t;
                break;
            }
            case Op::Constant:
                break;
            case Op::Add:
            case Op::Mul: {
                const Tensor& x = nodes_[n.in[0]].value;
                const Tensor& y = nodes_[n.in[1]].value;
                check(x.dtype == Dtype::F32 && y.dtype == Dtype::F32, id, "needs f32 operands");
                std::vector<int64_t> os;
                check(broadcast_shape(x.shape, y.shape, os), id,
                      "shapes " + x.shape_str() + " and " + y.shape_str() + " do not broadcast");
                ensure(n.value, os);
                if (n.op == Op::Add)
                    binary_apply(x, y, n.value, [](float p, float q) { return p + q; });
                else
                    binary_apply(x, y, n.value, [](float p, float q) { return p * q; });
                break;
            }
            case Op::MatMul: {
                const Tensor& x = nodes_[n.in[0]].value;
                const Tensor& y = nodes_[n.in[1]].value;
                check(x.shape.size() == y.shape.size() && (x.shape.size() == 2 || x.shape.size() == 3), id,
                      "expects two rank-2 or two rank-3 tensors, got " + x.shape_str() + " x " + y.shape_str());
                int64_t batch = x.shape.size() == 3 ? x.shape[0] : 1;
                int64_t m = x.shape[x.shape.size() - 2], k = x.shape.back();
                int64_t k2 = y.shape[y.shape.size() - 2], p = y.shape.back();
                check(k == k2, id, "inner extents differ: " + x.shape_str() + " x " + y.shape_str());
                if (x.shape.size() == 3) check(y.shape[0] == batch, id, "batch extents differ");
                std::vector<int64_t> os = x.shape.size() == 3 ? std::vector<int64_t>{batch, m, p}
                                                              : std::vector<int64_t>{m, p};
                ensure(n.value, os);
                std::fill(n.value.f.begin(), n.value.f.end(), 0.0f);
                for (int64_t bb = 0; bb < batch; ++bb) {
                    const float* A = x.f.data() + bb * m * k;
                    const float* B = y.f.data() + bb * k * p;
                    float* C = n.value.f.data() + bb * m * p;
                    for (int64_t r = 0; r < m; ++r)
                        for (int64_t t = 0; t < k; ++t) {
                            float av = A[r * k + t];
                            const float* Br = B + t * p;
                            float* Cr = C + r * p;
                            for (int64_t c = 0; c < p; ++c) Cr[c] += av * Br[c];
                        }
                }
                break;
            }
            case Op::Transpose: {
                const Tensor& x = nodes_[n.in[0]].value;
                size_t r = x.shape.size();
                check(n.perm.size() == r, id, "perm rank mismatch");
                std::vector<int64_t> os(r);
                for (size_t d = 0; d < r; ++d) os[d] = x.shape[static_cast<size_t>(n.perm[d])];
                ensure(n.value, os);
                std::vector<int64_t> xstr(r, 1);
                for (size_t d = r - 1; d-- > 0;) xstr[d] = xstr[d + 1] * x.shape[d + 1];
                std::vector<int64_t> idx(r, 0);
                const size_t total = x.f.size();
                for (size_t e = 0; e < total; ++e) {
                    int64_t xo = 0;
                    for (size_t d = 0; d < r; ++d) xo += idx[d] * xstr[static_cast<size_t>(n.perm[d])];
                    n.value.f[e] = x.f[static_cast<size_t>(xo)];
                    for (size_t d = r; d-- > 0;) {
                        if (++idx[d] < os[d]) break;
                        idx[d] = 0;
                    }
                }
                break;
            }
            case Op::Reshape: {
                const Tensor& x = nodes_[n.in[0]].value;
                check(Tensor::count(n.target) == x.numel(), id,
                      "cannot reshape " + x.shape_str() + " to requested extents");
                n.value.f = x.f;
                n.value.shape = n.target;
                n.value.dtype = Dtype::F32;
                break;
            }
            case Op::GatherRows: {
                const Tensor& tab = nodes_[n.in[0]].value;
                const Tensor& ids = nodes_[n.in[1]].value;
                check(tab.shape.size() == 2, id, "table must be rank 2");
                check(ids.dtype == Dtype::I32 && ids.shape.size() == 1, id, "ids must be rank-1 i32");
                int64_t d = tab.shape[1], s = ids.shape[0];
                std::vector<int64_t> os{s, d};
                ensure(n.value, os);
                for (int64_t r = 0; r < s; ++r) {
                    int32_t j = ids.ix[static_cast<size_t>(r)];
                    check(j >= 0 && j < tab.shape[0], id, "row id " + std::to_string(j) + " out of range");
                    std::memcpy(n.value.f.data() + r * d, tab.f.data() + j * d, sizeof(float) * static_cast<size_t>(d));
                }
                break;
            }
            case Op::TakePerRow: {
                const Tensor& x = nodes_[n.in[0]].value;
                const Tensor& ids = nodes_[n.in[1]].value;
                check(x.shape.size() == 2, id, "matrix must be rank 2");
                check(ids.dtype == Dtype::I32 && ids.shape == std::vector<int64_t>{x.shape[0]}, id,
                      "ids must be i32 with one entry per row");
                int64_t rows = x.shape[0], cols = x.shape[1];
                std::vector<int64_t> os{rows};
                ensure(n.value, os);
                for (int64_t r = 0; r < rows; ++r) {
                    int32_t c = ids.ix[static_cast<size_t>(r)];
                    check(c >= 0 && c < cols, id, "column id " + std::to_string(c) + " out of range");
                    n.value.f[static_cast<size_t>(r)] = x.f[static_cast<size_t>(r * cols + c)];
                }
                break;
            }
            case Op::Softmax:
            case Op::LogSoftmax: {
                const Tensor& x = nodes_[n.in[0]].value;
                check(!x.shape.empty(), id, "needs at least rank 1");
                ensure(n.value, x.shape);
                int64_t rows, cols;
                row_view(x, rows, cols);
                for (int64_t r = 0; r < rows; ++r) {
                    const float* xi = x.f.data() + r * cols;
                    float* yi = n.value.f.data() + r * cols;
                    float mx = -std::numeric_limits<float>::infinity();
                    for (int64_t c = 0; c < cols; ++c) mx = std::max(mx, xi[c]);
                    float z = 0.0f;
                    for (int64_t c = 0; c < cols; ++c) z += std::exp(xi[c] - mx);
                    if (n.op == Op::Softmax) {
                        float inv = 1.0f / z;
                        for (int64_t c = 0; c < cols; ++c) yi[c] = std::exp(xi[c] - mx) * inv;
                    } else {
                        float lse = mx + std::log(z);
                        for (int64_t c = 0; c < cols; ++c) yi[c] = xi[c] - lse;
                    }
                }
                break;
            }
            case Op::Log: {
                const Tensor& x = nodes_[n.in[0]].value;
                ensure(n.value, x.shape);
                for (size_t e = 0; e < x.f.size(); ++e) n.value.f[e] = std::log(x.f[e]);
                break;
            }
            case Op::Sigmoid: {
                const Tensor& x = nodes_[n.in[0]].value;
                ensure(n.value, x.shape);
                for (size_t e = 0; e < x.f.size(); ++e) {
                    float v = x.f[e];
                    n.value.f[e] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                             : std::exp(v) / (1.0f + std::exp(v));
                }
                break;
            }
            case Op::ClampMax: {
                const Tensor& x = nodes_[n.in[0]].value;
                ensure(n.value, x.shape);
                for (size_t e = 0; e < x.f.size(); ++e) n.value.f[e] = std::min(x.f[e], n.attr);
                break;
            }
            case Op::LayerNorm: {
                const Tensor& x = nodes_[n.in[0]].value;
                check(!x.shape.empty() && x.shape.back() > 0, id, "needs a non-empty last dim");
                ensure(n.value, x.shape);
                int64_t rows, cols;
                row_view(x, rows, cols);
                for (int64_t r = 0; r < rows; ++r) {
                    const float* xi = x.f.data() + r * cols;
                    float* yi = n.value.f.data() + r * cols;
                    float mu = 0.0f;
                    for (int64_t c = 0; c < cols; ++c) mu += xi[c];
                    mu /= static_cast<float>(cols);
                    float var = 0.0f;
                    for (int64_t c = 0; c < cols; ++c) var += (xi[c] - mu) * (xi[c] - mu);
                    var /= static_cast<float>(cols);
                    float inv = 1.0f / std::sqrt(var + n.attr);
                    for (int64_t c = 0; c < cols; ++c) yi[c] = (xi[c] - mu) * inv;
                }
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                const Tensor& x = nodes_[n.in[0]].value;
                float acc = 0.0f;
                for (float v : x.f) acc += v;
                if (n.op == Op::Mean) acc /= static_cast<float>(x.f.size());
                n.value = Tensor::scalar(acc);
                break;
            }
            case Op::CrossEntropy: {
                const Tensor& x = nodes_[n.in[0]].value;
                const Tensor& t = nodes_[n.in[1]].value;
                const Tensor& w = nodes_[n.in[2]].value;
                check(x.shape.size() == 2, id, "logits must be rank 2");
                int64_t rows = x.shape[0], cols = x.shape[1];
                check(t.dtype == Dtype::I32 && t.shape == std::vector<int64_t>{rows}, id,
                      "targets must be i32 with one entry per row");
                check(w.dtype == Dtype::F32 && w.shape == std::vector<int64_t>{rows}, id,
                      "weights must be f32 with one entry per row");
                float loss = 0.0f;
                for (int64_t r = 0; r < rows; ++r) {
                    int32_t tc = t.ix[static_cast<size_t>(r)];
                    check(tc >= 0 && tc < cols, id, "target id " + std::to_string(tc) + " out of range");
                    const float* xi = x.f.data() + r * cols;
                    float mx = -std::numeric_limits<float>::infinity();
                    for (int64_t c = 0; c < cols; ++c) mx = std::max(mx, xi[c]);
                    float z = 0.0f;
                    for (int64_t c = 0; c < cols; ++c) z += std::exp(xi[c] - mx);
                    float lse = mx + std::log(z);
                    loss += w.f[static_cast<size_t>(r)] * (lse - xi[tc]);
                }
                n.value = Tensor::scalar(loss);
                break;
            }
        }
    }
}

const Tensor& Graph::evaluate(const Bindings& b) {
    if (output_ < 0) throw std::runtime_error("graph: no output node designated");
    forward(b);
    return nodes_[static_cast<size_t>(output_)].value;
}


namespace {

// value accessors letting one backward implementation run against either the
// fp32 forward cache or the double-precision verification forward
struct F32View {
    const std::vector<Graph::Node>& nodes;
    double val(Graph::Id id, size_t e) const { return nodes[static_cast<size_t>(id)].value.f[e]; }
    const std::vector<int64_t>& shape(Graph::Id id) const { return nodes[static_cast<size_t>(id)].value.shape; }
    const std::vector<int32_t>& ids(Graph::Id id) const { return nodes[static_cast<size_t>(id)].value.ix; }
    size_t count(Graph::Id id) const { return static_cast<size_t>(nodes[static_cast<size_t>(id)].value.numel()); }
};

struct F64View {
    const std::vector<Graph::Node>& nodes;
    const std::vector<std::vector<double>>& vals;
    const std::vector<std::vector<int64_t>>& shapes;
    const std::vector<const std::vector<int32_t>*>& idv;
    double val(Graph::Id id, size_t e) const { return vals[static_cast<size_t>(id)][e]; }
    const std::vector<int64_t>& shape(Graph::Id id) const { return shapes[static_cast<size_t>(id)]; }
    const std::vector<int32_t>& ids(Graph::Id id) const {
        const std::vector<int32_t>* p = idv[static_cast<size_t>(id)];
        return p ? *p : nodes[static_cast<size_t>(id)].value.ix;
    }
    size_t count(Graph::Id id) const {
        Graph::Id i = id;
        const std::vector<int32_t>* p = idv[static_cast<size_t>(i)];
        return p ? p->size() : vals[static_cast<size_t>(i)].size();
    }
};

template <typename View>
std::vector<std::vector<double>> backward_core(const std::vector<Graph::Node>& nodes, const View& v,
                                               Graph::Id output) {
    std::vector<std::vector<double>> grads(nodes.size());
    auto ensure_grad = [&](Graph::Id id) -> std::vector<double>& {
        std::vector<double>& g = grads[static_cast<size_t>(id)];
        if (g.empty()) g.assign(v.count(id), 0.0);
        return g;
    };
    grads[static_cast<size_t>(output)].assign(1, 1.0);

    for (size_t i = nodes.size(); i-- > 0;) {
        const Graph::Node& n = nodes[i];
        std::vector<double>& g = grads[i];
        if (g.empty()) continue;  // not on any path to the output
        const Graph::Id self = static_cast<Graph::Id>(i);
        switch (n.op) {
            case Op::Input:
            case Op::InputIds:
            case Op::Constant:
                break;
            case Op::Add:
            case Op::Mul: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                std::vector<double>& gy = ensure_grad(n.in[1]);
                const std::vector<int64_t>& os = v.shape(self);
                size_t rank = os.size();
                std::vector<int64_t> xstr = padded_strides(v.shape(n.in[0]), rank);
                std::vector<int64_t> ystr = padded_strides(v.shape(n.in[1]), rank);
                std::vector<int64_t> idx(rank, 0);
                for (size_t e = 0; e < g.size(); ++e) {
                    int64_t xo = 0, yo = 0;
                    for (size_t d = 0; d < rank; ++d) {
                        xo += idx[d] * xstr[d];
                        yo += idx[d] * ystr[d];
                    }
                    if (n.op == Op::Add) {
                        gx[static_cast<size_t>(xo)] += g[e];
                        gy[static_cast<size_t>(yo)] += g[e];
                    } else {
                        gx[static_cast<size_t>(xo)] += g[e] * v.val(n.in[1], static_cast<size_t>(yo));
                        gy[static_cast<size_t>(yo)] += g[e] * v.val(n.in[0], static_cast<size_t>(xo));
                    }
                    for (size_t d = rank; d-- > 0;) {
                        if (++idx[d] < os[d]) break;
                        idx[d] = 0;
                    }
                }
                break;
            }
            case Op::MatMul: {
                const std::vector<int64_t>& xs = v.shape(n.in[0]);
                const std::vector<int64_t>& ys = v.shape(n.in[1]);
                std::vector<double>& gx = ensure_grad(n.in[0]);
                std::vector<double>& gy = ensure_grad(n.in[1]);
                int64_t batch = xs.size() == 3 ? xs[0] : 1;
                int64_t m = xs[xs.size() - 2], k = xs.back(), p = ys.back();
                for (int64_t bb = 0; bb < batch; ++bb) {
                    const size_t xoff = static_cast<size_t>(bb * m * k);
                    const size_t yoff = static_cast<size_t>(bb * k * p);
                    const size_t goff = static_cast<size_t>(bb * m * p);
                    for (int64_t r = 0; r < m; ++r)
                        for (int64_t t = 0; t < k; ++t) {
                            double acc = 0.0;
                            for (int64_t c = 0; c < p; ++c)
                                acc += g[goff + static_cast<size_t>(r * p + c)] *
                                       v.val(n.in[1], yoff + static_cast<size_t>(t * p + c));
                            gx[xoff + static_cast<size_t>(r * k + t)] += acc;
                        }
                    for (int64_t r = 0; r < m; ++r)
                        for (int64_t t = 0; t < k; ++t) {
                            double av = v.val(n.in[0], xoff + static_cast<size_t>(r * k + t));
                            for (int64_t c = 0; c < p; ++c)
                                gy[yoff + static_cast<size_t>(t * p + c)] +=
                                    av * g[goff + static_cast<size_t>(r * p + c)];
                        }
                }
                break;
            }
            case Op::Transpose: {
                const std::vector<int64_t>& xs = v.shape(n.in[0]);
                std::vector<double>& gx = ensure_grad(n.in[0]);
                size_t r = xs.size();
                std::vector<int64_t> xstr(r, 1);
                for (size_t d = r - 1; d-- > 0;) xstr[d] = xstr[d + 1] * xs[d + 1];
                std::vector<int64_t> idx(r, 0);
                const std::vector<int64_t>& os = v.shape(self);
                for (size_t e = 0; e < g.size(); ++e) {
                    int64_t xo = 0;
                    for (size_t d = 0; d < r; ++d) xo += idx[d] * xstr[static_cast<size_t>(n.perm[d])];
                    gx[static_cast<size_t>(xo)] += g[e];
                    for (size_t d = r; d-- > 0;) {
                        if (++idx[d] < os[d]) break;
                        idx[d] = 0;
                    }
                }
                break;
            }
            case Op::Reshape: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                for (size_t e = 0; e < g.size(); ++e) gx[e] += g[e];
                break;
            }
            case Op::GatherRows: {
                const std::vector<int64_t>& xs = v.shape(n.in[0]);
                const std::vector<int32_t>& ids = v.ids(n.in[1]);
                std::vector<double>& gt = ensure_grad(n.in[0]);
                int64_t d = xs[1];
                for (size_t r = 0; r < ids.size(); ++r)
                    for (int64_t c = 0; c < d; ++c)
                        gt[static_cast<size_t>(ids[r] * d + c)] += g[r * static_cast<size_t>(d) + static_cast<size_t>(c)];
                break;
            }
            case Op::TakePerRow: {
                const std::vector<int64_t>& xs = v.shape(n.in[0]);
                const std::vector<int32_t>& ids = v.ids(n.in[1]);
                std::vector<double>& gm = ensure_grad(n.in[0]);
                int64_t cols = xs[1];
                for (size_t r = 0; r < ids.size(); ++r)
                    gm[r * static_cast<size_t>(cols) + static_cast<size_t>(ids[r])] += g[r];
                break;
            }
            case Op::Softmax: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                const std::vector<int64_t>& os = v.shape(self);
                int64_t cols = os.empty() ? 1 : os.back();
                int64_t rows = static_cast<int64_t>(g.size()) / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < cols; ++c)
                        dot += g[static_cast<size_t>(r * cols + c)] * v.val(self, static_cast<size_t>(r * cols + c));
                    for (int64_t c = 0; c < cols; ++c) {
                        size_t e = static_cast<size_t>(r * cols + c);
                        gx[e] += v.val(self, e) * (g[e] - dot);
                    }
                }
                break;
            }
            case Op::LogSoftmax: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                const std::vector<int64_t>& os = v.shape(self);
                int64_t cols = os.empty() ? 1 : os.back();
                int64_t rows = static_cast<int64_t>(g.size()) / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    double gs = 0.0;
                    for (int64_t c = 0; c < cols; ++c) gs += g[static_cast<size_t>(r * cols + c)];
                    for (int64_t c = 0; c < cols; ++c) {
                        size_t e = static_cast<size_t>(r * cols + c);
                        gx[e] += g[e] - std::exp(v.val(self, e)) * gs;
                    }
                }
                break;
            }
            case Op::Log: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                for (size_t e = 0; e < g.size(); ++e) gx[e] += g[e] / v.val(n.in[0], e);
                break;
            }
            case Op::Sigmoid: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                for (size_t e = 0; e < g.size(); ++e) {
                    double yv = v.val(self, e);
                    gx[e] += g[e] * yv * (1.0 - yv);
                }
                break;
            }
            case Op::ClampMax: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                for (size_t e = 0; e < g.size(); ++e)
                    if (v.val(n.in[0], e) < static_cast<double>(n.attr)) gx[e] += g[e];
                break;
            }
            case Op::LayerNorm: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                const std::vector<int64_t>& os = v.shape(self);
                int64_t cols = os.empty() ? 1 : os.back();
                int64_t rows = static_cast<int64_t>(g.size()) / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    double mu = 0.0;
                    for (int64_t c = 0; c < cols; ++c) mu += v.val(n.in[0], static_cast<size_t>(r * cols + c));
                    mu /= static_cast<double>(cols);
                    double var = 0.0;
                    for (int64_t c = 0; c < cols; ++c) {
                        double d = v.val(n.in[0], static_cast<size_t>(r * cols + c)) - mu;
                        var += d * d;
                    }
                    var /= static_cast<double>(cols);
                    double inv = 1.0 / std::sqrt(var + static_cast<double>(n.attr));
                    double gmean = 0.0, gymean = 0.0;
                    for (int64_t c = 0; c < cols; ++c) {
                        size_t e = static_cast<size_t>(r * cols + c);
                        gmean += g[e];
                        gymean += g[e] * v.val(self, e);
                    }
                    gmean /= static_cast<double>(cols);
                    gymean /= static_cast<double>(cols);
                    for (int64_t c = 0; c < cols; ++c) {
                        size_t e = static_cast<size_t>(r * cols + c);
                        gx[e] += inv * (g[e] - gmean - v.val(self, e) * gymean);
                    }
                }
                break;
            }
            case Op::Sum: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                for (size_t e = 0; e < gx.size(); ++e) gx[e] += g[0];
                break;
            }
            case Op::Mean: {
                std::vector<double>& gx = ensure_grad(n.in[0]);
                double share = g[0] / static_cast<double>(gx.size());
                for (size_t e = 0; e < gx.size(); ++e) gx[e] += share;
                break;
            }
            case Op::CrossEntropy: {
                const std::vector<int64_t>& xs = v.shape(n.in[0]);
                const std::vector<int32_t>& t = v.ids(n.in[1]);
                std::vector<double>& gx = ensure_grad(n.in[0]);
                int64_t rows = xs[0], cols = xs[1];
                double go = g[0];
                for (int64_t r = 0; r < rows; ++r) {
                    double mx = v.val(n.in[0], static_cast<size_t>(r * cols));
                    for (int64_t c = 1; c < cols; ++c)
                        mx = std::max(mx, v.val(n.in[0], static_cast<size_t>(r * cols + c)));
                    double z = 0.0;
                    for (int64_t c = 0; c < cols; ++c)
                        z += std::exp(v.val(n.in[0], static_cast<size_t>(r * cols + c)) - mx);
                    double wr = v.val(n.in[2], static_cast<size_t>(r)) * go;
                    for (int64_t c = 0; c < cols; ++c) {
                        size_t e = static_cast<size_t>(r * cols + c);
                        gx[e] += wr * (std::exp(v.val(n.in[0], e) - mx) / z);
                    }
                    gx[static_cast<size_t>(r * cols + t[static_cast<size_t>(r)])] -= wr;
                }
                break;
            }
        }
    }
    return grads;
}

}  // namespace

std::map<std::string, Tensor> Graph::gradients(const Bindings& b, const std::set<std::string>& wrt) {
    if (output_ < 0) throw std::runtime_error("graph: no output node designated");
    for (const std::string& name : wrt) {
        auto it = inputs_.find(name);
        if (it == inputs_.end()) throw std::invalid_argument("gradients: unknown input '" + name + "'");
        if (nodes_[static_cast<size_t>(it->second)].op == Op::InputIds)
            throw std::invalid_argument("gradients: input '" + name + "' is integer-valued, not differentiable");
    }
    forward(b);
    const Node& out = nodes_[static_cast<size_t>(output_)];
    if (out.value.numel() != 1 || out.value.dtype != Dtype::F32)
        throw std::runtime_error("gradients: output node is not a f32 scalar");

    F32View view{nodes_};
    std::vector<std::vector<double>> grads = backward_core(nodes_, view, output_);

    std::map<std::string, Tensor> result;
    for (const std::string& name : wrt) {
        Id id = inputs_.at(name);
        const std::vector<double>& g = grads[static_cast<size_t>(id)];
        Tensor out_t = Tensor::zeros(nodes_[static_cast<size_t>(id)].value.shape);
        for (size_t e = 0; e < g.size(); ++e) out_t.f[e] = static_cast<float>(g[e]);
        result[name] = std::move(out_t);
    }
    return result;
}

std::map<std::string, Tensor> Graph::gradients_f64(const Bindings& b,
                                                   const std::set<std::string>& wrt) const {
    if (output_ < 0) throw std::runtime_error("graph: no output node designated");
    for (const std::string& name : wrt) {
        auto it = inputs_.find(name);
        if (it == inputs_.end()) throw std::invalid_argument("gradients: unknown input '" + name + "'");
        if (nodes_[static_cast<size_t>(it->second)].op == Op::InputIds)
            throw std::invalid_argument("gradients: input '" + name + "' is integer-valued, not differentiable");
    }
    F64State st;
    forward_f64(b, st);
    F64View view{nodes_, st.vals, st.shapes, st.ids};
    std::vector<std::vector<double>> grads = backward_core(nodes_, view, output_);

    std::map<std::string, Tensor> result;
    for (const std::string& name : wrt) {
        Id id = inputs_.at(name);
        const std::vector<double>& g = grads[static_cast<size_t>(id)];
        Tensor out_t = Tensor::zeros(st.shapes[static_cast<size_t>(id)]);
        for (size_t e = 0; e < g.size(); ++e) out_t.f[e] = static_cast<float>(g[e]);
        result[name] = std::move(out_t);
    }
    return result;
}

double Graph::evaluate_scalar_f64(const Bindings& b) const {
    if (output_ < 0) throw std::runtime_error("graph: no output node designated");
    F64State st;
    forward_f64(b, st);
    return st.vals[static_cast<size_t>(output_)][0];
}

void Graph::forward_f64(const Bindings& b, F64State& st) const {
    st.vals.assign(nodes_.size(), {});
    st.shapes.assign(nodes_.size(), {});
    st.ids.assign(nodes_.size(), nullptr);
    std::vector<std::vector<double>>& vals = st.vals;
    std::vector<std::vector<int64_t>>& shapes = st.shapes;
    std::vector<const std::vector<int32_t>*>& idvals = st.ids;

    auto shaped = [&](size_t i, std::vector<int64_t> s) {
        shapes[i] = std::move(s);
        vals[i].assign(static_cast<size_t>(Tensor::count(shapes[i])), 0.0);
    };

    for (size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        const Id id = static_cast<Id>(i);
        switch (n.op) {
            case Op::Input: {
                const Tensor* t = b.find(n.name);
                check(t != nullptr && t->dtype == Dtype::F32, id, "input '" + n.name + "' unbound");
                shapes[i] = t->shape;
                vals[i].assign(t->f.begin(), t->f.end());
                break;
            }
            case Op::InputIds: {
                const Tensor* t = b.find(n.name);
                check(t != nullptr && t->dtype == Dtype::I32, id, "input '" + n.name + "' unbound");
                shapes[i] = t->shape;
                idvals[i] = &t->ix;
                break;
            }
            case Op::Constant:
                shapes[i] = n.value.shape;
                if (n.value.dtype == Dtype::I32)
                    idvals[i] = &n.value.ix;
                else
                    vals[i].assign(n.value.f.begin(), n.value.f.end());
                break;
            case Op::Add:
            case Op::Mul: {
                const auto& xs = shapes[n.in[0]];
                const auto& ys = shapes[n.in[1]];
                std::vector<int64_t> os;
                check(broadcast_shape(xs, ys, os), id, "shapes do not broadcast");
                shaped(i, os);
                size_t rank = os.size();
                std::vector<int64_t> astr = padded_strides(xs, rank), bstr = padded_strides(ys, rank);
                std::vector<int64_t> idx(rank, 0);
                const auto& xv = vals[n.in[0]];
                const auto& yv = vals[n.in[1]];
                for (size_t e = 0; e < vals[i].size(); ++e) {
                    int64_t ao = 0, bo = 0;
                    for (size_t d = 0; d < rank; ++d) {
                        ao += idx[d] * astr[d];
                        bo += idx[d] * bstr[d];
                    }
                    vals[i][e] = n.op == Op::Add ? xv[static_cast<size_t>(ao)] + yv[static_cast<size_t>(bo)]
                                                 : xv[static_cast<size_t>(ao)] * yv[static_cast<size_t>(bo)];
                    for (size_t d = rank; d-- > 0;) {
                        if (++idx[d] < os[d]) break;
                        idx[d] = 0;
                    }
                }
                break;
            }
            case Op::MatMul: {
                const auto& xs = shapes[n.in[0]];
                const auto& ys = shapes[n.in[1]];
                int64_t batch = xs.size() == 3 ? xs[0] : 1;
                int64_t m = xs[xs.size() - 2], k = xs.back(), p = ys.back();
                check(k == ys[ys.size() - 2], id, "inner extents differ");
                shaped(i, xs.size() == 3 ? std::vector<int64_t>{batch, m, p} : std::vector<int64_t>{m, p});
                const auto& A = vals[n.in[0]];
                const auto& B = vals[n.in[1]];
                for (int64_t bb = 0; bb < batch; ++bb)
                    for (int64_t r = 0; r < m; ++r)
                        for (int64_t t = 0; t < k; ++t) {
                            double av = A[static_cast<size_t>(bb * m * k + r * k + t)];
                            for (int64_t c = 0; c < p; ++c)
                                vals[i][static_cast<size_t>(bb * m * p + r * p + c)] +=
                                    av * B[static_cast<size_t>(bb * k * p + t * p + c)];
                        }
                break;
            }
            case Op::Transpose: {
                const auto& xs = shapes[n.in[0]];
                size_t r = xs.size();
                std::vector<int64_t> os(r);
                for (size_t d = 0; d < r; ++d) os[d] = xs[static_cast<size_t>(n.perm[d])];
                shaped(i, os);
                std::vector<int64_t> xstr(r, 1);
                for (size_t d = r - 1; d-- > 0;) xstr[d] = xstr[d + 1] * xs[d + 1];
                std::vector<int64_t> idx(r, 0);
                for (size_t e = 0; e < vals[i].size(); ++e) {
                    int64_t xo = 0;
                    for (size_t d = 0; d < r; ++d) xo += idx[d] * xstr[static_cast<size_t>(n.perm[d])];
                    vals[i][e] = vals[n.in[0]][static_cast<size_t>(xo)];
                    for (size_t d = r; d-- > 0;) {
                        if (++idx[d] < os[d]) break;
                        idx[d] = 0;
                    }
                }
                break;
            }
            case Op::Reshape:
                shapes[i] = n.target;
                vals[i] = vals[n.in[0]];
                break;
            case Op::GatherRows: {
                const auto& xs = shapes[n.in[0]];
                const std::vector<int32_t>& ids = *idvals[n.in[1]];
                int64_t d = xs[1];
                shaped(i, {static_cast<int64_t>(ids.size()), d});
                for (size_t r = 0; r < ids.size(); ++r)
                    for (int64_t c = 0; c < d; ++c)
                        vals[i][r * static_cast<size_t>(d) + static_cast<size_t>(c)] =
                            vals[n.in[0]][static_cast<size_t>(ids[r] * d + c)];
                break;
            }
            case Op::TakePerRow: {
                const auto& xs = shapes[n.in[0]];
                const std::vector<int32_t>& ids = *idvals[n.in[1]];
                shaped(i, {xs[0]});
                for (size_t r = 0; r < ids.size(); ++r)
                    vals[i][r] = vals[n.in[0]][r * static_cast<size_t>(xs[1]) + static_cast<size_t>(ids[r])];
                break;
            }
            case Op::Softmax:
            case Op::LogSoftmax: {
                const auto& xs = shapes[n.in[0]];
                shaped(i, xs);
                int64_t cols = xs.back(), rows = static_cast<int64_t>(vals[i].size()) / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xi = vals[n.in[0]].data() + r * cols;
                    double* yi = vals[i].data() + r * cols;
                    double mx = xi[0];
                    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xi[c]);
                    double z = 0.0;
                    for (int64_t c = 0; c < cols; ++c) z += std::exp(xi[c] - mx);
                    if (n.op == Op::Softmax)
                        for (int64_t c = 0; c < cols; ++c) yi[c] = std::exp(xi[c] - mx) / z;
                    else
                        for (int64_t c = 0; c < cols; ++c) yi[c] = xi[c] - (mx + std::log(z));
                }
                break;
            }
            case Op::Log: {
                shaped(i, shapes[n.in[0]]);
                for (size_t e = 0; e < vals[i].size(); ++e) vals[i][e] = std::log(vals[n.in[0]][e]);
                break;
            }
            case Op::Sigmoid: {
                shaped(i, shapes[n.in[0]]);
                for (size_t e = 0; e < vals[i].size(); ++e) {
                    double v = vals[n.in[0]][e];
                    vals[i][e] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                }
                break;
            }
            case Op::ClampMax: {
                shaped(i, shapes[n.in[0]]);
                for (size_t e = 0; e < vals[i].size(); ++e)
                    vals[i][e] = std::min(vals[n.in[0]][e], static_cast<double>(n.attr));
                break;
            }
            case Op::LayerNorm: {
                const auto& xs = shapes[n.in[0]];
                shaped(i, xs);
                int64_t cols = xs.back(), rows = static_cast<int64_t>(vals[i].size()) / cols;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xi = vals[n.in[0]].data() + r * cols;
                    double* yi = vals[i].data() + r * cols;
                    double mu = 0.0;
                    for (int64_t c = 0; c < cols; ++c) mu += xi[c];
                    mu /= static_cast<double>(cols);
                    double var = 0.0;
                    for (int64_t c = 0; c < cols; ++c) var += (xi[c] - mu) * (xi[c] - mu);
                    var /= static_cast<double>(cols);
                    double inv = 1.0 / std::sqrt(var + static_cast<double>(n.attr));
                    for (int64_t c = 0; c < cols; ++c) yi[c] = (xi[c] - mu) * inv;
                }
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                double acc = 0.0;
                for (double v : vals[n.in[0]]) acc += v;
                if (n.op == Op::Mean) acc /= static_cast<double>(vals[n.in[0]].size());
                shapes[i] = {};
                vals[i].assign(1, acc);
                break;
            }
            case Op::CrossEntropy: {
                const auto& xs = shapes[n.in[0]];
                const std::vector<int32_t>& t = *idvals[n.in[1]];
                const auto& w = vals[n.in[2]];
                int64_t rows = xs[0], cols = xs[1];
                double loss = 0.0;
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xi = vals[n.in[0]].data() + r * cols;
                    double mx = xi[0];
                    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xi[c]);
                    double z = 0.0;
                    for (int64_t c = 0; c < cols; ++c) z += std::exp(xi[c] - mx);
                    loss += w[static_cast<size_t>(r)] * (mx + std::log(z) - xi[t[static_cast<size_t>(r)]]);
                }
                shapes[i] = {};
                vals[i].assign(1, loss);
                break;
            }
        }
    }
}

float finite_difference_error(const std::function<double(const Tensor&)>& fn, const Tensor& point,
                              const Tensor& analytic, float h) {
    if (analytic.shape != point.shape) throw std::invalid_argument("finite_difference: shape mismatch");
    Tensor x = point;
    float worst = 0.0f;
    for (size_t e = 0; e < x.f.size(); ++e) {
        float keep = x.f[e];
        float xp = keep + h, xm = keep - h;
        x.f[e] = xp;
        double up = fn(x);
        x.f[e] = xm;
        double dn = fn(x);
        x.f[e] = keep;
        // denominator uses the realized fp32 step, not the nominal 2h
        double central = (up - dn) / (static_cast<double>(xp) - static_cast<double>(xm));
        if (!std::isfinite(central) || !std::isfinite(analytic.f[e]))
            return std::numeric_limits<float>::infinity();
        double err = std::fabs(static_cast<double>(analytic.f[e]) - central) /
                     (std::fabs(static_cast<double>(analytic.f[e])) + 1e-8);
        worst = std::max(worst, static_cast<float>(err));
    }
    return worst;
}

float finite_difference_check(Graph& g, const Bindings& b, const std::string& wrt, float h) {
    const Tensor* point = b.find(wrt);
    if (point == nullptr) throw std::invalid_argument("finite_difference_check: '" + wrt + "' unbound");
    Tensor analytic = g.gradients_f64(b, {wrt}).at(wrt);
    Tensor base = *point;
    auto fn = [&](const Tensor& x) {
        Bindings shifted = b;
        shifted.set(wrt, x);
        return g.evaluate_scalar_f64(shifted);
    };
    return finite_difference_error(fn, base, analytic, h);
}

}  // namespace lat
