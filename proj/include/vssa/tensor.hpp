#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vssa {

// Error categories the CLI maps onto exit codes.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline void check_shape_positive(const Shape& s) {
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(s));
    }
}

template <class T>
class Tape;

// Dense n-dimensional array. Value-like: copies share the underlying buffer,
// ops never mutate inputs. `node >= 0` ties the tensor to a tape node, which
// is where gradients accumulate during the backward pass.
template <class T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> data;
    int node = -1;

    Tensor() = default;

    static Tensor zeros(Shape s) {
        check_shape_positive(s);
        Tensor t;
        t.data = std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel(s)), T(0));
        t.shape = std::move(s);
        return t;
    }

    static Tensor full(Shape s, T v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }

    static Tensor from(Shape s, std::vector<T> values) {
        check_shape_positive(s);
        if (static_cast<std::int64_t>(values.size()) != numel(s)) {
            throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(s));
        }
        Tensor t;
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    bool defined() const { return static_cast<bool>(data); }
    std::int64_t size() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    bool requires_grad() const { return node >= 0; }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T& at(std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }
    T at(std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }
};

template <class T>
inline bool all_finite(const std::vector<T>& v) {
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

// Reverse-mode tape. Nodes are appended in forward order; backward() walks
// them in exact reverse insertion order. Single-threaded per instance.
template <class T>
class Tape {
public:
    struct Node {
        const char* op;
        std::vector<int> inputs;
        std::int64_t out_size;
        // Consumes this node's grad buffer and accumulates into input grads.
        std::function<void(Tape&, const std::vector<T>&)> backward;
        std::vector<T> grad;
    };

    // Registers a parameter/input tensor as a leaf node so gradients can
    // accumulate for it. Returns a tensor sharing the same buffer.
    Tensor<T> leaf(const Tensor<T>& t) {
        Tensor<T> out = t;
        out.node = add("leaf", {}, t.size(), nullptr);
        return out;
    }

    int add(const char* op, std::vector<int> inputs, std::int64_t out_size,
            std::function<void(Tape&, const std::vector<T>&)> backward) {
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.out_size = out_size;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    // Lazily allocated gradient buffer of a node.
    std::vector<T>& grad_buf(int id) {
        Node& n = nodes_.at(static_cast<std::size_t>(id));
        if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.out_size), T(0));
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes_.at(static_cast<std::size_t>(id)).grad.empty(); }

    // Gradient of the last backward() w.r.t. a tape-registered tensor.
    std::vector<T> grad(const Tensor<T>& t) const {
        if (t.node < 0) throw std::invalid_argument("tensor is not on the tape");
        const Node& n = nodes_.at(static_cast<std::size_t>(t.node));
        if (n.grad.empty()) return std::vector<T>(static_cast<std::size_t>(t.size()), T(0));
        return n.grad;
    }

    void backward(const Tensor<T>& loss) {
        if (loss.node < 0) throw std::invalid_argument("backward: loss is not on the tape");
        if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar tensor");
        grad_buf(loss.node)[0] = T(1);
        for (int id = loss.node; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (id != loss.node && !n.inputs.empty()) {
                // Interior activation grads are not needed once propagated.
                std::vector<T>().swap(n.grad);
            }
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

#if !defined(NDEBUG)
#define VSSA_CHECK_FINITE 1
#else
#define VSSA_CHECK_FINITE 0
#endif

template <class T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
#if VSSA_CHECK_FINITE
    if (!all_finite(*t.data)) throw NumericalError(std::string("non-finite value produced by ") + op);
#else
    (void)t;
    (void)op;
#endif
}

}  // namespace vssa
