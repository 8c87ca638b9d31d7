#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcswin/error.hpp"

namespace dcswin {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace memory {

struct Stats {
    std::size_t live_bytes = 0;
    std::size_t peak_bytes = 0;
    std::size_t largest_allocation = 0;
};

void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);
/// Resets peak and largest-allocation watermarks to the current live size.
void reset_watermarks();
Stats stats();

}  // namespace memory

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// While alive, tensors created on this thread carry shapes only (no data).
/// Used for shape dry runs and parameter counting of large configurations.
class MetaGuard {
public:
    MetaGuard();
    ~MetaGuard();
    MetaGuard(const MetaGuard&) = delete;
    MetaGuard& operator=(const MetaGuard&) = delete;

private:
    bool previous_;
};

bool meta_mode();

template <typename T>
struct TensorNode {
    TensorNode(Shape s, bool is_meta);
    ~TensorNode();
    TensorNode(const TensorNode&) = delete;
    TensorNode& operator=(const TensorNode&) = delete;

    std::vector<T>& ensure_grad();

    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool meta = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Propagates this node's grad into its parents' grads.
    std::function<void(TensorNode&)> backward_fn;
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

    static Tensor empty(const Shape& shape);
    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, T value);
    static Tensor from(const Shape& shape, std::vector<T> values);
    static Tensor scalar(T value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    /// Extent of dimension i; negative i counts from the back.
    int64_t dim(int i) const;
    int64_t numel() const;
    bool is_meta() const;

    std::span<const T> data() const;
    std::span<T> mutable_data();
    T item() const;
    T at(std::initializer_list<int64_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const T> grad() const;
    std::span<T> mutable_grad();
    void zero_grad();

    /// Reverse-mode sweep from this scalar. Leaf grads accumulate across calls.
    void backward() const;

    /// Same data, cut from the graph.
    Tensor detach() const;
    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace dcswin
