#include "dcswin/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace dcswin {

int64_t numel(const Shape& shape)
{
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace memory {
namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
std::atomic<std::size_t> g_largest{0};

void raise_to(std::atomic<std::size_t>& target, std::size_t value)
{
    std::size_t cur = target.load(std::memory_order_relaxed);
    while (value > cur && !target.compare_exchange_weak(cur, value, std::memory_order_relaxed)) {
    }
}
}  // namespace

void note_alloc(std::size_t bytes)
{
    std::size_t live = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    raise_to(g_peak, live);
    raise_to(g_largest, bytes);
}

void note_free(std::size_t bytes) { g_live.fetch_sub(bytes, std::memory_order_relaxed); }

void reset_watermarks()
{
    g_peak.store(g_live.load());
    g_largest.store(0);
}

Stats stats() { return {g_live.load(), g_peak.load(), g_largest.load()}; }

}  // namespace memory

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_meta_mode = false;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

MetaGuard::MetaGuard() : previous_(t_meta_mode) { t_meta_mode = true; }
MetaGuard::~MetaGuard() { t_meta_mode = previous_; }
bool meta_mode() { return t_meta_mode; }

template <typename T>
TensorNode<T>::TensorNode(Shape s, bool is_meta) : shape(std::move(s)), meta(is_meta)
{
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (!meta) {
        data.assign(static_cast<std::size_t>(numel(shape)), T(0));
        memory::note_alloc(data.size() * sizeof(T));
    }
}

template <typename T>
TensorNode<T>::~TensorNode()
{
    memory::note_free((data.size() + grad.size()) * sizeof(T));
}

template <typename T>
std::vector<T>& TensorNode<T>::ensure_grad()
{
    if (grad.empty() && !data.empty()) {
        grad.assign(data.size(), T(0));
        memory::note_alloc(grad.size() * sizeof(T));
    }
    return grad;
}

template <typename T>
Tensor<T> Tensor<T>::empty(const Shape& shape)
{
    return Tensor(std::make_shared<TensorNode<T>>(shape, meta_mode()));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape)
{
    return empty(shape);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value)
{
    Tensor t = empty(shape);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values)
{
    if (static_cast<int64_t>(values.size()) != dcswin::numel(shape)) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
    }
    auto node = std::make_shared<TensorNode<T>>(shape, false);
    node->data = std::move(values);
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value)
{
    return from({1}, {value});
}

template <typename T>
const Shape& Tensor<T>::shape() const
{
    if (!node_) throw Error("use of undefined tensor");
    return node_->shape;
}

template <typename T>
int64_t Tensor<T>::dim(int i) const
{
    const Shape& s = shape();
    int n = static_cast<int>(s.size());
    int k = i < 0 ? n + i : i;
    if (k < 0 || k >= n) throw ShapeError("dimension index " + std::to_string(i) + " out of range for " + to_string(s));
    return s[static_cast<std::size_t>(k)];
}

template <typename T>
int64_t Tensor<T>::numel() const
{
    return dcswin::numel(shape());
}

template <typename T>
bool Tensor<T>::is_meta() const
{
    return node_ && node_->meta;
}

template <typename T>
std::span<const T> Tensor<T>::data() const
{
    if (!node_) throw Error("use of undefined tensor");
    return node_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data()
{
    if (!node_) throw Error("use of undefined tensor");
    return node_->data;
}

template <typename T>
T Tensor<T>::item() const
{
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + to_string(shape()));
    return node_->data.at(0);
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> index) const
{
    const Shape& s = shape();
    if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
    int64_t flat = 0;
    std::size_t d = 0;
    for (int64_t i : index) {
        if (i < 0 || i >= s[d]) throw ShapeError("index out of range for " + to_string(s));
        flat = flat * s[d] + i;
        ++d;
    }
    return node_->data.at(static_cast<std::size_t>(flat));
}

template <typename T>
bool Tensor<T>::requires_grad() const
{
    return node_ && node_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on)
{
    if (!node_) throw Error("use of undefined tensor");
    node_->requires_grad = on;
    return *this;
}

template <typename T>
bool Tensor<T>::has_grad() const
{
    return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const
{
    if (!node_) throw Error("use of undefined tensor");
    return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad()
{
    if (!node_) throw Error("use of undefined tensor");
    return node_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad()
{
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const
{
    if (!node_) throw Error("backward on undefined tensor");
    if (numel() != 1) throw ShapeError("backward requires a scalar loss, got shape " + to_string(shape()));
    if (!node_->requires_grad) throw Error("backward on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            TensorNode<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior grads are recomputed each sweep; only leaves accumulate.
    for (TensorNode<T>* n : order) {
        if (n->backward_fn) {
            auto& g = n->ensure_grad();
            std::fill(g.begin(), g.end(), T(0));
        }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const
{
    auto node = std::make_shared<TensorNode<T>>(shape(), is_meta());
    node->data = node_->data;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const
{
    Tensor c = detach();
    c.node_->requires_grad = node_->requires_grad;
    return c;
}

template struct TensorNode<float>;
template struct TensorNode<double>;
template class Tensor<float>;
template class Tensor<double>;

}  // namespace dcswin
