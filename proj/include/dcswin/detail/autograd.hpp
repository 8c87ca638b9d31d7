#pragma once

// Helpers for writing differentiable ops. Not part of the public API.

#include <cmath>
#include <initializer_list>
#include <string>

#include "dcswin/tensor.hpp"

namespace dcswin::detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

/// Allocates the result of `op`. The result is meta when any input is meta
/// (or meta mode is on) and records `inputs` as parents when grad is needed.
template <typename T>
Tensor<T> make_output(const char* op, const Shape& shape, std::initializer_list<const Tensor<T>*> inputs)
{
    bool meta = meta_mode();
    bool needs_grad = false;
    for (const Tensor<T>* in : inputs) {
        meta = meta || in->is_meta();
        needs_grad = needs_grad || in->requires_grad();
    }
    auto node = std::make_shared<TensorNode<T>>(shape, meta);
    node->op = op;
    if (needs_grad && grad_enabled()) {
        node->requires_grad = true;
        for (const Tensor<T>* in : inputs) node->parents.push_back(in->node());
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_output(const char* op, const Shape& shape, const std::vector<Tensor<T>>& inputs)
{
    bool meta = meta_mode();
    bool needs_grad = false;
    for (const auto& in : inputs) {
        meta = meta || in.is_meta();
        needs_grad = needs_grad || in.requires_grad();
    }
    auto node = std::make_shared<TensorNode<T>>(shape, meta);
    node->op = op;
    if (needs_grad && grad_enabled()) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node());
    }
    return Tensor<T>(std::move(node));
}

/// Attaches the backward closure and validates that the forward result is finite.
template <typename T>
void finish(Tensor<T>& out, std::function<void(TensorNode<T>&)> backward_fn)
{
    const auto& node = out.node();
    for (T v : node->data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + node->op);
    }
    if (node->requires_grad) node->backward_fn = std::move(backward_fn);
}

/// Grad buffer of parent `i` if it participates in differentiation, else null.
template <typename T>
std::vector<T>* parent_grad(TensorNode<T>& out, std::size_t i)
{
    auto& p = out.parents.at(i);
    return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace dcswin::detail
