#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dcswin/ops.hpp"
#include "dcswin/tensor.hpp"

namespace dcswin {

using Rng = std::mt19937_64;

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// Fills with N(0, std^2) truncated to [-2 std, 2 std]. Meta tensors are left alone.
template <typename T>
void trunc_normal_(Tensor<T>& t, double std, Rng& rng);

/// Base for anything that owns parameters. Parameters are tensor handles, so a
/// module and its registry share storage; a submodule registered under two
/// parents (or referenced without registration) is the same storage everywhere.
template <typename T>
class Module {
public:
    virtual ~Module() = default;

    /// Hierarchical names ("encoder.stage1.block0.attn.qkv.weight"); shared
    /// storage is listed once, under the first name reached.
    std::vector<NamedTensor<T>> named_parameters() const;
    std::vector<NamedTensor<T>> named_buffers() const;
    std::vector<Tensor<T>> parameters() const;
    int64_t parameter_count() const;

    void set_training(bool on);
    bool training() const { return training_; }
    void zero_grad();

protected:
    Tensor<T> register_parameter(const std::string& name, Tensor<T> t);
    Tensor<T> register_buffer(const std::string& name, Tensor<T> t);

    template <typename M>
    std::shared_ptr<M> register_module(const std::string& name, std::shared_ptr<M> m)
    {
        children_.emplace_back(name, m);
        return m;
    }

private:
    void collect(const std::string& prefix, bool buffers, std::vector<NamedTensor<T>>& out,
                 std::vector<const void*>& seen) const;

    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::vector<std::pair<std::string, Tensor<T>>> buffers_;
    std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
    bool training_ = true;
};

template <typename T>
class Linear : public Module<T> {
public:
    Linear(int64_t in, int64_t out, bool bias, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    Tensor<T> weight, bias;
};

template <typename T>
class Conv2d : public Module<T> {
public:
    Conv2d(int64_t in, int64_t out, int64_t kernel, Conv2dOptions opt, bool bias, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    Conv2dOptions options;
    Tensor<T> weight, bias;
};

template <typename T>
class ConvTranspose2d : public Module<T> {
public:
    ConvTranspose2d(int64_t in, int64_t out, int64_t kernel, int stride, int padding, bool bias, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    int stride, padding;
    Tensor<T> weight, bias;
};

template <typename T>
class BatchNorm2d : public Module<T> {
public:
    explicit BatchNorm2d(int64_t channels);
    /// Training mode normalizes with batch statistics and updates the running
    /// ones; eval mode is read-only.
    Tensor<T> forward(const Tensor<T>& x) const;

    Tensor<T> gamma, beta;
    mutable RunningStats<T> stats;
};

template <typename T>
class LayerNorm : public Module<T> {
public:
    explicit LayerNorm(int64_t dim);
    Tensor<T> forward(const Tensor<T>& x) const;

    Tensor<T> gamma, beta;
};

}  // namespace dcswin
