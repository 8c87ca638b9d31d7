#include "dcswin/nn.hpp"

#include <algorithm>
#include <cmath>

namespace dcswin {

template <typename T>
void trunc_normal_(Tensor<T>& t, double std, Rng& rng)
{
    if (t.is_meta()) return;
    std::normal_distribution<double> dist(0.0, std);
    for (T& v : t.mutable_data()) {
        double s;
        do {
            s = dist(rng);
        } while (std::abs(s) > 2.0 * std);
        v = static_cast<T>(s);
    }
}

template <typename T>
std::vector<NamedTensor<T>> Module<T>::named_parameters() const
{
    std::vector<NamedTensor<T>> out;
    std::vector<const void*> seen;
    collect("", false, out, seen);
    return out;
}

template <typename T>
std::vector<NamedTensor<T>> Module<T>::named_buffers() const
{
    std::vector<NamedTensor<T>> out;
    std::vector<const void*> seen;
    collect("", true, out, seen);
    return out;
}

template <typename T>
void Module<T>::collect(const std::string& prefix, bool buffers, std::vector<NamedTensor<T>>& out,
                        std::vector<const void*>& seen) const
{
    for (const auto& [name, t] : buffers ? buffers_ : params_) {
        const void* key = t.node().get();
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
        seen.push_back(key);
        out.push_back({prefix + name, t});
    }
    for (const auto& [name, child] : children_) child->collect(prefix + name + ".", buffers, out, seen);
}

template <typename T>
std::vector<Tensor<T>> Module<T>::parameters() const
{
    std::vector<Tensor<T>> out;
    for (auto& nt : named_parameters()) out.push_back(nt.tensor);
    return out;
}

template <typename T>
int64_t Module<T>::parameter_count() const
{
    int64_t n = 0;
    for (const auto& nt : named_parameters()) n += nt.tensor.numel();
    return n;
}

template <typename T>
void Module<T>::set_training(bool on)
{
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
}

template <typename T>
void Module<T>::zero_grad()
{
    for (auto& nt : named_parameters()) nt.tensor.zero_grad();
}

template <typename T>
Tensor<T> Module<T>::register_parameter(const std::string& name, Tensor<T> t)
{
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
}

template <typename T>
Tensor<T> Module<T>::register_buffer(const std::string& name, Tensor<T> t)
{
    buffers_.emplace_back(name, t);
    return t;
}

template <typename T>
Linear<T>::Linear(int64_t in, int64_t out, bool with_bias, Rng& rng)
{
    weight = this->register_parameter("weight", Tensor<T>::zeros({out, in}));
    trunc_normal_(weight, 0.02, rng);
    if (with_bias) bias = this->register_parameter("bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const
{
    return linear(x, weight, bias);
}

template <typename T>
Conv2d<T>::Conv2d(int64_t in, int64_t out, int64_t kernel, Conv2dOptions opt, bool with_bias, Rng& rng)
    : options(opt)
{
    weight = this->register_parameter("weight", Tensor<T>::zeros({out, in, kernel, kernel}));
    trunc_normal_(weight, 0.02, rng);
    if (with_bias) bias = this->register_parameter("bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const
{
    return conv2d(x, weight, bias, options);
}

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(int64_t in, int64_t out, int64_t kernel, int s, int p, bool with_bias, Rng& rng)
    : stride(s), padding(p)
{
    weight = this->register_parameter("weight", Tensor<T>::zeros({in, out, kernel, kernel}));
    trunc_normal_(weight, 0.02, rng);
    if (with_bias) bias = this->register_parameter("bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x) const
{
    return transpose_conv2d(x, weight, bias, stride, padding);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int64_t channels)
{
    gamma = this->register_parameter("weight", Tensor<T>::full({channels}, T(1)));
    beta = this->register_parameter("bias", Tensor<T>::zeros({channels}));
    stats.mean = this->register_buffer("running_mean", Tensor<T>::zeros({channels}));
    stats.var = this->register_buffer("running_var", Tensor<T>::full({channels}, T(1)));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) const
{
    return batch_norm2d(x, gamma, beta, stats, this->training());
}

template <typename T>
LayerNorm<T>::LayerNorm(int64_t dim)
{
    gamma = this->register_parameter("weight", Tensor<T>::full({dim}, T(1)));
    beta = this->register_parameter("bias", Tensor<T>::zeros({dim}));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const
{
    return layer_norm(x, gamma, beta);
}

template void trunc_normal_(Tensor<float>&, double, Rng&);
template void trunc_normal_(Tensor<double>&, double, Rng&);
template class Module<float>;
template class Module<double>;
template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class ConvTranspose2d<float>;
template class ConvTranspose2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;

}  // namespace dcswin
