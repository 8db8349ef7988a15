#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "tada/tensor.hpp"

namespace tada {

template <typename T>
class Tape;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;                       // allocated only when requires_grad
    bool requires_grad = false;
    Tensor<T>* grad_sink = nullptr;       // leaf parameters accumulate here
    std::function<void(Node<T>&)> backward;
};

/// Handle to a node owned by a Tape. Cheap to copy; invalid after Tape::reset().
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    explicit operator bool() const { return node_ != nullptr; }

private:
    friend class Tape<T>;
    explicit Var(Node<T>* n) : node_(n) {}
    Node<T>* node_ = nullptr;
};

/// Reverse-mode tape. Operations are recorded in construction order, which is
/// topological by construction; backward() sweeps the record once in reverse.
template <typename T>
class Tape {
public:
    /// Leaf parameter. Gradients accumulate into *grad_sink, which must
    /// outlive the tape sweep. Pass nullptr for a non-differentiable leaf.
    Var<T> leaf(const Tensor<T>& value, Tensor<T>* grad_sink);
    Var<T> constant(Tensor<T> value);

    Var<T> add(Var<T> a, Var<T> b);
    Var<T> sub(Var<T> a, Var<T> b);
    Var<T> mul(Var<T> a, Var<T> b);
    Var<T> scale(Var<T> a, T c);
    Var<T> abs(Var<T> a);  // subgradient convention sign(0) = 0
    Var<T> square(Var<T> a);
    Var<T> leaky_relu(Var<T> a, T slope = T(0.1));
    Var<T> sigmoid(Var<T> a);

    Var<T> sum(Var<T> a);
    Var<T> mean(Var<T> a);

    /// Cross-correlation on 5-D (batch, channel, depth, height, width) input
    /// with zero padding. Weight layout (out_ch, in_ch, kd, kh, kw).
    Var<T> conv3d(Var<T> input, Var<T> weight, Var<T> bias, int stride, int padding);

    /// Integer-factor trilinear upsampling with half-pixel sample placement.
    Var<T> upsample_trilinear(Var<T> input, int factor);

    /// Per-sample, per-channel standardization over spatial voxels, then a
    /// per-channel affine map. gain/bias have shape (channels).
    Var<T> instance_norm(Var<T> input, Var<T> gain, Var<T> bias, T eps = T(1e-5));

    Var<T> concat_channels(Var<T> a, Var<T> b);
    Var<T> reshape(Var<T> a, Shape new_shape);

    /// Escape hatch for externally implemented differentiable operations.
    /// The callback receives the upstream gradient and the parent nodes; it
    /// must accumulate (+=) into each parent's grad that requires_grad.
    Var<T> custom(std::vector<Var<T>> parents, Tensor<T> value,
                  std::function<void(const Tensor<T>& upstream,
                                     const std::vector<Node<T>*>& parents)> backward);

    /// Seeds the scalar loss with gradient 1 and sweeps the tape in reverse.
    /// Repeated calls accumulate into leaf grad sinks.
    void backward(Var<T> loss);

    std::size_t size() const { return nodes_.size(); }
    void reset() { nodes_.clear(); }

private:
    Node<T>& make(Tensor<T> value, bool requires_grad);
    Var<T> unary(Var<T> a, Tensor<T> value, std::function<void(const Tensor<T>&, Tensor<T>&)> accumulate);

    std::deque<Node<T>> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tada
