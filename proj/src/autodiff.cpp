#include "tada/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>

namespace tada {

namespace {

void gemm_rm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
             const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm_rm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
             const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvDims {
    std::int64_t batch, in_ch, d, h, w;
    std::int64_t out_ch, kd, kh, kw;
    std::int64_t od, oh, ow;
    int stride, pad;
    std::int64_t rows() const { return in_ch * kd * kh * kw; }
    std::int64_t cols() const { return od * oh * ow; }

    // Output-depth slab so the unrolled patch matrix stays cache-resident;
    // streaming the full volume through it is memory-bound and ~3x slower.
    std::int64_t od_chunk() const {
        std::int64_t target = (std::int64_t(1) << 18) / std::max<std::int64_t>(1, rows() * oh * ow);
        return std::clamp<std::int64_t>(target, 1, od);
    }
};

ConvDims conv_dims(const Shape& in, const Shape& wt, const Shape& bias, int stride, int pad) {
    if (in.size() != 5) throw std::invalid_argument("conv3d: input must be 5-D, got " + shape_str(in));
    if (wt.size() != 5) throw std::invalid_argument("conv3d: weight must be 5-D, got " + shape_str(wt));
    if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv3d: padding must be >= 0");
    ConvDims cd{};
    cd.batch = in[0];
    cd.in_ch = in[1];
    cd.d = in[2];
    cd.h = in[3];
    cd.w = in[4];
    cd.out_ch = wt[0];
    cd.kd = wt[2];
    cd.kh = wt[3];
    cd.kw = wt[4];
    cd.stride = stride;
    cd.pad = pad;
    if (wt[1] != cd.in_ch)
        throw std::invalid_argument("conv3d: weight expects " + std::to_string(wt[1]) +
                                    " input channels, input has " + std::to_string(cd.in_ch));
    if (bias.size() != 1 || bias[0] != cd.out_ch)
        throw std::invalid_argument("conv3d: bias must have shape (" + std::to_string(cd.out_ch) + ")");
    auto out_extent = [&](std::int64_t ext, std::int64_t k) {
        std::int64_t padded = ext + 2 * pad;
        if (k > padded)
            throw std::invalid_argument("conv3d: kernel extent " + std::to_string(k) +
                                        " exceeds padded input extent " + std::to_string(padded));
        return (padded - k) / stride + 1;
    };
    cd.od = out_extent(cd.d, cd.kd);
    cd.oh = out_extent(cd.h, cd.kh);
    cd.ow = out_extent(cd.w, cd.kw);
    return cd;
}

// Output-column range [ow_lo, ow_hi) whose source index ow*stride - pad + k
// stays inside [0, extent); hoisting this out of the copy loops keeps the
// inner loops branch-free (im2col dominates the training profile otherwise).
inline void valid_range(std::int64_t out_ext, std::int64_t ext, int stride, int pad,
                        std::int64_t k, std::int64_t& lo, std::int64_t& hi) {
    std::int64_t shift = pad - k;  // in = ow*stride - shift... in = ow*stride + (k - pad)
    // smallest ow with ow*stride + k - pad >= 0
    lo = shift > 0 ? (shift + stride - 1) / stride : 0;
    // largest ow with ow*stride + k - pad <= ext - 1, plus one
    hi = (ext - 1 + shift) / stride + 1;
    lo = std::clamp<std::int64_t>(lo, 0, out_ext);
    hi = std::clamp<std::int64_t>(hi, lo, out_ext);
}

// Unrolls output rows od in [od0, od1) only; `col` has rows() x cols rows
// where cols = (od1 - od0) * oh * ow.
template <typename T>
void im2col(const T* in, const ConvDims& cd, std::int64_t od0, std::int64_t od1, T* col) {
    const std::int64_t cols = (od1 - od0) * cd.oh * cd.ow;
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < cd.in_ch; ++c) {
        const T* plane = in + c * cd.d * cd.h * cd.w;
        for (std::int64_t kd = 0; kd < cd.kd; ++kd)
            for (std::int64_t kh = 0; kh < cd.kh; ++kh)
                for (std::int64_t kw = 0; kw < cd.kw; ++kw, ++r) {
                    T* dst = col + r * cols - od0 * cd.oh * cd.ow;
                    std::int64_t ow_lo, ow_hi;
                    valid_range(cd.ow, cd.w, cd.stride, cd.pad, kw, ow_lo, ow_hi);
                    for (std::int64_t od = od0; od < od1; ++od) {
                        std::int64_t id = od * cd.stride - cd.pad + kd;
                        if (id < 0 || id >= cd.d) {
                            std::fill(dst + od * cd.oh * cd.ow, dst + (od + 1) * cd.oh * cd.ow, T(0));
                            continue;
                        }
                        for (std::int64_t oh = 0; oh < cd.oh; ++oh) {
                            std::int64_t ih = oh * cd.stride - cd.pad + kh;
                            T* row = dst + (od * cd.oh + oh) * cd.ow;
                            if (ih < 0 || ih >= cd.h) {
                                std::fill(row, row + cd.ow, T(0));
                                continue;
                            }
                            const T* src = plane + (id * cd.h + ih) * cd.w - cd.pad + kw;
                            std::fill(row, row + ow_lo, T(0));
                            if (cd.stride == 1) {
                                std::copy(src + ow_lo, src + ow_hi, row + ow_lo);
                            } else {
                                for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
                                    row[ow] = src[ow * cd.stride];
                            }
                            std::fill(row + ow_hi, row + cd.ow, T(0));
                        }
                    }
                }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& cd, std::int64_t od0, std::int64_t od1, T* in_grad) {
    const std::int64_t cols = (od1 - od0) * cd.oh * cd.ow;
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < cd.in_ch; ++c) {
        T* plane = in_grad + c * cd.d * cd.h * cd.w;
        for (std::int64_t kd = 0; kd < cd.kd; ++kd)
            for (std::int64_t kh = 0; kh < cd.kh; ++kh)
                for (std::int64_t kw = 0; kw < cd.kw; ++kw, ++r) {
                    const T* src = col + r * cols - od0 * cd.oh * cd.ow;
                    std::int64_t ow_lo, ow_hi;
                    valid_range(cd.ow, cd.w, cd.stride, cd.pad, kw, ow_lo, ow_hi);
                    for (std::int64_t od = od0; od < od1; ++od) {
                        std::int64_t id = od * cd.stride - cd.pad + kd;
                        if (id < 0 || id >= cd.d) continue;
                        for (std::int64_t oh = 0; oh < cd.oh; ++oh) {
                            std::int64_t ih = oh * cd.stride - cd.pad + kh;
                            if (ih < 0 || ih >= cd.h) continue;
                            const T* row = src + (od * cd.oh + oh) * cd.ow;
                            T* dst = plane + (id * cd.h + ih) * cd.w - cd.pad + kw;
                            if (cd.stride == 1) {
                                for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) dst[ow] += row[ow];
                            } else {
                                for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
                                    dst[ow * cd.stride] += row[ow];
                            }
                        }
                    }
                }
    }
}

// Precomputed 1-D interpolation stencil for half-pixel upsampling.
struct Axis {
    std::vector<std::int64_t> lo, hi;
    std::vector<double> frac;
};

Axis upsample_axis(std::int64_t in_ext, int factor) {
    Axis ax;
    std::int64_t out_ext = in_ext * factor;
    ax.lo.resize(out_ext);
    ax.hi.resize(out_ext);
    ax.frac.resize(out_ext);
    for (std::int64_t o = 0; o < out_ext; ++o) {
        double src = (o + 0.5) / factor - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_ext - 1));
        std::int64_t lo = static_cast<std::int64_t>(std::floor(src));
        ax.lo[o] = lo;
        ax.hi[o] = std::min(lo + 1, in_ext - 1);
        ax.frac[o] = src - static_cast<double>(lo);
    }
    return ax;
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

template <typename T>
Node<T>& Tape<T>::make(Tensor<T> value, bool requires_grad) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = Tensor<T>(n.value.shape);
    return n;
}

template <typename T>
Var<T> Tape<T>::leaf(const Tensor<T>& value, Tensor<T>* grad_sink) {
    if (grad_sink && grad_sink->shape != value.shape)
        throw std::invalid_argument("leaf: grad sink shape " + shape_str(grad_sink->shape) +
                                    " does not match value shape " + shape_str(value.shape));
    Node<T>& n = make(value, grad_sink != nullptr);
    n.grad_sink = grad_sink;
    if (grad_sink) {
        n.backward = [](Node<T>& self) {
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) (*self.grad_sink)[i] += self.grad[i];
        };
    }
    return Var<T>(&n);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    return Var<T>(&make(std::move(value), false));
}

template <typename T>
Var<T> Tape<T>::unary(Var<T> a, Tensor<T> value,
                      std::function<void(const Tensor<T>&, Tensor<T>&)> accumulate) {
    Node<T>& n = make(std::move(value), a.node_->requires_grad);
    if (n.requires_grad) {
        Node<T>* pa = a.node_;
        n.backward = [pa, acc = std::move(accumulate)](Node<T>& self) { acc(self.grad, pa->grad); };
    }
    return Var<T>(&n);
}

template <typename T>
Var<T> Tape<T>::add(Var<T> a, Var<T> b) {
    if (!same_shape(a.value(), b.value()))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.value().shape) + " vs " +
                                    shape_str(b.value().shape));
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    Node<T>& n = make(std::move(out), a.node_->requires_grad || b.node_->requires_grad);
    if (n.requires_grad) {
        Node<T>*pa = a.node_, *pb = b.node_;
        n.backward = [pa, pb](Node<T>& self) {
            if (pa->requires_grad)
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
            if (pb->requires_grad)
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i];
        };
    }
    return Var<T>(&n);
}

template <typename T>
Var<T> Tape<T>::sub(Var<T> a, Var<T> b) {
    if (!same_shape(a.value(), b.value()))
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.value().shape) + " vs " +
                                    shape_str(b.value().shape));
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    Node<T>& n = make(std::move(out), a.node_->requires_grad || b.node_->requires_grad);
    if (n.requires_grad) {
        Node<T>*pa = a.node_, *pb = b.node_;
        n.backward = [pa, pb](Node<T>& self) {
            if (pa->requires_grad)
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
            if (pb->requires_grad)
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] -= self.grad[i];
        };
    }
    return Var<T>(&n);
}

template <typename T>
Var<T> Tape<T>::mul(Var<T> a, Var<T> b) {
    if (!same_shape(a.value(), b.value()))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.value().shape) + " vs " +
                                    shape_str(b.value().shape));
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    Node<T>& n = make(std::move(out), a.node_->requires_grad || b.node_->requires_grad);
    if (n.requires_grad) {
        Node<T>*pa = a.node_, *pb = b.node_;
        n.backward = [pa, pb](Node<T>& self) {
            if (pa->requires_grad)
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
            if (pb->requires_grad)
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
        };
    }
    return Var<T>(&n);
}

template <typename T>
Var<T> Tape<T>::scale(Var<T> a, T c) {
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = c * a.value()[i];
    return unary(a, std::move(out), [c](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < up.numel(); ++i) g[i] += c * up[i];
    });
}

template <typename T>
Var<T> Tape<T>::abs(Var<T> a) {
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(a.value()[i]);
    Node<T>* pa = a.node_;
    return unary(a, std::move(out), [pa](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < up.numel(); ++i) {
            T x = pa->value[i];
            T s = (x > T(0)) ? T(1) : (x < T(0) ? T(-1) : T(0));
            g[i] += s * up[i];
        }
    });
}

template <typename T>
Var<T> Tape<T>::square(Var<T> a) {
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * a.value()[i];
    Node<T>* pa = a.node_;
    return unary(a, std::move(out), [pa](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < up.numel(); ++i) g[i] += T(2) * pa->value[i] * up[i];
    });
}

template <typename T>
Var<T> Tape<T>::leaky_relu(Var<T> a, T slope) {
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        T x = a.value()[i];
        out[i] = x >= T(0) ? x : slope * x;
    }
    Node<T>* pa = a.node_;
    return unary(a, std::move(out), [pa, slope](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < up.numel(); ++i)
            g[i] += (pa->value[i] >= T(0) ? T(1) : slope) * up[i];
    });
}

template <typename T>
Var<T> Tape<T>::sigmoid(Var<T> a) {
    Tensor<T> out(a.value().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(a.value()[i]);
    Node<T>& n = make(std::move(out), a.node_->requires_grad);
    if (n.requires_grad) {
        Node<T>* pa = a.node_;
        n.backward = [pa](Node<T>& self) {
            for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
                T s = self.value[i];
                pa->grad[i] += s * (T(1) - s) * self.grad[i];
            }
        };
    }
    return Var<T>(&n);
}

template <typename T>
Var<T> Tape<T>::sum(Var<T> a) {
    if (a.value().numel() == 0) throw std::invalid_argument("sum: empty tensor");
    T acc = 0;
    for (T v : a.value().data) acc += v;
    return unary(a, Tensor<T>::scalar(acc), [](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += up[0];
    });
}

template <typename T>
Var<T> Tape<T>::mean(Var<T> a) {
    std::int64_t n = a.value().numel();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    T acc = 0;
    for (T v : a.value().data) acc += v;
    T inv = T(1) / static_cast<T>(n);
    return unary(a, Tensor<T>::scalar(acc * inv), [inv](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += inv * up[0];
    });
}

template <typename T>
Var<T> Tape<T>::conv3d(Var<T> input, Var<T> weight, Var<T> bias, int stride, int padding) {
    ConvDims cd = conv_dims(input.value().shape, weight.value().shape, bias.value().shape, stride, padding);
    const std::int64_t rows = cd.rows(), cols = cd.cols();
    const std::int64_t chunk = cd.od_chunk(), plane = cd.oh * cd.ow;
    Tensor<T> out({cd.batch, cd.out_ch, cd.od, cd.oh, cd.ow});
    std::vector<T> col(static_cast<std::size_t>(rows * chunk * plane));
    const std::int64_t in_stride = cd.in_ch * cd.d * cd.h * cd.w;
    const std::int64_t out_stride = cd.out_ch * cols;
    for (std::int64_t n = 0; n < cd.batch; ++n) {
        for (std::int64_t od0 = 0; od0 < cd.od; od0 += chunk) {
            const std::int64_t od1 = std::min(od0 + chunk, cd.od);
            const std::int64_t c = (od1 - od0) * plane;
            im2col(input.value().data.data() + n * in_stride, cd, od0, od1, col.data());
            // out rows have leading dimension `cols`; the slab starts at od0.
            gemm_rm(false, false, static_cast<int>(cd.out_ch), static_cast<int>(c), static_cast<int>(rows),
                    T(1), weight.value().data.data(), static_cast<int>(rows), col.data(), static_cast<int>(c),
                    T(0), out.data.data() + n * out_stride + od0 * plane, static_cast<int>(cols));
        }
        for (std::int64_t o = 0; o < cd.out_ch; ++o) {
            T b = bias.value()[o];
            T* row = out.data.data() + n * out_stride + o * cols;
            for (std::int64_t i = 0; i < cols; ++i) row[i] += b;
        }
    }
    bool req = input.node_->requires_grad || weight.node_->requires_grad || bias.node_->requires_grad;
    Node<T>& node = make(std::move(out), req);
    if (req) {
        Node<T>*pi = input.node_, *pw = weight.node_, *pb = bias.node_;
        node.backward = [pi, pw, pb, cd](Node<T>& self) {
            const std::int64_t rows = cd.rows(), cols = cd.cols();
            const std::int64_t chunk = cd.od_chunk(), plane = cd.oh * cd.ow;
            const std::int64_t in_stride = cd.in_ch * cd.d * cd.h * cd.w;
            const std::int64_t out_stride = cd.out_ch * cols;
            std::vector<T> col(static_cast<std::size_t>(rows * chunk * plane));
            for (std::int64_t n = 0; n < cd.batch; ++n) {
                const T* up = self.grad.data.data() + n * out_stride;
                if (pb->requires_grad) {
                    for (std::int64_t o = 0; o < cd.out_ch; ++o) {
                        T acc = 0;
                        for (std::int64_t i = 0; i < cols; ++i) acc += up[o * cols + i];
                        pb->grad[o] += acc;
                    }
                }
                for (std::int64_t od0 = 0; od0 < cd.od; od0 += chunk) {
                    const std::int64_t od1 = std::min(od0 + chunk, cd.od);
                    const std::int64_t c = (od1 - od0) * plane;
                    if (pw->requires_grad) {
                        im2col(pi->value.data.data() + n * in_stride, cd, od0, od1, col.data());
                        gemm_rm(false, true, static_cast<int>(cd.out_ch), static_cast<int>(rows),
                                static_cast<int>(c), T(1), up + od0 * plane, static_cast<int>(cols),
                                col.data(), static_cast<int>(c), T(1), pw->grad.data.data(),
                                static_cast<int>(rows));
                    }
                    if (pi->requires_grad) {
                        gemm_rm(true, false, static_cast<int>(rows), static_cast<int>(c),
                                static_cast<int>(cd.out_ch), T(1), pw->value.data.data(),
                                static_cast<int>(rows), up + od0 * plane, static_cast<int>(cols), T(0),
                                col.data(), static_cast<int>(c));
                        col2im_add(col.data(), cd, od0, od1, pi->grad.data.data() + n * in_stride);
                    }
                }
            }
        };
    }
    return Var<T>(&node);
}

template <typename T>
Var<T> Tape<T>::upsample_trilinear(Var<T> input, int factor) {
    if (factor < 1) throw std::invalid_argument("upsample_trilinear: factor must be >= 1");
    const Shape& s = input.value().shape;
    if (s.size() != 5) throw std::invalid_argument("upsample_trilinear: input must be 5-D, got " + shape_str(s));
    const std::int64_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    Axis az = upsample_axis(D, factor), ay = upsample_axis(H, factor), ax = upsample_axis(W, factor);
    const std::int64_t OD = D * factor, OH = H * factor, OW = W * factor;
    Tensor<T> out({N, C, OD, OH, OW});
    const T* in = input.value().data.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = in + nc * D * H * W;
        T* dst = out.data.data() + nc * OD * OH * OW;
        for (std::int64_t od = 0; od < OD; ++od) {
            T fd = static_cast<T>(az.frac[od]);
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                T fh = static_cast<T>(ay.frac[oh]);
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    T fw = static_cast<T>(ax.frac[ow]);
                    auto at = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
                        return src[(z * H + y) * W + x];
                    };
                    T c00 = at(az.lo[od], ay.lo[oh], ax.lo[ow]) * (T(1) - fw) + at(az.lo[od], ay.lo[oh], ax.hi[ow]) * fw;
                    T c01 = at(az.lo[od], ay.hi[oh], ax.lo[ow]) * (T(1) - fw) + at(az.lo[od], ay.hi[oh], ax.hi[ow]) * fw;
                    T c10 = at(az.hi[od], ay.lo[oh], ax.lo[ow]) * (T(1) - fw) + at(az.hi[od], ay.lo[oh], ax.hi[ow]) * fw;
                    T c11 = at(az.hi[od], ay.hi[oh], ax.lo[ow]) * (T(1) - fw) + at(az.hi[od], ay.hi[oh], ax.hi[ow]) * fw;
                    T c0 = c00 * (T(1) - fh) + c01 * fh;
                    T c1 = c10 * (T(1) - fh) + c11 * fh;
                    dst[(od * OH + oh) * OW + ow] = c0 * (T(1) - fd) + c1 * fd;
                }
            }
        }
    }
    Node<T>& node = make(std::move(out), input.node_->requires_grad);
    if (node.requires_grad) {
        Node<T>* pi = input.node_;
        node.backward = [pi, az, ay, ax, N, C, D, H, W, OD, OH, OW](Node<T>& self) {
            const T* up = self.grad.data.data();
            for (std::int64_t nc = 0; nc < N * C; ++nc) {
                T* g = pi->grad.data.data() + nc * D * H * W;
                const T* u = up + nc * OD * OH * OW;
                for (std::int64_t od = 0; od < OD; ++od) {
                    T fd = static_cast<T>(az.frac[od]);
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        T fh = static_cast<T>(ay.frac[oh]);
                        for (std::int64_t ow = 0; ow < OW; ++ow) {
                            T fw = static_cast<T>(ax.frac[ow]);
                            T v = u[(od * OH + oh) * OW + ow];
                            auto put = [&](std::int64_t z, std::int64_t y, std::int64_t x, T wgt) {
                                g[(z * H + y) * W + x] += wgt * v;
                            };
                            put(az.lo[od], ay.lo[oh], ax.lo[ow], (T(1) - fd) * (T(1) - fh) * (T(1) - fw));
                            put(az.lo[od], ay.lo[oh], ax.hi[ow], (T(1) - fd) * (T(1) - fh) * fw);
                            put(az.lo[od], ay.hi[oh], ax.lo[ow], (T(1) - fd) * fh * (T(1) - fw));
                            put(az.lo[od], ay.hi[oh], ax.hi[ow], (T(1) - fd) * fh * fw);
                            put(az.hi[od], ay.lo[oh], ax.lo[ow], fd * (T(1) - fh) * (T(1) - fw));
                            put(az.hi[od], ay.lo[oh], ax.hi[ow], fd * (T(1) - fh) * fw);
                            put(az.hi[od], ay.hi[oh], ax.lo[ow], fd * fh * (T(1) - fw));
                            put(az.hi[od], ay.hi[oh], ax.hi[ow], fd * fh * fw);
                        }
                    }
                }
            }
        };
    }
    return Var<T>(&node);
}

template <typename T>
Var<T> Tape<T>::instance_norm(Var<T> input, Var<T> gain, Var<T> bias, T eps) {
    const Shape& s = input.value().shape;
    if (s.size() != 5) throw std::invalid_argument("instance_norm: input must be 5-D, got " + shape_str(s));
    const std::int64_t N = s[0], C = s[1], S = s[2] * s[3] * s[4];
    if (gain.value().numel() != C || bias.value().numel() != C)
        throw std::invalid_argument("instance_norm: gain/bias must have " + std::to_string(C) + " channels");
    Tensor<T> out(s);
    std::vector<T> means(static_cast<std::size_t>(N * C)), inv_stds(static_cast<std::size_t>(N * C));
    const T* in = input.value().data.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* src = in + (n * C + c) * S;
            T mu = 0;
            for (std::int64_t i = 0; i < S; ++i) mu += src[i];
            mu /= static_cast<T>(S);
            T var = 0;
            for (std::int64_t i = 0; i < S; ++i) {
                T d = src[i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(S);
            T istd = T(1) / std::sqrt(var + eps);
            means[static_cast<std::size_t>(n * C + c)] = mu;
            inv_stds[static_cast<std::size_t>(n * C + c)] = istd;
            T g = gain.value()[c], b = bias.value()[c];
            T* dst = out.data.data() + (n * C + c) * S;
            for (std::int64_t i = 0; i < S; ++i) dst[i] = g * (src[i] - mu) * istd + b;
        }
    bool req = input.node_->requires_grad || gain.node_->requires_grad || bias.node_->requires_grad;
    Node<T>& node = make(std::move(out), req);
    if (req) {
        Node<T>*pi = input.node_, *pg = gain.node_, *pb = bias.node_;
        node.backward = [pi, pg, pb, N, C, S, means = std::move(means),
                         inv_stds = std::move(inv_stds)](Node<T>& self) {
            const T* up = self.grad.data.data();
            const T* in = pi->value.data.data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* u = up + (n * C + c) * S;
                    const T* x = in + (n * C + c) * S;
                    T mu = means[static_cast<std::size_t>(n * C + c)];
                    T istd = inv_stds[static_cast<std::size_t>(n * C + c)];
                    T g = pg->value[c];
                    T sum_u = 0, sum_ux = 0;
                    for (std::int64_t i = 0; i < S; ++i) {
                        T xh = (x[i] - mu) * istd;
                        sum_u += u[i];
                        sum_ux += u[i] * xh;
                    }
                    if (pb->requires_grad) pb->grad[c] += sum_u;
                    if (pg->requires_grad) pg->grad[c] += sum_ux;
                    if (pi->requires_grad) {
                        T mean_u = sum_u / static_cast<T>(S);
                        T mean_ux = sum_ux / static_cast<T>(S);
                        for (std::int64_t i = 0; i < S; ++i) {
                            T xh = (x[i] - mu) * istd;
                            pi->grad[i + (n * C + c) * S] += g * istd * (u[i] - mean_u - xh * mean_ux);
                        }
                    }
                }
        };
    }
    return Var<T>(&node);
}

template <typename T>
Var<T> Tape<T>::concat_channels(Var<T> a, Var<T> b) {
    const Shape &sa = a.value().shape, &sb = b.value().shape;
    if (sa.size() != 5 || sb.size() != 5)
        throw std::invalid_argument("concat_channels: inputs must be 5-D");
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4])
        throw std::invalid_argument("concat_channels: non-channel extents differ, " + shape_str(sa) +
                                    " vs " + shape_str(sb));
    const std::int64_t N = sa[0], Ca = sa[1], Cb = sb[1], S = sa[2] * sa[3] * sa[4];
    Tensor<T> out({N, Ca + Cb, sa[2], sa[3], sa[4]});
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy_n(a.value().data.data() + n * Ca * S, Ca * S, out.data.data() + n * (Ca + Cb) * S);
        std::copy_n(b.value().data.data() + n * Cb * S, Cb * S, out.data.data() + n * (Ca + Cb) * S + Ca * S);
    }
    bool req = a.node_->requires_grad || b.node_->requires_grad;
    Node<T>& node = make(std::move(out), req);
    if (req) {
        Node<T>*pa = a.node_, *pb = b.node_;
        node.backward = [pa, pb, N, Ca, Cb, S](Node<T>& self) {
            const T* up = self.grad.data.data();
            for (std::int64_t n = 0; n < N; ++n) {
                if (pa->requires_grad)
                    for (std::int64_t i = 0; i < Ca * S; ++i)
                        pa->grad[n * Ca * S + i] += up[n * (Ca + Cb) * S + i];
                if (pb->requires_grad)
                    for (std::int64_t i = 0; i < Cb * S; ++i)
                        pb->grad[n * Cb * S + i] += up[n * (Ca + Cb) * S + Ca * S + i];
            }
        };
    }
    return Var<T>(&node);
}

template <typename T>
Var<T> Tape<T>::reshape(Var<T> a, Shape new_shape) {
    if (shape_numel(new_shape) != a.value().numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.value().shape) + " as " +
                                    shape_str(new_shape));
    Tensor<T> out(new_shape, a.value().data);
    return unary(a, std::move(out), [](const Tensor<T>& up, Tensor<T>& g) {
        for (std::int64_t i = 0; i < up.numel(); ++i) g[i] += up[i];
    });
}

template <typename T>
Var<T> Tape<T>::custom(std::vector<Var<T>> parents, Tensor<T> value,
                       std::function<void(const Tensor<T>&, const std::vector<Node<T>*>&)> backward) {
    bool req = false;
    std::vector<Node<T>*> pnodes;
    pnodes.reserve(parents.size());
    for (auto& p : parents) {
        pnodes.push_back(p.node_);
        req = req || p.node_->requires_grad;
    }
    Node<T>& node = make(std::move(value), req);
    if (req) {
        node.backward = [pnodes = std::move(pnodes), bw = std::move(backward)](Node<T>& self) {
            bw(self.grad, pnodes);
        };
    }
    return Var<T>(&node);
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
    if (!loss || loss.value().numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    if (!loss.node_->requires_grad) return;
    for (auto& n : nodes_)
        if (n.requires_grad) n.grad.fill(T(0));
    loss.node_->grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
        if (it->requires_grad && it->backward) it->backward(*it);
}

template class Tape<float>;
template class Tape<double>;

}  // namespace tada
