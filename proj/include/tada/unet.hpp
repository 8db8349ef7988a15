#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tada/autodiff.hpp"
#include "tada/tensor.hpp"

namespace tada::unet {

struct UNetConfig {
    int depth = 3;
    int base_channels = 8;
    int channel_growth = 2;
    bool skip = true;
    double leaky_slope = 0.1;
    bool zero_init_final = false;  // test hook: forces output == sigmoid(0)

    void validate() const;
    std::int64_t spatial_divisor() const { return std::int64_t(1) << depth; }
};

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

/// 3-D U-Net with one input and one output channel and a final sigmoid.
/// Two conv(3^3)+norm+activation blocks per level, stride-2 conv
/// downsampling, trilinear-upsample+conv upsampling, concatenation skips.
template <typename T>
class UNet {
public:
    static UNet build(const UNetConfig& cfg, std::uint64_t seed);

    /// Input must be (1, 1, D, H, W) with every spatial extent divisible by
    /// 2^depth. Output has the input's shape, values in (0, 1).
    Var<T> forward(Tape<T>& tape, Var<T> input);

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }
    std::int64_t parameter_count() const;

    /// Plain-text layer listing with shapes and per-layer parameter counts.
    std::string architecture_table() const;

    void zero_grad();
    const UNetConfig& config() const { return cfg_; }

private:
    struct Conv {
        int weight = -1, bias = -1;  // indices into params_
        int stride = 1, pad = 1;
    };
    struct Block {  // conv + instance norm + leaky relu
        Conv conv;
        int norm_gain = -1, norm_bias = -1;
    };
    struct Level {
        Block pre1, pre2;
        Block down;         // encoder only
        Block up;           // decoder only (conv after upsample)
        Block post1, post2; // decoder blocks
    };

    Var<T> apply_block(Tape<T>& tape, Var<T> x, const Block& blk);
    Var<T> apply_conv(Tape<T>& tape, Var<T> x, const Conv& conv);

    UNetConfig cfg_;
    std::vector<Param<T>> params_;
    std::vector<Level> levels_;
    Block bottleneck1_, bottleneck2_;
    Conv final_;
};

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace tada::unet
