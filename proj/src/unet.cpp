#include "tada/unet.hpp"

#include <cmath>
#include <sstream>

#include "tada/random.hpp"

namespace tada::unet {

void UNetConfig::validate() const {
    if (depth < 1) throw std::invalid_argument("unet config: depth must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("unet config: base_channels must be >= 1");
    if (channel_growth < 1) throw std::invalid_argument("unet config: channel_growth must be >= 1");
    if (leaky_slope < 0.0) throw std::invalid_argument("unet config: leaky_slope must be >= 0");
}

namespace {

template <typename T>
int add_conv_params(std::vector<Param<T>>& params, const std::string& name, std::int64_t out_ch,
                    std::int64_t in_ch, std::int64_t k, Rng& rng, bool zero_init) {
    Param<T> w;
    w.name = name + ".weight";
    w.value = Tensor<T>({out_ch, in_ch, k, k, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k * k));
    if (!zero_init) fill_uniform(w.value, rng, -bound, bound);
    w.grad = Tensor<T>(w.value.shape);

    Param<T> b;
    b.name = name + ".bias";
    b.value = Tensor<T>({out_ch});
    if (!zero_init) fill_uniform(b.value, rng, -bound, bound);
    b.grad = Tensor<T>(b.value.shape);

    params.push_back(std::move(w));
    params.push_back(std::move(b));
    return static_cast<int>(params.size()) - 2;
}

template <typename T>
int add_norm_params(std::vector<Param<T>>& params, const std::string& name, std::int64_t ch) {
    Param<T> g;
    g.name = name + ".gain";
    g.value = Tensor<T>::full({ch}, T(1));
    g.grad = Tensor<T>(g.value.shape);
    Param<T> b;
    b.name = name + ".bias";
    b.value = Tensor<T>({ch});
    b.grad = Tensor<T>(b.value.shape);
    params.push_back(std::move(g));
    params.push_back(std::move(b));
    return static_cast<int>(params.size()) - 2;
}

}  // namespace

template <typename T>
UNet<T> UNet<T>::build(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    UNet<T> net;
    net.cfg_ = cfg;
    Rng rng(seed);

    auto channels = [&](int level) {
        std::int64_t c = cfg.base_channels;
        for (int i = 0; i < level; ++i) c *= cfg.channel_growth;
        return c;
    };

    auto make_block = [&](const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
                          int stride) {
        Block blk;
        blk.conv.weight = add_conv_params(net.params_, name, out_ch, in_ch, 3, rng, false);
        blk.conv.bias = blk.conv.weight + 1;
        blk.conv.stride = stride;
        blk.conv.pad = 1;
        blk.norm_gain = add_norm_params(net.params_, name + ".norm", out_ch);
        blk.norm_bias = blk.norm_gain + 1;
        return blk;
    };

    net.levels_.resize(static_cast<std::size_t>(cfg.depth));
    for (int lvl = 0; lvl < cfg.depth; ++lvl) {
        auto& L = net.levels_[static_cast<std::size_t>(lvl)];
        const std::int64_t c = channels(lvl);
        const std::int64_t c_in = lvl == 0 ? 1 : channels(lvl);
        const std::string tag = "enc" + std::to_string(lvl);
        L.pre1 = make_block(tag + ".block1", c_in, c, 1);
        L.pre2 = make_block(tag + ".block2", c, c, 1);
        L.down = make_block(tag + ".down", c, channels(lvl + 1), 2);
    }
    {
        const std::int64_t cb = channels(cfg.depth);
        net.bottleneck1_ = make_block("bottleneck.block1", cb, cb, 1);
        net.bottleneck2_ = make_block("bottleneck.block2", cb, cb, 1);
    }
    for (int lvl = cfg.depth - 1; lvl >= 0; --lvl) {
        auto& L = net.levels_[static_cast<std::size_t>(lvl)];
        const std::int64_t c = channels(lvl);
        const std::string tag = "dec" + std::to_string(lvl);
        L.up = make_block(tag + ".up", channels(lvl + 1), c, 1);
        const std::int64_t c_cat = cfg.skip ? 2 * c : c;
        L.post1 = make_block(tag + ".block1", c_cat, c, 1);
        L.post2 = make_block(tag + ".block2", c, c, 1);
    }
    net.final_.weight = add_conv_params(net.params_, "final", 1, channels(0), 1, rng, cfg.zero_init_final);
    net.final_.bias = net.final_.weight + 1;
    net.final_.stride = 1;
    net.final_.pad = 0;
    return net;
}

template <typename T>
Var<T> UNet<T>::apply_conv(Tape<T>& tape, Var<T> x, const Conv& conv) {
    Var<T> w = tape.leaf(params_[static_cast<std::size_t>(conv.weight)].value,
                         &params_[static_cast<std::size_t>(conv.weight)].grad);
    Var<T> b = tape.leaf(params_[static_cast<std::size_t>(conv.bias)].value,
                         &params_[static_cast<std::size_t>(conv.bias)].grad);
    return tape.conv3d(x, w, b, conv.stride, conv.pad);
}

template <typename T>
Var<T> UNet<T>::apply_block(Tape<T>& tape, Var<T> x, const Block& blk) {
    x = apply_conv(tape, x, blk.conv);
    Var<T> g = tape.leaf(params_[static_cast<std::size_t>(blk.norm_gain)].value,
                         &params_[static_cast<std::size_t>(blk.norm_gain)].grad);
    Var<T> b = tape.leaf(params_[static_cast<std::size_t>(blk.norm_bias)].value,
                         &params_[static_cast<std::size_t>(blk.norm_bias)].grad);
    x = tape.instance_norm(x, g, b);
    return tape.leaky_relu(x, static_cast<T>(cfg_.leaky_slope));
}

template <typename T>
Var<T> UNet<T>::forward(Tape<T>& tape, Var<T> input) {
    const Shape& s = input.value().shape;
    if (s.size() != 5 || s[0] != 1 || s[1] != 1)
        throw std::invalid_argument("unet: input must have shape (1,1,D,H,W), got " + shape_str(s));
    const std::int64_t div = cfg_.spatial_divisor();
    for (int i = 2; i < 5; ++i)
        if (s[static_cast<std::size_t>(i)] % div != 0)
            throw std::invalid_argument("unet: spatial extent " +
                                        std::to_string(s[static_cast<std::size_t>(i)]) +
                                        " is not divisible by 2^depth = " + std::to_string(div));

    Var<T> x = input;
    std::vector<Var<T>> skips;
    skips.reserve(levels_.size());
    for (auto& L : levels_) {
        x = apply_block(tape, x, L.pre1);
        x = apply_block(tape, x, L.pre2);
        skips.push_back(x);
        x = apply_block(tape, x, L.down);
    }
    x = apply_block(tape, x, bottleneck1_);
    x = apply_block(tape, x, bottleneck2_);
    for (auto lvl = static_cast<int>(levels_.size()) - 1; lvl >= 0; --lvl) {
        auto& L = levels_[static_cast<std::size_t>(lvl)];
        x = tape.upsample_trilinear(x, 2);
        x = apply_block(tape, x, L.up);
        if (cfg_.skip) x = tape.concat_channels(skips[static_cast<std::size_t>(lvl)], x);
        x = apply_block(tape, x, L.post1);
        x = apply_block(tape, x, L.post2);
    }
    x = apply_conv(tape, x, final_);
    return tape.sigmoid(x);
}

template <typename T>
std::int64_t UNet<T>::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

template <typename T>
std::string UNet<T>::architecture_table() const {
    std::ostringstream os;
    os << "layer\tshape\tparams\n";
    for (const auto& p : params_) os << p.name << '\t' << shape_str(p.value.shape) << '\t' << p.value.numel() << '\n';
    os << "total\t\t" << parameter_count() << '\n';
    return os.str();
}

template <typename T>
void UNet<T>::zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
}

template class UNet<float>;
template class UNet<double>;

}  // namespace tada::unet
