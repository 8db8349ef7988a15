#include "tada/toolkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace tada::toolkit {

using tomo::Volume;

namespace {

struct Ellipsoid {
    double intensity;
    double a, b, c;     // semi-axes
    double x0, y0, z0;  // center
    double phi_deg;     // rotation about the z axis
};

// Kak-Slaney geometry with the customary low-contrast ("modified")
// intensities so features remain distinguishable after the [0,1] clamp.
// The ventricle pair and the bottom trio are symmetrized about x = 0
// (semi-axes averaged / centers mirrored) so the volume is an exact mirror
// image of itself about the mid-sagittal plane.
constexpr Ellipsoid kSheppLogan[] = {
    {1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0},
    {-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0},
    {-0.2, 0.135, 0.36, 0.25, 0.22, 0.0, 0.0, -18.0},
    {-0.2, 0.135, 0.36, 0.25, -0.22, 0.0, 0.0, 18.0},
    {0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0},
    {0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0},
    {0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0},
    {0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0},
    {0.1, 0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0},
    {0.1, 0.046, 0.023, 0.05, 0.08, -0.605, 0.0, 0.0},
};

double axis_coord(std::int64_t i, std::int64_t n) {
    // (2i + 1 - n) / n: integer numerator, so flipped indices negate exactly
    return static_cast<double>(2 * i + 1 - n) / static_cast<double>(n);
}

}  // namespace

Volume shepp_logan_3d(std::int64_t size) {
    if (size < 8) throw std::invalid_argument("shepp_logan_3d: size must be >= 8");
    Volume vol(size, size, size);
    for (const auto& e : kSheppLogan) {
        const double cphi = std::cos(e.phi_deg * std::numbers::pi / 180.0);
        const double sphi = std::sin(e.phi_deg * std::numbers::pi / 180.0);
        for (std::int64_t iz = 0; iz < size; ++iz) {
            const double z = axis_coord(iz, size) - e.z0;
            const double zz = (z / e.c) * (z / e.c);
            if (zz > 1.0) continue;
            for (std::int64_t iy = 0; iy < size; ++iy) {
                const double y = axis_coord(iy, size) - e.y0;
                for (std::int64_t ix = 0; ix < size; ++ix) {
                    const double x = axis_coord(ix, size) - e.x0;
                    const double xr = cphi * x + sphi * y;
                    const double yr = -sphi * x + cphi * y;
                    if ((xr / e.a) * (xr / e.a) + (yr / e.b) * (yr / e.b) + zz <= 1.0)
                        vol.at(iz, iy, ix) += static_cast<float>(e.intensity);
                }
            }
        }
    }
    for (auto& v : vol.data) v = std::clamp(v, 0.0f, 1.0f);
    return vol;
}

Volume normalize_volume(const Volume& x) {
    const auto [mn_it, mx_it] = std::minmax_element(x.data.begin(), x.data.end());
    const float mn = *mn_it, mx = *mx_it;
    Volume out(x.nz, x.ny, x.nx);
    if (mx > mn) {
        const float inv = 1.0f / (mx - mn);
        for (std::int64_t i = 0; i < x.numel(); ++i)
            out.data[static_cast<std::size_t>(i)] = (x.data[static_cast<std::size_t>(i)] - mn) * inv;
    }
    return out;
}

Volume resize_trilinear(const Volume& x, std::int64_t nz, std::int64_t ny, std::int64_t nx) {
    if (nz < 1 || ny < 1 || nx < 1)
        throw std::invalid_argument("resize_trilinear: target extents must be >= 1");
    if (nz == x.nz && ny == x.ny && nx == x.nx) return x;
    Volume out(nz, ny, nx);
    auto axis = [](std::int64_t out_ext, std::int64_t in_ext, std::int64_t o) {
        double src = (o + 0.5) * static_cast<double>(in_ext) / static_cast<double>(out_ext) - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_ext - 1));
        const auto lo = static_cast<std::int64_t>(std::floor(src));
        return std::tuple{lo, std::min(lo + 1, in_ext - 1), src - static_cast<double>(lo)};
    };
    for (std::int64_t oz = 0; oz < nz; ++oz) {
        auto [z0, z1, fz] = axis(nz, x.nz, oz);
        for (std::int64_t oy = 0; oy < ny; ++oy) {
            auto [y0, y1, fy] = axis(ny, x.ny, oy);
            for (std::int64_t ox = 0; ox < nx; ++ox) {
                auto [x0, x1, fx] = axis(nx, x.nx, ox);
                const double c00 = x.at(z0, y0, x0) * (1 - fx) + x.at(z0, y0, x1) * fx;
                const double c01 = x.at(z0, y1, x0) * (1 - fx) + x.at(z0, y1, x1) * fx;
                const double c10 = x.at(z1, y0, x0) * (1 - fx) + x.at(z1, y0, x1) * fx;
                const double c11 = x.at(z1, y1, x0) * (1 - fx) + x.at(z1, y1, x1) * fx;
                const double c0 = c00 * (1 - fy) + c01 * fy;
                const double c1 = c10 * (1 - fy) + c11 * fy;
                out.at(oz, oy, ox) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
            }
        }
    }
    return out;
}

double psnr(const Volume& x, const Volume& ref, double data_range) {
    if (x.nz != ref.nz || x.ny != ref.ny || x.nx != ref.nx)
        throw std::invalid_argument("psnr: volume shapes differ");
    if (data_range <= 0.0) throw std::invalid_argument("psnr: data range must be > 0");
    double mse = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x.data[static_cast<std::size_t>(i)]) -
                         ref.data[static_cast<std::size_t>(i)];
        mse += d * d;
    }
    mse /= static_cast<double>(x.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

namespace {

constexpr int kSsimRadius = 5;  // 11x11 window

std::array<double, 2 * kSsimRadius + 1> ssim_window() {
    std::array<double, 2 * kSsimRadius + 1> w{};
    const double sigma = 1.5;
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
        w[static_cast<std::size_t>(i + kSsimRadius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        sum += w[static_cast<std::size_t>(i + kSsimRadius)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Separable valid-mode Gaussian filtering of one slice: (H, W) -> (H-10, W-10).
void gaussian_valid(const std::vector<double>& img, std::int64_t h, std::int64_t w,
                    std::vector<double>& tmp, std::vector<double>& out) {
    static const auto win = ssim_window();
    const std::int64_t ow = w - 2 * kSsimRadius;
    const std::int64_t oh = h - 2 * kSsimRadius;
    tmp.assign(static_cast<std::size_t>(h * ow), 0.0);
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 2 * kSsimRadius + 1; ++k) acc += win[static_cast<std::size_t>(k)] * img[r * w + c + k];
            tmp[static_cast<std::size_t>(r * ow + c)] = acc;
        }
    out.assign(static_cast<std::size_t>(oh * ow), 0.0);
    for (std::int64_t r = 0; r < oh; ++r)
        for (std::int64_t c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 2 * kSsimRadius + 1; ++k) acc += win[static_cast<std::size_t>(k)] * tmp[(r + k) * ow + c];
            out[static_cast<std::size_t>(r * ow + c)] = acc;
        }
}

}  // namespace

double ssim(const Volume& x, const Volume& ref, double data_range) {
    if (x.nz != ref.nz || x.ny != ref.ny || x.nx != ref.nx)
        throw std::invalid_argument("ssim: volume shapes differ");
    if (data_range <= 0.0) throw std::invalid_argument("ssim: data range must be > 0");
    const std::int64_t win = 2 * kSsimRadius + 1;
    if (x.ny < win || x.nx < win)
        throw std::invalid_argument("ssim: slice extents must be >= the 11x11 window");

    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    const std::int64_t h = x.ny, w = x.nx, px = h * w;
    std::vector<double> a(static_cast<std::size_t>(px)), b(static_cast<std::size_t>(px)),
        aa(static_cast<std::size_t>(px)), bb(static_cast<std::size_t>(px)), ab(static_cast<std::size_t>(px));
    std::vector<double> tmp, ua, ub, uaa, ubb, uab;

    double total = 0.0;
    for (std::int64_t z = 0; z < x.nz; ++z) {
        for (std::int64_t i = 0; i < px; ++i) {
            const double va = x.data[static_cast<std::size_t>(z * px + i)];
            const double vb = ref.data[static_cast<std::size_t>(z * px + i)];
            a[static_cast<std::size_t>(i)] = va;
            b[static_cast<std::size_t>(i)] = vb;
            aa[static_cast<std::size_t>(i)] = va * va;
            bb[static_cast<std::size_t>(i)] = vb * vb;
            ab[static_cast<std::size_t>(i)] = va * vb;
        }
        gaussian_valid(a, h, w, tmp, ua);
        gaussian_valid(b, h, w, tmp, ub);
        gaussian_valid(aa, h, w, tmp, uaa);
        gaussian_valid(bb, h, w, tmp, ubb);
        gaussian_valid(ab, h, w, tmp, uab);
        double slice_sum = 0.0;
        for (std::size_t i = 0; i < ua.size(); ++i) {
            const double ma = ua[i], mb = ub[i];
            const double va = uaa[i] - ma * ma;
            const double vb = ubb[i] - mb * mb;
            const double cov = uab[i] - ma * mb;
            slice_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += slice_sum / static_cast<double>(ua.size());
    }
    return total / static_cast<double>(x.nz);
}

MetricReport metrics(const Volume& x, const Volume& ref, double data_range) {
    return {psnr(x, ref, data_range), ssim(x, ref, data_range), data_range};
}

Image2D mip(const Volume& x, MipAxis axis, double threshold) {
    if (threshold < 0.0 || threshold > 1.0)
        throw std::invalid_argument("mip: threshold must lie in [0, 1]");
    auto keep = [&](float v) { return v >= static_cast<float>(threshold) ? v : 0.0f; };
    Image2D img;
    switch (axis) {
        case MipAxis::Z:
            img = Image2D(x.ny, x.nx);
            for (std::int64_t z = 0; z < x.nz; ++z)
                for (std::int64_t y = 0; y < x.ny; ++y)
                    for (std::int64_t i = 0; i < x.nx; ++i)
                        img.at(y, i) = std::max(img.at(y, i), keep(x.at(z, y, i)));
            break;
        case MipAxis::Y:
            img = Image2D(x.nz, x.nx);
            for (std::int64_t z = 0; z < x.nz; ++z)
                for (std::int64_t y = 0; y < x.ny; ++y)
                    for (std::int64_t i = 0; i < x.nx; ++i)
                        img.at(z, i) = std::max(img.at(z, i), keep(x.at(z, y, i)));
            break;
        case MipAxis::X:
            img = Image2D(x.nz, x.ny);
            for (std::int64_t z = 0; z < x.nz; ++z)
                for (std::int64_t y = 0; y < x.ny; ++y)
                    for (std::int64_t i = 0; i < x.nx; ++i)
                        img.at(z, y) = std::max(img.at(z, y), keep(x.at(z, y, i)));
            break;
        default:
            throw std::invalid_argument("mip: invalid axis");
    }
    return img;
}

void atomic_write_file(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
        os.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!os) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

namespace {

void save_raw_f32(const std::string& path, const float* data, std::int64_t count,
                  const Shape& shape, const std::string& description) {
    std::string payload(reinterpret_cast<const char*>(data),
                        static_cast<std::size_t>(count) * sizeof(float));
    atomic_write_file(path, payload);
    nlohmann::json header;
    header["shape"] = shape;
    header["dtype"] = "f32le";
    header["layout"] = "c-order";
    if (!description.empty()) header["description"] = description;
    atomic_write_file(path + ".json", header.dump(2) + "\n");
}

std::pair<Shape, std::vector<float>> load_raw_f32(const std::string& path) {
    std::ifstream hs(path + ".json");
    if (!hs) throw std::runtime_error("cannot open header " + path + ".json");
    nlohmann::json header;
    try {
        hs >> header;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed header " + path + ".json: " + e.what());
    }
    if (!header.contains("shape") || !header["shape"].is_array() || header["shape"].size() != 3)
        throw std::runtime_error("header field 'shape' must be a 3-entry array in " + path + ".json");
    Shape shape = header["shape"].get<Shape>();
    for (auto e : shape)
        if (e < 1) throw std::runtime_error("header field 'shape' has entry < 1 in " + path + ".json");
    if (header.value("dtype", "") != "f32le")
        throw std::runtime_error("header field 'dtype' must be \"f32le\" in " + path + ".json");
    if (header.value("layout", "") != "c-order")
        throw std::runtime_error("header field 'layout' must be \"c-order\" in " + path + ".json");

    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("cannot open payload " + path);
    const auto bytes = static_cast<std::int64_t>(is.tellg());
    const std::int64_t expected = shape_numel(shape) * static_cast<std::int64_t>(sizeof(float));
    if (bytes != expected)
        throw std::runtime_error("payload length mismatch for " + path + ": header shape " +
                                 shape_str(shape) + " requires " + std::to_string(expected) +
                                 " bytes, file has " + std::to_string(bytes));
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    is.seekg(0);
    is.read(reinterpret_cast<char*>(data.data()), expected);
    if (!is) throw std::runtime_error("short read from " + path);
    return {std::move(shape), std::move(data)};
}

}  // namespace

void save_volume(const std::string& path, const Volume& x, const std::string& description) {
    save_raw_f32(path, x.data.data(), x.numel(), {x.nz, x.ny, x.nx}, description);
}

Volume load_volume(const std::string& path) {
    auto [shape, data] = load_raw_f32(path);
    Volume v;
    v.nz = shape[0];
    v.ny = shape[1];
    v.nx = shape[2];
    v.data = std::move(data);
    return v;
}

void save_sinogram(const std::string& path, const tomo::Sinogram& y, const std::string& description) {
    save_raw_f32(path, y.data.data(), y.numel(), {y.num_slices, y.num_views, y.num_det}, description);
}

tomo::Sinogram load_sinogram(const std::string& path) {
    auto [shape, data] = load_raw_f32(path);
    tomo::Sinogram y;
    y.num_slices = shape[0];
    y.num_views = shape[1];
    y.num_det = shape[2];
    y.data = std::move(data);
    return y;
}

void save_pgm(const std::string& path, const Image2D& img, double max_value) {
    if (max_value <= 0.0) throw std::invalid_argument("save_pgm: max_value must be > 0");
    std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) {
        const double scaled = std::clamp(static_cast<double>(v) / max_value, 0.0, 1.0) * 255.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
    }
    atomic_write_file(path, out);
}

}  // namespace tada::toolkit
