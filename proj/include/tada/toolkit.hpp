#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "tada/tomo.hpp"

namespace tada::toolkit {

struct VolumeHeader {
    std::int64_t nz = 0, ny = 0, nx = 0;
    std::string dtype = "f32le";
    std::string layout = "c-order";
    std::string description;
};

struct MetricReport {
    double psnr = 0.0;  // dB; +infinity when the inputs are identical
    double ssim = 0.0;
    double data_range = 1.0;
};

struct Image2D {
    std::int64_t height = 0, width = 0;
    std::vector<float> data;

    Image2D() = default;
    Image2D(std::int64_t h, std::int64_t w)
        : height(h), width(w), data(static_cast<std::size_t>(h * w), 0.0f) {}
    float& at(std::int64_t r, std::int64_t c) { return data[r * width + c]; }
    float at(std::int64_t r, std::int64_t c) const { return data[r * width + c]; }
};

enum class MipAxis { X, Y, Z };

/// Ten-ellipsoid 3-D Shepp-Logan head phantom on a size^3 grid, intensities
/// clamped to [0, 1]. The bottom ellipsoid trio is placed mirror-symmetrically
/// so the volume is exactly symmetric about the mid-sagittal plane.
tomo::Volume shepp_logan_3d(std::int64_t size);

/// Min-max rescale to [0, 1]; a constant volume maps to all zeros.
tomo::Volume normalize_volume(const tomo::Volume& x);

/// Trilinear resampling with half-pixel centers to an arbitrary new shape.
tomo::Volume resize_trilinear(const tomo::Volume& x, std::int64_t nz, std::int64_t ny, std::int64_t nx);

double psnr(const tomo::Volume& x, const tomo::Volume& ref, double data_range = 1.0);

/// Mean local SSIM, computed per axial slice with an 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03) and averaged over slices.
double ssim(const tomo::Volume& x, const tomo::Volume& ref, double data_range = 1.0);

MetricReport metrics(const tomo::Volume& x, const tomo::Volume& ref, double data_range = 1.0);

/// Values below threshold are zeroed, then the maximum is taken along axis.
Image2D mip(const tomo::Volume& x, MipAxis axis, double threshold = 0.45);

/// Raw little-endian float32 payload in C order plus a JSON sidecar at
/// path + ".json" holding the header. Writes are whole-file atomic.
void save_volume(const std::string& path, const tomo::Volume& x, const std::string& description = "");
tomo::Volume load_volume(const std::string& path);

void save_sinogram(const std::string& path, const tomo::Sinogram& y, const std::string& description = "");
tomo::Sinogram load_sinogram(const std::string& path);

/// 8-bit binary PGM; values are clamped to [0, max_value] then scaled.
void save_pgm(const std::string& path, const Image2D& img, double max_value = 1.0);

void atomic_write_file(const std::string& path, const std::string& content);

}  // namespace tada::toolkit
