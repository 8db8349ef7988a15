#include "tada/classical.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tada::classical {

using tomo::Geometry;
using tomo::Sinogram;
using tomo::Volume;

void AsdPocsConfig::validate() const {
    if (iterations < 1) throw std::invalid_argument("asd-pocs config: iterations must be >= 1");
    if (num_subsets < 1) throw std::invalid_argument("asd-pocs config: num_subsets must be >= 1");
    if (tv_steps_per_iter < 0) throw std::invalid_argument("asd-pocs config: tv_steps_per_iter must be >= 0");
    if (relaxation <= 0.0 || relaxation >= 2.0)
        throw std::invalid_argument("asd-pocs config: relaxation must lie in (0, 2)");
    if (relaxation_decay <= 0.0 || relaxation_decay > 1.0)
        throw std::invalid_argument("asd-pocs config: relaxation_decay must lie in (0, 1]");
    if (tv_step_fraction <= 0.0) throw std::invalid_argument("asd-pocs config: tv_step_fraction must be > 0");
}

double total_variation(const Volume& x, double eps) {
    double tv = 0.0;
    for (std::int64_t z = 0; z < x.nz; ++z)
        for (std::int64_t y = 0; y < x.ny; ++y)
            for (std::int64_t i = 0; i < x.nx; ++i) {
                const double v = x.at(z, y, i);
                const double dz = z + 1 < x.nz ? x.at(z + 1, y, i) - v : 0.0;
                const double dy = y + 1 < x.ny ? x.at(z, y + 1, i) - v : 0.0;
                const double dx = i + 1 < x.nx ? x.at(z, y, i + 1) - v : 0.0;
                tv += std::sqrt(dz * dz + dy * dy + dx * dx + eps * eps);
            }
    return tv;
}

Volume tv_gradient(const Volume& x, double eps) {
    Volume g(x.nz, x.ny, x.nx);
    for (std::int64_t z = 0; z < x.nz; ++z)
        for (std::int64_t y = 0; y < x.ny; ++y)
            for (std::int64_t i = 0; i < x.nx; ++i) {
                const double v = x.at(z, y, i);
                const double dz = z + 1 < x.nz ? x.at(z + 1, y, i) - v : 0.0;
                const double dy = y + 1 < x.ny ? x.at(z, y + 1, i) - v : 0.0;
                const double dx = i + 1 < x.nx ? x.at(z, y, i + 1) - v : 0.0;
                const double d = std::sqrt(dz * dz + dy * dy + dx * dx + eps * eps);
                g.at(z, y, i) += static_cast<float>(-(dz + dy + dx) / d);
                if (z + 1 < x.nz) g.at(z + 1, y, i) += static_cast<float>(dz / d);
                if (y + 1 < x.ny) g.at(z, y + 1, i) += static_cast<float>(dy / d);
                if (i + 1 < x.nx) g.at(z, y, i + 1) += static_cast<float>(dx / d);
            }
    return g;
}

Volume tv_descent_step(const Volume& x, double step, double eps) {
    if (step < 0.0) throw std::invalid_argument("tv_descent_step: step must be >= 0");
    Volume g = tv_gradient(x, eps);
    double norm_sq = 0.0;
    for (float v : g.data) norm_sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(norm_sq);
    if (norm == 0.0 || step == 0.0) return x;
    Volume out = x;
    const double s = step / norm;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.data[static_cast<std::size_t>(i)] -= static_cast<float>(s * g.data[static_cast<std::size_t>(i)]);
    return out;
}

namespace {

constexpr double kWeightFloor = 1e-6;

struct SubsetPlan {
    std::vector<Geometry> geoms;
    std::vector<std::vector<int>> views;  // original view indices per subset
    std::vector<Sinogram> ray_weight;     // A_s applied to a ones volume
    std::vector<Volume> pixel_weight;     // A_s^T applied to a ones sinogram
};

SubsetPlan make_plan(const Geometry& g, std::int64_t ny, std::int64_t nx, int num_subsets) {
    if (num_subsets > g.num_views)
        throw std::invalid_argument("asd-pocs: num_subsets exceeds the number of views");
    SubsetPlan plan;
    Volume ones(g.num_slices, ny, nx);
    std::fill(ones.data.begin(), ones.data.end(), 1.0f);
    for (int s = 0; s < num_subsets; ++s) {
        Geometry gs = g;
        gs.angles.clear();
        std::vector<int> idx;
        for (int v = s; v < g.num_views; v += num_subsets) {
            gs.angles.push_back(g.angles[static_cast<std::size_t>(v)]);
            idx.push_back(v);
        }
        gs.num_views = static_cast<int>(gs.angles.size());
        plan.geoms.push_back(gs);
        plan.views.push_back(std::move(idx));

        plan.ray_weight.push_back(tomo::forward_project(ones, gs));
        Sinogram ones_sino(gs.num_slices, gs.num_views, gs.num_det);
        std::fill(ones_sino.data.begin(), ones_sino.data.end(), 1.0f);
        plan.pixel_weight.push_back(tomo::back_project(ones_sino, gs, ny, nx));
    }
    return plan;
}

void sart_pass_with_plan(Volume& x, const Sinogram& y, const SubsetPlan& plan, double relaxation) {
    for (std::size_t s = 0; s < plan.geoms.size(); ++s) {
        const Geometry& gs = plan.geoms[s];
        Sinogram residual = tomo::forward_project(x, gs);
        for (std::int64_t z = 0; z < gs.num_slices; ++z)
            for (int v = 0; v < gs.num_views; ++v) {
                const int vo = plan.views[s][static_cast<std::size_t>(v)];
                for (int d = 0; d < gs.num_det; ++d) {
                    const float w = plan.ray_weight[s].at(z, v, d);
                    residual.at(z, v, d) =
                        w > kWeightFloor ? (y.at(z, vo, d) - residual.at(z, v, d)) / w : 0.0f;
                }
            }
        Volume update = tomo::back_project(residual, gs, x.ny, x.nx);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const float w = plan.pixel_weight[s].data[static_cast<std::size_t>(i)];
            if (w > kWeightFloor)
                x.data[static_cast<std::size_t>(i)] +=
                    static_cast<float>(relaxation) * update.data[static_cast<std::size_t>(i)] / w;
        }
    }
}

}  // namespace

void sart_pass(Volume& x, const Sinogram& y, const Geometry& g, int num_subsets, double relaxation) {
    SubsetPlan plan = make_plan(g, x.ny, x.nx, num_subsets);
    sart_pass_with_plan(x, y, plan, relaxation);
}

AsdPocsResult asd_pocs(const Sinogram& y, const Geometry& g, std::int64_t ny, std::int64_t nx,
                       const AsdPocsConfig& cfg) {
    cfg.validate();
    g.validate_for_slice(static_cast<int>(ny), static_cast<int>(nx));
    if (y.num_slices != g.num_slices || y.num_views != g.num_views || y.num_det != g.num_det)
        throw std::invalid_argument("asd-pocs: sinogram shape does not match geometry");

    SubsetPlan plan = make_plan(g, ny, nx, cfg.num_subsets);
    AsdPocsResult result;
    result.volume = Volume(g.num_slices, ny, nx);
    Volume& x = result.volume;
    double relaxation = cfg.relaxation;

    auto residual_norm = [&](const Volume& vol) {
        const Sinogram ax = tomo::forward_project(vol, g);
        double res_sq = 0.0;
        for (std::int64_t i = 0; i < ax.numel(); ++i) {
            const double d = static_cast<double>(ax.data[static_cast<std::size_t>(i)]) -
                             y.data[static_cast<std::size_t>(i)];
            res_sq += d * d;
        }
        return std::sqrt(res_sq);
    };

    for (int k = 0; k < cfg.iterations; ++k) {
        const Volume x_prev = x;
        sart_pass_with_plan(x, y, plan, relaxation);
        if (cfg.nonnegativity)
            for (auto& v : x.data) v = std::max(v, 0.0f);
        const double residual_post_update = residual_norm(x);

        double dd_sq = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double d = static_cast<double>(x.data[static_cast<std::size_t>(i)]) -
                             x_prev.data[static_cast<std::size_t>(i)];
            dd_sq += d * d;
        }
        const double tv_step = cfg.tv_step_fraction * std::sqrt(dd_sq);
        for (int t = 0; t < cfg.tv_steps_per_iter; ++t) x = tv_descent_step(x, tv_step);

        relaxation *= cfg.relaxation_decay;
        result.trace.push_back({k, residual_norm(x), total_variation(x), residual_post_update});
    }
    return result;
}

}  // namespace tada::classical
