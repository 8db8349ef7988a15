// tadarecon: sparse-view CT reconstruction experiments from the command line.
//
// Subcommands: phantom, project, fbp, tv, dip, tada, metrics, mip, compare.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "tada/classical.hpp"
#include "tada/engine.hpp"
#include "tada/tomo.hpp"
#include "tada/toolkit.hpp"

namespace {

using namespace tada;

std::string format_metric(double v) {
    if (std::isinf(v)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

tomo::Geometry geometry_for(int views, int det, const tomo::Volume& vol) {
    if (det <= 0) det = tomo::Geometry::covering_det_count(static_cast<int>(vol.ny), static_cast<int>(vol.nx));
    return tomo::Geometry::uniform(views, det, static_cast<int>(vol.nz));
}

std::string asd_pocs_trace_csv(const std::vector<classical::AsdPocsTraceRow>& trace) {
    std::ostringstream os;
    os.precision(10);
    os << "iteration,data_residual,tv_value\n";
    for (const auto& r : trace) os << r.iteration << ',' << r.data_residual << ',' << r.tv_value << '\n';
    return os.str();
}

struct DipFlags {
    engine::TadaConfig cfg;
    std::string sino_path, out_path, trace_path, ground_truth_path;

    void add_common(CLI::App* cmd) {
        cmd->add_option("sinogram", sino_path, "input sinogram file")->required();
        cmd->add_option("output", out_path, "output volume file")->required();
        cmd->add_option("--iterations", cfg.iterations, "optimization iterations");
        cmd->add_option("--lr", cfg.learning_rate, "Adam learning rate");
        cmd->add_option("--lr-decay", cfg.lr_decay, "per-iteration learning-rate decay factor");
        cmd->add_option("--p", cfg.p, "data-fidelity norm exponent (1 or 2)");
        cmd->add_option("--ema-decay", cfg.ema_decay, "output EMA decay");
        cmd->add_option("--seed", cfg.seed, "random seed");
        cmd->add_option("--eval-every", cfg.eval_every, "trace cadence in iterations");
        cmd->add_option("--depth", cfg.net.depth, "U-Net depth");
        cmd->add_option("--base-channels", cfg.net.base_channels, "U-Net channels at the first level");
        cmd->add_option("--channel-growth", cfg.net.channel_growth, "channel multiplier per level");
        cmd->add_flag("!--no-skip", cfg.net.skip, "disable skip connections");
        cmd->add_option("--trace", trace_path, "write the run trace CSV here");
        cmd->add_option("--ground-truth", ground_truth_path, "volume for PSNR/SSIM in the trace");
    }
};

int run_dip_command(const DipFlags& flags, bool tada_variant) {
    tomo::Sinogram y = toolkit::load_sinogram(flags.sino_path);
    tomo::Geometry g = tomo::Geometry::uniform(static_cast<int>(y.num_views),
                                               static_cast<int>(y.num_det),
                                               static_cast<int>(y.num_slices));
    tomo::Volume gt;
    const tomo::Volume* gt_ptr = nullptr;
    std::int64_t ny, nx;
    if (!flags.ground_truth_path.empty()) {
        gt = toolkit::load_volume(flags.ground_truth_path);
        gt_ptr = &gt;
        ny = gt.ny;
        nx = gt.nx;
    } else {
        // square reconstruction grid sized to the detector coverage
        ny = nx = static_cast<std::int64_t>(std::floor(y.num_det / std::sqrt(2.0)));
        ny = nx = ny - (ny % (std::int64_t(1) << flags.cfg.net.depth));
    }
    engine::RunResult result =
        tada_variant ? engine::run_tada_dip(y, g, ny, nx, flags.cfg, gt_ptr)
                     : engine::run_vanilla_dip(y, g, ny, nx, flags.cfg, gt_ptr);
    toolkit::save_volume(flags.out_path, result.volume,
                         tada_variant ? "tada-dip reconstruction" : "vanilla dip reconstruction");
    if (!flags.trace_path.empty()) engine::write_trace_csv(flags.trace_path, result.trace);
    const auto& last = result.trace.back();
    std::cout << "iterations=" << last.iteration << " loss=" << last.loss;
    if (gt_ptr)
        std::cout << " psnr=" << format_metric(last.psnr_ema) << " ssim=" << format_metric(last.ssim_ema);
    std::cout << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training-data-free 3D CT reconstruction toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read options from a TOML config file");

    // phantom
    auto* phantom_cmd = app.add_subcommand("phantom", "generate a 3D Shepp-Logan phantom volume");
    std::string phantom_out;
    std::int64_t phantom_size = 64;
    phantom_cmd->add_option("output", phantom_out, "output volume file")->required();
    phantom_cmd->add_option("--size", phantom_size, "cubic grid size");

    // project
    auto* project_cmd = app.add_subcommand("project", "forward-project a volume to a sinogram");
    std::string project_in, project_out;
    int project_views = 30, project_det = 0;
    double project_noise = 0.0;
    std::uint64_t project_seed = 0;
    project_cmd->add_option("volume", project_in, "input volume file")->required();
    project_cmd->add_option("output", project_out, "output sinogram file")->required();
    project_cmd->add_option("--views", project_views, "number of uniform views in [0, pi)");
    project_cmd->add_option("--det", project_det, "detector bins (default: cover the diagonal)");
    project_cmd->add_option("--noise-sigma", project_noise, "additive Gaussian noise level");
    project_cmd->add_option("--seed", project_seed, "noise seed");

    // fbp
    auto* fbp_cmd = app.add_subcommand("fbp", "filtered backprojection reconstruction");
    std::string fbp_in, fbp_out, fbp_filter = "ramlak";
    std::int64_t fbp_size = 0;
    fbp_cmd->add_option("sinogram", fbp_in, "input sinogram file")->required();
    fbp_cmd->add_option("output", fbp_out, "output volume file")->required();
    fbp_cmd->add_option("--size", fbp_size, "slice size (default: num_det / sqrt(2))");
    fbp_cmd->add_option("--filter", fbp_filter, "ramlak or hann")
        ->check(CLI::IsMember({"ramlak", "hann"}));

    // tv (ASD-POCS)
    auto* tv_cmd = app.add_subcommand("tv", "ASD-POCS total-variation reconstruction");
    std::string tv_in, tv_out, tv_trace;
    std::int64_t tv_size = 0;
    classical::AsdPocsConfig tv_cfg;
    tv_cmd->add_option("sinogram", tv_in, "input sinogram file")->required();
    tv_cmd->add_option("output", tv_out, "output volume file")->required();
    tv_cmd->add_option("--size", tv_size, "slice size (default: num_det / sqrt(2))");
    tv_cmd->add_option("--iterations", tv_cfg.iterations, "ASD-POCS iterations");
    tv_cmd->add_option("--subsets", tv_cfg.num_subsets, "angularly interleaved view subsets");
    tv_cmd->add_option("--tv-steps", tv_cfg.tv_steps_per_iter, "TV descent steps per iteration");
    tv_cmd->add_option("--relaxation", tv_cfg.relaxation, "data-update relaxation in (0, 2)");
    tv_cmd->add_option("--relaxation-decay", tv_cfg.relaxation_decay, "relaxation decay per iteration");
    tv_cmd->add_option("--tv-fraction", tv_cfg.tv_step_fraction, "TV step size as a fraction of the data update");
    tv_cmd->add_flag("!--no-nonneg", tv_cfg.nonnegativity, "disable the nonnegativity clamp");
    tv_cmd->add_option("--trace", tv_trace, "write the residual trace CSV here");

    // dip / tada
    DipFlags dip_flags;
    auto* dip_cmd = app.add_subcommand("dip", "Vanilla DIP reconstruction");
    dip_flags.add_common(dip_cmd);

    DipFlags tada_flags;
    auto* tada_cmd = app.add_subcommand("tada", "input-adaptive DIP reconstruction");
    tada_flags.add_common(tada_cmd);
    tada_cmd->add_option("--alpha", tada_flags.cfg.alpha, "input-noise fraction");
    tada_cmd->add_option("--beta", tada_flags.cfg.beta, "denoising regularization weight");
    tada_cmd->add_option("--gamma", tada_flags.cfg.gamma, "input-blend rate");

    // metrics
    auto* metrics_cmd = app.add_subcommand("metrics", "PSNR/SSIM between two volumes");
    std::string metrics_a, metrics_b;
    double metrics_range = 1.0;
    metrics_cmd->add_option("volume", metrics_a, "volume under test")->required();
    metrics_cmd->add_option("reference", metrics_b, "reference volume")->required();
    metrics_cmd->add_option("--range", metrics_range, "data range used by both metrics");

    // mip
    auto* mip_cmd = app.add_subcommand("mip", "maximum intensity projection to a PGM image");
    std::string mip_in, mip_out, mip_axis = "z";
    double mip_threshold = 0.45;
    mip_cmd->add_option("volume", mip_in, "input volume file")->required();
    mip_cmd->add_option("output", mip_out, "output PGM file")->required();
    mip_cmd->add_option("--axis", mip_axis, "projection axis")->check(CLI::IsMember({"x", "y", "z"}));
    mip_cmd->add_option("--threshold", mip_threshold, "values below this are zeroed");

    // compare
    auto* compare_cmd = app.add_subcommand("compare", "run all methods on one phantom setup");
    std::int64_t compare_size = 48;
    int compare_views = 30;
    double compare_noise = 0.0;
    std::uint64_t compare_seed = 0;
    int compare_dip_iters = 2000;
    int compare_tv_iters = 100;
    std::string compare_out;
    compare_cmd->add_option("--size", compare_size, "phantom size");
    compare_cmd->add_option("--views", compare_views, "number of views");
    compare_cmd->add_option("--noise-sigma", compare_noise, "measurement noise level");
    compare_cmd->add_option("--seed", compare_seed, "seed for synthesis and DIP runs");
    compare_cmd->add_option("--dip-iterations", compare_dip_iters, "iterations for both DIP variants");
    compare_cmd->add_option("--tv-iterations", compare_tv_iters, "ASD-POCS iterations");
    compare_cmd->add_option("--summary", compare_out, "write the summary CSV here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*phantom_cmd) {
            toolkit::save_volume(phantom_out, toolkit::shepp_logan_3d(phantom_size), "shepp-logan phantom");
            return 0;
        }
        if (*project_cmd) {
            tomo::Volume vol = toolkit::load_volume(project_in);
            tomo::Geometry g = geometry_for(project_views, project_det, vol);
            toolkit::save_sinogram(project_out,
                                   tomo::synthesize_measurements(vol, g, project_noise, project_seed),
                                   "parallel-beam sinogram");
            return 0;
        }
        auto slice_size = [](const tomo::Sinogram& y, std::int64_t requested) {
            if (requested > 0) return requested;
            return static_cast<std::int64_t>(std::floor(y.num_det / std::sqrt(2.0)));
        };
        if (*fbp_cmd) {
            tomo::Sinogram y = toolkit::load_sinogram(fbp_in);
            tomo::Geometry g = tomo::Geometry::uniform(static_cast<int>(y.num_views),
                                                       static_cast<int>(y.num_det),
                                                       static_cast<int>(y.num_slices));
            const std::int64_t n = slice_size(y, fbp_size);
            const auto filter = fbp_filter == "hann" ? tomo::FbpFilter::Hann : tomo::FbpFilter::RamLak;
            toolkit::save_volume(fbp_out, tomo::fbp(y, g, n, n, filter), "fbp reconstruction");
            return 0;
        }
        if (*tv_cmd) {
            tomo::Sinogram y = toolkit::load_sinogram(tv_in);
            tomo::Geometry g = tomo::Geometry::uniform(static_cast<int>(y.num_views),
                                                       static_cast<int>(y.num_det),
                                                       static_cast<int>(y.num_slices));
            const std::int64_t n = slice_size(y, tv_size);
            classical::AsdPocsResult result = classical::asd_pocs(y, g, n, n, tv_cfg);
            toolkit::save_volume(tv_out, result.volume, "asd-pocs reconstruction");
            if (!tv_trace.empty()) toolkit::atomic_write_file(tv_trace, asd_pocs_trace_csv(result.trace));
            return 0;
        }
        if (*dip_cmd) return run_dip_command(dip_flags, false);
        if (*tada_cmd) return run_dip_command(tada_flags, true);
        if (*metrics_cmd) {
            tomo::Volume a = toolkit::load_volume(metrics_a);
            tomo::Volume b = toolkit::load_volume(metrics_b);
            toolkit::MetricReport report = toolkit::metrics(a, b, metrics_range);
            std::cout << "psnr=" << format_metric(report.psnr) << " ssim=" << format_metric(report.ssim)
                      << "\n";
            return 0;
        }
        if (*mip_cmd) {
            tomo::Volume vol = toolkit::load_volume(mip_in);
            const auto axis = mip_axis == "x"   ? toolkit::MipAxis::X
                              : mip_axis == "y" ? toolkit::MipAxis::Y
                                                : toolkit::MipAxis::Z;
            toolkit::save_pgm(mip_out, toolkit::mip(vol, axis, mip_threshold));
            return 0;
        }
        if (*compare_cmd) {
            tomo::Volume gt = toolkit::shepp_logan_3d(compare_size);
            tomo::Geometry g = geometry_for(compare_views, 0, gt);
            tomo::Sinogram y = tomo::synthesize_measurements(gt, g, compare_noise, compare_seed);

            std::ostringstream summary;
            summary << "method,psnr,ssim\n";
            auto report = [&](const std::string& name, const tomo::Volume& rec) {
                toolkit::MetricReport m = toolkit::metrics(rec, gt);
                summary << name << ',' << format_metric(m.psnr) << ',' << format_metric(m.ssim) << '\n';
                std::cout << name << ": psnr=" << format_metric(m.psnr)
                          << " ssim=" << format_metric(m.ssim) << "\n";
            };

            report("fbp", tomo::fbp(y, g, gt.ny, gt.nx));
            classical::AsdPocsConfig tv;
            tv.iterations = compare_tv_iters;
            tv.num_subsets = std::min(30, compare_views);
            report("tv", classical::asd_pocs(y, g, gt.ny, gt.nx, tv).volume);
            engine::TadaConfig cfg;
            cfg.iterations = compare_dip_iters;
            cfg.seed = compare_seed;
            report("vanilla_dip", engine::run_vanilla_dip(y, g, gt.ny, gt.nx, cfg, &gt).volume);
            report("tada_dip", engine::run_tada_dip(y, g, gt.ny, gt.nx, cfg, &gt).volume);
            if (!compare_out.empty()) toolkit::atomic_write_file(compare_out, summary.str());
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
