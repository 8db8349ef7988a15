#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tada/engine.hpp"
#include "tada/random.hpp"
#include "tada/tomo.hpp"
#include "tada/toolkit.hpp"

using namespace tada;
using namespace tada::engine;

namespace {

unet::Param<float> scalar_param(const std::string& name, float value, float grad) {
    unet::Param<float> p;
    p.name = name;
    p.value = Tensor<float>({1}, {value});
    p.grad = Tensor<float>({1}, {grad});
    return p;
}

TadaConfig tiny_config(std::uint64_t seed = 0) {
    TadaConfig cfg;
    cfg.net.depth = 1;
    cfg.net.base_channels = 2;
    cfg.iterations = 20;
    cfg.eval_every = 5;
    cfg.seed = seed;
    return cfg;
}

struct TinyProblem {
    tomo::Volume gt;
    tomo::Geometry g;
    tomo::Sinogram y;
};

TinyProblem tiny_problem() {
    TinyProblem p;
    const std::int64_t n = 16;  // >= the 11x11 SSIM window used by the trace metrics
    p.gt = tomo::Volume(n, n, n);
    for (std::int64_t z = 4; z < 12; ++z)
        for (std::int64_t y = 4; y < 12; ++y)
            for (std::int64_t x = 4; x < 12; ++x) p.gt.at(z, y, x) = 0.8f;
    p.g = tomo::Geometry::uniform(6, tomo::Geometry::covering_det_count(n, n), n);
    p.y = tomo::forward_project(p.gt, p.g);
    return p;
}

}  // namespace

TEST_CASE("adam first step matches the closed form") {
    std::vector<unet::Param<float>> params{scalar_param("w", 0.0f, 0.5f)};
    AdamState state;
    adam_step(params, state, 1e-3);
    // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    CHECK(params[0].value[0] == doctest::Approx(-9.99999998e-4).epsilon(1e-6));
    CHECK(state.step_count == 1);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
    std::vector<unet::Param<float>> params{scalar_param("w", 1.25f, 0.0f)};
    AdamState state;
    adam_step(params, state, 1e-3);
    CHECK(params[0].value[0] == 1.25f);
    CHECK(state.step_count == 1);
}

TEST_CASE("adam two constant-gradient steps match hand-evaluated moments") {
    const double g = 0.5, lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<unet::Param<float>> params{scalar_param("w", 0.0f, static_cast<float>(g))};
    AdamState state;
    adam_step(params, state, lr);
    params[0].grad[0] = static_cast<float>(g);
    adam_step(params, state, lr);

    // hand evaluation with float-rounded moments, as stored
    float m = 0.0f, v = 0.0f;
    double x = 0.0;
    for (int t = 1; t <= 2; ++t) {
        m = static_cast<float>(b1 * m + (1 - b1) * g);
        v = static_cast<float>(b2 * v + (1 - b2) * g * g);
        const double m_hat = m / (1.0 - std::pow(b1, t));
        const double v_hat = v / (1.0 - std::pow(b2, t));
        x -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
    CHECK(params[0].value[0] == doctest::Approx(x).epsilon(1e-6));
    CHECK(state.step_count == 2);
}

TEST_CASE("adam converges on a quadratic") {
    std::vector<unet::Param<float>> params{scalar_param("w", 5.0f, 0.0f)};
    AdamState state;
    for (int i = 0; i < 3000; ++i) {
        params[0].grad[0] = 2.0f * (params[0].value[0] - 3.0f);
        adam_step(params, state, 1e-2);
    }
    CHECK(params[0].value[0] == doctest::Approx(3.0f).epsilon(1e-3));
}

TEST_CASE("adam rejects non-finite gradients by name") {
    std::vector<unet::Param<float>> params{scalar_param("w", 0.0f, std::nanf(""))};
    AdamState state;
    CHECK_THROWS_WITH_AS(adam_step(params, state, 1e-3),
                         "adam_step: non-finite gradient for parameter 'w'", std::runtime_error);
}

TEST_CASE("adam state is bound to one parameter set") {
    std::vector<unet::Param<float>> one{scalar_param("a", 0.0f, 0.1f)};
    AdamState state;
    adam_step(one, state, 1e-3);
    std::vector<unet::Param<float>> two{scalar_param("a", 0.0f, 0.1f), scalar_param("b", 0.0f, 0.1f)};
    CHECK_THROWS_AS(adam_step(two, state, 1e-3), std::invalid_argument);
}

TEST_CASE("ema initialization and blending") {
    EmaState ema;
    ema.decay = 0.99;
    ema.update(Tensor<float>({2}, {0.0f, 0.0f}));
    CHECK(ema.shadow[0] == 0.0f);
    ema.update(Tensor<float>({2}, {1.0f, 2.0f}));
    CHECK(ema.shadow[0] == doctest::Approx(0.01f));
    CHECK(ema.shadow[1] == doctest::Approx(0.02f));
    CHECK_THROWS_AS(ema.update(Tensor<float>({3})), std::invalid_argument);

    EmaState latest;
    latest.decay = 0.0;
    latest.update(Tensor<float>({1}, {4.0f}));
    latest.update(Tensor<float>({1}, {7.0f}));
    CHECK(latest.shadow[0] == 7.0f);
}

TEST_CASE("noise_sigma is alpha times the peak magnitude") {
    CHECK(noise_sigma(Tensor<float>({3}), 0.5) == 0.0f);
    CHECK(noise_sigma(Tensor<float>({2}, {2.0f, -1.0f}), 0.5) == 1.0f);
    CHECK(noise_sigma(Tensor<float>({2}, {-4.0f, 1.0f}), 0.5) == 2.0f);
    tomo::Volume v(1, 1, 2);
    v.data = {-4.0f, 1.0f};
    CHECK(noise_sigma(v, 0.5) == 2.0f);
    CHECK_THROWS_AS(noise_sigma(v, -0.1), std::invalid_argument);
}

TEST_CASE("input_update endpoints and blend") {
    Tensor<float> z = Tensor<float>::full({4}, 0.0f);
    Tensor<float> xh = Tensor<float>::full({4}, 1.0f);
    CHECK(input_update(z, xh, 1.0).data == xh.data);
    CHECK(input_update(z, xh, 0.0).data == z.data);
    CHECK(input_update(z, xh, 0.01)[0] == doctest::Approx(0.01f));
    CHECK_THROWS_AS(input_update(z, Tensor<float>({3}), 0.5), std::invalid_argument);
}

TEST_CASE("tada_loss worked example: 3 + 0.01 * 0.5") {
    const std::int64_t n = 4;
    tomo::Geometry g = tomo::Geometry::uniform(3, tomo::Geometry::covering_det_count(n, n), 1);
    Tensor<float> x_hat({1, 1, 1, n, n});
    Rng rng(5);
    fill_uniform(x_hat, rng, 0.2, 0.8);

    // choose y so the data residual is exactly (1, -2) at two bins, 0 elsewhere
    Tensor<float> ax({1, g.num_views, g.num_det});
    tomo::radon_forward(x_hat.data.data(), 1, n, n, g, ax.data.data());
    Tensor<float> y = ax;
    y[0] -= 1.0f;
    y[1] += 2.0f;

    // and z - x_hat = 0.5 at a single voxel
    Tensor<float> z = x_hat;
    z[3] += 0.5f;

    Tape<float> tape;
    TadaLoss<float> loss = tada_loss(tape, y, tape.constant(x_hat), z, g, 0.01f, 1);
    CHECK(loss.data_fidelity.value()[0] == doctest::Approx(3.0).epsilon(1e-5));
    CHECK(loss.regularizer.value()[0] == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(loss.total.value()[0] == doctest::Approx(3.005).epsilon(1e-5));
}

TEST_CASE("tada_loss vanishes on an exact fit and ignores beta when zero") {
    const std::int64_t n = 4;
    tomo::Geometry g = tomo::Geometry::uniform(2, tomo::Geometry::covering_det_count(n, n), 1);
    Tensor<float> x_hat({1, 1, 1, n, n});
    Rng rng(9);
    fill_uniform(x_hat, rng, 0.0, 1.0);
    Tensor<float> y({1, g.num_views, g.num_det});
    tomo::radon_forward(x_hat.data.data(), 1, n, n, g, y.data.data());

    Tape<float> tape;
    TadaLoss<float> exact = tada_loss(tape, y, tape.constant(x_hat), x_hat, g, 0.01f, 1);
    CHECK(exact.total.value()[0] == 0.0f);

    Tensor<float> z = x_hat;
    z[0] += 2.0f;
    TadaLoss<float> no_reg = tada_loss(tape, y, tape.constant(x_hat), z, g, 0.0f, 2);
    CHECK(no_reg.total.value()[0] == no_reg.data_fidelity.value()[0]);

    CHECK_THROWS_AS(tada_loss(tape, y, tape.constant(x_hat), z, g, 0.01f, 3), std::invalid_argument);
}

TEST_CASE("tada_loss gradient matches central finite differences") {
    const std::int64_t n = 4;
    tomo::Geometry g = tomo::Geometry::uniform(3, tomo::Geometry::covering_det_count(n, n), 1);
    Rng rng(13);
    Tensor<double> x({1, 1, 1, n, n}), z(x.shape), y({1, g.num_views, g.num_det});
    fill_uniform(x, rng, 0.1, 0.9);
    fill_uniform(z, rng, 0.1, 0.9);
    fill_normal(y, rng, 2.0, 1.0);

    for (int p : {1, 2}) {
        CAPTURE(p);
        Tensor<double> gx(x.shape);
        {
            Tape<double> tape;
            TadaLoss<double> loss = tada_loss(tape, y, tape.leaf(x, &gx), z, g, 0.01, p);
            tape.backward(loss.total);
        }
        auto eval = [&]() {
            Tape<double> tape;
            return tada_loss(tape, y, tape.leaf(x, nullptr), z, g, 0.01, p).total.value()[0];
        };
        const double h = 1e-4;
        std::uniform_int_distribution<std::int64_t> pick(0, x.numel() - 1);
        for (int k = 0; k < 10; ++k) {
            const std::int64_t i = pick(rng);
            const double orig = x[i];
            x[i] = orig + h;
            const double fp = eval();
            x[i] = orig - h;
            const double fm = eval();
            x[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            CHECK(std::abs(fd - gx[i]) / std::max({std::abs(fd), std::abs(gx[i]), 1e-12}) < 1e-3);
        }
    }
}

TEST_CASE("run_tada_dip follows the per-iteration update rules") {
    TinyProblem prob = tiny_problem();
    TadaConfig cfg = tiny_config(3);
    cfg.iterations = 12;

    std::vector<float> sigmas;
    std::vector<Tensor<float>> etas;
    int calls = 0;
    auto observer = [&](const IterationView& view) {
        ++calls;
        CHECK(view.sigma == noise_sigma(view.z_before, cfg.alpha));  // exact float product
        CHECK(view.z_after.data == input_update(view.z_before, view.x_hat, cfg.gamma).data);
        sigmas.push_back(view.sigma);
        etas.push_back(view.eta);
    };
    RunResult res = run_tada_dip(prob.y, prob.g, 16, 16, cfg, &prob.gt, observer);
    CHECK(calls == cfg.iterations);
    for (float s : sigmas) CHECK(s > 0.0f);
    // noise is redrawn every iteration
    for (std::size_t i = 1; i < etas.size(); ++i) CHECK(etas[i].data != etas[i - 1].data);
    CHECK(all_finite(Tensor<float>({res.volume.numel()}, res.volume.data)));
}

TEST_CASE("alpha=0, gamma=1 reduces to sequential reuse of the output") {
    TinyProblem prob = tiny_problem();
    TadaConfig cfg = tiny_config(4);
    cfg.alpha = 0.0;
    cfg.gamma = 1.0;
    cfg.iterations = 8;

    auto observer = [&](const IterationView& view) {
        CHECK(view.sigma == 0.0f);
        for (float e : view.eta.data) CHECK(e == 0.0f);
        CHECK(view.z_after.data == view.x_hat.data);  // bitwise
    };
    run_tada_dip(prob.y, prob.g, 16, 16, cfg, nullptr, observer);
}

TEST_CASE("vanilla DIP keeps its input fixed") {
    TinyProblem prob = tiny_problem();
    TadaConfig cfg = tiny_config(5);
    cfg.iterations = 6;
    Tensor<float> first_z;
    auto observer = [&](const IterationView& view) {
        if (first_z.data.empty()) first_z = view.z_before;
        CHECK(view.z_before.data == first_z.data);
        CHECK(view.z_after.data == first_z.data);
        CHECK(view.sigma == 0.0f);
    };
    RunResult res = run_vanilla_dip(prob.y, prob.g, 16, 16, cfg, nullptr, observer);
    CHECK(res.trace.back().regularizer == 0.0);
}

TEST_CASE("runs are seed-deterministic") {
    TinyProblem prob = tiny_problem();
    RunResult a = run_tada_dip(prob.y, prob.g, 16, 16, tiny_config(11));
    RunResult b = run_tada_dip(prob.y, prob.g, 16, 16, tiny_config(11));
    RunResult c = run_tada_dip(prob.y, prob.g, 16, 16, tiny_config(12));
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.volume.data != c.volume.data);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].loss == b.trace[i].loss);
}

TEST_CASE("trace rows decompose the loss and carry metrics only with ground truth") {
    TinyProblem prob = tiny_problem();
    TadaConfig cfg = tiny_config(7);
    cfg.iterations = 10;
    cfg.eval_every = 4;

    RunResult with_gt = run_tada_dip(prob.y, prob.g, 16, 16, cfg, &prob.gt);
    REQUIRE(with_gt.trace.size() == 3);  // iterations 4, 8 and the final 10
    CHECK(with_gt.trace.back().iteration == 10);
    for (const auto& row : with_gt.trace) {
        CHECK(row.loss ==
              doctest::Approx(row.data_fidelity + cfg.beta * row.regularizer).epsilon(1e-5));
        CHECK(std::isfinite(row.psnr_ema));
        CHECK(row.ssim_ema >= -1.0);
        CHECK(row.ssim_ema <= 1.0);
    }

    RunResult no_gt = run_tada_dip(prob.y, prob.g, 16, 16, cfg);
    for (const auto& row : no_gt.trace) {
        CHECK(std::isnan(row.psnr_ema));
        CHECK(std::isnan(row.ssim_ema));
    }
}

TEST_CASE("training reduces the loss on the phantom task") {
    TinyProblem prob = tiny_problem();
    TadaConfig cfg = tiny_config(2);
    cfg.iterations = 200;
    cfg.eval_every = 1;
    RunResult res = run_tada_dip(prob.y, prob.g, 16, 16, cfg);
    CHECK(res.trace.back().loss < res.trace.front().loss);

    RunResult vres = run_vanilla_dip(prob.y, prob.g, 16, 16, cfg);
    CHECK(vres.trace.back().loss < vres.trace.front().loss);
}

TEST_CASE("trace CSV layout") {
    RunTrace trace;
    trace.push_back({50, 1.5, 1.0, 50.0, 22.5, 0.8});
    trace.push_back({100, 1.25, 0.9, 35.0, std::numeric_limits<double>::quiet_NaN(),
                     std::numeric_limits<double>::quiet_NaN()});
    const std::string csv = trace_to_csv(trace);
    CHECK(csv.find("iteration,loss,data_fidelity,regularizer,psnr_ema,ssim_ema\n") == 0);
    CHECK(csv.find("50,1.5,1,50,22.5,0.8\n") != std::string::npos);
    CHECK(csv.find("100,1.25,0.9,35,nan,nan\n") != std::string::npos);
}

TEST_CASE("config validation") {
    TadaConfig cfg = tiny_config();
    cfg.gamma = 1.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.p = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.ema_decay = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.lr_decay = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.lr_decay = 1.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
