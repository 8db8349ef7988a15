#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "tada/autodiff.hpp"
#include "tada/random.hpp"

using namespace tada;

namespace {

// Central finite difference of a scalar-valued rebuildable function with
// respect to one entry of t.
double central_diff(const std::function<double()>& f, Tensor<double>& t, std::int64_t idx,
                    double h = 1e-4) {
    const double orig = t[idx];
    t[idx] = orig + h;
    const double fp = f();
    t[idx] = orig - h;
    const double fm = f();
    t[idx] = orig;
    return (fp - fm) / (2.0 * h);
}

double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / denom;
}

}  // namespace

TEST_CASE("elementwise forward values") {
    Tape<float> tape;
    auto a = tape.constant(Tensor<float>({2}, {1.0f, 2.0f}));
    auto b = tape.constant(Tensor<float>({2}, {3.0f, 4.0f}));
    auto s = tape.add(a, b);
    CHECK(s.value()[0] == 4.0f);
    CHECK(s.value()[1] == 6.0f);

    auto lr = tape.leaky_relu(tape.constant(Tensor<float>({1}, {-1.0f})), 0.1f);
    CHECK(lr.value()[0] == doctest::Approx(-0.1f));

    auto sg = tape.sigmoid(tape.constant(Tensor<float>({1}, {0.0f})));
    CHECK(sg.value()[0] == 0.5f);

    CHECK_THROWS_AS(tape.add(a, tape.constant(Tensor<float>({3}))), std::invalid_argument);
}

TEST_CASE("abs backward uses sign(0) = 0") {
    Tape<float> tape;
    Tensor<float> x({3}, {-2.0f, 0.0f, 3.0f});
    Tensor<float> grad(x.shape);
    auto v = tape.leaf(x, &grad);
    auto loss = tape.sum(tape.abs(v));
    tape.backward(loss);
    CHECK(grad[0] == -1.0f);
    CHECK(grad[1] == 0.0f);
    CHECK(grad[2] == 1.0f);
}

TEST_CASE("reduce operations") {
    Tape<float> tape;
    auto s = tape.sum(tape.constant(Tensor<float>({3}, {1.0f, 2.0f, 3.0f})));
    CHECK(s.value()[0] == 6.0f);

    Tensor<float> x({4}, {1.0f, 2.0f, 3.0f, 4.0f});
    Tensor<float> grad(x.shape);
    auto v = tape.leaf(x, &grad);
    tape.backward(tape.mean(v));
    for (int i = 0; i < 4; ++i) CHECK(grad[i] == 0.25f);

    // sum of |x| at (-2, 3)
    Tensor<float> x2({2}, {-2.0f, 3.0f});
    Tensor<float> grad2(x2.shape);
    Tape<float> tape2;
    auto v2 = tape2.leaf(x2, &grad2);
    auto loss = tape2.sum(tape2.abs(v2));
    CHECK(loss.value()[0] == 5.0f);
    tape2.backward(loss);
    CHECK(grad2[0] == -1.0f);
    CHECK(grad2[1] == 1.0f);

    CHECK_THROWS_AS(tape.sum(tape.constant(Tensor<float>({0}))), std::invalid_argument);
}

TEST_CASE("backward of linear and bilinear forms") {
    Tape<float> tape;
    Tensor<float> x = Tensor<float>::full({5}, 2.0f);
    Tensor<float> grad(x.shape);
    auto v = tape.leaf(x, &grad);
    tape.backward(tape.sum(v));
    for (int i = 0; i < 5; ++i) CHECK(grad[i] == 1.0f);

    Tensor<float> w({3}, {0.5f, -1.0f, 2.0f});
    Tensor<float> x2({3}, {1.0f, 1.0f, 1.0f});
    Tensor<float> grad2(x2.shape);
    Tape<float> tape2;
    auto xv = tape2.leaf(x2, &grad2);
    tape2.backward(tape2.sum(tape2.mul(tape2.constant(w), xv)));
    for (int i = 0; i < 3; ++i) CHECK(grad2[i] == w[i]);
}

TEST_CASE("repeated backward accumulates into the sink") {
    Tape<float> tape;
    Tensor<float> x({2}, {1.0f, 2.0f});
    Tensor<float> grad(x.shape);
    auto v = tape.leaf(x, &grad);
    auto loss = tape.sum(v);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(grad[0] == 2.0f);
    CHECK(grad[1] == 2.0f);
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);  // non-scalar loss
}

TEST_CASE("conv3d scalar case and identity kernel") {
    Tape<float> tape;
    auto in = tape.constant(Tensor<float>({1, 1, 1, 1, 1}, {2.0f}));
    auto w = tape.constant(Tensor<float>({1, 1, 1, 1, 1}, {3.0f}));
    auto b = tape.constant(Tensor<float>({1}, {1.0f}));
    auto out = tape.conv3d(in, w, b, 1, 0);
    CHECK(out.value()[0] == 7.0f);

    Tensor<float> x({1, 1, 4, 4, 4});
    Rng rng(7);
    fill_normal(x, rng);
    Tensor<float> delta({1, 1, 3, 3, 3});
    delta[13] = 1.0f;  // center of the 3^3 kernel
    auto id = tape.conv3d(tape.constant(x), tape.constant(delta), tape.constant(Tensor<float>({1})), 1, 1);
    REQUIRE(id.value().shape == x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(id.value()[i] == x[i]);

    // channel mismatch and oversized kernel are rejected
    CHECK_THROWS_AS(tape.conv3d(tape.constant(Tensor<float>({1, 2, 4, 4, 4})), tape.constant(delta),
                                tape.constant(Tensor<float>({1})), 1, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(tape.conv3d(tape.constant(Tensor<float>({1, 1, 2, 2, 2})), tape.constant(delta),
                                tape.constant(Tensor<float>({1})), 1, 0),
                    std::invalid_argument);
}

TEST_CASE("conv3d output extent contract") {
    Tape<float> tape;
    auto out = tape.conv3d(tape.constant(Tensor<float>({1, 1, 8, 8, 8})),
                           tape.constant(Tensor<float>({2, 1, 3, 3, 3})),
                           tape.constant(Tensor<float>({2})), 2, 1);
    CHECK(out.value().shape == Shape{1, 2, 4, 4, 4});
}

TEST_CASE("conv3d gradients match central finite differences") {
    Rng rng(11);
    Tensor<double> input({1, 2, 4, 4, 4});
    Tensor<double> weight({3, 2, 3, 3, 3});
    Tensor<double> bias({3});
    Tensor<double> probe({1, 3, 4, 4, 4});
    fill_normal(input, rng);
    fill_normal(weight, rng);
    fill_normal(bias, rng);
    fill_normal(probe, rng);

    Tensor<double> gin(input.shape), gw(weight.shape), gb(bias.shape);
    auto eval = [&]() {
        Tape<double> tape;
        auto out = tape.conv3d(tape.leaf(input, nullptr), tape.leaf(weight, nullptr),
                               tape.leaf(bias, nullptr), 1, 1);
        return tape.sum(tape.mul(out, tape.constant(probe))).value()[0];
    };
    {
        Tape<double> tape;
        auto out = tape.conv3d(tape.leaf(input, &gin), tape.leaf(weight, &gw), tape.leaf(bias, &gb), 1, 1);
        tape.backward(tape.sum(tape.mul(out, tape.constant(probe))));
    }
    std::uniform_int_distribution<std::int64_t> pick_in(0, input.numel() - 1);
    std::uniform_int_distribution<std::int64_t> pick_w(0, weight.numel() - 1);
    for (int k = 0; k < 10; ++k) {
        std::int64_t i = pick_in(rng);
        CHECK(rel_err(gin[i], central_diff(eval, input, i)) < 1e-3);
        std::int64_t j = pick_w(rng);
        CHECK(rel_err(gw[j], central_diff(eval, weight, j)) < 1e-3);
    }
    for (std::int64_t j = 0; j < bias.numel(); ++j)
        CHECK(rel_err(gb[j], central_diff(eval, bias, j)) < 1e-3);
}

TEST_CASE("conv3d is linear in the input for zero bias") {
    Rng rng(3);
    Tensor<float> x({1, 1, 6, 6, 6}), y({1, 1, 6, 6, 6});
    Tensor<float> w({2, 1, 3, 3, 3});
    fill_normal(x, rng);
    fill_normal(y, rng);
    fill_normal(w, rng);
    Tensor<float> zero_bias({2});
    const float a = 0.3f, b = -1.7f;

    Tape<float> tape;
    auto conv = [&](const Tensor<float>& t) {
        return tape.conv3d(tape.constant(t), tape.constant(w), tape.constant(zero_bias), 1, 1).value();
    };
    Tensor<float> mix(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) mix[i] = a * x[i] + b * y[i];
    Tensor<float> lhs = conv(mix);
    Tensor<float> cx = conv(x), cy = conv(y);
    for (std::int64_t i = 0; i < lhs.numel(); ++i) {
        const double expect = a * cx[i] + b * cy[i];
        CHECK(std::abs(lhs[i] - expect) <= 1e-5 * std::max(1.0, std::abs(expect)));
    }
}

TEST_CASE("upsample_trilinear shape and constants") {
    Tape<float> tape;
    auto c = tape.upsample_trilinear(tape.constant(Tensor<float>::full({1, 1, 4, 4, 4}, 0.7f)), 2);
    CHECK(c.value().shape == Shape{1, 1, 8, 8, 8});
    for (float v : c.value().data) CHECK(v == doctest::Approx(0.7f));
    CHECK_THROWS_AS(tape.upsample_trilinear(c, 0), std::invalid_argument);
}

TEST_CASE("upsample_trilinear adjoint identity") {
    Rng rng(21);
    Tensor<double> x({1, 2, 3, 4, 5});
    fill_normal(x, rng);
    Tensor<double> gx(x.shape);
    Tape<double> tape;
    auto up = tape.upsample_trilinear(tape.leaf(x, &gx), 2);
    Tensor<double> y(up.value().shape);
    fill_normal(y, rng);
    const double fwd = dot(up.value(), y);
    tape.backward(tape.sum(tape.mul(up, tape.constant(y))));
    const double adj = dot(x, gx);
    CHECK(rel_err(fwd, adj) < 1e-4);
}

TEST_CASE("instance_norm standardization") {
    Tape<float> tape;
    auto z = tape.instance_norm(tape.constant(Tensor<float>::full({1, 1, 2, 2, 2}, 3.0f)),
                                tape.constant(Tensor<float>({1}, {1.0f})),
                                tape.constant(Tensor<float>({1})), 1e-5f);
    for (float v : z.value().data) CHECK(v == doctest::Approx(0.0f));

    auto pair = tape.instance_norm(tape.constant(Tensor<float>({1, 1, 1, 1, 2}, {0.0f, 2.0f})),
                                   tape.constant(Tensor<float>({1}, {1.0f})),
                                   tape.constant(Tensor<float>({1})), 0.0f);
    CHECK(pair.value()[0] == doctest::Approx(-1.0f));
    CHECK(pair.value()[1] == doctest::Approx(1.0f));
}

TEST_CASE("instance_norm gradients match central finite differences") {
    Rng rng(5);
    Tensor<double> x({1, 2, 2, 3, 2});
    Tensor<double> gain({2}), bias({2}), probe(x.shape);
    fill_normal(x, rng);
    fill_normal(gain, rng);
    fill_normal(bias, rng);
    fill_normal(probe, rng);

    Tensor<double> gx(x.shape), gg(gain.shape), gb(bias.shape);
    auto eval = [&]() {
        Tape<double> tape;
        auto out = tape.instance_norm(tape.leaf(x, nullptr), tape.leaf(gain, nullptr),
                                      tape.leaf(bias, nullptr), 1e-5);
        return tape.sum(tape.mul(out, tape.constant(probe))).value()[0];
    };
    {
        Tape<double> tape;
        auto out = tape.instance_norm(tape.leaf(x, &gx), tape.leaf(gain, &gg), tape.leaf(bias, &gb), 1e-5);
        tape.backward(tape.sum(tape.mul(out, tape.constant(probe))));
    }
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(rel_err(gx[i], central_diff(eval, x, i)) < 1e-3);
    for (std::int64_t i = 0; i < 2; ++i) {
        CHECK(rel_err(gg[i], central_diff(eval, gain, i)) < 1e-3);
        CHECK(rel_err(gb[i], central_diff(eval, bias, i)) < 1e-3);
    }
}

TEST_CASE("elementwise gradients match central finite differences") {
    Rng rng(13);
    Tensor<double> x({16});
    fill_normal(x, rng);
    // keep clear of the |x| and leaky_relu kinks
    for (auto& v : x.data)
        if (std::abs(v) < 1e-2) v = 0.5;
    Tensor<double> probe({16});
    fill_normal(probe, rng);

    struct Case {
        const char* name;
        std::function<Var<double>(Tape<double>&, Var<double>)> apply;
    };
    const Case cases[] = {
        {"abs", [](Tape<double>& t, Var<double> v) { return t.abs(v); }},
        {"square", [](Tape<double>& t, Var<double> v) { return t.square(v); }},
        {"leaky_relu", [](Tape<double>& t, Var<double> v) { return t.leaky_relu(v, 0.1); }},
        {"sigmoid", [](Tape<double>& t, Var<double> v) { return t.sigmoid(v); }},
        {"scale", [](Tape<double>& t, Var<double> v) { return t.scale(v, -2.5); }},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        Tensor<double> gx(x.shape);
        auto eval = [&]() {
            Tape<double> tape;
            auto out = c.apply(tape, tape.leaf(x, nullptr));
            return tape.sum(tape.mul(out, tape.constant(probe))).value()[0];
        };
        {
            Tape<double> tape;
            auto out = c.apply(tape, tape.leaf(x, &gx));
            tape.backward(tape.sum(tape.mul(out, tape.constant(probe))));
        }
        for (std::int64_t i = 0; i < x.numel(); ++i)
            CHECK(rel_err(gx[i], central_diff(eval, x, i)) < 1e-3);
    }
}

TEST_CASE("concat_channels splits gradients") {
    Tape<float> tape;
    Tensor<float> a = Tensor<float>::full({1, 1, 1, 1, 2}, 1.0f);
    Tensor<float> b = Tensor<float>::full({1, 2, 1, 1, 2}, 2.0f);
    Tensor<float> ga(a.shape), gb(b.shape);
    auto cat = tape.concat_channels(tape.leaf(a, &ga), tape.leaf(b, &gb));
    CHECK(cat.value().shape == Shape{1, 3, 1, 1, 2});
    tape.backward(tape.sum(cat));
    for (float v : ga.data) CHECK(v == 1.0f);
    for (float v : gb.data) CHECK(v == 1.0f);
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs") {
    Rng rng(99);
    Tensor<float> x({1, 2, 4, 4, 4}), w({2, 2, 3, 3, 3}), b({2});
    fill_normal(x, rng);
    fill_normal(w, rng);
    fill_normal(b, rng);
    auto run = [&]() {
        Tape<float> tape;
        auto out = tape.conv3d(tape.constant(x), tape.constant(w), tape.constant(b), 1, 1);
        return tape.sigmoid(out).value();
    };
    Tensor<float> r1 = run(), r2 = run();
    CHECK(r1.data == r2.data);
}
