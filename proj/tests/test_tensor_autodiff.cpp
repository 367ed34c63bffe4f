#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "pionono/graph.hpp"
#include "pionono/rng.hpp"

using namespace pionono;
using pionono::testing::fd_grad;
using pionono::testing::rel_err;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor({2, -1}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), ShapeError);
    Tensor empty({1, 0, 4, 4});
    CHECK(empty.numel() == 0);
}

TEST_CASE("conv2d identity-scaled kernel, same padding") {
    Tensor in = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor k = Tensor::full({1, 1, 1, 1}, 2.0f);
    Tensor b({1});
    Tensor out = ops::conv2d(in, k, b, Padding::Same);
    CHECK(out.shape == std::vector<int>{1, 1, 3, 3});
    for (float v : out.data) CHECK(v == doctest::Approx(2.0).epsilon(1e-7));
}

TEST_CASE("conv2d averaging kernel, valid padding") {
    Tensor in({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) in.data[static_cast<size_t>(i)] = static_cast<float>(i + 1);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0f / 9.0f);
    Tensor b({1});
    Tensor out = ops::conv2d(in, k, b, Padding::Valid);
    CHECK(out.shape == std::vector<int>{1, 1, 1, 1});
    CHECK(out.data[0] == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("conv2d shape errors name the offending dims") {
    Tensor in({1, 3, 4, 4});
    Tensor k({2, 4, 3, 3});
    Tensor b({2});
    CHECK_THROWS_WITH_AS(static_cast<void>(ops::conv2d(in, k, b, Padding::Same)),
                         doctest::Contains("Cin=3"), ShapeError);
    Tensor keven({2, 3, 2, 2});
    CHECK_THROWS_AS(static_cast<void>(ops::conv2d(in, keven, b, Padding::Same)), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(7);
    Tensor in = random_tensor({2, 3, 8, 8}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);

    auto eval = [&]() {
        Graph64 g;
        int out = g.conv2d(g.leaf_image(in, true), g.leaf_kernel(k, true), g.leaf(b, true), Padding::Same);
        return static_cast<double>(g.value(g.sum_all(out)).data[0]);
    };

    Graph64 g;
    int xi = g.leaf_image(in, true), ki = g.leaf_kernel(k, true), bi = g.leaf(b, true);
    g.backward(g.sum_all(g.conv2d(xi, ki, bi, Padding::Same)));
    Tensor gk = g.grad_nchw(ki), gb = g.grad_nchw(bi), gx = g.grad_nchw(xi);

    double worst = 0.0;
    for (size_t i = 0; i < k.data.size(); i += 7)
        worst = std::max(worst, rel_err(fd_grad(eval, k, i), gk.data[i]));
    for (size_t i = 0; i < b.data.size(); ++i)
        worst = std::max(worst, rel_err(fd_grad(eval, b, i), gb.data[i]));
    for (size_t i = 0; i < in.data.size(); i += 37)
        worst = std::max(worst, rel_err(fd_grad(eval, in, i), gx.data[i]));
    CHECK(worst < 1e-3);
}

TEST_CASE("relu forward and subgradient") {
    Tensor in({3}, {-1.0f, 0.0f, 2.0f});
    Tensor out = ops::relu(in);
    CHECK(out.data == std::vector<float>{0.0f, 0.0f, 2.0f});

    Rng rng(3);
    Tensor pos = random_tensor({2, 5}, rng, 0.5, 2.0);
    CHECK(ops::relu(pos).data == pos.data);

    // gradient mask equals indicator(x > 0), checked away from 0
    Tensor x({6}, {-1.5f, -0.2f, 0.3f, 1.0f, -0.7f, 2.0f});
    Tensor w = random_tensor({6}, rng);
    auto eval = [&]() {
        Graph64 g;
        int l = g.sum_all(g.mul(g.relu(g.leaf(x, true)), g.leaf(w)));
        return static_cast<double>(g.value(l).data[0]);
    };
    Graph64 g;
    int xi = g.leaf(x, true);
    g.backward(g.sum_all(g.mul(g.relu(xi), g.leaf(w))));
    Tensor gx = g.grad_nchw(xi);
    for (size_t i = 0; i < x.data.size(); ++i) {
        CHECK(rel_err(fd_grad(eval, x, i), gx.data[i]) < 1e-3);
        float expect = x.data[i] > 0 ? w.data[i] : 0.0f;
        CHECK(gx.data[i] == doctest::Approx(expect).epsilon(1e-5));
    }

    // subgradient exactly 0 at x == 0
    Graph64 g2;
    Tensor zero({1}, {0.0f});
    int zi = g2.leaf(zero, true);
    g2.backward(g2.sum_all(g2.relu(zi)));
    CHECK(g2.grad(zi).data[0] == 0.0);
}

TEST_CASE("softmax_channels values and invariances") {
    Tensor logits = Tensor::full({1, 4, 2, 2}, 1.25f);
    Tensor probs = ops::softmax_channels(logits);
    for (float v : probs.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

    Tensor two({1, 2, 1, 1}, {0.0f, std::log(3.0f)});
    Tensor p2 = ops::softmax_channels(two);
    // independent scalar evaluation
    double e0 = std::exp(0.0), e1 = std::exp(std::log(3.0));
    CHECK(p2.data[0] == doctest::Approx(e0 / (e0 + e1)).epsilon(1e-6));
    CHECK(p2.data[1] == doctest::Approx(e1 / (e0 + e1)).epsilon(1e-6));
    CHECK(p2.data[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(p2.data[1] == doctest::Approx(0.75).epsilon(1e-6));

    Rng rng(11);
    Tensor l = random_tensor({2, 4, 3, 3}, rng);
    Graph64 gs;
    int base = gs.leaf_image(l);
    Tensor pa = gs.value_nchw(gs.softmax_channels(base));
    Tensor pb = gs.value_nchw(gs.softmax_channels(gs.add_const(base, 100.0)));
    for (size_t i = 0; i < pa.data.size(); ++i)
        CHECK(std::fabs(pa.data[i] - pb.data[i]) < 1e-6);

    // per-pixel sums and open interval
    size_t hw = 9;
    for (int n = 0; n < 2; ++n)
        for (size_t p = 0; p < hw; ++p) {
            double s = 0.0;
            for (int c = 0; c < 4; ++c) {
                float v = pa.data[(static_cast<size_t>(n) * 4 + c) * hw + p];
                CHECK(v > 0.0f);
                CHECK(v < 1.0f);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }

    Tensor bad({1, 2, 1, 1}, {std::nanf(""), 0.0f});
    CHECK_THROWS_AS(static_cast<void>(ops::softmax_channels(bad)), NumericError);
    Tensor one_class({1, 1, 1, 1}, {0.5f});
    CHECK_THROWS_AS(static_cast<void>(ops::softmax_channels(one_class)), ShapeError);
}

TEST_CASE("upsample_nearest2x replication and gradient") {
    Tensor in({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    Tensor out = ops::upsample_nearest2x(in);
    CHECK(out.shape == std::vector<int>{1, 1, 4, 4});
    std::vector<float> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    CHECK(out.data == expect);

    Rng rng(5);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor up = ops::upsample_nearest2x(x);
    double sx = 0, su = 0;
    for (float v : x.data) sx += v;
    for (float v : up.data) su += v;
    CHECK(su == doctest::Approx(4.0 * sx).epsilon(1e-5));

    Tensor w = random_tensor({2, 3, 8, 8}, rng);
    auto eval = [&]() {
        Graph64 g;
        int l = g.sum_all(g.mul(g.upsample_nearest2x(g.leaf_image(x, true)), g.leaf_image(w)));
        return static_cast<double>(g.value(l).data[0]);
    };
    Graph64 g;
    int xi = g.leaf_image(x, true);
    g.backward(g.sum_all(g.mul(g.upsample_nearest2x(xi), g.leaf_image(w))));
    Tensor gx = g.grad_nchw(xi);
    for (size_t i = 0; i < x.data.size(); i += 5)
        CHECK(rel_err(fd_grad(eval, x, i), gx.data[i]) < 1e-4);
}

TEST_CASE("concat_channels") {
    Rng rng(13);
    Tensor a = random_tensor({1, 16, 4, 4}, rng);
    Tensor b = random_tensor({1, 8, 4, 4}, rng);
    Tensor cat = ops::concat_channels(a, b);
    CHECK(cat.shape == std::vector<int>{1, 24, 4, 4});

    // split recovers both inputs exactly
    size_t hw = 16;
    for (int c = 0; c < 16; ++c)
        for (size_t p = 0; p < hw; ++p)
            CHECK(cat.data[static_cast<size_t>(c) * hw + p] == a.data[static_cast<size_t>(c) * hw + p]);
    for (int c = 0; c < 8; ++c)
        for (size_t p = 0; p < hw; ++p)
            CHECK(cat.data[static_cast<size_t>(16 + c) * hw + p] == b.data[static_cast<size_t>(c) * hw + p]);

    Tensor empty({1, 0, 4, 4});
    Tensor same = ops::concat_channels(a, empty);
    CHECK(same.shape == a.shape);
    CHECK(same.data == a.data);

    Tensor wrong = random_tensor({1, 8, 2, 2}, rng);
    CHECK_THROWS_AS(static_cast<void>(ops::concat_channels(a, wrong)), ShapeError);

    // backward splits the cotangent
    Graph g;
    int ai = g.leaf_image(a, true), bi = g.leaf_image(b, true);
    g.backward(g.sum_all(g.concat_channels(ai, bi)));
    for (float v : g.grad(ai).data) CHECK(v == 1.0f);
    for (float v : g.grad(bi).data) CHECK(v == 1.0f);
}

TEST_CASE("maxpool2 tie-break and gradient") {
    Tensor flat = Tensor::full({1, 1, 2, 2}, 3.0f);
    Graph g;
    int xi = g.leaf_image(flat, true);
    int out = g.maxpool2(xi);
    CHECK(g.value_nchw(out).data[0] == 3.0f);
    g.backward(g.sum_all(out));
    Tensor gx = g.grad_nchw(xi);
    CHECK(gx.data == std::vector<float>{1.0f, 0.0f, 0.0f, 0.0f});  // top-left wins ties

    Rng rng(17);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    auto eval = [&]() {
        Graph64 g2;
        int l = g2.sum_all(g2.maxpool2(g2.leaf_image(x, true)));
        return static_cast<double>(g2.value(l).data[0]);
    };
    Graph64 g2;
    int xj = g2.leaf_image(x, true);
    g2.backward(g2.sum_all(g2.maxpool2(xj)));
    Tensor gx2 = g2.grad_nchw(xj);
    for (size_t i = 0; i < x.data.size(); i += 11)
        CHECK(rel_err(fd_grad(eval, x, i), gx2.data[i]) < 1e-3);
}

TEST_CASE("backward basics") {
    // loss = x^2 at x = 3 -> grad 6
    Graph g;
    Tensor x({1}, {3.0f});
    int xi = g.leaf(x, true);
    int loss = g.sum_all(g.mul(xi, xi));
    g.backward(loss);
    CHECK(g.grad(xi).data[0] == doctest::Approx(6.0));

    // loss = sum(A*B) -> grads are B, A
    Rng rng(23);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    Graph g2;
    int ai = g2.leaf(a, true), bi = g2.leaf(b, true);
    g2.backward(g2.sum_all(g2.mul(ai, bi)));
    for (size_t i = 0; i < a.data.size(); ++i) {
        CHECK(g2.grad(ai).data[i] == doctest::Approx(b.data[i]));
        CHECK(g2.grad(bi).data[i] == doctest::Approx(a.data[i]));
    }

    // non-scalar seed rejected
    Graph g3;
    int t = g3.leaf(a, true);
    CHECK_THROWS_AS(g3.backward(t), ShapeError);
}

TEST_CASE("backward is bit-identical across invocations") {
    Rng rng(31);
    Tensor in = random_tensor({1, 3, 8, 8}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Graph g;
    int xi = g.leaf_image(in, true), ki = g.leaf_kernel(k, true), bi = g.leaf(b, true);
    int loss = g.sum_all(g.softmax_channels(g.conv2d(xi, ki, bi, Padding::Same)));
    g.backward(loss);
    std::vector<float> g1 = g.grad(ki).data;
    g.backward(loss);
    CHECK(g.grad(ki).data == g1);
}

TEST_CASE("generic op finite-difference sweep") {
    Rng rng(41);
    // every differentiable op against central differences on inputs in [-2,2]
    Tensor x = random_tensor({3, 3}, rng);
    Tensor y = random_tensor({3, 3}, rng);
    Tensor v = random_tensor({3}, rng);

    struct Case {
        const char* name;
        std::function<int(Graph64&, int, int, int)> build;  // returns loss node
    };
    auto check_all = [&](auto build) {
        auto eval = [&]() {
            Graph64 g;
            int xi = g.leaf(x, true), yi = g.leaf(y, true), vi = g.leaf(v, true);
            return static_cast<double>(g.value(build(g, xi, yi, vi)).data[0]);
        };
        Graph64 g;
        int xi = g.leaf(x, true), yi = g.leaf(y, true), vi = g.leaf(v, true);
        g.backward(build(g, xi, yi, vi));
        Tensor gx = g.grad_nchw(xi), gy = g.grad_nchw(yi), gv = g.grad_nchw(vi);
        double worst = 0.0;
        for (size_t i = 0; i < x.data.size(); ++i) worst = std::max(worst, rel_err(fd_grad(eval, x, i), gx.data[i]));
        for (size_t i = 0; i < y.data.size(); ++i) worst = std::max(worst, rel_err(fd_grad(eval, y, i), gy.data[i]));
        for (size_t i = 0; i < v.data.size(); ++i) worst = std::max(worst, rel_err(fd_grad(eval, v, i), gv.data[i]));
        return worst;
    };

    CHECK(check_all([](Graph64& g, int x, int y, int) { return g.sum_all(g.mul(g.add(x, y), g.sub(x, y))); }) < 1e-3);
    CHECK(check_all([](Graph64& g, int x, int, int) { return g.scale(g.add_const(g.sum_all(x), 1.5), -2.0); }) < 1e-3);
    CHECK(check_all([](Graph64& g, int x, int, int v) { return g.sum_all(g.matvec(x, v)); }) < 1e-3);
    CHECK(check_all([](Graph64& g, int x, int, int) {
        return g.sum_all(g.log(g.add_const(g.mul(x, x), 0.5)));
    }) < 1e-3);
    CHECK(check_all([](Graph64& g, int x, int, int) {
        return g.sum_all(g.diag_part(g.tril_softplus_diag(x, 0.3)));
    }) < 1e-3);
    CHECK(check_all([](Graph64& g, int x, int y, int) {
        return g.sum_all(g.mul(g.tril_softplus_diag(x, 0.0), g.tril_softplus_diag(y, 1.0)));
    }) < 1e-3);
}

TEST_CASE("tile_latent broadcast and gradient") {
    Tensor z1({2}, {1.0f, 2.0f});
    Tensor z2({2}, {3.0f, 4.0f});
    Graph g;
    int a = g.leaf(z1, true), b = g.leaf(z2, true);
    int tile = g.tile_latent({a, b}, 2, 2);
    Tensor out = g.value_nchw(tile);
    CHECK(out.shape == std::vector<int>{2, 2, 2, 2});
    CHECK(out.at({0, 0, 1, 1}) == 1.0f);
    CHECK(out.at({0, 1, 0, 0}) == 2.0f);
    CHECK(out.at({1, 0, 0, 1}) == 3.0f);
    g.backward(g.sum_all(tile));
    CHECK(g.grad(a).data == std::vector<float>{4.0f, 4.0f});
    CHECK(g.grad(b).data == std::vector<float>{4.0f, 4.0f});
}
