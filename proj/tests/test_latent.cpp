#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "pionono/latent.hpp"
#include "pionono/rng.hpp"

using namespace pionono;
using pionono::testing::fd_grad;
using pionono::testing::rel_err;

namespace {

RaterBank random_bank(int m, int d, uint64_t seed) {
    RaterBank bank = init_bank(m, d, 2.0, 8.0, seed);
    Rng rng(seed ^ 0xabcdefULL);
    for (auto& lat : bank.latents)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j <= i; ++j)
                lat.raw.data[static_cast<size_t>(i) * d + j] = static_cast<float>(rng.uniform(-0.8, 0.8));
    return bank;
}

}  // namespace

TEST_CASE("init_bank defaults and determinism") {
    RaterBank bank = init_bank(4, 8, 2.0, 8.0, 42);
    CHECK(bank.size() == 5);
    CHECK(bank.num_raters() == 4);
    CHECK(bank.gold_index() == 4);
    CHECK(bank.latent_dim == 8);

    // covariance starts exactly at prior_var * I
    std::vector<double> l = chol_matrix(bank, 0);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            double expect = i == j ? std::sqrt(2.0) : 0.0;
            CHECK(l[static_cast<size_t>(i) * 8 + j] == doctest::Approx(expect).epsilon(1e-12));
        }

    RaterBank again = init_bank(4, 8, 2.0, 8.0, 42);
    for (int r = 0; r < 5; ++r)
        CHECK(bank.latents[static_cast<size_t>(r)].mu.data == again.latents[static_cast<size_t>(r)].mu.data);

    RaterBank other = init_bank(4, 8, 2.0, 8.0, 43);
    CHECK(bank.latents[0].mu.data != other.latents[0].mu.data);

    RaterBank degenerate = init_bank(2, 4, 2.0, 0.0, 7);
    for (const auto& lat : degenerate.latents)
        for (float v : lat.mu.data) CHECK(v == 0.0f);

    CHECK_THROWS_AS(init_bank(2, 4, -1.0, 8.0, 1), NumericError);
    CHECK_THROWS_AS(init_bank(0, 4, 2.0, 8.0, 1), ShapeError);
}

TEST_CASE("sample reparametrization") {
    RaterBank bank = random_bank(3, 4, 99);
    std::vector<double> zero(4, 0.0);
    std::vector<double> z = sample_value(bank, 1, zero);
    for (int i = 0; i < 4; ++i)
        CHECK(z[static_cast<size_t>(i)] == doctest::Approx(bank.latents[1].mu.data[static_cast<size_t>(i)]));

    // eps = e1 adds the first column of L
    std::vector<double> e1 = {1.0, 0.0, 0.0, 0.0};
    std::vector<double> l = chol_matrix(bank, 1);
    std::vector<double> z1 = sample_value(bank, 1, e1);
    for (int i = 0; i < 4; ++i)
        CHECK(z1[static_cast<size_t>(i)] - z[static_cast<size_t>(i)] ==
              doctest::Approx(l[static_cast<size_t>(i) * 4]).epsilon(1e-9));

    CHECK_THROWS_AS(static_cast<void>(sample_value(bank, 4, zero)), ShapeError);
    CHECK_THROWS_AS(static_cast<void>(sample_value(bank, -1, zero)), ShapeError);

    // shifting mu by delta shifts z by exactly delta (affine in mu)
    RaterBank shifted = bank;
    std::vector<double> eps = {0.3, -1.2, 0.5, 2.0};
    std::vector<double> before = sample_value(bank, 0, eps);
    for (int i = 0; i < 4; ++i) shifted.latents[0].mu.data[static_cast<size_t>(i)] += 0.5f;
    std::vector<double> after = sample_value(shifted, 0, eps);
    for (int i = 0; i < 4; ++i) {
        double delta = static_cast<double>(shifted.latents[0].mu.data[static_cast<size_t>(i)]) -
                       static_cast<double>(bank.latents[0].mu.data[static_cast<size_t>(i)]);
        CHECK(after[static_cast<size_t>(i)] - before[static_cast<size_t>(i)] == doctest::Approx(delta).epsilon(1e-12));
    }
}

TEST_CASE("sample empirical covariance matches L L^T") {
    RaterBank bank = random_bank(1, 4, 1234);
    int d = 4;
    std::vector<double> l = chol_matrix(bank, 0);
    std::vector<double> cov_target(16, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k <= std::min(i, j); ++k)
                cov_target[static_cast<size_t>(i) * d + j] +=
                    l[static_cast<size_t>(i) * d + k] * l[static_cast<size_t>(j) * d + k];

    Rng rng(777);
    const int n = 100000;
    std::vector<double> mean(4, 0.0), cov(16, 0.0);
    std::vector<std::vector<double>> samples;
    samples.reserve(n);
    for (int s = 0; s < n; ++s) {
        std::vector<double> eps(4);
        for (auto& e : eps) e = rng.normal();
        samples.push_back(sample_value(bank, 0, eps));
        for (int i = 0; i < d; ++i) mean[static_cast<size_t>(i)] += samples.back()[static_cast<size_t>(i)];
    }
    for (auto& m : mean) m /= n;
    for (const auto& z : samples)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                cov[static_cast<size_t>(i) * d + j] +=
                    (z[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)]) *
                    (z[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]);
    for (auto& c : cov) c /= n;
    for (int i = 0; i < 16; ++i)
        CHECK(std::fabs(cov[static_cast<size_t>(i)] - cov_target[static_cast<size_t>(i)]) < 0.05);
}

TEST_CASE("kl_to_prior closed forms") {
    // mu = 0, Sigma = s^2 I -> 0
    RaterBank bank = init_bank(2, 8, 2.0, 0.0, 5);
    CHECK(kl_to_prior(bank, 0) == doctest::Approx(0.0).epsilon(1e-12));

    // D=8, mu=0, Sigma=I, s^2=2 -> 0.5*(8/2 - 8 + 8 ln 2) = 0.7726
    RaterBank unit = init_bank(1, 8, 2.0, 0.0, 5);
    float raw_for_unit = static_cast<float>(softplus_inverse(1.0) - unit.diag_shift);
    for (int i = 0; i < 8; ++i)
        unit.latents[0].raw.data[static_cast<size_t>(i) * 8 + i] = raw_for_unit;
    double expect = 0.5 * (8.0 / 2.0 - 8.0 + 8.0 * std::log(2.0));
    CHECK(kl_to_prior(unit, 0) == doctest::Approx(expect).epsilon(1e-6));
    CHECK(kl_to_prior(unit, 0) == doctest::Approx(0.7726).epsilon(1e-4));

    // nonnegativity, strictly positive off-center
    RaterBank rnd = random_bank(3, 6, 321);
    for (int r = 0; r < rnd.size(); ++r) CHECK(kl_to_prior(rnd, r) >= 0.0);
    RaterBank centered = init_bank(1, 6, 2.0, 0.0, 1);
    centered.latents[0].mu.data[2] = 0.7f;
    CHECK(kl_to_prior(centered, 0) > 0.0);
}

TEST_CASE("kl agrees with Monte Carlo estimate") {
    RaterBank bank = random_bank(1, 8, 2024);
    double analytic = kl_to_prior(bank, 0);
    // E_q[ln q - ln p] with ln q(z) reduced via z - mu = L eps
    int d = 8;
    std::vector<double> l = chol_matrix(bank, 0);
    double logdet = 0.0;
    for (int i = 0; i < d; ++i) logdet += 2.0 * std::log(l[static_cast<size_t>(i) * d + i]);
    Rng rng(4321);
    const int n = 1000000;
    double acc = 0.0;
    double s2 = bank.prior_var;
    for (int s = 0; s < n; ++s) {
        std::vector<double> eps(static_cast<size_t>(d));
        double eps_sq = 0.0;
        for (auto& e : eps) {
            e = rng.normal();
            eps_sq += e * e;
        }
        std::vector<double> z = sample_value(bank, 0, eps);
        double z_sq = 0.0;
        for (double v : z) z_sq += v * v;
        acc += 0.5 * (d * std::log(s2) + z_sq / s2 - logdet - eps_sq);
    }
    double mc = acc / n;
    CHECK(std::fabs(mc - analytic) / std::max(1e-9, std::fabs(analytic)) < 0.02);
}

TEST_CASE("kl gradients match finite differences") {
    RaterBank bank = random_bank(1, 5, 88);
    auto eval = [&]() {
        Graph64 g;
        auto nodes = bind_latent(g, bank, 0);
        return static_cast<double>(g.value(build_kl(g, nodes, bank.latent_dim, bank.prior_var)).data[0]);
    };
    Graph64 g;
    auto nodes = bind_latent(g, bank, 0);
    g.backward(build_kl(g, nodes, bank.latent_dim, bank.prior_var));
    Tensor gmu = g.grad_nchw(nodes.mu), graw = g.grad_nchw(nodes.raw);
    Tensor& mu = bank.latents[0].mu;
    Tensor& raw = bank.latents[0].raw;
    for (size_t i = 0; i < mu.data.size(); ++i)
        CHECK(rel_err(fd_grad(eval, mu, i), gmu.data[i]) < 1e-4);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j <= i; ++j) {
            size_t k = static_cast<size_t>(i) * 5 + j;
            CHECK(rel_err(fd_grad(eval, raw, k), graw.data[k]) < 1e-4);
        }
    // graph value matches the direct closed form
    CHECK(eval() == doctest::Approx(kl_to_prior(bank, 0)).epsilon(1e-6));
}

TEST_CASE("build_sample matches sample_value and flows gradients") {
    RaterBank bank = random_bank(2, 4, 55);
    std::vector<double> eps = {0.4, -0.9, 1.3, 0.2};
    Graph64 g;
    auto nodes = bind_latent(g, bank, 1);
    int z = build_sample(g, nodes, eps);
    std::vector<double> direct = sample_value(bank, 1, eps);
    for (int i = 0; i < 4; ++i)
        CHECK(static_cast<double>(g.value(z).data[static_cast<size_t>(i)]) ==
              doctest::Approx(direct[static_cast<size_t>(i)]).epsilon(1e-6));
    g.backward(g.sum_all(z));
    for (float v : tensor_cast<float>(g.grad(nodes.mu)).data) CHECK(v == doctest::Approx(1.0f));
}

TEST_CASE("pairwise_overlap") {
    // identical latents -> 0
    RaterBank same = init_bank(2, 4, 2.0, 0.0, 9);
    std::vector<double> m0 = pairwise_overlap(same);
    for (double v : m0) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

    // N(0,I) vs N(mu,I): distance = ||mu||^2 / 8
    RaterBank bank = init_bank(1, 3, 1.0, 0.0, 9);  // prior_var 1 -> L = I
    bank.latents[1].mu.data = {1.0f, -2.0f, 0.5f};
    std::vector<double> m = pairwise_overlap(bank);
    double mu_sq = 1.0 + 4.0 + 0.25;
    CHECK(m[1] == doctest::Approx(mu_sq / 8.0).epsilon(1e-6));
    CHECK(m[2] == doctest::Approx(m[1]).epsilon(1e-12));
    CHECK(m[0] == 0.0);
    CHECK(m[3] == 0.0);

    RaterBank rnd = random_bank(3, 5, 2718);
    std::vector<double> pm = pairwise_overlap(rnd);
    int n = rnd.size();
    for (int i = 0; i < n; ++i) {
        CHECK(pm[static_cast<size_t>(i) * n + i] == 0.0);
        for (int j = 0; j < n; ++j)
            CHECK(pm[static_cast<size_t>(i) * n + j] == doctest::Approx(pm[static_cast<size_t>(j) * n + i]));
    }
}

TEST_CASE("reconstructed covariance is symmetric positive definite") {
    RaterBank bank = random_bank(4, 6, 31415);
    for (int r = 0; r < bank.size(); ++r) {
        int d = bank.latent_dim;
        std::vector<double> l = chol_matrix(bank, r);
        std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                for (int k = 0; k <= std::min(i, j); ++k)
                    cov[static_cast<size_t>(i) * d + j] += l[static_cast<size_t>(i) * d + k] * l[static_cast<size_t>(j) * d + k];
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                CHECK(cov[static_cast<size_t>(i) * d + j] == doctest::Approx(cov[static_cast<size_t>(j) * d + i]));
        CHECK(cholesky_inplace(cov, d));
        for (int i = 0; i < d; ++i) CHECK(cov[static_cast<size_t>(i) * d + i] > 0.0);
    }
}
