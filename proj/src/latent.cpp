#include "pionono/latent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pionono/errors.hpp"
#include "pionono/rng.hpp"

namespace pionono {

void RaterBank::check_rater(int r) const {
    if (r < 0 || r >= size())
        throw ShapeError("rater id " + std::to_string(r) + " out of range [0," +
                         std::to_string(size() - 1) + "] (gold is " + std::to_string(gold_index()) + ")");
}

double softplus_inverse(double y) { return std::log(std::expm1(y)); }

RaterBank init_bank(int num_raters, int latent_dim, double prior_var, double post_var, uint64_t seed) {
    if (num_raters < 1) throw ShapeError("init_bank needs at least one rater, got M=" + std::to_string(num_raters));
    if (latent_dim < 1) throw ShapeError("init_bank needs D >= 1, got D=" + std::to_string(latent_dim));
    if (!(prior_var > 0.0) || !(post_var >= 0.0))
        throw NumericError("init_bank variances must be positive, got prior_var=" + std::to_string(prior_var) +
                           " post_var=" + std::to_string(post_var));
    RaterBank bank;
    bank.latent_dim = latent_dim;
    bank.prior_var = prior_var;
    bank.diag_shift = softplus_inverse(std::sqrt(prior_var));
    Rng rng(seed);
    double std_post = std::sqrt(post_var);
    for (int r = 0; r <= num_raters; ++r) {
        GaussianLatent lat;
        lat.mu = Tensor({latent_dim});
        for (auto& v : lat.mu.data) v = static_cast<float>(rng.normal(0.0, std_post));
        lat.raw = Tensor({latent_dim, latent_dim});  // zeros: L = sqrt(prior_var) * I
        bank.latents.push_back(std::move(lat));
    }
    return bank;
}

std::vector<double> chol_matrix(const RaterBank& bank, int r) {
    bank.check_rater(r);
    int d = bank.latent_dim;
    const Tensor& raw = bank.latents[static_cast<size_t>(r)].raw;
    std::vector<double> l(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) {
            double v = static_cast<double>(raw.data[static_cast<size_t>(i) * d + j]);
            if (i == j) {
                double x = v + bank.diag_shift;
                l[static_cast<size_t>(i) * d + j] = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
            } else {
                l[static_cast<size_t>(i) * d + j] = v;
            }
        }
    return l;
}

std::vector<double> sample_value(const RaterBank& bank, int r, const std::vector<double>& eps) {
    bank.check_rater(r);
    int d = bank.latent_dim;
    if (static_cast<int>(eps.size()) != d)
        throw ShapeError("sample eps length " + std::to_string(eps.size()) + " != D=" + std::to_string(d));
    std::vector<double> l = chol_matrix(bank, r);
    const Tensor& mu = bank.latents[static_cast<size_t>(r)].mu;
    std::vector<double> z(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        double acc = static_cast<double>(mu.data[static_cast<size_t>(i)]);
        for (int j = 0; j <= i; ++j) acc += l[static_cast<size_t>(i) * d + j] * eps[static_cast<size_t>(j)];
        z[static_cast<size_t>(i)] = acc;
    }
    return z;
}

double kl_to_prior(const RaterBank& bank, int r) {
    bank.check_rater(r);
    int d = bank.latent_dim;
    double s2 = bank.prior_var;
    std::vector<double> l = chol_matrix(bank, r);
    const Tensor& mu = bank.latents[static_cast<size_t>(r)].mu;
    double trace = 0.0, musq = 0.0, logdet = 0.0;
    for (int i = 0; i < d; ++i) {
        musq += static_cast<double>(mu.data[static_cast<size_t>(i)]) * static_cast<double>(mu.data[static_cast<size_t>(i)]);
        logdet += 2.0 * std::log(l[static_cast<size_t>(i) * d + i]);
        for (int j = 0; j <= i; ++j) {
            double v = l[static_cast<size_t>(i) * d + j];
            trace += v * v;
        }
    }
    return 0.5 * (trace / s2 + musq / s2 - d + d * std::log(s2) - logdet);
}

bool cholesky_inplace(std::vector<double>& a, int d) {
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double acc = a[static_cast<size_t>(i) * d + j];
            for (int k = 0; k < j; ++k)
                acc -= a[static_cast<size_t>(i) * d + k] * a[static_cast<size_t>(j) * d + k];
            if (i == j) {
                if (!(acc > 0.0)) return false;
                a[static_cast<size_t>(i) * d + i] = std::sqrt(acc);
            } else {
                a[static_cast<size_t>(i) * d + j] = acc / a[static_cast<size_t>(j) * d + j];
            }
        }
        for (int j = i + 1; j < d; ++j) a[static_cast<size_t>(i) * d + j] = 0.0;
    }
    return true;
}

double bhattacharyya(const std::vector<double>& mu1, const std::vector<double>& chol1,
                     const std::vector<double>& mu2, const std::vector<double>& chol2, int d) {
    auto cov_of = [d](const std::vector<double>& l) {
        std::vector<double> s(static_cast<size_t>(d) * d, 0.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int k = 0; k <= std::min(i, j); ++k)
                    acc += l[static_cast<size_t>(i) * d + k] * l[static_cast<size_t>(j) * d + k];
                s[static_cast<size_t>(i) * d + j] = acc;
            }
        return s;
    };
    std::vector<double> avg = cov_of(chol1);
    {
        std::vector<double> s2 = cov_of(chol2);
        for (size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (avg[i] + s2[i]);
    }
    std::vector<double> fac = avg;
    if (!cholesky_inplace(fac, d)) {
        double mx = 0.0, mn = 1e300;
        for (int i = 0; i < d; ++i) {
            double v = avg[static_cast<size_t>(i) * d + i];
            mx = std::max(mx, v);
            mn = std::min(mn, v);
        }
        throw NumericError("bhattacharyya: singular average covariance, diagonal condition estimate " +
                           std::to_string(mn > 0 ? mx / mn : std::numeric_limits<double>::infinity()));
    }
    // Quadratic term: ||fac^-1 (mu1-mu2)||^2 via forward substitution.
    std::vector<double> y(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        double acc = mu1[static_cast<size_t>(i)] - mu2[static_cast<size_t>(i)];
        for (int j = 0; j < i; ++j) acc -= fac[static_cast<size_t>(i) * d + j] * y[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = acc / fac[static_cast<size_t>(i) * d + i];
    }
    double quad = 0.0;
    for (double v : y) quad += v * v;
    double logdet_avg = 0.0, logdet_1 = 0.0, logdet_2 = 0.0;
    for (int i = 0; i < d; ++i) {
        logdet_avg += 2.0 * std::log(fac[static_cast<size_t>(i) * d + i]);
        logdet_1 += 2.0 * std::log(chol1[static_cast<size_t>(i) * d + i]);
        logdet_2 += 2.0 * std::log(chol2[static_cast<size_t>(i) * d + i]);
    }
    return quad / 8.0 + 0.5 * (logdet_avg - 0.5 * (logdet_1 + logdet_2));
}

std::vector<double> pairwise_overlap(const RaterBank& bank) {
    int m = bank.size();
    int d = bank.latent_dim;
    std::vector<std::vector<double>> mus(static_cast<size_t>(m)), chols(static_cast<size_t>(m));
    for (int r = 0; r < m; ++r) {
        const Tensor& mu = bank.latents[static_cast<size_t>(r)].mu;
        mus[static_cast<size_t>(r)].assign(mu.data.begin(), mu.data.end());
        chols[static_cast<size_t>(r)] = chol_matrix(bank, r);
    }
    std::vector<double> out(static_cast<size_t>(m) * m, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) {
            double v = bhattacharyya(mus[static_cast<size_t>(i)], chols[static_cast<size_t>(i)],
                                     mus[static_cast<size_t>(j)], chols[static_cast<size_t>(j)], d);
            out[static_cast<size_t>(i) * m + j] = v;
            out[static_cast<size_t>(j) * m + i] = v;
        }
    return out;
}

template <typename S>
LatentNodes<S> bind_latent(GraphT<S>& g, const RaterBank& bank, int r, bool requires_grad) {
    bank.check_rater(r);
    LatentNodes<S> n;
    n.mu = g.leaf(bank.latents[static_cast<size_t>(r)].mu, requires_grad);
    n.raw = g.leaf(bank.latents[static_cast<size_t>(r)].raw, requires_grad);
    n.chol = g.tril_softplus_diag(n.raw, bank.diag_shift);
    return n;
}

template <typename S>
int build_sample(GraphT<S>& g, const LatentNodes<S>& latent, const std::vector<double>& eps) {
    Tensor e({static_cast<int>(eps.size())});
    for (size_t i = 0; i < eps.size(); ++i) e.data[i] = static_cast<float>(eps[i]);
    int eps_leaf = g.leaf(e, false);
    return g.add(latent.mu, g.matvec(latent.chol, eps_leaf));
}

template <typename S>
int build_kl(GraphT<S>& g, const LatentNodes<S>& latent, int latent_dim, double prior_var) {
    double s2 = prior_var;
    int trace = g.scale(g.sum_all(g.mul(latent.chol, latent.chol)), 1.0 / s2);
    int musq = g.scale(g.sum_all(g.mul(latent.mu, latent.mu)), 1.0 / s2);
    int logdet = g.scale(g.sum_all(g.log(g.diag_part(latent.chol))), 2.0);
    int inner = g.sub(g.add(trace, musq), logdet);
    inner = g.add_const(inner, -latent_dim + latent_dim * std::log(s2));
    return g.scale(inner, 0.5);
}

template LatentNodes<float> bind_latent(GraphT<float>&, const RaterBank&, int, bool);
template LatentNodes<double> bind_latent(GraphT<double>&, const RaterBank&, int, bool);
template int build_sample(GraphT<float>&, const LatentNodes<float>&, const std::vector<double>&);
template int build_sample(GraphT<double>&, const LatentNodes<double>&, const std::vector<double>&);
template int build_kl(GraphT<float>&, const LatentNodes<float>&, int, double);
template int build_kl(GraphT<double>&, const LatentNodes<double>&, int, double);

}  // namespace pionono
