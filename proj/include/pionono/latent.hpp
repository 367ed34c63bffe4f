#pragma once

#include <cstdint>
#include <vector>

#include "pionono/graph.hpp"
#include "pionono/tensor.hpp"

namespace pionono {

// Per-rater Gaussian posterior q(z|r) = N(mu, L L^T). The factor is stored as
// raw parameters: strict lower triangle used directly, diagonal mapped
// through a shifted softplus so it stays positive under unconstrained
// optimization. raw == 0 on the diagonal yields L_dd = sqrt(prior_var).
struct GaussianLatent {
    Tensor mu;   // [D]
    Tensor raw;  // [D,D]
};

struct RaterBank {
    std::vector<GaussianLatent> latents;  // M+1 entries, index M is the gold rater
    int latent_dim = 0;
    double prior_var = 2.0;   // prior is N(0, prior_var * I), never trained
    double diag_shift = 0.0;  // softplus^-1(sqrt(prior_var))

    int num_raters() const { return static_cast<int>(latents.size()) - 1; }
    int gold_index() const { return num_raters(); }
    int size() const { return static_cast<int>(latents.size()); }
    void check_rater(int r) const;
};

double softplus_inverse(double y);

// M human raters plus the gold slot. Means are i.i.d. N(0, post_var); factors
// start at sqrt(prior_var) * I. Deterministic per seed.
RaterBank init_bank(int num_raters, int latent_dim, double prior_var, double post_var, uint64_t seed);

// Effective lower-triangular factor, row-major D*D, in double.
std::vector<double> chol_matrix(const RaterBank& bank, int r);

// z = mu + L * eps.
std::vector<double> sample_value(const RaterBank& bank, int r, const std::vector<double>& eps);

// Closed-form KL(q(z|r) || N(0, prior_var*I)).
double kl_to_prior(const RaterBank& bank, int r);

// Bhattacharyya distance between two Gaussians given means and lower factors.
double bhattacharyya(const std::vector<double>& mu1, const std::vector<double>& chol1,
                     const std::vector<double>& mu2, const std::vector<double>& chol2, int d);

// Symmetric (M+1)x(M+1) Bhattacharyya distance matrix, row-major.
std::vector<double> pairwise_overlap(const RaterBank& bank);

// In-place Cholesky of a symmetric positive definite row-major matrix;
// returns false on a non-positive pivot.
bool cholesky_inplace(std::vector<double>& a, int d);

// --- tape builders ---------------------------------------------------------

template <typename S>
struct LatentNodes {
    int mu = -1;
    int raw = -1;
    int chol = -1;  // tril_softplus_diag(raw)
};

template <typename S>
LatentNodes<S> bind_latent(GraphT<S>& g, const RaterBank& bank, int r, bool requires_grad = true);

template <typename S>
int build_sample(GraphT<S>& g, const LatentNodes<S>& latent, const std::vector<double>& eps);

template <typename S>
int build_kl(GraphT<S>& g, const LatentNodes<S>& latent, int latent_dim, double prior_var);

}  // namespace pionono
