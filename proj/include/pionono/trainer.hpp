#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pionono/data.hpp"
#include "pionono/latent.hpp"
#include "pionono/network.hpp"
#include "pionono/rng.hpp"
#include "pionono/tensor.hpp"

namespace pionono {

struct TrainConfig {
    int epochs = 100;
    double lr_net = 0.0001;
    double lr_latent = 0.02;
    int decay_start_epoch = 40;
    double decay_factor = 1.1;
    double lambda = 0.0005;
    int K_train = 1;
    int batch_size = 3;
    std::string loss = "dice";  // dice | cross_entropy
    uint64_t seed = 0;
    int D = 8;
    double prior_var = 2.0;
    double post_var = 8.0;
    std::string kl_scope = "batch";  // batch: mean KL over raters in the batch; all: over every rater
    bool augment = true;             // seeded flips and 90-degree rotations
    int checkpoint_interval = 0;     // write every N epochs; 0 = final only

    void validate() const;
};

// Strict flat key=value parsing; keys are exactly the TrainConfig field names.
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig parse_config_file(const std::string& path);
std::string config_to_string(const TrainConfig& cfg);

double lr_schedule(int epoch, double base_lr, const TrainConfig& cfg);

struct AdamState {
    Tensor m, v;
    long long step = 0;
};

struct AdamHyper {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Standard bias-corrected Adam; throws NumericError naming the parameter on a
// non-finite gradient.
void adam_update(const std::string& name, Tensor& param, const Tensor& grad, AdamState& state,
                 double lr, const AdamHyper& hyper = {});

struct TrainItem {
    Tensor image;   // [3,H,W]
    int rater = 0;  // bank index; gold annotations use bank.gold_index()
    ClassMap mask;
};

struct ElboStats {
    double loss = 0, ll = 0, kl = 0;
};

struct ParamGrads {
    std::vector<Tensor> model;              // aligned with SegModel::params
    std::vector<Tensor> mu, raw;            // per bank latent, zeros when untouched
};

// One ELBO evaluation with K_train reparametrized samples per element.
// Gradients flow to the network parameters and to the latents of raters
// present in the batch (plus the KL scope).
ElboStats elbo_step(const SegModel& model, const RaterBank& bank, const std::vector<TrainItem>& batch,
                    const TrainConfig& cfg, Rng& rng, ParamGrads* grads_out);

struct OptState {
    std::vector<AdamState> model;     // aligned with SegModel::params
    std::vector<AdamState> mu, raw;   // per bank latent
};

OptState make_opt_state(const SegModel& model, const RaterBank& bank);

struct TrainResult {
    std::string checkpoint_path;
    std::string log_path;
    double final_loss = 0, final_ll = 0, final_kl = 0;
};

// Full optimization loop over shuffled (image, rater) annotation pairs.
// Writes <out_dir>/metrics.csv and <out_dir>/checkpoint.pnn.
TrainResult train(const MultiRaterDataset& dataset, const TrainConfig& cfg, const std::string& out_dir,
                  SegModel* model_out = nullptr, RaterBank* bank_out = nullptr);

// Checkpoint container: model, latent bank, optimizer state.
struct Checkpoint {
    SegModel model;
    RaterBank bank;
    OptState opt;
};

void save_checkpoint(const SegModel& model, const RaterBank& bank, const OptState& opt,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pionono
