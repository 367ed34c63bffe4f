#include "pionono/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pionono/errors.hpp"

namespace fs = std::filesystem;

namespace pionono {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs < 0) throw UsageError("epochs must be >= 0");
    if (!(lr_net > 0) || !(lr_latent > 0)) throw UsageError("learning rates must be > 0");
    if (lambda < 0) throw UsageError("lambda must be >= 0");
    if (K_train < 1) throw UsageError("K_train must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (D < 1) throw UsageError("D must be >= 1");
    if (!(prior_var > 0) || !(post_var >= 0)) throw UsageError("variances must be positive");
    if (!(decay_factor > 0)) throw UsageError("decay_factor must be > 0");
    if (decay_start_epoch < 0) throw UsageError("decay_start_epoch must be >= 0");
    if (loss != "dice" && loss != "cross_entropy")
        throw UsageError("loss must be 'dice' or 'cross_entropy', got '" + loss + "'");
    if (kl_scope != "batch" && kl_scope != "all")
        throw UsageError("kl_scope must be 'batch' or 'all', got '" + kl_scope + "'");
    if (checkpoint_interval < 0) throw UsageError("checkpoint_interval must be >= 0");
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw UsageError("config key '" + key + "' expects true/false, got '" + v + "'");
}

double parse_num(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw UsageError("");
        return x;
    } catch (...) {
        throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

}  // namespace

void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "epochs") cfg.epochs = static_cast<int>(parse_num(value, key));
    else if (key == "lr_net") cfg.lr_net = parse_num(value, key);
    else if (key == "lr_latent") cfg.lr_latent = parse_num(value, key);
    else if (key == "decay_start_epoch") cfg.decay_start_epoch = static_cast<int>(parse_num(value, key));
    else if (key == "decay_factor") cfg.decay_factor = parse_num(value, key);
    else if (key == "lambda") cfg.lambda = parse_num(value, key);
    else if (key == "K_train") cfg.K_train = static_cast<int>(parse_num(value, key));
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_num(value, key));
    else if (key == "loss") cfg.loss = value;
    else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_num(value, key));
    else if (key == "D") cfg.D = static_cast<int>(parse_num(value, key));
    else if (key == "prior_var") cfg.prior_var = parse_num(value, key);
    else if (key == "post_var") cfg.post_var = parse_num(value, key);
    else if (key == "kl_scope") cfg.kl_scope = value;
    else if (key == "augment") cfg.augment = parse_bool(value, key);
    else if (key == "checkpoint_interval") cfg.checkpoint_interval = static_cast<int>(parse_num(value, key));
    else throw UsageError("unknown config key '" + key + "'");
}

TrainConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file " + path);
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t\r"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        apply_config_entry(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

std::string config_to_string(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "epochs = " << cfg.epochs << "\n";
    os << "lr_net = " << cfg.lr_net << "\n";
    os << "lr_latent = " << cfg.lr_latent << "\n";
    os << "decay_start_epoch = " << cfg.decay_start_epoch << "\n";
    os << "decay_factor = " << cfg.decay_factor << "\n";
    os << "lambda = " << cfg.lambda << "\n";
    os << "K_train = " << cfg.K_train << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "loss = " << cfg.loss << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "D = " << cfg.D << "\n";
    os << "prior_var = " << cfg.prior_var << "\n";
    os << "post_var = " << cfg.post_var << "\n";
    os << "kl_scope = " << cfg.kl_scope << "\n";
    os << "augment = " << (cfg.augment ? "true" : "false") << "\n";
    os << "checkpoint_interval = " << cfg.checkpoint_interval << "\n";
    return os.str();
}

double lr_schedule(int epoch, double base_lr, const TrainConfig& cfg) {
    if (epoch < 0) throw UsageError("epoch must be >= 0");
    if (epoch < cfg.decay_start_epoch) return base_lr;
    return base_lr / std::pow(cfg.decay_factor, epoch - (cfg.decay_start_epoch - 1));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_update(const std::string& name, Tensor& param, const Tensor& grad, AdamState& state,
                 double lr, const AdamHyper& hp) {
    if (param.shape != grad.shape)
        throw ShapeError("adam_update shape mismatch for " + name + ": " + shape_str(param.shape) +
                         " vs grad " + shape_str(grad.shape));
    if (state.m.shape != param.shape) {
        state.m = Tensor(param.shape);
        state.v = Tensor(param.shape);
        state.step = 0;
    }
    for (float g : grad.data)
        if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + name);
    state.step += 1;
    double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < param.data.size(); ++i) {
        double g = static_cast<double>(grad.data[i]);
        double m = hp.beta1 * static_cast<double>(state.m.data[i]) + (1.0 - hp.beta1) * g;
        double v = hp.beta2 * static_cast<double>(state.v.data[i]) + (1.0 - hp.beta2) * g * g;
        state.m.data[i] = static_cast<float>(m);
        state.v.data[i] = static_cast<float>(v);
        double update = lr * (m / bc1) / (std::sqrt(v / bc2) + hp.eps);
        param.data[i] = static_cast<float>(static_cast<double>(param.data[i]) - update);
    }
}

// ---------------------------------------------------------------------------
// ELBO step
// ---------------------------------------------------------------------------

ElboStats elbo_step(const SegModel& model, const RaterBank& bank, const std::vector<TrainItem>& batch,
                    const TrainConfig& cfg, Rng& rng, ParamGrads* grads_out) {
    if (batch.empty()) throw DataError("elbo_step: empty batch");
    const int n = static_cast<int>(batch.size());
    const int h = batch[0].mask.h, w = batch[0].mask.w;
    const int c = model.num_classes;

    Tensor images({n, 3, h, w});
    LabelBatch targets;
    targets.n = n;
    targets.h = h;
    targets.w = w;
    targets.num_classes = c;
    targets.labels.resize(targets.pixel_count());
    for (int i = 0; i < n; ++i) {
        const TrainItem& item = batch[static_cast<size_t>(i)];
        bank.check_rater(item.rater);
        if (item.image.shape != std::vector<int>{3, h, w} || item.mask.h != h || item.mask.w != w)
            throw ShapeError("elbo_step: batch element " + std::to_string(i) + " dims differ");
        std::copy(item.image.data.begin(), item.image.data.end(),
                  images.data.begin() + static_cast<size_t>(i) * 3 * h * w);
        for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p) {
            uint8_t v = item.mask.label[p];
            if (v != kIgnoreLabel && v >= c)
                throw DataError("elbo_step: mask class id " + std::to_string(int(v)) + " >= C=" + std::to_string(c));
            targets.labels[static_cast<size_t>(i) * h * w + p] = v;
        }
    }

    Graph g;
    ModelBinder<float> binder(g, model);
    int image_node = g.leaf_image(images, false);
    int feats = build_features(binder, image_node);

    std::map<int, LatentNodes<float>> latents;
    for (const TrainItem& item : batch)
        if (!latents.count(item.rater)) latents.emplace(item.rater, bind_latent(g, bank, item.rater, true));

    int ll_node = -1;
    for (int k = 0; k < cfg.K_train; ++k) {
        std::vector<int> zs;
        zs.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            std::vector<double> eps(static_cast<size_t>(bank.latent_dim));
            for (auto& e : eps) e = rng.normal();
            zs.push_back(build_sample(g, latents.at(batch[static_cast<size_t>(i)].rater), eps));
        }
        int probs = build_head(binder, feats, g.tile_latent(zs, h, w));
        int loss_k = cfg.loss == "dice" ? g.generalized_dice_loss(probs, targets)
                                        : g.cross_entropy_loss(probs, targets);
        ll_node = k == 0 ? loss_k : g.add(ll_node, loss_k);
    }
    if (cfg.K_train > 1) ll_node = g.scale(ll_node, 1.0 / cfg.K_train);

    std::vector<int> kl_raters;
    if (cfg.kl_scope == "all") {
        for (int r = 0; r < bank.size(); ++r) kl_raters.push_back(r);
        for (int r : kl_raters)
            if (!latents.count(r)) latents.emplace(r, bind_latent(g, bank, r, true));
    } else {
        for (const auto& [r, nodes] : latents) kl_raters.push_back(r);
    }
    int kl_node = -1;
    for (int r : kl_raters) {
        int k = build_kl(g, latents.at(r), bank.latent_dim, bank.prior_var);
        kl_node = kl_node < 0 ? k : g.add(kl_node, k);
    }
    kl_node = g.scale(kl_node, 1.0 / static_cast<double>(kl_raters.size()));

    int total = g.add(ll_node, g.scale(kl_node, cfg.lambda));
    ElboStats stats;
    stats.loss = static_cast<double>(g.value(total).data[0]);
    stats.ll = static_cast<double>(g.value(ll_node).data[0]);
    stats.kl = static_cast<double>(g.value(kl_node).data[0]);
    if (!std::isfinite(stats.loss)) throw NumericError("elbo_step: non-finite loss");

    if (grads_out) {
        g.backward(total);
        grads_out->model.clear();
        for (const auto& p : model.params) grads_out->model.push_back(Tensor(p.value.shape));
        for (const auto& [idx, node] : binder.bound())
            grads_out->model[static_cast<size_t>(idx)] = tensor_cast<float>(g.grad(node));
        grads_out->mu.assign(static_cast<size_t>(bank.size()), Tensor());
        grads_out->raw.assign(static_cast<size_t>(bank.size()), Tensor());
        for (int r = 0; r < bank.size(); ++r) {
            if (latents.count(r)) {
                grads_out->mu[static_cast<size_t>(r)] = tensor_cast<float>(g.grad(latents.at(r).mu));
                grads_out->raw[static_cast<size_t>(r)] = tensor_cast<float>(g.grad(latents.at(r).raw));
            } else {
                grads_out->mu[static_cast<size_t>(r)] = Tensor(bank.latents[static_cast<size_t>(r)].mu.shape);
                grads_out->raw[static_cast<size_t>(r)] = Tensor(bank.latents[static_cast<size_t>(r)].raw.shape);
            }
        }
    }
    return stats;
}

OptState make_opt_state(const SegModel& model, const RaterBank& bank) {
    OptState opt;
    opt.model.resize(model.params.size());
    opt.mu.resize(static_cast<size_t>(bank.size()));
    opt.raw.resize(static_cast<size_t>(bank.size()));
    return opt;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "PNN1", u32 version, u32 tensor count, then per tensor
// u16 name length, name, u8 ndim, u32 dims, little-endian f32 payload.
// ---------------------------------------------------------------------------

namespace {

void write_tensor(std::ofstream& out, const std::string& name, const Tensor& t) {
    uint16_t len = static_cast<uint16_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(name.data(), len);
    uint8_t nd = static_cast<uint8_t>(t.ndim());
    out.write(reinterpret_cast<const char*>(&nd), 1);
    for (int d : t.shape) {
        uint32_t v = static_cast<uint32_t>(d);
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
}

Tensor scalar_tensor(double v) {
    Tensor t({1});
    t.data[0] = static_cast<float>(v);
    return t;
}

struct TensorFile {
    std::vector<std::pair<std::string, Tensor>> entries;
    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return t;
        throw DataError("checkpoint is missing tensor '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return true;
        return false;
    }
};

TensorFile read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "PNN1", 4) != 0)
        throw DataError("bad checkpoint magic in " + path);
    uint32_t version = 0, count = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " (expected 1) in " + path);
    in.read(reinterpret_cast<char*>(&count), 4);
    if (!in) throw DataError("truncated checkpoint header in " + path);
    TensorFile tf;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 2);
        std::string name(len, '\0');
        in.read(name.data(), len);
        uint8_t nd = 0;
        in.read(reinterpret_cast<char*>(&nd), 1);
        std::vector<int> shape(nd);
        for (int d = 0; d < nd; ++d) {
            uint32_t v = 0;
            in.read(reinterpret_cast<char*>(&v), 4);
            shape[static_cast<size_t>(d)] = static_cast<int>(v);
        }
        if (!in) throw DataError("truncated checkpoint tensor header in " + path);
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
        if (in.gcount() != static_cast<std::streamsize>(t.data.size() * 4))
            throw DataError("truncated checkpoint payload for '" + name + "' in " + path);
        tf.entries.emplace_back(std::move(name), std::move(t));
    }
    return tf;
}

void adam_entries(std::vector<std::pair<std::string, const AdamState*>>& out, const std::string& prefix,
                  const AdamState& st) {
    out.emplace_back(prefix, &st);
}

}  // namespace

void save_checkpoint(const SegModel& model, const RaterBank& bank, const OptState& opt,
                     const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> entries;
    entries.emplace_back("meta.num_classes", scalar_tensor(model.num_classes));
    entries.emplace_back("meta.feature_channels", scalar_tensor(model.feature_channels));
    entries.emplace_back("meta.latent_dim", scalar_tensor(bank.latent_dim));
    entries.emplace_back("meta.num_raters", scalar_tensor(bank.num_raters()));
    entries.emplace_back("meta.prior_var", scalar_tensor(bank.prior_var));
    for (const auto& p : model.params) entries.emplace_back("model." + p.name, p.value);
    for (int r = 0; r < bank.size(); ++r) {
        entries.emplace_back("latent." + std::to_string(r) + ".mu", bank.latents[static_cast<size_t>(r)].mu);
        entries.emplace_back("latent." + std::to_string(r) + ".raw", bank.latents[static_cast<size_t>(r)].raw);
    }
    std::vector<std::pair<std::string, const AdamState*>> adam;
    for (size_t i = 0; i < opt.model.size(); ++i)
        adam_entries(adam, "adam.model." + model.params[i].name, opt.model[i]);
    for (size_t r = 0; r < opt.mu.size(); ++r) {
        adam_entries(adam, "adam.latent." + std::to_string(r) + ".mu", opt.mu[r]);
        adam_entries(adam, "adam.latent." + std::to_string(r) + ".raw", opt.raw[r]);
    }
    for (const auto& [prefix, st] : adam) {
        if (st->m.numel() == 0) continue;  // untouched optimizer slots are omitted
        entries.emplace_back(prefix + ".m", st->m);
        entries.emplace_back(prefix + ".v", st->v);
        entries.emplace_back(prefix + ".t", scalar_tensor(static_cast<double>(st->step)));
    }

    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint " + tmp);
        out.write("PNN1", 4);
        uint32_t version = 1, count = static_cast<uint32_t>(entries.size());
        out.write(reinterpret_cast<const char*>(&version), 4);
        out.write(reinterpret_cast<const char*>(&count), 4);
        for (const auto& [name, t] : entries) write_tensor(out, name, t);
        if (!out) throw DataError("write failed for checkpoint " + tmp);
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    TensorFile tf = read_tensor_file(path);
    int num_classes = static_cast<int>(tf.get("meta.num_classes").data[0]);
    int latent_dim = static_cast<int>(tf.get("meta.latent_dim").data[0]);
    int num_raters = static_cast<int>(tf.get("meta.num_raters").data[0]);
    double prior_var = static_cast<double>(tf.get("meta.prior_var").data[0]);

    Checkpoint ck;
    ck.model = make_seg_model(num_classes, latent_dim, 0);
    for (auto& p : ck.model.params) {
        const Tensor& t = tf.get("model." + p.name);
        if (t.shape != p.value.shape)
            throw DataError("checkpoint tensor model." + p.name + " has shape " + shape_str(t.shape) +
                            ", expected " + shape_str(p.value.shape));
        p.value = t;
    }
    ck.bank = init_bank(num_raters, latent_dim, prior_var, 0.0, 0);
    for (int r = 0; r < ck.bank.size(); ++r) {
        ck.bank.latents[static_cast<size_t>(r)].mu = tf.get("latent." + std::to_string(r) + ".mu");
        ck.bank.latents[static_cast<size_t>(r)].raw = tf.get("latent." + std::to_string(r) + ".raw");
    }
    ck.opt = make_opt_state(ck.model, ck.bank);
    auto load_adam = [&](const std::string& prefix, AdamState& st) {
        if (!tf.has(prefix + ".m")) return;
        st.m = tf.get(prefix + ".m");
        st.v = tf.get(prefix + ".v");
        st.step = static_cast<long long>(tf.get(prefix + ".t").data[0]);
    };
    for (size_t i = 0; i < ck.model.params.size(); ++i)
        load_adam("adam.model." + ck.model.params[i].name, ck.opt.model[i]);
    for (size_t r = 0; r < ck.opt.mu.size(); ++r) {
        load_adam("adam.latent." + std::to_string(r) + ".mu", ck.opt.mu[r]);
        load_adam("adam.latent." + std::to_string(r) + ".raw", ck.opt.raw[r]);
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult train(const MultiRaterDataset& dataset, const TrainConfig& cfg, const std::string& out_dir,
                  SegModel* model_out, RaterBank* bank_out) {
    cfg.validate();
    const int m = dataset.meta.num_raters;
    const int c = dataset.meta.num_classes;

    struct Pair {
        int image;
        int rater;  // m == gold
    };
    std::vector<Pair> pairs;
    for (int i = 0; i < dataset.num_images(); ++i) {
        for (int r = 0; r < m; ++r)
            if (dataset.has_mask(i, r)) pairs.push_back({i, r});
        if (dataset.has_gold(i)) pairs.push_back({i, m});
    }
    if (pairs.empty()) throw DataError("train: dataset has no annotation pairs");

    SegModel model = make_seg_model(c, cfg.D, derive_seed(cfg.seed, 0x6d6f64656cULL));
    RaterBank bank = init_bank(m, cfg.D, cfg.prior_var, cfg.post_var, derive_seed(cfg.seed, 0x62616e6bULL));
    OptState opt = make_opt_state(model, bank);
    Rng rng(derive_seed(cfg.seed, 0x747261696eULL));

    fs::create_directories(out_dir);
    TrainResult result;
    result.log_path = out_dir + "/metrics.csv";
    result.checkpoint_path = out_dir + "/checkpoint.pnn";

    std::ofstream log(result.log_path);
    if (!log) throw DataError("cannot write " + result.log_path);
    log << "epoch,loss,ll,kl,lr_net,lr_latent\n";
    log.flush();

    ParamGrads grads;
    const bool square = dataset.num_images() > 0 && dataset.images[0].h == dataset.images[0].w;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr_n = lr_schedule(epoch, cfg.lr_net, cfg);
        double lr_l = lr_schedule(epoch, cfg.lr_latent, cfg);

        // seeded Fisher-Yates shuffle
        for (size_t i = pairs.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng.below(i));
            std::swap(pairs[i - 1], pairs[j]);
        }

        double ep_loss = 0, ep_ll = 0, ep_kl = 0;
        long long ep_items = 0;
        for (size_t start = 0; start < pairs.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(pairs.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<TrainItem> batch;
            for (size_t idx = start; idx < end; ++idx) {
                const Pair& pr = pairs[idx];
                TrainItem item;
                item.image = image_to_tensor(dataset.images[static_cast<size_t>(pr.image)]);
                item.rater = pr.rater;
                item.mask = pr.rater == m ? dataset.gold(pr.image) : dataset.mask(pr.image, pr.rater);
                if (cfg.augment) {
                    int code = static_cast<int>(rng.below(square ? 8 : 4));
                    apply_d4_image(item.image, code);
                    apply_d4_mask(item.mask, code);
                }
                batch.push_back(std::move(item));
            }
            ElboStats stats = elbo_step(model, bank, batch, cfg, rng, &grads);
            for (size_t i = 0; i < model.params.size(); ++i)
                adam_update(model.params[i].name, model.params[i].value, grads.model[i], opt.model[i], lr_n);
            for (int r = 0; r < bank.size(); ++r) {
                adam_update("latent." + std::to_string(r) + ".mu", bank.latents[static_cast<size_t>(r)].mu,
                            grads.mu[static_cast<size_t>(r)], opt.mu[static_cast<size_t>(r)], lr_l);
                adam_update("latent." + std::to_string(r) + ".raw", bank.latents[static_cast<size_t>(r)].raw,
                            grads.raw[static_cast<size_t>(r)], opt.raw[static_cast<size_t>(r)], lr_l);
            }
            double nb = static_cast<double>(end - start);
            ep_loss += stats.loss * nb;
            ep_ll += stats.ll * nb;
            ep_kl += stats.kl * nb;
            ep_items += static_cast<long long>(nb);
        }
        ep_loss /= static_cast<double>(ep_items);
        ep_ll /= static_cast<double>(ep_items);
        ep_kl /= static_cast<double>(ep_items);
        char row[192];
        std::snprintf(row, sizeof row, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", epoch, ep_loss, ep_ll, ep_kl, lr_n, lr_l);
        log << row;
        log.flush();
        result.final_loss = ep_loss;
        result.final_ll = ep_ll;
        result.final_kl = ep_kl;

        if (cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0)
            save_checkpoint(model, bank, opt, result.checkpoint_path);
    }

    save_checkpoint(model, bank, opt, result.checkpoint_path);
    if (model_out) *model_out = model;
    if (bank_out) *bank_out = bank;
    return result;
}

}  // namespace pionono
