#include "pionono/network.hpp"

#include <cmath>

#include "pionono/errors.hpp"
#include "pionono/rng.hpp"

namespace pionono {

int SegModel::index_of(const std::string& name) const {
    for (size_t i = 0; i < params.size(); ++i)
        if (params[i].name == name) return static_cast<int>(i);
    return -1;
}

Tensor& SegModel::param(const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw DataError("unknown model parameter '" + name + "'");
    return params[static_cast<size_t>(i)].value;
}

const Tensor& SegModel::param(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw DataError("unknown model parameter '" + name + "'");
    return params[static_cast<size_t>(i)].value;
}

SegModel make_seg_model(int num_classes, int latent_dim, uint64_t seed) {
    if (num_classes < 2) throw ShapeError("model needs C >= 2, got " + std::to_string(num_classes));
    if (latent_dim < 1) throw ShapeError("model needs D >= 1, got " + std::to_string(latent_dim));
    SegModel m;
    m.num_classes = num_classes;
    m.latent_dim = latent_dim;
    Rng rng(seed);
    auto conv = [&](const std::string& name, int cout, int cin, int kh, int kw) {
        Tensor w({cout, cin, kh, kw});
        double std = std::sqrt(2.0 / (static_cast<double>(cin) * kh * kw));
        for (auto& v : w.data) v = static_cast<float>(rng.normal(0.0, std));
        m.params.push_back({name + ".w", std::move(w)});
        m.params.push_back({name + ".b", Tensor({cout})});
    };
    conv("enc1.conv1", 16, 3, 3, 3);
    conv("enc1.conv2", 16, 16, 3, 3);
    conv("enc2.conv1", 32, 16, 3, 3);
    conv("enc2.conv2", 32, 32, 3, 3);
    conv("enc3.conv1", 64, 32, 3, 3);
    conv("enc3.conv2", 64, 64, 3, 3);
    conv("bott.conv1", 64, 64, 3, 3);
    conv("dec3.conv1", 64, 128, 3, 3);
    conv("dec2.conv1", 32, 96, 3, 3);
    conv("dec1.conv1", 16, 48, 3, 3);
    conv("feat.conv1", m.feature_channels, 16, 1, 1);
    conv("head.conv1", 16, m.feature_channels + latent_dim, 1, 1);
    conv("head.conv2", 16, 16, 1, 1);
    conv("head.conv3", num_classes, 16, 1, 1);
    return m;
}

template <typename S>
int ModelBinder<S>::bind(const std::string& name) {
    int i = model_.index_of(name);
    if (i < 0) throw DataError("unknown model parameter '" + name + "'");
    int& node = nodes_[static_cast<size_t>(i)];
    if (node < 0) {
        const Tensor& t = model_.params[static_cast<size_t>(i)].value;
        node = t.ndim() == 4 ? g_.leaf_kernel(t, true) : g_.leaf(t, true);
    }
    return node;
}

template <typename S>
std::vector<std::pair<int, int>> ModelBinder<S>::bound() const {
    std::vector<std::pair<int, int>> out;
    for (size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i] >= 0) out.emplace_back(static_cast<int>(i), nodes_[i]);
    return out;
}

template <typename S>
static int conv_block(ModelBinder<S>& b, int x, const std::string& name, bool relu_after = true) {
    auto& g = b.graph();
    int y = g.conv2d(x, b.bind(name + ".w"), b.bind(name + ".b"), Padding::Same);
    return relu_after ? g.relu(y) : y;
}

template <typename S>
int build_features(ModelBinder<S>& b, int image_node) {
    auto& g = b.graph();
    int e1 = conv_block(b, conv_block(b, image_node, "enc1.conv1"), "enc1.conv2");
    int e2 = conv_block(b, conv_block(b, g.maxpool2(e1), "enc2.conv1"), "enc2.conv2");
    int e3 = conv_block(b, conv_block(b, g.maxpool2(e2), "enc3.conv1"), "enc3.conv2");
    int bott = conv_block(b, g.maxpool2(e3), "bott.conv1");
    int d3 = conv_block(b, g.concat_channels(g.upsample_nearest2x(bott), e3), "dec3.conv1");
    int d2 = conv_block(b, g.concat_channels(g.upsample_nearest2x(d3), e2), "dec2.conv1");
    int d1 = conv_block(b, g.concat_channels(g.upsample_nearest2x(d2), e1), "dec1.conv1");
    return conv_block(b, d1, "feat.conv1", false);
}

template <typename S>
int build_head(ModelBinder<S>& b, int features_node, int latent_tile_node) {
    auto& g = b.graph();
    int x = g.concat_channels(features_node, latent_tile_node);
    x = conv_block(b, x, "head.conv1");
    x = conv_block(b, x, "head.conv2");
    x = conv_block(b, x, "head.conv3", false);
    return g.softmax_channels(x);
}

template class ModelBinder<float>;
template class ModelBinder<double>;
template int build_features(ModelBinder<float>&, int);
template int build_features(ModelBinder<double>&, int);
template int build_head(ModelBinder<float>&, int, int);
template int build_head(ModelBinder<double>&, int, int);

Tensor extract_features(const SegModel& model, const Tensor& image) {
    if (image.ndim() != 4 || image.shape[1] != 3)
        throw ShapeError("extract_features expects [N,3,H,W], got " + shape_str(image.shape));
    if (image.shape[2] % 8 || image.shape[3] % 8)
        throw ShapeError("extract_features needs H and W divisible by 8 (three 2x downsamplings); "
                         "got H=" + std::to_string(image.shape[2]) + " W=" + std::to_string(image.shape[3]) +
                         " - pad the input");
    Graph g;
    ModelBinder<float> b(g, model);
    int feats = build_features(b, g.leaf_image(image, false));
    return g.value_nchw(feats);
}

Tensor segment(const SegModel& model, const Tensor& features, const std::vector<float>& z) {
    if (features.ndim() != 4 || features.shape[1] != model.feature_channels)
        throw ShapeError("segment expects [N," + std::to_string(model.feature_channels) + ",H,W] features, got " +
                         shape_str(features.shape));
    if (static_cast<int>(z.size()) != model.latent_dim)
        throw ShapeError("segment latent dim " + std::to_string(z.size()) + " != D=" +
                         std::to_string(model.latent_dim));
    Graph g;
    ModelBinder<float> b(g, model);
    int feats = g.leaf_image(features, false);
    Tensor zt({model.latent_dim});
    zt.data.assign(z.begin(), z.end());
    int zn = g.leaf(zt, false);
    std::vector<int> zs(static_cast<size_t>(features.shape[0]), zn);
    int tile = g.tile_latent(zs, features.shape[2], features.shape[3]);
    return g.value_nchw(build_head(b, feats, tile));
}

LabelBatch onehot_to_labels(const Tensor& onehot) {
    if (onehot.ndim() != 4) throw ShapeError("one-hot target must be [N,C,H,W], got " + shape_str(onehot.shape));
    LabelBatch lb;
    lb.n = onehot.shape[0];
    lb.num_classes = onehot.shape[1];
    lb.h = onehot.shape[2];
    lb.w = onehot.shape[3];
    lb.labels.assign(lb.pixel_count(), LabelBatch::kIgnore);
    size_t hw = static_cast<size_t>(lb.h) * lb.w;
    for (int n = 0; n < lb.n; ++n)
        for (size_t p = 0; p < hw; ++p) {
            int hits = 0, cls = -1;
            for (int c = 0; c < lb.num_classes; ++c) {
                float v = onehot.data[(static_cast<size_t>(n) * lb.num_classes + c) * hw + p];
                if (v == 1.0f) {
                    ++hits;
                    cls = c;
                } else if (v != 0.0f) {
                    throw DataError("target is not one-hot: entry " + std::to_string(v) + " at pixel " +
                                    std::to_string(p));
                }
            }
            if (hits > 1) throw DataError("target is not one-hot: multiple classes set at pixel " + std::to_string(p));
            if (hits == 1) lb.labels[static_cast<size_t>(n) * hw + p] = static_cast<uint8_t>(cls);
        }
    return lb;
}

Tensor labels_to_onehot(const LabelBatch& lb) {
    Tensor t({lb.n, lb.num_classes, lb.h, lb.w});
    size_t hw = static_cast<size_t>(lb.h) * lb.w;
    for (int n = 0; n < lb.n; ++n)
        for (size_t p = 0; p < hw; ++p) {
            uint8_t lab = lb.labels[static_cast<size_t>(n) * hw + p];
            if (lab == LabelBatch::kIgnore) continue;
            t.data[(static_cast<size_t>(n) * lb.num_classes + lab) * hw + p] = 1.0f;
        }
    return t;
}

double generalized_dice_loss(const Tensor& probs, const Tensor& target_onehot) {
    Graph g;
    int p = g.leaf_image(probs, false);
    return static_cast<double>(g.value(g.generalized_dice_loss(p, onehot_to_labels(target_onehot))).data[0]);
}

double cross_entropy_loss(const Tensor& probs, const Tensor& target_onehot) {
    Graph g;
    int p = g.leaf_image(probs, false);
    return static_cast<double>(g.value(g.cross_entropy_loss(p, onehot_to_labels(target_onehot))).data[0]);
}

}  // namespace pionono
