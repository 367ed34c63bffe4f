#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pionono/graph.hpp"
#include "pionono/tensor.hpp"

namespace pionono {

struct NamedParam {
    std::string name;
    Tensor value;
};

// Segmentation backbone plus latent-conditioned head.
//
// Backbone: three encoder blocks (two 3x3 convs + ReLU each, then 2x maxpool)
// at 16/32/64 channels, a 64-channel bottleneck conv, and a mirrored decoder
// (nearest-2x upsample, skip concatenation, one 3x3 conv per level), closed by
// a linear 1x1 conv to the 16-channel feature map. Head: the latent vector is
// broadcast to image size, concatenated onto the features, and passed through
// 1x1 convs 16 -> 16 -> C with ReLU between, then channel softmax.
struct SegModel {
    int num_classes = 4;
    int feature_channels = 16;
    int latent_dim = 8;
    std::vector<NamedParam> params;

    int index_of(const std::string& name) const;
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
};

SegModel make_seg_model(int num_classes, int latent_dim, uint64_t seed);

// Memoizes one leaf per parameter on a tape so repeated bindings share nodes
// and gradients accumulate in place.
template <typename S>
class ModelBinder {
public:
    ModelBinder(GraphT<S>& g, const SegModel& model) : g_(g), model_(model), nodes_(model.params.size(), -1) {}
    int bind(const std::string& name);
    GraphT<S>& graph() { return g_; }
    const SegModel& model() const { return model_; }
    // (param index, node) pairs actually bound on this tape.
    std::vector<std::pair<int, int>> bound() const;

private:
    GraphT<S>& g_;
    const SegModel& model_;
    std::vector<int> nodes_;
};

template <typename S>
int build_features(ModelBinder<S>& b, int image_node);

// probs for one latent broadcast node (shape [N,H,W,D]) already on the tape.
template <typename S>
int build_head(ModelBinder<S>& b, int features_node, int latent_tile_node);

// --- tensor-level convenience ------------------------------------------------

// image [N,3,H,W] -> features [N,L,H,W]; H and W must be divisible by 8.
Tensor extract_features(const SegModel& model, const Tensor& image);

// features [N,L,H,W] + one latent vector -> class probabilities [N,C,H,W].
Tensor segment(const SegModel& model, const Tensor& features, const std::vector<float>& z);

// Losses over NCHW tensors with one-hot targets; an all-zero pixel column
// marks an unannotated pixel and is skipped.
double generalized_dice_loss(const Tensor& probs, const Tensor& target_onehot);
double cross_entropy_loss(const Tensor& probs, const Tensor& target_onehot);

// Conversion helpers shared by trainer and tests.
LabelBatch onehot_to_labels(const Tensor& onehot_nchw);
Tensor labels_to_onehot(const LabelBatch& labels);

}  // namespace pionono
