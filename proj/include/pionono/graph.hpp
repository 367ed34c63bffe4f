#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "pionono/tensor.hpp"

namespace pionono {

enum class Padding { Same, Valid };

// Dense class-index targets for the segmentation losses. Value 255 marks
// unannotated pixels, which drop out of every loss reduction.
struct LabelBatch {
    int n = 0, h = 0, w = 0, num_classes = 0;
    std::vector<uint8_t> labels;  // n*h*w, values in [0,C) or 255

    static constexpr uint8_t kIgnore = 255;
    size_t pixel_count() const { return static_cast<size_t>(n) * h * w; }
};

// Reverse-mode tape over dense tensors.
//
// Image tensors are held internally in channels-last order (the node shape
// reads [N,H,W,C]); leaf_image/value_nchw convert from and to the public
// batch-channels-height-width convention. Convolution inner products run in
// the tape scalar type; loss and statistic reductions always accumulate in
// double. Instantiated for float (training/inference) and double (gradient
// oracles); see graph.cpp.
template <typename S>
class GraphT {
public:
    using NodeId = int;

    GraphT() = default;
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    // --- leaves ------------------------------------------------------------
    NodeId leaf(const Tensor& t, bool requires_grad = false);
    // [N,C,H,W] tensor, converted to the internal channels-last layout.
    NodeId leaf_image(const Tensor& nchw, bool requires_grad = false);
    // Convolution kernel [Cout,Cin,kh,kw]; layout preserved.
    NodeId leaf_kernel(const Tensor& k, bool requires_grad = true);

    // --- image ops ----------------------------------------------------------
    NodeId conv2d(NodeId x, NodeId kernel, NodeId bias, Padding pad);
    NodeId relu(NodeId x);
    NodeId maxpool2(NodeId x);
    NodeId upsample_nearest2x(NodeId x);
    NodeId concat_channels(NodeId a, NodeId b);
    NodeId softmax_channels(NodeId x);
    // One latent vector (shape [D]) per batch element, broadcast to [N,H,W,D].
    NodeId tile_latent(const std::vector<NodeId>& zs, int h, int w);

    // --- generic ops ---------------------------------------------------------
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, double c);
    NodeId add_const(NodeId x, double c);
    NodeId sum_all(NodeId x);  // -> scalar [1]
    NodeId log(NodeId x);
    NodeId matvec(NodeId a, NodeId x);  // [D,E] * [E] -> [D]
    // Lower-triangular factor from raw parameters: strict lower copied,
    // diagonal mapped through softplus(raw + diag_shift), upper zero.
    NodeId tril_softplus_diag(NodeId raw, double diag_shift);
    NodeId diag_part(NodeId a);  // [D,D] -> [D]

    // --- losses ---------------------------------------------------------------
    NodeId generalized_dice_loss(NodeId probs, LabelBatch target);
    NodeId cross_entropy_loss(NodeId probs, LabelBatch target);

    // --- evaluation -------------------------------------------------------------
    void backward(NodeId loss);

    const TensorT<S>& value(NodeId id) const { return node(id).val; }
    const TensorT<S>& grad(NodeId id) const;
    // Exports in the public convention: image nodes permuted back to NCHW.
    Tensor value_nchw(NodeId id) const;
    Tensor grad_nchw(NodeId id) const;

    int size() const { return static_cast<int>(nodes_.size()); }
    bool is_image(NodeId id) const { return node(id).image; }

private:
    enum class Op {
        Leaf, Conv2d, Relu, MaxPool2, Upsample2, ConcatC, SoftmaxC, TileLatent,
        Add, Sub, Mul, Scale, AddConst, SumAll, Log, MatVec, TrilSoftplusDiag,
        DiagPart, Gdl, Ce
    };

    struct ConvAux {
        Padding pad{};
        int kh = 0, kw = 0, cin = 0, cout = 0, k = 0, ho = 0, wo = 0;
        std::vector<S> packed_w;  // [Cout][kh*kw*Cin]
        std::vector<S> patches;   // column-major K x (N*Ho*Wo)
    };
    struct PoolAux {
        std::vector<uint8_t> argmax;  // 0..3, scan-order winner per output
    };
    struct LossAux {
        LabelBatch target;
        // Cached forward terms reused by backward (double precision).
        std::vector<double> class_terms;
        double denom = 0.0, numer = 0.0;
        long long valid = 0;
    };

    struct Node {
        Op op{};
        std::vector<int> in;
        TensorT<S> val;
        TensorT<S> grad;
        bool image = false;
        bool requires_grad = false;
        double c0 = 0.0;
        std::variant<std::monostate, ConvAux, PoolAux, LossAux> aux;
    };

    Node& node(NodeId id);
    const Node& node(NodeId id) const;
    NodeId push(Node n);
    NodeId binary(Op op, NodeId a, NodeId b);

    void backward_node(NodeId id);

    std::vector<Node> nodes_;
    std::vector<uint8_t> touched_;
    bool ran_backward_ = false;
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

Tensor nchw_to_nhwc(const Tensor& t);
Tensor nhwc_to_nchw(const Tensor& t);

// One-shot wrappers over a throwaway tape, for direct tensor-level use. All
// take and return NCHW tensors.
namespace ops {
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding pad);
Tensor relu(const Tensor& x);
Tensor softmax_channels(const Tensor& logits);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor maxpool2(const Tensor& x);
}  // namespace ops

}  // namespace pionono
