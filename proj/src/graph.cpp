#include "pionono/graph.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>

namespace pionono {

Tensor nchw_to_nhwc(const Tensor& t) {
    if (t.ndim() != 4) throw ShapeError("expected 4-d image tensor, got " + shape_str(t.shape));
    int n = t.shape[0], c = t.shape[1], h = t.shape[2], w = t.shape[3];
    Tensor out({n, h, w, c});
    size_t hw = static_cast<size_t>(h) * w;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const float* src = t.data.data() + (static_cast<size_t>(i) * c + ch) * hw;
            float* dst = out.data.data() + static_cast<size_t>(i) * hw * c + ch;
            for (size_t p = 0; p < hw; ++p) dst[p * c] = src[p];
        }
    return out;
}

Tensor nhwc_to_nchw(const Tensor& t) {
    if (t.ndim() != 4) throw ShapeError("expected 4-d image tensor, got " + shape_str(t.shape));
    int n = t.shape[0], h = t.shape[1], w = t.shape[2], c = t.shape[3];
    Tensor out({n, c, h, w});
    size_t hw = static_cast<size_t>(h) * w;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const float* src = t.data.data() + static_cast<size_t>(i) * hw * c + ch;
            float* dst = out.data.data() + (static_cast<size_t>(i) * c + ch) * hw;
            for (size_t p = 0; p < hw; ++p) dst[p] = src[p * c];
        }
    return out;
}

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x > 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

constexpr double kGdlEps = 1e-6;
constexpr double kCeFloor = 1e-7;

}  // namespace

template <typename S>
typename GraphT<S>::Node& GraphT<S>::node(NodeId id) {
    if (id < 0 || id >= size()) throw ShapeError("node id " + std::to_string(id) + " out of range");
    return nodes_[static_cast<size_t>(id)];
}

template <typename S>
const typename GraphT<S>::Node& GraphT<S>::node(NodeId id) const {
    if (id < 0 || id >= size()) throw ShapeError("node id " + std::to_string(id) + " out of range");
    return nodes_[static_cast<size_t>(id)];
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::push(Node n) {
    for (int in : n.in)
        if (in < 0 || in >= size()) throw ShapeError("graph input precedes definition");
    if (!n.requires_grad)
        for (int in : n.in) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    nodes_.push_back(std::move(n));
    return size() - 1;
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.val = tensor_cast<S>(t);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::leaf_image(const Tensor& nchw, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.val = tensor_cast<S>(nchw_to_nhwc(nchw));
    n.image = true;
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::leaf_kernel(const Tensor& k, bool requires_grad) {
    if (k.ndim() != 4) throw ShapeError("kernel must be 4-d [Cout,Cin,kh,kw], got " + shape_str(k.shape));
    Node n;
    n.op = Op::Leaf;
    n.val = tensor_cast<S>(k);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, implemented as im2col + GEMM in channels-last
// layout. The patch column for an output pixel is ordered (ky,kx,ci) so that
// each (ky,kx) tap is one contiguous Cin run.
// ---------------------------------------------------------------------------

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::conv2d(NodeId x, NodeId kernel, NodeId bias, Padding pad) {
    const Node& xn = node(x);
    const Node& kn = node(kernel);
    const Node& bn = node(bias);
    if (!xn.image || xn.val.ndim() != 4)
        throw ShapeError("conv2d input must be a 4-d image node, got " + shape_str(xn.val.shape));
    if (kn.val.ndim() != 4)
        throw ShapeError("conv2d kernel must be [Cout,Cin,kh,kw], got " + shape_str(kn.val.shape));
    int n = xn.val.shape[0], h = xn.val.shape[1], w = xn.val.shape[2], cin = xn.val.shape[3];
    int cout = kn.val.shape[0], kcin = kn.val.shape[1], kh = kn.val.shape[2], kw = kn.val.shape[3];
    if (kcin != cin)
        throw ShapeError("conv2d channel mismatch: input has Cin=" + std::to_string(cin) +
                         ", kernel expects Cin=" + std::to_string(kcin));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw ShapeError("conv2d kernel spatial dims must be odd, got kh=" + std::to_string(kh) +
                         " kw=" + std::to_string(kw));
    if (bn.val.ndim() != 1 || bn.val.shape[0] != cout)
        throw ShapeError("conv2d bias must be [Cout]=[" + std::to_string(cout) + "], got " +
                         shape_str(bn.val.shape));
    int ho = pad == Padding::Same ? h : h - kh + 1;
    int wo = pad == Padding::Same ? w : w - kw + 1;
    if (ho <= 0 || wo <= 0)
        throw ShapeError("conv2d valid output would be empty: input " + shape_str(xn.val.shape) +
                         " kernel " + shape_str(kn.val.shape));

    Node out;
    out.op = Op::Conv2d;
    out.in = {x, kernel, bias};
    out.image = true;
    out.val = TensorT<S>({n, ho, wo, cout});

    ConvAux aux;
    aux.pad = pad;
    aux.kh = kh;
    aux.kw = kw;
    aux.cin = cin;
    aux.cout = cout;
    aux.k = kh * kw * cin;
    aux.ho = ho;
    aux.wo = wo;

    // Repack kernel [Cout,Cin,kh,kw] -> rows of (ky,kx,ci).
    aux.packed_w.resize(static_cast<size_t>(cout) * aux.k);
    for (int o = 0; o < cout; ++o)
        for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx)
                    aux.packed_w[static_cast<size_t>(o) * aux.k + (ky * kw + kx) * cin + ci] =
                        kn.val.data[((static_cast<size_t>(o) * cin + ci) * kh + ky) * kw + kx];

    size_t npix = static_cast<size_t>(n) * ho * wo;
    aux.patches.assign(npix * aux.k, S(0));
    int oy = pad == Padding::Same ? kh / 2 : 0;
    int ox = pad == Padding::Same ? kw / 2 : 0;
    for (int i = 0; i < n; ++i) {
        const S* img = xn.val.data.data() + static_cast<size_t>(i) * h * w * cin;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
                S* col = aux.patches.data() + (static_cast<size_t>(i) * ho * wo + static_cast<size_t>(y) * wo + xx) * aux.k;
                for (int ky = 0; ky < kh; ++ky) {
                    int yy = y + ky - oy;
                    if (yy < 0 || yy >= h) continue;  // stays zero
                    for (int kx = 0; kx < kw; ++kx) {
                        int xs = xx + kx - ox;
                        if (xs < 0 || xs >= w) continue;
                        std::memcpy(col + (ky * kw + kx) * cin,
                                    img + (static_cast<size_t>(yy) * w + xs) * cin,
                                    sizeof(S) * static_cast<size_t>(cin));
                    }
                }
            }
    }

    using RMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
    Eigen::Map<const RMat> a(aux.packed_w.data(), cout, aux.k);
    Eigen::Map<const CMat> b(aux.patches.data(), aux.k, static_cast<Eigen::Index>(npix));
    Eigen::Map<CMat> o(out.val.data.data(), cout, static_cast<Eigen::Index>(npix));
    o.noalias() = a * b;
    for (size_t p = 0; p < npix; ++p) {
        S* run = out.val.data.data() + p * cout;
        for (int c = 0; c < cout; ++c) run[c] += bn.val.data[c];
    }

    out.aux = std::move(aux);
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::relu(NodeId x) {
    Node n;
    n.op = Op::Relu;
    n.in = {x};
    n.image = node(x).image;
    n.val = node(x).val;
    for (auto& v : n.val.data) v = v > S(0) ? v : S(0);
    return push(std::move(n));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::maxpool2(NodeId x) {
    const Node& xn = node(x);
    if (!xn.image || xn.val.ndim() != 4)
        throw ShapeError("maxpool2 expects a 4-d image node, got " + shape_str(xn.val.shape));
    int n = xn.val.shape[0], h = xn.val.shape[1], w = xn.val.shape[2], c = xn.val.shape[3];
    if (h % 2 || w % 2)
        throw ShapeError("maxpool2 needs even spatial dims, got H=" + std::to_string(h) +
                         " W=" + std::to_string(w));
    Node out;
    out.op = Op::MaxPool2;
    out.in = {x};
    out.image = true;
    out.val = TensorT<S>({n, h / 2, w / 2, c});
    PoolAux aux;
    aux.argmax.resize(out.val.data.size());
    size_t idx = 0;
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; y += 2)
            for (int xx = 0; xx < w; xx += 2)
                for (int ch = 0; ch < c; ++ch) {
                    S best = S(0);
                    uint8_t win = 0;
                    for (uint8_t q = 0; q < 4; ++q) {
                        int yy = y + q / 2, xs = xx + q % 2;
                        S v = xn.val.data[((static_cast<size_t>(i) * h + yy) * w + xs) * c + ch];
                        if (q == 0 || v > best) {  // ties keep the earliest (top-left) element
                            best = v;
                            win = q;
                        }
                    }
                    out.val.data[idx] = best;
                    aux.argmax[idx] = win;
                    ++idx;
                }
    out.aux = std::move(aux);
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::upsample_nearest2x(NodeId x) {
    const Node& xn = node(x);
    if (!xn.image || xn.val.ndim() != 4)
        throw ShapeError("upsample_nearest2x expects a 4-d image node, got " + shape_str(xn.val.shape));
    int n = xn.val.shape[0], h = xn.val.shape[1], w = xn.val.shape[2], c = xn.val.shape[3];
    Node out;
    out.op = Op::Upsample2;
    out.in = {x};
    out.image = true;
    out.val = TensorT<S>({n, 2 * h, 2 * w, c});
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                std::memcpy(out.val.data.data() + ((static_cast<size_t>(i) * 2 * h + y) * 2 * w + xx) * c,
                            xn.val.data.data() + ((static_cast<size_t>(i) * h + y / 2) * w + xx / 2) * c,
                            sizeof(S) * static_cast<size_t>(c));
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::concat_channels(NodeId a, NodeId b) {
    const Node& an = node(a);
    const Node& bn = node(b);
    if (!an.image || !bn.image || an.val.ndim() != 4 || bn.val.ndim() != 4)
        throw ShapeError("concat_channels expects 4-d image nodes");
    for (int d = 0; d < 3; ++d)
        if (an.val.shape[d] != bn.val.shape[d])
            throw ShapeError("concat_channels batch/spatial mismatch: " + shape_str(an.val.shape) +
                             " vs " + shape_str(bn.val.shape));
    int n = an.val.shape[0], h = an.val.shape[1], w = an.val.shape[2];
    int ca = an.val.shape[3], cb = bn.val.shape[3];
    Node out;
    out.op = Op::ConcatC;
    out.in = {a, b};
    out.image = true;
    out.val = TensorT<S>({n, h, w, ca + cb});
    size_t npix = static_cast<size_t>(n) * h * w;
    for (size_t p = 0; p < npix; ++p) {
        S* dst = out.val.data.data() + p * (ca + cb);
        if (ca) std::memcpy(dst, an.val.data.data() + p * ca, sizeof(S) * static_cast<size_t>(ca));
        if (cb) std::memcpy(dst + ca, bn.val.data.data() + p * cb, sizeof(S) * static_cast<size_t>(cb));
    }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::softmax_channels(NodeId x) {
    const Node& xn = node(x);
    if (!xn.image || xn.val.ndim() != 4)
        throw ShapeError("softmax_channels expects a 4-d image node, got " + shape_str(xn.val.shape));
    int c = xn.val.shape[3];
    if (c < 2) throw ShapeError("softmax_channels needs C >= 2, got C=" + std::to_string(c));
    Node out;
    out.op = Op::SoftmaxC;
    out.in = {x};
    out.image = true;
    out.val = TensorT<S>(xn.val.shape);
    size_t npix = xn.val.data.size() / static_cast<size_t>(c);
    for (size_t p = 0; p < npix; ++p) {
        const S* in = xn.val.data.data() + p * c;
        S* o = out.val.data.data() + p * c;
        double mx = -1e300;
        for (int i = 0; i < c; ++i) {
            if (!std::isfinite(static_cast<double>(in[i])))
                throw NumericError("softmax_channels: non-finite logit at pixel " + std::to_string(p));
            mx = std::max(mx, static_cast<double>(in[i]));
        }
        double denom = 0.0;
        for (int i = 0; i < c; ++i) denom += std::exp(static_cast<double>(in[i]) - mx);
        for (int i = 0; i < c; ++i)
            o[i] = static_cast<S>(std::exp(static_cast<double>(in[i]) - mx) / denom);
    }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::tile_latent(const std::vector<NodeId>& zs, int h, int w) {
    if (zs.empty()) throw ShapeError("tile_latent needs at least one latent vector");
    int d = node(zs[0]).val.ndim() == 1 ? node(zs[0]).val.shape[0] : -1;
    for (NodeId z : zs)
        if (node(z).val.ndim() != 1 || node(z).val.shape[0] != d)
            throw ShapeError("tile_latent latents must all be vectors of equal length");
    int n = static_cast<int>(zs.size());
    Node out;
    out.op = Op::TileLatent;
    out.in = zs;
    out.image = true;
    out.val = TensorT<S>({n, h, w, d});
    for (int i = 0; i < n; ++i) {
        const S* z = node(zs[i]).val.data.data();
        S* base = out.val.data.data() + static_cast<size_t>(i) * h * w * d;
        for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p)
            std::memcpy(base + p * d, z, sizeof(S) * static_cast<size_t>(d));
    }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::binary(Op op, NodeId a, NodeId b) {
    const Node& an = node(a);
    const Node& bn = node(b);
    if (an.val.shape != bn.val.shape)
        throw ShapeError("elementwise op shape mismatch: " + shape_str(an.val.shape) + " vs " +
                         shape_str(bn.val.shape));
    Node out;
    out.op = op;
    out.in = {a, b};
    out.image = an.image;
    out.val = TensorT<S>(an.val.shape);
    for (size_t i = 0; i < out.val.data.size(); ++i) {
        S x = an.val.data[i], y = bn.val.data[i];
        out.val.data[i] = op == Op::Add ? x + y : op == Op::Sub ? x - y : x * y;
    }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
template <typename S>
typename GraphT<S>::NodeId GraphT<S>::sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
template <typename S>
typename GraphT<S>::NodeId GraphT<S>::mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::scale(NodeId x, double c) {
    Node out;
    out.op = Op::Scale;
    out.in = {x};
    out.image = node(x).image;
    out.c0 = c;
    out.val = node(x).val;
    for (auto& v : out.val.data) v = static_cast<S>(c * static_cast<double>(v));
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::add_const(NodeId x, double c) {
    Node out;
    out.op = Op::AddConst;
    out.in = {x};
    out.image = node(x).image;
    out.c0 = c;
    out.val = node(x).val;
    for (auto& v : out.val.data) v = static_cast<S>(static_cast<double>(v) + c);
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::sum_all(NodeId x) {
    Node out;
    out.op = Op::SumAll;
    out.in = {x};
    double acc = 0.0;
    for (S v : node(x).val.data) acc += static_cast<double>(v);
    out.val = TensorT<S>({1});
    out.val.data[0] = static_cast<S>(acc);
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::log(NodeId x) {
    Node out;
    out.op = Op::Log;
    out.in = {x};
    out.val = node(x).val;
    for (auto& v : out.val.data) {
        if (!(v > S(0))) throw NumericError("log of non-positive value");
        v = static_cast<S>(std::log(static_cast<double>(v)));
    }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::matvec(NodeId a, NodeId x) {
    const Node& an = node(a);
    const Node& xn = node(x);
    if (an.val.ndim() != 2 || xn.val.ndim() != 1 || an.val.shape[1] != xn.val.shape[0])
        throw ShapeError("matvec shape mismatch: " + shape_str(an.val.shape) + " * " +
                         shape_str(xn.val.shape));
    int d = an.val.shape[0], e = an.val.shape[1];
    Node out;
    out.op = Op::MatVec;
    out.in = {a, x};
    out.val = TensorT<S>({d});
    for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int j = 0; j < e; ++j)
            acc += static_cast<double>(an.val.data[static_cast<size_t>(i) * e + j]) *
                   static_cast<double>(xn.val.data[j]);
        out.val.data[i] = static_cast<S>(acc);
    }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::tril_softplus_diag(NodeId raw, double diag_shift) {
    const Node& rn = node(raw);
    if (rn.val.ndim() != 2 || rn.val.shape[0] != rn.val.shape[1])
        throw ShapeError("tril_softplus_diag expects a square matrix, got " + shape_str(rn.val.shape));
    int d = rn.val.shape[0];
    Node out;
    out.op = Op::TrilSoftplusDiag;
    out.in = {raw};
    out.c0 = diag_shift;
    out.val = TensorT<S>({d, d});
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            size_t k = static_cast<size_t>(i) * d + j;
            if (i > j)
                out.val.data[k] = rn.val.data[k];
            else if (i == j)
                out.val.data[k] = static_cast<S>(softplus(static_cast<double>(rn.val.data[k]) + diag_shift));
        }
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::diag_part(NodeId a) {
    const Node& an = node(a);
    if (an.val.ndim() != 2 || an.val.shape[0] != an.val.shape[1])
        throw ShapeError("diag_part expects a square matrix, got " + shape_str(an.val.shape));
    int d = an.val.shape[0];
    Node out;
    out.op = Op::DiagPart;
    out.in = {a};
    out.val = TensorT<S>({d});
    for (int i = 0; i < d; ++i) out.val.data[i] = an.val.data[static_cast<size_t>(i) * d + i];
    return push(std::move(out));
}

// ---------------------------------------------------------------------------
// Losses. probs is the channels-last softmax output [N,H,W,C]; targets are
// class maps with 255 = unannotated.
// ---------------------------------------------------------------------------

template <typename S>
static void check_loss_inputs(const TensorT<S>& probs, const LabelBatch& t) {
    if (probs.ndim() != 4)
        throw ShapeError("loss expects 4-d probability node, got " + shape_str(probs.shape));
    if (probs.shape[0] != t.n || probs.shape[1] != t.h || probs.shape[2] != t.w ||
        probs.shape[3] != t.num_classes)
        throw ShapeError("loss target dims [" + std::to_string(t.n) + "," + std::to_string(t.h) + "," +
                         std::to_string(t.w) + "] C=" + std::to_string(t.num_classes) +
                         " do not match probs " + shape_str(probs.shape));
    for (uint8_t v : t.labels)
        if (v != LabelBatch::kIgnore && v >= t.num_classes)
            throw DataError("target class id " + std::to_string(int(v)) + " >= C=" +
                            std::to_string(t.num_classes));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::generalized_dice_loss(NodeId probs, LabelBatch target) {
    const Node& pn = node(probs);
    check_loss_inputs(pn.val, target);
    int c = target.num_classes;
    size_t npix = target.pixel_count();
    std::vector<double> vol(c, 0.0), inter(c, 0.0), denom_c(c, 0.0);
    long long valid = 0;
    for (size_t p = 0; p < npix; ++p) {
        uint8_t lab = target.labels[p];
        if (lab == LabelBatch::kIgnore) continue;
        ++valid;
        const S* y = pn.val.data.data() + p * c;
        for (int i = 0; i < c; ++i) denom_c[i] += static_cast<double>(y[i]);
        vol[lab] += 1.0;
        inter[lab] += static_cast<double>(y[lab]);
        denom_c[lab] += 1.0;
    }
    if (valid == 0) throw NumericError("generalized_dice_loss: batch has no annotated pixels");
    LossAux aux;
    aux.target = std::move(target);
    aux.class_terms.resize(c);
    double numer = 0.0, denom = 0.0;
    for (int i = 0; i < c; ++i) {
        double wc = 1.0 / (kGdlEps + vol[i] * vol[i]);
        aux.class_terms[i] = wc;
        numer += wc * inter[i];
        denom += wc * denom_c[i];
    }
    aux.numer = numer;
    aux.denom = denom;
    aux.valid = valid;
    Node out;
    out.op = Op::Gdl;
    out.in = {probs};
    out.val = TensorT<S>({1});
    out.val.data[0] = static_cast<S>(1.0 - 2.0 * numer / denom);
    out.aux = std::move(aux);
    return push(std::move(out));
}

template <typename S>
typename GraphT<S>::NodeId GraphT<S>::cross_entropy_loss(NodeId probs, LabelBatch target) {
    const Node& pn = node(probs);
    check_loss_inputs(pn.val, target);
    int c = target.num_classes;
    size_t npix = target.pixel_count();
    double acc = 0.0;
    long long valid = 0;
    for (size_t p = 0; p < npix; ++p) {
        uint8_t lab = target.labels[p];
        if (lab == LabelBatch::kIgnore) continue;
        ++valid;
        double y = static_cast<double>(pn.val.data[p * c + lab]);
        acc += -std::log(std::max(y, kCeFloor));
    }
    if (valid == 0) throw NumericError("cross_entropy_loss: batch has no annotated pixels");
    LossAux aux;
    aux.target = std::move(target);
    aux.valid = valid;
    Node out;
    out.op = Op::Ce;
    out.in = {probs};
    out.val = TensorT<S>({1});
    out.val.data[0] = static_cast<S>(acc / static_cast<double>(valid));
    out.aux = std::move(aux);
    return push(std::move(out));
}

// ---------------------------------------------------------------------------
// Backward.
// ---------------------------------------------------------------------------

template <typename S>
const TensorT<S>& GraphT<S>::grad(NodeId id) const {
    if (!ran_backward_) throw NumericError("grad requested before backward()");
    return node(id).grad;
}

template <typename S>
Tensor GraphT<S>::value_nchw(NodeId id) const {
    const Node& n = node(id);
    Tensor t = tensor_cast<float>(n.val);
    return n.image ? nhwc_to_nchw(t) : t;
}

template <typename S>
Tensor GraphT<S>::grad_nchw(NodeId id) const {
    const Node& n = node(id);
    if (!ran_backward_) throw NumericError("grad requested before backward()");
    Tensor t = tensor_cast<float>(n.grad);
    return n.image ? nhwc_to_nchw(t) : t;
}

template <typename S>
void GraphT<S>::backward(NodeId loss) {
    Node& ln = node(loss);
    if (ln.val.numel() != 1)
        throw ShapeError("backward seed must be scalar, got " + shape_str(ln.val.shape));
    for (auto& n : nodes_) {
        n.grad.shape = n.val.shape;
        n.grad.data.assign(n.val.data.size(), S(0));
    }
    touched_.assign(nodes_.size(), 0);
    touched_[static_cast<size_t>(loss)] = 1;
    ln.grad.data[0] = S(1);
    for (NodeId id = loss; id >= 0; --id) {
        if (!touched_[static_cast<size_t>(id)]) continue;
        if (!nodes_[static_cast<size_t>(id)].requires_grad) continue;
        if (nodes_[static_cast<size_t>(id)].op == Op::Leaf) continue;
        backward_node(id);
        for (int in : nodes_[static_cast<size_t>(id)].in)
            if (nodes_[static_cast<size_t>(in)].requires_grad) touched_[static_cast<size_t>(in)] = 1;
    }
    ran_backward_ = true;
}

template <typename S>
void GraphT<S>::backward_node(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const auto g = [&]() -> const std::vector<S>& { return n.grad.data; };
    auto gin = [&](int slot) -> std::vector<S>& { return nodes_[static_cast<size_t>(n.in[slot])].grad.data; };
    auto vin = [&](int slot) -> const std::vector<S>& { return nodes_[static_cast<size_t>(n.in[slot])].val.data; };
    auto wants = [&](int slot) { return nodes_[static_cast<size_t>(n.in[slot])].requires_grad; };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Conv2d: {
            auto& aux = std::get<ConvAux>(n.aux);
            const Node& xn = nodes_[static_cast<size_t>(n.in[0])];
            int nb = xn.val.shape[0], h = xn.val.shape[1], w = xn.val.shape[2];
            int cin = aux.cin, cout = aux.cout, k = aux.k;
            size_t npix = static_cast<size_t>(nb) * aux.ho * aux.wo;
            using RMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
            using CMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
            Eigen::Map<const CMat> go(g().data(), cout, static_cast<Eigen::Index>(npix));
            if (wants(2)) {  // bias
                std::vector<double> acc(static_cast<size_t>(cout), 0.0);
                for (size_t p = 0; p < npix; ++p) {
                    const S* run = g().data() + p * cout;
                    for (int c = 0; c < cout; ++c) acc[static_cast<size_t>(c)] += static_cast<double>(run[c]);
                }
                for (int c = 0; c < cout; ++c) gin(2)[static_cast<size_t>(c)] += static_cast<S>(acc[static_cast<size_t>(c)]);
            }
            if (wants(1)) {  // kernel
                RMat da(cout, k);
                Eigen::Map<const CMat> b(aux.patches.data(), k, static_cast<Eigen::Index>(npix));
                da.noalias() = go * b.transpose();
                auto& dk = gin(1);
                for (int o = 0; o < cout; ++o)
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < aux.kh; ++ky)
                            for (int kx = 0; kx < aux.kw; ++kx)
                                dk[((static_cast<size_t>(o) * cin + ci) * aux.kh + ky) * aux.kw + kx] +=
                                    da(o, (ky * aux.kw + kx) * cin + ci);
            }
            if (wants(0)) {  // input: col2im of packed_w^T * dOut
                CMat gcols(k, static_cast<Eigen::Index>(npix));
                Eigen::Map<const RMat> a(aux.packed_w.data(), cout, k);
                gcols.noalias() = a.transpose() * go;
                auto& dx = gin(0);
                int oy = aux.pad == Padding::Same ? aux.kh / 2 : 0;
                int ox = aux.pad == Padding::Same ? aux.kw / 2 : 0;
                for (int i = 0; i < nb; ++i)
                    for (int y = 0; y < aux.ho; ++y)
                        for (int xx = 0; xx < aux.wo; ++xx) {
                            const S* col = gcols.data() +
                                (static_cast<size_t>(i) * aux.ho * aux.wo + static_cast<size_t>(y) * aux.wo + xx) * k;
                            for (int ky = 0; ky < aux.kh; ++ky) {
                                int yy = y + ky - oy;
                                if (yy < 0 || yy >= h) continue;
                                for (int kx = 0; kx < aux.kw; ++kx) {
                                    int xs = xx + kx - ox;
                                    if (xs < 0 || xs >= w) continue;
                                    S* dst = dx.data() + (static_cast<size_t>(i) * h * w +
                                                          static_cast<size_t>(yy) * w + xs) * cin;
                                    const S* src = col + (ky * aux.kw + kx) * cin;
                                    for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
                                }
                            }
                        }
            }
            break;
        }
        case Op::Relu: {
            if (!wants(0)) break;
            auto& dx = gin(0);
            const auto& x = vin(0);
            for (size_t i = 0; i < dx.size(); ++i)
                if (x[i] > S(0)) dx[i] += g()[i];
            break;
        }
        case Op::MaxPool2: {
            if (!wants(0)) break;
            auto& aux = std::get<PoolAux>(n.aux);
            const Node& xn = nodes_[static_cast<size_t>(n.in[0])];
            int nb = xn.val.shape[0], h = xn.val.shape[1], w = xn.val.shape[2], c = xn.val.shape[3];
            auto& dx = gin(0);
            size_t idx = 0;
            for (int i = 0; i < nb; ++i)
                for (int y = 0; y < h; y += 2)
                    for (int xx = 0; xx < w; xx += 2)
                        for (int ch = 0; ch < c; ++ch) {
                            uint8_t q = aux.argmax[idx];
                            int yy = y + q / 2, xs = xx + q % 2;
                            dx[((static_cast<size_t>(i) * h + yy) * w + xs) * c + ch] += g()[idx];
                            ++idx;
                        }
            break;
        }
        case Op::Upsample2: {
            if (!wants(0)) break;
            const Node& xn = nodes_[static_cast<size_t>(n.in[0])];
            int nb = xn.val.shape[0], h = xn.val.shape[1], w = xn.val.shape[2], c = xn.val.shape[3];
            auto& dx = gin(0);
            for (int i = 0; i < nb; ++i)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx) {
                        const S* src = g().data() + ((static_cast<size_t>(i) * 2 * h + y) * 2 * w + xx) * c;
                        S* dst = dx.data() + ((static_cast<size_t>(i) * h + y / 2) * w + xx / 2) * c;
                        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                    }
            break;
        }
        case Op::ConcatC: {
            const Node& an = nodes_[static_cast<size_t>(n.in[0])];
            const Node& bn = nodes_[static_cast<size_t>(n.in[1])];
            int ca = an.val.shape[3], cb = bn.val.shape[3];
            size_t npix = an.val.data.size() / std::max(ca, 1);
            if (ca == 0) npix = bn.val.data.size() / std::max(cb, 1);
            for (size_t p = 0; p < npix; ++p) {
                const S* src = g().data() + p * (ca + cb);
                if (wants(0)) {
                    S* dst = gin(0).data() + p * ca;
                    for (int i = 0; i < ca; ++i) dst[i] += src[i];
                }
                if (wants(1)) {
                    S* dst = gin(1).data() + p * cb;
                    for (int i = 0; i < cb; ++i) dst[i] += src[i + ca];
                }
            }
            break;
        }
        case Op::SoftmaxC: {
            if (!wants(0)) break;
            int c = n.val.shape[3];
            size_t npix = n.val.data.size() / static_cast<size_t>(c);
            auto& dx = gin(0);
            for (size_t p = 0; p < npix; ++p) {
                const S* y = n.val.data.data() + p * c;
                const S* gy = g().data() + p * c;
                double dot = 0.0;
                for (int i = 0; i < c; ++i) dot += static_cast<double>(gy[i]) * static_cast<double>(y[i]);
                for (int i = 0; i < c; ++i)
                    dx[p * c + i] += static_cast<S>(static_cast<double>(y[i]) *
                                                    (static_cast<double>(gy[i]) - dot));
            }
            break;
        }
        case Op::TileLatent: {
            int nb = n.val.shape[0], h = n.val.shape[1], w = n.val.shape[2], d = n.val.shape[3];
            for (int i = 0; i < nb; ++i) {
                if (!wants(i)) continue;
                std::vector<double> acc(static_cast<size_t>(d), 0.0);
                const S* base = g().data() + static_cast<size_t>(i) * h * w * d;
                for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p)
                    for (int j = 0; j < d; ++j) acc[static_cast<size_t>(j)] += static_cast<double>(base[p * d + j]);
                auto& dz = gin(i);
                for (int j = 0; j < d; ++j) dz[static_cast<size_t>(j)] += static_cast<S>(acc[static_cast<size_t>(j)]);
            }
            break;
        }
        case Op::Add:
        case Op::Sub: {
            double sgn = n.op == Op::Sub ? -1.0 : 1.0;
            if (wants(0))
                for (size_t i = 0; i < g().size(); ++i) gin(0)[i] += g()[i];
            if (wants(1))
                for (size_t i = 0; i < g().size(); ++i) gin(1)[i] += static_cast<S>(sgn * static_cast<double>(g()[i]));
            break;
        }
        case Op::Mul: {
            if (wants(0))
                for (size_t i = 0; i < g().size(); ++i) gin(0)[i] += g()[i] * vin(1)[i];
            if (wants(1))
                for (size_t i = 0; i < g().size(); ++i) gin(1)[i] += g()[i] * vin(0)[i];
            break;
        }
        case Op::Scale: {
            if (!wants(0)) break;
            for (size_t i = 0; i < g().size(); ++i)
                gin(0)[i] += static_cast<S>(n.c0 * static_cast<double>(g()[i]));
            break;
        }
        case Op::AddConst: {
            if (!wants(0)) break;
            for (size_t i = 0; i < g().size(); ++i) gin(0)[i] += g()[i];
            break;
        }
        case Op::SumAll: {
            if (!wants(0)) break;
            S s = g()[0];
            for (auto& v : gin(0)) v += s;
            break;
        }
        case Op::Log: {
            if (!wants(0)) break;
            for (size_t i = 0; i < g().size(); ++i) gin(0)[i] += g()[i] / vin(0)[i];
            break;
        }
        case Op::MatVec: {
            const Node& an = nodes_[static_cast<size_t>(n.in[0])];
            int d = an.val.shape[0], e = an.val.shape[1];
            if (wants(0))
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < e; ++j)
                        gin(0)[static_cast<size_t>(i) * e + j] += g()[static_cast<size_t>(i)] * vin(1)[static_cast<size_t>(j)];
            if (wants(1))
                for (int j = 0; j < e; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < d; ++i)
                        acc += static_cast<double>(vin(0)[static_cast<size_t>(i) * e + j]) *
                               static_cast<double>(g()[static_cast<size_t>(i)]);
                    gin(1)[static_cast<size_t>(j)] += static_cast<S>(acc);
                }
            break;
        }
        case Op::TrilSoftplusDiag: {
            if (!wants(0)) break;
            int d = n.val.shape[0];
            for (int i = 0; i < d; ++i)
                for (int j = 0; j <= i; ++j) {
                    size_t k = static_cast<size_t>(i) * d + j;
                    if (i == j)
                        gin(0)[k] += static_cast<S>(static_cast<double>(g()[k]) *
                                                    sigmoid(static_cast<double>(vin(0)[k]) + n.c0));
                    else
                        gin(0)[k] += g()[k];
                }
            break;
        }
        case Op::DiagPart: {
            if (!wants(0)) break;
            int d = n.val.shape[0];
            for (int i = 0; i < d; ++i) gin(0)[static_cast<size_t>(i) * d + i] += g()[static_cast<size_t>(i)];
            break;
        }
        case Op::Gdl: {
            if (!wants(0)) break;
            auto& aux = std::get<LossAux>(n.aux);
            int c = aux.target.num_classes;
            double g0 = static_cast<double>(g()[0]);
            double inv_d2 = 1.0 / (aux.denom * aux.denom);
            auto& dx = gin(0);
            size_t npix = aux.target.pixel_count();
            for (size_t p = 0; p < npix; ++p) {
                uint8_t lab = aux.target.labels[p];
                if (lab == LabelBatch::kIgnore) continue;
                for (int i = 0; i < c; ++i) {
                    double t = (i == lab) ? 1.0 : 0.0;
                    double d = -2.0 * aux.class_terms[static_cast<size_t>(i)] *
                               (t * aux.denom - aux.numer) * inv_d2;
                    dx[p * c + i] += static_cast<S>(g0 * d);
                }
            }
            break;
        }
        case Op::Ce: {
            if (!wants(0)) break;
            auto& aux = std::get<LossAux>(n.aux);
            int c = aux.target.num_classes;
            double g0 = static_cast<double>(g()[0]);
            auto& dx = gin(0);
            const auto& y = vin(0);
            size_t npix = aux.target.pixel_count();
            for (size_t p = 0; p < npix; ++p) {
                uint8_t lab = aux.target.labels[p];
                if (lab == LabelBatch::kIgnore) continue;
                double yv = static_cast<double>(y[p * c + lab]);
                if (yv > kCeFloor)
                    dx[p * c + lab] += static_cast<S>(-g0 / (static_cast<double>(aux.valid) * yv));
            }
            break;
        }
    }
}

template class GraphT<float>;
template class GraphT<double>;

// ---------------------------------------------------------------------------
// Tensor-level wrappers.
// ---------------------------------------------------------------------------

namespace ops {

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding pad) {
    Graph g;
    auto x = g.leaf_image(input);
    auto k = g.leaf_kernel(kernel, false);
    auto b = g.leaf(bias);
    return g.value_nchw(g.conv2d(x, k, b, pad));
}

Tensor relu(const Tensor& x) {
    Graph g;
    return g.value_nchw(g.relu(g.leaf(x)));
}

Tensor softmax_channels(const Tensor& logits) {
    Graph g;
    return g.value_nchw(g.softmax_channels(g.leaf_image(logits)));
}

Tensor upsample_nearest2x(const Tensor& x) {
    Graph g;
    return g.value_nchw(g.upsample_nearest2x(g.leaf_image(x)));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    Graph g;
    return g.value_nchw(g.concat_channels(g.leaf_image(a), g.leaf_image(b)));
}

Tensor maxpool2(const Tensor& x) {
    Graph g;
    return g.value_nchw(g.maxpool2(g.leaf_image(x)));
}

}  // namespace ops

}  // namespace pionono
