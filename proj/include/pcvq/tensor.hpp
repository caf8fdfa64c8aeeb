#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pcvq/common.hpp"
#include "pcvq/rng.hpp"

namespace pcvq {

// Immutable value: shape plus shared flat storage (64-bit throughout; the
// gradient-check tolerances are unreachable in 32-bit). `node` links the value
// into the current tape when gradients are being recorded; -1 means constant.
struct Tensor {
    Shape dims;
    std::shared_ptr<std::vector<double>> data;
    int node = -1;

    Tensor() = default;

    [[nodiscard]] std::int64_t numel() const { return numel_of(dims); }
    [[nodiscard]] const double* ptr() const { return data->data(); }
    [[nodiscard]] double* mut() { return data->data(); }
    [[nodiscard]] double scalar() const;

    [[nodiscard]] int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

    static Tensor zeros(Shape dims);
    static Tensor full(Shape dims, double value);
    static Tensor from(Shape dims, std::vector<double> values);
    // He-style uniform fan-in init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    static Tensor he_uniform(Shape dims, int fan_in, Rng& rng);
    static Tensor uniform(Shape dims, double lo, double hi, Rng& rng);

    [[nodiscard]] Tensor clone() const;
};

// Reverse-mode tape. One tape per training step: watch the parameters, build
// the forward graph through the op functions below, call backward() on the
// scalar loss, then read gradients per watched tensor. Nodes are op records;
// backward walks them in reverse, accumulating into per-node grad buffers.
class Tape {
public:
    // Registers a leaf (parameter) so gradients accumulate for it.
    void watch(Tensor& t);

    // Runs reverse pass from a scalar output. Seeds d(loss)/d(loss) = 1.
    void backward(const Tensor& loss);

    // Gradient buffer of a watched/intermediate tensor after backward().
    [[nodiscard]] const std::vector<double>& grad(const Tensor& t) const;
    [[nodiscard]] bool has_grad(const Tensor& t) const;

    [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }

    // -- op recording internals (used by the op free functions) --
    int alloc_node(const Shape& dims);
    void record(std::function<void(Tape&)> fn) { records_.push_back(std::move(fn)); }
    std::vector<double>& grad_buffer(int node);

    // NaN/Inf guard applied to every op output; throws NumericError.
    static void check_finite(const Tensor& t, const char* op);

private:
    struct NodeInfo {
        std::int64_t numel;
    };
    std::vector<NodeInfo> nodes_;
    std::vector<std::function<void(Tape&)>> records_;
    std::vector<std::vector<double>> grads_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All are pure in (inputs, state) and deterministic:
// repeated invocation yields bitwise-identical outputs.
// ---------------------------------------------------------------------------

// 2-D convolution, NCHW. Odd kernels; output size (H + 2*pad - kh)/stride + 1
// must divide exactly, otherwise ShapeError.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride, int padding);

// Internal-grade convolution with independent per-side padding and arbitrary
// rectangular kernels; backs conv2d and the masked/shifted PixelCNN stacks.
Tensor conv2d_general(Tape& tape, const Tensor& input, const Tensor& kernel, int stride,
                      int pad_top, int pad_bottom, int pad_left, int pad_right);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double c);
// Adds a per-channel bias [C] over an NCHW tensor.
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor tanh_op(Tape& tape, const Tensor& x);

// 2x2 mean pooling, H and W must be even.
Tensor avg_pool2x(Tape& tape, const Tensor& x);
// Nearest-neighbour 2x upsampling.
Tensor upsample_nearest2x(Tape& tape, const Tensor& x);
// Concatenate along channel dim (NCHW).
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
// View of channels [from, to) of an NCHW tensor.
Tensor slice_channels(Tape& tape, const Tensor& x, int from, int to);
// Shifts rows down by one, zero-filling the first row (causal row shift).
Tensor shift_down1(Tape& tape, const Tensor& x);

// Row lookup: table [K,C], indices as a flat grid [N,H,W] -> output [N,C,H,W].
Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int>& indices,
                 int n, int h, int w);

// Inverted dropout: scales by 1/(1-p) at train time, identity at eval.
Tensor dropout(Tape& tape, const Tensor& x, double p, Rng& rng, bool train);

// Forward value is z_q; backward passes the upstream gradient to z_e unchanged.
Tensor straight_through(Tape& tape, const Tensor& z_e, const Tensor& z_q);

// Mean squared error over all elements; gradients to both sides when watched.
Tensor mse_mean(Tape& tape, const Tensor& a, const Tensor& b);
Tensor reduce_sum(Tape& tape, const Tensor& x);
Tensor reduce_mean(Tape& tape, const Tensor& x);

// Mean negative log-probability of integer targets under softmax rows.
// logits [N,K] or [N,K,H,W] with one target per (n,h,w) position;
// gradient is (softmax - onehot) / rows.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets);

// Single-head scaled dot-product attention over the raster-flattened sequence
// with a strict causal mask: position i attends to positions < i, position 0
// receives a zero context vector. x is NCHW; wq/wk/wv are [C,C]. Returns the
// context (caller residual-adds).
Tensor causal_attention(Tape& tape, const Tensor& x, const Tensor& wq, const Tensor& wk,
                        const Tensor& wv);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::int64_t step = 0;
    std::vector<double> m;
    std::vector<double> v;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState fresh(std::int64_t numel, double lr);
};

// Standard Adam update with bias correction; increments state.step by exactly 1.
void adam_step(Tensor& param, const std::vector<double>& grad, AdamState& state);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Scalar-valued function of a list of input tensors, rebuilt per evaluation.
using ScalarFn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double eps = 1e-5);

}  // namespace pcvq
