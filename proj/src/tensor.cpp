#include "pcvq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pcvq {

namespace {

int floor_div(int a, int b) {
    // b > 0
    return (a >= 0) ? a / b : -((-a + b - 1) / b);
}

int ceil_div(int a, int b) { return floor_div(a + b - 1, b); }

void require(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

double Tensor::scalar() const {
    if (numel() != 1) throw ShapeError("scalar() on tensor of size " + std::to_string(numel()));
    return (*data)[0];
}

Tensor Tensor::zeros(Shape dims) {
    Tensor t;
    t.dims = std::move(dims);
    t.data = std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel_of(t.dims)), 0.0);
    return t;
}

Tensor Tensor::full(Shape dims, double value) {
    Tensor t = zeros(std::move(dims));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

Tensor Tensor::from(Shape dims, std::vector<double> values) {
    if (numel_of(dims) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("from(): " + shape_str(dims) + " vs " + std::to_string(values.size()) + " values");
    for (double v : values)
        if (!std::isfinite(v)) throw NumericError("Tensor::from received a non-finite value");
    Tensor t;
    t.dims = std::move(dims);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::he_uniform(Shape dims, int fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    return uniform(std::move(dims), -limit, limit, rng);
}

Tensor Tensor::uniform(Shape dims, double lo, double hi, Rng& rng) {
    Tensor t = zeros(std::move(dims));
    for (double& v : *t.data) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.dims = dims;
    t.data = std::make_shared<std::vector<double>>(*data);
    return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::check_finite(const Tensor& t, const char* op) {
    for (double v : *t.data) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

void Tape::watch(Tensor& t) {
    check_finite(t, "watch");
    t.node = alloc_node(t.dims);
}

int Tape::alloc_node(const Shape& dims) {
    nodes_.push_back({numel_of(dims)});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buffer(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].numel), 0.0);
    return g;
}

void Tape::backward(const Tensor& loss) {
    if (loss.node < 0) throw ShapeError("backward() on a tensor that is not on the tape");
    if (loss.numel() != 1) throw ShapeError("backward() requires a scalar loss");
    grad_buffer(loss.node)[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)(*this);
}

const std::vector<double>& Tape::grad(const Tensor& t) const {
    if (t.node < 0) throw ShapeError("grad() on a tensor that is not on the tape");
    auto& self = const_cast<Tape&>(*this);
    return self.grad_buffer(t.node);
}

bool Tape::has_grad(const Tensor& t) const {
    return t.node >= 0 && !grads_[static_cast<std::size_t>(t.node)].empty();
}

namespace {

// Shared helper: returns false (skip) when the output node never received
// gradient, i.e. it is off the path to the loss.
struct OutGrad {
    const std::vector<double>* g = nullptr;
    bool live = false;
};

OutGrad out_grad(Tape& tape, const Tensor& out) {
    OutGrad r;
    if (out.node < 0) return r;
    if (!tape.has_grad(out)) return r;
    r.g = &tape.grad(out);
    r.live = true;
    return r;
}

bool recording(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs)
        if (t->node >= 0) return true;
    return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int n, c, h, w;       // input
    int oc, kh, kw;       // kernel
    int stride;
    int pt, pb, pl, pr;   // paddings
    int oh, ow;           // output
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, int stride, int pt, int pb, int pl, int pr) {
    require(x.dims.size() == 4, "conv input must be NCHW");
    require(k.dims.size() == 4, "conv kernel must be [O,C,kh,kw]");
    require(stride >= 1, "conv stride must be >= 1");
    require(pt >= 0 && pb >= 0 && pl >= 0 && pr >= 0, "conv padding must be >= 0");
    ConvDims d;
    d.n = x.dim(0); d.c = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
    d.oc = k.dim(0); d.kh = k.dim(2); d.kw = k.dim(3);
    d.stride = stride;
    d.pt = pt; d.pb = pb; d.pl = pl; d.pr = pr;
    if (k.dim(1) != d.c)
        throw ShapeError("conv kernel expects " + std::to_string(k.dim(1)) + " input channels, got " +
                         std::to_string(d.c));
    const int hh = d.h + pt + pb - d.kh;
    const int ww = d.w + pl + pr - d.kw;
    require(hh >= 0 && ww >= 0, "conv kernel larger than padded input");
    if (hh % stride != 0 || ww % stride != 0)
        throw ShapeError("conv output size is not an integer: (" + std::to_string(hh) + "," +
                         std::to_string(ww) + ") not divisible by stride " + std::to_string(stride));
    d.oh = hh / stride + 1;
    d.ow = ww / stride + 1;
    return d;
}

// Valid output range [lo, hi] such that the input coordinate o*stride - pad + k
// stays inside [0, limit).
inline void valid_range(int k, int pad, int limit, int stride, int out_size, int& lo, int& hi) {
    lo = std::max(0, ceil_div(pad - k, stride));
    hi = std::min(out_size - 1, floor_div(limit - 1 + pad - k, stride));
}

void conv_forward_kernel(const ConvDims& d, const double* x, const double* w, double* out) {
    const std::int64_t xn = static_cast<std::int64_t>(d.c) * d.h * d.w;
    const std::int64_t on = static_cast<std::int64_t>(d.oc) * d.oh * d.ow;
    const std::int64_t ksz = static_cast<std::int64_t>(d.c) * d.kh * d.kw;
    for (int n = 0; n < d.n; ++n) {
        for (int oc = 0; oc < d.oc; ++oc) {
            double* outp = out + n * on + static_cast<std::int64_t>(oc) * d.oh * d.ow;
            const double* wbase = w + oc * ksz;
            for (int ic = 0; ic < d.c; ++ic) {
                const double* xbase = x + n * xn + static_cast<std::int64_t>(ic) * d.h * d.w;
                for (int kh = 0; kh < d.kh; ++kh) {
                    int oh_lo, oh_hi;
                    valid_range(kh, d.pt, d.h, d.stride, d.oh, oh_lo, oh_hi);
                    for (int kw = 0; kw < d.kw; ++kw) {
                        const double wv = wbase[(ic * d.kh + kh) * d.kw + kw];
                        if (wv == 0.0) continue;  // masked taps cost nothing
                        int ow_lo, ow_hi;
                        valid_range(kw, d.pl, d.w, d.stride, d.ow, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * d.stride - d.pt + kh;
                            const double* xrow = xbase + static_cast<std::int64_t>(ih) * d.w - d.pl + kw;
                            double* orow = outp + static_cast<std::int64_t>(oh) * d.ow;
                            if (d.stride == 1) {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * xrow[ow];
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    orow[ow] += wv * xrow[static_cast<std::int64_t>(ow) * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv_backward_input_kernel(const ConvDims& d, const double* w, const double* gout, double* gx) {
    const std::int64_t xn = static_cast<std::int64_t>(d.c) * d.h * d.w;
    const std::int64_t on = static_cast<std::int64_t>(d.oc) * d.oh * d.ow;
    const std::int64_t ksz = static_cast<std::int64_t>(d.c) * d.kh * d.kw;
    for (int n = 0; n < d.n; ++n) {
        for (int oc = 0; oc < d.oc; ++oc) {
            const double* gop = gout + n * on + static_cast<std::int64_t>(oc) * d.oh * d.ow;
            const double* wbase = w + oc * ksz;
            for (int ic = 0; ic < d.c; ++ic) {
                double* gxbase = gx + n * xn + static_cast<std::int64_t>(ic) * d.h * d.w;
                for (int kh = 0; kh < d.kh; ++kh) {
                    int oh_lo, oh_hi;
                    valid_range(kh, d.pt, d.h, d.stride, d.oh, oh_lo, oh_hi);
                    for (int kw = 0; kw < d.kw; ++kw) {
                        const double wv = wbase[(ic * d.kh + kh) * d.kw + kw];
                        if (wv == 0.0) continue;
                        int ow_lo, ow_hi;
                        valid_range(kw, d.pl, d.w, d.stride, d.ow, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * d.stride - d.pt + kh;
                            double* gxrow = gxbase + static_cast<std::int64_t>(ih) * d.w - d.pl + kw;
                            const double* gorow = gop + static_cast<std::int64_t>(oh) * d.ow;
                            if (d.stride == 1) {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) gxrow[ow] += wv * gorow[ow];
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    gxrow[static_cast<std::int64_t>(ow) * d.stride] += wv * gorow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv_backward_weight_kernel(const ConvDims& d, const double* x, const double* gout, double* gw) {
    const std::int64_t xn = static_cast<std::int64_t>(d.c) * d.h * d.w;
    const std::int64_t on = static_cast<std::int64_t>(d.oc) * d.oh * d.ow;
    for (int oc = 0; oc < d.oc; ++oc) {
        for (int ic = 0; ic < d.c; ++ic) {
            for (int kh = 0; kh < d.kh; ++kh) {
                int oh_lo, oh_hi;
                valid_range(kh, d.pt, d.h, d.stride, d.oh, oh_lo, oh_hi);
                for (int kw = 0; kw < d.kw; ++kw) {
                    int ow_lo, ow_hi;
                    valid_range(kw, d.pl, d.w, d.stride, d.ow, ow_lo, ow_hi);
                    double acc = 0.0;
                    for (int n = 0; n < d.n; ++n) {
                        const double* xbase = x + n * xn + static_cast<std::int64_t>(ic) * d.h * d.w;
                        const double* gop = gout + n * on + static_cast<std::int64_t>(oc) * d.oh * d.ow;
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * d.stride - d.pt + kh;
                            const double* xrow = xbase + static_cast<std::int64_t>(ih) * d.w - d.pl + kw;
                            const double* gorow = gop + static_cast<std::int64_t>(oh) * d.ow;
                            if (d.stride == 1) {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += xrow[ow] * gorow[ow];
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    acc += xrow[static_cast<std::int64_t>(ow) * d.stride] * gorow[ow];
                            }
                        }
                    }
                    gw[(static_cast<std::int64_t>(oc) * d.c + ic) * d.kh * d.kw + kh * d.kw + kw] += acc;
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d_general(Tape& tape, const Tensor& input, const Tensor& kernel, int stride,
                      int pad_top, int pad_bottom, int pad_left, int pad_right) {
    const ConvDims d = conv_dims(input, kernel, stride, pad_top, pad_bottom, pad_left, pad_right);
    Tensor out = Tensor::zeros({d.n, d.oc, d.oh, d.ow});
    conv_forward_kernel(d, input.ptr(), kernel.ptr(), out.mut());
    Tape::check_finite(out, "conv2d");
    if (recording({&input, &kernel})) {
        out.node = tape.alloc_node(out.dims);
        Tensor x = input, w = kernel, o = out;
        tape.record([x, w, o, d](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            if (x.node >= 0)
                conv_backward_input_kernel(d, w.ptr(), og.g->data(), t.grad_buffer(x.node).data());
            if (w.node >= 0)
                conv_backward_weight_kernel(d, x.ptr(), og.g->data(), t.grad_buffer(w.node).data());
        });
    }
    return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride, int padding) {
    require(kernel.dims.size() == 4, "conv kernel must be [O,C,kh,kw]");
    require(kernel.dim(2) % 2 == 1 && kernel.dim(3) % 2 == 1, "conv2d kernel sides must be odd");
    return conv2d_general(tape, input, kernel, stride, padding, padding, padding, padding);
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

namespace {

Tensor unary_op(Tape& tape, const Tensor& x, const char* name,
                const std::function<double(double)>& fwd,
                const std::function<double(double, double)>& dfn /*(y, gout)->gx*/) {
    Tensor out = Tensor::zeros(x.dims);
    const double* xp = x.ptr();
    double* op = out.mut();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) op[i] = fwd(xp[i]);
    Tape::check_finite(out, name);
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        tape.record([xi, o, dfn, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& gx = t.grad_buffer(xi.node);
            const double* yp = o.ptr();
            for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += dfn(yp[i], (*og.g)[static_cast<std::size_t>(i)]);
        });
    }
    return out;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.dims != b.dims) throw ShapeError("add: " + shape_str(a.dims) + " vs " + shape_str(b.dims));
    Tensor out = Tensor::zeros(a.dims);
    const std::int64_t n = a.numel();
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.mut();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    Tape::check_finite(out, "add");
    if (recording({&a, &b})) {
        out.node = tape.alloc_node(out.dims);
        Tensor ai = a, bi = b, o = out;
        tape.record([ai, bi, o, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            if (ai.node >= 0) {
                auto& g = t.grad_buffer(ai.node);
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)];
            }
            if (bi.node >= 0) {
                auto& g = t.grad_buffer(bi.node);
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.dims != b.dims) throw ShapeError("mul: " + shape_str(a.dims) + " vs " + shape_str(b.dims));
    Tensor out = Tensor::zeros(a.dims);
    const std::int64_t n = a.numel();
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double* op = out.mut();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
    Tape::check_finite(out, "mul");
    if (recording({&a, &b})) {
        out.node = tape.alloc_node(out.dims);
        Tensor ai = a, bi = b, o = out;
        tape.record([ai, bi, o, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            if (ai.node >= 0) {
                auto& g = t.grad_buffer(ai.node);
                const double* bb = bi.ptr();
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)] * bb[i];
            }
            if (bi.node >= 0) {
                auto& g = t.grad_buffer(bi.node);
                const double* aa = ai.ptr();
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)] * aa[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.dims);
    const std::int64_t n = a.numel();
    const double* ap = a.ptr();
    double* op = out.mut();
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * c;
    Tape::check_finite(out, "scale");
    if (a.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor ai = a, o = out;
        tape.record([ai, o, c, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(ai.node);
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)] * c;
        });
    }
    return out;
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    require(x.dims.size() == 4, "add_channel_bias expects NCHW");
    require(bias.dims.size() == 1 && bias.dim(0) == x.dim(1), "bias must be [C]");
    Tensor out = Tensor::zeros(x.dims);
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    const double* xp = x.ptr();
    const double* bp = bias.ptr();
    double* op = out.mut();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * hw;
            const double bv = bp[ci];
            for (std::int64_t i = 0; i < hw; ++i) op[base + i] = xp[base + i] + bv;
        }
    Tape::check_finite(out, "add_channel_bias");
    if (recording({&x, &bias})) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, bi = bias, o = out;
        tape.record([xi, bi, o, n, c, hw](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            if (xi.node >= 0) {
                auto& g = t.grad_buffer(xi.node);
                const std::int64_t total = static_cast<std::int64_t>(n) * c * hw;
                for (std::int64_t i = 0; i < total; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)];
            }
            if (bi.node >= 0) {
                auto& g = t.grad_buffer(bi.node);
                for (int ni = 0; ni < n; ++ni)
                    for (int ci = 0; ci < c; ++ci) {
                        const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * hw;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < hw; ++i) acc += (*og.g)[static_cast<std::size_t>(base + i)];
                        g[static_cast<std::size_t>(ci)] += acc;
                    }
            }
        });
    }
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
    return unary_op(tape, x, "relu",
                    [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double y, double g) { return y > 0.0 ? g : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary_op(tape, x, "sigmoid",
                    [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double y, double g) { return g * y * (1.0 - y); });
}

Tensor tanh_op(Tape& tape, const Tensor& x) {
    return unary_op(tape, x, "tanh",
                    [](double v) { return std::tanh(v); },
                    [](double y, double g) { return g * (1.0 - y * y); });
}

Tensor avg_pool2x(Tape& tape, const Tensor& x) {
    require(x.dims.size() == 4, "avg_pool2x expects NCHW");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(h % 2 == 0 && w % 2 == 0, "avg_pool2x requires even H and W");
    const int oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({n, c, oh, ow});
    const double* xp = x.ptr();
    double* op = out.mut();
    for (int nc = 0; nc < n * c; ++nc) {
        const double* xb = xp + static_cast<std::int64_t>(nc) * h * w;
        double* ob = op + static_cast<std::int64_t>(nc) * oh * ow;
        for (int r = 0; r < oh; ++r)
            for (int q = 0; q < ow; ++q) {
                const double* p0 = xb + (2 * r) * w + 2 * q;
                ob[r * ow + q] = 0.25 * (p0[0] + p0[1] + p0[w] + p0[w + 1]);
            }
    }
    Tape::check_finite(out, "avg_pool2x");
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        tape.record([xi, o, n, c, h, w, oh, ow](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(xi.node);
            for (int nc = 0; nc < n * c; ++nc) {
                double* gb = g.data() + static_cast<std::int64_t>(nc) * h * w;
                const double* ob = og.g->data() + static_cast<std::int64_t>(nc) * oh * ow;
                for (int r = 0; r < oh; ++r)
                    for (int q = 0; q < ow; ++q) {
                        const double gv = 0.25 * ob[r * ow + q];
                        double* p0 = gb + (2 * r) * w + 2 * q;
                        p0[0] += gv; p0[1] += gv; p0[w] += gv; p0[w + 1] += gv;
                    }
            }
        });
    }
    return out;
}

Tensor upsample_nearest2x(Tape& tape, const Tensor& x) {
    require(x.dims.size() == 4, "upsample_nearest2x expects NCHW");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = h * 2, ow = w * 2;
    Tensor out = Tensor::zeros({n, c, oh, ow});
    const double* xp = x.ptr();
    double* op = out.mut();
    for (int nc = 0; nc < n * c; ++nc) {
        const double* xb = xp + static_cast<std::int64_t>(nc) * h * w;
        double* ob = op + static_cast<std::int64_t>(nc) * oh * ow;
        for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) {
                const double v = xb[r * w + q];
                double* p0 = ob + (2 * r) * ow + 2 * q;
                p0[0] = v; p0[1] = v; p0[ow] = v; p0[ow + 1] = v;
            }
    }
    Tape::check_finite(out, "upsample_nearest2x");
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        tape.record([xi, o, n, c, h, w, oh, ow](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(xi.node);
            for (int nc = 0; nc < n * c; ++nc) {
                double* gb = g.data() + static_cast<std::int64_t>(nc) * h * w;
                const double* ob = og.g->data() + static_cast<std::int64_t>(nc) * oh * ow;
                for (int r = 0; r < h; ++r)
                    for (int q = 0; q < w; ++q) {
                        const double* p0 = ob + (2 * r) * ow + 2 * q;
                        gb[r * w + q] += p0[0] + p0[1] + p0[ow] + p0[ow + 1];
                    }
            }
        });
    }
    return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    require(a.dims.size() == 4 && b.dims.size() == 4, "concat_channels expects NCHW");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: N/H/W must agree");
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
    Tensor out = Tensor::zeros({n, ca + cb, a.dim(2), a.dim(3)});
    double* op = out.mut();
    for (int ni = 0; ni < n; ++ni) {
        std::memcpy(op + static_cast<std::int64_t>(ni) * (ca + cb) * hw, a.ptr() + static_cast<std::int64_t>(ni) * ca * hw,
                    sizeof(double) * static_cast<std::size_t>(ca * hw));
        std::memcpy(op + (static_cast<std::int64_t>(ni) * (ca + cb) + ca) * hw, b.ptr() + static_cast<std::int64_t>(ni) * cb * hw,
                    sizeof(double) * static_cast<std::size_t>(cb * hw));
    }
    if (recording({&a, &b})) {
        out.node = tape.alloc_node(out.dims);
        Tensor ai = a, bi = b, o = out;
        tape.record([ai, bi, o, n, ca, cb, hw](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            for (int ni = 0; ni < n; ++ni) {
                if (ai.node >= 0) {
                    auto& g = t.grad_buffer(ai.node);
                    const double* src = og.g->data() + static_cast<std::int64_t>(ni) * (ca + cb) * hw;
                    double* dst = g.data() + static_cast<std::int64_t>(ni) * ca * hw;
                    for (std::int64_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
                }
                if (bi.node >= 0) {
                    auto& g = t.grad_buffer(bi.node);
                    const double* src = og.g->data() + (static_cast<std::int64_t>(ni) * (ca + cb) + ca) * hw;
                    double* dst = g.data() + static_cast<std::int64_t>(ni) * cb * hw;
                    for (std::int64_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor slice_channels(Tape& tape, const Tensor& x, int from, int to) {
    require(x.dims.size() == 4, "slice_channels expects NCHW");
    require(0 <= from && from < to && to <= x.dim(1), "slice_channels range invalid");
    const int n = x.dim(0), c = x.dim(1), cs = to - from;
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor out = Tensor::zeros({n, cs, x.dim(2), x.dim(3)});
    double* op = out.mut();
    for (int ni = 0; ni < n; ++ni)
        std::memcpy(op + static_cast<std::int64_t>(ni) * cs * hw,
                    x.ptr() + (static_cast<std::int64_t>(ni) * c + from) * hw,
                    sizeof(double) * static_cast<std::size_t>(cs * hw));
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        tape.record([xi, o, n, c, cs, from, hw](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(xi.node);
            for (int ni = 0; ni < n; ++ni) {
                const double* src = og.g->data() + static_cast<std::int64_t>(ni) * cs * hw;
                double* dst = g.data() + (static_cast<std::int64_t>(ni) * c + from) * hw;
                for (std::int64_t i = 0; i < cs * hw; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor shift_down1(Tape& tape, const Tensor& x) {
    require(x.dims.size() == 4, "shift_down1 expects NCHW");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out = Tensor::zeros(x.dims);
    double* op = out.mut();
    for (int nc = 0; nc < n * c; ++nc) {
        const double* xb = x.ptr() + static_cast<std::int64_t>(nc) * h * w;
        double* ob = op + static_cast<std::int64_t>(nc) * h * w;
        std::memcpy(ob + w, xb, sizeof(double) * static_cast<std::size_t>((h - 1) * w));
    }
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        tape.record([xi, o, n, c, h, w](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(xi.node);
            for (int nc = 0; nc < n * c; ++nc) {
                double* gb = g.data() + static_cast<std::int64_t>(nc) * h * w;
                const double* ob = og.g->data() + static_cast<std::int64_t>(nc) * h * w;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(h - 1) * w; ++i) gb[i] += ob[i + w];
            }
        });
    }
    return out;
}

Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int>& indices, int n, int h, int w) {
    require(table.dims.size() == 2, "embedding table must be [K,C]");
    const int k = table.dim(0), c = table.dim(1);
    if (static_cast<std::int64_t>(indices.size()) != static_cast<std::int64_t>(n) * h * w)
        throw ShapeError("embedding: index count mismatch");
    for (int idx : indices)
        if (idx < 0 || idx >= k) throw IndexError("embedding index " + std::to_string(idx) + " out of [0," + std::to_string(k) + ")");
    Tensor out = Tensor::zeros({n, c, h, w});
    double* op = out.mut();
    const double* tp = table.ptr();
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int ni = 0; ni < n; ++ni)
        for (std::int64_t s = 0; s < hw; ++s) {
            const double* row = tp + static_cast<std::int64_t>(indices[static_cast<std::size_t>(ni * hw + s)]) * c;
            for (int ci = 0; ci < c; ++ci) op[(static_cast<std::int64_t>(ni) * c + ci) * hw + s] = row[ci];
        }
    Tape::check_finite(out, "embedding");
    if (table.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor ti = table, o = out;
        auto idx = indices;
        tape.record([ti, o, idx, n, c, hw](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(ti.node);
            for (int ni = 0; ni < n; ++ni)
                for (std::int64_t s = 0; s < hw; ++s) {
                    double* row = g.data() + static_cast<std::int64_t>(idx[static_cast<std::size_t>(ni * hw + s)]) * c;
                    for (int ci = 0; ci < c; ++ci) row[ci] += (*og.g)[static_cast<std::size_t>((static_cast<std::int64_t>(ni) * c + ci) * hw + s)];
                }
        });
    }
    return out;
}

Tensor dropout(Tape& tape, const Tensor& x, double p, Rng& rng, bool train) {
    require(p >= 0.0 && p < 1.0, "dropout p must be in [0,1)");
    if (!train || p == 0.0) return x;
    const std::int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    const double keep_scale = 1.0 / (1.0 - p);
    Tensor out = Tensor::zeros(x.dims);
    const double* xp = x.ptr();
    double* op = out.mut();
    for (std::int64_t i = 0; i < n; ++i) {
        const double m = rng.uniform() >= p ? keep_scale : 0.0;
        (*mask)[static_cast<std::size_t>(i)] = m;
        op[i] = xp[i] * m;
    }
    Tape::check_finite(out, "dropout");
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        tape.record([xi, o, mask, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(xi.node);
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)] * (*mask)[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor straight_through(Tape& tape, const Tensor& z_e, const Tensor& z_q) {
    if (z_e.dims != z_q.dims)
        throw ShapeError("straight_through: " + shape_str(z_e.dims) + " vs " + shape_str(z_q.dims));
    Tensor out = z_q.clone();
    Tape::check_finite(out, "straight_through");
    if (z_e.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor zi = z_e, o = out;
        const std::int64_t n = z_e.numel();
        tape.record([zi, o, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(zi.node);
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += (*og.g)[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor mse_mean(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.dims != b.dims) throw ShapeError("mse_mean: " + shape_str(a.dims) + " vs " + shape_str(b.dims));
    const std::int64_t n = a.numel();
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = ap[i] - bp[i];
        acc += d * d;
    }
    Tensor out = Tensor::from({1}, {acc / static_cast<double>(n)});
    Tape::check_finite(out, "mse_mean");
    if (recording({&a, &b})) {
        out.node = tape.alloc_node(out.dims);
        Tensor ai = a, bi = b, o = out;
        tape.record([ai, bi, o, n](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            const double gs = (*og.g)[0] * 2.0 / static_cast<double>(n);
            const double* ap2 = ai.ptr();
            const double* bp2 = bi.ptr();
            if (ai.node >= 0) {
                auto& g = t.grad_buffer(ai.node);
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += gs * (ap2[i] - bp2[i]);
            }
            if (bi.node >= 0) {
                auto& g = t.grad_buffer(bi.node);
                for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] -= gs * (ap2[i] - bp2[i]);
            }
        });
    }
    return out;
}

namespace {

Tensor reduce_impl(Tape& tape, const Tensor& x, bool mean) {
    const std::int64_t n = x.numel();
    const double* xp = x.ptr();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += xp[i];
    if (mean) acc /= static_cast<double>(n);
    Tensor out = Tensor::from({1}, {acc});
    Tape::check_finite(out, mean ? "reduce_mean" : "reduce_sum");
    if (x.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, o = out;
        const double w = mean ? 1.0 / static_cast<double>(n) : 1.0;
        tape.record([xi, o, n, w](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(xi.node);
            const double gv = (*og.g)[0] * w;
            for (std::int64_t i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += gv;
        });
    }
    return out;
}

}  // namespace

Tensor reduce_sum(Tape& tape, const Tensor& x) { return reduce_impl(tape, x, false); }
Tensor reduce_mean(Tape& tape, const Tensor& x) { return reduce_impl(tape, x, true); }

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets) {
    int n, k, hw;
    if (logits.dims.size() == 2) {
        n = logits.dim(0); k = logits.dim(1); hw = 1;
    } else if (logits.dims.size() == 4) {
        n = logits.dim(0); k = logits.dim(1); hw = logits.dim(2) * logits.dim(3);
    } else {
        throw ShapeError("softmax_cross_entropy expects [N,K] or [N,K,H,W]");
    }
    const std::int64_t rows = static_cast<std::int64_t>(n) * hw;
    if (static_cast<std::int64_t>(targets.size()) != rows)
        throw ShapeError("softmax_cross_entropy: target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= k) throw IndexError("target " + std::to_string(t) + " out of [0," + std::to_string(k) + ")");

    // probs stored row-major [rows, K] for the backward pass
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * k);
    const double* lp = logits.ptr();
    const bool spatial = logits.dims.size() == 4;
    double loss = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t ni = r / hw, s = r % hw;
        auto logit_at = [&](int ki) {
            return spatial ? lp[(ni * k + ki) * hw + s] : lp[r * k + ki];
        };
        double mx = logit_at(0);
        for (int ki = 1; ki < k; ++ki) mx = std::max(mx, logit_at(ki));
        double z = 0.0;
        for (int ki = 0; ki < k; ++ki) z += std::exp(logit_at(ki) - mx);
        const double logz = std::log(z) + mx;
        for (int ki = 0; ki < k; ++ki)
            (*probs)[static_cast<std::size_t>(r * k + ki)] = std::exp(logit_at(ki) - logz);
        loss -= logit_at(targets[static_cast<std::size_t>(r)]) - logz;
    }
    Tensor out = Tensor::from({1}, {loss / static_cast<double>(rows)});
    Tape::check_finite(out, "softmax_cross_entropy");
    if (logits.node >= 0) {
        out.node = tape.alloc_node(out.dims);
        Tensor li = logits, o = out;
        auto tg = targets;
        tape.record([li, o, tg, probs, rows, k, hw, spatial](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            auto& g = t.grad_buffer(li.node);
            const double gs = (*og.g)[0] / static_cast<double>(rows);
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t ni = r / hw, s = r % hw;
                for (int ki = 0; ki < k; ++ki) {
                    double pv = (*probs)[static_cast<std::size_t>(r * k + ki)];
                    if (ki == tg[static_cast<std::size_t>(r)]) pv -= 1.0;
                    const std::int64_t at = spatial ? (ni * k + ki) * hw + s : r * k + ki;
                    g[static_cast<std::size_t>(at)] += gs * pv;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Causal attention
// ---------------------------------------------------------------------------

namespace {

// Per-image scratch saved for backward: Q,K,V are [S,C]; A is [S,S] with
// row 0 all zero (position 0 has no context).
struct AttnSaved {
    std::vector<double> xt, q, kk, v, a;
};

void matvec(const double* m, const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* mr = m + static_cast<std::int64_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += mr[c] * x[c];
        y[r] = acc;
    }
}

}  // namespace

Tensor causal_attention(Tape& tape, const Tensor& x, const Tensor& wq, const Tensor& wk,
                        const Tensor& wv) {
    require(x.dims.size() == 4, "causal_attention expects NCHW");
    const int n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
    require(wq.dims == Shape({c, c}) && wk.dims == Shape({c, c}) && wv.dims == Shape({c, c}),
            "attention projections must be [C,C]");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c));

    Tensor out = Tensor::zeros(x.dims);
    auto saved = std::make_shared<std::vector<AttnSaved>>(static_cast<std::size_t>(n));
    for (int ni = 0; ni < n; ++ni) {
        AttnSaved& sv = (*saved)[static_cast<std::size_t>(ni)];
        sv.xt.assign(static_cast<std::size_t>(s) * c, 0.0);
        sv.q.assign(static_cast<std::size_t>(s) * c, 0.0);
        sv.kk.assign(static_cast<std::size_t>(s) * c, 0.0);
        sv.v.assign(static_cast<std::size_t>(s) * c, 0.0);
        sv.a.assign(static_cast<std::size_t>(s) * s, 0.0);
        const double* xb = x.ptr() + static_cast<std::int64_t>(ni) * c * s;
        // transpose [C,S] -> [S,C]
        for (int ci = 0; ci < c; ++ci)
            for (int si = 0; si < s; ++si) sv.xt[static_cast<std::size_t>(si) * c + ci] = xb[static_cast<std::int64_t>(ci) * s + si];
        for (int si = 0; si < s; ++si) {
            matvec(wq.ptr(), sv.xt.data() + static_cast<std::size_t>(si) * c, sv.q.data() + static_cast<std::size_t>(si) * c, c, c);
            matvec(wk.ptr(), sv.xt.data() + static_cast<std::size_t>(si) * c, sv.kk.data() + static_cast<std::size_t>(si) * c, c, c);
            matvec(wv.ptr(), sv.xt.data() + static_cast<std::size_t>(si) * c, sv.v.data() + static_cast<std::size_t>(si) * c, c, c);
        }
        double* ob = out.mut() + static_cast<std::int64_t>(ni) * c * s;
        std::vector<double> ctx(static_cast<std::size_t>(c));
        for (int i = 0; i < s; ++i) {
            std::fill(ctx.begin(), ctx.end(), 0.0);
            if (i > 0) {
                double mx = -1e300;
                for (int j = 0; j < i; ++j) {
                    double sc = 0.0;
                    const double* qi = sv.q.data() + static_cast<std::size_t>(i) * c;
                    const double* kj = sv.kk.data() + static_cast<std::size_t>(j) * c;
                    for (int ci = 0; ci < c; ++ci) sc += qi[ci] * kj[ci];
                    sc *= inv_sqrt;
                    sv.a[static_cast<std::size_t>(i) * s + j] = sc;  // raw score, normalized below
                    mx = std::max(mx, sc);
                }
                double z = 0.0;
                for (int j = 0; j < i; ++j) {
                    double& av = sv.a[static_cast<std::size_t>(i) * s + j];
                    av = std::exp(av - mx);
                    z += av;
                }
                for (int j = 0; j < i; ++j) {
                    double& av = sv.a[static_cast<std::size_t>(i) * s + j];
                    av /= z;
                    const double* vj = sv.v.data() + static_cast<std::size_t>(j) * c;
                    for (int ci = 0; ci < c; ++ci) ctx[static_cast<std::size_t>(ci)] += av * vj[ci];
                }
            }
            for (int ci = 0; ci < c; ++ci) ob[static_cast<std::int64_t>(ci) * s + i] = ctx[static_cast<std::size_t>(ci)];
        }
    }
    Tape::check_finite(out, "causal_attention");

    if (recording({&x, &wq, &wk, &wv})) {
        out.node = tape.alloc_node(out.dims);
        Tensor xi = x, q = wq, k = wk, v = wv, o = out;
        tape.record([xi, q, k, v, o, saved, n, c, s, inv_sqrt](Tape& t) {
            auto og = out_grad(t, o);
            if (!og.live) return;
            std::vector<double> dq(static_cast<std::size_t>(s) * c), dk(static_cast<std::size_t>(s) * c),
                dv(static_cast<std::size_t>(s) * c), dxt(static_cast<std::size_t>(s) * c), dctx(static_cast<std::size_t>(c));
            for (int ni = 0; ni < n; ++ni) {
                const AttnSaved& sv = (*saved)[static_cast<std::size_t>(ni)];
                std::fill(dq.begin(), dq.end(), 0.0);
                std::fill(dk.begin(), dk.end(), 0.0);
                std::fill(dv.begin(), dv.end(), 0.0);
                std::fill(dxt.begin(), dxt.end(), 0.0);
                const double* gob = og.g->data() + static_cast<std::int64_t>(ni) * c * s;
                for (int i = 1; i < s; ++i) {
                    for (int ci = 0; ci < c; ++ci) dctx[static_cast<std::size_t>(ci)] = gob[static_cast<std::int64_t>(ci) * s + i];
                    // dA and the softmax Jacobian along row i
                    double dot = 0.0;
                    std::vector<double> da(static_cast<std::size_t>(i));
                    for (int j = 0; j < i; ++j) {
                        double acc = 0.0;
                        const double* vj = sv.v.data() + static_cast<std::size_t>(j) * c;
                        for (int ci = 0; ci < c; ++ci) acc += dctx[static_cast<std::size_t>(ci)] * vj[ci];
                        da[static_cast<std::size_t>(j)] = acc;
                        dot += acc * sv.a[static_cast<std::size_t>(i) * s + j];
                    }
                    for (int j = 0; j < i; ++j) {
                        const double av = sv.a[static_cast<std::size_t>(i) * s + j];
                        const double ds = av * (da[static_cast<std::size_t>(j)] - dot) * inv_sqrt;
                        const double* kj = sv.kk.data() + static_cast<std::size_t>(j) * c;
                        const double* qi = sv.q.data() + static_cast<std::size_t>(i) * c;
                        double* dqi = dq.data() + static_cast<std::size_t>(i) * c;
                        double* dkj = dk.data() + static_cast<std::size_t>(j) * c;
                        for (int ci = 0; ci < c; ++ci) {
                            dqi[ci] += ds * kj[ci];
                            dkj[ci] += ds * qi[ci];
                        }
                        double* dvj = dv.data() + static_cast<std::size_t>(j) * c;
                        for (int ci = 0; ci < c; ++ci) dvj[ci] += av * dctx[static_cast<std::size_t>(ci)];
                    }
                }
                // project back: dX += Wq^T dQ + Wk^T dK + Wv^T dV; dW += dY x^T
                for (int si = 0; si < s; ++si) {
                    const double* xr = sv.xt.data() + static_cast<std::size_t>(si) * c;
                    double* dxr = dxt.data() + static_cast<std::size_t>(si) * c;
                    for (int r = 0; r < c; ++r) {
                        const double dqv = dq[static_cast<std::size_t>(si) * c + r];
                        const double dkv = dk[static_cast<std::size_t>(si) * c + r];
                        const double dvv = dv[static_cast<std::size_t>(si) * c + r];
                        const double* qr = q.ptr() + static_cast<std::int64_t>(r) * c;
                        const double* kr = k.ptr() + static_cast<std::int64_t>(r) * c;
                        const double* vr = v.ptr() + static_cast<std::int64_t>(r) * c;
                        for (int ci = 0; ci < c; ++ci)
                            dxr[ci] += dqv * qr[ci] + dkv * kr[ci] + dvv * vr[ci];
                        if (q.node >= 0) {
                            auto& gq = t.grad_buffer(q.node);
                            for (int ci = 0; ci < c; ++ci) gq[static_cast<std::size_t>(r) * c + ci] += dqv * xr[ci];
                        }
                        if (k.node >= 0) {
                            auto& gk = t.grad_buffer(k.node);
                            for (int ci = 0; ci < c; ++ci) gk[static_cast<std::size_t>(r) * c + ci] += dkv * xr[ci];
                        }
                        if (v.node >= 0) {
                            auto& gv = t.grad_buffer(v.node);
                            for (int ci = 0; ci < c; ++ci) gv[static_cast<std::size_t>(r) * c + ci] += dvv * xr[ci];
                        }
                    }
                }
                if (xi.node >= 0) {
                    auto& gx = t.grad_buffer(xi.node);
                    double* gxb = gx.data() + static_cast<std::int64_t>(ni) * c * s;
                    for (int ci = 0; ci < c; ++ci)
                        for (int si = 0; si < s; ++si)
                            gxb[static_cast<std::int64_t>(ci) * s + si] += dxt[static_cast<std::size_t>(si) * c + ci];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState AdamState::fresh(std::int64_t numel, double lr) {
    AdamState s;
    s.m.assign(static_cast<std::size_t>(numel), 0.0);
    s.v.assign(static_cast<std::size_t>(numel), 0.0);
    s.lr = lr;
    return s;
}

void adam_step(Tensor& param, const std::vector<double>& grad, AdamState& state) {
    const std::int64_t n = param.numel();
    if (static_cast<std::int64_t>(grad.size()) != n ||
        static_cast<std::int64_t>(state.m.size()) != n ||
        static_cast<std::int64_t>(state.v.size()) != n)
        throw ShapeError("adam_step: parameter/gradient/moment sizes disagree");
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    double* p = param.mut();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t z = static_cast<std::size_t>(i);
        state.m[z] = b1 * state.m[z] + (1.0 - b1) * grad[z];
        state.v[z] = b2 * state.v[z] + (1.0 - b2) * grad[z] * grad[z];
        const double mh = state.m[z] / bc1;
        const double vh = state.v[z] / bc2;
        p[i] -= state.lr * mh / (std::sqrt(vh) + state.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double eps) {
    if (eps < 1e-7 || eps > 1e-3) throw ConfigError("grad_check eps must be in [1e-7, 1e-3]");
    // analytic pass
    std::vector<Tensor> watched;
    watched.reserve(inputs.size());
    for (const Tensor& t : inputs) watched.push_back(t.clone());
    Tape tape;
    for (Tensor& t : watched) tape.watch(t);
    Tensor loss = f(tape, watched);
    if (loss.numel() != 1) throw ShapeError("grad_check requires a scalar-valued function");
    tape.backward(loss);

    double max_err = 0.0;
    for (std::size_t ti = 0; ti < watched.size(); ++ti) {
        const std::vector<double> analytic = tape.grad(watched[ti]);
        std::vector<Tensor> probe;
        probe.reserve(inputs.size());
        for (const Tensor& t : inputs) probe.push_back(t.clone());
        for (std::int64_t i = 0; i < probe[ti].numel(); ++i) {
            const double orig = probe[ti].ptr()[i];
            Tape t1, t2;
            probe[ti].mut()[i] = orig + eps;
            const double up = f(t1, probe).scalar();
            probe[ti].mut()[i] = orig - eps;
            const double dn = f(t2, probe).scalar();
            probe[ti].mut()[i] = orig;
            const double numeric = (up - dn) / (2.0 * eps);
            if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite finite-difference value");
            const double a = analytic[static_cast<std::size_t>(i)];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace pcvq
