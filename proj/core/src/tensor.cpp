#include "rcn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace rcn {

namespace detail {

uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_size(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw InvalidArgument("tensor extents must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
    }
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        if (t.defined() && t.requires_grad()) return true;
    }
    return false;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_size(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    impl->id = detail::next_node_id();
    impl_ = std::move(impl);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != static_cast<int64_t>(values.size())) {
        throw InvalidArgument("from_values: shape/value count mismatch");
    }
    Tensor t(std::move(shape), requires_grad);
    std::copy(values.begin(), values.end(), t.data().begin());
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    Tensor t(Shape{}, requires_grad);
    t.data()[0] = value;
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw InvalidState("undefined tensor");
    return impl_->shape;
}

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

int64_t Tensor::size() const { return static_cast<int64_t>(impl_ ? impl_->data.size() : 0); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
    if (!impl_) throw InvalidState("undefined tensor");
    impl_->requires_grad = v;
    if (!v) impl_->grad.clear();
}

std::span<double> Tensor::data() {
    if (!impl_) throw InvalidState("undefined tensor");
    return impl_->data;
}
std::span<const double> Tensor::data() const {
    if (!impl_) throw InvalidState("undefined tensor");
    return impl_->data;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<double> Tensor::grad() {
    if (!impl_) throw InvalidState("undefined tensor");
    if (impl_->grad.empty()) throw InvalidState("gradient not populated");
    return impl_->grad;
}
std::span<const double> Tensor::grad() const {
    if (!impl_) throw InvalidState("undefined tensor");
    if (impl_->grad.empty()) throw InvalidState("gradient not populated");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::value() const {
    if (size() != 1) throw InvalidArgument("value(): tensor holds " + std::to_string(size()) + " elements");
    return impl_->data[0];
}

double& Tensor::at(std::initializer_list<int> idx) {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw InvalidArgument("at(): rank mismatch");
    int64_t flat = 0;
    size_t d = 0;
    for (int i : idx) {
        if (i < 0 || i >= s[d]) throw InvalidArgument("at(): index out of range");
        flat = flat * s[d] + i;
        ++d;
    }
    return impl_->data[static_cast<size_t>(flat)];
}

double Tensor::at(std::initializer_list<int> idx) const { return const_cast<Tensor*>(this)->at(idx); }

Tensor Tensor::clone() const {
    if (!impl_) return Tensor();
    Tensor t(impl_->shape, impl_->requires_grad);
    std::copy(impl_->data.begin(), impl_->data.end(), t.data().begin());
    return t;
}

uint64_t Tensor::node_id() const { return impl_ ? impl_->id : 0; }

// Builds the op result and records the graph edge when grad mode is on and
// some parent requires grad.
Tensor make_op_result(Shape shape, std::vector<Tensor> parents,
                      std::function<void(const detail::TensorImpl&)> backprop) {
    Tensor out(std::move(shape), false);
    if (g_grad_enabled && any_requires_grad(parents)) {
        out.impl_->requires_grad = true;
        out.impl_->parents.reserve(parents.size());
        for (auto& p : parents) {
            if (p.defined()) out.impl_->parents.push_back(p.impl());
        }
        out.impl_->backprop = std::move(backprop);
    }
    return out;
}

namespace {

// Shared accumulate helper: adds `g` into dst tensor's grad if it wants one.
void accum(const std::shared_ptr<detail::TensorImpl>& dst, size_t index, double g) {
    if (dst->requires_grad) {
        dst->ensure_grad();
        dst->grad[index] += g;
    }
}

struct ConvGeom {
    int n, c, h, w;      // input
    int o, k;            // kernel
    int stride, pad;
    int oh, ow;          // output
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                       int pad) {
    if (input.ndim() != 4) throw InvalidArgument("conv2d: input must be [N,C,H,W]");
    if (kernel.ndim() != 4) throw InvalidArgument("conv2d: kernel must be [O,C,k,k]");
    if (stride < 1) throw InvalidArgument("conv2d: stride must be >= 1");
    if (pad < 0) throw InvalidArgument("conv2d: pad must be >= 0");
    ConvGeom g;
    g.n = input.dim(0);
    g.c = input.dim(1);
    g.h = input.dim(2);
    g.w = input.dim(3);
    g.o = kernel.dim(0);
    g.k = kernel.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (kernel.dim(3) != g.k) throw InvalidArgument("conv2d: kernel must be square");
    if (kernel.dim(1) != g.c) throw InvalidArgument("conv2d: channel mismatch");
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.o)) {
        throw InvalidArgument("conv2d: bias must be [O]");
    }
    if (g.k > g.h + 2 * pad || g.k > g.w + 2 * pad) {
        throw InvalidArgument("conv2d: kernel exceeds padded input");
    }
    if ((g.h + 2 * pad - g.k) % stride != 0 || (g.w + 2 * pad - g.k) % stride != 0) {
        throw InvalidArgument("conv2d: non-integral output extent");
    }
    g.oh = (g.h + 2 * pad - g.k) / stride + 1;
    g.ow = (g.w + 2 * pad - g.k) / stride + 1;
    return g;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
    ConvGeom g = conv_geometry(input, kernel, bias, stride, pad);
    Tensor out = make_op_result(
        Shape{g.n, g.o, g.oh, g.ow}, {input, kernel, bias},
        [in = input.impl(), ker = kernel.impl(), b = bias.defined() ? bias.impl() : nullptr,
         g](const detail::TensorImpl& self) {
            const auto& go = self.grad;
            const bool need_in = in->requires_grad;
            const bool need_ker = ker->requires_grad;
            if (need_in) in->ensure_grad();
            if (need_ker) ker->ensure_grad();
            if (b && b->requires_grad) b->ensure_grad();
            for (int n = 0; n < g.n; ++n) {
                for (int o = 0; o < g.o; ++o) {
                    const size_t out_base = (static_cast<size_t>(n) * g.o + o) * g.oh * g.ow;
                    if (b && b->requires_grad) {
                        double s = 0.0;
                        for (int i = 0; i < g.oh * g.ow; ++i) s += go[out_base + i];
                        b->grad[static_cast<size_t>(o)] += s;
                    }
                    for (int c = 0; c < g.c; ++c) {
                        const size_t in_base = (static_cast<size_t>(n) * g.c + c) * g.h * g.w;
                        const size_t k_base = (static_cast<size_t>(o) * g.c + c) * g.k * g.k;
                        for (int ky = 0; ky < g.k; ++ky) {
                            for (int kx = 0; kx < g.k; ++kx) {
                                const double kv = ker->data[k_base + static_cast<size_t>(ky) * g.k + kx];
                                double kg = 0.0;
                                for (int oy = 0; oy < g.oh; ++oy) {
                                    const int iy = oy * g.stride + ky - g.pad;
                                    if (iy < 0 || iy >= g.h) continue;
                                    for (int ox = 0; ox < g.ow; ++ox) {
                                        const int ix = ox * g.stride + kx - g.pad;
                                        if (ix < 0 || ix >= g.w) continue;
                                        const double gv = go[out_base + static_cast<size_t>(oy) * g.ow + ox];
                                        const size_t ii = in_base + static_cast<size_t>(iy) * g.w + ix;
                                        if (need_in) in->grad[ii] += gv * kv;
                                        if (need_ker) kg += gv * in->data[ii];
                                    }
                                }
                                if (need_ker) ker->grad[k_base + static_cast<size_t>(ky) * g.k + kx] += kg;
                            }
                        }
                    }
                }
            }
        });

    auto& od = out.data();
    const auto& id = input.data();
    const auto& kd = kernel.data();
    for (int n = 0; n < g.n; ++n) {
        for (int o = 0; o < g.o; ++o) {
            const size_t out_base = (static_cast<size_t>(n) * g.o + o) * g.oh * g.ow;
            const double bv = bias.defined() ? bias.data()[static_cast<size_t>(o)] : 0.0;
            for (int i = 0; i < g.oh * g.ow; ++i) od[out_base + i] = bv;
            for (int c = 0; c < g.c; ++c) {
                const size_t in_base = (static_cast<size_t>(n) * g.c + c) * g.h * g.w;
                const size_t k_base = (static_cast<size_t>(o) * g.c + c) * g.k * g.k;
                for (int ky = 0; ky < g.k; ++ky) {
                    for (int kx = 0; kx < g.k; ++kx) {
                        const double kv = kd[k_base + static_cast<size_t>(ky) * g.k + kx];
                        if (kv == 0.0) continue;
                        for (int oy = 0; oy < g.oh; ++oy) {
                            const int iy = oy * g.stride + ky - g.pad;
                            if (iy < 0 || iy >= g.h) continue;
                            const size_t in_row = in_base + static_cast<size_t>(iy) * g.w;
                            const size_t out_row = out_base + static_cast<size_t>(oy) * g.ow;
                            for (int ox = 0; ox < g.ow; ++ox) {
                                const int ix = ox * g.stride + kx - g.pad;
                                if (ix < 0 || ix >= g.w) continue;
                                od[out_row + ox] += kv * id[in_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.ndim() != 2) throw InvalidArgument("fully_connected: input must be [N,D]");
    if (weight.ndim() != 2) throw InvalidArgument("fully_connected: weight must be [M,D]");
    const int n = input.dim(0), d = input.dim(1), m = weight.dim(0);
    if (weight.dim(1) != d) throw InvalidArgument("fully_connected: inner dimensions disagree");
    if (!bias.defined() || bias.ndim() != 1 || bias.dim(0) != m) {
        throw InvalidArgument("fully_connected: bias must be [M]");
    }
    Tensor out = make_op_result(
        Shape{n, m}, {input, weight, bias},
        [in = input.impl(), w = weight.impl(), b = bias.impl(), n, d, m](const detail::TensorImpl& self) {
            const bool need_in = in->requires_grad;
            const bool need_w = w->requires_grad;
            if (need_in) in->ensure_grad();
            if (need_w) w->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < m; ++j) {
                    const double g = self.grad[static_cast<size_t>(i) * m + j];
                    if (g == 0.0) continue;
                    if (b->requires_grad) b->grad[static_cast<size_t>(j)] += g;
                    const size_t in_row = static_cast<size_t>(i) * d;
                    const size_t w_row = static_cast<size_t>(j) * d;
                    for (int kk = 0; kk < d; ++kk) {
                        if (need_in) in->grad[in_row + kk] += g * w->data[w_row + kk];
                        if (need_w) w->grad[w_row + kk] += g * in->data[in_row + kk];
                    }
                }
            }
        });
    auto& od = out.data();
    const auto& id = input.data();
    const auto& wd = weight.data();
    const auto& bd = bias.data();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double acc = bd[static_cast<size_t>(j)];
            const size_t in_row = static_cast<size_t>(i) * d;
            const size_t w_row = static_cast<size_t>(j) * d;
            for (int kk = 0; kk < d; ++kk) acc += id[in_row + kk] * wd[w_row + kk];
            od[static_cast<size_t>(i) * m + j] = acc;
        }
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = make_op_result(x.shape(), {x}, [xi = x.impl()](const detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) {
            const double s = self.data[i];
            xi->grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
    auto& od = out.data();
    const auto& xd = x.data();
    for (size_t i = 0; i < xd.size(); ++i) {
        // evaluated in halves; never overflows and stays strictly inside (0,1)
        const double v = xd[i];
        od[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return out;
}

Tensor tanh(const Tensor& x) {
    Tensor out = make_op_result(x.shape(), {x}, [xi = x.impl()](const detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.data.size(); ++i) {
            const double t = self.data[i];
            xi->grad[i] += self.grad[i] * (1.0 - t * t);
        }
    });
    auto& od = out.data();
    const auto& xd = x.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = std::tanh(xd[i]);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_op_result(a.shape(), {a, b},
                                [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& self) {
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        accum(ai, i, self.grad[i]);
                                        accum(bi, i, self.grad[i]);
                                    }
                                });
    auto& od = out.data();
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] + bd[i];
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    Tensor out = make_op_result(a.shape(), {a, b},
                                [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& self) {
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        accum(ai, i, self.grad[i] * bi->data[i]);
                                        accum(bi, i, self.grad[i] * ai->data[i]);
                                    }
                                });
    auto& od = out.data();
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] * bd[i];
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    Tensor out = make_op_result(x.shape(), {x}, [xi = x.impl(), factor](const detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i] * factor;
    });
    auto& od = out.data();
    const auto& xd = x.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * factor;
    return out;
}

Tensor max_pool2d(const Tensor& input, int k, int stride) {
    if (input.ndim() != 4) throw InvalidArgument("max_pool2d: input must be [N,C,H,W]");
    if (k < 1 || stride < 1) throw InvalidArgument("max_pool2d: k and stride must be >= 1");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h < k || w < k) throw InvalidArgument("max_pool2d: window larger than input");
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;

    auto argmax = std::make_shared<std::vector<size_t>>(
        static_cast<size_t>(n) * c * oh * ow);
    Tensor out = make_op_result(Shape{n, c, oh, ow}, {input},
                                [xi = input.impl(), argmax](const detail::TensorImpl& self) {
                                    if (!xi->requires_grad) return;
                                    xi->ensure_grad();
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        xi->grad[(*argmax)[i]] += self.grad[i];
                                    }
                                });
    auto& od = out.data();
    const auto& xd = input.data();
    size_t oi = 0;
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const size_t base = (static_cast<size_t>(ni) * c + ci) * h * w;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    size_t best_idx = 0;
                    for (int ky = 0; ky < k; ++ky) {
                        const size_t row = base + static_cast<size_t>(oy * stride + ky) * w + ox * stride;
                        for (int kx = 0; kx < k; ++kx) {
                            const double v = xd[row + kx];
                            if (v > best) {  // strict: first row-major max wins ties
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    od[oi] = best;
                    (*argmax)[oi] = best_idx;
                }
            }
        }
    }
    return out;
}

Tensor sigmoid_cross_entropy(const Tensor& logits, const Tensor& labels) {
    if (logits.ndim() > 1) throw InvalidArgument("sigmoid_cross_entropy: logits must be [N] or scalar");
    check_same_shape(logits, labels, "sigmoid_cross_entropy");
    const auto& yd = labels.data();
    for (double y : yd) {
        if (y != 0.0 && y != 1.0) throw InvalidArgument("sigmoid_cross_entropy: labels must be 0 or 1");
    }
    const size_t n = logits.data().size();
    Tensor out = make_op_result(
        Shape{}, {logits, labels},
        [li = logits.impl(), yi = labels.impl(), n](const detail::TensorImpl& self) {
            if (!li->requires_grad) return;
            li->ensure_grad();
            const double g = self.grad[0] / static_cast<double>(n);
            for (size_t i = 0; i < n; ++i) {
                const double v = li->data[i];
                const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                li->grad[i] += g * (s - yi->data[i]);
            }
        });
    const auto& ld = logits.data();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        // max(l,0) - l*y + log(1 + exp(-|l|))
        const double l = ld[i];
        acc += std::max(l, 0.0) - l * yd[i] + std::log1p(std::exp(-std::abs(l)));
    }
    out.data()[0] = acc / static_cast<double>(n);
    return out;
}

Tensor xcorr2d(const Tensor& window_feat, const Tensor& template_feat) {
    if (window_feat.ndim() != 3 || template_feat.ndim() != 3) {
        throw InvalidArgument("xcorr2d: inputs must be [D,H,W]");
    }
    const int d = window_feat.dim(0), hf = window_feat.dim(1), wf = window_feat.dim(2);
    const int dt = template_feat.dim(0), ht = template_feat.dim(1), wt = template_feat.dim(2);
    if (d != dt) throw InvalidArgument("xcorr2d: channel mismatch");
    if (ht > hf || wt > wf) throw InvalidArgument("xcorr2d: template larger than window");
    const int hc = hf - ht + 1;
    const int wc = wf - wt + 1;
    Tensor out = make_op_result(
        Shape{1, hc, wc}, {window_feat, template_feat},
        [fi = window_feat.impl(), hi = template_feat.impl(), d, hf, wf, ht, wt, hc,
         wc](const detail::TensorImpl& self) {
            const bool need_f = fi->requires_grad;
            const bool need_h = hi->requires_grad;
            if (need_f) fi->ensure_grad();
            if (need_h) hi->ensure_grad();
            for (int py = 0; py < hc; ++py) {
                for (int px = 0; px < wc; ++px) {
                    const double g = self.grad[static_cast<size_t>(py) * wc + px];
                    if (g == 0.0) continue;
                    for (int c = 0; c < d; ++c) {
                        const size_t f_base = static_cast<size_t>(c) * hf * wf;
                        const size_t h_base = static_cast<size_t>(c) * ht * wt;
                        for (int qy = 0; qy < ht; ++qy) {
                            const size_t f_row = f_base + static_cast<size_t>(py + qy) * wf + px;
                            const size_t h_row = h_base + static_cast<size_t>(qy) * wt;
                            for (int qx = 0; qx < wt; ++qx) {
                                if (need_f) fi->grad[f_row + qx] += g * hi->data[h_row + qx];
                                if (need_h) hi->grad[h_row + qx] += g * fi->data[f_row + qx];
                            }
                        }
                    }
                }
            }
        });
    auto& od = out.data();
    const auto& fd = window_feat.data();
    const auto& hd = template_feat.data();
    for (int py = 0; py < hc; ++py) {
        for (int px = 0; px < wc; ++px) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                const size_t f_base = static_cast<size_t>(c) * hf * wf;
                const size_t h_base = static_cast<size_t>(c) * ht * wt;
                for (int qy = 0; qy < ht; ++qy) {
                    const size_t f_row = f_base + static_cast<size_t>(py + qy) * wf + px;
                    const size_t h_row = h_base + static_cast<size_t>(qy) * wt;
                    for (int qx = 0; qx < wt; ++qx) acc += fd[f_row + qx] * hd[h_row + qx];
                }
            }
            od[static_cast<size_t>(py) * wc + px] = acc;
        }
    }
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = make_op_result(Shape{}, {x}, [xi = x.impl()](const detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        const double g = self.grad[0];
        for (double& gv : xi->grad) gv += g;
    });
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_size(new_shape) != x.size()) throw InvalidArgument("reshape: size mismatch");
    Tensor out = make_op_result(std::move(new_shape), {x}, [xi = x.impl()](const detail::TensorImpl& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
    });
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    return out;
}

Tensor flatten_row(const Tensor& x) { return reshape(x, Shape{1, static_cast<int>(x.size())}); }

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0)) {
        throw InvalidArgument("concat_cols: inputs must be [N,*] with equal N");
    }
    const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
    Tensor out = make_op_result(Shape{n, da + db}, {a, b},
                                [ai = a.impl(), bi = b.impl(), n, da, db](const detail::TensorImpl& self) {
                                    for (int i = 0; i < n; ++i) {
                                        const size_t row = static_cast<size_t>(i) * (da + db);
                                        for (int j = 0; j < da; ++j) accum(ai, static_cast<size_t>(i) * da + j, self.grad[row + j]);
                                        for (int j = 0; j < db; ++j) accum(bi, static_cast<size_t>(i) * db + j, self.grad[row + da + j]);
                                    }
                                });
    auto& od = out.data();
    for (int i = 0; i < n; ++i) {
        const size_t row = static_cast<size_t>(i) * (da + db);
        for (int j = 0; j < da; ++j) od[row + j] = a.data()[static_cast<size_t>(i) * da + j];
        for (int j = 0; j < db; ++j) od[row + da + j] = b.data()[static_cast<size_t>(i) * db + j];
    }
    return out;
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw InvalidArgument("stack_batch: empty list");
    const Shape& s0 = items[0].shape();
    if (s0.size() != 3) throw InvalidArgument("stack_batch: items must be [C,H,W]");
    for (const auto& t : items) {
        if (t.shape() != s0) throw InvalidArgument("stack_batch: inconsistent item shapes");
    }
    const int64_t per = items[0].size();
    std::vector<Tensor> parents = items;
    Tensor out = make_op_result(
        Shape{static_cast<int>(items.size()), s0[0], s0[1], s0[2]}, std::move(parents),
        [impls = [&] {
             std::vector<std::shared_ptr<detail::TensorImpl>> v;
             for (const auto& t : items) v.push_back(t.impl());
             return v;
         }(),
         per](const detail::TensorImpl& self) {
            for (size_t i = 0; i < impls.size(); ++i) {
                const size_t base = i * static_cast<size_t>(per);
                for (size_t j = 0; j < static_cast<size_t>(per); ++j) accum(impls[i], j, self.grad[base + j]);
            }
        });
    auto& od = out.data();
    for (size_t i = 0; i < items.size(); ++i) {
        std::copy(items[i].data().begin(), items[i].data().end(),
                  od.begin() + static_cast<int64_t>(i) * per);
    }
    return out;
}

Tensor slice_batch(const Tensor& x, int index) {
    if (x.ndim() != 4) throw InvalidArgument("slice_batch: input must be [N,C,H,W]");
    if (index < 0 || index >= x.dim(0)) throw InvalidArgument("slice_batch: index out of range");
    const int64_t per = x.size() / x.dim(0);
    Tensor out = make_op_result(Shape{x.dim(1), x.dim(2), x.dim(3)}, {x},
                                [xi = x.impl(), index, per](const detail::TensorImpl& self) {
                                    if (!xi->requires_grad) return;
                                    xi->ensure_grad();
                                    const size_t base = static_cast<size_t>(index) * per;
                                    for (size_t j = 0; j < self.grad.size(); ++j) xi->grad[base + j] += self.grad[j];
                                });
    const size_t base = static_cast<size_t>(index) * per;
    std::copy(x.data().begin() + base, x.data().begin() + base + per, out.data().begin());
    return out;
}

Tensor mean_of(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) throw InvalidArgument("mean_of: empty list");
    for (const auto& t : scalars) {
        if (t.size() != 1) throw InvalidArgument("mean_of: entries must be scalars");
    }
    Tensor acc = scalars[0];
    if (acc.ndim() != 0) acc = reshape(acc, Shape{});
    for (size_t i = 1; i < scalars.size(); ++i) {
        Tensor t = scalars[i];
        if (t.ndim() != 0) t = reshape(t, Shape{});
        acc = add(acc, t);
    }
    return scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw InvalidArgument("backward: undefined loss");
    if (loss.size() != 1) throw InvalidArgument("backward: loss must be scalar");
    auto root = loss.impl();

    // Collect the reachable graph, then replay in decreasing creation id.
    std::vector<std::shared_ptr<detail::TensorImpl>> nodes;
    std::unordered_set<const detail::TensorImpl*> seen;
    std::vector<std::shared_ptr<detail::TensorImpl>> work{root};
    seen.insert(root.get());
    while (!work.empty()) {
        auto cur = std::move(work.back());
        work.pop_back();
        for (const auto& p : cur->parents) {
            if (seen.insert(p.get()).second) work.push_back(p);
        }
        nodes.push_back(std::move(cur));
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (const auto& node : nodes) {
        if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
}

}  // namespace rcn
