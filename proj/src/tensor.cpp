#include "vatt/tensor.hpp"

#include "vatt/endian.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <nlohmann/json.hpp>

namespace vatt {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_axis3(const Tensor& x, const char* op) {
    if (x.rank() != 3) {
        throw DimensionError(std::string(op) + ": expected a rank-3 [C,H,W] tensor, got shape " +
                             shape_str(x.shape()));
    }
}

[[noreturn]] void throw_non_finite(const char* op) {
    throw NumericError(std::string(op) + ": non-finite values (NaN/Inf are an error state)");
}

void ensure_finite(const char* op, std::span<const double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw_non_finite(op);
        }
    }
}

}  // namespace

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            s += ",";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// ---- Tensor ----------------------------------------------------------------

struct Tensor::Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
};

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (auto e : shape) {
        if (e < 0) {
            throw DimensionError("tensor: negative extent in shape " + shape_str(shape));
        }
    }
    auto impl = std::make_shared<Impl>();
    const auto n = static_cast<std::size_t>(shape_size(shape));
    impl->shape = std::move(shape);
    impl->values.assign(n, value);
    Tensor t(std::move(impl));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != shape_size(shape)) {
        throw DimensionError("tensor: data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    Tensor t(std::move(impl));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

std::int64_t Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) {
        throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl_->values.size()); }

std::span<double> Tensor::values() { return impl_->values; }
std::span<const double> Tensor::values() const { return impl_->values; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool enabled) {
    impl_->requires_grad = enabled;
    if (enabled && impl_->grad.size() != impl_->values.size()) {
        impl_->grad.assign(impl_->values.size(), 0.0);
    }
}

std::span<double> Tensor::grad() {
    if (!impl_->requires_grad) {
        throw ContractError("tensor: gradient requested but requires_grad is off");
    }
    return impl_->grad;
}

std::span<const double> Tensor::grad() const {
    if (!impl_->requires_grad) {
        throw ContractError("tensor: gradient requested but requires_grad is off");
    }
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_->requires_grad) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("tensor: item() requires a size-1 tensor, got shape " + shape_str(shape()));
    }
    return impl_->values[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
    return const_cast<Tensor*>(this)->at(index);
}

double& Tensor::at(std::initializer_list<std::int64_t> index) {
    if (static_cast<int>(index.size()) != rank()) {
        throw DimensionError("tensor: index rank mismatch for shape " + shape_str(shape()));
    }
    std::int64_t flat = 0;
    int axis = 0;
    for (auto i : index) {
        const auto extent = impl_->shape[static_cast<std::size_t>(axis)];
        if (i < 0 || i >= extent) {
            throw DimensionError("tensor: index out of bounds for shape " + shape_str(shape()));
        }
        flat = flat * extent + i;
        ++axis;
    }
    return impl_->values[static_cast<std::size_t>(flat)];
}

Tensor Tensor::clone() const {
    return from_data(impl_->shape, impl_->values, false);
}

bool Tensor::same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }

// ---- Tape ------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::string op_name, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(op_name), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar (size-1) tensor");
    }
    if (nodes_.empty()) {
        throw ContractError("backward: tape is empty");
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss does not require gradients");
    }
    loss.impl_->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward();
    }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

// ---- op plumbing -----------------------------------------------------------

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

// Grad span of a tensor known to require gradients.
std::span<double> grad_of(Tensor& t) { return t.grad(); }

}  // namespace

int engine_threads() {
    static const int threads = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0) {
            n = 1;
        }
        n = std::min(n, 16);
        if (const char* env = std::getenv("VA_ENGINE_THREADS")) {
            char* end = nullptr;
            const long parsed = std::strtol(env, &end, 10);
            if (end != env && parsed >= 1) {
                n = static_cast<int>(std::min<long>(parsed, 64));
            }
        }
        return n;
    }();
    return threads;
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), p = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, p});
    {
        const double* av = a.values().data();
        const double* bv = b.values().data();
        double* ov = out.values().data();
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const double aik = av[i * k + kk];
                const double* brow = bv + kk * p;
                double* orow = ov + i * p;
                for (std::int64_t j = 0; j < p; ++j) {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    ensure_finite("matmul", out.values());

    if (wants_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("matmul", [ac, bc, oc, m, k, p]() mutable {
            auto og = oc.grad();
            if (ac.requires_grad()) {
                auto ag = grad_of(ac);
                const double* bv = bc.values().data();
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const double* brow = bv + kk * p;
                        const double* grow = og.data() + i * p;
                        for (std::int64_t j = 0; j < p; ++j) {
                            acc += grow[j] * brow[j];
                        }
                        ag[static_cast<std::size_t>(i * k + kk)] += acc;
                    }
                }
            }
            if (bc.requires_grad()) {
                auto bg = grad_of(bc);
                const double* av = ac.values().data();
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    for (std::int64_t i = 0; i < m; ++i) {
                        const double aik = av[i * k + kk];
                        const double* grow = og.data() + i * p;
                        double* bgrow = bg.data() + kk * p;
                        for (std::int64_t j = 0; j < p; ++j) {
                            bgrow[j] += aik * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// Accumulates w * x_row into out_row over the column overlap implied by pad.
inline void conv_row_accum(double* out_row, const double* x_row, double weight,
                           std::int64_t out_w, std::int64_t in_w, std::int64_t dx) {
    const std::int64_t j0 = std::max<std::int64_t>(0, -dx);
    const std::int64_t j1 = std::min(out_w, in_w - dx);
    for (std::int64_t j = j0; j < j1; ++j) {
        out_row[j] += weight * x_row[j + dx];
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int pad) {
    check_axis3(x, "conv2d");
    if (w.rank() != 4) {
        throw DimensionError("conv2d: expected rank-4 [C_out,C_in,k,k] weights, got shape " +
                             shape_str(w.shape()));
    }
    const std::int64_t c_in = x.dim(0), h = x.dim(1), width = x.dim(2);
    const std::int64_t c_out = w.dim(0), wc_in = w.dim(1), k = w.dim(2), k2 = w.dim(3);
    if (k != k2) {
        throw DimensionError("conv2d: kernel must be square, got shape " + shape_str(w.shape()));
    }
    if (k % 2 == 0) {
        throw ContractError("conv2d: even kernel size " + std::to_string(k) + " unsupported");
    }
    if (wc_in != c_in) {
        throw DimensionError("conv2d: input channels disagree: x " + shape_str(x.shape()) +
                             " vs w " + shape_str(w.shape()));
    }
    if (pad < 0) {
        throw ContractError("conv2d: negative padding");
    }
    const std::int64_t out_h = h + 2 * pad - k + 1;
    const std::int64_t out_w = width + 2 * pad - k + 1;
    if (out_h < 1 || out_w < 1) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " with pad " +
                             std::to_string(pad) + " exceeds input " + shape_str(x.shape()));
    }

    Tensor out = Tensor::zeros({c_out, out_h, out_w});
    {
        const double* xv = x.values().data();
        const double* wv = w.values().data();
        double* ov = out.values().data();
        const int nthreads = engine_threads();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthreads) if (nthreads > 1 && c_out > 1)
#endif
        for (std::int64_t co = 0; co < c_out; ++co) {
            double* oplane = ov + co * out_h * out_w;
            for (std::int64_t ci = 0; ci < c_in; ++ci) {
                const double* xplane = xv + ci * h * width;
                const double* wk = wv + (co * c_in + ci) * k * k;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const double weight = wk[ky * k + kx];
                        if (weight == 0.0) {
                            continue;
                        }
                        const std::int64_t dy = ky - pad;
                        const std::int64_t dx = kx - pad;
                        const std::int64_t i0 = std::max<std::int64_t>(0, -dy);
                        const std::int64_t i1 = std::min(out_h, h - dy);
                        for (std::int64_t i = i0; i < i1; ++i) {
                            conv_row_accum(oplane + i * out_w, xplane + (i + dy) * width, weight,
                                           out_w, width, dx);
                        }
                    }
                }
            }
        }
    }
    ensure_finite("conv2d", out.values());

    if (wants_grad({&x, &w})) {
        out.set_requires_grad(true);
        Tensor xc = x, wc = w, oc = out;
        Tape::active()->record("conv2d", [xc, wc, oc, pad, c_in, h, width, c_out, k, out_h,
                                          out_w]() mutable {
            auto og = oc.grad();
            const double* gv = og.data();
            const int nthreads = engine_threads();
            if (xc.requires_grad()) {
                auto xg = grad_of(xc);
                double* xgv = xg.data();
                const double* wv = wc.values().data();
                // dx[ci] collects from every output channel; parallel over ci
                // keeps each accumulation target on a single thread.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthreads) if (nthreads > 1 && c_in > 1)
#endif
                for (std::int64_t ci = 0; ci < c_in; ++ci) {
                    double* xgplane = xgv + ci * h * width;
                    for (std::int64_t co = 0; co < c_out; ++co) {
                        const double* gplane = gv + co * out_h * out_w;
                        const double* wk = wv + (co * c_in + ci) * k * k;
                        for (std::int64_t ky = 0; ky < k; ++ky) {
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                const double weight = wk[ky * k + kx];
                                if (weight == 0.0) {
                                    continue;
                                }
                                const std::int64_t dy = ky - pad;
                                const std::int64_t dx = kx - pad;
                                const std::int64_t i0 = std::max<std::int64_t>(0, -dy);
                                const std::int64_t i1 = std::min(out_h, h - dy);
                                for (std::int64_t i = i0; i < i1; ++i) {
                                    const double* grow = gplane + i * out_w;
                                    double* xrow = xgplane + (i + dy) * width;
                                    const std::int64_t j0 = std::max<std::int64_t>(0, -dx);
                                    const std::int64_t j1 = std::min(out_w, width - dx);
                                    for (std::int64_t j = j0; j < j1; ++j) {
                                        xrow[j + dx] += weight * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (wc.requires_grad()) {
                auto wg = grad_of(wc);
                double* wgv = wg.data();
                const double* xv = xc.values().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthreads) if (nthreads > 1 && c_out > 1)
#endif
                for (std::int64_t co = 0; co < c_out; ++co) {
                    const double* gplane = gv + co * out_h * out_w;
                    for (std::int64_t ci = 0; ci < c_in; ++ci) {
                        const double* xplane = xv + ci * h * width;
                        double* wk = wgv + (co * c_in + ci) * k * k;
                        for (std::int64_t ky = 0; ky < k; ++ky) {
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                const std::int64_t dy = ky - pad;
                                const std::int64_t dx = kx - pad;
                                const std::int64_t i0 = std::max<std::int64_t>(0, -dy);
                                const std::int64_t i1 = std::min(out_h, h - dy);
                                const std::int64_t j0 = std::max<std::int64_t>(0, -dx);
                                const std::int64_t j1 = std::min(out_w, width - dx);
                                double acc = 0.0;
                                for (std::int64_t i = i0; i < i1; ++i) {
                                    const double* grow = gplane + i * out_w;
                                    const double* xrow = xplane + (i + dy) * width;
                                    for (std::int64_t j = j0; j < j1; ++j) {
                                        acc += grow[j] * xrow[j + dx];
                                    }
                                }
                                wk[ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- pooling ---------------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
    check_axis3(x, "global_avg_pool");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 1 || w < 1) {
        throw DimensionError("global_avg_pool: empty spatial extent in shape " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({c});
    const double inv = 1.0 / static_cast<double>(h * w);
    {
        const double* xv = x.values().data();
        double* ov = out.values().data();
        for (std::int64_t ci = 0; ci < c; ++ci) {
            double acc = 0.0;
            const double* plane = xv + ci * h * w;
            for (std::int64_t i = 0; i < h * w; ++i) {
                acc += plane[i];
            }
            ov[ci] = acc * inv;
        }
    }
    ensure_finite("global_avg_pool", out.values());

    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("global_avg_pool", [xc, oc, c, h, w, inv]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const double g = og[static_cast<std::size_t>(ci)] * inv;
                double* plane = xg.data() + ci * h * w;
                for (std::int64_t i = 0; i < h * w; ++i) {
                    plane[i] += g;
                }
            }
        });
    }
    return out;
}

Tensor global_max_pool(const Tensor& x) {
    check_axis3(x, "global_max_pool");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 1 || w < 1) {
        throw DimensionError("global_max_pool: empty spatial extent in shape " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({c});
    // First-occurrence argmax per channel; backward routes to that element only.
    std::vector<std::int64_t> arg(static_cast<std::size_t>(c), 0);
    {
        const double* xv = x.values().data();
        double* ov = out.values().data();
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double* plane = xv + ci * h * w;
            std::int64_t best = 0;
            for (std::int64_t i = 1; i < h * w; ++i) {
                if (plane[i] > plane[best]) {
                    best = i;
                }
            }
            arg[static_cast<std::size_t>(ci)] = best;
            ov[ci] = plane[best];
        }
    }
    ensure_finite("global_max_pool", out.values());

    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("global_max_pool", [xc, oc, c, h, w, arg]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            for (std::int64_t ci = 0; ci < c; ++ci) {
                xg[static_cast<std::size_t>(ci * h * w + arg[static_cast<std::size_t>(ci)])] +=
                    og[static_cast<std::size_t>(ci)];
            }
        });
    }
    return out;
}

Tensor channel_pool(const Tensor& x) {
    check_axis3(x, "channel_pool");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (c < 1) {
        throw DimensionError("channel_pool: need at least one channel, got " + shape_str(x.shape()));
    }
    ensure_finite("channel_pool (input)", x.values());
    Tensor out = Tensor::zeros({2, h, w});
    std::vector<std::int32_t> argmax(static_cast<std::size_t>(h * w));
    {
        const double* xv = x.values().data();
        double* maxv = out.values().data();
        double* avgv = maxv + h * w;
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::int64_t i = 0; i < h * w; ++i) {
            double best = xv[i];
            std::int32_t best_c = 0;
            double acc = xv[i];
            for (std::int64_t ci = 1; ci < c; ++ci) {
                const double v = xv[ci * h * w + i];
                acc += v;
                if (v > best) {  // strict: ties keep the lowest channel index
                    best = v;
                    best_c = static_cast<std::int32_t>(ci);
                }
            }
            maxv[i] = best;
            avgv[i] = acc * inv_c;
            argmax[static_cast<std::size_t>(i)] = best_c;
        }
    }

    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("channel_pool", [xc, oc, c, h, w, argmax = std::move(argmax)]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            const double* gmax = og.data();
            const double* gavg = og.data() + h * w;
            const double inv_c = 1.0 / static_cast<double>(c);
            for (std::int64_t i = 0; i < h * w; ++i) {
                xg[static_cast<std::size_t>(argmax[static_cast<std::size_t>(i)] * h * w + i)] += gmax[i];
                const double spread = gavg[i] * inv_c;
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    xg[static_cast<std::size_t>(ci * h * w + i)] += spread;
                }
            }
        });
    }
    return out;
}

// ---- softmax / elementwise -------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(x.shape()));
    }
    ensure_finite("softmax (input)", x.values());

    const auto& shape = x.shape();
    const std::int64_t lanes = shape[static_cast<std::size_t>(axis)];
    std::int64_t inner = 1;
    for (int a = axis + 1; a < x.rank(); ++a) {
        inner *= shape[static_cast<std::size_t>(a)];
    }
    const std::int64_t outer = x.size() / (lanes * inner);

    Tensor out = Tensor::zeros(shape);
    {
        const double* xv = x.values().data();
        double* ov = out.values().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * lanes * inner + in;
                double mx = xv[base];
                for (std::int64_t l = 1; l < lanes; ++l) {
                    mx = std::max(mx, xv[base + l * inner]);
                }
                double denom = 0.0;
                for (std::int64_t l = 0; l < lanes; ++l) {
                    const double e = std::exp(xv[base + l * inner] - mx);
                    ov[base + l * inner] = e;
                    denom += e;
                }
                const double inv = 1.0 / denom;
                for (std::int64_t l = 0; l < lanes; ++l) {
                    ov[base + l * inner] *= inv;
                }
            }
        }
    }
    ensure_finite("softmax", out.values());

    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("softmax", [xc, oc, lanes, inner, outer]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            const double* yv = oc.values().data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * lanes * inner + in;
                    double dotp = 0.0;
                    for (std::int64_t l = 0; l < lanes; ++l) {
                        const std::int64_t idx = base + l * inner;
                        dotp += og[static_cast<std::size_t>(idx)] * yv[idx];
                    }
                    for (std::int64_t l = 0; l < lanes; ++l) {
                        const std::int64_t idx = base + l * inner;
                        xg[static_cast<std::size_t>(idx)] +=
                            yv[idx] * (og[static_cast<std::size_t>(idx)] - dotp);
                    }
                }
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    ensure_finite("relu (input)", x.values());
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* xv = x.values().data();
        double* ov = out.values().data();
        const std::int64_t n = x.size();
        for (std::int64_t i = 0; i < n; ++i) {
            ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        }
    }
    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("relu", [xc, oc]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            const double* xv = xc.values().data();
            for (std::size_t i = 0; i < xg.size(); ++i) {
                if (xv[i] > 0.0) {
                    xg[i] += og[i];
                }
            }
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* xv = x.values().data();
        double* ov = out.values().data();
        const std::int64_t n = x.size();
        for (std::int64_t i = 0; i < n; ++i) {
            const double v = xv[i];
            if (v >= 0.0) {
                const double e = std::exp(-v);
                ov[i] = 1.0 / (1.0 + e);
            } else {
                const double e = std::exp(v);
                ov[i] = e / (1.0 + e);
            }
        }
    }
    ensure_finite("sigmoid", out.values());

    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("sigmoid", [xc, oc]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            const double* yv = oc.values().data();
            for (std::size_t i = 0; i < xg.size(); ++i) {
                xg[i] += og[i] * yv[i] * (1.0 - yv[i]);
            }
        });
    }
    return out;
}

// ---- broadcasting / structure ----------------------------------------------

namespace {

enum class GateKind { per_channel, per_pixel };

GateKind classify_gate(const Tensor& x, const Tensor& gate) {
    const auto& gs = gate.shape();
    if (gate.rank() == 3 && gs[0] == x.dim(0) && gs[1] == 1 && gs[2] == 1) {
        return GateKind::per_channel;
    }
    if (gate.rank() == 3 && gs[0] == 1 && gs[1] == x.dim(1) && gs[2] == x.dim(2)) {
        return GateKind::per_pixel;
    }
    throw DimensionError("mul_broadcast: gate shape " + shape_str(gs) +
                         " is not broadcastable over " + shape_str(x.shape()) +
                         " (expected [C,1,1] or [1,H,W])");
}

}  // namespace

Tensor mul_broadcast(const Tensor& x, const Tensor& gate) {
    check_axis3(x, "mul_broadcast");
    const GateKind kind = classify_gate(x, gate);
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* xv = x.values().data();
        const double* gv = gate.values().data();
        double* ov = out.values().data();
        if (kind == GateKind::per_channel) {
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const double g = gv[ci];
                const double* xplane = xv + ci * h * w;
                double* oplane = ov + ci * h * w;
                for (std::int64_t i = 0; i < h * w; ++i) {
                    oplane[i] = xplane[i] * g;
                }
            }
        } else {
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const double* xplane = xv + ci * h * w;
                double* oplane = ov + ci * h * w;
                for (std::int64_t i = 0; i < h * w; ++i) {
                    oplane[i] = xplane[i] * gv[i];
                }
            }
        }
    }
    ensure_finite("mul_broadcast", out.values());

    if (wants_grad({&x, &gate})) {
        out.set_requires_grad(true);
        Tensor xc = x, gc = gate, oc = out;
        Tape::active()->record("mul_broadcast", [xc, gc, oc, kind, c, h, w]() mutable {
            auto og = oc.grad();
            const double* gv = gc.values().data();
            const double* xv = xc.values().data();
            if (xc.requires_grad()) {
                auto xg = grad_of(xc);
                if (kind == GateKind::per_channel) {
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        const double g = gv[ci];
                        for (std::int64_t i = 0; i < h * w; ++i) {
                            xg[static_cast<std::size_t>(ci * h * w + i)] +=
                                og[static_cast<std::size_t>(ci * h * w + i)] * g;
                        }
                    }
                } else {
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        for (std::int64_t i = 0; i < h * w; ++i) {
                            xg[static_cast<std::size_t>(ci * h * w + i)] +=
                                og[static_cast<std::size_t>(ci * h * w + i)] * gv[i];
                        }
                    }
                }
            }
            if (gc.requires_grad()) {
                auto gg = grad_of(gc);
                if (kind == GateKind::per_channel) {
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < h * w; ++i) {
                            acc += og[static_cast<std::size_t>(ci * h * w + i)] *
                                   xv[ci * h * w + i];
                        }
                        gg[static_cast<std::size_t>(ci)] += acc;
                    }
                } else {
                    for (std::int64_t i = 0; i < h * w; ++i) {
                        double acc = 0.0;
                        for (std::int64_t ci = 0; ci < c; ++ci) {
                            acc += og[static_cast<std::size_t>(ci * h * w + i)] *
                                   xv[ci * h * w + i];
                        }
                        gg[static_cast<std::size_t>(i)] += acc;
                    }
                }
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("add: shapes differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    {
        const double* av = a.values().data();
        const double* bv = b.values().data();
        double* ov = out.values().data();
        const std::int64_t n = a.size();
        for (std::int64_t i = 0; i < n; ++i) {
            ov[i] = av[i] + bv[i];
        }
    }
    ensure_finite("add", out.values());

    if (wants_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("add", [ac, bc, oc]() mutable {
            auto og = oc.grad();
            if (ac.requires_grad()) {
                auto ag = grad_of(ac);
                for (std::size_t i = 0; i < ag.size(); ++i) {
                    ag[i] += og[i];
                }
            }
            if (bc.requires_grad()) {
                auto bg = grad_of(bc);
                for (std::size_t i = 0; i < bg.size(); ++i) {
                    bg[i] += og[i];
                }
            }
        });
    }
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    check_axis3(x, "add_channel_bias");
    if (bias.rank() != 1 || bias.dim(0) != x.dim(0)) {
        throw DimensionError("add_channel_bias: bias shape " + shape_str(bias.shape()) +
                             " does not match channels of " + shape_str(x.shape()));
    }
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* xv = x.values().data();
        const double* bv = bias.values().data();
        double* ov = out.values().data();
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double b = bv[ci];
            for (std::int64_t i = 0; i < hw; ++i) {
                ov[ci * hw + i] = xv[ci * hw + i] + b;
            }
        }
    }
    ensure_finite("add_channel_bias", out.values());

    if (wants_grad({&x, &bias})) {
        out.set_requires_grad(true);
        Tensor xc = x, bc = bias, oc = out;
        Tape::active()->record("add_channel_bias", [xc, bc, oc, c, hw]() mutable {
            auto og = oc.grad();
            if (xc.requires_grad()) {
                auto xg = grad_of(xc);
                for (std::size_t i = 0; i < xg.size(); ++i) {
                    xg[i] += og[i];
                }
            }
            if (bc.requires_grad()) {
                auto bg = grad_of(bc);
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        acc += og[static_cast<std::size_t>(ci * hw + i)];
                    }
                    bg[static_cast<std::size_t>(ci)] += acc;
                }
            }
        });
    }
    return out;
}

Tensor stack(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ContractError("stack: need at least one tensor");
    }
    const Shape& base = parts[0].shape();
    for (const Tensor& t : parts) {
        if (t.shape() != base) {
            throw DimensionError("stack: member shape " + shape_str(t.shape()) +
                                 " differs from " + shape_str(base));
        }
    }
    Shape out_shape;
    out_shape.reserve(base.size() + 1);
    out_shape.push_back(static_cast<std::int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), base.begin(), base.end());

    Tensor out = Tensor::zeros(out_shape);
    const std::int64_t stride = shape_size(base);
    {
        double* ov = out.values().data();
        for (std::size_t p = 0; p < parts.size(); ++p) {
            std::memcpy(ov + static_cast<std::int64_t>(p) * stride, parts[p].values().data(),
                        static_cast<std::size_t>(stride) * sizeof(double));
        }
    }

    bool any_grad = false;
    for (const Tensor& t : parts) {
        any_grad = any_grad || t.requires_grad();
    }
    if (Tape::active() != nullptr && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held(parts.begin(), parts.end());
        Tensor oc = out;
        Tape::active()->record("stack", [held = std::move(held), oc, stride]() mutable {
            auto og = oc.grad();
            for (std::size_t p = 0; p < held.size(); ++p) {
                if (!held[p].requires_grad()) {
                    continue;
                }
                auto pg = held[p].grad();
                const double* src = og.data() + static_cast<std::int64_t>(p) * stride;
                for (std::int64_t i = 0; i < stride; ++i) {
                    pg[static_cast<std::size_t>(i)] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw DimensionError("reshape: size of " + shape_str(x.shape()) +
                             " does not match requested " + shape_str(shape));
    }
    Tensor out = Tensor::from_data(std::move(shape), {x.values().begin(), x.values().end()});
    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("reshape", [xc, oc]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            for (std::size_t i = 0; i < xg.size(); ++i) {
                xg[i] += og[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    if (!std::isfinite(factor)) {
        throw NumericError("scale: non-finite factor");
    }
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* xv = x.values().data();
        double* ov = out.values().data();
        const std::int64_t n = x.size();
        for (std::int64_t i = 0; i < n; ++i) {
            ov[i] = xv[i] * factor;
        }
    }
    ensure_finite("scale", out.values());
    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("scale", [xc, oc, factor]() mutable {
            auto xg = grad_of(xc);
            auto og = oc.grad();
            for (std::size_t i = 0; i < xg.size(); ++i) {
                xg[i] += og[i] * factor;
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) {
        acc += v;
    }
    Tensor out = Tensor::from_data({1}, {acc});
    ensure_finite("sum_all", out.values());
    if (wants_grad({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("sum_all", [xc, oc]() mutable {
            auto xg = grad_of(xc);
            const double g = oc.grad()[0];
            for (double& v : xg) {
                v += g;
            }
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    if (x.size() == 0) {
        throw DimensionError("mean_all: empty tensor");
    }
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("dot: shapes differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    double acc = 0.0;
    {
        const double* av = a.values().data();
        const double* bv = b.values().data();
        const std::int64_t n = a.size();
        for (std::int64_t i = 0; i < n; ++i) {
            acc += av[i] * bv[i];
        }
    }
    Tensor out = Tensor::from_data({1}, {acc});
    ensure_finite("dot", out.values());

    if (wants_grad({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("dot", [ac, bc, oc]() mutable {
            const double g = oc.grad()[0];
            if (ac.requires_grad()) {
                auto ag = grad_of(ac);
                const double* bv = bc.values().data();
                for (std::size_t i = 0; i < ag.size(); ++i) {
                    ag[i] += g * bv[i];
                }
            }
            if (bc.requires_grad()) {
                auto bg = grad_of(bc);
                const double* av = ac.values().data();
                for (std::size_t i = 0; i < bg.size(); ++i) {
                    bg[i] += g * av[i];
                }
            }
        });
    }
    return out;
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets, double pos_weight) {
    if (!logits.same_shape(targets)) {
        throw DimensionError("bce_with_logits_mean: shapes differ: " + shape_str(logits.shape()) +
                             " vs " + shape_str(targets.shape()));
    }
    if (targets.requires_grad()) {
        throw ContractError("bce_with_logits_mean: targets are constants and must not require grad");
    }
    if (logits.size() == 0) {
        throw DimensionError("bce_with_logits_mean: empty tensor");
    }
    if (!std::isfinite(pos_weight) || pos_weight <= 0.0) {
        throw ConfigError("bce_with_logits_mean: pos_weight must be finite and > 0");
    }
    for (double t : targets.values()) {
        if (!(t >= 0.0 && t <= 1.0)) {
            throw ContractError("bce_with_logits_mean: targets must lie in [0,1]");
        }
    }
    const std::int64_t n = logits.size();
    double acc = 0.0;
    {
        const double* zv = logits.values().data();
        const double* tv = targets.values().data();
        for (std::int64_t i = 0; i < n; ++i) {
            const double z = zv[i];
            // (1-t)*z + (1 + (pw-1)*t) * log(1 + exp(-z)), in overflow-safe form
            const double wt = 1.0 + (pos_weight - 1.0) * tv[i];
            acc += (1.0 - tv[i]) * z +
                   wt * (std::log1p(std::exp(-std::abs(z))) + std::max(-z, 0.0));
        }
    }
    Tensor out = Tensor::from_data({1}, {acc / static_cast<double>(n)});
    ensure_finite("bce_with_logits_mean", out.values());

    if (wants_grad({&logits})) {
        out.set_requires_grad(true);
        Tensor zc = logits, tc = targets, oc = out;
        Tape::active()->record("bce_with_logits_mean", [zc, tc, oc, n, pos_weight]() mutable {
            auto zg = grad_of(zc);
            const double g = oc.grad()[0] / static_cast<double>(n);
            const double* zv = zc.values().data();
            const double* tv = tc.values().data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double z = zv[i];
                const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                          : std::exp(z) / (1.0 + std::exp(z));
                const double wt = 1.0 + (pos_weight - 1.0) * tv[i];
                zg[static_cast<std::size_t>(i)] += g * ((1.0 - tv[i]) + wt * (s - 1.0));
            }
        });
    }
    return out;
}

// ---- gradcheck ---------------------------------------------------------------

GradcheckResult gradcheck(const TensorFn& f, const std::vector<Tensor>& inputs, double eps,
                          double tol) {
    if (eps <= 0.0 || tol <= 0.0) {
        throw ConfigError("gradcheck: eps and tol must be positive");
    }

    // Differentiable copies for the analytic pass.
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        Tensor c = t.clone();
        c.set_requires_grad(true);
        tracked.push_back(std::move(c));
    }

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor out = f(tracked);
        if (out.size() != 1) {
            throw ContractError("gradcheck: function must be scalar-valued, got shape " +
                                shape_str(out.shape()));
        }
        tape.backward(out);
    }

    // Plain copies for the numeric pass; evaluated outside any tape.
    std::vector<Tensor> plain;
    plain.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        plain.push_back(t.clone());
    }

    GradcheckResult result;
    result.pass = true;
    for (std::size_t which = 0; which < plain.size(); ++which) {
        auto vals = plain[which].values();
        auto analytic = tracked[which].grad();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double saved = vals[j];
            vals[j] = saved + eps;
            const double f_plus = f(plain).item();
            vals[j] = saved - eps;
            const double f_minus = f(plain).item();
            vals[j] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double a = analytic[j];
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst = "input #" + std::to_string(which) + " element " + std::to_string(j);
            }
        }
    }
    result.pass = result.max_rel_err <= tol;
    return result;
}

// ---- serialization -----------------------------------------------------------

namespace {

void to_little_endian(std::vector<double>& values) {
    detail::swap_le_inplace(values.data(), values.size());
}

}  // namespace

void save_tensor(const Tensor& t, const std::string& data_path) {
    std::vector<double> payload(t.values().begin(), t.values().end());
    to_little_endian(payload);
    {
        std::ofstream out(data_path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("save_tensor: cannot open " + data_path);
        }
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(double)));
    }
    nlohmann::ordered_json sidecar;
    sidecar["shape"] = t.shape();
    sidecar["dtype"] = "f64";
    sidecar["order"] = "row-major";
    std::ofstream meta(data_path + ".json", std::ios::trunc);
    meta << sidecar.dump() << "\n";
}

Tensor load_tensor(const std::string& data_path) {
    nlohmann::json sidecar;
    {
        std::ifstream meta(data_path + ".json");
        if (!meta) {
            throw IoError("load_tensor: missing sidecar " + data_path + ".json");
        }
        try {
            meta >> sidecar;
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("load_tensor: bad sidecar JSON: " + std::string(e.what()), e.byte);
        }
    }
    if (sidecar.value("dtype", "") != "f64" || sidecar.value("order", "") != "row-major") {
        throw ParseError("load_tensor: sidecar must declare dtype f64, row-major order", 0);
    }
    Shape shape = sidecar.at("shape").get<Shape>();
    for (auto e : shape) {
        if (e < 0) {
            throw ParseError("load_tensor: negative extent in sidecar shape " + shape_str(shape), 0);
        }
    }
    const auto n = static_cast<std::size_t>(shape_size(shape));

    std::ifstream in(data_path, std::ios::binary);
    if (!in) {
        throw IoError("load_tensor: cannot open " + data_path);
    }
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) {
        throw ParseError("load_tensor: truncated payload in " + data_path,
                         static_cast<std::size_t>(in.gcount()));
    }
    to_little_endian(values);  // symmetric byte swap on big-endian hosts
    return Tensor::from_data(std::move(shape), std::move(values));
}

}  // namespace vatt
