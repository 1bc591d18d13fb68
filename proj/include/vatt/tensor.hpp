#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vatt/errors.hpp"
#include "vatt/random.hpp"

namespace vatt {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f64 tensor, at most 4 axes in practice (N/C/H/W).
// Copies are shallow: they alias the same storage, so a Tensor held by a
// tape node or a parameter list sees gradient updates in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    std::int64_t dim(int axis) const;
    std::int64_t size() const;

    std::span<double> values();
    std::span<const double> values() const;

    bool requires_grad() const;
    void set_requires_grad(bool enabled);
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();

    // Scalar extraction; only valid for size-1 tensors.
    double item() const;

    // Row-major element access for construction and inspection.
    double at(std::initializer_list<std::int64_t> index) const;
    double& at(std::initializer_list<std::int64_t> index);

    // Deep copy of the values; the copy starts without gradient tracking.
    Tensor clone() const;

    bool same_shape(const Tensor& other) const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    friend class Tape;
};

// Wengert list: ops executed while a tape is active append one node each,
// and backward replays the nodes in exact reverse execution order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers the backward step of one executed op. Public so tests can
    // record custom ops (e.g. deliberately corrupted gradients).
    void record(std::string op_name, std::function<void()> backward_fn);

    // Seeds d(loss)/d(loss) = 1 and walks the tape backwards, accumulating
    // gradients into every tensor that requires them.
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // The tape ops currently record onto (one per thread of control).
    static Tape* active();

private:
    struct Node {
        std::string op;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;

    friend class TapeScope;
};

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_ = nullptr;
};

// ---- operator set ----------------------------------------------------------
// All ops validate shapes, reject non-finite results, and record their
// backward step when a tape is active and any input requires gradients.

Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation (no kernel flip), square odd kernels, no stride/dilation.
// x: [C_in, H, W], w: [C_out, C_in, k, k]; pad = (k-1)/2 preserves shape.
Tensor conv2d(const Tensor& x, const Tensor& w, int pad);

Tensor global_avg_pool(const Tensor& x);  // [C,H,W] -> [C]
Tensor global_max_pool(const Tensor& x);  // [C,H,W] -> [C]

// [C,H,W] -> [2,H,W]; plane 0 per-pixel channel max, plane 1 channel mean.
// The max gradient routes to the lowest-index argmax channel.
Tensor channel_pool(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// out[c,h,w] = x[c,h,w] * gate, gate shaped [C,1,1] or [1,H,W].
Tensor mul_broadcast(const Tensor& x, const Tensor& gate);

Tensor add(const Tensor& a, const Tensor& b);                    // same shape
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);    // [C,H,W] + [C]
Tensor stack(std::span<const Tensor> parts);                     // new leading axis
Tensor reshape(const Tensor& x, Shape shape);
Tensor scale(const Tensor& x, double factor);
Tensor sum_all(const Tensor& x);   // -> shape {1}
Tensor mean_all(const Tensor& x);  // -> shape {1}
Tensor dot(const Tensor& a, const Tensor& b);  // flattened inner product -> {1}

// Mean binary cross-entropy on logits; numerically stable softplus form.
// Targets are treated as constants and must lie in [0,1].
// Mean of -[pw*t*log(sigmoid(x)) + (1-t)*log(1-sigmoid(x))]; pos_weight
// rebalances sparse foregrounds. Targets are constants in [0,1].
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets, double pos_weight = 1.0);

// ---- gradient checking -----------------------------------------------------

struct GradcheckResult {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst;  // "input #i element j" of the worst disagreement
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares tape gradients of the scalar-valued f against central differences
// for every element of every input. Relative error is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradcheckResult gradcheck(const TensorFn& f, const std::vector<Tensor>& inputs,
                          double eps = 1e-4, double tol = 1e-4);

// ---- serialization ---------------------------------------------------------
// Raw little-endian f64 buffer at `data_path` plus a JSON sidecar at
// `data_path + ".json"` holding {shape, dtype:"f64", order:"row-major"}.

void save_tensor(const Tensor& t, const std::string& data_path);
Tensor load_tensor(const std::string& data_path);

// Effective internal parallelism; VA_ENGINE_THREADS caps it.
int engine_threads();

}  // namespace vatt
