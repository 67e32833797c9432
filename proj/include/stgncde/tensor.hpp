#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stgncde {

class Tape;

namespace detail {

// Tape bookkeeping shared by all copies of a tensor. A leaf keeps its node id
// here so that re-using the same parameter in many ops accumulates gradients
// on one node.
struct GradMeta {
    bool requires_grad = false;
    int node = -1;
    std::uint64_t epoch = 0;
};

std::string shape_str(std::span<const int> shape);
std::int64_t shape_numel(std::span<const int> shape);

}  // namespace detail

/// Dense row-major tensor of 64-bit reals.
///
/// Copies are shallow (they share the buffer); clone() deep-copies. Tensors
/// are treated as immutable values once created -- raw() exists for
/// initialization and optimizer updates, which happen strictly outside any
/// recording.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from_data(std::vector<int> shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor identity(int n);

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    // 2-d accessors.
    int rows() const;
    int cols() const;

    std::span<const double> data() const&;
    std::span<const double> data() const&& = delete;  // would dangle past the temporary
    /// Mutable view of the buffer. Only valid off-tape (parameter init,
    /// optimizer step); mutating a recorded tensor corrupts saved activations.
    std::span<double> raw() &;
    std::span<double> raw() && = delete;

    double value() const;  // scalar tensors only
    double at2(int r, int c) const;
    double at3(int i, int j, int k) const;

    Tensor clone() const;
    /// Same buffer under a new shape. Drops tape identity, so use off-tape only.
    Tensor reshaped(std::vector<int> new_shape) const;

    Tensor& set_requires_grad(bool v = true);
    bool requires_grad() const { return meta_ && meta_->requires_grad; }
    /// Node id on the given tape's current recording, or -1.
    int node_on(const Tape& tape) const;

    bool all_finite() const;

  private:
    friend class Tape;

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<detail::GradMeta> meta_;
};

/// Reverse-mode tape over a dynamically recorded computation graph.
///
/// Ops record onto the thread-active tape (see Activate). backward() runs the
/// reverse topological sweep, accumulating gradients in recording order, then
/// clears the recorded ops; leaf gradients stay readable via grad() until the
/// next recording starts. A tape is single-owner and must not be shared
/// across threads.
class Tape {
  public:
    using BackwardFn = std::function<void(std::span<const double> upstream, Tape&)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    /// RAII guard making a tape the active recording target for this thread.
    class Activate {
      public:
        explicit Activate(Tape& tape);
        ~Activate();
        Activate(const Activate&) = delete;
        Activate& operator=(const Activate&) = delete;

      private:
        Tape* previous_;
    };

    static Tape* active();

    /// Reverse sweep from a scalar loss recorded on this tape.
    void backward(const Tensor& loss);

    /// Gradient of a tensor recorded on this tape, from the last backward().
    /// A leaf that never contributed to the loss gets a zero gradient of its
    /// own shape.
    Tensor grad(const Tensor& t) const;

    /// Whether t took part in the recording the last backward() swept.
    bool recorded(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }
    std::uint64_t epoch() const { return epoch_; }

    // --- recording interface used by the ops ---

    /// Registers t as a leaf if it requires grad and is not yet on this
    /// recording; returns its node id, or -1 for constants.
    int track(const Tensor& t);
    /// Records an op result. bw receives the upstream gradient of the result.
    Tensor emit(std::vector<int> shape, std::vector<double> values, BackwardFn bw);
    /// Same, for a result tensor the op already built (lets the closure share
    /// the output buffer instead of copying it).
    Tensor adopt(Tensor t, BackwardFn bw);
    /// Accumulation target for node `id` during backward.
    std::vector<double>& grad_buffer(int id, std::int64_t numel);

  private:
    struct NodeRec {
        bool is_leaf = false;
        std::int64_t numel = 0;
        BackwardFn backward;
    };

    void begin_recording_if_needed();

    std::vector<NodeRec> nodes_;
    std::vector<std::vector<double>> grads_;
    std::uint64_t epoch_ = 0;
    bool swept_ = false;
};

// --- ops ---
//
// Each op computes eagerly and, when a tape is active and any input is
// tracked, records a backward closure. Gradient contracts are checked against
// central finite differences in the test suite.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);  // scalar

/// Broadcast-add a length-c vector to every row of an r x c matrix.
Tensor add_rowvec(const Tensor& m, const Tensor& v);

/// Fused x . w + b with the bias broadcast per row; the FC-layer workhorse.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Per-row matrix-vector product: row r of `a` is read as a p x q matrix and
/// applied to row r of `x` (length q), giving row r of the result (length p).
Tensor rowwise_matvec(const Tensor& a, const Tensor& x, int p);

/// Block-diagonal graph mixing: x holds B stacked v x c blocks; each block is
/// left-multiplied by the v x v matrix `adj`.
Tensor graph_mix(const Tensor& adj, const Tensor& x);

namespace detail {
// Raw row-major kernels shared by forward ops and backward closures.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n);
void transpose_into(const double* a, double* t, int rows, int cols);
void vtanh(const double* x, double* y, std::size_t n);
}  // namespace detail

}  // namespace stgncde
