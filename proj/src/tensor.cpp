#include "stgncde/tensor.hpp"

#include <atomic>
#include <bit>
#include <cassert>
#include <cstring>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace stgncde {

namespace detail {

std::string shape_str(std::span<const int> shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << "]";
    return out.str();
}

std::int64_t shape_numel(std::span<const int> shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void transpose_into(const double* a, double* t, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            t[static_cast<std::size_t>(j) * rows + i] = a[static_cast<std::size_t>(i) * cols + j];
}

// Branch-free Cephes-style tanh over an array. libm tanh is a scalar call and
// dominates the profile at the model's head widths; this loop stays
// straight-line (clamp + select only) so it auto-vectorizes. Small arguments
// use the odd rational x + x^3 P(x^2)/Q(x^2); larger ones
// 1 - 2/(exp(2|x|)+1) with the classic polynomial exp reduction. Accuracy is
// a few ulp against libm across the whole range.
void vtanh(const double* x, double* y, std::size_t n) {
    constexpr double log2e = 1.4426950408889634073599;
    constexpr double ln2_hi = 6.93145751953125e-1;
    constexpr double ln2_lo = 1.42860682030941723212e-6;
    constexpr double round_magic = 6755399441055744.0;  // 1.5 * 2^52
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x[i];
        const double t0 = std::fabs(v);
        const double t = t0 < 19.0625 ? t0 : 19.0625;  // tanh saturates past here

        // |x| < 0.625: odd rational approximation
        const double z = t * t;
        const double pn =
            (-9.64399179425052238628e-1 * z - 9.92877231001918586564e1) * z -
            1.61468768441708447952e3;
        const double qd = ((z + 1.12811678491632931402e2) * z + 2.23548839060100448583e3) * z +
                          4.84406305325125486048e3;
        const double small = t + t * z * (pn / qd);

        // otherwise (e - 1) / (e + 1) with e = exp(2t), k in [0, 56]
        const double arg = 2.0 * t;
        const double k = std::floor(log2e * arg + 0.5);
        const double r = (arg - k * ln2_hi) - k * ln2_lo;
        const double rr = r * r;
        const double p = r * ((1.26177193074810590878e-4 * rr + 3.02994407707441961300e-2) * rr +
                              9.99999999999999999910e-1);
        const double q = ((3.00198505138664455042e-6 * rr + 2.52448340349684104192e-3) * rr +
                          2.27265548208155028766e-1) *
                             rr +
                         2.00000000000000000005e0;
        const double e0 = 1.0 + 2.0 * (p / (q - p));
        const std::uint64_t ki = std::bit_cast<std::uint64_t>(k + round_magic) & 0xffffffffULL;
        const double scale = std::bit_cast<double>((ki + 1023) << 52);
        const double e = e0 * scale;
        const double large = 1.0 - 2.0 / (e + 1.0);

        y[i] = std::copysign(t0 < 0.625 ? small : large, v);
    }
}

namespace {

#ifndef NDEBUG
void debug_check_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) throw std::logic_error(std::string(op) + ": non-finite value produced");
    }
}
#else
inline void debug_check_finite(const std::vector<double>&, const char*) {}
#endif

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

void require_2d(const Tensor& a, const char* op) {
    if (a.ndim() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor, got " + shape_str(a.shape()));
    }
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace
}  // namespace detail

// --- Tensor ---

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    const auto n = detail::shape_numel(shape);
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    for (double& v : *t.data_) v = value;
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values) {
    const auto n = detail::shape_numel(shape);
    if (n != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                    " values do not fill shape " + detail::shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::identity(int n) {
    Tensor t = zeros({n, n});
    for (int i = 0; i < n; ++i) (*t.data_)[static_cast<std::size_t>(i) * n + i] = 1.0;
    return t;
}

int Tensor::rows() const {
    detail::require_2d(*this, "rows");
    return shape_[0];
}

int Tensor::cols() const {
    detail::require_2d(*this, "cols");
    return shape_[1];
}

std::span<const double> Tensor::data() const& {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

std::span<double> Tensor::raw() & {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

double Tensor::value() const {
    if (size() != 1) {
        throw std::invalid_argument("value: expected a scalar, got shape " + detail::shape_str(shape_));
    }
    return (*data_)[0];
}

double Tensor::at2(int r, int c) const {
    detail::require_2d(*this, "at2");
    assert(r >= 0 && r < shape_[0] && c >= 0 && c < shape_[1]);
    return (*data_)[static_cast<std::size_t>(r) * shape_[1] + c];
}

double Tensor::at3(int i, int j, int k) const {
    if (ndim() != 3) throw std::invalid_argument("at3: expected a 3-d tensor, got " + detail::shape_str(shape_));
    assert(i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1] && k >= 0 && k < shape_[2]);
    return (*data_)[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    if (data_) t.data_ = std::make_shared<std::vector<double>>(*data_);
    if (meta_ && meta_->requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    if (detail::shape_numel(new_shape) != size()) {
        throw std::invalid_argument("reshaped: cannot view " + detail::shape_str(shape_) + " as " +
                                    detail::shape_str(new_shape));
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

Tensor& Tensor::set_requires_grad(bool v) {
    if (v) {
        if (!meta_) meta_ = std::make_shared<detail::GradMeta>();
        meta_->requires_grad = true;
    } else if (meta_) {
        meta_.reset();
    }
    return *this;
}

int Tensor::node_on(const Tape& tape) const {
    if (!meta_ || meta_->epoch != tape.epoch()) return -1;
    return meta_->node;
}

bool Tensor::all_finite() const {
    if (!data_) return true;
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// --- Tape ---

namespace {
// Epochs are globally unique so stale node ids from one tape can never be
// mistaken for a recording on another.
std::uint64_t next_epoch() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
}  // namespace

Tape::Tape() : epoch_(next_epoch()) {}

Tape::~Tape() = default;

Tape::Activate::Activate(Tape& tape) : previous_(detail::g_active_tape) { detail::g_active_tape = &tape; }
Tape::Activate::~Activate() { detail::g_active_tape = previous_; }

Tape* Tape::active() { return detail::g_active_tape; }

void Tape::begin_recording_if_needed() {
    if (!swept_) return;
    nodes_.clear();
    grads_.clear();
    epoch_ = next_epoch();
    swept_ = false;
}

int Tape::track(const Tensor& t) {
    if (!t.meta_ || !t.meta_->requires_grad) return -1;
    begin_recording_if_needed();
    if (t.meta_->epoch == epoch_ && t.meta_->node >= 0) return t.meta_->node;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(NodeRec{true, t.size(), nullptr});
    t.meta_->epoch = epoch_;
    t.meta_->node = id;
    return id;
}

Tensor Tape::emit(std::vector<int> shape, std::vector<double> values, BackwardFn bw) {
    return adopt(Tensor::from_data(std::move(shape), std::move(values)), std::move(bw));
}

Tensor Tape::adopt(Tensor t, BackwardFn bw) {
    begin_recording_if_needed();
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(NodeRec{false, t.size(), std::move(bw)});
    t.meta_ = std::make_shared<detail::GradMeta>(detail::GradMeta{true, id, epoch_});
    return t;
}

std::vector<double>& Tape::grad_buffer(int id, std::int64_t numel) {
    auto& buf = grads_[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(static_cast<std::size_t>(numel), 0.0);
    return buf;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    detail::shape_str(loss.shape()));
    }
    if (!loss.meta_ || swept_ || loss.meta_->epoch != epoch_ || loss.meta_->node < 0 ||
        loss.meta_->node >= static_cast<int>(nodes_.size())) {
        throw std::invalid_argument("backward: loss was not recorded on this tape");
    }
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.meta_->node)] = {1.0};
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        auto& rec = nodes_[static_cast<std::size_t>(i)];
        auto& buf = grads_[static_cast<std::size_t>(i)];
        if (buf.empty()) continue;  // node did not influence the loss
        if (rec.backward) rec.backward(buf, *this);
        if (!rec.is_leaf) {
            buf.clear();
            buf.shrink_to_fit();
        }
    }
    nodes_.clear();  // releases closures and the activations they captured
    swept_ = true;
}

bool Tape::recorded(const Tensor& t) const {
    return t.meta_ && t.meta_->epoch == epoch_ && t.meta_->node >= 0;
}

Tensor Tape::grad(const Tensor& t) const {
    if (!swept_) throw std::logic_error("grad: backward() has not run on this tape");
    if (!t.meta_ || t.meta_->epoch != epoch_ || t.meta_->node < 0 ||
        t.meta_->node >= static_cast<int>(grads_.size())) {
        throw std::invalid_argument("grad: tensor was not recorded on this tape");
    }
    const auto& buf = grads_[static_cast<std::size_t>(t.meta_->node)];
    if (buf.empty()) return Tensor::zeros(t.shape());
    return Tensor::from_data(t.shape(), buf);
}

// --- ops ---

namespace {

using detail::debug_check_finite;

// Shared skeleton: build the result tensor, then record a closure if any
// input is tracked on the active tape. The factory receives the result so ops
// that need the forward output in their backward can capture it without a
// copy.
Tensor finish_binary(const char* op, const Tensor& a, const Tensor& b, std::vector<int> shape,
                     std::vector<double> values,
                     const std::function<Tape::BackwardFn(int ia, int ib, const Tensor& out)>& make_bw) {
    debug_check_finite(values, op);
    Tensor result = Tensor::from_data(std::move(shape), std::move(values));
    Tape* tape = Tape::active();
    if (!tape) return result;
    const int ia = tape->track(a);
    const int ib = tape->track(b);
    if (ia < 0 && ib < 0) return result;
    Tape::BackwardFn bw = make_bw(ia, ib, result);
    return tape->adopt(std::move(result), std::move(bw));
}

Tensor finish_unary(const char* op, const Tensor& a, std::vector<int> shape, std::vector<double> values,
                    const std::function<Tape::BackwardFn(int ia, const Tensor& out)>& make_bw) {
    debug_check_finite(values, op);
    Tensor result = Tensor::from_data(std::move(shape), std::move(values));
    Tape* tape = Tape::active();
    if (!tape) return result;
    const int ia = tape->track(a);
    if (ia < 0) return result;
    Tape::BackwardFn bw = make_bw(ia, result);
    return tape->adopt(std::move(result), std::move(bw));
}

void axpy(std::vector<double>& acc, std::span<const double> x, double c) {
    for (std::size_t i = 0; i < x.size(); ++i) acc[i] += c * x[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    const auto n = a.size();
    return finish_binary("add", a, b, a.shape(), std::move(out), [n](int ia, int ib, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) {
            if (ia >= 0) axpy(t.grad_buffer(ia, n), up, 1.0);
            if (ib >= 0) axpy(t.grad_buffer(ib, n), up, 1.0);
        };
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    const auto n = a.size();
    return finish_binary("sub", a, b, a.shape(), std::move(out), [n](int ia, int ib, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) {
            if (ia >= 0) axpy(t.grad_buffer(ia, n), up, 1.0);
            if (ib >= 0) axpy(t.grad_buffer(ib, n), up, -1.0);
        };
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    const auto n = a.size();
    return finish_binary("mul", a, b, a.shape(), std::move(out), [=](int ia, int ib, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) {
            const auto av = a.data();
            const auto bv = b.data();
            if (ia >= 0) {
                auto& g = t.grad_buffer(ia, n);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * bv[i];
            }
            if (ib >= 0) {
                auto& g = t.grad_buffer(ib, n);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * av[i];
            }
        };
    });
}

Tensor scale(const Tensor& a, double c) {
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
    const auto n = a.size();
    return finish_unary("scale", a, a.shape(), std::move(out), [=](int ia, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) { axpy(t.grad_buffer(ia, n), up, c); };
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " + detail::shape_str(a.shape()) +
                                    " x " + detail::shape_str(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return finish_binary("matmul", a, b, {m, n}, std::move(out), [=](int ia, int ib, const Tensor&) {
        return [=, lhs = a, rhs = b](std::span<const double> up, Tape& t) {
            if (ia >= 0) {
                // dA = up . B^T
                std::vector<double> bt(static_cast<std::size_t>(n) * k);
                detail::transpose_into(rhs.data().data(), bt.data(), k, n);
                auto& g = t.grad_buffer(ia, static_cast<std::int64_t>(m) * k);
                detail::gemm_nn(up.data(), bt.data(), g.data(), m, n, k);
            }
            if (ib >= 0) {
                // dB = A^T . up
                std::vector<double> at(static_cast<std::size_t>(k) * m);
                detail::transpose_into(lhs.data().data(), at.data(), m, k);
                auto& g = t.grad_buffer(ib, static_cast<std::int64_t>(k) * n);
                detail::gemm_nn(at.data(), up.data(), g.data(), k, m, n);
            }
        };
    });
}

Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    detail::transpose_into(a.data().data(), out.data(), m, n);
    return finish_unary("transpose", a, {n, m}, std::move(out), [=](int ia, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) {
            auto& g = t.grad_buffer(ia, static_cast<std::int64_t>(m) * n);
            // upstream is n x m; transpose it back onto the m x n gradient
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    g[static_cast<std::size_t>(j) * n + i] += up[static_cast<std::size_t>(i) * m + j];
        };
    });
}

Tensor relu(const Tensor& x) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    const auto n = x.size();
    return finish_unary("relu", x, x.shape(), std::move(out), [=](int ia, const Tensor&) {
        return [=, in = x](std::span<const double> up, Tape& t) {
            const auto xv = in.data();
            auto& g = t.grad_buffer(ia, n);
            // derivative at exactly 0 is taken as 0
            for (std::size_t i = 0; i < up.size(); ++i) g[i] += xv[i] > 0.0 ? up[i] : 0.0;
        };
    });
}

Tensor tanh(const Tensor& x) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    detail::vtanh(xd.data(), out.data(), out.size());
    const auto n = x.size();
    return finish_unary("tanh", x, x.shape(), std::move(out), [=](int ia, const Tensor& result) {
        return [=, keep = result](std::span<const double> up, Tape& t) {
            const auto yv = keep.data();
            auto& g = t.grad_buffer(ia, n);
            for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * (1.0 - yv[i] * yv[i]);
        };
    });
}

Tensor abs(const Tensor& x) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(xd[i]);
    const auto n = x.size();
    return finish_unary("abs", x, x.shape(), std::move(out), [=](int ia, const Tensor&) {
        return [=, in = x](std::span<const double> up, Tape& t) {
            const auto xv = in.data();
            auto& g = t.grad_buffer(ia, n);
            // subgradient 0 at the kink, matching relu'(0) = 0
            for (std::size_t i = 0; i < up.size(); ++i)
                g[i] += up[i] * (xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0));
        };
    });
}

Tensor softmax_rows(const Tensor& x) {
    detail::require_2d(x, "softmax_rows");
    const int m = x.rows(), n = x.cols();
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (int i = 0; i < m; ++i) {
        const double* row = xd.data() + static_cast<std::size_t>(i) * n;
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= s;
    }
    return finish_unary("softmax_rows", x, x.shape(), std::move(out), [=](int ia, const Tensor& result) {
        return [=, keep = result](std::span<const double> up, Tape& t) {
            const auto yv = keep.data();
            auto& g = t.grad_buffer(ia, static_cast<std::int64_t>(m) * n);
            for (int i = 0; i < m; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += up[off + j] * yv[off + j];
                for (int j = 0; j < n; ++j) g[off + j] += yv[off + j] * (up[off + j] - dot);
            }
        };
    });
}

Tensor sum(const Tensor& x) {
    const auto xd = x.data();
    double s = 0.0;
    for (double v : xd) s += v;
    const auto n = x.size();
    return finish_unary("sum", x, {1}, {s}, [=](int ia, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) {
            auto& g = t.grad_buffer(ia, n);
            for (auto& v : g) v += up[0];
        };
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    detail::require_2d(m, "add_rowvec");
    if (v.ndim() != 1 || v.dim(0) != m.cols()) {
        throw std::invalid_argument("add_rowvec: vector " + detail::shape_str(v.shape()) +
                                    " does not match matrix " + detail::shape_str(m.shape()));
    }
    const int r = m.rows(), c = m.cols();
    const auto md = m.data();
    const auto vd = v.data();
    std::vector<double> out(md.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(i) * c + j] = md[static_cast<std::size_t>(i) * c + j] + vd[j];
    return finish_binary("add_rowvec", m, v, m.shape(), std::move(out), [=](int im, int iv, const Tensor&) {
        return [=](std::span<const double> up, Tape& t) {
            if (im >= 0) axpy(t.grad_buffer(im, static_cast<std::int64_t>(r) * c), up, 1.0);
            if (iv >= 0) {
                auto& g = t.grad_buffer(iv, c);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) g[j] += up[static_cast<std::size_t>(i) * c + j];
            }
        };
    });
}

Tensor rowwise_matvec(const Tensor& a, const Tensor& x, int p) {
    detail::require_2d(a, "rowwise_matvec");
    detail::require_2d(x, "rowwise_matvec");
    if (p <= 0 || a.cols() % p != 0) {
        throw std::invalid_argument("rowwise_matvec: cannot split " + detail::shape_str(a.shape()) +
                                    " into " + std::to_string(p) + " output rows per node");
    }
    const int q = a.cols() / p;
    if (x.rows() != a.rows() || x.cols() != q) {
        throw std::invalid_argument("rowwise_matvec: operand " + detail::shape_str(a.shape()) +
                                    " (as " + std::to_string(p) + "x" + std::to_string(q) +
                                    " per row) does not apply to " + detail::shape_str(x.shape()));
    }
    const int r = a.rows();
    const auto ad = a.data();
    const auto xd = x.data();
    std::vector<double> out(static_cast<std::size_t>(r) * p, 0.0);
    for (int v = 0; v < r; ++v) {
        const double* arow = ad.data() + static_cast<std::size_t>(v) * p * q;
        const double* xrow = xd.data() + static_cast<std::size_t>(v) * q;
        double* orow = out.data() + static_cast<std::size_t>(v) * p;
        for (int i = 0; i < p; ++i) {
            double s = 0.0;
            for (int j = 0; j < q; ++j) s += arow[static_cast<std::size_t>(i) * q + j] * xrow[j];
            orow[i] = s;
        }
    }
    return finish_binary("rowwise_matvec", a, x, {r, p}, std::move(out), [=](int ia, int ix, const Tensor&) {
        return [=, lhs = a, rhs = x](std::span<const double> up, Tape& t) {
            const auto av = lhs.data();
            const auto xv = rhs.data();
            if (ia >= 0) {
                auto& g = t.grad_buffer(ia, static_cast<std::int64_t>(r) * p * q);
                for (int v = 0; v < r; ++v)
                    for (int i = 0; i < p; ++i) {
                        const double u = up[static_cast<std::size_t>(v) * p + i];
                        for (int j = 0; j < q; ++j)
                            g[(static_cast<std::size_t>(v) * p + i) * q + j] +=
                                u * xv[static_cast<std::size_t>(v) * q + j];
                    }
            }
            if (ix >= 0) {
                auto& g = t.grad_buffer(ix, static_cast<std::int64_t>(r) * q);
                for (int v = 0; v < r; ++v)
                    for (int i = 0; i < p; ++i) {
                        const double u = up[static_cast<std::size_t>(v) * p + i];
                        for (int j = 0; j < q; ++j)
                            g[static_cast<std::size_t>(v) * q + j] +=
                                u * av[(static_cast<std::size_t>(v) * p + i) * q + j];
                    }
            }
        };
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_2d(x, "linear");
    detail::require_2d(w, "linear");
    if (x.cols() != w.rows() || b.ndim() != 1 || b.dim(0) != w.cols()) {
        throw std::invalid_argument("linear: incompatible shapes: " + detail::shape_str(x.shape()) +
                                    " x " + detail::shape_str(w.shape()) + " + " +
                                    detail::shape_str(b.shape()));
    }
    const int m = x.rows(), k = x.cols(), n = w.cols();
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    const auto bd = b.data();
    for (int i = 0; i < m; ++i) {
        std::copy(bd.begin(), bd.end(), out.begin() + static_cast<std::size_t>(i) * n);
    }
    detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
    debug_check_finite(out, "linear");
    Tensor result = Tensor::from_data({m, n}, std::move(out));

    Tape* tape = Tape::active();
    if (!tape) return result;
    const int ix = tape->track(x);
    const int iw = tape->track(w);
    const int ib = tape->track(b);
    if (ix < 0 && iw < 0 && ib < 0) return result;
    Tape::BackwardFn bw = [=, in_x = x, in_w = w](std::span<const double> up, Tape& t) {
        if (ix >= 0) {
            std::vector<double> wt(static_cast<std::size_t>(n) * k);
            detail::transpose_into(in_w.data().data(), wt.data(), k, n);
            auto& g = t.grad_buffer(ix, static_cast<std::int64_t>(m) * k);
            detail::gemm_nn(up.data(), wt.data(), g.data(), m, n, k);
        }
        if (iw >= 0) {
            std::vector<double> xt(static_cast<std::size_t>(k) * m);
            detail::transpose_into(in_x.data().data(), xt.data(), m, k);
            auto& g = t.grad_buffer(iw, static_cast<std::int64_t>(k) * n);
            detail::gemm_nn(xt.data(), up.data(), g.data(), k, m, n);
        }
        if (ib >= 0) {
            auto& g = t.grad_buffer(ib, n);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] += up[static_cast<std::size_t>(i) * n + j];
        }
    };
    return tape->adopt(std::move(result), std::move(bw));
}

Tensor graph_mix(const Tensor& adj, const Tensor& x) {
    detail::require_2d(adj, "graph_mix");
    detail::require_2d(x, "graph_mix");
    const int v = adj.rows();
    if (adj.cols() != v || v <= 0 || x.rows() % v != 0) {
        throw std::invalid_argument("graph_mix: adjacency " + detail::shape_str(adj.shape()) +
                                    " does not tile " + detail::shape_str(x.shape()));
    }
    const int blocks = x.rows() / v;
    const int c = x.cols();
    const auto ad = adj.data();
    const auto xd = x.data();
    std::vector<double> out(xd.size(), 0.0);
    for (int b = 0; b < blocks; ++b) {
        const std::size_t off = static_cast<std::size_t>(b) * v * c;
        detail::gemm_nn(ad.data(), xd.data() + off, out.data() + off, v, v, c);
    }
    return finish_binary("graph_mix", adj, x, x.shape(), std::move(out), [=](int iadj, int ix, const Tensor&) {
        return [=, lhs = adj, rhs = x](std::span<const double> up, Tape& t) {
            const auto av = lhs.data();
            const auto xv = rhs.data();
            if (ix >= 0) {
                // dX_b = adj^T . up_b
                std::vector<double> adjt(static_cast<std::size_t>(v) * v);
                detail::transpose_into(av.data(), adjt.data(), v, v);
                auto& g = t.grad_buffer(ix, static_cast<std::int64_t>(blocks) * v * c);
                for (int b = 0; b < blocks; ++b) {
                    const std::size_t off = static_cast<std::size_t>(b) * v * c;
                    detail::gemm_nn(adjt.data(), up.data() + off, g.data() + off, v, v, c);
                }
            }
            if (iadj >= 0) {
                // dAdj += sum_b up_b . X_b^T
                auto& g = t.grad_buffer(iadj, static_cast<std::int64_t>(v) * v);
                std::vector<double> xt(static_cast<std::size_t>(c) * v);
                for (int b = 0; b < blocks; ++b) {
                    const std::size_t off = static_cast<std::size_t>(b) * v * c;
                    detail::transpose_into(xv.data() + off, xt.data(), v, c);
                    detail::gemm_nn(up.data() + off, xt.data(), g.data(), v, c, v);
                }
            }
        };
    });
}

}  // namespace stgncde
