#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mirau/errors.hpp"
#include "mirau/rng.hpp"
#include "mirau/shape.hpp"

namespace mirau::nd {

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node {
    std::shared_ptr<std::vector<T>> value;
    Shape shape;
    std::vector<T> grad;  // sized on first accumulation
    std::function<void()> backward;

    void add_grad(const std::vector<T>& g) {
        if (grad.empty()) grad.assign(value->size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v)
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericError(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

// Dense row-major n-d array. Value-semantic handle: the payload is shared and
// treated as immutable once created. May carry a reference to a tape node when
// it participates in gradient tracking.
template <typename T>
class Array {
public:
    Array() = default;

    static Array from(Shape shape, std::vector<T> data) {
        if (shape.numel() != static_cast<std::int64_t>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
        Array a;
        a.shape_ = std::move(shape);
        a.data_ = std::make_shared<std::vector<T>>(std::move(data));
        return a;
    }

    static Array full(Shape shape, T v) {
        auto n = shape.numel();
        return from(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), v));
    }

    static Array zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static Array scalar_of(T v) { return from(Shape{std::vector<std::int64_t>{}}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }
    const std::vector<T>& values() const { return *data_; }

    bool on_tape() const { return node_ != nullptr; }

    // Gradient of the traced scalar w.r.t. this array; valid after backward().
    const std::vector<T>& grad() const {
        if (!node_) throw Error("grad() on array without tape node");
        if (node_->grad.empty()) {
            static const std::vector<T> empty;
            return empty;
        }
        return node_->grad;
    }

    // Stop-gradient: same values, no tape participation.
    Array detach() const {
        Array a;
        a.shape_ = shape_;
        a.data_ = data_;
        return a;
    }

    T scalar() const {
        if (numel() != 1) throw ShapeError("scalar() on array of shape " + shape_.str());
        return (*data_)[0];
    }

    T at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

private:
    template <typename U>
    friend class Tape;
    template <typename U>
    friend struct OpAccess;

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    detail::Node<T>* node_ = nullptr;
    Tape<T>* tape_ = nullptr;
};

// Ordered record of differentiable operations. Backward replays the record in
// reverse, which delivers each leaf gradient exactly once. Dropout randomness
// is keyed by (seed, pass index, per-tape call counter) so Monte Carlo passes
// differ only through the explicit pass index.
template <typename T>
class Tape {
public:
    explicit Tape(std::uint64_t seed = 0) : seed_(seed) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void set_pass_index(std::uint64_t p) { pass_ = p; }
    std::uint64_t pass_index() const { return pass_; }

    void set_train(bool t) { train_ = t; }
    bool train() const { return train_; }

    // When disabled, leaves come back as plain constants and nothing records.
    void set_grad_enabled(bool e) { grad_enabled_ = e; }
    bool grad_enabled() const { return grad_enabled_; }

    std::size_t size() const { return nodes_.size(); }

    Array<T> leaf(Shape shape, std::vector<T> data) {
        Array<T> a = Array<T>::from(std::move(shape), std::move(data));
        if (!grad_enabled_) return a;
        a.node_ = new_node(a.data_, a.shape_);
        a.tape_ = this;
        return a;
    }

    Array<T> leaf(const Array<T>& constant) {
        Array<T> a = constant.detach();
        if (!grad_enabled_) return a;
        a.node_ = new_node(a.data_, a.shape_);
        a.tape_ = this;
        return a;
    }

    void backward(const Array<T>& loss) {
        if (loss.numel() != 1) throw Error("backward() requires a scalar");
        if (!loss.on_tape() || loss.tape_ != this) throw Error("backward() on array from a different tape");
        if (ran_backward_) throw Error("backward() may run once per tape");
        ran_backward_ = true;
        loss.node_->add_grad({T(1)});
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto& n = **it;
            if (n.backward && !n.grad.empty()) n.backward();
        }
    }

    // Fresh RNG stream for the next stochastic op on this tape.
    Rng next_stream() { return Rng(mix_seed(seed_, pass_, stochastic_calls_++)); }

    std::uint64_t seed() const { return seed_; }

private:
    template <typename U>
    friend struct OpAccess;

    detail::Node<T>* new_node(std::shared_ptr<std::vector<T>> value, Shape shape) {
        nodes_.push_back(std::make_unique<detail::Node<T>>());
        auto* n = nodes_.back().get();
        n->value = std::move(value);
        n->shape = std::move(shape);
        return n;
    }

    std::vector<std::unique_ptr<detail::Node<T>>> nodes_;
    std::uint64_t seed_ = 0;
    std::uint64_t pass_ = 0;
    std::uint64_t stochastic_calls_ = 0;
    bool train_ = true;
    bool grad_enabled_ = true;
    bool ran_backward_ = false;
};

// Internal access used by the op implementations.
template <typename T>
struct OpAccess {
    static Tape<T>* tape_of(const Array<T>& a) { return a.tape_; }
    static detail::Node<T>* node_of(const Array<T>& a) { return a.node_; }

    static Tape<T>* common_tape(std::initializer_list<const Array<T>*> ins) {
        Tape<T>* t = nullptr;
        for (const auto* a : ins) {
            if (!a->on_tape()) continue;
            if (t && t != a->tape_) throw Error("operands live on different tapes");
            t = a->tape_;
        }
        return t;
    }

    // Result array; registered on the tape when any input is being traced.
    static Array<T> result(Tape<T>* tape, Shape shape, std::vector<T> data, const char* op) {
        detail::check_finite(data, op);
        Array<T> out = Array<T>::from(std::move(shape), std::move(data));
        if (tape) {
            out.node_ = tape->new_node(out.data_, out.shape_);
            out.tape_ = tape;
        }
        return out;
    }

    static void set_backward(Array<T>& out, std::function<void()> fn) {
        if (out.node_) out.node_->backward = std::move(fn);
    }

    static void add_grad(const Array<T>& in, const std::vector<T>& g) {
        if (in.node_) in.node_->add_grad(g);
    }

    static const std::vector<T>& out_grad(const Array<T>& out) { return out.node_->grad; }
};

}  // namespace mirau::nd
