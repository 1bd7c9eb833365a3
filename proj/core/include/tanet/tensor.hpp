#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tanet {

using Shape = std::vector<std::int64_t>;

// Fixed 64-byte alignment: vectorized kernels then split loops the same way on
// every run, which keeps floating-point results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Thrown for any dimension or rank disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major real array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies refer to the same storage, which is
/// what lets recorded gradient rules write into parameters owned elsewhere.
/// Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1));
  static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  T* ptr() { return impl().data.data(); }
  const T* ptr() const { return impl().data.data(); }
  T item() const;

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<T> grad() { return impl().grad; }
  std::span<const T> grad() const { return impl().grad; }
  /// Returns the gradient buffer, allocating it as zeros on first use.
  /// Const because a Tensor is a handle; gradient rules hold const copies.
  std::span<T> ensure_grad() const;
  void zero_grad();
  void clear_grad() { impl().grad.clear(); }

  Tensor clone() const;
  /// Deep copy with identical values under a different shape.
  Tensor reshaped(Shape shape) const;
  template <typename U>
  Tensor<U> cast() const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    AlignedVector<T> data;
    AlignedVector<T> grad;
    bool requires_grad = false;
  };
  Impl& impl();
  const Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> values(numel());
  const auto src = data();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<U>(src[i]);
  return Tensor<U>(shape(), std::move(values));
}

/// Integer label map, e.g. a segmentation mask [H,W] or a batch [B,H,W].
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IntTensor() = default;
  explicit IntTensor(Shape s, std::int32_t fill = 0)
      : shape(std::move(s)), data(static_cast<std::size_t>(numel_of(shape)), fill) {}

  std::size_t numel() const { return data.size(); }
  std::int64_t dim(std::size_t axis) const { return shape.at(axis); }
  bool operator==(const IntTensor&) const = default;
};

/// Ordered record of gradient rules for executed operations.
///
/// Rules are replayed in reverse execution order by backward(). A tape is
/// single-use: replaying it a second time without a fresh forward pass is an
/// error. Each thread owns one current tape.
class Tape {
 public:
  using Rule = std::function<void()>;

  void record(Rule rule);
  std::size_t size() const noexcept { return rules_.size(); }
  bool consumed() const noexcept { return consumed_; }
  void clear();

  template <typename T>
  void backward(Tensor<T>& loss);

  static Tape& current();

 private:
  void replay();

  std::vector<Rule> rules_;
  bool consumed_ = false;
};

/// Thread-local switch for gradient recording.
class GradMode {
 public:
  static bool enabled() noexcept;
  static void set_enabled(bool on) noexcept;
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
void Tape::backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (consumed_) {
    throw std::logic_error("tape already replayed; run the forward pass again before backward()");
  }
  loss.ensure_grad()[0] = T(1);
  replay();
}

/// Backpropagates from a scalar loss through the current thread's tape.
template <typename T>
void backward(Tensor<T>& loss) {
  Tape::current().backward(loss);
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace tanet
