#pragma once

// Arithmetic instrumentation. `Counted<T>` behaves like T but bumps a
// thread-local tally on every multiplication, so running a templated kernel
// with Counted<float> / Counted<int32_t> measures its multiply mix directly.

#include <cmath>
#include <cstdint>
#include <type_traits>

namespace kdq {

struct OpTally {
  std::uint64_t float_mults = 0;
  std::uint64_t int_mults = 0;
};

inline OpTally& op_tally() {
  thread_local OpTally tally;
  return tally;
}

/// Resets the thread's tally on construction and reports the delta since then.
class TallyScope {
 public:
  TallyScope() : start_(op_tally()) {}
  OpTally delta() const {
    const OpTally& now = op_tally();
    return {now.float_mults - start_.float_mults, now.int_mults - start_.int_mults};
  }

 private:
  OpTally start_;
};

template <typename T>
class Counted {
 public:
  Counted() = default;
  Counted(T v) : v_(v) {}  // NOLINT: implicit by design of a drop-in scalar

  T value() const { return v_; }
  explicit operator T() const { return v_; }
  template <typename U>
    requires std::is_arithmetic_v<U> && (!std::is_same_v<U, T>)
  explicit operator U() const { return static_cast<U>(v_); }

  friend Counted operator*(Counted a, Counted b) {
    bump();
    return a.v_ * b.v_;
  }
  friend Counted operator+(Counted a, Counted b) { return a.v_ + b.v_; }
  friend Counted operator-(Counted a, Counted b) { return a.v_ - b.v_; }
  friend Counted operator/(Counted a, Counted b) { return a.v_ / b.v_; }
  friend Counted operator-(Counted a) { return -a.v_; }

  Counted& operator+=(Counted o) { v_ += o.v_; return *this; }
  Counted& operator-=(Counted o) { v_ -= o.v_; return *this; }
  Counted& operator*=(Counted o) { bump(); v_ *= o.v_; return *this; }
  Counted& operator/=(Counted o) { v_ /= o.v_; return *this; }

  friend bool operator==(Counted a, Counted b) { return a.v_ == b.v_; }
  friend auto operator<=>(Counted a, Counted b) { return a.v_ <=> b.v_; }

  friend Counted exp(Counted a) { return std::exp(a.v_); }
  friend Counted log(Counted a) { return std::log(a.v_); }
  friend Counted tanh(Counted a) { return std::tanh(a.v_); }
  friend Counted sqrt(Counted a) { return std::sqrt(a.v_); }
  friend Counted abs(Counted a) { return a.v_ < T{} ? -a.v_ : a.v_; }
  friend bool isfinite(Counted a) {
    if constexpr (std::is_floating_point_v<T>) return std::isfinite(a.v_);
    else return true;
  }

 private:
  static void bump() {
    if constexpr (std::is_floating_point_v<T>) ++op_tally().float_mults;
    else ++op_tally().int_mults;
  }
  T v_{};
};

// Plain-scalar counterparts so templated code can call these unqualified.
using std::abs;
using std::exp;
using std::isfinite;
using std::log;
using std::sqrt;
using std::tanh;

}  // namespace kdq
