// SPDX-License-Identifier: Apache-2.0
#include "vaguide/diff/tensor.hpp"

#include <cmath>
#include <sstream>

#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide::diff {

std::size_t numel(const Shape &s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape &s) {
  std::ostringstream o;
  o << '[';
  for (std::size_t i = 0; i < s.size(); ++i) o << (i ? ", " : "") << s[i];
  o << ']';
  return o.str();
}

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
  if (data.size() != numel(shape))
    fail(ErrorCode::shape, "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                               shape_str(shape));
}

template <class T>
Tensor<T> init_trunc_normal(const Shape &shape, double std, std::uint64_t seed) {
  if (!(std > 0.0)) fail(ErrorCode::invalid_argument, "trunc-normal std must be positive");
  SplitMix64 rng(seed);
  Tensor<T> t(shape);
  for (auto &v : t.data) {
    double x;
    do {
      x = rng.normal() * std;
    } while (std::abs(x) > 2.0 * std);
    v = static_cast<T>(x);
  }
  return t;
}

template <class T>
Parameter<T> &ParamStore<T>::add(const std::string &name, Tensor<T> value, bool trainable) {
  if (contains(name)) fail(ErrorCode::invalid_argument, "duplicate parameter " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->value = std::move(value);
  p->trainable = trainable;
  p->zero_grad();
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <class T>
Parameter<T> &ParamStore<T>::at(const std::string &name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::invalid_argument, "unknown parameter " + name);
  return *params_[it->second];
}

template <class T>
const Parameter<T> &ParamStore<T>::at(const std::string &name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::invalid_argument, "unknown parameter " + name);
  return *params_[it->second];
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto &p : params_)
    if (p->trainable) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
}

template <class T>
std::size_t ParamStore<T>::count(bool trainable) const {
  std::size_t n = 0;
  for (const auto &p : params_)
    if (p->trainable == trainable) n += p->value.size();
  return n;
}

template <class T>
void write_array(io::ByteWriter &w, const Tensor<T> &t) {
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  if constexpr (std::is_same_v<T, float>) {
    w.f32s(t.data);
  } else {
    for (T v : t.data) w.f32(static_cast<float>(v));
  }
}

template <class T>
Tensor<T> read_array(io::ByteReader &r) {
  const std::uint32_t rank = r.u32();
  if (rank > 8) fail(ErrorCode::format, r.context() + ": implausible array rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto &d : shape) d = r.u32();
  std::vector<float> raw(numel(shape));
  r.f32s(raw);
  return Tensor<T>(shape, std::vector<T>(raw.begin(), raw.end()));
}

#define VAGUIDE_INSTANTIATE(T)                                                   \
  template struct Tensor<T>;                                                     \
  template Tensor<T> init_trunc_normal<T>(const Shape &, double, std::uint64_t); \
  template class ParamStore<T>;                                                  \
  template void write_array<T>(io::ByteWriter &, const Tensor<T> &);             \
  template Tensor<T> read_array<T>(io::ByteReader &);

VAGUIDE_INSTANTIATE(float)
VAGUIDE_INSTANTIATE(double)
#undef VAGUIDE_INSTANTIATE

}  // namespace vaguide::diff
