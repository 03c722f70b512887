// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vaguide/binary_io.hpp"

namespace vaguide::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape &s);
std::string shape_str(const Shape &s);

// Dense row-major array value.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d);

  std::size_t size() const { return data.size(); }
  std::size_t dim(int axis) const { return shape[axis < 0 ? shape.size() + axis : axis]; }
  std::size_t rank() const { return shape.size(); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

  friend bool operator==(const Tensor &, const Tensor &) = default;
};

// Samples N(0, std) rejected outside +-2 std; deterministic per seed.
template <class T>
Tensor<T> init_trunc_normal(const Shape &shape, double std, std::uint64_t seed);

// A named model weight. Gradients accumulate into `grad` during backward
// when `trainable` is set.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor<T>(value.shape); }
};

// Ordered registry of parameters; addresses stay stable after insertion.
template <class T>
class ParamStore {
 public:
  Parameter<T> &add(const std::string &name, Tensor<T> value, bool trainable);
  Parameter<T> &at(const std::string &name);
  const Parameter<T> &at(const std::string &name) const;
  bool contains(const std::string &name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<T> &operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T> &operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  std::size_t count(bool trainable) const;

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

// Shape record (u32 rank, u32 dims) followed by little-endian float32 data.
template <class T>
void write_array(io::ByteWriter &w, const Tensor<T> &t);
template <class T>
Tensor<T> read_array(io::ByteReader &r);

}  // namespace vaguide::diff
