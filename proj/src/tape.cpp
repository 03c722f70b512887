// SPDX-License-Identifier: Apache-2.0
#include "vaguide/diff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "vaguide/error.hpp"
#include "vaguide/kernels.hpp"

namespace vaguide::diff {

// ---- DiffArray / Tape -------------------------------------------------------

template <class T>
const Shape &DiffArray<T>::shape() const {
  return tape_->node(id_).shape;
}

template <class T>
const std::vector<T> &DiffArray<T>::value() const {
  return tape_->node(id_).value;
}

template <class T>
const std::vector<T> &DiffArray<T>::grad() const {
  return tape_->node(id_).grad;
}

template <class T>
bool DiffArray<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

template <class T>
DiffArray<T> Tape<T>::constant(Tensor<T> t) {
  Node n;
  n.shape = std::move(t.shape);
  n.value = std::move(t.data);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
DiffArray<T> Tape<T>::leaf(Tensor<T> t, bool requires_grad) {
  auto a = constant(std::move(t));
  node(a.id()).requires_grad = requires_grad && grad_enabled_;
  return a;
}

template <class T>
DiffArray<T> Tape<T>::param(Parameter<T> &p) {
  auto a = constant(p.value);
  Node &n = node(a.id());
  n.requires_grad = p.trainable && grad_enabled_;
  n.param = &p;
  return a;
}

template <class T>
std::vector<T> &Tape<T>::grad_buffer(int id) {
  Node &n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <class T>
DiffArray<T> Tape<T>::push(Shape shape, std::vector<T> value, std::initializer_list<DiffArray<T>> inputs,
                           BackwardFn fn) {
  return push(std::move(shape), std::move(value), std::span<const DiffArray<T>>(inputs.begin(), inputs.size()),
              std::move(fn));
}

template <class T>
DiffArray<T> Tape<T>::push(Shape shape, std::vector<T> value, std::span<const DiffArray<T>> inputs, BackwardFn fn) {
  bool rg = false;
  if (grad_enabled_)
    for (const auto &in : inputs) rg = rg || in.requires_grad();
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
void Tape<T>::backward(const DiffArray<T> &loss) {
  if (loss.tape() != this) fail(ErrorCode::invalid_argument, "backward: loss belongs to another tape");
  if (loss.size() != 1) fail(ErrorCode::shape, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  for (auto &n : nodes_) n.grad.clear();
  grad_buffer(loss.id())[0] = T(1);
  for (int id = loss.id(); id >= 0; --id) {
    Node &n = node(id);
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this);
    } else if (n.param) {
      auto &pg = n.param->grad.data;
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
}

// ---- helpers ----------------------------------------------------------------

namespace {

int norm_axis(int axis, std::size_t rank, const char *op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) fail(ErrorCode::shape, std::string(op) + ": axis " + std::to_string(axis) + " out of range");
  return a;
}

[[noreturn]] void shape_error(const char *op, const Shape &a, const Shape &b) {
  fail(ErrorCode::shape, std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <class T>
void check_same_tape(const char *op, const DiffArray<T> &a, const DiffArray<T> &b) {
  if (a.tape() != b.tape()) fail(ErrorCode::invalid_argument, std::string(op) + ": operands live on different tapes");
}

// Strides of `in` expressed over the broadcast output index space.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
  // Nonzero when b tiles a exactly (bias-style): b covers the trailing
  // `bias_inner` elements of every row of a.
  std::size_t bias_inner = 0;
};

Broadcast broadcast(const char *op, const Shape &a, const Shape &b) {
  Broadcast bc;
  bc.same = a == b;
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  std::vector<std::size_t> da(rank, 1), db(rank, 1);
  std::copy(a.begin(), a.end(), da.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), db.begin() + (rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) shape_error(op, a, b);
    bc.out[i] = std::max(da[i], db[i]);
  }
  bc.sa.assign(rank, 0);
  bc.sb.assign(rank, 0);
  std::size_t ra = 1, rb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    bc.sa[i] = da[i] == 1 ? 0 : ra;
    bc.sb[i] = db[i] == 1 ? 0 : rb;
    ra *= da[i];
    rb *= db[i];
  }
  if (!bc.same && bc.out == da && a.size() == rank) {
    std::size_t lead = 0;
    while (lead < rank && db[lead] == 1) ++lead;
    if (std::equal(db.begin() + static_cast<std::ptrdiff_t>(lead), db.end(), da.begin() + static_cast<std::ptrdiff_t>(lead)))
      bc.bias_inner = std::max<std::size_t>(1, numel(b));
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output in order.
template <class F>
void for_each_broadcast(const Broadcast &bc, F &&fn) {
  const std::size_t total = numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  if (bc.bias_inner) {
    const std::size_t inner = bc.bias_inner;
    for (std::size_t o = 0; o < total; o += inner)
      for (std::size_t j = 0; j < inner; ++j) fn(o + j, o + j, j);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < bc.out[d]) {
        ia += bc.sa[d];
        ib += bc.sb[d];
        break;
      }
      ia -= bc.sa[d] * (bc.out[d] - 1);
      ib -= bc.sb[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul };

template <class T>
DiffArray<T> binary(const DiffArray<T> &a, const DiffArray<T> &b, BinaryKind kind, const char *op) {
  check_same_tape(op, a, b);
  Tape<T> &tape = *a.tape();
  const Broadcast bc = broadcast(op, a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  const T *av = a.value().data();
  const T *bv = b.value().data();
  switch (kind) {
    case BinaryKind::add: for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] + bv[y]; }); break;
    case BinaryKind::sub: for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] - bv[y]; }); break;
    case BinaryKind::mul: for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = av[x] * bv[y]; }); break;
  }
  const int ia = a.id(), ib = b.id();
  const int self = static_cast<int>(tape.size());
  return tape.push(bc.out, std::move(out), {a, b}, [bc, ia, ib, kind, self](Tape<T> &t) {
    const std::vector<T> &g = t.node(self).grad;
    const bool ga = t.node(ia).requires_grad, gb = t.node(ib).requires_grad;
    if (ga) {
      auto &da = t.grad_buffer(ia);
      if (kind == BinaryKind::mul) {
        const auto &bv2 = t.node(ib).value;
        for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { da[x] += g[i] * bv2[y]; });
      } else {
        for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t) { da[x] += g[i]; });
      }
    }
    if (gb) {
      auto &db = t.grad_buffer(ib);
      if (kind == BinaryKind::mul) {
        const auto &av2 = t.node(ia).value;
        for_each_broadcast(bc, [&](std::size_t i, std::size_t x, std::size_t y) { db[y] += g[i] * av2[x]; });
      } else if (kind == BinaryKind::sub) {
        for_each_broadcast(bc, [&](std::size_t i, std::size_t, std::size_t y) { db[y] -= g[i]; });
      } else {
        for_each_broadcast(bc, [&](std::size_t i, std::size_t, std::size_t y) { db[y] += g[i]; });
      }
    }
  });
}

// Elementwise op whose derivative is expressed through input x and output y.
template <class T, class F, class D>
DiffArray<T> unary(const DiffArray<T> &a, F f, D dfdx) {
  Tape<T> &tape = *a.tape();
  const auto &av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  const int self = static_cast<int>(tape.size());
  return tape.push(a.shape(), std::move(out), {a}, [ia, self, dfdx](Tape<T> &t) {
    const auto &x = t.node(ia).value;
    const auto &y = t.node(self).value;
    const auto &g = t.node(self).grad;
    auto &dx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * dfdx(x[i], y[i]);
  });
}

// outer = product of dims before axis, inner = product after.
void axis_extent(const Shape &s, int axis, std::size_t &outer, std::size_t &len, std::size_t &inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

// ---- arithmetic -----------------------------------------------------------------

template <class T>
DiffArray<T> add(const DiffArray<T> &a, const DiffArray<T> &b) {
  return binary(a, b, BinaryKind::add, "add");
}

template <class T>
DiffArray<T> sub(const DiffArray<T> &a, const DiffArray<T> &b) {
  return binary(a, b, BinaryKind::sub, "sub");
}

template <class T>
DiffArray<T> mul(const DiffArray<T> &a, const DiffArray<T> &b) {
  return binary(a, b, BinaryKind::mul, "mul");
}

template <class T>
DiffArray<T> scale(const DiffArray<T> &a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

// ---- linear algebra ---------------------------------------------------------------

template <class T>
DiffArray<T> matmul(const DiffArray<T> &a, const DiffArray<T> &b) {
  check_same_tape("matmul", a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_error("matmul", sa, sb);
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) shape_error("matmul", sa, sb);
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), ib = b.id();
  const int self = static_cast<int>(tape.size());

  if (sb.size() == 2) {
    // Shared weight: flatten all leading dims of a into rows.
    const std::size_t m = a.size() / k;
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    std::vector<T> out(m * n);
    kernels::gemm(m, n, k, a.value().data(), b.value().data(), out.data(), false);
    return tape.push(std::move(out_shape), std::move(out), {a, b}, [=](Tape<T> &t) {
      const auto &g = t.node(self).grad;
      if (t.node(ia).requires_grad) {
        std::vector<T> bt(n * k);
        kernels::transpose(k, n, t.node(ib).value.data(), bt.data());
        kernels::gemm(m, k, n, g.data(), bt.data(), t.grad_buffer(ia).data(), true);
      }
      if (t.node(ib).requires_grad) {
        std::vector<T> at(k * m);
        kernels::transpose(m, k, t.node(ia).value.data(), at.data());
        kernels::gemm(k, n, m, at.data(), g.data(), t.grad_buffer(ib).data(), true);
      }
    });
  }

  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) shape_error("matmul", sa, sb);
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t batch = a.size() / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  {
    const T *av = a.value().data();
    const T *bv = b.value().data();
    for (std::size_t p = 0; p < batch; ++p)
      kernels::serial::gemm(m, n, k, av + p * m * k, bv + p * k * n, out.data() + p * m * n, false);
  }
  return tape.push(std::move(out_shape), std::move(out), {a, b}, [=](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    const T *av = t.node(ia).value.data();
    const T *bv = t.node(ib).value.data();
    if (t.node(ia).requires_grad) {
      auto &da = t.grad_buffer(ia);
      std::vector<T> bt(n * k);
      for (std::size_t p = 0; p < batch; ++p) {
        kernels::transpose(k, n, bv + p * k * n, bt.data());
        kernels::serial::gemm(m, k, n, g.data() + p * m * n, bt.data(), da.data() + p * m * k, true);
      }
    }
    if (t.node(ib).requires_grad) {
      auto &db = t.grad_buffer(ib);
      std::vector<T> at(k * m);
      for (std::size_t p = 0; p < batch; ++p) {
        kernels::transpose(m, k, av + p * m * k, at.data());
        kernels::serial::gemm(k, n, m, at.data(), g.data() + p * m * n, db.data() + p * k * n, true);
      }
    }
  });
}

template <class T>
DiffArray<T> transpose(const DiffArray<T> &a) {
  const Shape &s = a.shape();
  if (s.size() < 2) fail(ErrorCode::shape, "transpose: needs rank >= 2, got " + shape_str(s));
  const std::size_t m = s[s.size() - 2], n = s.back();
  const std::size_t batch = a.size() / std::max<std::size_t>(1, m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::vector<T> out(a.size());
  for (std::size_t p = 0; p < batch; ++p) kernels::transpose(m, n, a.value().data() + p * m * n, out.data() + p * m * n);
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(std::move(out_shape), std::move(out), {a}, [=](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    auto &da = t.grad_buffer(ia);
    for (std::size_t p = 0; p < batch; ++p)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[p * m * n + i * n + j] += g[p * m * n + j * m + i];
  });
}

template <class T>
DiffArray<T> reshape(const DiffArray<T> &a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(std::move(shape), a.value(), {a}, [=](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    auto &da = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

template <class T>
DiffArray<T> permute(const DiffArray<T> &a, const std::vector<int> &perm) {
  const Shape &s = a.shape();
  const std::size_t rank = s.size();
  if (perm.size() != rank) fail(ErrorCode::shape, "permute: permutation rank mismatch for " + shape_str(s));
  std::vector<int> check = perm;
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < rank; ++i)
    if (check[i] != static_cast<int>(i)) fail(ErrorCode::invalid_argument, "permute: not a permutation");
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  // For each output position, the source offset.
  std::vector<std::size_t> src(a.size());
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      src[i] = off;
      for (std::size_t d = rank; d-- > 0;) {
        const std::size_t st = in_stride[perm[d]];
        if (++idx[d] < out_shape[d]) {
          off += st;
          break;
        }
        off -= st * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(a.size());
  const auto &av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[src[i]];
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(std::move(out_shape), std::move(out), {a}, [=, src = std::move(src)](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    auto &da = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[src[i]] += g[i];
  });
}

// ---- structural -----------------------------------------------------------------

template <class T>
DiffArray<T> concat(std::span<const DiffArray<T>> parts, int axis) {
  if (parts.empty()) fail(ErrorCode::invalid_argument, "concat: no inputs");
  const Shape &s0 = parts[0].shape();
  const int ax = norm_axis(axis, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto &p : parts) {
    check_same_tape("concat", parts[0], p);
    const Shape &s = p.shape();
    if (s.size() != s0.size()) shape_error("concat", s0, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (static_cast<int>(d) != ax && s[d] != s0[d]) shape_error("concat", s0, s);
    out_shape[ax] += s[ax];
  }
  std::size_t outer, len, inner;
  axis_extent(out_shape, ax, outer, len, inner);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets, widths;
  std::size_t off = 0;
  for (const auto &p : parts) {
    const std::size_t w = p.shape()[ax] * inner;
    offsets.push_back(off);
    widths.push_back(w);
    const auto &pv = p.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o * w), pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * w),
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner + off));
    off += w;
  }
  Tape<T> &tape = *parts[0].tape();
  std::vector<int> ids;
  for (const auto &p : parts) ids.push_back(p.id());
  const int self = static_cast<int>(tape.size());
  const std::size_t row = len * inner;
  return tape.push(std::move(out_shape), std::move(out), parts, [=](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      if (!t.node(ids[pi]).requires_grad) continue;
      auto &dp = t.grad_buffer(ids[pi]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < widths[pi]; ++j) dp[o * widths[pi] + j] += g[o * row + offsets[pi] + j];
    }
  });
}

template <class T>
std::vector<DiffArray<T>> split(const DiffArray<T> &a, int axis, const std::vector<std::size_t> &sizes) {
  const Shape &s = a.shape();
  const int ax = norm_axis(axis, s.size(), "split");
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != s[ax])
    fail(ErrorCode::shape, "split: sizes do not sum to axis length of " + shape_str(s));
  std::size_t outer, len, inner;
  axis_extent(s, ax, outer, len, inner);
  std::vector<DiffArray<T>> out;
  std::size_t start = 0;
  Tape<T> &tape = *a.tape();
  const int ia = a.id();
  for (std::size_t sz : sizes) {
    Shape ps = s;
    ps[ax] = sz;
    const std::size_t w = sz * inner, row = len * inner, off = start * inner;
    std::vector<T> v(outer * w);
    const auto &av = a.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(av.begin() + static_cast<std::ptrdiff_t>(o * row + off),
                av.begin() + static_cast<std::ptrdiff_t>(o * row + off + w), v.begin() + static_cast<std::ptrdiff_t>(o * w));
    const int self = static_cast<int>(tape.size());
    out.push_back(tape.push(std::move(ps), std::move(v), {a}, [=](Tape<T> &t) {
      const auto &g = t.node(self).grad;
      auto &da = t.grad_buffer(ia);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < w; ++j) da[o * row + off + j] += g[o * w + j];
    }));
    start += sz;
  }
  return out;
}

template <class T>
DiffArray<T> take(const DiffArray<T> &a, int axis, const std::vector<std::size_t> &indices) {
  const Shape &s = a.shape();
  const int ax = norm_axis(axis, s.size(), "take");
  std::size_t outer, len, inner;
  axis_extent(s, ax, outer, len, inner);
  for (auto i : indices)
    if (i >= len) fail(ErrorCode::shape, "take: index " + std::to_string(i) + " out of range for " + shape_str(s));
  Shape out_shape = s;
  out_shape[ax] = indices.size();
  const std::size_t cnt = indices.size();
  std::vector<T> out(outer * cnt * inner);
  const auto &av = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < cnt; ++j)
      std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * len + indices[j]) * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * cnt + j) * inner));
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(std::move(out_shape), std::move(out), {a}, [=](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    auto &da = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < cnt; ++j)
        for (std::size_t q = 0; q < inner; ++q) da[(o * len + indices[j]) * inner + q] += g[(o * cnt + j) * inner + q];
  });
}

template <class T>
DiffArray<T> embedding_lookup(const DiffArray<T> &table, const std::vector<std::size_t> &indices) {
  if (table.rank() != 2) fail(ErrorCode::shape, "embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  return take(table, 0, indices);
}

// ---- reductions -------------------------------------------------------------------

namespace {

template <class T>
DiffArray<T> reduce_axis(const DiffArray<T> &a, int axis, bool average, const char *op) {
  const Shape &s = a.shape();
  const int ax = norm_axis(axis, s.size(), op);
  std::size_t outer, len, inner;
  axis_extent(s, ax, outer, len, inner);
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + ax);
  std::vector<T> out(outer * inner, T(0));
  const auto &av = a.value();
  const T f = average ? T(1) / static_cast<T>(len) : T(1);
  for (std::size_t o = 0; o < outer; ++o) {
    T *dst = out.data() + o * inner;
    for (std::size_t l = 0; l < len; ++l) {
      const T *src = av.data() + (o * len + l) * inner;
      for (std::size_t q = 0; q < inner; ++q) dst[q] += src[q];
    }
    if (average)
      for (std::size_t q = 0; q < inner; ++q) dst[q] *= f;
  }
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(std::move(out_shape), std::move(out), {a}, [=](Tape<T> &t) {
    const auto &g = t.node(self).grad;
    auto &da = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t q = 0; q < inner; ++q) da[(o * len + l) * inner + q] += f * g[o * inner + q];
  });
}

template <class T>
DiffArray<T> reduce_all(const DiffArray<T> &a, bool average) {
  T acc = T(0);
  for (T v : a.value()) acc += v;
  const T f = average ? T(1) / static_cast<T>(a.size()) : T(1);
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(Shape{}, std::vector<T>{acc * f}, {a}, [=](Tape<T> &t) {
    const T g = t.node(self).grad[0] * f;
    auto &da = t.grad_buffer(ia);
    for (auto &d : da) d += g;
  });
}

}  // namespace

template <class T>
DiffArray<T> sum(const DiffArray<T> &a, int axis) {
  return reduce_axis(a, axis, false, "sum");
}

template <class T>
DiffArray<T> mean(const DiffArray<T> &a, int axis) {
  return reduce_axis(a, axis, true, "mean");
}

template <class T>
DiffArray<T> sum_all(const DiffArray<T> &a) {
  return reduce_all(a, false);
}

template <class T>
DiffArray<T> mean_all(const DiffArray<T> &a) {
  return reduce_all(a, true);
}

// ---- nonlinearities -------------------------------------------------------------

template <class T>
DiffArray<T> relu(const DiffArray<T> &a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
DiffArray<T> gelu(const DiffArray<T> &a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x); });
}

template <class T>
DiffArray<T> sigmoid(const DiffArray<T> &a) {
  return unary(
      a, [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
DiffArray<T> tanh(const DiffArray<T> &a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
DiffArray<T> softmax(const DiffArray<T> &a) {
  if (a.rank() < 1) fail(ErrorCode::shape, "softmax: needs rank >= 1");
  const std::size_t n = a.shape().back();
  const std::size_t rows = n == 0 ? 0 : a.size() / n;
  const auto &av = a.value();
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T *x = av.data() + r * n;
    T *y = out.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  Tape<T> &tape = *a.tape();
  const int ia = a.id(), self = static_cast<int>(tape.size());
  return tape.push(a.shape(), std::move(out), {a}, [=](Tape<T> &t) {
    const auto &y = t.node(self).value;
    const auto &g = t.node(self).grad;
    auto &da = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) da[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

template <class T>
DiffArray<T> layer_norm(const DiffArray<T> &x, const DiffArray<T> &gamma, const DiffArray<T> &beta, T eps) {
  if (!(eps > T(0))) fail(ErrorCode::invalid_argument, "layer_norm: eps must be positive");
  check_same_tape("layer_norm", x, gamma);
  check_same_tape("layer_norm", x, beta);
  if (x.rank() < 1) fail(ErrorCode::shape, "layer_norm: needs rank >= 1");
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n}) shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{n}) shape_error("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = x.size() / n;
  const auto &xv = x.value();
  const auto &gv = gamma.value();
  const auto &bv = beta.value();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T *xr = xv.data() + r * n;
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mu) * rstd[r];
      xhat[r * n + j] = h;
      out[r * n + j] = gv[j] * h + bv[j];
    }
  }
  Tape<T> &tape = *x.tape();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id(), self = static_cast<int>(tape.size());
  return tape.push(x.shape(), std::move(out), {x, gamma, beta},
                   [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T> &t) {
                     const auto &g = t.node(self).grad;
                     const auto &gam = t.node(ig).value;
                     if (t.node(ig).requires_grad) {
                       auto &dg = t.grad_buffer(ig);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * xhat[r * n + j];
                     }
                     if (t.node(ib).requires_grad) {
                       auto &db = t.grad_buffer(ib);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
                     }
                     if (t.node(ix).requires_grad) {
                       auto &dx = t.grad_buffer(ix);
                       const T inv_n = T(1) / static_cast<T>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T s1 = T(0), s2 = T(0);
                         for (std::size_t j = 0; j < n; ++j) {
                           const T dh = g[r * n + j] * gam[j];
                           s1 += dh;
                           s2 += dh * xhat[r * n + j];
                         }
                         for (std::size_t j = 0; j < n; ++j) {
                           const T dh = g[r * n + j] * gam[j];
                           dx[r * n + j] += rstd[r] * (dh - inv_n * s1 - xhat[r * n + j] * inv_n * s2);
                         }
                       }
                     }
                   });
}

template <class T>
DiffArray<T> smooth_l1(const DiffArray<T> &pred, const DiffArray<T> &target) {
  check_same_tape("smooth_l1", pred, target);
  if (pred.shape() != target.shape()) shape_error("smooth_l1", pred.shape(), target.shape());
  const auto &pv = pred.value();
  const auto &tv = target.value();
  std::vector<T> out(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T d = pv[i] - tv[i];
    const T ad = std::abs(d);
    out[i] = ad < T(1) ? T(0.5) * d * d : ad - T(0.5);
  }
  Tape<T> &tape = *pred.tape();
  const int ip = pred.id(), it = target.id(), self = static_cast<int>(tape.size());
  return tape.push(pred.shape(), std::move(out), {pred, target}, [=](Tape<T> &t) {
    const auto &p = t.node(ip).value;
    const auto &q = t.node(it).value;
    const auto &g = t.node(self).grad;
    const bool gp = t.node(ip).requires_grad, gt = t.node(it).requires_grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = p[i] - q[i];
      const T dd = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
      if (gp) t.grad_buffer(ip)[i] += g[i] * dd;
      if (gt) t.grad_buffer(it)[i] -= g[i] * dd;
    }
  });
}

// ---- instantiation ----------------------------------------------------------------

#define VAGUIDE_INSTANTIATE(T)                                                                         \
  template class DiffArray<T>;                                                                         \
  template class Tape<T>;                                                                              \
  template DiffArray<T> add(const DiffArray<T> &, const DiffArray<T> &);                               \
  template DiffArray<T> sub(const DiffArray<T> &, const DiffArray<T> &);                               \
  template DiffArray<T> mul(const DiffArray<T> &, const DiffArray<T> &);                               \
  template DiffArray<T> scale(const DiffArray<T> &, T);                                                \
  template DiffArray<T> matmul(const DiffArray<T> &, const DiffArray<T> &);                            \
  template DiffArray<T> transpose(const DiffArray<T> &);                                               \
  template DiffArray<T> reshape(const DiffArray<T> &, Shape);                                          \
  template DiffArray<T> permute(const DiffArray<T> &, const std::vector<int> &);                       \
  template DiffArray<T> concat(std::span<const DiffArray<T>>, int);                                    \
  template std::vector<DiffArray<T>> split(const DiffArray<T> &, int, const std::vector<std::size_t> &); \
  template DiffArray<T> take(const DiffArray<T> &, int, const std::vector<std::size_t> &);             \
  template DiffArray<T> embedding_lookup(const DiffArray<T> &, const std::vector<std::size_t> &);      \
  template DiffArray<T> sum(const DiffArray<T> &, int);                                                \
  template DiffArray<T> mean(const DiffArray<T> &, int);                                               \
  template DiffArray<T> sum_all(const DiffArray<T> &);                                                 \
  template DiffArray<T> mean_all(const DiffArray<T> &);                                                \
  template DiffArray<T> relu(const DiffArray<T> &);                                                    \
  template DiffArray<T> gelu(const DiffArray<T> &);                                                    \
  template DiffArray<T> sigmoid(const DiffArray<T> &);                                                 \
  template DiffArray<T> tanh(const DiffArray<T> &);                                                    \
  template DiffArray<T> softmax(const DiffArray<T> &);                                                 \
  template DiffArray<T> layer_norm(const DiffArray<T> &, const DiffArray<T> &, const DiffArray<T> &, T); \
  template DiffArray<T> smooth_l1(const DiffArray<T> &, const DiffArray<T> &);

VAGUIDE_INSTANTIATE(float)
VAGUIDE_INSTANTIATE(double)
#undef VAGUIDE_INSTANTIATE

}  // namespace vaguide::diff
