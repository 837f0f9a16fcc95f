#pragma once

// Reverse-mode autograd over dense row-major tensors. Small by design: the
// only primitives are the ones the models in this project actually use.
// Matrix products go through Eigen; everything else is plain loops.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace tigan::ag {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> val;
  std::vector<T> grad;  // allocated lazily during backward
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;  // accumulates into parents' grads

  void ensure_grad() {
    if (grad.empty()) grad.assign(val.size(), T(0));
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Thread-local toggle used to run forward passes without taping (detached).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  NoGrad() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev; }
  bool prev;
};

// Value-semantics handle to a graph node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : n_(std::move(node)) {}

  static Var leaf(Shape shape, bool needs_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->val.assign(numel(shape), T(0));
    n->shape = std::move(shape);
    n->needs_grad = needs_grad;
    return Var(n);
  }

  static Var leaf(Shape shape, std::vector<T> data, bool needs_grad = false) {
    check(numel(shape) == int64_t(data.size()), "leaf: data size mismatch");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->needs_grad = needs_grad;
    return Var(n);
  }

  static Var scalar(T v) { return leaf({1}, {v}); }

  bool defined() const { return bool(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[size_t(i)]; }
  int64_t size() const { return int64_t(n_->val.size()); }
  std::vector<T>& val() { return n_->val; }
  const std::vector<T>& val() const { return n_->val; }
  std::vector<T>& grad() { n_->ensure_grad(); return n_->grad; }
  bool needs_grad() const { return n_->needs_grad; }
  T item() const {
    check(n_->val.size() == 1, "item: tensor is not a scalar");
    return n_->val[0];
  }
  NodePtr<T>& node() { return n_; }
  const NodePtr<T>& node() const { return n_; }

 private:
  NodePtr<T> n_;
};

// Builds a result node; `bp` runs during backward with the node's grad set.
template <typename T>
Var<T> make_node(Shape shape, std::vector<NodePtr<T>> parents,
                 std::function<void(Node<T>&)> bp) {
  auto n = std::make_shared<Node<T>>();
  n->val.assign(size_t(numel(shape)), T(0));
  n->shape = std::move(shape);
  if (grad_mode()) {
    for (auto& p : parents)
      if (p->needs_grad) { n->needs_grad = true; break; }
    if (n->needs_grad) {
      n->parents = std::move(parents);
      n->backprop = std::move(bp);
    }
  }
  return Var<T>(n);
}

// Reverse topological sweep from `loss` (which must be scalar).
template <typename T>
void backward(Var<T>& loss) {
  check(loss.size() == 1, "backward: loss must be scalar");
  if (!loss.needs_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Eigen views

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;

template <typename T>
MatMap<T> as_mat(std::vector<T>& v, int64_t rows, int64_t cols) {
  return MatMap<T>(v.data(), rows, cols);
}
template <typename T>
CMatMap<T> as_mat(const std::vector<T>& v, int64_t rows, int64_t cols) {
  return CMatMap<T>(v.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T, typename FwdFn, typename BwdFn>
Var<T> unary_op(const Var<T>& x, FwdFn fwd, BwdFn dfdx_from_xy) {
  Var<T> y = make_node<T>(x.shape(), {x.node()},
                          [xp = x.node(), dfdx_from_xy](Node<T>& self) {
                            if (!xp->needs_grad) return;
                            xp->ensure_grad();
                            for (size_t i = 0; i < self.val.size(); ++i)
                              xp->grad[i] += self.grad[i] * dfdx_from_xy(xp->val[i], self.val[i]);
                          });
  for (size_t i = 0; i < y.val().size(); ++i) y.val()[i] = fwd(x.val()[i]);
  return y;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return v > T(0) ? v : T(0); },
                     [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
  return unary_op<T>(x, [slope](T v) { return v > T(0) ? v : slope * v; },
                     [slope](T xv, T) { return xv > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary_op<T>(x,
                     [](T v) {
                       if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
                       T e = std::exp(v);
                       return e / (T(1) + e);
                     },
                     [](T, T yv) { return yv * (T(1) - yv); });
}

template <typename T>
Var<T> tanh_(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return std::tanh(v); },
                     [](T, T yv) { return T(1) - yv * yv; });
}

// SP(x) = ln(1 + e^x), evaluated as max(x,0) + log1p(e^{-|x|}).
template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary_op<T>(x,
                     [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
                     [](T xv, T) {
                       if (xv >= T(0)) return T(1) / (T(1) + std::exp(-xv));
                       T e = std::exp(xv);
                       return e / (T(1) + e);
                     });
}

template <typename T>
Var<T> exp_(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return std::exp(v); }, [](T, T yv) { return yv; });
}

template <typename T>
Var<T> log_(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return std::log(v); }, [](T xv, T) { return T(1) / xv; });
}

template <typename T>
Var<T> sqrt_(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return std::sqrt(v); },
                     [](T, T yv) { return T(0.5) / yv; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return v * v; }, [](T xv, T) { return T(2) * xv; });
}

template <typename T>
Var<T> abs_(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return std::abs(v); },
                     [](T xv, T) { return xv > T(0) ? T(1) : (xv < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return unary_op<T>(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary_op<T>(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> recip(const Var<T>& x) {
  return unary_op<T>(x, [](T v) { return T(1) / v; }, [](T, T yv) { return -yv * yv; });
}

// Gradient passes through inside [lo, hi], zero outside.
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return unary_op<T>(x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
                     [lo, hi](T xv, T) { return (xv >= lo && xv <= hi) ? T(1) : T(0); });
}

template <typename T, typename FwdFn, typename DaFn, typename DbFn>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, FwdFn fwd, DaFn dda, DbFn ddb) {
  check(a.shape() == b.shape(), "binary op: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Var<T> y = make_node<T>(a.shape(), {a.node(), b.node()},
                          [ap = a.node(), bp = b.node(), dda, ddb](Node<T>& self) {
                            if (ap->needs_grad) {
                              ap->ensure_grad();
                              for (size_t i = 0; i < self.val.size(); ++i)
                                ap->grad[i] += self.grad[i] * dda(ap->val[i], bp->val[i]);
                            }
                            if (bp->needs_grad) {
                              bp->ensure_grad();
                              for (size_t i = 0; i < self.val.size(); ++i)
                                bp->grad[i] += self.grad[i] * ddb(ap->val[i], bp->val[i]);
                            }
                          });
  for (size_t i = 0; i < y.val().size(); ++i) y.val()[i] = fwd(a.val()[i], b.val()[i]);
  return y;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>(a, b, [](T x, T y) { return x + y; },
                      [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>(a, b, [](T x, T y) { return x - y; },
                      [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary_op<T>(a, b, [](T x, T y) { return x * y; },
                      [](T, T y) { return y; }, [](T x, T) { return x; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  Var<T> y = make_node<T>({1}, {x.node()}, [xp = x.node()](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (auto& g : xp->grad) g += self.grad[0];
  });
  T acc = T(0);
  for (T v : x.val()) acc += v;
  y.val()[0] = acc;
  return y;
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  const T inv = T(1) / T(x.size());
  Var<T> y = make_node<T>({1}, {x.node()}, [xp = x.node(), inv](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    const T g = self.grad[0] * inv;
    for (auto& gi : xp->grad) gi += g;
  });
  T acc = T(0);
  for (T v : x.val()) acc += v;
  y.val()[0] = acc * inv;
  return y;
}

// [..., K] -> [...]: sums the innermost axis.
template <typename T>
Var<T> sum_lastdim(const Var<T>& x) {
  check(x.shape().size() >= 1, "sum_lastdim: rank 0");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  const int64_t k = x.shape().back();
  const int64_t rows = x.size() / k;
  Var<T> y = make_node<T>(out_shape, {x.node()}, [xp = x.node(), rows, k](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < k; ++i) xp->grad[size_t(r * k + i)] += self.grad[size_t(r)];
  });
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (int64_t i = 0; i < k; ++i) acc += x.val()[size_t(r * k + i)];
    y.val()[size_t(r)] = acc;
  }
  return y;
}

// Mean over batch and spatial positions for each channel: [B,C,H,W] -> [C].
template <typename T>
Var<T> channel_mean(const Var<T>& x) {
  check(x.shape().size() == 4, "channel_mean: expected [B,C,H,W]");
  const int64_t b = x.dim(0), c = x.dim(1), hw = int64_t(x.dim(2)) * x.dim(3);
  const T inv = T(1) / T(b * hw);
  Var<T> y = make_node<T>({int(c)}, {x.node()}, [xp = x.node(), b, c, hw, inv](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t ic = 0; ic < c; ++ic) {
        const T g = self.grad[size_t(ic)] * inv;
        T* dst = xp->grad.data() + (ib * c + ic) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += g;
      }
  });
  for (int64_t ib = 0; ib < b; ++ib)
    for (int64_t ic = 0; ic < c; ++ic) {
      const T* src = x.val().data() + (ib * c + ic) * hw;
      T acc = T(0);
      for (int64_t i = 0; i < hw; ++i) acc += src[i];
      y.val()[size_t(ic)] += acc;
    }
  for (int64_t ic = 0; ic < c; ++ic) y.val()[size_t(ic)] *= inv;
  return y;
}

// Global average pool: [B,C,H,W] -> [B,C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  check(x.shape().size() == 4, "global_avg_pool: expected [B,C,H,W]");
  const int64_t bc = int64_t(x.dim(0)) * x.dim(1), hw = int64_t(x.dim(2)) * x.dim(3);
  const T inv = T(1) / T(hw);
  Var<T> y = make_node<T>({x.dim(0), x.dim(1)}, {x.node()}, [xp = x.node(), bc, hw, inv](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (int64_t i = 0; i < bc; ++i) {
      const T g = self.grad[size_t(i)] * inv;
      T* dst = xp->grad.data() + i * hw;
      for (int64_t j = 0; j < hw; ++j) dst[j] += g;
    }
  });
  for (int64_t i = 0; i < bc; ++i) {
    const T* src = x.val().data() + i * hw;
    T acc = T(0);
    for (int64_t j = 0; j < hw; ++j) acc += src[j];
    y.val()[size_t(i)] = acc * inv;
  }
  return y;
}

// [C] -> [B,C,H,W] (replicates a per-channel vector over batch and space).
template <typename T>
Var<T> broadcast_channel(const Var<T>& v, int b, int h, int w) {
  check(v.shape().size() == 1, "broadcast_channel: expected [C]");
  const int64_t c = v.dim(0), hw = int64_t(h) * w;
  Var<T> y = make_node<T>({b, int(c), h, w}, {v.node()}, [vp = v.node(), b, c, hw](Node<T>& self) {
    if (!vp->needs_grad) return;
    vp->ensure_grad();
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t ic = 0; ic < c; ++ic) {
        const T* src = self.grad.data() + (ib * c + ic) * hw;
        T acc = T(0);
        for (int64_t i = 0; i < hw; ++i) acc += src[i];
        vp->grad[size_t(ic)] += acc;
      }
  });
  for (int64_t ib = 0; ib < b; ++ib)
    for (int64_t ic = 0; ic < c; ++ic) {
      T* dst = y.val().data() + (ib * c + ic) * hw;
      const T s = v.val()[size_t(ic)];
      for (int64_t i = 0; i < hw; ++i) dst[i] = s;
    }
  return y;
}

// Scales each row of x:[R,K] by s:[R].
template <typename T>
Var<T> rows_scale(const Var<T>& x, const Var<T>& s) {
  check(x.shape().size() == 2 && s.shape().size() == 1 && x.dim(0) == s.dim(0),
        "rows_scale: expected [R,K] and [R]");
  const int64_t r = x.dim(0), k = x.dim(1);
  Var<T> y = make_node<T>(x.shape(), {x.node(), s.node()},
                          [xp = x.node(), sp = s.node(), r, k](Node<T>& self) {
                            if (xp->needs_grad) {
                              xp->ensure_grad();
                              for (int64_t i = 0; i < r; ++i)
                                for (int64_t j = 0; j < k; ++j)
                                  xp->grad[size_t(i * k + j)] +=
                                      self.grad[size_t(i * k + j)] * sp->val[size_t(i)];
                            }
                            if (sp->needs_grad) {
                              sp->ensure_grad();
                              for (int64_t i = 0; i < r; ++i) {
                                T acc = T(0);
                                for (int64_t j = 0; j < k; ++j)
                                  acc += self.grad[size_t(i * k + j)] * xp->val[size_t(i * k + j)];
                                sp->grad[size_t(i)] += acc;
                              }
                            }
                          });
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < k; ++j)
      y.val()[size_t(i * k + j)] = x.val()[size_t(i * k + j)] * s.val()[size_t(i)];
  return y;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(const Var<T>& x, Shape new_shape) {
  check(numel(new_shape) == x.size(), "reshape: element count mismatch");
  Var<T> y = make_node<T>(new_shape, {x.node()}, [xp = x.node()](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xp->grad[i] += self.grad[i];
  });
  y.val() = x.val();
  return y;
}

// Detached copy: same values, no history.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::leaf(x.shape(), x.val(), false);
}

template <typename T>
Var<T> concat_lastdim(const Var<T>& a, const Var<T>& b) {
  check(a.shape().size() == b.shape().size(), "concat: rank mismatch");
  for (size_t i = 0; i + 1 < a.shape().size(); ++i)
    check(a.shape()[i] == b.shape()[i], "concat: leading dims mismatch");
  const int64_t ka = a.shape().back(), kb = b.shape().back();
  const int64_t rows = a.size() / ka;
  Shape out = a.shape();
  out.back() = int(ka + kb);
  Var<T> y = make_node<T>(out, {a.node(), b.node()},
                          [ap = a.node(), bp = b.node(), rows, ka, kb](Node<T>& self) {
                            const int64_t k = ka + kb;
                            if (ap->needs_grad) {
                              ap->ensure_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                for (int64_t i = 0; i < ka; ++i)
                                  ap->grad[size_t(r * ka + i)] += self.grad[size_t(r * k + i)];
                            }
                            if (bp->needs_grad) {
                              bp->ensure_grad();
                              for (int64_t r = 0; r < rows; ++r)
                                for (int64_t i = 0; i < kb; ++i)
                                  bp->grad[size_t(r * kb + i)] += self.grad[size_t(r * k + ka + i)];
                            }
                          });
  const int64_t k = ka + kb;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t i = 0; i < ka; ++i) y.val()[size_t(r * k + i)] = a.val()[size_t(r * ka + i)];
    for (int64_t i = 0; i < kb; ++i) y.val()[size_t(r * k + ka + i)] = b.val()[size_t(r * kb + i)];
  }
  return y;
}

// [B,C1,H,W] ++ [B,C2,H,W] -> [B,C1+C2,H,W]
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  check(a.shape().size() == 4 && b.shape().size() == 4, "concat_channels: expected 4-d");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
        "concat_channels: shape mismatch");
  const int64_t bn = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), hw = int64_t(a.dim(2)) * a.dim(3);
  Var<T> y = make_node<T>({int(bn), int(c1 + c2), a.dim(2), a.dim(3)}, {a.node(), b.node()},
                          [ap = a.node(), bp = b.node(), bn, c1, c2, hw](Node<T>& self) {
                            const int64_t c = c1 + c2;
                            if (ap->needs_grad) {
                              ap->ensure_grad();
                              for (int64_t ib = 0; ib < bn; ++ib)
                                for (int64_t i = 0; i < c1 * hw; ++i)
                                  ap->grad[size_t(ib * c1 * hw + i)] += self.grad[size_t(ib * c * hw + i)];
                            }
                            if (bp->needs_grad) {
                              bp->ensure_grad();
                              for (int64_t ib = 0; ib < bn; ++ib)
                                for (int64_t i = 0; i < c2 * hw; ++i)
                                  bp->grad[size_t(ib * c2 * hw + i)] +=
                                      self.grad[size_t(ib * c * hw + c1 * hw + i)];
                            }
                          });
  const int64_t c = c1 + c2;
  for (int64_t ib = 0; ib < bn; ++ib) {
    std::copy_n(a.val().data() + ib * c1 * hw, c1 * hw, y.val().data() + ib * c * hw);
    std::copy_n(b.val().data() + ib * c2 * hw, c2 * hw, y.val().data() + ib * c * hw + c1 * hw);
  }
  return y;
}

// [R, K] -> [R, to-from]
template <typename T>
Var<T> slice_lastdim(const Var<T>& x, int from, int to) {
  const int64_t k = x.shape().back();
  check(from >= 0 && to <= k && from < to, "slice_lastdim: bad range");
  const int64_t rows = x.size() / k, w = to - from;
  Shape out = x.shape();
  out.back() = int(w);
  Var<T> y = make_node<T>(out, {x.node()}, [xp = x.node(), rows, k, from, w](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < w; ++i)
        xp->grad[size_t(r * k + from + i)] += self.grad[size_t(r * w + i)];
  });
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < w; ++i) y.val()[size_t(r * w + i)] = x.val()[size_t(r * k + from + i)];
  return y;
}

// Stacks n tensors of shape [B,D] into [B,D,n].
template <typename T>
Var<T> stack_lastdim(const std::vector<Var<T>>& xs) {
  check(!xs.empty(), "stack_lastdim: empty");
  const int64_t b = xs[0].dim(0), d = xs[0].dim(1), n = int64_t(xs.size());
  std::vector<NodePtr<T>> parents;
  for (auto& x : xs) {
    check(x.dim(0) == b && x.dim(1) == d, "stack_lastdim: shape mismatch");
    parents.push_back(x.node());
  }
  Var<T> y = make_node<T>({int(b), int(d), int(n)}, parents,
                          [parents, b, d, n](Node<T>& self) {
                            for (int64_t t = 0; t < n; ++t) {
                              auto& p = parents[size_t(t)];
                              if (!p->needs_grad) continue;
                              p->ensure_grad();
                              for (int64_t ib = 0; ib < b; ++ib)
                                for (int64_t id = 0; id < d; ++id)
                                  p->grad[size_t(ib * d + id)] +=
                                      self.grad[size_t((ib * d + id) * n + t)];
                            }
                          });
  for (int64_t t = 0; t < n; ++t)
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t id = 0; id < d; ++id)
        y.val()[size_t((ib * d + id) * n + t)] = xs[size_t(t)].val()[size_t(ib * d + id)];
  return y;
}

// [B, X, Y] -> [B, Y, X]
template <typename T>
Var<T> transpose_last2(const Var<T>& x) {
  check(x.shape().size() == 3, "transpose_last2: expected [B,X,Y]");
  const int64_t b = x.dim(0), r = x.dim(1), c = x.dim(2);
  Var<T> y = make_node<T>({int(b), int(c), int(r)}, {x.node()},
                          [xp = x.node(), b, r, c](Node<T>& self) {
                            if (!xp->needs_grad) return;
                            xp->ensure_grad();
                            for (int64_t ib = 0; ib < b; ++ib)
                              for (int64_t i = 0; i < r; ++i)
                                for (int64_t j = 0; j < c; ++j)
                                  xp->grad[size_t((ib * r + i) * c + j)] +=
                                      self.grad[size_t((ib * c + j) * r + i)];
                          });
  for (int64_t ib = 0; ib < b; ++ib)
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        y.val()[size_t((ib * c + j) * r + i)] = x.val()[size_t((ib * r + i) * c + j)];
  return y;
}

template <typename T>
Var<T> transpose2d(const Var<T>& x) {
  check(x.shape().size() == 2, "transpose2d: expected [R,C]");
  Var<T> v = reshape(x, {1, x.dim(0), x.dim(1)});
  return reshape(transpose_last2(v), {x.dim(1), x.dim(0)});
}

// Diagonal of a square matrix: [N,N] -> [N].
template <typename T>
Var<T> take_diag(const Var<T>& x) {
  check(x.shape().size() == 2 && x.dim(0) == x.dim(1), "take_diag: expected square");
  const int64_t n = x.dim(0);
  Var<T> y = make_node<T>({int(n)}, {x.node()}, [xp = x.node(), n](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (int64_t i = 0; i < n; ++i) xp->grad[size_t(i * n + i)] += self.grad[size_t(i)];
  });
  for (int64_t i = 0; i < n; ++i) y.val()[size_t(i)] = x.val()[size_t(i * n + i)];
  return y;
}

// ---------------------------------------------------------------------------
// Matrix products

// [M,K] x [K,N] -> [M,N]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
        "matmul: incompatible shapes");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Var<T> y = make_node<T>({int(m), int(n)}, {a.node(), b.node()},
                          [ap = a.node(), bp = b.node(), m, k, n](Node<T>& self) {
                            auto dy = as_mat(self.grad, m, n);
                            if (ap->needs_grad) {
                              ap->ensure_grad();
                              as_mat(ap->grad, m, k).noalias() +=
                                  dy * as_mat(bp->val, k, n).transpose();
                            }
                            if (bp->needs_grad) {
                              bp->ensure_grad();
                              as_mat(bp->grad, k, n).noalias() +=
                                  as_mat(ap->val, m, k).transpose() * dy;
                            }
                          });
  as_mat(y.val(), m, n).noalias() = as_mat(a.val(), m, k) * as_mat(b.val(), k, n);
  return y;
}

// x:[B,in], w:[out,in], b:[out] -> [B,out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  check(x.shape().size() == 2 && w.shape().size() == 2 && x.dim(1) == w.dim(1),
        "linear: incompatible shapes");
  check(b.shape().size() == 1 && b.dim(0) == w.dim(0), "linear: bad bias");
  const int64_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  Var<T> y = make_node<T>({int(batch), int(out)}, {x.node(), w.node(), b.node()},
                          [xp = x.node(), wp = w.node(), bp = b.node(), batch, in, out](Node<T>& self) {
                            auto dy = as_mat(self.grad, batch, out);
                            if (xp->needs_grad) {
                              xp->ensure_grad();
                              as_mat(xp->grad, batch, in).noalias() += dy * as_mat(wp->val, out, in);
                            }
                            if (wp->needs_grad) {
                              wp->ensure_grad();
                              as_mat(wp->grad, out, in).noalias() +=
                                  dy.transpose() * as_mat(xp->val, batch, in);
                            }
                            if (bp->needs_grad) {
                              bp->ensure_grad();
                              for (int64_t r = 0; r < batch; ++r)
                                for (int64_t c = 0; c < out; ++c)
                                  bp->grad[size_t(c)] += self.grad[size_t(r * out + c)];
                            }
                          });
  as_mat(y.val(), batch, out).noalias() =
      as_mat(x.val(), batch, in) * as_mat(w.val(), out, in).transpose();
  for (int64_t r = 0; r < batch; ++r)
    for (int64_t c = 0; c < out; ++c) y.val()[size_t(r * out + c)] += b.val()[size_t(c)];
  return y;
}

// a:[B,N,K] x b:[B,K,M] -> [B,N,M]
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  check(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(0) == b.dim(0) &&
            a.dim(2) == b.dim(1),
        "bmm: incompatible shapes");
  const int64_t bs = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  Var<T> y = make_node<T>({int(bs), int(n), int(m)}, {a.node(), b.node()},
                          [ap = a.node(), bp = b.node(), bs, n, k, m](Node<T>& self) {
                            for (int64_t i = 0; i < bs; ++i) {
                              CMatMap<T> dy(self.grad.data() + i * n * m, n, m);
                              if (ap->needs_grad) {
                                ap->ensure_grad();
                                MatMap<T>(ap->grad.data() + i * n * k, n, k).noalias() +=
                                    dy * CMatMap<T>(bp->val.data() + i * k * m, k, m).transpose();
                              }
                              if (bp->needs_grad) {
                                bp->ensure_grad();
                                MatMap<T>(bp->grad.data() + i * k * m, k, m).noalias() +=
                                    CMatMap<T>(ap->val.data() + i * n * k, n, k).transpose() * dy;
                              }
                            }
                          });
  for (int64_t i = 0; i < bs; ++i)
    MatMap<T>(y.val().data() + i * n * m, n, m).noalias() =
        CMatMap<T>(a.val().data() + i * n * k, n, k) *
        CMatMap<T>(b.val().data() + i * k * m, k, m);
  return y;
}

// u:[P,Q] applied per batch element: x:[B,Q,R] -> [B,P,R]
template <typename T>
Var<T> matmul_left(const Var<T>& u, const Var<T>& x) {
  check(u.shape().size() == 2 && x.shape().size() == 3 && u.dim(1) == x.dim(1),
        "matmul_left: incompatible shapes");
  const int64_t b = x.dim(0), p = u.dim(0), q = u.dim(1), r = x.dim(2);
  Var<T> y = make_node<T>({int(b), int(p), int(r)}, {u.node(), x.node()},
                          [up = u.node(), xp = x.node(), b, p, q, r](Node<T>& self) {
                            for (int64_t i = 0; i < b; ++i) {
                              CMatMap<T> dy(self.grad.data() + i * p * r, p, r);
                              if (up->needs_grad) {
                                up->ensure_grad();
                                as_mat(up->grad, p, q).noalias() +=
                                    dy * CMatMap<T>(xp->val.data() + i * q * r, q, r).transpose();
                              }
                              if (xp->needs_grad) {
                                xp->ensure_grad();
                                MatMap<T>(xp->grad.data() + i * q * r, q, r).noalias() +=
                                    as_mat(up->val, p, q).transpose() * dy;
                              }
                            }
                          });
  for (int64_t i = 0; i < b; ++i)
    MatMap<T>(y.val().data() + i * p * r, p, r).noalias() =
        as_mat(u.val(), p, q) * CMatMap<T>(x.val().data() + i * q * r, q, r);
  return y;
}

// ---------------------------------------------------------------------------
// Softmax over the innermost axis with max subtraction.

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const int64_t k = x.shape().back();
  const int64_t rows = x.size() / k;
  Var<T> y = make_node<T>(x.shape(), {x.node()}, [xp = x.node(), rows, k](Node<T>& self) {
    if (!xp->needs_grad) return;
    xp->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* yv = self.val.data() + r * k;
      const T* gy = self.grad.data() + r * k;
      T dot = T(0);
      for (int64_t i = 0; i < k; ++i) dot += gy[i] * yv[i];
      T* gx = xp->grad.data() + r * k;
      for (int64_t i = 0; i < k; ++i) gx[i] += yv[i] * (gy[i] - dot);
    }
  });
  for (int64_t r = 0; r < rows; ++r) {
    const T* xv = x.val().data() + r * k;
    T* yv = y.val().data() + r * k;
    T mx = xv[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xv[i]);
    T sum = T(0);
    for (int64_t i = 0; i < k; ++i) {
      yv[i] = std::exp(xv[i] - mx);
      sum += yv[i];
    }
    const T inv = T(1) / sum;
    for (int64_t i = 0; i < k; ++i) yv[i] *= inv;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Embedding lookup: table [V,E], ids (flat, with leading shape dims) -> [ids..., E]

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids, Shape id_shape) {
  check(table.shape().size() == 2, "embedding: table must be [V,E]");
  check(int64_t(ids.size()) == numel(id_shape), "embedding: id count mismatch");
  const int64_t v = table.dim(0), e = table.dim(1);
  for (int id : ids) check(id >= 0 && id < v, "embedding: id out of range");
  Shape out = id_shape;
  out.push_back(int(e));
  Var<T> y = make_node<T>(out, {table.node()}, [tp = table.node(), ids, e](Node<T>& self) {
    if (!tp->needs_grad) return;
    tp->ensure_grad();
    for (size_t r = 0; r < ids.size(); ++r) {
      const T* g = self.grad.data() + int64_t(r) * e;
      T* dst = tp->grad.data() + int64_t(ids[r]) * e;
      for (int64_t i = 0; i < e; ++i) dst[i] += g[i];
    }
  });
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.val().data() + int64_t(ids[r]) * e, e, y.val().data() + int64_t(r) * e);
  return y;
}

// ---------------------------------------------------------------------------
// Spatial ops

// x:[B,C,H,W] * m:[B,1,H,W] -> [B,C,H,W] (mask broadcast over channels)
template <typename T>
Var<T> mask_mul(const Var<T>& x, const Var<T>& m) {
  check(x.shape().size() == 4 && m.shape().size() == 4, "mask_mul: expected 4-d");
  check(m.dim(1) == 1 && x.dim(0) == m.dim(0) && x.dim(2) == m.dim(2) && x.dim(3) == m.dim(3),
        "mask_mul: mask must be [B,1,H,W] matching x");
  const int64_t b = x.dim(0), c = x.dim(1), hw = int64_t(x.dim(2)) * x.dim(3);
  Var<T> y = make_node<T>(x.shape(), {x.node(), m.node()},
                          [xp = x.node(), mp = m.node(), b, c, hw](Node<T>& self) {
                            for (int64_t ib = 0; ib < b; ++ib) {
                              const T* mv = mp->val.data() + ib * hw;
                              for (int64_t ic = 0; ic < c; ++ic) {
                                const int64_t off = (ib * c + ic) * hw;
                                if (xp->needs_grad) {
                                  xp->ensure_grad();
                                  for (int64_t i = 0; i < hw; ++i)
                                    xp->grad[size_t(off + i)] += self.grad[size_t(off + i)] * mv[i];
                                }
                                if (mp->needs_grad) {
                                  mp->ensure_grad();
                                  for (int64_t i = 0; i < hw; ++i)
                                    mp->grad[size_t(ib * hw + i)] +=
                                        self.grad[size_t(off + i)] * xp->val[size_t(off + i)];
                                }
                              }
                            }
                          });
  for (int64_t ib = 0; ib < b; ++ib) {
    const T* mv = m.val().data() + ib * hw;
    for (int64_t ic = 0; ic < c; ++ic) {
      const int64_t off = (ib * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) y.val()[size_t(off + i)] = x.val()[size_t(off + i)] * mv[i];
    }
  }
  return y;
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  check(x.shape().size() == 4, "upsample: expected [B,C,H,W]");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Var<T> y = make_node<T>({int(b), int(c), int(2 * h), int(2 * w)}, {x.node()},
                          [xp = x.node(), b, c, h, w](Node<T>& self) {
                            if (!xp->needs_grad) return;
                            xp->ensure_grad();
                            const int64_t W2 = 2 * w;
                            for (int64_t bc = 0; bc < b * c; ++bc)
                              for (int64_t i = 0; i < h; ++i)
                                for (int64_t j = 0; j < w; ++j) {
                                  const int64_t base = bc * 4 * h * w + (2 * i) * W2 + 2 * j;
                                  xp->grad[size_t(bc * h * w + i * w + j)] +=
                                      self.grad[size_t(base)] + self.grad[size_t(base + 1)] +
                                      self.grad[size_t(base + W2)] + self.grad[size_t(base + W2 + 1)];
                                }
                          });
  const int64_t W2 = 2 * w;
  for (int64_t bc = 0; bc < b * c; ++bc)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const T v = x.val()[size_t(bc * h * w + i * w + j)];
        const int64_t base = bc * 4 * h * w + (2 * i) * W2 + 2 * j;
        y.val()[size_t(base)] = v;
        y.val()[size_t(base + 1)] = v;
        y.val()[size_t(base + W2)] = v;
        y.val()[size_t(base + W2 + 1)] = v;
      }
  return y;
}

// 2-d convolution via im2col + GEMM. x:[B,Ci,H,W], w:[Co,Ci,kh,kw], b:[Co].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = 0) {
  check(x.shape().size() == 4 && w.shape().size() == 4, "conv2d: expected 4-d");
  check(x.dim(1) == w.dim(1), "conv2d: channel mismatch");
  check(b.shape().size() == 1 && b.dim(0) == w.dim(0), "conv2d: bad bias");
  const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho >= 1 && Wo >= 1, "conv2d: output collapses to zero size");
  const int64_t K = Ci * kh * kw, N = B * Ho * Wo;

  auto col = std::make_shared<std::vector<T>>(size_t(K * N));
  {
    T* cp = col->data();
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t u = 0; u < kh; ++u)
        for (int64_t v = 0; v < kw; ++v) {
          // one row of the col matrix, contiguous over (b, ho, wo)
          for (int64_t ib = 0; ib < B; ++ib) {
            const T* xplane = x.val().data() + (ib * Ci + ci) * H * W;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              const int64_t ih = ho * stride - pad + u;
              if (ih < 0 || ih >= H) {
                for (int64_t wo = 0; wo < Wo; ++wo) *cp++ = T(0);
                continue;
              }
              for (int64_t wo = 0; wo < Wo; ++wo) {
                const int64_t iw = wo * stride - pad + v;
                *cp++ = (iw >= 0 && iw < W) ? xplane[ih * W + iw] : T(0);
              }
            }
          }
        }
  }

  Var<T> y = make_node<T>(
      {int(B), int(Co), int(Ho), int(Wo)}, {x.node(), w.node(), b.node()},
      [xp = x.node(), wp = w.node(), bp = b.node(), col, B, Ci, H, W, Co, kh, kw, Ho, Wo, K, N,
       stride, pad](Node<T>& self) {
        // gather dY into [Co, N] layout (column index = (b, ho, wo))
        std::vector<T> dy_mat(size_t(Co * N));
        const int64_t hw = Ho * Wo;
        for (int64_t ib = 0; ib < B; ++ib)
          for (int64_t co = 0; co < Co; ++co)
            std::copy_n(self.grad.data() + (ib * Co + co) * hw, hw,
                        dy_mat.data() + co * N + ib * hw);
        if (bp->needs_grad) {
          bp->ensure_grad();
          for (int64_t co = 0; co < Co; ++co) {
            T acc = T(0);
            const T* row = dy_mat.data() + co * N;
            for (int64_t i = 0; i < N; ++i) acc += row[i];
            bp->grad[size_t(co)] += acc;
          }
        }
        if (wp->needs_grad) {
          wp->ensure_grad();
          as_mat(wp->grad, Co, K).noalias() +=
              as_mat(dy_mat, Co, N) * CMatMap<T>(col->data(), K, N).transpose();
        }
        if (xp->needs_grad) {
          xp->ensure_grad();
          std::vector<T> dcol(size_t(K * N));
          as_mat(dcol, K, N).noalias() =
              as_mat(wp->val, Co, K).transpose() * as_mat(dy_mat, Co, N);
          const T* cp = dcol.data();
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v)
                for (int64_t ib = 0; ib < B; ++ib) {
                  T* gplane = xp->grad.data() + (ib * Ci + ci) * H * W;
                  for (int64_t ho = 0; ho < Ho; ++ho) {
                    const int64_t ih = ho * stride - pad + u;
                    if (ih < 0 || ih >= H) {
                      cp += Wo;
                      continue;
                    }
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                      const int64_t iw = wo * stride - pad + v;
                      if (iw >= 0 && iw < W) gplane[ih * W + iw] += *cp;
                      ++cp;
                    }
                  }
                }
        }
      });

  std::vector<T> y_mat(size_t(Co * N));
  as_mat(y_mat, Co, N).noalias() = as_mat(w.val(), Co, K) * CMatMap<T>(col->data(), K, N);
  const int64_t hw = Ho * Wo;
  for (int64_t ib = 0; ib < B; ++ib)
    for (int64_t co = 0; co < Co; ++co) {
      T* dst = y.val().data() + (ib * Co + co) * hw;
      const T* src = y_mat.data() + co * N + ib * hw;
      const T bias = b.val()[size_t(co)];
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
    }
  return y;
}

}  // namespace tigan::ag
