#include "mfuse/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mfuse/parallel.hpp"

namespace mfuse {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr double kExpCeiling = 700.0;

[[noreturn]] void shape_error(std::string_view kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(kind) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

[[noreturn]] void shape_error(std::string_view kind, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(kind) + ": " + why + " (shape " + to_string(a) + ")");
}

std::size_t normalize_axis(std::string_view kind, const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) shape_error(kind, s, "axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

// How b's flat index is derived from a's flat index.
enum class Broadcast { Same, Suffix, RowScalar };

std::optional<Broadcast> broadcast_mode(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::Same;
  if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    return Broadcast::Suffix;
  }
  if (a.size() == b.size() && !a.empty() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin())) {
    return Broadcast::RowScalar;
  }
  return std::nullopt;
}

struct Split3 {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

Split3 split_at(const Shape& s, std::size_t axis) {
  Split3 r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

const Tensor& Gradients::at(NodeId id) const {
  if (id >= grads_.size()) throw Error("no gradient recorded for node " + std::to_string(id));
  return grads_[id];
}

const Tensor& Gradients::of(const Tensor& t) const {
  if (!t.node()) throw Error("tensor is not tracked by the graph");
  return at(*t.node());
}

void Graph::check_open() const {
  if (consumed_) throw Error("graph already consumed by backward; build a new graph per step");
}

Tensor Graph::record(std::string_view kind, Tensor out, std::initializer_list<const Tensor*> inputs, Backward fn) {
  check_open();
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return out;
  Node node{kind, {}, out.shape(), std::move(fn)};
  for (const Tensor* t : inputs) node.inputs.push_back(t->requires_grad() ? t->node() : std::nullopt);
  out.requires_grad_ = true;
  out.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return out;
}

Tensor Graph::record(std::string_view kind, Tensor out, std::span<const Tensor> inputs, Backward fn) {
  check_open();
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  Node node{kind, {}, out.shape(), std::move(fn)};
  for (const Tensor& t : inputs) node.inputs.push_back(t.requires_grad() ? t.node() : std::nullopt);
  out.requires_grad_ = true;
  out.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return out;
}

Tensor Graph::leaf(const Tensor& value, bool track) {
  check_open();
  Tensor out = value.detached();
  if (!track) return out;
  out.requires_grad_ = true;
  out.node_ = nodes_.size();
  nodes_.push_back(Node{"leaf", {}, out.shape(), nullptr});
  return out;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  constexpr std::string_view kind = "matmul";
  if (a.rank() < 2 || b.rank() < 2) shape_error(kind, a.shape(), b.shape());
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t batches = a.numel() / (m * k);
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_error(kind, a.shape(), b.shape());
    }
  }
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) shape_error(kind, a.shape(), b.shape());

  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out(out_shape);

  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out.values().data();
  const std::size_t b_stride = shared ? 0 : k * n;
  parallel_for(batches * m, std::max<std::size_t>(1, 4096 / (k * n + 1)), [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const std::size_t bt = r / m;
      const double* arow = A + r * k;
      const double* bm = B + bt * b_stride;
      double* crow = C + r * n;
      if (!transpose_b) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          const double* brow = bm + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      } else {
        for (std::size_t j = 0; j < n; ++j) {
          const double* brow = bm + j * k;
          double acc = 0.0;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
          crow[j] = acc;
        }
      }
    }
  });

  return record(kind, std::move(out), {&a, &b},
                [a = a.detached(), b = b.detached(), m, k, n, batches, shared, transpose_b, b_stride](
                    std::span<const double> g, std::span<double* const> gin) {
                  const double* A = a.values().data();
                  const double* B = b.values().data();
                  const double* G = g.data();
                  if (double* dA = gin[0]) {
                    parallel_for(batches * m, std::max<std::size_t>(1, 4096 / (k * n + 1)),
                                 [&](std::size_t r0, std::size_t r1) {
                                   for (std::size_t r = r0; r < r1; ++r) {
                                     const std::size_t bt = r / m;
                                     const double* grow = G + r * n;
                                     const double* bm = B + bt * b_stride;
                                     double* darow = dA + r * k;
                                     if (!transpose_b) {
                                       for (std::size_t p = 0; p < k; ++p) {
                                         const double* brow = bm + p * n;
                                         double acc = 0.0;
                                         for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                         darow[p] += acc;
                                       }
                                     } else {
                                       for (std::size_t j = 0; j < n; ++j) {
                                         const double gv = grow[j];
                                         const double* brow = bm + j * k;
                                         for (std::size_t p = 0; p < k; ++p) darow[p] += gv * brow[p];
                                       }
                                     }
                                   }
                                 });
                  }
                  if (double* dB = gin[1]) {
                    // Rows of dB are independent; each is reduced over batches in order.
                    const std::size_t b_rows = transpose_b ? n : k;
                    const std::size_t b_mats = shared ? 1 : batches;
                    parallel_for(b_mats * b_rows, std::max<std::size_t>(1, 4096 / (m * n + 1)),
                                 [&](std::size_t q0, std::size_t q1) {
                                   for (std::size_t q = q0; q < q1; ++q) {
                                     const std::size_t mat = q / b_rows;
                                     const std::size_t row = q % b_rows;
                                     const std::size_t bt0 = shared ? 0 : mat;
                                     const std::size_t bt1 = shared ? batches : mat + 1;
                                     for (std::size_t bt = bt0; bt < bt1; ++bt) {
                                       for (std::size_t i = 0; i < m; ++i) {
                                         const double* arow = A + (bt * m + i) * k;
                                         const double* grow = G + (bt * m + i) * n;
                                         if (!transpose_b) {
                                           // dB[row=p, j] += A[i,p] * G[i,j]
                                           double* drow = dB + mat * b_stride + row * n;
                                           const double av = arow[row];
                                           for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                                         } else {
                                           // dBt[row=j, p] += G[i,j] * A[i,p]
                                           double* drow = dB + mat * b_stride + row * k;
                                           const double gv = grow[row];
                                           for (std::size_t p = 0; p < k; ++p) drow[p] += gv * arow[p];
                                         }
                                       }
                                     }
                                   }
                                 });
                  }
                });
}

namespace {

struct BroadcastPlan {
  const Tensor* big;
  const Tensor* small;
  Broadcast mode;
  bool swapped;
};

BroadcastPlan plan_broadcast(std::string_view kind, const Tensor& a, const Tensor& b) {
  if (auto m = broadcast_mode(a.shape(), b.shape())) return {&a, &b, *m, false};
  if (auto m = broadcast_mode(b.shape(), a.shape())) return {&b, &a, *m, true};
  shape_error(kind, a.shape(), b.shape());
}

inline std::size_t small_index(Broadcast mode, std::size_t i, std::size_t small_n, std::size_t last) {
  switch (mode) {
    case Broadcast::Same:
      return i;
    case Broadcast::Suffix:
      return i % small_n;
    case Broadcast::RowScalar:
      return i / last;
  }
  return i;
}

}  // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  const auto plan = plan_broadcast("add", a, b);
  const Tensor& big = *plan.big;
  const Tensor& small = *plan.small;
  const std::size_t sn = small.numel();
  const std::size_t last = big.shape().back();
  Tensor out = big.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += small[small_index(plan.mode, i, sn, last)];
  const int bi = plan.swapped ? 1 : 0;
  const int si = plan.swapped ? 0 : 1;
  return record("add", std::move(out), {&a, &b},
                [mode = plan.mode, sn, last, bi, si](std::span<const double> g, std::span<double* const> gin) {
                  if (double* d = gin[bi]) {
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                  if (double* d = gin[si]) {
                    for (std::size_t i = 0; i < g.size(); ++i) d[small_index(mode, i, sn, last)] += g[i];
                  }
                });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  const auto plan = plan_broadcast("mul", a, b);
  const Tensor& big = *plan.big;
  const Tensor& small = *plan.small;
  const std::size_t sn = small.numel();
  const std::size_t last = big.shape().back();
  Tensor out = big.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= small[small_index(plan.mode, i, sn, last)];
  const int bi = plan.swapped ? 1 : 0;
  const int si = plan.swapped ? 0 : 1;
  return record("mul", std::move(out), {&a, &b},
                [big = big.detached(), small = small.detached(), mode = plan.mode, sn, last, bi, si](
                    std::span<const double> g, std::span<double* const> gin) {
                  if (double* d = gin[bi]) {
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * small[small_index(mode, i, sn, last)];
                  }
                  if (double* d = gin[si]) {
                    for (std::size_t i = 0; i < g.size(); ++i) d[small_index(mode, i, sn, last)] += g[i] * big[i];
                  }
                });
}

Tensor Graph::concat(std::span<const Tensor> parts) {
  constexpr std::string_view kind = "concat";
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      shape_error(kind, first, p.shape());
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor out(out_shape);
  const std::size_t rows = out.numel() / total;
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const std::size_t w = widths[pi];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[pi].values().data() + r * w, w, out.values().data() + r * total + offset);
    }
    offset += w;
  }
  return record(kind, std::move(out), parts, [widths, rows, total](std::span<const double> g, std::span<double* const> gin) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < widths.size(); ++pi) {
      const std::size_t w = widths[pi];
      if (double* d = gin[pi]) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) d[r * w + j] += g[r * total + offset + j];
        }
      }
      offset += w;
    }
  });
}

Tensor Graph::relu(const Tensor& x) {
  Tensor out = x.detached();
  for (double& v : out.values()) {
    note_kink(x, std::abs(v));
    v = v > 0.0 ? v : 0.0;
  }
  return record("relu", out, {&x}, [y = out.detached()](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (y[i] > 0.0) gin[0][i] += g[i];
    }
  });
}

Tensor Graph::sigmoid(const Tensor& x) {
  Tensor out = x.detached();
  for (double& v : out.values()) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return record("sigmoid", out, {&x}, [y = out.detached()](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor Graph::tanh(const Tensor& x) {
  Tensor out = x.detached();
  for (double& v : out.values()) v = std::tanh(v);
  return record("tanh", out, {&x}, [y = out.detached()](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor Graph::softmax(const Tensor& x, const Tensor* key_mask) {
  constexpr std::string_view kind = "softmax";
  if (x.rank() == 0 || x.numel() == 0) shape_error(kind, x.shape(), "empty axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::size_t rows_per_batch = rows;
  if (key_mask) {
    if (x.rank() < 2 || key_mask->shape() != Shape{x.dim(0), n}) {
      shape_error("softmax mask", x.shape(), key_mask->shape());
    }
    rows_per_batch = rows / x.dim(0);
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double* o = out.values().data() + r * n;
    const double* mask = key_mask ? key_mask->values().data() + (r / rows_per_batch) * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && mask[j] == 0.0) continue;
      mx = std::max(mx, in[j]);
      any = true;
    }
    if (!any) throw Error("softmax: every position of row " + std::to_string(r) + " is masked");
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && mask[j] == 0.0) {
        o[j] = 0.0;
        continue;
      }
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  return record(kind, out, {&x}, [y = out.detached(), n, rows](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.values().data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gin[0][r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor Graph::log(const Tensor& x) {
  if (x.numel() == 0) shape_error("log", x.shape(), "empty input");
  Tensor out = x.detached();
  for (double& v : out.values()) v = std::log(std::max(v, kLogFloor));
  return record("log", out, {&x}, [x = x.detached()](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] >= kLogFloor) gin[0][i] += g[i] / x[i];
    }
  });
}

Tensor Graph::exp(const Tensor& x) {
  Tensor out = x.detached();
  for (double& v : out.values()) v = std::exp(std::min(v, kExpCeiling));
  return record("exp", out, {&x},
                [x = x.detached(), y = out.detached()](std::span<const double> g, std::span<double* const> gin) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (x[i] <= kExpCeiling) gin[0][i] += g[i] * y[i];
                  }
                });
}

Tensor Graph::l2_norm(const Tensor& x) {
  double ss = 0.0;
  for (double v : x.values()) ss += v * v;
  const double norm = std::sqrt(ss);
  note_kink(x, norm);
  return record("l2_norm", Tensor::scalar(norm), {&x},
                [x = x.detached(), norm](std::span<const double> g, std::span<double* const> gin) {
                  if (norm == 0.0) return;
                  for (std::size_t i = 0; i < x.numel(); ++i) gin[0][i] += g[0] * x[i] / norm;
                });
}

Tensor Graph::l2_norm_rows(const Tensor& x) {
  if (x.rank() == 0) shape_error("l2_norm_rows", x.shape(), "rank 0");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += x[r * n + j] * x[r * n + j];
    out[r] = std::sqrt(ss);
    note_kink(x, out[r]);
  }
  return record("l2_norm_rows", out, {&x},
                [x = x.detached(), y = out.detached(), n, rows](std::span<const double> g, std::span<double* const> gin) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (y[r] == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) gin[0][r * n + j] += g[r] * x[r * n + j] / y[r];
                  }
                });
}

Tensor Graph::reciprocal(const Tensor& x) {
  Tensor out = x.detached();
  for (double& v : out.values()) {
    note_kink(x, std::abs(v));
    v = v == 0.0 ? 0.0 : 1.0 / v;
  }
  return record("reciprocal", out, {&x}, [y = out.detached()](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] -= g[i] * y[i] * y[i];
  });
}

Tensor Graph::scalar_min(const Tensor& x, double c) {
  Tensor out = x.detached();
  for (double& v : out.values()) {
    note_kink(x, std::abs(v - c));
    v = std::min(v, c);
  }
  return record("scalar_min", out, {&x}, [x = x.detached(), c](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] < c) gin[0][i] += g[i];
    }
  });
}

Tensor Graph::scale(const Tensor& x, double c) {
  Tensor out = x.detached();
  for (double& v : out.values()) v *= c;
  return record("scale", out, {&x}, [c](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * c;
  });
}

Tensor Graph::slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  constexpr std::string_view kind = "slice";
  const std::size_t ax = normalize_axis(kind, x.shape(), axis);
  const Split3 s = split_at(x.shape(), ax);
  if (length == 0 || start + length > s.n) {
    shape_error(kind, x.shape(), "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                     ") outside axis " + std::to_string(axis));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.values().data() + (o * s.n + start) * s.inner, length * s.inner,
                out.values().data() + o * length * s.inner);
  }
  return record(kind, std::move(out), {&x}, [s, start, length](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* d = gin[0] + (o * s.n + start) * s.inner;
      const double* src = g.data() + o * length * s.inner;
      for (std::size_t i = 0; i < length * s.inner; ++i) d[i] += src[i];
    }
  });
}

Tensor Graph::reshape(const Tensor& x, Shape shape) {
  if (mfuse::numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  Tensor out(std::move(shape), x.data());
  return record("reshape", std::move(out), {&x}, [](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

Tensor Graph::mean(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis("mean", x.shape(), axis);
  const Split3 s = split_at(x.shape(), ax);
  Tensor out(drop_axis(x.shape(), ax));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.n + j) * s.inner + i];
    }
  }
  for (double& v : out.values()) v /= static_cast<double>(s.n);
  return record("mean", std::move(out), {&x}, [s](std::span<const double> g, std::span<double* const> gin) {
    const double inv = 1.0 / static_cast<double>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.n; ++j) {
        for (std::size_t i = 0; i < s.inner; ++i) gin[0][(o * s.n + j) * s.inner + i] += g[o * s.inner + i] * inv;
      }
    }
  });
}

Tensor Graph::max(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis("max", x.shape(), axis);
  const Split3 s = split_at(x.shape(), ax);
  Tensor out(drop_axis(x.shape(), ax));
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < s.n; ++j) {
        if (x[(o * s.n + j) * s.inner + i] > x[(o * s.n + best) * s.inner + i]) best = j;
      }
      for (std::size_t j = 0; j < s.n; ++j) {
        if (j != best) note_kink(x, x[(o * s.n + best) * s.inner + i] - x[(o * s.n + j) * s.inner + i]);
      }
      argmax[o * s.inner + i] = (o * s.n + best) * s.inner + i;
      out[o * s.inner + i] = x[argmax[o * s.inner + i]];
    }
  }
  return record("max", std::move(out), {&x}, [argmax](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][argmax[i]] += g[i];
  });
}

Tensor Graph::last(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis("last", x.shape(), axis);
  const Split3 s = split_at(x.shape(), ax);
  Tensor out(drop_axis(x.shape(), ax));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] = x[(o * s.n + s.n - 1) * s.inner + i];
  }
  return record("last", std::move(out), {&x}, [s](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) gin[0][(o * s.n + s.n - 1) * s.inner + i] += g[o * s.inner + i];
    }
  });
}

Tensor Graph::outer(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) shape_error("outer", a.shape(), b.shape());
  const std::size_t rows = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor out({rows, da * db});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < da; ++i) {
      for (std::size_t j = 0; j < db; ++j) out[r * da * db + i * db + j] = a[r * da + i] * b[r * db + j];
    }
  }
  return record("outer", std::move(out), {&a, &b},
                [a = a.detached(), b = b.detached(), rows, da, db](std::span<const double> g, std::span<double* const> gin) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t i = 0; i < da; ++i) {
                      for (std::size_t j = 0; j < db; ++j) {
                        const double gv = g[r * da * db + i * db + j];
                        if (gin[0]) gin[0][r * da + i] += gv * b[r * db + j];
                        if (gin[1]) gin[1][r * db + j] += gv * a[r * da + i];
                      }
                    }
                  }
                });
}

Tensor Graph::embedding(const Tensor& table, const IdMatrix& ids) {
  if (table.rank() != 2) shape_error("embedding", table.shape(), "table must be rank 2");
  if (ids.ids.size() != ids.rows * ids.cols || ids.ids.empty()) {
    throw ShapeError("embedding: id matrix is empty or inconsistent");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw Error("embedding: token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Tensor out({ids.rows, ids.cols, d});
  for (std::size_t t = 0; t < ids.ids.size(); ++t) {
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids.ids[t]) * d, d, out.values().data() + t * d);
  }
  return record("embedding", std::move(out), {&table}, [ids = ids.ids, d](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t t = 0; t < ids.size(); ++t) {
      double* row = gin[0] + static_cast<std::size_t>(ids[t]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[t * d + j];
    }
  });
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  constexpr std::string_view kind = "layer_norm";
  if (x.rank() == 0) shape_error(kind, x.shape(), "rank 0");
  const std::size_t n = x.shape().back();
  if (gain.shape() != Shape{n}) shape_error(kind, x.shape(), gain.shape());
  if (bias.shape() != Shape{n}) shape_error(kind, x.shape(), bias.shape());
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gain[j] + bias[j];
    }
  }
  return record(kind, std::move(out), {&x, &gain, &bias},
                [xhat, inv_std, gain = gain.detached(), n, rows](std::span<const double> g, std::span<double* const> gin) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * n;
                    const double* xh = xhat.values().data() + r * n;
                    if (gin[0]) {
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double d = gr[j] * gain[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                      }
                      mean_d /= static_cast<double>(n);
                      mean_dx /= static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j) {
                        gin[0][r * n + j] += inv_std[r] * (gr[j] * gain[j] - mean_d - xh[j] * mean_dx);
                      }
                    }
                    if (gin[1]) {
                      for (std::size_t j = 0; j < n; ++j) gin[1][j] += gr[j] * xh[j];
                    }
                    if (gin[2]) {
                      for (std::size_t j = 0; j < n; ++j) gin[2][j] += gr[j];
                    }
                  }
                });
}

Tensor Graph::dropout(const Tensor& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  Tensor out = x.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return record("dropout", std::move(out), {&x}, [mask = std::move(mask)](std::span<const double> g, std::span<double* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * mask[i];
  });
}

Tensor Graph::conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  constexpr std::string_view kind = "conv1d";
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2)) shape_error(kind, x.shape(), w.shape());
  if (w.dim(0) % 2 == 0) shape_error(kind, w.shape(), "kernel width must be odd for 'same' padding");
  if (b.shape() != Shape{w.dim(2)}) shape_error(kind, w.shape(), b.shape());
  const std::size_t B = x.dim(0), L = x.dim(1), cin = x.dim(2), K = w.dim(0), cout = w.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  Tensor out({B, L, cout});
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t t = 0; t < L; ++t) {
      double* o = out.values().data() + (bi * L + t) * cout;
      for (std::size_t c = 0; c < cout; ++c) o[c] = b[c];
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        const double* xin = x.values().data() + (bi * L + static_cast<std::size_t>(src)) * cin;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double xv = xin[ci];
          const double* wrow = w.values().data() + (k * cin + ci) * cout;
          for (std::size_t c = 0; c < cout; ++c) o[c] += xv * wrow[c];
        }
      }
    }
  }
  return record(kind, std::move(out), {&x, &w, &b},
                [x = x.detached(), w = w.detached(), B, L, cin, K, cout, pad](std::span<const double> g,
                                                                             std::span<double* const> gin) {
                  for (std::size_t bi = 0; bi < B; ++bi) {
                    for (std::size_t t = 0; t < L; ++t) {
                      const double* go = g.data() + (bi * L + t) * cout;
                      if (gin[2]) {
                        for (std::size_t c = 0; c < cout; ++c) gin[2][c] += go[c];
                      }
                      for (std::size_t k = 0; k < K; ++k) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - pad;
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                        const std::size_t xoff = (bi * L + static_cast<std::size_t>(src)) * cin;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                          const std::size_t woff = (k * cin + ci) * cout;
                          double acc = 0.0;
                          for (std::size_t c = 0; c < cout; ++c) {
                            acc += go[c] * w[woff + c];
                            if (gin[1]) gin[1][woff + c] += go[c] * x[xoff + ci];
                          }
                          if (gin[0]) gin[0][xoff + ci] += acc;
                        }
                      }
                    }
                  }
                });
}

Tensor Graph::sum(const Tensor& x) {
  const auto n = static_cast<double>(x.numel());
  return scale(mean(reshape(x, {x.numel()}), 0), n);
}

Gradients Graph::backward(const Tensor& loss) {
  check_open();
  if (loss.numel() != 1) throw Error("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad() || !loss.node() || *loss.node() >= nodes_.size()) {
    throw Error("backward: loss does not depend on any tracked tensor of this graph");
  }
  consumed_ = true;
  std::vector<std::vector<double>> grads(nodes_.size());
  const NodeId root = *loss.node();
  grads[root].assign(1, 1.0);
  std::vector<double*> gin;
  for (NodeId id = root + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (grads[id].empty() || !node.backward) continue;
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!node.inputs[i]) continue;
      auto& buf = grads[*node.inputs[i]];
      if (buf.empty()) buf.assign(mfuse::numel(nodes_[*node.inputs[i]].shape), 0.0);
      gin[i] = buf.data();
    }
    node.backward(grads[id], gin);
    // Release captured forward state as soon as it is no longer needed.
    node.backward = nullptr;
  }
  std::vector<Tensor> out;
  out.reserve(nodes_.size());
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (grads[id].empty()) {
      out.emplace_back(nodes_[id].shape);
    } else {
      out.emplace_back(nodes_[id].shape, std::move(grads[id]));
    }
  }
  return Gradients(std::move(out));
}

}  // namespace mfuse
