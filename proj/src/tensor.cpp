#include "rawshield/tensor.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace rawshield::ad {

namespace {

thread_local std::uint64_t t_next_id = 1;
thread_local bool t_grad_enabled = true;

std::uint64_t next_id() { return t_next_id++; }

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
void accumulate_into(const NodePtr<Scalar>& node, const typename Node<Scalar>::Array& g) {
  if (node->requires_grad) node->accumulate(g);
}

[[noreturn]] void shape_error(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + to_string(s));
}

}  // namespace

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- Tensor ----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array value, bool requires_grad) : node_(std::make_shared<NodeType>()) {
  for (Index e : shape)
    if (e < 0) throw ShapeError("Tensor: negative extent in " + to_string(shape));
  if (value.size() != ad::numel(shape))
    throw ShapeError("Tensor: data length " + std::to_string(value.size()) + " does not match shape " +
                     to_string(shape));
  node_->id = next_id();
  node_->shape = std::move(shape);
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  if (requires_grad) node_->grad = Array::Zero(node_->value.size());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, Array::Zero(ad::numel(shape)), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(const Shape& shape, Scalar value, bool requires_grad) {
  return Tensor(shape, Array::Constant(ad::numel(shape), value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return Tensor(Shape{}, Array::Constant(1, value), requires_grad);
}

template <typename Scalar>
typename Tensor<Scalar>::Array& Tensor<Scalar>::mutable_value() {
  if (!node_->inputs.empty() || node_->backward) throw Error("mutable_value: tensor is not a leaf");
  return node_->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

template <typename Scalar>
typename Tensor<Scalar>::Array Tensor<Scalar>::grad() const {
  if (node_->grad.size() == 0) return Array::Zero(node_->value.size());
  return node_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  if (node_->requires_grad && node_->inputs.empty()) node_->grad.setZero(node_->value.size());
  else node_->grad.resize(0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

// ---- recording -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> record_op(const char* op, Shape shape, typename Node<Scalar>::Array value,
                         std::initializer_list<Tensor<Scalar>> inputs,
                         typename Node<Scalar>::BackwardFn backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->id = next_id();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (node->value.size() != numel(node->shape)) shape_error(op, "internal size mismatch");
  if (!node->value.allFinite())
    throw NumericFault(std::string(op) + " (node " + std::to_string(node->id) + ") produced a non-finite value");
  bool needs = false;
  if (t_grad_enabled)
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.defined() ? t.node() : nullptr);
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

namespace {

template <typename Scalar>
std::vector<Node<Scalar>*> reachable(const Tensor<Scalar>& root) {
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<Node<Scalar>*> stack{root.node().get()};
  while (!stack.empty()) {
    Node<Scalar>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (in && in->requires_grad) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });
  return order;
}

}  // namespace

template <typename Scalar>
std::vector<TapeEntry> collect_tape(const Tensor<Scalar>& root) {
  std::vector<TapeEntry> tape;
  if (!root.requires_grad()) return tape;
  for (auto* n : reachable(root)) {
    TapeEntry e{n->id, n->op, {}};
    for (const auto& in : n->inputs)
      if (in && in->requires_grad) e.input_ids.push_back(in->id);
    tape.push_back(std::move(e));
  }
  return tape;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a single-element tensor");
  if (!loss.requires_grad()) throw Error("backward: loss is not connected to any tensor requiring grad");
  auto order = reachable(loss);
  loss.node()->accumulate(Node<Scalar>::Array::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (!n->backward || n->grad.size() == 0) continue;
    n->backward(*n);
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && in->grad.size() && !in->grad.allFinite())
        throw NumericFault("backward: non-finite gradient produced by " + std::string(n->op) + " (node " +
                           std::to_string(n->id) + ") for input node " + std::to_string(in->id));
    }
    n->grad.resize(0);
  }
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvGeometry {
  Index batch, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  Index k() const { return cin * kh * kw; }
  Index spatial_out() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + kj is in bounds.
std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index kj) {
  const Index off = g.pad - kj;
  const Index lo = off > 0 ? (off + g.stride - 1) / g.stride : 0;
  const Index last = g.w - 1 + off;
  const Index hi = last < 0 ? 0 : std::min(g.wo, last / g.stride + 1);
  return {std::min(lo, hi), hi};
}

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, RowMat<Scalar>& cols) {
  cols.resize(g.k(), g.spatial_out());
  for (Index c = 0; c < g.cin; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* dst = cols.row((c * g.kh + ki) * g.kw + kj).data();
        const auto [lo, hi] = valid_columns(g, kj);
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          Scalar* row = dst + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * g.h + iy) * g.w;
          const Index shift = kj - g.pad;
          std::fill(row, row + lo, Scalar(0));
          if (g.stride == 1)
            std::copy(src + lo + shift, src + hi + shift, row + lo);
          else
            for (Index ox = lo; ox < hi; ++ox) row[ox] = src[ox * g.stride + shift];
          std::fill(row + hi, row + g.wo, Scalar(0));
        }
      }
}

template <typename Scalar>
void col2im(const RowMat<Scalar>& cols, const ConvGeometry& g, Scalar* dx) {
  for (Index c = 0; c < g.cin; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* srcrow = cols.row((c * g.kh + ki) * g.kw + kj).data();
        const auto [lo, hi] = valid_columns(g, kj);
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          Scalar* dst = dx + (c * g.h + iy) * g.w;
          const Index shift = kj - g.pad;
          const Scalar* row = srcrow + oy * g.wo;
          for (Index ox = lo; ox < hi; ++ox) dst[ox * g.stride + shift] += row[ox];
        }
      }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      int stride, int padding) {
  constexpr const char* op = "conv2d";
  require_rank(op, x.shape(), 4);
  require_rank(op, weight.shape(), 4);
  if (stride < 1 || padding < 0) shape_error(op, "stride must be >= 1 and padding >= 0");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin)
    shape_error(op, "input channels " + std::to_string(g.cin) + " vs weight " + to_string(weight.shape()));
  const Index span_h = g.h + 2 * padding - g.kh, span_w = g.w + 2 * padding - g.kw;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0)
    shape_error(op, "output size is not integral for input " + to_string(x.shape()));
  g.ho = span_h / stride + 1;
  g.wo = span_w / stride + 1;
  if (bias.defined() && (bias.numel() != g.cout)) shape_error(op, "bias must have Cout elements");

  using Array = typename Tensor<Scalar>::Array;
  const Index in_stride = g.cin * g.h * g.w;
  const Index out_stride = g.cout * g.spatial_out();
  Array out(g.batch * out_stride);
  const Eigen::Map<const RowMat<Scalar>> wmat(weight.value().data(), g.cout, g.k());
  RowMat<Scalar> cols;
  for (Index b = 0; b < g.batch; ++b) {
    Eigen::Map<RowMat<Scalar>> ob(out.data() + b * out_stride, g.cout, g.spatial_out());
    if (g.pointwise()) {
      const Eigen::Map<const RowMat<Scalar>> xb(x.value().data() + b * in_stride, g.cin, g.spatial_out());
      ob.noalias() = wmat * xb;
    } else {
      im2col(x.value().data() + b * in_stride, g, cols);
      ob.noalias() = wmat * cols;
    }
    if (bias.defined()) ob.colwise() += bias.value().matrix();
  }

  return record_op<Scalar>(
      op, Shape{g.batch, g.cout, g.ho, g.wo}, std::move(out), {x, weight, bias}, [g](Node<Scalar>& self) {
        const auto& xn = self.inputs[0];
        const auto& wn = self.inputs[1];
        const auto& bn = self.inputs[2];
        const Index in_stride = g.cin * g.h * g.w;
        const Index out_stride = g.cout * g.spatial_out();
        const Eigen::Map<const RowMat<Scalar>> wmat(wn->value.data(), g.cout, g.k());
        RowMat<Scalar> cols, dcols;
        RowMat<Scalar> dw;
        if (wn->requires_grad) dw = RowMat<Scalar>::Zero(g.cout, g.k());
        Vec<Scalar> db;
        if (bn && bn->requires_grad) db = Vec<Scalar>::Zero(g.cout);
        if (xn->requires_grad) xn->grad_buffer();
        for (Index b = 0; b < g.batch; ++b) {
          const Eigen::Map<const RowMat<Scalar>> gb(self.grad.data() + b * out_stride, g.cout, g.spatial_out());
          if (wn->requires_grad) {
            if (g.pointwise()) {
              const Eigen::Map<const RowMat<Scalar>> xb(xn->value.data() + b * in_stride, g.cin, g.spatial_out());
              dw.noalias() += gb * xb.transpose();
            } else {
              im2col(xn->value.data() + b * in_stride, g, cols);
              dw.noalias() += gb * cols.transpose();
            }
          }
          if (bn && bn->requires_grad) db += gb.rowwise().sum();
          if (xn->requires_grad) {
            if (g.pointwise()) {
              Eigen::Map<RowMat<Scalar>> dxb(xn->grad.data() + b * in_stride, g.cin, g.spatial_out());
              dxb.noalias() += wmat.transpose() * gb;
            } else {
              dcols.noalias() = wmat.transpose() * gb;
              col2im(dcols, g, xn->grad.data() + b * in_stride);
            }
          }
        }
        if (wn->requires_grad) wn->accumulate(Eigen::Map<const typename Node<Scalar>::Array>(dw.data(), dw.size()));
        if (bn && bn->requires_grad) bn->accumulate(db.array());
      });
}

// ---- elementwise unary -------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& x, Scalar slope) {
  typename Tensor<Scalar>::Array out = (x.value() >= Scalar(0)).select(x.value(), slope * x.value());
  return record_op<Scalar>("leaky_relu", x.shape(), std::move(out), {x}, [slope](Node<Scalar>& self) {
    const auto& in = self.inputs[0];
    accumulate_into<Scalar>(in, (in->value >= Scalar(0)).select(self.grad, slope * self.grad));
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  typename Tensor<Scalar>::Array out = Scalar(1) / (Scalar(1) + (-x.value()).exp());
  return record_op<Scalar>("sigmoid", x.shape(), std::move(out), {x}, [](Node<Scalar>& self) {
    accumulate_into<Scalar>(self.inputs[0], self.grad * self.value * (Scalar(1) - self.value));
  });
}

template <typename Scalar>
Tensor<Scalar> scale_shift(const Tensor<Scalar>& x, Scalar a, Scalar b) {
  typename Tensor<Scalar>::Array out = a * x.value() + b;
  return record_op<Scalar>("scale_shift", x.shape(), std::move(out), {x}, [a](Node<Scalar>& self) {
    accumulate_into<Scalar>(self.inputs[0], a * self.grad);
  });
}

// ---- pooling / resampling -------------------------------------------------

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  require_rank("global_avg_pool", x.shape(), 4);
  const Index planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  if (area == 0) shape_error("global_avg_pool", "empty spatial extent");
  const Eigen::Map<const RowMat<Scalar>> v(x.value().data(), planes, area);
  typename Tensor<Scalar>::Array out = v.rowwise().mean().array();
  return record_op<Scalar>("global_avg_pool", Shape{x.dim(0), x.dim(1), 1, 1}, std::move(out), {x},
                           [planes, area](Node<Scalar>& self) {
                             const auto& in = self.inputs[0];
                             if (!in->requires_grad) return;
                             Eigen::Map<RowMat<Scalar>> g(in->grad_buffer().data(), planes, area);
                             g.colwise() += (self.grad / Scalar(area)).matrix();
                           });
}

template <typename Scalar>
Tensor<Scalar> avg_pool(const Tensor<Scalar>& x, int k) {
  constexpr const char* op = "avg_pool";
  require_rank(op, x.shape(), 4);
  if (k < 1 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
    shape_error(op, "spatial dims " + to_string(x.shape()) + " not divisible by " + std::to_string(k));
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / k, wo = w / k;
  const Scalar inv = Scalar(1) / Scalar(k * k);
  typename Tensor<Scalar>::Array out = Tensor<Scalar>::Array::Zero(planes * ho * wo);
  const Scalar* src = x.value().data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) out[(p * ho + y / k) * wo + xx / k] += src[(p * h + y) * w + xx];
  out *= inv;
  return record_op<Scalar>(op, Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                           [=](Node<Scalar>& self) {
                             const auto& in = self.inputs[0];
                             if (!in->requires_grad) return;
                             Scalar* dst = in->grad_buffer().data();
                             for (Index p = 0; p < planes; ++p)
                               for (Index y = 0; y < h; ++y)
                                 for (Index xx = 0; xx < w; ++xx)
                                   dst[(p * h + y) * w + xx] += inv * self.grad[(p * ho + y / k) * wo + xx / k];
                           });
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, int factor) {
  constexpr const char* op = "upsample_nearest";
  require_rank(op, x.shape(), 4);
  if (factor < 1) shape_error(op, "factor must be >= 1");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h * factor, wo = w * factor;
  typename Tensor<Scalar>::Array out(planes * ho * wo);
  const Scalar* src = x.value().data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < ho; ++y)
      for (Index xx = 0; xx < wo; ++xx) out[(p * ho + y) * wo + xx] = src[(p * h + y / factor) * w + xx / factor];
  return record_op<Scalar>(op, Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                           [=](Node<Scalar>& self) {
                             const auto& in = self.inputs[0];
                             if (!in->requires_grad) return;
                             Scalar* dst = in->grad_buffer().data();
                             for (Index p = 0; p < planes; ++p)
                               for (Index y = 0; y < ho; ++y)
                                 for (Index xx = 0; xx < wo; ++xx)
                                   dst[(p * h + y / factor) * w + xx / factor] += self.grad[(p * ho + y) * wo + xx];
                           });
}

// ---- dense -------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  constexpr const char* op = "affine";
  require_rank(op, x.shape(), 2);
  require_rank(op, weight.shape(), 2);
  const Index batch = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) shape_error(op, "inner dims " + to_string(x.shape()) + " vs " + to_string(weight.shape()));
  if (bias.defined() && bias.numel() != dout) shape_error(op, "bias must have Dout elements");
  typename Tensor<Scalar>::Array out(batch * dout);
  Eigen::Map<RowMat<Scalar>> o(out.data(), batch, dout);
  const Eigen::Map<const RowMat<Scalar>> xm(x.value().data(), batch, din);
  const Eigen::Map<const RowMat<Scalar>> wm(weight.value().data(), dout, din);
  o.noalias() = xm * wm.transpose();
  if (bias.defined()) o.rowwise() += bias.value().matrix().transpose();
  return record_op<Scalar>(op, Shape{batch, dout}, std::move(out), {x, weight, bias},
                           [=](Node<Scalar>& self) {
                             const auto& xn = self.inputs[0];
                             const auto& wn = self.inputs[1];
                             const auto& bn = self.inputs[2];
                             const Eigen::Map<const RowMat<Scalar>> g(self.grad.data(), batch, dout);
                             if (xn->requires_grad) {
                               Eigen::Map<RowMat<Scalar>> dx(xn->grad_buffer().data(), batch, din);
                               dx.noalias() += g * Eigen::Map<const RowMat<Scalar>>(wn->value.data(), dout, din);
                             }
                             if (wn->requires_grad) {
                               Eigen::Map<RowMat<Scalar>> dw(wn->grad_buffer().data(), dout, din);
                               dw.noalias() += g.transpose() * Eigen::Map<const RowMat<Scalar>>(xn->value.data(), batch, din);
                             }
                             if (bn && bn->requires_grad) bn->grad_buffer() += g.colwise().sum().transpose().array();
                           });
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  if (x.rank() == 0 || x.shape().back() < 1) shape_error("softmax", "last dimension must be >= 1");
  const Index n = x.shape().back(), rows = x.numel() / n;
  typename Tensor<Scalar>::Array out(x.numel());
  const Eigen::Map<const RowMat<Scalar>> in(x.value().data(), rows, n);
  Eigen::Map<RowMat<Scalar>> o(out.data(), rows, n);
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = in.row(r).maxCoeff();
    o.row(r) = (in.row(r).array() - m).exp().matrix();
    o.row(r) /= o.row(r).sum();
  }
  return record_op<Scalar>("softmax", x.shape(), std::move(out), {x}, [rows, n](Node<Scalar>& self) {
    const auto& xn = self.inputs[0];
    if (!xn->requires_grad) return;
    const Eigen::Map<const RowMat<Scalar>> y(self.value.data(), rows, n);
    const Eigen::Map<const RowMat<Scalar>> g(self.grad.data(), rows, n);
    Eigen::Map<RowMat<Scalar>> dx(xn->grad_buffer().data(), rows, n);
    const Vec<Scalar> dots = (g.array() * y.array()).rowwise().sum().matrix();
    dx.array() += y.array() * (g.colwise() - dots).array();
  });
}

// ---- broadcasting binary ops -------------------------------------------------

namespace {

enum class BinaryKind { Add, Sub, Mul, Div };

const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::Add: return "add";
    case BinaryKind::Sub: return "sub";
    case BinaryKind::Mul: return "mul";
    case BinaryKind::Div: return "div";
  }
  return "binary";
}

/// Strides of an operand against the (≤4-D) result, 0 on broadcast axes.
struct BroadcastPlan {
  Shape out;
  std::array<Index, 4> extent{1, 1, 1, 1};
  std::array<Index, 4> stride_a{0, 0, 0, 0};
  std::array<Index, 4> stride_b{0, 0, 0, 0};
  bool same = false;
};

std::array<Index, 4> pad4(const Shape& s) {
  std::array<Index, 4> r{1, 1, 1, 1};
  const std::size_t off = 4 - s.size();
  for (std::size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
  return r;
}

std::array<Index, 4> strides_for(const std::array<Index, 4>& ext, const std::array<Index, 4>& out, bool scalar) {
  std::array<Index, 4> s{0, 0, 0, 0};
  if (scalar) return s;
  Index acc = 1;
  for (int d = 3; d >= 0; --d) {
    s[d] = (ext[d] == 1 && out[d] != 1) ? 0 : acc;
    acc *= ext[d];
  }
  return s;
}

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const bool a_scalar = numel(a) == 1, b_scalar = numel(b) == 1;
  if (a.size() > 4 || b.size() > 4) shape_error(op, "rank above 4");
  if (a.size() != b.size() && !a_scalar && !b_scalar)
    shape_error(op, "rank mismatch " + to_string(a) + " vs " + to_string(b));
  const Shape& ref = (a.size() >= b.size()) ? (a_scalar && !b_scalar ? b : a) : b;
  const auto ea = pad4(a_scalar && a.size() != ref.size() ? Shape{} : a);
  const auto eb = pad4(b_scalar && b.size() != ref.size() ? Shape{} : b);
  std::array<Index, 4> out{};
  for (int d = 0; d < 4; ++d) {
    if (ea[d] == eb[d] || eb[d] == 1) out[d] = ea[d];
    else if (ea[d] == 1) out[d] = eb[d];
    else shape_error(op, "incompatible shapes " + to_string(a) + " and " + to_string(b));
  }
  p.out = Shape(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) p.out[i] = out[4 - ref.size() + i];
  p.extent = out;
  p.stride_a = strides_for(ea, out, a_scalar && a.size() != ref.size());
  p.stride_b = strides_for(eb, out, b_scalar && b.size() != ref.size());
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  Index o = 0;
  for (Index i0 = 0; i0 < p.extent[0]; ++i0)
    for (Index i1 = 0; i1 < p.extent[1]; ++i1)
      for (Index i2 = 0; i2 < p.extent[2]; ++i2)
        for (Index i3 = 0; i3 < p.extent[3]; ++i3, ++o) {
          const Index ia = i0 * p.stride_a[0] + i1 * p.stride_a[1] + i2 * p.stride_a[2] + i3 * p.stride_a[3];
          const Index ib = i0 * p.stride_b[0] + i1 * p.stride_b[1] + i2 * p.stride_b[2] + i3 * p.stride_b[3];
          f(o, ia, ib);
        }
}

template <typename Scalar>
Scalar apply_binary(BinaryKind k, Scalar a, Scalar b) {
  switch (k) {
    case BinaryKind::Add: return a + b;
    case BinaryKind::Sub: return a - b;
    case BinaryKind::Mul: return a * b;
    case BinaryKind::Div: return a / b;
  }
  return a;
}

template <typename Scalar>
Tensor<Scalar> binary(BinaryKind kind, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const char* op = binary_name(kind);
  const BroadcastPlan plan = plan_broadcast(op, a.shape(), b.shape());
  using Array = typename Tensor<Scalar>::Array;
  Array out;
  if (plan.same) {
    switch (kind) {
      case BinaryKind::Add: out = a.value() + b.value(); break;
      case BinaryKind::Sub: out = a.value() - b.value(); break;
      case BinaryKind::Mul: out = a.value() * b.value(); break;
      case BinaryKind::Div: out = a.value() / b.value(); break;
    }
  } else {
    out.resize(numel(plan.out));
    const Scalar* av = a.value().data();
    const Scalar* bv = b.value().data();
    for_each_broadcast(plan, [&](Index o, Index ia, Index ib) { out[o] = apply_binary(kind, av[ia], bv[ib]); });
  }
  return record_op<Scalar>(op, plan.out, std::move(out), {a, b}, [plan, kind](Node<Scalar>& self) {
    const auto& an = self.inputs[0];
    const auto& bn = self.inputs[1];
    const Array& g = self.grad;
    if (plan.same) {
      switch (kind) {
        case BinaryKind::Add:
          accumulate_into<Scalar>(an, g);
          accumulate_into<Scalar>(bn, g);
          break;
        case BinaryKind::Sub:
          accumulate_into<Scalar>(an, g);
          accumulate_into<Scalar>(bn, -g);
          break;
        case BinaryKind::Mul:
          if (an->requires_grad) an->accumulate(g * bn->value);
          if (bn->requires_grad) bn->accumulate(g * an->value);
          break;
        case BinaryKind::Div:
          if (an->requires_grad) an->accumulate(g / bn->value);
          if (bn->requires_grad) bn->accumulate(-g * an->value / bn->value.square());
          break;
      }
      return;
    }
    Scalar* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
    Scalar* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
    const Scalar* av = an->value.data();
    const Scalar* bv = bn->value.data();
    for_each_broadcast(plan, [&](Index o, Index ia, Index ib) {
      const Scalar go = g[o];
      switch (kind) {
        case BinaryKind::Add:
          if (ga) ga[ia] += go;
          if (gb) gb[ib] += go;
          break;
        case BinaryKind::Sub:
          if (ga) ga[ia] += go;
          if (gb) gb[ib] -= go;
          break;
        case BinaryKind::Mul:
          if (ga) ga[ia] += go * bv[ib];
          if (gb) gb[ib] += go * av[ia];
          break;
        case BinaryKind::Div:
          if (ga) ga[ia] += go / bv[ib];
          if (gb) gb[ib] -= go * av[ia] / (bv[ib] * bv[ib]);
          break;
      }
    });
  });
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return binary(BinaryKind::Add, a, b); }
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return binary(BinaryKind::Sub, a, b); }
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return binary(BinaryKind::Mul, a, b); }
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return binary(BinaryKind::Div, a, b); }

// ---- layout ops --------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  constexpr const char* op = "concat_channels";
  if (a.rank() < 2 || a.rank() != b.rank()) shape_error(op, "operands need equal rank >= 2");
  for (std::size_t d = 0; d < a.rank(); ++d)
    if (d != 1 && a.dim(d) != b.dim(d))
      shape_error(op, "non-channel dims differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Index batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const Index inner = a.numel() / std::max<Index>(batch * ca, 1);
  const Index inner_b = b.numel() / std::max<Index>(batch * cb, 1);
  const Index in_ = (ca > 0) ? inner : inner_b;
  Shape shape = a.shape();
  shape[1] = ca + cb;
  typename Tensor<Scalar>::Array out(numel(shape));
  for (Index n = 0; n < batch; ++n) {
    out.segment(n * (ca + cb) * in_, ca * in_) = a.value().segment(n * ca * in_, ca * in_);
    out.segment((n * (ca + cb) + ca) * in_, cb * in_) = b.value().segment(n * cb * in_, cb * in_);
  }
  return record_op<Scalar>(op, shape, std::move(out), {a, b}, [=](Node<Scalar>& self) {
    const auto& an = self.inputs[0];
    const auto& bn = self.inputs[1];
    for (Index n = 0; n < batch; ++n) {
      if (an->requires_grad)
        an->grad_buffer().segment(n * ca * in_, ca * in_) += self.grad.segment(n * (ca + cb) * in_, ca * in_);
      if (bn->requires_grad)
        bn->grad_buffer().segment(n * cb * in_, cb * in_) +=
            self.grad.segment((n * (ca + cb) + ca) * in_, cb * in_);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index start, Index length) {
  constexpr const char* op = "slice_channels";
  if (x.rank() < 2) shape_error(op, "rank must be >= 2");
  const Index batch = x.dim(0), c = x.dim(1);
  if (start < 0 || length < 0 || start + length > c) shape_error(op, "slice out of range");
  const Index inner = c > 0 ? x.numel() / (batch * c) : 0;
  Shape shape = x.shape();
  shape[1] = length;
  typename Tensor<Scalar>::Array out(numel(shape));
  for (Index n = 0; n < batch; ++n)
    out.segment(n * length * inner, length * inner) = x.value().segment((n * c + start) * inner, length * inner);
  return record_op<Scalar>(op, shape, std::move(out), {x}, [=](Node<Scalar>& self) {
    const auto& xn = self.inputs[0];
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (Index n = 0; n < batch; ++n)
      g.segment((n * c + start) * inner, length * inner) += self.grad.segment(n * length * inner, length * inner);
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, const Shape& shape) {
  if (numel(shape) != x.numel())
    shape_error("reshape", to_string(x.shape()) + " cannot become " + to_string(shape));
  return record_op<Scalar>("reshape", shape, x.value(), {x},
                           [](Node<Scalar>& self) { accumulate_into<Scalar>(self.inputs[0], self.grad); });
}

template <typename Scalar>
Tensor<Scalar> expand(const Tensor<Scalar>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return add(Tensor<Scalar>::zeros(shape), x);
}

// ---- reductions ---------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> reduce(const Tensor<Scalar>& x, Reduction kind) {
  using Array = typename Tensor<Scalar>::Array;
  const Index n = x.numel();
  Scalar v = 0;
  const char* op = "reduce";
  switch (kind) {
    case Reduction::Sum: v = x.value().sum(); op = "sum"; break;
    case Reduction::Mean: v = n ? x.value().sum() / Scalar(n) : Scalar(0); op = "mean"; break;
    case Reduction::L1: v = x.value().abs().sum(); op = "l1"; break;
    case Reduction::L2: v = std::sqrt(x.value().square().sum()); op = "l2"; break;
  }
  return record_op<Scalar>(op, Shape{}, Array::Constant(1, v), {x}, [kind, n, v](Node<Scalar>& self) {
    const auto& xn = self.inputs[0];
    if (!xn->requires_grad) return;
    const Scalar g = self.grad[0];
    auto& dst = xn->grad_buffer();
    switch (kind) {
      case Reduction::Sum: dst += g; break;
      case Reduction::Mean: dst += g / Scalar(n); break;
      case Reduction::L1: dst += g * xn->value.sign(); break;
      case Reduction::L2:
        if (v > Scalar(0)) dst += (g / v) * xn->value;
        break;
    }
  });
}

// ---- explicit instantiations ------------------------------------------------

#define RAWSHIELD_INSTANTIATE(S)                                                                            \
  template class Tensor<S>;                                                                                 \
  template Tensor<S> record_op<S>(const char*, Shape, Node<S>::Array, std::initializer_list<Tensor<S>>,   \
                                  Node<S>::BackwardFn);                                                     \
  template std::vector<TapeEntry> collect_tape<S>(const Tensor<S>&);                                        \
  template void backward<S>(const Tensor<S>&);                                                              \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);             \
  template Tensor<S> leaky_relu<S>(const Tensor<S>&, S);                                                    \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                                          \
  template Tensor<S> scale_shift<S>(const Tensor<S>&, S, S);                                                \
  template Tensor<S> global_avg_pool<S>(const Tensor<S>&);                                                  \
  template Tensor<S> avg_pool<S>(const Tensor<S>&, int);                                                    \
  template Tensor<S> upsample_nearest<S>(const Tensor<S>&, int);                                            \
  template Tensor<S> affine<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> softmax<S>(const Tensor<S>&);                                                          \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> div<S>(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> concat_channels<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> slice_channels<S>(const Tensor<S>&, Index, Index);                                     \
  template Tensor<S> reshape<S>(const Tensor<S>&, const Shape&);                                            \
  template Tensor<S> expand<S>(const Tensor<S>&, const Shape&);                                             \
  template Tensor<S> reduce<S>(const Tensor<S>&, Reduction);

RAWSHIELD_INSTANTIATE(float)
RAWSHIELD_INSTANTIATE(double)

#undef RAWSHIELD_INSTANTIATE

}  // namespace rawshield::ad
