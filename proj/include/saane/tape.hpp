#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <deque>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "saane/tensor.hpp"

namespace saane {

enum class PoolMode { Avg, Max };

inline const char* pool_mode_name(PoolMode m) { return m == PoolMode::Avg ? "avg" : "max"; }

// Handle to a node on a Tape.
struct Var {
  std::size_t index = static_cast<std::size_t>(-1);
};

// Records a forward pass over dense tensors and replays it in reverse to
// accumulate gradients. Nodes are appended in execution order, so walking
// the record backwards visits them in reverse topological order. A tape is
// single-use: one forward recording, one backward sweep. Node storage is a
// deque so references returned by value() stay valid across later ops.
template <typename T>
class Tape {
 public:
  Var leaf(Tensor<T> value) { return push(std::move(value), {}); }

  // Binds a trainable parameter; its gradient is accumulated into
  // Parameter::grad by backward(). Binding the same parameter twice yields
  // the same node.
  Var param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push(p.value, {});
    param_nodes_.emplace(&p, v.index);
    params_.emplace_back(v.index, &p);
    return v;
  }

  Var scalar(T value) { return leaf(Tensor<T>(Shape{1}, {value})); }

  const Tensor<T>& value(Var v) const {
    check_handle(v);
    return nodes_[v.index].value;
  }

  const Tensor<T>& grad(Var v) const {
    if (!backward_done_) throw Error("gradient requested before backward()");
    check_handle(v);
    return nodes_[v.index].grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

  // --- operations ------------------------------------------------------

  // Cross-correlation with an optional per-output-channel bias.
  Var conv2d(Var input, Var weights, int padding, Var bias) {
    const Tensor<T>& b = value(bias);
    const Tensor<T>& w = value(weights);
    if (b.rank() != 1 || b.extent(0) != w.extent(0)) {
      throw ShapeError("conv2d bias " + shape_str(b.shape) + " must match output channels of " +
                       shape_str(w.shape));
    }
    Var out = conv2d(input, weights, padding);
    const Tensor<T>& o = value(out);
    return add(out, mul_broadcast(bias, leaf(Tensor<T>::ones(Shape{1, o.extent(1),
                                                                   o.extent(2)}))));
  }

  // Zero-padded cross-correlation. Requires an odd square kernel with
  // padding == (K-1)/2 so the spatial extent is preserved.
  Var conv2d(Var input, Var weights, int padding) {
    const Tensor<T>& in = value(input);
    const Tensor<T>& w = value(weights);
    if (in.rank() != 3 || w.rank() != 4) {
      throw ShapeError("conv2d expects map " + shape_str(in.shape) + " and kernel " +
                       shape_str(w.shape));
    }
    const int c_in = in.extent(0), h = in.extent(1), ww = in.extent(2);
    const int c_out = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    if (w.extent(1) != c_in) {
      throw ShapeError("conv2d channel mismatch: input " + shape_str(in.shape) + " vs kernel " +
                       shape_str(w.shape));
    }
    if (kh != kw || kh % 2 == 0 || padding != (kh - 1) / 2) {
      throw ShapeError("conv2d requires an odd square kernel with padding (K-1)/2, got kernel " +
                       shape_str(w.shape) + " padding " + std::to_string(padding));
    }
    std::vector<double> acc(static_cast<std::size_t>(c_out) * h * ww, 0.0);
    for (int o = 0; o < c_out; ++o)
      for (int i = 0; i < c_in; ++i)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double wv = static_cast<double>(w.at(o, i, ky, kx));
            if (wv == 0.0) continue;
            for (int y = 0; y < h; ++y) {
              const int yy = y + ky - padding;
              if (yy < 0 || yy >= h) continue;
              for (int x = 0; x < ww; ++x) {
                const int xx = x + kx - padding;
                if (xx < 0 || xx >= ww) continue;
                acc[(static_cast<std::size_t>(o) * h + y) * ww + x] +=
                    wv * static_cast<double>(in.at(i, yy, xx));
              }
            }
          }
    Tensor<T> out(Shape{c_out, h, ww});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(acc[i]);
    const std::size_t in_idx = input.index, w_idx = weights.index;
    return push(std::move(out), [in_idx, w_idx, padding](Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      const Tensor<T>& in = t.nodes_[in_idx].value;
      const Tensor<T>& w = t.nodes_[w_idx].value;
      Tensor<T>& gin = t.nodes_[in_idx].grad;
      Tensor<T>& gw = t.nodes_[w_idx].grad;
      const int c_in = in.extent(0), h = in.extent(1), ww2 = in.extent(2);
      const int c_out = w.extent(0), kh = w.extent(2), kw = w.extent(3);
      for (int o = 0; o < c_out; ++o)
        for (int i = 0; i < c_in; ++i)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              const T wv = w.at(o, i, ky, kx);
              T wacc = T(0);
              for (int y = 0; y < h; ++y) {
                const int yy = y + ky - padding;
                if (yy < 0 || yy >= h) continue;
                for (int x = 0; x < ww2; ++x) {
                  const int xx = x + kx - padding;
                  if (xx < 0 || xx >= ww2) continue;
                  const T gv = g.at(o, y, x);
                  gin.at(i, yy, xx) += gv * wv;
                  wacc += gv * in.at(i, yy, xx);
                }
              }
              gw.at(o, i, ky, kx) += wacc;
            }
    });
  }

  // Per-channel reduction over all spatial positions: C x H x W -> C.
  Var pool_spatial(Var input, PoolMode mode) {
    const Tensor<T>& in = value(input);
    require_rank3(in, "pool_spatial");
    const int c = in.extent(0), h = in.extent(1), w = in.extent(2);
    Tensor<T> out(Shape{c});
    std::vector<std::size_t> argmax(mode == PoolMode::Max ? static_cast<std::size_t>(c) : 0);
    for (int ch = 0; ch < c; ++ch) {
      if (mode == PoolMode::Max) {
        const std::size_t base = static_cast<std::size_t>(ch) * h * w;
        const std::size_t end = base + static_cast<std::size_t>(h) * w;
        std::size_t best = base;
        for (std::size_t i = base + 1; i < end; ++i)
          if (in[i] > in[best]) best = i;
        out[static_cast<std::size_t>(ch)] = in[best];
        argmax[static_cast<std::size_t>(ch)] = best;
      } else {
        double acc = 0.0;
        const std::size_t base = static_cast<std::size_t>(ch) * h * w;
        for (std::size_t i = base; i < base + static_cast<std::size_t>(h) * w; ++i)
          acc += static_cast<double>(in[i]);
        out[static_cast<std::size_t>(ch)] = static_cast<T>(acc / (h * w));
      }
    }
    const std::size_t in_idx = input.index;
    return push(std::move(out),
                [in_idx, mode, argmax = std::move(argmax)](Tape& t, std::size_t self) {
                  const Tensor<T>& g = t.nodes_[self].grad;
                  Tensor<T>& gin = t.nodes_[in_idx].grad;
                  const Tensor<T>& in = t.nodes_[in_idx].value;
                  const int c = in.extent(0), h = in.extent(1), w = in.extent(2);
                  for (int ch = 0; ch < c; ++ch) {
                    if (mode == PoolMode::Max) {
                      gin[argmax[static_cast<std::size_t>(ch)]] += g[static_cast<std::size_t>(ch)];
                    } else {
                      const T share = g[static_cast<std::size_t>(ch)] / static_cast<T>(h * w);
                      const std::size_t base = static_cast<std::size_t>(ch) * h * w;
                      for (std::size_t i = base; i < base + static_cast<std::size_t>(h) * w; ++i)
                        gin[i] += share;
                    }
                  }
                });
  }

  // Reduction across channels: C x H x W -> 1 x H x W.
  Var pool_channel(Var input, PoolMode mode) {
    const Tensor<T>& in = value(input);
    require_rank3(in, "pool_channel");
    const int c = in.extent(0), h = in.extent(1), w = in.extent(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor<T> out(Shape{1, h, w});
    std::vector<std::size_t> argmax(mode == PoolMode::Max ? plane : 0);
    for (std::size_t p = 0; p < plane; ++p) {
      if (mode == PoolMode::Max) {
        std::size_t best = p;
        for (int ch = 1; ch < c; ++ch) {
          const std::size_t i = static_cast<std::size_t>(ch) * plane + p;
          if (in[i] > in[best]) best = i;
        }
        out[p] = in[best];
        argmax[p] = best;
      } else {
        double acc = 0.0;
        for (int ch = 0; ch < c; ++ch) acc += static_cast<double>(in[static_cast<std::size_t>(ch) * plane + p]);
        out[p] = static_cast<T>(acc / c);
      }
    }
    const std::size_t in_idx = input.index;
    return push(std::move(out),
                [in_idx, mode, argmax = std::move(argmax)](Tape& t, std::size_t self) {
                  const Tensor<T>& g = t.nodes_[self].grad;
                  Tensor<T>& gin = t.nodes_[in_idx].grad;
                  const Tensor<T>& in = t.nodes_[in_idx].value;
                  const int c = in.extent(0);
                  const std::size_t plane = g.size();
                  for (std::size_t p = 0; p < plane; ++p) {
                    if (mode == PoolMode::Max) {
                      gin[argmax[p]] += g[p];
                    } else {
                      const T share = g[p] / static_cast<T>(c);
                      for (int ch = 0; ch < c; ++ch) gin[static_cast<std::size_t>(ch) * plane + p] += share;
                    }
                  }
                });
  }

  // w (rows x cols) times x (cols) plus b (rows).
  Var affine(Var w, Var x, Var b) {
    const Tensor<T>& wt = value(w);
    const Tensor<T>& xt = value(x);
    const Tensor<T>& bt = value(b);
    if (wt.rank() != 2 || xt.rank() != 1 || bt.rank() != 1 || wt.extent(1) != xt.extent(0) ||
        wt.extent(0) != bt.extent(0)) {
      throw ShapeError("affine shape mismatch: w " + shape_str(wt.shape) + ", x " +
                       shape_str(xt.shape) + ", b " + shape_str(bt.shape));
    }
    const int rows = wt.extent(0), cols = wt.extent(1);
    Tensor<T> out(Shape{rows});
    for (int r = 0; r < rows; ++r) {
      double acc = static_cast<double>(bt[static_cast<std::size_t>(r)]);
      for (int c = 0; c < cols; ++c)
        acc += static_cast<double>(wt.at(r, c)) * static_cast<double>(xt[static_cast<std::size_t>(c)]);
      out[static_cast<std::size_t>(r)] = static_cast<T>(acc);
    }
    const std::size_t w_idx = w.index, x_idx = x.index, b_idx = b.index;
    return push(std::move(out), [w_idx, x_idx, b_idx](Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      const Tensor<T>& wt = t.nodes_[w_idx].value;
      const Tensor<T>& xt = t.nodes_[x_idx].value;
      Tensor<T>& gw = t.nodes_[w_idx].grad;
      Tensor<T>& gx = t.nodes_[x_idx].grad;
      Tensor<T>& gb = t.nodes_[b_idx].grad;
      const int rows = wt.extent(0), cols = wt.extent(1);
      for (int r = 0; r < rows; ++r) {
        const T gv = g[static_cast<std::size_t>(r)];
        gb[static_cast<std::size_t>(r)] += gv;
        for (int c = 0; c < cols; ++c) {
          gw.at(r, c) += gv * xt[static_cast<std::size_t>(c)];
          gx[static_cast<std::size_t>(c)] += gv * wt.at(r, c);
        }
      }
    });
  }

  Var relu(Var x) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    const std::size_t x_idx = x.index;
    return push(std::move(out), [x_idx](Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      const Tensor<T>& in = t.nodes_[x_idx].value;
      Tensor<T>& gx = t.nodes_[x_idx].grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (in[i] > T(0)) gx[i] += g[i];
    });
  }

  // Numerically stable logistic function, branch on sign.
  Var sigmoid(Var x) {
    Tensor<T> out = value(x);
    for (T& v : out.data) {
      const double d = static_cast<double>(v);
      if (d >= 0.0) {
        v = static_cast<T>(1.0 / (1.0 + std::exp(-d)));
      } else {
        const double e = std::exp(d);
        v = static_cast<T>(e / (1.0 + e));
      }
    }
    const std::size_t x_idx = x.index;
    return push(std::move(out), [x_idx](Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      const Tensor<T>& s = t.nodes_[self].value;
      Tensor<T>& gx = t.nodes_[x_idx].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (T(1) - s[i]);
    });
  }

  Var add(Var a, Var b) { return add_sub(a, b, T(1)); }
  Var sub(Var a, Var b) { return add_sub(a, b, T(-1)); }

  Var shift(Var x, T constant) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v += constant;
    const std::size_t x_idx = x.index;
    return push(std::move(out), [x_idx](Tape& t, std::size_t self) {
      accumulate(t.nodes_[x_idx].grad, t.nodes_[self].grad, T(1));
    });
  }

  Var scale(Var x, T factor) {
    Tensor<T> out = value(x);
    for (T& v : out.data) v *= factor;
    const std::size_t x_idx = x.index;
    return push(std::move(out), [x_idx, factor](Tape& t, std::size_t self) {
      accumulate(t.nodes_[x_idx].grad, t.nodes_[self].grad, factor);
    });
  }

  Var sum(Var x) {
    double acc = 0.0;
    for (const T& v : value(x).data) acc += static_cast<double>(v);
    const std::size_t x_idx = x.index;
    return push(Tensor<T>(Shape{1}, {static_cast<T>(acc)}), [x_idx](Tape& t, std::size_t self) {
      const T g = t.nodes_[self].grad[0];
      for (T& v : t.nodes_[x_idx].grad.data) v += g;
    });
  }

  // Mean of scalar nodes.
  Var mean(const std::vector<Var>& xs) {
    if (xs.empty()) throw Error("mean of zero nodes");
    double acc = 0.0;
    std::vector<std::size_t> idx;
    idx.reserve(xs.size());
    for (Var v : xs) {
      require_scalar(value(v), "mean");
      acc += static_cast<double>(value(v)[0]);
      idx.push_back(v.index);
    }
    const T inv = static_cast<T>(1.0 / static_cast<double>(xs.size()));
    return push(Tensor<T>(Shape{1}, {static_cast<T>(acc / static_cast<double>(xs.size()))}),
                [idx = std::move(idx), inv](Tape& t, std::size_t self) {
                  const T g = t.nodes_[self].grad[0] * inv;
                  for (std::size_t i : idx) t.nodes_[i].grad[0] += g;
                });
  }

  // Elementwise product with broadcasting: size-1 axes are expanded, and a
  // rank-1 length-C vector against a C x H x W map is treated as C x 1 x 1
  // (channel gates broadcast along the spatial axes).
  Var mul_broadcast(Var a, Var b) {
    const Tensor<T>& at = value(a);
    const Tensor<T>& bt = value(b);
    Shape sa = aligned_shape(at.shape, bt.shape);
    Shape sb = aligned_shape(bt.shape, at.shape);
    if (sa.size() != sb.size()) {
      throw ShapeError("mul_broadcast rank mismatch: " + shape_str(at.shape) + " vs " +
                       shape_str(bt.shape));
    }
    Shape out_shape(sa.size());
    for (std::size_t d = 0; d < sa.size(); ++d) {
      if (sa[d] != sb[d] && sa[d] != 1 && sb[d] != 1) {
        throw ShapeError("mul_broadcast incompatible shapes: " + shape_str(at.shape) + " vs " +
                         shape_str(bt.shape));
      }
      out_shape[d] = std::max(sa[d], sb[d]);
    }
    Tensor<T> out(out_shape);
    broadcast_walk(out_shape, sa, sb, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
      out[oi] = at[ai] * bt[bi];
    });
    const std::size_t a_idx = a.index, b_idx = b.index;
    return push(std::move(out),
                [a_idx, b_idx, sa = std::move(sa), sb = std::move(sb),
                 out_shape = std::move(out_shape)](Tape& t, std::size_t self) {
                  const Tensor<T>& g = t.nodes_[self].grad;
                  const Tensor<T>& at = t.nodes_[a_idx].value;
                  const Tensor<T>& bt = t.nodes_[b_idx].value;
                  Tensor<T>& ga = t.nodes_[a_idx].grad;
                  Tensor<T>& gb = t.nodes_[b_idx].grad;
                  broadcast_walk(out_shape, sa, sb,
                                 [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                                   ga[ai] += g[oi] * bt[bi];
                                   gb[bi] += g[oi] * at[ai];
                                 });
                });
  }

  // Concatenate two maps along the channel axis.
  Var concat_channels(Var a, Var b) {
    const Tensor<T>& at = value(a);
    const Tensor<T>& bt = value(b);
    require_rank3(at, "concat_channels");
    require_rank3(bt, "concat_channels");
    if (at.extent(1) != bt.extent(1) || at.extent(2) != bt.extent(2)) {
      throw ShapeError("concat_channels spatial mismatch: " + shape_str(at.shape) + " vs " +
                       shape_str(bt.shape));
    }
    Tensor<T> out(Shape{at.extent(0) + bt.extent(0), at.extent(1), at.extent(2)});
    std::copy(at.data.begin(), at.data.end(), out.data.begin());
    std::copy(bt.data.begin(), bt.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at.size()));
    const std::size_t a_idx = a.index, b_idx = b.index, a_size = at.size();
    return push(std::move(out), [a_idx, b_idx, a_size](Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      Tensor<T>& ga = t.nodes_[a_idx].grad;
      Tensor<T>& gb = t.nodes_[b_idx].grad;
      for (std::size_t i = 0; i < a_size; ++i) ga[i] += g[i];
      for (std::size_t i = a_size; i < g.size(); ++i) gb[i - a_size] += g[i];
    });
  }

  // Spatial pyramid pooling. For each level n the H x W grid is split into
  // n x n bins with boundaries floor(i*H/n)..floor((i+1)*H/n); bins tile the
  // grid exactly. Output layout: level blocks in the given order, bins
  // row-major, channels contiguous within a bin.
  Var spp(Var input, const std::vector<int>& levels, PoolMode mode) {
    const Tensor<T>& in = value(input);
    require_rank3(in, "spp");
    const int c = in.extent(0), h = in.extent(1), w = in.extent(2);
    std::size_t out_len = 0;
    for (int n : levels) {
      if (n <= 0) throw ShapeError("spp level must be positive");
      if (n > h || n > w) {
        throw ShapeError("spp level " + std::to_string(n) + " exceeds spatial extent " +
                         shape_str(in.shape));
      }
      out_len += static_cast<std::size_t>(n) * n * c;
    }
    Tensor<T> out(Shape{static_cast<int>(out_len)});
    std::vector<std::size_t> argmax(mode == PoolMode::Max ? out_len : 0);
    std::size_t o = 0;
    for (int n : levels) {
      for (int by = 0; by < n; ++by) {
        const int y0 = by * h / n, y1 = (by + 1) * h / n;
        for (int bx = 0; bx < n; ++bx) {
          const int x0 = bx * w / n, x1 = (bx + 1) * w / n;
          for (int ch = 0; ch < c; ++ch, ++o) {
            if (mode == PoolMode::Max) {
              std::size_t best = flat3(in, ch, y0, x0);
              for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                  const std::size_t i = flat3(in, ch, y, x);
                  if (in[i] > in[best]) best = i;
                }
              out[o] = in[best];
              argmax[o] = best;
            } else {
              double acc = 0.0;
              for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) acc += static_cast<double>(in.at(ch, y, x));
              out[o] = static_cast<T>(acc / ((y1 - y0) * (x1 - x0)));
            }
          }
        }
      }
    }
    const std::size_t in_idx = input.index;
    return push(std::move(out), [in_idx, levels, mode, argmax = std::move(argmax)](
                                    Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      const Tensor<T>& in = t.nodes_[in_idx].value;
      Tensor<T>& gin = t.nodes_[in_idx].grad;
      const int c = in.extent(0), h = in.extent(1), w = in.extent(2);
      std::size_t o = 0;
      for (int n : levels) {
        for (int by = 0; by < n; ++by) {
          const int y0 = by * h / n, y1 = (by + 1) * h / n;
          for (int bx = 0; bx < n; ++bx) {
            const int x0 = bx * w / n, x1 = (bx + 1) * w / n;
            for (int ch = 0; ch < c; ++ch, ++o) {
              if (mode == PoolMode::Max) {
                gin[argmax[o]] += g[o];
              } else {
                const T share = g[o] / static_cast<T>((y1 - y0) * (x1 - x0));
                for (int y = y0; y < y1; ++y)
                  for (int x = x0; x < x1; ++x) gin.at(ch, y, x) += share;
              }
            }
          }
        }
      }
    });
  }

  // alpha * x / ||x||_2, treating x as a flat vector.
  Var normalize_scale(Var x, T alpha) {
    const Tensor<T>& in = value(x);
    double sq = 0.0;
    for (const T& v : in.data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw Error("normalize_scale: zero vector (degenerate all-zero input)");
    Tensor<T> out = in;
    const double k = static_cast<double>(alpha) / norm;
    for (T& v : out.data) v = static_cast<T>(static_cast<double>(v) * k);
    const std::size_t x_idx = x.index;
    return push(std::move(out), [x_idx, alpha, norm](Tape& t, std::size_t self) {
      const Tensor<T>& g = t.nodes_[self].grad;
      const Tensor<T>& in = t.nodes_[x_idx].value;
      Tensor<T>& gx = t.nodes_[x_idx].grad;
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        dot += static_cast<double>(g[i]) * static_cast<double>(in[i]);
      const double a = static_cast<double>(alpha);
      const double k1 = a / norm;
      const double k2 = a * dot / (norm * norm * norm);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += static_cast<T>(k1 * static_cast<double>(g[i]) - k2 * static_cast<double>(in[i]));
    });
  }

  // Euclidean distance between two same-shape tensors, as a scalar node.
  Var euclidean(Var a, Var b) {
    const Tensor<T>& at = value(a);
    const Tensor<T>& bt = value(b);
    if (!at.same_shape(bt)) {
      throw ShapeError("euclidean shape mismatch: " + shape_str(at.shape) + " vs " +
                       shape_str(bt.shape));
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < at.size(); ++i) {
      const double d = static_cast<double>(at[i]) - static_cast<double>(bt[i]);
      sq += d * d;
    }
    const double dist = std::sqrt(sq);
    const std::size_t a_idx = a.index, b_idx = b.index;
    return push(Tensor<T>(Shape{1}, {static_cast<T>(dist)}),
                [a_idx, b_idx, dist](Tape& t, std::size_t self) {
                  if (dist == 0.0) return;  // subgradient 0 at coincident points
                  const double coef = static_cast<double>(t.nodes_[self].grad[0]) / dist;
                  const Tensor<T>& at = t.nodes_[a_idx].value;
                  const Tensor<T>& bt = t.nodes_[b_idx].value;
                  Tensor<T>& ga = t.nodes_[a_idx].grad;
                  Tensor<T>& gb = t.nodes_[b_idx].grad;
                  for (std::size_t i = 0; i < at.size(); ++i) {
                    const T d = static_cast<T>(coef * (static_cast<double>(at[i]) -
                                                       static_cast<double>(bt[i])));
                    ga[i] += d;
                    gb[i] -= d;
                  }
                });
  }

  // --- backward ----------------------------------------------------------

  // Seeds d(loss)/d(loss) = 1, replays the record in reverse, then adds each
  // bound parameter's accumulated gradient into Parameter::grad. A second
  // sweep over the same record is rejected.
  void backward(Var loss) {
    if (backward_done_) throw Error("backward already run on this tape; re-run forward first");
    require_scalar(value(loss), "backward");
    for (Node& n : nodes_) n.grad = Tensor<T>(n.value.shape);
    nodes_[loss.index].grad[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].backprop) nodes_[i].backprop(*this, i);
    }
    for (auto& [idx, p] : params_) {
      const Tensor<T>& g = nodes_[idx].grad;
      for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
    backward_done_ = true;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&, std::size_t)> backprop;
  };

  std::deque<Node> nodes_;
  std::vector<std::pair<std::size_t, Parameter<T>*>> params_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool backward_done_ = false;

  Var push(Tensor<T> value, std::function<void(Tape&, std::size_t)> backprop) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backprop)});
    return Var{nodes_.size() - 1};
  }

  void check_handle(Var v) const {
    if (v.index >= nodes_.size()) {
      throw Error("invalid tape handle (unrecorded or default-constructed Var)");
    }
  }

  Var add_sub(Var a, Var b, T sign) {
    const Tensor<T>& at = value(a);
    const Tensor<T>& bt = value(b);
    if (!at.same_shape(bt)) {
      throw ShapeError("add/sub shape mismatch: " + shape_str(at.shape) + " vs " +
                       shape_str(bt.shape));
    }
    Tensor<T> out = at;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bt[i];
    const std::size_t a_idx = a.index, b_idx = b.index;
    return push(std::move(out), [a_idx, b_idx, sign](Tape& t, std::size_t self) {
      accumulate(t.nodes_[a_idx].grad, t.nodes_[self].grad, T(1));
      accumulate(t.nodes_[b_idx].grad, t.nodes_[self].grad, sign);
    });
  }

  static void accumulate(Tensor<T>& dst, const Tensor<T>& src, T factor) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
  }

  static void require_rank3(const Tensor<T>& t, const char* op) {
    if (t.rank() != 3) {
      throw ShapeError(std::string(op) + " expects a C x H x W map, got " + shape_str(t.shape));
    }
  }

  static void require_scalar(const Tensor<T>& t, const char* op) {
    if (t.size() != 1) {
      throw ShapeError(std::string(op) + " expects a scalar, got " + shape_str(t.shape));
    }
  }

  static std::size_t flat3(const Tensor<T>& t, int c, int y, int x) {
    return (static_cast<std::size_t>(c) * t.extent(1) + y) * t.extent(2) + x;
  }

  // Aligns `s` to the rank of `other` under the channel-gate convention: a
  // rank-1 length-C vector against a C x H x W (or 1 x H x W) map becomes
  // C x 1 x 1.
  static Shape aligned_shape(const Shape& s, const Shape& other) {
    if (s.size() == 1 && other.size() == 3 && (s[0] == other[0] || other[0] == 1)) {
      return Shape{s[0], 1, 1};
    }
    return s;
  }

  template <typename Fn>
  static void broadcast_walk(const Shape& out_shape, const Shape& sa, const Shape& sb, Fn&& fn) {
    const std::size_t rank = out_shape.size();
    std::vector<int> idx(rank, 0);
    const std::size_t total = shape_numel(out_shape);
    for (std::size_t flat = 0; flat < total; ++flat) {
      std::size_t ai = 0, bi = 0;
      for (std::size_t d = 0; d < rank; ++d) {
        ai = ai * static_cast<std::size_t>(sa[d]) + static_cast<std::size_t>(sa[d] == 1 ? 0 : idx[d]);
        bi = bi * static_cast<std::size_t>(sb[d]) + static_cast<std::size_t>(sb[d] == 1 ? 0 : idx[d]);
      }
      fn(flat, ai, bi);
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
};

// Two-layer perceptron: w2 * relu(w1 * x + b1) + b2. The output
// nonlinearity is left to the caller (the gate applies sigmoid after
// summing the two pooled branches).
template <typename T>
Var mlp2(Tape<T>& tape, Var x, Var w1, Var b1, Var w2, Var b2) {
  return tape.affine(w2, tape.relu(tape.affine(w1, x, b1)), b2);
}

}  // namespace saane
