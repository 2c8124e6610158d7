#include "gtsa/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "gtsa/geometry.hpp"
#include "gtsa/threading.hpp"

namespace gtsa {

namespace {

constexpr double kLnEps = 1e-5;  // layernorm variance guard
constexpr double kCosEps = kCosineNormEps;
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

}  // namespace

template <typename T>
int Graph<T>::push(Tn value, bool needs_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
void Graph<T>::check2d(int id, const char* op) const {
  if (value(id).ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor, got " +
                                shape_str(value(id).shape));
}

template <typename T>
const typename Graph<T>::Tn& Graph<T>::grad(int id) const {
  const Node& n = nodes_.at(static_cast<size_t>(id));
  if (!n.needs_grad) throw std::logic_error("grad: node does not require gradients");
  if (n.grad.shape.empty()) throw std::logic_error("grad: backward() has not run");
  return n.grad;
}

template <typename T>
void Graph<T>::backward(int loss) {
  if (value(loss).numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  for (Node& n : nodes_)
    if (n.needs_grad) n.grad = Tn(n.value.shape);
  if (!node(loss).needs_grad)
    throw std::logic_error("backward: loss does not depend on any trainable input");
  node(loss).grad[0] = T(1);
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.needs_grad && n.back) n.back();
  }
}

template <typename T>
int Graph<T>::input(Tn v, bool requires_grad) {
  return push(std::move(v), requires_grad, nullptr);
}

template <typename T>
int Graph<T>::linear(int x, int w, int b) {
  check2d(x, "linear");
  check2d(w, "linear");
  const int64_t R = value(x).dim(0), K = value(x).dim(1), C = value(w).dim(1);
  if (value(w).dim(0) != K) throw std::invalid_argument("linear: inner dims disagree");
  if (b >= 0 && value(b).numel() != C)
    throw std::invalid_argument("linear: bias size mismatch");
  Tn out({R, C});
  {
    const T* xp = value(x).ptr();
    const T* wp = value(w).ptr();
    const T* bp = b >= 0 ? value(b).ptr() : nullptr;
    T* op = out.ptr();
    parallel_for(0, R, [&](int64_t r) {
      T* orow = op + r * C;
      if (bp)
        for (int64_t c = 0; c < C; ++c) orow[c] = bp[c];
      const T* xrow = xp + r * K;
      for (int64_t k = 0; k < K; ++k) {
        const T a = xrow[k];
        if (a == T(0)) continue;
        const T* wrow = wp + k * C;
        for (int64_t c = 0; c < C; ++c) orow[c] += a * wrow[c];
      }
    });
  }
  const bool ng = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng, [this, out_id, x, w, b, R, K, C]() {
    const T* g = grad_buf(out_id).ptr();
    if (node(x).needs_grad) {
      T* dx = grad_buf(x).ptr();
      const T* wp = value(w).ptr();
      parallel_for(0, R, [&](int64_t r) {
        const T* grow = g + r * C;
        T* dxrow = dx + r * K;
        for (int64_t k = 0; k < K; ++k) {
          const T* wrow = wp + k * C;
          T acc = T(0);
          for (int64_t c = 0; c < C; ++c) acc += grow[c] * wrow[c];
          dxrow[k] += acc;
        }
      });
    }
    if (node(w).needs_grad) {
      T* dw = grad_buf(w).ptr();
      const T* xp = value(x).ptr();
      parallel_for(0, K, [&](int64_t k) {
        T* dwrow = dw + k * C;
        for (int64_t r = 0; r < R; ++r) {
          const T a = xp[r * K + k];
          if (a == T(0)) continue;
          const T* grow = g + r * C;
          for (int64_t c = 0; c < C; ++c) dwrow[c] += a * grow[c];
        }
      });
    }
    if (b >= 0 && node(b).needs_grad) {
      T* db = grad_buf(b).ptr();
      for (int64_t r = 0; r < R; ++r) {
        const T* grow = g + r * C;
        for (int64_t c = 0; c < C; ++c) db[c] += grow[c];
      }
    }
  });
}

template <typename T>
int Graph<T>::add(int a, int b) {
  if (!value(a).same_shape(value(b))) throw std::invalid_argument("add: shape mismatch");
  Tn out = value(a);
  {
    const T* bp = value(b).ptr();
    T* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] += bp[i];
  }
  const bool ng = requires_grad(a) || requires_grad(b);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng, [this, out_id, a, b]() {
    const Tn& g = grad_buf(out_id);
    for (int p : {a, b})
      if (node(p).needs_grad) {
        T* d = grad_buf(p).ptr();
        const T* gp = g.ptr();
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += gp[i];
      }
  });
}

template <typename T>
int Graph<T>::scale(int x, double c) {
  Tn out = value(x);
  for (T& v : out.data) v = static_cast<T>(v * c);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, c]() {
    if (!node(x).needs_grad) return;
    const Tn& g = grad_buf(out_id);
    T* d = grad_buf(x).ptr();
    const T* gp = g.ptr();
    for (int64_t i = 0; i < g.numel(); ++i) d[i] += static_cast<T>(gp[i] * c);
  });
}

template <typename T>
int Graph<T>::gelu(int x) {
  Tn out = value(x);
  for (T& v : out.data) {
    const double u = static_cast<double>(v);
    v = static_cast<T>(0.5 * u * (1.0 + std::erf(u * kInvSqrt2)));
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    const T* xp = value(x).ptr();
    T* d = grad_buf(x).ptr();
    const int64_t n = value(x).numel();
    parallel_for_chunks(0, n, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) {
        const double u = static_cast<double>(xp[i]);
        const double cdf = 0.5 * (1.0 + std::erf(u * kInvSqrt2));
        const double pdf = std::exp(-0.5 * u * u) * kInvSqrt2Pi;
        d[i] += static_cast<T>(g[i] * (cdf + u * pdf));
      }
    });
  });
}

template <typename T>
int Graph<T>::layernorm(int x, int gamma, int beta) {
  check2d(x, "layernorm");
  const int64_t R = value(x).dim(0), C = value(x).dim(1);
  if (value(gamma).numel() != C || value(beta).numel() != C)
    throw std::invalid_argument("layernorm: affine size mismatch");
  Tn out({R, C});
  auto xhat = std::make_shared<Tn>(std::vector<int64_t>{R, C});
  auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
  {
    const T* xp = value(x).ptr();
    const T* gp = value(gamma).ptr();
    const T* bp = value(beta).ptr();
    T* op = out.ptr();
    T* hp = xhat->ptr();
    parallel_for(0, R, [&](int64_t r) {
      const T* xrow = xp + r * C;
      double mu = 0;
      for (int64_t c = 0; c < C; ++c) mu += xrow[c];
      mu /= static_cast<double>(C);
      double var = 0;
      for (int64_t c = 0; c < C; ++c) {
        const double dv = xrow[c] - mu;
        var += dv * dv;
      }
      var /= static_cast<double>(C);
      const double rs = 1.0 / std::sqrt(var + kLnEps);
      (*rstd)[static_cast<size_t>(r)] = static_cast<T>(rs);
      for (int64_t c = 0; c < C; ++c) {
        const T h = static_cast<T>((xrow[c] - mu) * rs);
        hp[r * C + c] = h;
        op[r * C + c] = gp[c] * h + bp[c];
      }
    });
  }
  const bool ng = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng, [this, out_id, x, gamma, beta, R, C, xhat, rstd]() {
    const T* g = grad_buf(out_id).ptr();
    const T* hp = xhat->ptr();
    const T* gam = value(gamma).ptr();
    if (node(x).needs_grad) {
      T* dx = grad_buf(x).ptr();
      parallel_for(0, R, [&](int64_t r) {
        const T* grow = g + r * C;
        const T* hrow = hp + r * C;
        double m1 = 0, m2 = 0;
        for (int64_t c = 0; c < C; ++c) {
          const double dh = static_cast<double>(grow[c]) * gam[c];
          m1 += dh;
          m2 += dh * hrow[c];
        }
        m1 /= static_cast<double>(C);
        m2 /= static_cast<double>(C);
        const double rs = (*rstd)[static_cast<size_t>(r)];
        T* dxrow = dx + r * C;
        for (int64_t c = 0; c < C; ++c) {
          const double dh = static_cast<double>(grow[c]) * gam[c];
          dxrow[c] += static_cast<T>(rs * (dh - m1 - hrow[c] * m2));
        }
      });
    }
    if (node(gamma).needs_grad) {
      T* dg = grad_buf(gamma).ptr();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) dg[c] += g[r * C + c] * hp[r * C + c];
    }
    if (node(beta).needs_grad) {
      T* db = grad_buf(beta).ptr();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) db[c] += g[r * C + c];
    }
  });
}

template <typename T>
int Graph<T>::softmax(int x) {
  check2d(x, "softmax");
  const int64_t R = value(x).dim(0), C = value(x).dim(1);
  Tn out({R, C});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    parallel_for(0, R, [&](int64_t r) {
      const T* xrow = xp + r * C;
      T* orow = op + r * C;
      double m = xrow[0];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(xrow[c]));
      double s = 0;
      for (int64_t c = 0; c < C; ++c) {
        const double e = std::exp(xrow[c] - m);
        orow[c] = static_cast<T>(e);
        s += e;
      }
      const double inv = 1.0 / s;
      for (int64_t c = 0; c < C; ++c) orow[c] = static_cast<T>(orow[c] * inv);
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, R, C]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    const T* y = value(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    parallel_for(0, R, [&](int64_t r) {
      const T* grow = g + r * C;
      const T* yrow = y + r * C;
      double s = 0;
      for (int64_t c = 0; c < C; ++c) s += static_cast<double>(grow[c]) * yrow[c];
      T* dxrow = dx + r * C;
      for (int64_t c = 0; c < C; ++c)
        dxrow[c] += static_cast<T>(yrow[c] * (grow[c] - s));
    });
  });
}

template <typename T>
int Graph<T>::softmax_ce_mean(int logits, std::vector<int64_t> labels) {
  check2d(logits, "softmax_ce_mean");
  const int64_t B = value(logits).dim(0), C = value(logits).dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw std::invalid_argument("softmax_ce_mean: label count mismatch");
  for (int64_t l : labels)
    if (l < 0 || l >= C) throw std::invalid_argument("softmax_ce_mean: label out of range");
  auto probs = std::make_shared<Tn>(std::vector<int64_t>{B, C});
  double loss = 0;
  {
    const T* xp = value(logits).ptr();
    T* pp = probs->ptr();
    for (int64_t r = 0; r < B; ++r) {
      const T* xrow = xp + r * C;
      double m = xrow[0];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(xrow[c]));
      double s = 0;
      for (int64_t c = 0; c < C; ++c) s += std::exp(xrow[c] - m);
      const double lse = m + std::log(s);
      loss += lse - xrow[labels[static_cast<size_t>(r)]];
      for (int64_t c = 0; c < C; ++c)
        pp[r * C + c] = static_cast<T>(std::exp(xrow[c] - lse));
    }
  }
  Tn out({1});
  out[0] = static_cast<T>(loss / static_cast<double>(B));
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(logits),
              [this, out_id, logits, labels = std::move(labels), probs, B, C]() {
                if (!node(logits).needs_grad) return;
                const T gs = grad_buf(out_id)[0];
                const T* pp = probs->ptr();
                T* dl = grad_buf(logits).ptr();
                const T invb = static_cast<T>(1.0 / static_cast<double>(B));
                for (int64_t r = 0; r < B; ++r) {
                  const int64_t lab = labels[static_cast<size_t>(r)];
                  for (int64_t c = 0; c < C; ++c) {
                    T p = pp[r * C + c];
                    if (c == lab) p -= T(1);
                    dl[r * C + c] += gs * p * invb;
                  }
                }
              });
}

template <typename T>
int Graph<T>::bmm_nt(int a, int b, int64_t P, int64_t M, int64_t N, int64_t K) {
  check2d(a, "bmm_nt");
  check2d(b, "bmm_nt");
  if (value(a).dim(0) != P * M || value(a).dim(1) != K || value(b).dim(0) != P * N ||
      value(b).dim(1) != K)
    throw std::invalid_argument("bmm_nt: shape mismatch");
  Tn out({P * M, N});
  {
    const T* ap = value(a).ptr();
    const T* bp = value(b).ptr();
    T* op = out.ptr();
    parallel_for(0, P * M, [&](int64_t q) {
      const int64_t p = q / M;
      const T* arow = ap + q * K;
      const T* bplane = bp + p * N * K;
      T* orow = op + q * N;
      for (int64_t j = 0; j < N; ++j) {
        const T* brow = bplane + j * K;
        T acc = T(0);
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        orow[j] = acc;
      }
    });
  }
  const bool ng = requires_grad(a) || requires_grad(b);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng, [this, out_id, a, b, P, M, N, K]() {
    const T* g = grad_buf(out_id).ptr();
    if (node(a).needs_grad) {
      T* da = grad_buf(a).ptr();
      const T* bp = value(b).ptr();
      parallel_for(0, P * M, [&](int64_t q) {
        const int64_t p = q / M;
        const T* grow = g + q * N;
        const T* bplane = bp + p * N * K;
        T* darow = da + q * K;
        for (int64_t j = 0; j < N; ++j) {
          const T s = grow[j];
          if (s == T(0)) continue;
          const T* brow = bplane + j * K;
          for (int64_t k = 0; k < K; ++k) darow[k] += s * brow[k];
        }
      });
    }
    if (node(b).needs_grad) {
      T* db = grad_buf(b).ptr();
      const T* ap = value(a).ptr();
      parallel_for(0, P * N, [&](int64_t q) {
        const int64_t p = q / N, j = q % N;
        const T* aplane = ap + p * M * K;
        const T* gplane = g + p * M * N;
        T* dbrow = db + q * K;
        for (int64_t i = 0; i < M; ++i) {
          const T s = gplane[i * N + j];
          if (s == T(0)) continue;
          const T* arow = aplane + i * K;
          for (int64_t k = 0; k < K; ++k) dbrow[k] += s * arow[k];
        }
      });
    }
  });
}

template <typename T>
int Graph<T>::bmm_nn(int a, int b, int64_t P, int64_t M, int64_t K, int64_t N) {
  check2d(a, "bmm_nn");
  check2d(b, "bmm_nn");
  if (value(a).dim(0) != P * M || value(a).dim(1) != K || value(b).dim(0) != P * K ||
      value(b).dim(1) != N)
    throw std::invalid_argument("bmm_nn: shape mismatch");
  Tn out({P * M, N});
  {
    const T* ap = value(a).ptr();
    const T* bp = value(b).ptr();
    T* op = out.ptr();
    parallel_for(0, P * M, [&](int64_t q) {
      const int64_t p = q / M;
      const T* arow = ap + q * K;
      const T* bplane = bp + p * K * N;
      T* orow = op + q * N;
      for (int64_t j = 0; j < N; ++j) orow[j] = T(0);
      for (int64_t k = 0; k < K; ++k) {
        const T s = arow[k];
        if (s == T(0)) continue;
        const T* brow = bplane + k * N;
        for (int64_t j = 0; j < N; ++j) orow[j] += s * brow[j];
      }
    });
  }
  const bool ng = requires_grad(a) || requires_grad(b);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng, [this, out_id, a, b, P, M, K, N]() {
    const T* g = grad_buf(out_id).ptr();
    if (node(a).needs_grad) {
      T* da = grad_buf(a).ptr();
      const T* bp = value(b).ptr();
      parallel_for(0, P * M, [&](int64_t q) {
        const int64_t p = q / M;
        const T* grow = g + q * N;
        const T* bplane = bp + p * K * N;
        T* darow = da + q * K;
        for (int64_t k = 0; k < K; ++k) {
          const T* brow = bplane + k * N;
          T acc = T(0);
          for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
          darow[k] += acc;
        }
      });
    }
    if (node(b).needs_grad) {
      T* db = grad_buf(b).ptr();
      const T* ap = value(a).ptr();
      parallel_for(0, P, [&](int64_t p) {
        const T* aplane = ap + p * M * K;
        const T* gplane = g + p * M * N;
        T* dbplane = db + p * K * N;
        for (int64_t k = 0; k < K; ++k) {
          T* dbrow = dbplane + k * N;
          for (int64_t i = 0; i < M; ++i) {
            const T s = aplane[i * K + k];
            if (s == T(0)) continue;
            const T* grow = gplane + i * N;
            for (int64_t j = 0; j < N; ++j) dbrow[j] += s * grow[j];
          }
        }
      });
    }
  });
}

template <typename T>
int Graph<T>::heads_split(int x, int64_t B, int64_t N, int64_t H) {
  check2d(x, "heads_split");
  const int64_t D = value(x).dim(1);
  if (value(x).dim(0) != B * N || D % H != 0)
    throw std::invalid_argument("heads_split: shape mismatch");
  const int64_t dh = D / H;
  Tn out({B * H * N, dh});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    parallel_for(0, B * H * N, [&](int64_t q) {
      const int64_t b = q / (H * N), rem = q % (H * N), h = rem / N, n = rem % N;
      const T* src = xp + (b * N + n) * D + h * dh;
      T* dst = op + q * dh;
      for (int64_t d = 0; d < dh; ++d) dst[d] = src[d];
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, B, N, H, dh, D]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    parallel_for(0, B * H * N, [&](int64_t q) {
      const int64_t b = q / (H * N), rem = q % (H * N), h = rem / N, n = rem % N;
      T* dst = dx + (b * N + n) * D + h * dh;
      const T* src = g + q * dh;
      for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
    });
  });
}

template <typename T>
int Graph<T>::heads_merge(int x, int64_t B, int64_t N, int64_t H) {
  check2d(x, "heads_merge");
  const int64_t dh = value(x).dim(1);
  if (value(x).dim(0) != B * H * N) throw std::invalid_argument("heads_merge: shape mismatch");
  const int64_t D = dh * H;
  Tn out({B * N, D});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    parallel_for(0, B * H * N, [&](int64_t q) {
      const int64_t b = q / (H * N), rem = q % (H * N), h = rem / N, n = rem % N;
      T* dst = op + (b * N + n) * D + h * dh;
      const T* src = xp + q * dh;
      for (int64_t d = 0; d < dh; ++d) dst[d] = src[d];
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, B, N, H, dh, D]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    parallel_for(0, B * H * N, [&](int64_t q) {
      const int64_t b = q / (H * N), rem = q % (H * N), h = rem / N, n = rem % N;
      const T* src = g + (b * N + n) * D + h * dh;
      T* dst = dx + q * dh;
      for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
    });
  });
}

template <typename T>
int Graph<T>::rows_to_nchw(int x, int64_t B, int64_t h, int64_t w) {
  check2d(x, "rows_to_nchw");
  const int64_t D = value(x).dim(1), N = h * w;
  if (value(x).dim(0) != B * N) throw std::invalid_argument("rows_to_nchw: shape mismatch");
  Tn out({B, D, h, w});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    parallel_for(0, B * D, [&](int64_t q) {
      const int64_t b = q / D, d = q % D;
      T* plane = op + q * N;
      const T* base = xp + b * N * D + d;
      for (int64_t n = 0; n < N; ++n) plane[n] = base[n * D];
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, B, D, N]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    parallel_for(0, B * N, [&](int64_t row) {
      const int64_t b = row / N, n = row % N;
      T* dst = dx + row * D;
      const T* base = g + b * D * N + n;
      for (int64_t d = 0; d < D; ++d) dst[d] += base[d * N];
    });
  });
}

template <typename T>
int Graph<T>::nchw_to_rows(int x) {
  if (value(x).ndim() != 4) throw std::invalid_argument("nchw_to_rows: expected (B,D,h,w)");
  const int64_t B = value(x).dim(0), D = value(x).dim(1), N = value(x).dim(2) * value(x).dim(3);
  Tn out({B * N, D});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    parallel_for(0, B * N, [&](int64_t row) {
      const int64_t b = row / N, n = row % N;
      T* dst = op + row * D;
      const T* base = xp + b * D * N + n;
      for (int64_t d = 0; d < D; ++d) dst[d] = base[d * N];
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, B, D, N]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    parallel_for(0, B * D, [&](int64_t q) {
      const int64_t b = q / D, d = q % D;
      T* plane = dx + q * N;
      const T* base = g + b * N * D + d;
      for (int64_t n = 0; n < N; ++n) plane[n] += base[n * D];
    });
  });
}

template <typename T>
int Graph<T>::extract_patches(int images, int64_t patch) {
  if (value(images).ndim() != 4 || value(images).dim(1) != 3)
    throw std::invalid_argument("extract_patches: expected (B,3,S,S)");
  const int64_t B = value(images).dim(0), S = value(images).dim(2);
  if (value(images).dim(3) != S || patch <= 0 || S % patch != 0)
    throw std::invalid_argument("extract_patches: size not divisible by patch");
  const int64_t t = S / patch, N = t * t, cols = 3 * patch * patch;
  Tn out({B * N, cols});
  {
    const T* xp = value(images).ptr();
    T* op = out.ptr();
    parallel_for(0, B * N, [&](int64_t row) {
      const int64_t b = row / N, n = row % N, ty = n / t, tx = n % t;
      T* dst = op + row * cols;
      for (int64_t c = 0; c < 3; ++c) {
        const T* plane = xp + (b * 3 + c) * S * S;
        for (int64_t py = 0; py < patch; ++py)
          for (int64_t px = 0; px < patch; ++px)
            dst[(c * patch + py) * patch + px] = plane[(ty * patch + py) * S + tx * patch + px];
      }
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(images),
              [this, out_id, images, patch, B, S, t, N, cols]() {
                if (!node(images).needs_grad) return;
                const T* g = grad_buf(out_id).ptr();
                T* dx = grad_buf(images).ptr();
                parallel_for(0, B * N, [&](int64_t row) {
                  const int64_t b = row / N, n = row % N, ty = n / t, tx = n % t;
                  const T* src = g + row * cols;
                  for (int64_t c = 0; c < 3; ++c) {
                    T* plane = dx + (b * 3 + c) * S * S;
                    for (int64_t py = 0; py < patch; ++py)
                      for (int64_t px = 0; px < patch; ++px)
                        plane[(ty * patch + py) * S + tx * patch + px] +=
                            src[(c * patch + py) * patch + px];
                  }
                });
              });
}

template <typename T>
int Graph<T>::im2col3(int x, int64_t B, int64_t h, int64_t w) {
  check2d(x, "im2col3");
  const int64_t D = value(x).dim(1), N = h * w;
  if (value(x).dim(0) != B * N) throw std::invalid_argument("im2col3: shape mismatch");
  Tn out({B * N, 9 * D});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    parallel_for(0, B * N, [&](int64_t row) {
      const int64_t b = row / N, n = row % N, y = n / w, xx = n % w;
      T* dst = op + row * 9 * D;
      for (int64_t ky = 0; ky < 3; ++ky)
        for (int64_t kx = 0; kx < 3; ++kx) {
          const int64_t sy = y + ky - 1, sx = xx + kx - 1;
          T* seg = dst + (ky * 3 + kx) * D;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            for (int64_t d = 0; d < D; ++d) seg[d] = T(0);
          } else {
            const T* src = xp + (b * N + sy * w + sx) * D;
            for (int64_t d = 0; d < D; ++d) seg[d] = src[d];
          }
        }
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, B, h, w, D, N]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    parallel_for(0, B * N, [&](int64_t row) {
      const int64_t b = row / N, n = row % N, yi = n / w, xi = n % w;
      T* dst = dx + row * D;
      for (int64_t ky = 0; ky < 3; ++ky)
        for (int64_t kx = 0; kx < 3; ++kx) {
          const int64_t yo = yi - ky + 1, xo = xi - kx + 1;
          if (yo < 0 || yo >= h || xo < 0 || xo >= w) continue;
          const T* src = g + (b * N + yo * w + xo) * 9 * D + (ky * 3 + kx) * D;
          for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
        }
    });
  });
}

template <typename T>
int Graph<T>::roi_align_batch(int map, std::vector<Rect> rects, int out_h, int out_w) {
  if (value(map).ndim() != 4) throw std::invalid_argument("roi_align_batch: expected (B,D,h,w)");
  const int64_t B = value(map).dim(0), D = value(map).dim(1), h = value(map).dim(2),
                w = value(map).dim(3);
  if (static_cast<int64_t>(rects.size()) != B)
    throw std::invalid_argument("roi_align_batch: one rect per batch item required");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("roi_align_batch: bad output size");
  for (const Rect& r : rects)
    if (!r.valid()) throw std::invalid_argument("roi_align_batch: empty rect");

  // Taps depend only on the rects; shared by forward, backward, and all D.
  auto taps = std::make_shared<std::vector<detail::BilinearTaps>>(
      static_cast<size_t>(B) * out_h * out_w);
  for (int64_t b = 0; b < B; ++b) {
    const Rect& r = rects[static_cast<size_t>(b)];
    const double cw = r.width() / out_w, ch = r.height() / out_h;
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox)
        (*taps)[static_cast<size_t>((b * out_h + oy) * out_w + ox)] =
            detail::bilinear_taps(h, w, r.x0 + (ox + 0.5) * cw, r.y0 + (oy + 0.5) * ch);
  }

  Tn out({B, D, out_h, out_w});
  const int64_t OT = static_cast<int64_t>(out_h) * out_w;
  {
    const T* xp = value(map).ptr();
    T* op = out.ptr();
    parallel_for(0, B * D, [&](int64_t q) {
      const int64_t b = q / D;
      const T* plane = xp + q * h * w;
      T* oplane = op + q * OT;
      const detail::BilinearTaps* tb = taps->data() + b * OT;
      for (int64_t i = 0; i < OT; ++i) {
        const detail::BilinearTaps& t = tb[i];
        oplane[i] = static_cast<T>(t.w00 * plane[t.i0 * w + t.j0] + t.w01 * plane[t.i0 * w + t.j1] +
                                   t.w10 * plane[t.i1 * w + t.j0] + t.w11 * plane[t.i1 * w + t.j1]);
      }
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(map), [this, out_id, map, taps, B, D, h, w, OT]() {
    if (!node(map).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(map).ptr();
    parallel_for(0, B * D, [&](int64_t q) {
      const int64_t b = q / D;
      T* plane = dx + q * h * w;
      const T* gplane = g + q * OT;
      const detail::BilinearTaps* tb = taps->data() + b * OT;
      for (int64_t i = 0; i < OT; ++i) {
        const detail::BilinearTaps& t = tb[i];
        const T go = gplane[i];
        plane[t.i0 * w + t.j0] += static_cast<T>(t.w00 * go);
        plane[t.i0 * w + t.j1] += static_cast<T>(t.w01 * go);
        plane[t.i1 * w + t.j0] += static_cast<T>(t.w10 * go);
        plane[t.i1 * w + t.j1] += static_cast<T>(t.w11 * go);
      }
    });
  });
}

template <typename T>
int Graph<T>::rotate_map_batch(int map, std::vector<int> ks) {
  if (value(map).ndim() != 4) throw std::invalid_argument("rotate_map_batch: expected (B,D,h,w)");
  const int64_t B = value(map).dim(0), D = value(map).dim(1), h = value(map).dim(2),
                w = value(map).dim(3);
  if (static_cast<int64_t>(ks.size()) != B)
    throw std::invalid_argument("rotate_map_batch: one k per batch item required");
  for (int k : ks) {
    if (k < 0 || k > 3) throw std::invalid_argument("rotate_map_batch: k out of range");
    if ((k & 1) && h != w)
      throw std::invalid_argument("rotate_map_batch: odd k requires a square map");
  }
  Tn out({B, D, h, w});
  auto kshared = std::make_shared<std::vector<int>>(std::move(ks));
  {
    const T* xp = value(map).ptr();
    T* op = out.ptr();
    parallel_for(0, B * D, [&](int64_t q) {
      const int64_t b = q / D;
      const int k = (*kshared)[static_cast<size_t>(b)];
      const T* plane = xp + q * h * w;
      T* oplane = op + q * h * w;
      for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
          int64_t ro, co;
          detail::rotate_index(k, h, w, r, c, &ro, &co);
          oplane[ro * w + co] = plane[r * w + c];
        }
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(map), [this, out_id, map, kshared, B, D, h, w]() {
    if (!node(map).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(map).ptr();
    parallel_for(0, B * D, [&](int64_t q) {
      const int64_t b = q / D;
      const int k = (*kshared)[static_cast<size_t>(b)];
      T* plane = dx + q * h * w;
      const T* gplane = g + q * h * w;
      for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
          int64_t ro, co;
          detail::rotate_index(k, h, w, r, c, &ro, &co);
          plane[r * w + c] += gplane[ro * w + co];
        }
    });
  });
}

template <typename T>
int Graph<T>::gap_rows(int x, int64_t B, int64_t N) {
  check2d(x, "gap_rows");
  const int64_t D = value(x).dim(1);
  if (value(x).dim(0) != B * N) throw std::invalid_argument("gap_rows: shape mismatch");
  Tn out({B, D});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    const double inv = 1.0 / static_cast<double>(N);
    parallel_for(0, B, [&](int64_t b) {
      T* orow = op + b * D;
      for (int64_t d = 0; d < D; ++d) {
        double acc = 0;
        const T* base = xp + b * N * D + d;
        for (int64_t n = 0; n < N; ++n) acc += base[n * D];
        orow[d] = static_cast<T>(acc * inv);
      }
    });
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, B, N, D]() {
    if (!node(x).needs_grad) return;
    const T* g = grad_buf(out_id).ptr();
    T* dx = grad_buf(x).ptr();
    const T inv = static_cast<T>(1.0 / static_cast<double>(N));
    parallel_for(0, B * N, [&](int64_t row) {
      const int64_t b = row / N;
      T* dst = dx + row * D;
      const T* grow = g + b * D;
      for (int64_t d = 0; d < D; ++d) dst[d] += grow[d] * inv;
    });
  });
}

template <typename T>
int Graph<T>::gather_rows(int x, std::vector<int64_t> idx) {
  check2d(x, "gather_rows");
  const int64_t R = value(x).dim(0), D = value(x).dim(1);
  const int64_t M = static_cast<int64_t>(idx.size());
  if (M == 0) throw std::invalid_argument("gather_rows: empty index list");
  for (int64_t i : idx)
    if (i < 0 || i >= R) throw std::invalid_argument("gather_rows: index out of range");
  Tn out({M, D});
  {
    const T* xp = value(x).ptr();
    T* op = out.ptr();
    for (int64_t m = 0; m < M; ++m) {
      const T* src = xp + idx[static_cast<size_t>(m)] * D;
      T* dst = op + m * D;
      for (int64_t d = 0; d < D; ++d) dst[d] = src[d];
    }
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x),
              [this, out_id, x, idx = std::move(idx), D]() {
                if (!node(x).needs_grad) return;
                const T* g = grad_buf(out_id).ptr();
                T* dx = grad_buf(x).ptr();
                // Serial: duplicate indices are legal.
                for (size_t m = 0; m < idx.size(); ++m) {
                  T* dst = dx + idx[m] * D;
                  const T* src = g + static_cast<int64_t>(m) * D;
                  for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
                }
              });
}

template <typename T>
int Graph<T>::cosine_rows(int a, int b) {
  check2d(a, "cosine_rows");
  check2d(b, "cosine_rows");
  if (!value(a).same_shape(value(b))) throw std::invalid_argument("cosine_rows: shape mismatch");
  const int64_t R = value(a).dim(0), D = value(a).dim(1);
  Tn out({R});
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(3 * R));  // na, nb, dot
  {
    const T* ap = value(a).ptr();
    const T* bp = value(b).ptr();
    T* op = out.ptr();
    parallel_for(0, R, [&](int64_t r) {
      const T* ar = ap + r * D;
      const T* br = bp + r * D;
      double sa = 0, sb = 0, s = 0;
      for (int64_t d = 0; d < D; ++d) {
        sa += static_cast<double>(ar[d]) * ar[d];
        sb += static_cast<double>(br[d]) * br[d];
        s += static_cast<double>(ar[d]) * br[d];
      }
      const double na = std::sqrt(sa), nb = std::sqrt(sb);
      (*norms)[static_cast<size_t>(3 * r)] = na;
      (*norms)[static_cast<size_t>(3 * r + 1)] = nb;
      (*norms)[static_cast<size_t>(3 * r + 2)] = s;
      op[r] = static_cast<T>(s / ((na + kCosEps) * (nb + kCosEps)));
    });
  }
  const bool ng = requires_grad(a) || requires_grad(b);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng, [this, out_id, a, b, norms, R, D]() {
    const T* g = grad_buf(out_id).ptr();
    const T* ap = value(a).ptr();
    const T* bp = value(b).ptr();
    const bool wa = node(a).needs_grad, wb = node(b).needs_grad;
    T* da = wa ? grad_buf(a).ptr() : nullptr;
    T* db = wb ? grad_buf(b).ptr() : nullptr;
    parallel_for(0, R, [&](int64_t r) {
      const double na = (*norms)[static_cast<size_t>(3 * r)];
      const double nb = (*norms)[static_cast<size_t>(3 * r + 1)];
      const double s = (*norms)[static_cast<size_t>(3 * r + 2)];
      const double denom = (na + kCosEps) * (nb + kCosEps);
      const double gr = g[r];
      const T* ar = ap + r * D;
      const T* br = bp + r * D;
      if (wa) {
        const double c2 = na > 0 ? s / (na * (na + kCosEps) * denom) : 0;
        T* dar = da + r * D;
        for (int64_t d = 0; d < D; ++d)
          dar[d] += static_cast<T>(gr * (br[d] / denom - c2 * ar[d]));
      }
      if (wb) {
        const double c2 = nb > 0 ? s / (nb * (nb + kCosEps) * denom) : 0;
        T* dbr = db + r * D;
        for (int64_t d = 0; d < D; ++d)
          dbr[d] += static_cast<T>(gr * (ar[d] / denom - c2 * br[d]));
      }
    });
  });
}

template <typename T>
int Graph<T>::mean_all(int x) {
  const int64_t n = value(x).numel();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += value(x)[i];
  Tn out({1});
  out[0] = static_cast<T>(acc / static_cast<double>(n));
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), requires_grad(x), [this, out_id, x, n]() {
    if (!node(x).needs_grad) return;
    const T g = static_cast<T>(grad_buf(out_id)[0] / static_cast<double>(n));
    T* dx = grad_buf(x).ptr();
    for (int64_t i = 0; i < n; ++i) dx[i] += g;
  });
}

template <typename T>
int Graph<T>::weighted_sum(std::vector<int> xs, std::vector<double> ws) {
  if (xs.empty() || xs.size() != ws.size())
    throw std::invalid_argument("weighted_sum: ids and weights must match and be non-empty");
  double acc = 0;
  bool ng = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (value(xs[i]).numel() != 1) throw std::invalid_argument("weighted_sum: scalar inputs only");
    acc += ws[i] * static_cast<double>(value(xs[i])[0]);
    ng = ng || requires_grad(xs[i]);
  }
  Tn out({1});
  out[0] = static_cast<T>(acc);
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out), ng,
              [this, out_id, xs = std::move(xs), ws = std::move(ws)]() {
                const T g = grad_buf(out_id)[0];
                for (size_t i = 0; i < xs.size(); ++i)
                  if (node(xs[i]).needs_grad)
                    grad_buf(xs[i])[0] += static_cast<T>(ws[i] * g);
              });
}

template class Graph<float>;
template class Graph<double>;

}  // namespace gtsa
