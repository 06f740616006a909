#include "vesselseg/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vesselseg/parallel.hpp"

namespace vesselseg {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw ParameterError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

Index out_extent(Index in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Unfolds output slabs z in [z0, z1) of one sample (Cin, D, H, W) into a
// (Cin*k^3) x ((z1-z0)*OH*OW) row-major matrix.
template <typename S>
void im2col(const S* x, Index cin, Index d, Index h, Index w, int k, int stride, int pad, Index z0, Index z1,
            Index oh, Index ow, S* cols) {
  const Index p = (z1 - z0) * oh * ow;
  for (Index ci = 0; ci < cin; ++ci) {
    const S* xc = x + ci * d * h * w;
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          S* dst = cols + (((ci * k + kd) * k + kh) * k + kw) * p;
          for (Index z = z0; z < z1; ++z) {
            const Index iz = z * stride - pad + kd;
            if (iz < 0 || iz >= d) {
              std::fill(dst, dst + oh * ow, S(0));
              dst += oh * ow;
              continue;
            }
            for (Index y = 0; y < oh; ++y) {
              const Index iy = y * stride - pad + kh;
              if (iy < 0 || iy >= h) {
                std::fill(dst, dst + ow, S(0));
                dst += ow;
                continue;
              }
              const S* row = xc + (iz * h + iy) * w;
              if (stride == 1) {
                const Index lo = std::clamp<Index>(pad - kw, 0, ow);
                const Index hi = std::clamp<Index>(w + pad - kw, lo, ow);
                std::fill(dst, dst + lo, S(0));
                std::memcpy(dst + lo, row + lo - pad + kw, static_cast<size_t>(hi - lo) * sizeof(S));
                std::fill(dst + hi, dst + ow, S(0));
              } else {
                for (Index xo = 0; xo < ow; ++xo) {
                  const Index ix = xo * stride - pad + kw;
                  dst[xo] = (ix >= 0 && ix < w) ? row[ix] : S(0);
                }
              }
              dst += ow;
            }
          }
        }
  }
}

// Adjoint of im2col: scatter-adds columns back into the sample gradient.
template <typename S>
void col2im(const S* cols, Index cin, Index d, Index h, Index w, int k, int stride, int pad, Index z0, Index z1,
            Index oh, Index ow, S* dx) {
  const Index p = (z1 - z0) * oh * ow;
  for (Index ci = 0; ci < cin; ++ci) {
    S* xc = dx + ci * d * h * w;
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          const S* src = cols + (((ci * k + kd) * k + kh) * k + kw) * p;
          for (Index z = z0; z < z1; ++z) {
            const Index iz = z * stride - pad + kd;
            if (iz < 0 || iz >= d) {
              src += oh * ow;
              continue;
            }
            for (Index y = 0; y < oh; ++y) {
              const Index iy = y * stride - pad + kh;
              if (iy < 0 || iy >= h) {
                src += ow;
                continue;
              }
              S* row = xc + (iz * h + iy) * w;
              if (stride == 1) {
                const Index lo = std::clamp<Index>(pad - kw, 0, ow);
                const Index hi = std::clamp<Index>(w + pad - kw, lo, ow);
                S* out = row - pad + kw;
                for (Index xo = lo; xo < hi; ++xo) out[xo] += src[xo];
              } else {
                for (Index xo = 0; xo < ow; ++xo) {
                  const Index ix = xo * stride - pad + kw;
                  if (ix >= 0 && ix < w) row[ix] += src[xo];
                }
              }
              src += ow;
            }
          }
        }
  }
}

// Output z-slabs per im2col block, sized so one block of columns stays cache resident.
Index slab_rows(Index kk, Index oh, Index ow, std::size_t scalar_bytes) {
  const Index budget = Index{1} << 20;
  const Index per_slab = kk * oh * ow * static_cast<Index>(scalar_bytes);
  return std::max<Index>(1, budget / std::max<Index>(per_slab, 1));
}

}  // namespace

// ------------------------------------------------------------------ conv3d

template <typename S>
Tensor<S> conv3d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride,
                 int padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (stride < 1 || padding < 0) throw ParameterError("conv3d: stride must be >= 1 and padding >= 0");
  if (ws.d() != ws.h() || ws.h() != ws.w() || ws.d() < 1)
    throw ParameterError("conv3d: kernel must be cubic, got " + ws.str());
  if (ws.c() != xs.c())
    throw ParameterError("conv3d: input channels (axis 1) " + std::to_string(xs.c()) + " != weight Cin (axis 1) " +
                         std::to_string(ws.c()));
  const int k = static_cast<int>(ws.d());
  const Index cout = ws.n(), cin = ws.c();
  if (b.defined() && b.numel() != cout)
    throw ParameterError("conv3d: bias length " + std::to_string(b.numel()) + " != Cout " + std::to_string(cout));
  const Index od = out_extent(xs.d(), k, stride, padding);
  const Index oh = out_extent(xs.h(), k, stride, padding);
  const Index ow = out_extent(xs.w(), k, stride, padding);
  if (od < 1 || oh < 1 || ow < 1)
    throw ParameterError("conv3d: kernel larger than padded input (D,H,W axes) " + xs.str());

  const Index n = xs.n(), kk = cin * k * k * k, p = od * oh * ow;
  const Index in_sample = cin * xs.spatial();
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);
  Tensor<S> y(Shape(n, cout, od, oh, ow));
  ConstMapMat<S> wm(w.data(), cout, kk);

  parallel_for(n, [&](Index s) {
    const S* xin = x.data() + s * in_sample;
    MapMat<S> ym(y.data() + s * cout * p, cout, p);
    if (pointwise) {
      ym.noalias() = wm * ConstMapMat<S>(xin, cin, p);
    } else {
      const Index slab = slab_rows(kk, oh, ow, sizeof(S)), plane = oh * ow;
      RowMat<S> cols(kk, std::min(slab, od) * plane);
      for (Index z0 = 0; z0 < od; z0 += slab) {
        const Index z1 = std::min(od, z0 + slab), bp = (z1 - z0) * plane;
        im2col(xin, cin, xs.d(), xs.h(), xs.w(), k, stride, padding, z0, z1, oh, ow, cols.data());
        ym.middleCols(z0 * plane, bp).noalias() = wm * ConstMapMat<S>(cols.data(), kk, bp);
      }
    }
    if (b.defined())
      for (Index c = 0; c < cout; ++c) ym.row(c).array() += b.value()[c];
  });

  if (tape.tracks({&x, &w, &b})) {
    y.set_requires_grad(true);
    tape.record("conv3d", [=]() mutable {
      const auto& gy = y.grad();
      const bool need_x = x.requires_grad(), need_w = w.requires_grad(), need_b = b.defined() && b.requires_grad();
      std::vector<RowMat<S>> gw_parts(static_cast<size_t>(n));
      std::vector<Eigen::Array<S, Eigen::Dynamic, 1>> gb_parts(static_cast<size_t>(n));
      ConstMapMat<S> wmat(w.data(), cout, kk);
      auto& gx_all = need_x ? x.grad() : y.grad();  // placeholder when unused
      parallel_for(n, [&](Index s) {
        ConstMapMat<S> gym(gy.data() + s * cout * p, cout, p);
        const S* xin = x.data() + s * in_sample;
        if (need_b) gb_parts[static_cast<size_t>(s)] = gym.rowwise().sum().array();
        if (pointwise) {
          ConstMapMat<S> xm(xin, cin, p);
          if (need_w) gw_parts[static_cast<size_t>(s)].noalias() = gym * xm.transpose();
          if (need_x) MapMat<S>(gx_all.data() + s * in_sample, cin, p).noalias() += wmat.transpose() * gym;
          return;
        }
        const Index slab = slab_rows(kk, oh, ow, sizeof(S)), plane = oh * ow;
        RowMat<S> cols(kk, std::min(slab, od) * plane);
        if (need_w) gw_parts[static_cast<size_t>(s)] = RowMat<S>::Zero(cout, kk);
        for (Index z0 = 0; z0 < od; z0 += slab) {
          const Index z1 = std::min(od, z0 + slab), bp = (z1 - z0) * plane;
          MapMat<S> cb(cols.data(), kk, bp);
          const auto gyb = gym.middleCols(z0 * plane, bp);
          if (need_w) {
            im2col(xin, cin, xs.d(), xs.h(), xs.w(), k, stride, padding, z0, z1, oh, ow, cols.data());
            gw_parts[static_cast<size_t>(s)].noalias() += gyb * cb.transpose();
          }
          if (need_x) {
            cb.noalias() = wmat.transpose() * gyb;
            col2im(cols.data(), cin, xs.d(), xs.h(), xs.w(), k, stride, padding, z0, z1, oh, ow,
                   gx_all.data() + s * in_sample);
          }
        }
      });
      // Reduce per-sample contributions in sample order so the result is
      // independent of the worker count.
      if (need_w) {
        MapMat<S> gw(w.grad().data(), cout, kk);
        for (const auto& part : gw_parts) gw += part;
      }
      if (need_b) {
        auto& gb = b.grad();
        for (const auto& part : gb_parts) gb += part;
      }
    });
  }
  return y;
}

// ------------------------------------------------------- conv3d_transpose

template <typename S>
Tensor<S> conv3d_transpose(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w, int stride) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.d() != ws.h() || ws.h() != ws.w()) throw ParameterError("conv3d_transpose: kernel must be cubic");
  if (ws.d() != stride)
    throw ParameterError("conv3d_transpose: only kernel == stride is supported, got k=" + std::to_string(ws.d()) +
                         " stride=" + std::to_string(stride));
  if (ws.n() != xs.c())
    throw ParameterError("conv3d_transpose: input channels (axis 1) " + std::to_string(xs.c()) +
                         " != weight Cin (axis 0) " + std::to_string(ws.n()));
  const int k = stride;
  const Index n = xs.n(), cin = ws.n(), cout = ws.c(), k3 = k * k * k;
  const Index d = xs.d(), h = xs.h(), wd = xs.w(), p = xs.spatial();
  const Index od = d * k, oh = h * k, ow = wd * k;
  Tensor<S> y(Shape(n, cout, od, oh, ow));
  ConstMapMat<S> wm(w.data(), cin, cout * k3);

  auto scatter = [=](const S* z, S* out) {
    for (Index co = 0; co < cout; ++co)
      for (int a = 0; a < k; ++a)
        for (int bb = 0; bb < k; ++bb)
          for (int c = 0; c < k; ++c) {
            const S* src = z + (((co * k + a) * k + bb) * k + c) * p;
            S* oc = out + co * od * oh * ow;
            for (Index zz = 0; zz < d; ++zz)
              for (Index yy = 0; yy < h; ++yy) {
                S* orow = oc + ((zz * k + a) * oh + yy * k + bb) * ow + c;
                const S* srow = src + (zz * h + yy) * wd;
                for (Index xx = 0; xx < wd; ++xx) orow[xx * k] = srow[xx];
              }
          }
  };
  auto gather = [=](const S* g, S* z) {
    for (Index co = 0; co < cout; ++co)
      for (int a = 0; a < k; ++a)
        for (int bb = 0; bb < k; ++bb)
          for (int c = 0; c < k; ++c) {
            S* dst = z + (((co * k + a) * k + bb) * k + c) * p;
            const S* gc = g + co * od * oh * ow;
            for (Index zz = 0; zz < d; ++zz)
              for (Index yy = 0; yy < h; ++yy) {
                const S* grow = gc + ((zz * k + a) * oh + yy * k + bb) * ow + c;
                S* drow = dst + (zz * h + yy) * wd;
                for (Index xx = 0; xx < wd; ++xx) drow[xx] = grow[xx * k];
              }
          }
  };

  parallel_for(n, [&](Index s) {
    RowMat<S> z(cout * k3, p);
    z.noalias() = wm.transpose() * ConstMapMat<S>(x.data() + s * cin * p, cin, p);
    scatter(z.data(), y.data() + s * cout * od * oh * ow);
  });

  if (tape.tracks({&x, &w})) {
    y.set_requires_grad(true);
    tape.record("conv3d_transpose", [=]() mutable {
      const bool need_x = x.requires_grad(), need_w = w.requires_grad();
      ConstMapMat<S> wmat(w.data(), cin, cout * k3);
      std::vector<RowMat<S>> gw_parts(static_cast<size_t>(n));
      auto& gx_all = need_x ? x.grad() : y.grad();
      parallel_for(n, [&](Index s) {
        RowMat<S> gz(cout * k3, p);
        gather(y.grad().data() + s * cout * od * oh * ow, gz.data());
        ConstMapMat<S> xm(x.data() + s * cin * p, cin, p);
        if (need_x) MapMat<S>(gx_all.data() + s * cin * p, cin, p).noalias() += wmat * gz;
        if (need_w) gw_parts[static_cast<size_t>(s)].noalias() = xm * gz.transpose();
      });
      if (need_w) {
        MapMat<S> gw(w.grad().data(), cin, cout * k3);
        for (const auto& part : gw_parts) gw += part;
      }
    });
  }
  return y;
}

// ----------------------------------------------------------- instance_norm

template <typename S>
Tensor<S> instance_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  const Shape& xs = x.shape();
  const Index n = xs.n(), c = xs.c(), m = xs.spatial();
  if (gamma.numel() != c || beta.numel() != c)
    throw ParameterError("instance_norm: gamma/beta length must equal channel count (axis 1) " + std::to_string(c));
  Tensor<S> y(xs);
  Tensor<S> xhat(xs);
  Eigen::Array<S, Eigen::Dynamic, 1> inv_std(n * c);
  for (Index s = 0; s < n; ++s)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (s * c + ch) * m;
      auto xv = x.value().segment(off, m);
      const double mean = xv.template cast<double>().mean();
      const double var = (xv.template cast<double>() - mean).square().mean();
      const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_std[s * c + ch] = static_cast<S>(is);
      xhat.value().segment(off, m) = ((xv.template cast<double>() - mean) * is).template cast<S>();
      y.value().segment(off, m) = gamma.value()[ch] * xhat.value().segment(off, m) + beta.value()[ch];
    }

  if (tape.tracks({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    tape.record("instance_norm", [=]() mutable {
      const auto& gy = y.grad();
      for (Index s = 0; s < n; ++s)
        for (Index ch = 0; ch < c; ++ch) {
          const Index off = (s * c + ch) * m;
          const auto g = gy.segment(off, m).template cast<double>();
          const auto xh = xhat.value().segment(off, m).template cast<double>();
          const double sum_g = g.sum();
          const double sum_gx = (g * xh).sum();
          if (gamma.requires_grad()) gamma.grad()[ch] += static_cast<S>(sum_gx);
          if (beta.requires_grad()) beta.grad()[ch] += static_cast<S>(sum_g);
          if (x.requires_grad()) {
            const double scale = static_cast<double>(gamma.value()[ch]) * static_cast<double>(inv_std[s * c + ch]);
            const double md = static_cast<double>(m);
            x.grad().segment(off, m) +=
                (scale * (g - sum_g / md - xh * (sum_gx / md))).template cast<S>();
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------- elementwise

template <typename S>
Tensor<S> leaky_relu(Tape<S>& tape, const Tensor<S>& x, S slope) {
  Tensor<S> y(x.shape());
  const Index n = x.numel();
  {
    const S* xv = x.data();
    S* yv = y.data();
    for (Index i = 0; i < n; ++i) yv[i] = xv[i] >= S(0) ? xv[i] : slope * xv[i];
  }
  if (tape.tracks({&x})) {
    y.set_requires_grad(true);
    tape.record("leaky_relu", [=]() mutable {
      const S* xv = x.data();
      const S* gy = y.grad().data();
      S* gx = x.grad().data();
      for (Index i = 0; i < n; ++i) gx[i] += xv[i] >= S(0) ? gy[i] : slope * gy[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& x) {
  typename Tensor<S>::Array v(x.numel());
  for (Index i = 0; i < x.numel(); ++i) {
    const S a = x.value()[i];
    if (a >= 0) {
      v[i] = S(1) / (S(1) + std::exp(-a));
    } else {
      const S e = std::exp(a);
      v[i] = e / (S(1) + e);
    }
  }
  Tensor<S> y(x.shape(), std::move(v));
  if (tape.tracks({&x})) {
    y.set_requires_grad(true);
    tape.record("sigmoid", [=]() mutable { x.grad() += y.grad() * y.value() * (S(1) - y.value()); });
  }
  return y;
}

template <typename S>
Tensor<S> concat_channels(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.n() != bs.n() || as.d() != bs.d() || as.h() != bs.h() || as.w() != bs.w())
    throw ParameterError("concat_channels: non-channel axes differ " + as.str() + " vs " + bs.str());
  const Index n = as.n(), ca = as.c() * as.spatial(), cb = bs.c() * bs.spatial();
  Tensor<S> y(Shape(n, as.c() + bs.c(), as.d(), as.h(), as.w()));
  for (Index s = 0; s < n; ++s) {
    y.value().segment(s * (ca + cb), ca) = a.value().segment(s * ca, ca);
    y.value().segment(s * (ca + cb) + ca, cb) = b.value().segment(s * cb, cb);
  }
  if (tape.tracks({&a, &b})) {
    y.set_requires_grad(true);
    tape.record("concat_channels", [=]() mutable {
      for (Index s = 0; s < n; ++s) {
        if (a.requires_grad()) a.grad().segment(s * ca, ca) += y.grad().segment(s * (ca + cb), ca);
        if (b.requires_grad()) b.grad().segment(s * cb, cb) += y.grad().segment(s * (ca + cb) + ca, cb);
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a, b);
  Tensor<S> y(a.shape(), a.value() + b.value());
  if (tape.tracks({&a, &b})) {
    y.set_requires_grad(true);
    tape.record("add", [=]() mutable {
      if (a.requires_grad()) a.grad() += y.grad();
      if (b.requires_grad()) b.grad() += y.grad();
    });
  }
  return y;
}

template <typename S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a, b);
  Tensor<S> y(a.shape(), a.value() - b.value());
  if (tape.tracks({&a, &b})) {
    y.set_requires_grad(true);
    tape.record("sub", [=]() mutable {
      if (a.requires_grad()) a.grad() += y.grad();
      if (b.requires_grad()) b.grad() -= y.grad();
    });
  }
  return y;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a, b);
  Tensor<S> y(a.shape(), a.value() * b.value());
  if (tape.tracks({&a, &b})) {
    y.set_requires_grad(true);
    tape.record("mul", [=]() mutable {
      if (a.requires_grad()) a.grad() += y.grad() * b.value();
      if (b.requires_grad()) b.grad() += y.grad() * a.value();
    });
  }
  return y;
}

template <typename S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(x.value().template cast<double>().sum()));
  if (tape.tracks({&x})) {
    y.set_requires_grad(true);
    tape.record("sum", [=]() mutable { x.grad() += y.grad()[0]; });
  }
  return y;
}

template <typename S>
Tensor<S> linear_combination(Tape<S>& tape, const std::vector<std::pair<S, Tensor<S>>>& terms) {
  if (terms.empty()) throw ParameterError("linear_combination: no terms");
  typename Tensor<S>::Array acc = Tensor<S>::Array::Zero(terms.front().second.numel());
  bool track = false;
  for (const auto& [wgt, t] : terms) {
    require_same_shape("linear_combination", terms.front().second, t);
    acc += wgt * t.value();
    track = track || tape.tracks({&t});
  }
  Tensor<S> y(terms.front().second.shape(), std::move(acc));
  if (track) {
    y.set_requires_grad(true);
    tape.record("linear_combination", [=]() mutable {
      for (auto [wgt, t] : terms)
        if (t.requires_grad()) t.grad() += wgt * y.grad();
    });
  }
  return y;
}

// ---------------------------------------------------------------- pooling

namespace {

// Replace (ov, oa) by (cv, ca) wherever the candidate is strictly better.
template <typename S, typename Better>
inline void merge_row(S* ov, std::int32_t* oa, const S* cv, const std::int32_t* ca, Index n, Better better) {
  for (Index i = 0; i < n; ++i) {
    const bool t = better(cv[i], ov[i]);
    ov[i] = t ? cv[i] : ov[i];
    oa[i] = t ? ca[i] : oa[i];
  }
}

// Separable 3x3x3 extremum filter tracking the winning element's index within
// each (n, c) slice. Passes run W, then H, then D with candidates visited in
// ascending coordinate order and replaced only on strict improvement, which
// selects the lexicographically smallest (d, h, w), i.e. lowest linear index.
template <typename S, typename Better>
void extremum_filter(const S* x, Index d, Index h, Index w, S* out, std::int32_t* arg, Better better) {
  const Index m = d * h * w, plane = h * w;
  thread_local std::vector<S> v1, v2;
  thread_local std::vector<std::int32_t> a1, a2;
  v1.resize(static_cast<size_t>(m));
  v2.resize(static_cast<size_t>(m));
  a1.resize(static_cast<size_t>(m));
  a2.resize(static_cast<size_t>(m));
  for (Index row = 0; row < m; row += w) {
    S* ov = v1.data() + row;
    std::int32_t* oa = a1.data() + row;
    for (Index xx = 0; xx < w; ++xx) {
      const Index c = std::max<Index>(xx - 1, 0);
      ov[xx] = x[row + c];
      oa[xx] = static_cast<std::int32_t>(row + c);
    }
    for (int shift = 0; shift <= 1; ++shift)
      for (Index xx = 1 - shift; xx < w - shift; ++xx) {
        const S cv = x[row + xx + shift];
        const bool t = better(cv, ov[xx]);
        ov[xx] = t ? cv : ov[xx];
        oa[xx] = t ? static_cast<std::int32_t>(row + xx + shift) : oa[xx];
      }
  }
  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y) {
      const Index o = z * plane + y * w, c0 = z * plane + std::max<Index>(y - 1, 0) * w;
      std::copy_n(v1.data() + c0, w, v2.data() + o);
      std::copy_n(a1.data() + c0, w, a2.data() + o);
      if (y >= 1) merge_row(v2.data() + o, a2.data() + o, v1.data() + o, a1.data() + o, w, better);
      if (y + 1 < h) merge_row(v2.data() + o, a2.data() + o, v1.data() + o + w, a1.data() + o + w, w, better);
    }
  for (Index z = 0; z < d; ++z) {
    const Index o = z * plane, c0 = std::max<Index>(z - 1, 0) * plane;
    std::copy_n(v2.data() + c0, plane, out + o);
    std::copy_n(a2.data() + c0, plane, arg + o);
    if (z >= 1) merge_row(out + o, arg + o, v2.data() + o, a2.data() + o, plane, better);
    if (z + 1 < d) merge_row(out + o, arg + o, v2.data() + o + plane, a2.data() + o + plane, plane, better);
  }
}

template <typename S, typename Better>
Tensor<S> pool3(Tape<S>& tape, const Tensor<S>& x, Better better, const char* name) {
  const Shape& xs = x.shape();
  const Index slices = xs.n() * xs.c(), m = xs.spatial();
  Tensor<S> y(xs);
  auto arg = std::make_shared<std::vector<std::int32_t>>(static_cast<size_t>(x.numel()));
  parallel_for(slices, [&](Index s) {
    extremum_filter(x.data() + s * m, xs.d(), xs.h(), xs.w(), y.data() + s * m, arg->data() + s * m, better);
  });
  if (tape.tracks({&x})) {
    y.set_requires_grad(true);
    tape.record(name, [=]() mutable {
      auto& gx = x.grad();
      const auto& gy = y.grad();
      parallel_for(slices, [&](Index s) {
        S* g = gx.data() + s * m;
        const S* src = gy.data() + s * m;
        const std::int32_t* a = arg->data() + s * m;
        for (Index i = 0; i < m; ++i) g[a[i]] += src[i];
      });
    });
  }
  return y;
}

}  // namespace

template <typename S>
Tensor<S> maxpool3(Tape<S>& tape, const Tensor<S>& x) {
  return pool3(tape, x, [](S a, S b) { return a > b; }, "maxpool3");
}

template <typename S>
Tensor<S> minpool3(Tape<S>& tape, const Tensor<S>& x) {
  return pool3(tape, x, [](S a, S b) { return a < b; }, "minpool3");
}

// ------------------------------------------------------------ loss terms

template <typename S>
Tensor<S> binary_cross_entropy(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target) {
  require_same_shape("binary_cross_entropy", pred, target);
  const double lo = kProbClamp, hi = 1.0 - kProbClamp;
  const Index n = pred.numel();
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(pred.value()[i]), lo, hi);
    const double t = static_cast<double>(target.value()[i]);
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  if (tape.tracks({&pred, &target})) {
    y.set_requires_grad(true);
    tape.record("binary_cross_entropy", [=]() mutable {
      const double g = static_cast<double>(y.grad()[0]) / static_cast<double>(n);
      for (Index i = 0; i < n; ++i) {
        const double raw = static_cast<double>(pred.value()[i]);
        const double p = std::clamp(raw, lo, hi);
        const double t = static_cast<double>(target.value()[i]);
        if (pred.requires_grad() && raw > lo && raw < hi)
          pred.grad()[i] += static_cast<S>(g * (-t / p + (1.0 - t) / (1.0 - p)));
        if (target.requires_grad()) target.grad()[i] += static_cast<S>(g * (std::log(1.0 - p) - std::log(p)));
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> soft_dice(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, S eps) {
  require_same_shape("soft_dice", pred, target);
  const auto p = pred.value().template cast<double>();
  const auto t = target.value().template cast<double>();
  const double inter = (p * t).sum();
  const double denom = p.sum() + t.sum() + static_cast<double>(eps);
  const double numer = 2.0 * inter + static_cast<double>(eps);
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(-numer / denom));
  if (tape.tracks({&pred, &target})) {
    y.set_requires_grad(true);
    tape.record("soft_dice", [=]() mutable {
      const double g = static_cast<double>(y.grad()[0]);
      const double d2 = denom * denom;
      if (pred.requires_grad())
        pred.grad() += (g * -(2.0 * target.value().template cast<double>() * denom - numer) / d2).template cast<S>();
      if (target.requires_grad())
        target.grad() += (g * -(2.0 * pred.value().template cast<double>() * denom - numer) / d2).template cast<S>();
    });
  }
  return y;
}

template <typename S>
Tensor<S> cldice_from_skeletons(Tape<S>& tape, const Tensor<S>& skel_pred, const Tensor<S>& pred,
                                const Tensor<S>& skel_target, const Tensor<S>& target, S eps) {
  require_same_shape("cldice", skel_pred, pred);
  require_same_shape("cldice", skel_target, target);
  require_same_shape("cldice", pred, target);
  const double e = static_cast<double>(eps);
  const double sp_sum = skel_pred.value().template cast<double>().sum() + e;
  const double st_sum = skel_target.value().template cast<double>().sum() + e;
  const double tprec =
      ((skel_pred.value().template cast<double>() * target.value().template cast<double>()).sum() + e) / sp_sum;
  const double tsens =
      ((skel_target.value().template cast<double>() * pred.value().template cast<double>()).sum() + e) / st_sum;
  const double hm = tprec + tsens;
  Tensor<S> y = Tensor<S>::scalar(static_cast<S>(-2.0 * tprec * tsens / hm));
  if (tape.tracks({&skel_pred, &pred, &skel_target, &target})) {
    y.set_requires_grad(true);
    tape.record("cldice", [=]() mutable {
      const double g = static_cast<double>(y.grad()[0]);
      const double d_prec = g * -2.0 * tsens * tsens / (hm * hm);
      const double d_sens = g * -2.0 * tprec * tprec / (hm * hm);
      if (skel_pred.requires_grad())
        skel_pred.grad() += (d_prec * (target.value().template cast<double>() - tprec) / sp_sum).template cast<S>();
      if (target.requires_grad())
        target.grad() += (d_prec * skel_pred.value().template cast<double>() / sp_sum).template cast<S>();
      if (pred.requires_grad())
        pred.grad() += (d_sens * skel_target.value().template cast<double>() / st_sum).template cast<S>();
      if (skel_target.requires_grad())
        skel_target.grad() += (d_sens * (pred.value().template cast<double>() - tsens) / st_sum).template cast<S>();
    });
  }
  return y;
}

#define VESSELSEG_INSTANTIATE_OPS(S)                                                                        \
  template Tensor<S> conv3d(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int);      \
  template Tensor<S> conv3d_transpose(Tape<S>&, const Tensor<S>&, const Tensor<S>&, int);                   \
  template Tensor<S> instance_norm(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);      \
  template Tensor<S> leaky_relu(Tape<S>&, const Tensor<S>&, S);                                             \
  template Tensor<S> sigmoid(Tape<S>&, const Tensor<S>&);                                                   \
  template Tensor<S> concat_channels(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> maxpool3(Tape<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> minpool3(Tape<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> add(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> sub(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> mul(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> sum(Tape<S>&, const Tensor<S>&);                                                       \
  template Tensor<S> linear_combination(Tape<S>&, const std::vector<std::pair<S, Tensor<S>>>&);             \
  template Tensor<S> binary_cross_entropy(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                    \
  template Tensor<S> soft_dice(Tape<S>&, const Tensor<S>&, const Tensor<S>&, S);                            \
  template Tensor<S> cldice_from_skeletons(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                           const Tensor<S>&, S);

VESSELSEG_INSTANTIATE_OPS(float)
VESSELSEG_INSTANTIATE_OPS(double)

}  // namespace vesselseg
