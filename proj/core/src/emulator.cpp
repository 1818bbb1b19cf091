#include "swinscale/emulator.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "swinscale/util.hpp"

namespace swinscale {

// ---------------------------------------------------------------------------
// Config and parameter layout

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (in_channels < 1 || out_channels < 1) fail("channel counts must be >= 1");
  if (patch < 1) fail("patch must be >= 1");
  if (embed < 1 || head_dim < 1) fail("embed and head_dim must be >= 1");
  if (depth < 0) fail("depth must be >= 0");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (window_h < 1 || window_w < 1) fail("window extents must be >= 1");
  if (grid_h % patch != 0 || grid_w % patch != 0) fail("grid extents must be divisible by patch");
  if (tokens_h() % window_h != 0 || tokens_w() % window_w != 0) {
    fail("token grid must be divisible by the window size");
  }
  if (embed % head_dim != 0) fail("embed must be divisible by head_dim");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "swin:in=" << in_channels << ",out=" << out_channels << ",h=" << grid_h << ",w=" << grid_w
     << ",p=" << patch << ",e=" << embed << ",d=" << depth << ",win=" << window_h << "x"
     << window_w << ",hd=" << head_dim << ",mlp=" << mlp_ratio << ",pos=" << (pos_enc ? 1 : 0);
  return os.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a(canonical()); }

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout L;
  const int E = cfg.embed, p2 = cfg.patch * cfg.patch, hid = cfg.hidden();
  auto add = [&L](std::string name, std::vector<int> shape, ParamKind kind) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    ParamTensor t{std::move(name), std::move(shape), L.total, n, kind};
    L.total += n;
    L.tensors.push_back(t);
    return t.offset;
  };
  L.patch_w = add("patch_embed.weight", {E, p2 * cfg.in_channels}, ParamKind::weight);
  L.patch_b = add("patch_embed.bias", {E}, ParamKind::bias);
  if (cfg.pos_enc) {
    L.pos_w = add("pos_embed.weight", {E, p2 * 4}, ParamKind::weight);
    L.pos_b = add("pos_embed.bias", {E}, ParamKind::bias);
  }
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    BlockOffsets o{};
    o.norm1 = add(pre + "norm1.scale", {E}, ParamKind::norm_scale);
    o.qkv_w = add(pre + "attn.qkv.weight", {3 * E, E}, ParamKind::weight);
    o.qkv_b = add(pre + "attn.qkv.bias", {3 * E}, ParamKind::bias);
    o.q_scale = add(pre + "attn.q_norm.scale", {cfg.heads()}, ParamKind::norm_scale);
    o.k_scale = add(pre + "attn.k_norm.scale", {cfg.heads()}, ParamKind::norm_scale);
    o.proj_w = add(pre + "attn.proj.weight", {E, E}, ParamKind::weight);
    o.proj_b = add(pre + "attn.proj.bias", {E}, ParamKind::bias);
    o.norm2 = add(pre + "norm2.scale", {E}, ParamKind::norm_scale);
    o.fc1_w = add(pre + "mlp.fc1.weight", {hid, E}, ParamKind::weight);
    o.fc1_b = add(pre + "mlp.fc1.bias", {hid}, ParamKind::bias);
    o.fc2_w = add(pre + "mlp.fc2.weight", {E, hid}, ParamKind::weight);
    o.fc2_b = add(pre + "mlp.fc2.bias", {E}, ParamKind::bias);
    L.blocks.push_back(o);
  }
  L.head_w = add("head.weight", {p2 * cfg.out_channels, E}, ParamKind::weight);
  L.head_b = add("head.bias", {p2 * cfg.out_channels}, ParamKind::bias);
  return L;
}

std::vector<double> ParamLayout::decay_mask() const {
  std::vector<double> m(total, 0.0);
  for (const auto& t : tensors) {
    if (t.kind == ParamKind::weight) std::fill_n(m.begin() + t.offset, t.size, 1.0);
  }
  return m;
}

std::size_t param_count(const ModelConfig& cfg) { return ParamLayout::build(cfg).total; }

std::uint64_t ParamSet::fingerprint() const {
  Fnv1a h;
  h.update(values.data(), values.size() * sizeof(double));
  return h.digest() ^ config.hash();
}

ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamSet p;
  p.config = cfg;
  p.layout = ParamLayout::build(cfg);
  p.values.assign(p.layout.total, 0.0);
  std::mt19937_64 rng(splitmix64(seed ^ 0x5157494eULL));
  for (const auto& t : p.layout.tensors) {
    double* v = p.values.data() + t.offset;
    switch (t.kind) {
      case ParamKind::weight:
        for (std::size_t i = 0; i < t.size; ++i) {
          double z = standard_normal(rng);
          while (std::abs(z) > 2.0) z = standard_normal(rng);
          v[i] = 0.02 * z;
        }
        break;
      case ParamKind::bias:
        std::fill_n(v, t.size, 0.0);
        break;
      case ParamKind::norm_scale:
        std::fill_n(v, t.size, 1.0);
        break;
    }
  }
  return p;
}

namespace {

constexpr std::uint32_t kParamMagic = 0x504e5753;  // "SWNP"
constexpr std::uint32_t kParamVersion = 1;

void write_config(std::ostream& os, const ModelConfig& c) {
  for (int v : {c.in_channels, c.out_channels, c.grid_h, c.grid_w, c.patch, c.embed, c.depth,
                c.window_h, c.window_w, c.head_dim, c.mlp_ratio, c.pos_enc ? 1 : 0}) {
    binio::write<std::int32_t>(os, v);
  }
}

ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  int* fields[] = {&c.in_channels, &c.out_channels, &c.grid_h,   &c.grid_w,
                   &c.patch,       &c.embed,        &c.depth,    &c.window_h,
                   &c.window_w,    &c.head_dim,     &c.mlp_ratio};
  for (int* f : fields) *f = binio::read<std::int32_t>(is);
  c.pos_enc = binio::read<std::int32_t>(is) != 0;
  return c;
}

}  // namespace

void save_params(std::ostream& os, const ParamSet& p) {
  binio::write<std::uint32_t>(os, kParamMagic);
  binio::write<std::uint32_t>(os, kParamVersion);
  binio::write<std::uint64_t>(os, p.config.hash());
  write_config(os, p.config);
  binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(p.layout.tensors.size()));
  for (const auto& t : p.layout.tensors) {
    binio::write_string(os, t.name);
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) binio::write<std::int32_t>(os, d);
  }
  binio::write_doubles(os, p.values);
}

ParamSet load_params(std::istream& is) {
  if (binio::read<std::uint32_t>(is) != kParamMagic) throw Error("params: bad magic");
  if (binio::read<std::uint32_t>(is) != kParamVersion) throw Error("params: unsupported version");
  const auto hash = binio::read<std::uint64_t>(is);
  ParamSet p;
  p.config = read_config(is);
  if (p.config.hash() != hash) throw Error("params: config hash mismatch");
  p.layout = ParamLayout::build(p.config);
  const auto n = binio::read<std::uint32_t>(is);
  if (n != p.layout.tensors.size()) throw Error("params: tensor count mismatch");
  for (const auto& t : p.layout.tensors) {
    const auto name = binio::read_string(is);
    const auto nd = binio::read<std::uint32_t>(is);
    std::vector<int> shape(nd);
    for (auto& d : shape) d = binio::read<std::int32_t>(is);
    if (name != t.name || shape != t.shape) throw Error("params: tensor table mismatch at " + name);
  }
  p.values = binio::read_doubles(is);
  if (p.values.size() != p.layout.total) throw Error("params: payload size mismatch");
  return p;
}

// ---------------------------------------------------------------------------
// Positional inputs and masks

Field positional_inputs(const GridSpec& grid, double time_frac, int rows) {
  if (rows < 0) rows = grid.n_lat;
  Field f(4, rows, grid.n_lon);
  for (int h = 0; h < rows; ++h) {
    const double cl = std::cos(grid.latitudes[h]);
    const double sl = std::sin(grid.latitudes[h]);
    for (int w = 0; w < grid.n_lon; ++w) {
      f.at(0, h, w) = cl * std::cos(grid.longitudes[w]);
      f.at(1, h, w) = cl * std::sin(grid.longitudes[w]);
      f.at(2, h, w) = sl;
      f.at(3, h, w) = time_frac;
    }
  }
  return f;
}

long PartitionMask::forbidden_pairs() const {
  long n = 0;
  for (const auto& m : masks) n += std::count(m.begin(), m.end(), false);
  return n;
}

AttentionMaskSet build_masks(const ModelConfig& cfg) {
  cfg.validate();
  const int Ht = cfg.tokens_h(), Wt = cfg.tokens_w();
  const int wh = cfg.window_h, ww = cfg.window_w, M = cfg.window_tokens();
  auto make = [&](int shift_h) {
    PartitionMask pm;
    pm.windows_h = Ht / wh;
    pm.windows_w = Wt / ww;
    pm.window_tokens = M;
    for (int wi = 0; wi < pm.windows_h; ++wi) {
      for (int wj = 0; wj < pm.windows_w; ++wj) {
        std::vector<bool> m(static_cast<std::size_t>(M) * M, true);
        for (int a = 0; a < M; ++a) {
          for (int b = 0; b < M; ++b) {
            const int ra = wi * wh + a / ww, rb = wi * wh + b / ww;
            m[static_cast<std::size_t>(a) * M + b] =
                seam_label(ra, Ht, shift_h) == seam_label(rb, Ht, shift_h);
          }
        }
        pm.masks.push_back(std::move(m));
      }
    }
    return pm;
  };
  return {make(0), make(cfg.shift_h())};
}

// ---------------------------------------------------------------------------
// Rolling

void roll_tokens(Mat& x, int batch, int rows, int cols, int shift, int dim) {
  const int extent = dim == 0 ? rows : cols;
  const int s = ((shift % extent) + extent) % extent;
  if (s == 0) return;
  Mat out(x.rows(), x.cols());
  for (int b = 0; b < batch; ++b) {
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const int rr = dim == 0 ? (r + s) % rows : r;
        const int cc = dim == 1 ? (c + s) % cols : c;
        out.row((static_cast<long>(b) * rows + rr) * cols + cc) =
            x.row((static_cast<long>(b) * rows + r) * cols + c);
      }
    }
  }
  x = std::move(out);
}

void LocalRoller::roll(std::vector<Mat>& shards, int batch, int shift, int dim) {
  if (shards.size() != 1) throw Error("LocalRoller: expects exactly one shard");
  roll_tokens(shards[0], batch, rows_, cols_, shift, dim);
}

// ---------------------------------------------------------------------------
// Dense kernels

namespace {

thread_local std::uint64_t* g_flops = nullptr;

void count_flops(long m, long n, long k) {
  if (g_flops) *g_flops += 2ULL * static_cast<std::uint64_t>(m) * n * k;
}

using RowVecMap = Eigen::Map<const Eigen::RowVectorXd>;

Mat linear(const Mat& x, const double* w, const double* b, int out, int in) {
  ConstMatMap W(w, out, in);
  Mat y(x.rows(), out);
  y.noalias() = x * W.transpose();
  if (b) y.rowwise() += RowVecMap(b, out);
  count_flops(x.rows(), out, in);
  return y;
}

// dW += dy^T x, db += colsum(dy); returns dy W when want_dx.
Mat linear_backward(const Mat& x, const Mat& dy, const double* w, double* dw, double* db, int out,
                    int in, bool want_dx = true) {
  MatMap dW(dw, out, in);
  dW.noalias() += dy.transpose() * x;
  count_flops(out, in, x.rows());
  if (db) {
    // Plain loops here and below: Eigen reductions peel by buffer address,
    // which would make the summation order vary from run to run.
    for (long i = 0; i < dy.rows(); ++i) {
      const double* r = dy.row(i).data();
      for (int j = 0; j < out; ++j) db[j] += r[j];
    }
  }
  if (!want_dx) return {};
  Mat dx(dy.rows(), in);
  dx.noalias() = dy * ConstMatMap(w, out, in);
  count_flops(dy.rows(), in, out);
  return dx;
}

Mat rmsnorm(const Mat& x, const double* g, Vec& inv_rms) {
  const long n = x.rows();
  const int E = static_cast<int>(x.cols());
  inv_rms.resize(n);
  Mat y(n, E);
  RowVecMap gm(g, E);
  for (long i = 0; i < n; ++i) {
    const double* xi = x.row(i).data();
    double ss = 0.0;
    for (int j = 0; j < E; ++j) ss += xi[j] * xi[j];
    const double r = 1.0 / std::sqrt(ss / E + kRmsEps);
    inv_rms[i] = r;
    y.row(i) = (x.row(i) * r).cwiseProduct(gm);
  }
  return y;
}

Mat rmsnorm_backward(const Mat& x, const Vec& inv_rms, const double* g, const Mat& dy, double* dg) {
  const long n = x.rows();
  const int E = static_cast<int>(x.cols());
  RowVecMap gm(g, E);
  Eigen::Map<Eigen::RowVectorXd> dgm(dg, E);
  Mat dx(n, E);
  for (long i = 0; i < n; ++i) {
    const double r = inv_rms[i];
    const Eigen::RowVectorXd gdy = dy.row(i).cwiseProduct(gm);
    dgm += dy.row(i).cwiseProduct(x.row(i)) * r;
    const double* xi = x.row(i).data();
    double dotv = 0.0;
    for (int j = 0; j < E; ++j) dotv += gdy[j] * xi[j];
    dx.row(i) = gdy * r - x.row(i) * (r * r * r * dotv / E);
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
}

// state: batch x C x (rows*p) x (cols*p)  ->  (batch*rows*cols) x (C*p*p)
Mat patchify(const std::vector<double>& v, int batch, int C, int rows, int cols, int p) {
  const int hp = rows * p, wp = cols * p, p2 = p * p;
  if (v.size() != static_cast<std::size_t>(batch) * C * hp * wp) {
    throw ShapeError("patchify: input size does not match shard geometry");
  }
  Mat out(static_cast<long>(batch) * rows * cols, static_cast<long>(C) * p2);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* plane = v.data() + (static_cast<std::size_t>(b) * C + c) * hp * wp;
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          double* dst = out.row((static_cast<long>(b) * rows + i) * cols + j).data() + c * p2;
          for (int py = 0; py < p; ++py) {
            const double* src = plane + static_cast<std::size_t>(i * p + py) * wp + j * p;
            for (int px = 0; px < p; ++px) dst[py * p + px] = src[px];
          }
        }
      }
    }
  }
  return out;
}

std::vector<double> unpatchify(const Mat& t, int batch, int C, int rows, int cols, int p) {
  const int hp = rows * p, wp = cols * p, p2 = p * p;
  std::vector<double> v(static_cast<std::size_t>(batch) * C * hp * wp);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < C; ++c) {
      double* plane = v.data() + (static_cast<std::size_t>(b) * C + c) * hp * wp;
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          const double* src = t.row((static_cast<long>(b) * rows + i) * cols + j).data() + c * p2;
          for (int py = 0; py < p; ++py) {
            double* dst = plane + static_cast<std::size_t>(i * p + py) * wp + j * p;
            for (int px = 0; px < p; ++px) dst[px] = src[py * p + px];
          }
        }
      }
    }
  }
  return v;
}

struct WindowIter {
  int wh, ww, M;
  int nwh, nww;
  int rows, cols;
  // token index (within the shard) of position m of window (b, wi, wj)
  long token(int b, int wi, int wj, int m) const {
    const int r = wi * wh + m / ww;
    const int c = wj * ww + m % ww;
    return (static_cast<long>(b) * rows + r) * cols + c;
  }
};

WindowIter window_iter(const ModelConfig& cfg, const ShardGeometry& geo) {
  return {cfg.window_h, cfg.window_w,          cfg.window_tokens(), geo.rows / cfg.window_h,
          geo.cols / cfg.window_w, geo.rows, geo.cols};
}

// Fills qhat/khat/inv_q/inv_k/probs/attn of t from t.qkv.
void attention_forward(const ModelConfig& cfg, const ShardGeometry& geo, int batch, bool shifted,
                       const double* q_scale, const double* k_scale, BlockTape& t) {
  const int E = cfg.embed, d = cfg.head_dim, nh = cfg.heads();
  const long N = t.qkv.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  t.qhat.resize(N, E);
  t.khat.resize(N, E);
  t.inv_q.resize(N, nh);
  t.inv_k.resize(N, nh);
  for (long n = 0; n < N; ++n) {
    for (int h = 0; h < nh; ++h) {
      const double* q = t.qkv.row(n).data() + h * d;
      const double* k = t.qkv.row(n).data() + E + h * d;
      double sq = 0.0, sk = 0.0;
      for (int i = 0; i < d; ++i) sq += q[i] * q[i], sk += k[i] * k[i];
      const double rq = 1.0 / std::sqrt(sq / d + kRmsEps);
      const double rk = 1.0 / std::sqrt(sk / d + kRmsEps);
      t.inv_q(n, h) = rq;
      t.inv_k(n, h) = rk;
      for (int i = 0; i < d; ++i) {
        t.qhat(n, h * d + i) = q_scale[h] * rq * q[i];
        t.khat(n, h * d + i) = k_scale[h] * rk * k[i];
      }
    }
  }

  const auto wi_ = window_iter(cfg, geo);
  const int M = wi_.M;
  const int sh = shifted ? cfg.shift_h() : 0;
  t.probs.assign(static_cast<std::size_t>(batch) * wi_.nwh * wi_.nww * nh * M * M, 0.0);
  t.attn.setZero(N, E);
  std::vector<long> tok(M);
  std::vector<int> label(M);
  std::vector<double> logits(static_cast<std::size_t>(M) * M);
  std::size_t pofs = 0;
  for (int b = 0; b < batch; ++b) {
    for (int wi = 0; wi < wi_.nwh; ++wi) {
      for (int wj = 0; wj < wi_.nww; ++wj) {
        for (int m = 0; m < M; ++m) {
          tok[m] = wi_.token(b, wi, wj, m);
          label[m] = seam_label(geo.row0 + wi * wi_.wh + m / wi_.ww, geo.global_rows, sh);
        }
        for (int h = 0; h < nh; ++h, pofs += static_cast<std::size_t>(M) * M) {
          double* P = t.probs.data() + pofs;
          for (int a = 0; a < M; ++a) {
            const double* qa = t.qhat.row(tok[a]).data() + h * d;
            double mx = -INFINITY;
            for (int c = 0; c < M; ++c) {
              const double* kc = t.khat.row(tok[c]).data() + h * d;
              double s = 0.0;
              for (int i = 0; i < d; ++i) s += qa[i] * kc[i];
              s *= scale;
              if (label[a] != label[c]) s += kMaskedLogit;
              P[a * M + c] = s;
              mx = std::max(mx, s);
            }
            double z = 0.0;
            for (int c = 0; c < M; ++c) z += (P[a * M + c] = std::exp(P[a * M + c] - mx));
            for (int c = 0; c < M; ++c) P[a * M + c] /= z;
            double* o = t.attn.row(tok[a]).data() + h * d;
            for (int c = 0; c < M; ++c) {
              const double pc = P[a * M + c];
              const double* v = t.qkv.row(tok[c]).data() + 2 * E + h * d;
              for (int i = 0; i < d; ++i) o[i] += pc * v[i];
            }
          }
        }
      }
    }
  }
  count_flops(N, M, E);  // logits
  count_flops(N, M, E);  // probs @ v
}

// Given d(attn), returns d(qkv) and accumulates the q/k scale gradients.
Mat attention_backward(const ModelConfig& cfg, const ShardGeometry& geo, int batch,
                       const double* q_scale, const double* k_scale, const BlockTape& t,
                       const Mat& dattn, double* dq_scale, double* dk_scale) {
  const int E = cfg.embed, d = cfg.head_dim, nh = cfg.heads();
  const long N = t.qkv.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat dqhat = Mat::Zero(N, E), dkhat = Mat::Zero(N, E), dqkv = Mat::Zero(N, 3 * E);

  const auto wi_ = window_iter(cfg, geo);
  const int M = wi_.M;
  std::vector<long> tok(M);
  std::vector<double> dP(static_cast<std::size_t>(M) * M);
  std::size_t pofs = 0;
  for (int b = 0; b < batch; ++b) {
    for (int wi = 0; wi < wi_.nwh; ++wi) {
      for (int wj = 0; wj < wi_.nww; ++wj) {
        for (int m = 0; m < M; ++m) tok[m] = wi_.token(b, wi, wj, m);
        for (int h = 0; h < nh; ++h, pofs += static_cast<std::size_t>(M) * M) {
          const double* P = t.probs.data() + pofs;
          for (int a = 0; a < M; ++a) {
            const double* doa = dattn.row(tok[a]).data() + h * d;
            double rowdot = 0.0;
            for (int c = 0; c < M; ++c) {
              const double* v = t.qkv.row(tok[c]).data() + 2 * E + h * d;
              double s = 0.0;
              for (int i = 0; i < d; ++i) s += doa[i] * v[i];
              dP[a * M + c] = s;
              rowdot += s * P[a * M + c];
              double* dv = dqkv.row(tok[c]).data() + 2 * E + h * d;
              const double pc = P[a * M + c];
              for (int i = 0; i < d; ++i) dv[i] += pc * doa[i];
            }
            const double* qa = t.qhat.row(tok[a]).data() + h * d;
            double* dqa = dqhat.row(tok[a]).data() + h * d;
            for (int c = 0; c < M; ++c) {
              const double dl = P[a * M + c] * (dP[a * M + c] - rowdot) * scale;
              if (dl == 0.0) continue;
              const double* kc = t.khat.row(tok[c]).data() + h * d;
              double* dkc = dkhat.row(tok[c]).data() + h * d;
              for (int i = 0; i < d; ++i) {
                dqa[i] += dl * kc[i];
                dkc[i] += dl * qa[i];
              }
            }
          }
        }
      }
    }
  }
  count_flops(N, M, E);
  count_flops(N, M, E);

  // QK-norm backward
  for (long n = 0; n < N; ++n) {
    for (int h = 0; h < nh; ++h) {
      const double* q = t.qkv.row(n).data() + h * d;
      const double* k = t.qkv.row(n).data() + E + h * d;
      const double* dq_ = dqhat.row(n).data() + h * d;
      const double* dk_ = dkhat.row(n).data() + h * d;
      const double rq = t.inv_q(n, h), rk = t.inv_k(n, h);
      double dotq = 0.0, dotk = 0.0;
      for (int i = 0; i < d; ++i) dotq += dq_[i] * q[i], dotk += dk_[i] * k[i];
      dq_scale[h] += dotq * rq;
      dk_scale[h] += dotk * rk;
      double* dq = dqkv.row(n).data() + h * d;
      double* dk = dqkv.row(n).data() + E + h * d;
      const double sq = q_scale[h], sk = k_scale[h];
      for (int i = 0; i < d; ++i) {
        dq[i] = sq * (rq * dq_[i] - rq * rq * rq * q[i] * dotq / d);
        dk[i] = sk * (rk * dk_[i] - rk * rk * rk * k[i] * dotk / d);
      }
    }
  }
  return dqkv;
}

void check_geometry(const ModelConfig& cfg, std::span<const ShardGeometry> geos) {
  for (const auto& g : geos) {
    if (g.rows % cfg.window_h != 0 || g.cols % cfg.window_w != 0 ||
        g.row0 % cfg.window_h != 0 || g.col0 % cfg.window_w != 0) {
      throw ConfigError("shard geometry: attention windows would straddle shard boundaries");
    }
    if (g.global_rows != cfg.tokens_h() || g.global_cols != cfg.tokens_w()) {
      throw ConfigError("shard geometry: global token grid does not match the model config");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Sharded forward / backward

std::vector<std::vector<double>> forward_sharded(const ParamSet& params,
                                                 std::span<const ShardBatch> inputs,
                                                 std::span<const ShardGeometry> geos,
                                                 Roller& roller, ActivationTape& tape) {
  const ModelConfig& cfg = params.config;
  const ParamLayout& L = params.layout;
  const double* P = params.values.data();
  if (inputs.size() != geos.size() || inputs.empty()) {
    throw ShapeError("forward: one input per shard geometry required");
  }
  check_geometry(cfg, geos);
  const std::size_t S = inputs.size();
  const int B = inputs[0].batch;
  const int E = cfg.embed, p = cfg.patch, p2 = p * p, hid = cfg.hidden();

  tape = ActivationTape{};
  tape.batch = B;
  tape.config_hash = cfg.hash();
  tape.param_fingerprint = params.fingerprint();
  tape.shards.resize(S);

  std::vector<Mat> x(S), work(S);
  for (std::size_t s = 0; s < S; ++s) {
    if (inputs[s].batch != B) throw ShapeError("forward: shards disagree on batch size");
    auto& st = tape.shards[s];
    st.geo = geos[s];
    st.blocks.resize(cfg.depth);
    st.patches = patchify(inputs[s].state, B, cfg.in_channels, geos[s].rows, geos[s].cols, p);
    x[s] = linear(st.patches, P + L.patch_w, P + L.patch_b, E, p2 * cfg.in_channels);
    if (cfg.pos_enc) {
      st.pos_patches = patchify(inputs[s].pos, B, 4, geos[s].rows, geos[s].cols, p);
      x[s] += linear(st.pos_patches, P + L.pos_w, P + L.pos_b, E, p2 * 4);
    }
  }

  for (int blk = 0; blk < cfg.depth; ++blk) {
    const BlockOffsets& o = L.blocks[blk];
    const bool shifted = cfg.shifted(blk);
    for (std::size_t s = 0; s < S; ++s) {
      auto& t = tape.shards[s].blocks[blk];
      t.x_in = x[s];
      work[s] = rmsnorm(x[s], P + o.norm1, t.inv_rms1);
    }
    if (shifted) {
      roller.roll(work, B, -cfg.shift_h(), 0);
      roller.roll(work, B, -cfg.shift_w(), 1);
    }
    for (std::size_t s = 0; s < S; ++s) {
      auto& t = tape.shards[s].blocks[blk];
      t.xr = std::move(work[s]);
      t.qkv = linear(t.xr, P + o.qkv_w, P + o.qkv_b, 3 * E, E);
      attention_forward(cfg, geos[s], B, shifted, P + o.q_scale, P + o.k_scale, t);
      work[s] = linear(t.attn, P + o.proj_w, P + o.proj_b, E, E);
    }
    if (shifted) {
      roller.roll(work, B, cfg.shift_w(), 1);
      roller.roll(work, B, cfg.shift_h(), 0);
    }
    for (std::size_t s = 0; s < S; ++s) {
      auto& t = tape.shards[s].blocks[blk];
      t.y = t.x_in + work[s];
      t.yn = rmsnorm(t.y, P + o.norm2, t.inv_rms2);
      t.h1 = linear(t.yn, P + o.fc1_w, P + o.fc1_b, hid, E);
      t.g = t.h1.unaryExpr([](double v) { return gelu(v); });
      x[s] = t.y + linear(t.g, P + o.fc2_w, P + o.fc2_b, E, hid);
    }
  }

  std::vector<std::vector<double>> out(S);
  for (std::size_t s = 0; s < S; ++s) {
    tape.shards[s].x_final = x[s];
    const Mat tok = linear(x[s], P + L.head_w, P + L.head_b, p2 * cfg.out_channels, E);
    out[s] = unpatchify(tok, B, cfg.out_channels, geos[s].rows, geos[s].cols, p);
  }
  return out;
}

ShardGrads backward_sharded(const ActivationTape& tape, const ParamSet& params,
                            std::span<const std::vector<double>> grad_outputs, Roller& roller) {
  const ModelConfig& cfg = params.config;
  const ParamLayout& L = params.layout;
  const double* P = params.values.data();
  if (tape.config_hash != cfg.hash() || tape.param_fingerprint != params.fingerprint()) {
    throw Error("backward: stale activation tape (parameters changed since forward)");
  }
  const std::size_t S = tape.shards.size();
  if (grad_outputs.size() != S) throw ShapeError("backward: one grad_output per shard required");
  const int B = tape.batch;
  const int E = cfg.embed, p = cfg.patch, p2 = p * p, hid = cfg.hidden();

  ShardGrads g;
  g.params.assign(S, std::vector<double>(L.total, 0.0));
  g.inputs.resize(S);
  std::vector<Mat> dx(S), dres(S), work(S);

  for (std::size_t s = 0; s < S; ++s) {
    const auto& st = tape.shards[s];
    double* G = g.params[s].data();
    const Mat dtok =
        patchify(grad_outputs[s], B, cfg.out_channels, st.geo.rows, st.geo.cols, p);
    dx[s] = linear_backward(st.x_final, dtok, P + L.head_w, G + L.head_w, G + L.head_b,
                            p2 * cfg.out_channels, E);
  }

  for (int blk = cfg.depth - 1; blk >= 0; --blk) {
    const BlockOffsets& o = L.blocks[blk];
    const bool shifted = cfg.shifted(blk);
    for (std::size_t s = 0; s < S; ++s) {
      const auto& t = tape.shards[s].blocks[blk];
      double* G = g.params[s].data();
      Mat dg = linear_backward(t.g, dx[s], P + o.fc2_w, G + o.fc2_w, G + o.fc2_b, E, hid);
      for (long i = 0; i < dg.size(); ++i) dg.data()[i] *= gelu_grad(t.h1.data()[i]);
      const Mat dyn = linear_backward(t.yn, dg, P + o.fc1_w, G + o.fc1_w, G + o.fc1_b, hid, E);
      Mat dy = dx[s] + rmsnorm_backward(t.y, t.inv_rms2, P + o.norm2, dyn, G + o.norm2);
      work[s] = dy;
      dres[s] = std::move(dy);
    }
    if (shifted) {
      roller.roll_adjoint(work, B, cfg.shift_h(), 0);
      roller.roll_adjoint(work, B, cfg.shift_w(), 1);
    }
    for (std::size_t s = 0; s < S; ++s) {
      const auto& t = tape.shards[s].blocks[blk];
      double* G = g.params[s].data();
      const Mat dattn =
          linear_backward(t.attn, work[s], P + o.proj_w, G + o.proj_w, G + o.proj_b, E, E);
      const Mat dqkv = attention_backward(cfg, tape.shards[s].geo, B, P + o.q_scale,
                                          P + o.k_scale, t, dattn, G + o.q_scale, G + o.k_scale);
      work[s] = linear_backward(t.xr, dqkv, P + o.qkv_w, G + o.qkv_w, G + o.qkv_b, 3 * E, E);
    }
    if (shifted) {
      roller.roll_adjoint(work, B, -cfg.shift_w(), 1);
      roller.roll_adjoint(work, B, -cfg.shift_h(), 0);
    }
    for (std::size_t s = 0; s < S; ++s) {
      const auto& t = tape.shards[s].blocks[blk];
      dx[s] = dres[s] +
              rmsnorm_backward(t.x_in, t.inv_rms1, P + o.norm1, work[s], g.params[s].data() + o.norm1);
    }
  }

  for (std::size_t s = 0; s < S; ++s) {
    const auto& st = tape.shards[s];
    double* G = g.params[s].data();
    const Mat dpatch = linear_backward(st.patches, dx[s], P + L.patch_w, G + L.patch_w,
                                       G + L.patch_b, E, p2 * cfg.in_channels);
    if (cfg.pos_enc) {
      linear_backward(st.pos_patches, dx[s], P + L.pos_w, G + L.pos_w, G + L.pos_b, E, p2 * 4,
                      false);
    }
    g.inputs[s] = unpatchify(dpatch, B, cfg.in_channels, st.geo.rows, st.geo.cols, p);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Single-rank API

namespace {

ShardGeometry full_geometry(const ModelConfig& cfg) {
  return {cfg.tokens_h(), cfg.tokens_w(), 0, 0, cfg.tokens_h(), cfg.tokens_w()};
}

}  // namespace

ForwardResult forward(const ParamSet& params, std::span<const FieldSample> batch,
                      const GridSpec& grid) {
  const ModelConfig& cfg = params.config;
  if (batch.empty()) throw ShapeError("forward: empty batch");
  if (grid.n_lon != cfg.grid_w || grid.n_lat < cfg.grid_h) {
    throw ShapeError("forward: grid does not match model config");
  }
  ShardBatch in;
  in.batch = static_cast<int>(batch.size());
  const std::size_t plane = static_cast<std::size_t>(cfg.grid_h) * cfg.grid_w;
  in.state.reserve(batch.size() * cfg.in_channels * plane);
  for (const auto& s : batch) {
    const Field& f = s.values;
    if (f.channels != cfg.in_channels || f.height != cfg.grid_h || f.width != cfg.grid_w) {
      throw ShapeError("forward: sample shape does not match model config");
    }
    in.state.insert(in.state.end(), f.values.begin(), f.values.end());
    if (cfg.pos_enc) {
      const Field pe = positional_inputs(grid, s.time_frac, cfg.grid_h);
      in.pos.insert(in.pos.end(), pe.values.begin(), pe.values.end());
    }
  }
  const ShardGeometry geo = full_geometry(cfg);
  LocalRoller roller(geo.rows, geo.cols);
  ForwardResult r;
  auto out = forward_sharded(params, std::span(&in, 1), std::span(&geo, 1), roller, r.tape);
  const std::size_t n = static_cast<std::size_t>(cfg.out_channels) * plane;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Field f(cfg.out_channels, cfg.grid_h, cfg.grid_w);
    std::copy_n(out[0].begin() + static_cast<long>(b * n), n, f.values.begin());
    r.predictions.push_back(std::move(f));
  }
  return r;
}

Gradients backward(const ActivationTape& tape, const ParamSet& params,
                   std::span<const Field> grad_output) {
  const ModelConfig& cfg = params.config;
  if (tape.shards.size() != 1) throw Error("backward: single-rank tape expected");
  if (static_cast<int>(grad_output.size()) != tape.batch) {
    throw ShapeError("backward: grad_output batch does not match tape");
  }
  std::vector<double> go;
  for (const auto& f : grad_output) {
    if (f.channels != cfg.out_channels || f.height != cfg.grid_h || f.width != cfg.grid_w) {
      throw ShapeError("backward: grad_output shape does not match model config");
    }
    go.insert(go.end(), f.values.begin(), f.values.end());
  }
  LocalRoller roller(cfg.tokens_h(), cfg.tokens_w());
  auto sg = backward_sharded(tape, params, std::span(&go, 1), roller);
  Gradients g;
  g.params = std::move(sg.params[0]);
  const std::size_t n = static_cast<std::size_t>(cfg.in_channels) * cfg.grid_h * cfg.grid_w;
  for (int b = 0; b < tape.batch; ++b) {
    Field f(cfg.in_channels, cfg.grid_h, cfg.grid_w);
    std::copy_n(sg.inputs[0].begin() + static_cast<long>(b * n), n, f.values.begin());
    g.inputs.push_back(std::move(f));
  }
  return g;
}

Field trim_rows(const Field& f, int rows) {
  if (rows > f.height) throw ShapeError("trim_rows: cannot trim to more rows than present");
  Field out(f.channels, rows, f.width);
  for (int c = 0; c < f.channels; ++c) {
    std::copy_n(f.channel(c), static_cast<std::size_t>(rows) * f.width, out.channel(c));
  }
  return out;
}

Field restore_rows(const Field& pred, int raw_rows) {
  if (raw_rows < pred.height) throw ShapeError("restore_rows: raw height smaller than prediction");
  Field out(pred.channels, raw_rows, pred.width);
  for (int c = 0; c < pred.channels; ++c) {
    for (int h = 0; h < raw_rows; ++h) {
      const int src = std::min(h, pred.height - 1);
      std::copy_n(pred.channel(c) + static_cast<std::size_t>(src) * pred.width, pred.width,
                  out.channel(c) + static_cast<std::size_t>(h) * pred.width);
    }
  }
  return out;
}

FlopScope::FlopScope() {
  if (g_flops) throw Error("FlopScope: nested scopes are not supported");
  g_flops = new std::uint64_t(0);
}

FlopScope::~FlopScope() {
  delete g_flops;
  g_flops = nullptr;
}

std::uint64_t FlopScope::flops() const { return g_flops ? *g_flops : 0; }

}  // namespace swinscale
