#include "swinscale/fabric.hpp"

#include <algorithm>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <ostream>

namespace swinscale {

void FabricSpec::validate(const ModelConfig& cfg) const {
  if (n1 < 1 || n2 < 1 || n_d < 1) throw ConfigError("fabric: n1, n2, n_d must be >= 1");
  cfg.validate();
  if (cfg.tokens_h() % n1 != 0 || cfg.tokens_w() % n2 != 0) {
    throw ConfigError("fabric: token grid is not divisible by the rank grid");
  }
  if ((cfg.tokens_h() / n1) % cfg.window_h != 0 || (cfg.tokens_w() / n2) % cfg.window_w != 0) {
    throw ConfigError("fabric: attention windows would straddle rank boundaries");
  }
}

ShardGeometry FabricSpec::geometry(const ModelConfig& cfg, int spatial_rank) const {
  const int i = spatial_rank / n2, j = spatial_rank % n2;
  const int rows = cfg.tokens_h() / n1, cols = cfg.tokens_w() / n2;
  return {rows, cols, i * rows, j * cols, cfg.tokens_h(), cfg.tokens_w()};
}

std::vector<ShardedTensor> scatter(std::span<const double> global, std::array<int, 4> shape,
                                   int n1, int n2) {
  const auto [d0, d1, H, W] = shape;
  if (static_cast<std::size_t>(d0) * d1 * H * W != global.size()) {
    throw ShapeError("scatter: data size does not match shape");
  }
  if (n1 < 1 || n2 < 1 || H % n1 != 0 || W % n2 != 0) {
    throw ShapeError("scatter: spatial extents not divisible by the rank grid");
  }
  const int h = H / n1, w = W / n2;
  std::vector<ShardedTensor> out;
  for (int i = 0; i < n1; ++i) {
    for (int j = 0; j < n2; ++j) {
      ShardedTensor s;
      s.global_shape = shape;
      s.i = i;
      s.j = j;
      s.local_shape = {d0, d1, h, w};
      s.values.reserve(static_cast<std::size_t>(d0) * d1 * h * w);
      for (int a = 0; a < d0 * d1; ++a) {
        for (int r = 0; r < h; ++r) {
          const double* src = global.data() + (static_cast<std::size_t>(a) * H + i * h + r) * W + j * w;
          s.values.insert(s.values.end(), src, src + w);
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<double> gather(std::span<const ShardedTensor> shards) {
  if (shards.empty()) throw ShapeError("gather: no shards");
  const auto shape = shards[0].global_shape;
  const auto [d0, d1, H, W] = shape;
  std::vector<double> out(static_cast<std::size_t>(d0) * d1 * H * W);
  std::vector<bool> seen(out.size(), false);
  for (const auto& s : shards) {
    if (s.global_shape != shape) throw ShapeError("gather: shards disagree on global shape");
    const int h = s.local_shape[2], w = s.local_shape[3];
    if (s.values.size() != static_cast<std::size_t>(d0) * d1 * h * w) {
      throw ShapeError("gather: shard payload size mismatch");
    }
    for (int a = 0; a < d0 * d1; ++a) {
      for (int r = 0; r < h; ++r) {
        const std::size_t dst = (static_cast<std::size_t>(a) * H + s.i * h + r) * W + s.j * w;
        const double* src = s.values.data() + (static_cast<std::size_t>(a) * h + r) * w;
        for (int c = 0; c < w; ++c) {
          if (seen[dst + c]) throw ShapeError("gather: overlapping shards");
          seen[dst + c] = true;
          out[dst + c] = src[c];
        }
      }
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ShapeError("gather: shards leave gaps in the global tensor");
  }
  return out;
}

// ---------------------------------------------------------------------------

long Fabric::begin(std::string kind, std::vector<int> participants) {
  for (int r : participants) {
    if (r < 0 || r >= world_) throw Error("fabric: participant rank out of range");
  }
  const long id = next_id_++;
  trace_.push_back({id, std::move(kind), std::move(participants), 0});
  return id;
}

void Fabric::send(long collective, int src, int dst, std::vector<double> payload) {
  if (collective < 0 || collective >= next_id_) throw Error("fabric: unknown collective");
  const auto& parts = trace_[collective].participants;
  if (std::find(parts.begin(), parts.end(), src) == parts.end() ||
      std::find(parts.begin(), parts.end(), dst) == parts.end()) {
    throw Error("fabric: message between non-participants");
  }
  trace_[collective].bytes += payload.size() * sizeof(double);
  const auto [it, inserted] = mailbox_.emplace(std::make_tuple(collective, src, dst), std::move(payload));
  if (!inserted) throw Error("fabric: duplicate message in one collective");
}

std::vector<double> Fabric::recv(long collective, int src, int dst) {
  const auto it = mailbox_.find({collective, src, dst});
  if (it == mailbox_.end()) {
    throw Error("fabric: receive before the matching send (collective " +
                std::to_string(collective) + ", " + std::to_string(src) + " -> " +
                std::to_string(dst) + ")");
  }
  auto payload = std::move(it->second);
  mailbox_.erase(it);
  return payload;
}

void Fabric::end(long collective) {
  const auto it = mailbox_.lower_bound({collective, INT32_MIN, INT32_MIN});
  if (it != mailbox_.end() && std::get<0>(it->first) == collective) {
    throw Error("fabric: collective finished with undelivered messages");
  }
}

void Fabric::write_trace(std::ostream& os) const {
  for (const auto& e : trace_) {
    os << nlohmann::json{{"collective", e.collective},
                         {"kind", e.kind},
                         {"participants", e.participants},
                         {"bytes", e.bytes}}
              .dump()
       << "\n";
  }
}

// ---------------------------------------------------------------------------

namespace {

// Rows [start, start+n) (dim 0) or columns (dim 1) of every batch element.
std::vector<double> extract_slice(const Mat& x, int batch, int rows, int cols, int dim, int start,
                                  int n) {
  const long F = x.cols();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(batch) * n * (dim == 0 ? cols : rows) * F);
  for (int b = 0; b < batch; ++b) {
    for (int r = 0; r < rows; ++r) {
      if (dim == 0 && (r < start || r >= start + n)) continue;
      for (int c = 0; c < cols; ++c) {
        if (dim == 1 && (c < start || c >= start + n)) continue;
        const double* src = x.row((static_cast<long>(b) * rows + r) * cols + c).data();
        out.insert(out.end(), src, src + F);
      }
    }
  }
  return out;
}

void insert_slice(Mat& x, int batch, int rows, int cols, int dim, int start, int n,
                  const std::vector<double>& payload) {
  const long F = x.cols();
  std::size_t k = 0;
  for (int b = 0; b < batch; ++b) {
    for (int r = 0; r < rows; ++r) {
      if (dim == 0 && (r < start || r >= start + n)) continue;
      for (int c = 0; c < cols; ++c) {
        if (dim == 1 && (c < start || c >= start + n)) continue;
        if (k + F > payload.size()) throw ShapeError("distributed_roll: short boundary slice");
        std::copy_n(payload.data() + k, F, x.row((static_cast<long>(b) * rows + r) * cols + c).data());
        k += F;
      }
    }
  }
  if (k != payload.size()) throw ShapeError("distributed_roll: boundary slice size mismatch");
}

}  // namespace

void distributed_roll(Fabric& fabric, const FabricSpec& spec, std::span<const ShardGeometry> geos,
                      std::vector<Mat>& shards, int batch, int shift, int dim, int group) {
  if (dim != 0 && dim != 1) throw ConfigError("distributed_roll: dim must be 0 or 1");
  const int S = spec.spatial();
  if (static_cast<int>(shards.size()) != S || static_cast<int>(geos.size()) != S) {
    throw ShapeError("distributed_roll: one shard per spatial rank required");
  }
  if (shift == 0) return;
  const int ring = dim == 0 ? spec.n1 : spec.n2;
  for (int r = 0; r < S; ++r) {
    const int extent = dim == 0 ? geos[r].rows : geos[r].cols;
    if (ring > 1 && std::abs(shift) >= extent) {
      throw ConfigError("distributed_roll: |shift| must be smaller than the local extent");
    }
  }
  if (ring == 1) {
    for (int r = 0; r < S; ++r) roll_tokens(shards[r], batch, geos[r].rows, geos[r].cols, shift, dim);
    return;
  }

  const int base = group * S;
  const int s = std::abs(shift);
  const int dir = shift > 0 ? 1 : -1;
  auto neighbour = [&](int r, int step) {
    int i = r / spec.n2, j = r % spec.n2;
    if (dim == 0) i = ((i + step) % spec.n1 + spec.n1) % spec.n1;
    else j = ((j + step) % spec.n2 + spec.n2) % spec.n2;
    return i * spec.n2 + j;
  };

  std::vector<int> parts(S);
  for (int r = 0; r < S; ++r) parts[r] = base + r;
  const long id = fabric.begin(dim == 0 ? "roll_lat" : "roll_lon", parts);
  for (int r = 0; r < S; ++r) {
    const auto& g = geos[r];
    const int extent = dim == 0 ? g.rows : g.cols;
    const int start = shift > 0 ? extent - s : 0;
    fabric.send(id, base + r, base + neighbour(r, dir),
                extract_slice(shards[r], batch, g.rows, g.cols, dim, start, s));
  }
  for (int r = 0; r < S; ++r) {
    const auto& g = geos[r];
    const int extent = dim == 0 ? g.rows : g.cols;
    roll_tokens(shards[r], batch, g.rows, g.cols, shift, dim);
    const auto recv = fabric.recv(id, base + neighbour(r, -dir), base + r);
    insert_slice(shards[r], batch, g.rows, g.cols, dim, shift > 0 ? 0 : extent - s, s, recv);
  }
  fabric.end(id);
}

void distributed_roll_adjoint(Fabric& fabric, const FabricSpec& spec,
                              std::span<const ShardGeometry> geos, std::vector<Mat>& shards,
                              int batch, int shift, int dim, int group) {
  distributed_roll(fabric, spec, geos, shards, batch, -shift, dim, group);
}

void DistributedRoller::roll(std::vector<Mat>& shards, int batch, int shift, int dim) {
  distributed_roll(fabric_, spec_, geos_, shards, batch, shift, dim, group_);
}

void allreduce_grads(Fabric& fabric, std::vector<std::vector<double>>& rank_grads) {
  const int n = static_cast<int>(rank_grads.size());
  if (n == 0) throw ShapeError("allreduce_grads: no ranks");
  for (const auto& g : rank_grads) {
    if (g.size() != rank_grads[0].size()) {
      throw ShapeError("allreduce_grads: gradient shapes differ across ranks");
    }
  }
  if (n == 1) return;
  std::vector<int> parts(n);
  for (int r = 0; r < n; ++r) parts[r] = r;
  const long gather_id = fabric.begin("reduce", parts);
  for (int r = 1; r < n; ++r) fabric.send(gather_id, r, 0, rank_grads[r]);
  std::vector<double> acc = rank_grads[0];
  for (int r = 1; r < n; ++r) {
    const auto g = fabric.recv(gather_id, r, 0);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
  }
  fabric.end(gather_id);
  const long bcast_id = fabric.begin("broadcast", parts);
  for (int r = 1; r < n; ++r) fabric.send(bcast_id, 0, r, acc);
  for (int r = 1; r < n; ++r) rank_grads[r] = fabric.recv(bcast_id, 0, r);
  rank_grads[0] = std::move(acc);
  fabric.end(bcast_id);
}

DistributedResult distributed_forward_backward(const ParamSet& params, const FabricSpec& spec,
                                               Fabric& fabric, std::span<const FieldSample> batch,
                                               const GridSpec& grid,
                                               std::span<const Field> grad_output) {
  const ModelConfig& cfg = params.config;
  spec.validate(cfg);
  if (fabric.world() != spec.world()) throw ConfigError("fabric: world size does not match spec");
  const int B = static_cast<int>(batch.size());
  if (B == 0 || B % spec.n_d != 0) {
    throw ConfigError("distributed_forward_backward: batch must split evenly over data groups");
  }
  if (static_cast<int>(grad_output.size()) != B) {
    throw ShapeError("distributed_forward_backward: one cotangent per batch element required");
  }
  const int Bl = B / spec.n_d, S = spec.spatial();
  const int H = cfg.grid_h, W = cfg.grid_w;
  std::vector<ShardGeometry> geos;
  for (int r = 0; r < S; ++r) geos.push_back(spec.geometry(cfg, r));

  DistributedResult res;
  res.rank_grads.resize(spec.world());
  for (int d = 0; d < spec.n_d; ++d) {
    const auto local = batch.subspan(static_cast<std::size_t>(d) * Bl, Bl);
    std::vector<double> state, pos, gout;
    for (int b = 0; b < Bl; ++b) {
      const auto& f = local[b].values;
      if (f.channels != cfg.in_channels || f.height != H || f.width != W) {
        throw ShapeError("distributed_forward_backward: sample shape does not match config");
      }
      state.insert(state.end(), f.values.begin(), f.values.end());
      if (cfg.pos_enc) {
        const Field pe = positional_inputs(grid, local[b].time_frac, H);
        pos.insert(pos.end(), pe.values.begin(), pe.values.end());
      }
      const auto& go = grad_output[static_cast<std::size_t>(d) * Bl + b];
      if (go.channels != cfg.out_channels || go.height != H || go.width != W) {
        throw ShapeError("distributed_forward_backward: cotangent shape does not match config");
      }
      gout.insert(gout.end(), go.values.begin(), go.values.end());
    }
    const auto st = scatter(state, {Bl, cfg.in_channels, H, W}, spec.n1, spec.n2);
    std::vector<ShardedTensor> ps;
    if (cfg.pos_enc) ps = scatter(pos, {Bl, 4, H, W}, spec.n1, spec.n2);
    const auto gs = scatter(gout, {Bl, cfg.out_channels, H, W}, spec.n1, spec.n2);

    std::vector<ShardBatch> in(S);
    std::vector<std::vector<double>> go(S);
    for (int r = 0; r < S; ++r) {
      in[r].batch = Bl;
      in[r].state = st[r].values;
      if (cfg.pos_enc) in[r].pos = ps[r].values;
      go[r] = gs[r].values;
    }
    DistributedRoller roller(fabric, spec, geos, d);
    ActivationTape tape;
    auto outs = forward_sharded(params, in, geos, roller, tape);
    auto grads = backward_sharded(tape, params, go, roller);

    std::vector<ShardedTensor> os(S);
    for (int r = 0; r < S; ++r) {
      os[r] = gs[r];
      os[r].values = std::move(outs[r]);
      res.rank_grads[static_cast<std::size_t>(d) * S + r] = std::move(grads.params[r]);
    }
    const auto full = gather(os);
    const std::size_t n = static_cast<std::size_t>(cfg.out_channels) * H * W;
    for (int b = 0; b < Bl; ++b) {
      Field f(cfg.out_channels, H, W);
      std::copy_n(full.begin() + static_cast<long>(b * n), n, f.values.begin());
      res.outputs.push_back(std::move(f));
    }
  }
  allreduce_grads(fabric, res.rank_grads);
  return res;
}

}  // namespace swinscale
