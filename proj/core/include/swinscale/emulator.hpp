#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "swinscale/grid.hpp"
#include "swinscale/types.hpp"

namespace swinscale {

// Architectural hyperparameters of the shifted-window emulator.
struct ModelConfig {
  int in_channels = 4;
  int out_channels = 4;
  int grid_h = 36;  // after pole-row trimming
  int grid_w = 72;
  int patch = 4;
  int embed = 48;
  int depth = 4;
  int window_h = 3;  // in tokens
  int window_w = 6;
  int head_dim = 16;
  int mlp_ratio = 4;
  bool pos_enc = true;

  int tokens_h() const { return grid_h / patch; }
  int tokens_w() const { return grid_w / patch; }
  int tokens() const { return tokens_h() * tokens_w(); }
  int window_tokens() const { return window_h * window_w; }
  int heads() const { return embed / head_dim; }
  int shift_h() const { return window_h / 2; }
  int shift_w() const { return window_w / 2; }
  int hidden() const { return mlp_ratio * embed; }
  // Blocks alternate regular / shifted partitions, starting regular.
  bool shifted(int block) const { return block % 2 == 1; }

  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const;
  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kRmsEps = 1e-6;
inline constexpr double kMaskedLogit = -1e9;

enum class ParamKind { weight, bias, norm_scale };

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  ParamKind kind = ParamKind::weight;
};

struct BlockOffsets {
  std::size_t norm1, qkv_w, qkv_b, q_scale, k_scale, proj_w, proj_b;
  std::size_t norm2, fc1_w, fc1_b, fc2_w, fc2_b;
};

// Flat parameter layout. Gradients and optimizer moments share it.
struct ParamLayout {
  std::vector<ParamTensor> tensors;
  std::size_t patch_w = 0, patch_b = 0, pos_w = 0, pos_b = 0;
  std::vector<BlockOffsets> blocks;
  std::size_t head_w = 0, head_b = 0;
  std::size_t total = 0;

  static ParamLayout build(const ModelConfig& cfg);
  // 1 for parameters that receive weight decay, 0 otherwise.
  std::vector<double> decay_mask() const;
};

std::size_t param_count(const ModelConfig& cfg);

struct ParamSet {
  ModelConfig config;
  ParamLayout layout;
  std::vector<double> values;

  std::uint64_t fingerprint() const;
};

// Weights ~ normal(0, 0.02) truncated at two standard deviations, biases 0,
// norm scales 1.
ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed);

// Versioned binary blob: magic, version, config hash, config, tensor table,
// little-endian float64 payload. Round-trips bit-exactly.
void save_params(std::ostream& os, const ParamSet& p);
ParamSet load_params(std::istream& is);

// ---------------------------------------------------------------------------
// Positional inputs and masks

// Per-pixel (x, y, z, t) with (x, y, z) on the unit sphere; first grid_h rows.
Field positional_inputs(const GridSpec& grid, double time_frac, int rows = -1);

// Token-pair admissibility for one window partition. masks[w][i * M + j].
struct PartitionMask {
  int windows_h = 0, windows_w = 0, window_tokens = 0;
  std::vector<std::vector<bool>> masks;
  long forbidden_pairs() const;
};

struct AttentionMaskSet {
  PartitionMask regular;
  PartitionMask shifted;
};

// Shifted masks forbid pairs whose rolled row lies on opposite sides of the
// latitude seam; longitude wraps freely, so horizontal shifts add no mask.
AttentionMaskSet build_masks(const ModelConfig& cfg);

// Seam label of a rolled global token row under a vertical shift.
inline int seam_label(int rolled_row, int global_rows, int shift_h) {
  return (shift_h > 0 && rolled_row >= global_rows - shift_h) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Sharded execution. A shard is a rectangular block of the token grid; the
// single-rank model is the one-shard case. Per-shard activations are
// (batch * rows * cols) x features matrices, tokens row-major.

struct ShardGeometry {
  int rows = 0, cols = 0;  // local token extents
  int row0 = 0, col0 = 0;  // global token offsets
  int global_rows = 0, global_cols = 0;
};

// Cross-shard cyclic shift of token grids, torch.roll semantics:
// out[i] = in[i - shift] along dim (0 = latitude rows, 1 = longitude cols).
class Roller {
 public:
  virtual ~Roller() = default;
  virtual void roll(std::vector<Mat>& shards, int batch, int shift, int dim) = 0;
  virtual void roll_adjoint(std::vector<Mat>& shards, int batch, int shift, int dim) {
    roll(shards, batch, -shift, dim);
  }
};

// Local cyclic roll of one shard covering the whole token grid.
void roll_tokens(Mat& x, int batch, int rows, int cols, int shift, int dim);

class LocalRoller final : public Roller {
 public:
  LocalRoller(int rows, int cols) : rows_(rows), cols_(cols) {}
  void roll(std::vector<Mat>& shards, int batch, int shift, int dim) override;

 private:
  int rows_, cols_;
};

// Per-shard model input: batch x C x (rows*p) x (cols*p) state values and
// batch x 4 x (rows*p) x (cols*p) positional planes.
struct ShardBatch {
  int batch = 0;
  std::vector<double> state;
  std::vector<double> pos;
};

struct BlockTape {
  Mat x_in;
  Vec inv_rms1;
  Mat xr;  // normalized input in the rolled layout
  Mat qkv;
  Mat qhat, khat;
  Mat inv_q, inv_k;  // tokens x heads
  std::vector<double> probs;
  Mat attn;  // concatenated head outputs, rolled layout
  Mat y;
  Vec inv_rms2;
  Mat yn, h1, g;
};

struct ShardTape {
  ShardGeometry geo;
  Mat patches, pos_patches;
  std::vector<BlockTape> blocks;
  Mat x_final;
};

struct ActivationTape {
  int batch = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t param_fingerprint = 0;
  std::vector<ShardTape> shards;
};

// Forward over all shards in lock-step; collectives happen inside `roller`.
// Returns per-shard outputs batch x C_out x (rows*p) x (cols*p).
std::vector<std::vector<double>> forward_sharded(const ParamSet& params,
                                                 std::span<const ShardBatch> inputs,
                                                 std::span<const ShardGeometry> geos,
                                                 Roller& roller, ActivationTape& tape);

struct ShardGrads {
  std::vector<std::vector<double>> params;  // per shard, layout-sized
  std::vector<std::vector<double>> inputs;  // per shard, like ShardBatch::state
};

ShardGrads backward_sharded(const ActivationTape& tape, const ParamSet& params,
                            std::span<const std::vector<double>> grad_outputs, Roller& roller);

// ---------------------------------------------------------------------------
// Single-rank convenience API.

struct ForwardResult {
  std::vector<Field> predictions;
  ActivationTape tape;
};

ForwardResult forward(const ParamSet& params, std::span<const FieldSample> batch,
                      const GridSpec& grid);

struct Gradients {
  std::vector<double> params;
  std::vector<Field> inputs;
};

// Exact gradients of <grad_output, forward(.)> w.r.t. parameters and inputs.
Gradients backward(const ActivationTape& tape, const ParamSet& params,
                   std::span<const Field> grad_output);

// Drop trailing latitude rows so the height divides the patch size; the
// inverse copies the last predicted row into the dropped rows.
Field trim_rows(const Field& f, int rows);
Field restore_rows(const Field& pred, int raw_rows);

// Multiply-accumulate instrumentation: while a FlopScope is alive, every
// dense product in forward/backward adds 2*m*n*k to the counter.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;
  std::uint64_t flops() const;
};

}  // namespace swinscale
