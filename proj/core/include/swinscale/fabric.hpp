#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "swinscale/emulator.hpp"
#include "swinscale/types.hpp"

namespace swinscale {

// n1 x n2 spatial rank grid (n1 splits latitude, n2 longitude) replicated
// over n_d data-parallel groups. Spatial rank r = i * n2 + j; global rank
// g = d * n1 * n2 + r.
struct FabricSpec {
  int n1 = 1;
  int n2 = 1;
  int n_d = 1;

  int spatial() const { return n1 * n2; }
  int world() const { return n1 * n2 * n_d; }
  // Throws ConfigError unless the token grid tiles into whole windows per rank.
  void validate(const ModelConfig& cfg) const;
  ShardGeometry geometry(const ModelConfig& cfg, int spatial_rank) const;
};

// Block of a [d0, d1, H, W] tensor owned by spatial rank (i, j); H is split
// n1 ways and W n2 ways.
struct ShardedTensor {
  std::array<int, 4> global_shape{};
  int i = 0, j = 0;
  std::array<int, 4> local_shape{};
  std::vector<double> values;
};

std::vector<ShardedTensor> scatter(std::span<const double> global, std::array<int, 4> shape,
                                   int n1, int n2);
std::vector<double> gather(std::span<const ShardedTensor> shards);

struct TraceEvent {
  long collective = 0;
  std::string kind;
  std::vector<int> participants;
  std::size_t bytes = 0;
};

// In-process message fabric. Messages are keyed by (collective id, src, dst)
// so matching never depends on the order ranks happen to run in.
class Fabric {
 public:
  explicit Fabric(int world) : world_(world) {}

  int world() const { return world_; }
  long begin(std::string kind, std::vector<int> participants);
  void send(long collective, int src, int dst, std::vector<double> payload);
  std::vector<double> recv(long collective, int src, int dst);
  // Fails if any message of the collective was never received.
  void end(long collective);

  const std::vector<TraceEvent>& trace() const { return trace_; }
  void write_trace(std::ostream& os) const;  // JSON lines

 private:
  int world_;
  long next_id_ = 0;
  std::map<std::tuple<long, int, int>, std::vector<double>> mailbox_;
  std::vector<TraceEvent> trace_;
};

// Cyclic roll of token shards (one Mat per spatial rank, rank order) across
// the rank ring along `dim`. Each rank sends its |shift| boundary rows or
// columns to the ring neighbour, rolls locally and overwrites the wrapped
// slice with what it received. Requires |shift| < local extent.
void distributed_roll(Fabric& fabric, const FabricSpec& spec, std::span<const ShardGeometry> geos,
                      std::vector<Mat>& shards, int batch, int shift, int dim,
                      int group = 0);
void distributed_roll_adjoint(Fabric& fabric, const FabricSpec& spec,
                              std::span<const ShardGeometry> geos, std::vector<Mat>& shards,
                              int batch, int shift, int dim, int group = 0);

class DistributedRoller final : public Roller {
 public:
  DistributedRoller(Fabric& fabric, FabricSpec spec, std::vector<ShardGeometry> geos, int group)
      : fabric_(fabric), spec_(spec), geos_(std::move(geos)), group_(group) {}
  void roll(std::vector<Mat>& shards, int batch, int shift, int dim) override;

 private:
  Fabric& fabric_;
  FabricSpec spec_;
  std::vector<ShardGeometry> geos_;
  int group_;
};

// Sum over all ranks, folded in ascending rank order at rank 0 and
// broadcast, so every rank ends with bit-identical values.
void allreduce_grads(Fabric& fabric, std::vector<std::vector<double>>& rank_grads);

struct DistributedResult {
  std::vector<Field> outputs;                   // gathered, one per batch element
  std::vector<std::vector<double>> rank_grads;  // reduced parameter gradients per global rank
};

// Sharded forward + backward of the emulator with cotangent grad_output on
// the outputs. The batch is split contiguously across the n_d groups.
DistributedResult distributed_forward_backward(const ParamSet& params, const FabricSpec& spec,
                                               Fabric& fabric, std::span<const FieldSample> batch,
                                               const GridSpec& grid,
                                               std::span<const Field> grad_output);

}  // namespace swinscale
