#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "swinscale/types.hpp"

namespace swinscale {

inline constexpr double kStdFloor = 1e-8;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Per-channel mean/std over every sample and grid point of the training split.
NormStats compute_norm_stats(std::span<const FieldSample> train_samples);

void standardize(Field& f, const NormStats& stats);
void unstandardize(Field& f, const NormStats& stats);
std::vector<FieldSample> standardized(std::span<const FieldSample> samples, const NormStats& stats);

// Contiguous train / val / test ranges of sample indices, in that order.
struct SplitBounds {
  long train_end = 0;
  long val_end = 0;
  long total = 0;

  void validate() const;
  long train_size() const { return train_end; }
  long val_size() const { return val_end - train_end; }
  long test_size() const { return total - val_end; }
};

// Position of a shuffled pass over [0, dataset_len). The permutation of each
// epoch is a pure function of (perm_seed, epoch), so this struct is the
// whole iteration context.
struct IteratorState {
  long epoch = 0;
  long cursor = 0;
  std::uint64_t perm_seed = 0;
  long dataset_len = 0;

  bool operator==(const IteratorState&) const = default;
};

std::vector<long> epoch_permutation(std::uint64_t perm_seed, long epoch, long dataset_len);

// Draw the next batch_size indices. A batch that runs past the end of an
// epoch takes the remaining indices and continues from the next epoch's
// permutation.
std::pair<std::vector<long>, IteratorState> next_batch(const IteratorState& state, long batch_size);

void write_iterator_state(std::ostream& os, const IteratorState& s);
IteratorState read_iterator_state(std::istream& is);

}  // namespace swinscale
