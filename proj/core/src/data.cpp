#include "swinscale/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "swinscale/util.hpp"

namespace swinscale {

NormStats compute_norm_stats(std::span<const FieldSample> train_samples) {
  if (train_samples.empty()) throw ConfigError("compute_norm_stats: empty training split");
  const int C = train_samples.front().values.channels;
  NormStats st;
  st.mean.assign(C, 0.0);
  st.std.assign(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : train_samples) {
      if (s.values.channels != C) throw ShapeError("compute_norm_stats: channel count varies");
      const double* p = s.values.channel(c);
      for (std::size_t i = 0; i < s.values.plane(); ++i) sum += p[i];
      n += s.values.plane();
    }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& s : train_samples) {
      const double* p = s.values.channel(c);
      for (std::size_t i = 0; i < s.values.plane(); ++i) ss += (p[i] - mean) * (p[i] - mean);
    }
    st.mean[c] = mean;
    st.std[c] = std::max(std::sqrt(ss / static_cast<double>(n)), kStdFloor);
  }
  return st;
}

void standardize(Field& f, const NormStats& stats) {
  for (int c = 0; c < f.channels; ++c) {
    double* p = f.channel(c);
    for (std::size_t i = 0; i < f.plane(); ++i) p[i] = (p[i] - stats.mean[c]) / stats.std[c];
  }
}

void unstandardize(Field& f, const NormStats& stats) {
  for (int c = 0; c < f.channels; ++c) {
    double* p = f.channel(c);
    for (std::size_t i = 0; i < f.plane(); ++i) p[i] = p[i] * stats.std[c] + stats.mean[c];
  }
}

std::vector<FieldSample> standardized(std::span<const FieldSample> samples, const NormStats& stats) {
  std::vector<FieldSample> out(samples.begin(), samples.end());
  for (auto& s : out) standardize(s.values, stats);
  return out;
}

void SplitBounds::validate() const {
  if (!(0 < train_end && train_end <= val_end && val_end <= total)) {
    throw ConfigError("splits must satisfy 0 < train_end <= val_end <= total");
  }
}

std::vector<long> epoch_permutation(std::uint64_t perm_seed, long epoch, long dataset_len) {
  std::vector<long> perm(dataset_len);
  std::iota(perm.begin(), perm.end(), 0L);
  std::mt19937_64 rng(splitmix64(perm_seed ^ splitmix64(static_cast<std::uint64_t>(epoch))));
  for (long i = dataset_len - 1; i > 0; --i) {
    const auto j = static_cast<long>(uniform_below(rng, static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

std::pair<std::vector<long>, IteratorState> next_batch(const IteratorState& state, long batch_size) {
  if (batch_size < 1 || batch_size > state.dataset_len) {
    throw ConfigError("next_batch: batch_size must be in [1, dataset_len]");
  }
  IteratorState s = state;
  std::vector<long> out;
  out.reserve(batch_size);
  auto perm = epoch_permutation(s.perm_seed, s.epoch, s.dataset_len);
  while (static_cast<long>(out.size()) < batch_size) {
    if (s.cursor >= s.dataset_len) {
      s.cursor = 0;
      ++s.epoch;
      perm = epoch_permutation(s.perm_seed, s.epoch, s.dataset_len);
    }
    out.push_back(perm[s.cursor++]);
  }
  return {std::move(out), s};
}

void write_iterator_state(std::ostream& os, const IteratorState& s) {
  binio::write<std::int64_t>(os, s.epoch);
  binio::write<std::int64_t>(os, s.cursor);
  binio::write<std::uint64_t>(os, s.perm_seed);
  binio::write<std::int64_t>(os, s.dataset_len);
}

IteratorState read_iterator_state(std::istream& is) {
  IteratorState s;
  s.epoch = binio::read<std::int64_t>(is);
  s.cursor = binio::read<std::int64_t>(is);
  s.perm_seed = binio::read<std::uint64_t>(is);
  s.dataset_len = binio::read<std::int64_t>(is);
  return s;
}

}  // namespace swinscale
