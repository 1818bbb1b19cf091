#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "swinscale/data.hpp"
#include "swinscale/grid.hpp"
#include "swinscale/synthetic.hpp"

namespace swinscale {

// On disk a dataset is a directory holding manifest.json plus one raw
// little-endian float64 file per contiguous block of samples, each with a
// sidecar "<block>.shape.json" header giving [count, C, H, W].
struct DatasetManifest {
  int format_version = 1;
  int n_lat = 36;
  int n_lon = 72;
  GridKind grid_kind = GridKind::gauss_legendre;
  SyntheticProcessSpec process;
  SplitBounds splits;
  long block_size = 128;

  struct Block {
    std::string file;
    long first_index = 0;
    long count = 0;
  };
  std::vector<Block> blocks;

  // Hash of everything that determines the sample values.
  std::string config_hash() const;
  GridSpec grid() const { return make_grid(n_lat, n_lon, grid_kind); }
};

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

// Generate the configured sequence and write blocks + manifest into dir.
// Fills m.blocks. Throws ConfigError if dir exists and is not empty.
void write_dataset(const std::filesystem::path& dir, DatasetManifest& m,
                   std::span<const FieldSample> samples);

struct Dataset {
  DatasetManifest manifest;
  GridSpec grid;
  std::vector<FieldSample> samples;

  std::span<const FieldSample> train() const;
  std::span<const FieldSample> val() const;
  std::span<const FieldSample> test() const;
};

DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<FieldSample> read_block(const std::filesystem::path& dir, const DatasetManifest& m,
                                    const DatasetManifest::Block& block);
Dataset load_dataset(const std::filesystem::path& dir);

// Build the whole dataset in memory from a manifest's configuration.
Dataset generate_dataset(const DatasetManifest& m);

}  // namespace swinscale
