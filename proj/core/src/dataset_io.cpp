#include "swinscale/dataset_io.hpp"

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "swinscale/util.hpp"

namespace swinscale {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json process_json(const SyntheticProcessSpec& p) {
  return json{{"n_channels", p.n_channels},         {"spectral_slope", p.spectral_slope},
              {"rotation_rates", p.rotation_rates}, {"diffusivities", p.diffusivities},
              {"band_limit", p.band_limit},         {"seed", p.seed},
              {"time_period", p.time_period}};
}

SyntheticProcessSpec process_from(const json& j) {
  SyntheticProcessSpec p;
  p.n_channels = j.at("n_channels").get<int>();
  p.spectral_slope = j.at("spectral_slope").get<double>();
  p.rotation_rates = j.at("rotation_rates").get<std::vector<double>>();
  p.diffusivities = j.at("diffusivities").get<std::vector<double>>();
  p.band_limit = j.at("band_limit").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.time_period = j.value("time_period", 64);
  return p;
}

json config_json(const DatasetManifest& m) {
  return json{{"grid", {{"n_lat", m.n_lat}, {"n_lon", m.n_lon}, {"kind", to_string(m.grid_kind)}}},
              {"process", process_json(m.process)},
              {"splits",
               {{"train_end", m.splits.train_end},
                {"val_end", m.splits.val_end},
                {"total", m.splits.total}}}};
}

}  // namespace

std::string DatasetManifest::config_hash() const {
  return hex64(fnv1a(config_json(*this).dump()));
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j = config_json(m);
  j["format_version"] = m.format_version;
  j["block_size"] = m.block_size;
  j["config_hash"] = m.config_hash();
  j["sample_dtype"] = "float64-le";
  json blocks = json::array();
  for (const auto& b : m.blocks) {
    blocks.push_back({{"file", b.file}, {"first_index", b.first_index}, {"count", b.count}});
  }
  j["blocks"] = blocks;
  return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
  const json j = json::parse(text);
  DatasetManifest m;
  m.format_version = j.value("format_version", 1);
  const auto& g = j.at("grid");
  m.n_lat = g.at("n_lat").get<int>();
  m.n_lon = g.at("n_lon").get<int>();
  m.grid_kind = grid_kind_from_string(g.value("kind", std::string("gauss-legendre")));
  m.process = process_from(j.at("process"));
  const auto& s = j.at("splits");
  m.splits.train_end = s.at("train_end").get<long>();
  m.splits.val_end = s.at("val_end").get<long>();
  m.splits.total = s.at("total").get<long>();
  m.block_size = j.value("block_size", 128L);
  if (j.contains("blocks")) {
    for (const auto& b : j.at("blocks")) {
      m.blocks.push_back({b.at("file").get<std::string>(), b.at("first_index").get<long>(),
                          b.at("count").get<long>()});
    }
  }
  if (j.contains("config_hash") && j.at("config_hash").get<std::string>() != m.config_hash()) {
    throw ConfigError("dataset manifest: config_hash does not match its contents");
  }
  return m;
}

void write_dataset(const fs::path& dir, DatasetManifest& m, std::span<const FieldSample> samples) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw ConfigError("dataset directory " + dir.string() + " is not empty");
  }
  fs::create_directories(dir);
  m.blocks.clear();
  const long total = static_cast<long>(samples.size());
  for (long first = 0, k = 0; first < total; first += m.block_size, ++k) {
    const long count = std::min(m.block_size, total - first);
    char name[64];
    std::snprintf(name, sizeof(name), "block_%05ld.f64", k);
    const auto& f0 = samples[first].values;
    {
      std::ofstream os(dir / name, std::ios::binary);
      for (long i = first; i < first + count; ++i) {
        const auto& v = samples[i].values.values;
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double)));
      }
      if (!os) throw Error("write_dataset: failed writing " + std::string(name));
    }
    {
      std::ofstream os(dir / (std::string(name) + ".shape.json"));
      os << json{{"dtype", "float64-le"},
                 {"shape", {count, f0.channels, f0.height, f0.width}},
                 {"first_index", samples[first].index}}
                .dump()
         << "\n";
    }
    m.blocks.push_back({name, samples[first].index, count});
  }
  // manifest last: its presence marks a complete dataset
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    os << manifest_to_json(m) << "\n";
  }
  fs::rename(tmp, dir / "manifest.json");
}

DatasetManifest read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigError("no dataset manifest at " + (dir / "manifest.json").string());
  std::stringstream ss;
  ss << is.rdbuf();
  return manifest_from_json(ss.str());
}

std::vector<FieldSample> read_block(const fs::path& dir, const DatasetManifest& m,
                                    const DatasetManifest::Block& block) {
  std::ifstream hs(dir / (block.file + ".shape.json"));
  if (!hs) throw Error("missing shape header for " + block.file);
  const json header = json::parse(hs);
  const auto shape = header.at("shape").get<std::vector<long>>();
  if (shape.size() != 4 || shape[0] != block.count) {
    throw Error("bad shape header for " + block.file);
  }
  const int C = static_cast<int>(shape[1]), H = static_cast<int>(shape[2]),
            W = static_cast<int>(shape[3]);
  std::ifstream is(dir / block.file, std::ios::binary);
  if (!is) throw Error("cannot open " + block.file);
  std::vector<FieldSample> out;
  out.reserve(block.count);
  for (long i = 0; i < block.count; ++i) {
    FieldSample s;
    s.index = block.first_index + i;
    s.time_frac = time_fraction(s.index, m.process.time_period);
    s.values = Field(C, H, W);
    is.read(reinterpret_cast<char*>(s.values.values.data()),
            static_cast<std::streamsize>(s.values.size() * sizeof(double)));
    if (!is) throw Error("truncated block " + block.file);
    out.push_back(std::move(s));
  }
  return out;
}

std::span<const FieldSample> Dataset::train() const {
  return std::span(samples).subspan(0, manifest.splits.train_end);
}
std::span<const FieldSample> Dataset::val() const {
  return std::span(samples).subspan(manifest.splits.train_end,
                                    manifest.splits.val_end - manifest.splits.train_end);
}
std::span<const FieldSample> Dataset::test() const {
  return std::span(samples).subspan(manifest.splits.val_end,
                                    manifest.splits.total - manifest.splits.val_end);
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.manifest = read_manifest(dir);
  d.grid = d.manifest.grid();
  for (const auto& b : d.manifest.blocks) {
    auto block = read_block(dir, d.manifest, b);
    for (auto& s : block) d.samples.push_back(std::move(s));
  }
  if (static_cast<long>(d.samples.size()) != d.manifest.splits.total) {
    throw Error("dataset: block sample count disagrees with splits.total");
  }
  return d;
}

Dataset generate_dataset(const DatasetManifest& m) {
  m.splits.validate();
  Dataset d;
  d.manifest = m;
  d.grid = m.grid();
  d.samples = generate_sequence(m.process, d.grid, m.splits.total);
  return d;
}

}  // namespace swinscale
