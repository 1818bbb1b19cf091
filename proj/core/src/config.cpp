#include "swinscale/config.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "swinscale/util.hpp"
#include "swinscale_source_hash.h"

namespace swinscale {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path output_root() {
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') {
    return fs::path(env);
  }
  return fs::current_path();
}

fs::path resolve_path(const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return output_root() / p;
}

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config: " + path + ": " + what);
}

template <class T>
T convert(const json& j, const std::string& path);

template <>
bool convert<bool>(const json& j, const std::string& path) {
  if (!j.is_boolean()) fail(path, "expected true or false");
  return j.get<bool>();
}

template <>
long convert<long>(const json& j, const std::string& path) {
  if (j.is_number_integer()) return j.get<long>();
  // Accept 1e3-style literals when they are whole numbers.
  if (j.is_number_float()) {
    const double d = j.get<double>();
    if (d == std::floor(d) && std::abs(d) < 9e18) return static_cast<long>(d);
  }
  fail(path, "expected an integer");
}

template <>
int convert<int>(const json& j, const std::string& path) {
  const long v = convert<long>(j, path);
  if (v < INT32_MIN || v > INT32_MAX) fail(path, "integer out of range");
  return static_cast<int>(v);
}

template <>
std::uint64_t convert<std::uint64_t>(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  const long v = convert<long>(j, path);
  if (v < 0) fail(path, "expected a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

template <>
double convert<double>(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

template <>
std::string convert<std::string>(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path, "expected a string");
  return j.get<std::string>();
}

template <class T>
std::vector<T> convert_list(const json& j, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(convert<T>(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

// Object reader that remembers which keys were consumed so leftovers can be
// reported as unknown fields.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string path(const std::string& key) const { return join(path_, key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (has(key)) out = convert<T>(raw(key), path(key));
  }

  template <class T>
  void list(const std::string& key, std::vector<T>& out) {
    if (has(key)) out = convert_list<T>(raw(key), path(key));
  }

  template <class T>
  T required(const std::string& key) {
    if (!has(key)) fail(path(key), "missing required field");
    return convert<T>(raw(key), path(key));
  }

  void get_path(const std::string& key, fs::path& out) {
    if (has(key)) out = convert<std::string>(raw(key), path(key));
  }

  Obj child(const std::string& key) { return Obj(raw(key), path(key)); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) fail(path(it.key()), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// Runs a library validate() and prefixes its message with the field path.
template <class F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    fail(path, e.what());
  }
}

LossSpec parse_loss(Obj& o, const std::string& key) {
  const auto s = o.required<std::string>(key);
  LossSpec l;
  checked(o.path(key), [&] { l = LossSpec::parse(s); });
  return l;
}

DatasetSection parse_dataset(Obj o) {
  DatasetSection d;
  d.path = o.required<std::string>("path");
  if (!o.has("grid") && !o.has("process") && !o.has("splits") && !o.has("block_size")) {
    o.finish();
    return d;
  }
  DatasetManifest m;
  {
    auto g = o.child("grid");
    g.get("n_lat", m.n_lat);
    g.get("n_lon", m.n_lon);
    if (g.has("kind")) {
      const auto k = g.required<std::string>("kind");
      checked(g.path("kind"), [&] { m.grid_kind = grid_kind_from_string(k); });
    }
    g.finish();
  }
  {
    auto p = o.child("process");
    auto& s = m.process;
    p.get("n_channels", s.n_channels);
    p.get("spectral_slope", s.spectral_slope);
    p.list("rotation_rates", s.rotation_rates);
    p.list("diffusivities", s.diffusivities);
    p.get("band_limit", s.band_limit);
    p.get("seed", s.seed);
    p.get("time_period", s.time_period);
    p.finish();
  }
  {
    auto sp = o.child("splits");
    const long tr = sp.required<long>("train");
    const long va = sp.required<long>("val");
    const long te = sp.required<long>("test");
    sp.finish();
    m.splits = SplitBounds{tr, tr + va, tr + va + te};
    checked(o.path("splits"), [&] { m.splits.validate(); });
  }
  o.get("block_size", m.block_size);
  if (m.block_size < 1) fail(o.path("block_size"), "must be >= 1");
  checked(o.path("grid"), [&] { (void)m.grid(); });
  checked(o.path("process"), [&] { m.process.validate(m.grid()); });
  o.finish();
  d.generation = m;
  return d;
}

ModelConfig parse_model(Obj o, const std::optional<DatasetManifest>& data) {
  ModelConfig c;
  if (data) {
    c.in_channels = c.out_channels = data->process.n_channels;
  }
  o.get("in_channels", c.in_channels);
  o.get("out_channels", c.out_channels);
  o.get("patch", c.patch);
  if (data) {
    // Pole rows beyond a multiple of the patch are trimmed.
    c.grid_h = data->n_lat - data->n_lat % std::max(c.patch, 1);
    c.grid_w = data->n_lon;
  }
  o.get("grid_h", c.grid_h);
  o.get("grid_w", c.grid_w);
  o.get("embed", c.embed);
  o.get("depth", c.depth);
  o.get("window_h", c.window_h);
  o.get("window_w", c.window_w);
  o.get("head_dim", c.head_dim);
  o.get("mlp_ratio", c.mlp_ratio);
  o.get("pos_enc", c.pos_enc);
  o.finish();
  return c;
}

void parse_train(Obj o, TrainConfig& t, long& checkpoint_every) {
  o.get("batch_size", t.batch_size);
  o.get("weight_decay", t.weight_decay);
  o.get("grad_clip_norm", t.grad_clip_norm);
  o.get("beta1", t.beta1);
  o.get("beta2", t.beta2);
  o.get("adam_eps", t.adam_eps);
  if (o.has("loss")) t.loss = parse_loss(o, "loss");
  o.get("log_every", t.log_every);
  o.get("val_rollout_steps", t.val_rollout_steps);
  o.get("val_ic_stride", t.val_ic_stride);
  o.get("amse_band_limit", t.amse_band_limit);
  o.get("checkpoint_every", checkpoint_every);
  if (checkpoint_every < 0) fail(o.path("checkpoint_every"), "must be >= 0");
  o.finish();
}

void parse_schedule(Obj o, LRScheduleSpec& s) {
  if (o.has("variant")) {
    const auto v = o.required<std::string>("variant");
    checked(o.path("variant"), [&] { s.variant = schedule_variant_from_string(v); });
  }
  o.get("warmup_iters", s.warmup_iters);
  o.get("peak_lr", s.peak_lr);
  o.get("total_iters", s.total_iters);
  o.get("cooldown_frac", s.cooldown_frac);
  o.finish();
}

void parse_sweep(Obj o, SweepSection& s) {
  o.list("budgets", s.budgets);
  for (std::size_t i = 0; i < s.budgets.size(); ++i) {
    if (!(s.budgets[i] > 0.0) || (i > 0 && !(s.budgets[i] > s.budgets[i - 1]))) {
      fail(o.path("budgets"), "must be positive and strictly increasing");
    }
  }
  if (o.has("branch_losses")) {
    const auto names = convert_list<std::string>(o.raw("branch_losses"), o.path("branch_losses"));
    if (names.empty()) fail(o.path("branch_losses"), "must not be empty");
    s.branch_losses.clear();
    for (std::size_t i = 0; i < names.size(); ++i) {
      checked(o.path("branch_losses") + "[" + std::to_string(i) + "]",
              [&] { s.branch_losses.push_back(LossSpec::parse(names[i])); });
    }
  }
  o.get("lr_ref_params", s.lr_ref_params);
  if (s.lr_ref_params < 0.0) fail(o.path("lr_ref_params"), "must be >= 0");
  o.finish();
}

void parse_cooldown(Obj o, CooldownSection& c) {
  o.get_path("checkpoint", c.checkpoint);
  o.get("total_iters", c.total_iters);
  o.get("frac", c.frac);
  if (!(c.frac >= 0.0 && c.frac <= 1.0)) fail(o.path("frac"), "must lie in [0, 1]");
  if (o.has("loss")) c.loss = parse_loss(o, "loss");
  o.finish();
}

void parse_eval(Obj o, EvalSection& e) {
  o.get_path("checkpoint", e.checkpoint);
  o.get("steps", e.steps);
  o.get("ic_stride", e.ic_stride);
  o.get("split", e.split);
  if (e.steps < 1) fail(o.path("steps"), "must be >= 1");
  if (e.ic_stride < 1) fail(o.path("ic_stride"), "must be >= 1");
  if (e.split != "val" && e.split != "test") fail(o.path("split"), "must be \"val\" or \"test\"");
  if (o.has("aggregation")) {
    const auto a = o.required<std::string>("aggregation");
    if (a == "mean_of_rmse") {
      e.aggregation = RmseAggregation::mean_of_rmse;
    } else if (a == "pooled") {
      e.aggregation = RmseAggregation::pooled;
    } else {
      fail(o.path("aggregation"), "must be \"mean_of_rmse\" or \"pooled\"");
    }
  }
  o.list("spectrum_leads", e.spectrum_leads);
  for (int l : e.spectrum_leads) {
    if (l < 1) fail(o.path("spectrum_leads"), "leads must be >= 1");
  }
  o.finish();
}

void parse_fit(Obj o, FitSection& f) {
  o.get_path("input", f.input);
  o.get("loss", f.loss);
  o.get("metric", f.metric);
  if (f.metric != "val_1step" && f.metric != "val_6step") {
    fail(o.path("metric"), "must be \"val_1step\" or \"val_6step\"");
  }
  o.finish();
}

void apply_override(json& doc, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + spec + "': expected key.path=value");
  }
  const std::string key = spec.substr(0, eq);
  const std::string text = spec.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::string walked;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (seg.empty()) throw ConfigError("override '" + spec + "': empty path segment");
    walked = join(walked, seg);
    json* next = nullptr;
    if (node->is_array()) {
      char* end = nullptr;
      const long idx = std::strtol(seg.c_str(), &end, 10);
      if (*end != '\0' || idx < 0 || idx >= static_cast<long>(node->size())) {
        throw ConfigError("override '" + spec + "': " + walked + " is not a valid index");
      }
      next = &(*node)[static_cast<std::size_t>(idx)];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) {
        throw ConfigError("override '" + spec + "': " + walked + " is not inside an object");
      }
      next = &(*node)[seg];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    node = next;
    start = dot + 1;
  }
}

json model_json(const ModelConfig& c) {
  return json{{"in_channels", c.in_channels}, {"out_channels", c.out_channels},
              {"grid_h", c.grid_h},           {"grid_w", c.grid_w},
              {"patch", c.patch},             {"embed", c.embed},
              {"depth", c.depth},             {"window_h", c.window_h},
              {"window_w", c.window_w},       {"head_dim", c.head_dim},
              {"mlp_ratio", c.mlp_ratio},     {"pos_enc", c.pos_enc}};
}

std::string aggregation_name(RmseAggregation a) {
  return a == RmseAggregation::pooled ? "pooled" : "mean_of_rmse";
}

json canonical(const ExperimentConfig& c) {
  json j;
  if (c.dataset) {
    json d{{"path", c.dataset->path.generic_string()}};
    if (c.dataset->generation) {
      const auto m = json::parse(manifest_to_json(*c.dataset->generation));
      d["grid"] = m.at("grid");
      d["process"] = m.at("process");
      const auto& sp = c.dataset->generation->splits;
      d["splits"] = {{"train", sp.train_size()}, {"val", sp.val_size()}, {"test", sp.test_size()}};
      d["block_size"] = m.at("block_size");
    }
    j["dataset"] = d;
  }
  json models = json::array();
  for (const auto& m : c.models) models.push_back(model_json(m));
  j["models"] = models;
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},
                {"weight_decay", t.weight_decay},
                {"grad_clip_norm", t.grad_clip_norm},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"loss", t.loss.name()},
                {"log_every", t.log_every},
                {"val_rollout_steps", t.val_rollout_steps},
                {"val_ic_stride", t.val_ic_stride},
                {"amse_band_limit", t.amse_band_limit},
                {"checkpoint_every", c.checkpoint_every}};
  const auto& s = c.schedule;
  j["schedule"] = {{"variant", to_string(s.variant)},
                   {"warmup_iters", s.warmup_iters},
                   {"peak_lr", s.peak_lr},
                   {"total_iters", s.total_iters},
                   {"cooldown_frac", s.cooldown_frac}};
  j["seeds"] = {{"init", c.init_seed}, {"data", c.train.seed}};
  json losses = json::array();
  for (const auto& l : c.sweep.branch_losses) losses.push_back(l.name());
  j["sweep"] = {{"budgets", c.sweep.budgets},
                {"branch_losses", losses},
                {"lr_ref_params", c.sweep.lr_ref_params}};
  j["cooldown"] = {{"checkpoint", c.cooldown.checkpoint.generic_string()},
                   {"total_iters", c.cooldown.total_iters},
                   {"frac", c.cooldown.frac}};
  if (c.cooldown.loss) j["cooldown"]["loss"] = c.cooldown.loss->name();
  j["eval"] = {{"checkpoint", c.eval.checkpoint.generic_string()},
               {"steps", c.eval.steps},
               {"ic_stride", c.eval.ic_stride},
               {"split", c.eval.split},
               {"aggregation", aggregation_name(c.eval.aggregation)},
               {"spectrum_leads", c.eval.spectrum_leads}};
  j["fit"] = {{"input", c.fit.input.generic_string()}, {"loss", c.fit.loss}, {"metric", c.fit.metric}};
  return j;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

const ModelConfig& ExperimentConfig::model() const {
  if (models.size() != 1) {
    throw ConfigError("config: this command needs exactly one model, got " +
                      std::to_string(models.size()));
  }
  return models.front();
}

std::string ExperimentConfig::to_json() const {
  json j = canonical(*this);
  j["output_dir"] = output_dir.generic_string();
  return j.dump(2);
}

std::string ExperimentConfig::hash() const {
  // The output location is not part of the experiment's identity.
  return hex64(fnv1a(canonical(*this).dump()));
}

ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config: not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);

  ExperimentConfig c;
  Obj root(doc, "");
  root.get_path("output_dir", c.output_dir);
  if (root.has("dataset")) c.dataset = parse_dataset(root.child("dataset"));
  const std::optional<DatasetManifest> gen = c.dataset ? c.dataset->generation : std::nullopt;

  if (root.has("model") && root.has("models")) fail("models", "give either model or models, not both");
  if (root.has("model")) c.models.push_back(parse_model(root.child("model"), gen));
  if (root.has("models")) {
    const auto& arr = root.raw("models");
    if (!arr.is_array() || arr.empty()) fail("models", "expected a non-empty array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      c.models.push_back(parse_model(Obj(arr[i], "models[" + std::to_string(i) + "]"), gen));
    }
  }
  for (std::size_t i = 0; i < c.models.size(); ++i) {
    checked("models[" + std::to_string(i) + "]", [&] { c.models[i].validate(); });
  }

  if (root.has("train")) parse_train(root.child("train"), c.train, c.checkpoint_every);
  if (root.has("schedule")) parse_schedule(root.child("schedule"), c.schedule);
  if (root.has("seeds")) {
    auto s = root.child("seeds");
    s.get("init", c.init_seed);
    s.get("data", c.train.seed);
    s.finish();
  }
  checked("train", [&] { c.train.validate(); });
  checked("schedule", [&] { c.schedule.validate(); });

  if (root.has("sweep")) parse_sweep(root.child("sweep"), c.sweep);
  if (root.has("cooldown")) parse_cooldown(root.child("cooldown"), c.cooldown);
  if (root.has("eval")) parse_eval(root.child("eval"), c.eval);
  if (root.has("fit")) parse_fit(root.child("fit"), c.fit);
  root.finish();
  return c;
}

ExperimentConfig load_config(const fs::path& file, const std::vector<std::string>& overrides) {
  std::ifstream is(file);
  if (!is) throw ConfigError("config: cannot open " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides);
}

// ---------------------------------------------------------------------------

std::string code_version() { return SWINSCALE_SOURCE_HASH; }

namespace {

json manifest_json(const RunManifest& m) {
  return json{{"run_id", m.run_id},           {"command", m.command},
              {"config_hash", m.config_hash}, {"code_version", m.code_version},
              {"status", m.status},           {"artifacts", m.artifacts},
              {"created", m.created},         {"updated", m.updated}};
}

}  // namespace

void add_artifact(RunManifest& m, const std::string& relative_path) {
  for (const auto& a : m.artifacts) {
    if (a == relative_path) return;
  }
  m.artifacts.push_back(relative_path);
}

void write_run_manifest(const fs::path& dir, RunManifest& m) {
  if (m.status != "running" && m.status != "complete" && m.status != "failed") {
    throw Error("run manifest: bad status '" + m.status + "'");
  }
  if (const auto old = read_run_manifest(dir)) {
    if (old->run_id != m.run_id) throw Error("run manifest: run id changed in " + dir.string());
    const bool prefix = old->artifacts.size() <= m.artifacts.size() &&
                        std::equal(old->artifacts.begin(), old->artifacts.end(), m.artifacts.begin());
    if (!prefix) throw Error("run manifest: artifacts may only be appended");
    if (m.created.empty()) m.created = old->created;
  }
  const auto now = utc_now();
  if (m.created.empty()) m.created = now;
  m.updated = now;
  fs::create_directories(dir);
  const auto tmp = dir / "run_manifest.json.tmp";
  {
    std::ofstream os(tmp);
    os << manifest_json(m).dump(2) << "\n";
    if (!os) throw Error("run manifest: failed writing " + tmp.string());
  }
  fs::rename(tmp, dir / "run_manifest.json");
}

std::optional<RunManifest> read_run_manifest(const fs::path& dir) {
  const auto p = dir / "run_manifest.json";
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream is(p);
  const json j = json::parse(is, nullptr, false);
  if (j.is_discarded()) throw Error("run manifest: " + p.string() + " is not valid JSON");
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.command = j.at("command").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.status = j.at("status").get<std::string>();
  m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  m.created = j.value("created", std::string());
  m.updated = j.value("updated", std::string());
  return m;
}

}  // namespace swinscale
