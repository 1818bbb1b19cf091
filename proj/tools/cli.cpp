#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "swinscale/config.hpp"
#include "swinscale/dataset_io.hpp"
#include "swinscale/evaluation.hpp"
#include "swinscale/scaling.hpp"
#include "swinscale/sweep.hpp"
#include "swinscale/training.hpp"
#include "swinscale/util.hpp"

namespace swinscale::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string output_dir;
};

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    os << text;
    if (!os) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string checkpoint_name(long step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "ckpt_%08ld.bin", step);
  return buf;
}

std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  if (!fs::exists(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && e.path().extension() == ".bin") {
      if (!best || name > best->filename().string()) best = e.path();
    }
  }
  return best;
}

// Owns the run directory's manifest for one command invocation. A second
// invocation with a different config or command is refused; leaving scope
// without complete() marks the run failed.
class RunDir {
 public:
  RunDir(const ExperimentConfig& cfg, const std::string& command)
      : dir_(resolve_path(cfg.output_dir)) {
    const auto hash = cfg.hash();
    if (auto old = read_run_manifest(dir_)) {
      if (old->command != command) {
        throw ConfigError("run directory " + dir_.string() + " belongs to a '" + old->command +
                          "' run");
      }
      if (old->config_hash != hash) {
        throw ConfigError("run directory " + dir_.string() + " was created with config hash " +
                          old->config_hash + ", this config hashes to " + hash);
      }
      m_ = *old;
      previously_complete_ = old->status == "complete";
    } else {
      m_.run_id = command + "-" + hash;
      m_.command = command;
      m_.config_hash = hash;
    }
    m_.code_version = code_version();
    m_.status = "running";
    write_atomic(dir_ / "config.json", cfg.to_json() + "\n");
    add_artifact(m_, "config.json");
    write_run_manifest(dir_, m_);
  }

  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  ~RunDir() {
    if (done_) return;
    try {
      m_.status = "failed";
      write_run_manifest(dir_, m_);
    } catch (...) {
    }
  }

  const fs::path& dir() const { return dir_; }
  bool previously_complete() const { return previously_complete_; }

  void add(const std::string& relative) {
    add_artifact(m_, relative);
    write_run_manifest(dir_, m_);
  }

  void write(const std::string& relative, const std::string& text) {
    write_atomic(dir_ / relative, text);
    add(relative);
  }

  void complete() {
    for (const auto& a : m_.artifacts) {
      if (!fs::exists(dir_ / a)) throw Error("run manifest lists missing artifact " + a);
    }
    m_.status = "complete";
    write_run_manifest(dir_, m_);
    done_ = true;
  }

 private:
  fs::path dir_;
  RunManifest m_;
  bool previously_complete_ = false;
  bool done_ = false;
};

// ---------------------------------------------------------------------------
// Data

DatasetSection require_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset) throw ConfigError("config: dataset: missing required section");
  return *cfg.dataset;
}

Dataset load_checked_dataset(const ExperimentConfig& cfg) {
  const auto ds = require_dataset(cfg);
  const auto dir = resolve_path(ds.path);
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError("config: dataset.path: no dataset at " + dir.string() + " (run gen-data)");
  }
  Dataset d = load_dataset(dir);
  if (ds.generation && ds.generation->config_hash() != d.manifest.config_hash()) {
    throw ConfigError("config: dataset: stored dataset at " + dir.string() +
                      " was generated from a different configuration");
  }
  return d;
}

void check_model_fits(const ModelConfig& m, const TaskData& task, const std::string& where) {
  const int channels = task.train.empty() ? 0 : task.train.front().values.channels;
  if (m.grid_w != task.grid.n_lon || m.grid_h > task.grid.n_lat) {
    throw ConfigError("config: " + where + ": model grid " + std::to_string(m.grid_h) + "x" +
                      std::to_string(m.grid_w) + " does not fit the dataset grid " +
                      std::to_string(task.grid.n_lat) + "x" + std::to_string(task.grid.n_lon));
  }
  if (m.in_channels != channels || m.out_channels != channels) {
    throw ConfigError("config: " + where + ": model channels do not match the dataset's " +
                      std::to_string(channels));
  }
}

TaskData load_task(const ExperimentConfig& cfg, const ModelConfig& model, const std::string& where) {
  const Dataset d = load_checked_dataset(cfg);
  if (model.grid_h > d.grid.n_lat) {
    throw ConfigError("config: " + where + ": grid_h exceeds the dataset's latitude count");
  }
  TaskData task = prepare_task(d, model.grid_h);
  check_model_fits(model, task, where);
  return task;
}

DatasetManifest dataset_manifest(const ExperimentConfig& cfg) {
  const auto ds = require_dataset(cfg);
  const auto dir = resolve_path(ds.path);
  if (fs::exists(dir / "manifest.json")) return read_manifest(dir);
  if (ds.generation) return *ds.generation;
  throw ConfigError("config: dataset.path: no dataset at " + dir.string());
}

// ---------------------------------------------------------------------------
// Loss logs

std::string loss_csv(const std::vector<LossRecord>& records) {
  std::ostringstream os;
  write_loss_csv(os, records);
  return os.str();
}

std::vector<LossRecord> read_loss_csv(const fs::path& p, long up_to) {
  std::vector<LossRecord> out;
  if (!fs::exists(p)) return out;
  std::istringstream is(read_text(p));
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    LossRecord r;
    char* end = nullptr;
    const char* c = line.c_str();
    r.iteration = std::strtol(c, &end, 10);
    r.lr = std::strtod(end + 1, &end);
    r.train_loss = std::strtod(end + 1, &end);
    r.val_1step = std::strtod(end + 1, &end);
    r.val_6step = std::strtod(end + 1, &end);
    if (r.iteration <= up_to) out.push_back(r);
  }
  return out;
}

json metrics_json(const TrainState& s, const std::vector<LossRecord>& records) {
  json j{{"step", s.step},
         {"params", s.params.values.size()},
         {"loss", s.train.loss.name()},
         {"state_hash", hex64(s.config_hash())},
         {"checkpoint", checkpoint_name(s.step)}};
  if (!records.empty()) {
    const auto& r = records.back();
    j["train_loss"] = r.train_loss;
    j["val_1step"] = r.val_1step;
    j["val_6step"] = r.val_6step;
  }
  return j;
}

void save_and_record(RunDir& rd, const TrainState& s) {
  const auto name = checkpoint_name(s.step);
  if (!fs::exists(rd.dir() / name)) save_checkpoint(rd.dir() / name, s);
  rd.add(name);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const ExperimentConfig& cfg, std::ostream& out) {
  const auto ds = require_dataset(cfg);
  if (!ds.generation) {
    throw ConfigError("config: dataset: gen-data needs grid, process and splits");
  }
  DatasetManifest m = *ds.generation;
  const auto dir = resolve_path(ds.path);
  if (fs::exists(dir / "manifest.json")) {
    const auto old = read_manifest(dir);
    if (old.config_hash() == m.config_hash()) {
      out << "dataset " << dir.string() << " already exists with hash " << m.config_hash()
          << "; skipping\n";
      return kOk;
    }
    throw ConfigError("dataset directory " + dir.string() + " holds a different dataset (hash " +
                      old.config_hash() + ")");
  }
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw ConfigError("dataset directory " + dir.string() +
                      " has partial output without a manifest; remove it first");
  }
  const Dataset d = generate_dataset(m);
  write_dataset(dir, m, d.samples);
  out << "wrote " << d.samples.size() << " samples to " << dir.string() << " (hash "
      << m.config_hash() << ")\n";
  return kOk;
}

int cmd_train(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  const ModelConfig& mc = cfg.model();
  const TaskData task = load_task(cfg, mc, "model");
  const Trainer trainer(task);
  RunDir rd(cfg, "train");

  const TrainState fresh = init_train_state(mc, cfg.train, cfg.schedule, task, cfg.init_seed);
  TrainState s = fresh;
  std::vector<LossRecord> records;
  if (const auto latest = latest_checkpoint(rd.dir())) {
    s = load_checkpoint(*latest);
    if (s.config_hash() != fresh.config_hash()) {
      throw ConfigError("checkpoint " + latest->string() + " does not match this configuration");
    }
    records = read_loss_csv(rd.dir() / "loss.csv", s.step);
    if (s.step < cfg.schedule.total_iters) err << "resuming from step " << s.step << "\n";
  }

  const long total = cfg.schedule.total_iters;
  std::vector<long> stops{total};
  const long t0 = cfg.schedule.cooldown_start();
  if (t0 > 0 && t0 < total) stops.push_back(t0);
  if (cfg.checkpoint_every > 0) {
    for (long k = cfg.checkpoint_every; k < total; k += cfg.checkpoint_every) stops.push_back(k);
  }
  std::sort(stops.begin(), stops.end());
  stops.erase(std::unique(stops.begin(), stops.end()), stops.end());

  for (long stop : stops) {
    if (stop <= s.step) continue;
    auto recs = trainer.run(s, stop);
    records.insert(records.end(), recs.begin(), recs.end());
    save_and_record(rd, s);
    rd.write("loss.csv", loss_csv(records));
  }
  rd.write("metrics.json", metrics_json(s, records).dump(2) + "\n");
  rd.complete();
  if (!records.empty()) {
    out << "step " << s.step << " val_1step " << fmt_g(records.back().val_1step) << " val_6step "
        << fmt_g(records.back().val_6step) << "\n";
  }
  return kOk;
}

int cmd_cooldown(const ExperimentConfig& cfg, std::ostream& out) {
  const auto& cd = cfg.cooldown;
  if (cd.checkpoint.empty()) throw ConfigError("config: cooldown.checkpoint: missing required field");
  if (cd.total_iters <= 0) throw ConfigError("config: cooldown.total_iters: must be > 0");
  const auto ckpt_path = resolve_path(cd.checkpoint);
  if (!fs::exists(ckpt_path)) throw ConfigError("config: cooldown.checkpoint: no file " + ckpt_path.string());
  const TrainState ckpt = load_checkpoint(ckpt_path);
  const TaskData task = load_task(cfg, ckpt.params.config, "cooldown.checkpoint");
  if (ckpt.data_hash != task.data_hash) {
    throw ConfigError("config: cooldown.checkpoint: trained on a different dataset");
  }
  RunDir rd(cfg, "cooldown");
  if (rd.previously_complete()) {
    out << "cooldown in " << rd.dir().string() << " already complete; skipping\n";
    rd.complete();
    return kOk;
  }
  const Trainer trainer(task);
  const auto r = [&] {
    try {
      return trainer.branch_cooldown(ckpt, cd.total_iters, cd.frac, cd.loss);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config: cooldown: ") + e.what());
    }
  }();
  save_and_record(rd, r.state);
  rd.write("loss.csv", loss_csv(r.records));
  json m = metrics_json(r.state, r.records);
  m["from_step"] = ckpt.step;
  m["val_1step"] = r.final_losses.one_step;
  m["val_6step"] = r.final_losses.multi_step;
  rd.write("metrics.json", m.dump(2) + "\n");
  rd.complete();
  out << "step " << r.state.step << " val_1step " << fmt_g(r.final_losses.one_step)
      << " val_6step " << fmt_g(r.final_losses.multi_step) << "\n";
  return kOk;
}

json summary_json(const ScalingSummary& s) {
  json budgets = json::array();
  for (const auto& b : s.budgets) {
    budgets.push_back({{"budget", b.budget},
                       {"by_params", json::parse(to_json(b.by_params, b.budget))},
                       {"by_samples", json::parse(to_json(b.by_samples, b.budget))},
                       {"best_params", b.best_params},
                       {"best_samples", b.best_samples},
                       {"best_loss", b.best_loss}});
  }
  json j{{"budgets", budgets}};
  j["params_law"] = s.params_law ? json::parse(to_json(*s.params_law)) : json(nullptr);
  j["samples_law"] = s.samples_law ? json::parse(to_json(*s.samples_law)) : json(nullptr);
  return j;
}

void print_summary(const ScalingSummary& s, std::ostream& out) {
  for (const auto& b : s.budgets) {
    out << "budget " << fmt_g(b.budget) << ": ";
    if (b.by_params.has_minimum) {
      out << "N* = " << fmt_g(std::pow(10.0, b.by_params.x_star));
    } else {
      out << "no minimum";
    }
    out << "\n";
  }
  if (s.params_law && s.samples_law) {
    out << "alpha_N " << fmt_g(s.params_law->exponent) << " alpha_S " << fmt_g(s.samples_law->exponent)
        << " sum " << fmt_g(s.params_law->exponent + s.samples_law->exponent) << "\n";
  }
}

int cmd_sweep(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.models.empty()) throw ConfigError("config: models: sweep needs at least one model");
  if (cfg.sweep.budgets.empty()) throw ConfigError("config: sweep.budgets: must not be empty");
  for (std::size_t i = 1; i < cfg.models.size(); ++i) {
    if (cfg.models[i].grid_h != cfg.models[0].grid_h) {
      throw ConfigError("config: models[" + std::to_string(i) + "]: all models must share grid_h");
    }
  }
  const TaskData task = load_task(cfg, cfg.models[0], "models[0]");
  for (std::size_t i = 1; i < cfg.models.size(); ++i) {
    check_model_fits(cfg.models[i], task, "models[" + std::to_string(i) + "]");
  }
  SweepSpec spec;
  spec.models = cfg.models;
  spec.budgets = cfg.sweep.budgets;
  spec.train = cfg.train;
  spec.schedule = cfg.schedule;
  spec.lr_ref_params = cfg.sweep.lr_ref_params;
  spec.branch_losses = cfg.sweep.branch_losses;
  spec.init_seed = cfg.init_seed;

  RunDir rd(cfg, "sweep");
  const Trainer trainer(task);
  SweepOptions opts;
  opts.run_dir = rd.dir();
  opts.log = [&](const std::string& s) { err << s << "\n"; };
  const auto rows = run_sweep(trainer, spec, opts);
  rd.add("sweep.json");
  rd.add("rows.jsonl");
  for (std::size_t mi = 0; mi < cfg.models.size(); ++mi) {
    char sub[32];
    std::snprintf(sub, sizeof(sub), "model_%02zu", mi);
    const auto d = rd.dir() / sub;
    if (!fs::exists(d)) continue;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(d)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) rd.add(std::string(sub) + "/" + n);
  }
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  rd.write("sweep.csv", csv.str());
  const auto summary = summarize_sweep(rows, spec.branch_losses.front().name());
  rd.write("summary.json", summary_json(summary).dump(2) + "\n");
  rd.complete();
  out << rows.size() << " rows\n";
  print_summary(summary, out);
  return kOk;
}

int cmd_rollout_eval(const ExperimentConfig& cfg, std::ostream& out) {
  const auto& ev = cfg.eval;
  if (ev.checkpoint.empty()) throw ConfigError("config: eval.checkpoint: missing required field");
  const auto ckpt_path = resolve_path(ev.checkpoint);
  if (!fs::exists(ckpt_path)) throw ConfigError("config: eval.checkpoint: no file " + ckpt_path.string());
  const TrainState ckpt = load_checkpoint(ckpt_path);
  const TaskData task = load_task(cfg, ckpt.params.config, "eval.checkpoint");
  if (ckpt.data_hash != task.data_hash) {
    throw ConfigError("config: eval.checkpoint: trained on a different dataset");
  }
  const auto& split = ev.split == "val" ? task.val : task.test;
  RunDir rd(cfg, "rollout-eval");
  const EmulatorModel model(ckpt.params, task.grid);
  const auto report = evaluate_rollouts(model, split, ev.steps, ev.ic_stride, task.grid, ev.aggregation);
  std::ostringstream csv;
  write_rollout_csv(csv, report);
  rd.write("rollout.csv", csv.str());
  json j{{"checkpoint_step", ckpt.step}, {"split", ev.split},   {"steps", ev.steps},
         {"ic_stride", ev.ic_stride},    {"n_ics", report.n_ics}, {"mse", report.mse},
         {"truncated", report.truncated}};
  if (!ev.spectrum_leads.empty()) {
    const SphericalTransform transform(task.grid, task.band_limit);
    json spectra = json::array();
    for (int lead : ev.spectrum_leads) {
      const auto sr = spectrum_at_lead(model, split, lead, transform, ev.ic_stride);
      char name[64];
      std::snprintf(name, sizeof(name), "spectrum_lead_%02d.csv", lead);
      std::ostringstream s;
      write_spectrum_csv(s, sr);
      rd.write(name, s.str());
      const int lo = 2 * task.band_limit / 3 + 1;
      spectra.push_back({{"lead", lead},
                         {"file", name},
                         {"psd_ratio_error_top_third", psd_ratio_error(sr, lo, task.band_limit)}});
    }
    j["spectra"] = spectra;
  }
  rd.write("report.json", j.dump(2) + "\n");
  rd.complete();
  for (std::size_t i = 0; i < report.mse.size(); ++i) {
    out << "lead " << i + 1 << " mse " << fmt_g(report.mse[i]) << "\n";
  }
  if (report.truncated) out << "rollout truncated by a non-finite state\n";
  return kOk;
}

int cmd_flops(const ExperimentConfig& cfg, std::ostream& out) {
  if (cfg.models.empty()) throw ConfigError("config: models: missing required field");
  RunDir rd(cfg, "flops");
  std::ostringstream csv;
  csv << "model,params,flops_per_sample,training_flops_per_sample\n";
  for (std::size_t i = 0; i < cfg.models.size(); ++i) {
    const auto& m = cfg.models[i];
    const double f = flops_per_sample(m);
    const double t = training_flops_per_sample(m);
    csv << i << "," << param_count(m) << "," << fmt_g(f) << "," << fmt_g(t) << "\n";
    out << "model " << i << ": params " << param_count(m) << ", F = " << fmt_g(f) << ", training "
        << fmt_g(t) << "\n";
  }
  rd.write("flops.csv", csv.str());
  rd.complete();
  return kOk;
}

int cmd_plan_isoflop(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.models.empty()) throw ConfigError("config: models: missing required field");
  if (cfg.sweep.budgets.empty()) throw ConfigError("config: sweep.budgets: must not be empty");
  const auto m = dataset_manifest(cfg);
  const long dataset_len = m.splits.train_size() - 1;
  RunDir rd(cfg, "plan-isoflop");
  std::ostringstream csv;
  csv << "budget,model,embed,depth,params,iterations,samples,epochs,flops\n";
  for (double budget : cfg.sweep.budgets) {
    const auto plan = plan_isoflop(budget, cfg.models, cfg.train.batch_size, dataset_len,
                                   cfg.schedule.warmup_iters + 1);
    for (const auto& w : plan.warnings) err << "budget " << fmt_g(budget) << ": " << w << "\n";
    for (const auto& e : plan.entries) {
      const auto idx = std::find(cfg.models.begin(), cfg.models.end(), e.config) - cfg.models.begin();
      csv << fmt_g(budget) << "," << idx << "," << e.config.embed << "," << e.config.depth << ","
          << e.params << "," << e.iterations << "," << e.samples << "," << fmt_g(e.epochs) << ","
          << fmt_g(e.flops) << "\n";
      out << "budget " << fmt_g(budget) << " model " << idx << ": " << e.iterations
          << " iterations, " << fmt_g(e.epochs) << " epochs\n";
    }
  }
  rd.write("plan.csv", csv.str());
  rd.complete();
  return kOk;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int cmd_fit_scaling(const ExperimentConfig& cfg, std::ostream& out) {
  const auto input = cfg.fit.input.empty() ? resolve_path(cfg.output_dir) / "sweep.csv"
                                           : resolve_path(cfg.fit.input);
  if (!fs::exists(input)) throw ConfigError("config: fit.input: no file " + input.string());
  std::istringstream is(read_text(input));
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("config: fit.input: empty file");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  auto need = [&](const std::string& name) {
    if (!col.count(name)) throw ConfigError("config: fit.input: missing column '" + name + "'");
    return col.at(name);
  };
  std::vector<std::vector<std::string>> cells;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    cells.push_back(split_csv_line(line));
    if (cells.back().size() != header.size()) {
      throw ConfigError("config: fit.input: row " + std::to_string(cells.size()) + " has " +
                        std::to_string(cells.back().size()) + " cells");
    }
  }
  auto num = [](const std::string& s) { return std::strtod(s.c_str(), nullptr); };

  if (col.count("optimum")) {
    const auto cb = need("budget"), co = col.at("optimum");
    std::vector<double> c, y;
    for (const auto& r : cells) {
      c.push_back(num(r[cb]));
      y.push_back(num(r[co]));
    }
    const auto fit = fit_powerlaw(c, y);
    RunDir rd(cfg, "fit-scaling");
    rd.write("fit.json", json::parse(to_json(fit)).dump(2) + "\n");
    rd.complete();
    out << "exponent " << fmt_g(fit.exponent) << " intercept " << fmt_g(fit.intercept) << "\n";
    return kOk;
  }

  std::vector<SweepRow> rows;
  const auto cb = need("budget"), cm = need("model"), cp = need("params"), ci = need("iterations"),
             cs = need("samples"), ce = need("epochs"), cl = need("loss"), c1 = need("val_1step"),
             c6 = need("val_6step"), cst = need("status");
  for (const auto& r : cells) {
    SweepRow row;
    row.budget = num(r[cb]);
    row.model = std::atoi(r[cm].c_str());
    row.params = static_cast<std::size_t>(std::strtoull(r[cp].c_str(), nullptr, 10));
    row.iterations = std::atol(r[ci].c_str());
    row.samples = std::atol(r[cs].c_str());
    row.epochs = num(r[ce]);
    row.loss = r[cl];
    row.val_1step = num(r[c1]);
    row.val_6step = num(r[c6]);
    row.status = r[cst];
    rows.push_back(row);
  }
  const auto summary = summarize_sweep(rows, cfg.fit.loss, cfg.fit.metric == "val_6step");
  RunDir rd(cfg, "fit-scaling");
  rd.write("summary.json", summary_json(summary).dump(2) + "\n");
  rd.complete();
  print_summary(summary, out);
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Swin emulator scaling experiments"};
  app.require_subcommand(1);
  Common common;
  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd cmds[] = {
      {"gen-data", "Generate the synthetic dataset"},
      {"train", "Train one model (resumes from the run directory)"},
      {"cooldown", "Branch a cooldown from a checkpoint"},
      {"sweep", "IsoFLOP sweep: one constant run per model, one cooldown per budget"},
      {"rollout-eval", "Autoregressive rollout RMSE and spectra for a checkpoint"},
      {"flops", "Analytical FLOPs per sample"},
      {"plan-isoflop", "Iterations per model for each budget"},
      {"fit-scaling", "Parabola and power-law fits"},
  };
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", common.config, "JSON config file")->required();
    sub->add_option("--set", common.sets, "Override a config field: key.path=value");
    sub->add_option("-o,--output-dir", common.output_dir, "Run directory (overrides output_dir)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    auto sets = common.sets;
    if (!common.output_dir.empty()) sets.push_back("output_dir=\"" + common.output_dir + "\"");
    const ExperimentConfig cfg = load_config(common.config, sets);
    if (name == "gen-data") return cmd_gen_data(cfg, out);
    if (name == "train") return cmd_train(cfg, out, err);
    if (name == "cooldown") return cmd_cooldown(cfg, out);
    if (name == "sweep") return cmd_sweep(cfg, out, err);
    if (name == "rollout-eval") return cmd_rollout_eval(cfg, out);
    if (name == "flops") return cmd_flops(cfg, out);
    if (name == "plan-isoflop") return cmd_plan_isoflop(cfg, out, err);
    if (name == "fit-scaling") return cmd_fit_scaling(cfg, out);
    err << "unknown command " << name << "\n";
    return kFailure;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace swinscale::cli
