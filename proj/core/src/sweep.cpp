#include "swinscale/sweep.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "swinscale/util.hpp"

namespace swinscale {

namespace fs = std::filesystem;
using nlohmann::json;

void SweepSpec::validate() const {
  if (models.empty()) throw ConfigError("sweep.models must not be empty");
  if (budgets.empty()) throw ConfigError("sweep.budgets must not be empty");
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    if (!(budgets[i] > 0.0)) throw ConfigError("sweep.budgets must be positive");
    if (i > 0 && !(budgets[i] > budgets[i - 1])) {
      throw ConfigError("sweep.budgets must be strictly increasing");
    }
  }
  if (branch_losses.empty()) throw ConfigError("sweep.branch_losses must not be empty");
  for (const auto& m : models) m.validate();
  train.validate();
  if (!(schedule.cooldown_frac >= 0.0 && schedule.cooldown_frac < 1.0)) {
    throw ConfigError("sweep.schedule.cooldown_frac must be in [0, 1)");
  }
  if (!(schedule.peak_lr > 0.0)) throw ConfigError("sweep.schedule.peak_lr must be > 0");
}

std::uint64_t SweepSpec::hash() const {
  Fnv1a h;
  h.update("sweep-v1");
  for (const auto& m : models) h.update_pod(m.hash());
  for (double b : budgets) h.update_pod(b);
  h.update_pod(train.hash());
  h.update_pod(static_cast<std::int64_t>(train.val_rollout_steps));
  h.update_pod(static_cast<std::int64_t>(train.val_ic_stride));
  h.update_pod(static_cast<std::int64_t>(train.amse_band_limit));
  h.update_pod(static_cast<std::int64_t>(schedule.warmup_iters));
  h.update_pod(schedule.peak_lr);
  h.update_pod(schedule.cooldown_frac);
  h.update_pod(lr_ref_params);
  for (const auto& l : branch_losses) h.update(l.name());
  h.update_pod(init_seed);
  return h.digest();
}

double SweepSpec::peak_lr_for(const ModelConfig& m) const {
  if (lr_ref_params <= 0.0) return schedule.peak_lr;
  return schedule.peak_lr * std::sqrt(lr_ref_params / static_cast<double>(param_count(m)));
}

std::string sweep_row_json(const SweepRow& r) {
  return json{{"budget", r.budget},       {"model", r.model},         {"params", r.params},
              {"iterations", r.iterations}, {"samples", r.samples},   {"epochs", r.epochs},
              {"loss", r.loss},           {"val_1step", r.val_1step}, {"val_6step", r.val_6step},
              {"status", r.status}}
      .dump();
}

SweepRow sweep_row_from_json(const std::string& line) {
  const json j = json::parse(line);
  SweepRow r;
  r.budget = j.at("budget").get<double>();
  r.model = j.at("model").get<int>();
  r.params = j.at("params").get<std::size_t>();
  r.iterations = j.at("iterations").get<long>();
  r.samples = j.at("samples").get<long>();
  r.epochs = j.at("epochs").get<double>();
  r.loss = j.at("loss").get<std::string>();
  r.val_1step = j.at("val_1step").is_null() ? NAN : j.at("val_1step").get<double>();
  r.val_6step = j.at("val_6step").is_null() ? NAN : j.at("val_6step").get<double>();
  r.status = j.at("status").get<std::string>();
  return r;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "budget,model,params,iterations,samples,epochs,loss,val_1step,val_6step,status\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g,%d,%zu,%ld,%ld,%.17g,%s,%.17g,%.17g,%s\n", r.budget,
                  r.model, r.params, r.iterations, r.samples, r.epochs, r.loss.c_str(),
                  r.val_1step, r.val_6step, r.status.c_str());
    os << buf;
  }
}

namespace {

std::string row_key(int model, double budget, const std::string& loss) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%d/%.17g/%s", model, budget, loss.c_str());
  return buf;
}

struct Branch {
  int budget_index;
  long iterations;
  long t0;
};

fs::path checkpoint_path(const fs::path& dir, int model, long t0) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "model_%02d/ckpt_%08ld.bin", model, t0);
  return dir / buf;
}

void write_json_atomic(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    os << j.dump(2) << "\n";
    if (!os) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

std::vector<SweepRow> run_sweep(const Trainer& trainer, const SweepSpec& spec,
                                const SweepOptions& options) {
  spec.validate();
  auto log = [&](const std::string& s) {
    if (options.log) options.log(s);
  };
  const long dataset_len = trainer.pair_count();
  Fnv1a hh;
  hh.update_pod(spec.hash());
  hh.update(trainer.task().data_hash);
  const std::string hash = hex64(hh.digest());

  std::map<std::string, SweepRow> done;
  std::vector<SweepRow> rows;
  std::ofstream row_log;
  if (options.run_dir) {
    const fs::path& dir = *options.run_dir;
    fs::create_directories(dir);
    const fs::path manifest = dir / "sweep.json";
    if (fs::exists(manifest)) {
      std::ifstream is(manifest);
      const json m = json::parse(is);
      if (m.at("config_hash").get<std::string>() != hash) {
        throw ConfigError("run directory " + dir.string() +
                          " belongs to a different sweep configuration (config hash mismatch)");
      }
    }
    write_json_atomic(manifest, {{"config_hash", hash}, {"status", "running"}});
    std::ifstream is(dir / "rows.jsonl");
    for (std::string line; std::getline(is, line);) {
      if (line.empty()) continue;
      const auto r = sweep_row_from_json(line);
      done[row_key(r.model, r.budget, r.loss)] = r;
    }
    row_log.open(dir / "rows.jsonl", std::ios::app);
  }

  auto emit = [&](const SweepRow& r) {
    rows.push_back(r);
    if (row_log.is_open()) {
      row_log << sweep_row_json(r) << "\n";
      row_log.flush();
    }
    if (options.on_row) options.on_row(r);
  };

  for (int mi = 0; mi < static_cast<int>(spec.models.size()); ++mi) {
    const ModelConfig& model = spec.models[mi];
    const std::size_t n_params = param_count(model);
    const double per_iter = training_flops_per_sample(model) * static_cast<double>(spec.train.batch_size);

    std::vector<Branch> branches;
    for (int bi = 0; bi < static_cast<int>(spec.budgets.size()); ++bi) {
      const std::array<ModelConfig, 1> one{model};
      const auto plan = plan_isoflop(spec.budgets[bi], one, spec.train.batch_size, dataset_len,
                                     spec.schedule.warmup_iters + 1);
      if (plan.entries.empty()) {
        SweepRow r;
        r.budget = spec.budgets[bi];
        r.model = mi;
        r.params = n_params;
        r.iterations = std::lround(spec.budgets[bi] / per_iter);
        r.samples = r.iterations * spec.train.batch_size;
        r.epochs = static_cast<double>(r.samples) / static_cast<double>(dataset_len);
        r.val_1step = r.val_6step = NAN;
        r.status = "skipped";
        for (const auto& l : spec.branch_losses) {
          r.loss = l.name();
          const auto key = row_key(mi, r.budget, r.loss);
          if (done.count(key)) {
            rows.push_back(done[key]);
          } else {
            emit(r);
          }
        }
        for (const auto& w : plan.warnings) log("warning: " + w);
        continue;
      }
      const long it = plan.entries[0].iterations;
      LRScheduleSpec probe = spec.schedule;
      probe.variant = ScheduleVariant::constant_cooldown;
      probe.total_iters = it;
      const long t0 = probe.cooldown_start();
      if (t0 < spec.schedule.warmup_iters) {
        log("warning: model " + std::to_string(mi) + " budget " + std::to_string(bi) +
            ": cooldown would start inside warmup; skipped");
        continue;
      }
      branches.push_back({bi, it, t0});
    }
    if (branches.empty()) continue;

    auto branch_done = [&](const Branch& b) {
      for (const auto& l : spec.branch_losses) {
        if (!done.count(row_key(mi, spec.budgets[b.budget_index], l.name()))) return false;
      }
      return true;
    };
    std::size_t first_open = 0;
    while (first_open < branches.size() && branch_done(branches[first_open])) ++first_open;
    for (std::size_t k = 0; k < std::min(first_open, branches.size()); ++k) {
      for (const auto& l : spec.branch_losses) {
        rows.push_back(done[row_key(mi, spec.budgets[branches[k].budget_index], l.name())]);
      }
    }
    if (first_open == branches.size()) {
      log("model " + std::to_string(mi) + ": all branches already complete");
      continue;
    }

    LRScheduleSpec constant = spec.schedule;
    constant.variant = ScheduleVariant::constant_cooldown;
    constant.cooldown_frac = 0.0;
    constant.total_iters = branches.back().iterations;
    constant.peak_lr = spec.peak_lr_for(model);
    TrainState state = init_train_state(model, spec.train, constant, trainer.task(), spec.init_seed);
    // Resume from the latest checkpoint not beyond the first open branch.
    if (options.run_dir) {
      for (std::size_t k = first_open + 1; k-- > 0;) {
        const auto p = checkpoint_path(*options.run_dir, mi, branches[k].t0);
        if (fs::exists(p)) {
          TrainState loaded = load_checkpoint(p);
          if (loaded.config_hash() != state.config_hash()) {
            throw ConfigError("checkpoint " + p.string() + " does not match the sweep configuration");
          }
          state = std::move(loaded);
          log("model " + std::to_string(mi) + ": resuming from " + p.string());
          break;
        }
      }
    }

    bool diverged = false;
    for (std::size_t k = first_open; k < branches.size(); ++k) {
      const Branch& b = branches[k];
      const double budget = spec.budgets[b.budget_index];
      if (!diverged) {
        try {
          if (state.step < b.t0) {
            log("model " + std::to_string(mi) + ": constant phase to " + std::to_string(b.t0));
            auto recs = trainer.run(state, b.t0);
            if (options.run_dir) {
              const fs::path csv = *options.run_dir / ("model_" + std::string(mi < 10 ? "0" : "") +
                                                       std::to_string(mi)) / "constant_log.csv";
              fs::create_directories(csv.parent_path());
              const bool fresh = !fs::exists(csv);
              std::ofstream os(csv, std::ios::app);
              std::ostringstream body;
              write_loss_csv(body, recs);
              std::string text = body.str();
              if (!fresh) text = text.substr(text.find('\n') + 1);
              os << text;
            }
          }
          if (options.run_dir) {
            const auto p = checkpoint_path(*options.run_dir, mi, b.t0);
            if (!fs::exists(p)) save_checkpoint(p, state);
          }
        } catch (const NumericalError& e) {
          log("model " + std::to_string(mi) + ": constant phase diverged: " + e.what());
          diverged = true;
        }
      }
      for (const auto& l : spec.branch_losses) {
        const auto key = row_key(mi, budget, l.name());
        if (done.count(key)) {
          rows.push_back(done[key]);
          continue;
        }
        SweepRow r;
        r.budget = budget;
        r.model = mi;
        r.params = n_params;
        r.iterations = b.iterations;
        r.samples = b.iterations * spec.train.batch_size;
        r.epochs = static_cast<double>(r.samples) / static_cast<double>(dataset_len);
        r.loss = l.name();
        r.val_1step = r.val_6step = NAN;
        r.status = "diverged";
        if (!diverged) {
          try {
            log("model " + std::to_string(mi) + ": cooldown branch " + l.name() + " to " +
                std::to_string(b.iterations));
            const auto br = trainer.branch_cooldown(state, b.iterations, spec.schedule.cooldown_frac, l);
            r.val_1step = br.final_losses.one_step;
            r.val_6step = br.final_losses.multi_step;
            r.status = "ok";
          } catch (const NumericalError& e) {
            log("model " + std::to_string(mi) + ": branch diverged: " + e.what());
          }
        }
        emit(r);
      }
    }
  }
  if (options.run_dir) {
    write_json_atomic(*options.run_dir / "sweep.json", {{"config_hash", hash}, {"status", "complete"}});
  }
  return rows;
}

ScalingSummary summarize_sweep(const std::vector<SweepRow>& rows, const std::string& loss,
                               bool use_multi_step) {
  std::map<double, std::vector<const SweepRow*>> by_budget;
  for (const auto& r : rows) {
    if (r.status == "ok" && r.loss == loss) by_budget[r.budget].push_back(&r);
  }
  ScalingSummary s;
  std::vector<double> cs, ns, ss;
  for (const auto& [budget, pts] : by_budget) {
    if (pts.size() < 3) continue;
    ScalingSummary::Budget b;
    b.budget = budget;
    std::vector<double> xn, xs, y;
    b.best_loss = INFINITY;
    for (const auto* r : pts) {
      const double v = use_multi_step ? r->val_6step : r->val_1step;
      xn.push_back(std::log10(static_cast<double>(r->params)));
      xs.push_back(std::log10(static_cast<double>(r->samples)));
      y.push_back(v);
      if (v < b.best_loss) {
        b.best_loss = v;
        b.best_params = static_cast<double>(r->params);
        b.best_samples = static_cast<double>(r->samples);
      }
    }
    b.by_params = fit_parabola(xn, y);
    b.by_samples = fit_parabola(xs, y);
    if (b.by_params.has_minimum && b.by_samples.has_minimum) {
      cs.push_back(budget);
      ns.push_back(std::pow(10.0, b.by_params.x_star));
      ss.push_back(std::pow(10.0, b.by_samples.x_star));
    }
    s.budgets.push_back(b);
  }
  if (cs.size() >= 2) {
    s.params_law = fit_powerlaw(cs, ns);
    s.samples_law = fit_powerlaw(cs, ss);
  }
  return s;
}

}  // namespace swinscale
