#pragma once

// Grid search over fusion position x joint-phase epochs.
//
// Per position one joint run is trained and evaluated at each listed epoch count. The learning
// rate schedule only depends on the run length after the cutover epoch, so epoch counts up to the
// cutover share the run, and longer counts branch from the cutover state with their own decay.
// Every cell therefore equals a from-scratch joint run of that length.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <functional>
#include <json.hpp>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mustgan/evaluate.hpp"
#include "mustgan/train.hpp"

namespace mustgan {

enum class SelectionMetric { psnr, ssim };

inline const char* to_string(SelectionMetric m) { return m == SelectionMetric::psnr ? "psnr" : "ssim"; }
inline SelectionMetric selection_metric_from_string(const std::string& s) {
  if (s == "psnr") return SelectionMetric::psnr;
  if (s == "ssim") return SelectionMetric::ssim;
  throw std::invalid_argument("unknown selection metric '" + s + "' (psnr | ssim)");
}

struct SweepGrid {
  std::vector<std::size_t> fusion_positions;
  std::vector<std::size_t> epoch_values;
  SelectionMetric selection_metric = SelectionMetric::psnr;

  /// 1..L-1 by 1 and 5..100 by 5.
  static SweepGrid full(const GeneratorSpec& spec) {
    SweepGrid g;
    for (std::size_t i = 1; i < spec.total_layers(); ++i) g.fusion_positions.push_back(i);
    for (std::size_t e = 5; e <= 100; e += 5) g.epoch_values.push_back(e);
    return g;
  }

  void validate(const GeneratorSpec& spec) const {
    if (fusion_positions.empty() || epoch_values.empty()) throw std::invalid_argument("sweep grid is empty");
    for (std::size_t i : fusion_positions)
      if (i < 1 || i >= spec.total_layers())
        throw std::invalid_argument("sweep fusion position " + std::to_string(i) + " outside 1.." +
                                    std::to_string(spec.total_layers() - 1));
    for (std::size_t k = 0; k < epoch_values.size(); ++k) {
      if (epoch_values[k] < 1) throw std::invalid_argument("sweep epoch values must be positive");
      if (k > 0 && epoch_values[k] <= epoch_values[k - 1])
        throw std::invalid_argument("sweep epoch values must be strictly ascending");
    }
    std::set<std::size_t> seen(fusion_positions.begin(), fusion_positions.end());
    if (seen.size() != fusion_positions.size()) throw std::invalid_argument("duplicate sweep fusion position");
  }

  std::size_t cell_count() const { return fusion_positions.size() * epoch_values.size(); }
};

struct SweepCell {
  std::size_t fusion_i = 0;
  std::size_t epochs = 0;
  double val_psnr = 0;
  double val_ssim = 0;
  std::string status = "pending";  // ok | failed
  std::string error;
  std::uint64_t stream_digest = 0;  // stream parameters at the start of the cell's run
  double seconds = 0;

  bool ok() const { return status == "ok"; }
  double metric(SelectionMetric m) const { return m == SelectionMetric::psnr ? val_psnr : val_ssim; }
};

/// True when a should be selected over b: higher metric, then fewer epochs, then smaller i.
inline bool cell_preferred(const SweepCell& a, const SweepCell& b, SelectionMetric m) {
  if (a.metric(m) != b.metric(m)) return a.metric(m) > b.metric(m);
  if (a.epochs != b.epochs) return a.epochs < b.epochs;
  return a.fusion_i < b.fusion_i;
}

struct PositionSensitivity {
  std::size_t fusion_i = 0;
  FusionRegime regime = FusionRegime::late;
  double best = 0;
  std::size_t best_epochs = 0;
};

struct Sensitivity {
  std::vector<PositionSensitivity> positions;
  double spread = 0;  // max - min over per-position bests
};

struct SweepReport {
  SweepGrid grid;
  std::vector<SweepCell> cells;  // position-major, epochs ascending
  std::optional<SweepCell> selected;

  const SweepCell& cell(std::size_t i, std::size_t e) const {
    for (const auto& c : cells)
      if (c.fusion_i == i && c.epochs == e) return c;
    throw std::out_of_range("no sweep cell (" + std::to_string(i) + ", " + std::to_string(e) + ")");
  }

  void select() {
    selected.reset();
    for (const auto& c : cells)
      if (c.ok() && (!selected || cell_preferred(c, *selected, grid.selection_metric))) selected = c;
  }

  std::string to_csv() const {
    std::string out = "fusion_i,epochs,val_psnr,val_ssim,status\n";
    char buf[160];
    for (const auto& c : cells) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%s\n", c.fusion_i, c.epochs, c.val_psnr, c.val_ssim,
                    c.status.c_str());
      out += buf;
    }
    return out;
  }
};

inline Sensitivity sensitivity(const SweepReport& rep, const GeneratorSpec& spec, std::size_t K) {
  Sensitivity s;
  for (std::size_t i : rep.grid.fusion_positions) {
    std::optional<SweepCell> best;
    for (const auto& c : rep.cells)
      if (c.fusion_i == i && c.ok() && (!best || cell_preferred(c, *best, rep.grid.selection_metric))) best = c;
    if (!best) continue;
    s.positions.push_back({i, FusionConfig::make(i, K, spec).regime, best->metric(rep.grid.selection_metric), best->epochs});
  }
  if (!s.positions.empty()) {
    const auto [lo, hi] = std::minmax_element(s.positions.begin(), s.positions.end(),
                                              [](const auto& a, const auto& b) { return a.best < b.best; });
    s.spread = hi->best - lo->best;
  }
  return s;
}

inline nlohmann::json to_json(const SweepReport& rep, const Sensitivity& sens) {
  nlohmann::json j;
  j["grid"] = {{"fusion_positions", rep.grid.fusion_positions},
               {"epoch_values", rep.grid.epoch_values},
               {"selection_metric", to_string(rep.grid.selection_metric)}};
  j["cells"] = nlohmann::json::array();
  for (const auto& c : rep.cells) {
    nlohmann::json cj = {{"fusion_i", c.fusion_i}, {"epochs", c.epochs}, {"status", c.status}};
    if (c.ok()) {
      cj["val_psnr"] = std::isinf(c.val_psnr) ? nlohmann::json("inf") : nlohmann::json(c.val_psnr);
      cj["val_ssim"] = c.val_ssim;
    } else {
      cj["error"] = c.error;
    }
    j["cells"].push_back(cj);
  }
  j["selected"] = rep.selected ? nlohmann::json{{"fusion_i", rep.selected->fusion_i}, {"epochs", rep.selected->epochs}}
                               : nlohmann::json(nullptr);
  nlohmann::json pos = nlohmann::json::array();
  for (const auto& p : sens.positions)
    pos.push_back({{"fusion_i", p.fusion_i}, {"regime", to_string(p.regime)}, {"best", p.best}, {"best_epochs", p.best_epochs}});
  j["sensitivity"] = {{"positions", pos}, {"spread", sens.spread}};
  return j;
}

inline std::string summary_text(const SweepReport& rep, const Sensitivity& sens) {
  std::string out;
  char buf[200];
  if (rep.selected)
    std::snprintf(buf, sizeof buf, "selected fusion_i=%zu epochs=%zu (val %s %.4f)\n", rep.selected->fusion_i,
                  rep.selected->epochs, to_string(rep.grid.selection_metric),
                  rep.selected->metric(rep.grid.selection_metric));
  else
    std::snprintf(buf, sizeof buf, "no cell completed\n");
  out += buf;
  for (const auto& p : sens.positions) {
    std::snprintf(buf, sizeof buf, "  i=%-3zu %-12s best %.4f at %zu epochs\n", p.fusion_i, to_string(p.regime), p.best,
                  p.best_epochs);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "spread across positions: %.4f\n", sens.spread);
  out += buf;
  std::size_t failed = 0;
  for (const auto& c : rep.cells) failed += !c.ok();
  if (failed) {
    std::snprintf(buf, sizeof buf, "failed cells: %zu\n", failed);
    out += buf;
  }
  return out;
}

struct SweepOptions {
  std::size_t parallel = 1;  // positions trained concurrently
  double finetune_lr_ratio = 0.5;
  /// Called after each evaluated cell (serialized).
  std::function<void(const SweepCell&)> on_cell;
};

template <class T>
struct SweepResult {
  SweepReport report;
  std::optional<MultiStreamModel<T>> best_model;
};

namespace detail {

template <class T>
struct PositionOutcome {
  std::vector<SweepCell> cells;
  std::optional<MultiStreamModel<T>> best;
  std::optional<SweepCell> best_cell;
};

template <class T>
void score_cell(SweepCell& cell, const MultiStreamModel<T>& model, const std::vector<const PhantomSample*>& val,
                const RoleIndices& roles) {
  const auto rep = evaluate({{"mustgan", model_synthesizer(model, roles, "mustgan")}}, val, roles, "val");
  cell.val_psnr = rep.models[0].psnr_slices.mean;
  cell.val_ssim = rep.models[0].ssim_slices.mean;
  cell.status = "ok";
}

template <class T>
PositionOutcome<T> sweep_position(const MultiStreamModel<T>& streams, std::size_t i, const TrainingSet<T>& train,
                                  const std::vector<const PhantomSample*>& val, const RoleIndices& roles,
                                  const SweepGrid& grid, const TrainConfig& cfg, const SweepOptions& opt,
                                  std::mutex& report_mutex) {
  PositionOutcome<T> out;
  for (std::size_t e : grid.epoch_values) {
    SweepCell c;
    c.fusion_i = i;
    c.epochs = e;
    out.cells.push_back(c);
  }
  auto finish = [&](SweepCell& c, const MultiStreamModel<T>& model) {
    if (c.ok() && (!out.best_cell || cell_preferred(c, *out.best_cell, grid.selection_metric))) {
      out.best_cell = c;
      out.best.emplace(clone_model(model));
    }
    if (opt.on_cell) {
      std::lock_guard lock(report_mutex);
      opt.on_cell(c);
    }
  };
  auto fail_rest = [&](std::size_t from, const std::string& why) {
    for (std::size_t k = from; k < out.cells.size(); ++k)
      if (out.cells[k].status == "pending") {
        out.cells[k].status = "failed";
        out.cells[k].error = why;
        finish(out.cells[k], streams);
      }
  };

  // Shared run up to min(max epochs, cutover).
  MultiStreamModel<T> model = clone_model(streams);
  model.detach_joint();
  const std::uint64_t digest = parameter_digest(model.parameters());
  model.attach_joint(i, cfg.seed);
  const std::size_t max_e = grid.epoch_values.back();
  const std::size_t shared_end = std::min(max_e, cfg.cutover);

  TrainConfig shared = cfg;
  shared.epochs = max_e;  // schedule is constant up to the cutover for any run length
  JointTrainer<T> trainer(model, shared, opt.finetune_lr_ratio);
  std::size_t next = 0;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    for (std::size_t e = 1; e <= shared_end; ++e) {
      trainer.run_epoch(e, train);
      while (next < out.cells.size() && out.cells[next].epochs == e) {
        auto& c = out.cells[next++];
        c.stream_digest = digest;
        score_cell(c, model, val, roles);
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        finish(c, model);
      }
    }
  } catch (const NumericAbort& err) {
    fail_rest(next, err.what());
    return out;
  }

  // Longer runs branch from the cutover state, each with its own decay to zero.
  for (; next < out.cells.size(); ++next) {
    auto& c = out.cells[next];
    c.stream_digest = digest;
    try {
      MultiStreamModel<T> branch = clone_model(model);
      TrainConfig bc = cfg;
      bc.epochs = c.epochs;
      JointTrainer<T> bt(branch, bc, opt.finetune_lr_ratio);
      bt.generator_optimizer().copy_state_from(trainer.generator_optimizer());
      bt.discriminator_optimizer().copy_state_from(trainer.discriminator_optimizer());
      bt.run(train, nullptr, shared_end + 1);
      score_cell(c, branch, val, roles);
      c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      finish(c, branch);
    } catch (const NumericAbort& err) {
      c.status = "failed";
      c.error = err.what();
      finish(c, model);
    }
  }
  return out;
}

}  // namespace detail

/// Phase-1 `streams` are shared read-only; every cell fine-tunes its own copy. Joint networks
/// start fresh from (cfg.seed, i).
template <class T>
SweepResult<T> run_sweep(const MultiStreamModel<T>& streams, const TrainingSet<T>& train,
                         const std::vector<const PhantomSample*>& val, const RoleIndices& roles, const SweepGrid& grid,
                         const TrainConfig& cfg, const SweepOptions& opt = {}) {
  grid.validate(streams.generator_spec());
  cfg.validate();
  if (val.empty()) throw std::invalid_argument("sweep needs a non-empty validation split");
  std::vector<detail::PositionOutcome<T>> outcomes(grid.fusion_positions.size());
  std::mutex mu;
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.parallel, grid.fusion_positions.size()));
  if (workers == 1) {
    for (std::size_t p = 0; p < outcomes.size(); ++p)
      outcomes[p] = detail::sweep_position(streams, grid.fusion_positions[p], train, val, roles, grid, cfg, opt, mu);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t p; (p = next++) < outcomes.size();) {
          try {
            outcomes[p] = detail::sweep_position(streams, grid.fusion_positions[p], train, val, roles, grid, cfg, opt, mu);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  SweepResult<T> res;
  res.report.grid = grid;
  std::optional<std::size_t> best_pos;
  for (std::size_t p = 0; p < outcomes.size(); ++p) {
    for (auto& c : outcomes[p].cells) res.report.cells.push_back(c);
    if (outcomes[p].best_cell &&
        (!best_pos || cell_preferred(*outcomes[p].best_cell, *outcomes[*best_pos].best_cell, grid.selection_metric)))
      best_pos = p;
  }
  res.report.select();
  if (best_pos) res.best_model = std::move(outcomes[*best_pos].best);
  return res;
}

}  // namespace mustgan
