// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_RUNNER_HPP
#define DYNSPARSE_RUNNER_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "config.hpp"
#include "error.hpp"
#include "flops.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "random.hpp"
#include "scheduler.hpp"
#include "tensor.hpp"

namespace dynsparse {

/// Optional observation points for tests and audits. None of them may mutate
/// the training state.
struct RunHooks {
  /// After every optimizer step; `step` counts completed steps.
  std::function<void(std::uint64_t step, const Model&, const OptimState&)>
      on_step;
  /// After every sparsity update.
  std::function<void(const UpdateRecord&, const Model&, const OptimState&)>
      on_update;
};

struct RunResult {
  std::string label;
  Mode mode = Mode::dense;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string failure;
  double final_eval_loss = std::numeric_limits<double>::quiet_NaN();
  double best_eval_loss = std::numeric_limits<double>::quiet_NaN();
  MetricsLog metrics;
  std::vector<UpdateRecord> updates;
  /// Per sparse layer, in layer order.
  std::vector<double> achieved_sparsity;
  std::size_t block_size = 1;
  double flops_per_step = 0.0;
  double flops_total = 0.0;
  double final_dof_mean = 1.0;
  double wall_clock_seconds = 0.0;
  Model initial_model;
  Model final_model;
  nlohmann::json config;

  double mean_achieved_sparsity() const {
    return achieved_sparsity.empty() ? 0.0 : layer_mean(achieved_sparsity);
  }
};

namespace detail {

/// Eval set drawn once per experiment seed.
inline double eval_loss(const Model& model, const std::vector<Batch>& eval) {
  double total = 0.0;
  for (const auto& b : eval) total += mse(forward(model, b.x), b.y);
  return total / static_cast<double>(eval.size());
}

/// round(fraction * n) distinct indices of [0, n), sorted.
inline std::vector<std::size_t> random_subset(std::size_t n, double fraction,
                                              Rng& rng) {
  const auto k = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(n)));
  auto idx = rng.sample(n, std::min(k, n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Marks the given values frozen (all others trainable). With zero
/// treatment the frozen values and their moments are set to 0.
inline void restrict_layer(Model& model, OptimState& state, std::size_t l,
                           const std::vector<std::size_t>& frozen_idx,
                           NonActive treatment) {
  Layer& layer = model.layers[l];
  auto& st = state.layers[l];
  layer.frozen.assign(layer.weight.values().size(), 0);
  for (std::size_t i : frozen_idx) {
    layer.frozen[i] = 1;
    if (treatment == NonActive::zero) {
      layer.weight.values()[i] = 0.0;
      st.m_weight[i] = 0.0;
      st.v_weight[i] = 0.0;
    }
  }
}

inline std::vector<std::size_t> complement_indices(
    std::size_t n, const std::vector<std::size_t>& sorted_active) {
  std::vector<std::size_t> out;
  out.reserve(n - sorted_active.size());
  auto it = sorted_active.begin();
  for (std::size_t i = 0; i < n; ++i) {
    if (it != sorted_active.end() && *it == i) {
      ++it;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

/// Indices of the round(fraction * n) largest |w|; ties to the lower index.
inline std::vector<std::size_t> top_magnitude(std::span<const double> w,
                                              double fraction) {
  const auto k = std::min(
      w.size(), static_cast<std::size_t>(
                    std::llround(fraction * static_cast<double>(w.size()))));
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double ma = std::abs(w[a]);
                      const double mb = std::abs(w[b]);
                      return ma != mb ? ma > mb : a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::string default_label(const ExperimentConfig& c) {
  if (!c.label.empty()) return c.label;
  std::string s = to_string(c.mode);
  if (c.is_sparse_mode()) {
    s += "_s" + format_double(c.dynsparse.sparsity) + "_B" +
         std::to_string(c.model.block_size);
  }
  return s;
}

}  // namespace detail

/// Runs one (config, seed) experiment. The mode selects the training loop:
///
///  - dense, static: fixed masks (full or random at the configured sparsity).
///  - dynsparse_random / dynsparse_gradient: prune and re-allocate on the
///    update boundaries.
///  - freeze_half / unfreeze_half: a random weight subset of the sparse
///    layers is frozen for the second / first half of training.
///  - zero_vs_untrained: a random subset is zeroed or frozen at its initial
///    value for all of training.
///  - alternating: dense phases alternate with phases where only a selected
///    fraction of the sparse-layer weights trains.
///
/// A non-finite loss ends the run with diverged = true.
inline RunResult run(const ExperimentConfig& cfg, std::uint64_t seed,
                     const RunHooks& hooks = {}) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  Rng task_rng = Rng::stream(seed, "task");
  Rng init_rng = Rng::stream(seed, "init");
  Rng mask_rng = Rng::stream(seed, "mask");
  Rng batch_rng = Rng::stream(seed, "batch");
  Rng eval_rng = Rng::stream(seed, "eval");
  Rng realloc_rng = Rng::stream(seed, "realloc");
  Rng subset_rng = Rng::stream(seed, "subset");

  TaskSpec spec;
  spec.layer_widths = cfg.model.layer_widths;
  spec.activation = cfg.model.activation;
  spec.noise_std = cfg.task.noise_std;
  spec.teacher_gain = cfg.task.teacher_gain;
  if (cfg.task.input_scale == InputScale::lognormal) {
    spec.input_scales = lognormal_scales(cfg.model.layer_widths.front(),
                                         cfg.task.lognormal_sigma, task_rng);
  }
  const Task task = make_task(spec, task_rng);
  std::vector<Batch> eval;
  for (std::size_t i = 0; i < cfg.eval_batches; ++i) {
    eval.push_back(make_batch(task, cfg.batch_size, eval_rng));
  }

  const double init_sparsity = cfg.is_sparse_mode() ? cfg.dynsparse.sparsity : 0.0;
  Model model = init_model(cfg.model, init_sparsity, init_rng, mask_rng);
  OptimState state = OptimState::zeros_like(model);

  LrSchedule schedule = cfg.schedule();
  if (cfg.scale_lr_with_sparsity && cfg.is_sparse_mode()) {
    schedule.peak_lr = lr_sparse_from_dense(schedule.peak_lr, cfg.dynsparse.sparsity);
  }
  const DynSparseConfig dcfg = cfg.dynsparse_config();
  const std::uint64_t T = cfg.steps;
  const std::uint64_t half = T / 2;

  std::vector<std::size_t> sparse_ids;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (model.layers[l].sparse) sparse_ids.push_back(l);
  }

  // Random subsets for the freeze and zero/untrained ablations, chosen once.
  std::vector<std::vector<std::size_t>> subsets(model.layers.size());
  if (cfg.mode == Mode::freeze_half || cfg.mode == Mode::unfreeze_half ||
      cfg.mode == Mode::zero_vs_untrained) {
    const double f = cfg.mode == Mode::zero_vs_untrained ? cfg.dynsparse.sparsity
                                                         : cfg.ablation_fraction();
    for (std::size_t l : sparse_ids) {
      subsets[l] = detail::random_subset(model.layers[l].weight.values().size(),
                                         f, subset_rng);
    }
  }
  if (cfg.mode == Mode::unfreeze_half) {
    for (std::size_t l : sparse_ids) {
      detail::restrict_layer(model, state, l, subsets[l], NonActive::untrained);
    }
  } else if (cfg.mode == Mode::zero_vs_untrained) {
    for (std::size_t l : sparse_ids) {
      detail::restrict_layer(model, state, l, subsets[l], cfg.ablation.treatment);
    }
  }

  // Alternating phases: boundaries[p] is the first step of phase p.
  std::vector<std::uint64_t> phase_start;
  std::vector<std::vector<std::size_t>> fixed_active(model.layers.size());
  auto enter_restricted = [&]() {
    const auto& alt = *cfg.alternating;
    for (std::size_t l : sparse_ids) {
      const std::size_t n = model.layers[l].weight.values().size();
      std::vector<std::size_t> active;
      switch (alt.selection) {
        case Selection::fixed:
          active = fixed_active[l];
          break;
        case Selection::magnitude:
          active = detail::top_magnitude(model.layers[l].weight.values(),
                                         alt.active_fraction);
          break;
        case Selection::random:
          active = detail::random_subset(n, alt.active_fraction, subset_rng);
          break;
      }
      detail::restrict_layer(model, state, l,
                             detail::complement_indices(n, active),
                             alt.non_active);
    }
  };
  auto enter_dense = [&]() {
    for (std::size_t l : sparse_ids) model.layers[l].frozen.clear();
  };
  if (cfg.mode == Mode::alternating) {
    const auto& alt = *cfg.alternating;
    if (alt.selection == Selection::fixed) {
      for (std::size_t l : sparse_ids) {
        fixed_active[l] = detail::random_subset(
            model.layers[l].weight.values().size(), alt.active_fraction,
            subset_rng);
      }
    }
    if (alt.cycles == 0) {
      enter_restricted();
    } else {
      for (std::uint64_t p = 1; p < 2 * alt.cycles; ++p) {
        phase_start.push_back(p * T / (2 * alt.cycles));
      }
    }
  }

  const std::vector<std::uint64_t> boundaries =
      cfg.is_dynamic() ? update_steps(dcfg) : std::vector<std::uint64_t>{};

  RunResult result;
  result.label = detail::default_label(cfg);
  result.mode = cfg.mode;
  result.seed = seed;
  result.block_size = cfg.model.block_size;
  result.config = config_to_json(cfg);
  result.initial_model = model;
  result.metrics = MetricsLog(sparse_ids);

  ExplorationState exploration(model);
  double flops_cumulative = 0.0;
  double last_pruning_ratio = 0.0;
  double last_removed_new = 0.0;

  auto dof_row = [&](std::uint64_t step, double loss, double lr) {
    MetricsRow row;
    row.step = step;
    row.loss = loss;
    row.lr = lr;
    for (std::size_t l : sparse_ids) {
      row.dof_per_layer.push_back(dof_explored(exploration, l));
    }
    row.dof_mean = row.dof_per_layer.empty() ? 1.0 : layer_mean(row.dof_per_layer);
    row.removed_new_ratio = last_removed_new;
    row.pruning_ratio = last_pruning_ratio;
    row.flops_cumulative = flops_cumulative;
    result.metrics.append(std::move(row));
  };

  double best = std::numeric_limits<double>::infinity();
  auto evaluate = [&](std::uint64_t step) {
    const double loss = detail::eval_loss(model, eval);
    if (!std::isfinite(loss)) throw DivergenceError("non-finite eval loss");
    best = std::min(best, loss);
    dof_row(step, loss, step < T ? lr_at(schedule, step) : 0.0);
    return loss;
  };

  std::size_t next_boundary = 0;
  std::size_t next_phase = 0;
  try {
    evaluate(0);
    for (std::uint64_t t = 0; t < T; ++t) {
      const std::uint64_t done = t + 1;
      const bool update_now =
          next_boundary < boundaries.size() && boundaries[next_boundary] == done;
      const bool dense_grads = update_now && dcfg.realloc == Realloc::gradient;

      Batch batch = make_batch(task, cfg.batch_size, batch_rng);
      LossAndGrads lg = loss_and_grads(model, batch.x, batch.y, dense_grads);
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Layer& layer = model.layers[l];
        if (layer.frozen.empty()) continue;
        for (std::size_t i = 0; i < layer.frozen.size(); ++i) {
          if (layer.frozen[i]) lg.grads[l].weight[i] = 0.0;
        }
      }
      if (cfg.adam.clip_global_norm) {
        clip_gradients(lg.grads, *cfg.adam.clip_global_norm);
      }
      adam_step(model, lg.grads, state, cfg.adam, lr_at(schedule, t),
                cfg.group_lasso);
      flops_cumulative += model_train_flops(model, static_cast<double>(cfg.batch_size));
      if (dense_grads) {
        for (std::size_t l : sparse_ids) {
          const Shape s = model.layers[l].weight.shape();
          flops_cumulative += 2.0 * static_cast<double>(s.rows * s.cols) *
                              static_cast<double>(cfg.batch_size);
        }
      }
      if (hooks.on_step) hooks.on_step(done, model, state);

      if (update_now) {
        UpdateRecord rec = dynsparse_update(
            model, state, dcfg, next_boundary, realloc_rng, &lg.grads,
            result.updates.empty() ? nullptr : &result.updates.back());
        rec.step = done;
        exploration.observe(model);
        last_pruning_ratio = rec.pruning_ratio;
        last_removed_new =
            result.updates.empty() ? 0.0
                                   : removed_new_ratio(rec, result.updates.back());
        if (hooks.on_update) hooks.on_update(rec, model, state);
        result.updates.push_back(std::move(rec));
        ++next_boundary;
      }

      if (done == half && half > 0) {
        if (cfg.mode == Mode::unfreeze_half) {
          for (std::size_t l : sparse_ids) model.layers[l].frozen.clear();
        } else if (cfg.mode == Mode::freeze_half) {
          for (std::size_t l : sparse_ids) {
            detail::restrict_layer(model, state, l, subsets[l],
                                   NonActive::untrained);
          }
        }
      }
      if (next_phase < phase_start.size() && phase_start[next_phase] == done) {
        // Phase index next_phase + 1: odd phases are restricted.
        if ((next_phase + 1) % 2 == 1) {
          enter_restricted();
        } else {
          enter_dense();
        }
        ++next_phase;
      }

      if (done % cfg.eval_interval == 0 || done == T) {
        result.final_eval_loss = evaluate(done);
      }
    }
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.failure = e.what();
  }

  result.best_eval_loss = best;
  for (std::size_t l : sparse_ids) {
    result.achieved_sparsity.push_back(model.layers[l].weight.mask().sparsity());
  }
  result.flops_per_step =
      model_train_flops(model, static_cast<double>(cfg.batch_size));
  result.flops_total = flops_cumulative;
  result.final_dof_mean = result.metrics.rows().empty()
                              ? 1.0
                              : result.metrics.rows().back().dof_mean;
  result.final_model = std::move(model);
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

/// Freeze ablation: a random subset of the sparse-layer weights is frozen at
/// its current value in the first half (freeze_first_half) or second half.
inline RunResult run_freeze_ablation(ExperimentConfig cfg, std::uint64_t seed,
                                     bool freeze_first_half) {
  cfg.mode = freeze_first_half ? Mode::unfreeze_half : Mode::freeze_half;
  return run(cfg, seed);
}

inline RunResult run_zero_vs_untrained(ExperimentConfig cfg, std::uint64_t seed,
                                       NonActive treatment) {
  cfg.mode = Mode::zero_vs_untrained;
  cfg.ablation.treatment = treatment;
  return run(cfg, seed);
}

inline RunResult run_alternating(ExperimentConfig cfg, std::uint64_t seed,
                                 Selection selection, NonActive non_active) {
  cfg.mode = Mode::alternating;
  AlternatingConfig alt = cfg.alternating.value_or(AlternatingConfig{});
  alt.selection = selection;
  alt.non_active = non_active;
  cfg.alternating = alt;
  return run(cfg, seed);
}

/// Runs independent experiments on worker threads. Each run is single
/// threaded and owns all of its state.
inline std::vector<RunResult> run_many(
    const std::vector<std::pair<ExperimentConfig, std::uint64_t>>& jobs,
    unsigned threads = std::thread::hardware_concurrency()) {
  std::vector<RunResult> out(jobs.size());
  if (threads <= 1 || jobs.size() <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      out[i] = run(jobs[i].first, jobs[i].second);
    }
    return out;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= jobs.size() || error) return;
        i = next++;
      }
      try {
        out[i] = run(jobs[i].first, jobs[i].second);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(threads, jobs.size()); ++t) {
    pool.emplace_back(worker);
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return out;
}

inline ParetoPoint pareto_point(const RunResult& r) {
  return {r.label, r.flops_per_step, r.final_eval_loss,
          r.mean_achieved_sparsity(), r.block_size};
}

/// Joins per-step training FLOPs with final losses, sorted by FLOPs.
inline std::vector<ParetoPoint> emit_pareto(const std::vector<RunResult>& results) {
  if (results.size() < 2) throw RangeError("emit_pareto: need >= 2 results");
  std::vector<ParetoPoint> points;
  for (const auto& r : results) points.push_back(pareto_point(r));
  return pareto_table(std::move(points));
}

inline nlohmann::json update_record_json(const UpdateRecord& rec,
                                         const UpdateRecord* previous) {
  auto coords = [](const std::vector<BlockCoord>& cs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& c : cs) a.push_back({c.row, c.col});
    return a;
  };
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& lu : rec.layers) {
    const LayerUpdate* before = nullptr;
    if (previous) {
      for (const auto& p : previous->layers) {
        if (p.layer == lu.layer) before = &p;
      }
    }
    layers.push_back({{"layer", lu.layer},
                      {"pruned", coords(lu.pruned)},
                      {"grown", coords(lu.grown)},
                      {"pruned_were_new", lu.pruned_were_new},
                      {"removed_new_ratio", removed_new_ratio(lu, before)}});
  }
  return {{"k", rec.k},
          {"step", rec.step},
          {"pruning_ratio", rec.pruning_ratio},
          {"layers", layers}};
}

inline nlohmann::json summary_json(const RunResult& r) {
  auto num = [](double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  const bool always_sparse = r.mode != Mode::dynsparse_gradient;
  nlohmann::json j = {{"label", r.label},
                      {"mode", r.mode},
                      {"seed", r.seed},
                      {"status", r.diverged ? "diverged" : "ok"},
                      {"final_eval_loss", num(r.final_eval_loss)},
                      {"best_eval_loss", num(r.best_eval_loss)},
                      {"achieved_sparsity", r.mean_achieved_sparsity()},
                      {"achieved_sparsity_per_layer", r.achieved_sparsity},
                      {"block_size", r.block_size},
                      {"flops_per_step", r.flops_per_step},
                      {"total_flops", r.flops_total},
                      {"final_dof_mean", r.final_dof_mean},
                      {"num_updates", r.updates.size()},
                      {"always_sparse", always_sparse},
                      {"wall_clock_seconds", r.wall_clock_seconds},
                      {"config", r.config}};
  if (r.diverged) j["failure"] = r.failure;
  if (r.mode == Mode::freeze_half || r.mode == Mode::unfreeze_half) {
    j["note"] =
        "learning-rate schedule is shared by both halves; the halves are not "
        "symmetric under the linear decay";
  }
  return j;
}

/// Writes metrics.csv, updates.jsonl and summary.json into `dir`.
inline void write_outputs(const RunResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.csv", std::ios::binary);
    r.metrics.write_csv(os);
  }
  {
    std::ofstream os(dir / "updates.jsonl", std::ios::binary);
    for (std::size_t i = 0; i < r.updates.size(); ++i) {
      os << update_record_json(r.updates[i], i ? &r.updates[i - 1] : nullptr)
                .dump()
         << '\n';
    }
  }
  {
    std::ofstream os(dir / "summary.json", std::ios::binary);
    os << summary_json(r).dump(2) << '\n';
  }
}

/// Pareto point from a summary.json written by write_outputs.
inline ParetoPoint pareto_point_from_summary(const nlohmann::json& s) {
  try {
    ParetoPoint p;
    p.label = s.at("label").get<std::string>();
    p.flops = s.at("flops_per_step").get<double>();
    p.loss = s.at("final_eval_loss").is_null()
                 ? std::numeric_limits<double>::infinity()
                 : s.at("final_eval_loss").get<double>();
    p.sparsity = s.at("achieved_sparsity").get<double>();
    p.block_size = s.at("block_size").get<std::size_t>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("summary: ") + e.what());
  }
}

}  // namespace dynsparse

#endif  // DYNSPARSE_RUNNER_HPP
