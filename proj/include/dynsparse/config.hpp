// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#ifndef DYNSPARSE_CONFIG_HPP
#define DYNSPARSE_CONFIG_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "scheduler.hpp"

namespace dynsparse {

inline constexpr int kSchemaVersion = 1;

enum class Mode {
  dense,
  static_sparse,
  dynsparse_random,
  dynsparse_gradient,
  freeze_half,        // trainable first half, random subset frozen second half
  unfreeze_half,      // random subset frozen first half, trainable second half
  zero_vs_untrained,
  alternating,
};

enum class Selection { fixed, magnitude, random };
enum class NonActive { zero, untrained };
enum class InputScale { ones, lognormal };

struct TaskConfig {
  InputScale input_scale = InputScale::ones;
  double lognormal_sigma = 1.0;
  double noise_std = 0.0;
  double teacher_gain = std::sqrt(2.0);
};

struct AblationConfig {
  /// Fraction of the sparse-eligible weights that is frozen or zeroed.
  /// Defaults to the configured sparsity.
  std::optional<double> fraction;
  NonActive treatment = NonActive::zero;
};

struct AlternatingConfig {
  Selection selection = Selection::magnitude;
  NonActive non_active = NonActive::zero;
  double active_fraction = 0.1;
  /// Number of (dense, restricted) phase pairs. 0 means a single restricted
  /// phase covering all of training.
  std::size_t cycles = 20;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string label;
  Mode mode = Mode::dynsparse_random;
  ModelConfig model{{32, 64, 64, 16}, {1}, Activation::relu, 0.02, 1};
  TaskConfig task;
  /// block_size and total_steps are taken from `model` and `steps`; realloc
  /// from `mode`. Use dynsparse_config() for the resolved values.
  DynSparseConfig dynsparse;
  AdamHyper adam;
  GroupLassoConfig group_lasso;
  double peak_lr = 2e-3;
  std::uint64_t warmup_steps = 500;
  /// Multiply peak_lr by the sparsity learning-rate rule for sparse modes.
  bool scale_lr_with_sparsity = true;
  std::uint64_t steps = 20000;
  std::size_t batch_size = 32;
  std::uint64_t eval_interval = 500;
  std::size_t eval_batches = 64;
  std::vector<std::uint64_t> seeds{0};
  AblationConfig ablation;
  std::optional<AlternatingConfig> alternating;
  std::string output_dir = "out";

  bool is_dynamic() const noexcept {
    return mode == Mode::dynsparse_random || mode == Mode::dynsparse_gradient;
  }
  bool is_sparse_mode() const noexcept {
    return mode == Mode::static_sparse || is_dynamic();
  }

  DynSparseConfig dynsparse_config() const {
    DynSparseConfig d = dynsparse;
    d.block_size = model.block_size;
    d.total_steps = steps;
    d.realloc = mode == Mode::dynsparse_gradient ? Realloc::gradient
                                                 : Realloc::random;
    return d;
  }

  LrSchedule schedule() const {
    return {peak_lr, warmup_steps, steps};
  }

  double ablation_fraction() const {
    return ablation.fraction.value_or(dynsparse.sparsity);
  }

  void validate() const {
    if (schema_version != kSchemaVersion) {
      throw ConfigError("unsupported schema_version " +
                        std::to_string(schema_version));
    }
    model.validate();
    adam.validate();
    group_lasso.validate();
    schedule().validate();
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (eval_interval == 0) throw ConfigError("eval_interval must be >= 1");
    if (eval_batches == 0) throw ConfigError("eval_batches must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (task.noise_std < 0.0) throw ConfigError("task.noise_std < 0");
    if (is_sparse_mode()) {
      dynsparse_config().validate();
      if (model.sparse_layers.empty()) {
        throw ConfigError("sparse mode without sparse_layers");
      }
    }
    if (group_lasso.active() && !is_sparse_mode()) {
      throw ConfigError("group_lasso only applies to sparse modes");
    }
    const double f = ablation_fraction();
    if (!(f >= 0.0 && f < 1.0)) {
      throw ConfigError("ablation fraction must lie in [0, 1)");
    }
    if (mode == Mode::alternating) {
      if (!alternating) {
        throw ConfigError("mode alternating requires an 'alternating' section");
      }
      if (!(alternating->active_fraction > 0.0 &&
            alternating->active_fraction <= 1.0)) {
        throw ConfigError("alternating.active_fraction must lie in (0, 1]");
      }
      if (2 * alternating->cycles > steps) {
        throw ConfigError("alternating: more phases than steps");
      }
    }
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(Mode, {{Mode::dense, "dense"},
                                    {Mode::static_sparse, "static"},
                                    {Mode::dynsparse_random, "dynsparse_random"},
                                    {Mode::dynsparse_gradient, "dynsparse_gradient"},
                                    {Mode::freeze_half, "freeze_half"},
                                    {Mode::unfreeze_half, "unfreeze_half"},
                                    {Mode::zero_vs_untrained, "zero_vs_untrained"},
                                    {Mode::alternating, "alternating"}})

inline std::string to_string(Mode m) { return nlohmann::json(m).get<std::string>(); }

namespace detail {

template <typename E>
E parse_enum(const nlohmann::json& j, const char* what,
             std::initializer_list<std::pair<const char*, E>> table) {
  if (!j.is_string()) throw ConfigError(std::string(what) + ": expected string");
  const auto s = j.get<std::string>();
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  throw ConfigError(std::string(what) + ": unknown value '" + s + "'");
}

inline void reject_unknown(const nlohmann::json& j, const char* where,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

inline Mode parse_mode(const nlohmann::json& j) {
  return parse_enum<Mode>(j, "mode",
                          {{"dense", Mode::dense},
                           {"static", Mode::static_sparse},
                           {"dynsparse_random", Mode::dynsparse_random},
                           {"dynsparse_gradient", Mode::dynsparse_gradient},
                           {"freeze_half", Mode::freeze_half},
                           {"unfreeze_half", Mode::unfreeze_half},
                           {"zero_vs_untrained", Mode::zero_vs_untrained},
                           {"alternating", Mode::alternating}});
}

inline NonActive parse_non_active(const nlohmann::json& j) {
  return parse_enum<NonActive>(
      j, "non_active", {{"zero", NonActive::zero}, {"untrained", NonActive::untrained}});
}

inline BlockNorm parse_norm(const nlohmann::json& j) {
  if (j.is_number()) {
    const double p = j.get<double>();
    if (p == 1.0) return BlockNorm::l1;
    if (p == 2.0) return BlockNorm::l2;
    throw ConfigError("norm: numeric value must be 1 or 2 (use \"linf\")");
  }
  return parse_enum<BlockNorm>(j, "norm",
                               {{"l1", BlockNorm::l1},
                                {"l2", BlockNorm::l2},
                                {"linf", BlockNorm::linf},
                                {"inf", BlockNorm::linf}});
}

inline const char* name(NonActive n) {
  return n == NonActive::zero ? "zero" : "untrained";
}

inline const char* name(Selection s) {
  switch (s) {
    case Selection::fixed:
      return "fixed";
    case Selection::magnitude:
      return "magnitude";
    case Selection::random:
      return "random";
  }
  return "?";
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  detail::reject_unknown(
      j, "config",
      {"schema_version", "label", "mode", "model", "task", "dynsparse", "adam",
       "group_lasso", "schedule", "steps", "batch_size", "eval_interval",
       "eval_batches", "seeds", "ablation", "alternating", "output_dir"});
  ExperimentConfig c;
  if (!j.contains("schema_version")) {
    throw ConfigError("config: missing schema_version");
  }
  read(j, "schema_version", c.schema_version);
  read(j, "label", c.label);
  if (j.contains("mode")) c.mode = detail::parse_mode(j.at("mode"));

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, "model", {"layer_widths", "sparse_layers",
                                        "activation", "init_std", "block_size"});
    read(m, "layer_widths", c.model.layer_widths);
    read(m, "sparse_layers", c.model.sparse_layers);
    if (m.contains("activation")) {
      c.model.activation = detail::parse_enum<Activation>(
          m.at("activation"), "activation",
          {{"relu", Activation::relu}, {"gelu", Activation::gelu}});
    }
    read(m, "init_std", c.model.init_std);
    read(m, "block_size", c.model.block_size);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    detail::reject_unknown(t, "task", {"input_scale", "lognormal_sigma",
                                       "noise_std", "teacher_gain"});
    if (t.contains("input_scale")) {
      c.task.input_scale = detail::parse_enum<InputScale>(
          t.at("input_scale"), "input_scale",
          {{"ones", InputScale::ones}, {"lognormal", InputScale::lognormal}});
    }
    read(t, "lognormal_sigma", c.task.lognormal_sigma);
    read(t, "noise_std", c.task.noise_std);
    read(t, "teacher_gain", c.task.teacher_gain);
  }
  if (j.contains("dynsparse")) {
    const auto& d = j.at("dynsparse");
    detail::reject_unknown(d, "dynsparse",
                           {"sparsity", "updates", "max_pruning_ratio", "norm"});
    read(d, "sparsity", c.dynsparse.sparsity);
    read(d, "updates", c.dynsparse.updates);
    read(d, "max_pruning_ratio", c.dynsparse.max_pruning_ratio);
    if (d.contains("norm")) c.dynsparse.norm = detail::parse_norm(d.at("norm"));
  }
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    detail::reject_unknown(a, "adam", {"beta1", "beta2", "eps", "weight_decay",
                                       "clip_global_norm"});
    read(a, "beta1", c.adam.beta1);
    read(a, "beta2", c.adam.beta2);
    read(a, "eps", c.adam.eps);
    read(a, "weight_decay", c.adam.weight_decay);
    if (a.contains("clip_global_norm")) {
      const auto& v = a.at("clip_global_norm");
      if (v.is_null()) {
        c.adam.clip_global_norm.reset();
      } else {
        c.adam.clip_global_norm = v.get<double>();
      }
    }
  }
  if (j.contains("group_lasso")) {
    const auto& g = j.at("group_lasso");
    detail::reject_unknown(g, "group_lasso", {"lambda", "w_std", "eps"});
    read(g, "lambda", c.group_lasso.lambda_group);
    read(g, "w_std", c.group_lasso.w_std);
    read(g, "eps", c.group_lasso.eps);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::reject_unknown(s, "schedule",
                           {"peak_lr", "warmup_steps", "scale_lr_with_sparsity"});
    read(s, "peak_lr", c.peak_lr);
    read(s, "warmup_steps", c.warmup_steps);
    read(s, "scale_lr_with_sparsity", c.scale_lr_with_sparsity);
  }
  read(j, "steps", c.steps);
  read(j, "batch_size", c.batch_size);
  read(j, "eval_interval", c.eval_interval);
  read(j, "eval_batches", c.eval_batches);
  read(j, "seeds", c.seeds);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    detail::reject_unknown(a, "ablation", {"fraction", "treatment"});
    if (a.contains("fraction")) c.ablation.fraction = a.at("fraction").get<double>();
    if (a.contains("treatment")) {
      c.ablation.treatment = detail::parse_non_active(a.at("treatment"));
    }
  }
  if (j.contains("alternating")) {
    const auto& a = j.at("alternating");
    detail::reject_unknown(a, "alternating", {"selection", "non_active",
                                              "active_fraction", "cycles"});
    AlternatingConfig alt;
    if (a.contains("selection")) {
      alt.selection = detail::parse_enum<Selection>(
          a.at("selection"), "selection",
          {{"fixed", Selection::fixed},
           {"magnitude", Selection::magnitude},
           {"random", Selection::random}});
    }
    if (a.contains("non_active")) {
      alt.non_active = detail::parse_non_active(a.at("non_active"));
    }
    read(a, "active_fraction", alt.active_fraction);
    read(a, "cycles", alt.cycles);
    c.alternating = alt;
  }
  read(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = c.schema_version;
  j["label"] = c.label;
  j["mode"] = c.mode;
  j["model"] = {{"layer_widths", c.model.layer_widths},
                {"sparse_layers", c.model.sparse_layers},
                {"activation", to_string(c.model.activation)},
                {"init_std", c.model.init_std},
                {"block_size", c.model.block_size}};
  j["task"] = {{"input_scale",
                c.task.input_scale == InputScale::ones ? "ones" : "lognormal"},
               {"lognormal_sigma", c.task.lognormal_sigma},
               {"noise_std", c.task.noise_std},
               {"teacher_gain", c.task.teacher_gain}};
  j["dynsparse"] = {{"sparsity", c.dynsparse.sparsity},
                    {"updates", c.dynsparse.updates},
                    {"max_pruning_ratio", c.dynsparse.max_pruning_ratio},
                    {"norm", to_string(c.dynsparse.norm)}};
  j["adam"] = {{"beta1", c.adam.beta1},
               {"beta2", c.adam.beta2},
               {"eps", c.adam.eps},
               {"weight_decay", c.adam.weight_decay},
               {"clip_global_norm", c.adam.clip_global_norm
                                        ? nlohmann::json(*c.adam.clip_global_norm)
                                        : nlohmann::json(nullptr)}};
  j["group_lasso"] = {{"lambda", c.group_lasso.lambda_group},
                      {"w_std", c.group_lasso.w_std},
                      {"eps", c.group_lasso.eps}};
  j["schedule"] = {{"peak_lr", c.peak_lr},
                   {"warmup_steps", c.warmup_steps},
                   {"scale_lr_with_sparsity", c.scale_lr_with_sparsity}};
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["eval_interval"] = c.eval_interval;
  j["eval_batches"] = c.eval_batches;
  j["seeds"] = c.seeds;
  j["ablation"] = {{"treatment", detail::name(c.ablation.treatment)}};
  if (c.ablation.fraction) j["ablation"]["fraction"] = *c.ablation.fraction;
  if (c.alternating) {
    j["alternating"] = {{"selection", detail::name(c.alternating->selection)},
                        {"non_active", detail::name(c.alternating->non_active)},
                        {"active_fraction", c.alternating->active_fraction},
                        {"cycles", c.alternating->cycles}};
  }
  j["output_dir"] = c.output_dir;
  return j;
}

}  // namespace dynsparse

#endif  // DYNSPARSE_CONFIG_HPP
