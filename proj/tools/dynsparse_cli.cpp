// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

#include <glob.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dynsparse.hpp"

namespace fs = std::filesystem;
using namespace dynsparse;

namespace {

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<std::string> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  ::globfree(&g);
  return out;
}

/// Density a sparse layer will have, independent of the seed.
double nominal_density(Shape shape, std::size_t block_size, double sparsity) {
  const double n = static_cast<double>((shape.rows / block_size) *
                                       (shape.cols / block_size));
  return static_cast<double>(std::llround((1.0 - sparsity) * n)) / n;
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            const std::string& out) {
  const ExperimentConfig cfg = load_config(config_path);
  std::vector<std::uint64_t> seeds = seed ? std::vector{*seed} : cfg.seeds;
  int status = 0;
  for (std::uint64_t s : seeds) {
    const fs::path dir = seed ? fs::path(out) : fs::path(out) / ("seed_" + std::to_string(s));
    const RunResult r = run(cfg, s);
    write_outputs(r, dir);
    std::printf("%s seed=%llu final_eval_loss=%.6g best=%.6g dof=%.4f sparsity=%.4f %s -> %s\n",
                r.label.c_str(), static_cast<unsigned long long>(s),
                r.final_eval_loss, r.best_eval_loss, r.final_dof_mean,
                r.mean_achieved_sparsity(), r.diverged ? "DIVERGED" : "ok",
                dir.c_str());
    if (r.diverged) status = 2;
  }
  return status;
}

int cmd_pareto(const std::string& pattern, const std::string& out) {
  std::vector<ParetoPoint> points;
  for (const auto& path : expand_glob(pattern)) {
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    points.push_back(pareto_point_from_summary(j));
  }
  if (points.size() < 2) {
    std::cerr << "pareto: need at least 2 summaries, matched " << points.size()
              << '\n';
    return 1;
  }
  points = pareto_table(std::move(points));
  fs::path csv(out);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  {
    std::ofstream os(csv);
    write_pareto_csv(os, points);
  }
  fs::path js = csv;
  js.replace_extension(".json");
  {
    std::ofstream os(js);
    os << pareto_json(points).dump(2) << '\n';
  }
  write_pareto_csv(std::cout, points);
  return 0;
}

int cmd_lr_rule(double dense_lr, double sparsity, std::optional<double> params) {
  const double sparse_lr = lr_sparse_from_dense(dense_lr, sparsity);
  std::printf("dense_lr=%.6g sparsity=%.6g factor=%.6g sparse_lr=%.6g\n",
              dense_lr, sparsity, sparse_lr / dense_lr, sparse_lr);
  std::printf("static_fit(s)=%.6g\n", lr_static_fit(sparsity));
  if (params) std::printf("param_fit(N=%.6g)=%.6g\n", *params, lr_param_fit(*params));
  return 0;
}

int cmd_flops(const std::string& config_path) {
  const ExperimentConfig cfg = load_config(config_path);
  const auto& m = cfg.model;
  const double batch = static_cast<double>(cfg.batch_size);
  std::vector<double> densities;
  std::printf("layer,I,O,density,train_flops_per_step\n");
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const Shape s = m.weight_shape(l);
    const double f = cfg.is_sparse_mode() && m.is_sparse(l)
                         ? nominal_density(s, m.block_size, cfg.dynsparse.sparsity)
                         : 1.0;
    densities.push_back(f);
    std::printf("%zu,%zu,%zu,%.6g,%.6g\n", l, s.cols, s.rows, f,
                sparse_train_flops({static_cast<double>(s.cols),
                                    static_cast<double>(s.rows), batch, f}));
  }
  const double sparse = model_train_flops(m, densities, batch);
  const double dense =
      model_train_flops(m, std::vector<double>(m.num_layers(), 1.0), batch);
  std::printf("flops_per_step=%.6g\n", sparse);
  std::printf("flops_total=%.6g\n", sparse * static_cast<double>(cfg.steps));
  std::printf("dense_flops_per_step=%.6g\n", dense);
  std::printf("flops_ratio_dense_over_sparse=%.6g\n", epsilon_critical(dense, sparse));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynsparse: always-sparse dynamic sparse training experiments"};
  app.require_subcommand(1);

  auto* run_cmd = app.add_subcommand("run", "Run an experiment config");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  run_cmd->add_option("--config", config_path, "Experiment JSON")->required();
  run_cmd->add_option("--seed", seed, "Single seed (default: every seed in the config)");
  run_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* pareto_cmd = app.add_subcommand("pareto", "Build a Pareto table from run summaries");
  std::string inputs, pareto_out;
  pareto_cmd->add_option("--inputs", inputs, "Glob of summary.json files")->required();
  pareto_cmd->add_option("--out", pareto_out, "Output CSV path (JSON written alongside)")
      ->required();

  auto* lr_cmd = app.add_subcommand("lr-rule", "Sparse learning rate from the dense optimum");
  double dense_lr = 0.0, sparsity = 0.0;
  std::optional<double> params;
  lr_cmd->add_option("--dense-lr", dense_lr)->required();
  lr_cmd->add_option("--sparsity", sparsity)->required();
  lr_cmd->add_option("--params", params, "Also evaluate the parameter-count fit");

  auto* flops_cmd = app.add_subcommand("flops", "Analytic training FLOPs of a config");
  std::string flops_config;
  flops_cmd->add_option("--config", flops_config)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) return cmd_run(config_path, seed, out_dir);
    if (*pareto_cmd) return cmd_pareto(inputs, pareto_out);
    if (*lr_cmd) return cmd_lr_rule(dense_lr, sparsity, params);
    if (*flops_cmd) return cmd_flops(flops_config);
  } catch (const dynsparse::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
