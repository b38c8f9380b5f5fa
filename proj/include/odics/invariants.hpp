#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "odics/domains.hpp"
#include "odics/experiment.hpp"
#include "odics/label_space.hpp"
#include "odics/model.hpp"
#include "odics/strategies.hpp"
#include "odics/stream.hpp"

namespace odics {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

namespace detail {

inline ModelConfig tiny_model(std::size_t classes = 5) {
  ModelConfig m;
  m.hidden_channels = 4;
  m.num_layers = 3;
  m.num_classes = classes;
  m.init_seed = 11;
  return m;
}

inline LabeledBatch<double> tiny_batch(std::size_t classes, std::uint64_t seed, std::size_t n = 2,
                                       std::size_t hw = 5) {
  Rng rng(seed);
  LabeledBatch<double> b;
  b.images = Tensor<double>({n, 3, hw, hw});
  b.labels = LabelTensor({n, hw, hw});
  for (std::size_t i = 0; i < b.images.size(); ++i) b.images[i] = rng.uniform();
  for (std::size_t i = 0; i < b.labels.size(); ++i)
    b.labels[i] = rng.uniform() < 0.15 ? kIgnoreIndex : static_cast<std::int32_t>(rng.uniform_int(0, classes - 1));
  return b;
}

inline void perturb(ParamSet<double>& p, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (std::size_t i = 0; i < p.count(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j) p[i][j] += scale * rng.normal();
}

inline double objective_fd_error(const ParamSet<double>& params, const LabeledBatch<double>& batch,
                                 const std::vector<PenaltyTerm<double>>& terms) {
  const auto obj = loss_and_grads(params, batch, terms);
  return finite_diff_check<double>(
      [&](const ParamSet<double>& p) { return objective_value(p, batch, terms); }, params, obj.grads, 1e-5, 300);
}

}  // namespace detail

/// Max relative finite-difference error of each strategy objective.
inline std::vector<std::pair<std::string, double>> gradient_errors() {
  using namespace detail;
  const auto cfg = tiny_model();
  auto params = init_model<double>(cfg);
  const auto batch = tiny_batch(cfg.num_classes, 3);
  const std::vector<LabeledBatch<double>> recent{tiny_batch(cfg.num_classes, 4), tiny_batch(cfg.num_classes, 5)};
  std::vector<std::pair<std::string, double>> out;

  out.emplace_back("nt", objective_fd_error(params, batch, {}));

  EWCState<double> ewc;
  ewc.lambda = 3.0;
  consolidate_ewc(ewc, params, cfg, std::span(recent));
  MASState<double> mas;
  mas.lambda = 2.0;
  consolidate_mas(mas, params, cfg, std::span(recent));
  auto moved = params;
  perturb(moved, 9, 0.05);
  out.emplace_back("ewc", objective_fd_error(moved, batch, {ewc_penalty(ewc)}));
  out.emplace_back("mas", objective_fd_error(moved, batch, {mas_penalty(mas)}));

  const auto teacher = forward(params, batch.images);
  const LogitPenalty<double> lwf{"lwf", [&](const Tensor<double>& lg, const LabelTensor& labels, Tensor<double>& d) {
                                   return lwf_term(lg, teacher, 2.0, 1.5, labels, batch.ignore_index, d);
                                 }};
  out.emplace_back("lwf", objective_fd_error(moved, batch, {lwf}));

  auto replay = std::make_shared<const LabeledBatch<double>>(tiny_batch(cfg.num_classes, 6, 3));
  out.emplace_back("er", objective_fd_error(moved, batch, {BatchLoss<double>{"replay", replay, 1.0}}));
  auto sim = std::make_shared<const LabeledBatch<double>>(tiny_batch(cfg.num_classes, 7, 2));
  out.emplace_back("simcs", objective_fd_error(moved, batch, {BatchLoss<double>{"sim", sim, 2.5}}));
  return out;
}

/// The invariant suite behind the `check` subcommand. Small sizes, seconds.
inline std::vector<CheckResult> run_invariant_suite() {
  using namespace detail;
  std::vector<CheckResult> out;
  auto add = [&](std::string name, bool ok, std::string detail) { out.push_back({std::move(name), ok, std::move(detail)}); };

  for (const auto& [name, err] : gradient_errors()) {
    std::ostringstream os;
    os << "max rel err " << err;
    add("gradient/" + name, err < 1e-4, os.str());
  }

  {
    const std::size_t c = 7;
    Tensor<double> logits({1, c, 2, 2});
    LabelTensor labels({1, 2, 2});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(i % c);
    const auto r = masked_softmax_cross_entropy(logits, labels, kIgnoreIndex);
    add("identity/uniform-ce", std::abs(r.loss - std::log(static_cast<double>(c))) <= 1e-9,
        "loss " + std::to_string(r.loss));
  }

  {
    const auto maps = builtin_maps();
    const auto a = overlap_count(maps.sim_a), b = overlap_count(maps.sim_b);
    add("relabel/overlap", a == 11 && b == 15, "SimA " + std::to_string(a) + ", SimB " + std::to_string(b));
  }

  for (std::size_t n : {1u, 2u, 3u, 4u, 6u, 8u, 10u}) {
    StreamConfig sc;
    sc.train_sizes = {10};
    sc.test_size = 2;
    sc.batch_size = 4;
    sc.budget = n;
    const Stream stream(sc, real_domain_presets(8));
    const auto tests = build_test_sets<double>(stream);
    NaiveLearner<double> learner(tiny_model(19), init_model<double>(tiny_model(19)), 0.01);
    const auto res = run(stream, learner, tests);
    add("protocol/budget N=" + std::to_string(n),
        res.total_updates == res.steps * n && res.max_retained_past_batches == 0,
        std::to_string(res.total_updates) + " updates over " + std::to_string(res.steps) + " steps, retained " +
            std::to_string(res.max_retained_past_batches));
  }

  {
    ExperimentConfig cfg;
    cfg.stream.train_sizes = {6};
    cfg.stream.test_size = 2;
    cfg.stream.batch_size = 3;
    cfg.stream.budget = 1;
    cfg.canvas = 8;
    cfg.hidden_channels = 4;
    cfg.simulator = "SimB";
    cfg.strategy = "er";
    cfg.buffer = 5;
    cfg.seeds = {1, 2};
    const auto a = to_json(run_experiment<double>(cfg)).dump();
    const auto b = to_json(run_experiment<double>(cfg)).dump();
    add("determinism/record", a == b, std::to_string(a.size()) + " bytes");
  }
  return out;
}

}  // namespace odics
