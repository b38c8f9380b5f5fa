// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Arguments, if given, select criteria by number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "odics/experiment.hpp"
#include "odics/invariants.hpp"

using namespace odics;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string pts(double fraction) { return fmt("%.2f", 100.0 * fraction); }

// Toy scale for the directional criteria: 4 domains of 300 train / 48 test
// images at 16x16, B=8, N=4, five seeds.
ExperimentConfig toy(const std::string& extra = "") {
  const std::string base =
      "data.canvas = 16\nstream.train_size = 300\nstream.test_size = 48\nstream.batch_size = 8\n"
      "stream.budget = 4\ntrain.lr = 0.1\nseeds = 1,2,3,4,5\n";
  return parse_config_text(base + extra).config;
}

// Runs are memoized on their canonical config echo.
std::map<std::string, ExperimentResult>& cache() {
  static std::map<std::string, ExperimentResult> c;
  return c;
}

const ExperimentResult& result_of(const ExperimentConfig& cfg) {
  const auto key = config_echo(cfg);
  auto it = cache().find(key);
  if (it == cache().end()) {
    const auto t0 = Clock::now();
    it = cache().emplace(key, run_experiment_any(cfg)).first;
    std::printf("    ran %-52s mean %6.2f  (%.0fs)\n", cfg.name.c_str(), 100.0 * it->second.mean_miou(), seconds_since(t0));
    std::fflush(stdout);
  }
  return it->second;
}

double mean_of_named(const std::string& name, const std::string& extra) {
  auto c = toy(extra);
  c.name = name;
  return result_of(c).mean_miou();
}

bool audit_ok(const ExperimentResult& r) {
  for (const auto& s : r.seeds)
    if (s.total_updates != s.steps * s.budget || s.max_retained_past_batches != 0) return false;
  return true;
}

// Forwards to an inner learner and records the parameters after every step.
template <class T>
class Tracing : public Learner<T> {
 public:
  explicit Tracing(Learner<T>& inner) : inner_(inner) {}
  std::string name() const override { return inner_.name(); }
  bool needs_boundaries() const override { return inner_.needs_boundaries(); }
  void on_batch(const SampleBatch& b, StepContext<T>& ctx) override {
    inner_.on_batch(b, ctx);
    trace.push_back(inner_.params());
  }
  const ParamSet<T>& params() const override { return inner_.params(); }
  const ModelConfig& model_config() const override { return inner_.model_config(); }
  std::vector<ParamSet<T>> trace;

 private:
  Learner<T>& inner_;
};

StreamConfig protocol_stream(std::size_t budget) {
  StreamConfig sc;
  sc.train_sizes = {10};
  sc.test_size = 2;
  sc.batch_size = 4;
  sc.budget = budget;
  return sc;
}

ModelConfig small_model() {
  ModelConfig m;
  m.hidden_channels = 4;
  m.num_classes = 19;
  m.init_seed = 3;
  return m;
}

SimCSConfig sim_cfg(const std::string& name, std::size_t canvas) {
  SimCSConfig s;
  s.sim_domain = find_domain(sim_domain_presets(canvas), name);
  s.label_map = builtin_map_for(name);
  s.sim_seed = 5;
  return s;
}

// ---------------------------------------------------------------------------

Outcome c1_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, err] : gradient_errors())
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "max rel err " + fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1fs", secs)};
}

Outcome c2_identities() {
  std::vector<std::string> bad;
  double worst_ce = 0.0;
  for (std::size_t c : {2u, 8u, 19u}) {
    Tensor<double> logits({2, c, 3, 3});
    LabelTensor labels({2, 3, 3});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::int32_t>(i % c);
    const auto r = masked_softmax_cross_entropy(logits, labels, kIgnoreIndex);
    worst_ce = std::max(worst_ce, std::abs(r.loss - std::log(static_cast<double>(c))));
  }
  if (worst_ce > 1e-9) bad.push_back("uniform CE");

  const auto mc = small_model();
  const auto p = init_model<double>(mc);
  const std::vector<LabeledBatch<double>> recent{detail::tiny_batch(19, 1), detail::tiny_batch(19, 2)};
  EWCState<double> ewc;
  ewc.lambda = 10.0;
  consolidate_ewc(ewc, p, mc, std::span(recent));
  MASState<double> mas;
  mas.lambda = 1.0;
  consolidate_mas(mas, p, mc, std::span(recent));
  auto g = p.zeros_like();
  if (ewc_penalty(ewc).eval(p, g) != 0.0 || mas_penalty(mas).eval(p, g) != 0.0 || !(g == p.zeros_like()))
    bad.push_back("anchor penalty");

  Tensor<double> lg({2, 19, 4, 4});
  Rng rng(4);
  for (auto& v : lg.values()) v = rng.uniform(-3, 3);
  Tensor<double> d(lg.shape());
  const double kl = lwf_term(lg, lg, 2.0, 50.0, LabelTensor({2, 4, 4}, 0), kIgnoreIndex, d);
  double dmax = 0.0;
  for (auto v : d.values()) dmax = std::max(dmax, std::abs(v));
  if (std::abs(kl) > 1e-12 || dmax > 1e-12) bad.push_back("LwF self-distillation");

  // Per-step parameter traces and per-iteration loss traces against NT.
  const Stream s(protocol_stream(3), real_domain_presets(8));
  const auto tests = build_test_sets<double>(s);
  auto trace = [&](LearnerBase<double>& base, Learner<double>& outer) {
    base.keep_loss_trace(true);
    Tracing<double> t(outer);
    run(s, t, tests);
    return std::make_pair(t.trace, base.loss_trace());
  };
  NaiveLearner<double> nt(mc, p, 0.05);
  const auto ref = trace(nt, nt);
  std::size_t neutral = 0;
  auto check = [&](const std::string& name, LearnerBase<double>& base, Learner<double>& outer) {
    ++neutral;
    if (trace(base, outer) != ref) bad.push_back(name);
  };
  EWCLearner<double> e0(mc, p, 0.05, 0.0);
  check("EWC λ=0", e0, e0);
  MASLearner<double> m0(mc, p, 0.05, 0.0);
  check("MAS λ=0", m0, m0);
  LwFLearner<double> l0(mc, p, 0.05, 0.0);
  check("LwF λ=0", l0, l0);
  ReplayLearner<double> r0(mc, p, 0.05, 0, 1);
  check("ER M=0", r0, r0);
  auto drop = sim_cfg("SimB", 8);
  drop.label_map.entries.assign(drop.label_map.entries.size(), std::nullopt);
  SimCSLearner<double> sd(std::make_unique<NaiveLearner<double>>(mc, p, 0.05), drop);
  check("SimCS all-drop", sd.base(), sd);

  return {bad.empty(), "CE dev " + fmt("%.1e", worst_ce) + ", LwF self " + fmt("%.1e", kl) + ", " +
                           std::to_string(neutral) + " neutral learners traced" +
                           (bad.empty() ? "" : "; mismatch: " + bad.front())};
}

Outcome c3_protocol() {
  std::vector<std::string> bad;
  const auto mc = small_model();
  for (std::size_t n : {1u, 2u, 3u, 4u, 6u, 8u, 10u}) {
    const Stream s(protocol_stream(n), real_domain_presets(8));
    const auto tests = build_test_sets<double>(s);
    std::vector<std::unique_ptr<Learner<double>>> learners;
    learners.push_back(std::make_unique<NaiveLearner<double>>(mc, init_model<double>(mc), 0.01));
    learners.push_back(std::make_unique<EWCLearner<double>>(mc, init_model<double>(mc), 0.01, 10.0));
    learners.push_back(std::make_unique<MASLearner<double>>(mc, init_model<double>(mc), 0.01, 1.0));
    learners.push_back(std::make_unique<LwFLearner<double>>(mc, init_model<double>(mc), 0.01, 50.0));
    learners.push_back(std::make_unique<ReplayLearner<double>>(mc, init_model<double>(mc), 0.01, 8, 1));
    learners.push_back(simcs_wrap<double>(std::make_unique<NaiveLearner<double>>(mc, init_model<double>(mc), 0.01),
                                          sim_cfg("SimA", 8)));
    for (auto& l : learners) {
      const auto r = run(s, *l, tests);
      const bool aware = l->name() == "ewc" || l->name() == "mas" || l->name() == "lwf";
      if (r.total_updates != r.steps * n) bad.push_back("audit " + l->name() + " N=" + std::to_string(n));
      if (r.max_retained_past_batches != 0) bad.push_back("retained " + l->name());
      if ((r.boundary_flags_delivered > 0) != aware) bad.push_back("flags " + l->name());
    }
  }

  std::size_t sequences = 0;
  for (std::size_t cap : {0u, 1u, 2u, 3u, 8u, 800u}) {
    ReplayBuffer b(cap);
    std::deque<std::uint64_t> ref;
    Rng rng(cap + 17);
    std::uint64_t next = 0;
    for (int round = 0; round < 40; ++round) {
      const std::size_t burst = std::vector<std::size_t>{0, 1, cap, cap + 1, 2 * cap + 3,
                                                         static_cast<std::size_t>(rng.uniform_int(0, 900))}[round % 6];
      for (std::size_t k = 0; k < burst; ++k, ++next) {
        b.insert(LabeledSample{{}, {}, "x", next});
        if (cap == 0) continue;
        if (ref.size() == cap) ref.pop_front();
        ref.push_back(next);
      }
      ++sequences;
      bool same = b.size() == ref.size();
      for (std::size_t i = 0; same && i < ref.size(); ++i) same = b.at(i).seed == ref[i];
      if (!same) bad.push_back("FIFO cap " + std::to_string(cap));
    }
  }
  return {bad.empty(), "7 budgets x 6 learners audited, " + std::to_string(sequences) + " FIFO checkpoints" +
                           (bad.empty() ? "" : "; failure: " + bad.front())};
}

Outcome c4_relabel() {
  const auto maps = builtin_maps();
  const auto a = overlap_count(maps.sim_a), b = overlap_count(maps.sim_b);

  // Relabeled SimB batch: logit gradient at every dropped pixel is exactly 0,
  // and an all-drop map gives an exactly zero parameter gradient.
  const auto sim = sim_domain_presets(12)[1];
  std::vector<LabeledSample> samples;
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto x = generate_sample(sim, s);
    x.mask = apply_map(maps.sim_b, x.mask);
    samples.push_back(std::move(x));
  }
  const auto batch = to_labeled_batch<double>(samples);
  const auto mc = small_model();
  const auto p = init_model<double>(mc);
  const auto logits = forward(p, batch.images);
  const auto ce = masked_softmax_cross_entropy(logits, batch.labels, kIgnoreIndex);
  const std::size_t plane = logits.dim(2) * logits.dim(3), classes = logits.dim(1);
  std::size_t dropped = 0, nonzero = 0;
  for (std::size_t n = 0; n < logits.dim(0); ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      if (batch.labels[n * plane + i] != kIgnoreIndex) continue;
      ++dropped;
      for (std::size_t c = 0; c < classes; ++c) nonzero += ce.grad[(n * classes + c) * plane + i] != 0.0;
    }
  auto all_drop = samples;
  for (auto& s : all_drop) s.mask = LabelTensor(s.mask.shape(), kIgnoreIndex);
  const auto zero = loss_and_grads(p, to_labeled_batch<double>(all_drop));
  bool grads_zero = zero.loss == 0.0;
  for (std::size_t i = 0; i < zero.grads.count(); ++i)
    for (auto v : zero.grads[i].values()) grads_zero = grads_zero && v == 0.0;
  const bool ok = a == 11 && b == 15 && dropped > 0 && nonzero == 0 && grads_zero;
  return {ok, "overlap SimA " + std::to_string(a) + ", SimB " + std::to_string(b) + "; " + std::to_string(dropped) +
                  " dropped pixels, " + std::to_string(nonzero) + " nonzero logit grads; all-drop grad " +
                  (grads_zero ? "zero" : "NONZERO")};
}

Outcome c5_forgetting() {
  auto c = toy("strategy.name = nt\n");
  c.name = "nt";
  const auto t0 = Clock::now();
  const auto& r = result_of(c);
  const double secs = seconds_since(t0);
  double gap = 0.0;
  for (const auto& s : r.seeds) gap += (s.transfer->at(0, 0) - s.transfer->at(3, 0)) / static_cast<double>(r.seeds.size());
  const auto mt = r.mean_transfer();
  return {gap >= 0.10 && secs < 600.0, "R[1][1] " + pts(mt->at(0, 0)) + ", final " + pts(mt->at(3, 0)) + ", drop " +
                                           pts(gap) + " pts (need >= 10), " + fmt("%.0fs", secs)};
}

Outcome c6_ordering() {
  const double nt = mean_of_named("nt", "strategy.name = nt\n");
  const double er = mean_of_named("er", "strategy.name = er\nstrategy.buffer = 800\n");
  const double simb = mean_of_named("nt+SimB", "simcs.simulator = SimB\n");
  const double sima = mean_of_named("nt+SimA", "simcs.simulator = SimA\n");
  const double ersim = mean_of_named("er+SimB", "strategy.name = er\nsimcs.simulator = SimB\n");
  const bool ok = er >= nt + 0.02 && simb >= nt + 0.02 && ersim >= er + 0.01 && sima > nt && simb > nt;
  return {ok, "NT " + pts(nt) + ", ER " + pts(er) + ", NT+SimB " + pts(simb) + ", NT+SimA " + pts(sima) + ", ER+SimB " +
                  pts(ersim)};
}

Outcome c7_ratio() {
  const double r1 = mean_of_named("nt+SimB", "simcs.simulator = SimB\n");
  const double r10 = mean_of_named("nt+SimB rho=10", "simcs.simulator = SimB\nsimcs.ratio = 10\n");
  return {r10 < r1, "rho=1 " + pts(r1) + ", rho=10 " + pts(r10)};
}

Outcome c8_budget() {
  const double sim4 = mean_of_named("nt+SimB", "simcs.simulator = SimB\n");
  const double nt8 = mean_of_named("nt N=8", "stream.budget = 8\n");
  return {sim4 >= nt8, "NT+SimB N=4 " + pts(sim4) + ", NT N=8 " + pts(nt8)};
}

Outcome c9_pretrain() {
  const double nt = mean_of_named("nt", "strategy.name = nt\n");
  const double pre = mean_of_named("pretrained nt", "pretrain.enabled = true\n");
  const double presim = mean_of_named("pretrained nt+SimB", "pretrain.enabled = true\nsimcs.simulator = SimB\n");
  return {pre >= nt && presim >= pre,
          "NT " + pts(nt) + ", pretrained NT " + pts(pre) + ", pretrained NT+SimB " + pts(presim) +
              " (SimB, 30 epochs, images = real stream size)"};
}

Outcome c10_mixed() {
  auto a = toy("stream.mode = mixed\n");
  a.name = "mixed nt";
  auto b = toy("stream.mode = mixed\nsimcs.simulator = SimB\n");
  b.name = "mixed nt+SimB";
  const auto& ra = result_of(a);
  const auto& rb = result_of(b);
  const bool audit = audit_ok(ra) && audit_ok(rb);
  return {audit && rb.mean_miou() >= ra.mean_miou(), std::string("audit ") + (audit ? "ok" : "FAILED") +
                                                         ", NT " + pts(ra.mean_miou()) + ", NT+SimB " +
                                                         pts(rb.mean_miou())};
}

Outcome c11_determinism() {
  // Every preset cell at reduced size, then one full toy run.
  std::size_t cells = 0, differ = 0;
  for (const auto& [name, text] : preset_texts()) {
    for (auto cell : expand_grid(load_preset(name))) {
      cell.canvas = 8;
      cell.hidden_channels = 4;
      cell.stream.train_sizes = {6};
      cell.stream.test_size = 2;
      cell.stream.batch_size = 3;
      cell.seeds = {1, 2};
      cell.supervised_epochs = 1;
      cell.pretrain_epochs = 1;
      ++cells;
      differ += to_json(run_experiment_any(cell)).dump(2) != to_json(run_experiment_any(cell)).dump(2);
    }
  }
  auto c = toy("strategy.name = nt\n");
  c.name = "nt";
  const auto again = to_json(run_experiment_any(c)).dump(2);
  const bool toy_same = again == to_json(result_of(c)).dump(2);
  return {differ == 0 && toy_same, std::to_string(cells) + " preset cells, " + std::to_string(differ) +
                                       " differing; toy record " + (toy_same ? "identical" : "DIFFERS") + " (" +
                                       std::to_string(again.size()) + " bytes)"};
}

double naive_conv_error(Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 3)), ci = static_cast<std::size_t>(rng.uniform_int(1, 4)),
                    co = static_cast<std::size_t>(rng.uniform_int(1, 5)), h = static_cast<std::size_t>(rng.uniform_int(1, 9)),
                    w = static_cast<std::size_t>(rng.uniform_int(1, 9)),
                    k = 2 * static_cast<std::size_t>(rng.uniform_int(0, 2)) + 1;
  Tensor<double> x({n, ci, h, w}), kern({co, ci, k, k}), bias({co});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);
  for (auto& v : kern.values()) v = rng.uniform(-1, 1);
  for (auto& v : bias.values()) v = rng.uniform(-1, 1);
  const auto y = conv2d(x, kern, bias);
  const auto r = static_cast<long>(k / 2);
  double worst = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          double s = bias[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (long di = -r; di <= r; ++di)
              for (long dj = -r; dj <= r; ++dj) {
                const long yi = static_cast<long>(i) + di, xj = static_cast<long>(j) + dj;
                if (yi < 0 || xj < 0 || yi >= static_cast<long>(h) || xj >= static_cast<long>(w)) continue;
                s += kern.at(o, c, static_cast<std::size_t>(di + r), static_cast<std::size_t>(dj + r)) *
                     x.at(b, c, static_cast<std::size_t>(yi), static_cast<std::size_t>(xj));
              }
          worst = std::max(worst, std::abs(s - y.at(b, o, i, j)));
        }
  return worst;
}

Outcome c12_oracles() {
  Rng rng(12);
  double conv = 0.0;
  for (int t = 0; t < 40; ++t) conv = std::max(conv, naive_conv_error(rng));

  bool miou_ok = true;
  {
    ConfusionMatrix cm(2);
    accumulate(cm, LabelTensor({4}, std::vector<std::int32_t>{0, 1, 1, 1}),
               LabelTensor({4}, std::vector<std::int32_t>{0, 0, 1, 1}), kIgnoreIndex);
    miou_ok = miou_ok && cm.at(0, 0) == 1 && cm.at(0, 1) == 1 && cm.at(1, 0) == 0 && cm.at(1, 1) == 2;
    miou_ok = miou_ok && miou(cm) == (0.5 + 2.0 / 3.0) / 2.0;
    ConfusionMatrix ign(3);
    accumulate(ign, LabelTensor({3}, std::vector<std::int32_t>{0, 2, 1}),
               LabelTensor({3}, std::vector<std::int32_t>{0, kIgnoreIndex, 1}), kIgnoreIndex);
    miou_ok = miou_ok && ign.total() == 2 && miou(ign) == 1.0;
    ConfusionMatrix fp(3);
    accumulate(fp, LabelTensor({2}, std::vector<std::int32_t>{0, 2}), LabelTensor({2}, std::vector<std::int32_t>{0, 0}),
               kIgnoreIndex);
    miou_ok = miou_ok && miou(fp) == 0.25;
  }

  bool transfer_ok = true;
  {
    const auto st = transfer_stats(TransferMatrix::from_rows({{0.5, 0.2}, {0.4, 0.6}}));
    transfer_ok = st.backward[0] == 0.4 - 0.5 && st.forward[1] && *st.forward[1] == 0.6 - 0.2;
    for (int t = 0; t < 50; ++t) {
      const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 6));
      std::vector<std::vector<double>> rows(n, std::vector<double>(n));
      for (auto& row : rows)
        for (auto& v : row) v = rng.uniform();
      const auto s = transfer_stats(TransferMatrix::from_rows(rows));
      double mb = 0.0, mf = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        transfer_ok = transfer_ok && s.backward[j] == rows[n - 1][j] - rows[j][j];
        if (j + 1 < n) mb += rows[n - 1][j] - rows[j][j];
        if (j > 0) {
          transfer_ok = transfer_ok && *s.forward[j] == rows[j][j] - rows[j - 1][j];
          mf += rows[j][j] - rows[j - 1][j];
        }
      }
      transfer_ok = transfer_ok && s.mean_backward == mb / static_cast<double>(n - 1) &&
                    s.mean_forward == mf / static_cast<double>(n - 1);
    }
  }
  return {conv <= 1e-12 && miou_ok && transfer_ok, "conv max abs err " + fmt("%.1e", conv) + ", mIoU examples " +
                                                       (miou_ok ? "exact" : "WRONG") + ", transfer stats " +
                                                       (transfer_ok ? "exact" : "WRONG")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", c1_gradients},     {"identity suite", c2_identities},
      {"protocol suite", c3_protocol},      {"relabel suite", c4_relabel},
      {"forgetting", c5_forgetting},        {"method ordering", c6_ordering},
      {"ratio sweep", c7_ratio},            {"budget normalization", c8_budget},
      {"pretraining", c9_pretrain},         {"data-incremental mode", c10_mixed},
      {"determinism", c11_determinism},     {"oracle suite", c12_oracles},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));

  std::size_t failed = 0;
  const auto t0 = Clock::now();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s C%zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu failed, total %.0fs\n", failed, seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
