#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "odics/domains.hpp"
#include "odics/error.hpp"
#include "odics/metrics.hpp"
#include "odics/model.hpp"
#include "odics/rng.hpp"

namespace odics {

enum class StreamMode { kSequential, kMixed };

inline std::string to_string(StreamMode m) { return m == StreamMode::kSequential ? "sequential" : "mixed"; }

struct StreamConfig {
  StreamMode mode = StreamMode::kSequential;
  std::vector<std::string> domain_order{"CS", "IDD", "BDD", "ACDC"};
  /// Per domain in stream order; a single value applies to every domain.
  std::vector<std::size_t> train_sizes{1700};
  std::size_t test_size = 425;
  std::size_t batch_size = 8;
  std::size_t budget = 4;
  std::uint64_t shuffle_seed = 0;
  /// Mixed mode only: relative share of each domain per batch (default equal).
  std::vector<double> mixed_quotas;

  std::size_t train_size(std::size_t domain) const {
    return train_sizes.size() == 1 ? train_sizes[0] : train_sizes.at(domain);
  }

  void validate() const {
    require(batch_size >= 1, "batch_size must be >= 1");
    require(budget >= 1, "budget N must be >= 1");
    require(!domain_order.empty(), "domain_order is empty");
    for (std::size_t i = 0; i < domain_order.size(); ++i)
      for (std::size_t j = i + 1; j < domain_order.size(); ++j)
        require(domain_order[i] != domain_order[j], "domain_order repeats '" + domain_order[i] + "'");
    require(train_sizes.size() == 1 || train_sizes.size() == domain_order.size(),
            "train_sizes must have one entry or one per domain");
    for (auto n : train_sizes) require(n > 0, "train sizes must be positive");
    require(test_size > 0, "test_size must be positive");
    if (!mixed_quotas.empty()) {
      require(mixed_quotas.size() == domain_order.size(), "mixed_quotas needs one weight per domain");
      for (double q : mixed_quotas) require(q > 0.0, "mixed quotas must be positive");
    }
  }
};

/// Samples revealed at one step.
struct SampleBatch {
  std::vector<LabeledSample> samples;
  std::size_t size() const noexcept { return samples.size(); }
};

/// Fixed input normalization applied when samples enter a model batch.
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.25;

template <class T>
LabeledBatch<T> to_labeled_batch(std::span<const LabeledSample> samples, std::int32_t ignore_index = kIgnoreIndex) {
  if (samples.empty()) throw ConfigError("empty batch");
  const auto& first = samples.front();
  const std::size_t ch = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  LabeledBatch<T> b{Tensor<T>({samples.size(), ch, h, w}), LabelTensor({samples.size(), h, w}), ignore_index};
  const std::size_t img = ch * h * w, px = h * w;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].image.size() != img) throw ConfigError("batch mixes image sizes");
    for (std::size_t i = 0; i < img; ++i)
      b.images[n * img + i] = static_cast<T>((samples[n].image[i] - kPixelMean) / kPixelStd);
    std::copy(samples[n].mask.values().begin(), samples[n].mask.values().end(), b.labels.data() + n * px);
  }
  return b;
}

struct ScheduledSample {
  std::size_t domain;  // position in domain_order
  std::uint64_t seed;
};

struct StreamStep {
  std::size_t t = 0;  // 1-based
  std::shared_ptr<const SampleBatch> batch;
  std::optional<bool> boundary;            // only for learners that ask for it
  std::vector<std::size_t> composition;    // samples per domain; logging only
};

/// The ODICS stream: a fixed schedule of (domain, seed) pairs per step.
/// Samples are generated when a step is revealed.
class Stream {
 public:
  Stream(StreamConfig config, const std::vector<DomainSpec>& available) : config_(std::move(config)) {
    config_.validate();
    for (const auto& name : config_.domain_order) domains_.push_back(find_domain(available, name));
    for (std::size_t d = 0; d < domains_.size(); ++d) {
      domains_[d].validate();
      splits_.push_back(make_split(domains_[d], config_.train_size(d), config_.test_size));
    }
    if (config_.mode == StreamMode::kSequential)
      build_sequential();
    else
      build_mixed();
  }

  const StreamConfig& config() const noexcept { return config_; }
  const std::vector<DomainSpec>& domains() const noexcept { return domains_; }
  const Split& split(std::size_t d) const { return splits_.at(d); }
  std::size_t step_count() const noexcept { return schedule_.size(); }
  std::size_t budget() const noexcept { return config_.budget; }

  /// 1-based step index.
  const std::vector<ScheduledSample>& schedule(std::size_t t) const { return schedule_.at(t - 1); }

  /// Sequential: first step of each domain. Mixed: only the first step.
  bool is_boundary(std::size_t t) const {
    return std::find(boundary_steps_.begin(), boundary_steps_.end(), t) != boundary_steps_.end();
  }
  const std::vector<std::size_t>& boundary_steps() const noexcept { return boundary_steps_; }

  /// Last step of each domain (sequential mode).
  const std::vector<std::size_t>& domain_end_steps() const noexcept { return domain_end_steps_; }

  StreamStep reveal(std::size_t t, bool deliver_boundary) const {
    StreamStep step;
    step.t = t;
    auto batch = std::make_shared<SampleBatch>();
    step.composition.assign(domains_.size(), 0);
    for (const auto& s : schedule(t)) {
      batch->samples.push_back(generate_sample(domains_[s.domain], s.seed));
      ++step.composition[s.domain];
    }
    step.batch = std::move(batch);
    if (deliver_boundary) step.boundary = is_boundary(t);
    return step;
  }

 private:
  std::vector<std::uint64_t> shuffled_train_seeds(std::size_t d) const {
    std::vector<std::uint64_t> seeds;
    const auto& r = splits_[d].train;
    for (std::uint64_t s = r.begin; s < r.end(); ++s) seeds.push_back(s);
    Rng rng(hash_combine(config_.shuffle_seed, hash_combine(hash_name("stream"), d)));
    rng.shuffle(seeds);
    return seeds;
  }

  void build_sequential() {
    for (std::size_t d = 0; d < domains_.size(); ++d) {
      const auto seeds = shuffled_train_seeds(d);
      boundary_steps_.push_back(schedule_.size() + 1);
      for (std::size_t i = 0; i < seeds.size(); i += config_.batch_size) {
        std::vector<ScheduledSample> step;
        for (std::size_t k = i; k < std::min(seeds.size(), i + config_.batch_size); ++k) step.push_back({d, seeds[k]});
        schedule_.push_back(std::move(step));
      }
      domain_end_steps_.push_back(schedule_.size());
    }
  }

  void build_mixed() {
    const std::size_t nd = domains_.size();
    std::vector<std::vector<std::uint64_t>> queues(nd);
    std::vector<std::size_t> head(nd, 0);
    for (std::size_t d = 0; d < nd; ++d) queues[d] = shuffled_train_seeds(d);
    std::vector<double> quota = config_.mixed_quotas.empty() ? std::vector<double>(nd, 1.0) : config_.mixed_quotas;
    boundary_steps_.push_back(1);

    auto remaining = [&](std::size_t d) { return queues[d].size() - head[d]; };
    for (;;) {
      std::size_t left = 0;
      for (std::size_t d = 0; d < nd; ++d) left += remaining(d);
      if (left == 0) break;
      const std::size_t target = std::min(config_.batch_size, left);
      const auto take = mixed_allocation(quota, target, remaining);
      std::vector<ScheduledSample> step;
      for (std::size_t d = 0; d < nd; ++d)
        for (std::size_t k = 0; k < take[d]; ++k) step.push_back({d, queues[d][head[d]++]});
      schedule_.push_back(std::move(step));
    }
    domain_end_steps_.assign(nd, schedule_.size());
  }

  /// Largest-remainder split of `target` samples over domains with data left.
  template <class Remaining>
  static std::vector<std::size_t> mixed_allocation(const std::vector<double>& quota, std::size_t target,
                                                   Remaining&& remaining) {
    const std::size_t nd = quota.size();
    std::vector<std::size_t> take(nd, 0);
    std::size_t assigned = 0;
    while (assigned < target) {
      double total = 0.0;
      for (std::size_t d = 0; d < nd; ++d)
        if (remaining(d) > take[d]) total += quota[d];
      const std::size_t need = target - assigned;
      std::vector<std::pair<double, std::size_t>> frac;
      std::size_t round_assigned = 0;
      for (std::size_t d = 0; d < nd; ++d) {
        if (remaining(d) <= take[d]) continue;
        const double share = static_cast<double>(need) * quota[d] / total;
        auto whole = std::min(static_cast<std::size_t>(std::floor(share)), remaining(d) - take[d]);
        take[d] += whole;
        round_assigned += whole;
        frac.push_back({share - static_cast<double>(whole), d});
      }
      std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      for (const auto& [f, d] : frac) {
        if (assigned + round_assigned >= target) break;
        if (remaining(d) > take[d]) {
          ++take[d];
          ++round_assigned;
        }
      }
      assigned += round_assigned;
      if (round_assigned == 0) break;
    }
    return take;
  }

  StreamConfig config_;
  std::vector<DomainSpec> domains_;
  std::vector<Split> splits_;
  std::vector<std::vector<ScheduledSample>> schedule_;
  std::vector<std::size_t> boundary_steps_;
  std::vector<std::size_t> domain_end_steps_;
};

// ---------------------------------------------------------------------------
// Learner contract

/// Per-step handle. Every parameter update must go through apply_update so
/// the engine can audit the budget.
template <class T>
class StepContext {
 public:
  StepContext(std::size_t t, std::size_t budget, std::optional<bool> boundary)
      : t_(t), budget_(budget), boundary_(boundary) {}

  std::size_t step() const noexcept { return t_; }
  std::size_t budget() const noexcept { return budget_; }
  std::optional<bool> boundary() const noexcept { return boundary_; }
  std::size_t used() const noexcept { return used_; }

  void apply_update(ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
    if (used_ >= budget_)
      throw ProtocolViolation("step " + std::to_string(t_) + ": learner attempted update " +
                              std::to_string(used_ + 1) + " with budget N=" + std::to_string(budget_));
    sgd_step(params, grads, lr);
    ++used_;
  }

 private:
  std::size_t t_;
  std::size_t budget_;
  std::optional<bool> boundary_;
  std::size_t used_ = 0;
};

template <class T>
class Learner {
 public:
  virtual ~Learner() = default;
  virtual std::string name() const = 0;
  virtual bool needs_boundaries() const = 0;
  /// Must perform exactly ctx.budget() audited updates.
  virtual void on_batch(const SampleBatch& batch, StepContext<T>& ctx) = 0;
  virtual const ParamSet<T>& params() const = 0;
  virtual const ModelConfig& model_config() const = 0;
};

// ---------------------------------------------------------------------------
// Run loop

template <class T>
std::vector<TestSet<T>> build_test_sets(const Stream& stream, std::size_t chunk = 32) {
  std::vector<TestSet<T>> out;
  for (std::size_t d = 0; d < stream.domains().size(); ++d) {
    const auto& spec = stream.domains()[d];
    TestSet<T> ts{spec.name, {}, spec.label_space.size()};
    const auto samples = generate_range(spec, stream.split(d).test);
    for (std::size_t i = 0; i < samples.size(); i += chunk) {
      const auto n = std::min(chunk, samples.size() - i);
      ts.chunks.push_back(to_labeled_batch<T>(std::span(samples).subspan(i, n), spec.label_space.ignore_index));
    }
    out.push_back(std::move(ts));
  }
  return out;
}

struct EvalPoint {
  std::size_t step = 0;
  std::optional<std::size_t> after_domain;  // sequential mode
  std::vector<double> miou;                 // per domain, stream order
};

template <class T>
struct RunResult {
  std::size_t steps = 0;
  std::size_t budget = 0;
  std::size_t total_updates = 0;
  std::size_t revealed_samples = 0;
  std::size_t boundary_flags_delivered = 0;
  std::size_t max_retained_past_batches = 0;
  std::vector<EvalPoint> eval_points;
  std::optional<TransferMatrix> transfer;  // sequential mode
  ModelSnapshot<T> final_model;
};

struct RunOptions {
  bool instrument_lifetimes = true;
  /// Mixed mode evaluation grid as a fraction of the stream (default 10%).
  double mixed_eval_fraction = 0.1;
};

/// Eval steps: end of each domain (sequential) or every fraction of the stream (mixed).
inline std::vector<std::size_t> eval_steps(const Stream& stream, const RunOptions& opts) {
  if (stream.config().mode == StreamMode::kSequential) return stream.domain_end_steps();
  std::vector<std::size_t> out;
  const auto n = stream.step_count();
  const auto points = static_cast<std::size_t>(std::llround(1.0 / opts.mixed_eval_fraction));
  for (std::size_t k = 1; k <= points; ++k) {
    const auto s = static_cast<std::size_t>(std::ceil(static_cast<double>(k) * static_cast<double>(n) /
                                                      static_cast<double>(points)));
    if (s >= 1 && (out.empty() || out.back() != s)) out.push_back(s);
  }
  return out;
}

template <class T>
RunResult<T> run(const Stream& stream, Learner<T>& learner, const std::vector<TestSet<T>>& tests,
                 const RunOptions& opts = {}) {
  RunResult<T> result;
  result.budget = stream.budget();
  result.steps = stream.step_count();
  const auto evals = eval_steps(stream, opts);
  const bool sequential = stream.config().mode == StreamMode::kSequential;
  if (sequential) result.transfer = TransferMatrix(stream.domains().size());

  std::vector<std::weak_ptr<const SampleBatch>> revealed;
  std::size_t next_eval = 0;
  for (std::size_t t = 1; t <= stream.step_count(); ++t) {
    StreamStep step = stream.reveal(t, learner.needs_boundaries());
    if (step.boundary) ++result.boundary_flags_delivered;
    StepContext<T> ctx(t, stream.budget(), step.boundary);
    learner.on_batch(*step.batch, ctx);
    if (ctx.used() != stream.budget())
      throw ProtocolViolation("step " + std::to_string(t) + ": learner performed " + std::to_string(ctx.used()) +
                              " updates, budget N=" + std::to_string(stream.budget()));
    result.total_updates += ctx.used();
    result.revealed_samples += step.batch->size();

    if (opts.instrument_lifetimes) revealed.push_back(step.batch);
    step = StreamStep{};  // the engine drops the batch before the next reveal
    if (opts.instrument_lifetimes) {
      std::size_t alive = 0;
      for (const auto& w : revealed) alive += !w.expired();
      result.max_retained_past_batches = std::max(result.max_retained_past_batches, alive);
    }

    if (next_eval < evals.size() && evals[next_eval] == t) {
      const auto snap = snapshot(learner.params(), learner.model_config());
      EvalPoint ep;
      ep.step = t;
      for (const auto& ts : tests) ep.miou.push_back(evaluate_domain(snap, ts));
      if (sequential) {
        ep.after_domain = next_eval;
        result.transfer->set_row(next_eval, ep.miou);
      }
      result.eval_points.push_back(std::move(ep));
      ++next_eval;
    }
  }
  result.final_model = snapshot(learner.params(), learner.model_config());
  return result;
}

/// A SimCS run at budget N and ratio ρ against a baseline at N·(1+ρ), so both
/// spend the same number of per-sample forward/backward passes.
struct BudgetPair {
  std::size_t simcs_budget = 0;
  double ratio = 0.0;
  std::size_t baseline_budget = 0;
};

inline BudgetPair budget_normalized_pair(std::size_t simcs_budget, double ratio) {
  require(simcs_budget >= 1, "budget must be >= 1");
  require(ratio >= 0.0, "ratio must be >= 0");
  const double normalized = static_cast<double>(simcs_budget) * (1.0 + ratio);
  const double rounded = std::round(normalized);
  if (std::abs(normalized - rounded) > 1e-9)
    throw ConfigError("normalized budget " + std::to_string(normalized) + " is not an integer");
  return {simcs_budget, ratio, static_cast<std::size_t>(rounded)};
}

}  // namespace odics
