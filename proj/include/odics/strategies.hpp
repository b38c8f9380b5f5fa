#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "odics/domains.hpp"
#include "odics/error.hpp"
#include "odics/label_space.hpp"
#include "odics/model.hpp"
#include "odics/rng.hpp"
#include "odics/stream.hpp"

namespace odics {

/// Shared plumbing for every strategy: owns the live parameters, runs the N
/// audited iterations and lets decorators append objective terms.
template <class T>
class LearnerBase : public Learner<T> {
 public:
  using TermHook = std::function<void(const LabeledBatch<T>& real, std::vector<PenaltyTerm<T>>& terms)>;

  LearnerBase(ModelConfig config, ParamSet<T> params, double lr)
      : config_(std::move(config)), params_(std::move(params)), lr_(lr) {
    require(lr >= 0.0, "learning rate must be >= 0");
  }

  const ParamSet<T>& params() const override { return params_; }
  const ModelConfig& model_config() const override { return config_; }
  ParamSet<T>& mutable_params() { return params_; }
  double lr() const noexcept { return lr_; }

  void add_term_hook(TermHook hook) { hooks_.push_back(std::move(hook)); }

  /// Primary-batch data loss before each update, in order.
  const std::vector<double>& loss_trace() const noexcept { return loss_trace_; }
  void keep_loss_trace(bool on) { trace_on_ = on; }

 protected:
  void run_iterations(const LabeledBatch<T>& real, StepContext<T>& ctx,
                      const std::function<void(std::vector<PenaltyTerm<T>>&)>& strategy_terms = {}) {
    for (std::size_t i = 0; i < ctx.budget(); ++i) {
      std::vector<PenaltyTerm<T>> terms;
      if (strategy_terms) strategy_terms(terms);
      for (const auto& h : hooks_) h(real, terms);
      auto obj = loss_and_grads(params_, real, terms);
      if (trace_on_) loss_trace_.push_back(obj.data_loss);
      for (const auto& t : terms)
        if (const auto* pp = std::get_if<ParamPenalty<T>>(&t); pp && pp->curvature) implicit_scale(*pp, obj.grads);
      ctx.apply_update(params_, obj.grads, lr_);
    }
  }

  // θ' = θ − lr·(g + D(θ'−θ*)) solved for θ' is an SGD step on g_total/(1 + lr·D).
  // Explicit steps on a stiff anchor (lr·D > 2) diverge; this one does not.
  void implicit_scale(const ParamPenalty<T>& pen, ParamSet<T>& grads) const {
    for (std::size_t i = 0; i < grads.count(); ++i)
      for (std::size_t j = 0; j < grads[i].size(); ++j)
        grads[i][j] = static_cast<T>(static_cast<double>(grads[i][j]) / (1.0 + lr_ * pen.curvature(i, j)));
  }

  ModelConfig config_;
  ParamSet<T> params_;
  double lr_;

 private:
  std::vector<TermHook> hooks_;
  std::vector<double> loss_trace_;
  bool trace_on_ = false;
};

// ---------------------------------------------------------------------------
// Naive training

template <class T>
class NaiveLearner : public LearnerBase<T> {
 public:
  using LearnerBase<T>::LearnerBase;
  std::string name() const override { return "nt"; }
  bool needs_boundaries() const override { return false; }
  void on_batch(const SampleBatch& batch, StepContext<T>& ctx) override {
    const auto real = to_labeled_batch<T>(batch.samples);
    this->run_iterations(real, ctx);
  }
};

// ---------------------------------------------------------------------------
// EWC / MAS importance-weighted anchors

template <class T>
struct AnchorState {
  ModelSnapshot<T> anchor;
  ParamSet<T> importance;  // Fisher diagonal (EWC) or Ω (MAS); elementwise >= 0
  double lambda = 0.0;
  bool consolidated = false;
  bool last_consolidation_empty = false;
};

template <class T>
using EWCState = AnchorState<T>;
template <class T>
using MASState = AnchorState<T>;

/// anchor ← θ; F ← mean over batches of the squared data-loss gradient.
template <class T>
void consolidate_ewc(EWCState<T>& state, const ParamSet<T>& params, const ModelConfig& config,
                     std::span<const LabeledBatch<T>> recent) {
  state.anchor = snapshot(params, config);
  state.importance = params.zeros_like();
  state.consolidated = true;
  state.last_consolidation_empty = recent.empty();
  if (recent.empty()) {
    std::cerr << "warning: EWC consolidation without data; Fisher set to zero\n";
    return;
  }
  const double inv = 1.0 / static_cast<double>(recent.size());
  for (const auto& b : recent) {
    const auto obj = loss_and_grads(params, b);
    for (std::size_t i = 0; i < params.count(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        const double g = static_cast<double>(obj.grads[i][j]);
        state.importance[i][j] += static_cast<T>(g * g * inv);
      }
  }
}

/// (λ/2)·Σ F(θ−θ*)², gradient λ·F⊙(θ−θ*).
template <class T>
ParamPenalty<T> ewc_penalty(const EWCState<T>& state) {
  return {"ewc", [&state](const ParamSet<T>& params, ParamSet<T>& grads) {
            if (!state.consolidated || state.lambda == 0.0) return 0.0;
            const auto& anchor = state.anchor.params();
            double value = 0.0;
            for (std::size_t i = 0; i < params.count(); ++i)
              for (std::size_t j = 0; j < params[i].size(); ++j) {
                const double d = static_cast<double>(params[i][j]) - static_cast<double>(anchor[i][j]);
                const double f = static_cast<double>(state.importance[i][j]);
                value += f * d * d;
                grads[i][j] += static_cast<T>(state.lambda * f * d);
              }
            return 0.5 * state.lambda * value;
          },
          [&state](std::size_t i, std::size_t j) {
            return state.lambda * static_cast<double>(state.importance[i][j]);
          }};
}

/// Importance signal: mean over pixels of the squared L2 norm of the logit vector.
template <class T>
ParamSet<T> output_norm_gradient(const ParamSet<T>& params, const Tensor<T>& images) {
  auto cache = forward_cached(params, images);
  const auto& lg = cache.logits;
  const double pixels = static_cast<double>(lg.dim(0) * lg.dim(2) * lg.dim(3));
  Tensor<T> d(lg.shape());
  for (std::size_t i = 0; i < lg.size(); ++i) d[i] = static_cast<T>(2.0 * static_cast<double>(lg[i]) / pixels);
  auto grads = params.zeros_like();
  backward(params, cache, d, grads);
  return grads;
}

template <class T>
double output_norm_signal(const ParamSet<T>& params, const Tensor<T>& images) {
  const auto lg = forward(params, images);
  double s = 0.0;
  for (std::size_t i = 0; i < lg.size(); ++i) s += static_cast<double>(lg[i]) * static_cast<double>(lg[i]);
  return s / static_cast<double>(lg.dim(0) * lg.dim(2) * lg.dim(3));
}

/// anchor ← θ; Ω ← mean over batches of |∂ signal / ∂θ|.
template <class T>
void consolidate_mas(MASState<T>& state, const ParamSet<T>& params, const ModelConfig& config,
                     std::span<const LabeledBatch<T>> recent) {
  state.anchor = snapshot(params, config);
  state.importance = params.zeros_like();
  state.consolidated = true;
  state.last_consolidation_empty = recent.empty();
  if (recent.empty()) {
    std::cerr << "warning: MAS consolidation without data; importance set to zero\n";
    return;
  }
  const double inv = 1.0 / static_cast<double>(recent.size());
  for (const auto& b : recent) {
    const auto g = output_norm_gradient(params, b.images);
    for (std::size_t i = 0; i < params.count(); ++i)
      for (std::size_t j = 0; j < params[i].size(); ++j)
        state.importance[i][j] += static_cast<T>(std::abs(static_cast<double>(g[i][j])) * inv);
  }
}

/// λ·Σ Ω(θ−θ*)², gradient 2λ·Ω⊙(θ−θ*).
template <class T>
ParamPenalty<T> mas_penalty(const MASState<T>& state) {
  return {"mas", [&state](const ParamSet<T>& params, ParamSet<T>& grads) {
            if (!state.consolidated || state.lambda == 0.0) return 0.0;
            const auto& anchor = state.anchor.params();
            double value = 0.0;
            for (std::size_t i = 0; i < params.count(); ++i)
              for (std::size_t j = 0; j < params[i].size(); ++j) {
                const double d = static_cast<double>(params[i][j]) - static_cast<double>(anchor[i][j]);
                const double w = static_cast<double>(state.importance[i][j]);
                value += w * d * d;
                grads[i][j] += static_cast<T>(2.0 * state.lambda * w * d);
              }
            return state.lambda * value;
          },
          [&state](std::size_t i, std::size_t j) {
            return 2.0 * state.lambda * static_cast<double>(state.importance[i][j]);
          }};
}

/// λ·T²·mean over valid pixels of KL(softmax(teacher/T) ‖ softmax(student/T)).
/// Adds the gradient with respect to the student logits into dlogits.
template <class T>
double lwf_term(const Tensor<T>& student, const Tensor<T>& teacher, double temperature, double lambda,
                const LabelTensor& labels, std::int32_t ignore_index, Tensor<T>& dlogits) {
  if (student.shape() != teacher.shape()) throw ConfigError("student/teacher logit shapes differ");
  if (lambda == 0.0) return 0.0;
  const std::size_t n_batch = student.dim(0), classes = student.dim(1), plane = student.dim(2) * student.dim(3);
  std::size_t valid = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) valid += labels[i] != ignore_index;
  if (valid == 0) return 0.0;
  const double inv_t = 1.0 / temperature;
  const double scale = lambda * temperature * temperature / static_cast<double>(valid);
  std::vector<double> ps(classes), pt(classes);
  double total = 0.0;
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t px = 0; px < plane; ++px) {
      if (labels[n * plane + px] == ignore_index) continue;
      const std::size_t base = n * classes * plane + px;
      double ms = -INFINITY, mt = -INFINITY;
      for (std::size_t c = 0; c < classes; ++c) {
        ms = std::max(ms, static_cast<double>(student[base + c * plane]) * inv_t);
        mt = std::max(mt, static_cast<double>(teacher[base + c * plane]) * inv_t);
      }
      double zs = 0.0, zt = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        ps[c] = std::exp(static_cast<double>(student[base + c * plane]) * inv_t - ms);
        pt[c] = std::exp(static_cast<double>(teacher[base + c * plane]) * inv_t - mt);
        zs += ps[c];
        zt += pt[c];
      }
      const double log_zs = std::log(zs) + ms, log_zt = std::log(zt) + mt;
      double kl = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        const double lps = static_cast<double>(student[base + c * plane]) * inv_t - log_zs;
        const double lpt = static_cast<double>(teacher[base + c * plane]) * inv_t - log_zt;
        const double qt = pt[c] / zt;
        kl += qt * (lpt - lps);
        dlogits[base + c * plane] += static_cast<T>(scale * inv_t * (ps[c] / zs - qt));
      }
      total += kl;
    }
  }
  return scale * total;
}

// ---------------------------------------------------------------------------
// Regularization-based learners. They ask for boundary flags; λ is inactive
// until the first consolidation, i.e. throughout the first domain.

template <class T>
class WindowedRegularizer : public LearnerBase<T> {
 public:
  WindowedRegularizer(ModelConfig config, ParamSet<T> params, double lr, std::size_t window)
      : LearnerBase<T>(std::move(config), std::move(params), lr), window_(window) {}

  bool needs_boundaries() const override { return true; }

  void on_batch(const SampleBatch& batch, StepContext<T>& ctx) override {
    auto real = to_labeled_batch<T>(batch.samples);
    if (ctx.boundary().value_or(false)) {
      if (seen_batches_ > 0) consolidate(std::span<const LabeledBatch<T>>(recent_));
      recent_.clear();
    }
    prepare(real);
    this->run_iterations(real, ctx, [this, &real](std::vector<PenaltyTerm<T>>& terms) { add_terms(real, terms); });
    if (window_ > 0) {
      recent_.push_back(std::move(real));
      if (recent_.size() > window_) recent_.erase(recent_.begin(), recent_.end() - static_cast<std::ptrdiff_t>(window_));
    }
    ++seen_batches_;
  }

  std::size_t retained_batches() const noexcept { return recent_.size(); }

 protected:
  virtual void consolidate(std::span<const LabeledBatch<T>> recent) = 0;
  virtual void prepare(const LabeledBatch<T>&) {}
  virtual void add_terms(const LabeledBatch<T>& real, std::vector<PenaltyTerm<T>>& terms) = 0;

 private:
  std::size_t window_;
  std::vector<LabeledBatch<T>> recent_;
  std::size_t seen_batches_ = 0;
};

template <class T>
class EWCLearner : public WindowedRegularizer<T> {
 public:
  EWCLearner(ModelConfig config, ParamSet<T> params, double lr, double lambda, std::size_t window = 25)
      : WindowedRegularizer<T>(std::move(config), std::move(params), lr, window) {
    state_.lambda = lambda;
  }
  std::string name() const override { return "ewc"; }
  const EWCState<T>& state() const { return state_; }

 protected:
  void consolidate(std::span<const LabeledBatch<T>> recent) override {
    consolidate_ewc(state_, this->params_, this->config_, recent);
  }
  void add_terms(const LabeledBatch<T>&, std::vector<PenaltyTerm<T>>& terms) override {
    if (state_.consolidated && state_.lambda != 0.0) terms.emplace_back(ewc_penalty(state_));
  }

 private:
  EWCState<T> state_;
};

template <class T>
class MASLearner : public WindowedRegularizer<T> {
 public:
  MASLearner(ModelConfig config, ParamSet<T> params, double lr, double lambda, std::size_t window = 25)
      : WindowedRegularizer<T>(std::move(config), std::move(params), lr, window) {
    state_.lambda = lambda;
  }
  std::string name() const override { return "mas"; }
  const MASState<T>& state() const { return state_; }

 protected:
  void consolidate(std::span<const LabeledBatch<T>> recent) override {
    consolidate_mas(state_, this->params_, this->config_, recent);
  }
  void add_terms(const LabeledBatch<T>&, std::vector<PenaltyTerm<T>>& terms) override {
    if (state_.consolidated && state_.lambda != 0.0) terms.emplace_back(mas_penalty(state_));
  }

 private:
  MASState<T> state_;
};

template <class T>
struct LwFState {
  ModelSnapshot<T> teacher;
  double lambda = 50.0;
  double temperature = 2.0;
};

template <class T>
class LwFLearner : public WindowedRegularizer<T> {
 public:
  LwFLearner(ModelConfig config, ParamSet<T> params, double lr, double lambda, double temperature = 2.0)
      : WindowedRegularizer<T>(std::move(config), std::move(params), lr, 0) {
    require(temperature > 0.0, "LwF temperature must be positive");
    state_.lambda = lambda;
    state_.temperature = temperature;
  }
  std::string name() const override { return "lwf"; }
  const LwFState<T>& state() const { return state_; }

 protected:
  void consolidate(std::span<const LabeledBatch<T>>) override {
    state_.teacher = snapshot(this->params_, this->config_);
  }
  void prepare(const LabeledBatch<T>& real) override {
    if (state_.teacher.valid() && state_.lambda != 0.0) teacher_logits_ = forward(state_.teacher.params(), real.images);
  }
  void add_terms(const LabeledBatch<T>&, std::vector<PenaltyTerm<T>>& terms) override {
    if (!state_.teacher.valid() || state_.lambda == 0.0) return;
    terms.emplace_back(LogitPenalty<T>{
        "lwf", [this](const Tensor<T>& logits, const LabelTensor& labels, Tensor<T>& dlogits) {
          return lwf_term(logits, teacher_logits_, state_.temperature, state_.lambda, labels, kIgnoreIndex, dlogits);
        }});
  }

 private:
  LwFState<T> state_;
  Tensor<T> teacher_logits_;
};

// ---------------------------------------------------------------------------
// Experience replay

/// Bounded FIFO store; evicts strictly oldest-first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 800) : capacity_(capacity) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::uint64_t insertions() const noexcept { return insertions_; }
  const LabeledSample& at(std::size_t i) const { return items_.at(i); }
  const std::deque<LabeledSample>& items() const noexcept { return items_; }

  void insert(LabeledSample s) {
    ++insertions_;
    if (capacity_ == 0) return;
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(s));
  }

  /// k distinct items chosen uniformly at random (partial Fisher-Yates).
  std::vector<LabeledSample> sample(std::size_t k, Rng& rng) const {
    k = std::min(k, items_.size());
    std::vector<std::size_t> idx(items_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<LabeledSample> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                              static_cast<std::int64_t>(idx.size()) - 1));
      std::swap(idx[i], idx[j]);
      out.push_back(items_[idx[i]]);
    }
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<LabeledSample> items_;
  std::uint64_t insertions_ = 0;
};

template <class T>
class ReplayLearner : public LearnerBase<T> {
 public:
  ReplayLearner(ModelConfig config, ParamSet<T> params, double lr, std::size_t capacity, std::uint64_t seed)
      : LearnerBase<T>(std::move(config), std::move(params), lr), buffer_(capacity),
        rng_(hash_combine(seed, hash_name("replay"))) {}

  std::string name() const override { return "er"; }
  bool needs_boundaries() const override { return false; }
  const ReplayBuffer& buffer() const noexcept { return buffer_; }

  void on_batch(const SampleBatch& batch, StepContext<T>& ctx) override {
    const auto real = to_labeled_batch<T>(batch.samples);
    this->run_iterations(real, ctx, [this, &batch](std::vector<PenaltyTerm<T>>& terms) {
      if (buffer_.empty()) return;
      auto picked = buffer_.sample(batch.size(), rng_);
      auto rep = std::make_shared<LabeledBatch<T>>(to_labeled_batch<T>(picked));
      terms.emplace_back(BatchLoss<T>{"replay", std::move(rep), 1.0});
    });
    for (const auto& s : batch.samples) buffer_.insert(s);
  }

 private:
  ReplayBuffer buffer_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// SimCS

struct SimCSConfig {
  DomainSpec sim_domain;
  LabelMap label_map;
  double ratio = 1.0;
  std::uint64_t sim_seed = 0;

  void validate() const {
    require(ratio > 0.0, "sim-real ratio must be > 0");
    sim_domain.validate();
    label_map.validate();
    require(label_map.source == sim_domain.label_space, "label map source space differs from simulator space");
  }
};

/// round(ρ·B), at least 1.
inline std::size_t sim_batch_size(double ratio, std::size_t real_batch) {
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(real_batch)));
  return std::max<std::size_t>(1, n);
}

/// Simulated sample relabeled into the target space.
inline LabeledSample relabeled_sim_sample(const SimCSConfig& cfg, std::uint64_t seed) {
  auto s = generate_sample(cfg.sim_domain, seed);
  s.mask = apply_map(cfg.label_map, s.mask);
  return s;
}

/// Decorator: every training iteration of the wrapped learner also minimizes
/// the cross-entropy on a freshly generated simulated batch of size round(ρ·B).
/// The simulated term is weighted by its sample count relative to the real
/// batch, matching a per-sample sum over real and simulated images.
template <class T>
class SimCSLearner : public Learner<T> {
 public:
  SimCSLearner(std::unique_ptr<LearnerBase<T>> base, SimCSConfig cfg)
      : base_(std::move(base)), cfg_(std::move(cfg)) {
    cfg_.validate();
    base_->add_term_hook([this](const LabeledBatch<T>& real, std::vector<PenaltyTerm<T>>& terms) {
      const std::size_t n_real = real.size();
      const std::size_t n_sim = sim_batch_size(cfg_.ratio, n_real);
      std::vector<LabeledSample> sim;
      sim.reserve(n_sim);
      for (std::size_t i = 0; i < n_sim; ++i)
        sim.push_back(relabeled_sim_sample(cfg_, hash_combine(cfg_.sim_seed, counter_++)));
      auto b = std::make_shared<LabeledBatch<T>>(to_labeled_batch<T>(sim, cfg_.label_map.target.ignore_index));
      terms.emplace_back(BatchLoss<T>{"sim", std::move(b), static_cast<double>(n_sim) / static_cast<double>(n_real)});
    });
  }

  std::string name() const override { return base_->name() + "+" + cfg_.sim_domain.name; }
  bool needs_boundaries() const override { return base_->needs_boundaries(); }
  void on_batch(const SampleBatch& batch, StepContext<T>& ctx) override { base_->on_batch(batch, ctx); }
  const ParamSet<T>& params() const override { return base_->params(); }
  const ModelConfig& model_config() const override { return base_->model_config(); }

  LearnerBase<T>& base() { return *base_; }
  std::uint64_t sim_samples_generated() const noexcept { return counter_; }

 private:
  std::unique_ptr<LearnerBase<T>> base_;
  SimCSConfig cfg_;
  std::uint64_t counter_ = 0;
};

template <class T>
std::unique_ptr<Learner<T>> simcs_wrap(std::unique_ptr<LearnerBase<T>> base, SimCSConfig cfg) {
  return std::make_unique<SimCSLearner<T>>(std::move(base), std::move(cfg));
}

// ---------------------------------------------------------------------------
// Offline training routines

/// Minibatch SGD over a fixed list of sample generators, reshuffled per epoch.
template <class T>
void train_offline(ParamSet<T>& params, std::size_t count, const std::function<LabeledSample(std::size_t)>& sample_at,
                   std::size_t epochs, double lr, std::size_t batch_size, std::uint64_t seed) {
  require(batch_size >= 1, "batch size must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(hash_combine(seed, hash_name("offline")));
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t i = 0; i < count; i += batch_size) {
      std::vector<LabeledSample> samples;
      for (std::size_t k = i; k < std::min(count, i + batch_size); ++k) samples.push_back(sample_at(order[k]));
      const auto batch = to_labeled_batch<T>(samples);
      const auto obj = loss_and_grads(params, batch);
      sgd_step(params, obj.grads, lr);
    }
  }
}

/// Supervised training on a fixed relabeled simulated set before streaming.
template <class T>
void pretrain_on_sim(ParamSet<T>& params, const SimCSConfig& cfg, std::size_t num_images, std::size_t epochs,
                     double lr, std::size_t batch_size = 8, std::uint64_t seed = 0) {
  cfg.validate();
  const auto base = hash_combine(cfg.sim_seed, hash_name("pretrain"));
  train_offline<T>(
      params, num_images, [&](std::size_t i) { return relabeled_sim_sample(cfg, hash_combine(base, i)); }, epochs, lr,
      batch_size, seed);
}

/// Offline multi-epoch training on the union of every domain's train split.
template <class T>
ParamSet<T> supervised_upper_bound(const Stream& stream, const ModelConfig& config, std::size_t epochs, double lr,
                                   std::uint64_t seed) {
  auto params = init_model<T>(config);
  std::vector<ScheduledSample> all;
  for (std::size_t d = 0; d < stream.domains().size(); ++d) {
    const auto& r = stream.split(d).train;
    for (std::uint64_t s = r.begin; s < r.end(); ++s) all.push_back({d, s});
  }
  train_offline<T>(
      params, all.size(), [&](std::size_t i) { return generate_sample(stream.domains()[all[i].domain], all[i].seed); },
      epochs, lr, stream.config().batch_size, seed);
  return params;
}

}  // namespace odics
