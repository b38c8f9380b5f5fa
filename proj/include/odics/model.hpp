#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "odics/error.hpp"
#include "odics/rng.hpp"
#include "odics/tensor.hpp"

namespace odics {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t hidden_channels = 16;
  std::size_t num_layers = 3;
  std::size_t num_classes = 8;
  std::size_t kernel_size = 3;
  std::uint64_t init_seed = 1;

  void validate() const {
    require(num_classes >= 2, "num_classes must be >= 2");
    require(kernel_size % 2 == 1, "kernel_size must be odd");
    require(num_layers >= 1, "num_layers must be >= 1");
    require(in_channels >= 1 && hidden_channels >= 1, "channel counts must be positive");
  }

  std::size_t layer_in(std::size_t layer) const { return layer == 0 ? in_channels : hidden_channels; }
  std::size_t layer_out(std::size_t layer) const {
    return layer + 1 == num_layers ? num_classes : hidden_channels;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Images plus per-pixel labels, ready for the model.
template <class T>
struct LabeledBatch {
  Tensor<T> images;    // N×3×H×W
  LabelTensor labels;  // N×H×W
  std::int32_t ignore_index = 255;

  std::size_t size() const { return images.rank() ? images.dim(0) : 0; }
};

/// He-scaled normal weights, zero biases; deterministic in init_seed.
template <class T>
ParamSet<T> init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(hash_combine(config.init_seed, hash_name("init_model")));
  ParamSet<T> params;
  const std::size_t k = config.kernel_size;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::size_t cin = config.layer_in(l), cout = config.layer_out(l);
    Tensor<T> w({cout, cin, k, k});
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    for (auto& v : w.values()) v = static_cast<T>(stddev * rng.normal());
    params.add("conv" + std::to_string(l) + ".weight", std::move(w));
    params.add("conv" + std::to_string(l) + ".bias", Tensor<T>({cout}));
  }
  return params;
}

inline std::size_t parameter_count(const ModelConfig& c) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < c.num_layers; ++l)
    n += c.kernel_size * c.kernel_size * c.layer_in(l) * c.layer_out(l) + c.layer_out(l);
  return n;
}

/// Activations kept for the backward pass.
template <class T>
struct ForwardCache {
  std::vector<Tensor<T>> layer_inputs;  // input to each conv (post-ReLU for l > 0)
  std::vector<Tensor<T>> pre_activations;  // conv outputs of all but the last layer
  Tensor<T> logits;
};

template <class T>
void check_model_params(const ParamSet<T>& params) {
  if (params.count() == 0 || params.count() % 2 != 0)
    throw ConfigError("model parameter set must hold (weight, bias) pairs");
}

template <class T>
ForwardCache<T> forward_cached(const ParamSet<T>& params, const Tensor<T>& images) {
  check_model_params(params);
  const std::size_t layers = params.count() / 2;
  ForwardCache<T> cache;
  cache.layer_inputs.reserve(layers);
  Tensor<T> x = images;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor<T> y = conv2d(x, params[2 * l], params[2 * l + 1]);
    cache.layer_inputs.push_back(std::move(x));
    if (l + 1 == layers) {
      cache.logits = std::move(y);
    } else {
      x = relu(y);
      cache.pre_activations.push_back(std::move(y));
    }
  }
  return cache;
}

template <class T>
Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& images) {
  return forward_cached(params, images).logits;
}

/// Accumulates dL/dθ into grads given dL/dlogits.
template <class T>
void backward(const ParamSet<T>& params, const ForwardCache<T>& cache, const Tensor<T>& grad_logits,
              ParamSet<T>& grads) {
  const std::size_t layers = params.count() / 2;
  Tensor<T> g = grad_logits;
  for (std::size_t l = layers; l-- > 0;) {
    Tensor<T> g_in;
    conv2d_backward(cache.layer_inputs[l], params[2 * l], g, l > 0 ? &g_in : nullptr, grads[2 * l],
                    grads[2 * l + 1]);
    if (l > 0) g = relu_backward(cache.pre_activations[l - 1], g_in);
  }
}

/// Argmax over the class axis; ties go to the lowest class index.
template <class T>
LabelTensor argmax_classes(const Tensor<T>& logits) {
  const std::size_t n_batch = logits.dim(0), classes = logits.dim(1), h = logits.dim(2),
                    w = logits.dim(3);
  const std::size_t plane = h * w;
  LabelTensor out({n_batch, h, w});
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* lg = logits.data() + n * classes * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      std::int32_t best = 0;
      T best_v = lg[px];
      for (std::size_t c = 1; c < classes; ++c) {
        if (lg[c * plane + px] > best_v) {
          best_v = lg[c * plane + px];
          best = static_cast<std::int32_t>(c);
        }
      }
      out[n * plane + px] = best;
    }
  }
  return out;
}

template <class T>
LabelTensor predict(const ParamSet<T>& params, const Tensor<T>& images) {
  return argmax_classes(forward(params, images));
}

// ---------------------------------------------------------------------------
// Objective composition

/// Penalty on the parameters themselves (EWC, MAS). Adds its gradient into grads.
template <class T>
struct ParamPenalty {
  std::string name;
  std::function<double(const ParamSet<T>& params, ParamSet<T>& grads)> eval;
  // Diagonal curvature of a quadratic penalty. When set, the learner takes the
  // penalty implicitly: every gradient coordinate is divided by 1 + lr·D_i.
  std::function<double(std::size_t tensor, std::size_t index)> curvature;
};

/// Penalty on the logits of the primary batch (LwF). Adds into dlogits.
template <class T>
struct LogitPenalty {
  std::string name;
  std::function<double(const Tensor<T>& logits, const LabelTensor& labels, Tensor<T>& dlogits)> eval;
};

/// An additional weighted cross-entropy term on another labeled batch (replay, simulation).
template <class T>
struct BatchLoss {
  std::string name;
  std::shared_ptr<const LabeledBatch<T>> batch;
  double weight = 1.0;
};

template <class T>
using PenaltyTerm = std::variant<ParamPenalty<T>, LogitPenalty<T>, BatchLoss<T>>;

template <class T>
struct Objective {
  double loss = 0.0;       // total
  double data_loss = 0.0;  // primary batch cross-entropy
  ParamSet<T> grads;
};

namespace detail {
template <class T>
void scale_into(Tensor<T>& dst, double weight) {
  if (weight == 1.0) return;
  const T w = static_cast<T>(weight);
  for (auto& v : dst.values()) v *= w;
}
}  // namespace detail

/// Data loss on the primary batch plus every extra term, with exact gradients.
template <class T>
Objective<T> loss_and_grads(const ParamSet<T>& params, const LabeledBatch<T>& batch,
                            const std::vector<PenaltyTerm<T>>& extra_terms = {}) {
  Objective<T> obj;
  obj.grads = params.zeros_like();

  auto cache = forward_cached(params, batch.images);
  auto ce = masked_softmax_cross_entropy(cache.logits, batch.labels, batch.ignore_index);
  obj.data_loss = ce.loss;
  obj.loss = ce.loss;
  Tensor<T> dlogits = std::move(ce.grad);

  for (const auto& term : extra_terms) {
    if (const auto* lp = std::get_if<LogitPenalty<T>>(&term)) obj.loss += lp->eval(cache.logits, batch.labels, dlogits);
  }
  backward(params, cache, dlogits, obj.grads);

  for (const auto& term : extra_terms) {
    if (const auto* pp = std::get_if<ParamPenalty<T>>(&term)) {
      obj.loss += pp->eval(params, obj.grads);
    } else if (const auto* bl = std::get_if<BatchLoss<T>>(&term)) {
      if (!bl->batch || bl->batch->size() == 0 || bl->weight == 0.0) continue;
      auto extra_cache = forward_cached(params, bl->batch->images);
      auto extra = masked_softmax_cross_entropy(extra_cache.logits, bl->batch->labels, bl->batch->ignore_index);
      if (extra.valid_pixels == 0) continue;
      obj.loss += bl->weight * extra.loss;
      detail::scale_into(extra.grad, bl->weight);
      backward(params, extra_cache, extra.grad, obj.grads);
    }
  }
  if (!std::isfinite(obj.loss))
    throw NumericError("non-finite loss (data term " + std::to_string(obj.data_loss) + ")");
  return obj;
}

/// Scalar loss only; used by finite-difference checks.
template <class T>
double objective_value(const ParamSet<T>& params, const LabeledBatch<T>& batch,
                       const std::vector<PenaltyTerm<T>>& extra_terms = {}) {
  return loss_and_grads(params, batch, extra_terms).loss;
}

// ---------------------------------------------------------------------------
// Snapshots and checkpoints

template <class T>
struct ModelSnapshotData {
  ParamSet<T> params;
  ModelConfig config;
};

/// Frozen copy of a parameter set. Shares immutable storage between copies.
template <class T>
class ModelSnapshot {
 public:
  ModelSnapshot() = default;
  ModelSnapshot(ParamSet<T> params, ModelConfig config)
      : data_(std::make_shared<const ModelSnapshotData<T>>(ModelSnapshotData<T>{std::move(params), config})) {}

  const ParamSet<T>& params() const { return data_->params; }
  const ModelConfig& config() const { return data_->config; }
  bool valid() const { return static_cast<bool>(data_); }

 private:
  std::shared_ptr<const ModelSnapshotData<T>> data_;
};

template <class T>
ModelSnapshot<T> snapshot(const ParamSet<T>& params, const ModelConfig& config) {
  return ModelSnapshot<T>(params, config);
}

inline constexpr const char* kCheckpointMagic = "odics-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Text container; values are written as hex floats so a round trip is exact.
template <class T>
void save_checkpoint(const std::string& path, const ModelSnapshot<T>& snap) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  const auto& c = snap.config();
  out << kCheckpointMagic << " v" << kCheckpointVersion << '\n';
  out << "precision " << (sizeof(T) == sizeof(float) ? "float" : "double") << '\n';
  out << "config " << c.in_channels << ' ' << c.hidden_channels << ' ' << c.num_layers << ' '
      << c.num_classes << ' ' << c.kernel_size << ' ' << c.init_seed << '\n';
  out << std::hexfloat;
  for (const auto& e : snap.params().entries()) {
    out << "param " << e.name << ' ' << e.value.rank();
    for (auto d : e.value.shape()) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < e.value.size(); ++i)
      out << static_cast<double>(e.value[i]) << (i + 1 == e.value.size() ? '\n' : ' ');
  }
}

template <class T>
ModelSnapshot<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  std::string magic, version, key, precision;
  in >> magic >> version;
  if (magic != kCheckpointMagic || version != "v" + std::to_string(kCheckpointVersion))
    throw DataError("not a v1 checkpoint: " + path);
  in >> key >> precision;
  if (key != "precision") throw DataError("checkpoint missing precision line");
  ModelConfig c;
  in >> key >> c.in_channels >> c.hidden_channels >> c.num_layers >> c.num_classes >> c.kernel_size >>
      c.init_seed;
  if (key != "config" || !in) throw DataError("checkpoint missing config line");
  ParamSet<T> params;
  while (in >> key) {
    if (key != "param") throw DataError("unexpected token in checkpoint: " + key);
    std::string name;
    std::size_t rank = 0;
    in >> name >> rank;
    Shape shape(rank);
    for (auto& d : shape) in >> d;
    Tensor<T> t(shape);
    for (auto& v : t.values()) {
      std::string tok;
      in >> tok;
      v = static_cast<T>(std::strtod(tok.c_str(), nullptr));
    }
    if (!in) throw DataError("truncated parameter " + name);
    params.add(name, std::move(t));
  }
  return ModelSnapshot<T>(std::move(params), c);
}

}  // namespace odics
