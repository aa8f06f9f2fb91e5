#pragma once

#include <map>
#include <span>
#include <string>

#include "homodistil/model.hpp"

namespace homodistil {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double grad_clip = 0.0;  // global L2 norm; 0 disables clipping
};

/// Linear warmup to `peak` over the first warmup_fraction * total steps,
/// then linear decay to 0 at `total`.
struct LinearWarmupDecay {
  double peak = 1e-3;
  double warmup_fraction = 0.1;
  Index total = 1;

  double at(Index step) const;
};

/// Whether decoupled weight decay applies (not to biases or layernorm).
bool decays(ParamRole role);

/// Adam with bias correction and decoupled weight decay. Moments are keyed
/// by parameter name.
class Adam {
 public:
  struct Moments {
    MatrixD first;
    MatrixD second;
  };

  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// One update of every parameter from its accumulated gradient (missing
  /// gradients count as zero). Returns the pre-clip global gradient norm.
  double step(std::span<const ParamRef> params, double learning_rate);

  const AdamConfig& config() const { return config_; }
  long step_count() const { return steps_; }
  void set_step_count(long steps) { steps_ = steps; }

  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  AdamConfig config_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace homodistil
