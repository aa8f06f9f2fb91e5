#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "homodistil/model.hpp"
#include "homodistil/trainer.hpp"

namespace homodistil {

/// Everything a command needs, read from one flat `key = value` file plus
/// overrides. Lines starting with '#' are comments. Unknown keys are
/// rejected.
struct ExperimentConfig {
  std::uint64_t seed = 0;

  // data
  std::string corpus = "synthetic";  // path to a UTF-8 text file, or "synthetic"
  Index synthetic_sentences = 3000;
  std::uint64_t corpus_seed = 0;  // synthetic corpus only; independent of `seed`
  Index vocab_size = 128;  // upper bound; the model uses the built vocabulary's size
  double heldout_fraction = 0.1;
  double mask_prob = 0.15;

  // model
  Index seq_len = 16;
  Index num_layers = 2;
  Index hidden_dim = 32;
  Index ffn_dim = 128;
  Index num_heads = 2;
  double layernorm_eps = 1e-12;

  // optimization
  Index batch_size = 16;
  Index teacher_iterations = 1500;
  double teacher_learning_rate = 2e-3;
  double teacher_warmup_fraction = 0.1;
  Index iterations = 400;
  double learning_rate = 5e-4;
  double warmup_fraction = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  double weight_decay = 0.01;
  double grad_clip = 0.0;

  // losses
  double alpha_kd = 1.0;
  double alpha_hidden = 1.0;
  double alpha_embedding = 1.0;
  double alpha_attention = 1.0;
  double temperature = 2.0;
  std::string kl_direction = "teacher_to_student";

  // pruning
  double prune_start_fraction = 0.0;
  double prune_end_fraction = 0.9;
  double final_ratio = 0.5;
  bool per_group_schedule = false;
  bool monotone_masks = false;
  Index prune_interval = 1;
  std::string scorer = "sensitivity";
  double beta_ema = 0.85;
  double beta_uncertainty = 0.85;

  // experiments and paths
  std::vector<double> compare_end_fractions{0.0, 0.5, 0.7, 0.9};
  bool log_wallclock = false;
  std::string teacher;     // teacher checkpoint (distill, compare-schedules)
  std::string checkpoint;  // input checkpoint (export-compact, eval-mlm)

  /// Sets one key from its text form. Throws ConfigError for an unknown key
  /// or an unparsable value.
  void set(const std::string& key, const std::string& value);
  /// Applies "key=value".
  void apply_override(const std::string& assignment);
  /// Reads a config file over the current values.
  void load_file(const std::filesystem::path& path);
  /// Every key in a fixed order, one "key = value" line each.
  std::string to_text() const;
  std::vector<std::string> keys() const;

  ModelConfig model_config(Index vocab) const;
  /// Distillation settings (also validates them).
  TrainConfig distill_config() const;
  /// MLM pretraining settings for the teacher.
  TrainConfig teacher_config() const;

 private:
  struct Field {
    const char* name;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::vector<Field> fields();
  std::vector<Field> fields() const;
};

}  // namespace homodistil
