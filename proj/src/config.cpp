#include "homodistil/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace homodistil {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(key, value, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || !std::isfinite(out)) bad_value(key, value, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true/false");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::vector<ExperimentConfig::Field> ExperimentConfig::fields() {
  std::vector<Field> f;
  auto integer = [&f](const char* name, auto& ref) {
    using T = std::remove_reference_t<decltype(ref)>;
    f.push_back({name, [&ref, name](const std::string& v) { ref = parse_int<T>(name, v); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto real = [&f](const char* name, double& ref) {
    f.push_back({name, [&ref, name](const std::string& v) { ref = parse_double(name, v); },
                 [&ref] { return format_double(ref); }});
  };
  auto boolean = [&f](const char* name, bool& ref) {
    f.push_back({name, [&ref, name](const std::string& v) { ref = parse_bool(name, v); },
                 [&ref] { return std::string(ref ? "true" : "false"); }});
  };
  auto text = [&f](const char* name, std::string& ref) {
    f.push_back({name, [&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }});
  };

  integer("seed", seed);
  text("corpus", corpus);
  integer("synthetic_sentences", synthetic_sentences);
  integer("corpus_seed", corpus_seed);
  integer("vocab_size", vocab_size);
  real("heldout_fraction", heldout_fraction);
  real("mask_prob", mask_prob);
  integer("seq_len", seq_len);
  integer("num_layers", num_layers);
  integer("hidden_dim", hidden_dim);
  integer("ffn_dim", ffn_dim);
  integer("num_heads", num_heads);
  real("layernorm_eps", layernorm_eps);
  integer("batch_size", batch_size);
  integer("teacher_iterations", teacher_iterations);
  real("teacher_learning_rate", teacher_learning_rate);
  real("teacher_warmup_fraction", teacher_warmup_fraction);
  integer("iterations", iterations);
  real("learning_rate", learning_rate);
  real("warmup_fraction", warmup_fraction);
  real("adam_beta1", adam_beta1);
  real("adam_beta2", adam_beta2);
  real("adam_eps", adam_eps);
  real("weight_decay", weight_decay);
  real("grad_clip", grad_clip);
  real("alpha_kd", alpha_kd);
  real("alpha_hidden", alpha_hidden);
  real("alpha_embedding", alpha_embedding);
  real("alpha_attention", alpha_attention);
  real("temperature", temperature);
  text("kl_direction", kl_direction);
  real("prune_start_fraction", prune_start_fraction);
  real("prune_end_fraction", prune_end_fraction);
  real("final_ratio", final_ratio);
  boolean("per_group_schedule", per_group_schedule);
  boolean("monotone_masks", monotone_masks);
  integer("prune_interval", prune_interval);
  text("scorer", scorer);
  real("beta_ema", beta_ema);
  real("beta_uncertainty", beta_uncertainty);
  f.push_back({"compare_end_fractions",
               [this](const std::string& v) {
                 std::vector<double> out;
                 std::stringstream ss(v);
                 std::string item;
                 while (std::getline(ss, item, ',')) out.push_back(parse_double("compare_end_fractions", trim(item)));
                 if (out.empty()) bad_value("compare_end_fractions", v, "a comma-separated list of numbers");
                 compare_end_fractions = std::move(out);
               },
               [this] {
                 std::string s;
                 for (std::size_t i = 0; i < compare_end_fractions.size(); ++i) {
                   if (i > 0) s += ',';
                   s += format_double(compare_end_fractions[i]);
                 }
                 return s;
               }});
  boolean("log_wallclock", log_wallclock);
  text("teacher", teacher);
  text("checkpoint", checkpoint);
  return f;
}

std::vector<ExperimentConfig::Field> ExperimentConfig::fields() const {
  return const_cast<ExperimentConfig*>(this)->fields();
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (auto& field : fields()) {
    if (key == field.name) {
      field.set(value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void ExperimentConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void ExperimentConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (!seen.insert(key).second) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    set(key, trim(t.substr(eq + 1)));
  }
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& field : fields()) out += std::string(field.name) + " = " + field.get() + "\n";
  return out;
}

std::vector<std::string> ExperimentConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& field : fields()) out.emplace_back(field.name);
  return out;
}

ModelConfig ExperimentConfig::model_config(Index vocab) const {
  ModelConfig m;
  m.vocab_size = vocab;
  m.max_seq_len = seq_len;
  m.num_layers = num_layers;
  m.hidden_dim = hidden_dim;
  m.ffn_dim = ffn_dim;
  m.num_heads = num_heads;
  m.layernorm_eps = layernorm_eps;
  m.validate();
  return m;
}

TrainConfig ExperimentConfig::distill_config() const {
  TrainConfig c;
  c.learning_rate = learning_rate;
  c.warmup_fraction = warmup_fraction;
  c.iterations = iterations;
  c.batch_size = batch_size;
  c.mask_prob = mask_prob;
  c.adam = AdamConfig{adam_beta1, adam_beta2, adam_eps, weight_decay, grad_clip};
  c.seed = seed;
  c.weights.kd = alpha_kd;
  c.weights.hidden = alpha_hidden;
  c.weights.embedding = alpha_embedding;
  c.weights.attention = alpha_attention;
  c.weights.temperature = temperature;
  if (kl_direction == "teacher_to_student") {
    c.weights.direction = KlDirection::TeacherToStudent;
  } else if (kl_direction == "student_to_teacher") {
    c.weights.direction = KlDirection::StudentToTeacher;
  } else {
    throw ConfigError("kl_direction must be teacher_to_student or student_to_teacher");
  }
  if (!(prune_start_fraction >= 0.0 && prune_start_fraction <= prune_end_fraction && prune_end_fraction <= 1.0)) {
    throw ConfigError("need 0 <= prune_start_fraction <= prune_end_fraction <= 1");
  }
  const double T = static_cast<double>(iterations);
  c.schedule.base.start = static_cast<Index>(std::llround(prune_start_fraction * T));
  c.schedule.base.end = static_cast<Index>(std::llround(prune_end_fraction * T));
  c.schedule.base.final_ratio = final_ratio;
  c.schedule.base.total = iterations;
  c.schedule.per_group = per_group_schedule;
  c.scorer = pruning::parse_scorer(scorer);
  c.beta_ema = beta_ema;
  c.beta_uncertainty = beta_uncertainty;
  c.monotone_masks = monotone_masks;
  c.prune_interval = prune_interval;
  c.log_wallclock = log_wallclock;
  c.validate();
  return c;
}

TrainConfig ExperimentConfig::teacher_config() const {
  TrainConfig c = distill_config();
  c.learning_rate = teacher_learning_rate;
  c.warmup_fraction = teacher_warmup_fraction;
  c.iterations = teacher_iterations;
  c.schedule = pruning::GroupSchedules{};
  c.schedule.base.end = 0;
  c.schedule.base.total = teacher_iterations;
  c.validate();
  return c;
}

}  // namespace homodistil
