#include "homodistil/cli.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "homodistil/experiments.hpp"
#include "homodistil/trainer.hpp"

namespace homodistil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVocabFile = "vocab.json";

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

void prepare_out_dir(const ExperimentConfig& cfg, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw InputError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  write_text(out_dir / "config.txt", cfg.to_text());
}

/// Appends one JSON object per record and flushes, so a run that aborts
/// still leaves every completed iteration on disk.
class JsonlSink {
 public:
  explicit JsonlSink(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw InputError("cannot write " + path.string());
  }
  void operator()(const MetricsRecord& r) { out_ << r.to_json().dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

data::Dataset make_dataset(const ExperimentConfig& cfg, const data::Vocabulary& vocab, Index seq_len) {
  const auto lines = corpus_lines(cfg);
  return data::Dataset(data::pack_sequences(lines, vocab, seq_len), cfg.heldout_fraction);
}

struct LoadedTeacher {
  Checkpoint ckpt;
  data::Vocabulary vocab;
  fs::path dir;
};

LoadedTeacher load_with_vocab(const std::string& path, const char* key) {
  if (path.empty()) throw ConfigError(std::string("config key '") + key + "' must name a checkpoint");
  LoadedTeacher t;
  t.dir = resolve_checkpoint_dir(path);
  t.ckpt = load_checkpoint(t.dir);
  t.vocab = data::Vocabulary::load(t.dir / kVocabFile);
  if (t.vocab.size() != t.ckpt.model.config.vocab_size) {
    throw InputError("vocabulary in " + t.dir.string() + " does not match the checkpoint's vocab_size");
  }
  return t;
}

void require_matching_shape(const ExperimentConfig& cfg, const ModelConfig& teacher) {
  auto check = [](const char* key, Index configured, Index actual) {
    if (configured != actual) {
      throw ConfigError(std::string("teacher checkpoint shape mismatch: ") + key + " is " + std::to_string(configured) +
                        " in the config but " + std::to_string(actual) + " in the teacher");
    }
  };
  check("num_layers", cfg.num_layers, teacher.num_layers);
  check("hidden_dim", cfg.hidden_dim, teacher.hidden_dim);
  check("ffn_dim", cfg.ffn_dim, teacher.ffn_dim);
  check("num_heads", cfg.num_heads, teacher.num_heads);
  check("seq_len", cfg.seq_len, teacher.max_seq_len);
}

json widths_json(const pruning::MaskSet& masks) {
  json j = json::object();
  for (const auto& [g, m] : masks.masks) j[g.name()] = masks.kept(g);
  return j;
}

json count_json(const ParameterCount& c) {
  return {{"embedding", c.embedding}, {"backbone", c.backbone}, {"total", c.total}};
}

std::vector<data::MLMBatch> heldout(const ExperimentConfig& cfg, const data::Dataset& ds,
                                    const data::Vocabulary& vocab) {
  return ds.heldout_batches(data::derive_seed(cfg.seed, streams::kHeldout), cfg.batch_size, vocab, cfg.mask_prob);
}

}  // namespace

std::vector<std::string> corpus_lines(const ExperimentConfig& cfg) {
  if (cfg.corpus == "synthetic") return data::synthetic_corpus(cfg.synthetic_sentences, cfg.corpus_seed);
  if (cfg.corpus.empty()) throw ConfigError("config key 'corpus' is empty");
  if (!fs::exists(cfg.corpus)) throw InputError("corpus file " + cfg.corpus + " does not exist");
  return data::read_corpus(cfg.corpus);
}

fs::path resolve_checkpoint_dir(const fs::path& path) {
  if (fs::exists(path / kManifestName)) return path;
  if (fs::exists(path / "checkpoint" / kManifestName)) return path / "checkpoint";
  throw InputError("no checkpoint found at " + path.string());
}

void pretrain_teacher(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const TrainConfig train = cfg.teacher_config();
  const auto lines = corpus_lines(cfg);
  const data::Vocabulary vocab = data::Vocabulary::build(lines, cfg.vocab_size);
  const ModelConfig model_cfg = cfg.model_config(vocab.size());
  const data::Dataset ds(data::pack_sequences(lines, vocab, cfg.seq_len), cfg.heldout_fraction);
  prepare_out_dir(cfg, out_dir);

  JsonlSink sink(out_dir / "metrics.jsonl");
  double last_train = 0.0;
  TransformerModel model = homodistil::pretrain_teacher(model_cfg, train, ds, vocab, [&](const MetricsRecord& r) {
    sink(r);
    last_train = r.losses.l_mlm;
  });

  Checkpoint ckpt;
  ckpt.model = std::move(model);
  ckpt.counters = {{"step", train.iterations}};
  ckpt.metadata = {{"kind", "teacher"}, {"seed", cfg.seed}};
  const fs::path ckpt_dir = out_dir / "checkpoint";
  save_checkpoint(ckpt_dir, ckpt);
  vocab.save(ckpt_dir / kVocabFile);

  const double heldout_mlm = evaluate_mlm(ckpt.model, heldout(cfg, ds, vocab));
  const json summary = {{"final_train_mlm", last_train},
                        {"heldout_mlm", heldout_mlm},
                        {"uniform_bound", std::log(static_cast<double>(vocab.size()))},
                        {"vocab_size", vocab.size()},
                        {"parameters", count_json(count_parameters(ckpt.model))}};
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  log << "teacher written to " << ckpt_dir.string() << " (held-out MLM " << heldout_mlm << ", ln V "
      << std::log(static_cast<double>(vocab.size())) << ")\n";
}

void distill(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const TrainConfig train = cfg.distill_config();
  LoadedTeacher t = load_with_vocab(cfg.teacher, "teacher");
  require_matching_shape(cfg, t.ckpt.model.config);
  const data::Dataset ds = make_dataset(cfg, t.vocab, cfg.seq_len);
  prepare_out_dir(cfg, out_dir);

  JsonlSink sink(out_dir / "metrics.jsonl");
  DistillResult result = homodistil::distill(t.ckpt.model, train, ds, t.vocab, [&](const MetricsRecord& r) { sink(r); });
  DistillState& s = result.state;

  Checkpoint ckpt;
  ckpt.model = std::move(s.student);
  ckpt.projections = std::move(s.projections);
  ckpt.masks = s.masks;
  ckpt.importance = s.importance;
  ckpt.optimizer = std::move(s.optimizer);
  ckpt.counters = {{"step", s.step}};
  ckpt.metadata = {{"kind", "student"}, {"seed", cfg.seed}, {"scorer", cfg.scorer}};
  const fs::path ckpt_dir = out_dir / "checkpoint";
  save_checkpoint(ckpt_dir, ckpt);
  t.vocab.save(ckpt_dir / kVocabFile);

  const double heldout_mlm = evaluate_mlm(ckpt.model, heldout(cfg, ds, t.vocab));
  const json summary = {{"heldout_mlm", heldout_mlm},
                        {"final_d_kl", result.log.back().losses.d_kl},
                        {"final_l_total", result.log.back().losses.l_total},
                        {"kept", widths_json(*ckpt.masks)}};
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  log << "student written to " << ckpt_dir.string() << " (held-out MLM " << heldout_mlm << ")\n";
}

void compare_schedules(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const TrainConfig train = cfg.distill_config();
  LoadedTeacher t = load_with_vocab(cfg.teacher, "teacher");
  require_matching_shape(cfg, t.ckpt.model.config);
  const data::Dataset ds = make_dataset(cfg, t.vocab, cfg.seq_len);
  prepare_out_dir(cfg, out_dir);

  const ScheduleComparison cmp = homodistil::compare_schedules(t.ckpt.model, train, cfg.compare_end_fractions, ds, t.vocab);
  write_comparison_csv(cmp, out_dir);
  const bool holds = cmp.ordering_holds();
  write_text(out_dir / "summary.json", json{{"ordering_holds", holds}}.dump(2) + "\n");
  for (const auto& r : cmp.runs) {
    log << r.run_id << ": initial d_kl " << r.log.front().losses.d_kl << ", final d_kl " << r.log.back().losses.d_kl
        << ", held-out MLM " << r.heldout_mlm << "\n";
  }
  log << "ordering " << (holds ? "holds" : "violated") << "\n";
}

void export_compact(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  LoadedTeacher src = load_with_vocab(cfg.checkpoint, "checkpoint");
  if (!src.ckpt.masks) throw InputError("checkpoint " + src.dir.string() + " carries no masks");
  const TransformerModel& masked = src.ckpt.model;
  TransformerModel compact = compact_model(masked, *src.ckpt.masks);

  // Validation batch: fixed random in-vocabulary tokens at full length.
  std::mt19937_64 rng(data::derive_seed(cfg.seed, 0xC0FFEEULL));
  const Index len = masked.config.max_seq_len;
  TokenMatrix tokens(4, len);
  for (Index i = 0; i < tokens.size(); ++i) {
    tokens.data()[i] = static_cast<std::int32_t>(
        data::kNumReserved + data::uniform_index(rng, masked.config.vocab_size - data::kNumReserved));
  }
  const PadMask pad = PadMask::Constant(4, len, false);
  double diff = 0.0;
  {
    ad::NoGrad<double> no_grad;
    diff = (forward(masked, tokens, pad).logits.value() - forward(compact, tokens, pad).logits.value())
               .cwiseAbs()
               .maxCoeff();
  }
  if (!(diff <= 1e-10)) {
    throw std::runtime_error("compact model disagrees with the masked model: max logit difference " +
                             std::to_string(diff));
  }

  prepare_out_dir(cfg, out_dir);
  const ParameterCount counts = count_parameters(compact);
  Checkpoint ckpt;
  ckpt.model = std::move(compact);
  ckpt.counters = src.ckpt.counters;
  ckpt.metadata = {{"kind", "compact"}, {"source", src.dir.string()}};
  const fs::path ckpt_dir = out_dir / "checkpoint";
  save_checkpoint(ckpt_dir, ckpt);
  src.vocab.save(ckpt_dir / kVocabFile);

  json layers = json::array();
  for (const auto& l : ckpt.model.layers) {
    layers.push_back({{"qk", l.wq.cols()}, {"v", l.wv.cols()}, {"ffn", l.w_in.cols()}});
  }
  const json summary = {{"parameters", count_json(counts)},
                        {"hidden_dim", ckpt.model.config.hidden_dim},
                        {"layers", layers},
                        {"max_logit_difference", diff}};
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  log << "compact model: hidden " << ckpt.model.config.hidden_dim << ", parameters " << counts.total << " (embedding "
      << counts.embedding << ", backbone " << counts.backbone << "), max logit difference " << diff << "\n";
}

void eval_mlm(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  LoadedTeacher src = load_with_vocab(cfg.checkpoint, "checkpoint");
  const data::Dataset ds = make_dataset(cfg, src.vocab, src.ckpt.model.config.max_seq_len);
  const double loss = evaluate_mlm(src.ckpt.model, heldout(cfg, ds, src.vocab));
  prepare_out_dir(cfg, out_dir);
  write_text(out_dir / "eval.json", json{{"heldout_mlm", loss}}.dump(2) + "\n");
  log << "held-out MLM " << loss << "\n";
}

void generate_corpus(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const auto lines = data::synthetic_corpus(cfg.synthetic_sentences, cfg.corpus_seed);
  prepare_out_dir(cfg, out_dir);
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(out_dir / "corpus.txt", text);
  log << lines.size() << " sentences written to " << (out_dir / "corpus.txt").string() << "\n";
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Homotopic distillation of small BERT-style encoders"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const ExperimentConfig&, const fs::path&, std::ostream&);
  };
  const Command commands[] = {
      {"pretrain-teacher", "Train a teacher with MLM only", &pretrain_teacher},
      {"distill", "Distill and prune a student from a teacher checkpoint", &distill},
      {"compare-schedules", "Distill once per sparsity schedule end point and compare D_KL curves",
       &compare_schedules},
      {"export-compact", "Physically remove masked columns from a student checkpoint", &export_compact},
      {"eval-mlm", "Held-out MLM loss of a checkpoint", &eval_mlm},
      {"generate-corpus", "Write the synthetic corpus as a text file", &generate_corpus},
  };

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run seed (overrides the config)");
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--set", overrides, "Override one key: --set key=value (repeatable)");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    if (seed) cfg.seed = *seed;
    for (const auto& o : overrides) cfg.apply_override(o);
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) cmd->fn(cfg, out_dir, out);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const IntegrityError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace homodistil::cli
