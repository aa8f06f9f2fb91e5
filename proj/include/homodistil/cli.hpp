#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "homodistil/checkpoint.hpp"
#include "homodistil/config.hpp"
#include "homodistil/data.hpp"

namespace homodistil::cli {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;  // divergence, numeric failure
inline constexpr int kExitInput = 2;    // bad configuration or input

/// Parses arguments, runs one subcommand and maps exceptions to exit codes.
/// Diagnostics go to `err`, progress lines to `out`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Subcommands. Each writes its resolved configuration to out/config.txt.
void pretrain_teacher(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void distill(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void compare_schedules(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void export_compact(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void eval_mlm(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);
void generate_corpus(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log);

/// Corpus lines named by the config ("synthetic" or a file path).
std::vector<std::string> corpus_lines(const ExperimentConfig& cfg);

/// Accepts either a checkpoint directory or a run directory holding one in
/// `checkpoint/`.
std::filesystem::path resolve_checkpoint_dir(const std::filesystem::path& path);

}  // namespace homodistil::cli
