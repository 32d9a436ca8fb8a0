#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "ilflow/pipeline/config.hpp"

namespace ilflow {

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path datasets;
  std::filesystem::path checkpoints;
  std::filesystem::path logs;
  std::filesystem::path reports;
  std::filesystem::path manifest_path() const { return root / "manifest.json"; }
};

// Exclusive per-run lock; a second concurrent stage on the same run
// directory fails fast.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_root);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path lock_path_;
};

std::string default_run_id(const RunConfig& config);

// Creates (or opens) output_dir/run_id with the standard subdirectories and
// a manifest holding the config snapshot.
RunPaths open_run(const RunConfig& config, const std::string& run_id, bool create);

// 64-bit FNV-1a content hash, hex.
std::string file_hash(const std::filesystem::path& path);

void manifest_record_artifact(const RunPaths& paths, const std::string& role,
                              const std::filesystem::path& file);
// Resolves a role recorded by an upstream stage; the error names the stage
// that produces it.
std::filesystem::path manifest_artifact(const RunPaths& paths, const std::string& role,
                                        const std::string& produced_by);
void manifest_record_stage(const RunPaths& paths, const std::string& stage,
                           double wall_time_s, std::uint64_t seed);

// ---- pipeline stages (sequential workflow) ---------------------------------
void stage_train_expert(const RunConfig& config, const RunPaths& paths, bool quiet);
// kind: expert | noisy_expert | random | all
void stage_collect(const RunConfig& config, const RunPaths& paths, const std::string& kind,
                   std::optional<int> n_override, bool quiet);
void stage_train_flow(const RunConfig& config, const RunPaths& paths, bool quiet);
void stage_train_il(const RunConfig& config, const RunPaths& paths, bool quiet);
void stage_eval(const RunConfig& config, const RunPaths& paths, const std::string& which,
                std::optional<int> n_rollouts, bool quiet);
void stage_calibrate(const RunConfig& config, const RunPaths& paths, double h_eval,
                     bool quiet);
void stage_sample_flow(const RunConfig& config, const RunPaths& paths,
                       const std::string& state_csv, const std::vector<double>& h_values,
                       int n_samples, bool quiet);

struct VerifyOutcome {
  bool passed = false;
  std::string report_json;
};
// Runs the derivation oracles (KL decomposition, entropy identity,
// change-of-variables residual) at their tolerances.
VerifyOutcome run_verification(std::uint64_t seed, bool quiet);

}  // namespace ilflow
