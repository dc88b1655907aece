// Experiment configuration, the pipeline stages shared by the command-line
// tool and the acceptance run, run records and the ablation table.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdas/data.hpp"
#include "kdas/ensemble.hpp"
#include "kdas/search.hpp"
#include "kdas/selection.hpp"

namespace kdas {

/// Flat JSON configuration. Unknown keys and ill-typed values are rejected
/// with the offending field name.
struct ExperimentConfig {
  DataSpec data;
  /// Root seed for data generation and the teacher.
  std::uint64_t seed = 1;
  /// One full run (students, search, selection, retraining) per seed.
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string backbone = "mini-resnet";
  /// Blocks added per stage for each man-made enlarged baseline.
  std::vector<int> manual_extra_blocks{1, 2};
  int ensemble_size = 5;
  LossKind search_loss = LossKind::kOD;
  LossKind train_loss = LossKind::kOD;
  DistillConfig distill;
  int slots = 4;
  /// "multiple": budget x backbone parameters; "absolute": parameter count.
  std::string budget_mode = "multiple";
  double budget = 2.0;
  int teacher_epochs = 15;
  /// Students and retraining. Teacher and search schedules copy every field
  /// except epochs and use the default milestones.
  Schedule train = [] {
    Schedule s;
    s.epochs = 30;
    return s;
  }();
  SearchConfig search = [] {
    SearchConfig s;
    s.epochs = 10;
    return s;
  }();
  int candidates = 50;
  std::string out_dir = "runs/default";
  /// Empty means <out_dir>/teacher/manifest.json.
  std::string teacher_manifest;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
  /// Hash of the canonical JSON without out_dir and teacher_manifest.
  std::string hash() const;

  BackboneSpec backbone_spec() const;
  SlotLayout layout() const;
  std::int64_t budget_params() const;
  Schedule teacher_schedule() const;
  /// Search settings with the loss, distillation and shared schedule filled in.
  SearchConfig search_config(int threads) const;
  std::string manifest_path() const;
};

/// Content hash of the library sources this binary was built from.
std::string code_version();

struct PreparedData {
  DataSplits splits;
  Normalization norm;
  TensorDataset train;
  TensorDataset val;
  TensorDataset test;
  /// Hash of the three encoded splits.
  std::string hash;
};

PreparedData prepare_data(DataSplits splits);
/// Reads <dir>/{train,val,test}.kdtd when present, otherwise generates the
/// splits from the config and writes them there.
PreparedData load_or_generate_data(const ExperimentConfig& cfg, const std::string& dir);

EnsembleTeacher train_teacher(const ExperimentConfig& cfg, const PreparedData& data, int threads);
/// Loads the manifest and checks that it was built on `data`.
EnsembleTeacher load_teacher(const std::string& manifest_path, const PreparedData& data);

/// CSV with header members_correct,count,percent.
std::string histogram_csv(const CorrectnessHistogram& h);
/// Member, oracle and logit-average accuracies on the validation and test splits.
nlohmann::json teacher_summary(const EnsembleTeacher& teacher, const PreparedData& data);

/// Teacher logits for `loss`: null for CE. Throws when a distillation loss has no teacher.
const Tensor* teacher_logits_for(LossKind loss, const EnsembleTeacher* teacher);

/// Stages of one run. Every stage draws from its own stream of `run_seed`.
RetrainResult train_student(const ExperimentConfig& cfg, const PreparedData& data, const BackboneSpec& arch,
                            LossKind loss, const EnsembleTeacher* teacher, std::uint64_t run_seed);
SearchResult search_stage(const ExperimentConfig& cfg, const PreparedData& data, LossKind search_loss,
                          const EnsembleTeacher* teacher, std::uint64_t run_seed, int threads);
SelectionReport select_stage(const ExperimentConfig& cfg, const PreparedData& data, const SearchResult& search,
                             std::uint64_t run_seed);
RetrainResult retrain_stage(const ExperimentConfig& cfg, const PreparedData& data, const ArchitectureGenome& genome,
                            LossKind loss, const EnsembleTeacher* teacher, std::uint64_t run_seed);

struct MetricSummary {
  double mean = 0.0;
  /// Sample standard deviation; 0 for a single value.
  double stddev = 0.0;
  std::size_t count = 0;
};

MetricSummary summarize(std::span<const double> values);

struct SeedMetrics {
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
};

struct RunRecord {
  std::string command;
  std::string config_hash;
  std::string code_version;
  std::vector<SeedMetrics> runs;
  std::map<std::string, MetricSummary> summary;

  /// Recomputes `summary` from `runs`.
  void summarize();
  /// Throws unless `summary` equals the recomputed statistics exactly.
  void validate() const;
  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

struct AblationRow {
  std::string model;
  std::string search_loss;  // "-" for models that were not searched
  std::string train_loss;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  /// Mean parameter count over seeds, rounded.
  std::int64_t params = 0;
  int seeds = 0;

  bool operator==(const AblationRow&) const = default;
};

/// Header model,search_loss,train_loss,acc_mean,acc_std,params,seeds.
std::string ablation_csv(std::span<const AblationRow> rows);
std::vector<AblationRow> parse_ablation_csv(const std::string& text);

using ProgressFn = std::function<void(const std::string&)>;

/// Backbone students (CE/KD/OD), the man-made enlarged backbones (CE/KD/OD
/// each) and every search-loss x train-loss pair, over cfg.seeds.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const PreparedData& data,
                                      const EnsembleTeacher& teacher, int threads, const ProgressFn& progress = {});

}  // namespace kdas
