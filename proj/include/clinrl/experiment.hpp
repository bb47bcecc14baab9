#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clinrl/bdesr.hpp"
#include "clinrl/dataset.hpp"
#include "clinrl/encoder.hpp"
#include "clinrl/ope.hpp"
#include "clinrl/synthgym.hpp"
#include "clinrl/trainer.hpp"

namespace clinrl {

struct SynthSource {
  SynthConfig mdp;
  int n_episodes = 2000;
  int max_len = 18;
  double behavior_epsilon = 0.3;
  /// Seeds both the MDP and the rollouts; the run seed when unset.
  std::optional<std::uint64_t> seed;
};

/// Exactly one of the two is set.
struct DataSource {
  std::optional<SynthSource> synth;
  std::optional<std::filesystem::path> directory;
};

struct ExperimentConfig {
  DataSource data;
  /// Dataset for cross-eval; unused by the other commands.
  std::optional<DataSource> cross_eval_data;
  EncoderConfig encoder;
  TrainConfig train;
  OpeConfig ope;
  BehaviorFitConfig behavior;
  DiscrepancyWeights bdesr;
  double bdesr_p = 20.0;
  std::vector<std::uint64_t> seeds{0};
  /// Default output directory; not part of the serialized config.
  std::optional<std::filesystem::path> output_dir;

  void validate() const;
};

/// Strict: unknown keys and type mismatches raise ConfigError with the dotted path.
/// Relative data directories are resolved against base_dir.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// The config as it applies to a single seed, with every seed made explicit.
ExperimentConfig for_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct PreparedData {
  OfflineDataset raw;
  OfflineDataset dataset;  // z-scored with training-split statistics
  std::optional<TabularMDP> mdp;
  std::optional<BehaviorPolicy> behavior;
  int max_len = 0;
  double gamma = 0.99;
};

PreparedData prepare_data(const DataSource& source, std::uint64_t seed,
                          const std::optional<FeatureStats>& stats = std::nullopt);

/// Logged probabilities when present, otherwise a classifier fitted on the training split.
BehaviorModel behavior_for(const OfflineDataset& eval, const PreparedData& data, const BehaviorFitConfig& cfg);

struct PolicyEvaluation {
  OpeReport ope;
  BdesrReport bdesr;
  ResidualSummary residuals;
  /// Exact value of the epsilon-soft policy read off canonical observations (synthetic data only).
  std::optional<double> oracle_value;
  std::optional<double> oracle_value_truncated;

  nlohmann::json ope_json() const;
};

/// OPE, BDESR and Bellman residuals on the test split.
PolicyEvaluation evaluate_model(const PolicyModel& model, const PreparedData& data, const ExperimentConfig& cfg);

std::string model_label(const EncoderConfig& enc, const TrainConfig& train);

/// "mean ± std" with the sample standard deviation (0 for a single value).
std::string mean_std_cell(const std::vector<double>& values);

struct Table2Row {
  std::string model;
  std::vector<double> wis, dr, fqe, opera;
};
/// Rows are the four metrics, columns the models.
std::string table2_csv(const std::vector<Table2Row>& rows);

struct CommandContext {
  ExperimentConfig config;
  std::filesystem::path out;
  std::optional<std::filesystem::path> checkpoint;
  std::ostream* log = nullptr;
};

void cmd_synth(const CommandContext& ctx);
void cmd_ingest(const CommandContext& ctx);
void cmd_train(const CommandContext& ctx);
void cmd_eval(const CommandContext& ctx);
void cmd_ope(const CommandContext& ctx);
void cmd_bdesr(const CommandContext& ctx);
void cmd_ablate(const CommandContext& ctx);
void cmd_cross_eval(const CommandContext& ctx);
/// Rebuilds the tables under out/report from whatever runs exist in out.
void cmd_report(const std::filesystem::path& run_dir);

/// Variant, strategy and window sweeps in a fixed order.
struct AblationArm {
  std::string sweep;
  std::string name;
  EncoderConfig encoder;
  TrainConfig train;
};
std::vector<AblationArm> ablation_arms(const ExperimentConfig& cfg);

void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace clinrl
