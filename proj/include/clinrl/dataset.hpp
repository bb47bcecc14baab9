#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clinrl/common.hpp"

namespace clinrl {

/// Joint IV-fluid / vasopressor decision. Each drug is discretised into five
/// levels; the flat index is 5 * iv + vaso.
struct ActionIndex {
  int iv_level = 0;
  int vaso_level = 0;

  static ActionIndex from_levels(int iv, int vaso);
  static ActionIndex from_flat(int flat);
  int flat() const { return kDoseLevels * iv_level + vaso_level; }

  friend bool operator==(const ActionIndex&, const ActionIndex&) = default;
};

/// One 4-hour frame: structured features plus the note embedding. When no
/// note was written in the frame the embedding is all zeros and
/// note_present is false.
struct JointObservation {
  std::vector<double> structured;
  std::vector<double> note_embedding;
  bool note_present = false;
};

struct Doses {
  double iv = 0.0;
  double vaso = 0.0;
};

struct Transition {
  JointObservation obs;
  ActionIndex action;
  double reward = 0.0;
  // For the terminal transition next_obs is a copy of obs; it is never
  // bootstrapped from.
  JointObservation next_obs;
  bool done = false;
  Doses doses;
  std::optional<double> behavior_prob;
  // Latent simulator state, only known for synthetic data.
  std::optional<int> state_id;
  std::optional<int> next_state_id;
};

enum class Split { train, val, test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct Episode {
  std::string episode_id;
  std::vector<Transition> transitions;
  bool survived = false;
  Split split = Split::train;

  std::size_t length() const { return transitions.size(); }
};

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Four increasing thresholds per drug: [0] is the minimal positive-dose cut,
/// [1..3] are the nonzero-dose quartiles.
using DoseEdges = std::array<double, 4>;

struct BinEdges {
  DoseEdges iv{1.0, 2.0, 3.0, 4.0};
  DoseEdges vaso{1.0, 2.0, 3.0, 4.0};
};

struct OfflineDataset {
  std::size_t n_features = 0;
  std::size_t d_n = 0;
  std::vector<Episode> episodes;
  std::optional<FeatureStats> feature_stats;
  BinEdges bin_edges;

  std::size_t num_transitions() const;
  /// Episodes of one split, sharing stats and edges with the parent.
  OfflineDataset subset(Split split) const;
  /// Checks every structural invariant; throws DataError naming the episode.
  void validate() const;
};

/// Sparse terminal reward: zeros everywhere except the last step, which is
/// +1 for survival and -1 otherwise.
std::vector<double> assign_rewards(std::size_t length, bool survived);

/// Level 0 for doses below edges[0] (in particular zero); otherwise
/// 1 + number of quartile edges at or below the dose. Intervals are
/// half-open, so a dose equal to an edge lands in the higher bucket.
int discretize_dose(double dose, const DoseEdges& edges);

/// Minimal positive dose followed by the 25/50/75th percentiles (linear
/// interpolation) of the strictly positive doses.
DoseEdges compute_bin_edges(std::span<const double> doses);

/// Linear-interpolation percentile of an already sorted sample, q in [0, 100].
double percentile_sorted(std::span<const double> sorted, double q);

/// Population mean/std of each structured feature over the training split.
FeatureStats compute_feature_stats(const OfflineDataset& dataset);

/// z-scores structured features with train-split statistics; zero-variance
/// features map to 0. With recompute=false the stored stats are reused.
OfflineDataset normalize(const OfflineDataset& dataset, bool recompute = true);

/// Applies stats to a single feature vector in place.
void apply_feature_stats(std::vector<double>& features, const FeatureStats& stats);

struct DatasetFiles {
  std::filesystem::path structured;  // CSV
  std::filesystem::path notes;       // JSON lines
  std::filesystem::path manifest;    // JSON

  static DatasetFiles in_directory(const std::filesystem::path& dir);
};

/// Reads the three-file layout. Bin edges come from the manifest when present,
/// otherwise from the training split doses.
OfflineDataset ingest(const DatasetFiles& files);

/// Writes the canonical form: episodes sorted by id, rows by step, shortest
/// round-trip number formatting.
void export_dataset(const OfflineDataset& dataset, const DatasetFiles& files);

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double value);

}  // namespace clinrl
