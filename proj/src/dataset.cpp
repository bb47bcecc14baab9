#include "clinrl/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace clinrl {

using nlohmann::json;

ActionIndex ActionIndex::from_levels(int iv, int vaso) {
  if (iv < 0 || iv >= kDoseLevels || vaso < 0 || vaso >= kDoseLevels) {
    throw DataError("action levels out of range: iv=" + std::to_string(iv) +
                    " vaso=" + std::to_string(vaso));
  }
  return ActionIndex{iv, vaso};
}

ActionIndex ActionIndex::from_flat(int flat) {
  if (flat < 0 || flat >= kNumActions) {
    throw DataError("flat action index out of range: " + std::to_string(flat));
  }
  return ActionIndex{flat / kDoseLevels, flat % kDoseLevels};
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "train";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + name + "' (expected train/val/test)");
}

std::size_t OfflineDataset::num_transitions() const {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.transitions.size();
  return n;
}

OfflineDataset OfflineDataset::subset(Split split) const {
  OfflineDataset out;
  out.n_features = n_features;
  out.d_n = d_n;
  out.feature_stats = feature_stats;
  out.bin_edges = bin_edges;
  for (const auto& ep : episodes) {
    if (ep.split == split) out.episodes.push_back(ep);
  }
  return out;
}

namespace {

void check_observation(const JointObservation& obs, std::size_t n_features, std::size_t d_n,
                       const std::string& where) {
  if (obs.structured.size() != n_features) {
    throw DataError(where + ": structured vector has " + std::to_string(obs.structured.size()) +
                    " entries, expected " + std::to_string(n_features));
  }
  if (obs.note_embedding.size() != d_n) {
    throw DataError(where + ": note embedding has " + std::to_string(obs.note_embedding.size()) +
                    " entries, expected " + std::to_string(d_n));
  }
  for (std::size_t i = 0; i < n_features; ++i) {
    if (!std::isfinite(obs.structured[i])) {
      throw DataError(where + ": non-finite structured feature " + std::to_string(i));
    }
  }
  for (double v : obs.note_embedding) {
    if (!std::isfinite(v)) throw DataError(where + ": non-finite note embedding");
    if (!obs.note_present && v != 0.0) {
      throw DataError(where + ": absent note must carry the all-zero embedding");
    }
  }
}

}  // namespace

void OfflineDataset::validate() const {
  for (const auto& ep : episodes) {
    const std::string where = "episode " + ep.episode_id;
    if (ep.transitions.empty()) throw DataError(where + ": empty episode");
    for (std::size_t t = 0; t < ep.transitions.size(); ++t) {
      const auto& tr = ep.transitions[t];
      const bool last = t + 1 == ep.transitions.size();
      const std::string at = where + " step " + std::to_string(t);
      check_observation(tr.obs, n_features, d_n, at);
      check_observation(tr.next_obs, n_features, d_n, at + " (next)");
      if (tr.done != last) throw DataError(at + ": done flag must be set on the last step only");
      if (!last && tr.reward != 0.0) throw DataError(at + ": nonzero reward before terminal step");
      if (last && tr.reward != (ep.survived ? 1.0 : -1.0)) {
        throw DataError(at + ": terminal reward disagrees with survival label");
      }
      if (tr.behavior_prob && !(*tr.behavior_prob > 0.0 && *tr.behavior_prob <= 1.0)) {
        throw DataError(at + ": behavior probability must lie in (0, 1]");
      }
    }
  }
}

std::vector<double> assign_rewards(std::size_t length, bool survived) {
  if (length == 0) throw DataError("cannot assign rewards to an empty episode");
  std::vector<double> rewards(length, 0.0);
  rewards.back() = survived ? 1.0 : -1.0;
  return rewards;
}

int discretize_dose(double dose, const DoseEdges& edges) {
  if (std::isnan(dose)) throw DataError("dose is NaN");
  if (dose < 0.0) throw DataError("negative dose: " + format_double(dose));
  if (!(edges[0] > 0.0)) throw DataError("first dose edge must be positive");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw DataError("dose edges must be strictly increasing");
  }
  if (dose < edges[0]) return 0;
  int level = 1;
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (dose >= edges[i]) ++level;
  }
  return level;
}

double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DataError("percentile of an empty sample");
  const double rank = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

DoseEdges compute_bin_edges(std::span<const double> doses) {
  std::vector<double> positive;
  for (double d : doses) {
    if (std::isnan(d) || d < 0.0) throw DataError("doses must be finite and nonnegative");
    if (d > 0.0) positive.push_back(d);
  }
  if (positive.empty()) {
    throw DataError(
        "all doses are zero; quartile bins are undefined, use a single-level (always 0) "
        "discretisation for this drug");
  }
  std::sort(positive.begin(), positive.end());
  const auto distinct = std::set<double>(positive.begin(), positive.end()).size();
  if (distinct < 4) {
    throw DataError("need at least 4 distinct positive doses to form quartile bins, got " +
                    std::to_string(distinct));
  }
  DoseEdges edges{positive.front(), percentile_sorted(positive, 25.0),
                  percentile_sorted(positive, 50.0), percentile_sorted(positive, 75.0)};
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) {
      throw DataError("positive doses have no quartile spread (tied percentiles)");
    }
  }
  return edges;
}

FeatureStats compute_feature_stats(const OfflineDataset& dataset) {
  const std::size_t f = dataset.n_features;
  std::vector<double> sum(f, 0.0);
  std::size_t count = 0;
  auto for_each_row = [&](auto&& fn) {
    for (const auto& ep : dataset.episodes) {
      if (ep.split != Split::train) continue;
      for (std::size_t t = 0; t < ep.transitions.size(); ++t) {
        const auto& x = ep.transitions[t].obs.structured;
        for (std::size_t i = 0; i < f; ++i) {
          if (!std::isfinite(x[i])) {
            throw DataError("non-finite structured feature " + std::to_string(i) + " in episode " +
                            ep.episode_id + " step " + std::to_string(t));
          }
        }
        fn(x);
      }
    }
  };
  for_each_row([&](const std::vector<double>& x) {
    for (std::size_t i = 0; i < f; ++i) sum[i] += x[i];
    ++count;
  });
  if (count == 0) throw DataError("training split is empty; cannot compute feature statistics");
  FeatureStats stats;
  stats.mean.resize(f);
  stats.stddev.assign(f, 0.0);
  for (std::size_t i = 0; i < f; ++i) stats.mean[i] = sum[i] / static_cast<double>(count);
  for_each_row([&](const std::vector<double>& x) {
    for (std::size_t i = 0; i < f; ++i) {
      const double d = x[i] - stats.mean[i];
      stats.stddev[i] += d * d;
    }
  });
  for (auto& s : stats.stddev) s = std::sqrt(s / static_cast<double>(count));
  return stats;
}

void apply_feature_stats(std::vector<double>& features, const FeatureStats& stats) {
  if (features.size() != stats.mean.size()) {
    throw DataError("feature vector length does not match normalisation statistics");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    // Tiny spreads are rounding noise around a constant column.
    const double scale = std::max(std::abs(stats.mean[i]), 1.0);
    if (stats.stddev[i] <= 1e-12 * scale) {
      features[i] = 0.0;
    } else {
      features[i] = (features[i] - stats.mean[i]) / stats.stddev[i];
    }
  }
}

OfflineDataset normalize(const OfflineDataset& dataset, bool recompute) {
  OfflineDataset out = dataset;
  if (recompute || !out.feature_stats) out.feature_stats = compute_feature_stats(dataset);
  for (auto& ep : out.episodes) {
    for (std::size_t t = 0; t < ep.transitions.size(); ++t) {
      auto& tr = ep.transitions[t];
      for (auto* x : {&tr.obs.structured, &tr.next_obs.structured}) {
        for (std::size_t i = 0; i < x->size(); ++i) {
          if (!std::isfinite((*x)[i])) {
            throw DataError("non-finite structured feature " + std::to_string(i) +
                            " in episode " + ep.episode_id + " step " + std::to_string(t));
          }
        }
        apply_feature_stats(*x, *out.feature_stats);
      }
    }
  }
  return out;
}

DatasetFiles DatasetFiles::in_directory(const std::filesystem::path& dir) {
  return DatasetFiles{dir / "structured.csv", dir / "notes.jsonl", dir / "manifest.json"};
}

std::string format_double(double value) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  if (ec != std::errc{}) throw NumericError("failed to format number");
  return std::string(buf.data(), ptr);
}

namespace {

double parse_double(std::string_view field, const std::string& where) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size()) {
    throw DataError(where + ": cannot parse number '" + std::string(field) + "'");
  }
  return value;
}

long parse_int(std::string_view field, const std::string& where) {
  long value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size()) {
    throw DataError(where + ": cannot parse integer '" + std::string(field) + "'");
  }
  return value;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string csv_header(std::size_t n_features) {
  std::string header = "episode_id,step";
  for (std::size_t i = 0; i < n_features; ++i) header += ",f" + std::to_string(i);
  header += ",iv_dose,vaso_dose,done,survived";
  return header;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

DoseEdges edges_from_json(const json& j, const std::string& name) {
  if (!j.is_array() || j.size() != 4) throw DataError("manifest bin_edges." + name + " must have 4 entries");
  DoseEdges e{};
  for (std::size_t i = 0; i < 4; ++i) e[i] = j.at(i).get<double>();
  return e;
}

struct RawRow {
  std::vector<double> features;
  Doses doses;
  bool done = false;
  bool survived = false;
};

}  // namespace

OfflineDataset ingest(const DatasetFiles& files) {
  json manifest;
  {
    auto in = open_input(files.manifest);
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw DataError("manifest " + files.manifest.string() + " is not valid JSON: " + e.what());
    }
  }
  OfflineDataset ds;
  std::vector<std::string> ids;
  std::map<std::string, Split> splits;
  try {
    ds.n_features = manifest.at("F").get<std::size_t>();
    ds.d_n = manifest.at("d_n").get<std::size_t>();
    for (const auto& e : manifest.at("episodes")) {
      const auto id = e.at("id").get<std::string>();
      if (splits.count(id)) throw DataError("manifest lists episode " + id + " twice");
      splits[id] = split_from_string(e.value("split", std::string("train")));
      ids.push_back(id);
    }
  } catch (const json::exception& e) {
    throw DataError("manifest is missing required fields (F, d_n, episodes): " + std::string(e.what()));
  }

  // Structured rows keyed by (episode, step).
  std::map<std::string, std::map<long, RawRow>> rows;
  {
    auto in = open_input(files.structured);
    std::string line;
    if (!std::getline(in, line)) throw DataError("structured file is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != csv_header(ds.n_features)) {
      throw DataError("structured file header does not match F=" + std::to_string(ds.n_features));
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = files.structured.filename().string() + ":" + std::to_string(lineno);
      const auto fields = split_csv(line);
      if (fields.size() != ds.n_features + 6) {
        throw DataError(where + ": expected " + std::to_string(ds.n_features + 6) + " fields, got " +
                        std::to_string(fields.size()));
      }
      const std::string id(fields[0]);
      if (!splits.count(id)) throw DataError(where + ": episode " + id + " not in manifest");
      const long step = parse_int(fields[1], where);
      if (step < 0) throw DataError(where + ": negative step");
      RawRow row;
      row.features.resize(ds.n_features);
      for (std::size_t i = 0; i < ds.n_features; ++i) row.features[i] = parse_double(fields[2 + i], where);
      row.doses.iv = parse_double(fields[ds.n_features + 2], where);
      row.doses.vaso = parse_double(fields[ds.n_features + 3], where);
      row.done = parse_int(fields[ds.n_features + 4], where) != 0;
      row.survived = parse_int(fields[ds.n_features + 5], where) != 0;
      auto& ep_rows = rows[id];
      if (ep_rows.count(step)) {
        throw DataError(where + ": duplicated (episode, step) key (" + id + ", " + std::to_string(step) + ")");
      }
      ep_rows.emplace(step, std::move(row));
    }
  }

  // Notes keyed the same way; missing lines mean no note in that frame.
  std::map<std::string, std::map<long, std::vector<double>>> notes;
  {
    auto in = open_input(files.notes);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string where = files.notes.filename().string() + ":" + std::to_string(lineno);
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw DataError(where + ": invalid JSON: " + e.what());
      }
      std::string id;
      long step = 0;
      std::vector<double> emb;
      try {
        id = j.at("episode_id").get<std::string>();
        step = j.at("step").get<long>();
        emb = j.at("embedding").get<std::vector<double>>();
      } catch (const json::exception& e) {
        throw DataError(where + ": " + e.what());
      }
      if (!rows.count(id) || !rows[id].count(step)) {
        throw DataError(where + ": note for unknown (episode, step) (" + id + ", " + std::to_string(step) + ")");
      }
      if (emb.size() != ds.d_n) {
        throw DataError(where + ": embedding has " + std::to_string(emb.size()) + " entries, expected d_n=" +
                        std::to_string(ds.d_n));
      }
      auto& ep_notes = notes[id];
      if (ep_notes.count(step)) {
        throw DataError(where + ": duplicated note key (" + id + ", " + std::to_string(step) + ")");
      }
      ep_notes.emplace(step, std::move(emb));
    }
  }

  if (manifest.contains("bin_edges")) {
    ds.bin_edges.iv = edges_from_json(manifest["bin_edges"].at("iv"), "iv");
    ds.bin_edges.vaso = edges_from_json(manifest["bin_edges"].at("vaso"), "vaso");
  } else {
    std::vector<double> iv, vaso;
    for (const auto& id : ids) {
      if (splits[id] != Split::train) continue;
      for (const auto& [step, row] : rows[id]) {
        iv.push_back(row.doses.iv);
        vaso.push_back(row.doses.vaso);
      }
    }
    ds.bin_edges.iv = compute_bin_edges(iv);
    ds.bin_edges.vaso = compute_bin_edges(vaso);
  }

  auto make_obs = [&](const std::string& id, long step, const RawRow& row) {
    JointObservation obs;
    obs.structured = row.features;
    auto ep_it = notes.find(id);
    if (ep_it != notes.end()) {
      auto it = ep_it->second.find(step);
      if (it != ep_it->second.end()) {
        obs.note_embedding = it->second;
        obs.note_present = true;
      }
    }
    if (!obs.note_present) obs.note_embedding.assign(ds.d_n, 0.0);
    return obs;
  };

  for (const auto& id : ids) {
    auto it = rows.find(id);
    if (it == rows.end() || it->second.empty()) throw DataError("episode " + id + " has no structured rows");
    const auto& ep_rows = it->second;
    Episode ep;
    ep.episode_id = id;
    ep.split = splits[id];
    long expected = 0;
    for (const auto& [step, row] : ep_rows) {
      if (step != expected) {
        throw DataError("episode " + id + ": steps must be contiguous from 0, missing step " +
                        std::to_string(expected));
      }
      ++expected;
    }
    ep.survived = ep_rows.begin()->second.survived;
    const auto rewards = assign_rewards(ep_rows.size(), ep.survived);
    std::vector<JointObservation> frames;
    for (const auto& [step, row] : ep_rows) {
      if (row.survived != ep.survived) throw DataError("episode " + id + ": survived flag changes within episode");
      const bool last = static_cast<std::size_t>(step) + 1 == ep_rows.size();
      if (row.done != last) {
        throw DataError("episode " + id + " step " + std::to_string(step) + ": done must be 1 exactly on the last step");
      }
      frames.push_back(make_obs(id, step, row));
    }
    long step_idx = 0;
    for (const auto& [step, row] : ep_rows) {
      Transition tr;
      tr.obs = frames[step_idx];
      const bool last = static_cast<std::size_t>(step_idx) + 1 == frames.size();
      tr.next_obs = last ? frames[step_idx] : frames[step_idx + 1];
      tr.done = last;
      tr.reward = rewards[step_idx];
      tr.doses = row.doses;
      const std::string where = "episode " + id + " step " + std::to_string(step);
      try {
        tr.action = ActionIndex{discretize_dose(row.doses.iv, ds.bin_edges.iv),
                                discretize_dose(row.doses.vaso, ds.bin_edges.vaso)};
      } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
      }
      ep.transitions.push_back(std::move(tr));
      ++step_idx;
    }
    ds.episodes.push_back(std::move(ep));
  }
  for (const auto& [id, r] : rows) {
    (void)r;
    if (!splits.count(id)) throw DataError("episode " + id + " has rows but is not in the manifest");
  }
  ds.validate();
  return ds;
}

void export_dataset(const OfflineDataset& dataset, const DatasetFiles& files) {
  std::vector<const Episode*> order;
  for (const auto& ep : dataset.episodes) {
    if (ep.episode_id.find_first_of(",\n\r\"") != std::string::npos) {
      throw DataError("episode id '" + ep.episode_id + "' contains characters not allowed in CSV");
    }
    order.push_back(&ep);
  }
  std::sort(order.begin(), order.end(),
            [](const Episode* a, const Episode* b) { return a->episode_id < b->episode_id; });

  {
    std::ofstream out(files.structured, std::ios::binary);
    if (!out) throw DataError("cannot write " + files.structured.string());
    out << csv_header(dataset.n_features) << '\n';
    for (const auto* ep : order) {
      for (std::size_t t = 0; t < ep->transitions.size(); ++t) {
        const auto& tr = ep->transitions[t];
        out << ep->episode_id << ',' << t;
        for (double v : tr.obs.structured) out << ',' << format_double(v);
        out << ',' << format_double(tr.doses.iv) << ',' << format_double(tr.doses.vaso) << ','
            << (tr.done ? 1 : 0) << ',' << (ep->survived ? 1 : 0) << '\n';
      }
    }
  }
  {
    std::ofstream out(files.notes, std::ios::binary);
    if (!out) throw DataError("cannot write " + files.notes.string());
    for (const auto* ep : order) {
      for (std::size_t t = 0; t < ep->transitions.size(); ++t) {
        const auto& obs = ep->transitions[t].obs;
        if (!obs.note_present) continue;
        json line;
        line["episode_id"] = ep->episode_id;
        line["step"] = t;
        line["embedding"] = obs.note_embedding;
        out << line.dump() << '\n';
      }
    }
  }
  {
    json manifest;
    manifest["F"] = dataset.n_features;
    manifest["d_n"] = dataset.d_n;
    manifest["step_hours"] = 4;
    json eps = json::array();
    for (const auto* ep : order) eps.push_back({{"id", ep->episode_id}, {"split", to_string(ep->split)}});
    manifest["episodes"] = std::move(eps);
    manifest["bin_edges"] = {{"iv", dataset.bin_edges.iv}, {"vaso", dataset.bin_edges.vaso}};
    std::ofstream out(files.manifest, std::ios::binary);
    if (!out) throw DataError("cannot write " + files.manifest.string());
    out << manifest.dump(2) << '\n';
  }
}

}  // namespace clinrl
