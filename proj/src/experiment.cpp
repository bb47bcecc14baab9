#include "clinrl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "clinrl/jsonio.hpp"

namespace clinrl {

namespace fs = std::filesystem;
using nlohmann::json;
using net::read_json_file;

namespace {

SynthSource synth_source_from_json(const json& j, const std::string& path) {
  JsonReader r(j, path);
  SynthSource s;
  SynthConfig& m = s.mdp;
  m.n_severity = r.get<int>("n_severity", m.n_severity);
  m.n_context = r.get<int>("n_context", m.n_context);
  m.n_features = r.get<std::size_t>("n_features", m.n_features);
  m.d_n = r.get<std::size_t>("d_n", m.d_n);
  m.structured_noise = r.get<double>("structured_noise", m.structured_noise);
  m.note_noise = r.get<double>("note_noise", m.note_noise);
  m.note_prob = r.get<double>("note_prob", m.note_prob);
  m.terminal_prob = r.get<double>("terminal_prob", m.terminal_prob);
  m.transition_jitter = r.get<double>("transition_jitter", m.transition_jitter);
  m.gamma = r.get<double>("gamma", m.gamma);
  if (r.has("family_seed")) m.family_seed = r.get<std::uint64_t>("family_seed", 0);
  r.get<json>("family_seed", nullptr);
  m.min_gap = r.get<double>("min_gap", m.min_gap);
  s.n_episodes = r.get<int>("n_episodes", s.n_episodes);
  s.max_len = r.get<int>("max_len", s.max_len);
  s.behavior_epsilon = r.get<double>("behavior_epsilon", s.behavior_epsilon);
  if (r.has("seed")) s.seed = r.get<std::uint64_t>("seed", 0);
  r.get<json>("seed", nullptr);
  r.finish();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (s.n_episodes < 1) throw ConfigError(path + ".n_episodes: must be positive");
  if (s.max_len < 1) throw ConfigError(path + ".max_len: must be positive");
  if (!(s.behavior_epsilon > 0.0 && s.behavior_epsilon <= 1.0)) {
    throw ConfigError(path + ".behavior_epsilon: must lie in (0, 1] so every action has support");
  }
  return s;
}

DataSource data_source_from_json(const json& j, const std::string& path, const fs::path& base_dir) {
  JsonReader r(j, path);
  DataSource d;
  if (r.has("synth") == r.has("directory")) throw ConfigError(path + ": set exactly one of synth or directory");
  if (r.has("synth")) d.synth = synth_source_from_json(r.raw("synth"), r.where("synth"));
  if (r.has("directory")) {
    fs::path dir = r.get<std::string>("directory", "");
    if (dir.is_relative() && !base_dir.empty()) dir = base_dir / dir;
    d.directory = dir.lexically_normal();
  }
  r.get<json>("synth", nullptr);
  r.get<json>("directory", nullptr);
  r.finish();
  return d;
}

json to_json(const DataSource& d) {
  if (d.directory) return {{"directory", d.directory->string()}};
  const SynthSource& s = *d.synth;
  const SynthConfig& m = s.mdp;
  json j = {{"n_severity", m.n_severity},
            {"n_context", m.n_context},
            {"n_features", m.n_features},
            {"d_n", m.d_n},
            {"structured_noise", m.structured_noise},
            {"note_noise", m.note_noise},
            {"note_prob", m.note_prob},
            {"terminal_prob", m.terminal_prob},
            {"transition_jitter", m.transition_jitter},
            {"gamma", m.gamma},
            {"min_gap", m.min_gap},
            {"n_episodes", s.n_episodes},
            {"max_len", s.max_len},
            {"behavior_epsilon", s.behavior_epsilon}};
  j["family_seed"] = m.family_seed ? json(*m.family_seed) : json(nullptr);
  j["seed"] = s.seed ? json(*s.seed) : json(nullptr);
  return {{"synth", j}};
}

FqeNetConfig fqe_net_from_json(JsonReader r) {
  FqeNetConfig c;
  c.hidden = r.get<std::size_t>("hidden", c.hidden);
  c.n_layers = r.get<std::size_t>("n_layers", c.n_layers);
  c.iterations = r.get<int>("iterations", c.iterations);
  c.steps_per_iteration = r.get<long>("steps_per_iteration", c.steps_per_iteration);
  c.batch_size = r.get<std::size_t>("batch_size", c.batch_size);
  c.learning_rate = r.get<double>("learning_rate", c.learning_rate);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  r.finish();
  if (c.hidden == 0 || c.n_layers == 0 || c.iterations < 1 || c.steps_per_iteration < 1 || c.batch_size == 0 ||
      !(c.learning_rate > 0.0)) {
    throw ConfigError(r.path() + ": sizes, iteration counts and learning rate must be positive");
  }
  return c;
}

OpeConfig ope_from_json(JsonReader r) {
  OpeConfig c;
  c.gamma = r.get<double>("gamma", c.gamma);
  c.n_bootstrap = r.get<int>("n_bootstrap", c.n_bootstrap);
  c.epsilon_soft = r.get<double>("epsilon_soft", c.epsilon_soft);
  if (r.has("clip_percentile")) c.wis.clip_percentile = r.get<double>("clip_percentile", 100.0);
  r.get<json>("clip_percentile", nullptr);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  c.tabular_fqe = r.get<bool>("tabular_fqe", c.tabular_fqe);
  c.fqe_net = fqe_net_from_json(r.child("fqe_net"));
  r.finish();
  if (!(c.gamma >= 0.0 && c.gamma < 1.0)) throw ConfigError("ope.gamma: must lie in [0, 1)");
  if (c.n_bootstrap < 2) throw ConfigError("ope.n_bootstrap: must be at least 2");
  if (!(c.epsilon_soft >= 0.0 && c.epsilon_soft <= 1.0)) throw ConfigError("ope.epsilon_soft: must lie in [0, 1]");
  if (c.wis.clip_percentile && !(*c.wis.clip_percentile > 0.0 && *c.wis.clip_percentile <= 100.0)) {
    throw ConfigError("ope.clip_percentile: must lie in (0, 100]");
  }
  return c;
}

json to_json(const OpeConfig& c) {
  json j = {{"gamma", c.gamma},
            {"n_bootstrap", c.n_bootstrap},
            {"epsilon_soft", c.epsilon_soft},
            {"seed", c.seed},
            {"tabular_fqe", c.tabular_fqe},
            {"fqe_net",
             {{"hidden", c.fqe_net.hidden},
              {"n_layers", c.fqe_net.n_layers},
              {"iterations", c.fqe_net.iterations},
              {"steps_per_iteration", c.fqe_net.steps_per_iteration},
              {"batch_size", c.fqe_net.batch_size},
              {"learning_rate", c.fqe_net.learning_rate},
              {"seed", c.fqe_net.seed}}}};
  j["clip_percentile"] = c.wis.clip_percentile ? json(*c.wis.clip_percentile) : json(nullptr);
  return j;
}

BehaviorFitConfig behavior_from_json(JsonReader r) {
  BehaviorFitConfig c;
  c.floor = r.get<double>("floor", c.floor);
  c.hidden = r.get<std::size_t>("hidden", c.hidden);
  c.steps = r.get<long>("steps", c.steps);
  c.batch_size = r.get<std::size_t>("batch_size", c.batch_size);
  c.learning_rate = r.get<double>("learning_rate", c.learning_rate);
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  r.finish();
  if (!(c.floor > 0.0 && c.floor * kNumActions < 1.0)) throw ConfigError("behavior.floor: must lie in (0, 1/25)");
  if (c.hidden == 0 || c.steps < 0 || c.batch_size == 0 || !(c.learning_rate > 0.0)) {
    throw ConfigError("behavior: sizes and learning rate must be positive");
  }
  return c;
}

json to_json(const BehaviorFitConfig& c) {
  return {{"floor", c.floor},
          {"hidden", c.hidden},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed}};
}

void log_line(const CommandContext& ctx, const std::string& text) {
  if (ctx.log) *ctx.log << text << std::endl;
}

fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); }

void check_dims(const EncoderConfig& enc, const OfflineDataset& ds) {
  if (enc.n_features != ds.n_features) {
    throw ConfigError("encoder.n_features is " + std::to_string(enc.n_features) + " but the dataset has " +
                      std::to_string(ds.n_features) + " structured features");
  }
  if (enc.d_n != ds.d_n) {
    throw ConfigError("encoder.d_n is " + std::to_string(enc.d_n) + " but the dataset notes have dimension " +
                      std::to_string(ds.d_n));
  }
}

OfflineDataset test_split(const PreparedData& data) {
  OfflineDataset test = data.dataset.subset(Split::test);
  if (test.episodes.empty()) throw DataError("the dataset has no test-split episodes to evaluate on");
  return test;
}

struct OpePart {
  OpeReport report;
  std::optional<double> oracle_value;
  std::optional<double> oracle_value_truncated;
};

OpePart run_ope(const PolicyModel& model, const PreparedData& data, const OfflineDataset& test,
                const ExperimentConfig& cfg) {
  OpePart part;
  const StepTable policy = tabulate_policy(model, test, cfg.ope.epsilon_soft);
  const BehaviorModel behavior = behavior_for(test, data, cfg.behavior);
  part.report = evaluate_policy(test, policy, behavior, cfg.ope);
  if (data.mdp) {
    const auto actions = tabular_actions(model, *data.mdp, data.dataset.feature_stats);
    StatePolicy pi = deterministic_policy(actions);
    for (auto& row : pi) {
      for (auto& p : row) p = (1.0 - cfg.ope.epsilon_soft) * p + cfg.ope.epsilon_soft / kNumActions;
    }
    part.oracle_value = exact_policy_value(*data.mdp, pi, cfg.ope.gamma);
    part.oracle_value_truncated = finite_horizon_value(*data.mdp, pi, cfg.ope.gamma, data.max_len);
  }
  return part;
}

json ope_part_json(const OpePart& p) {
  json j = p.report.to_json();
  if (p.oracle_value) {
    j["oracle"] = {{"value", *p.oracle_value}, {"value_truncated", *p.oracle_value_truncated}};
  }
  return j;
}

PolicyModel load_model(const CommandContext& ctx, std::uint64_t seed) {
  const fs::path path = ctx.checkpoint ? *ctx.checkpoint : seed_dir(ctx.out, seed) / "checkpoint.json";
  if (!fs::exists(path)) {
    throw DataError("checkpoint " + path.string() + " does not exist; run train first or pass --checkpoint");
  }
  return PolicyModel::from_checkpoint(read_json_file(path));
}

std::string residual_histogram_rows(const std::string& run, const ResidualSummary& r) {
  std::ostringstream os;
  for (std::size_t b = 0; b < r.counts.size(); ++b) {
    os << run << ',' << format_double(r.bin_edges[b]) << ',' << format_double(r.bin_edges[b + 1]) << ','
       << r.counts[b] << '\n';
  }
  return os.str();
}

const char* kResidualHeader = "run,bin_lo,bin_hi,count\n";

std::vector<std::pair<std::uint64_t, fs::path>> seed_dirs(const fs::path& root) {
  std::vector<std::pair<std::uint64_t, fs::path>> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("seed_", 0) != 0) continue;
    try {
      std::size_t used = 0;
      const auto seed = std::stoull(name.substr(5), &used);
      if (used == name.size() - 5) out.emplace_back(seed, entry.path());
    } catch (const std::exception&) {
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct AblationRecord {
  std::string sweep, name;
  std::uint64_t seed;
  double wis, dr, fqe, opera;
  std::optional<double> oracle;
};

const std::vector<std::string> kSweeps = {"variants", "strategies", "windows"};

std::string sweep_column(const std::string& sweep) {
  if (sweep == "variants") return "variant";
  if (sweep == "strategies") return "strategy";
  return "window";
}

std::string ablation_csv(const std::string& sweep, const std::vector<AblationRecord>& records) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRecord*>> by_name;
  bool oracle = false;
  for (const auto& r : records) {
    if (r.sweep != sweep) continue;
    if (!by_name.count(r.name)) order.push_back(r.name);
    by_name[r.name].push_back(&r);
    oracle = oracle || r.oracle.has_value();
  }
  std::ostringstream os;
  os << sweep_column(sweep) << ",WIS,DR,FQE,OPERA" << (oracle ? ",Oracle" : "") << '\n';
  for (const auto& name : order) {
    std::vector<double> w, d, f, o, t;
    for (const auto* r : by_name[name]) {
      w.push_back(r->wis);
      d.push_back(r->dr);
      f.push_back(r->fqe);
      o.push_back(r->opera);
      if (r->oracle) t.push_back(*r->oracle);
    }
    os << name << ',' << mean_std_cell(w) << ',' << mean_std_cell(d) << ',' << mean_std_cell(f) << ','
       << mean_std_cell(o);
    if (oracle) os << ',' << mean_std_cell(t);
    os << '\n';
  }
  return os.str();
}

json radar_json(const std::vector<AblationRecord>& records) {
  json series = json::array();
  std::vector<std::string> order;
  std::map<std::string, std::array<double, 4>> sums;
  std::map<std::string, int> counts;
  for (const auto& r : records) {
    if (r.sweep != "variants") continue;
    if (!counts.count(r.name)) order.push_back(r.name);
    auto& s = sums[r.name];
    s[0] += r.wis;
    s[1] += r.dr;
    s[2] += r.fqe;
    s[3] += r.opera;
    ++counts[r.name];
  }
  for (const auto& name : order) {
    std::vector<double> v;
    for (double x : sums[name]) v.push_back(x / counts[name]);
    series.push_back({{"name", name}, {"values", v}});
  }
  return {{"metrics", {"WIS", "DR", "FQE", "OPERA"}}, {"series", series}};
}

json records_json(const std::vector<AblationRecord>& records) {
  json arr = json::array();
  for (const auto& r : records) {
    json j = {{"sweep", r.sweep}, {"name", r.name}, {"seed", r.seed}, {"wis", r.wis},
              {"dr", r.dr},       {"fqe", r.fqe},   {"opera", r.opera}};
    j["oracle"] = r.oracle ? json(*r.oracle) : json(nullptr);
    arr.push_back(j);
  }
  return arr;
}

std::vector<AblationRecord> records_from_json(const json& arr) {
  std::vector<AblationRecord> out;
  try {
    for (const auto& j : arr) {
      AblationRecord r{j.at("sweep").get<std::string>(), j.at("name").get<std::string>(),
                       j.at("seed").get<std::uint64_t>(), j.at("wis").get<double>(),
                       j.at("dr").get<double>(),           j.at("fqe").get<double>(),
                       j.at("opera").get<double>(),        std::nullopt};
      if (!j.at("oracle").is_null()) r.oracle = j.at("oracle").get<double>();
      out.push_back(r);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ablation_runs.json: ") + e.what());
  }
  return out;
}

EvalHook validation_hook(const PreparedData& data, const OfflineDataset& val, const ExperimentConfig& cfg) {
  if (!data.mdp || val.episodes.empty()) return {};
  return [&val, &cfg](const PolicyModel& m) {
    return fqe_tabular(val, tabulate_policy(m, val, cfg.ope.epsilon_soft), cfg.ope.gamma).estimate;
  };
}

}  // namespace

void ExperimentConfig::validate() const {
  if (data.synth.has_value() == data.directory.has_value()) throw ConfigError("data: set exactly one of synth or directory");
  if (cross_eval_data && cross_eval_data->synth.has_value() == cross_eval_data->directory.has_value()) {
    throw ConfigError("cross_eval_data: set exactly one of synth or directory");
  }
  encoder.validate();
  train.validate();
  bdesr.validate();
  if (!(bdesr_p > 0.0 && bdesr_p < 50.0)) throw ConfigError("bdesr.p: must lie in (0, 50)");
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds: duplicate seed");
  }
  if (data.synth) {
    if (encoder.n_features != data.synth->mdp.n_features) {
      throw ConfigError("encoder.n_features: does not match data.synth.n_features");
    }
    if (encoder.d_n != data.synth->mdp.d_n) throw ConfigError("encoder.d_n: does not match data.synth.d_n");
  }
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  JsonReader r(j, "");
  ExperimentConfig c;
  c.data = data_source_from_json(r.require<json>("data"), "data", base_dir);
  if (r.has("cross_eval_data")) c.cross_eval_data = data_source_from_json(r.raw("cross_eval_data"), "cross_eval_data", base_dir);
  r.get<json>("cross_eval_data", nullptr);

  json enc = r.get<json>("encoder", json::object());
  if (!enc.is_object()) throw ConfigError("encoder: expected an object");
  if (c.data.synth) {
    if (!enc.contains("n_features")) enc["n_features"] = c.data.synth->mdp.n_features;
    if (!enc.contains("d_n")) enc["d_n"] = c.data.synth->mdp.d_n;
  }
  c.encoder = encoder_config_from_json(enc);
  c.train = train_config_from_json(r.get<json>("train", json::object()));
  c.ope = ope_from_json(r.child("ope"));
  c.behavior = behavior_from_json(r.child("behavior"));
  {
    JsonReader b = r.child("bdesr");
    c.bdesr.alpha = b.get<double>("alpha", c.bdesr.alpha);
    c.bdesr.beta = b.get<double>("beta", c.bdesr.beta);
    c.bdesr_p = b.get<double>("p", c.bdesr_p);
    b.finish();
    try {
      c.bdesr.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("bdesr: ") + e.what());
    }
  }
  c.seeds = r.get<std::vector<std::uint64_t>>("seeds", c.seeds);
  if (r.has("output_dir")) {
    fs::path out = r.get<std::string>("output_dir", "");
    if (out.is_relative() && !base_dir.empty()) out = base_dir / out;
    c.output_dir = out.lexically_normal();
  }
  r.get<json>("output_dir", nullptr);
  r.finish();
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j = {{"data", to_json(c.data)},
            {"encoder", to_json(c.encoder)},
            {"train", to_json(c.train)},
            {"ope", to_json(c.ope)},
            {"behavior", to_json(c.behavior)},
            {"bdesr", {{"alpha", c.bdesr.alpha}, {"beta", c.bdesr.beta}, {"p", c.bdesr_p}}},
            {"seeds", c.seeds}};
  if (c.cross_eval_data) j["cross_eval_data"] = to_json(*c.cross_eval_data);
  return j;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

ExperimentConfig for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig c = cfg;
  c.seeds = {seed};
  c.train.seed = seed;
  c.ope.seed = seed;
  c.ope.fqe_net.seed = seed;
  c.behavior.seed = seed;
  if (c.data.synth && !c.data.synth->seed) c.data.synth->seed = seed;
  if (c.cross_eval_data && c.cross_eval_data->synth && !c.cross_eval_data->synth->seed) {
    c.cross_eval_data->synth->seed = seed;
  }
  return c;
}

PreparedData prepare_data(const DataSource& source, std::uint64_t seed, const std::optional<FeatureStats>& stats) {
  PreparedData d;
  if (source.synth) {
    const SynthSource& s = *source.synth;
    const std::uint64_t data_seed = s.seed.value_or(seed);
    d.mdp = generate_mdp(s.mdp, data_seed);
    d.behavior = make_behavior_policy(*d.mdp, s.behavior_epsilon);
    d.raw = rollout(*d.mdp, *d.behavior, s.n_episodes, s.max_len, mix_seed(data_seed, 0x5e11ULL));
    d.max_len = s.max_len;
    d.gamma = s.mdp.gamma;
  } else if (source.directory) {
    d.raw = ingest(DatasetFiles::in_directory(*source.directory));
    for (const auto& ep : d.raw.episodes) d.max_len = std::max(d.max_len, static_cast<int>(ep.length()));
  } else {
    throw ConfigError("data: no source configured");
  }
  if (stats) {
    OfflineDataset withstats = d.raw;
    withstats.feature_stats = stats;
    d.dataset = normalize(withstats, false);
  } else {
    d.dataset = normalize(d.raw, true);
  }
  return d;
}

BehaviorModel behavior_for(const OfflineDataset& eval, const PreparedData& data, const BehaviorFitConfig& cfg) {
  bool logged = !eval.episodes.empty();
  for (const auto& ep : eval.episodes) {
    for (const auto& tr : ep.transitions) logged = logged && tr.behavior_prob.has_value();
  }
  if (logged) return BehaviorModel::from_logged(eval);
  const BehaviorClassifier clf = fit_behavior(data.dataset, cfg);
  return BehaviorModel::from_table(tabulate_behavior(clf, eval), eval);
}

json PolicyEvaluation::ope_json() const {
  return ope_part_json(OpePart{ope, oracle_value, oracle_value_truncated});
}

PolicyEvaluation evaluate_model(const PolicyModel& model, const PreparedData& data, const ExperimentConfig& cfg) {
  check_dims(model.encoder_config(), data.dataset);
  const OfflineDataset test = test_split(data);
  PolicyEvaluation e;
  OpePart part = run_ope(model, data, test, cfg);
  e.ope = part.report;
  e.oracle_value = part.oracle_value;
  e.oracle_value_truncated = part.oracle_value_truncated;
  e.bdesr = bdesr_report(model, test, cfg.bdesr, cfg.bdesr_p);
  e.residuals = bellman_residuals(model, test, cfg.train.gamma);
  return e;
}

std::string model_label(const EncoderConfig& enc, const TrainConfig& train) {
  std::string alg = to_string(train.algorithm);
  std::transform(alg.begin(), alg.end(), alg.begin(), [](unsigned char c) { return std::toupper(c); });
  std::string label = alg + "+" + to_string(enc.fusion) + "+" + to_string(enc.strategy.kind);
  if (enc.strategy.kind == NoteStrategyKind::stack) label += "(W=" + std::to_string(enc.strategy.window) + ")";
  return label;
}

std::string mean_std_cell(const std::vector<double>& values) {
  if (values.empty()) return "";
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f ± %.4f", mean, sd);
  return buf;
}

std::string table2_csv(const std::vector<Table2Row>& rows) {
  std::ostringstream os;
  os << "Metric";
  for (const auto& r : rows) os << ',' << r.model;
  os << '\n';
  const std::pair<const char*, std::vector<double> Table2Row::*> metrics[] = {
      {"WIS", &Table2Row::wis}, {"DR", &Table2Row::dr}, {"FQE", &Table2Row::fqe}, {"OPERA", &Table2Row::opera}};
  for (const auto& [name, field] : metrics) {
    os << name;
    for (const auto& r : rows) os << ',' << mean_std_cell(r.*field);
    os << '\n';
  }
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void cmd_synth(const CommandContext& ctx) {
  const ExperimentConfig& cfg = ctx.config;
  if (!cfg.data.synth) throw ConfigError("data.synth: required for synth");
  const std::uint64_t seed = cfg.seeds.front();
  if (cfg.seeds.size() > 1) log_line(ctx, "synth uses the first seed only (" + std::to_string(seed) + ")");
  const ExperimentConfig c = for_seed(cfg, seed);
  const PreparedData d = prepare_data(c.data, seed);
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(c));
  fs::create_directories(ctx.out / "data");
  export_dataset(d.raw, DatasetFiles::in_directory(ctx.out / "data"));
  write_json(ctx.out / "ground_truth.json", ground_truth_json(*d.mdp, *d.behavior, c.ope.gamma, d.max_len));
  log_line(ctx, "wrote " + std::to_string(d.raw.episodes.size()) + " episodes to " + (ctx.out / "data").string());
}

void cmd_ingest(const CommandContext& ctx) {
  const ExperimentConfig& cfg = ctx.config;
  if (!cfg.data.directory) throw ConfigError("data.directory: required for ingest");
  const OfflineDataset ds = ingest(DatasetFiles::in_directory(*cfg.data.directory));
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(cfg));
  fs::create_directories(ctx.out / "data");
  export_dataset(ds, DatasetFiles::in_directory(ctx.out / "data"));
  std::map<std::string, int> per_split;
  for (const auto& ep : ds.episodes) ++per_split[to_string(ep.split)];
  write_json(ctx.out / "dataset_summary.json", {{"n_episodes", ds.episodes.size()},
                                                 {"n_transitions", ds.num_transitions()},
                                                 {"n_features", ds.n_features},
                                                 {"d_n", ds.d_n},
                                                 {"episodes_per_split", per_split}});
  log_line(ctx, "ingested " + std::to_string(ds.episodes.size()) + " episodes");
}

void cmd_train(const CommandContext& ctx) {
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.config));
  for (const std::uint64_t seed : ctx.config.seeds) {
    const ExperimentConfig c = for_seed(ctx.config, seed);
    const fs::path dir = seed_dir(ctx.out, seed);
    fs::create_directories(dir);
    write_json(dir / "config.json", to_json(c));
    const PreparedData data = prepare_data(c.data, seed);
    check_dims(c.encoder, data.dataset);
    const OfflineDataset val = data.dataset.subset(Split::val);
    log_line(ctx, "seed " + std::to_string(seed) + ": training " + model_label(c.encoder, c.train));
    TrainResult result;
    try {
      result = train(data.dataset, c.encoder, c.train, validation_hook(data, val, c));
    } catch (const TrainingDiverged& e) {
      if (e.last_good()) write_json(dir / "last_good_checkpoint.json", e.last_good()->checkpoint({{"seed", seed}}));
      throw;
    }
    write_json(dir / "checkpoint.json", result.model.checkpoint({{"seed", seed}}));
    if (result.best_model) {
      write_json(dir / "best_checkpoint.json",
                 result.best_model->checkpoint({{"seed", seed}, {"val_fqe", *result.best_score}}));
    }
    std::ostringstream jsonl;
    std::ostringstream csv;
    csv << "step,loss,mean_q,reg_term,fqe_val\n";
    for (const auto& e : result.log) {
      jsonl << e.to_json().dump() << '\n';
      csv << e.step << ',' << format_double(e.loss) << ',' << format_double(e.mean_q) << ','
          << format_double(e.reg_term) << ',' << (e.fqe_val ? format_double(*e.fqe_val) : "") << '\n';
    }
    write_text(dir / "train_log.jsonl", jsonl.str());
    write_text(dir / "train_log.csv", csv.str());
  }
}

void cmd_eval(const CommandContext& ctx) {
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.config));
  std::map<std::string, Table2Row> rows;
  std::vector<std::string> order;
  for (const std::uint64_t seed : ctx.config.seeds) {
    const ExperimentConfig c = for_seed(ctx.config, seed);
    const fs::path dir = seed_dir(ctx.out, seed);
    const PolicyModel model = load_model(ctx, seed);
    const PreparedData data = prepare_data(c.data, seed);
    log_line(ctx, "seed " + std::to_string(seed) + ": evaluating");
    const PolicyEvaluation e = evaluate_model(model, data, c);
    fs::create_directories(dir);
    write_json(dir / "config.json", to_json(c));
    write_json(dir / "ope_report.json", e.ope_json());
    write_json(dir / "bdesr_report.json", e.bdesr.to_json());
    write_text(dir / "bdesr_table.csv", e.bdesr.table_csv());
    write_json(dir / "residuals.json", e.residuals.to_json(false));
    const std::string label = model_label(model.encoder_config(), c.train);
    if (!rows.count(label)) order.push_back(label);
    Table2Row& row = rows[label];
    row.model = label;
    row.wis.push_back(e.ope.wis);
    row.dr.push_back(e.ope.dr);
    row.fqe.push_back(e.ope.fqe);
    row.opera.push_back(e.ope.opera);
  }
  std::vector<Table2Row> table;
  for (const auto& l : order) table.push_back(rows[l]);
  write_text(ctx.out / "table2.csv", table2_csv(table));
}

void cmd_ope(const CommandContext& ctx) {
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.config));
  for (const std::uint64_t seed : ctx.config.seeds) {
    const ExperimentConfig c = for_seed(ctx.config, seed);
    const PolicyModel model = load_model(ctx, seed);
    const PreparedData data = prepare_data(c.data, seed);
    check_dims(model.encoder_config(), data.dataset);
    const OpePart part = run_ope(model, data, test_split(data), c);
    const fs::path dir = seed_dir(ctx.out, seed);
    write_json(dir / "config.json", to_json(c));
    write_json(dir / "ope_report.json", ope_part_json(part));
  }
}

void cmd_bdesr(const CommandContext& ctx) {
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.config));
  for (const std::uint64_t seed : ctx.config.seeds) {
    const ExperimentConfig c = for_seed(ctx.config, seed);
    const PolicyModel model = load_model(ctx, seed);
    const PreparedData data = prepare_data(c.data, seed);
    check_dims(model.encoder_config(), data.dataset);
    const BdesrReport rep = bdesr_report(model, test_split(data), c.bdesr, c.bdesr_p);
    if (rep.split.warning) log_line(ctx, "warning: " + *rep.split.warning);
    const fs::path dir = seed_dir(ctx.out, seed);
    write_json(dir / "config.json", to_json(c));
    write_json(dir / "bdesr_report.json", rep.to_json());
    write_text(dir / "bdesr_table.csv", rep.table_csv());
  }
}

std::vector<AblationArm> ablation_arms(const ExperimentConfig& cfg) {
  std::vector<AblationArm> arms;
  TrainConfig bcq = cfg.train;
  bcq.algorithm = Algorithm::bcq;
  auto variant = [&](const std::string& name, FusionMode fusion, NoteStrategyKind kind) {
    EncoderConfig e = cfg.encoder;
    e.fusion = fusion;
    e.strategy.kind = kind;
    arms.push_back({"variants", name, e, bcq});
  };
  variant("base", FusionMode::concat, NoteStrategyKind::impute);
  variant("+BCMA", FusionMode::attention, NoteStrategyKind::impute);
  variant("+GF", FusionMode::attention, NoteStrategyKind::context);
  for (const auto kind : {NoteStrategyKind::raw, NoteStrategyKind::impute, NoteStrategyKind::stack,
                          NoteStrategyKind::context}) {
    EncoderConfig e = cfg.encoder;
    e.strategy.kind = kind;
    arms.push_back({"strategies", to_string(kind), e, cfg.train});
  }
  for (const int w : {3, 5, 7}) {
    EncoderConfig e = cfg.encoder;
    e.strategy = NoteStrategy{NoteStrategyKind::stack, w};
    arms.push_back({"windows", std::to_string(w), e, cfg.train});
  }
  return arms;
}

void cmd_ablate(const CommandContext& ctx) {
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.config));
  const auto arms = ablation_arms(ctx.config);
  std::vector<AblationRecord> records;
  for (const std::uint64_t seed : ctx.config.seeds) {
    const ExperimentConfig c = for_seed(ctx.config, seed);
    const PreparedData data = prepare_data(c.data, seed);
    check_dims(c.encoder, data.dataset);
    const OfflineDataset test = test_split(data);
    for (const auto& arm : arms) {
      log_line(ctx, "seed " + std::to_string(seed) + ": " + arm.sweep + " / " + arm.name);
      TrainConfig t = arm.train;
      t.seed = seed;
      const TrainResult result = train(data.dataset, arm.encoder, t);
      const OpePart part = run_ope(result.model, data, test, c);
      records.push_back({arm.sweep, arm.name, seed, part.report.wis, part.report.dr, part.report.fqe,
                         part.report.opera, part.oracle_value_truncated});
    }
  }
  write_json(ctx.out / "ablation_runs.json", records_json(records));
  for (const auto& sweep : kSweeps) write_text(ctx.out / ("ablation_" + sweep + ".csv"), ablation_csv(sweep, records));
  write_json(ctx.out / "radar.json", radar_json(records));
}

void cmd_cross_eval(const CommandContext& ctx) {
  if (!ctx.config.cross_eval_data) throw ConfigError("cross_eval_data: required for cross-eval");
  fs::create_directories(ctx.out);
  write_json(ctx.out / "config.json", to_json(ctx.config));
  for (const std::uint64_t seed : ctx.config.seeds) {
    const ExperimentConfig c = for_seed(ctx.config, seed);
    const fs::path dir = seed_dir(ctx.out, seed);
    fs::create_directories(dir);
    write_json(dir / "config.json", to_json(c));
    const PreparedData source = prepare_data(c.data, seed);
    check_dims(c.encoder, source.dataset);
    const PreparedData target = prepare_data(*c.cross_eval_data, seed, source.dataset.feature_stats);
    check_dims(c.encoder, target.dataset);
    const OfflineDataset test = test_split(target);
    const BehaviorModel behavior = behavior_for(test, target, c.behavior);

    std::vector<std::pair<long, double>> curve;
    long step = 0;
    const EvalHook hook = [&](const PolicyModel& m) {
      step += c.train.eval_interval;
      const StepTable pi = tabulate_policy(m, test, c.ope.epsilon_soft);
      const bool tabular = c.ope.tabular_fqe && target.mdp;
      const FqeResult f = tabular ? fqe_tabular(test, pi, c.ope.gamma) : fqe_network(test, pi, c.ope.gamma, c.ope.fqe_net);
      const double dr = doubly_robust(test, pi, behavior, f.q, c.ope.gamma);
      curve.emplace_back(std::min(step, c.train.total_steps), dr);
      return dr;
    };
    log_line(ctx, "seed " + std::to_string(seed) + ": training with cross-dataset DR tracking");
    const TrainResult result = train(source.dataset, c.encoder, c.train, hook);
    const OpePart part = run_ope(result.model, target, test, c);
    write_json(dir / "ope_report.json", ope_part_json(part));
    std::ostringstream csv;
    csv << "step,dr\n";
    for (const auto& [s, dr] : curve) csv << s << ',' << format_double(dr) << '\n';
    write_text(dir / "dr_curve.csv", csv.str());
  }
}

void cmd_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw DataError("run directory " + run_dir.string() + " does not exist");
  const fs::path out = run_dir / "report";
  std::vector<std::string> written;

  std::map<std::string, Table2Row> rows;
  std::vector<std::string> order;
  std::string residual_csv = kResidualHeader;
  bool residuals = false;
  for (const auto& [seed, dir] : seed_dirs(run_dir)) {
    if (fs::exists(dir / "ope_report.json") && fs::exists(dir / "config.json")) {
      const json rep = read_json_file(dir / "ope_report.json");
      const ExperimentConfig c = experiment_config_from_json(read_json_file(dir / "config.json"));
      const std::string label = model_label(c.encoder, c.train);
      if (!rows.count(label)) order.push_back(label);
      Table2Row& row = rows[label];
      row.model = label;
      try {
        row.wis.push_back(rep.at("wis").at("estimate").get<double>());
        row.dr.push_back(rep.at("dr").at("estimate").get<double>());
        row.fqe.push_back(rep.at("fqe").at("estimate").get<double>());
        row.opera.push_back(rep.at("opera").at("estimate").get<double>());
      } catch (const json::exception& e) {
        throw DataError("malformed " + (dir / "ope_report.json").string() + ": " + e.what());
      }
    }
    if (fs::exists(dir / "residuals.json")) {
      const json r = read_json_file(dir / "residuals.json");
      ResidualSummary s;
      try {
        s.bin_edges = r.at("bin_edges").get<std::vector<double>>();
        s.counts = r.at("counts").get<std::vector<std::size_t>>();
      } catch (const json::exception& e) {
        throw DataError("malformed " + (dir / "residuals.json").string() + ": " + e.what());
      }
      if (s.bin_edges.size() != s.counts.size() + 1) throw DataError("residual bin edges and counts disagree");
      residual_csv += residual_histogram_rows(dir.filename().string(), s);
      residuals = true;
    }
  }
  if (!order.empty()) {
    std::vector<Table2Row> table;
    for (const auto& l : order) table.push_back(rows[l]);
    write_text(out / "table2.csv", table2_csv(table));
    written.push_back("table2.csv");
  }
  if (residuals) {
    write_text(out / "residual_histogram.csv", residual_csv);
    written.push_back("residual_histogram.csv");
  }
  if (fs::exists(run_dir / "ablation_runs.json")) {
    const auto records = records_from_json(read_json_file(run_dir / "ablation_runs.json"));
    for (const auto& sweep : kSweeps) {
      write_text(out / ("ablation_" + sweep + ".csv"), ablation_csv(sweep, records));
      written.push_back("ablation_" + sweep + ".csv");
    }
    write_json(out / "radar.json", radar_json(records));
    written.push_back("radar.json");
  }
  if (written.empty()) throw DataError("no evaluation or ablation outputs found under " + run_dir.string());
  write_json(out / "index.json", {{"files", written}});
}

}  // namespace clinrl
