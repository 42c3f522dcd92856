#pragma once

// Config-driven experiment runner behind `mfm run` and `mfm report`.
//
// A run writes everything under one output directory:
//   config.resolved.json            the fully resolved config (all defaults filled in)
//   encoder.<tag>.s<seed>.mfm       frozen encoders, MFM1 format
//   pretrain_loss.<tag>.s<seed>.csv step,loss
//   report.s<seed>.csv, report.csv  probe rows (per seed, then all seeds)
//   fusion.<task>.s<seed>.mfm       trained fusion params (fuse_eval), "fusion/" prefix
//   corr.s<seed>.layer<k>.{pgm,csv} correspondence maps (corr_map), corr_meta.csv
//   grad_check.csv                  gradient-check rows (grad_check)
//   manifest.csv                    path,bytes,checksum for every file above
//
// Exit codes: 0 ok, 2 invalid config, 3 numerical failure, 4 I/O failure, 1 anything else.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mfm/gradsuite.hpp"
#include "mfm/pretrain.hpp"
#include "mfm/probe.hpp"
#include "mfm/serialize.hpp"

namespace mfm::run {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& modes() {
  static const std::vector<std::string> m{"layer_sweep", "strategy_sweep", "fuse_eval",
                                          "mlp_ablation", "corr_map",      "grad_check"};
  return m;
}

struct BranchConfig {
  EncoderConfig encoder;
  PretrainObjective objective = PretrainObjective::GlobalSupervised;
  PretrainOptions pretrain;
};

struct ExperimentConfig {
  std::string run_name = "run";
  std::string mode;
  std::vector<std::uint64_t> seeds{1};
  int precision = 32;
  std::string output_dir;

  BranchConfig branch1;  // the only encoder outside fusion modes
  BranchConfig branch2;  // fuse_eval / mlp_ablation only
  DatasetSpec dataset;
  std::size_t pretrain_samples = 2000;
  std::size_t probe_samples = 1000;

  ProbeBudget probe;
  std::vector<ProbeTask> tasks;

  std::vector<MergeStrategy> strategies;
  std::vector<std::size_t> fixed_layers;  // single-layer baselines in strategy_sweep
  MergeOptions merge;

  FusionConfig fusion;

  std::vector<std::size_t> corr_layers;
  std::size_t corr_sample = 0;

  std::size_t grad_instances = 10;
  std::size_t grad_coords = 30;

  bool fusion_mode() const { return mode == "fuse_eval" || mode == "mlp_ablation"; }
};

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  bool resume = false;
};

namespace detail {

/// Strict view over one JSON object: unknown keys fail on construction.
class Section {
 public:
  Section(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("config section '" + label() + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!ok.count(it.key())) throw ConfigError("unknown key '" + path_ + it.key() + "' in config");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return path_ + key; }

  std::uint64_t u64(const char* key, std::uint64_t def) const {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError("config key '" + path(key) + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }
  std::size_t size(const char* key, std::size_t def) const { return static_cast<std::size_t>(u64(key, def)); }
  std::size_t positive(const char* key, std::size_t def) const {
    auto v = size(key, def);
    if (v == 0) throw ConfigError("config key '" + path(key) + "' must be positive");
    return v;
  }
  double number(const char* key, double def) const {
    if (!has(key)) return def;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError("config key '" + path(key) + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError("config key '" + path(key) + "' must be finite");
    return d;
  }
  bool boolean(const char* key, bool def) const {
    if (!has(key)) return def;
    if (!j_.at(key).is_boolean()) throw ConfigError("config key '" + path(key) + "' must be true or false");
    return j_.at(key).get<bool>();
  }
  std::string string(const char* key, const std::string& def) const {
    if (!has(key)) return def;
    if (!j_.at(key).is_string()) throw ConfigError("config key '" + path(key) + "' must be a string");
    return j_.at(key).get<std::string>();
  }
  std::vector<std::size_t> sizes(const char* key) const {
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError("config key '" + path(key) + "' must be an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer() || (!e.is_number_unsigned() && e.get<std::int64_t>() < 0)) throw ConfigError("config key '" + path(key) + "' must hold non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }
  std::vector<std::string> strings(const char* key) const {
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError("config key '" + path(key) + "' must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError("config key '" + path(key) + "' must hold strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_.substr(0, path_.size() - 1); }
  const json& j_;
  std::string path_;
};

inline void read_encoder(const Section& s, EncoderConfig& e) {
  e.depth = s.positive("depth", e.depth);
  e.dim = s.positive("dim", e.dim);
  e.heads = s.positive("heads", e.heads);
  e.patch_size = s.positive("patch_size", e.patch_size);
  if (s.has("image_size")) {
    auto v = s.sizes("image_size");
    if (v.size() != 2) throw ConfigError("config key '" + s.path("image_size") + "' must be [height, width]");
    e.image_h = v[0];
    e.image_w = v[1];
  }
}

inline void read_pretrain(const Section& s, BranchConfig& b) {
  if (s.has("objective")) {
    const auto name = s.string("objective", "");
    auto o = parse_objective(name);
    if (!o) throw ConfigError("config key '" + s.path("objective") + "': unknown objective '" + name + "'");
    b.objective = *o;
  }
  b.pretrain.steps = s.size("steps", b.pretrain.steps);
  b.pretrain.batch = s.positive("batch", b.pretrain.batch);
  b.pretrain.lr = s.number("lr", b.pretrain.lr);
  if (!(b.pretrain.lr > 0)) throw ConfigError("config key '" + s.path("lr") + "' must be positive");
}

inline std::vector<ProbeTask> read_tasks(const Section& s, const char* key) {
  std::vector<ProbeTask> out;
  for (const auto& name : s.strings(key)) {
    auto t = parse_task(name);
    if (!t) throw ConfigError("config key '" + s.path(key) + "': unknown task '" + name + "'");
    out.push_back(*t);
  }
  return out;
}

inline std::string lln_order_name(LlnOrder o) { return o == LlnOrder::LnThenLinear ? "ln_linear" : "linear_ln"; }

}  // namespace detail

/// Parses and validates a config document; every default is resolved here.
inline ExperimentConfig parse_config(const json& doc, const Overrides& ov = {}) {
  using detail::Section;
  Section root(doc, "",
               {"run_name", "mode", "seed", "seeds", "precision", "output_dir", "encoder", "pretrain", "branch2",
                "dataset", "probe", "merge", "fusion", "corr_map", "grad_check"});
  ExperimentConfig c;
  c.run_name = root.string("run_name", c.run_name);
  if (c.run_name.empty() || c.run_name.find_first_of("/\\") != std::string::npos || c.run_name == "." ||
      c.run_name == "..")
    throw ConfigError("config key 'run_name' must be a plain non-empty name");
  if (!root.has("mode")) throw ConfigError("config key 'mode' is required");
  c.mode = root.string("mode", "");
  if (std::find(modes().begin(), modes().end(), c.mode) == modes().end())
    throw ConfigError("config key 'mode': unknown mode '" + c.mode + "'");
  if (root.has("seed") && root.has("seeds")) throw ConfigError("config keys 'seed' and 'seeds' are exclusive");
  if (root.has("seeds")) {
    c.seeds.clear();
    for (auto s : root.sizes("seeds")) c.seeds.push_back(s);
    if (c.seeds.empty()) throw ConfigError("config key 'seeds' must not be empty");
    if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
      throw ConfigError("config key 'seeds' has duplicates");
  } else {
    c.seeds = {root.u64("seed", 1)};
  }
  c.precision = static_cast<int>(root.u64("precision", 32));
  c.output_dir = root.string("output_dir", "");

  if (root.has("encoder")) detail::read_encoder(Section(root.at("encoder"), "encoder.", {"depth", "dim", "heads", "patch_size", "image_size"}), c.branch1.encoder);
  if (root.has("pretrain"))
    detail::read_pretrain(Section(root.at("pretrain"), "pretrain.", {"objective", "steps", "batch", "lr"}), c.branch1);

  // branch 2 shares image and patch size with branch 1
  c.branch2.encoder = c.branch1.encoder;
  c.branch2.objective = PretrainObjective::InstanceContrastive;
  c.branch2.pretrain = c.branch1.pretrain;
  if (!root.has("pretrain") || !root.at("pretrain").contains("objective"))
    c.branch1.objective = c.fusion_mode() ? PretrainObjective::GlobalContrastive : PretrainObjective::GlobalSupervised;
  if (root.has("branch2")) {
    Section b(root.at("branch2"), "branch2.", {"objective", "steps", "batch", "lr", "depth", "dim", "heads"});
    detail::read_pretrain(b, c.branch2);
    c.branch2.encoder.depth = b.positive("depth", c.branch2.encoder.depth);
    c.branch2.encoder.dim = b.positive("dim", c.branch2.encoder.dim);
    c.branch2.encoder.heads = b.positive("heads", c.branch2.encoder.heads);
  }

  c.dataset.image_h = c.branch1.encoder.image_h;
  c.dataset.image_w = c.branch1.encoder.image_w;
  c.dataset.patch_size = c.branch1.encoder.patch_size;
  if (root.has("dataset")) {
    Section d(root.at("dataset"), "dataset.",
              {"pretrain_samples", "probe_samples", "global_classes", "marker_size", "stripe_amplitude", "noise"});
    c.pretrain_samples = d.positive("pretrain_samples", c.pretrain_samples);
    c.probe_samples = d.positive("probe_samples", c.probe_samples);
    c.dataset.global_classes = d.size("global_classes", c.dataset.global_classes);
    c.dataset.marker_size = d.size("marker_size", c.dataset.marker_size);
    c.dataset.stripe_amplitude = d.number("stripe_amplitude", c.dataset.stripe_amplitude);
    c.dataset.noise = d.number("noise", c.dataset.noise);
  }

  const std::size_t N = c.branch1.encoder.depth;
  if (c.mode == "layer_sweep")
    c.tasks = {ProbeTask::Global, ProbeTask::LocalCell, ProbeTask::LocalCoord};
  else
    c.tasks = {ProbeTask::LocalCell, ProbeTask::Global};
  if (root.has("probe")) {
    Section p(root.at("probe"), "probe.", {"steps", "lr", "batch", "standardize", "tasks"});
    c.probe.steps = p.size("steps", c.probe.steps);
    c.probe.lr = p.number("lr", c.probe.lr);
    c.probe.batch = p.positive("batch", c.probe.batch);
    c.probe.standardize = p.boolean("standardize", c.probe.standardize);
    if (p.has("tasks")) c.tasks = detail::read_tasks(p, "tasks");
    if (!(c.probe.lr > 0)) throw ConfigError("config key 'probe.lr' must be positive");
  }

  c.strategies = {MergeStrategy::mean_half(), MergeStrategy::mean_all(), MergeStrategy::layerscale(),
                  MergeStrategy::lln_layerscale(), MergeStrategy::conv_layerscale()};
  for (std::size_t k = N - (N + 3) / 4 + 1; k <= N; ++k) c.fixed_layers.push_back(k);
  if (root.has("merge")) {
    Section m(root.at("merge"), "merge.", {"strategies", "fixed_layers", "lln_order", "lln_shared", "batch_norm"});
    if (m.has("strategies")) {
      c.strategies.clear();
      for (const auto& name : m.strings("strategies")) {
        auto s = MergeStrategy::parse(name);
        if (!s) throw ConfigError("config key 'merge.strategies': unknown strategy '" + name + "'");
        c.strategies.push_back(*s);
      }
    }
    if (m.has("fixed_layers")) c.fixed_layers = m.sizes("fixed_layers");
    const auto order = m.string("lln_order", detail::lln_order_name(c.merge.lln_order));
    if (order == "ln_linear")
      c.merge.lln_order = LlnOrder::LnThenLinear;
    else if (order == "linear_ln")
      c.merge.lln_order = LlnOrder::LinearThenLn;
    else
      throw ConfigError("config key 'merge.lln_order' must be 'ln_linear' or 'linear_ln'");
    c.merge.lln_shared = m.boolean("lln_shared", c.merge.lln_shared);
    c.merge.batch_norm = m.boolean("batch_norm", c.merge.batch_norm);
  }

  c.fusion = FusionConfig::defaults(c.branch1.encoder.depth, c.branch2.encoder.depth, c.branch1.encoder.dim,
                                    c.branch2.encoder.dim);
  if (root.has("fusion")) {
    Section f(root.at("fusion"), "fusion.", {"clip_layers", "dino_layers", "mlp_blocks", "mlp_ratio", "out_dim"});
    if (f.has("clip_layers")) c.fusion.clip_layers = f.sizes("clip_layers");
    if (f.has("dino_layers")) c.fusion.dino_layers = f.sizes("dino_layers");
    c.fusion.mlp_blocks = f.size("mlp_blocks", c.fusion.mlp_blocks);
    c.fusion.mlp_ratio = f.positive("mlp_ratio", c.fusion.mlp_ratio);
    c.fusion.out_dim = f.positive("out_dim", c.fusion.out_dim);
  }
  c.fusion.lln_order = c.merge.lln_order;
  c.fusion.lln_shared = c.merge.lln_shared;

  for (std::size_t k = 1; k <= N; ++k) c.corr_layers.push_back(k);
  if (root.has("corr_map")) {
    Section m(root.at("corr_map"), "corr_map.", {"layers", "sample"});
    if (m.has("layers")) c.corr_layers = m.sizes("layers");
    c.corr_sample = m.size("sample", c.corr_sample);
  }
  if (root.has("grad_check")) {
    Section g(root.at("grad_check"), "grad_check.", {"instances", "coords"});
    c.grad_instances = g.positive("instances", c.grad_instances);
    c.grad_coords = g.positive("coords", c.grad_coords);
  }

  if (ov.seed) c.seeds = {*ov.seed};
  if (ov.precision) c.precision = *ov.precision;
  if (ov.out) c.output_dir = *ov.out;
  if (c.output_dir.empty()) c.output_dir = (fs::path("runs") / c.run_name).string();
  if (c.precision != 32 && c.precision != 64) throw ConfigError("precision must be 32 or 64");

  // semantic checks, reported as config errors
  try {
    c.branch1.encoder.validate();
    c.branch2.encoder.validate();
    c.dataset.validate();
    for (const auto& s : c.strategies) (void)s.layers(N);
    c.fusion.validate();
  } catch (const DimensionError& e) {
    throw ConfigError(e.what());
  }
  for (auto k : c.fixed_layers)
    if (k < 1 || k > N) throw ConfigError("config key 'merge.fixed_layers': layer " + std::to_string(k) + " outside 1.." + std::to_string(N));
  for (auto k : c.corr_layers)
    if (k < 1 || k > N) throw ConfigError("config key 'corr_map.layers': layer " + std::to_string(k) + " outside 1.." + std::to_string(N));
  if (c.branch1.encoder.image_h != c.branch2.encoder.image_h || c.branch1.encoder.image_w != c.branch2.encoder.image_w ||
      c.branch1.encoder.patch_size != c.branch2.encoder.patch_size)
    throw ConfigError("both branches must share image and patch size");
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  auto enc = [](const EncoderConfig& e) {
    return json{{"depth", e.depth}, {"dim", e.dim}, {"heads", e.heads}, {"patch_size", e.patch_size},
                {"image_size", {e.image_h, e.image_w}}};
  };
  auto pre = [](const BranchConfig& b) {
    return json{{"objective", to_string(b.objective)}, {"steps", b.pretrain.steps}, {"batch", b.pretrain.batch},
                {"lr", b.pretrain.lr}};
  };
  std::vector<std::string> tasks, strategies;
  for (auto t : c.tasks) tasks.push_back(to_string(t));
  for (const auto& s : c.strategies) strategies.push_back(s.name());
  json j{{"run_name", c.run_name},
         {"mode", c.mode},
         {"seeds", c.seeds},
         {"precision", c.precision},
         {"output_dir", c.output_dir},
         {"encoder", enc(c.branch1.encoder)},
         {"pretrain", pre(c.branch1)},
         {"dataset",
          {{"pretrain_samples", c.pretrain_samples},
           {"probe_samples", c.probe_samples},
           {"global_classes", c.dataset.global_classes},
           {"marker_size", c.dataset.marker_size},
           {"stripe_amplitude", c.dataset.stripe_amplitude},
           {"noise", c.dataset.noise}}},
         {"probe",
          {{"steps", c.probe.steps},
           {"lr", c.probe.lr},
           {"batch", c.probe.batch},
           {"standardize", c.probe.standardize},
           {"tasks", tasks}}},
         {"merge",
          {{"strategies", strategies},
           {"fixed_layers", c.fixed_layers},
           {"lln_order", detail::lln_order_name(c.merge.lln_order)},
           {"lln_shared", c.merge.lln_shared},
           {"batch_norm", c.merge.batch_norm}}},
         {"corr_map", {{"layers", c.corr_layers}, {"sample", c.corr_sample}}},
         {"grad_check", {{"instances", c.grad_instances}, {"coords", c.grad_coords}}}};
  if (c.fusion_mode()) {
    auto b2 = pre(c.branch2);
    b2["depth"] = c.branch2.encoder.depth;
    b2["dim"] = c.branch2.encoder.dim;
    b2["heads"] = c.branch2.encoder.heads;
    j["branch2"] = b2;
    j["fusion"] = {{"clip_layers", c.fusion.clip_layers},
                   {"dino_layers", c.fusion.dino_layers},
                   {"mlp_blocks", c.fusion.mlp_blocks},
                   {"mlp_ratio", c.fusion.mlp_ratio},
                   {"out_dim", c.fusion.out_dim}};
  }
  return j;
}

inline ExperimentConfig load_config(const fs::path& path, const Overrides& ov = {}) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc, ov);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string content_checksum(std::string_view bytes) { return hex64(stable_hash(bytes)); }

/// Writes artifacts atomically under one root and keeps the manifest.
class ArtifactWriter {
 public:
  static constexpr const char* kManifest = "manifest.csv";

  ArtifactWriter(fs::path root, bool resume) : root_(std::move(root)), resume_(resume) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) throw IoError("cannot create output directory " + root_.string() + ": " + ec.message());
    if (resume_ && fs::exists(root_ / kManifest)) previous_ = read_manifest(root_);
  }

  const fs::path& root() const { return root_; }

  void write(const std::string& rel, std::string_view content) {
    check_name(rel);
    write_file_atomic(root_ / rel, content);
    entries_[rel] = {content.size(), content_checksum(content)};
  }

  /// With --resume: true when every file is listed in the previous manifest and
  /// still matches its checksum; the entries are carried over.
  bool reusable(const std::vector<std::string>& rels) {
    if (!resume_) return false;
    std::map<std::string, std::pair<std::size_t, std::string>> found;
    for (const auto& rel : rels) {
      auto it = previous_.find(rel);
      if (it == previous_.end() || !fs::exists(root_ / rel)) return false;
      const auto bytes = read_file(root_ / rel);
      if (content_checksum(bytes) != it->second.second) return false;
      found[rel] = {bytes.size(), it->second.second};
    }
    for (auto& [k, v] : found) entries_[k] = v;
    return true;
  }

  std::string read(const std::string& rel) const { return read_file(root_ / rel); }

  std::string manifest_text() const {
    std::string out = "path,bytes,checksum\n";
    for (const auto& [k, v] : entries_) out += k + "," + std::to_string(v.first) + "," + v.second + "\n";
    return out;
  }

  void finish() { write_file_atomic(root_ / kManifest, manifest_text()); }

  static std::map<std::string, std::pair<std::size_t, std::string>> read_manifest(const fs::path& dir) {
    std::map<std::string, std::pair<std::size_t, std::string>> out;
    std::istringstream in(read_file(dir / kManifest));
    std::string line;
    std::getline(in, line);
    if (line != "path,bytes,checksum") throw IoError("manifest has an unexpected header: " + line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto a = line.find(','), b = line.rfind(',');
      if (a == std::string::npos || a == b) throw IoError("malformed manifest line: " + line);
      out[line.substr(0, a)] = {std::stoull(line.substr(a + 1, b - a - 1)), line.substr(b + 1)};
    }
    return out;
  }

 private:
  static void check_name(const std::string& rel) {
    const fs::path p(rel);
    if (rel.empty() || p.is_absolute() || p.has_parent_path() || rel == "." || rel == ".." || rel == kManifest)
      throw IoError("refusing to write artifact outside the output directory: " + rel);
  }

  fs::path root_;
  bool resume_;
  std::map<std::string, std::pair<std::size_t, std::string>> entries_, previous_;
};

/// Progress messages go to stderr so stdout stays machine-clean.
inline void log(const std::string& msg) { std::cerr << "[mfm] " << msg << "\n"; }

template <typename T>
struct RunData {
  Dataset<T> pretrain;
  Dataset<T> probe;
  Split split;
};

template <typename T>
RunData<T> make_data(const ExperimentConfig& c, std::uint64_t seed) {
  RunData<T> d{gen_dataset<T>(split_seed(seed, "data.pretrain"), c.pretrain_samples, c.dataset),
               gen_dataset<T>(split_seed(seed, "data.probe"), c.probe_samples, c.dataset), {}};
  d.split = split_dataset(d.probe);
  if (d.split.train.empty() || d.split.eval.empty())
    throw ConfigError("dataset.probe_samples is too small for an 80/20 split");
  return d;
}

inline std::string seed_tag(std::uint64_t seed) { return "s" + std::to_string(seed); }

/// Pretrains (or, on resume, reloads) one branch encoder, quantized to storage precision.
template <typename T>
ParameterSet<T> obtain_encoder(ArtifactWriter& w, const BranchConfig& b, const std::string& tag, std::uint64_t seed,
                               const Dataset<T>& data) {
  const std::string file = "encoder." + tag + "." + seed_tag(seed) + ".mfm";
  const std::string loss_file = "pretrain_loss." + tag + "." + seed_tag(seed) + ".csv";
  EncoderConfig cfg = b.encoder;
  cfg.seed = split_seed(seed, "encoder.init." + tag);
  if (w.reusable({file, loss_file})) {
    log("reusing " + file);
    return decode_params<float>(w.read(file)).template cast<T>();
  }
  log("pretraining " + tag + " (" + to_string(b.objective) + ", " + std::to_string(b.pretrain.steps) +
      " steps) seed " + std::to_string(seed));
  auto opt = b.pretrain;
  opt.seed = split_seed(seed, "pretrain." + tag);
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  auto res = pretrain(init_encoder<T>(cfg), cfg, b.objective, data, rows, opt);
  for (const auto& msg : res.warnings) log("warning: " + msg);
  quantize_to_storage(res.encoder);
  std::string losses = "step,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i) losses += std::to_string(i) + "," + ProbeReport::format_value(res.losses[i]) + "\n";
  w.write(file, encode_params(res.encoder));
  w.write(loss_file, losses);
  return res.encoder;
}

template <typename T>
std::shared_ptr<const LayerFeatures<T>> features(const BranchConfig& b, const std::string& tag, std::uint64_t seed,
                                                 const ParameterSet<T>& enc, const Dataset<T>& ds) {
  EncoderConfig cfg = b.encoder;
  cfg.seed = split_seed(seed, "encoder.init." + tag);
  return std::make_shared<const LayerFeatures<T>>(encode_dataset(ds.images, cfg, enc));
}

/// Runs `compute` for one seed's report unless a resumable copy exists; returns the CSV body rows.
inline std::string seed_report(ArtifactWriter& w, std::uint64_t seed, const std::function<ProbeReport()>& compute) {
  const std::string file = "report." + seed_tag(seed) + ".csv";
  std::string text;
  if (w.reusable({file})) {
    log("reusing " + file);
    text = w.read(file);
  } else {
    text = compute().to_csv();
    w.write(file, text);
  }
  return text.substr(text.find('\n') + 1);
}

inline TokenGrid grid_of(const EncoderConfig& e) { return {e.grid_rows(), e.grid_cols()}; }

template <typename T>
ProbeReport layer_sweep_report(const ExperimentConfig& c, std::uint64_t seed, std::shared_ptr<const LayerFeatures<T>> lf,
                               const RunData<T>& d) {
  return layer_sweep(lf, std::span<const ProbeTask>(c.tasks), d.probe, d.split, c.probe, seed,
                     to_string(c.branch1.objective))
      .report;
}

template <typename T>
ProbeReport strategy_sweep_report(const ExperimentConfig& c, std::uint64_t seed,
                                  std::shared_ptr<const LayerFeatures<T>> lf, const RunData<T>& d) {
  std::vector<ProviderFactory<T>> providers;
  const auto grid = grid_of(c.branch1.encoder);
  for (const auto& s : c.strategies)
    providers.push_back([lf, s, grid, opt = c.merge] { return merge_provider(lf, s, grid, opt); });
  for (auto k : c.fixed_layers) providers.push_back([lf, k] { return layer_provider(lf, k); });
  return strategy_sweep(providers, std::span<const ProbeTask>(c.tasks), d.probe, d.split, c.probe, seed,
                        to_string(c.branch1.objective));
}

inline std::string fusion_objective(const ExperimentConfig& c) {
  return to_string(c.branch1.objective) + "+" + to_string(c.branch2.objective);
}

template <typename T>
ProbeReport mlp_ablation_report(const ExperimentConfig& c, std::uint64_t seed,
                                std::shared_ptr<const LayerFeatures<T>> lf1,
                                std::shared_ptr<const LayerFeatures<T>> lf2, const RunData<T>& d) {
  std::vector<ProviderFactory<T>> providers;
  for (auto [m, r] : mlp_ablation_grid()) {
    auto cfg = c.fusion;
    cfg.mlp_blocks = m;
    cfg.mlp_ratio = r;
    for (const auto& w : cfg.warnings()) log("warning: " + w);
    providers.push_back([lf1, lf2, cfg, seed] { return fusion_provider(lf1, lf2, cfg, split_seed(seed, "fusion.init")); });
  }
  return strategy_sweep(providers, std::span<const ProbeTask>(c.tasks), d.probe, d.split, c.probe, seed,
                        fusion_objective(c));
}

template <typename T>
void run_seed(const ExperimentConfig& c, std::uint64_t seed, ArtifactWriter& w, std::string& report_body) {
  if (c.mode == "grad_check") return;
  auto d = make_data<T>(c, seed);
  if (!c.fusion_mode()) {
    auto enc = obtain_encoder(w, c.branch1, "enc", seed, d.pretrain);
    if (c.mode == "corr_map") {
      const auto& rows = d.split.eval;
      if (c.corr_sample >= rows.size())
        throw ConfigError("corr_map.sample " + std::to_string(c.corr_sample) + " exceeds the eval split size " +
                          std::to_string(rows.size()));
      const std::size_t row = rows[c.corr_sample];
      auto e = c.branch1.encoder;
      e.seed = split_seed(seed, "encoder.init.enc");
      auto lf = encode_dataset(d.probe.gather_images(std::span<const std::size_t>(&row, 1)), e, enc);
      std::string meta;
      for (auto k : c.corr_layers) {
        const auto& l = lf.layers[k - 1];
        auto f = l.reshaped({l.dim(1), l.dim(2)});
        auto m = correspondence_map(f, f);
        const std::string base = "corr." + seed_tag(seed) + ".layer" + std::to_string(k);
        w.write(base + ".pgm", to_pgm(m.sim));
        w.write(base + ".csv", to_csv(m.sim));
        meta += std::to_string(seed) + "," + std::to_string(k) + "," + std::to_string(row) + "," +
                std::to_string(f.dim(0)) + "," + std::to_string(m.zero_rows.size()) + "\n";
      }
      report_body += meta;
      return;
    }
    report_body += seed_report(w, seed, [&] {
      auto lf = features(c.branch1, "enc", seed, enc, d.probe);
      return c.mode == "layer_sweep" ? layer_sweep_report(c, seed, lf, d) : strategy_sweep_report(c, seed, lf, d);
    });
    return;
  }

  auto enc1 = obtain_encoder(w, c.branch1, "clip", seed, d.pretrain);
  auto enc2 = obtain_encoder(w, c.branch2, "dino", seed, d.pretrain);
  if (c.mode == "mlp_ablation") {
    report_body += seed_report(w, seed, [&] {
      return mlp_ablation_report(c, seed, features(c.branch1, "clip", seed, enc1, d.probe),
                                 features(c.branch2, "dino", seed, enc2, d.probe), d);
    });
    return;
  }
  // fuse_eval: fusion rows plus last-layer baselines of each branch; trained fusion params are kept
  std::vector<std::string> files{"report." + seed_tag(seed) + ".csv"};
  for (auto t : c.tasks) files.push_back("fusion." + to_string(t) + "." + seed_tag(seed) + ".mfm");
  std::string text;
  if (w.reusable(files)) {
    log("reusing fuse_eval outputs for seed " + std::to_string(seed));
    text = w.read(files[0]);
  } else {
    auto lf1 = features(c.branch1, "clip", seed, enc1, d.probe);
    auto lf2 = features(c.branch2, "dino", seed, enc2, d.probe);
    for (const auto& msg : c.fusion.warnings()) log("warning: " + msg);
    const auto obj = fusion_objective(c);
    ProbeReport rep;
    for (auto t : c.tasks) {
      auto p = fusion_provider(lf1, lf2, c.fusion, split_seed(seed, "fusion.init"));
      auto run = train_probe(p, t, d.probe, d.split, c.probe, seed, obj);
      rep.rows.push_back(run.row);
      w.write("fusion." + to_string(t) + "." + seed_tag(seed) + ".mfm", encode_params(p.params, kFusionPrefix));
    }
    std::vector<ProviderFactory<T>> base;
    base.push_back([lf1, k = lf1->depth()] {
      auto p = layer_provider(lf1, k);
      p.name = "clip/" + p.name;
      return p;
    });
    base.push_back([lf2, k = lf2->depth()] {
      auto p = layer_provider(lf2, k);
      p.name = "dino/" + p.name;
      return p;
    });
    rep.append(strategy_sweep(base, std::span<const ProbeTask>(c.tasks), d.probe, d.split, c.probe, seed, obj));
    text = rep.to_csv();
    w.write(files[0], text);
  }
  report_body += text.substr(text.find('\n') + 1);
}

inline std::string grad_check_csv(const ExperimentConfig& c, bool& all_passed) {
  std::string out = "op,instance,coordinates,max_rel_error,worst,passed\n";
  all_passed = true;
  const auto seed = c.seeds.front();
  for (const auto& r : run_grad_suite(c.grad_instances, split_seed(seed, "grad_check"), c.grad_coords)) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", r.result.max_rel_error);
    const bool ok = r.result.passed();
    all_passed = all_passed && ok;
    out += r.op + "," + std::to_string(r.instance) + "," + std::to_string(r.result.coordinates) + "," + buf + "," +
           r.result.worst + "," + (ok ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string escape_json(const std::string& s) { return json(s).dump(); }

inline void error_line(std::ostream& os, int code, const std::string& kind, const std::string& message) {
  os << "{\"error\":\"" << kind << "\",\"exit_code\":" << code << ",\"message\":" << escape_json(message) << "}\n";
}

/// Executes one resolved config; throws on failure (see run_main for exit mapping).
struct RunOutcome {
  int exit_code = kExitOk;
  fs::path dir;
};

inline RunOutcome execute(const ExperimentConfig& c, bool resume) {
  ArtifactWriter w(c.output_dir, resume);
  w.write("config.resolved.json", to_json(c).dump(2) + "\n");
  RunOutcome out{kExitOk, w.root()};
  if (c.mode == "grad_check") {
    bool ok = true;
    w.write("grad_check.csv", grad_check_csv(c, ok));
    w.finish();
    if (!ok) throw NumericError("gradient check exceeded tolerance; see grad_check.csv");
    return out;
  }
  std::string body;
  for (auto seed : c.seeds) {
    if (c.precision == 64)
      run_seed<double>(c, seed, w, body);
    else
      run_seed<float>(c, seed, w, body);
  }
  if (c.mode == "corr_map")
    w.write("corr_meta.csv", "seed,layer,row,tokens,zero_norm_tokens\n" + body);
  else
    w.write("report.csv", std::string(ProbeReport::kHeader) + "\n" + body);
  w.finish();
  return out;
}

/// Maps exceptions to exit codes and prints one machine-readable error line.
inline int guarded(const std::function<int()>& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    error_line(err, kExitConfig, "config", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    error_line(err, kExitNumeric, "numeric", e.what());
    return kExitNumeric;
  } catch (const IoError& e) {
    error_line(err, kExitIo, "io", e.what());
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    error_line(err, kExitIo, "io", e.what());
    return kExitIo;
  } catch (const DimensionError& e) {
    error_line(err, kExitConfig, "config", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    error_line(err, kExitInternal, "internal", e.what());
    return kExitInternal;
  }
}

inline int run_main(const fs::path& config, const Overrides& ov, std::ostream& err = std::cerr) {
  return guarded([&] { return execute(load_config(config, ov), ov.resume).exit_code; }, err);
}

// ---- report ---------------------------------------------------------------

/// One CSV row with the value kept as its original text.
struct ReportRow {
  std::string objective, provider, task, metric, value_text;
  double value = 0;
  std::uint64_t seed = 0;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<ReportRow> parse_report(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != ProbeReport::kHeader) throw IoError("report.csv has an unexpected header: " + line);
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 6) throw IoError("malformed report line: " + line);
    rows.push_back({f[0], f[1], f[2], f[3], f[4], std::stod(f[4]), std::stoull(f[5])});
  }
  return rows;
}

/// Best row per (seed, task) in file order; ties keep the earliest row.
inline std::map<std::pair<std::uint64_t, std::string>, ReportRow> best_by_seed_task(const std::vector<ReportRow>& rows) {
  std::map<std::pair<std::uint64_t, std::string>, ReportRow> best;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.seed, r.task);
    auto it = best.find(key);
    const bool higher = r.metric != "mse";
    if (it == best.end())
      best.emplace(key, r);
    else if (higher ? r.value > it->second.value : r.value < it->second.value)
      it->second = r;
  }
  return best;
}

inline std::optional<std::size_t> layer_index(const std::string& provider) {
  const std::string head = "layer(";
  const auto pos = provider.rfind(head);
  if (pos == std::string::npos || provider.back() != ')') return std::nullopt;
  return std::stoul(provider.substr(pos + head.size(), provider.size() - pos - head.size() - 1));
}

/// Majority rule used by the soft criteria: at least ceil(2n/3) of n seeds.
inline bool soft_pass(std::size_t hits, std::size_t n) { return n > 0 && 3 * hits >= 2 * n; }

inline std::string verdict(std::size_t hits, std::size_t n) {
  return std::to_string(hits) + "/" + std::to_string(n) + " seeds -> " + (soft_pass(hits, n) ? "PASS" : "FAIL");
}

inline int report_main(const fs::path& dir, std::ostream& out) {
  if (!fs::exists(dir / ArtifactWriter::kManifest)) throw IoError("no manifest.csv in " + dir.string());
  const auto manifest = ArtifactWriter::read_manifest(dir);
  json cfg;
  try {
    cfg = json::parse(read_file(dir / "config.resolved.json"));
  } catch (const json::parse_error& e) {
    throw IoError(std::string("config.resolved.json is unreadable: ") + e.what());
  }
  const std::string mode = cfg.at("mode").get<std::string>();
  out << "run " << cfg.at("run_name").get<std::string>() << " (mode " << mode << ", " << manifest.size()
      << " artifacts)\n";

  if (mode == "grad_check") {
    std::istringstream in(read_file(dir / "grad_check.csv"));
    std::string line;
    std::getline(in, line);
    std::map<std::string, std::pair<double, std::string>> worst;
    std::size_t rows = 0, failed = 0;
    std::vector<std::string> order;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f = split_csv_line(line);
      ++rows;
      failed += f[5] == "1" ? 0 : 1;
      if (!worst.count(f[0])) order.push_back(f[0]);
      auto& w = worst[f[0]];
      if (w.second.empty() || std::stod(f[3]) > w.first) w = {std::stod(f[3]), f[3]};
    }
    if (rows == 0) {
      out << "no rows\n";
      return kExitOk;
    }
    for (const auto& op : order) out << "grad " << op << ": max_rel_error " << worst[op].second << "\n";
    out << "gradient check: " << rows - failed << "/" << rows << " instances within tolerance -> "
        << (failed == 0 ? "PASS" : "FAIL") << "\n";
    return kExitOk;
  }

  if (mode == "corr_map") {
    std::istringstream in(read_file(dir / "corr_meta.csv"));
    std::string line;
    std::getline(in, line);
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f = split_csv_line(line);
      out << "map seed " << f[0] << " layer " << f[1] << ": " << f[3] << "x" << f[3] << " tokens, " << f[4]
          << " zero-norm\n";
      ++n;
    }
    if (n == 0) out << "no rows\n";
    return kExitOk;
  }

  const auto rows = parse_report(read_file(dir / "report.csv"));
  if (rows.empty()) {
    out << "no rows\n";
    return kExitOk;
  }
  const auto best = best_by_seed_task(rows);
  std::vector<std::string> tasks;
  std::vector<std::uint64_t> seeds;
  for (const auto& r : rows) {
    if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  }
  for (const auto& t : tasks) {
    out << "task " << t << " best:";
    bool first = true;
    for (auto s : seeds) {
      auto it = best.find({s, t});
      if (it == best.end()) continue;
      out << (first ? " " : "; ") << "seed " << s << " " << it->second.provider << " " << it->second.metric << "="
          << it->second.value_text;
      first = false;
    }
    out << "\n";
  }

  auto has_task = [&](const std::string& t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };
  if (mode == "layer_sweep" && has_task("global") && has_task("local_cell")) {
    std::size_t hits = 0;
    for (auto s : seeds) {
      auto g = layer_index(best.at({s, "global"}).provider), l = layer_index(best.at({s, "local_cell"}).provider);
      if (g && l && *l <= *g) ++hits;
    }
    out << "soft criterion layer_bias (local_cell argmax layer <= global argmax layer): " << verdict(hits, seeds.size())
        << "\n";
    if (cfg.at("pretrain").at("objective") == "random") {
      const double bound = 1.0 / cfg.at("dataset").at("global_classes").get<double>() + 0.15;
      std::size_t ok = 0;
      for (auto s : seeds) ok += best.at({s, "global"}).value <= bound ? 1 : 0;
      out << "soft criterion random_chance (every layer's global accuracy <= " << ProbeReport::format_value(bound)
          << "): " << verdict(ok, seeds.size()) << "\n";
    }
  }
  if (mode == "strategy_sweep" && has_task("local_cell")) {
    const auto deep = cfg.at("merge").at("fixed_layers").get<std::vector<std::size_t>>();
    std::size_t hits = 0, n = 0;
    for (auto s : seeds) {
      std::optional<double> lln, best_deep;
      for (const auto& r : rows) {
        if (r.seed != s || r.task != "local_cell") continue;
        if (r.provider == "lln_layerscale") lln = r.value;
        auto k = layer_index(r.provider);
        if (k && std::find(deep.begin(), deep.end(), *k) != deep.end())
          best_deep = best_deep ? std::max(*best_deep, r.value) : r.value;
      }
      if (!lln || !best_deep) continue;
      ++n;
      hits += *lln >= *best_deep - 0.01 ? 1 : 0;
    }
    if (n > 0)
      out << "soft criterion merging_helps (lln_layerscale local_cell >= best fixed deep layer - 0.01): "
          << verdict(hits, n) << "\n";
  }
  if (mode == "mlp_ablation") {
    for (const auto& r : rows)
      out << "ablation seed " << r.seed << " " << r.provider << " " << r.task << " " << r.metric << "=" << r.value_text
          << "\n";
    std::set<std::string> configs;
    for (const auto& r : rows) configs.insert(r.provider);
    const std::size_t expected = mlp_ablation_grid().size();
    out << "ablation grid: " << configs.size() << "/" << expected << " configurations reported -> "
        << (configs.size() == expected ? "PASS" : "FAIL") << "\n";
  }
  return kExitOk;
}

}  // namespace mfm::run
