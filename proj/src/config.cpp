#include "mmfusion/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

namespace mmf {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Entries {
 public:
  void set(const std::string& key, const std::string& value, int line) {
    if (!map_.emplace(key, std::make_pair(value, line)).second)
      throw ConfigError("line " + std::to_string(line) + ": duplicate key '" + key + "'");
  }

  bool has(const std::string& key) const { return map_.count(key) > 0; }

  std::optional<std::string> take(const std::string& key) {
    auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    std::string v = it->second.first;
    map_.erase(it);
    return v;
  }

  template <typename I>
  void integer(const std::string& key, I& out) {
    if (auto v = take(key)) out = parse_int<I>(key, *v);
  }
  void real(const std::string& key, double& out) {
    if (auto v = take(key)) out = parse_real(key, *v);
  }
  void boolean(const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (*v == "true" || *v == "1")
        out = true;
      else if (*v == "false" || *v == "0")
        out = false;
      else
        throw ConfigError(key + ": expected true or false, got '" + *v + "'");
    }
  }
  void text(const std::string& key, std::string& out) {
    if (auto v = take(key)) out = *v;
  }
  void int_list(const std::string& key, std::vector<int64_t>& out) {
    if (auto v = take(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) out.push_back(parse_int<int64_t>(key, item));
    }
  }

  void reject_leftovers() const {
    if (map_.empty()) return;
    const auto& [key, vl] = *std::min_element(map_.begin(), map_.end(), [](const auto& a, const auto& b) {
      return a.second.second < b.second.second;
    });
    throw ConfigError("line " + std::to_string(vl.second) + ": unknown key '" + key + "'");
  }

  template <typename I>
  static I parse_int(const std::string& key, const std::string& v) {
    I out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
  }
  static double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
      throw ConfigError(key + ": expected a finite number, got '" + v + "'");
    return out;
  }

 private:
  std::map<std::string, std::pair<std::string, int>> map_;
};

void read_backbone(Entries& e, const std::string& prefix, BackboneSpec& spec) {
  if (auto preset = e.take(prefix + ".preset")) apply_preset(spec, *preset);
  e.integer(prefix + ".stem_channels", spec.stem_channels);
  e.integer(prefix + ".stem_kernel", spec.stem_kernel);
  e.int_list(prefix + ".stage_channels", spec.stage_channels);
  e.int_list(prefix + ".blocks", spec.blocks_per_stage);
  if (auto b = e.take(prefix + ".block")) spec.block = parse_block_kind(*b);
  e.integer(prefix + ".growth", spec.growth_rate);
}

std::string fmt_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

std::string fmt_list(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out;
}

const char* fmt_bool(bool b) { return b ? "true" : "false"; }

void render_backbone(std::ostream& os, const std::string& prefix, const BackboneSpec& s) {
  os << prefix << ".stem_channels = " << s.stem_channels << "\n";
  os << prefix << ".stem_kernel = " << s.stem_kernel << "\n";
  os << prefix << ".stage_channels = " << fmt_list(s.stage_channels) << "\n";
  os << prefix << ".blocks = " << fmt_list(s.blocks_per_stage) << "\n";
  os << prefix << ".block = " << to_string(s.block) << "\n";
  os << prefix << ".growth = " << s.growth_rate << "\n";
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  Entries e;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    e.set(key, trim(t.substr(eq + 1)), lineno);
  }

  RunConfig rc;
  FusionConfig& m = rc.model;
  if (auto v = e.take("mode")) m.mode = parse_fusion_mode(*v);
  e.integer("classes", m.num_classes);
  e.integer("head.hidden", m.head_hidden);
  if (auto v = e.take("modalities")) {
    for (const auto& name : split_list(*v)) {
      auto shape = e.take("modality." + name + ".shape");
      if (!shape) throw ConfigError("modality '" + name + "' has no modality." + name + ".shape");
      m.modalities.push_back({name, parse_feature_shape(*shape)});
    }
  }
  m.backbone2d.dims = Dimensionality::k2D;
  m.backbone3d.dims = Dimensionality::k3D;
  read_backbone(e, "backbone2d", m.backbone2d);
  read_backbone(e, "backbone3d", m.backbone3d);
  e.int_list("fusion.widths", m.fusion_widths);
  e.boolean("fusion.conversion_activation", m.conversion_activation);

  e.text("data.manifest", rc.manifest);
  if (!rc.manifest.empty()) {
    rc.manifest_path = rc.manifest;
    if (rc.manifest_path.is_relative() && !base_dir.empty()) rc.manifest_path = base_dir / rc.manifest_path;
  }
  e.boolean("data.crop", rc.crop);
  e.integer("seed", rc.seed);

  TrainOptions& t = rc.train;
  e.integer("train.epochs", t.epochs);
  e.integer("train.batch_size", t.batch_size);
  e.real("optim.lr", t.optim.lr);
  e.real("optim.beta1", t.optim.beta1);
  e.real("optim.beta2", t.optim.beta2);
  e.real("optim.eps", t.optim.eps);
  e.real("optim.weight_decay", t.optim.weight_decay);
  e.boolean("optim.decoupled", t.optim.decoupled);
  e.boolean("augment.enabled", t.augment.enabled);
  e.real("augment.gamma_min", t.augment.gamma_min);
  e.real("augment.gamma_max", t.augment.gamma_max);
  e.real("augment.noise_max", t.augment.noise_max);
  e.real("augment.flip_prob", t.augment.flip_prob);
  e.text("augment.flip_axes_2d", t.augment.flip_axes_2d);
  e.text("augment.flip_axes_3d", t.augment.flip_axes_3d);
  e.boolean("eval.quadratic_kappa", t.quadratic_kappa);
  e.reject_leftovers();

  // Modality-specific keys for names not listed above end up here as unknown keys.
  if (m.modalities.empty()) throw ConfigError("missing key 'modalities'");
  if (t.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (t.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (!(t.optim.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (!(t.optim.beta1 >= 0.0 && t.optim.beta1 < 1.0) || !(t.optim.beta2 >= 0.0 && t.optim.beta2 < 1.0))
    throw ConfigError("optim.beta1 and optim.beta2 must lie in [0, 1)");
  if (!(t.augment.gamma_min > 0.0 && t.augment.gamma_min <= t.augment.gamma_max))
    throw ConfigError("augment.gamma_min must be > 0 and <= augment.gamma_max");
  if (t.augment.noise_max < 0.0) throw ConfigError("augment.noise_max must be >= 0");
  if (!(t.augment.flip_prob >= 0.0 && t.augment.flip_prob <= 1.0))
    throw ConfigError("augment.flip_prob must lie in [0, 1]");
  for (const auto* axes : {&t.augment.flip_axes_2d, &t.augment.flip_axes_3d})
    for (char c : *axes)
      if (c != 'X' && c != 'Y') throw ConfigError("flip axes may only contain X and Y, got '" + *axes + "'");
  m.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_run_config(ss.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string RunConfig::render_model() const {
  std::ostringstream os;
  os << "mode = " << to_string(model.mode) << "\n";
  os << "classes = " << model.num_classes << "\n";
  os << "head.hidden = " << model.head_hidden << "\n";
  os << "modalities = ";
  for (size_t i = 0; i < model.modalities.size(); ++i) os << (i ? ", " : "") << model.modalities[i].name;
  os << "\n";
  for (const auto& mod : model.modalities) os << "modality." << mod.name << ".shape = " << mod.shape.str() << "\n";
  render_backbone(os, "backbone2d", model.backbone2d);
  render_backbone(os, "backbone3d", model.backbone3d);
  if (!model.fusion_widths.empty()) os << "fusion.widths = " << fmt_list(model.fusion_widths) << "\n";
  os << "fusion.conversion_activation = " << fmt_bool(model.conversion_activation) << "\n";
  return os.str();
}

std::string RunConfig::render() const {
  std::ostringstream os;
  os << render_model();
  if (!manifest.empty()) os << "data.manifest = " << manifest << "\n";
  os << "data.crop = " << fmt_bool(crop) << "\n";
  os << "seed = " << seed << "\n";
  os << "train.epochs = " << train.epochs << "\n";
  os << "train.batch_size = " << train.batch_size << "\n";
  os << "optim.lr = " << fmt_real(train.optim.lr) << "\n";
  os << "optim.beta1 = " << fmt_real(train.optim.beta1) << "\n";
  os << "optim.beta2 = " << fmt_real(train.optim.beta2) << "\n";
  os << "optim.eps = " << fmt_real(train.optim.eps) << "\n";
  os << "optim.weight_decay = " << fmt_real(train.optim.weight_decay) << "\n";
  os << "optim.decoupled = " << fmt_bool(train.optim.decoupled) << "\n";
  os << "augment.enabled = " << fmt_bool(train.augment.enabled) << "\n";
  os << "augment.gamma_min = " << fmt_real(train.augment.gamma_min) << "\n";
  os << "augment.gamma_max = " << fmt_real(train.augment.gamma_max) << "\n";
  os << "augment.noise_max = " << fmt_real(train.augment.noise_max) << "\n";
  os << "augment.flip_prob = " << fmt_real(train.augment.flip_prob) << "\n";
  os << "augment.flip_axes_2d = " << train.augment.flip_axes_2d << "\n";
  os << "augment.flip_axes_3d = " << train.augment.flip_axes_3d << "\n";
  os << "eval.quadratic_kappa = " << fmt_bool(train.quadratic_kappa) << "\n";
  return os.str();
}

uint64_t RunConfig::digest() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : render_model()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string digest_hex(uint64_t digest) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << digest;
  return os.str();
}

}  // namespace mmf
