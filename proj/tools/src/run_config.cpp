#include "tanet_cli/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace tanet::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);  // shortest exact form
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

template <typename I>
I to_int(const std::string& key, const std::string& v) {
  I out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<int> to_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int<int>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

std::string fmt_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define TANET_DOUBLE(name, expr)                                                               \
  Field{name, [](RunConfig& c, const std::string& v) { c.expr = to_double(name, v); },         \
        [](const RunConfig& c) { return fmt_double(c.expr); }}
#define TANET_INT(name, expr)                                                                  \
  Field{name, [](RunConfig& c, const std::string& v) { c.expr = to_int<decltype(c.expr)>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.expr); }}
#define TANET_BOOL(name, expr)                                                                 \
  Field{name, [](RunConfig& c, const std::string& v) { c.expr = to_bool(name, v); },           \
        [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }}
#define TANET_INTS(name, expr)                                                                 \
  Field{name, [](RunConfig& c, const std::string& v) { c.expr = to_ints(name, v); },           \
        [](const RunConfig& c) { return fmt_ints(c.expr); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      // training
      TANET_INT("batch_size", train.batch_size),
      TANET_DOUBLE("lr", train.lr),
      TANET_INT("epochs_pretrain", train.epochs_pretrain),
      TANET_INT("epochs_joint", train.epochs_joint),
      TANET_INT("plateau_patience", train.plateau_patience),
      TANET_DOUBLE("plateau_factor", train.plateau_factor),
      TANET_INT("train_seed", train.seed),
      TANET_BOOL("augment", train.augment),
      TANET_DOUBLE("loss_seg", train.weights.seg),
      TANET_DOUBLE("loss_coarse", train.weights.coarse),
      TANET_DOUBLE("loss_theta", train.weights.theta),
      TANET_BOOL("use_stn", train.use_stn),
      TANET_BOOL("use_hp", train.use_hp),
      TANET_BOOL("teacher_crops", train.teacher_crops),
      TANET_DOUBLE("gt_margin", train.gt_margin),
      TANET_DOUBLE("gt_min_scale", train.gt_min_scale),
      // model
      TANET_INT("model_seed", model.seed),
      TANET_INT("in_channels", model.in_channels),
      TANET_INT("image_h", model.image_h),
      TANET_INT("image_w", model.image_w),
      TANET_INT("crop_h", model.backbone.crop_h),
      TANET_INT("crop_w", model.backbone.crop_w),
      TANET_INTS("sp_channels", model.backbone.sp_channels),
      TANET_INT("hp_m", model.backbone.hp_m),
      TANET_DOUBLE("hp_sparsity", model.backbone.hp_sparsity),
      TANET_INTS("hp_channels", model.backbone.hp_channels),
      TANET_INTS("gp_widths", model.backbone.gp_widths),
      TANET_INT("gp_out", model.backbone.gp_out),
      TANET_INT("fuse_channels", model.backbone.fuse_channels),
      TANET_INT("head_classes", model.backbone.head_classes),
      TANET_INTS("coarse_widths", model.backbone.coarse_widths),
      TANET_INT("bank_seed", model.backbone.bank_seed),
      TANET_INTS("localizer_widths", model.localizer.widths),
      TANET_BOOL("coord_channels", model.localizer.coord_channels),
      // phantom data
      TANET_INT("data_seed", phantom.seed),
      TANET_INT("phantom_h", phantom.height),
      TANET_INT("phantom_w", phantom.width),
      TANET_DOUBLE("speckle", phantom.speckle),
      TANET_DOUBLE("jitter", phantom.jitter),
      TANET_DOUBLE("min_fraction", phantom.min_fraction),
      TANET_DOUBLE("max_thin_fraction", phantom.max_thin_fraction),
      TANET_INT("max_attempts", phantom.max_attempts),
      TANET_INT("count", count),
  };
  return f;
}

#undef TANET_DOUBLE
#undef TANET_INT
#undef TANET_BOOL
#undef TANET_INTS

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::pair<std::string, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + text + "'");
  auto key = trim(text.substr(0, eq)), value = trim(text.substr(eq + 1));
  if (key.empty()) throw ConfigError("missing key in '" + text + "'");
  return {key, value};
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_field(key).set(*this, value);
}

void RunConfig::validate() const {
  try {
    train.validate();
    model.validate();
    phantom.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (count < 1) throw ConfigError("count must be >= 1");
  if (phantom.height != model.image_h || phantom.width != model.image_w) {
    throw ConfigError("phantom_h/phantom_w must equal image_h/image_w");
  }
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      const auto [key, value] = split_assignment(line);
      if (const auto it = seen.find(key); it != seen.end()) {
        throw ConfigError("duplicate key '" + key + "' (first on line " + std::to_string(it->second) + ")");
      }
      seen[key] = lineno;
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

}  // namespace tanet::cli
