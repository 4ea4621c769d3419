#include "ctflab/cli/config.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "ctflab/binary_io.hpp"
#include "ctflab/error.hpp"

namespace ctflab::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::string body = v;
  if (body.size() >= 2 && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
  std::vector<std::string> out;
  if (trim(body).empty()) return out;
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t x = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, x);
  if (v.empty() || r.ec != std::errc() || r.ptr != end) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_f64(const std::string& v) {
  try {
    const double x = binary_io::parse_double(v);
    if (!std::isfinite(x)) throw ConfigError("");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("expected a finite number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string to_text(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

template <typename T>
std::vector<T> to_uint_list(const std::string& v) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(static_cast<T>(to_u64(item)));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Key {
  std::string name;
  Setter set;
  Getter get;
};

template <typename T, typename Ref>
Key field(std::string name, Ref ref) {
  Key k;
  k.name = std::move(name);
  k.set = [ref](ExperimentConfig& c, const std::string& v) {
    if constexpr (std::is_same_v<T, double>) {
      ref(c) = to_f64(v);
    } else if constexpr (std::is_same_v<T, bool>) {
      ref(c) = to_bool(v);
    } else {
      const std::uint64_t x = to_u64(v);
      if (x > std::numeric_limits<T>::max()) throw ConfigError("value out of range: '" + v + "'");
      ref(c) = static_cast<T>(x);
    }
  };
  k.get = [ref](const ExperimentConfig& c) {
    const auto& x = ref(const_cast<ExperimentConfig&>(c));
    if constexpr (std::is_same_v<T, double>) {
      return binary_io::format_double(x);
    } else if constexpr (std::is_same_v<T, bool>) {
      return std::string(x ? "true" : "false");
    } else {
      return std::to_string(x);
    }
  };
  return k;
}

#define CFG_FIELD(T, name, member) field<T>(name, [](ExperimentConfig& c) -> T& { return c.member; })

void augmentation_keys(std::vector<Key>& keys, const std::string& prefix,
                       synth::AugmentationSpec& (*spec)(ExperimentConfig&),
                       CutoutSettings& (*cutout)(ExperimentConfig&)) {
  auto add_double = [&](const char* name, double synth::AugmentationSpec::*m) {
    keys.push_back(field<double>(prefix + name, [spec, m](ExperimentConfig& c) -> double& { return spec(c).*m; }));
  };
  keys.push_back(field<bool>(prefix + "geometric", [spec](ExperimentConfig& c) -> bool& { return spec(c).geometric; }));
  keys.push_back(
      field<bool>(prefix + "photometric", [spec](ExperimentConfig& c) -> bool& { return spec(c).photometric; }));
  add_double("flip_prob", &synth::AugmentationSpec::flip_prob);
  add_double("scale_lo", &synth::AugmentationSpec::scale_lo);
  add_double("scale_hi", &synth::AugmentationSpec::scale_hi);
  add_double("brightness", &synth::AugmentationSpec::brightness);
  add_double("contrast", &synth::AugmentationSpec::contrast);
  add_double("saturation", &synth::AugmentationSpec::saturation);
  add_double("hue", &synth::AugmentationSpec::hue);
  add_double("color_prob", &synth::AugmentationSpec::color_prob);
  add_double("grayscale_prob", &synth::AugmentationSpec::grayscale_prob);
  add_double("blur_sigma_lo", &synth::AugmentationSpec::blur_sigma_lo);
  add_double("blur_sigma_hi", &synth::AugmentationSpec::blur_sigma_hi);
  add_double("blur_prob", &synth::AugmentationSpec::blur_prob);
  keys.push_back(field<std::size_t>(prefix + "cutout_passes",
                                    [cutout](ExperimentConfig& c) -> std::size_t& { return cutout(c).passes; }));
  auto cutout_double = [&](const char* name, double synth::CutoutSpec::*m) {
    keys.push_back(
        field<double>(prefix + name, [cutout, m](ExperimentConfig& c) -> double& { return cutout(c).params.*m; }));
  };
  cutout_double("cutout_prob", &synth::CutoutSpec::prob);
  cutout_double("cutout_scale_lo", &synth::CutoutSpec::scale_lo);
  cutout_double("cutout_scale_hi", &synth::CutoutSpec::scale_hi);
  cutout_double("cutout_ratio_lo", &synth::CutoutSpec::ratio_lo);
  cutout_double("cutout_ratio_hi", &synth::CutoutSpec::ratio_hi);
}

std::vector<Key> build_registry() {
  std::vector<Key> k;
  k.push_back(CFG_FIELD(std::size_t, "dataset.image_size", dataset.image_size));
  k.push_back(CFG_FIELD(int, "dataset.num_classes", dataset.num_classes));
  k.push_back(CFG_FIELD(std::size_t, "dataset.n_labeled", dataset.n_labeled));
  k.push_back(CFG_FIELD(std::size_t, "dataset.n_unlabeled", dataset.n_unlabeled));
  k.push_back(CFG_FIELD(std::size_t, "dataset.n_validation", dataset.n_validation));
  k.push_back(CFG_FIELD(std::size_t, "dataset.min_objects", dataset.min_objects));
  k.push_back(CFG_FIELD(std::size_t, "dataset.max_objects", dataset.max_objects));
  k.push_back(CFG_FIELD(std::size_t, "dataset.min_object_size", dataset.min_object_size));
  k.push_back(CFG_FIELD(std::size_t, "dataset.max_object_size", dataset.max_object_size));
  k.push_back(CFG_FIELD(std::uint64_t, "dataset.seed", dataset.seed));

  Key channels;
  channels.name = "detector.channels";
  channels.set = [](ExperimentConfig& c, const std::string& v) {
    c.detector.channels = to_uint_list<std::size_t>(v);
  };
  channels.get = [](const ExperimentConfig& c) { return join(c.detector.channels); };
  k.push_back(channels);

  k.push_back(CFG_FIELD(double, "optim.learning_rate", optim.learning_rate));
  k.push_back(CFG_FIELD(double, "optim.momentum", optim.momentum));
  k.push_back(CFG_FIELD(double, "optim.weight_decay", optim.weight_decay));

  k.push_back(CFG_FIELD(std::size_t, "burnin.iterations", burnin.iterations));
  k.push_back(CFG_FIELD(std::size_t, "burnin.batch_size", burnin.batch_size));

  k.push_back(CFG_FIELD(std::size_t, "train.labeled_batch", ctf.train.labeled_batch));
  k.push_back(CFG_FIELD(std::size_t, "train.unlabeled_batch", ctf.train.unlabeled_batch));
  k.push_back(CFG_FIELD(double, "train.lambda_u", ctf.train.lambda_u));
  k.push_back(CFG_FIELD(double, "train.ema", ctf.train.ema));
  k.push_back(CFG_FIELD(double, "train.pseudo_threshold", ctf.train.pseudo_threshold));

  k.push_back(CFG_FIELD(std::size_t, "ctf.num_pairs", ctf.num_pairs));
  k.push_back(CFG_FIELD(std::size_t, "ctf.stage_length", ctf.stage_length));
  k.push_back(CFG_FIELD(std::size_t, "ctf.max_iter", ctf.max_iter));
  k.push_back(CFG_FIELD(double, "ctf.beta", ctf.beta));
  Key policy;
  policy.name = "ctf.reset_policy";
  policy.set = [](ExperimentConfig& c, const std::string& v) { c.ctf.reset_policy = ctf::parse_policy(to_text(v)); };
  policy.get = [](const ExperimentConfig& c) { return std::string(ctf::policy_name(c.ctf.reset_policy)); };
  k.push_back(policy);
  Key rep;
  rep.name = "ctf.representative";
  rep.set = [](ExperimentConfig& c, const std::string& v) {
    c.ctf.representative = ctf::parse_representative(to_text(v));
  };
  rep.get = [](const ExperimentConfig& c) { return std::string(ctf::representative_name(c.ctf.representative)); };
  k.push_back(rep);
  Key seeds;
  seeds.name = "ctf.seeds";
  seeds.set = [](ExperimentConfig& c, const std::string& v) { c.ctf.seeds = to_uint_list<std::uint64_t>(v); };
  seeds.get = [](const ExperimentConfig& c) { return join(c.ctf.seeds); };
  k.push_back(seeds);

  augmentation_keys(k, "augment.labeled.", [](ExperimentConfig& c) -> synth::AugmentationSpec& {
    return c.ctf.train.labeled_aug;
  }, [](ExperimentConfig& c) -> CutoutSettings& { return c.labeled_cutout; });
  augmentation_keys(k, "augment.weak.", [](ExperimentConfig& c) -> synth::AugmentationSpec& {
    return c.ctf.train.weak_aug;
  }, [](ExperimentConfig& c) -> CutoutSettings& { return c.weak_cutout; });
  augmentation_keys(k, "augment.strong.", [](ExperimentConfig& c) -> synth::AugmentationSpec& {
    return c.ctf.train.strong_aug;
  }, [](ExperimentConfig& c) -> CutoutSettings& { return c.strong_cutout; });

  k.push_back(CFG_FIELD(std::size_t, "eval.interval", eval.interval));
  k.push_back(CFG_FIELD(double, "eval.score_threshold", eval.score_threshold));
  k.push_back(CFG_FIELD(double, "eval.gap_band", eval.gap_band));
  k.push_back(CFG_FIELD(std::size_t, "eval.last_n", eval.last_n));

  k.push_back(CFG_FIELD(std::size_t, "consistency.windows", consistency.windows));
  k.push_back(CFG_FIELD(std::size_t, "consistency.window_length", consistency.window_length));
  k.push_back(CFG_FIELD(double, "consistency.stability_threshold", consistency.stability_threshold));

  Key out;
  out.name = "run.output_dir";
  out.set = [](ExperimentConfig& c, const std::string& v) {
    const auto p = to_text(v);
    if (p.empty()) throw ConfigError("run.output_dir must not be empty");
    c.run.output_dir = p;
  };
  out.get = [](const ExperimentConfig& c) { return "\"" + c.run.output_dir.string() + "\""; };
  k.push_back(out);
  k.push_back(CFG_FIELD(std::uint64_t, "run.seed", run.seed));
  k.push_back(CFG_FIELD(std::size_t, "run.threads", run.threads));
  k.push_back(CFG_FIELD(std::size_t, "run.checkpoint_interval", run.checkpoint_interval));
  return k;
}

#undef CFG_FIELD

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = build_registry();
  return keys;
}

const Key* find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return &k;
  return nullptr;
}

ConfigError at_line(std::size_t line, const std::string& what) {
  return ConfigError("line " + std::to_string(line) + ": " + what);
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  const auto settings = [](const synth::AugmentationSpec& a) {
    return CutoutSettings{a.cutout.size(), a.cutout.empty() ? synth::CutoutSpec{} : a.cutout.front()};
  };
  labeled_cutout = settings(ctf.train.labeled_aug);
  weak_cutout = settings(ctf.train.weak_aug);
  strong_cutout = settings(ctf.train.strong_aug);
  sync();
}

void ExperimentConfig::sync() {
  ctf.train.labeled_aug.cutout.assign(labeled_cutout.passes, labeled_cutout.params);
  ctf.train.weak_aug.cutout.assign(weak_cutout.passes, weak_cutout.params);
  ctf.train.strong_aug.cutout.assign(strong_cutout.passes, strong_cutout.params);
  detector.image_size = dataset.image_size;
  detector.num_classes = dataset.num_classes;
  burnin.optim = optim;
  burnin.master_seed = run.seed;
  burnin.augmentation = ctf.train.labeled_aug;
  ctf.train.optim = optim;
  ctf.train.master_seed = run.seed;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  detector.validate();
  ctf.validate();
  for (const auto* c : {&labeled_cutout, &weak_cutout, &strong_cutout})
    if (c->passes > 16) throw ConfigError("at most 16 cutout passes");
  if (burnin.batch_size == 0) throw ConfigError("burnin.batch_size must be at least 1");
  if (ctf.train.labeled_batch > dataset.n_labeled)
    throw ConfigError("train.labeled_batch exceeds dataset.n_labeled");
  if (ctf.train.unlabeled_batch > dataset.n_unlabeled)
    throw ConfigError("train.unlabeled_batch exceeds dataset.n_unlabeled");
  if (!(eval.score_threshold > 0.0 && eval.score_threshold < 1.0))
    throw ConfigError("eval.score_threshold must be in (0, 1)");
  if (!(eval.gap_band >= 0.0)) throw ConfigError("eval.gap_band must be non-negative");
  if (eval.last_n == 0) throw ConfigError("eval.last_n must be at least 1");
  if (consistency.window_length == 0) throw ConfigError("consistency.window_length must be at least 1");
  if (!(consistency.stability_threshold > 0.0 && consistency.stability_threshold <= 1.0))
    throw ConfigError("consistency.stability_threshold must be in (0, 1]");
  if (run.threads == 0) throw ConfigError("run.threads must be at least 1");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw at_line(line_no, "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw at_line(line_no, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw at_line(line_no, "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw at_line(line_no, "missing key");
    const std::string full = section.empty() ? key : section + "." + key;
    const Key* k = find_key(full);
    if (!k) throw at_line(line_no, "unknown key '" + full + "'");
    if (!seen.insert(full).second) throw at_line(line_no, "key '" + full + "' set twice");
    try {
      k->set(cfg, value);
    } catch (const ConfigError& e) {
      throw at_line(line_no, full + ": " + e.what());
    } catch (const Error& e) {
      throw at_line(line_no, full + ": " + e.what());
    }
  }
  cfg.sync();
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : registry()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& k : registry()) {
    if (k.name == "run.output_dir" || k.name == "run.threads") continue;
    for (char c : k.name + "=" + k.get(cfg) + "\n") {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& assignments) {
  ExperimentConfig out = cfg;
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not of the form key=value");
    const std::string key = trim(std::string_view(a).substr(0, eq));
    const Key* k = find_key(key);
    if (!k) throw ConfigError("unknown key '" + key + "'");
    try {
      k->set(out, trim(std::string_view(a).substr(eq + 1)));
    } catch (const Error& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  out.sync();
  try {
    out.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  cfg = std::move(out);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.name);
  return out;
}

void apply_environment(ExperimentConfig& cfg) {
  if (const char* dir = std::getenv("CTFLAB_OUTPUT_DIR"); dir && *dir) cfg.run.output_dir = dir;
  if (const char* t = std::getenv("CTFLAB_THREADS"); t && *t) {
    try {
      const auto n = to_u64(t);
      if (n == 0) throw ConfigError("");
      cfg.run.threads = static_cast<std::size_t>(n);
    } catch (const ConfigError&) {
      throw ConfigError(std::string("CTFLAB_THREADS must be a positive integer, got '") + t + "'");
    }
  }
}

}  // namespace ctflab::cli
