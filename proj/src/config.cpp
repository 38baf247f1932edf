#include "modalpatch/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

namespace modalpatch::config {

namespace {

// ------------------------------------------------------------ value codecs

int parse_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int out;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

uint64_t parse_seed(const std::string& key, const std::string& v) {
  size_t pos = 0;
  unsigned long long out;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<double> parse_rates(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw ConfigError(key + ": expected comma-separated rates");
  return out;
}

std::string fmt(int v) { return std::to_string(v); }
std::string fmt(uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}
std::string fmt(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt(v[i]);
  }
  return out;
}
std::string fmt(const std::string& v) { return v; }

// ---------------------------------------------------------------- registry

struct Entry {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Entry field(T RunConfig::* member);

template <class Owner, class T>
Entry nested(Owner RunConfig::* owner, T Owner::* member) {
  Entry e;
  e.get = [=](const RunConfig& c) { return fmt(c.*owner.*member); };
  if constexpr (std::is_same_v<T, int>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*owner.*member = parse_int(k, v);
    };
  else if constexpr (std::is_same_v<T, double>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*owner.*member = parse_double(k, v);
    };
  else if constexpr (std::is_same_v<T, uint64_t>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*owner.*member = parse_seed(k, v);
    };
  else
    static_assert(sizeof(T) == 0, "unsupported field type");
  return e;
}

template <class T>
Entry direct(T RunConfig::* member) {
  Entry e;
  e.get = [=](const RunConfig& c) { return fmt(c.*member); };
  if constexpr (std::is_same_v<T, int>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*member = parse_int(k, v);
    };
  else if constexpr (std::is_same_v<T, double>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*member = parse_double(k, v);
    };
  else if constexpr (std::is_same_v<T, uint64_t>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*member = parse_seed(k, v);
    };
  else if constexpr (std::is_same_v<T, bool>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*member = parse_bool(k, v);
    };
  else if constexpr (std::is_same_v<T, std::vector<double>>)
    e.set = [=](RunConfig& c, const std::string& k, const std::string& v) {
      c.*member = parse_rates(k, v);
    };
  else if constexpr (std::is_same_v<T, std::string>)
    e.set = [=](RunConfig& c, const std::string&, const std::string& v) {
      c.*member = v;
    };
  else
    static_assert(sizeof(T) == 0, "unsupported field type");
  return e;
}

using Registry = std::vector<std::pair<std::string, Entry>>;

const Registry& registry() {
  static const Registry reg = {
      {"stream.h", nested(&RunConfig::stream, &streams::StreamConfig::h)},
      {"stream.w", nested(&RunConfig::stream, &streams::StreamConfig::w)},
      {"stream.d_img", nested(&RunConfig::stream, &streams::StreamConfig::d_img)},
      {"stream.d_pts", nested(&RunConfig::stream, &streams::StreamConfig::d_pts)},
      {"stream.objects", nested(&RunConfig::stream, &streams::StreamConfig::n_objects)},
      {"stream.frames", nested(&RunConfig::stream, &streams::StreamConfig::frames)},
      {"stream.motion_noise", nested(&RunConfig::stream, &streams::StreamConfig::motion_noise)},
      {"stream.speed_min", nested(&RunConfig::stream, &streams::StreamConfig::speed_min)},
      {"stream.speed_max", nested(&RunConfig::stream, &streams::StreamConfig::speed_max)},
      {"stream.appearance_min", nested(&RunConfig::stream, &streams::StreamConfig::appearance_min)},
      {"stream.appearance_max", nested(&RunConfig::stream, &streams::StreamConfig::appearance_max)},
      {"stream.range_img", nested(&RunConfig::stream, &streams::StreamConfig::range_img)},
      {"stream.noise_std", nested(&RunConfig::stream, &streams::StreamConfig::noise_std)},
      {"stream.blob_std", nested(&RunConfig::stream, &streams::StreamConfig::blob_std)},
      {"corpus.train_streams", direct(&RunConfig::train_streams)},
      {"corpus.val_streams", direct(&RunConfig::val_streams)},
      {"corpus.seed", direct(&RunConfig::corpus_seed)},
      {"membank.tau", direct(&RunConfig::tau)},
      {"hfp.k", direct(&RunConfig::k)},
      {"det.d_h", direct(&RunConfig::d_h)},
      {"train.lr", nested(&RunConfig::train, &trainer::TrainConfig::lr)},
      {"train.epochs", nested(&RunConfig::train, &trainer::TrainConfig::epochs)},
      {"train.weight_decay", nested(&RunConfig::train, &trainer::TrainConfig::weight_decay)},
      {"train.batch_size", nested(&RunConfig::train, &trainer::TrainConfig::batch_size)},
      {"train.samples_per_stream", nested(&RunConfig::train, &trainer::TrainConfig::samples_per_stream)},
      {"train.clip", nested(&RunConfig::train, &trainer::TrainConfig::clip_norm)},
      {"train.seed", nested(&RunConfig::train, &trainer::TrainConfig::seed)},
      {"eval.seed", direct(&RunConfig::eval_seed)},
      {"eval.heatmap_frames", direct(&RunConfig::heatmap_frames)},
      {"eval.timing", direct(&RunConfig::timing)},
      {"eval.uncertainty_scaling", direct(&RunConfig::uncertainty_scaling)},
      {"eval.rates", direct(&RunConfig::rates)},
      {"eval.rate", direct(&RunConfig::rate)},
      {"eval.policy", direct(&RunConfig::policy)},
  };
  return reg;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void check_positive(int v, const char* key) {
  if (v < 1) throw ConfigError(std::string(key) + ": must be >= 1");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, e] : registry()) keys.push_back(k);
  return keys;
}

void apply(RunConfig& cfg, const std::string& key, const std::string& value) {
  // historical spelling kept as an alias
  const std::string canon = key == "hfp.K" ? "hfp.k" : key;
  for (const auto& [k, e] : registry())
    if (k == canon) {
      e.set(cfg, canon, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": expected 'key = value'");
      apply(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
  for (const std::string& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + ov + "': expected key=value");
    apply(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
  }
  validate(cfg);
  return cfg;
}

void validate(const RunConfig& cfg) {
  check_positive(cfg.stream.h, "stream.h");
  check_positive(cfg.stream.w, "stream.w");
  check_positive(cfg.stream.d_img, "stream.d_img");
  check_positive(cfg.stream.d_pts, "stream.d_pts");
  check_positive(cfg.stream.n_objects, "stream.objects");
  if (cfg.stream.frames < 2) throw ConfigError("stream.frames: must be >= 2");
  if (cfg.stream.motion_noise < 0.0)
    throw ConfigError("stream.motion_noise: must be >= 0");
  if (cfg.stream.speed_min < 0.0 || cfg.stream.speed_max < cfg.stream.speed_min)
    throw ConfigError("stream.speed_min/speed_max: need 0 <= min <= max");
  if (cfg.stream.speed_max > 1.5)
    throw ConfigError("stream.speed_max: must be <= 1.5 (one shift per frame)");
  if (cfg.stream.noise_std < 0.0) throw ConfigError("stream.noise_std: must be >= 0");
  if (cfg.stream.blob_std <= 0.0) throw ConfigError("stream.blob_std: must be > 0");
  check_positive(cfg.train_streams, "corpus.train_streams");
  check_positive(cfg.val_streams, "corpus.val_streams");
  check_positive(cfg.tau, "membank.tau");
  check_positive(cfg.k, "hfp.k");
  check_positive(cfg.d_h, "det.d_h");
  if (cfg.train.lr <= 0.0) throw ConfigError("train.lr: must be > 0");
  check_positive(cfg.train.epochs, "train.epochs");
  if (cfg.train.weight_decay < 0.0)
    throw ConfigError("train.weight_decay: must be >= 0");
  check_positive(cfg.train.batch_size, "train.batch_size");
  check_positive(cfg.train.samples_per_stream, "train.samples_per_stream");
  if (cfg.train.clip_norm <= 0.0) throw ConfigError("train.clip: must be > 0");
  if (cfg.heatmap_frames < 0) throw ConfigError("eval.heatmap_frames: must be >= 0");
  for (double r : cfg.rates)
    if (r < 0.0 || r > 1.0) throw ConfigError("eval.rates: rates must lie in [0,1]");
  if (cfg.rates.empty()) throw ConfigError("eval.rates: must not be empty");
  if (cfg.rate < 0.0 || cfg.rate > 1.0)
    throw ConfigError("eval.rate: must lie in [0,1]");
  try {
    eval::policy_from_name(cfg.policy);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("eval.policy: ") + e.what());
  }
}

hfp::HfpConfig RunConfig::hfp_cfg(streams::Modality m) const {
  hfp::HfpConfig c;
  c.d = stream.channels(m);
  c.h = stream.h;
  c.w = stream.w;
  c.tau = tau;
  c.k = k;
  return c;
}

ucf::UcfConfig RunConfig::ucf_cfg() const {
  if (stream.d_img != stream.d_pts)
    throw ConfigError("stream.d_img/d_pts: fusion requires equal feature widths");
  if (stream.d_img % 2 != 0)
    throw ConfigError("stream.d_img: variance head halves the width, need even");
  ucf::UcfConfig c;
  c.d = stream.d_img;
  c.h = stream.h;
  c.w = stream.w;
  c.k = k;
  return c;
}

detector::DetectorConfig RunConfig::det_cfg() const {
  detector::DetectorConfig c;
  c.d_img = stream.d_img;
  c.d_pts = stream.d_pts;
  c.d_h = d_h;
  c.h = stream.h;
  c.w = stream.w;
  return c;
}

eval::EvalSetup RunConfig::eval_setup() const {
  eval::EvalSetup s;
  s.stream = stream;
  s.hfp_img = hfp_cfg(streams::Modality::Img);
  s.hfp_pts = hfp_cfg(streams::Modality::Pts);
  s.ucf = ucf_cfg();
  s.det = det_cfg();
  s.uncertainty_scaling = uncertainty_scaling;
  return s;
}

eval::SweepOptions RunConfig::sweep_options() const {
  eval::SweepOptions o;
  o.rates = rates;
  std::sort(o.rates.begin(), o.rates.end());
  o.schedule_seed = eval_seed;
  o.heatmap_frames = heatmap_frames;
  o.timing = timing;
  return o;
}

std::map<std::string, std::string> config_items(const RunConfig& cfg) {
  std::map<std::string, std::string> items;
  for (const auto& [k, e] : registry()) items[k] = e.get(cfg);
  return items;
}

}  // namespace modalpatch::config
