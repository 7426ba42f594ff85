#include "vg/config.hpp"

#include <cstdlib>
#include <fstream>

#include <json.hpp>

#include "vg/rng.hpp"

namespace vg::config {

const std::map<std::string, KeySpec>& schema() {
  static const std::map<std::string, KeySpec> s = {
      {"seed", {KeyType::Int, "1234", "master seed for generation and training"}},
      {"corpus.samples", {KeyType::Int, "300", "number of samples to generate"}},
      {"corpus.split_train", {KeyType::Double, "0.8", "training fraction"}},
      {"corpus.split_val", {KeyType::Double, "0.1", "validation fraction"}},
      {"corpus.split_test", {KeyType::Double, "0.1", "test fraction"}},
      {"phantom.grid_d", {KeyType::Int, "32", "volume depth"}},
      {"phantom.grid_h", {KeyType::Int, "32", "volume height"}},
      {"phantom.grid_w", {KeyType::Int, "32", "volume width"}},
      {"phantom.organs", {KeyType::Int, "8", "organ count (2..32)"}},
      {"phantom.anomalies_min", {KeyType::Int, "1", "min anomalies per sample"}},
      {"phantom.anomalies_max", {KeyType::Int, "3", "max anomalies per sample"}},
      {"phantom.noise_amp", {KeyType::Double, "0.03", "smooth noise amplitude"}},
      {"phantom.radius_scale", {KeyType::Double, "1.0", "anomaly radius multiplier"}},
      {"report.enumeration_prob", {KeyType::Double, "0.25", "two anomalies share a sentence"}},
      {"report.distractor_prob", {KeyType::Double, "0.6", "distractor sentence probability"}},
      {"grounder.d", {KeyType::Int, "32", "embedding width"}},
      {"grounder.dn", {KeyType::Int, "32", "attention width"}},
      {"grounder.stages", {KeyType::String, "3x6,3x12,3x32", "conv stages as countxchannels,..."}},
      {"grounder.max_text_len", {KeyType::Int, "4096", "positional table size"}},
      {"grounder.use_anatomy", {KeyType::Bool, "true", "feed the organ label channel"}},
      {"grounder.use_afa", {KeyType::Bool, "true", "anomaly-wise feature aggregation"}},
      {"train.batch", {KeyType::Int, "4", "batch size"}},
      {"train.base_lr", {KeyType::Double, "1e-4", "peak learning rate"}},
      {"train.initial_lr", {KeyType::Double, "1e-5", "learning rate at step 0"}},
      {"train.warmup", {KeyType::Int, "500", "linear warmup steps"}},
      {"train.decay_every", {KeyType::Int, "3000", "steps between x0.1 decays"}},
      {"train.decay_factor", {KeyType::Double, "0.1", "decay multiplier"}},
      {"train.max_steps", {KeyType::Int, "10000", "total optimizer steps"}},
      {"train.val_every", {KeyType::Int, "500", "validation interval"}},
      {"train.threads", {KeyType::Int, "2", "worker threads"}},
      {"train.dice_eps", {KeyType::Double, "1.0", "dice loss epsilon"}},
      {"train.renorm_momentum", {KeyType::Double, "0.99", "running statistics momentum"}},
      {"train.aug.image_crop", {KeyType::Bool, "true", "random crop"}},
      {"train.aug.image_rotate", {KeyType::Bool, "true", "right-angle z rotation"}},
      {"train.aug.image_scale", {KeyType::Bool, "true", "random scaling"}},
      {"train.aug.image_sharpen", {KeyType::Bool, "true", "sharpness change"}},
      {"train.aug.image_smooth", {KeyType::Bool, "true", "smoothing"}},
      {"train.aug.image_noise", {KeyType::Bool, "true", "gaussian noise"}},
      {"train.aug.text_delete", {KeyType::Bool, "true", "random character deletion"}},
      {"train.aug.text_insert", {KeyType::Bool, "true", "random character insertion"}},
      {"train.aug.text_crop", {KeyType::Bool, "true", "random sentence crop"}},
      {"train.aug.text_rate", {KeyType::Double, "0.1", "text perturbation rate (max 0.2)"}},
  };
  return s;
}

namespace {

std::string normalize(const std::string& key, const std::string& raw) {
  const auto it = schema().find(key);
  check_config(it != schema().end(), "unknown config key: " + key);
  try {
    switch (it->second.type) {
      case KeyType::Int:
        return std::to_string(std::stoll(raw));
      case KeyType::Double: {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", std::stod(raw));
        return buf;
      }
      case KeyType::Bool:
        if (raw == "true" || raw == "1") return "true";
        if (raw == "false" || raw == "0") return "false";
        throw ConfigError("not a bool");
      case KeyType::String:
        return raw;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": cannot parse value '" + raw + "'");
  }
  return raw;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  for (const auto& [key, spec] : schema()) cfg.values_[key] = normalize(key, spec.default_value);
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  values_[key] = normalize(key, value);
}

RunConfig RunConfig::load(const std::string& file_path, const std::vector<std::string>& overrides) {
  RunConfig cfg = defaults();
  if (!file_path.empty()) {
    std::ifstream is(file_path);
    check_config(is.good(), "cannot open config file: " + file_path);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const std::exception& e) {
      throw ConfigError("config file " + file_path + ": " + e.what());
    }
    check_config(j.is_object(), "config file must hold a flat JSON object");
    for (const auto& [key, value] : j.items()) {
      std::string raw;
      if (value.is_string()) raw = value.get<std::string>();
      else if (value.is_boolean()) raw = value.get<bool>() ? "true" : "false";
      else raw = value.dump();
      cfg.set(key, raw);
    }
  }
  for (const auto& [key, spec] : schema()) {
    if (const char* env = std::getenv(env_var_name(key).c_str())) cfg.set(key, env);
  }
  for (const auto& kv : overrides) {
    const size_t eq = kv.find('=');
    check_config(eq != std::string::npos, "override must be key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::string env_var_name(const std::string& key) {
  std::string out = "VG_";
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

int64_t RunConfig::geti(const std::string& key) const {
  const auto it = values_.find(key);
  check_config(it != values_.end(), "unknown config key: " + key);
  return std::stoll(it->second);
}
double RunConfig::getd(const std::string& key) const {
  const auto it = values_.find(key);
  check_config(it != values_.end(), "unknown config key: " + key);
  return std::stod(it->second);
}
bool RunConfig::getb(const std::string& key) const {
  const auto it = values_.find(key);
  check_config(it != values_.end(), "unknown config key: " + key);
  return it->second == "true";
}
std::string RunConfig::gets(const std::string& key) const {
  const auto it = values_.find(key);
  check_config(it != values_.end(), "unknown config key: " + key);
  return it->second;
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + "=" + value + "\n";
  return out;
}

uint64_t RunConfig::fingerprint() const {
  uint64_t h = 0x52434647;
  for (char c : canonical()) h = hash_combine(h, static_cast<uint64_t>(c));
  return h;
}

uint64_t RunConfig::corpus_fingerprint() const {
  uint64_t h = 0x434f5250;
  for (const auto& [key, value] : values_) {
    const bool relevant = key == "seed" || key.rfind("corpus.", 0) == 0 ||
                          key.rfind("phantom.", 0) == 0 || key.rfind("report.", 0) == 0;
    if (!relevant) continue;
    for (char c : key) h = hash_combine(h, static_cast<uint64_t>(c));
    for (char c : value) h = hash_combine(h, static_cast<uint64_t>(c));
  }
  return h;
}

void RunConfig::write(const std::string& path) const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, value] : values_) {
    const KeySpec& spec = schema().at(key);
    switch (spec.type) {
      case KeyType::Int: j[key] = std::stoll(value); break;
      case KeyType::Double: j[key] = std::stod(value); break;
      case KeyType::Bool: j[key] = value == "true"; break;
      case KeyType::String: j[key] = value; break;
    }
  }
  std::ofstream os(path);
  check_data(os.good(), "cannot write config: " + path);
  os << j.dump(2) << "\n";
}

phantom::PhantomSpec RunConfig::phantom_spec() const {
  phantom::PhantomSpec spec;
  spec.grid_d = geti("phantom.grid_d");
  spec.grid_h = geti("phantom.grid_h");
  spec.grid_w = geti("phantom.grid_w");
  spec.organ_count = static_cast<int>(geti("phantom.organs"));
  spec.anomalies_min = static_cast<int>(geti("phantom.anomalies_min"));
  spec.anomalies_max = static_cast<int>(geti("phantom.anomalies_max"));
  spec.noise_amp = getd("phantom.noise_amp");
  spec.radius_scale = getd("phantom.radius_scale");
  spec.seed = static_cast<uint64_t>(geti("seed"));
  return spec;
}

reportlang::GrammarConfig RunConfig::grammar_config() const {
  reportlang::GrammarConfig g;
  g.enumeration_prob = getd("report.enumeration_prob");
  g.distractor_prob = getd("report.distractor_prob");
  return g;
}

grounder::GrounderConfig RunConfig::grounder_config() const {
  grounder::GrounderConfig g;
  g.d = static_cast<int>(geti("grounder.d"));
  g.dn = static_cast<int>(geti("grounder.dn"));
  g.max_text_len = static_cast<int>(geti("grounder.max_text_len"));
  g.use_anatomy_channel = getb("grounder.use_anatomy");
  g.use_afa = getb("grounder.use_afa");
  g.organ_vocab = static_cast<int>(geti("phantom.organs")) + 1;  // + "unspecified"
  g.conv_stages.clear();
  const std::string stages = gets("grounder.stages");
  size_t pos = 0;
  while (pos < stages.size()) {
    size_t comma = stages.find(',', pos);
    if (comma == std::string::npos) comma = stages.size();
    const std::string part = stages.substr(pos, comma - pos);
    const size_t x = part.find('x');
    check_config(x != std::string::npos, "grounder.stages: expected countxchannels, got " + part);
    try {
      g.conv_stages.emplace_back(std::stoi(part.substr(0, x)), std::stoi(part.substr(x + 1)));
    } catch (const std::exception&) {
      throw ConfigError("grounder.stages: cannot parse " + part);
    }
    pos = comma + 1;
  }
  g.validate();
  return g;
}

trainer::TrainConfig RunConfig::train_config() const {
  trainer::TrainConfig t;
  t.batch_size = static_cast<int>(geti("train.batch"));
  t.base_lr = getd("train.base_lr");
  t.initial_lr = getd("train.initial_lr");
  t.warmup_steps = geti("train.warmup");
  t.decay_every = geti("train.decay_every");
  t.decay_factor = getd("train.decay_factor");
  t.max_steps = geti("train.max_steps");
  t.val_every = geti("train.val_every");
  t.seed = static_cast<uint64_t>(geti("seed"));
  t.threads = static_cast<int>(geti("train.threads"));
  t.dice_eps = getd("train.dice_eps");
  t.renorm_momentum = getd("train.renorm_momentum");
  t.augment.image_crop = getb("train.aug.image_crop");
  t.augment.image_rotate = getb("train.aug.image_rotate");
  t.augment.image_scale = getb("train.aug.image_scale");
  t.augment.image_sharpen = getb("train.aug.image_sharpen");
  t.augment.image_smooth = getb("train.aug.image_smooth");
  t.augment.image_noise = getb("train.aug.image_noise");
  t.augment.text_delete = getb("train.aug.text_delete");
  t.augment.text_insert = getb("train.aug.text_insert");
  t.augment.text_crop = getb("train.aug.text_crop");
  t.augment.text_rate = getd("train.aug.text_rate");
  t.validate();
  return t;
}

}  // namespace vg::config
