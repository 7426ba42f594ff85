#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vg/grounder.hpp"
#include "vg/phantom.hpp"
#include "vg/reportlang.hpp"
#include "vg/trainer.hpp"

// Flat, typed key-value run configuration. Sources, in override order:
// built-in defaults < config file (flat JSON object) < VG_* environment
// variables < command-line --set key=value pairs. Unknown keys are
// rejected everywhere.

namespace vg::config {

enum class KeyType { Int, Double, Bool, String };

struct KeySpec {
  KeyType type;
  std::string default_value;
  const char* help;
};

const std::map<std::string, KeySpec>& schema();

class RunConfig {
 public:
  static RunConfig defaults();
  static RunConfig load(const std::string& file_path_or_empty,
                        const std::vector<std::string>& overrides);

  int64_t geti(const std::string& key) const;
  double getd(const std::string& key) const;
  bool getb(const std::string& key) const;
  std::string gets(const std::string& key) const;
  void set(const std::string& key, const std::string& value);  // typed parse

  // sorted "key=value" lines; the fingerprint is the hash of this text
  std::string canonical() const;
  uint64_t fingerprint() const;
  // fingerprint over the corpus-generation subset only (seed, corpus.*,
  // phantom.*, report.*), shared by all ablation arms
  uint64_t corpus_fingerprint() const;

  void write(const std::string& path) const;

  phantom::PhantomSpec phantom_spec() const;
  reportlang::GrammarConfig grammar_config() const;
  grounder::GrounderConfig grounder_config() const;
  trainer::TrainConfig train_config() const;

 private:
  std::map<std::string, std::string> values_;  // canonical string form
};

// "VG_TRAIN_BATCH=8" style environment overrides for any schema key.
std::string env_var_name(const std::string& key);

}  // namespace vg::config
