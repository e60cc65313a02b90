#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "spnas/datasets.hpp"
#include "spnas/latency.hpp"
#include "spnas/searchspace.hpp"

namespace spnas {

enum class Variant { single_sigmoid, single_ste, single_softmax, multi_path_softmax, random };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);
bool is_softmax_variant(Variant v);

struct DataConfig {
  std::string source = "synthetic";  // or "idx"
  int classes = 4;
  int n = 1000;
  int image_size = 28;
  double noise = 0.5;
  std::string images, labels;  // IDX paths
};

struct LutConfig {
  std::string path;  // empty: synthesize
  double noise = 0.1;
  double ms_per_mac = kDefaultMsPerMac;
  bool reject_non_monotone = false;
};

struct TrainConfig {
  int epochs = 3;
  int batch = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  double warmup_fraction = 0.05;
  // Caps the number of optimizer steps; -1 means epochs * batches per epoch.
  long max_steps = -1;

  void validate() const;
};

struct SearchConfig {
  Variant variant = Variant::single_sigmoid;
  double lambda = 0.0;
  int epochs = 5;
  long steps = -1;  // -1: epochs * batches per epoch
  int batch = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  double warmup_fraction = 0.05;
  double threshold_lr_scale = 1.0;
  double beta = 5.0;
  DropoutSchedule dropout;
  bool delay_runtime_term = false;
  // Architecture parameters of the softmax variants.
  double arch_lr = 0.05;
  double arch_valid_fraction = 0.2;
  double gumbel_temperature = 0.0;  // 0: no Gumbel noise
  RuntimeForm runtime_form = RuntimeForm::exact;
  int proxy_epochs = 3;
  std::uint64_t seed = 0;
  std::string checkpoint;

  void validate() const;
};

struct ExperimentConfig {
  SearchSpaceConfig space = SearchSpaceConfig::desk_default();
  DataConfig data;
  LutConfig lut;
  SearchConfig search;
  TrainConfig train;

  void validate() const;
};

nlohmann::json to_json(const SearchSpaceConfig& c);
nlohmann::json to_json(const ExperimentConfig& c);
SearchSpaceConfig space_from_json(const nlohmann::json& j);
// Unknown keys in any section are a ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

nlohmann::json read_json_file(const std::string& path);
void write_json_file(const nlohmann::json& j, const std::string& path);

Dataset make_dataset(const DataConfig& d, std::uint64_t seed);
// Synthesized LUTs are keyed by `seed`; ingested ones must cover the space.
LatencyTable make_lut(const ExperimentConfig& c, std::uint64_t seed, LutIssues* issues = nullptr);

nlohmann::json to_json(const MBConvType& t);
MBConvType type_from_json(const nlohmann::json& j);
nlohmann::json architecture_to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);
std::string architecture_str(const Architecture& arch);

}  // namespace spnas
