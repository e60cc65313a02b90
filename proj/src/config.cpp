#include "spnas/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "spnas/error.hpp"

namespace spnas {

namespace {

using nlohmann::json;

// Reads known keys of one JSON object and rejects everything else.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: section '" + name_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: " + name_ + "." + key + " has the wrong type");
    }
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("config: unknown key '" + name_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::single_sigmoid: return "single_sigmoid";
    case Variant::single_ste: return "single_ste";
    case Variant::single_softmax: return "single_softmax";
    case Variant::multi_path_softmax: return "multi_path_softmax";
    case Variant::random: return "random";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::single_sigmoid, Variant::single_ste, Variant::single_softmax, Variant::multi_path_softmax,
                    Variant::random})
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "'");
}

bool is_softmax_variant(Variant v) { return v == Variant::single_softmax || v == Variant::multi_path_softmax; }

void TrainConfig::validate() const {
  require(epochs >= 0, "train: epochs must be >= 0");
  require(batch >= 2, "train: batch must be >= 2");
  require(lr > 0.0 && std::isfinite(lr), "train: lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "train: momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "train: weight_decay must be >= 0");
  require(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "train: warmup_fraction must be in [0, 1]");
  require(max_steps >= -1, "train: max_steps must be >= -1");
}

void SearchConfig::validate() const {
  require(lambda >= 0.0 && std::isfinite(lambda), "search: lambda must be finite and >= 0");
  require(epochs >= 1, "search: budget must be at least 1 epoch");
  require(steps >= -1, "search: steps must be >= -1");
  require(batch >= 2, "search: batch must be >= 2");
  require(lr > 0.0 && std::isfinite(lr), "search: lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "search: momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "search: weight_decay must be >= 0");
  require(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "search: warmup_fraction must be in [0, 1]");
  require(threshold_lr_scale >= 0.0, "search: threshold_lr_scale must be >= 0");
  require(beta > 0.0, "search: beta must be > 0");
  require(arch_lr > 0.0, "search: arch_lr must be > 0");
  require(arch_valid_fraction > 0.0 && arch_valid_fraction < 1.0, "search: arch_valid_fraction must be in (0, 1)");
  require(gumbel_temperature >= 0.0, "search: gumbel_temperature must be >= 0");
  require(proxy_epochs >= 0, "search: proxy_epochs must be >= 0");
  dropout.validate();
}

void ExperimentConfig::validate() const {
  space.validate();
  require(data.source == "synthetic" || data.source == "idx", "data: source must be 'synthetic' or 'idx'");
  if (data.source == "synthetic") {
    require(data.classes == space.classes, "data: classes must match space.classes");
    require(data.image_size == space.image_size, "data: image_size must match space.image_size");
    require(space.in_channels == 1, "data: synthetic images have one channel");
  }
  require(lut.noise >= 0.0 && lut.noise <= 0.2, "lut: noise must be in [0, 0.2]");
  search.validate();
  train.validate();
}

json to_json(const SearchSpaceConfig& c) {
  json layers = json::array();
  for (const auto& l : c.layers) layers.push_back({{"out_channels", l.out_channels}, {"stride", l.stride}});
  return {{"image_size", c.image_size},       {"in_channels", c.in_channels},   {"classes", c.classes},
          {"stem_channels", c.stem_channels}, {"stem_stride", c.stem_stride},   {"head_channels", c.head_channels},
          {"layers", layers}};
}

SearchSpaceConfig space_from_json(const json& j) {
  SearchSpaceConfig c = SearchSpaceConfig::desk_default();
  Section s(j, "space");
  s.get("image_size", c.image_size);
  s.get("in_channels", c.in_channels);
  s.get("classes", c.classes);
  s.get("stem_channels", c.stem_channels);
  s.get("stem_stride", c.stem_stride);
  s.get("head_channels", c.head_channels);
  if (const json* layers = s.sub("layers")) {
    require(layers->is_array(), "config: space.layers must be an array");
    c.layers.clear();
    for (const json& l : *layers) {
      LayerConfig lc;
      Section ls(l, "space.layers[]");
      ls.get("out_channels", lc.out_channels);
      ls.get("stride", lc.stride);
      ls.finish();
      c.layers.push_back(lc);
    }
  }
  s.finish();
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& s = c.search;
  const auto& t = c.train;
  return {
      {"space", to_json(c.space)},
      {"data",
       {{"source", d.source},
        {"classes", d.classes},
        {"n", d.n},
        {"image_size", d.image_size},
        {"noise", d.noise},
        {"images", d.images},
        {"labels", d.labels}}},
      {"lut",
       {{"path", c.lut.path},
        {"noise", c.lut.noise},
        {"ms_per_mac", c.lut.ms_per_mac},
        {"reject_non_monotone", c.lut.reject_non_monotone}}},
      {"search",
       {{"variant", variant_name(s.variant)},
        {"lambda", s.lambda},
        {"epochs", s.epochs},
        {"steps", s.steps},
        {"batch", s.batch},
        {"lr", s.lr},
        {"momentum", s.momentum},
        {"weight_decay", s.weight_decay},
        {"warmup_fraction", s.warmup_fraction},
        {"threshold_lr_scale", s.threshold_lr_scale},
        {"beta", s.beta},
        {"dropout_p0", s.dropout.p0},
        {"dropout_warmup_fraction", s.dropout.warmup_fraction},
        {"delay_runtime_term", s.delay_runtime_term},
        {"arch_lr", s.arch_lr},
        {"arch_valid_fraction", s.arch_valid_fraction},
        {"gumbel_temperature", s.gumbel_temperature},
        {"runtime_form", s.runtime_form == RuntimeForm::exact ? "exact" : "ratio"},
        {"proxy_epochs", s.proxy_epochs},
        {"seed", s.seed}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch", t.batch},
        {"lr", t.lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"warmup_fraction", t.warmup_fraction},
        {"max_steps", t.max_steps}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section top(j, "config");
  if (const json* s = top.sub("space")) c.space = space_from_json(*s);
  // Synthetic data follows the space unless overridden.
  c.data.classes = c.space.classes;
  c.data.image_size = c.space.image_size;
  if (const json* dj = top.sub("data")) {
    Section s(*dj, "data");
    s.get("source", c.data.source);
    s.get("classes", c.data.classes);
    s.get("n", c.data.n);
    s.get("image_size", c.data.image_size);
    s.get("noise", c.data.noise);
    s.get("images", c.data.images);
    s.get("labels", c.data.labels);
    s.finish();
  }
  if (const json* lj = top.sub("lut")) {
    Section s(*lj, "lut");
    s.get("path", c.lut.path);
    s.get("noise", c.lut.noise);
    s.get("ms_per_mac", c.lut.ms_per_mac);
    s.get("reject_non_monotone", c.lut.reject_non_monotone);
    s.finish();
  }
  if (const json* sj = top.sub("search")) {
    auto& o = c.search;
    Section s(*sj, "search");
    std::string variant = variant_name(o.variant), form = "exact";
    s.get("variant", variant);
    o.variant = parse_variant(variant);
    s.get("lambda", o.lambda);
    s.get("epochs", o.epochs);
    s.get("steps", o.steps);
    s.get("batch", o.batch);
    s.get("lr", o.lr);
    s.get("momentum", o.momentum);
    s.get("weight_decay", o.weight_decay);
    s.get("warmup_fraction", o.warmup_fraction);
    s.get("threshold_lr_scale", o.threshold_lr_scale);
    s.get("beta", o.beta);
    s.get("dropout_p0", o.dropout.p0);
    s.get("dropout_warmup_fraction", o.dropout.warmup_fraction);
    s.get("delay_runtime_term", o.delay_runtime_term);
    s.get("arch_lr", o.arch_lr);
    s.get("arch_valid_fraction", o.arch_valid_fraction);
    s.get("gumbel_temperature", o.gumbel_temperature);
    s.get("runtime_form", form);
    require(form == "exact" || form == "ratio", "config: search.runtime_form must be 'exact' or 'ratio'");
    o.runtime_form = form == "exact" ? RuntimeForm::exact : RuntimeForm::ratio;
    s.get("proxy_epochs", o.proxy_epochs);
    s.get("seed", o.seed);
    s.finish();
  }
  if (const json* tj = top.sub("train")) {
    auto& o = c.train;
    Section s(*tj, "train");
    s.get("epochs", o.epochs);
    s.get("batch", o.batch);
    s.get("lr", o.lr);
    s.get("momentum", o.momentum);
    s.get("weight_decay", o.weight_decay);
    s.get("warmup_fraction", o.warmup_fraction);
    s.get("max_steps", o.max_steps);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

Dataset make_dataset(const DataConfig& d, std::uint64_t seed) {
  if (d.source == "idx") {
    require(!d.images.empty() && !d.labels.empty(), "data: idx source needs 'images' and 'labels' paths");
    return load_idx(d.images, d.labels, seed);
  }
  return synth_classification(d.classes, d.n, d.image_size, seed, d.noise);
}

LatencyTable make_lut(const ExperimentConfig& c, std::uint64_t seed, LutIssues* issues) {
  if (c.lut.path.empty()) return lutgen(c.space, seed, c.lut.noise, c.lut.ms_per_mac);
  LatencyTable t = ingest_lut(c.lut.path, {c.lut.reject_non_monotone}, issues);
  t.require_layers(c.space.num_layers());
  return t;
}

json to_json(const MBConvType& t) {
  if (t.skip) return {{"skip", true}};
  return {{"k", t.kernel}, {"e", t.expansion}, {"se", t.se}};
}

MBConvType type_from_json(const json& j) {
  if (j.is_string()) {
    for (const MBConvType& t : MBConvType::all())
      if (t.name() == j.get<std::string>()) return t;
    throw ConfigError("unknown MBConv type '" + j.get<std::string>() + "'");
  }
  Section s(j, "architecture[]");
  bool skip = false;
  s.get("skip", skip);
  MBConvType t;
  if (skip) {
    t = MBConvType::skip_op();
  } else {
    s.get("k", t.kernel);
    s.get("e", t.expansion);
    s.get("se", t.se);
  }
  s.finish();
  require(t.valid(), "invalid MBConv type in architecture");
  return t;
}

json architecture_to_json(const Architecture& arch) {
  json layers = json::array();
  for (const auto& t : arch) layers.push_back(to_json(t));
  return {{"layers", layers}};
}

Architecture architecture_from_json(const json& j) {
  const json* layers = &j;
  if (j.is_object()) {
    require(j.contains("layers"), "architecture JSON needs a 'layers' array");
    layers = &j.at("layers");
  }
  require(layers->is_array(), "architecture JSON needs a 'layers' array");
  Architecture arch;
  for (const json& t : *layers) arch.push_back(type_from_json(t));
  return arch;
}

std::string architecture_str(const Architecture& arch) {
  std::string s;
  for (std::size_t i = 0; i < arch.size(); ++i) s += (i ? " | " : "") + arch[i].name();
  return s;
}

}  // namespace spnas
