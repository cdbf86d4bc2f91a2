// SPDX-License-Identifier: Apache-2.0

#include "absvit/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace absvit::cfg {

using nlohmann::json;

namespace {

// Reads a JSON object field by field; whatever is left unclaimed is an error.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    claimed_.emplace(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) {
            throw ConfigError("");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type");
    }
  }

  void enum_field(const char* key, const std::function<void(const std::string&)>& parse) {
    std::string s;
    get(key, s);
    if (!j_.contains(key)) return;
    try {
      parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  Section sub(const char* key) {
    claimed_.emplace(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!claimed_.count(k)) throw ConfigError("unknown config key " + (path_.empty() ? k : path_ + "." + k));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> claimed_;
};

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    loss.validate();
    optim.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  check(model.classes == data::kNumClasses, "model.classes must be " + std::to_string(data::kNumClasses) +
                                                " for the synthetic shape data");
  check(train.epochs >= 0, "train.epochs must be >= 0");
  check(train.batch_size >= 1, "train.batch_size must be >= 1");
  check(train.train_size >= train.batch_size, "train.train_size must be at least one batch");
  check(train.test_size >= 1, "train.test_size must be >= 1");
  check(train.warmup_epochs >= 0, "train.warmup_epochs must be >= 0");
  check(!train.resample || std::int64_t(train.epochs) * train.train_size < 1'000'000,
        "train.epochs * train.train_size must stay below 1000000 when resampling");
  check(loss.prior != model::PriorKind::clip || train.batch_size >= 2, "the clip prior needs batch_size >= 2");
  check(data.noise_sigma >= 0, "data.noise_sigma must be >= 0");
  check(data.min_radius > 0 && data.max_radius >= data.min_radius, "data radii must satisfy 0 < min <= max");
  check(data.height == model.image_size && data.width == model.image_size,
        "data size must equal model.image_size");
  check(!out_dir.empty(), "out_dir must not be empty");
}

std::string RunConfig::to_json() const {
  json j;
  j["schema"] = kConfigSchema;
  j["version"] = kConfigVersion;
  j["model"] = {{"image_size", model.image_size},
                {"patch", model.patch},
                {"layers", model.layers},
                {"dim", model.dim},
                {"heads", model.heads},
                {"mlp_ratio", model.mlp_ratio},
                {"classes", model.classes},
                {"alpha", model.alpha},
                {"td_mode", attn::td_mode_name(model.td_mode)},
                {"td_injection", model.td_injection == attn::TdInjection::pre_projection ? "pre_projection"
                                                                                          : "post_projection"}};
  j["loss"] = {{"w_sup", loss.w_sup},
               {"w_var", loss.w_var},
               {"recon_metric", model::recon_metric_name(loss.recon_metric)},
               {"prior", model::prior_kind_name(loss.prior)}};
  j["optim"] = {{"lr", optim.lr},
                {"beta1", optim.beta1},
                {"beta2", optim.beta2},
                {"eps", optim.eps},
                {"weight_decay", optim.weight_decay}};
  j["train"] = {{"epochs", train.epochs},         {"batch_size", train.batch_size},
                {"train_size", train.train_size}, {"test_size", train.test_size},
                {"warmup_epochs", train.warmup_epochs}, {"seed", train.seed},
                {"resample", train.resample}};
  j["data"] = {{"noise_sigma", data.noise_sigma}, {"min_radius", data.min_radius}, {"max_radius", data.max_radius}};
  j["out_dir"] = out_dir;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  std::string schema = kConfigSchema;
  int version = kConfigVersion;
  root.get("schema", schema);
  root.get("version", version);
  check(schema == kConfigSchema, "config schema '" + schema + "' is not " + kConfigSchema);
  check(version == kConfigVersion,
        "config version " + std::to_string(version) + " is not supported (expected " + std::to_string(kConfigVersion) + ")");

  Section m = root.sub("model");
  m.get("image_size", c.model.image_size);
  m.get("patch", c.model.patch);
  m.get("layers", c.model.layers);
  m.get("dim", c.model.dim);
  m.get("heads", c.model.heads);
  m.get("mlp_ratio", c.model.mlp_ratio);
  m.get("classes", c.model.classes);
  m.get("alpha", c.model.alpha);
  m.enum_field("td_mode", [&](const std::string& s) { c.model.td_mode = attn::parse_td_mode(s); });
  m.enum_field("td_injection", [&](const std::string& s) {
    if (s == "pre_projection") {
      c.model.td_injection = attn::TdInjection::pre_projection;
    } else if (s == "post_projection") {
      c.model.td_injection = attn::TdInjection::post_projection;
    } else {
      throw std::invalid_argument("expected pre_projection or post_projection, got '" + s + "'");
    }
  });
  m.finish();

  Section l = root.sub("loss");
  l.get("w_sup", c.loss.w_sup);
  l.get("w_var", c.loss.w_var);
  l.enum_field("recon_metric", [&](const std::string& s) { c.loss.recon_metric = model::parse_recon_metric(s); });
  l.enum_field("prior", [&](const std::string& s) { c.loss.prior = model::parse_prior_kind(s); });
  l.finish();

  Section o = root.sub("optim");
  o.get("lr", c.optim.lr);
  o.get("beta1", c.optim.beta1);
  o.get("beta2", c.optim.beta2);
  o.get("eps", c.optim.eps);
  o.get("weight_decay", c.optim.weight_decay);
  o.finish();

  Section t = root.sub("train");
  t.get("epochs", c.train.epochs);
  t.get("batch_size", c.train.batch_size);
  t.get("train_size", c.train.train_size);
  t.get("test_size", c.train.test_size);
  t.get("warmup_epochs", c.train.warmup_epochs);
  t.get("resample", c.train.resample);
  t.get("seed", c.train.seed);
  t.finish();

  Section d = root.sub("data");
  d.get("noise_sigma", c.data.noise_sigma);
  d.get("min_radius", c.data.min_radius);
  d.get("max_radius", c.data.max_radius);
  d.finish();

  root.get("out_dir", c.out_dir);
  root.finish();

  c.data.height = c.data.width = c.model.image_size;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file " + path);
  out << to_json() << "\n";
}

}  // namespace absvit::cfg
