#include "ultravar/config.hpp"

#include <fstream>
#include <iterator>
#include <json.hpp>
#include <set>

#include "ultravar/error.hpp"

namespace uvar {

namespace {

using json = nlohmann::json;

template <class F> void fields(SynthConfig& c, F&& f) {
  f("side", c.side);
  f("n_vessels", c.n_vessels);
  f("vessel_width", c.vessel_width);
  f("speckle_level", c.speckle_level);
  f("activation_amplitude", c.activation_amplitude);
  f("activation_x", c.activation_x);
  f("activation_y", c.activation_y);
  f("activation_radius", c.activation_radius);
  f("tissue_floor", c.tissue_floor);
  f("base_gain", c.base_gain);
  f("seed", c.seed);
  f("class_count", c.class_count);
}

template <class F> void fields(DataCounts& c, F&& f) {
  f("train_class0", c.train_class0);
  f("train_class1", c.train_class1);
  f("test_class0", c.test_class0);
  f("test_class1", c.test_class1);
}

template <class F> void fields(VqvaeConfig& c, F&& f) {
  f("image_side", c.image_side);
  f("downsample", c.downsample);
  f("channels", c.channels);
  f("codebook_size", c.codebook_size);
  f("schedule", c.schedule);
  f("hidden1", c.hidden1);
  f("hidden2", c.hidden2);
  f("beta", c.beta);
  f("quant_loss_conventional", c.quant_loss_conventional);
}

template <class F> void fields(PemConfig& c, F&& f) {
  f("features", c.features);
  f("cond_dim", c.cond_dim);
  f("cond_hidden", c.cond_hidden);
  f("cond_kernel", c.cond_kernel);
  f("cond_stride", c.cond_stride);
}

template <class F> void fields(VarConfig& c, F&& f) {
  f("model_dim", c.model_dim);
  f("heads", c.heads);
  f("layers", c.layers);
  f("ff_mult", c.ff_mult);
  f("num_classes", c.num_classes);
  f("ssl_window", c.ssl_window);
  f("ssl_hidden_mult", c.ssl_hidden_mult);
  f("ssl_dropout", c.ssl_dropout);
  f("class_dropout", c.class_dropout);
  f("disable_scl", c.disable_scl);
}

template <class F> void fields(TrainConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("lr_floor", c.lr_floor);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("weight_decay", c.weight_decay);
  f("max_steps", c.max_steps);
}

template <class F> void fields(SamplerConfig& c, F&& f) {
  f("temperature", c.temperature);
  f("top_p", c.top_p);
  f("cfg_scale", c.cfg_scale);
  f("seed", c.seed);
}

template <class F> void fields(ClassifierConfig& c, F&& f) {
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("lr_floor", c.lr_floor);
  f("weight_decay", c.weight_decay);
  f("width1", c.width1);
  f("width2", c.width2);
  f("width3", c.width3);
}

template <class F> void fields(EvalConfig& c, F&& f) {
  f("seeds", c.seeds);
  f("augment_class0", c.augment_class0);
  f("augment_class1", c.augment_class1);
}

template <class F> void fields(RunConfig& c, F&& f) {
  f("seed", c.seed);
  f("synth", c.synth);
  f("counts", c.counts);
  f("vqvae", c.vqvae);
  f("pem", c.pem);
  f("var", c.var);
  f("stage1", c.stage1);
  f("stage2", c.stage2);
  f("disable_pem", c.disable_pem);
  f("pem_post_hoc", c.pem_post_hoc);
  f("sampler", c.sampler);
  f("classifier", c.classifier);
  f("eval", c.eval);
}

template <class T> concept Record = requires(T& t) { fields(t, [](const char*, auto&) {}); };

template <class T> json dump_value(T& v) {
  if constexpr (Record<T>) {
    json j = json::object();
    fields(v, [&](const char* key, auto& field) { j[key] = dump_value(field); });
    return j;
  } else {
    return json(v);
  }
}

template <class T> void load_value(const json& j, T& v, const std::string& path) {
  if constexpr (Record<T>) {
    if (!j.is_object()) throw ConfigError("config: '" + path + "' must be an object");
    std::set<std::string> known;
    fields(v, [&](const char* key, auto& field) {
      known.insert(key);
      if (auto it = j.find(key); it != j.end()) load_value(*it, field, path.empty() ? key : path + "." + key);
    });
    for (const auto& [key, _] : j.items())
      if (!known.count(key)) throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) + "'");
  } else {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw ConfigError("config: '" + path + "' must be a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_unsigned()) throw ConfigError("config: '" + path + "' must be a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!j.is_number()) throw ConfigError("config: '" + path + "' must be a number");
      }
      v = j.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: '" + path + "': " + e.what());
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  synth.validate();
  vqvae.validate();
  var.validate();
  if (synth.side != vqvae.image_side) throw ConfigError("config: synth.side must equal vqvae.image_side");
  if (counts.train_class0 == 0 || counts.train_class1 == 0 || counts.test_class0 == 0 || counts.test_class1 == 0)
    throw ConfigError("config: every class needs samples in both splits");
  for (const TrainConfig* t : {&stage1, &stage2})
    if (t->epochs == 0 || t->batch_size == 0 || !(t->lr > 0.0) || t->lr_floor < 0.0)
      throw ConfigError("config: training epochs, batch size and lr must be positive");
  if (classifier.epochs == 0 || classifier.batch_size == 0 || !(classifier.lr > 0.0))
    throw ConfigError("config: classifier epochs, batch size and lr must be positive");
  if (pem.features == 0 || pem.cond_dim == 0 || pem.cond_hidden == 0 || pem.cond_kernel == 0 || pem.cond_stride == 0)
    throw ConfigError("config: PEM sizes must be positive");
  if (!(sampler.temperature > 0.0) || !(sampler.top_p > 0.0) || sampler.top_p > 1.0 || sampler.cfg_scale < 0.0)
    throw ConfigError("config: sampler needs temperature > 0, top_p in (0, 1], cfg_scale >= 0");
  if (eval.seeds == 0) throw ConfigError("config: eval.seeds must be positive");
}

std::string RunConfig::to_json() const {
  RunConfig copy = *this;
  return dump_value(copy).dump();
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig c;
  load_value(j, c, "");
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config '" + path.string() + "'");
  return from_json(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
}

}  // namespace uvar
