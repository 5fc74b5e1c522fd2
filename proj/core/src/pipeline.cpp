#include "ultravar/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ultravar/checkpoint.hpp"
#include "ultravar/error.hpp"
#include "ultravar/metrics.hpp"
#include "ultravar/ops.hpp"

namespace uvar {

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << std::setprecision(9);
  return f;
}

std::string pgm_name(const char* prefix, std::size_t label, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%zu_%04zu.pgm", prefix, label, index);
  return buf;
}

Tensor as_image(const Tensor& batch1) { return reshape(batch1, {1, batch1.dim(2), batch1.dim(3)}); }

double mean_pairwise(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                     double (*metric)(const Tensor&, const Tensor&)) {
  double s = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) s += metric(x, y);
  return s / static_cast<double>(a.size() * b.size());
}

double ssim_default(const Tensor& x, const Tensor& y) { return ssim(x, y); }
double ms_ssim_default(const Tensor& x, const Tensor& y) { return ms_ssim(x, y); }

}  // namespace

SplitData to_split_data(const Dataset& ds) {
  SplitData out;
  for (const auto& s : ds.train) out.train.push(s.image, s.label);
  for (const auto& s : ds.test) out.test.push(s.image, s.label);
  return out;
}

SplitData load_manifest_data(const fs::path& manifest) {
  const auto entries = read_manifest(manifest);
  if (entries.empty()) throw ParseError("manifest '" + manifest.string() + "' is empty");
  const fs::path base = manifest.parent_path();
  SplitData out;
  for (const auto& e : entries) {
    Tensor img = read_pgm(base / e.path);
    (e.split == Split::Train ? out.train : out.test).push(img, e.label);
  }
  return out;
}

Model Model::create(const RunConfig& config, bool with_var) {
  config.validate();
  Model m;
  m.config = config;
  Rng vq_rng(config.seed, 0x100), pem_rng(config.seed, 0x200), var_rng(config.seed, 0x300);
  m.vqvae = Vqvae::create(config.vqvae, vq_rng);
  m.pem = Pem::create(config.pem, pem_rng);
  if (with_var) m.var = VarModel::create(config.var, config.vqvae, var_rng);
  return m;
}

ParamList Model::params() const {
  ParamList out;
  vqvae.collect(out);
  pem.collect(out);
  if (var) var->collect(out);
  return out;
}

void Model::save(const fs::path& path) const { save_checkpoint(path, config.to_json(), params()); }

Model Model::load(const fs::path& path) {
  const CheckpointData data = load_checkpoint(path);
  RunConfig config;
  try {
    config = RunConfig::from_json(data.config_json);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }
  bool with_var = false;
  for (const auto& t : data.tensors)
    if (t.name.rfind("var.", 0) == 0) with_var = true;
  Model m = Model::create(config, with_var);
  const ParamList params = m.params();
  if (params.size() != data.tensors.size())
    throw ParseError("checkpoint holds " + std::to_string(data.tensors.size()) + " tensors, model expects " +
                     std::to_string(params.size()));
  try {
    assign_params(params, data.tensors);
  } catch (const StateError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  return m;
}

void cmd_synth(const RunConfig& config, const fs::path& out_dir) {
  config.validate();
  const Dataset ds = make_dataset(config.synth, {config.counts.train_class0, config.counts.train_class1},
                                  {config.counts.test_class0, config.counts.test_class1});
  ensure_dir(out_dir / "train");
  ensure_dir(out_dir / "test");
  std::vector<ManifestEntry> entries;
  std::size_t index[2][2] = {{0, 0}, {0, 0}};
  for (const auto* part : {&ds.train, &ds.test}) {
    for (const auto& s : *part) {
      const std::size_t sp = s.split == Split::Train ? 0 : 1;
      const std::string rel = std::string(split_name(s.split)) + "/" + pgm_name("class", s.label, index[sp][s.label]++);
      write_pgm(s.image, out_dir / rel);
      entries.push_back({rel, s.label, s.split});
    }
  }
  write_manifest(entries, out_dir / "manifest.tsv");
  auto f = open_out(out_dir / "config.json");
  f << config.to_json() << '\n';
}

Model train_vqvae_model(const RunConfig& config, const LabeledImages& train,
                        const std::function<void(const Stage1Log&)>& on_epoch) {
  Model m = Model::create(config, false);
  Stage1Options opt;
  opt.train = config.stage1;
  opt.train_pem = !config.disable_pem;
  opt.pem_post_hoc = config.pem_post_hoc;
  opt.seed = config.seed;
  opt.on_epoch = on_epoch;
  if (config.pem_post_hoc && !config.disable_pem) {
    Stage1Options ae = opt;
    ae.train_pem = false;
    train_stage1(m.vqvae, nullptr, train.images, ae);
  }
  train_stage1(m.vqvae, config.disable_pem ? nullptr : &m.pem, train.images, opt);
  return m;
}

Model cmd_train_vqvae(const RunConfig& config, const fs::path& manifest, const fs::path& out_dir) {
  const SplitData data = load_manifest_data(manifest);
  ensure_dir(out_dir);
  auto csv = open_out(out_dir / "stage1_loss.csv");
  csv << "epoch,l_recon,l_quant\n";
  Model m = train_vqvae_model(config, data.train, [&](const Stage1Log& l) {
    csv << l.epoch << ',' << l.l_recon << ',' << l.l_quant << '\n';
    csv.flush();
  });
  m.save(out_dir / "vqvae.ckpt");
  return m;
}

Model train_var_model(const RunConfig& config, const Model& stage1, const LabeledImages& train,
                      const std::function<void(const Stage2Log&)>& on_epoch) {
  RunConfig merged = config;
  merged.vqvae = stage1.config.vqvae;
  merged.pem = stage1.config.pem;
  merged.disable_pem = stage1.config.disable_pem;
  merged.pem_post_hoc = stage1.config.pem_post_hoc;
  merged.stage1 = stage1.config.stage1;
  merged.validate();
  Model m = Model::create(merged, true);
  ParamList frozen;
  m.vqvae.collect(frozen);
  m.pem.collect(frozen);
  ParamList source;
  stage1.vqvae.collect(source);
  stage1.pem.collect(source);
  assign_params(frozen, source);
  Stage2Options opt;
  opt.train = merged.stage2;
  opt.seed = merged.seed;
  opt.on_epoch = on_epoch;
  train_stage2(*m.var, m.vqvae, train.images, train.labels, opt);
  return m;
}

Model cmd_train_var(const RunConfig& config, const fs::path& manifest, const fs::path& vqvae_ckpt,
                    const fs::path& out_dir) {
  const Model stage1 = Model::load(vqvae_ckpt);
  const SplitData data = load_manifest_data(manifest);
  ensure_dir(out_dir);
  auto csv = open_out(out_dir / "stage2_loss.csv");
  csv << "epoch,l_var\n";
  Model m = train_var_model(config, stage1, data.train, [&](const Stage2Log& l) {
    csv << l.epoch << ',' << l.l_var << '\n';
    csv.flush();
  });
  m.save(out_dir / (config.var.disable_scl ? "ultravar_no_scl.ckpt" : "ultravar.ckpt"));
  return m;
}

SamplerConfig GenerateRequest::resolve(const SamplerConfig& base) const {
  SamplerConfig s = base;
  if (temperature) s.temperature = *temperature;
  if (top_p) s.top_p = *top_p;
  if (cfg_scale) s.cfg_scale = *cfg_scale;
  if (seed) s.seed = *seed;
  if (!(s.temperature > 0.0)) throw UsageError("generate: temperature must be > 0");
  if (!(s.top_p > 0.0 && s.top_p <= 1.0)) throw UsageError("generate: top-p must be in (0, 1]");
  if (!(s.cfg_scale >= 0.0)) throw UsageError("generate: cfg scale must be >= 0");
  return s;
}

std::vector<Tensor> generate_images(const Model& model, const GenerateRequest& request) {
  if (!model.var) throw StateError("generate: checkpoint has no VAR parameters (Stage 2 not trained)");
  if (request.class_id >= model.config.var.num_classes)
    throw UsageError("generate: class " + std::to_string(request.class_id) + " out of range [0, " +
                     std::to_string(model.config.var.num_classes) + ")");
  GenerateOptions opt;
  opt.use_pem = !request.no_pem && !model.config.disable_pem;
  opt.use_scl = !request.no_scl;
  const SamplerConfig sampler = request.resolve(model.config.sampler);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < request.count; ++i) {
    const std::uint64_t index = (static_cast<std::uint64_t>(request.class_id) << 32) | i;
    out.push_back(as_image(generate(request.class_id, sampler, index, model.vqvae, &model.pem, *model.var, opt).image));
  }
  return out;
}

void cmd_generate(const fs::path& ckpt, const GenerateRequest& request, const fs::path& out_dir) {
  const Model model = Model::load(ckpt);
  const auto images = generate_images(model, request);
  ensure_dir(out_dir);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string name = pgm_name("gen_class", request.class_id, i);
    write_pgm(images[i], out_dir / name);
    entries.push_back({name, request.class_id, Split::Train});
  }
  write_manifest(entries, out_dir / "manifest.tsv");
}

EvalResult run_evaluation(const RunConfig& config, const SplitData& data, const std::vector<EvalArm>& arms) {
  EvalResult res;
  std::vector<LabeledImages> arm_train;
  for (const auto& arm : arms) {
    if (!arm.model) {
      arm_train.push_back(data.train);
      continue;
    }
    AugmentationPlan plan;
    plan.add_class0 = config.eval.augment_class0;
    plan.add_class1 = config.eval.augment_class1;
    plan.seed = config.sampler.seed;
    plan.generator = [&](std::size_t label, std::size_t index) {
      const std::uint64_t key = (static_cast<std::uint64_t>(label) << 32) | index;
      GenerateOptions opt;
      opt.use_pem = !arm.no_pem && !arm.model->config.disable_pem;
      return as_image(generate(label, config.sampler, key, arm.model->vqvae, &arm.model->pem, *arm.model->var, opt).image);
    };
    arm_train.push_back(augment(data.train, plan));
  }
  Classifier feature_model;
  bool have_features = false;
  for (std::size_t s = 0; s < config.eval.seeds; ++s) {
    const std::uint64_t seed = config.seed * 1000 + s;
    for (std::size_t a = 0; a < arms.size(); ++a) {
      const TrainedClassifier t = train_classifier(arm_train[a], config.classifier, seed);
      res.downstream.push_back({arms[a].name, seed, evaluate(t.model, data.test)});
      if (!have_features && !arms[a].model) {
        feature_model = t.model;
        have_features = true;
      }
    }
  }
  if (!have_features) feature_model = train_classifier(data.train, config.classifier, config.seed * 1000).model;

  std::vector<Tensor> real1;
  for (std::size_t i = 0; i < data.train.size(); ++i)
    if (data.train.labels[i] == 1) real1.push_back(data.train.images[i]);
  const Tensor real_feats = classifier_features(feature_model, real1);
  for (std::size_t a = 0; a < arms.size(); ++a) {
    if (!arms[a].model) continue;
    std::vector<Tensor> gen1;
    const LabeledImages& tr = arm_train[a];
    for (std::size_t i = data.train.size(); i < tr.size(); ++i)
      if (tr.labels[i] == 1) gen1.push_back(tr.images[i]);
    if (gen1.empty()) continue;
    res.metrics.push_back({"ssim", arms[a].name, "all", mean_pairwise(gen1, real1, ssim_default)});
    res.metrics.push_back({"ms_ssim", arms[a].name, "all", mean_pairwise(gen1, real1, ms_ssim_default)});
    res.metrics.push_back({"frechet_proxy", arms[a].name, "all",
                           frechet_distance(classifier_features(feature_model, gen1), real_feats)});
  }
  for (const auto& arm : arms) {
    if (!arm.model) continue;
    const Pem* pem = arm.no_pem || arm.model->config.disable_pem ? nullptr : &arm.model->pem;
    const Tensor rec = reconstruct(arm.model->vqvae, pem, batch_of(data.test.images));
    double s = 0.0, ms = 0.0, mse = 0.0;
    for (std::size_t i = 0; i < data.test.size(); ++i) {
      const Tensor r = as_image(slice_rows(rec, i, i + 1));
      s += ssim(r, data.test.images[i]);
      ms += ms_ssim(r, data.test.images[i]);
      for (std::size_t j = 0; j < r.numel(); ++j) {
        const double d = static_cast<double>(r.data()[j]) - data.test.images[i].data()[j];
        mse += d * d / static_cast<double>(r.numel());
      }
    }
    const double n = static_cast<double>(data.test.size());
    const std::string name = "reconstruction_" + arm.name;
    res.metrics.push_back({"ssim", name, "test", s / n});
    res.metrics.push_back({"ms_ssim", name, "test", ms / n});
    res.metrics.push_back({"mse", name, "test", mse / n});
  }
  return res;
}

void write_downstream_csv(const std::vector<EvalRow>& rows, const fs::path& path) {
  auto f = open_out(path);
  f << "arm,seed,accuracy,precision,recall,f1\n";
  for (const auto& r : rows)
    f << r.arm << ',' << r.seed << ',' << r.report.accuracy << ',' << r.report.precision << ',' << r.report.recall
      << ',' << r.report.f1 << '\n';
}

void write_metrics_csv(const std::vector<MetricRow>& rows, const fs::path& path) {
  auto f = open_out(path);
  f << "metric,arm,session,value\n";
  for (const auto& r : rows) f << r.metric << ',' << r.arm << ',' << r.session << ',' << r.value << '\n';
}

EvalResult cmd_eval(const RunConfig& config, const fs::path& ckpt, const fs::path& ckpt_no_scl,
                    const fs::path& manifest, const fs::path& out_dir) {
  const Model full = Model::load(ckpt);
  if (!full.var) throw UsageError("eval: '" + ckpt.string() + "' has no VAR parameters");
  if (full.config.var.disable_scl) throw UsageError("eval: arm mismatch, --ckpt was trained without SCL");
  std::optional<Model> no_scl;
  if (!ckpt_no_scl.empty()) {
    no_scl = Model::load(ckpt_no_scl);
    if (!no_scl->var || !no_scl->config.var.disable_scl)
      throw UsageError("eval: arm mismatch, --ckpt-no-scl must be a VAR trained with disable_scl");
  }
  const SplitData data = load_manifest_data(manifest);
  std::vector<EvalArm> arms{{"original", nullptr, false}, {"full", &full, false}, {"no_pem", &full, true}};
  if (no_scl) arms.push_back({"no_scl", &*no_scl, false});
  const EvalResult res = run_evaluation(config, data, arms);
  ensure_dir(out_dir);
  write_downstream_csv(res.downstream, out_dir / "downstream.csv");
  write_metrics_csv(res.metrics, out_dir / "metrics.csv");
  return res;
}

}  // namespace uvar
