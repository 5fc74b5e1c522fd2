#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "ultravar/error.hpp"
#include "ultravar/pipeline.hpp"

namespace fs = std::filesystem;
using namespace uvar;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "Override the run seed");
  cmd->add_option("--out", c.out, "Output directory")->required();
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int report(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "ultravar: %s: %s\n", kind, e.what());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UltraVAR desk-scale pipeline"};
  app.require_subcommand(1);

  Common synth_opts;
  auto* synth = app.add_subcommand("synth", "Render the synthetic dataset");
  add_common(synth, synth_opts);

  Common vq_opts;
  std::string vq_data;
  bool vq_no_pem = false;
  auto* train_vq = app.add_subcommand("train-vqvae", "Stage 1: autoencoder, quantizer and PEM");
  add_common(train_vq, vq_opts);
  train_vq->add_option("--data", vq_data, "Dataset manifest")->required();
  train_vq->add_flag("--no-pem", vq_no_pem, "Train without the enhancement module");

  Common var_opts;
  std::string var_data, var_ckpt;
  bool var_no_scl = false;
  auto* train_var = app.add_subcommand("train-var", "Stage 2: class-conditional transformer");
  add_common(train_var, var_opts);
  train_var->add_option("--data", var_data, "Dataset manifest")->required();
  train_var->add_option("--ckpt", var_ckpt, "Stage-1 checkpoint")->required();
  train_var->add_flag("--no-scl", var_no_scl, "Disable the smooth scaling layer");

  std::string gen_ckpt, gen_out;
  GenerateRequest req;
  auto* gen = app.add_subcommand("generate", "Sample images from a trained checkpoint");
  gen->add_option("--ckpt", gen_ckpt, "Stage-2 checkpoint")->required();
  gen->add_option("--class", req.class_id, "Class label")->required();
  gen->add_option("--n", req.count, "Number of images")->check(CLI::PositiveNumber);
  gen->add_option("--temp", req.temperature, "Sampling temperature");
  gen->add_option("--top-p", req.top_p, "Nucleus mass");
  gen->add_option("--cfg", req.cfg_scale, "Guidance scale");
  gen->add_option("--seed", req.seed, "Sampler seed");
  gen->add_flag("--no-pem", req.no_pem, "Skip the enhancement module");
  gen->add_flag("--no-scl", req.no_scl, "Skip the smooth scaling layer");
  gen->add_option("--out", gen_out, "Output directory")->required();

  Common eval_opts;
  std::string eval_data, eval_ckpt, eval_ckpt_no_scl;
  auto* eval = app.add_subcommand("eval", "Metrics and downstream augmentation study");
  add_common(eval, eval_opts);
  eval->add_option("--data", eval_data, "Dataset manifest")->required();
  eval->add_option("--ckpt", eval_ckpt, "Stage-2 checkpoint")->required();
  eval->add_option("--ckpt-no-scl", eval_ckpt_no_scl, "Stage-2 checkpoint trained without SCL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (synth->parsed()) {
      RunConfig cfg = synth_opts.config.empty() ? RunConfig{} : RunConfig::load(synth_opts.config);
      if (synth_opts.seed) cfg.synth.seed = *synth_opts.seed;
      cfg.validate();
      cmd_synth(cfg, synth_opts.out);
    } else if (train_vq->parsed()) {
      RunConfig cfg = load_config(vq_opts);
      if (vq_no_pem) cfg.disable_pem = true;
      cmd_train_vqvae(cfg, vq_data, vq_opts.out);
    } else if (train_var->parsed()) {
      RunConfig cfg = load_config(var_opts);
      if (var_no_scl) cfg.var.disable_scl = true;
      cmd_train_var(cfg, var_data, var_ckpt, var_opts.out);
    } else if (gen->parsed()) {
      cmd_generate(gen_ckpt, req, gen_out);
    } else if (eval->parsed()) {
      cmd_eval(load_config(eval_opts), eval_ckpt, eval_ckpt_no_scl, eval_data, eval_opts.out);
    }
  } catch (const UsageError& e) {
    return report("usage", e, kUsage);
  } catch (const ConfigError& e) {
    return report("config", e, kUsage);
  } catch (const IndexError& e) {
    return report("usage", e, kUsage);
  } catch (const NumericError& e) {
    return report("numeric", e, kNumeric);
  } catch (const Error& e) {
    return report("data", e, kData);
  } catch (const std::filesystem::filesystem_error& e) {
    return report("io", e, kData);
  }
  return kOk;
}
