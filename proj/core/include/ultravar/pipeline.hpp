#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ultravar/config.hpp"
#include "ultravar/downstream.hpp"
#include "ultravar/pem.hpp"
#include "ultravar/train.hpp"
#include "ultravar/var.hpp"
#include "ultravar/vqvae.hpp"

namespace uvar {

namespace fs = std::filesystem;

struct SplitData {
  LabeledImages train;
  LabeledImages test;
};

// Images referenced by a manifest, paths relative to the manifest directory.
SplitData load_manifest_data(const fs::path& manifest);
SplitData to_split_data(const Dataset& ds);

// A complete model as stored in a checkpoint; `var` absent after Stage 1.
struct Model {
  RunConfig config;
  Vqvae vqvae;
  Pem pem;
  std::optional<VarModel> var;

  static Model create(const RunConfig& config, bool with_var);
  ParamList params() const;
  void save(const fs::path& path) const;
  static Model load(const fs::path& path);
};

// Writes train/ and test/ PGMs plus manifest.tsv under out_dir.
void cmd_synth(const RunConfig& config, const fs::path& out_dir);

// Writes vqvae.ckpt and stage1_loss.csv under out_dir.
Model cmd_train_vqvae(const RunConfig& config, const fs::path& manifest, const fs::path& out_dir);
Model train_vqvae_model(const RunConfig& config, const LabeledImages& train,
                        const std::function<void(const Stage1Log&)>& on_epoch = {});

// Autoencoder and PEM are taken from the Stage-1 checkpoint and left untouched.
Model cmd_train_var(const RunConfig& config, const fs::path& manifest, const fs::path& vqvae_ckpt,
                    const fs::path& out_dir);
Model train_var_model(const RunConfig& config, const Model& stage1, const LabeledImages& train,
                      const std::function<void(const Stage2Log&)>& on_epoch = {});

// Unset sampler fields fall back to the checkpoint configuration.
struct GenerateRequest {
  std::size_t class_id = 0;
  std::size_t count = 1;
  std::optional<double> temperature;
  std::optional<double> top_p;
  std::optional<double> cfg_scale;
  std::optional<std::uint64_t> seed;
  bool no_pem = false;
  bool no_scl = false;

  SamplerConfig resolve(const SamplerConfig& base) const;
};
std::vector<Tensor> generate_images(const Model& model, const GenerateRequest& request);
// Writes gen_XXXX.pgm and manifest.tsv under out_dir.
void cmd_generate(const fs::path& ckpt, const GenerateRequest& request, const fs::path& out_dir);

struct EvalArm {
  std::string name;
  const Model* model = nullptr;  // null for the original-only arm
  bool no_pem = false;
};

struct EvalRow {
  std::string arm;
  std::uint64_t seed = 0;
  EvalReport report;
};

struct MetricRow {
  std::string metric, arm, session;
  double value = 0.0;
};

struct EvalResult {
  std::vector<EvalRow> downstream;
  std::vector<MetricRow> metrics;
};

// Paired-seed downstream experiment over the given arms plus the metric
// comparison of generated against real Class1 images.
EvalResult run_evaluation(const RunConfig& config, const SplitData& data, const std::vector<EvalArm>& arms);
// Writes metrics.csv, downstream.csv under out_dir. `ckpt_no_scl` may be empty.
EvalResult cmd_eval(const RunConfig& config, const fs::path& ckpt, const fs::path& ckpt_no_scl,
                    const fs::path& manifest, const fs::path& out_dir);

void write_downstream_csv(const std::vector<EvalRow>& rows, const fs::path& path);
void write_metrics_csv(const std::vector<MetricRow>& rows, const fs::path& path);

}  // namespace uvar
