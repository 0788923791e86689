#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "muv/dataset.hpp"
#include "muv/muvnet.hpp"
#include "muv/rng.hpp"
#include "muv/seqspace.hpp"

namespace muv {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double weight_decay = 0.01;
    int warmup = 200;
    int total_steps = 2000;
    double ema_std = 0.05;
    int batch = 4;
    int accum = 1;  // effective batch = batch * accum
    double task_mix_img2tex = 0.6;
    uint64_t seed = 0;
    std::string mode = "scratch";     // scratch | finetune
    int stage = 2;                    // 1: img2tex only, 2: mixed
    double flow_shift = 1.0;
    std::string mv_source = "mv";     // mv | tex-split | none
    int workers = 2;
};

struct TrainBatch {
    std::vector<NetSample> samples;
    std::vector<std::array<Grid, 5>> targets;
    std::vector<std::array<FrameRole, 5>> roles;
    std::vector<double> t_df;
    std::vector<Task> tasks;
};

struct StepStats {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    int n_img2tex = 0;
    int n_geo2mv = 0;
    bool skipped = false;  // non-finite loss; weights kept
};

// Power-function EMA profile: gamma solves
//   std_rel^2 = (gamma+1) / ((gamma+2)^2 (gamma+3)),
// and the per-step decay is beta_t = (1 - 1/t)^(gamma+1).
double ema_gamma_from_std(double std_rel);
double ema_beta(double gamma, int64_t step);

class Trainer {
public:
    Trainer(MuvModel& model, const TrainConfig& cfg, const Dataset& data);

    // Draws tasks/assets/noise from the trainer rng; deterministic in state.
    TrainBatch build_batch();

    // Forward/backward over the batch, AdamW update, EMA update.
    StepStats train_step(const TrainBatch& batch);
    StepStats train_step() { return train_step(build_batch()); }

    double lr_at(int step) const;

    int step() const { return step_; }
    const std::vector<MuvModel::Mat>& ema() const { return ema_; }
    Rng& rng() { return rng_; }

    // Copies EMA weights into the model (for evaluation).
    void load_ema_into(MuvModel& model) const;

    void save_checkpoint(const std::string& path, const std::vector<std::string>& labels) const;
    // Restores params/opt state/rng/step; rejects on config mismatch.
    void load_checkpoint(const std::string& path);

private:
    // Clean frames + geo for one asset under one task; frames in [-1,1].
    void assemble_clean(const AssetBundle& bundle, Task task, std::array<Grid, 5>& clean,
                        GeoConditioning& geo) const;

    MuvModel& model_;
    TrainConfig cfg_;
    const Dataset& data_;
    Rng rng_;
    int step_ = 0;
    double ema_gamma_ = 0.0;
    std::vector<MuvModel::Mat> m_, v_, ema_;
    std::vector<MuvModel::GradBuffer> sample_grads_;  // reused per step
};

// ---- checkpoint container ---------------------------------------------------
//
// Single binary archive: magic "MUVCKPT1", u32 version, u32 entry count, then
// entries of (u32 name_len, name, u32 kind, payload). kind 0 = f32 matrix
// (u32 rows, u32 cols, row-major f32 data); kind 1 = text blob (u64 size).
struct CheckpointEntry {
    uint32_t kind = 0;
    uint32_t rows = 0, cols = 0;
    std::vector<float> data;
    std::string text;
};

void checkpoint_write(const std::string& path,
                      const std::vector<std::pair<std::string, CheckpointEntry>>& entries);
std::vector<std::pair<std::string, CheckpointEntry>> checkpoint_read(const std::string& path);

// Convenience: model config + vocab stored in a checkpoint.
ModelConfig checkpoint_model_config(const std::string& path, std::vector<std::string>* labels);

// Loads "param/" (or "ema/") weights from a checkpoint into a model built
// with a matching config.
void load_weights(MuvModel& model, const std::string& path, bool use_ema);

}  // namespace muv
