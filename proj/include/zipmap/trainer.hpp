#pragma once

// Config-driven training loop: staged schedule, AdamW with per-group learning rates,
// checkpoints that resume bitwise, JSON-lines loss log.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zipmap/losses.hpp"

namespace zipmap {

struct StageConfig {
  std::string name;
  std::int64_t steps = 0;
  bool reference_view = true;  // false: camera loss against aligned cameras
  bool query = false;          // split views 50/50 into inputs and query targets
};

struct OptimizerConfig {
  double lr_ttt = 1e-4;
  double lr_other = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double warmup_fraction = 0.05;
  double grad_clip = 1.0;  // global norm; 0 disables
};

struct TrainConfig {
  ModelConfig model;
  std::uint64_t seed = 0;
  int min_views = 2;
  int max_views = 8;
  OptimizerConfig optimizer;
  std::vector<StageConfig> stages;
  bool normal_loss = true;
  bool depth_grad_loss = true;
  double normal_eps = 1e-6;
  std::int64_t checkpoint_every = 1000;  // 0: only the initial and final checkpoints

  void validate() const;
  std::int64_t total_steps() const;
  nlohmann::json to_json() const;
  // Every key is required; errors name the missing key ("train.optimizer.lr_ttt").
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  // FNV-1a of the canonical JSON dump, hex.
  std::string hash() const;
};

// Learning-rate multiplier at `step` of a stage with `steps` steps: linear warmup over the
// first ceil(warmup_fraction * steps) steps, then cosine decay to zero.
double lr_multiplier(std::int64_t step, std::int64_t steps, double warmup_fraction);

// Adaptive moments with decoupled weight decay. Decay applies to matrices (rank >= 2) only.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParameterStore<float>& store);

  // One update from the gradients currently stored on the parameters. Parameters without
  // a gradient are treated as having a zero gradient.
  void step(ParameterStore<float>& store, const OptimizerConfig& config, double lr_ttt, double lr_other);

  std::int64_t steps() const { return t_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<std::vector<float>> m_, v_;
  std::int64_t t_ = 0;
};

// Global L2 norm of all parameter gradients.
double gradient_norm(const ParameterStore<float>& store);

struct StepRecord {
  std::int64_t step = 0;
  std::size_t stage = 0;
  Index views = 0;
  Index query_views = 0;
  double lr_ttt = 0, lr_other = 0;
  double grad_norm = 0;
  LossReport<float> losses;
  nlohmann::json to_json() const;
};

struct CheckpointInfo {
  std::int64_t step = 0;
  std::string config_hash;
  nlohmann::json config;
};

// Training data: every bundle under `dir`, in sorted order.
std::vector<SceneBundle> load_training_data(const std::filesystem::path& dir);

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<SceneBundle> data);

  const TrainConfig& config() const { return config_; }
  Network<float>& network() { return *net_; }
  std::int64_t step() const { return step_; }
  bool finished() const { return step_ >= config_.total_steps(); }

  // One optimization step. A non-finite loss or gradient throws NumericError before any
  // parameter changes.
  StepRecord train_step();

  void save_checkpoint(const std::filesystem::path& dir) const;
  // Restores weights, optimizer moments and step. The config hash must match.
  void load_checkpoint(const std::filesystem::path& dir);
  // Weights only (for finetuning from another run); names and shapes must match.
  void load_weights(const std::filesystem::path& dir);

  // Views drawn for `step`: a function of (seed, step) only, so resumed runs see the same data.
  struct Sample {
    std::size_t bundle = 0;
    std::vector<Index> inputs, queries;
  };
  Sample sample(std::int64_t step) const;
  std::size_t stage_of(std::int64_t step, std::int64_t* stage_step = nullptr) const;

 private:
  TrainConfig config_;
  std::vector<SceneBundle> data_;
  std::unique_ptr<Network<float>> net_;
  AdamW optimizer_;
  std::int64_t step_ = 0;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

// Copies checkpoint weights into `store`; names and shapes must match.
void load_parameters(ParameterStore<float>& store, const std::filesystem::path& dir);
// Network built from the checkpoint's own model config, with its weights.
std::unique_ptr<Network<float>> load_network(const std::filesystem::path& dir);

struct RunOptions {
  std::optional<std::filesystem::path> resume;      // checkpoint to continue from
  std::optional<std::filesystem::path> init_weights;  // weights to start from (fresh optimizer)
  std::function<void(const StepRecord&)> on_step;
};

// Runs the whole schedule into `out`: config.json, loss_log.jsonl (one line per step),
// checkpoints/step_NNNNNNNN (initial, every checkpoint_every steps, final) and
// checkpoints/latest. On a numeric failure the pre-step weights are saved as
// checkpoints/last_good and NumericError is rethrown.
// Returns the final checkpoint directory.
std::filesystem::path run_training(const TrainConfig& config, const std::vector<SceneBundle>& data,
                                   const std::filesystem::path& out, const RunOptions& options = {});

// Query finetuning: run_training from the weights of a trained `checkpoint` (fresh
// optimizer). Stages with `query` set split their views 50/50 into inputs and targets.
std::filesystem::path finetune_query(TrainConfig config, const std::filesystem::path& checkpoint,
                                     const std::vector<SceneBundle>& data, const std::filesystem::path& out,
                                     const RunOptions& options = {});

}  // namespace zipmap
