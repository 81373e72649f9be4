#include "zipmap/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "zipmap/json_util.hpp"
#include "zipmap/zten.hpp"

namespace zipmap {
namespace fs = std::filesystem;

namespace {

constexpr const char* kCheckpointFormat = "zipmap.checkpoint";
constexpr int kCheckpointSchema = 1;

void check(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing file " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%08lld", static_cast<long long>(step));
  return buf;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  check(min_views >= 2, "train.views.min must be >= 2");
  check(max_views >= min_views, "train.views.max must be >= train.views.min");
  const auto& o = optimizer;
  check(o.lr_ttt >= 0 && o.lr_other >= 0, "train.optimizer learning rates must be >= 0");
  check(o.beta1 >= 0 && o.beta1 < 1 && o.beta2 >= 0 && o.beta2 < 1, "train.optimizer betas must be in [0, 1)");
  check(o.eps > 0, "train.optimizer.eps must be > 0");
  check(o.weight_decay >= 0, "train.optimizer.weight_decay must be >= 0");
  check(o.warmup_fraction >= 0 && o.warmup_fraction <= 1, "train.optimizer.warmup_fraction must be in [0, 1]");
  check(o.grad_clip >= 0, "train.optimizer.grad_clip must be >= 0");
  check(!stages.empty(), "train.stages must not be empty");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "train.stages[" + std::to_string(i) + "]";
    check(s.steps >= 0, where + ".steps must be >= 0");
    check(!(s.query && !s.reference_view && min_views < 4),
          where + ": reference-free query stages need train.views.min >= 4 (two inputs)");
  }
  check(normal_eps >= 0 && normal_eps < 1, "train.loss.normal_eps must be in [0, 1)");
  check(checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
}

std::int64_t TrainConfig::total_steps() const {
  std::int64_t total = 0;
  for (const auto& s : stages) total += s.steps;
  return total;
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json stage_list = nlohmann::json::array();
  for (const auto& s : stages)
    stage_list.push_back(
        {{"name", s.name}, {"steps", s.steps}, {"reference_view", s.reference_view}, {"query", s.query}});
  const auto& o = optimizer;
  return {{"model", model.to_json()},
          {"seed", seed},
          {"views", {{"min", min_views}, {"max", max_views}}},
          {"optimizer",
           {{"lr_ttt", o.lr_ttt},
            {"lr_other", o.lr_other},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"eps", o.eps},
            {"weight_decay", o.weight_decay},
            {"warmup_fraction", o.warmup_fraction},
            {"grad_clip", o.grad_clip}}},
          {"stages", stage_list},
          {"loss", {{"normal", normal_loss}, {"depth_grad", depth_grad_loss}, {"normal_eps", normal_eps}}},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  const std::string root = "train";
  TrainConfig c;
  c.model = ModelConfig::from_json(require_key<nlohmann::json>(j, "model", root), root + ".model");
  c.seed = require_key<std::uint64_t>(j, "seed", root);
  const auto views = require_key<nlohmann::json>(j, "views", root);
  c.min_views = require_key<int>(views, "min", root + ".views");
  c.max_views = require_key<int>(views, "max", root + ".views");
  const auto o = require_key<nlohmann::json>(j, "optimizer", root);
  const std::string op = root + ".optimizer";
  c.optimizer.lr_ttt = require_key<double>(o, "lr_ttt", op);
  c.optimizer.lr_other = require_key<double>(o, "lr_other", op);
  c.optimizer.beta1 = require_key<double>(o, "beta1", op);
  c.optimizer.beta2 = require_key<double>(o, "beta2", op);
  c.optimizer.eps = require_key<double>(o, "eps", op);
  c.optimizer.weight_decay = require_key<double>(o, "weight_decay", op);
  c.optimizer.warmup_fraction = require_key<double>(o, "warmup_fraction", op);
  c.optimizer.grad_clip = require_key<double>(o, "grad_clip", op);
  const auto stages = require_key<nlohmann::json>(j, "stages", root);
  if (!stages.is_array()) throw ConfigError("config key 'train.stages' has the wrong type");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string sp = root + ".stages[" + std::to_string(i) + "]";
    StageConfig s;
    s.name = require_key<std::string>(stages[i], "name", sp);
    s.steps = require_key<std::int64_t>(stages[i], "steps", sp);
    s.reference_view = require_key<bool>(stages[i], "reference_view", sp);
    s.query = require_key<bool>(stages[i], "query", sp);
    c.stages.push_back(s);
  }
  const auto loss = require_key<nlohmann::json>(j, "loss", root);
  c.normal_loss = require_key<bool>(loss, "normal", root + ".loss");
  c.depth_grad_loss = require_key<bool>(loss, "depth_grad", root + ".loss");
  c.normal_eps = require_key<double>(loss, "normal_eps", root + ".loss");
  c.checkpoint_every = require_key<std::int64_t>(j, "checkpoint_every", root);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  return from_json(j);
}

std::string TrainConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double lr_multiplier(std::int64_t step, std::int64_t steps, double warmup_fraction) {
  if (steps <= 0) return 0.0;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(steps)));
  if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::int64_t decay = steps - warmup;
  if (decay <= 0) return 1.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(decay);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- optimizer --------------------------------------------------------------------

AdamW::AdamW(const ParameterStore<float>& store) {
  for (const auto& e : store.entries()) {
    m_.emplace_back(static_cast<std::size_t>(e.value.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(e.value.numel()), 0.0f);
  }
}

void AdamW::step(ParameterStore<float>& store, const OptimizerConfig& config, double lr_ttt, double lr_other) {
  const auto& entries = store.entries();
  if (entries.size() != m_.size()) throw ParameterError("AdamW: parameter set changed since construction");
  ++t_;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor<float> p = entries[k].value;
    const double lr = entries[k].group == ParamGroup::kTTT ? lr_ttt : lr_other;
    const double decay = p.rank() >= 2 ? config.weight_decay : 0.0;
    const auto grad = p.grad();
    const bool has_grad = p.has_grad();
    auto value = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      m[i] = static_cast<float>(config.beta1 * m[i] + (1.0 - config.beta1) * g);
      v[i] = static_cast<float>(config.beta2 * v[i] + (1.0 - config.beta2) * g * g);
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
      value[i] = static_cast<float>(value[i] - lr * (update + decay * value[i]));
    }
  }
}

double gradient_norm(const ParameterStore<float>& store) {
  double sq = 0;
  for (const auto& e : store.entries())
    if (e.value.has_grad())
      for (float g : e.value.grad()) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j = losses.to_json();
  j["step"] = step;
  j["stage"] = stage;
  j["views"] = views;
  j["query_views"] = query_views;
  j["lr_ttt"] = lr_ttt;
  j["lr_other"] = lr_other;
  j["grad_norm"] = grad_norm;
  return j;
}

std::vector<SceneBundle> load_training_data(const fs::path& dir) {
  std::vector<SceneBundle> out;
  for (const auto& path : list_bundles(dir)) out.push_back(load_bundle(path));
  if (out.empty()) throw UsageError("no scene bundles under " + dir.string());
  return out;
}

// ---- trainer ----------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, std::vector<SceneBundle> data)
    : config_(std::move(config)), data_(std::move(data)) {
  config_.validate();
  if (data_.empty()) throw UsageError("training needs at least one scene bundle");
  for (const auto& b : data_)
    if (b.view_count() < 2) throw UsageError("training bundles need at least 2 views");
  net_ = std::make_unique<Network<float>>(config_.model, config_.seed);
  optimizer_ = AdamW(net_->params());
}

std::size_t Trainer::stage_of(std::int64_t step, std::int64_t* stage_step) const {
  std::int64_t begin = 0;
  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    if (step < begin + config_.stages[i].steps) {
      if (stage_step) *stage_step = step - begin;
      return i;
    }
    begin += config_.stages[i].steps;
  }
  throw UsageError("step " + std::to_string(step) + " is past the end of the schedule");
}

Trainer::Sample Trainer::sample(std::int64_t step) const {
  Rng rng(splitmix64(config_.seed ^ splitmix64(static_cast<std::uint64_t>(step))));
  const auto& stage = config_.stages[stage_of(step)];
  Sample s;
  s.bundle = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data_.size()) - 1));
  const Index available = data_[s.bundle].view_count();
  const Index hi = std::min<Index>(config_.max_views, available);
  const Index lo = std::min<Index>(config_.min_views, hi);
  const Index n = rng.uniform_int(lo, hi);
  std::vector<Index> pool(static_cast<std::size_t>(available));
  std::iota(pool.begin(), pool.end(), Index{0});
  for (Index i = 0; i < n; ++i) {
    const auto j = rng.uniform_int(i, available - 1);
    std::swap(pool[i], pool[j]);
  }
  const Index n_inputs = stage.query ? n - n / 2 : n;
  s.inputs.assign(pool.begin(), pool.begin() + n_inputs);
  s.queries.assign(pool.begin() + n_inputs, pool.begin() + n);
  return s;
}

StepRecord Trainer::train_step() {
  if (finished()) throw UsageError("training schedule already finished");
  std::int64_t stage_step = 0;
  const std::size_t stage_index = stage_of(step_, &stage_step);
  const auto& stage = config_.stages[stage_index];
  const Sample s = sample(step_);
  const auto batch = make_batch<float>(data_[s.bundle], s.inputs, s.queries,
                                       stage.query ? ScaleMode::kMaxCameraDistance : ScaleMode::kMeanPointNorm);

  auto& store = net_->params();
  store.zero_grad();
  const auto result = net_->reconstruct(batch.images, stage.query ? batch.query_raymaps : Tensor<float>{});
  LossOptions options;
  options.reference_view = stage.reference_view;
  options.query = stage.query;
  options.normal = config_.normal_loss;
  options.depth_grad = config_.depth_grad_loss;
  options.normal_eps = config_.normal_eps;

  StepRecord rec;
  rec.step = step_;
  rec.stage = stage_index;
  rec.views = batch.views();
  rec.query_views = batch.query_views();
  rec.losses = compute_losses(result.prediction, batch, options);
  if (!std::isfinite(rec.losses.components.at("total")))
    throw NumericError("non-finite loss at step " + std::to_string(step_));
  rec.losses.total.backward();
  rec.grad_norm = gradient_norm(store);
  if (!std::isfinite(rec.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(step_));

  const double clip = config_.optimizer.grad_clip;
  if (clip > 0 && rec.grad_norm > clip) {
    const float factor = static_cast<float>(clip / rec.grad_norm);
    for (const auto& e : store.entries())
      if (e.value.has_grad())
        for (auto& g : e.value.node()->grad) g *= factor;
  }
  const double mult = lr_multiplier(stage_step, stage.steps, config_.optimizer.warmup_fraction);
  rec.lr_ttt = config_.optimizer.lr_ttt * mult;
  rec.lr_other = config_.optimizer.lr_other * mult;
  optimizer_.step(store, config_.optimizer, rec.lr_ttt, rec.lr_other);
  store.zero_grad();
  rec.losses.total = Tensor<float>();
  ++step_;
  return rec;
}

namespace {

Tensor<float> flatten(const std::vector<std::vector<float>>& parts) {
  std::vector<float> all;
  for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  const auto n = static_cast<Index>(all.size());
  return Tensor<float>(Shape{n}, std::move(all));
}

std::vector<std::vector<float>> split(const Tensor<float>& flat, const ParameterStore<float>& store,
                                      const std::string& origin) {
  std::vector<std::vector<float>> out;
  std::size_t offset = 0;
  const auto data = flat.data();
  for (const auto& e : store.entries()) {
    const auto n = static_cast<std::size_t>(e.value.numel());
    if (offset + n > data.size()) throw FormatError(origin + ": too few values for the model");
    out.emplace_back(data.begin() + static_cast<std::ptrdiff_t>(offset),
                     data.begin() + static_cast<std::ptrdiff_t>(offset + n));
    offset += n;
  }
  if (offset != data.size()) throw FormatError(origin + ": too many values for the model");
  return out;
}

void check_layout(const nlohmann::json& manifest, const ParameterStore<float>& store, const fs::path& dir) {
  const auto& params = manifest.at("params");
  const auto& entries = store.entries();
  if (params.size() != entries.size())
    throw FormatError(dir.string() + ": checkpoint has " + std::to_string(params.size()) + " parameters, model has " +
                      std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (params[i].at("name").get<std::string>() != entries[i].name)
      throw FormatError(dir.string() + ": parameter " + std::to_string(i) + " is '" +
                        params[i].at("name").get<std::string>() + "', model expects '" + entries[i].name + "'");
    if (params[i].at("shape").get<Shape>() != entries[i].value.shape())
      throw FormatError(dir.string() + ": shape mismatch for parameter '" + entries[i].name + "'");
  }
}

nlohmann::json read_manifest(const fs::path& dir) {
  const auto j = read_json(dir / "checkpoint.json");
  if (j.value("format", "") != kCheckpointFormat) throw FormatError(dir.string() + ": not a checkpoint");
  const int schema = j.value("schema_version", -1);
  if (schema != kCheckpointSchema)
    throw FormatError(dir.string() + ": checkpoint schema version " + std::to_string(schema) + ", expected " +
                      std::to_string(kCheckpointSchema));
  return j;
}

}  // namespace

void Trainer::save_checkpoint(const fs::path& dir) const {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  const auto& store = net_->params();
  std::vector<std::vector<float>> values;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : store.entries()) {
    values.emplace_back(e.value.data().begin(), e.value.data().end());
    params.push_back({{"name", e.name}, {"shape", e.value.shape()}});
  }
  save_zten(tmp / "params.zten", flatten(values));
  save_zten(tmp / "adam_m.zten", flatten(optimizer_.first_moments()));
  save_zten(tmp / "adam_v.zten", flatten(optimizer_.second_moments()));
  const nlohmann::json manifest = {{"format", kCheckpointFormat},
                                   {"schema_version", kCheckpointSchema},
                                   {"step", step_},
                                   {"adam_steps", optimizer_.steps()},
                                   {"config_hash", config_.hash()},
                                   {"config", config_.to_json()},
                                   {"params", params}};
  write_text(tmp / "checkpoint.json", manifest.dump(2) + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

void load_parameters(ParameterStore<float>& store, const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  check_layout(manifest, store, dir);
  const auto values = split(load_zten<float>(dir / "params.zten"), store, (dir / "params.zten").string());
  for (std::size_t k = 0; k < values.size(); ++k) {
    Tensor<float> p = store.entries()[k].value;
    std::copy(values[k].begin(), values[k].end(), p.mutable_data().begin());
  }
}

void Trainer::load_weights(const fs::path& dir) { load_parameters(net_->params(), dir); }

std::unique_ptr<Network<float>> load_network(const fs::path& dir) {
  const auto info = read_checkpoint_info(dir);
  const auto config = TrainConfig::from_json(info.config);
  auto net = std::make_unique<Network<float>>(config.model, config.seed);
  load_parameters(net->params(), dir);
  return net;
}

void Trainer::load_checkpoint(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  const auto hash = manifest.at("config_hash").get<std::string>();
  if (hash != config_.hash())
    throw ConfigError(dir.string() + ": checkpoint was written with config " + hash + ", current config is " +
                      config_.hash());
  load_weights(dir);
  const auto& store = net_->params();
  optimizer_.first_moments() = split(load_zten<float>(dir / "adam_m.zten"), store, (dir / "adam_m.zten").string());
  optimizer_.second_moments() = split(load_zten<float>(dir / "adam_v.zten"), store, (dir / "adam_v.zten").string());
  optimizer_.set_steps(manifest.at("adam_steps").get<std::int64_t>());
  step_ = manifest.at("step").get<std::int64_t>();
  if (step_ < 0 || step_ > config_.total_steps()) throw FormatError(dir.string() + ": step outside the schedule");
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  CheckpointInfo info;
  info.step = manifest.at("step").get<std::int64_t>();
  info.config_hash = manifest.at("config_hash").get<std::string>();
  info.config = manifest.at("config");
  return info;
}

// ---- runs -------------------------------------------------------------------------

fs::path run_training(const TrainConfig& config, const std::vector<SceneBundle>& data, const fs::path& out,
                      const RunOptions& options) {
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.json", config.to_json().dump(2) + "\n");
  Trainer trainer(config, data);
  if (options.init_weights) trainer.load_weights(*options.init_weights);
  if (options.resume) trainer.load_checkpoint(*options.resume);

  const fs::path log_path = out / "loss_log.jsonl";
  std::vector<std::string> kept;
  if (options.resume && fs::exists(log_path)) {
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<std::int64_t>() < trainer.step()) kept.push_back(line);
    }
  }
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot write " + log_path.string());
  for (const auto& line : kept) log << line << "\n";

  auto save = [&](const std::string& name) {
    const fs::path dir = out / "checkpoints" / name;
    trainer.save_checkpoint(dir);
    write_text(out / "checkpoints" / "latest", name + "\n");
    return dir;
  };
  fs::path last = options.resume ? fs::path(*options.resume) : save(step_name(trainer.step()));
  while (!trainer.finished()) {
    StepRecord rec;
    try {
      rec = trainer.train_step();
    } catch (const NumericError&) {
      trainer.save_checkpoint(out / "checkpoints" / "last_good");
      throw;
    }
    log << rec.to_json().dump() << "\n";
    log.flush();
    if (options.on_step) options.on_step(rec);
    if (config.checkpoint_every > 0 && trainer.step() % config.checkpoint_every == 0 && !trainer.finished())
      last = save(step_name(trainer.step()));
  }
  if (last.filename() != step_name(trainer.step())) last = save(step_name(trainer.step()));
  return last;
}

fs::path finetune_query(TrainConfig config, const fs::path& checkpoint, const std::vector<SceneBundle>& data,
                        const fs::path& out, const RunOptions& options) {
  const auto info = read_checkpoint_info(checkpoint);
  if (info.step <= 0) throw UsageError(checkpoint.string() + ": checkpoint has not been trained (step 0)");
  const auto source = ModelConfig::from_json(info.config.at("model"));
  if (source.to_json() != config.model.to_json())
    throw ConfigError("finetune config model differs from the checkpoint's model");
  RunOptions opts = options;
  if (!opts.resume) opts.init_weights = checkpoint;
  return run_training(config, data, out, opts);
}

}  // namespace zipmap
