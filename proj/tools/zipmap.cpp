#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "zipmap/cli.hpp"

namespace fs = std::filesystem;
using namespace zipmap;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

std::vector<Index> parse_counts(const std::string& text) {
  std::vector<Index> out;
  std::istringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v < 1) throw UsageError("--views entry '" + item + "' is not a positive integer");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zipmap: stateful feed-forward multi-view reconstruction"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "single-threaded, reproducible execution");

  GenDataOptions gen;
  Index size = 32;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate synthetic scene bundles");
  gen_cmd->add_option("--seed", gen.seed)->required();
  gen_cmd->add_option("--scenes", gen.scenes)->required();
  gen_cmd->add_option("--views", gen.views)->required();
  gen_cmd->add_option("--size", size, "square image size in pixels")->default_val(32);
  gen_cmd->add_option("--difficulty", gen.difficulty, "camera arc: 0 narrow, 1 medium, 2 wide")->default_val(0);
  gen_cmd->add_option("--out", gen.out)->required();

  fs::path config_path, data_dir, out_dir, from;
  std::optional<std::int64_t> steps;
  auto* train_cmd = app.add_subcommand("train", "train from a JSON config");
  auto* ft_cmd = app.add_subcommand("finetune-query", "finetune a trained checkpoint with query targets");
  fs::path resume;
  for (auto* cmd : {train_cmd, ft_cmd}) {
    cmd->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
    cmd->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", out_dir)->required();
    cmd->add_option("--steps", steps, "cap the schedule at this many steps");
  }
  train_cmd->add_option("--from", from, "checkpoint to resume from")->check(CLI::ExistingDirectory);
  ft_cmd->add_option("--from", from, "trained checkpoint to start from")->required()->check(CLI::ExistingDirectory);
  ft_cmd->add_option("--resume", resume, "finetuning checkpoint to resume from")->check(CLI::ExistingDirectory);

  ReconOptions rec;
  auto* recon_cmd = app.add_subcommand("recon", "reconstruct a scene bundle");
  recon_cmd->add_option("--ckpt", rec.checkpoint)->required()->check(CLI::ExistingDirectory);
  recon_cmd->add_option("--scene", rec.scene)->required()->check(CLI::ExistingDirectory);
  recon_cmd->add_option("--out", rec.out)->required();
  recon_cmd->add_flag("--streaming", rec.streaming, "feed views one at a time");

  QueryOptions q;
  auto* query_cmd = app.add_subcommand("query", "render a novel view from a scene state file");
  query_cmd->add_option("--state", q.state)->required()->check(CLI::ExistingDirectory);
  query_cmd->add_option("--camera", q.camera, "9 numbers qw,qx,qy,qz,tx,ty,tz,fx,fy or <bundle>#<view>")->required();
  query_cmd->add_option("--out", q.out)->required();
  query_cmd->add_option("--ckpt", q.checkpoint, "checkpoint (default: the one recorded in the state)");

  EvalOptions ev;
  std::string metrics = "ate,auc,chamfer,depth";
  auto* eval_cmd = app.add_subcommand("eval", "score predicted bundles against ground truth");
  eval_cmd->add_option("--pred", ev.pred)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--gt", ev.gt)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--metrics", metrics)->default_val(metrics);
  eval_cmd->add_option("--out", ev.out)->required();

  BenchOptions bo;
  std::string bench_views = "8,16,32,64,128", bench_mode = "ttt";
  fs::path bench_out;
  auto* bench_cmd = app.add_subcommand("bench", "forward-pass runtime against view count");
  bench_cmd->add_option("--views", bench_views)->default_val(bench_views);
  bench_cmd->add_option("--mode", bench_mode)->check(CLI::IsMember({"ttt", "dense-attn"}))->default_val(bench_mode);
  bench_cmd->add_option("--repeats", bo.repeats)->default_val(3);
  bench_cmd->add_option("--warmups", bo.warmups)->default_val(2);
  bench_cmd->add_option("--size", bo.size)->default_val(32);
  bench_cmd->add_option("--seed", bo.seed)->default_val(0);
  bench_cmd->add_option("--out", bench_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    configure_threads(deterministic);
    if (*gen_cmd) {
      gen.height = gen.width = size;
      const auto dirs = gen_data(gen);
      std::cout << "wrote " << dirs.size() << " bundles to " << gen.out.string() << '\n';
    } else if (*train_cmd || *ft_cmd) {
      auto config = TrainConfig::load(config_path);
      if (steps) config = with_total_steps(config, *steps);
      const auto data = load_training_data(data_dir);
      RunOptions opts;
      opts.on_step = [](const StepRecord& r) {
        if (r.step % 100 == 0) std::cout << r.to_json().dump() << '\n' << std::flush;
      };
      fs::path final_ckpt;
      if (*train_cmd) {
        if (!from.empty()) opts.resume = from;
        final_ckpt = run_training(config, data, out_dir, opts);
      } else {
        if (!resume.empty()) opts.resume = resume;
        final_ckpt = finetune_query(config, from, data, out_dir, opts);
      }
      std::cout << "final checkpoint " << final_ckpt.string() << '\n';
    } else if (*recon_cmd) {
      const auto r = recon(rec);
      std::cout << "reconstructed " << r.prediction.views << " views into " << rec.out.string() << '\n';
    } else if (*query_cmd) {
      const auto r = query(q);
      std::cout << "query latency " << r.seconds * 1e3 << " ms\n";
    } else if (*eval_cmd) {
      ev.metrics = parse_metrics(metrics);
      std::cout << eval(ev).dump(2) << '\n';
    } else if (*bench_cmd) {
      bo.views = parse_counts(bench_views);
      bo.mode = mixer_from_string(bench_mode);
      const auto report = bench(bo);
      fs::create_directories(bench_out);
      write_file(bench_out / ("bench_" + bench_mode + ".json"), report.to_json().dump(2) + "\n");
      write_file(bench_out / ("bench_" + bench_mode + ".csv"), report.to_csv());
      std::cout << report.to_csv() << "linear R^2 " << report.linear.r2 << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}
