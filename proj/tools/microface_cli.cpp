// microface: dataset generation, training, evaluation, inference and gradient checks.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "microface/gradcheck_suite.hpp"
#include "microface/train.hpp"

namespace fs = std::filesystem;
using namespace microface;

namespace {

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError(path + ": cannot write");
  out << text;
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine 3D facial micro-expression reconstruction on synthetic data"};
  app.require_subcommand(1);

  DatasetOptions data;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", data_out, "Output directory")->required();
  gen->add_option("--num", data.num, "Number of sequences")->check(CLI::PositiveNumber);
  gen->add_option("--seed", data.seed, "Base seed");
  gen->add_option("--height", data.height, "Flow height in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--width", data.width, "Flow width in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--amplitude", data.amplitude, "Peak expression amplitude")->check(CLI::NonNegativeNumber);
  gen->add_option("--frames", data.frames, "Frames per sequence")->check(CLI::Range(2, 1000));

  std::string config_path;
  auto* tr = app.add_subcommand("train", "Train from a JSON config");
  tr->add_option("--config", config_path, "TrainConfig JSON file")->required()->check(CLI::ExistingFile);

  std::string ckpt_path, data_dir, split = "test", report_path;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ckpt_path, "Checkpoint manifest (JSON)")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--out", report_path, "Report JSON path")->required();

  std::string seq_dir, infer_out;
  InferOptions infer_opts;
  auto* inf = app.add_subcommand("infer", "Reconstruct one sequence");
  inf->add_option("--checkpoint", ckpt_path, "Checkpoint manifest (JSON)")->required();
  inf->add_option("--seq", seq_dir, "Sequence directory")->required();
  inf->add_option("--out", infer_out, "Output directory")->required();
  inf->add_option("--model", infer_opts.model_dir, "Face model directory (default: <seq>/../model)");
  inf->add_flag("--disable-dgmd", infer_opts.disable_dgmd, "Skip mesh refinement");

  std::string module;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit mode");
  gc->add_option("--module", module, "Restrict to one module")
      ->check(CLI::IsMember(gradcheck_modules()));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto m = generate_dataset(data_out, data);
      std::cout << "wrote " << m.num << " sequences (" << m.train.size() << " train, " << m.test.size()
                << " test) to " << data_out << "\n";
    } else if (*tr) {
      const auto cfg = load_train_config(config_path);
      const auto res = train(cfg, &std::cerr);
      std::cout << "trained " << res.checkpoint.epochs << " epochs, " << res.checkpoint.steps << " steps; checkpoint "
                << (fs::path(cfg.out_dir) / "checkpoint.json").string() << "\n";
    } else if (*ev) {
      const auto ckpt = load_checkpoint(ckpt_path);
      const auto report = evaluate(ckpt, data_dir, split);
      write_file(report_path, report.to_json().dump(2) + "\n");
      std::cout << "init_rmse " << report.aggregate.init_rmse << " final_rmse " << report.aggregate.final_rmse
                << " static_rmse " << report.aggregate.static_rmse << "\n";
    } else if (*inf) {
      const auto ckpt = load_checkpoint(ckpt_path);
      const auto frames = infer(ckpt, seq_dir, infer_out, infer_opts);
      std::cout << "wrote " << frames << " frames to " << infer_out << "\n";
    } else if (*gc) {
      bool ok = true;
      for (const auto& r : run_gradcheck_suite(module)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " max_rel_error " << r.max_rel_error << " ("
                  << r.probes << " probes, worst " << r.worst << ")\n";
        ok = ok && r.passed;
      }
      if (!ok) {
        std::cerr << "gradcheck: at least one check exceeded the tolerance\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "microface: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
