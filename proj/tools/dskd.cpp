// Command-line front end: data generation, training, evaluation, prediction,
// gradient checking and hyperparameter sweeps.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dskd/checkpoint.hpp"
#include "dskd/data.hpp"
#include "dskd/gradcheck.hpp"
#include "dskd/train.hpp"

namespace fs = std::filesystem;
using namespace dskd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Folds the config file (if any) and trailing --key=value flags into a config.
TrainConfig build_config(const std::string& config_path, const std::vector<std::string>& extras,
                         TrainConfig base = {}) {
  TrainConfig cfg = config_path.empty() ? base : load_train_config(config_path);
  for (const auto& arg : extras) {
    if (arg.rfind("--", 0) != 0 || arg.find('=') == std::string::npos) {
      throw UsageError("unexpected argument '" + arg + "' (overrides take the form --key=value)");
    }
    const auto eq = arg.find('=');
    const std::string key = arg.substr(2, eq - 2);
    try {
      apply_override(cfg, key, arg.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  return cfg;
}

std::vector<std::size_t> select_partition(const Dataset& data, const std::string& name) {
  if (name == "train") return data.split.train;
  if (name == "val") return data.split.val;
  if (name == "test") return data.split.test;
  if (name == "all") {
    std::vector<std::size_t> all(data.samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  throw UsageError("unknown partition '" + name + "' (expected train|val|test|all)");
}

void print_metrics(std::ostream& os, const std::string& label, const SegMetrics& m) {
  os << std::fixed << std::setprecision(4) << label << "  DSC " << m.dsc << "  ACC " << m.acc
     << "  SEN " << m.sen << "  IOU " << m.iou << (m.degenerate ? "  (degenerate cases present)" : "")
     << '\n';
  os.unsetf(std::ios::floatfield);
}

int cmd_generate(const fs::path& out, int count, int size, std::uint64_t seed) {
  const auto samples = generate_synthetic(seed, count, size);
  save_directory(samples, out);
  std::cout << "wrote " << samples.size() << " samples to " << out << '\n';
  return kExitOk;
}

int cmd_train(const TrainConfig& cfg, const std::string& resume) {
  const Dataset data = prepare_dataset(cfg);
  std::cout << "samples: " << data.samples.size() << " (train " << data.split.train.size()
            << ", val " << data.split.val.size() << ", test " << data.split.test.size() << ")\n";
  TrainObserver observer;
  observer.on_epoch_end = [](const EpochLog& e, const SegNetwork&) {
    std::cout << "epoch " << std::setw(3) << e.epoch << "  loss " << std::setprecision(5)
              << e.train_loss << " (ddl " << e.train_ddl << ", psdl " << e.train_psdl << ", dice "
              << e.train_dice << ")  val DSC " << e.val.dsc << "  lr " << e.lr << "  alpha "
              << e.alpha << std::endl;
  };
  TrainOptions options;
  options.observer = &observer;
  if (!resume.empty()) {
    if (!fs::exists(resume)) throw UsageError("checkpoint '" + resume + "' does not exist");
    options.resume_from = resume;
  }
  const TrainResult result = train(cfg, data, options);
  const SegMetrics test = evaluate(result.final_network, data.partition(data.split.test), cfg.averaging);
  print_metrics(std::cout, "test (final)", test);
  std::cout << "best val DSC " << result.best_val_dsc << " at epoch " << result.best_epoch << '\n'
            << "outputs in " << cfg.output_dir << '\n';
  return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& config_path,
                 const std::vector<std::string>& extras, const std::string& partition,
                 const std::string& out_csv) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint '" + checkpoint + "' does not exist");
  const Checkpoint ckpt = Checkpoint::load(checkpoint);
  TrainConfig base;
  if (ckpt.meta.contains("train_config")) base = ckpt.meta.at("train_config").get<TrainConfig>();
  const TrainConfig cfg = build_config(config_path, extras, base);
  const SegNetwork net = load_network(ckpt);
  if (!(net.config() == cfg.network)) {
    throw std::invalid_argument("checkpoint network does not match the configured network");
  }
  const Dataset data = prepare_dataset(cfg);
  const auto indices = select_partition(data, partition);
  if (indices.empty()) throw std::invalid_argument("partition '" + partition + "' is empty");
  const SegMetrics m = evaluate(net, data.partition(indices), cfg.averaging);

  std::ostringstream label;
  label << partition << " (" << indices.size() << " images, "
        << (cfg.averaging == Averaging::kMacro ? "macro" : "micro") << ")";
  print_metrics(std::cout, label.str(), m);

  const fs::path csv = out_csv.empty() ? fs::path(checkpoint).parent_path() / "metrics.csv" : fs::path(out_csv);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw UsageError("cannot write '" + csv.string() + "'");
  out << "partition,averaging,images,dsc,acc,sen,iou,degenerate\n"
      << std::setprecision(17) << partition << ','
      << (cfg.averaging == Averaging::kMacro ? "macro" : "micro") << ',' << indices.size() << ','
      << m.dsc << ',' << m.acc << ',' << m.sen << ',' << m.iou << ',' << (m.degenerate ? 1 : 0)
      << '\n';
  std::cout << "metrics written to " << csv << '\n';
  return kExitOk;
}

int cmd_predict(const std::string& checkpoint, const std::string& image_path,
                const std::string& out_path, double threshold) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint '" + checkpoint + "' does not exist");
  const Checkpoint ckpt = Checkpoint::load(checkpoint);
  const SegNetwork net = load_network(ckpt);
  const Tensor raw = load_pgm(image_path);
  // Same padding rule as training data loaded from a directory.
  std::size_t multiple = std::size_t{1} << (net.depth() - 1);
  if (ckpt.meta.contains("train_config")) {
    multiple = std::lcm(multiple, ckpt.meta["train_config"].get<TrainConfig>().distill.grid);
  }
  const Tensor image = pad_to_multiple(raw, multiple);
  const auto& nc = net.config();
  if (image.dim(1) != static_cast<std::size_t>(nc.height) ||
      image.dim(2) != static_cast<std::size_t>(nc.width)) {
    throw ShapeError("predict", "image size", static_cast<std::size_t>(nc.height * nc.width),
                     image.dim(1) * image.dim(2));
  }
  Tensor pred;
  {
    NoGradGuard guard;
    pred = net.forward(image, false).prediction;
  }
  // Crop back to the input extent and binarize.
  const std::size_t h = raw.dim(1), w = raw.dim(2), pw = image.dim(2);
  std::vector<Real> mask(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) mask[i * w + j] = pred[i * pw + j] >= threshold ? 1.0 : 0.0;
  }
  save_pgm(Tensor::from_data({1, h, w}, std::move(mask)), out_path);
  std::cout << "mask written to " << out_path << '\n';
  return kExitOk;
}

int cmd_gradcheck(int seeds, bool verbose) {
  const GradCheckReport report = run_gradcheck_suite(seeds);
  std::size_t failed = 0;
  for (const auto& r : report.results) {
    if (!r.passed()) ++failed;
    if (verbose || !r.passed()) {
      std::cout << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(26) << r.name
                << " seed " << std::setw(3) << r.seed << " checked " << std::setw(5) << r.checked
                << " skipped " << std::setw(3) << r.skipped
                << " max|err| " << std::scientific << std::setprecision(2) << r.max_abs_error
                << " worst ratio " << r.worst_ratio << std::defaultfloat << '\n';
    }
  }
  std::cout << report.results.size() - failed << "/" << report.results.size()
            << " gradient checks passed\n";
  return report.passed() ? kExitOk : kExitValidation;
}

int cmd_sweep(const std::string& axis, const std::vector<double>& values, TrainConfig cfg,
              const std::string& out_csv) {
  if (axis != "tau" && axis != "n" && axis != "alpha") {
    throw UsageError("unknown sweep axis '" + axis + "' (expected tau|n|alpha)");
  }
  if (values.empty()) throw UsageError("sweep needs at least one value");
  std::vector<TrainConfig> runs;
  for (double v : values) {
    TrainConfig run = cfg;
    std::ostringstream tag;
    tag << axis << '_' << v;
    run.output_dir = (fs::path(cfg.output_dir) / tag.str()).string();
    if (axis == "tau") {
      run.distill.tau = v;
    } else if (axis == "alpha") {
      run.distill.alpha_T = v;
    } else {
      const auto g = static_cast<std::size_t>(std::llround(std::sqrt(v)));
      if (g == 0 || static_cast<double>(g * g) != v) {
        throw UsageError("patch count " + std::to_string(v) + " is not a perfect square");
      }
      run.distill.grid = g;
    }
    run.validate();
    runs.push_back(run);
  }

  const fs::path csv = out_csv.empty() ? fs::path(cfg.output_dir) / ("sweep_" + axis + ".csv") : fs::path(out_csv);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw UsageError("cannot write '" + csv.string() + "'");
  out << axis << ",dsc,acc,sen,iou\n";

  const Dataset data = prepare_dataset(cfg);
  for (std::size_t k = 0; k < runs.size(); ++k) {
    std::cout << "== " << axis << " = " << values[k] << " ==" << std::endl;
    const TrainResult result = train(runs[k], data);
    const SegMetrics m = evaluate(result.final_network, data.partition(data.split.test), cfg.averaging);
    print_metrics(std::cout, "test", m);
    out << values[k] << ',' << std::setprecision(17) << m.dsc << ',' << m.acc << ',' << m.sen
        << ',' << m.iou << '\n'
        << std::setprecision(6);
    out.flush();
  }
  std::cout << "sweep table written to " << csv << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep self-knowledge distillation for vessel segmentation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate-data", "Write synthetic vessel images and masks as PGM");
  std::string gen_out;
  int gen_count = 200, gen_size = 64;
  std::uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "Output directory (images/ and masks/)")->required();
  gen->add_option("--count", gen_count, "Number of samples");
  gen->add_option("--size", gen_size, "Image side length");
  gen->add_option("--seed", gen_seed, "Generator seed");

  auto* tr = app.add_subcommand("train", "Train a network; extra --key=value flags override the config");
  std::string tr_config, tr_resume;
  tr->add_option("--config", tr_config, "JSON configuration file");
  tr->add_option("--resume", tr_resume, "Resume from a last.ckpt state checkpoint");
  tr->allow_extras();

  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on a data partition");
  std::string ev_ckpt, ev_config, ev_partition = "test", ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--config", ev_config, "Configuration (defaults to the checkpoint's)");
  ev->add_option("--partition", ev_partition, "train|val|test|all");
  ev->add_option("--out", ev_out, "Metrics CSV path (default: metrics.csv next to the checkpoint)");
  ev->allow_extras();

  auto* pr = app.add_subcommand("predict", "Segment one PGM image into a binary P5 mask");
  std::string pr_ckpt, pr_image, pr_out;
  double pr_threshold = 0.5;
  pr->add_option("--checkpoint", pr_ckpt, "Checkpoint file")->required();
  pr->add_option("--image", pr_image, "Input PGM")->required();
  pr->add_option("--out", pr_out, "Output mask PGM")->required();
  pr->add_option("--threshold", pr_threshold, "Foreground threshold");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and loss");
  int gc_seeds = 10;
  bool gc_verbose = false;
  gc->add_option("--seeds", gc_seeds, "Number of random seeds");
  gc->add_flag("--verbose", gc_verbose, "Print every check");

  auto* sw = app.add_subcommand("sweep", "Train once per value of tau, n or alpha and tabulate");
  std::string sw_axis, sw_config, sw_out;
  std::vector<double> sw_values;
  sw->add_option("--axis", sw_axis, "tau|n|alpha")->required();
  sw->add_option("--values", sw_values, "Comma-separated values")->required()->delimiter(',');
  sw->add_option("--config", sw_config, "JSON configuration file");
  sw->add_option("--out", sw_out, "CSV path");
  sw->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(gen_out, gen_count, gen_size, gen_seed);
    if (*tr) return cmd_train(build_config(tr_config, tr->remaining()), tr_resume);
    if (*ev) return cmd_evaluate(ev_ckpt, ev_config, ev->remaining(), ev_partition, ev_out);
    if (*pr) return cmd_predict(pr_ckpt, pr_image, pr_out, pr_threshold);
    if (*gc) return cmd_gradcheck(gc_seeds, gc_verbose);
    if (*sw) return cmd_sweep(sw_axis, sw_values, build_config(sw_config, sw->remaining()), sw_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const PgmError& e) {
    std::cerr << "image error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}
