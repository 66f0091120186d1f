// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. `--only 1,4` restricts the run to selected criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dskd/checkpoint.hpp"
#include "dskd/data.hpp"
#include "dskd/distill.hpp"
#include "dskd/gradcheck.hpp"
#include "dskd/metrics.hpp"
#include "dskd/segnet.hpp"
#include "dskd/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dskd;
using testutil::vec;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

// ---- 1 -----------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto start = Clock::now();
  const GradCheckReport report = run_gradcheck_suite(10);
  const double elapsed = seconds_since(start);
  std::set<std::string> names;
  std::size_t failed = 0, compared = 0, skipped = 0;
  double worst = 0.0;
  for (const auto& r : report.results) {
    names.insert(r.name);
    failed += r.passed() ? 0 : 1;
    compared += r.checked;
    skipped += r.skipped;
    worst = std::max(worst, r.worst_ratio);
  }
  for (const char* required : {"loss_dice", "loss_psdl", "loss_ddl", "loss_total", "conv2d",
                               "bilinear_upsample_x2", "stable_softmax_tau3", "block_sum"}) {
    if (!names.count(required)) return {false, std::string("missing check ") + required};
  }
  Outcome o;
  o.pass = report.passed() && elapsed < 60.0;
  o.detail = std::to_string(report.results.size() - failed) + "/" + std::to_string(report.results.size()) +
             " checks over 10 seeds, " + std::to_string(compared) + " elements compared, " +
             std::to_string(skipped) + " on non-smooth stencils" +
             fmt(", worst err/tol %.3g, %.1f s", worst, elapsed);
  return o;
}

// ---- 2 -----------------------------------------------------------------------

Outcome ddl_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> tau_dist(0.5, 5.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t size = trial % 2 ? 16 : 8;
    const std::size_t grids[] = {1, 2, 4, 8};
    DistillConfig cfg;
    cfg.grid = grids[trial % (size == 16 ? 4 : 3)];
    cfg.tau = tau_dist(rng);
    cfg.normalize_counts = trial % 3 != 1;
    cfg.kl_direction = trial % 5 == 4 ? KlDirection::kTeacherStudent : KlDirection::kStudentTeacher;
    std::vector<Tensor> s, t;
    std::vector<oracle::Vec> sv, tv;
    for (int depth = 0; depth < 2; ++depth) {
      s.push_back(testutil::uniform(rng, {1, size, size}, 0, 1));
      t.push_back(testutil::uniform(rng, {1, size, size}, 0, 1));
      sv.push_back(vec(s.back()));
      tv.push_back(vec(t.back()));
    }
    oracle::DdlParams p;
    p.grid = cfg.grid;
    p.tau = cfg.tau;
    p.normalize = cfg.normalize_counts;
    p.teacher_first = cfg.kl_direction == KlDirection::kTeacherStudent;
    const double got = ddl(s, t, cfg).item();
    const double want = oracle::ddl(sv, tv, size, size, p);
    worst = std::max(worst, std::abs(got - want));
  }
  const double elapsed = seconds_since(start);
  return {worst <= 1e-9 && elapsed < 10.0, fmt("100 cases, max |diff| %.3g, %.2f s", worst, elapsed)};
}

// ---- 3 -----------------------------------------------------------------------

Outcome fixed_point() {
  std::mt19937_64 rng(77);
  double worst_ddl = 0.0;
  double worst_psdl = 0.0;
  for (int k = 0; k < 10; ++k) {
    const NetworkConfig ncfg{2 + k % 2, 4, 1, 16, 16};
    SegNetwork net(ncfg, 500 + k);
    const TeacherSnapshot self(net, 1);
    const Tensor x = testutil::uniform(rng, {1, 16, 16}, 0, 1);
    const Tensor y = testutil::binary(rng, {1, 16, 16}, 0.3);
    const auto s = net.forward(x);
    const auto t = self.forward(x);
    DistillConfig cfg;
    cfg.grid = k % 2 ? 4 : 2;
    worst_ddl = std::max(worst_ddl, ddl(s.side_outputs, t.side_outputs, cfg).item());
    const double loss = psdl(s.prediction, soften_label(t.prediction, y, 1.0)).item();
    const auto p = vec(s.prediction);
    worst_psdl = std::max(worst_psdl, std::abs(loss - oracle::bce(p, p, 1e-7)));
  }
  return {worst_ddl <= 1e-9 && worst_psdl <= 1e-12,
          fmt("10 networks, max ddl %.3g, max |psdl - entropy| %.3g", worst_ddl, worst_psdl)};
}

// ---- 4 -----------------------------------------------------------------------

Outcome kl_invariants() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> tau_dist(0.5, 5.0);
  double worst_sum = 0.0;
  double min_entry = 1.0;
  double min_kl = 1e300;
  double worst_self = 0.0;
  auto random_prob = [&](std::size_t size, std::size_t grid, bool normalize, double tau) {
    Tensor map = testutil::uniform(rng, {1, size, size}, 0, 1);
    return prob_vector(patch_counts(map, grid, CountMode::kSoft), tau, normalize);
  };
  for (int i = 0; i < 1000; ++i) {
    const bool normalize = i % 2 == 0;
    const double tau = tau_dist(rng);
    const std::size_t grid = i % 3 == 0 ? 2 : 4;
    Tensor p = random_prob(16, grid, normalize, tau);
    Tensor q = random_prob(16, grid, normalize, tau);
    for (const Tensor& v : {p, q}) {
      double total = 0.0;
      for (double e : v.data()) {
        total += e;
        min_entry = std::min(min_entry, e);
      }
      worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    }
    min_kl = std::min(min_kl, kl_div(p, q).item());
    worst_self = std::max(worst_self, kl_div(p, p).item());
  }
  // Raw counts on large (128x128) patches.
  std::vector<double> z(32);
  for (std::size_t i = 0; i < 16; ++i) {
    const double fg = std::floor(16384.0 * static_cast<double>(i) / 15.0);
    z[2 * i] = fg;
    z[2 * i + 1] = 16384.0 - fg;
  }
  Tensor big = prob_vector(CountMatrix{Tensor::from_data({16, 2}, z), 16384}, 3.0, false);
  double total = 0.0;
  bool finite = true;
  for (double e : big.data()) {
    total += e;
    finite = finite && std::isfinite(e);
  }
  worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  const bool pass = finite && worst_sum <= 1e-9 && min_entry > 0.0 && min_kl >= 0.0 && worst_self <= 1e-12;
  return {pass, fmt("max |sum-1| %.3g, min entry %.3g, min kl %.3g, max kl(P,P) %.3g", worst_sum,
                    min_entry, min_kl, worst_self)};
}

// ---- 5 -----------------------------------------------------------------------

Outcome schedules() {
  std::size_t mismatches = 0;
  for (int T : {1, 7, 30, 100}) {
    for (double aT : {0.0, 0.3, 0.5, 1.0}) {
      for (int t = 1; t <= T; ++t) {
        if (alpha_at(t, T, aT) != aT * t / T) ++mismatches;
      }
      if (alpha_at(T, T, aT) != aT) ++mismatches;
    }
  }
  TrainConfig cfg;
  double worst = 0.0;
  for (int t = 1; t <= 30; ++t) {
    const double want = t <= 10 ? 1e-3 : (t <= 20 ? 3e-4 : 9e-5);
    worst = std::max(worst, std::abs(lr_at(t, cfg) - want) / want);
  }
  return {mismatches == 0 && worst <= 1e-12,
          fmt("alpha mismatches %.0f, lr max rel err %.3g", static_cast<double>(mismatches), worst)};
}

// ---- 6 -----------------------------------------------------------------------

Outcome algorithm_conformance() {
  testutil::TempDir dir("accept6");
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  cfg.network = NetworkConfig{2, 4, 1, 16, 16};
  cfg.synthetic_count = 12;
  cfg.seed = 6;
  cfg.keep_epoch_checkpoints = true;
  cfg.output_dir = dir.path().string();
  const Dataset data = prepare_dataset(cfg);
  const Tensor probe = data.samples.at(data.split.val.at(0)).image;

  std::size_t epoch1 = 0, later = 0, problems = 0;
  std::string first_problem;
  auto problem = [&](const std::string& what) {
    if (problems++ == 0) first_problem = what;
  };
  TrainObserver obs;
  obs.on_batch = [&](const BatchRecord& r, const TeacherSnapshot* teacher) {
    if (r.epoch == 1) {
      ++epoch1;
      if (teacher) problem("teacher present in epoch 1");
      if (r.ddl != 0.0 || r.psdl != 0.0 || r.total != r.dice) problem("epoch-1 components");
      return;
    }
    ++later;
    if (!teacher) return problem("no teacher at epoch " + std::to_string(r.epoch));
    if (teacher->epoch() != r.epoch - 1) problem("teacher epoch label");
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", r.epoch - 1);
    const SegNetwork saved = load_network(Checkpoint::load(dir / name));
    const auto want = saved.forward(probe);
    const auto got = teacher->forward(probe);
    for (std::size_t i = 0; i < want.side_outputs.size(); ++i) {
      if (vec(want.side_outputs[i]) != vec(got.side_outputs[i])) problem("teacher output differs from checkpoint");
    }
    for (const auto& p : teacher->network().parameters()) {
      if (p.value.requires_grad() || p.value.has_grad()) problem("teacher parameter " + p.name + " has gradient");
    }
  };
  TrainOptions opts;
  opts.observer = &obs;
  train(cfg, data, opts);
  const bool pass = problems == 0 && epoch1 > 0 && later > 0;
  return {pass, std::to_string(epoch1) + " epoch-1 batches, " + std::to_string(later) +
                    " later batches checked" + (problems ? ", first problem: " + first_problem : "")};
}

// ---- 7 -----------------------------------------------------------------------

Outcome metrics_oracle() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> density(0.05, 0.6);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    Tensor pred = testutil::uniform(rng, {1, 16, 16}, 0, 1);
    Tensor gt = testutil::binary(rng, {1, 16, 16}, density(rng));
    const auto ref = oracle::set_metrics(vec(pred), vec(gt), 0.5);
    if (ref.tp + ref.fn == 0) {
      --i;
      continue;
    }
    const ConfusionCounts c = confusion(pred, gt);
    const SegMetrics m = compute_metrics(c);
    const bool same = c.tp == ref.tp && c.tn == ref.tn && c.fp == ref.fp && c.fn == ref.fn &&
                      m.dsc == ref.dsc && m.acc == ref.acc && m.sen == ref.sen && m.iou == ref.iou;
    if (!same) ++mismatches;
  }
  const SegMetrics w = compute_metrics(ConfusionCounts{2, 12, 1, 1});
  auto four = [](double v) { return std::round(v * 1e4) / 1e4; };
  const bool worked = four(w.dsc) == 0.6667 && four(w.acc) == 0.875 && four(w.sen) == 0.6667 && four(w.iou) == 0.5;
  return {mismatches == 0 && worked,
          fmt("1000 pairs, %.0f mismatches; ", static_cast<double>(mismatches)) +
              fmt("worked example %.4f/%.4f/%.4f/%.4f", w.dsc, w.acc, w.sen, w.iou)};
}

// ---- 8 -----------------------------------------------------------------------

Outcome smoke_training() {
  const auto start = Clock::now();
  testutil::TempDir dir("accept8");
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.network = NetworkConfig{3, 8, 1, 64, 64};
  cfg.synthetic_count = 200;
  const Dataset data = prepare_dataset(cfg);
  const auto test_set = data.partition(data.split.test);

  auto run = [&](LossTerms terms, const std::string& tag) {
    TrainConfig c = cfg;
    c.loss_terms = terms;
    c.output_dir = (dir / tag).string();
    const TrainResult r = train(c, data);
    return evaluate(r.final_network, test_set).dsc;
  };
  const double full = run(LossTerms::kFull, "full");
  const double dice_only = run(LossTerms::kDiceOnly, "dice");
  const double elapsed = seconds_since(start);
  const bool pass = full >= 0.80 && dice_only <= full + 0.02 && elapsed < 1800.0;
  return {pass, fmt("test DSC full %.4f, dice-only %.4f, %.0f s,", full, dice_only, elapsed) +
                    fmt(" split %.0f/%.0f/%.0f", static_cast<double>(data.split.train.size()),
                        static_cast<double>(data.split.val.size()), static_cast<double>(data.split.test.size()))};
}

// ---- 9 -----------------------------------------------------------------------

Outcome determinism() {
  testutil::TempDir dir("accept9");
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  cfg.network = NetworkConfig{2, 4, 1, 16, 16};
  cfg.synthetic_count = 12;
  cfg.seed = 9;
  const Dataset data = prepare_dataset(cfg);

  auto in = [&](const std::string& tag) {
    TrainConfig c = cfg;
    c.output_dir = (dir / tag).string();
    return c;
  };
  const TrainResult a = train(in("a"), data);
  const TrainResult b = train(in("b"), data);
  const bool same_logs = a.logs == b.logs && a.logs.size() == 4;

  // Round trip of the trained network through the checkpoint format.
  Checkpoint ckpt;
  store_network(ckpt, a.final_network);
  ckpt.save(dir / "rt.ckpt");
  const SegNetwork back = load_network(Checkpoint::load(dir / "rt.ckpt"));
  bool bitwise = back.parameters().size() == a.final_network.parameters().size();
  for (std::size_t k = 0; bitwise && k < back.parameters().size(); ++k) {
    bitwise = vec(back.parameters()[k].value) == vec(a.final_network.parameters()[k].value);
  }

  bool resumed = true;
  for (int k : {1, 2, 3}) {
    const TrainConfig c = in("resume" + std::to_string(k));
    TrainOptions stop;
    stop.stop_after_epoch = k;
    train(c, data, stop);
    TrainOptions cont;
    cont.resume_from = std::filesystem::path(c.output_dir) / "last.ckpt";
    const TrainResult r = train(c, data, cont);
    bool params = true;
    for (std::size_t p = 0; p < r.final_network.parameters().size(); ++p) {
      params = params && vec(r.final_network.parameters()[p].value) == vec(a.final_network.parameters()[p].value);
    }
    resumed = resumed && params && r.logs == a.logs;
  }
  return {same_logs && bitwise && resumed,
          std::string("identical logs: ") + (same_logs ? "yes" : "no") + ", bitwise round trip: " +
              (bitwise ? "yes" : "no") + ", resume at 1/2/3 matches: " + (resumed ? "yes" : "no")};
}

// ---- 10 ----------------------------------------------------------------------

Outcome io_conformance() {
  std::vector<std::string> problems;
  auto bytes = [](const std::string& s) { return std::vector<unsigned char>(s.begin(), s.end()); };

  std::string p5 = "P5 2 1 255\n";
  p5.push_back(static_cast<char>(0));
  p5.push_back(static_cast<char>(255));
  if (vec(parse_pgm(bytes(p5))) != std::vector<double>{0.0, 1.0}) problems.push_back("P5 fixture");
  const Tensor p2 = parse_pgm(bytes("P2\n# c\n2 2\n10\n0 5\n10 2\n"));
  if (p2.shape() != Shape{1, 2, 2} || vec(p2) != std::vector<double>{0.0, 0.5, 1.0, 0.2}) {
    problems.push_back("P2 fixture");
  }

  testutil::TempDir dir("accept10");
  std::mt19937_64 rng(10);
  double worst = 0.0;
  for (int i = 0; i < 5; ++i) {
    const Tensor img = testutil::uniform(rng, {1, 19, 23}, 0, 1);
    save_pgm(img, dir / "x.pgm");
    const Tensor back = load_pgm(dir / "x.pgm");
    for (std::size_t k = 0; k < img.numel(); ++k) worst = std::max(worst, std::abs(img[k] - back[k]));
  }
  if (worst > 1.0 / 255) problems.push_back("round trip");

  auto kind_of = [&](const std::string& content) -> int {
    try {
      parse_pgm(bytes(content));
    } catch (const PgmError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  if (kind_of("P6 1 1 255\n\x01\x02\x03") != static_cast<int>(PgmErrorKind::kUnsupportedMagic)) problems.push_back("bad magic");
  if (kind_of("P5 2 2 255\n\x01") != static_cast<int>(PgmErrorKind::kTruncated)) problems.push_back("truncated");
  if (kind_of("P5 1 1 1000\n\x01\x01") != static_cast<int>(PgmErrorKind::kMaxvalTooLarge)) problems.push_back("maxval");
  try {
    parse_pgm(bytes("P6 1 1 255\n\x01\x02\x03"));
  } catch (const PgmError& e) {
    if (std::string(e.what()).find("unsupported magic") == std::string::npos) problems.push_back("magic message");
  }
  std::string detail = fmt("round-trip max error %.3g (bound %.3g)", worst, 1.0 / 255);
  for (const auto& p : problems) detail += "; failed: " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"DDL straight-line oracle", ddl_oracle},
      {"self-distillation fixed point", fixed_point},
      {"KL/softmax invariants", kl_invariants},
      {"alpha and learning-rate schedules", schedules},
      {"training loop conformance", algorithm_conformance},
      {"metrics oracle", metrics_oracle},
      {"smoke training", smoke_training},
      {"determinism and persistence", determinism},
      {"PGM I/O conformance", io_conformance},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
