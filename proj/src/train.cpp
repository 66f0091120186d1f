#include "dskd/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace dskd {

using nlohmann::json;

void to_json(json& j, const SegMetrics& m) {
  j = {{"dsc", m.dsc}, {"acc", m.acc}, {"sen", m.sen}, {"iou", m.iou}, {"degenerate", m.degenerate}};
}

void from_json(const json& j, SegMetrics& m) {
  m.dsc = j.at("dsc").get<double>();
  m.acc = j.at("acc").get<double>();
  m.sen = j.at("sen").get<double>();
  m.iou = j.at("iou").get<double>();
  m.degenerate = j.at("degenerate").get<bool>();
}

namespace {

std::string lr_mode_str(LrMode m) { return m == LrMode::kCompound ? "compound" : "clamp"; }

LrMode parse_lr_mode(const std::string& s) {
  if (s == "compound") return LrMode::kCompound;
  if (s == "clamp") return LrMode::kClamp;
  throw std::invalid_argument("unknown lr_mode '" + s + "' (expected compound|clamp)");
}

std::string averaging_str(Averaging a) { return a == Averaging::kMacro ? "macro" : "micro"; }

DistillConfig effective_distill(const TrainConfig& cfg) {
  DistillConfig d = cfg.distill;
  d.use_ddl = cfg.loss_terms == LossTerms::kFull || cfg.loss_terms == LossTerms::kDiceDdl;
  d.use_psdl = cfg.loss_terms == LossTerms::kFull || cfg.loss_terms == LossTerms::kDicePsdl;
  return d;
}

// Everything needed to continue a run bit-for-bit.
struct RunState {
  SegNetwork net;
  AdamW optimizer;
  int epoch = 0;  // last completed epoch
  double best_val_dsc = -1.0;
  int best_epoch = 0;
  std::vector<EpochLog> logs;
};

Checkpoint state_checkpoint(const TrainConfig& cfg, const RunState& s) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "train_state";
  ckpt.meta["train_config"] = cfg;
  ckpt.meta["epoch"] = s.epoch;
  ckpt.meta["best_val_dsc"] = s.best_val_dsc;
  ckpt.meta["best_epoch"] = s.best_epoch;
  ckpt.meta["adam_steps"] = s.optimizer.steps();
  ckpt.meta["logs"] = s.logs;
  store_network(ckpt, s.net);
  const auto& params = s.net.parameters();
  const auto& m = s.optimizer.first_moments();
  const auto& v = s.optimizer.second_moments();
  for (std::size_t k = 0; k < m.size(); ++k) {
    ckpt.arrays.push_back({"adam_m/" + params[k].name, params[k].value.shape(), m[k]});
    ckpt.arrays.push_back({"adam_v/" + params[k].name, params[k].value.shape(), v[k]});
  }
  return ckpt;
}

RunState restore_state(const Checkpoint& ckpt, const TrainConfig& cfg) {
  if (ckpt.meta.value("kind", "") != "train_state") {
    throw CheckpointError("checkpoint does not hold a resumable training state");
  }
  const TrainConfig stored = ckpt.meta.at("train_config").get<TrainConfig>();
  json a = stored;
  json b = cfg;
  for (const char* key : {"output_dir", "keep_epoch_checkpoints"}) {
    a.erase(key);
    b.erase(key);
  }
  if (a != b) {
    throw std::invalid_argument("resume: configuration differs from the one stored in the checkpoint");
  }
  RunState s{load_network(ckpt), AdamW(AdamWHyper{cfg.weight_decay}), 0, -1.0, 0, {}};
  s.epoch = ckpt.meta.at("epoch").get<int>();
  s.best_val_dsc = ckpt.meta.at("best_val_dsc").get<double>();
  s.best_epoch = ckpt.meta.at("best_epoch").get<int>();
  s.logs = ckpt.meta.at("logs").get<std::vector<EpochLog>>();
  s.optimizer.set_steps(ckpt.meta.at("adam_steps").get<std::int64_t>());
  if (s.optimizer.steps() > 0) {
    for (const auto& p : s.net.parameters()) {
      s.optimizer.first_moments().push_back(ckpt.array("adam_m/" + p.name).values);
      s.optimizer.second_moments().push_back(ckpt.array("adam_v/" + p.name).values);
    }
  }
  return s;
}

Checkpoint model_checkpoint(const TrainConfig& cfg, const SegNetwork& net, int epoch,
                            const SegMetrics* val) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "model";
  ckpt.meta["train_config"] = cfg;
  ckpt.meta["epoch"] = epoch;
  if (val) ckpt.meta["val"] = *val;
  store_network(ckpt, net);
  return ckpt;
}

}  // namespace

std::string to_string(LossTerms terms) {
  switch (terms) {
    case LossTerms::kFull: return "full";
    case LossTerms::kDiceOnly: return "dice";
    case LossTerms::kDiceDdl: return "dice+ddl";
    case LossTerms::kDicePsdl: return "dice+psdl";
  }
  return "full";
}

LossTerms parse_loss_terms(const std::string& text) {
  if (text == "full") return LossTerms::kFull;
  if (text == "dice") return LossTerms::kDiceOnly;
  if (text == "dice+ddl") return LossTerms::kDiceDdl;
  if (text == "dice+psdl") return LossTerms::kDicePsdl;
  throw std::invalid_argument("unknown loss terms '" + text +
                              "' (expected full|dice|dice+ddl|dice+psdl)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  network.validate();
  distill.validate();
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (lr_step_every < 1) fail("lr_step_every must be >= 1");
  if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) fail("lr_gamma must lie in (0, 1]");
  const auto g = static_cast<int>(distill.grid);
  if (network.height % g != 0 || network.width % g != 0) {
    fail("image size " + std::to_string(network.height) + "x" + std::to_string(network.width) +
         " is not divisible by the patch grid " + std::to_string(g));
  }
  if (data_dir.empty() && synthetic_count < 1) fail("synthetic_count must be >= 1");
  if (data_dir.empty() && network.height != network.width) {
    fail("synthetic data requires square images");
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"lr_step_every", c.lr_step_every},
       {"lr_gamma", c.lr_gamma},
       {"lr_mode", lr_mode_str(c.lr_mode)},
       {"loss_terms", to_string(c.loss_terms)},
       {"tau", c.distill.tau},
       {"grid", c.distill.grid},
       {"alpha_T", c.distill.alpha_T},
       {"normalize_counts", c.distill.normalize_counts},
       {"count_mode", to_string(c.distill.count_mode)},
       {"kl_direction", to_string(c.distill.kl_direction)},
       {"eps", c.distill.eps},
       {"depth", c.network.depth},
       {"base_channels", c.network.base_channels},
       {"height", c.network.height},
       {"width", c.network.width},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"data_dir", c.data_dir},
       {"synthetic_count", c.synthetic_count},
       {"split_ratios", c.split_ratios},
       {"averaging", averaging_str(c.averaging)},
       {"keep_epoch_checkpoints", c.keep_epoch_checkpoints}};
}

void from_json(const json& j, TrainConfig& c) {
  static const TrainConfig defaults;
  json base = defaults;
  for (const auto& [key, value] : j.items()) {
    if (!base.contains(key)) throw std::invalid_argument("unknown configuration key '" + key + "'");
    base[key] = value;
  }
  c.epochs = base.at("epochs").get<int>();
  c.batch_size = base.at("batch_size").get<int>();
  c.learning_rate = base.at("learning_rate").get<double>();
  c.weight_decay = base.at("weight_decay").get<double>();
  c.lr_step_every = base.at("lr_step_every").get<int>();
  c.lr_gamma = base.at("lr_gamma").get<double>();
  c.lr_mode = parse_lr_mode(base.at("lr_mode").get<std::string>());
  c.loss_terms = parse_loss_terms(base.at("loss_terms").get<std::string>());
  c.distill.tau = base.at("tau").get<double>();
  c.distill.grid = base.at("grid").get<std::size_t>();
  c.distill.alpha_T = base.at("alpha_T").get<double>();
  c.distill.normalize_counts = base.at("normalize_counts").get<bool>();
  c.distill.count_mode = parse_count_mode(base.at("count_mode").get<std::string>());
  c.distill.kl_direction = parse_kl_direction(base.at("kl_direction").get<std::string>());
  c.distill.eps = base.at("eps").get<double>();
  c.network.depth = base.at("depth").get<int>();
  c.network.base_channels = base.at("base_channels").get<int>();
  c.network.height = base.at("height").get<int>();
  c.network.width = base.at("width").get<int>();
  c.seed = base.at("seed").get<std::uint64_t>();
  c.output_dir = base.at("output_dir").get<std::string>();
  c.data_dir = base.at("data_dir").get<std::string>();
  c.synthetic_count = base.at("synthetic_count").get<int>();
  c.split_ratios = base.at("split_ratios").get<std::array<double, 3>>();
  c.averaging = parse_averaging(base.at("averaging").get<std::string>());
  c.keep_epoch_checkpoints = base.at("keep_epoch_checkpoints").get<bool>();
}

void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value) {
  json j = cfg;
  if (!j.contains(key)) throw std::invalid_argument("unknown configuration key '" + key + "'");
  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;
  // Keep strings as strings even when they happen to parse as numbers.
  if (j[key].is_string() && !parsed.is_string()) parsed = value;
  j[key] = parsed;
  try {
    cfg = j.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("bad value for '" + key + "': " + e.what());
  }
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return j.get<TrainConfig>();
}

double lr_at(int t, const TrainConfig& cfg) {
  if (t < 1) throw std::out_of_range("lr_at: epoch must be >= 1");
  const int steps = (t - 1) / cfg.lr_step_every;
  if (cfg.lr_mode == LrMode::kClamp) {
    return steps == 0 ? cfg.learning_rate : cfg.learning_rate * cfg.lr_gamma;
  }
  double lr = cfg.learning_rate;
  for (int k = 0; k < steps; ++k) lr *= cfg.lr_gamma;
  return lr;
}

std::vector<const ImageSample*> Dataset::partition(const std::vector<std::size_t>& indices) const {
  std::vector<const ImageSample*> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(&samples.at(i));
  return out;
}

Dataset prepare_dataset(const TrainConfig& cfg) {
  cfg.validate();
  Dataset data;
  if (cfg.data_dir.empty()) {
    data.samples = generate_synthetic(cfg.seed, cfg.synthetic_count, cfg.network.height);
  } else {
    const std::size_t multiple = std::size_t{1} << (cfg.network.depth - 1);
    data.samples = load_directory(cfg.data_dir, std::lcm(multiple, cfg.distill.grid));
    if (data.samples.empty()) throw std::invalid_argument("no images found in '" + cfg.data_dir + "'");
    for (const auto& s : data.samples) {
      if (s.image.dim(1) != static_cast<std::size_t>(cfg.network.height) ||
          s.image.dim(2) != static_cast<std::size_t>(cfg.network.width)) {
        throw ShapeError("prepare_dataset(" + s.id + ")", "height",
                         static_cast<std::size_t>(cfg.network.height), s.image.dim(1));
      }
    }
  }
  data.split = split_dataset(data.samples.size(), cfg.split_ratios, cfg.seed);
  return data;
}

bool EpochLog::operator==(const EpochLog& o) const {
  return epoch == o.epoch && train_loss == o.train_loss && train_ddl == o.train_ddl &&
         train_psdl == o.train_psdl && train_dice == o.train_dice && val.dsc == o.val.dsc &&
         val.acc == o.val.acc && val.sen == o.val.sen && val.iou == o.val.iou &&
         alpha == o.alpha && lr == o.lr;
}

void to_json(json& j, const EpochLog& e) {
  j = {{"epoch", e.epoch},           {"train_loss", e.train_loss}, {"train_ddl", e.train_ddl},
       {"train_psdl", e.train_psdl}, {"train_dice", e.train_dice}, {"val", e.val},
       {"alpha", e.alpha},           {"lr", e.lr}};
}

void from_json(const json& j, EpochLog& e) {
  e.epoch = j.at("epoch").get<int>();
  e.train_loss = j.at("train_loss").get<double>();
  e.train_ddl = j.at("train_ddl").get<double>();
  e.train_psdl = j.at("train_psdl").get<double>();
  e.train_dice = j.at("train_dice").get<double>();
  e.val = j.at("val").get<SegMetrics>();
  e.alpha = j.at("alpha").get<double>();
  e.lr = j.at("lr").get<double>();
}

std::vector<ConfusionCounts> evaluate_counts(const SegNetwork& net,
                                             const std::vector<const ImageSample*>& samples,
                                             double threshold) {
  NoGradGuard guard;
  std::vector<ConfusionCounts> out;
  out.reserve(samples.size());
  for (const auto* s : samples) {
    out.push_back(confusion(net.forward(s->image, false).prediction, s->mask, threshold));
  }
  return out;
}

SegMetrics evaluate(const SegNetwork& net, const std::vector<const ImageSample*>& samples,
                    Averaging mode) {
  return aggregate(evaluate_counts(net, samples), mode);
}

void write_epoch_csv(const std::vector<EpochLog>& logs, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "epoch,train_loss,train_ddl,train_psdl,train_dice,val_dsc,val_acc,val_sen,val_iou,alpha,lr\n";
  out << std::setprecision(17);
  for (const auto& e : logs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.train_ddl << ',' << e.train_psdl << ','
        << e.train_dice << ',' << e.val.dsc << ',' << e.val.acc << ',' << e.val.sen << ','
        << e.val.iou << ',' << e.alpha << ',' << e.lr << '\n';
  }
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainOptions& options) {
  cfg.validate();
  if (data.split.train.empty()) throw std::invalid_argument("train: training partition is empty");
  for (const auto& s : data.samples) {
    if (s.image.shape() != Shape{1, static_cast<std::size_t>(cfg.network.height),
                                 static_cast<std::size_t>(cfg.network.width)}) {
      throw ShapeError("train(" + s.id + ")", "image size",
                       static_cast<std::size_t>(cfg.network.height * cfg.network.width),
                       s.image.numel());
    }
  }

  const std::filesystem::path out_dir = cfg.output_dir;
  const DistillConfig distill = effective_distill(cfg);
  const bool uses_teacher = distill.use_ddl || distill.use_psdl;

  RunState state = options.resume_from
                       ? restore_state(Checkpoint::load(*options.resume_from), cfg)
                       : RunState{SegNetwork(cfg.network, cfg.seed),
                                  AdamW(AdamWHyper{cfg.weight_decay}), 0, -1.0, 0, {}};

  // The teacher for epoch t is the network as it stood at the end of t-1.
  std::optional<TeacherSnapshot> teacher;
  if (state.epoch >= 1 && uses_teacher) teacher.emplace(state.net, state.epoch);

  const auto train_set = data.partition(data.split.train);
  const auto val_set = data.partition(data.split.val);
  std::vector<BatchRecord> batch_records;
  const int last_epoch = options.stop_after_epoch ? std::min(cfg.epochs, *options.stop_after_epoch)
                                                  : cfg.epochs;

  for (int t = state.epoch + 1; t <= last_epoch; ++t) {
    const double lr = lr_at(t, cfg);
    const auto plan = make_batches(train_set.size(), static_cast<std::size_t>(cfg.batch_size),
                                   cfg.seed, t);
    EpochLog log;
    log.epoch = t;
    log.lr = lr;
    log.alpha = (t >= 2 && uses_teacher) ? alpha_at(t, cfg.epochs, distill.alpha_T) : 0.0;

    for (std::size_t b = 0; b < plan.size(); ++b) {
      const auto& batch = plan[b];
      BatchRecord rec;
      rec.epoch = t;
      rec.batch = static_cast<int>(b);
      Tensor batch_loss;
      for (std::size_t pos : batch) {
        const ImageSample& sample = *train_set[pos];
        const ForwardResult student = state.net.forward(sample.image, true);
        std::optional<ForwardResult> teacher_out;
        if (t >= 2 && teacher) teacher_out = teacher->forward(sample.image, true);
        const LossBreakdown loss =
            total_loss(student, teacher_out ? &*teacher_out : nullptr, sample.mask, distill,
                       teacher_out ? t : 1, cfg.epochs);
        batch_loss = batch_loss.defined() ? batch_loss + loss.total : loss.total;
        rec.ddl += loss.ddl;
        rec.psdl += loss.psdl;
        rec.dice += loss.dice;
      }
      const double inv = 1.0 / static_cast<double>(batch.size());
      batch_loss = scale(batch_loss, inv);
      rec.ddl *= inv;
      rec.psdl *= inv;
      rec.dice *= inv;
      rec.total = batch_loss.item();

      batch_loss.backward();
      state.optimizer.step(state.net.parameters(), lr);

      log.train_loss += rec.total;
      log.train_ddl += rec.ddl;
      log.train_psdl += rec.psdl;
      log.train_dice += rec.dice;
      batch_records.push_back(rec);
      if (options.observer && options.observer->on_batch) {
        options.observer->on_batch(rec, teacher ? &*teacher : nullptr);
      }
    }
    const double nb = static_cast<double>(plan.size());
    log.train_loss /= nb;
    log.train_ddl /= nb;
    log.train_psdl /= nb;
    log.train_dice /= nb;

    state.net.zero_grad();
    if (!val_set.empty()) log.val = evaluate(state.net, val_set, cfg.averaging);
    state.logs.push_back(log);
    state.epoch = t;
    if (uses_teacher) teacher.emplace(state.net, t);

    const bool improved = !val_set.empty() && log.val.dsc > state.best_val_dsc;
    if (improved) {
      state.best_val_dsc = log.val.dsc;
      state.best_epoch = t;
    }
    if (options.write_files) {
      state_checkpoint(cfg, state).save(out_dir / "last.ckpt");
      if (improved) model_checkpoint(cfg, state.net, t, &log.val).save(out_dir / "best.ckpt");
      if (cfg.keep_epoch_checkpoints) {
        std::ostringstream name;
        name << "epoch_" << std::setw(3) << std::setfill('0') << t << ".ckpt";
        model_checkpoint(cfg, state.net, t, &log.val).save(out_dir / name.str());
      }
      write_epoch_csv(state.logs, out_dir / "epochs.csv");
    }
    if (options.observer && options.observer->on_epoch_end) {
      options.observer->on_epoch_end(log, state.net);
    }
  }

  if (options.write_files && state.epoch == cfg.epochs) {
    model_checkpoint(cfg, state.net, state.epoch, state.logs.empty() ? nullptr : &state.logs.back().val)
        .save(out_dir / "final.ckpt");
  }
  TrainResult result{std::move(state.net), std::move(state.logs), std::move(batch_records),
                     state.best_val_dsc, state.best_epoch};
  return result;
}

}  // namespace dskd
