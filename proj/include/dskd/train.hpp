#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dskd/checkpoint.hpp"
#include "dskd/data.hpp"
#include "dskd/distill.hpp"
#include "dskd/metrics.hpp"
#include "dskd/optim.hpp"
#include "dskd/segnet.hpp"

namespace dskd {

enum class LrMode { kCompound, kClamp };

/// Which terms enter the objective from epoch 2 onwards. Dice is always on.
enum class LossTerms { kFull, kDiceOnly, kDiceDdl, kDicePsdl };

std::string to_string(LossTerms terms);
LossTerms parse_loss_terms(const std::string& text);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  int lr_step_every = 10;
  double lr_gamma = 0.3;
  LrMode lr_mode = LrMode::kCompound;
  LossTerms loss_terms = LossTerms::kFull;
  DistillConfig distill;
  NetworkConfig network;
  std::uint64_t seed = 42;
  std::string output_dir = "runs/default";

  // Data source: a directory with images/ and masks/, or synthetic samples
  // of network.height x network.width when empty.
  std::string data_dir;
  int synthetic_count = 200;
  std::array<double, 3> split_ratios{7.0, 1.0, 2.0};
  Averaging averaging = Averaging::kMacro;
  bool keep_epoch_checkpoints = false;

  /// Throws std::invalid_argument describing the first inconsistency.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Applies `--key=value` style overrides. Values are parsed as JSON when
/// possible and as plain strings otherwise. Unknown keys throw.
void apply_override(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Learning rate for epoch t >= 1: compounding decays by lr_gamma every
/// lr_step_every epochs; clamp mode drops once to gamma * lr and stays.
double lr_at(int t, const TrainConfig& cfg);

struct Dataset {
  std::vector<ImageSample> samples;
  DatasetSplit split;

  std::vector<const ImageSample*> partition(const std::vector<std::size_t>& indices) const;
};

/// Loads or generates samples as configured and splits them 7:1:2 (or as set).
Dataset prepare_dataset(const TrainConfig& cfg);

struct BatchRecord {
  int epoch = 0;
  int batch = 0;
  double total = 0.0;
  double ddl = 0.0;
  double psdl = 0.0;
  double dice = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double train_ddl = 0.0;
  double train_psdl = 0.0;
  double train_dice = 0.0;
  SegMetrics val;
  double alpha = 0.0;
  double lr = 0.0;

  bool operator==(const EpochLog& o) const;
};

void to_json(nlohmann::json& j, const SegMetrics& m);
void from_json(const nlohmann::json& j, SegMetrics& m);
void to_json(nlohmann::json& j, const EpochLog& e);
void from_json(const nlohmann::json& j, EpochLog& e);

struct TrainObserver {
  // After every optimizer step. `teacher` is null during epoch 1.
  std::function<void(const BatchRecord&, const TeacherSnapshot* teacher)> on_batch;
  // After validation and checkpointing of each epoch.
  std::function<void(const EpochLog&, const SegNetwork& student)> on_epoch_end;
};

struct TrainOptions {
  const TrainObserver* observer = nullptr;
  // Continue from a state checkpoint written by a previous run.
  std::optional<std::filesystem::path> resume_from;
  // Stop after this epoch (simulates an interrupted run).
  std::optional<int> stop_after_epoch;
  bool write_files = true;
};

struct TrainResult {
  SegNetwork final_network;
  std::vector<EpochLog> logs;
  std::vector<BatchRecord> batches;  // only batches run by this invocation
  double best_val_dsc = -1.0;
  int best_epoch = 0;
};

TrainResult train(const TrainConfig& cfg, const Dataset& data, const TrainOptions& options = {});

/// Per-image confusion counts of `net` over the given samples.
std::vector<ConfusionCounts> evaluate_counts(const SegNetwork& net,
                                             const std::vector<const ImageSample*>& samples,
                                             double threshold = 0.5);
SegMetrics evaluate(const SegNetwork& net, const std::vector<const ImageSample*>& samples,
                    Averaging mode = Averaging::kMacro);

/// Writes the CSV form of an epoch log series.
void write_epoch_csv(const std::vector<EpochLog>& logs, const std::filesystem::path& path);

}  // namespace dskd
