#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmfusion/datapipe.hpp"
#include "mmfusion/fusion.hpp"
#include "mmfusion/serialize.hpp"

namespace mmf {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  bool decoupled = false;  // false: wd * p added to the gradient before the moment updates
};

// One bias-corrected Adam update of a single array at step t (t >= 1).
template <typename T>
void adam_update(NDArray<T>& param, const NDArray<T>& grad, NDArray<T>& m, NDArray<T>& v, int64_t t,
                 const AdamConfig& cfg);

template <typename T>
class Adam {
 public:
  Adam(std::vector<ParamSlot<T>> params, AdamConfig cfg);

  // Parameters without a gradient are treated as having a zero gradient. Throws NumericError
  // naming the parameter when a gradient is non-finite; no parameter is modified in that case.
  void step();

  int64_t t() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<ParamSlot<T>>& params() const { return params_; }
  std::vector<NDArray<T>>& first_moments() { return m_; }
  std::vector<NDArray<T>>& second_moments() { return v_; }
  void set_t(int64_t t) { t_ = t; }

 private:
  std::vector<ParamSlot<T>> params_;
  AdamConfig cfg_;
  std::vector<NDArray<T>> m_, v_;
  int64_t t_ = 0;
};

struct TrainOptions {
  int64_t epochs = 10;
  int64_t batch_size = 8;
  AdamConfig optim;
  AugmentPolicy augment;
  bool quadratic_kappa = false;
  bool verbose = false;  // per-epoch progress on stderr
};

// Conforms each configured modality of a loaded sample to its configured shape: arrays
// already of that shape pass through; others are (optionally cropped,) resized and
// normalized. Modalities not in the config are dropped.
Sample conform_sample(const Sample& s, const FusionConfig& config, bool crop = false);

// Stacks samples into one [N, C, spatial...] tensor per modality. Early-fusion models get
// every modality mapped onto the common grid.
template <typename T>
std::vector<Tensor<T>> make_batch(const FusionConfig& config, const std::vector<const Sample*>& samples);

// Eval-mode class probabilities [n, K] in sample order.
template <typename T>
NDArray<double> predict_samples(FusionModel<T>& model, const std::vector<Sample>& samples, int64_t batch_size = 16);

// Arithmetic mean of per-model probability rows. Throws ConfigError on mismatched K and
// InputError on mismatched row counts.
NDArray<double> mean_probabilities(const std::vector<NDArray<double>>& probs);

template <typename T>
NDArray<double> ensemble_predict(const std::vector<FusionModel<T>*>& models, const std::vector<Sample>& samples,
                                 int64_t batch_size = 16);

// "MMCK", u32 version, u64 config digest, u64 config-text length + bytes, u64 entry count,
// then per entry: u32 name length, name bytes, MMFT tensor.
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  uint64_t config_digest = 0;
  std::string config_text;
  std::vector<std::pair<std::string, AnyArray>> entries;

  const AnyArray* find(const std::string& name) const;
  double scalar(const std::string& name) const;  // throws InputError if absent
};

void write_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& is);
// Written to a sibling temp file and renamed, so an interrupted write leaves the old file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Model state under "param.<name>"; optimizer state under "optim.*" when given.
template <typename T>
void store_model(Checkpoint& ck, FusionModel<T>& model, Adam<T>* optim = nullptr);
// Throws InputError on missing entries or shape mismatches.
template <typename T>
void restore_model(const Checkpoint& ck, FusionModel<T>& model, Adam<T>* optim = nullptr);

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int64_t best_epoch = 0;
  double best_metric = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
};

// Trains a float model on the manifest's train split, selecting on the val split (AUC for
// K = 2, kappa otherwise; ties go to the lower val loss). Writes under out_dir:
//   metrics.csv     `epoch,split,loss,metric`, one val row per epoch
//   train_loss.csv  `epoch,loss`, mean training loss per epoch
//   best.mmck, last.mmck
// `resume` continues from a last.mmck-style checkpoint. Throws NumericError on a non-finite
// loss; best.mmck then still holds the last good selection.
TrainResult train(const FusionConfig& config, const std::string& config_text, uint64_t config_digest,
                  const DatasetManifest& manifest, uint64_t seed, const TrainOptions& options,
                  const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume = {},
                  bool crop = false);

}  // namespace mmf
