#include "mmfusion/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "mmfusion/metrics.hpp"
#include "mmfusion/random.hpp"

namespace mmf {

// ---------------------------------------------------------------------------------------
// Adam

template <typename T>
void adam_update(NDArray<T>& param, const NDArray<T>& grad, NDArray<T>& m, NDArray<T>& v, int64_t t,
                 const AdamConfig& cfg) {
  if (t < 1) throw UsageError("adam_update: step count must be >= 1");
  if (grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape())
    throw UsageError("adam_update: shape mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (int64_t i = 0; i < param.size(); ++i) {
    const double p = static_cast<double>(param[i]);
    double g = static_cast<double>(grad[i]);
    if (!cfg.decoupled) g += cfg.weight_decay * p;
    const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
    if (cfg.decoupled) update += cfg.weight_decay * p;
    param[i] = static_cast<T>(p - cfg.lr * update);
  }
}

template <typename T>
Adam<T>::Adam(std::vector<ParamSlot<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->shape());
    v_.emplace_back(p.tensor->shape());
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& p : params_) {
    const NDArray<T>* g = p.tensor->grad();
    if (g && !g->all_finite()) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  }
  ++t_;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& tensor = *params_[i].tensor;
    const NDArray<T>* g = tensor.grad();
    const NDArray<T> zero = g ? NDArray<T>() : NDArray<T>(tensor.shape());
    adam_update(tensor.mutable_value(), g ? *g : zero, m_[i], v_[i], t_, cfg_);
  }
}

// ---------------------------------------------------------------------------------------
// Batches

Sample conform_sample(const Sample& s, const FusionConfig& config, bool crop) {
  Sample out;
  out.id = s.id;
  out.label = s.label;
  out.registered = s.registered;
  for (const auto& m : config.modalities) {
    const NDArray<float>& a = s.get(m.name);
    const Shape want = m.shape.batched(1);
    const Shape have_batched = [&] {
      Shape b{1};
      b.insert(b.end(), a.shape().begin(), a.shape().end());
      return b;
    }();
    if (have_batched == want && !crop) {
      out.modalities.push_back({m.name, a});
      continue;
    }
    if (a.rank() != want.size() - 1 || a.dim(0) != m.shape.channels)
      throw InputError("sample '" + s.id + "' modality '" + m.name + "': shape " + shape_str(a.shape()) +
                       " incompatible with configured " + m.shape.str());
    NDArray<float> x = crop ? crop_nonzero(a) : a;
    out.modalities.push_back({m.name, minmax_normalize(resize(x, m.shape.spatial))});
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> make_batch(const FusionConfig& config, const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw InputError("empty batch");
  const bool early = config.mode == FusionMode::kEarly;
  const auto grid = early ? config.early_grid() : std::vector<int64_t>{};
  std::vector<Tensor<T>> out;
  for (const auto& m : config.modalities) {
    const FeatureShape fs = early ? FeatureShape{m.shape.channels, grid} : m.shape;
    const Shape shape = fs.batched(static_cast<int64_t>(samples.size()));
    NDArray<T> arr(shape);
    const int64_t per = numel(shape) / shape[0];
    for (size_t i = 0; i < samples.size(); ++i) {
      const NDArray<float>& src = samples[i]->get(m.name);
      const bool on_grid = src.rank() == 4 && Shape(src.shape().begin() + 1, src.shape().end()) == grid;
      const NDArray<float> placed = early && !on_grid ? to_grid(src, grid) : src;
      if (placed.size() != per)
        throw InputError("sample '" + samples[i]->id + "' modality '" + m.name + "': shape " +
                         shape_str(placed.shape()) + ", expected " + fs.str());
      std::transform(placed.data(), placed.data() + per, arr.data() + static_cast<int64_t>(i) * per,
                     [](float f) { return static_cast<T>(f); });
    }
    out.emplace_back(std::move(arr));
  }
  return out;
}

template <typename T>
NDArray<double> predict_samples(FusionModel<T>& model, const std::vector<Sample>& samples, int64_t batch_size) {
  const int64_t K = model.config().num_classes;
  NDArray<double> out({static_cast<int64_t>(samples.size()), K});
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    std::vector<const Sample*> batch;
    for (size_t i = start; i < std::min(samples.size(), start + static_cast<size_t>(batch_size)); ++i)
      batch.push_back(&samples[i]);
    const NDArray<T> p = model.predict(make_batch<T>(model.config(), batch));
    for (int64_t i = 0; i < p.size(); ++i) out[static_cast<int64_t>(start) * K + i] = static_cast<double>(p[i]);
  }
  return out;
}

NDArray<double> mean_probabilities(const std::vector<NDArray<double>>& probs) {
  if (probs.empty()) throw ConfigError("ensemble of zero models");
  for (const auto& p : probs) {
    if (p.rank() != 2) throw InputError("ensemble: probabilities must be [n, K]");
    if (p.dim(1) != probs[0].dim(1))
      throw ConfigError("ensemble: models disagree on the number of classes (" + std::to_string(probs[0].dim(1)) +
                        " vs " + std::to_string(p.dim(1)) + ")");
    if (p.dim(0) != probs[0].dim(0)) throw InputError("ensemble: models scored different sample counts");
  }
  // Running mean: exact when every model agrees.
  NDArray<double> out = probs[0];
  for (size_t k = 1; k < probs.size(); ++k)
    for (int64_t i = 0; i < out.size(); ++i) out[i] += (probs[k][i] - out[i]) / static_cast<double>(k + 1);
  return out;
}

template <typename T>
NDArray<double> ensemble_predict(const std::vector<FusionModel<T>*>& models, const std::vector<Sample>& samples,
                                 int64_t batch_size) {
  if (models.empty()) throw ConfigError("ensemble of zero models");
  for (auto* m : models)
    if (m->config().num_classes != models[0]->config().num_classes)
      throw ConfigError("ensemble: models disagree on the number of classes");
  std::vector<NDArray<double>> probs;
  for (auto* m : models) probs.push_back(predict_samples(*m, samples, batch_size));
  return mean_probabilities(probs);
}

// ---------------------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr std::array<char, 4> kCheckpointMagic{'M', 'M', 'C', 'K'};

std::string read_bytes(std::istream& is, uint64_t n, const char* what) {
  if (n > (uint64_t{1} << 30)) throw InputError(std::string("checkpoint: ") + what + " too long");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw InputError("checkpoint truncated");
  return s;
}
}  // namespace

const AnyArray* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, a] : entries)
    if (n == name) return &a;
  return nullptr;
}

double Checkpoint::scalar(const std::string& name) const {
  const AnyArray* a = find(name);
  if (!a) throw InputError("checkpoint has no entry '" + name + "'");
  return std::visit(
      [&](const auto& arr) -> double {
        if (arr.size() != 1) throw InputError("checkpoint entry '" + name + "' is not a scalar");
        return static_cast<double>(arr[0]);
      },
      *a);
}

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  write_u32(os, kCheckpointVersion);
  write_u64(os, ck.config_digest);
  write_u64(os, ck.config_text.size());
  os.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));
  write_u64(os, ck.entries.size());
  for (const auto& [name, arr] : ck.entries) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    std::visit([&](const auto& a) { write_tensor(os, a); }, arr);
  }
}

Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw InputError("not an MMCK checkpoint (bad magic)");
  const uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config_digest = read_u64(is);
  ck.config_text = read_bytes(is, read_u64(is), "config text");
  const uint64_t count = read_u64(is);
  if (count > (uint64_t{1} << 24)) throw InputError("checkpoint: implausible entry count");
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = read_bytes(is, read_u32(is), "entry name");
    ck.entries.emplace_back(std::move(name), read_any_tensor(is));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw InputError("cannot write checkpoint " + tmp.string());
    write_checkpoint(os, ck);
    if (!os) throw InputError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

template <typename T>
void store_model(Checkpoint& ck, FusionModel<T>& model, Adam<T>* optim) {
  for (const auto& s : model.state()) ck.entries.emplace_back("param." + s.name, s.tensor->value());
  if (!optim) return;
  auto& m = optim->first_moments();
  auto& v = optim->second_moments();
  for (size_t i = 0; i < optim->params().size(); ++i) {
    ck.entries.emplace_back("optim.m." + optim->params()[i].name, m[i]);
    ck.entries.emplace_back("optim.v." + optim->params()[i].name, v[i]);
  }
  ck.entries.emplace_back("optim.t", NDArray<double>({1}, {static_cast<double>(optim->t())}));
}

namespace {
template <typename T>
NDArray<T> entry_as(const Checkpoint& ck, const std::string& name, const Shape& shape) {
  const AnyArray* a = ck.find(name);
  if (!a) throw InputError("checkpoint has no entry '" + name + "'");
  NDArray<T> out = std::visit([](const auto& arr) { return arr.template cast<T>(); }, *a);
  if (out.shape() != shape)
    throw InputError("checkpoint entry '" + name + "' has shape " + shape_str(out.shape()) + ", model expects " +
                     shape_str(shape));
  return out;
}
}  // namespace

template <typename T>
void restore_model(const Checkpoint& ck, FusionModel<T>& model, Adam<T>* optim) {
  for (auto& s : model.state()) s.tensor->mutable_value() = entry_as<T>(ck, "param." + s.name, s.tensor->shape());
  if (!optim) return;
  auto& m = optim->first_moments();
  auto& v = optim->second_moments();
  for (size_t i = 0; i < optim->params().size(); ++i) {
    const auto& p = optim->params()[i];
    m[i] = entry_as<T>(ck, "optim.m." + p.name, p.tensor->shape());
    v[i] = entry_as<T>(ck, "optim.v." + p.name, p.tensor->shape());
  }
  optim->set_t(static_cast<int64_t>(ck.scalar("optim.t")));
}

// ---------------------------------------------------------------------------------------
// Training loop

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(8) << std::fixed << v;
  return os.str();
}

// seed split into two exactly representable halves
NDArray<double> seed_entry(uint64_t seed) {
  return NDArray<double>({2}, {static_cast<double>(seed >> 32), static_cast<double>(seed & 0xffffffffu)});
}

uint64_t seed_from(const Checkpoint& ck) {
  const AnyArray* a = ck.find("meta.seed");
  if (!a) throw InputError("checkpoint has no entry 'meta.seed'");
  const auto arr = std::visit([](const auto& x) { return x.template cast<double>(); }, *a);
  if (arr.size() != 2) throw InputError("checkpoint entry 'meta.seed' malformed");
  return (static_cast<uint64_t>(arr[0]) << 32) | static_cast<uint64_t>(arr[1]);
}

double mean_nll(const std::vector<Sample>& samples, const NDArray<double>& probs) {
  double s = 0.0;
  const int64_t K = probs.dim(1);
  for (size_t i = 0; i < samples.size(); ++i)
    s -= std::log(std::max(probs[static_cast<int64_t>(i) * K + samples[i].label], 1e-300));
  return s / static_cast<double>(samples.size());
}

}  // namespace

TrainResult train(const FusionConfig& config, const std::string& config_text, uint64_t config_digest,
                  const DatasetManifest& manifest, uint64_t seed, const TrainOptions& options,
                  const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume,
                  bool crop) {
  config.validate();
  if (options.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (options.batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (batch norm)");

  std::vector<Sample> train_set, val_set;
  for (const auto& s : manifest.load_split(Split::kTrain)) train_set.push_back(conform_sample(s, config, crop));
  for (const auto& s : manifest.load_split(Split::kVal)) val_set.push_back(conform_sample(s, config, crop));
  if (train_set.empty()) throw InputError("manifest has no train samples");
  if (val_set.empty()) throw InputError("manifest has no val samples");
  for (const auto* set : {&train_set, &val_set})
    for (const auto& s : *set)
      if (s.label < 0 || s.label >= config.num_classes)
        throw InputError("sample '" + s.id + "' label " + std::to_string(s.label) + " outside [0, " +
                         std::to_string(config.num_classes) + ")");
  if (static_cast<int64_t>(train_set.size()) < 2) throw InputError("need at least 2 train samples");

  auto model = build_model<float>(config, seed);
  Adam<float> optim(model->parameters(), options.optim);

  TrainResult result;
  result.best_metric = -std::numeric_limits<double>::infinity();
  double best_val_loss = std::numeric_limits<double>::infinity();
  result.best_checkpoint = out_dir / "best.mmck";
  result.last_checkpoint = out_dir / "last.mmck";
  int64_t start_epoch = 1;
  std::filesystem::create_directories(out_dir);

  if (resume) {
    const Checkpoint ck = load_checkpoint(*resume);
    if (ck.config_digest != config_digest) throw ConfigError("resume checkpoint was trained with a different config");
    if (seed_from(ck) != seed) throw ConfigError("resume checkpoint was trained with a different seed");
    restore_model(ck, *model, &optim);
    start_epoch = static_cast<int64_t>(ck.scalar("meta.epoch")) + 1;
    result.best_metric = ck.scalar("meta.best_metric");
    result.best_epoch = static_cast<int64_t>(ck.scalar("meta.best_epoch"));
    best_val_loss = ck.scalar("meta.best_val_loss");
  }

  const auto open_mode = resume ? std::ios::app : std::ios::trunc;
  std::ofstream metrics_log(out_dir / "metrics.csv", std::ios::out | open_mode);
  std::ofstream loss_log(out_dir / "train_loss.csv", std::ios::out | open_mode);
  if (!metrics_log || !loss_log) throw InputError("cannot write logs under " + out_dir.string());
  if (!resume) {
    metrics_log << "epoch,split,loss,metric\n";
    loss_log << "epoch,loss\n";
  }

  auto make_ck = [&](int64_t epoch) {
    Checkpoint ck;
    ck.config_digest = config_digest;
    ck.config_text = config_text;
    store_model(ck, *model, &optim);
    ck.entries.emplace_back("meta.epoch", NDArray<double>({1}, {static_cast<double>(epoch)}));
    ck.entries.emplace_back("meta.seed", seed_entry(seed));
    ck.entries.emplace_back("meta.best_metric", NDArray<double>({1}, {result.best_metric}));
    ck.entries.emplace_back("meta.best_epoch", NDArray<double>({1}, {static_cast<double>(result.best_epoch)}));
    ck.entries.emplace_back("meta.best_val_loss", NDArray<double>({1}, {best_val_loss}));
    return ck;
  };

  std::vector<int64_t> val_labels;
  for (const auto& s : val_set) val_labels.push_back(s.label);

  const auto n = train_set.size();
  const auto bs = static_cast<size_t>(options.batch_size);
  for (int64_t epoch = start_epoch; epoch <= options.epochs; ++epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(derive_seed(seed, "shuffle", static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    const uint64_t augment_seed = derive_seed(seed, "augment", static_cast<uint64_t>(epoch));

    model->set_training(true);
    double loss_sum = 0.0;
    int64_t loss_count = 0;
    for (size_t start = 0; start + 2 <= n; start += bs) {
      const size_t end = std::min(n, start + bs);
      if (end - start < 2) break;
      std::vector<Sample> batch_samples;
      std::vector<int64_t> labels;
      for (size_t i = start; i < end; ++i) {
        const Sample& s = train_set[order[i]];
        batch_samples.push_back(augment(s, derive_seed(augment_seed, "sample", order[i]), options.augment));
        labels.push_back(s.label);
      }
      std::vector<const Sample*> ptrs;
      for (const auto& s : batch_samples) ptrs.push_back(&s);
      model->zero_grad();
      auto loss = softmax_cross_entropy(model->forward(make_batch<float>(config, ptrs)), labels);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + "; " +
                           result.best_checkpoint.string() + " holds the last good model");
      loss.backward();
      optim.step();
      loss_sum += lv * static_cast<double>(end - start);
      loss_count += static_cast<int64_t>(end - start);
    }
    const double train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;

    const NDArray<double> probs = predict_samples(*model, val_set);
    if (!probs.all_finite()) throw NumericError("non-finite validation output at epoch " + std::to_string(epoch));
    const double val_loss = mean_nll(val_set, probs);
    const double metric = selection_metric(val_labels, probs.values(), config.num_classes);

    result.history.push_back({epoch, train_loss, val_loss, metric});
    metrics_log << epoch << ",val," << fmt(val_loss) << ',' << fmt(metric) << '\n';
    loss_log << epoch << ',' << fmt(train_loss) << '\n';
    metrics_log.flush();
    loss_log.flush();
    if (options.verbose)
      std::cerr << "epoch " << epoch << " train_loss=" << fmt(train_loss) << " val_loss=" << fmt(val_loss)
                << " val_metric=" << fmt(metric) << std::endl;

    // A saturated metric (AUC 1.0) ties across epochs; the lower validation loss wins then.
    if (metric > result.best_metric || (metric == result.best_metric && val_loss < best_val_loss)) {
      result.best_metric = metric;
      best_val_loss = val_loss;
      result.best_epoch = epoch;
      save_checkpoint(result.best_checkpoint, make_ck(epoch));
    }
    save_checkpoint(result.last_checkpoint, make_ck(epoch));
  }
  return result;
}

#define MMF_INSTANTIATE_TRAINING(T)                                                                             \
  template void adam_update<T>(NDArray<T>&, const NDArray<T>&, NDArray<T>&, NDArray<T>&, int64_t,              \
                               const AdamConfig&);                                                              \
  template class Adam<T>;                                                                                       \
  template std::vector<Tensor<T>> make_batch<T>(const FusionConfig&, const std::vector<const Sample*>&);        \
  template NDArray<double> predict_samples<T>(FusionModel<T>&, const std::vector<Sample>&, int64_t);           \
  template NDArray<double> ensemble_predict<T>(const std::vector<FusionModel<T>*>&, const std::vector<Sample>&, \
                                               int64_t);                                                        \
  template void store_model<T>(Checkpoint&, FusionModel<T>&, Adam<T>*);                                         \
  template void restore_model<T>(const Checkpoint&, FusionModel<T>&, Adam<T>*);

MMF_INSTANTIATE_TRAINING(float)
MMF_INSTANTIATE_TRAINING(double)

}  // namespace mmf
