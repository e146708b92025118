// mmfusion command-line entry points. Exit codes: 0 success, 1 input/config error,
// 2 numeric fault.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "mmfusion/config.hpp"
#include "mmfusion/datapipe.hpp"
#include "mmfusion/fusion.hpp"
#include "mmfusion/metrics.hpp"
#include "mmfusion/training.hpp"

namespace fs = std::filesystem;
using namespace mmf;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "run configuration file");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "seed (overrides the config)");
  cmd->add_option("--out", c.out, "output file or directory");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os || !(os << text)) throw InputError("cannot write " + path.string());
}

std::vector<int64_t> parse_extents(const std::string& s, size_t n, const char* flag) {
  std::vector<int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, 'x')) {
    try {
      size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": bad extent list '" + s + "'");
    }
  }
  if (out.size() != n) throw ConfigError(std::string(flag) + ": expected " + std::to_string(n) + " extents");
  return out;
}

// ---------------------------------------------------------------------------------------

int cmd_shape_check(const Common& c) {
  const RunConfig rc = load_run_config(c.config);
  const std::string report = render_trace(trace_fusion(rc.model));
  if (c.out.empty())
    std::cout << report;
  else
    write_text(c.out, report);
  return 0;
}

struct SynthFlags {
  int64_t n = 16;
  int64_t n_train = -1;
  int64_t n_val = -1;
  std::string image_size = "32x32";
  std::string volume_size = "16x16x16";
  double noise = 0.1;
  bool misregistered = false;
  double max_shift = 0.25;
  SynthSpec geometry;
};

int cmd_synth(const Common& c, const SynthFlags& f) {
  if (c.out.empty()) throw ConfigError("synth: --out is required");
  SynthSpec spec = f.geometry;
  spec.n_samples = f.n;
  spec.image_size = parse_extents(f.image_size, 2, "--image-size");
  spec.volume_size = parse_extents(f.volume_size, 3, "--volume-size");
  spec.noise = f.noise;
  spec.registered = !f.misregistered;
  spec.max_shift = f.max_shift;
  spec.seed = c.seed.value_or(0);
  const int64_t n_train = f.n_train >= 0 ? f.n_train : f.n / 2;
  const int64_t n_val = f.n_val >= 0 ? f.n_val : (f.n - n_train) / 2;
  const auto manifest = synth_generate(spec, c.out, n_train, n_val);
  std::cout << "wrote " << manifest.ids().size() << " samples to " << (fs::path(c.out) / "manifest.csv").string()
            << "\n";
  return 0;
}

struct TrainFlags {
  std::string resume;
  std::string manifest;
  int64_t epochs = 0;
  bool quiet = false;
};

int cmd_train(const Common& c, const TrainFlags& f) {
  RunConfig rc = load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  if (f.epochs > 0) rc.train.epochs = f.epochs;
  fs::path manifest_path = f.manifest.empty() ? rc.manifest_path : fs::path(f.manifest);
  if (manifest_path.empty()) throw ConfigError("no manifest: set data.manifest or pass --manifest");
  const fs::path out = c.out.empty() ? fs::path("run") : fs::path(c.out);
  rc.train.verbose = !f.quiet;
  const auto manifest = DatasetManifest::load(manifest_path);
  std::optional<fs::path> resume;
  if (!f.resume.empty()) resume = f.resume;
  const auto result = train(rc.model, rc.render(), rc.digest(), manifest, rc.seed, rc.train, out, resume, rc.crop);
  std::cout << "best_epoch=" << result.best_epoch << "\n"
            << "best_metric=" << result.best_metric << "\n"
            << "checkpoint=" << result.best_checkpoint.string() << "\n";
  return 0;
}

struct EvalFlags {
  std::vector<std::string> checkpoints;
  std::string manifest;
  std::string split = "test";
  std::optional<double> threshold;
};

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<FusionModel<float>> model;
};

LoadedModel load_model(const fs::path& ck_path, const std::string& config_override) {
  const Checkpoint ck = load_checkpoint(ck_path);
  LoadedModel lm;
  lm.config = config_override.empty() ? parse_run_config(ck.config_text) : load_run_config(config_override);
  if (lm.config.digest() != ck.config_digest)
    throw ConfigError(ck_path.string() + ": checkpoint digest " + digest_hex(ck.config_digest) +
                      " does not match config digest " + digest_hex(lm.config.digest()));
  lm.model = build_model<float>(lm.config.model, 0);
  restore_model(ck, *lm.model);
  return lm;
}

int cmd_eval(const Common& c, const EvalFlags& f, bool ensemble) {
  if (f.checkpoints.empty()) throw ConfigError("at least one --checkpoint is required");
  if (!ensemble && f.checkpoints.size() != 1) throw ConfigError("eval takes exactly one --checkpoint");
  std::vector<LoadedModel> models;
  for (const auto& p : f.checkpoints) models.push_back(load_model(p, ensemble ? "" : c.config));
  const int64_t K = models[0].config.model.num_classes;
  for (const auto& m : models)
    if (m.config.model.num_classes != K) throw ConfigError("ensemble: checkpoints disagree on the number of classes");

  fs::path manifest_path = f.manifest;
  if (manifest_path.empty() && !c.config.empty()) manifest_path = load_run_config(c.config).manifest_path;
  if (manifest_path.empty()) throw ConfigError("no manifest: pass --manifest or a --config with data.manifest");
  const auto manifest = DatasetManifest::load(manifest_path);
  const Split split = parse_split(f.split);

  auto score = [&](Split s, std::vector<int64_t>& labels) {
    const auto raw = manifest.load_split(s);
    labels.clear();
    for (const auto& r : raw) labels.push_back(r.label);
    std::vector<NDArray<double>> probs;
    for (auto& m : models) {
      std::vector<Sample> conformed;
      for (const auto& r : raw) conformed.push_back(conform_sample(r, m.config.model, m.config.crop));
      probs.push_back(predict_samples(*m.model, conformed));
    }
    return mean_probabilities(probs);
  };

  std::vector<int64_t> labels;
  const NDArray<double> probs = score(split, labels);
  if (labels.empty()) throw InputError("split '" + f.split + "' is empty in " + manifest_path.string());
  if (!probs.all_finite()) throw NumericError("non-finite model output");

  double threshold = 0.5;
  if (f.threshold) {
    threshold = *f.threshold;
  } else if (K == 2 && !manifest.ids(Split::kVal).empty()) {
    std::vector<int64_t> val_labels;
    const NDArray<double> val_probs = score(Split::kVal, val_labels);
    const auto pos = std::count(val_labels.begin(), val_labels.end(), int64_t{1});
    if (pos > 0 && pos < static_cast<int64_t>(val_labels.size())) {
      std::vector<double> s;
      for (size_t i = 0; i < val_labels.size(); ++i) s.push_back(val_probs[static_cast<int64_t>(i) * 2 + 1]);
      threshold = youden_threshold(val_labels, s);
    }
  }
  const MetricsReport report = evaluate(labels, probs.values(), K, threshold, models[0].config.train.quadratic_kappa);
  const std::string text = "split=" + f.split + "\n" + report.key_values();
  const std::string csv = MetricsReport::csv_header() + "\n" + report.csv_row() + "\n";
  std::cout << text << "\n" << csv;
  if (!c.out.empty()) {
    write_text(fs::path(c.out) / "report.txt", text);
    write_text(fs::path(c.out) / "report.csv", csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal 2D/3D fusion networks: shape checks, synthetic data, training and evaluation"};
  app.require_subcommand(1);

  Common shape_common, synth_common, train_common, eval_common, ens_common;
  auto* shape = app.add_subcommand("shape-check", "print per-stage tap shapes and conversion parameters");
  add_common(shape, shape_common, true);

  SynthFlags sf;
  auto* synth = app.add_subcommand("synth", "generate the planted-XOR benchmark");
  add_common(synth, synth_common, false);
  synth->add_option("--n", sf.n, "number of samples")->check(CLI::NonNegativeNumber);
  synth->add_option("--train", sf.n_train, "train split size (default n/2)");
  synth->add_option("--val", sf.n_val, "val split size (default a quarter of n)");
  synth->add_option("--image-size", sf.image_size, "image extents XxY");
  synth->add_option("--volume-size", sf.volume_size, "volume extents ZxXxY");
  synth->add_option("--noise", sf.noise, "Gaussian noise sigma");
  synth->add_option("--max-shift", sf.max_shift, "misregistration shift bound, fraction of extent");
  synth->add_option("--bar-length", sf.geometry.bar_length, "bar length, fraction of image extent");
  synth->add_option("--bar-width", sf.geometry.bar_width, "bar width, fraction of image extent");
  synth->add_option("--slab-half-width", sf.geometry.slab_half_width, "slab half width, fraction of en-face extent");
  synth->add_option("--slab-thickness", sf.geometry.slab_thickness, "slab thickness, fraction of depth");
  synth->add_option("--center-margin", sf.geometry.center_margin, "structure centres lie in [m, 1 - m]");
  synth->add_flag("--misregistered", sf.misregistered, "shift the image independently of the volume");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "train a model and keep the best validation checkpoint");
  add_common(train_cmd, train_common, true);
  train_cmd->add_option("--resume", tf.resume, "continue from a checkpoint");
  train_cmd->add_option("--manifest", tf.manifest, "dataset manifest (overrides data.manifest)");
  train_cmd->add_option("--epochs", tf.epochs, "epochs (overrides train.epochs)");
  train_cmd->add_flag("--quiet", tf.quiet, "no per-epoch progress");

  EvalFlags ef, nf;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, eval_common, false);
  eval->add_option("--checkpoint", ef.checkpoints, "checkpoint file")->required();
  eval->add_option("--manifest", ef.manifest, "dataset manifest");
  eval->add_option("--split", ef.split, "train, val or test");
  eval->add_option("--threshold", ef.threshold, "binary operating point (default: Youden on val)");

  auto* ens = app.add_subcommand("ensemble", "evaluate the mean probabilities of several checkpoints");
  add_common(ens, ens_common, false);
  ens->add_option("--checkpoint", nf.checkpoints, "checkpoint files")->required();
  ens->add_option("--manifest", nf.manifest, "dataset manifest");
  ens->add_option("--split", nf.split, "train, val or test");
  ens->add_option("--threshold", nf.threshold, "binary operating point (default: Youden on val)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*shape) return cmd_shape_check(shape_common);
    if (*synth) return cmd_synth(synth_common, sf);
    if (*train_cmd) return cmd_train(train_common, tf);
    if (*eval) return cmd_eval(eval_common, ef, false);
    if (*ens) return cmd_eval(ens_common, nf, true);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
