#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmfusion/tensor.hpp"

namespace mmf {

// Images are [C, X, Y]; volumes are [C, Z, X, Y].
struct NamedArray {
  std::string name;
  NDArray<float> data;
};

struct Sample {
  std::string id;
  std::vector<NamedArray> modalities;
  int64_t label = 0;
  bool registered = true;

  const NDArray<float>& get(const std::string& name) const;
  NDArray<float>& get(const std::string& name);
};

enum class Split { kTrain, kVal, kTest };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestRecord {
  std::string id;
  std::string modality;
  std::string path;  // relative to the manifest's directory unless absolute
  int64_t label = 0;
  Split split = Split::kTrain;
};

// Comma-separated table with header `id,modality,path,label,split`, one row per
// (sample, modality). Row order fixes modality stacking order.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir);

  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::vector<ManifestRecord>& records() const { return records_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  // Sample ids of a split in first-appearance order.
  std::vector<std::string> ids(Split split) const;
  std::vector<std::string> ids() const;
  std::vector<std::string> modality_names() const;

  // Reads every modality file of one sample.
  Sample load_sample(const std::string& id) const;
  std::vector<Sample> load_split(Split split) const;

  // Checks id/label consistency and that every referenced file exists and parses.
  void validate() const;

 private:
  std::vector<ManifestRecord> records_;
  std::filesystem::path base_dir_;
};

// Minimal axis-aligned box over the spatial axes (union over channels) holding every
// value > threshold. Throws InputError when no value exceeds the threshold.
NDArray<float> crop_nonzero(const NDArray<float>& image, float threshold = 0.0f);

// Corner-aligned multilinear resampling of the spatial axes of [C, spatial...].
NDArray<float> resize(const NDArray<float>& x, const std::vector<int64_t>& target);

// [C, X, Y] -> [C, Z, X, Y] with every depth slice equal to the image.
NDArray<float> duplicate_to_volume(const NDArray<float>& image, int64_t depth);

// Per-array min-max scaling to [0, 1]; a constant array maps to zeros.
NDArray<float> minmax_normalize(const NDArray<float>& x);

// crop_nonzero -> resize -> minmax_normalize.
NDArray<float> preprocess(const NDArray<float>& x, const std::vector<int64_t>& target, float threshold = 0.0f);

// Early fusion input layout: 2D images resized to the grid's (X, Y) and duplicated along Z;
// volumes resized to the grid when needed.
NDArray<float> to_grid(const NDArray<float>& x, const std::vector<int64_t>& grid);

// Flip axes are named by the en-face axes: 'X' and 'Y'.
struct AugmentPolicy {
  bool enabled = true;
  double gamma_min = 0.7;
  double gamma_max = 1.5;
  double noise_max = 0.05;  // sigma upper bound, fraction of the [0,1] intensity range
  double flip_prob = 0.5;
  std::string flip_axes_2d = "Y";
  std::string flip_axes_3d = "XY";
};

// Applies x -> x^gamma, additive N(0, sigma^2) noise and the requested flips to one array.
// Throws InputError when intensities fall outside [0, 1] and gamma != 1.
NDArray<float> apply_augmentation(const NDArray<float>& x, double gamma, double sigma, bool flip_x, bool flip_y,
                                  uint64_t noise_seed);

// Draws per-modality gamma and sigma; flips are shared across modalities when the sample
// is registered (restricted to axes allowed for every modality present), independent
// otherwise. Pure function of (sample, seed, policy).
Sample augment(const Sample& sample, uint64_t seed, const AugmentPolicy& policy);

// Planted-XOR benchmark. Each sample draws bits (u, v); label = u XOR v.
//   image (2D):  an oriented bar, horizontal (u = 0) or vertical (u = 1)
//   volume (3D): a bright slab above (v = 0) or below (v = 1) a dim reference sheet at mid-depth
// Both structures are centred on one shared random en-face location. With registered = false the
// image is additionally shifted by up to `max_shift` of its extent per axis (zero fill).
struct SynthSpec {
  int64_t n_samples = 16;
  std::vector<int64_t> image_size{32, 32};      // (X, Y)
  std::vector<int64_t> volume_size{16, 16, 16};  // (Z, X, Y)
  double noise = 0.1;
  bool registered = true;
  uint64_t seed = 0;
  double bar_length = 0.4;   // fraction of extent
  double bar_width = 0.12;
  double slab_half_width = 0.15;
  double slab_thickness = 0.2;  // fraction of depth
  double center_margin = 0.3;   // centres drawn from [margin, 1 - margin]
  double max_shift = 0.25;
};

struct SynthLatent {
  int u = 0;
  int v = 0;
  double cx = 0.5;  // shared centre, normalized
  double cy = 0.5;
  int64_t shift_x = 0;  // image shift in pixels
  int64_t shift_y = 0;
};

// In-memory generation; sample i depends only on (seed, i).
std::vector<Sample> synth_samples(const SynthSpec& spec, std::vector<SynthLatent>* latents = nullptr);

// Writes MMFT files plus `manifest.csv` under out_dir. The first n_train samples go to
// train, the next n_val to val, the rest to test.
DatasetManifest synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir, int64_t n_train,
                               int64_t n_val);

}  // namespace mmf
