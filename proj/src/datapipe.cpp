#include "mmfusion/datapipe.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mmfusion/random.hpp"
#include "mmfusion/serialize.hpp"

namespace mmf {

const NDArray<float>& Sample::get(const std::string& name) const {
  for (const auto& m : modalities)
    if (m.name == name) return m.data;
  throw InputError("sample '" + id + "' has no modality '" + name + "'");
}

NDArray<float>& Sample::get(const std::string& name) {
  return const_cast<NDArray<float>&>(std::as_const(*this).get(name));
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw InputError("unknown split '" + s + "' (expected train, val or test)");
}

// ---------------------------------------------------------------------------------------
// Manifest

DatasetManifest::DatasetManifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {}

namespace {
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "id,modality,path,label,split")
    throw InputError(path.string() + ": expected header 'id,modality,path,label,split'");
  std::vector<ManifestRecord> records;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    ManifestRecord r;
    r.id = f[0];
    r.modality = f[1];
    r.path = f[2];
    try {
      size_t used = 0;
      r.label = std::stoll(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
    } catch (const std::exception&) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + f[3] + "'");
    }
    r.split = parse_split(f[4]);
    records.push_back(std::move(r));
  }
  return DatasetManifest(std::move(records), path.parent_path());
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write manifest " + path.string());
  os << "id,modality,path,label,split\n";
  for (const auto& r : records_)
    os << r.id << ',' << r.modality << ',' << r.path << ',' << r.label << ',' << to_string(r.split) << '\n';
}

std::vector<std::string> DatasetManifest::ids(Split split) const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records_)
    if (r.split == split && seen.insert(r.id).second) out.push_back(r.id);
  return out;
}

std::vector<std::string> DatasetManifest::ids() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records_)
    if (seen.insert(r.id).second) out.push_back(r.id);
  return out;
}

std::vector<std::string> DatasetManifest::modality_names() const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (std::find(out.begin(), out.end(), r.modality) == out.end()) out.push_back(r.modality);
  return out;
}

Sample DatasetManifest::load_sample(const std::string& id) const {
  Sample s;
  s.id = id;
  bool found = false;
  for (const auto& r : records_) {
    if (r.id != id) continue;
    if (found && r.label != s.label) throw InputError("sample '" + id + "' has conflicting labels");
    found = true;
    s.label = r.label;
    std::filesystem::path p(r.path);
    if (p.is_relative()) p = base_dir_ / p;
    s.modalities.push_back({r.modality, load_tensor<float>(p)});
  }
  if (!found) throw InputError("manifest has no sample '" + id + "'");
  return s;
}

std::vector<Sample> DatasetManifest::load_split(Split split) const {
  std::vector<Sample> out;
  for (const auto& id : ids(split)) out.push_back(load_sample(id));
  return out;
}

void DatasetManifest::validate() const {
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& r : records_) {
    if (!keys.insert({r.id, r.modality}).second)
      throw InputError("manifest: duplicate entry for sample '" + r.id + "' modality '" + r.modality + "'");
    if (r.label < 0) throw InputError("manifest: negative label for '" + r.id + "'");
  }
  for (const auto& id : ids()) (void)load_sample(id);
}

// ---------------------------------------------------------------------------------------
// Preprocessing

NDArray<float> crop_nonzero(const NDArray<float>& image, float threshold) {
  const Shape& s = image.shape();
  if (s.size() < 2) throw InputError("crop_nonzero: expected [C, spatial...], got " + shape_str(s));
  const size_t rank = s.size();
  std::vector<int64_t> lo(rank, 0), hi(rank, -1);
  for (size_t a = 1; a < rank; ++a) lo[a] = s[a];
  std::vector<int64_t> idx(rank, 0);
  bool any = false;
  for (int64_t flat = 0; flat < image.size(); ++flat) {
    if (image[flat] > threshold) {
      any = true;
      int64_t rem = flat;
      for (size_t a = rank; a-- > 0;) {
        idx[a] = rem % s[a];
        rem /= s[a];
      }
      for (size_t a = 1; a < rank; ++a) {
        lo[a] = std::min(lo[a], idx[a]);
        hi[a] = std::max(hi[a], idx[a]);
      }
    }
  }
  if (!any) throw InputError("crop_nonzero: no value exceeds threshold " + std::to_string(threshold));

  Shape out_shape{s[0]};
  for (size_t a = 1; a < rank; ++a) out_shape.push_back(hi[a] - lo[a] + 1);
  NDArray<float> out(out_shape);
  std::vector<int64_t> oi(rank, 0);
  for (int64_t flat = 0; flat < out.size(); ++flat) {
    int64_t rem = flat;
    for (size_t a = rank; a-- > 0;) {
      oi[a] = rem % out_shape[a];
      rem /= out_shape[a];
    }
    int64_t src = 0;
    for (size_t a = 0; a < rank; ++a) src = src * s[a] + oi[a] + (a == 0 ? 0 : lo[a]);
    out[flat] = image[src];
  }
  return out;
}

namespace {
// Corner-aligned linear interpolation along one axis.
NDArray<float> resize_axis(const NDArray<float>& x, size_t axis, int64_t target) {
  const Shape& s = x.shape();
  const int64_t n = s[axis];
  if (n == target) return x;
  int64_t outer = 1, inner = 1;
  for (size_t a = 0; a < axis; ++a) outer *= s[a];
  for (size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  Shape os = s;
  os[axis] = target;
  NDArray<float> out(os);
  for (int64_t i = 0; i < target; ++i) {
    const double pos = (target == 1 || n == 1) ? 0.0 : static_cast<double>(i) * (n - 1) / (target - 1);
    const int64_t i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(pos)), n - 1);
    const int64_t i1 = std::min<int64_t>(i0 + 1, n - 1);
    const double t = pos - static_cast<double>(i0);
    for (int64_t o = 0; o < outer; ++o) {
      const float* a = x.data() + (o * n + i0) * inner;
      const float* b = x.data() + (o * n + i1) * inner;
      float* dst = out.data() + (o * target + i) * inner;
      for (int64_t k = 0; k < inner; ++k)
        dst[k] = static_cast<float>((1.0 - t) * static_cast<double>(a[k]) + t * static_cast<double>(b[k]));
    }
  }
  return out;
}
}  // namespace

NDArray<float> resize(const NDArray<float>& x, const std::vector<int64_t>& target) {
  if (x.rank() != target.size() + 1)
    throw InputError("resize: " + std::to_string(target.size()) + " target extents for shape " +
                     shape_str(x.shape()));
  for (auto t : target)
    if (t < 1) throw InputError("resize: target extents must be >= 1");
  NDArray<float> out = x;
  for (size_t a = 0; a < target.size(); ++a) out = resize_axis(out, a + 1, target[a]);
  return out;
}

NDArray<float> duplicate_to_volume(const NDArray<float>& image, int64_t depth) {
  if (image.rank() != 3) throw InputError("duplicate_to_volume: expected [C,X,Y], got " + shape_str(image.shape()));
  if (depth < 1) throw InputError("duplicate_to_volume: depth must be >= 1");
  const int64_t C = image.dim(0), plane = image.dim(1) * image.dim(2);
  NDArray<float> out({C, depth, image.dim(1), image.dim(2)});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t z = 0; z < depth; ++z)
      std::copy_n(image.data() + c * plane, plane, out.data() + (c * depth + z) * plane);
  return out;
}

NDArray<float> minmax_normalize(const NDArray<float>& x) {
  if (x.empty()) return x;
  const auto [mn, mx] = std::minmax_element(x.storage().begin(), x.storage().end());
  const float lo = *mn, range = *mx - *mn;
  NDArray<float> out(x.shape());
  if (range <= 0.0f) return out;
  for (int64_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo) / range;
  return out;
}

NDArray<float> preprocess(const NDArray<float>& x, const std::vector<int64_t>& target, float threshold) {
  return minmax_normalize(resize(crop_nonzero(x, threshold), target));
}

NDArray<float> to_grid(const NDArray<float>& x, const std::vector<int64_t>& grid) {
  if (grid.size() != 3) throw InputError("to_grid: grid must be (Z, X, Y)");
  if (x.rank() == 3) return duplicate_to_volume(resize(x, {grid[1], grid[2]}), grid[0]);
  if (x.rank() == 4) return resize(x, grid);
  throw InputError("to_grid: expected an image or a volume, got " + shape_str(x.shape()));
}

// ---------------------------------------------------------------------------------------
// Augmentation

namespace {
NDArray<float> flip_axis(const NDArray<float>& x, size_t axis) {
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  for (size_t a = 0; a < axis; ++a) outer *= s[a];
  for (size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const int64_t n = s[axis];
  NDArray<float> out(s);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < n; ++i)
      std::copy_n(x.data() + (o * n + i) * inner, inner, out.data() + (o * n + (n - 1 - i)) * inner);
  return out;
}
}  // namespace

NDArray<float> apply_augmentation(const NDArray<float>& x, double gamma, double sigma, bool flip_x, bool flip_y,
                                  uint64_t noise_seed) {
  if (x.rank() != 3 && x.rank() != 4) throw InputError("augment: expected an image or a volume");
  NDArray<float> out = x;
  if (gamma != 1.0) {
    const auto g = static_cast<float>(gamma);
    for (auto& v : out.values()) {
      if (!(v >= 0.0f && v <= 1.0f))
        throw InputError("augment: gamma needs intensities normalized to [0,1], found " + std::to_string(v));
      v = std::pow(v, g);
    }
  }
  if (sigma > 0.0) {
    Rng rng(noise_seed);
    std::normal_distribution<float> noise(0.0f, static_cast<float>(sigma));
    for (auto& v : out.values()) v += noise(rng.engine());
  }
  const size_t ax = x.rank() == 3 ? 1 : 2;
  if (flip_x) out = flip_axis(out, ax);
  if (flip_y) out = flip_axis(out, ax + 1);
  return out;
}

Sample augment(const Sample& sample, uint64_t seed, const AugmentPolicy& policy) {
  if (!policy.enabled) return sample;
  Sample out = sample;
  Rng rng(seed, "augment");
  auto allows = [&](const NDArray<float>& a, char axis) {
    const std::string& axes = a.rank() == 3 ? policy.flip_axes_2d : policy.flip_axes_3d;
    return axes.find(axis) != std::string::npos;
  };
  bool shared_x = false, shared_y = false;
  if (sample.registered) {
    bool all_x = true, all_y = true;
    for (const auto& m : sample.modalities) {
      all_x = all_x && allows(m.data, 'X');
      all_y = all_y && allows(m.data, 'Y');
    }
    shared_x = all_x && rng.bernoulli(policy.flip_prob);
    shared_y = all_y && rng.bernoulli(policy.flip_prob);
  }
  for (auto& m : out.modalities) {
    const double gamma = rng.uniform(policy.gamma_min, policy.gamma_max);
    const double sigma = rng.uniform(0.0, policy.noise_max);
    bool fx = shared_x, fy = shared_y;
    if (!sample.registered) {
      fx = allows(m.data, 'X') && rng.bernoulli(policy.flip_prob);
      fy = allows(m.data, 'Y') && rng.bernoulli(policy.flip_prob);
    }
    const uint64_t noise_seed = rng.engine()();
    m.data = apply_augmentation(m.data, gamma, sigma, fx, fy, noise_seed);
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// Synthetic planted-XOR benchmark

namespace {

int64_t to_index(double frac, int64_t extent) {
  return static_cast<int64_t>(std::lround(frac * static_cast<double>(extent - 1)));
}

NDArray<float> render_image(const SynthSpec& spec, const SynthLatent& lat, Rng& rng) {
  const int64_t X = spec.image_size[0], Y = spec.image_size[1];
  NDArray<float> img({1, X, Y});
  const int64_t cx = to_index(lat.cx, X) + lat.shift_x;
  const int64_t cy = to_index(lat.cy, Y) + lat.shift_y;
  // u = 0: long along Y (horizontal); u = 1: long along X (vertical).
  const double len_x = (lat.u ? spec.bar_length : spec.bar_width) * static_cast<double>(X);
  const double len_y = (lat.u ? spec.bar_width : spec.bar_length) * static_cast<double>(Y);
  const int64_t hx = std::max<int64_t>(0, std::lround(len_x / 2.0));
  const int64_t hy = std::max<int64_t>(0, std::lround(len_y / 2.0));
  for (int64_t x = cx - hx; x <= cx + hx; ++x)
    for (int64_t y = cy - hy; y <= cy + hy; ++y)
      if (x >= 0 && x < X && y >= 0 && y < Y) img[x * Y + y] = 1.0f;
  for (auto& v : img.values()) v += static_cast<float>(rng.normal(0.0, spec.noise));
  return minmax_normalize(img);
}

NDArray<float> render_volume(const SynthSpec& spec, const SynthLatent& lat, Rng& rng) {
  const int64_t Z = spec.volume_size[0], X = spec.volume_size[1], Y = spec.volume_size[2];
  NDArray<float> vol({1, Z, X, Y});
  const int64_t mid = Z / 2;
  const int64_t thick = std::max<int64_t>(1, std::lround(spec.slab_thickness * static_cast<double>(Z)));
  const int64_t z0 = lat.v ? mid + 1 : mid - thick;
  const int64_t cx = to_index(lat.cx, X), cy = to_index(lat.cy, Y);
  const int64_t hx = std::lround(spec.slab_half_width * static_cast<double>(X));
  const int64_t hy = std::lround(spec.slab_half_width * static_cast<double>(Y));
  for (int64_t z = 0; z < Z; ++z)
    for (int64_t x = 0; x < X; ++x)
      for (int64_t y = 0; y < Y; ++y) {
        float v = z == mid ? 0.5f : 0.0f;
        if (z >= z0 && z < z0 + thick && std::abs(x - cx) <= hx && std::abs(y - cy) <= hy) v = 1.0f;
        vol[(z * X + x) * Y + y] = v;
      }
  for (auto& v : vol.values()) v += static_cast<float>(rng.normal(0.0, spec.noise));
  return minmax_normalize(vol);
}

}  // namespace

std::vector<Sample> synth_samples(const SynthSpec& spec, std::vector<SynthLatent>* latents) {
  if (spec.image_size.size() != 2 || spec.volume_size.size() != 3)
    throw ConfigError("synth: image size must be (X,Y) and volume size (Z,X,Y)");
  for (auto e : spec.image_size)
    if (e < 4) throw ConfigError("synth: image extents must be >= 4");
  for (auto e : spec.volume_size)
    if (e < 4) throw ConfigError("synth: volume extents must be >= 4");
  if (spec.n_samples < 0) throw ConfigError("synth: n_samples must be >= 0");

  std::vector<Sample> out;
  if (latents) latents->clear();
  for (int64_t i = 0; i < spec.n_samples; ++i) {
    Rng rng(derive_seed(spec.seed, "synth", static_cast<uint64_t>(i)));
    SynthLatent lat;
    lat.u = rng.bernoulli(0.5) ? 1 : 0;
    lat.v = rng.bernoulli(0.5) ? 1 : 0;
    lat.cx = rng.uniform(spec.center_margin, 1.0 - spec.center_margin);
    lat.cy = rng.uniform(spec.center_margin, 1.0 - spec.center_margin);
    if (!spec.registered) {
      const auto mx = static_cast<int64_t>(std::floor(spec.max_shift * static_cast<double>(spec.image_size[0])));
      const auto my = static_cast<int64_t>(std::floor(spec.max_shift * static_cast<double>(spec.image_size[1])));
      lat.shift_x = rng.randint(-mx, mx);
      lat.shift_y = rng.randint(-my, my);
    }
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%05lld", static_cast<long long>(i));
    s.id = buf;
    s.label = lat.u ^ lat.v;
    s.registered = spec.registered;
    s.modalities.push_back({"image", render_image(spec, lat, rng)});
    s.modalities.push_back({"volume", render_volume(spec, lat, rng)});
    out.push_back(std::move(s));
    if (latents) latents->push_back(lat);
  }
  return out;
}

DatasetManifest synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir, int64_t n_train,
                               int64_t n_val) {
  if (n_train < 0 || n_val < 0 || n_train + n_val > spec.n_samples)
    throw ConfigError("synth: split sizes exceed n_samples");
  std::filesystem::create_directories(out_dir);
  const auto samples = synth_samples(spec);
  std::vector<ManifestRecord> records;
  for (size_t i = 0; i < samples.size(); ++i) {
    const Split split = static_cast<int64_t>(i) < n_train            ? Split::kTrain
                        : static_cast<int64_t>(i) < n_train + n_val ? Split::kVal
                                                                     : Split::kTest;
    for (const auto& m : samples[i].modalities) {
      const std::string file = samples[i].id + "_" + m.name + ".mmft";
      save_tensor(out_dir / file, m.data);
      records.push_back({samples[i].id, m.name, file, samples[i].label, split});
    }
  }
  DatasetManifest manifest(std::move(records), out_dir);
  manifest.save(out_dir / "manifest.csv");
  return manifest;
}

}  // namespace mmf
