#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <tuple>

#include "mmfusion/datapipe.hpp"
#include "mmfusion/serialize.hpp"

using namespace mmf;
namespace fs = std::filesystem;

namespace {

NDArray<float> random_image(Shape shape, std::mt19937_64& rng, float lo = 0.1f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  NDArray<float> a(std::move(shape));
  for (auto& v : a.values()) v = u(rng);
  return a;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mmfusion_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Row-major index for [C, X, Y].
int64_t at(const NDArray<float>& a, int64_t c, int64_t x, int64_t y) { return (c * a.dim(1) + x) * a.dim(2) + y; }

}  // namespace

TEST(Crop, BoundingBoxExample) {
  NDArray<float> img({1, 8, 10});
  for (int64_t x = 2; x <= 5; ++x)
    for (int64_t y = 3; y <= 7; ++y) img[at(img, 0, x, y)] = 1.0f;
  auto c = crop_nonzero(img);
  EXPECT_EQ(c.shape(), (Shape{1, 4, 5}));
}

TEST(Crop, NoBorderIsUnchanged) {
  std::mt19937_64 rng(1);
  auto img = random_image({2, 6, 7}, rng);
  EXPECT_EQ(crop_nonzero(img), img);
}

TEST(Crop, AllBelowThresholdIsInputError) {
  NDArray<float> img({1, 4, 4}, 0.2f);
  EXPECT_THROW(crop_nonzero(img, 0.5f), InputError);
}

TEST(Crop, PlantedBorderMatchesBruteForceScan) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int64_t> ext(3, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t C = 1 + trial % 3, X = ext(rng), Y = ext(rng);
    NDArray<float> img({C, X, Y});
    std::uniform_real_distribution<float> u(0, 1);
    // Sparse content: brute-force box must be computed rather than assumed.
    for (auto& v : img.values()) v = u(rng) < 0.15f ? u(rng) : 0.0f;
    img[at(img, C - 1, X / 2, Y / 2)] = 1.0f;
    int64_t x0 = X, x1 = -1, y0 = Y, y1 = -1;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t x = 0; x < X; ++x)
        for (int64_t y = 0; y < Y; ++y)
          if (img[at(img, c, x, y)] > 0.0f) {
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
          }
    auto got = crop_nonzero(img);
    ASSERT_EQ(got.shape(), (Shape{C, x1 - x0 + 1, y1 - y0 + 1})) << "trial " << trial;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t x = 0; x < got.dim(1); ++x)
        for (int64_t y = 0; y < got.dim(2); ++y)
          ASSERT_EQ(got[at(got, c, x, y)], img[at(img, c, x + x0, y + y0)]);
  }
}

TEST(Crop, ZeroPaddingThenCropIsIdentity) {
  std::mt19937_64 rng(3);
  auto content = random_image({1, 3, 4, 5}, rng);
  NDArray<float> padded({1, 7, 6, 9});
  for (int64_t z = 0; z < 3; ++z)
    for (int64_t x = 0; x < 4; ++x)
      for (int64_t y = 0; y < 5; ++y) padded[((z + 2) * 6 + x + 1) * 9 + y + 3] = content[(z * 4 + x) * 5 + y];
  EXPECT_EQ(crop_nonzero(padded), content);
}

TEST(Resize, IdentityAndConstant) {
  std::mt19937_64 rng(4);
  auto img = random_image({2, 5, 6}, rng);
  EXPECT_EQ(resize(img, {5, 6}), img);
  NDArray<float> flat({1, 4, 3, 5}, 0.375f);
  const auto r = resize(flat, {7, 2, 9});
  for (float v : r.values()) EXPECT_FLOAT_EQ(v, 0.375f);
}

TEST(Resize, RampCornerAligned) {
  NDArray<float> ramp({1, 1, 4}, std::vector<float>{0, 1, 2, 3});
  auto r = resize(ramp, {1, 7});
  const std::vector<float> want{0, 0.5f, 1, 1.5f, 2, 2.5f, 3};
  ASSERT_EQ(r.size(), 7);
  for (int64_t i = 0; i < 7; ++i) EXPECT_FLOAT_EQ(r[i], want[static_cast<size_t>(i)]);
}

TEST(Resize, BilinearMatchesDirectFormula) {
  std::mt19937_64 rng(5);
  auto img = random_image({1, 4, 5}, rng);
  auto r = resize(img, {7, 3});
  for (int64_t i = 0; i < 7; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      const double px = i * 3.0 / 6.0, py = j * 4.0 / 2.0;
      const auto x0 = static_cast<int64_t>(std::floor(px)), y0 = static_cast<int64_t>(std::floor(py));
      const int64_t x1 = std::min<int64_t>(x0 + 1, 3), y1 = std::min<int64_t>(y0 + 1, 4);
      const double fx = px - x0, fy = py - y0;
      auto v = [&](int64_t x, int64_t y) { return static_cast<double>(img[x * 5 + y]); };
      const double want = (1 - fx) * ((1 - fy) * v(x0, y0) + fy * v(x0, y1)) + fx * ((1 - fy) * v(x1, y0) + fy * v(x1, y1));
      EXPECT_NEAR(r[i * 3 + j], want, 1e-6);
    }
}

TEST(Duplicate, EverySliceEqualsInput) {
  std::mt19937_64 rng(6);
  auto img = random_image({2, 3, 4}, rng);
  auto one = duplicate_to_volume(img, 1);
  EXPECT_EQ(one.shape(), (Shape{2, 1, 3, 4}));
  auto vol = duplicate_to_volume(img, 5);
  ASSERT_EQ(vol.shape(), (Shape{2, 5, 3, 4}));
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t z = 0; z < 5; ++z)
      for (int64_t i = 0; i < 12; ++i) EXPECT_EQ(vol[(c * 5 + z) * 12 + i], img[c * 12 + i]);
  // Mean over depth reproduces the input exactly.
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t i = 0; i < 12; ++i) {
      double s = 0;
      for (int64_t z = 0; z < 5; ++z) s += vol[(c * 5 + z) * 12 + i];
      EXPECT_EQ(static_cast<float>(s / 5.0), img[c * 12 + i]);
    }
}

TEST(Normalize, MinMaxAndConstant) {
  NDArray<float> x({1, 2, 2}, std::vector<float>{2, 4, 6, 10});
  auto n = minmax_normalize(x);
  EXPECT_FLOAT_EQ(n[0], 0.0f);
  EXPECT_FLOAT_EQ(n[1], 0.25f);
  EXPECT_FLOAT_EQ(n[3], 1.0f);
  const auto z = minmax_normalize(NDArray<float>({1, 3, 3}, 7.0f));
  for (float v : z.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Augment, NeutralParametersAreIdentity) {
  std::mt19937_64 rng(7);
  auto img = random_image({1, 5, 6}, rng);
  EXPECT_EQ(apply_augmentation(img, 1.0, 0.0, false, false, 3), img);
}

TEST(Augment, GammaOutsideUnitRangeIsInputError) {
  NDArray<float> x({1, 2, 2}, std::vector<float>{0, 0.5f, 1.0f, 1.5f});
  EXPECT_THROW(apply_augmentation(x, 1.2, 0.0, false, false, 0), InputError);
}

TEST(Augment, GammaIsPower) {
  NDArray<float> x({1, 1, 3}, std::vector<float>{0.25f, 0.5f, 1.0f});
  auto y = apply_augmentation(x, 2.0, 0.0, false, false, 0);
  EXPECT_FLOAT_EQ(y[0], 0.0625f);
  EXPECT_FLOAT_EQ(y[1], 0.25f);
  EXPECT_FLOAT_EQ(y[2], 1.0f);
}

TEST(Augment, DoubleFlipIsIdentity) {
  std::mt19937_64 rng(8);
  auto img = random_image({1, 5, 6}, rng);
  auto once = apply_augmentation(img, 1.0, 0.0, false, true, 0);
  EXPECT_NE(once, img);
  EXPECT_EQ(img[at(img, 0, 2, 0)], once[at(once, 0, 2, 5)]);
  EXPECT_EQ(apply_augmentation(once, 1.0, 0.0, false, true, 0), img);
  auto vol = random_image({1, 3, 4, 5}, rng);
  EXPECT_EQ(apply_augmentation(apply_augmentation(vol, 1.0, 0.0, true, true, 0), 1.0, 0.0, true, true, 0), vol);
}

TEST(Augment, DeterministicShapeAndLabelPreserving) {
  SynthSpec spec;
  spec.n_samples = 6;
  spec.image_size = {16, 16};
  spec.volume_size = {8, 16, 16};
  AugmentPolicy policy;
  for (const auto& s : synth_samples(spec)) {
    auto a = augment(s, 99, policy);
    auto b = augment(s, 99, policy);
    EXPECT_EQ(a.label, s.label);
    ASSERT_EQ(a.modalities.size(), s.modalities.size());
    for (size_t m = 0; m < a.modalities.size(); ++m) {
      EXPECT_EQ(a.modalities[m].data, b.modalities[m].data);
      EXPECT_EQ(a.modalities[m].data.shape(), s.modalities[m].data.shape());
      EXPECT_TRUE(a.modalities[m].data.all_finite());
    }
  }
}

TEST(Augment, RegisteredFlipsAreShared) {
  // Gamma and noise disabled so only flips act; an image duplicated into a volume must
  // stay duplicated when flips are applied consistently.
  std::mt19937_64 rng(9);
  AugmentPolicy policy;
  policy.gamma_min = policy.gamma_max = 1.0;
  policy.noise_max = 0.0;
  policy.flip_prob = 0.5;
  policy.flip_axes_2d = "XY";
  int flipped = 0;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    Sample s;
    auto img = random_image({1, 6, 7}, rng);
    s.modalities = {{"image", img}, {"volume", duplicate_to_volume(img, 2)}};
    s.registered = true;
    auto a = augment(s, seed, policy);
    EXPECT_EQ(duplicate_to_volume(a.get("image"), 2), a.get("volume")) << seed;
    flipped += a.get("image") != img;
  }
  EXPECT_GT(flipped, 10);
}

TEST(Synth, LatentsDetermineLabelAndBalance) {
  SynthSpec spec;
  spec.n_samples = 10000;
  spec.image_size = {8, 8};
  spec.volume_size = {4, 8, 8};
  std::vector<SynthLatent> lat;
  auto samples = synth_samples(spec, &lat);
  int64_t ones = 0, u1 = 0, u1_label1 = 0, v1 = 0, v1_label1 = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    ASSERT_EQ(samples[i].label, lat[i].u ^ lat[i].v);
    ones += samples[i].label;
    u1 += lat[i].u, v1 += lat[i].v;
    u1_label1 += lat[i].u && samples[i].label;
    v1_label1 += lat[i].v && samples[i].label;
  }
  const double balance = static_cast<double>(ones) / 10000.0;
  EXPECT_GE(balance, 0.48);
  EXPECT_LE(balance, 0.52);
  // Each bit alone carries no label information: P(label | bit) stays near 1/2.
  EXPECT_NEAR(static_cast<double>(u1_label1) / static_cast<double>(u1), 0.5, 0.03);
  EXPECT_NEAR(static_cast<double>(v1_label1) / static_cast<double>(v1), 0.5, 0.03);
}

TEST(Synth, NoiselessPairDeterminesLabel) {
  SynthSpec spec;
  spec.n_samples = 200;
  spec.noise = 0.0;
  spec.image_size = {32, 32};
  spec.volume_size = {8, 32, 32};
  for (bool registered : {true, false}) {
    spec.registered = registered;
    auto samples = synth_samples(spec);
    for (const auto& s : samples) {
      const auto& img = s.get("image");
      // Orientation: spread of bright pixels along X versus along Y.
      double sx = 0, sy = 0, w = 0, mx = 0, my = 0;
      for (int64_t x = 0; x < 32; ++x)
        for (int64_t y = 0; y < 32; ++y) {
          const double v = img[x * 32 + y];
          w += v, mx += v * x, my += v * y;
        }
      mx /= w, my /= w;
      for (int64_t x = 0; x < 32; ++x)
        for (int64_t y = 0; y < 32; ++y) {
          const double v = img[x * 32 + y];
          sx += v * (x - mx) * (x - mx), sy += v * (y - my) * (y - my);
        }
      const int u = sx > sy ? 1 : 0;
      // Slab depth: the slice holding the brightest voxel, above or below the mid-depth sheet.
      const auto& vol = s.get("volume");
      std::vector<double> depth(8, 0.0);
      for (int64_t z = 0; z < 8; ++z)
        for (int64_t i = 0; i < 32 * 32; ++i)
          depth[static_cast<size_t>(z)] = std::max<double>(depth[static_cast<size_t>(z)], vol[z * 1024 + i]);
      const auto zmax = std::max_element(depth.begin(), depth.end()) - depth.begin();
      const int v = zmax > 4 ? 1 : 0;
      EXPECT_EQ(u ^ v, s.label) << s.id << (registered ? " registered" : " shifted");
    }
  }
}

TEST(Synth, RegisteredStructuresCoincide) {
  SynthSpec spec;
  spec.n_samples = 40;
  spec.noise = 0.0;
  spec.image_size = {32, 32};
  spec.volume_size = {8, 32, 32};
  auto samples = synth_samples(spec);
  for (const auto& s : samples) {
    const auto& img = s.get("image");
    const auto& vol = s.get("volume");
    // En-face footprint of the slab: voxels brighter than the reference sheet.
    std::vector<double> slab(32 * 32, 0.0);
    for (int64_t z = 0; z < 8; ++z)
      for (int64_t j = 0; j < 32 * 32; ++j)
        if (vol[z * 1024 + j] > 0.75f) slab[static_cast<size_t>(j)] = 1.0;
    // The bar is longer than the slab, so the correlation peak is a plateau; use its centre.
    std::vector<std::tuple<double, int64_t, int64_t>> scores;
    double best = -1;
    for (int64_t dx = -12; dx <= 12; ++dx)
      for (int64_t dy = -12; dy <= 12; ++dy) {
        double acc = 0;
        for (int64_t x = 0; x < 32; ++x)
          for (int64_t y = 0; y < 32; ++y) {
            const int64_t xs = x + dx, ys = y + dy;
            if (xs < 0 || ys < 0 || xs >= 32 || ys >= 32) continue;
            acc += img[xs * 32 + ys] * slab[static_cast<size_t>(x * 32 + y)];
          }
        scores.emplace_back(acc, dx, dy);
        best = std::max(best, acc);
      }
    double cx = 0, cy = 0, n = 0;
    for (const auto& [acc, dx, dy] : scores)
      if (acc >= best - 1e-9) cx += static_cast<double>(dx), cy += static_cast<double>(dy), n += 1;
    EXPECT_LE(std::abs(cx / n), 0.5) << s.id;
    EXPECT_LE(std::abs(cy / n), 0.5) << s.id;
  }
}

TEST(Synth, MisregisteredImageIsTranslatedCopy) {
  SynthSpec spec;
  spec.n_samples = 40;
  spec.noise = 0.0;
  spec.image_size = {32, 24};
  spec.volume_size = {8, 32, 24};
  auto reg = synth_samples(spec);
  spec.registered = false;
  std::vector<SynthLatent> lat;
  auto mis = synth_samples(spec, &lat);
  int shifted = 0;
  for (size_t i = 0; i < mis.size(); ++i) {
    EXPECT_EQ(mis[i].get("volume"), reg[i].get("volume"));
    EXPECT_EQ(mis[i].label, reg[i].label);
    const auto& a = reg[i].get("image");
    const auto& b = mis[i].get("image");
    NDArray<float> moved({1, 32, 24});
    for (int64_t x = 0; x < 32; ++x)
      for (int64_t y = 0; y < 24; ++y) {
        const int64_t xs = x - lat[i].shift_x, ys = y - lat[i].shift_y;
        if (xs >= 0 && ys >= 0 && xs < 32 && ys < 24) moved[x * 24 + y] = a[xs * 24 + ys];
      }
    EXPECT_EQ(minmax_normalize(moved), b) << i;
    shifted += lat[i].shift_x != 0 || lat[i].shift_y != 0;
  }
  EXPECT_GT(shifted, 30);
}

TEST(Synth, ShiftsBoundedByQuarterExtent) {
  SynthSpec spec;
  spec.n_samples = 500;
  spec.registered = false;
  std::vector<SynthLatent> lat;
  synth_samples(spec, &lat);
  int64_t max_seen = 0;
  for (const auto& l : lat) {
    EXPECT_LE(std::abs(l.shift_x), spec.image_size[0] / 4);
    EXPECT_LE(std::abs(l.shift_y), spec.image_size[1] / 4);
    max_seen = std::max({max_seen, std::abs(l.shift_x), std::abs(l.shift_y)});
  }
  EXPECT_EQ(max_seen, spec.image_size[0] / 4);
}

TEST(Synth, SampleDependsOnlyOnSeedAndIndex) {
  SynthSpec a;
  a.n_samples = 5;
  SynthSpec b = a;
  b.n_samples = 9;
  auto sa = synth_samples(a);
  auto sb = synth_samples(b);
  for (size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i].get("volume"), sb[i].get("volume"));
}

TEST(Manifest, GenerateRoundTripAndValidate) {
  auto dir = temp_dir("manifest");
  SynthSpec spec;
  spec.n_samples = 16;
  auto m = synth_generate(spec, dir, 8, 4);
  auto loaded = DatasetManifest::load(dir / "manifest.csv");
  EXPECT_EQ(loaded.ids().size(), 16u);
  EXPECT_EQ(loaded.ids(Split::kTrain).size(), 8u);
  EXPECT_EQ(loaded.ids(Split::kVal).size(), 4u);
  EXPECT_EQ(loaded.ids(Split::kTest).size(), 4u);
  EXPECT_EQ(loaded.modality_names(), (std::vector<std::string>{"image", "volume"}));
  EXPECT_NO_THROW(loaded.validate());
  auto direct = synth_samples(spec);
  auto s = loaded.load_sample("s00003");
  EXPECT_EQ(s.label, direct[3].label);
  EXPECT_EQ(s.get("image"), direct[3].get("image"));
  EXPECT_EQ(s.get("volume"), direct[3].get("volume"));
  for (const auto& r : loaded.records()) EXPECT_NO_THROW(load_tensor<float>(dir / r.path));
}

TEST(Manifest, RejectsBadHeaderMissingFileAndInconsistentLabels) {
  auto dir = temp_dir("manifest_bad");
  {
    std::ofstream(dir / "a.csv") << "id,path,label\n";
  }
  EXPECT_THROW(DatasetManifest::load(dir / "a.csv"), InputError);
  {
    std::ofstream(dir / "b.csv") << "id,modality,path,label,split\nx,image,missing.mmft,0,train\n";
  }
  EXPECT_THROW(DatasetManifest::load(dir / "b.csv").validate(), InputError);
  save_tensor(dir / "t.mmft", NDArray<float>({1, 4, 4}, 1.0f));
  {
    std::ofstream(dir / "c.csv") << "id,modality,path,label,split\nx,image,t.mmft,0,train\nx,volume,t.mmft,1,train\n";
  }
  EXPECT_THROW(DatasetManifest::load(dir / "c.csv").validate(), InputError);
  {
    std::ofstream(dir / "d.csv") << "id,modality,path,label,split\nx,image,t.mmft,zero,train\n";
  }
  EXPECT_THROW(DatasetManifest::load(dir / "d.csv"), InputError);
}

TEST(Serialize, TensorRoundTripIsBitExact) {
  auto dir = temp_dir("serialize");
  std::mt19937_64 rng(10);
  NDArray<double> d({2, 3, 4});
  std::normal_distribution<double> n;
  for (auto& v : d.values()) v = n(rng);
  save_tensor(dir / "d.mmft", d);
  EXPECT_EQ(load_tensor<double>(dir / "d.mmft"), d);
  auto f = random_image({3, 5}, rng);
  save_tensor(dir / "f.mmft", f);
  EXPECT_EQ(load_tensor<float>(dir / "f.mmft"), f);
  std::ifstream is(dir / "f.mmft", std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "MMFT");
  EXPECT_EQ(fs::file_size(dir / "f.mmft"), 4u + 4 + 4 + 4 + 2 * 8 + 15 * 4);
}
