#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mmfusion/nn.hpp"

namespace mmf {

enum class Dimensionality { k2D = 2, k3D = 3 };
enum class BlockKind { kBasic, kBottleneck, kDense };

std::string to_string(Dimensionality d);
std::string to_string(BlockKind k);
BlockKind parse_block_kind(const std::string& s);

// Channels plus spatial extents: (X, Y) for 2D features, (Z, X, Y) for 3D features.
struct FeatureShape {
  int64_t channels = 1;
  std::vector<int64_t> spatial;

  int spatial_dims() const { return static_cast<int>(spatial.size()); }
  Shape batched(int64_t n) const;  // [n, C, spatial...]
  std::string str() const;          // "CxAxB[xD]"
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

// Parses "3x448x448" (2D) or "1x256x224x164" (3D).
FeatureShape parse_feature_shape(const std::string& s);

struct BackboneSpec {
  Dimensionality dims = Dimensionality::k2D;
  FeatureShape input;  // channels = input channels
  int64_t stem_channels = 64;
  int64_t stem_kernel = 7;
  std::vector<int64_t> stage_channels{64, 128, 256, 512};
  std::vector<int64_t> blocks_per_stage{3, 4, 6, 3};
  BlockKind block = BlockKind::kBasic;
  int64_t growth_rate = 0;  // dense only; 0 = stage_channels[s] / (2 * blocks)

  int num_stages() const { return static_cast<int>(stage_channels.size()); }
  int64_t growth_for_stage(int s) const;
};

// Named depths: resnet18/34/50/101/152, densenet121/169. Sets stem, widths, blocks, kind.
void apply_preset(BackboneSpec& spec, const std::string& preset);

// Throws ConfigError on malformed specs.
void validate(const BackboneSpec& spec);

// Shape after the stem (stride-2 conv then stride-2 max pool).
FeatureShape infer_stem_shape(const BackboneSpec& spec);

// Statically inferred tap shapes, one per stage. Throws ConfigError naming the stage whose
// extent would vanish.
std::vector<FeatureShape> infer_tap_shapes(const BackboneSpec& spec);

template <typename T>
struct BackboneOutput {
  Tensor<T> pooled;             // [N, C_last]
  std::vector<Tensor<T>> taps;  // per stage, stage output
};

template <typename T>
class Backbone : public Module<T> {
 public:
  Backbone(BackboneSpec spec, Rng& rng);

  BackboneOutput<T> forward_with_taps(const Tensor<T>& x);
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;
  void set_training(bool on) override;

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<FeatureShape>& tap_shapes() const { return taps_; }
  int64_t out_channels() const { return spec_.stage_channels.back(); }

 private:
  BackboneSpec spec_;
  std::vector<FeatureShape> taps_;
  Conv<T> stem_conv_;
  BatchNorm<T> stem_bn_;
  std::vector<std::vector<std::unique_ptr<Block<T>>>> stages_;
};

}  // namespace mmf
