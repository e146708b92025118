#include "mmfusion/backbone.hpp"

#include <sstream>

namespace mmf {

std::string to_string(Dimensionality d) { return d == Dimensionality::k2D ? "2d" : "3d"; }

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kBasic:
      return "basic";
    case BlockKind::kBottleneck:
      return "bottleneck";
    case BlockKind::kDense:
      return "dense";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& s) {
  if (s == "basic") return BlockKind::kBasic;
  if (s == "bottleneck") return BlockKind::kBottleneck;
  if (s == "dense") return BlockKind::kDense;
  throw ConfigError("unknown block kind '" + s + "' (expected basic, bottleneck or dense)");
}

Shape FeatureShape::batched(int64_t n) const {
  Shape s{n, channels};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return s;
}

std::string FeatureShape::str() const {
  std::ostringstream os;
  os << channels;
  for (auto e : spatial) os << 'x' << e;
  return os.str();
}

FeatureShape parse_feature_shape(const std::string& s) {
  std::vector<int64_t> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, 'x')) {
    try {
      size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      parts.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad shape '" + s + "': expected positive extents joined by 'x'");
    }
  }
  if (parts.size() != 3 && parts.size() != 4)
    throw ConfigError("bad shape '" + s + "': expected CxXxY or CxZxXxY");
  return FeatureShape{parts[0], std::vector<int64_t>(parts.begin() + 1, parts.end())};
}

int64_t BackboneSpec::growth_for_stage(int s) const {
  if (growth_rate > 0) return growth_rate;
  return std::max<int64_t>(1, stage_channels.at(s) / (2 * blocks_per_stage.at(s)));
}

void apply_preset(BackboneSpec& spec, const std::string& preset) {
  spec.stem_kernel = 7;
  spec.stem_channels = 64;
  spec.growth_rate = 0;
  if (preset == "resnet18" || preset == "resnet34") {
    spec.block = BlockKind::kBasic;
    spec.stage_channels = {64, 128, 256, 512};
    spec.blocks_per_stage = preset == "resnet18" ? std::vector<int64_t>{2, 2, 2, 2}
                                                 : std::vector<int64_t>{3, 4, 6, 3};
  } else if (preset == "resnet50" || preset == "resnet101" || preset == "resnet152") {
    spec.block = BlockKind::kBottleneck;
    spec.stage_channels = {256, 512, 1024, 2048};
    if (preset == "resnet50") spec.blocks_per_stage = {3, 4, 6, 3};
    if (preset == "resnet101") spec.blocks_per_stage = {3, 4, 23, 3};
    if (preset == "resnet152") spec.blocks_per_stage = {3, 8, 36, 3};
  } else if (preset == "densenet121" || preset == "densenet169") {
    spec.block = BlockKind::kDense;
    spec.growth_rate = 32;
    spec.blocks_per_stage = preset == "densenet121" ? std::vector<int64_t>{6, 12, 24, 16}
                                                    : std::vector<int64_t>{6, 12, 32, 32};
    // Stage output = transition width + layers * growth, transitions halving as in DenseNet.
    int64_t base = 64;
    spec.stage_channels.clear();
    for (auto layers : spec.blocks_per_stage) {
      const int64_t out = base + layers * 32;
      spec.stage_channels.push_back(out);
      base = out / 2;
    }
  } else {
    throw ConfigError("unknown backbone preset '" + preset + "'");
  }
}

void validate(const BackboneSpec& spec) {
  const int want = static_cast<int>(spec.dims);
  if (spec.input.spatial_dims() != want)
    throw ConfigError("backbone " + to_string(spec.dims) + ": input shape " + spec.input.str() +
                      " has the wrong number of spatial extents");
  if (spec.input.channels < 1) throw ConfigError("backbone: input channels must be >= 1");
  if (spec.stem_channels < 1) throw ConfigError("backbone: stem_channels must be >= 1");
  if (spec.stem_kernel < 1) throw ConfigError("backbone: stem_kernel must be >= 1");
  if (spec.stage_channels.empty()) throw ConfigError("backbone: at least one stage required");
  if (spec.stage_channels.size() != spec.blocks_per_stage.size())
    throw ConfigError("backbone: stage_channels and blocks_per_stage lengths differ");
  for (int s = 0; s < spec.num_stages(); ++s) {
    if (spec.stage_channels[s] < 1 || spec.blocks_per_stage[s] < 1)
      throw ConfigError("backbone stage " + std::to_string(s + 1) + ": widths and block counts must be >= 1");
    if (spec.block == BlockKind::kDense &&
        spec.stage_channels[s] - spec.blocks_per_stage[s] * spec.growth_for_stage(s) < 1)
      throw ConfigError("backbone stage " + std::to_string(s + 1) +
                        ": dense width must exceed layers * growth");
  }
}

namespace {
// Each downsampling step requires an extent >= 2 so that halving is real.
std::vector<int64_t> downsample(const std::vector<int64_t>& in, int64_t kernel, int64_t pad,
                                const std::string& where) {
  std::vector<int64_t> out;
  for (auto e : in) {
    if (e < 2)
      throw ConfigError(where + ": spatial extent " + std::to_string(e) +
                        " cannot be halved; enlarge the input or use fewer stages");
    out.push_back(conv_out_extent(e, kernel, 2, pad));
  }
  return out;
}
}  // namespace

FeatureShape infer_stem_shape(const BackboneSpec& spec) {
  validate(spec);
  auto sp = downsample(spec.input.spatial, spec.stem_kernel, spec.stem_kernel / 2, "stem convolution");
  sp = downsample(sp, 3, 1, "stem pooling");
  return FeatureShape{spec.stem_channels, sp};
}

std::vector<FeatureShape> infer_tap_shapes(const BackboneSpec& spec) {
  FeatureShape cur = infer_stem_shape(spec);
  std::vector<FeatureShape> taps;
  for (int s = 0; s < spec.num_stages(); ++s) {
    if (s > 0) cur.spatial = downsample(cur.spatial, 3, 1, "stage " + std::to_string(s + 1));
    cur.channels = spec.stage_channels[s];
    taps.push_back(cur);
  }
  return taps;
}

template <typename T>
Backbone<T>::Backbone(BackboneSpec spec, Rng& rng)
    : spec_(std::move(spec)),
      taps_(infer_tap_shapes(spec_)),
      stem_conv_(static_cast<int>(spec_.dims), spec_.input.channels, spec_.stem_channels, spec_.stem_kernel,
                 2, spec_.stem_kernel / 2, false, rng),
      stem_bn_(spec_.stem_channels) {
  const int d = static_cast<int>(spec_.dims);
  int64_t in = spec_.stem_channels;
  for (int s = 0; s < spec_.num_stages(); ++s) {
    const int64_t out = spec_.stage_channels[s];
    const int64_t first_stride = s == 0 ? 1 : 2;
    std::vector<std::unique_ptr<Block<T>>> blocks;
    if (spec_.block == BlockKind::kDense) {
      blocks.push_back(std::make_unique<DenseStage<T>>(d, in, out, spec_.blocks_per_stage[s],
                                                       spec_.growth_for_stage(s), first_stride, rng));
    } else {
      for (int64_t b = 0; b < spec_.blocks_per_stage[s]; ++b) {
        const int64_t stride = b == 0 ? first_stride : 1;
        const int64_t bin = b == 0 ? in : out;
        if (spec_.block == BlockKind::kBasic)
          blocks.push_back(std::make_unique<BasicBlock<T>>(d, bin, out, stride, rng));
        else
          blocks.push_back(std::make_unique<BottleneckBlock<T>>(d, bin, out, stride, rng));
      }
    }
    stages_.push_back(std::move(blocks));
    in = out;
  }
}

template <typename T>
BackboneOutput<T> Backbone<T>::forward_with_taps(const Tensor<T>& x) {
  const Shape want = spec_.input.batched(x.rank() > 0 ? x.dim(0) : 1);
  if (x.shape() != want)
    throw InputError("backbone " + to_string(spec_.dims) + ": input shape " + shape_str(x.shape()) +
                     " does not match spec " + shape_str(want));
  const int d = static_cast<int>(spec_.dims);
  auto y = relu(stem_bn_.forward(stem_conv_.forward(x)));
  y = max_pool(d, y, 3, 2, 1);
  BackboneOutput<T> out;
  for (auto& stage : stages_) {
    for (auto& block : stage) y = block->forward(y);
    out.taps.push_back(y);
  }
  out.pooled = global_avg_pool(y);
  return out;
}

template <typename T>
void Backbone<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  stem_conv_.collect(this->join(prefix, "stem.conv"), out);
  stem_bn_.collect(this->join(prefix, "stem.bn"), out);
  for (size_t s = 0; s < stages_.size(); ++s)
    for (size_t b = 0; b < stages_[s].size(); ++b)
      stages_[s][b]->collect(this->join(prefix, "stage" + std::to_string(s + 1) + ".block" + std::to_string(b)),
                             out);
}

template <typename T>
void Backbone<T>::set_training(bool on) {
  Module<T>::set_training(on);
  stem_bn_.set_training(on);
  for (auto& stage : stages_)
    for (auto& block : stage) block->set_training(on);
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace mmf
