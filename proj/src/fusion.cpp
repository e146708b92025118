#include "mmfusion/fusion.hpp"

#include <sstream>

namespace mmf {

namespace {

std::string tuple_str(const std::vector<int64_t>& v) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << ')';
  return os.str();
}

std::string stage_prefix(int s) { return "stage " + std::to_string(s + 1) + ": "; }

}  // namespace

FeatureShape ConversionParams::output_shape(const FeatureShape& in) const {
  if (in.spatial_dims() != static_cast<int>(kernel.size()))
    throw ConfigError("conversion layer expects " + std::to_string(kernel.size()) +
                      " spatial dims, got shape " + in.str());
  if (in.channels != in_channels)
    throw ConfigError("conversion layer expects " + std::to_string(in_channels) + " channels, got " +
                      std::to_string(in.channels));
  FeatureShape out{out_channels, {}};
  for (size_t i = 0; i < kernel.size(); ++i)
    out.spatial.push_back(conv_out_extent(in.spatial[i], kernel[i], stride[i], padding[i]));
  return out;
}

std::string ConversionParams::str() const {
  std::ostringstream os;
  os << "kernel=" << tuple_str(kernel) << " stride=" << tuple_str(stride) << " pad=" << tuple_str(padding)
     << " channels=" << in_channels << "->" << out_channels;
  return os.str();
}

std::pair<ConversionParams, ConversionParams> conversion_params(const FeatureShape& shape2d,
                                                                const FeatureShape& shape3d,
                                                                int64_t out_channels_3d,
                                                                int64_t out_channels_2d) {
  if (shape2d.spatial_dims() != 2) throw ConfigError("conversion_params: 2D feature shape expected, got " + shape2d.str());
  if (shape3d.spatial_dims() != 3) throw ConfigError("conversion_params: 3D feature shape expected, got " + shape3d.str());
  const int64_t z3 = shape3d.spatial[0], x3 = shape3d.spatial[1], y3 = shape3d.spatial[2];
  const int64_t x2 = shape2d.spatial[0], y2 = shape2d.spatial[1];
  const char* axes[2] = {"X", "Y"};
  const int64_t have[2] = {x2, y2};
  const int64_t target[2] = {x3, y3};
  for (int i = 0; i < 2; ++i) {
    const int64_t minimal = 2 * target[i] - 1;
    if (have[i] < minimal)
      throw ConfigError(std::string("2D feature extent ") + axes[i] + "_2D=" + std::to_string(have[i]) +
                        " is too small to align with " + axes[i] + "_3D=" + std::to_string(target[i]) +
                        "; minimal admissible extent is 2*" + axes[i] + "_3D-1=" + std::to_string(minimal));
  }

  ConversionParams p3;
  p3.mode = ConversionMode::kDepthCollapse3D;
  p3.kernel = {z3, 1, 1};
  p3.stride = {1, 1, 1};
  p3.padding = {0, 0, 0};
  p3.in_channels = shape3d.channels;
  p3.out_channels = out_channels_3d > 0 ? out_channels_3d : shape3d.channels;

  ConversionParams p2;
  p2.mode = ConversionMode::kAlign2D;
  p2.kernel = {x2 - 2 * (x3 - 1), y2 - 2 * (y3 - 1)};
  p2.stride = {2, 2};
  p2.padding = {0, 0};
  p2.in_channels = shape2d.channels;
  p2.out_channels = out_channels_2d > 0 ? out_channels_2d : shape2d.channels;
  return {p3, p2};
}

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kSingle:
      return "single";
    case FusionMode::kEarly:
      return "early";
    case FusionMode::kIntermediate:
      return "intermediate";
    case FusionMode::kHierarchical:
      return "hierarchical";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "single") return FusionMode::kSingle;
  if (s == "early") return FusionMode::kEarly;
  if (s == "intermediate") return FusionMode::kIntermediate;
  if (s == "hierarchical") return FusionMode::kHierarchical;
  throw ConfigError("unknown fusion mode '" + s + "' (expected single, early, intermediate or hierarchical)");
}

int64_t FusionConfig::resolved_head_hidden() const {
  if (head_hidden >= 0) return head_hidden;
  return (mode == FusionMode::kIntermediate || mode == FusionMode::kHierarchical) ? 64 : 0;
}

BackboneSpec FusionConfig::backbone_for(const ModalitySpec& m) const {
  BackboneSpec spec = m.dims() == Dimensionality::k2D ? backbone2d : backbone3d;
  spec.dims = m.dims();
  spec.input = m.shape;
  return spec;
}

std::vector<int64_t> FusionConfig::early_grid() const {
  for (const auto& m : modalities)
    if (m.dims() == Dimensionality::k3D) return m.shape.spatial;
  throw ConfigError("early fusion needs at least one 3D modality to define the common grid");
}

void FusionConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (modalities.empty()) throw ConfigError("no modalities configured");
  for (size_t i = 0; i < modalities.size(); ++i) {
    const auto& m = modalities[i];
    if (m.name.empty()) throw ConfigError("modality name must be non-empty");
    if (m.shape.spatial_dims() != 2 && m.shape.spatial_dims() != 3)
      throw ConfigError("modality '" + m.name + "': shape must be CxXxY or CxZxXxY");
    for (size_t j = 0; j < i; ++j)
      if (modalities[j].name == m.name) throw ConfigError("duplicate modality '" + m.name + "'");
  }
  if (mode == FusionMode::kSingle && modalities.size() != 1)
    throw ConfigError("single-modality mode takes exactly one modality");
  if (mode != FusionMode::kSingle && modalities.size() < 2)
    throw ConfigError(to_string(mode) + " fusion needs at least two modalities");
  if (mode == FusionMode::kEarly) {
    const auto grid = early_grid();
    for (const auto& m : modalities)
      if (m.dims() == Dimensionality::k3D && m.shape.spatial != grid)
        throw ConfigError("early fusion: modality '" + m.name + "' grid " + m.shape.str() +
                          " differs from the common grid " + tuple_str(grid));
  }
  if (mode == FusionMode::kHierarchical) {
    int n2 = 0, n3 = 0;
    for (const auto& m : modalities) (m.dims() == Dimensionality::k2D ? n2 : n3)++;
    if (n2 < 1 || n3 < 1)
      throw ConfigError("hierarchical fusion needs at least one 2D and one 3D modality");
    if (backbone2d.num_stages() != backbone3d.num_stages())
      throw ConfigError("hierarchical fusion: 2D and 3D backbones must have equal stage counts");
    if (!fusion_widths.empty() && static_cast<int>(fusion_widths.size()) != backbone3d.num_stages())
      throw ConfigError("hierarchical fusion: fusion widths must have one entry per stage");
  }
}

FusionTrace trace_fusion(const FusionConfig& config) {
  config.validate();
  FusionTrace tr;
  tr.mode = config.mode;
  tr.num_classes = config.num_classes;
  tr.head_hidden = config.resolved_head_hidden();

  if (config.mode == FusionMode::kEarly) {
    const auto grid = config.early_grid();
    int64_t channels = 0;
    for (const auto& m : config.modalities) {
      channels += m.shape.channels;
      tr.inputs.push_back({m.name, FeatureShape{m.shape.channels, grid}});
    }
    BackboneSpec spec = config.backbone3d;
    spec.dims = Dimensionality::k3D;
    spec.input = FeatureShape{channels, grid};
    const auto taps = infer_tap_shapes(spec);
    for (size_t s = 0; s < taps.size(); ++s) {
      StageTrace st;
      st.stage = static_cast<int>(s + 1);
      st.taps.push_back({"trunk", taps[s]});
      tr.stages.push_back(st);
    }
    tr.classifier_in = taps.back().channels;
    return tr;
  }

  std::vector<std::vector<FeatureShape>> taps;
  for (const auto& m : config.modalities) {
    tr.inputs.push_back({m.name, m.shape});
    try {
      taps.push_back(infer_tap_shapes(config.backbone_for(m)));
    } catch (const ConfigError& e) {
      throw ConfigError("modality '" + m.name + "' backbone: " + e.what());
    }
  }
  const size_t S = taps[0].size();
  for (const auto& t : taps)
    if (t.size() != S && config.mode == FusionMode::kHierarchical)
      throw ConfigError("hierarchical fusion: branches have different stage counts");
  for (size_t s = 0; s < S; ++s) {
    StageTrace st;
    st.stage = static_cast<int>(s + 1);
    for (size_t i = 0; i < config.modalities.size(); ++i)
      st.taps.push_back({config.modalities[i].name, taps[i][s]});
    tr.stages.push_back(st);
  }
  for (const auto& t : taps) tr.classifier_in += t.back().channels;
  if (config.mode != FusionMode::kHierarchical) return tr;

  // Hierarchical: conversions align every modality onto the first 3D modality's (X3, Y3).
  size_t ref = 0;
  while (config.modalities[ref].dims() != Dimensionality::k3D) ++ref;
  int64_t prev_width = 0;
  std::vector<int64_t> prev_xy;
  for (size_t s = 0; s < S; ++s) {
    StageTrace& st = tr.stages[s];
    const FeatureShape& ref3d = taps[ref][s];
    const int64_t target = ref3d.channels;
    const std::vector<int64_t> xy{ref3d.spatial[1], ref3d.spatial[2]};
    int64_t fusion_in = 0;
    for (size_t i = 0; i < config.modalities.size(); ++i) {
      const auto& m = config.modalities[i];
      const FeatureShape& tap = taps[i][s];
      ConversionParams p;
      if (m.dims() == Dimensionality::k3D) {
        if (tap.spatial[1] != xy[0] || tap.spatial[2] != xy[1])
          throw ConfigError(stage_prefix(static_cast<int>(s)) + "3D modality '" + m.name + "' tap " + tap.str() +
                            " does not share the en-face extents of " + ref3d.str());
        // Any 2D shape admissible here; only the 3D half is used.
        FeatureShape dummy{1, {2 * xy[0] - 1, 2 * xy[1] - 1}};
        p = conversion_params(dummy, tap).first;
      } else {
        try {
          p = conversion_params(tap, ref3d).second;
        } catch (const ConfigError& e) {
          throw ConfigError(stage_prefix(static_cast<int>(s)) + "modality '" + m.name + "': " + e.what());
        }
      }
      FeatureShape out = p.output_shape(tap);
      if (m.dims() == Dimensionality::k3D) out.spatial.erase(out.spatial.begin());  // squeeze depth 1
      st.conversions.push_back({m.name, p});
      if (out.channels != target) out.channels = target;  // 1x1 channel map
      st.converted.push_back({m.name, out});
      fusion_in += target;
    }
    if (s > 0) {
      for (int a = 0; a < 2; ++a)
        if (conv_out_extent(prev_xy[a], 3, 2, 1) != xy[a])
          throw ConfigError(stage_prefix(static_cast<int>(s)) + "downsampled fusion feature does not match tap extents");
      fusion_in += prev_width;
    }
    const int64_t width = config.fusion_widths.empty() ? target : config.fusion_widths[s];
    if (width < 1) throw ConfigError(stage_prefix(static_cast<int>(s)) + "fusion width must be >= 1");
    st.fusion_in_channels = fusion_in;
    st.fusion_out = FeatureShape{width, xy};
    prev_width = width;
    prev_xy = xy;
  }
  tr.classifier_in += prev_width;
  return tr;
}

std::string render_trace(const FusionTrace& tr) {
  std::ostringstream os;
  os << "mode=" << to_string(tr.mode) << " classes=" << tr.num_classes << "\n";
  for (const auto& [name, shape] : tr.inputs) os << "input " << name << " " << shape.str() << "\n";
  for (const auto& st : tr.stages) {
    for (const auto& [name, shape] : st.taps)
      os << "stage-" << st.stage << " tap " << name << " " << shape.str() << "\n";
    for (size_t i = 0; i < st.conversions.size(); ++i) {
      const auto& [name, p] = st.conversions[i];
      os << "stage-" << st.stage << " conversion " << name << " "
         << (p.mode == ConversionMode::kDepthCollapse3D ? "conv3d-depth-collapse" : "conv2d-align") << " "
         << p.str() << " -> " << st.converted[i].second.str() << "\n";
    }
    if (!st.conversions.empty())
      os << "stage-" << st.stage << " fusion in_channels=" << st.fusion_in_channels << " out="
         << st.fusion_out.str() << "\n";
  }
  os << "classifier in=" << tr.classifier_in << " hidden=" << tr.head_hidden << " out=" << tr.num_classes
     << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------------------

template <typename T>
ClassifierHead<T>::ClassifierHead(int64_t in, int64_t hidden, int64_t classes, Rng& rng) : in_(in) {
  if (hidden > 0) {
    hidden_ = std::make_unique<Linear<T>>(in, hidden, rng);
    decision_ = std::make_unique<Linear<T>>(hidden, classes, rng);
  } else {
    decision_ = std::make_unique<Linear<T>>(in, classes, rng);
  }
}

template <typename T>
Tensor<T> ClassifierHead<T>::forward(const Tensor<T>& x) const {
  if (hidden_) return decision_->forward(relu(hidden_->forward(x)));
  return decision_->forward(x);
}

template <typename T>
void ClassifierHead<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  if (hidden_) hidden_->collect(this->join(prefix, "hidden"), out);
  decision_->collect(this->join(prefix, "decision"), out);
}

template <typename T>
NDArray<T> FusionModel<T>::predict(const std::vector<Tensor<T>>& inputs) {
  NoGradGuard guard;
  this->set_training(false);
  return softmax(forward(inputs).value());
}

template <typename T>
std::vector<Shape> FusionModel<T>::input_shapes(int64_t n) const {
  std::vector<Shape> out;
  for (const auto& m : config_.modalities) {
    if (config_.mode == FusionMode::kEarly)
      out.push_back(FeatureShape{m.shape.channels, config_.early_grid()}.batched(n));
    else
      out.push_back(m.shape.batched(n));
  }
  return out;
}

template <typename T>
void FusionModel<T>::check_inputs(const std::vector<Tensor<T>>& inputs) const {
  if (inputs.size() != config_.modalities.size())
    throw InputError("model expects " + std::to_string(config_.modalities.size()) + " modality inputs, got " +
                     std::to_string(inputs.size()));
  if (inputs.empty() || inputs[0].rank() == 0) throw InputError("empty model input");
  const auto want = input_shapes(inputs[0].dim(0));
  for (size_t i = 0; i < inputs.size(); ++i)
    if (inputs[i].shape() != want[i])
      throw InputError("modality '" + config_.modalities[i].name + "': input shape " +
                       shape_str(inputs[i].shape()) + ", expected " + shape_str(want[i]));
}

namespace {

template <typename T>
class SingleModality : public FusionModel<T> {
 public:
  SingleModality(const FusionConfig& c, Rng& rng)
      : FusionModel<T>(c),
        branch_(c.backbone_for(c.modalities[0]), rng),
        head_(branch_.out_channels(), c.resolved_head_hidden(), c.num_classes, rng) {}

  Tensor<T> forward(const std::vector<Tensor<T>>& inputs) override {
    this->check_inputs(inputs);
    return head_.forward(branch_.forward_with_taps(inputs[0]).pooled);
  }
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override {
    branch_.collect(this->join(prefix, "branch." + this->config_.modalities[0].name), out);
    head_.collect(this->join(prefix, "head"), out);
  }
  void set_training(bool on) override {
    Module<T>::set_training(on);
    branch_.set_training(on);
  }
  ClassifierHead<T>& head() override { return head_; }

 private:
  Backbone<T> branch_;
  ClassifierHead<T> head_;
};

template <typename T>
BackboneSpec early_trunk_spec(const FusionConfig& c) {
  BackboneSpec spec = c.backbone3d;
  spec.dims = Dimensionality::k3D;
  int64_t channels = 0;
  for (const auto& m : c.modalities) channels += m.shape.channels;
  spec.input = FeatureShape{channels, c.early_grid()};
  return spec;
}

template <typename T>
class EarlyFusion : public FusionModel<T> {
 public:
  EarlyFusion(const FusionConfig& c, Rng& rng)
      : FusionModel<T>(c),
        trunk_(early_trunk_spec<T>(c), rng),
        head_(trunk_.out_channels(), c.resolved_head_hidden(), c.num_classes, rng) {}

  Tensor<T> forward(const std::vector<Tensor<T>>& inputs) override {
    this->check_inputs(inputs);
    auto x = inputs.size() == 1 ? inputs[0] : concat(inputs, 1);
    return head_.forward(trunk_.forward_with_taps(x).pooled);
  }
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override {
    trunk_.collect(this->join(prefix, "trunk"), out);
    head_.collect(this->join(prefix, "head"), out);
  }
  void set_training(bool on) override {
    Module<T>::set_training(on);
    trunk_.set_training(on);
  }
  ClassifierHead<T>& head() override { return head_; }

 private:
  Backbone<T> trunk_;
  ClassifierHead<T> head_;
};

template <typename T>
class IntermediateFusion : public FusionModel<T> {
 public:
  IntermediateFusion(const FusionConfig& c, Rng& rng) : FusionModel<T>(c) {
    int64_t width = 0;
    for (const auto& m : c.modalities) {
      branches_.push_back(std::make_unique<Backbone<T>>(c.backbone_for(m), rng));
      width += branches_.back()->out_channels();
    }
    head_ = std::make_unique<ClassifierHead<T>>(width, c.resolved_head_hidden(), c.num_classes, rng);
  }

  Tensor<T> forward(const std::vector<Tensor<T>>& inputs) override {
    this->check_inputs(inputs);
    std::vector<Tensor<T>> pooled;
    for (size_t i = 0; i < inputs.size(); ++i) pooled.push_back(branches_[i]->forward_with_taps(inputs[i]).pooled);
    return head_->forward(concat(pooled, 1));
  }
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override {
    for (size_t i = 0; i < branches_.size(); ++i)
      branches_[i]->collect(this->join(prefix, "branch." + this->config_.modalities[i].name), out);
    head_->collect(this->join(prefix, "head"), out);
  }
  void set_training(bool on) override {
    Module<T>::set_training(on);
    for (auto& b : branches_) b->set_training(on);
  }
  ClassifierHead<T>& head() override { return *head_; }

 private:
  std::vector<std::unique_ptr<Backbone<T>>> branches_;
  std::unique_ptr<ClassifierHead<T>> head_;
};

template <typename T>
class HierarchicalFusion : public FusionModel<T> {
 public:
  HierarchicalFusion(const FusionConfig& c, Rng& rng) : FusionModel<T>(c), trace_(trace_fusion(c)) {
    for (const auto& m : c.modalities) branches_.push_back(std::make_unique<Backbone<T>>(c.backbone_for(m), rng));
    for (const auto& st : trace_.stages) {
      StageLayers layers;
      for (size_t i = 0; i < st.conversions.size(); ++i) {
        const ConversionParams& p = st.conversions[i].second;
        const int dims = static_cast<int>(p.kernel.size());
        layers.convert.push_back(std::make_unique<Conv<T>>(dims, p.in_channels, p.out_channels, p.kernel, p.stride,
                                                           p.padding, true, rng));
        const int64_t target = st.converted[i].second.channels;
        layers.map.push_back(p.out_channels != target
                                 ? std::make_unique<Conv<T>>(2, p.out_channels, target, 1, 1, 0, true, rng)
                                 : nullptr);
      }
      layers.block = std::make_unique<BasicBlock<T>>(2, st.fusion_in_channels, st.fusion_out.channels, 1, rng);
      stages_.push_back(std::move(layers));
    }
    head_ = std::make_unique<ClassifierHead<T>>(trace_.classifier_in, c.resolved_head_hidden(), c.num_classes, rng);
    modality_enabled_.assign(c.modalities.size(), true);
  }

  Tensor<T> forward(const std::vector<Tensor<T>>& inputs) override {
    this->check_inputs(inputs);
    const auto& mods = this->config_.modalities;
    const int64_t n = inputs[0].dim(0);
    std::vector<BackboneOutput<T>> outs;
    for (size_t i = 0; i < inputs.size(); ++i) outs.push_back(branches_[i]->forward_with_taps(inputs[i]));

    Tensor<T> fused;
    if (fusion_enabled_) {
      for (size_t s = 0; s < stages_.size(); ++s) {
        const StageTrace& st = trace_.stages[s];
        std::vector<Tensor<T>> parts;
        for (size_t i = 0; i < mods.size(); ++i) {
          auto y = stages_[s].convert[i]->forward(outs[i].taps[s]);
          if (mods[i].dims() == Dimensionality::k3D) {
            Shape sq = y.shape();
            sq.erase(sq.begin() + 2);
            y = reshape(y, sq);
          }
          if (this->config_.conversion_activation) y = relu(y);
          if (stages_[s].map[i]) y = stages_[s].map[i]->forward(y);
          const Shape want = st.converted[i].second.batched(n);
          if (y.shape() != want)
            throw ConfigError("stage " + std::to_string(s + 1) + ": converted '" + mods[i].name + "' has shape " +
                              shape_str(y.shape()) + ", expected " + shape_str(want));
          parts.push_back(y);
        }
        if (s > 0) parts.push_back(max_pool2d(fused, {3, 3}, {2, 2}, {1, 1}));
        fused = stages_[s].block->forward(concat(parts, 1));
      }
    }

    std::vector<Tensor<T>> features;
    for (size_t i = 0; i < outs.size(); ++i)
      features.push_back(modality_enabled_[i] ? outs[i].pooled : Tensor<T>::zeros(outs[i].pooled.shape()));
    if (fusion_enabled_)
      features.push_back(global_avg_pool(fused));
    else
      features.push_back(Tensor<T>::zeros({n, trace_.stages.back().fusion_out.channels}));
    return head_->forward(concat(features, 1));
  }

  // Replaces disabled branch features by zeros in the classifier input.
  void set_ablation(std::vector<bool> modality_enabled, bool fusion_enabled) override {
    if (modality_enabled.size() != branches_.size()) throw UsageError("set_ablation: one flag per modality");
    modality_enabled_ = std::move(modality_enabled);
    fusion_enabled_ = fusion_enabled;
  }

  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override {
    const auto& mods = this->config_.modalities;
    for (size_t i = 0; i < branches_.size(); ++i)
      branches_[i]->collect(this->join(prefix, "branch." + mods[i].name), out);
    for (size_t s = 0; s < stages_.size(); ++s) {
      const std::string sp = this->join(prefix, "fusion.stage" + std::to_string(s + 1));
      for (size_t i = 0; i < mods.size(); ++i) {
        stages_[s].convert[i]->collect(sp + ".convert." + mods[i].name, out);
        if (stages_[s].map[i]) stages_[s].map[i]->collect(sp + ".map." + mods[i].name, out);
      }
      stages_[s].block->collect(sp + ".block", out);
    }
    head_->collect(this->join(prefix, "head"), out);
  }
  void set_training(bool on) override {
    Module<T>::set_training(on);
    for (auto& b : branches_) b->set_training(on);
    for (auto& st : stages_) st.block->set_training(on);
  }
  ClassifierHead<T>& head() override { return *head_; }
  const FusionTrace& trace() const { return trace_; }

 private:
  struct StageLayers {
    std::vector<std::unique_ptr<Conv<T>>> convert;
    std::vector<std::unique_ptr<Conv<T>>> map;
    std::unique_ptr<BasicBlock<T>> block;
  };
  FusionTrace trace_;
  std::vector<std::unique_ptr<Backbone<T>>> branches_;
  std::vector<StageLayers> stages_;
  std::unique_ptr<ClassifierHead<T>> head_;
  std::vector<bool> modality_enabled_;
  bool fusion_enabled_ = true;
};

}  // namespace

namespace {
template <typename T, typename Model>
std::unique_ptr<FusionModel<T>> build_checked(const FusionConfig& config, FusionMode mode, uint64_t seed) {
  if (config.mode != mode)
    throw ConfigError("builder for " + to_string(mode) + " called with mode " + to_string(config.mode));
  trace_fusion(config);
  Rng rng(seed, "init");
  return std::make_unique<Model>(config, rng);
}
}  // namespace

template <typename T>
std::unique_ptr<FusionModel<T>> build_single_modality(const FusionConfig& config, uint64_t seed) {
  return build_checked<T, SingleModality<T>>(config, FusionMode::kSingle, seed);
}
template <typename T>
std::unique_ptr<FusionModel<T>> build_early_fusion(const FusionConfig& config, uint64_t seed) {
  return build_checked<T, EarlyFusion<T>>(config, FusionMode::kEarly, seed);
}
template <typename T>
std::unique_ptr<FusionModel<T>> build_intermediate_fusion(const FusionConfig& config, uint64_t seed) {
  return build_checked<T, IntermediateFusion<T>>(config, FusionMode::kIntermediate, seed);
}
template <typename T>
std::unique_ptr<FusionModel<T>> build_hierarchical_fusion(const FusionConfig& config, uint64_t seed) {
  return build_checked<T, HierarchicalFusion<T>>(config, FusionMode::kHierarchical, seed);
}

template <typename T>
std::unique_ptr<FusionModel<T>> build_model(const FusionConfig& config, uint64_t seed) {
  switch (config.mode) {
    case FusionMode::kSingle:
      return build_single_modality<T>(config, seed);
    case FusionMode::kEarly:
      return build_early_fusion<T>(config, seed);
    case FusionMode::kIntermediate:
      return build_intermediate_fusion<T>(config, seed);
    case FusionMode::kHierarchical:
      return build_hierarchical_fusion<T>(config, seed);
  }
  throw ConfigError("unknown fusion mode");
}

#define MMF_INSTANTIATE_FUSION(T)                                                                        \
  template class ClassifierHead<T>;                                                                      \
  template class FusionModel<T>;                                                                         \
  template std::unique_ptr<FusionModel<T>> build_single_modality<T>(const FusionConfig&, uint64_t);      \
  template std::unique_ptr<FusionModel<T>> build_early_fusion<T>(const FusionConfig&, uint64_t);         \
  template std::unique_ptr<FusionModel<T>> build_intermediate_fusion<T>(const FusionConfig&, uint64_t);  \
  template std::unique_ptr<FusionModel<T>> build_hierarchical_fusion<T>(const FusionConfig&, uint64_t);  \
  template std::unique_ptr<FusionModel<T>> build_model<T>(const FusionConfig&, uint64_t);

MMF_INSTANTIATE_FUSION(float)
MMF_INSTANTIATE_FUSION(double)

}  // namespace mmf
