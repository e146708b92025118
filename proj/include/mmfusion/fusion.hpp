#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mmfusion/backbone.hpp"

namespace mmf {

// Conversion layers align per-stage features across dimensionalities:
//   3D depth collapse:  (C, Z3, X3, Y3) -> (C', 1, X3, Y3), kernel (Z3,1,1), stride 1
//   2D alignment:       (C, X2, Y2)     -> (C', X3, Y3),    kernel (X2 - 2(X3-1), Y2 - 2(Y3-1)), stride 2
// Both without padding.
enum class ConversionMode { kDepthCollapse3D, kAlign2D };

struct ConversionParams {
  ConversionMode mode = ConversionMode::kAlign2D;
  std::vector<int64_t> kernel;
  std::vector<int64_t> stride;
  std::vector<int64_t> padding;
  int64_t in_channels = 0;
  int64_t out_channels = 0;

  // Applies the convolution shape rule to `in`; throws ConfigError if `in` has the wrong rank
  // or channel count.
  FeatureShape output_shape(const FeatureShape& in) const;
  std::string str() const;  // "kernel=(a,b) stride=(2,2) pad=(0,0) channels=C->C'"
};

// Returns {3D depth-collapse params, 2D alignment params}. out_channels defaults to the
// respective input channels. Throws ConfigError when X2 < 2*X3 - 1 or Y2 < 2*Y3 - 1,
// reporting the minimal admissible extent.
std::pair<ConversionParams, ConversionParams> conversion_params(const FeatureShape& shape2d,
                                                                const FeatureShape& shape3d,
                                                                int64_t out_channels_3d = 0,
                                                                int64_t out_channels_2d = 0);

enum class FusionMode { kSingle, kEarly, kIntermediate, kHierarchical };

std::string to_string(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);

struct ModalitySpec {
  std::string name;
  FeatureShape shape;  // (C,X,Y) for 2D modalities, (C,Z,X,Y) for 3D
  Dimensionality dims() const {
    return shape.spatial_dims() == 2 ? Dimensionality::k2D : Dimensionality::k3D;
  }
};

struct FusionConfig {
  FusionMode mode = FusionMode::kHierarchical;
  std::vector<ModalitySpec> modalities;  // input order = stacking order
  BackboneSpec backbone2d;               // template for 2D modalities (input overwritten)
  BackboneSpec backbone3d;               // template for 3D modalities and the early-fusion trunk
  std::vector<int64_t> fusion_widths;    // hierarchical fusion branch; empty = 3D stage widths
  int64_t num_classes = 2;
  // Hidden width of the fusion layer between the concatenated features and the decision
  // layer. -1 = mode default (intermediate/hierarchical: 64, single/early: 0 = no hidden layer).
  int64_t head_hidden = -1;
  bool conversion_activation = false;

  int64_t resolved_head_hidden() const;
  BackboneSpec backbone_for(const ModalitySpec& m) const;
  // Early fusion: common (Z,X,Y) grid = first 3D modality's extents.
  std::vector<int64_t> early_grid() const;
  void validate() const;
};

// Per-stage shapes and conversion parameters, for shape-check reports and tests.
struct StageTrace {
  int stage = 0;  // 1-based
  std::vector<std::pair<std::string, FeatureShape>> taps;
  std::vector<std::pair<std::string, ConversionParams>> conversions;
  std::vector<std::pair<std::string, FeatureShape>> converted;
  int64_t fusion_in_channels = 0;
  FeatureShape fusion_out;
};

struct FusionTrace {
  FusionMode mode = FusionMode::kHierarchical;
  std::vector<std::pair<std::string, FeatureShape>> inputs;
  std::vector<StageTrace> stages;
  int64_t classifier_in = 0;
  int64_t head_hidden = 0;
  int64_t num_classes = 0;
};

// Static shape inference for a config; throws ConfigError naming the failing stage.
FusionTrace trace_fusion(const FusionConfig& config);

// Deterministic text table of a trace.
std::string render_trace(const FusionTrace& trace);

// Concat of branch features -> optional hidden fusion layer + relu -> decision layer.
template <typename T>
class ClassifierHead : public Module<T> {
 public:
  ClassifierHead(int64_t in, int64_t hidden, int64_t classes, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;
  int64_t in_features() const { return in_; }
  Linear<T>& decision() { return *decision_; }
  Linear<T>* hidden() { return hidden_.get(); }

 private:
  int64_t in_;
  std::unique_ptr<Linear<T>> hidden_;
  std::unique_ptr<Linear<T>> decision_;
};

template <typename T>
class FusionModel : public Module<T> {
 public:
  explicit FusionModel(FusionConfig config) : config_(std::move(config)) {}

  // One tensor per modality, in config order: [N, C, spatial...]. For early fusion, 2D
  // modalities must already be duplicated onto the common 3D grid.
  virtual Tensor<T> forward(const std::vector<Tensor<T>>& inputs) = 0;

  // Eval-mode class probabilities [N, K].
  NDArray<T> predict(const std::vector<Tensor<T>>& inputs);

  // Expected input shape per modality for a batch of n.
  std::vector<Shape> input_shapes(int64_t n) const;

  const FusionConfig& config() const { return config_; }
  virtual ClassifierHead<T>& head() = 0;

  // Hierarchical models only: zero the pooled features of disabled branches (and of the
  // fusion branch) in the classifier input.
  virtual void set_ablation(std::vector<bool> modality_enabled, bool fusion_enabled) {
    (void)modality_enabled;
    (void)fusion_enabled;
    throw UsageError("ablation is only supported by hierarchical models");
  }

 protected:
  void check_inputs(const std::vector<Tensor<T>>& inputs) const;
  FusionConfig config_;
};

template <typename T>
std::unique_ptr<FusionModel<T>> build_single_modality(const FusionConfig& config, uint64_t seed);
template <typename T>
std::unique_ptr<FusionModel<T>> build_early_fusion(const FusionConfig& config, uint64_t seed);
template <typename T>
std::unique_ptr<FusionModel<T>> build_intermediate_fusion(const FusionConfig& config, uint64_t seed);
template <typename T>
std::unique_ptr<FusionModel<T>> build_hierarchical_fusion(const FusionConfig& config, uint64_t seed);

// Dispatches on config.mode. Parameters are drawn from the "init" substream of `seed`.
template <typename T>
std::unique_ptr<FusionModel<T>> build_model(const FusionConfig& config, uint64_t seed);

}  // namespace mmf
