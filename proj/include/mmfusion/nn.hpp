#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mmfusion/ops.hpp"
#include "mmfusion/random.hpp"

namespace mmf {

// A named slot into a module's state. Buffers (batch-norm running statistics) are
// checkpointed but not optimized.
template <typename T>
struct ParamSlot {
  std::string name;
  Tensor<T>* tensor;
  bool trainable;
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  virtual void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) = 0;
  virtual void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  std::vector<ParamSlot<T>> state(const std::string& prefix = "") {
    std::vector<ParamSlot<T>> out;
    collect(prefix, out);
    return out;
  }
  std::vector<ParamSlot<T>> parameters() {
    std::vector<ParamSlot<T>> out;
    for (auto& s : state())
      if (s.trainable) out.push_back(s);
    return out;
  }
  int64_t num_parameters() {
    int64_t n = 0;
    for (auto& s : parameters()) n += s.tensor->size();
    return n;
  }
  void zero_grad() {
    for (auto& s : parameters()) s.tensor->zero_grad();
  }

 protected:
  static std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
  }
  bool training_ = true;
};

// Convolution over 2 or 3 spatial dims. Kernel/stride/padding have one entry per
// spatial dim. Weights fan-in uniform, bias zero.
template <typename T>
class Conv : public Module<T> {
 public:
  Conv(int spatial_dims, int64_t in_channels, int64_t out_channels, std::vector<int64_t> kernel,
       std::vector<int64_t> stride, std::vector<int64_t> padding, bool bias, Rng& rng);
  // Square kernel shorthand.
  Conv(int spatial_dims, int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t stride,
       int64_t padding, bool bias, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;

  // Output spatial extents for the given input extents.
  std::vector<int64_t> out_extents(const std::vector<int64_t>& in) const;

  int spatial_dims() const { return dims_; }
  int64_t in_channels() const { return in_; }
  int64_t out_channels() const { return out_; }
  const std::vector<int64_t>& kernel() const { return kernel_; }
  const std::vector<int64_t>& stride() const { return stride_; }
  const std::vector<int64_t>& padding() const { return padding_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  int dims_;
  int64_t in_, out_;
  std::vector<int64_t> kernel_, stride_, padding_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(int64_t channels, T momentum = T(0.1), T eps = T(1e-5));
  Tensor<T> forward(const Tensor<T>& x);
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;

 private:
  T momentum_, eps_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int64_t in_features, int64_t out_features, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;
  int64_t in_features() const { return weight_.dim(1); }
  int64_t out_features() const { return weight_.dim(0); }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_;
};

template <typename T>
class Block : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
};

// conv3-bn-relu-conv3-bn plus identity or 1x1-projection shortcut, then relu.
template <typename T>
class BasicBlock : public Block<T> {
 public:
  BasicBlock(int spatial_dims, int64_t in_channels, int64_t out_channels, int64_t stride, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;
  void set_training(bool on) override;

 private:
  Conv<T> conv1_, conv2_;
  BatchNorm<T> bn1_, bn2_;
  std::unique_ptr<Conv<T>> proj_;
  std::unique_ptr<BatchNorm<T>> proj_bn_;
};

// 1x1 reduce (out/4) - 3x3 (strided) - 1x1 expand, plus shortcut.
template <typename T>
class BottleneckBlock : public Block<T> {
 public:
  BottleneckBlock(int spatial_dims, int64_t in_channels, int64_t out_channels, int64_t stride, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;
  void set_training(bool on) override;

  static int64_t mid_channels(int64_t out_channels) { return std::max<int64_t>(1, out_channels / 4); }

 private:
  Conv<T> conv1_, conv2_, conv3_;
  BatchNorm<T> bn1_, bn2_, bn3_;
  std::unique_ptr<Conv<T>> proj_;
  std::unique_ptr<BatchNorm<T>> proj_bn_;
};

// Densely connected stage: transition (bn-relu-1x1 conv, strided) to `out - layers*growth`
// channels, then `layers` bn-relu-conv3 layers each appending `growth` channels.
template <typename T>
class DenseStage : public Block<T> {
 public:
  DenseStage(int spatial_dims, int64_t in_channels, int64_t out_channels, int64_t layers,
             int64_t growth, int64_t stride, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;
  void collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) override;
  void set_training(bool on) override;

 private:
  BatchNorm<T> trans_bn_;
  Conv<T> trans_conv_;
  std::vector<std::unique_ptr<BatchNorm<T>>> bns_;
  std::vector<std::unique_ptr<Conv<T>>> convs_;
};

// Dimension-dispatching helpers.
template <typename T>
Tensor<T> max_pool(int spatial_dims, const Tensor<T>& x, int64_t kernel, int64_t stride, int64_t padding);

}  // namespace mmf
