#include "mmfusion/nn.hpp"

#include <cmath>

namespace mmf {

namespace {

template <typename T>
Tensor<T> uniform_param(Shape shape, T bound, Rng& rng) {
  NDArray<T> a(std::move(shape));
  for (auto& v : a.values()) v = static_cast<T>(rng.uniform(-1.0, 1.0)) * bound;
  return Tensor<T>(std::move(a), true);
}

void check_dims(int dims, size_t k, size_t s, size_t p) {
  if (dims != 2 && dims != 3) throw ConfigError("Conv: spatial dims must be 2 or 3");
  if (k != static_cast<size_t>(dims) || s != k || p != k)
    throw ConfigError("Conv: kernel/stride/padding rank must equal spatial dims");
}

}  // namespace

template <typename T>
Conv<T>::Conv(int spatial_dims, int64_t in_channels, int64_t out_channels, std::vector<int64_t> kernel,
              std::vector<int64_t> stride, std::vector<int64_t> padding, bool bias, Rng& rng)
    : dims_(spatial_dims),
      in_(in_channels),
      out_(out_channels),
      kernel_(std::move(kernel)),
      stride_(std::move(stride)),
      padding_(std::move(padding)) {
  check_dims(dims_, kernel_.size(), stride_.size(), padding_.size());
  if (in_ < 1 || out_ < 1) throw ConfigError("Conv: channel counts must be >= 1");
  Shape wshape{out_, in_};
  int64_t fan_in = in_;
  for (auto k : kernel_) {
    wshape.push_back(k);
    fan_in *= k;
  }
  // He-uniform: bound sqrt(6 / fan_in).
  weight_ = uniform_param<T>(wshape, static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in))), rng);
  if (bias) bias_ = Tensor<T>(NDArray<T>({out_}), true);
}

template <typename T>
Conv<T>::Conv(int spatial_dims, int64_t in_channels, int64_t out_channels, int64_t kernel, int64_t stride,
              int64_t padding, bool bias, Rng& rng)
    : Conv(spatial_dims, in_channels, out_channels, std::vector<int64_t>(spatial_dims, kernel),
           std::vector<int64_t>(spatial_dims, stride), std::vector<int64_t>(spatial_dims, padding), bias,
           rng) {}

template <typename T>
Tensor<T> Conv<T>::forward(const Tensor<T>& x) const {
  if (dims_ == 2)
    return conv2d(x, weight_, bias_, {stride_[0], stride_[1]}, {padding_[0], padding_[1]});
  return conv3d(x, weight_, bias_, {stride_[0], stride_[1], stride_[2]},
                {padding_[0], padding_[1], padding_[2]});
}

template <typename T>
std::vector<int64_t> Conv<T>::out_extents(const std::vector<int64_t>& in) const {
  if (in.size() != kernel_.size()) throw ConfigError("Conv::out_extents: rank mismatch");
  std::vector<int64_t> out;
  for (size_t i = 0; i < in.size(); ++i)
    out.push_back(conv_out_extent(in[i], kernel_[i], stride_[i], padding_[i]));
  return out;
}

template <typename T>
void Conv<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  out.push_back({this->join(prefix, "weight"), &weight_, true});
  if (bias_.defined()) out.push_back({this->join(prefix, "bias"), &bias_, true});
}

template <typename T>
BatchNorm<T>::BatchNorm(int64_t channels, T momentum, T eps)
    : momentum_(momentum),
      eps_(eps),
      gamma_(NDArray<T>({channels}, T(1)), true),
      beta_(NDArray<T>({channels}, T(0)), true),
      running_mean_(NDArray<T>({channels}, T(0))),
      running_var_(NDArray<T>({channels}, T(1))) {}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x) {
  return batch_norm(x, gamma_, beta_, running_mean_.mutable_value(), running_var_.mutable_value(),
                    this->training_, momentum_, eps_);
}

template <typename T>
void BatchNorm<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  out.push_back({this->join(prefix, "gamma"), &gamma_, true});
  out.push_back({this->join(prefix, "beta"), &beta_, true});
  out.push_back({this->join(prefix, "running_mean"), &running_mean_, false});
  out.push_back({this->join(prefix, "running_var"), &running_var_, false});
}

template <typename T>
Linear<T>::Linear(int64_t in_features, int64_t out_features, Rng& rng) {
  if (in_features < 1 || out_features < 1) throw ConfigError("Linear: features must be >= 1");
  weight_ = uniform_param<T>({out_features, in_features},
                             static_cast<T>(std::sqrt(6.0 / static_cast<double>(in_features))), rng);
  bias_ = Tensor<T>(NDArray<T>({out_features}), true);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return linear(x, weight_, bias_);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  out.push_back({this->join(prefix, "weight"), &weight_, true});
  out.push_back({this->join(prefix, "bias"), &bias_, true});
}

template <typename T>
BasicBlock<T>::BasicBlock(int dims, int64_t in, int64_t out, int64_t stride, Rng& rng)
    : conv1_(dims, in, out, 3, stride, 1, false, rng),
      conv2_(dims, out, out, 3, 1, 1, false, rng),
      bn1_(out),
      bn2_(out) {
  if (stride != 1 || in != out) {
    proj_ = std::make_unique<Conv<T>>(dims, in, out, 1, stride, 0, false, rng);
    proj_bn_ = std::make_unique<BatchNorm<T>>(out);
  }
}

template <typename T>
Tensor<T> BasicBlock<T>::forward(const Tensor<T>& x) {
  auto y = relu(bn1_.forward(conv1_.forward(x)));
  y = bn2_.forward(conv2_.forward(y));
  auto shortcut = proj_ ? proj_bn_->forward(proj_->forward(x)) : x;
  return relu(add(y, shortcut));
}

template <typename T>
void BasicBlock<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  conv1_.collect(this->join(prefix, "conv1"), out);
  bn1_.collect(this->join(prefix, "bn1"), out);
  conv2_.collect(this->join(prefix, "conv2"), out);
  bn2_.collect(this->join(prefix, "bn2"), out);
  if (proj_) {
    proj_->collect(this->join(prefix, "proj"), out);
    proj_bn_->collect(this->join(prefix, "proj_bn"), out);
  }
}

template <typename T>
void BasicBlock<T>::set_training(bool on) {
  Module<T>::set_training(on);
  bn1_.set_training(on);
  bn2_.set_training(on);
  if (proj_bn_) proj_bn_->set_training(on);
}

template <typename T>
BottleneckBlock<T>::BottleneckBlock(int dims, int64_t in, int64_t out, int64_t stride, Rng& rng)
    : conv1_(dims, in, mid_channels(out), 1, 1, 0, false, rng),
      conv2_(dims, mid_channels(out), mid_channels(out), 3, stride, 1, false, rng),
      conv3_(dims, mid_channels(out), out, 1, 1, 0, false, rng),
      bn1_(mid_channels(out)),
      bn2_(mid_channels(out)),
      bn3_(out) {
  if (stride != 1 || in != out) {
    proj_ = std::make_unique<Conv<T>>(dims, in, out, 1, stride, 0, false, rng);
    proj_bn_ = std::make_unique<BatchNorm<T>>(out);
  }
}

template <typename T>
Tensor<T> BottleneckBlock<T>::forward(const Tensor<T>& x) {
  auto y = relu(bn1_.forward(conv1_.forward(x)));
  y = relu(bn2_.forward(conv2_.forward(y)));
  y = bn3_.forward(conv3_.forward(y));
  auto shortcut = proj_ ? proj_bn_->forward(proj_->forward(x)) : x;
  return relu(add(y, shortcut));
}

template <typename T>
void BottleneckBlock<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  conv1_.collect(this->join(prefix, "conv1"), out);
  bn1_.collect(this->join(prefix, "bn1"), out);
  conv2_.collect(this->join(prefix, "conv2"), out);
  bn2_.collect(this->join(prefix, "bn2"), out);
  conv3_.collect(this->join(prefix, "conv3"), out);
  bn3_.collect(this->join(prefix, "bn3"), out);
  if (proj_) {
    proj_->collect(this->join(prefix, "proj"), out);
    proj_bn_->collect(this->join(prefix, "proj_bn"), out);
  }
}

template <typename T>
void BottleneckBlock<T>::set_training(bool on) {
  Module<T>::set_training(on);
  bn1_.set_training(on);
  bn2_.set_training(on);
  bn3_.set_training(on);
  if (proj_bn_) proj_bn_->set_training(on);
}

template <typename T>
DenseStage<T>::DenseStage(int dims, int64_t in, int64_t out, int64_t layers, int64_t growth, int64_t stride,
                          Rng& rng)
    : trans_bn_(in), trans_conv_(dims, in, out - layers * growth, 1, stride, 0, false, rng) {
  int64_t c = out - layers * growth;
  for (int64_t i = 0; i < layers; ++i) {
    bns_.push_back(std::make_unique<BatchNorm<T>>(c));
    convs_.push_back(std::make_unique<Conv<T>>(dims, c, growth, 3, 1, 1, false, rng));
    c += growth;
  }
}

template <typename T>
Tensor<T> DenseStage<T>::forward(const Tensor<T>& x) {
  auto features = trans_conv_.forward(relu(trans_bn_.forward(x)));
  for (size_t i = 0; i < convs_.size(); ++i) {
    auto grown = convs_[i]->forward(relu(bns_[i]->forward(features)));
    features = concat<T>({features, grown}, 1);
  }
  return features;
}

template <typename T>
void DenseStage<T>::collect(const std::string& prefix, std::vector<ParamSlot<T>>& out) {
  trans_bn_.collect(this->join(prefix, "trans_bn"), out);
  trans_conv_.collect(this->join(prefix, "trans_conv"), out);
  for (size_t i = 0; i < convs_.size(); ++i) {
    bns_[i]->collect(this->join(prefix, "layer" + std::to_string(i) + ".bn"), out);
    convs_[i]->collect(this->join(prefix, "layer" + std::to_string(i) + ".conv"), out);
  }
}

template <typename T>
void DenseStage<T>::set_training(bool on) {
  Module<T>::set_training(on);
  trans_bn_.set_training(on);
  for (auto& b : bns_) b->set_training(on);
}

template <typename T>
Tensor<T> max_pool(int dims, const Tensor<T>& x, int64_t k, int64_t s, int64_t p) {
  if (dims == 2) return max_pool2d(x, {k, k}, {s, s}, {p, p});
  return max_pool3d(x, {k, k, k}, {s, s, s}, {p, p, p});
}

template class Conv<float>;
template class Conv<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class Linear<float>;
template class Linear<double>;
template class BasicBlock<float>;
template class BasicBlock<double>;
template class BottleneckBlock<float>;
template class BottleneckBlock<double>;
template class DenseStage<float>;
template class DenseStage<double>;
template Tensor<float> max_pool(int, const Tensor<float>&, int64_t, int64_t, int64_t);
template Tensor<double> max_pool(int, const Tensor<double>&, int64_t, int64_t, int64_t);

}  // namespace mmf
