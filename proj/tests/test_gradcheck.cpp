// Central finite differences at 64-bit, h = 1e-4. Operators: rel 1e-4 with a 1e-6 absolute
// floor, 20 random draws each. Full toy hierarchical model: |a - n| / (|a| + 1e-8) < 1e-3.
#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "mmfusion/fusion.hpp"
#include "mmfusion/ops.hpp"
#include "oracles.hpp"

using namespace mmf;
using TD = Tensor<double>;
using OpFn = std::function<TD(const std::vector<TD>&)>;

namespace {

constexpr int kDraws = 20;
constexpr double kStep = 1e-4;

// Checks d/d(inputs) of sum(op(inputs) * R) for a fixed random R.
void check_op(const char* name, std::vector<NDArray<double>> inputs, const OpFn& op, std::mt19937_64& rng,
              std::vector<bool> differentiable = {}) {
  if (differentiable.empty()) differentiable.assign(inputs.size(), true);
  std::vector<TD> leaves;
  for (size_t i = 0; i < inputs.size(); ++i) leaves.emplace_back(inputs[i], static_cast<bool>(differentiable[i]));
  TD out = op(leaves);
  const TD weights(oracle::random_array(out.shape(), rng));
  TD loss = out.size() == 1 && out.rank() == 1 ? out : sum(mul(out, weights));
  const bool scalar_out = out.size() == 1 && out.rank() == 1;
  loss.backward();

  auto f = [&]() {
    NoGradGuard guard;
    std::vector<TD> t;
    for (auto& in : inputs) t.emplace_back(in);
    TD o = op(t);
    return scalar_out ? o.item() : sum(mul(o, weights)).item();
  };
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    const auto num = oracle::numeric_grad(f, inputs[i], kStep);
    const NDArray<double>* g = leaves[i].grad();
    ASSERT_NE(g, nullptr) << name << " input " << i << " got no gradient";
    for (int64_t j = 0; j < g->size(); ++j)
      ASSERT_TRUE(oracle::grad_close((*g)[j], num[static_cast<size_t>(j)], 1e-4, 1e-6))
          << name << " input " << i << " element " << j << ": analytic " << (*g)[j] << " numeric "
          << num[static_cast<size_t>(j)];
  }
}

int64_t draw(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

}  // namespace

TEST(GradCheck, Conv2d) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t n = draw(rng, 1, 2), c = draw(rng, 1, 3), o = draw(rng, 1, 3);
    const int64_t kh = draw(rng, 1, 3), kw = draw(rng, 1, 3), sh = draw(rng, 1, 2), sw = draw(rng, 1, 2);
    const int64_t ph = draw(rng, 0, kh / 2), pw = draw(rng, 0, kw / 2);
    const int64_t h = draw(rng, kh, 6), w = draw(rng, kw, 6);
    const bool bias = t % 2 == 0;
    std::vector<NDArray<double>> in{oracle::random_array({n, c, h, w}, rng),
                                    oracle::random_array({o, c, kh, kw}, rng)};
    if (bias) in.push_back(oracle::random_array({o}, rng));
    check_op("conv2d", in,
             [&](const std::vector<TD>& x) { return conv2d(x[0], x[1], bias ? x[2] : TD(), {sh, sw}, {ph, pw}); },
             rng);
  }
}

TEST(GradCheck, Conv3d) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t n = draw(rng, 1, 2), c = draw(rng, 1, 2), o = draw(rng, 1, 2);
    const int64_t kd = draw(rng, 1, 3), kh = draw(rng, 1, 3), kw = draw(rng, 1, 2);
    const int64_t sd = draw(rng, 1, 2), sh = draw(rng, 1, 2), sw = draw(rng, 1, 2);
    const int64_t pd = draw(rng, 0, kd / 2), ph = draw(rng, 0, kh / 2), pw = draw(rng, 0, kw / 2);
    const int64_t d = draw(rng, kd, 4), h = draw(rng, kh, 4), w = draw(rng, kw, 4);
    const bool bias = t % 2 == 1;
    std::vector<NDArray<double>> in{oracle::random_array({n, c, d, h, w}, rng),
                                    oracle::random_array({o, c, kd, kh, kw}, rng)};
    if (bias) in.push_back(oracle::random_array({o}, rng));
    check_op("conv3d", in,
             [&](const std::vector<TD>& x) {
               return conv3d(x[0], x[1], bias ? x[2] : TD(), {sd, sh, sw}, {pd, ph, pw});
             },
             rng);
  }
}

TEST(GradCheck, Relu) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < kDraws; ++t) {
    const Shape s{draw(rng, 1, 3), draw(rng, 1, 5), draw(rng, 1, 5)};
    check_op("relu", {oracle::distinct_array(s, rng)}, [](const std::vector<TD>& x) { return relu(x[0]); }, rng);
  }
}

TEST(GradCheck, AddMulScale) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < kDraws; ++t) {
    const Shape s{draw(rng, 1, 4), draw(rng, 1, 4)};
    const double f = std::uniform_real_distribution<double>(-2, 2)(rng);
    check_op("add", {oracle::random_array(s, rng), oracle::random_array(s, rng)},
             [](const std::vector<TD>& x) { return add(x[0], x[1]); }, rng);
    check_op("mul", {oracle::random_array(s, rng), oracle::random_array(s, rng)},
             [](const std::vector<TD>& x) { return mul(x[0], x[1]); }, rng);
    check_op("scale", {oracle::random_array(s, rng)}, [f](const std::vector<TD>& x) { return scale(x[0], f); },
             rng);
  }
}

TEST(GradCheck, SumReshape) {
  std::mt19937_64 rng(15);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t a = draw(rng, 1, 4), b = draw(rng, 1, 4);
    check_op("sum", {oracle::random_array({a, b}, rng)}, [](const std::vector<TD>& x) { return sum(x[0]); }, rng);
    check_op("reshape", {oracle::random_array({a, b}, rng)},
             [a, b](const std::vector<TD>& x) { return reshape(x[0], {b, a}); }, rng);
  }
}

TEST(GradCheck, BatchNormTraining) {
  std::mt19937_64 rng(16);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t n = draw(rng, 2, 3), c = draw(rng, 1, 3);
    const Shape s = t % 2 ? Shape{n, c, draw(rng, 1, 3), draw(rng, 1, 3)} : Shape{n, c};
    check_op("batch_norm",
             {oracle::random_array(s, rng, -2, 2), oracle::random_array({c}, rng, 0.5, 1.5),
              oracle::random_array({c}, rng)},
             [c](const std::vector<TD>& x) {
               NDArray<double> rm({c}), rv({c});
               return batch_norm(x[0], x[1], x[2], rm, rv, true);
             },
             rng);
  }
}

TEST(GradCheck, BatchNormEval) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t n = draw(rng, 1, 3), c = draw(rng, 1, 3);
    const auto rm = oracle::random_array({c}, rng), rv = oracle::random_array({c}, rng, 0.5, 2.0);
    check_op("batch_norm_eval",
             {oracle::random_array({n, c, 2}, rng), oracle::random_array({c}, rng), oracle::random_array({c}, rng)},
             [&](const std::vector<TD>& x) {
               NDArray<double> m = rm, v = rv;
               return batch_norm(x[0], x[1], x[2], m, v, false);
             },
             rng);
  }
}

TEST(GradCheck, MaxPool) {
  std::mt19937_64 rng(18);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t k = draw(rng, 1, 3), s = draw(rng, 1, 2), p = draw(rng, 0, k / 2);
    const int64_t h = draw(rng, k, 6), w = draw(rng, k, 6);
    check_op("max_pool2d", {oracle::distinct_array({draw(rng, 1, 2), draw(rng, 1, 2), h, w}, rng)},
             [=](const std::vector<TD>& x) { return max_pool2d(x[0], {k, k}, {s, s}, {p, p}); }, rng);
    const int64_t d = draw(rng, k, 4);
    check_op("max_pool3d", {oracle::distinct_array({1, draw(rng, 1, 2), d, h, w}, rng)},
             [=](const std::vector<TD>& x) { return max_pool3d(x[0], {k, k, k}, {s, s, s}, {p, p, p}); }, rng);
  }
}

TEST(GradCheck, GlobalAvgPoolLinearConcat) {
  std::mt19937_64 rng(19);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t n = draw(rng, 1, 3), c = draw(rng, 1, 4), k = draw(rng, 1, 4);
    check_op("global_avg_pool", {oracle::random_array({n, c, draw(rng, 1, 3), draw(rng, 1, 3)}, rng)},
             [](const std::vector<TD>& x) { return global_avg_pool(x[0]); }, rng);
    const bool bias = t % 2 == 0;
    std::vector<NDArray<double>> in{oracle::random_array({n, c}, rng), oracle::random_array({k, c}, rng)};
    if (bias) in.push_back(oracle::random_array({k}, rng));
    check_op("linear", in, [bias](const std::vector<TD>& x) { return linear(x[0], x[1], bias ? x[2] : TD()); },
             rng);
    const size_t axis = static_cast<size_t>(draw(rng, 0, 2));
    Shape a{2, 3, 2}, b{2, 3, 2};
    a[axis] = draw(rng, 1, 3);
    b[axis] = draw(rng, 1, 3);
    check_op("concat", {oracle::random_array(a, rng), oracle::random_array(b, rng)},
             [axis](const std::vector<TD>& x) { return concat(x, axis); }, rng);
  }
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(20);
  for (int t = 0; t < kDraws; ++t) {
    const int64_t n = draw(rng, 1, 5), k = draw(rng, 2, 5);
    std::vector<int64_t> labels;
    for (int64_t i = 0; i < n; ++i) labels.push_back(draw(rng, 0, k - 1));
    check_op("softmax_cross_entropy", {oracle::random_array({n, k}, rng, -3, 3)},
             [labels](const std::vector<TD>& x) { return softmax_cross_entropy(x[0], labels); }, rng);
  }
}

// Toy hierarchical model: 2-stage backbones, widths [4, 8].
FusionConfig toy_hierarchical_config() {
  FusionConfig c;
  c.mode = FusionMode::kHierarchical;
  c.num_classes = 3;
  c.head_hidden = 6;
  c.modalities = {{"image", FeatureShape{1, {32, 32}}}, {"volume", FeatureShape{1, {8, 16, 16}}}};
  for (auto* b : {&c.backbone2d, &c.backbone3d}) {
    b->stem_channels = 4;
    b->stem_kernel = 3;
    b->stage_channels = {4, 8};
    b->blocks_per_stage = {1, 1};
  }
  c.backbone2d.dims = Dimensionality::k2D;
  c.backbone3d.dims = Dimensionality::k3D;
  return c;
}

TEST(GradCheck, FullToyHierarchicalModel) {
  const FusionConfig config = toy_hierarchical_config();
  auto model = build_model<double>(config, 5);
  model->set_training(true);
  std::mt19937_64 rng(21);
  std::vector<TD> inputs;
  for (const auto& s : model->input_shapes(2)) inputs.emplace_back(oracle::random_array(s, rng));
  const std::vector<int64_t> labels{0, 2};

  auto loss = softmax_cross_entropy(model->forward(inputs), labels);
  loss.backward();
  auto f = [&]() {
    NoGradGuard guard;
    return softmax_cross_entropy(model->forward(inputs), labels).item();
  };

  std::vector<std::pair<std::string, NDArray<double>*>> params;
  std::vector<NDArray<double>> analytic;
  for (auto& p : model->parameters()) {
    ASSERT_NE(p.tensor->grad(), nullptr) << p.name;
    analytic.push_back(*p.tensor->grad());
    params.emplace_back(p.name, &p.tensor->mutable_value());
  }
  const auto report = oracle::check_model_gradients(f, params, analytic, kStep, 1e-3);
  EXPECT_EQ(report.failures, 0) << report.first_failure;
  EXPECT_LE(report.kinks * 50, report.checked) << report.kinks << " kinks";
  EXPECT_EQ(report.checked, model->num_parameters());
}
