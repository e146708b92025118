#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "mmfusion/fusion.hpp"
#include "mmfusion/training.hpp"

namespace mmf {

// Flat `key = value` text, one entry per line, '#' starts a comment. List values are
// comma-separated. Unknown and duplicate keys are rejected with ConfigError.
//
//   mode = hierarchical                  single | early | intermediate | hierarchical
//   classes = 2
//   head.hidden = -1                     -1 = mode default
//   modalities = image, volume           input and stacking order
//   modality.<name>.shape = 1x32x32      CxXxY or CxZxXxY
//   backbone2d.preset = resnet18         applied before the explicit backbone keys below
//   backbone2d.stem_channels / stem_kernel / stage_channels / blocks / block / growth
//   backbone3d.*                         as backbone2d
//   fusion.widths = 16, 32
//   fusion.conversion_activation = false
//   data.manifest = data/manifest.csv    relative to the config file
//   data.crop = false
//   seed = 0
//   train.epochs = 10
//   train.batch_size = 8
//   optim.lr / beta1 / beta2 / eps / weight_decay / decoupled
//   augment.enabled / gamma_min / gamma_max / noise_max / flip_prob / flip_axes_2d / flip_axes_3d
//   eval.quadratic_kappa = false
struct RunConfig {
  FusionConfig model;
  std::string manifest;                 // as written
  std::filesystem::path manifest_path;  // resolved against the config's directory
  bool crop = false;
  uint64_t seed = 0;
  TrainOptions train;

  // Canonical text: every key with resolved values in a fixed order. Parsing the rendered
  // text yields an equal rendering.
  std::string render() const;
  std::string render_model() const;
  // FNV-1a 64 of render_model(); identifies the architecture a checkpoint belongs to.
  uint64_t digest() const;
};

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

std::string digest_hex(uint64_t digest);

}  // namespace mmf
