#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fsrn/anchors.hpp"
#include "fsrn/autograd.hpp"

namespace fsrn {

struct BackboneConfig {
  /// Output channels of the four backbone blocks. Blocks 2-4 feed the FPN.
  std::array<int, 4> channels{16, 32, 48, 64};
  int fpn_channels = 32;
  std::vector<int> strides{8, 16, 32};
};

struct SubnetConfig {
  /// Convolutions per subnet, the prediction layer included.
  int n_conv_layers = 5;
  int kernel_size = 3;
  int n_anchors_per_pixel = 15;
  int n_channels = 32;
  /// Classification layers that run after prototype fusion. Equal to
  /// n_conv_layers for early fusion; 1 fuses right before the prediction layer.
  int post_fusion_layers = 5;
};

struct NetworkConfig {
  BackboneConfig backbone;
  SubnetConfig subnet;
  double prior_probability = 0.01;
  std::uint64_t init_seed = 0;

  void validate() const;
};

/// Receptive field, in cells, of a stack of stride-1 convolutions.
int receptive_field(int n_layers, int kernel = 3, int stride = 1);

/// Multi-level query features bound to a graph. Strides double per level and
/// every level has the same channel count.
struct FeaturePyramid {
  std::vector<Graph::Var> levels;
  std::vector<int> strides;
};

/// Owns every trainable tensor of the detector.
class Detector {
 public:
  explicit Detector(NetworkConfig cfg);

  [[nodiscard]] const NetworkConfig& config() const { return cfg_; }
  [[nodiscard]] std::vector<Parameter>& parameters() { return params_; }
  [[nodiscard]] const std::vector<Parameter>& parameters() const { return params_; }
  [[nodiscard]] std::size_t parameter_count() const;
  void zero_grad();

  /// Graph handles for every parameter. `trainable = false` binds constants so
  /// no gradient work is done.
  class Bound {
   public:
    [[nodiscard]] Graph::Var operator[](std::size_t i) const { return vars_[i]; }

   private:
    friend class Detector;
    std::vector<Graph::Var> vars_;
  };
  Bound bind(Graph& g, bool trainable);

  /// Backbone plus FPN over a batch (N, 3, H, W).
  FeaturePyramid backbone_fpn(Graph& g, const Bound& p, Graph::Var images) const;

  /// Per-level class logits (Nproto, A, H, W), one batch entry per prototype
  /// in `prototypes` (Nproto, C, 1, 1). Fusion happens at the configured depth.
  std::vector<Graph::Var> classification_subnet(Graph& g, const Bound& p, const FeaturePyramid& query,
                                                Graph::Var prototypes) const;

  /// Per-level box deltas (1, 4A, H, W) computed from unfused features.
  std::vector<Graph::Var> localization_subnet(Graph& g, const Bound& p, const FeaturePyramid& query) const;

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  struct ConvSpec {
    std::size_t weight = 0;  // index into params_
    int stride = 1;
    int pad = 1;
  };
  ConvSpec add_conv(const std::string& name, int cin, int cout, int k, int stride, double std_dev,
                    double bias, std::mt19937_64& rng);
  Graph::Var apply(Graph& g, const Bound& p, const ConvSpec& c, Graph::Var x, bool relu) const;

  NetworkConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<ConvSpec> backbone_;  // two convs per block
  std::vector<ConvSpec> lateral_;
  std::vector<ConvSpec> fpn_out_;
  std::vector<ConvSpec> cls_;
  std::vector<ConvSpec> loc_;
};

/// Channel-wise Hadamard product of every pyramid level with `prototypes`
/// (N, C, 1, 1), broadcast over space.
FeaturePyramid fuse(Graph& g, const FeaturePyramid& query, Graph::Var prototypes);

/// Shot vectors and their mean for one support class.
struct PrototypeVars {
  std::vector<Graph::Var> shots;  // (1, C, 1, 1) each
  Graph::Var prototype;           // (1, C, 1, 1)
};

/// Global-average-pools batch entry `shot_indices[i]` of the support pyramid
/// at level `levels[i]` and averages the resulting K shot vectors.
PrototypeVars pool_support_prototype(Graph& g, const FeaturePyramid& support, const std::vector<int>& shot_indices,
                                     const std::vector<int>& levels);

}  // namespace fsrn
