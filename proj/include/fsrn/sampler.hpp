#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "fsrn/datamodel.hpp"

namespace fsrn {

struct SamplerConfig {
  int n_ways = 3;
  int k_shots = 5;
  double dropout_prob = 0.5;
  std::uint64_t seed = 0;
  int crop_size = 64;
  /// When false the support lists carry annotation ids and boxes but no pixels.
  bool extract_crops = true;
  /// Classes negatives are drawn from; empty means the dataset's base classes.
  std::vector<int> negative_pool;

  void validate() const;
};

/// One N-way K-shot task built around a query image.
struct EpisodeTask {
  /// Query with only the retained annotations.
  ImageRecord query;
  std::map<int, std::vector<SupportCrop>> support;
  int n_ways = 0;
  std::vector<int> positive_classes;
  std::vector<int> negative_classes;
  /// Present in the image but removed from the targets (dropout or N cap).
  std::vector<int> background_classes;
};

/// Multi-way support set generation with class dropout. Returns nullopt (a
/// skipped task) when dropout removes every class of the query.
std::optional<EpisodeTask> sample_episode(const DetectionDataset& ds, const ImageRecord& query,
                                          const SamplerConfig& cfg, std::mt19937_64& rng);

/// Single-class task: the annotations of `class_id` plus one negative class.
EpisodeTask sample_binary_episode(const DetectionDataset& ds, const ImageRecord& query, int class_id, int k_shots,
                                  std::mt19937_64& rng, const SamplerConfig& cfg = {});

enum class SamplingMode { multiway, binary };

/// Monte-Carlo mean of retained foreground annotations per episode. Queries
/// are drawn uniformly; skipped multi-way tasks count as zero. Binary tasks
/// pick the positive class uniformly among the query's classes.
double foreground_yield(const DetectionDataset& ds, SamplingMode mode, const SamplerConfig& cfg,
                        int n_episodes = 2000);

}  // namespace fsrn
