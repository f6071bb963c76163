#include "fsrn/sampler.hpp"

#include <algorithm>
#include <set>

#include "fsrn/error.hpp"

namespace fsrn {

void SamplerConfig::validate() const {
  if (n_ways < 1) throw ConfigError("n_ways must be >= 1");
  if (k_shots < 1) throw ConfigError("k_shots must be >= 1");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("dropout_prob must lie in [0, 1)");
  if (crop_size < 1) throw ConfigError("crop_size must be positive");
}

namespace {

// K distinct shots of `class_id`, preferring annotations outside the query.
std::vector<SupportCrop> sample_shots(const DetectionDataset& ds, int class_id, int query_id, const SamplerConfig& cfg,
                                      std::mt19937_64& rng) {
  const auto& all = ds.instances_of(class_id);
  std::vector<std::pair<int, int>> pool;
  for (const auto& ref : all)
    if (ds.records()[ref.first].id != query_id) pool.push_back(ref);
  if (static_cast<int>(pool.size()) < cfg.k_shots) pool = all;
  if (static_cast<int>(pool.size()) < cfg.k_shots) {
    throw SamplingError("class " + std::to_string(class_id) + " has " + std::to_string(all.size()) +
                        " annotations, " + std::to_string(cfg.k_shots) + " shots required");
  }
  // Partial Fisher-Yates: the first K entries become the sample.
  for (int i = 0; i < cfg.k_shots; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  std::vector<SupportCrop> shots;
  shots.reserve(cfg.k_shots);
  for (int i = 0; i < cfg.k_shots; ++i) {
    const ImageRecord& rec = ds.records()[pool[i].first];
    const Annotation& ann = rec.annotations[pool[i].second];
    if (cfg.extract_crops) {
      shots.push_back(extract_support_crop(rec, ann, cfg.crop_size));
    } else {
      shots.push_back(SupportCrop{ann.class_id, ann.id, ann.bbox, {}});
    }
  }
  return shots;
}

std::vector<int> negative_candidates(const DetectionDataset& ds, const SamplerConfig& cfg,
                                     const std::vector<int>& present, const std::map<int, std::vector<SupportCrop>>& taken) {
  std::vector<int> pool = cfg.negative_pool.empty() ? ds.class_ids(Split::base) : cfg.negative_pool;
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  std::erase_if(pool, [&](int c) {
    return std::binary_search(present.begin(), present.end(), c) || taken.contains(c);
  });
  return pool;
}

ImageRecord retained_query(const ImageRecord& q, const std::set<int>& keep) {
  ImageRecord out = q;
  std::erase_if(out.annotations, [&](const Annotation& a) { return !keep.contains(a.class_id); });
  return out;
}

}  // namespace

std::optional<EpisodeTask> sample_episode(const DetectionDataset& ds, const ImageRecord& query,
                                          const SamplerConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (!ds.contains(query.id)) throw UsageError("query image " + std::to_string(query.id) + " is not in the dataset");
  if (query.annotations.empty()) throw UsageError("query image " + std::to_string(query.id) + " has no annotations");

  const std::vector<int> present = query.classes();
  std::vector<int> survivors;
  EpisodeTask task;
  task.n_ways = cfg.n_ways;
  std::bernoulli_distribution drop(cfg.dropout_prob);
  for (int c : present) {
    if (drop(rng)) {
      task.background_classes.push_back(c);
    } else {
      survivors.push_back(c);
    }
  }
  if (survivors.empty()) return std::nullopt;

  if (static_cast<int>(survivors.size()) > cfg.n_ways) {
    std::shuffle(survivors.begin(), survivors.end(), rng);
    task.background_classes.insert(task.background_classes.end(), survivors.begin() + cfg.n_ways, survivors.end());
    survivors.resize(cfg.n_ways);
    std::sort(survivors.begin(), survivors.end());
    std::sort(task.background_classes.begin(), task.background_classes.end());
  }

  for (int c : survivors) task.support.emplace(c, sample_shots(ds, c, query.id, cfg, rng));
  task.positive_classes = survivors;

  while (static_cast<int>(task.support.size()) < cfg.n_ways) {
    const auto candidates = negative_candidates(ds, cfg, present, task.support);
    if (candidates.empty()) {
      throw SamplingError("no negative class available for query image " + std::to_string(query.id));
    }
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    const int z = candidates[pick(rng)];
    task.support.emplace(z, sample_shots(ds, z, query.id, cfg, rng));
    task.negative_classes.push_back(z);
  }
  task.query = retained_query(query, std::set<int>(survivors.begin(), survivors.end()));
  return task;
}

EpisodeTask sample_binary_episode(const DetectionDataset& ds, const ImageRecord& query, int class_id, int k_shots,
                                  std::mt19937_64& rng, const SamplerConfig& cfg) {
  SamplerConfig c = cfg;
  c.k_shots = k_shots;
  c.n_ways = 2;
  c.validate();
  if (!ds.contains(query.id)) throw UsageError("query image " + std::to_string(query.id) + " is not in the dataset");
  const std::vector<int> present = query.classes();
  if (!std::binary_search(present.begin(), present.end(), class_id)) {
    throw UsageError("class " + std::to_string(class_id) + " does not occur in query image " + std::to_string(query.id));
  }
  EpisodeTask task;
  task.n_ways = 2;
  task.positive_classes = {class_id};
  for (int p : present)
    if (p != class_id) task.background_classes.push_back(p);
  task.support.emplace(class_id, sample_shots(ds, class_id, query.id, c, rng));
  const auto candidates = negative_candidates(ds, c, present, task.support);
  if (candidates.empty()) throw SamplingError("no negative class available for a binary task");
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  const int z = candidates[pick(rng)];
  task.support.emplace(z, sample_shots(ds, z, query.id, c, rng));
  task.negative_classes = {z};
  task.query = retained_query(query, {class_id});
  return task;
}

double foreground_yield(const DetectionDataset& ds, SamplingMode mode, const SamplerConfig& cfg, int n_episodes) {
  if (ds.records().empty()) throw UsageError("foreground_yield on an empty dataset");
  if (n_episodes < 1) throw UsageError("n_episodes must be positive");
  SamplerConfig c = cfg;
  c.extract_crops = false;
  std::mt19937_64 rng(c.seed);
  std::uniform_int_distribution<std::size_t> pick_query(0, ds.records().size() - 1);
  double total = 0.0;
  for (int e = 0; e < n_episodes; ++e) {
    const ImageRecord& q = ds.records()[pick_query(rng)];
    if (q.annotations.empty()) continue;
    if (mode == SamplingMode::multiway) {
      const auto task = sample_episode(ds, q, c, rng);
      if (task) total += static_cast<double>(task->query.annotations.size());
    } else {
      const auto classes = q.classes();
      std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);
      const auto task = sample_binary_episode(ds, q, classes[pick_class(rng)], c.k_shots, rng, c);
      total += static_cast<double>(task.query.annotations.size());
    }
  }
  return total / n_episodes;
}

}  // namespace fsrn
