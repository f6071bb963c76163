#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsrn/image.hpp"

namespace fsrn {

enum class Split { base, novel };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ClassInfo {
  int id = 0;
  std::string name;
  Split split = Split::base;
};

struct Annotation {
  int id = 0;
  int image_id = 0;
  int class_id = 0;
  Box bbox;
};

struct ImageRecord {
  int id = 0;
  std::string file_name;
  int height = 0;
  int width = 0;
  Image image;  // may be empty when a dataset is loaded without pixels
  std::vector<Annotation> annotations;

  /// Distinct class ids present, ascending.
  [[nodiscard]] std::vector<int> classes() const;
};

/// A close-up of one annotated object, resized to a square.
struct SupportCrop {
  int class_id = 0;
  int annotation_id = 0;
  Box source_box;  // box in the originating image
  Image pixels;
};

class DetectionDataset {
 public:
  DetectionDataset() = default;
  DetectionDataset(std::vector<ImageRecord> records, std::map<int, ClassInfo> classes,
                   std::optional<int> shot_budget = std::nullopt);

  [[nodiscard]] const std::vector<ImageRecord>& records() const { return records_; }
  [[nodiscard]] const std::map<int, ClassInfo>& classes() const { return classes_; }
  [[nodiscard]] std::optional<int> shot_budget() const { return shot_budget_; }

  [[nodiscard]] std::vector<int> class_ids(Split s) const;
  [[nodiscard]] Split split_of(int class_id) const;
  [[nodiscard]] const ImageRecord& record(int image_id) const;
  [[nodiscard]] bool contains(int image_id) const { return index_.contains(image_id); }

  /// All annotations of one class, as (record index, annotation index) pairs,
  /// in dataset order.
  [[nodiscard]] const std::vector<std::pair<int, int>>& instances_of(int class_id) const;
  [[nodiscard]] std::size_t annotation_count() const;

  /// Throws ValidationError when an invariant does not hold.
  void validate() const;

 private:
  std::vector<ImageRecord> records_;
  std::map<int, ClassInfo> classes_;
  std::optional<int> shot_budget_;
  std::map<int, std::size_t> index_;
  std::map<int, std::vector<std::pair<int, int>>> instances_;
};

struct LoadOptions {
  bool load_pixels = true;
};

/// Reads a COCO-style annotation file. `split_spec` overrides the split of
/// the listed classes. Image files are resolved relative to the file.
DetectionDataset load_dataset(const std::filesystem::path& path, const std::map<int, Split>& split_spec = {},
                              const LoadOptions& opts = {});
/// Writes `annotations.json` plus one PPM per record under `dir`.
void save_dataset(const DetectionDataset& ds, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Synthetic shapes benchmark.

enum class ShapeKind { circle, square, triangle, ring };
std::string to_string(ShapeKind k);

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct ClassSpec {
  ShapeKind shape = ShapeKind::circle;
  Rgb color;
  std::string name;
  Split split = Split::base;
};

/// Four shapes in three colours; the novel classes form a diagonal so that
/// every novel shape and every novel colour also appears among base classes.
std::vector<ClassSpec> default_class_specs();

struct ShapesConfig {
  int min_object_size = 24;
  int max_object_size = 56;
  int max_instances = 5;
  /// Relative frequency of 1, 2, 3, ... distinct classes per image.
  std::vector<double> classes_per_image_weights{0.1, 0.3, 0.6};
  /// Empty pixels kept between objects.
  int object_margin = 2;
  /// Class ids scenes draw from; empty means every class.
  std::vector<int> class_pool;
};

struct ShapeInstance {
  int class_id = 0;
  ShapeKind shape = ShapeKind::circle;
  Rgb color;
  Box box;  // integer-aligned
};

struct SceneSpec {
  std::uint64_t background_seed = 0;
  int size = 128;
  std::vector<ShapeInstance> instances;
};

/// Lays out `n_images` scenes. Class ids are 1-based indices into
/// `class_specs`. Deterministic in `seed`.
std::vector<SceneSpec> plan_shapes_scenes(std::uint64_t seed, int n_images,
                                          const std::vector<ClassSpec>& class_specs, int image_size,
                                          const ShapesConfig& cfg = {});
Image render_scene(const SceneSpec& scene);

DetectionDataset generate_shapes_dataset(std::uint64_t seed, int n_images,
                                         const std::vector<ClassSpec>& class_specs, int image_size,
                                         const ShapesConfig& cfg = {}, int first_image_id = 1);

/// Class table matching the ids produced by generate_shapes_dataset.
std::map<int, ClassInfo> class_table(const std::vector<ClassSpec>& class_specs);

// ---------------------------------------------------------------------------

SupportCrop extract_support_crop(const ImageRecord& record, const Annotation& ann, int out_size = 64);

struct DatasetStatistics {
  double mean_annotations = 0.0;  // m-bar
  double mean_classes = 0.0;      // c-bar
};
DatasetStatistics dataset_statistics(const DetectionDataset& ds);

/// Keeps only records of which every annotation belongs to `classes` and
/// drops annotations of other classes from the rest.
DetectionDataset restrict_to_classes(const DetectionDataset& ds, const std::vector<int>& classes);

/// Picks whole images greedily (shuffled by `seed`) so that every class in
/// `classes` ends up with exactly `k` annotations; annotations of other
/// classes are removed. Throws SamplingError when no such selection is found.
DetectionDataset make_k_shot(const DetectionDataset& ds, int k, const std::vector<int>& classes,
                             std::uint64_t seed);

}  // namespace fsrn
