#include "fsrn/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"

#include "fsrn/error.hpp"

namespace fsrn {

using nlohmann::json;

std::string to_string(Split s) { return s == Split::base ? "base" : "novel"; }

Split split_from_string(const std::string& s) {
  if (s == "base") return Split::base;
  if (s == "novel") return Split::novel;
  throw ParseError("unknown split '" + s + "' (expected base or novel)");
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::ring: return "ring";
  }
  return "?";
}

std::vector<int> ImageRecord::classes() const {
  std::set<int> s;
  for (const auto& a : annotations) s.insert(a.class_id);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------

DetectionDataset::DetectionDataset(std::vector<ImageRecord> records, std::map<int, ClassInfo> classes,
                                   std::optional<int> shot_budget)
    : records_(std::move(records)), classes_(std::move(classes)), shot_budget_(shot_budget) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (!index_.emplace(records_[i].id, i).second) {
      throw ValidationError("duplicate image id " + std::to_string(records_[i].id));
    }
    for (std::size_t j = 0; j < records_[i].annotations.size(); ++j) {
      instances_[records_[i].annotations[j].class_id].emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  }
  validate();
}

std::vector<int> DetectionDataset::class_ids(Split s) const {
  std::vector<int> out;
  for (const auto& [id, info] : classes_)
    if (info.split == s) out.push_back(id);
  return out;
}

Split DetectionDataset::split_of(int class_id) const {
  auto it = classes_.find(class_id);
  if (it == classes_.end()) throw UsageError("unknown class id " + std::to_string(class_id));
  return it->second.split;
}

const ImageRecord& DetectionDataset::record(int image_id) const {
  auto it = index_.find(image_id);
  if (it == index_.end()) throw UsageError("image " + std::to_string(image_id) + " not in dataset");
  return records_[it->second];
}

const std::vector<std::pair<int, int>>& DetectionDataset::instances_of(int class_id) const {
  static const std::vector<std::pair<int, int>> kEmpty;
  auto it = instances_.find(class_id);
  return it == instances_.end() ? kEmpty : it->second;
}

std::size_t DetectionDataset::annotation_count() const {
  std::size_t n = 0;
  for (const auto& r : records_) n += r.annotations.size();
  return n;
}

void DetectionDataset::validate() const {
  std::set<int> ann_ids;
  for (const auto& r : records_) {
    if (r.height <= 0 || r.width <= 0) {
      throw ValidationError("image " + std::to_string(r.id) + ": non-positive size");
    }
    if (!r.image.empty() && (r.image.height != r.height || r.image.width != r.width)) {
      throw ValidationError("image " + std::to_string(r.id) + ": pixel size does not match header");
    }
    for (const auto& a : r.annotations) {
      const std::string where = "annotation " + std::to_string(a.id) + " (image " + std::to_string(r.id) + ")";
      if (a.image_id != r.id) throw ValidationError(where + ": image_id mismatch");
      if (!ann_ids.insert(a.id).second) throw ValidationError(where + ": duplicate annotation id");
      if (!a.bbox.valid()) throw ValidationError(where + ": bbox must have w > 0 and h > 0");
      if (a.bbox.x < 0 || a.bbox.y < 0 || a.bbox.x + a.bbox.w > r.width + 1e-9 ||
          a.bbox.y + a.bbox.h > r.height + 1e-9) {
        throw ValidationError(where + ": bbox outside image bounds");
      }
      if (!classes_.contains(a.class_id)) {
        throw ValidationError(where + ": class " + std::to_string(a.class_id) + " not in class table");
      }
    }
  }
  if (shot_budget_) {
    for (int c : class_ids(Split::novel)) {
      const auto n = instances_of(c).size();
      if (n != static_cast<std::size_t>(*shot_budget_)) {
        throw ValidationError("novel class " + std::to_string(c) + " has " + std::to_string(n) +
                              " annotations, shot budget is " + std::to_string(*shot_budget_));
      }
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + ": missing key '" + key + "'");
  return obj.at(key);
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + ": key '" + key + "' has the wrong type");
  }
}

Box clip_box(const Box& b, int width, int height) {
  const double x0 = std::clamp(b.x, 0.0, static_cast<double>(width));
  const double y0 = std::clamp(b.y, 0.0, static_cast<double>(height));
  const double x1 = std::clamp(b.x + b.w, 0.0, static_cast<double>(width));
  const double y1 = std::clamp(b.y + b.h, 0.0, static_cast<double>(height));
  return Box{x0, y0, x1 - x0, y1 - y0};
}

}  // namespace

DetectionDataset load_dataset(const std::filesystem::path& path, const std::map<int, Split>& split_spec,
                              const LoadOptions& opts) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open annotation file " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  std::map<int, ClassInfo> classes;
  const json& jclasses = require(doc, "classes", "file");
  if (!jclasses.is_array()) throw ParseError("classes: expected a list");
  for (std::size_t i = 0; i < jclasses.size(); ++i) {
    const std::string where = "classes[" + std::to_string(i) + "]";
    ClassInfo ci;
    ci.id = get_as<int>(jclasses[i], "id", where);
    ci.name = jclasses[i].value("name", std::to_string(ci.id));
    ci.split = split_from_string(get_as<std::string>(jclasses[i], "split", where));
    auto [it, fresh] = classes.emplace(ci.id, ci);
    if (!fresh) {
      if (it->second.split != ci.split) {
        throw ValidationError("class " + std::to_string(ci.id) + " is listed in both base and novel splits");
      }
      throw ValidationError("class " + std::to_string(ci.id) + " listed twice");
    }
  }
  for (const auto& [id, split] : split_spec) {
    auto it = classes.find(id);
    if (it == classes.end()) throw ValidationError("split spec names unknown class " + std::to_string(id));
    it->second.split = split;
  }

  std::vector<ImageRecord> records;
  std::map<int, std::size_t> by_id;
  const json& jimages = require(doc, "images", "file");
  if (!jimages.is_array()) throw ParseError("images: expected a list");
  for (std::size_t i = 0; i < jimages.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    ImageRecord r;
    r.id = get_as<int>(jimages[i], "id", where);
    r.file_name = get_as<std::string>(jimages[i], "file_name", where);
    r.width = get_as<int>(jimages[i], "width", where);
    r.height = get_as<int>(jimages[i], "height", where);
    if (opts.load_pixels) {
      r.image = read_ppm(path.parent_path() / r.file_name);
    }
    if (!by_id.emplace(r.id, records.size()).second) {
      throw ValidationError(where + ": duplicate image id " + std::to_string(r.id));
    }
    records.push_back(std::move(r));
  }

  const json& janns = require(doc, "annotations", "file");
  if (!janns.is_array()) throw ParseError("annotations: expected a list");
  for (std::size_t i = 0; i < janns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    Annotation a;
    a.id = janns[i].value("id", static_cast<int>(i) + 1);
    a.image_id = get_as<int>(janns[i], "image_id", where);
    a.class_id = get_as<int>(janns[i], "class_id", where);
    const auto bb = get_as<std::vector<double>>(janns[i], "bbox", where);
    if (bb.size() != 4) throw ParseError(where + ": bbox must have 4 numbers");
    a.bbox = Box{bb[0], bb[1], bb[2], bb[3]};
    if (!a.bbox.valid()) throw ValidationError(where + ": bbox must have w > 0 and h > 0");
    auto it = by_id.find(a.image_id);
    if (it == by_id.end()) throw ValidationError(where + ": unknown image_id " + std::to_string(a.image_id));
    ImageRecord& r = records[it->second];
    a.bbox = clip_box(a.bbox, r.width, r.height);
    if (!a.bbox.valid()) throw ValidationError(where + ": bbox lies outside its image");
    r.annotations.push_back(a);
  }

  std::optional<int> budget;
  if (doc.contains("shot_budget") && !doc["shot_budget"].is_null()) budget = doc["shot_budget"].get<int>();
  return DetectionDataset(std::move(records), std::move(classes), budget);
}

void save_dataset(const DetectionDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  json doc;
  doc["images"] = json::array();
  doc["annotations"] = json::array();
  doc["classes"] = json::array();
  for (const auto& r : ds.records()) {
    const std::string fname = r.file_name.empty() ? "images/" + std::to_string(r.id) + ".ppm" : r.file_name;
    doc["images"].push_back({{"id", r.id}, {"file_name", fname}, {"width", r.width}, {"height", r.height}});
    if (!r.image.empty()) write_ppm(r.image, dir / fname);
    for (const auto& a : r.annotations) {
      doc["annotations"].push_back({{"id", a.id},
                                    {"image_id", a.image_id},
                                    {"class_id", a.class_id},
                                    {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}}});
    }
  }
  for (const auto& [id, ci] : ds.classes()) {
    doc["classes"].push_back({{"id", id}, {"name", ci.name}, {"split", to_string(ci.split)}});
  }
  if (ds.shot_budget()) doc["shot_budget"] = *ds.shot_budget();
  std::ofstream os(dir / "annotations.json");
  os << doc.dump(1) << "\n";
}

// ---------------------------------------------------------------------------

std::vector<ClassSpec> default_class_specs() {
  const Rgb red{215, 45, 40};
  const Rgb green{45, 185, 70};
  const Rgb blue{50, 85, 225};
  const std::vector<std::pair<ShapeKind, std::string>> shapes{
      {ShapeKind::circle, "circle"}, {ShapeKind::square, "square"},
      {ShapeKind::triangle, "triangle"}, {ShapeKind::ring, "ring"}};
  const std::vector<std::pair<Rgb, std::string>> colors{{red, "red"}, {green, "green"}, {blue, "blue"}};
  std::vector<ClassSpec> base;
  std::vector<ClassSpec> novel;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    for (std::size_t c = 0; c < colors.size(); ++c) {
      ClassSpec spec{shapes[s].first, colors[c].first, colors[c].second + "-" + shapes[s].second, Split::base};
      if (c == s % colors.size()) {
        spec.split = Split::novel;
        novel.push_back(spec);
      } else {
        base.push_back(spec);
      }
    }
  }
  base.insert(base.end(), novel.begin(), novel.end());
  return base;
}

std::map<int, ClassInfo> class_table(const std::vector<ClassSpec>& class_specs) {
  std::map<int, ClassInfo> t;
  for (std::size_t i = 0; i < class_specs.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    t.emplace(id, ClassInfo{id, class_specs[i].name, class_specs[i].split});
  }
  return t;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic per-pixel noise in [-1, 1].
double pixel_noise(std::uint64_t seed, int c, int y, int x) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64((static_cast<std::uint64_t>(c) << 40) ^
                                                       (static_cast<std::uint64_t>(y) << 20) ^
                                                       static_cast<std::uint64_t>(x)));
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

bool inside_shape(ShapeKind k, const Box& b, double px, double py) {
  const double u = (px - b.cx()) / (0.5 * b.w);
  const double v = (py - b.cy()) / (0.5 * b.h);
  if (std::abs(u) > 1.0 || std::abs(v) > 1.0) return false;
  switch (k) {
    case ShapeKind::circle: return u * u + v * v <= 1.0;
    case ShapeKind::ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case ShapeKind::square: return true;
    case ShapeKind::triangle: return std::abs(u) <= 0.5 * (v + 1.0);
  }
  return false;
}

bool overlaps(const Box& a, const Box& b, int margin) {
  return a.x < b.x + b.w + margin && b.x < a.x + a.w + margin && a.y < b.y + b.h + margin &&
         b.y < a.y + a.h + margin;
}

}  // namespace

Image render_scene(const SceneSpec& scene) {
  Image img(scene.size, scene.size);
  std::mt19937_64 rng(scene.background_seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double level = 95.0 + 60.0 * uni(rng);
  const double tint[3] = {12.0 * (uni(rng) - 0.5), 12.0 * (uni(rng) - 0.5), 12.0 * (uni(rng) - 0.5)};
  const double freq_x = 0.02 + 0.08 * uni(rng);
  const double freq_y = 0.02 + 0.08 * uni(rng);
  const double phase = 6.283185307179586 * uni(rng);
  for (int c = 0; c < Image::kChannels; ++c) {
    for (int y = 0; y < scene.size; ++y) {
      for (int x = 0; x < scene.size; ++x) {
        const double v = level + tint[c] + 18.0 * std::sin(freq_x * x + freq_y * y + phase) +
                         10.0 * pixel_noise(scene.background_seed, c, y, x);
        img.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  for (const auto& inst : scene.instances) {
    const std::uint8_t rgb[3] = {inst.color.r, inst.color.g, inst.color.b};
    const int x0 = static_cast<int>(inst.box.x);
    const int y0 = static_cast<int>(inst.box.y);
    for (int y = y0; y < y0 + static_cast<int>(inst.box.h); ++y) {
      for (int x = x0; x < x0 + static_cast<int>(inst.box.w); ++x) {
        if (!inside_shape(inst.shape, inst.box, x + 0.5, y + 0.5)) continue;
        for (int c = 0; c < Image::kChannels; ++c) {
          const double v = rgb[c] + 6.0 * pixel_noise(~scene.background_seed, c, y, x);
          img.at(c, y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
  }
  return img;
}

std::vector<SceneSpec> plan_shapes_scenes(std::uint64_t seed, int n_images,
                                          const std::vector<ClassSpec>& class_specs, int image_size,
                                          const ShapesConfig& cfg) {
  if (n_images < 1) throw ConfigError("n_images must be >= 1");
  if (class_specs.size() < 2) throw ConfigError("at least two class specs are required");
  if (cfg.min_object_size < 4 || cfg.max_object_size < cfg.min_object_size) {
    throw ConfigError("invalid object size range");
  }
  if (image_size < cfg.min_object_size + 2 * cfg.object_margin) {
    throw ConfigError("image_size " + std::to_string(image_size) + " too small to place an object of size " +
                      std::to_string(cfg.min_object_size));
  }
  if (cfg.classes_per_image_weights.empty()) throw ConfigError("classes_per_image_weights is empty");
  if (cfg.max_instances < 1 || cfg.max_instances > 8) throw ConfigError("max_instances must be in [1, 8]");
  const int max_size = std::min(cfg.max_object_size, image_size - 2 * cfg.object_margin);
  std::vector<int> pool = cfg.class_pool;
  if (pool.empty()) {
    pool.resize(class_specs.size());
    std::iota(pool.begin(), pool.end(), 1);
  }
  for (int id : pool) {
    if (id < 1 || id > static_cast<int>(class_specs.size())) {
      throw ConfigError("class_pool entry " + std::to_string(id) + " is not a class id");
    }
  }

  std::mt19937_64 master(seed);
  std::vector<SceneSpec> scenes;
  scenes.reserve(n_images);
  for (int i = 0; i < n_images; ++i) {
    std::mt19937_64 rng(master());
    for (;;) {
      SceneSpec scene;
      scene.background_seed = rng();
      scene.size = image_size;

      std::discrete_distribution<int> nc_dist(cfg.classes_per_image_weights.begin(),
                                              cfg.classes_per_image_weights.end());
      std::vector<int> ids = pool;
      const int n_classes = std::min<int>(nc_dist(rng) + 1, static_cast<int>(ids.size()));
      std::shuffle(ids.begin(), ids.end(), rng);
      ids.resize(n_classes);
      const int n_inst =
          std::uniform_int_distribution<int>(n_classes, std::max(n_classes, cfg.max_instances))(rng);

      std::uniform_int_distribution<int> size_dist(cfg.min_object_size, max_size);
      std::uniform_real_distribution<double> aspect(0.8, 1.25);
      std::uniform_int_distribution<int> jitter(-12, 12);
      std::vector<int> count(n_classes, 0);
      bool ok = true;
      for (int k = 0; k < n_inst; ++k) {
        const int slot = k < n_classes ? k : std::uniform_int_distribution<int>(0, n_classes - 1)(rng);
        const ClassSpec& spec = class_specs[ids[slot] - 1];
        const int w = size_dist(rng);
        const int h = std::clamp(static_cast<int>(std::lround(w * aspect(rng))), cfg.min_object_size, max_size);
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
          const int x = std::uniform_int_distribution<int>(0, image_size - w)(rng);
          const int y = std::uniform_int_distribution<int>(0, image_size - h)(rng);
          const Box b{static_cast<double>(x), static_cast<double>(y), static_cast<double>(w),
                      static_cast<double>(h)};
          bool clash = false;
          for (const auto& other : scene.instances) clash = clash || overlaps(b, other.box, cfg.object_margin);
          if (clash) continue;
          auto jit = [&](std::uint8_t v) {
            return static_cast<std::uint8_t>(std::clamp(static_cast<int>(v) + jitter(rng), 0, 255));
          };
          scene.instances.push_back(ShapeInstance{ids[slot], spec.shape,
                                                  Rgb{jit(spec.color.r), jit(spec.color.g), jit(spec.color.b)}, b});
          ++count[slot];
          placed = true;
        }
        if (!placed && k < n_classes) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scenes.push_back(std::move(scene));
        break;
      }
    }
  }
  return scenes;
}

DetectionDataset generate_shapes_dataset(std::uint64_t seed, int n_images,
                                         const std::vector<ClassSpec>& class_specs, int image_size,
                                         const ShapesConfig& cfg, int first_image_id) {
  const auto scenes = plan_shapes_scenes(seed, n_images, class_specs, image_size, cfg);
  std::vector<ImageRecord> records;
  records.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    ImageRecord r;
    r.id = first_image_id + static_cast<int>(i);
    r.file_name = "images/" + std::to_string(r.id) + ".ppm";
    r.height = image_size;
    r.width = image_size;
    r.image = render_scene(scenes[i]);
    int k = 0;
    for (const auto& inst : scenes[i].instances) {
      r.annotations.push_back(Annotation{r.id * 8 + k++, r.id, inst.class_id, inst.box});
    }
    records.push_back(std::move(r));
  }
  return DetectionDataset(std::move(records), class_table(class_specs));
}

// ---------------------------------------------------------------------------

SupportCrop extract_support_crop(const ImageRecord& record, const Annotation& ann, int out_size) {
  const bool owned = std::any_of(record.annotations.begin(), record.annotations.end(), [&](const Annotation& a) {
    return a.id == ann.id && a.image_id == ann.image_id && a.bbox == ann.bbox;
  });
  if (!owned || ann.image_id != record.id) {
    throw UsageError("annotation " + std::to_string(ann.id) + " does not belong to image " +
                     std::to_string(record.id));
  }
  if (record.image.empty()) throw UsageError("image " + std::to_string(record.id) + " has no pixels loaded");
  if (out_size <= 0) throw UsageError("crop size must be positive");
  return SupportCrop{ann.class_id, ann.id, ann.bbox, crop_resize(record.image, ann.bbox, out_size, out_size)};
}

DatasetStatistics dataset_statistics(const DetectionDataset& ds) {
  if (ds.records().empty()) throw UsageError("dataset_statistics on an empty dataset");
  double m = 0.0;
  double c = 0.0;
  for (const auto& r : ds.records()) {
    m += static_cast<double>(r.annotations.size());
    c += static_cast<double>(r.classes().size());
  }
  const double n = static_cast<double>(ds.records().size());
  return {m / n, c / n};
}

DetectionDataset restrict_to_classes(const DetectionDataset& ds, const std::vector<int>& classes) {
  const std::set<int> keep(classes.begin(), classes.end());
  std::vector<ImageRecord> out;
  for (const auto& r : ds.records()) {
    const bool pure = std::all_of(r.annotations.begin(), r.annotations.end(),
                                  [&](const Annotation& a) { return keep.contains(a.class_id); });
    if (pure && !r.annotations.empty()) out.push_back(r);
  }
  auto table = ds.classes();
  return DetectionDataset(std::move(out), std::move(table));
}

DetectionDataset make_k_shot(const DetectionDataset& ds, int k, const std::vector<int>& classes,
                             std::uint64_t seed) {
  if (k < 1) throw UsageError("k must be >= 1");
  const std::set<int> wanted(classes.begin(), classes.end());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(ds.records().size());
  for (int restart = 0; restart < 64; ++restart) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::map<int, int> have;
    std::vector<ImageRecord> picked;
    for (std::size_t idx : order) {
      const auto& r = ds.records()[idx];
      std::map<int, int> add;
      for (const auto& a : r.annotations)
        if (wanted.contains(a.class_id)) ++add[a.class_id];
      if (add.empty()) continue;
      const bool fits = std::all_of(add.begin(), add.end(), [&](const auto& kv) { return have[kv.first] + kv.second <= k; });
      if (!fits) continue;
      ImageRecord copy = r;
      std::erase_if(copy.annotations, [&](const Annotation& a) { return !wanted.contains(a.class_id); });
      for (const auto& [c, n] : add) have[c] += n;
      picked.push_back(std::move(copy));
    }
    const bool complete = std::all_of(wanted.begin(), wanted.end(), [&](int c) { return have[c] == k; });
    if (complete) {
      auto table = ds.classes();
      std::optional<int> budget;
      const auto novel = ds.class_ids(Split::novel);
      if (std::all_of(novel.begin(), novel.end(), [&](int c) { return wanted.contains(c); })) budget = k;
      return DetectionDataset(std::move(picked), std::move(table), budget);
    }
  }
  throw SamplingError("could not assemble exactly " + std::to_string(k) + " annotations per class");
}

}  // namespace fsrn
