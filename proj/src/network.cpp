#include "fsrn/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "fsrn/error.hpp"

namespace fsrn {

void NetworkConfig::validate() const {
  if (backbone.strides != std::vector<int>{8, 16, 32}) {
    throw ConfigError("the backbone provides pyramid strides 8, 16 and 32 only");
  }
  for (int c : backbone.channels)
    if (c <= 0) throw ConfigError("backbone channels must be positive");
  if (backbone.fpn_channels <= 0 || subnet.n_channels <= 0) throw ConfigError("channel counts must be positive");
  if (subnet.n_conv_layers < 1) throw ConfigError("subnet needs at least one conv layer");
  if (subnet.kernel_size < 1 || subnet.kernel_size % 2 == 0) throw ConfigError("subnet kernel must be odd");
  if (subnet.post_fusion_layers < 1 || subnet.post_fusion_layers > subnet.n_conv_layers) {
    throw ConfigError("post_fusion_layers must lie in [1, n_conv_layers]");
  }
  if (subnet.post_fusion_layers < subnet.n_conv_layers && subnet.n_channels != backbone.fpn_channels) {
    // Late fusion multiplies subnet features by an FPN-sized prototype.
    throw ConfigError("late fusion requires subnet channels equal to FPN channels");
  }
  anchor_pattern(subnet.n_anchors_per_pixel);
  if (!(prior_probability > 0.0 && prior_probability < 1.0)) throw ConfigError("prior probability must be in (0,1)");
}

int receptive_field(int n_layers, int kernel, int stride) {
  if (n_layers < 0) throw UsageError("receptive_field: negative layer count");
  if (stride != 1) throw UsageError("receptive_field: only stride-1 stacks are supported");
  return 1 + n_layers * (kernel - 1);
}

Detector::Detector(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.init_seed);
  const auto& ch = cfg_.backbone.channels;
  auto he = [](int cin, int k) { return std::sqrt(2.0 / (cin * k * k)); };

  int cin = 3;
  for (int b = 0; b < 4; ++b) {
    const std::string name = "backbone.block" + std::to_string(b + 1);
    // Block 1 downsamples twice to reach stride 4; later blocks once.
    backbone_.push_back(add_conv(name + ".conv1", cin, ch[b], 3, 2, he(cin, 3), 0.0, rng));
    backbone_.push_back(add_conv(name + ".conv2", ch[b], ch[b], 3, b == 0 ? 2 : 1, he(ch[b], 3), 0.0, rng));
    cin = ch[b];
  }
  const int f = cfg_.backbone.fpn_channels;
  for (int l = 0; l < 3; ++l) {
    const std::string name = "fpn.p" + std::to_string(l + 3);
    lateral_.push_back(add_conv(name + ".lateral", ch[l + 1], f, 1, 1, std::sqrt(1.0 / ch[l + 1]), 0.0, rng));
    fpn_out_.push_back(add_conv(name + ".output", f, f, 3, 1, std::sqrt(1.0 / (f * 9)), 0.0, rng));
  }
  const auto& sc = cfg_.subnet;
  const int k = sc.kernel_size;
  const int a = sc.n_anchors_per_pixel;
  const double prior_bias = -std::log((1.0 - cfg_.prior_probability) / cfg_.prior_probability);
  int c_in = f;
  for (int i = 0; i + 1 < sc.n_conv_layers; ++i) {
    cls_.push_back(add_conv("cls.conv" + std::to_string(i + 1), c_in, sc.n_channels, k, 1, he(c_in, k), 0.0, rng));
    c_in = sc.n_channels;
  }
  cls_.push_back(add_conv("cls.pred", c_in, a, k, 1, 0.01, prior_bias, rng));
  c_in = f;
  for (int i = 0; i + 1 < sc.n_conv_layers; ++i) {
    loc_.push_back(add_conv("loc.conv" + std::to_string(i + 1), c_in, sc.n_channels, k, 1, he(c_in, k), 0.0, rng));
    c_in = sc.n_channels;
  }
  loc_.push_back(add_conv("loc.pred", c_in, 4 * a, k, 1, 0.01, 0.0, rng));
}

Detector::ConvSpec Detector::add_conv(const std::string& name, int cin, int cout, int k, int stride,
                                      double std_dev, double bias, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std_dev);
  Tensor w(Shape{cout, cin, k, k});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = nd(rng);
  ConvSpec spec{params_.size(), stride, k / 2};
  params_.emplace_back(name + ".weight", std::move(w));
  params_.emplace_back(name + ".bias", Tensor(Shape{1, cout, 1, 1}, bias));
  return spec;
}

std::size_t Detector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Detector::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Detector::Bound Detector::bind(Graph& g, bool trainable) {
  Bound b;
  b.vars_.reserve(params_.size());
  for (auto& p : params_) b.vars_.push_back(trainable ? g.leaf(p) : g.constant(p.value));
  return b;
}

Graph::Var Detector::apply(Graph& g, const Bound& p, const ConvSpec& c, Graph::Var x, bool relu) const {
  Graph::Var y = ops::conv2d(g, x, p[c.weight], p[c.weight + 1], c.stride, c.pad);
  return relu ? ops::relu(g, y) : y;
}

FeaturePyramid Detector::backbone_fpn(Graph& g, const Bound& p, Graph::Var images) const {
  const Shape s = g.value(images).shape();
  if (s.c != 3) throw ShapeError("backbone expects 3-channel input, got " + s.str());
  pyramid_level_shapes(s.h, s.w, cfg_.backbone.strides);  // divisibility check

  std::vector<Graph::Var> stages;
  Graph::Var x = images;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    x = apply(g, p, backbone_[i], x, true);
    if (i % 2 == 1) stages.push_back(x);
  }
  // stages[1..3] are strides 8, 16, 32.
  std::vector<Graph::Var> lat(3);
  for (int l = 0; l < 3; ++l) lat[l] = apply(g, p, lateral_[l], stages[l + 1], false);
  std::vector<Graph::Var> merged(3);
  merged[2] = lat[2];
  for (int l = 1; l >= 0; --l) merged[l] = ops::add(g, lat[l], ops::upsample2x(g, merged[l + 1]));
  FeaturePyramid pyr;
  pyr.strides = cfg_.backbone.strides;
  for (int l = 0; l < 3; ++l) pyr.levels.push_back(apply(g, p, fpn_out_[l], merged[l], false));
  return pyr;
}

std::vector<Graph::Var> Detector::classification_subnet(Graph& g, const Bound& p, const FeaturePyramid& query,
                                                        Graph::Var prototypes) const {
  const int n = cfg_.subnet.n_conv_layers;
  const int fuse_at = n - cfg_.subnet.post_fusion_layers;
  std::vector<Graph::Var> out;
  for (Graph::Var level : query.levels) {
    Graph::Var x = level;
    for (int i = 0; i < n; ++i) {
      if (i == fuse_at) x = ops::channel_scale(g, x, prototypes);
      x = apply(g, p, cls_[i], x, i + 1 < n);
    }
    out.push_back(x);
  }
  return out;
}

std::vector<Graph::Var> Detector::localization_subnet(Graph& g, const Bound& p, const FeaturePyramid& query) const {
  const int n = cfg_.subnet.n_conv_layers;
  std::vector<Graph::Var> out;
  for (Graph::Var level : query.levels) {
    Graph::Var x = level;
    for (int i = 0; i < n; ++i) x = apply(g, p, loc_[i], x, i + 1 < n);
    out.push_back(x);
  }
  return out;
}

namespace {
constexpr char kMagic[8] = {'F', 'S', 'R', 'N', 'W', 'T', 'S', '1'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError("truncated weight file");
  return v;
}
}  // namespace

void Detector::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& prm : params_) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(prm.name.size()));
    os.write(prm.name.data(), static_cast<std::streamsize>(prm.name.size()));
    const Shape s = prm.value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(prm.value.data()), static_cast<std::streamsize>(prm.value.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(prm.momentum.data()),
             static_cast<std::streamsize>(prm.momentum.size() * sizeof(double)));
  }
}

void Detector::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ParseError(path.string() + ": not a weight file");
  const auto count = get<std::uint32_t>(is);
  if (count != params_.size()) throw ParseError(path.string() + ": parameter count does not match the network");
  for (auto& prm : params_) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (name != prm.name) throw ParseError(path.string() + ": expected parameter " + prm.name + ", found " + name);
    Shape s;
    s.n = get<std::int32_t>(is);
    s.c = get<std::int32_t>(is);
    s.h = get<std::int32_t>(is);
    s.w = get<std::int32_t>(is);
    if (s != prm.value.shape()) throw ParseError(path.string() + ": shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(prm.value.data()), static_cast<std::streamsize>(prm.value.size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(prm.momentum.data()),
            static_cast<std::streamsize>(prm.momentum.size() * sizeof(double)));
    if (!is) throw ParseError("truncated weight file " + path.string());
  }
}

FeaturePyramid fuse(Graph& g, const FeaturePyramid& query, Graph::Var prototypes) {
  FeaturePyramid out;
  out.strides = query.strides;
  for (Graph::Var level : query.levels) out.levels.push_back(ops::channel_scale(g, level, prototypes));
  return out;
}

PrototypeVars pool_support_prototype(Graph& g, const FeaturePyramid& support, const std::vector<int>& shot_indices,
                                     const std::vector<int>& levels) {
  if (shot_indices.empty()) throw UsageError("prototype needs at least one shot");
  if (levels.size() != shot_indices.size()) throw UsageError("one pyramid level per shot is required");
  PrototypeVars pv;
  for (std::size_t i = 0; i < shot_indices.size(); ++i) {
    if (levels[i] < 0 || levels[i] >= static_cast<int>(support.levels.size())) throw UsageError("bad pyramid level");
    Graph::Var feat = ops::take(g, support.levels[levels[i]], shot_indices[i]);
    pv.shots.push_back(ops::global_avg_pool(g, feat));
  }
  pv.prototype = ops::mean(g, pv.shots);
  return pv;
}

}  // namespace fsrn
