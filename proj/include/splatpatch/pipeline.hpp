#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "splatpatch/camera.hpp"
#include "splatpatch/error.hpp"
#include "splatpatch/gaussians.hpp"
#include "splatpatch/geometry.hpp"
#include "splatpatch/image.hpp"
#include "splatpatch/io.hpp"
#include "splatpatch/metrics.hpp"
#include "splatpatch/network.hpp"
#include "splatpatch/rasterizer.hpp"

namespace splatpatch {

using Rng = std::mt19937_64;

inline std::string rng_state(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

inline void restore_rng(Rng& rng, const std::string& state) {
  std::istringstream s(state);
  s >> rng;
  require(!s.fail(), ErrorKind::FormatError, "corrupt rng state");
}

/// Optional progress messages; the library never prints on its own.
using LogSink = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Patches

struct Patch {
  std::uint32_t center = 0;
  std::vector<std::uint32_t> members;  // nearest-first, center included
  std::vector<char> mask;              // over the whole cloud
};

/// The n_p nearest points (inclusive) around a given center.
inline Patch make_patch(const NeighborIndex& index, std::uint32_t center, std::size_t n_p) {
  require(index.size() >= n_p, ErrorKind::InsufficientPoints,
          "patch needs " + std::to_string(n_p) + " points, cloud has " + std::to_string(index.size()));
  require(n_p >= 1, ErrorKind::InvalidArgument, "patch size must be >= 1");
  Patch p;
  p.center = center;
  p.members = index.k_nearest(index.points()[center], n_p).indices;
  if (std::find(p.members.begin(), p.members.end(), center) == p.members.end()) {
    // Duplicated positions can push the center itself past the k-th slot.
    p.members.back() = center;
  }
  p.mask.assign(index.size(), 0);
  for (auto id : p.members) p.mask[id] = 1;
  return p;
}

inline Patch extract_random_patch(const NeighborIndex& index, std::size_t n_p, Rng& rng) {
  require(index.size() >= n_p, ErrorKind::InsufficientPoints,
          "patch needs " + std::to_string(n_p) + " points, cloud has " + std::to_string(index.size()));
  std::uniform_int_distribution<std::size_t> pick(0, index.size() - 1);
  return make_patch(index, static_cast<std::uint32_t>(pick(rng)), n_p);
}

/// Random uncovered centers until every point lies in at least one patch.
inline std::vector<Patch> cover_with_patches(const NeighborIndex& index, std::size_t n_p, Rng& rng) {
  require(index.size() >= n_p, ErrorKind::InsufficientPoints,
          "patch needs " + std::to_string(n_p) + " points, cloud has " + std::to_string(index.size()));
  std::vector<std::uint32_t> remaining(index.size());
  std::iota(remaining.begin(), remaining.end(), 0u);
  std::vector<Patch> patches;
  while (!remaining.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, remaining.size() - 1);
    patches.push_back(make_patch(index, remaining[pick(rng)], n_p));
    const auto& mask = patches.back().mask;
    std::erase_if(remaining, [&](std::uint32_t id) { return mask[id] != 0; });
  }
  return patches;
}

/// Background rows of the entire prediction whose source point lies outside
/// the patch, followed by every row of the patch prediction.
template <typename T>
GaussianSet<T> compose_entire_patch(const GaussianSet<T>& entire, const GaussianSet<T>& patch_set, const Patch& patch,
                                    int k) {
  const std::size_t n = patch.mask.size();
  require(entire.size() == n * k, ErrorKind::InvalidState,
          "entire prediction has " + std::to_string(entire.size()) + " rows, expected K*N = " + std::to_string(n * k));
  require(patch_set.size() == patch.members.size() * k, ErrorKind::InvalidState,
          "patch prediction has " + std::to_string(patch_set.size()) + " rows, expected K*N_p = " +
              std::to_string(patch.members.size() * k));
  require(entire.space == patch_set.space, ErrorKind::InvalidState,
          "cannot compose " + to_string(entire.space) + " and " + to_string(patch_set.space) + " sets");
  GaussianSet<T> out;
  out.space = entire.space;
  out.reserve(n * k);
  for (std::size_t j = 0; j < n; ++j)
    if (!patch.mask[j])
      for (int s = 0; s < k; ++s) out.push_back_from(entire, j * k + s);
  for (std::size_t i = 0; i < patch_set.size(); ++i) out.push_back_from(patch_set, i);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int split_k = 4;
  int patch_points = 2048;
  double beta = 0.8;
  int views_per_step = 8;
  double lr = 1e-4;
  int batch_size = 8;
  int max_epochs = 480;
  int resolution = 0;  // 0 keeps the manifest resolution
  std::uint64_t seed = 0;
  std::optional<Vec3d> background;  // overrides the manifest background when set
  ArchConfig arch;
  int normal_neighbors = 16;
  bool patch_own_transform = true;
  std::uint64_t max_steps = 0;  // 0 = no limit beyond max_epochs
  double max_seconds = 0;       // 0 = no wall-clock budget
  std::string checkpoint_prefix;  // "<prefix>_last.ckpt" per epoch, "<prefix>_best.ckpt"
  std::string loss_log;           // CSV path

  ArchConfig resolved_arch() const {
    ArchConfig a = arch;
    a.split_k = split_k;
    return a;
  }

  void validate() const {
    require(split_k >= 1 && patch_points >= 1 && views_per_step >= 1 && batch_size >= 1 && max_epochs >= 1,
            ErrorKind::InvalidArgument, "counts in the training config must be positive");
    require(beta >= 0 && beta <= 1, ErrorKind::InvalidArgument, "beta must lie in [0,1]");
    require(lr >= 0 && std::isfinite(lr), ErrorKind::InvalidArgument, "learning rate must be finite and >= 0");
    require(resolution >= 0, ErrorKind::InvalidArgument, "resolution must be >= 0");
    require(normal_neighbors >= 3, ErrorKind::InvalidArgument, "normal estimation needs k >= 3");
    resolved_arch().validate();
  }
};

/// key = value lines; unknown keys are rejected. Lists are comma separated.
inline TrainConfig parse_train_config(const std::string& text, TrainConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto ints = [](const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    require(eq != std::string::npos, ErrorKind::FormatError, where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      if (key == "split_k") cfg.split_k = std::stoi(value);
      else if (key == "patch_points") cfg.patch_points = std::stoi(value);
      else if (key == "beta") cfg.beta = std::stod(value);
      else if (key == "views_per_step") cfg.views_per_step = std::stoi(value);
      else if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "max_epochs") cfg.max_epochs = std::stoi(value);
      else if (key == "resolution") cfg.resolution = std::stoi(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "background") {
        std::istringstream vs(value);
        Vec3d b;
        vs >> b.x() >> b.y() >> b.z();
        require(!vs.fail(), ErrorKind::FormatError, where + ": background needs 3 numbers");
        cfg.background = b;
      } else if (key == "encoder_embed") cfg.arch.encoder_embed = std::stoi(value);
      else if (key == "encoder_blocks") cfg.arch.encoder_blocks = ints(value);
      else if (key == "encoder_neighbors") cfg.arch.encoder_neighbors = std::stoi(value);
      else if (key == "decoder_hidden") cfg.arch.decoder_hidden = ints(value);
      else if (key == "normal_neighbors") cfg.normal_neighbors = std::stoi(value);
      else if (key == "patch_own_transform") cfg.patch_own_transform = value == "1" || value == "true";
      else if (key == "max_steps") cfg.max_steps = std::stoull(value);
      else if (key == "max_seconds") cfg.max_seconds = std::stod(value);
      else if (key == "checkpoint_prefix") cfg.checkpoint_prefix = value;
      else if (key == "loss_log") cfg.loss_log = value;
      else fail(ErrorKind::FormatError, where + ": unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      fail(ErrorKind::FormatError, where + ": bad value for '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

inline std::string format_train_config(const TrainConfig& cfg) {
  auto list = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  std::ostringstream o;
  o << "split_k = " << cfg.split_k << "\npatch_points = " << cfg.patch_points << "\nbeta = " << cfg.beta
    << "\nviews_per_step = " << cfg.views_per_step << "\nlr = " << cfg.lr << "\nbatch_size = " << cfg.batch_size
    << "\nmax_epochs = " << cfg.max_epochs << "\nresolution = " << cfg.resolution << "\nseed = " << cfg.seed;
  if (cfg.background)
    o << "\nbackground = " << cfg.background->x() << ' ' << cfg.background->y() << ' ' << cfg.background->z();
  o << "\nencoder_embed = " << cfg.arch.encoder_embed << "\nencoder_blocks = " << list(cfg.arch.encoder_blocks)
    << "\nencoder_neighbors = " << cfg.arch.encoder_neighbors << "\ndecoder_hidden = "
    << list(cfg.arch.decoder_hidden) << "\nnormal_neighbors = " << cfg.normal_neighbors
    << "\npatch_own_transform = " << (cfg.patch_own_transform ? 1 : 0) << "\nmax_steps = " << cfg.max_steps
    << "\nmax_seconds = " << cfg.max_seconds << "\ncheckpoint_prefix = " << cfg.checkpoint_prefix
    << "\nloss_log = " << cfg.loss_log << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Per-cloud preparation

/// A cloud ready for prediction: normalized, with normals, initialized.
template <typename T>
struct PreparedCloud {
  NormalizationTransform transform;
  PointCloud normalized;
  GaussianSet<T> init;
  NeighborTable neighbors;  // encoder neighborhoods
};

/// Normalize, estimate normals (unless present), initialize and build the
/// encoder neighborhoods.
template <typename T>
PreparedCloud<T> prepare_cloud(const PointCloud& cloud, int encoder_neighbors, int normal_neighbors) {
  cloud.validate();
  require(cloud.size() >= 2, ErrorKind::InsufficientPoints, "a cloud needs at least 2 points");
  PreparedCloud<T> pc;
  std::tie(pc.normalized, pc.transform) = normalize_cloud(cloud);
  const NeighborIndex index(pc.normalized.positions);
  if (!pc.normalized.has_normals())
    pc.normalized.normals = estimate_normals(pc.normalized, index,
                                             std::min<std::size_t>(normal_neighbors, pc.normalized.size()));
  pc.init = initialize_gaussians<T>(pc.normalized, min_neighbor_distance(pc.normalized, index));
  pc.neighbors = neighbor_table(index, static_cast<std::size_t>(encoder_neighbors));
  return pc;
}

/// Prepares the sub-cloud of a patch. With own_transform the patch is
/// normalized on its own; otherwise it keeps the parent's normalized frame
/// and normals.
template <typename T>
PreparedCloud<T> prepare_patch(const PointCloud& world_cloud, const PreparedCloud<T>& parent, const Patch& patch,
                               bool own_transform, int encoder_neighbors, int normal_neighbors) {
  if (own_transform) return prepare_cloud<T>(world_cloud.subset(patch.members), encoder_neighbors, normal_neighbors);
  PreparedCloud<T> pc;
  pc.transform = parent.transform;
  pc.normalized = parent.normalized.subset(patch.members);
  const NeighborIndex index(pc.normalized.positions);
  pc.init = initialize_gaussians<T>(pc.normalized, min_neighbor_distance(pc.normalized, index));
  pc.neighbors = neighbor_table(index, static_cast<std::size_t>(encoder_neighbors));
  return pc;
}

/// Chain rule through denormalize_gaussians (positions and scales scale).
template <typename T>
void denormalize_backward(GaussianGradients<T>& grads, const NormalizationTransform& t) {
  const T s = static_cast<T>(t.scale);
  for (auto& p : grads.positions) p *= s;
  for (auto& v : grads.scales) v *= s;
}

/// Rows [first, first + count) of a gradient set.
template <typename T>
GaussianGradients<T> slice_gradients(const GaussianGradients<T>& g, std::size_t first, std::size_t count) {
  GaussianGradients<T> out;
  auto cut = [&](const auto& src, auto& dst) {
    dst.assign(src.begin() + static_cast<std::ptrdiff_t>(first),
               src.begin() + static_cast<std::ptrdiff_t>(first + count));
  };
  cut(g.positions, out.positions);
  cut(g.scales, out.scales);
  cut(g.opacities, out.opacities);
  cut(g.sh, out.sh);
  cut(g.normals, out.normals);
  cut(g.angles, out.angles);
  return out;
}

// ---------------------------------------------------------------------------
// Scenes

struct SceneData {
  std::string name;
  PointCloud cloud;  // world space
  NeighborIndex index;  // over world positions, used for patches
  std::vector<Camera> cameras;
  std::vector<ImageBuffer<float>> images;
  Vec3d background = Vec3d::Ones();
};

/// Box-averages an image by an integer factor.
template <typename T>
ImageBuffer<T> downsample(const ImageBuffer<T>& img, int factor) {
  if (factor == 1) return img;
  ImageBuffer<T> out(img.width / factor, img.height / factor);
  const T inv = T(1) / T(factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) {
        T acc = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += img.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = acc * inv;
      }
  return out;
}

inline Camera scale_camera(Camera cam, int factor) {
  if (factor == 1) return cam;
  cam.intrinsics.row(0) /= factor;
  cam.intrinsics.row(1) /= factor;
  cam.width /= factor;
  cam.height /= factor;
  return cam;
}

/// Loads cloud, cameras and images of a manifest. A positive resolution must
/// divide the manifest width; images are box-downsampled to it.
inline SceneData load_scene(const fs::path& manifest_path, int resolution = 0) {
  const SceneManifest m = load_manifest(manifest_path);
  SceneData s;
  s.name = manifest_path.parent_path().filename().string();
  if (s.name.empty()) s.name = manifest_path.stem().string();
  s.cloud = read_ply(m.cloud);
  s.index = NeighborIndex(s.cloud.positions);
  s.background = m.background;
  int factor = 1;
  if (resolution > 0 && resolution != m.width) {
    require(m.width % resolution == 0 && m.height % (m.width / resolution) == 0, ErrorKind::InvalidArgument,
            manifest_path.string() + ": resolution " + std::to_string(resolution) + " does not divide " +
                std::to_string(m.width));
    factor = m.width / resolution;
  }
  for (std::size_t i = 0; i < m.views.size(); ++i) {
    auto img = read_image<float>(m.views[i].image);
    require(img.width == m.width && img.height == m.height, ErrorKind::ShapeError,
            manifest_path.string() + ": view " + std::to_string(i) + " image is " + std::to_string(img.width) +
                "x" + std::to_string(img.height) + ", manifest says " + std::to_string(m.width) + "x" +
                std::to_string(m.height));
    s.images.push_back(downsample(img, factor));
    s.cameras.push_back(scale_camera(m.camera(i), factor));
  }
  return s;
}

/// Every scene_*/manifest.txt below a dataset directory, sorted by path.
inline std::vector<fs::path> find_manifests(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::MissingFile, dir.string() + ": dataset directory not found");
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "manifest.txt") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  require(!out.empty(), ErrorKind::MissingFile, dir.string() + ": no manifest.txt found");
  return out;
}

// ---------------------------------------------------------------------------
// Loss evaluation

template <typename T>
struct RenderLoss {
  double loss = 0;
  std::vector<double> psnr;
  GaussianGradients<T> grads;  // empty unless requested
};

/// Combined loss of a world-space set over the listed views, optionally with
/// its gradient. Views are processed in list order.
template <typename T>
RenderLoss<T> render_loss(const GaussianSet<T>& world, const SceneData& scene, const std::vector<std::size_t>& views,
                          double beta, const RenderOptions& opts, bool with_grad) {
  std::vector<ImageBuffer<T>> preds, gts;
  for (auto v : views) {
    preds.push_back(render(world, scene.cameras[v], opts));
    gts.push_back(scene.images[v].template cast<T>());
  }
  const auto loss = combined_loss(preds, gts, beta);
  RenderLoss<T> out;
  out.loss = double(loss.total);
  for (std::size_t i = 0; i < views.size(); ++i) out.psnr.push_back(psnr(preds[i], gts[i]));
  if (with_grad && std::isfinite(out.loss)) {
    out.grads = GaussianGradients<T>(world.size());
    for (std::size_t i = 0; i < views.size(); ++i)
      out.grads += render_backward(world, scene.cameras[views[i]], opts, loss.views[i].dL_dimage);
  }
  return out;
}

inline std::vector<std::size_t> sample_views(std::size_t available, std::size_t count, Rng& rng) {
  std::vector<std::size_t> ids(available);
  std::iota(ids.begin(), ids.end(), std::size_t(0));
  count = std::min(count, available);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, available - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(count);
  return ids;
}

template <typename T>
void scale_params(ModuleParams<T>& p, T factor) {
  visit_tensors(p, [&](auto& t) { t *= factor; });
}

template <typename T>
void add_params(ModuleParams<T>& dst, const ModuleParams<T>& src) {
  auto d = tensor_spans(dst);
  auto s = tensor_spans(const_cast<ModuleParams<T>&>(src));
  for (std::size_t t = 0; t < d.size(); ++t)
    for (std::size_t i = 0; i < d[t].size(); ++i) d[t][i] += s[t][i];
}

template <typename T>
bool params_finite(const ModuleParams<T>& p) {
  bool ok = true;
  visit_tensors(p, [&](const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

// ---------------------------------------------------------------------------
// Training

struct TrainRecord {
  int epoch;
  std::uint64_t step;
  double loss;
  bool skipped;
};

template <typename T>
struct TrainResult {
  ModuleParams<T> params;
  std::vector<TrainRecord> history;
  std::uint64_t steps = 0;
  std::uint64_t skipped = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::string rng_state;
};

namespace detail {

class LossLog {
 public:
  explicit LossLog(const std::string& path) {
    if (path.empty()) return;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    out_.open(path, std::ios::trunc);
    require(static_cast<bool>(out_), ErrorKind::IoError, path + ": cannot open loss log");
    out_ << "epoch,step,loss,skipped\n";
  }
  void add(const TrainRecord& r) {
    if (!out_.is_open()) return;
    out_ << r.epoch << ',' << r.step << ',' << std::setprecision(9) << r.loss << ',' << (r.skipped ? 1 : 0) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Shared epoch/batch driver. step_fn(scene ids, rng) returns the batch
/// loss and fills grads; returns false when the step must be skipped.
template <typename T, class StepFn>
TrainResult<T> run_training(ModuleParams<T> params, std::size_t scene_count, const TrainConfig& cfg, Rng& rng,
                            StepFn&& step_fn, const LogSink& log) {
  TrainResult<T> res;
  AdamState<T> adam(params, cfg.lr);
  detail::LossLog loss_log(cfg.loss_log);
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(scene_count);
  std::iota(order.begin(), order.end(), std::size_t(0));
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, scene_count);
  bool stop = false;
  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t first = 0; first < scene_count && !stop; first += batch) {
      const auto last = std::min(first + batch, scene_count);
      const std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(first),
                                         order.begin() + static_cast<std::ptrdiff_t>(last));
      ModuleParams<T> grads = zeros_like(params);
      double loss = 0;
      bool ok = step_fn(params, ids, rng, grads, loss);
      if (ok) {
        try {
          adam_step(adam, params, grads);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::NonFiniteGradient) throw;
          ok = false;
        }
      }
      const TrainRecord rec{epoch, res.steps, loss, !ok};
      res.history.push_back(rec);
      loss_log.add(rec);
      if (!ok) {
        ++res.skipped;
        if (log) log("step " + std::to_string(res.steps) + ": non-finite loss or gradient, step skipped");
      } else {
        epoch_loss += loss;
        ++epoch_steps;
      }
      ++res.steps;
      if (cfg.max_steps && res.steps >= cfg.max_steps) stop = true;
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (cfg.max_seconds > 0 && elapsed >= cfg.max_seconds) stop = true;
    }
    const double mean = epoch_steps ? epoch_loss / double(epoch_steps) : std::numeric_limits<double>::quiet_NaN();
    if (log) log("epoch " + std::to_string(epoch) + " mean loss " + std::to_string(mean));
    if (!cfg.checkpoint_prefix.empty()) {
      ModuleCheckpoint<T> ck{params, rng_state(rng), res.steps};
      save_checkpoint(ck, cfg.checkpoint_prefix + "_last.ckpt");
      if (epoch_steps && mean < res.best_loss) save_checkpoint(ck, cfg.checkpoint_prefix + "_best.ckpt");
    }
    if (epoch_steps && mean < res.best_loss) res.best_loss = mean;
  }
  res.params = std::move(params);
  res.rng_state = rng_state(rng);
  return res;
}

}  // namespace detail

/// Trains the entire-cloud module. Each step takes a batch of scenes and
/// N_c random views per scene; gradients are averaged over the batch in
/// batch order.
template <typename T = float>
TrainResult<T> train_entire(const std::vector<SceneData>& scenes, const TrainConfig& cfg,
                            std::optional<ModuleParams<T>> start = std::nullopt, const LogSink& log = {}) {
  cfg.validate();
  require(!scenes.empty(), ErrorKind::EmptyInput, "training needs at least one scene");
  const ArchConfig arch = cfg.resolved_arch();
  ModuleParams<T> params = start ? *start : make_module<T>(arch, cfg.seed);
  require(params.arch == arch, ErrorKind::InvalidArgument, "initial parameters do not match the configuration");
  std::vector<PreparedCloud<T>> prepared;
  for (const auto& s : scenes) {
    require(s.images.size() >= std::size_t(cfg.views_per_step), ErrorKind::InvalidArgument,
            "scene " + s.name + " has fewer than N_c views");
    try {
      prepared.push_back(prepare_cloud<T>(s.cloud, arch.encoder_neighbors, cfg.normal_neighbors));
    } catch (const Error& e) {
      fail(e.kind(), "scene " + s.name + ": " + e.what());
    }
  }
  Rng rng(cfg.seed ^ 0x5eedULL);
  auto step = [&](const ModuleParams<T>& p, const std::vector<std::size_t>& ids, Rng& r, ModuleParams<T>& grads,
                  double& loss) {
    const T inv = T(1) / T(ids.size());
    loss = 0;
    for (auto id : ids) {
      const auto& scene = scenes[id];
      const auto& pc = prepared[id];
      RenderOptions opts;
      opts.background = cfg.background.value_or(scene.background);
      const auto views = sample_views(scene.images.size(), cfg.views_per_step, r);
      const auto pred = predict_with_cache(p, pc.init, pc.neighbors);
      const auto world = denormalize_gaussians(pred.gaussians, pc.transform);
      auto rl = render_loss(world, scene, views, cfg.beta, opts, true);
      if (!std::isfinite(rl.loss) || !rl.grads.all_finite()) {
        loss = rl.loss;
        return false;
      }
      denormalize_backward(rl.grads, pc.transform);
      auto mg = backward(p, pc.init, pred, rl.grads);
      scale_params(mg.params, inv);
      add_params(grads, mg.params);
      loss += rl.loss / double(ids.size());
    }
    return true;
  };
  return detail::run_training(std::move(params), scenes.size(), cfg, rng, step, log);
}

/// Cached frozen-module prediction of a whole scene in world space.
template <typename T>
struct EntireCache {
  PreparedCloud<T> prepared;
  GaussianSet<T> world;
};

template <typename T>
EntireCache<T> entire_prediction(const ModuleParams<T>& entire, const PointCloud& cloud, int normal_neighbors) {
  EntireCache<T> c;
  c.prepared = prepare_cloud<T>(cloud, entire.arch.encoder_neighbors, normal_neighbors);
  c.world = denormalize_gaussians(predict_gaussians(entire, c.prepared.init, c.prepared.neighbors),
                                  c.prepared.transform);
  return c;
}

/// Trains the patch module against a frozen entire module whose prediction
/// supplies the background outside each random patch. The frozen module's
/// prediction is a pure function of the scene, so it is computed once per
/// scene.
template <typename T = float>
TrainResult<T> train_patch(const std::vector<SceneData>& scenes, const ModuleParams<T>& frozen_entire,
                           const TrainConfig& cfg, std::optional<ModuleParams<T>> start = std::nullopt,
                           const LogSink& log = {}) {
  cfg.validate();
  require(!scenes.empty(), ErrorKind::EmptyInput, "training needs at least one scene");
  const ArchConfig arch = cfg.resolved_arch();
  require(frozen_entire.arch == arch, ErrorKind::InvalidArgument,
          "entire and patch modules must share the architecture");
  ModuleParams<T> params = start ? *start : make_module<T>(arch, cfg.seed ^ 0x9a7c4ULL);
  require(params.arch == arch, ErrorKind::InvalidArgument, "initial parameters do not match the configuration");
  std::vector<EntireCache<T>> background;
  for (const auto& s : scenes) {
    require(s.images.size() >= std::size_t(cfg.views_per_step), ErrorKind::InvalidArgument,
            "scene " + s.name + " has fewer than N_c views");
    require(s.cloud.size() >= std::size_t(cfg.patch_points), ErrorKind::InsufficientPoints,
            "scene " + s.name + " has fewer than N_p points");
    try {
      background.push_back(entire_prediction(frozen_entire, s.cloud, cfg.normal_neighbors));
    } catch (const Error& e) {
      fail(e.kind(), "scene " + s.name + ": " + e.what());
    }
  }
  Rng rng(cfg.seed ^ 0xbadc0ffeULL);
  const int k = arch.split_k;
  auto step = [&](const ModuleParams<T>& p, const std::vector<std::size_t>& ids, Rng& r, ModuleParams<T>& grads,
                  double& loss) {
    const T inv = T(1) / T(ids.size());
    loss = 0;
    for (auto id : ids) {
      const auto& scene = scenes[id];
      RenderOptions opts;
      opts.background = cfg.background.value_or(scene.background);
      const Patch patch = extract_random_patch(scene.index, std::size_t(cfg.patch_points), r);
      const auto views = sample_views(scene.images.size(), cfg.views_per_step, r);
      const auto pc = prepare_patch<T>(scene.cloud, background[id].prepared, patch, cfg.patch_own_transform,
                                       arch.encoder_neighbors, cfg.normal_neighbors);
      const auto pred = predict_with_cache(p, pc.init, pc.neighbors);
      const auto patch_world = denormalize_gaussians(pred.gaussians, pc.transform);
      const auto composed = compose_entire_patch(background[id].world, patch_world, patch, k);
      auto rl = render_loss(composed, scene, views, cfg.beta, opts, true);
      if (!std::isfinite(rl.loss) || !rl.grads.all_finite()) {
        loss = rl.loss;
        return false;
      }
      // Background rows come first and carry no parameters of this module.
      auto patch_grads = slice_gradients(rl.grads, composed.size() - patch_world.size(), patch_world.size());
      denormalize_backward(patch_grads, pc.transform);
      auto mg = backward(p, pc.init, pred, patch_grads);
      scale_params(mg.params, inv);
      add_params(grads, mg.params);
      loss += rl.loss / double(ids.size());
    }
    return true;
  };
  return detail::run_training(std::move(params), scenes.size(), cfg, rng, step, log);
}

// ---------------------------------------------------------------------------
// Inference

template <typename T>
struct Inference {
  GaussianSet<T> gaussians;  // world space
  std::vector<ImageBuffer<T>> images;
  std::size_t patch_count = 0;
  bool fell_back = false;
};

template <typename T>
std::vector<ImageBuffer<T>> render_all(const GaussianSet<T>& world, const std::vector<Camera>& cams,
                                       const RenderOptions& opts) {
  std::vector<ImageBuffer<T>> out;
  for (const auto& c : cams) out.push_back(render(world, c, opts));
  return out;
}

template <typename T>
Inference<T> infer_entire(const ModuleParams<T>& params, const PointCloud& cloud, const std::vector<Camera>& cams,
                          const RenderOptions& opts = {}, int normal_neighbors = 16) {
  Inference<T> out;
  out.gaussians = entire_prediction(params, cloud, normal_neighbors).world;
  out.images = render_all(out.gaussians, cams, opts);
  return out;
}

/// Covers the cloud with patches, predicts each with the patch module in its
/// own normalized frame, and concatenates the world-space outputs. Clouds
/// smaller than one patch fall back to a single whole-cloud pass.
template <typename T>
Inference<T> infer_patchwise(const ModuleParams<T>& patch_params, const PointCloud& cloud,
                             const std::vector<Camera>& cams, std::size_t n_p, std::uint64_t seed,
                             const RenderOptions& opts = {}, bool own_transform = true, int normal_neighbors = 16,
                             const LogSink& log = {}) {
  if (cloud.size() < n_p) {
    if (log)
      log("cloud has " + std::to_string(cloud.size()) + " points, fewer than N_p = " + std::to_string(n_p) +
          "; running the patch module on the whole cloud");
    auto out = infer_entire(patch_params, cloud, cams, opts, normal_neighbors);
    out.fell_back = true;
    out.patch_count = 1;
    return out;
  }
  const NeighborIndex index(cloud.positions);
  Rng rng(seed);
  const auto patches = cover_with_patches(index, n_p, rng);
  std::optional<PreparedCloud<T>> parent;
  if (!own_transform) parent = prepare_cloud<T>(cloud, patch_params.arch.encoder_neighbors, normal_neighbors);
  Inference<T> out;
  out.gaussians.space = SpaceTag::World;
  out.patch_count = patches.size();
  for (const auto& patch : patches) {
    const auto pc = own_transform
                        ? prepare_cloud<T>(cloud.subset(patch.members), patch_params.arch.encoder_neighbors,
                                           normal_neighbors)
                        : prepare_patch<T>(cloud, *parent, patch, false, patch_params.arch.encoder_neighbors,
                                           normal_neighbors);
    const auto world =
        denormalize_gaussians(predict_gaussians(patch_params, pc.init, pc.neighbors), pc.transform);
    for (std::size_t i = 0; i < world.size(); ++i) out.gaussians.push_back_from(world, i);
  }
  out.images = render_all(out.gaussians, cams, opts);
  return out;
}

/// Mean PSNR of rendered images against references.
template <typename T>
double mean_psnr(const std::vector<ImageBuffer<T>>& preds, const std::vector<ImageBuffer<float>>& gts) {
  require(preds.size() == gts.size() && !preds.empty(), ErrorKind::InvalidArgument, "image counts differ");
  double sum = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) sum += psnr(preds[i], gts[i].template cast<T>());
  return sum / double(preds.size());
}

}  // namespace splatpatch
