#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_util.hpp"

using namespace splatpatch;
using splatpatch::testing::error_kind_of;
using splatpatch::testing::random_cloud;
using splatpatch::testing::scratch_dir;

namespace {

ArchConfig tiny_arch(int k = 2) {
  ArchConfig a;
  a.split_k = k;
  a.encoder_embed = 8;
  a.encoder_blocks = {8, 12};
  a.encoder_neighbors = 4;
  a.decoder_hidden = {16, 8};
  return a;
}

SceneData tiny_scene(SceneKind kind, std::size_t points, std::size_t views, int res, std::uint64_t seed) {
  auto mesh = make_scene(kind, {}, seed);
  SceneData s;
  s.name = to_string(kind);
  s.cloud = sample_points(mesh, points, seed + 1);
  s.index = NeighborIndex(s.cloud.positions);
  s.cameras = view_sphere_cameras(views, kViewRadiusFactor * mesh.radius(), res, res);
  for (const auto& c : s.cameras) s.images.push_back(render_gt(mesh, c, s.background));
  return s;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.arch = tiny_arch();
  cfg.split_k = 2;
  cfg.views_per_step = 2;
  cfg.batch_size = 2;
  cfg.max_epochs = 3;
  cfg.lr = 1e-3;
  cfg.normal_neighbors = 8;
  cfg.patch_points = 64;
  return cfg;
}

template <typename T>
bool same_bits(const ModuleParams<T>& a, const ModuleParams<T>& b) {
  auto sa = tensor_spans(const_cast<ModuleParams<T>&>(a)), sb = tensor_spans(const_cast<ModuleParams<T>&>(b));
  if (sa.size() != sb.size()) return false;
  for (std::size_t t = 0; t < sa.size(); ++t)
    if (sa[t].size() != sb[t].size() || std::memcmp(sa[t].data(), sb[t].data(), sa[t].size_bytes()) != 0)
      return false;
  return true;
}

GaussianSet<double> numbered_set(std::size_t n, double tag) {
  GaussianSet<double> g;
  g.space = SpaceTag::World;
  for (std::size_t i = 0; i < n; ++i) {
    g.positions.emplace_back(tag, double(i), 0);
    g.scales.emplace_back(0.1, 0.1);
    g.opacities.push_back(0.5);
    g.sh.push_back(ShCoeffs<double>::Zero());
    g.normals.emplace_back(0, 0, 1);
    g.angles.push_back(0);
  }
  return g;
}

}  // namespace

TEST(Patches, WholeCloudWhenSizesMatch) {
  auto c = random_cloud(50, 1);
  NeighborIndex index(c.positions);
  for (std::uint32_t center : {0u, 17u, 49u}) {
    auto p = make_patch(index, center, 50);
    std::set<std::uint32_t> ids(p.members.begin(), p.members.end());
    EXPECT_EQ(ids.size(), 50u);
    EXPECT_EQ(p.members.front(), center);
  }
  EXPECT_EQ(error_kind_of([&] { make_patch(index, 0, 51); }), ErrorKind::InsufficientPoints);
}

TEST(Patches, SeparatedClustersAreRecovered) {
  auto a = random_cloud(30, 2), b = random_cloud(30, 3);
  PointCloud c = a;
  for (std::size_t i = 0; i < b.size(); ++i) {
    c.positions.push_back(b.positions[i] + Vec3d(100, 0, 0));
    c.colors.push_back(b.colors[i]);
  }
  NeighborIndex index(c.positions);
  for (std::uint32_t center = 0; center < 60; center += 7) {
    auto p = make_patch(index, center, 30);
    for (auto id : p.members) EXPECT_EQ(id < 30, center < 30);
  }
}

TEST(Patches, SeededExtractionRepeats) {
  auto c = random_cloud(300, 4);
  NeighborIndex index(c.positions);
  Rng r1(5), r2(5);
  EXPECT_EQ(extract_random_patch(index, 40, r1).members, extract_random_patch(index, 40, r2).members);
}

TEST(Coverage, CountsAndUnion) {
  auto c = random_cloud(64, 6);
  NeighborIndex small(c.positions);
  Rng rng(7);
  EXPECT_EQ(cover_with_patches(small, 64, rng).size(), 1u);

  auto big = random_cloud(5000, 8);
  NeighborIndex index(big.positions);
  auto patches = cover_with_patches(index, 2048, rng);
  EXPECT_GE(patches.size(), 3u);
  std::vector<char> seen(5000, 0);
  for (const auto& p : patches)
    for (auto id : p.members) seen[id] = 1;
  EXPECT_EQ(std::count(seen.begin(), seen.end(), 1), 5000);
}

TEST(Coverage, RandomCloudsAreCovered) {
  std::mt19937_64 meta(9);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 20 + meta() % 400;
    const std::size_t np = 1 + meta() % n;
    auto c = random_cloud(n, meta());
    NeighborIndex index(c.positions);
    Rng rng(meta());
    auto patches = cover_with_patches(index, np, rng);
    std::vector<char> seen(n, 0);
    for (const auto& p : patches) {
      EXPECT_EQ(p.members.size(), np);
      // Each new center was uncovered when picked.
      for (auto id : p.members) seen[id] = 1;
    }
    EXPECT_EQ(std::size_t(std::count(seen.begin(), seen.end(), 1)), n);
    EXPECT_LE(patches.size(), n);
    EXPECT_GE(patches.size() * np, n);
  }
}

TEST(Compose, ArithmeticAndOrder) {
  auto c = random_cloud(10, 10);
  NeighborIndex index(c.positions);
  auto patch = make_patch(index, 3, 4);
  auto entire = numbered_set(20, 1.0);
  auto patch_set = numbered_set(8, 2.0);
  auto out = compose_entire_patch(entire, patch_set, patch, 2);
  ASSERT_EQ(out.size(), 20u);
  std::size_t row = 0;
  for (std::size_t j = 0; j < 10; ++j) {
    if (patch.mask[j]) continue;
    for (std::size_t s = 0; s < 2; ++s) EXPECT_EQ(out.positions[row++], entire.positions[2 * j + s]);
  }
  EXPECT_EQ(row, 12u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out.positions[12 + i], patch_set.positions[i]);

  auto whole = make_patch(index, 0, 10);
  auto full_patch = numbered_set(20, 3.0);
  EXPECT_EQ(compose_entire_patch(entire, full_patch, whole, 2), full_patch);
  EXPECT_EQ(error_kind_of([&] { compose_entire_patch(entire, numbered_set(7, 2.0), patch, 2); }),
            ErrorKind::InvalidState);
}

TEST(Config, DefaultsAndTextRoundTrip) {
  TrainConfig d;
  EXPECT_EQ(d.split_k, 4);
  EXPECT_EQ(d.patch_points, 2048);
  EXPECT_EQ(d.beta, 0.8);
  EXPECT_EQ(d.views_per_step, 8);
  EXPECT_EQ(d.lr, 1e-4);
  EXPECT_EQ(d.resolved_arch().split_k, 4);
  EXPECT_EQ(d.resolved_arch().encoder_blocks.back(), 640);

  auto cfg = parse_train_config("# desk run\nsplit_k = 2\nlr = 0.003\ndecoder_hidden = 32,16\nbackground = 0 0.5 1\n");
  EXPECT_EQ(cfg.split_k, 2);
  EXPECT_EQ(cfg.lr, 0.003);
  EXPECT_EQ(cfg.arch.decoder_hidden, (std::vector<int>{32, 16}));
  ASSERT_TRUE(cfg.background.has_value());
  EXPECT_EQ(*cfg.background, Vec3d(0, 0.5, 1));
  auto again = parse_train_config(format_train_config(cfg));
  EXPECT_EQ(format_train_config(again), format_train_config(cfg));
  EXPECT_EQ(again.resolved_arch(), cfg.resolved_arch());
  EXPECT_EQ(error_kind_of([] { parse_train_config("bogus = 1\n"); }), ErrorKind::FormatError);
  EXPECT_EQ(error_kind_of([] { parse_train_config("split_k = many\n"); }), ErrorKind::FormatError);
}

TEST(Views, SampledWithoutReplacement) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    auto v = sample_views(16, 8, rng);
    std::set<std::size_t> s(v.begin(), v.end());
    EXPECT_EQ(s.size(), 8u);
    EXPECT_LT(*s.rbegin(), 16u);
  }
  EXPECT_EQ(sample_views(3, 8, rng).size(), 3u);
}

TEST(TrainEntire, ZeroLearningRateKeepsParameters) {
  std::vector<SceneData> scenes = {tiny_scene(SceneKind::Cube, 120, 2, 16, 12)};
  auto cfg = tiny_config();
  cfg.lr = 0;
  auto start = make_module<float>(cfg.resolved_arch(), 13);
  auto res = train_entire<float>(scenes, cfg, start);
  EXPECT_TRUE(same_bits(res.params, start));
  ASSERT_EQ(res.history.size(), 3u);
  for (const auto& r : res.history) EXPECT_EQ(r.loss, res.history[0].loss);
}

TEST(TrainEntire, SeededRunsRepeatAndLogsAreWritten) {
  auto dir = scratch_dir("train_entire");
  std::vector<SceneData> scenes = {tiny_scene(SceneKind::Cube, 120, 4, 16, 14),
                                   tiny_scene(SceneKind::Sphere, 150, 4, 16, 15)};
  auto cfg = tiny_config();
  cfg.seed = 3;
  cfg.loss_log = (dir / "loss.csv").string();
  cfg.checkpoint_prefix = (dir / "ne").string();
  auto a = train_entire<float>(scenes, cfg);
  cfg.loss_log.clear();
  cfg.checkpoint_prefix.clear();
  auto b = train_entire<float>(scenes, cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].loss, b.history[i].loss);
  EXPECT_TRUE(same_bits(a.params, b.params));
  EXPECT_EQ(a.rng_state, b.rng_state);
  EXPECT_EQ(a.steps, 3u);

  std::ifstream log(dir / "loss.csv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,step,loss,skipped");
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_EQ(lines, 3);
  auto last = load_module_checkpoint<float>(dir / "ne_last.ckpt");
  EXPECT_TRUE(same_bits(last.params, a.params));
  EXPECT_EQ(last.step, 3u);
  EXPECT_TRUE(fs::exists(dir / "ne_best.ckpt"));
}

TEST(TrainEntire, NonFiniteLossSkipsTheStep) {
  auto scene = tiny_scene(SceneKind::Cube, 120, 2, 16, 16);
  for (auto& img : scene.images) img.rgb[5] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = tiny_config();
  cfg.max_epochs = 2;
  auto start = make_module<float>(cfg.resolved_arch(), 17);
  auto res = train_entire<float>({scene}, cfg, start);
  EXPECT_EQ(res.skipped, 2u);
  EXPECT_TRUE(same_bits(res.params, start));
}

TEST(TrainEntire, BudgetStopsEarly) {
  std::vector<SceneData> scenes = {tiny_scene(SceneKind::Cube, 120, 2, 16, 18)};
  auto cfg = tiny_config();
  cfg.max_epochs = 1000;
  cfg.max_steps = 4;
  EXPECT_EQ(train_entire<float>(scenes, cfg).steps, 4u);
}

TEST(TrainPatch, EntireModuleStaysFrozen) {
  std::vector<SceneData> scenes = {tiny_scene(SceneKind::Cube, 200, 4, 16, 19)};
  auto cfg = tiny_config();
  const auto entire = make_module<float>(cfg.resolved_arch(), 20);
  const auto copy = entire;
  auto res = train_patch<float>(scenes, entire, cfg);
  EXPECT_TRUE(same_bits(entire, copy));
  EXPECT_FALSE(same_bits(res.params, make_module<float>(cfg.resolved_arch(), cfg.seed ^ 0x9a7c4ULL)));
  auto mismatched = make_module<float>(tiny_arch(3), 20);
  EXPECT_EQ(error_kind_of([&] { train_patch<float>(scenes, mismatched, cfg); }), ErrorKind::InvalidArgument);
}

TEST(TrainPatch, WholeCloudPatchMatchesEntireTraining) {
  // One view, one scene and N_p = N: the patch step sees the same problem as
  // an entire-module step, only with the points in neighbor order.
  std::vector<SceneData> scenes = {tiny_scene(SceneKind::Sphere, 64, 1, 16, 21)};
  auto cfg = tiny_config();
  cfg.views_per_step = 1;
  cfg.batch_size = 1;
  cfg.max_epochs = 1;
  cfg.patch_points = 64;
  auto start = make_module<double>(cfg.resolved_arch(), 22);
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (auto& head : start.decoders.heads)
    for (Eigen::Index i = 0; i < head.layers.back().weight.size(); ++i) head.layers.back().weight.data()[i] = u(rng);
  const auto frozen = make_module<double>(cfg.resolved_arch(), 24);
  auto via_patch = train_patch<double>(scenes, frozen, cfg, start);
  auto via_entire = train_entire<double>(scenes, cfg, start);
  EXPECT_NEAR(via_patch.history[0].loss, via_entire.history[0].loss, 1e-9);
  auto sa = tensor_spans(via_patch.params), sb = tensor_spans(via_entire.params);
  for (std::size_t t = 0; t < sa.size(); ++t)
    for (std::size_t i = 0; i < sa[t].size(); ++i) EXPECT_NEAR(sa[t][i], sb[t][i], 1e-9);
}

TEST(Inference, SizesPurityAndFallback) {
  auto scene = tiny_scene(SceneKind::Cube, 300, 2, 16, 25);
  auto params = make_module<float>(tiny_arch(3), 26);
  auto e = infer_entire(params, scene.cloud, scene.cameras, {}, 8);
  EXPECT_EQ(e.gaussians.size(), 900u);
  EXPECT_EQ(infer_entire(params, scene.cloud, scene.cameras, {}, 8).images, e.images);

  auto p = infer_patchwise(params, scene.cloud, scene.cameras, 100, 27, {}, true, 8);
  EXPECT_FALSE(p.fell_back);
  EXPECT_EQ(p.gaussians.size(), 3 * 100 * p.patch_count);
  EXPECT_GE(p.gaussians.size(), 900u);
  EXPECT_EQ(infer_patchwise(params, scene.cloud, scene.cameras, 100, 27, {}, true, 8).images, p.images);

  auto whole = infer_patchwise(params, scene.cloud, scene.cameras, 300, 28, {}, true, 8);
  EXPECT_EQ(whole.patch_count, 1u);
  EXPECT_EQ(whole.gaussians.size(), 900u);

  std::vector<std::string> messages;
  auto small = infer_patchwise(params, scene.cloud, scene.cameras, 400, 29, {}, true, 8,
                               [&](const std::string& m) { messages.push_back(m); });
  EXPECT_TRUE(small.fell_back);
  EXPECT_EQ(small.images, e.images);
  EXPECT_EQ(messages.size(), 1u);
}
