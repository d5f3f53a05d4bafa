#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace splatpatch;
using splatpatch::testing::error_kind_of;
using splatpatch::testing::random_cloud;

namespace {

ArchConfig tiny_arch(int k = 2) {
  ArchConfig a;
  a.split_k = k;
  a.encoder_embed = 8;
  a.encoder_blocks = {8, 12};
  a.encoder_neighbors = 3;
  a.decoder_hidden = {8, 8};
  return a;
}

void randomize_final_layers(ModuleParams<double>& p, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& head : p.decoders.heads) {
    for (Eigen::Index i = 0; i < head.layers.back().weight.size(); ++i) head.layers.back().weight.data()[i] = u(rng);
    for (Eigen::Index i = 0; i < head.layers.back().bias.size(); ++i) head.layers.back().bias.data()[i] = u(rng);
  }
}

// Random linear functional over every predicted field.
struct FieldWeights {
  GaussianGradients<double> w;
  explicit FieldWeights(std::size_t m, std::uint64_t seed) : w(m) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    for (std::size_t i = 0; i < m; ++i) {
      w.positions[i] = Vec3d(u(rng), u(rng), u(rng));
      w.scales[i] = Vec2<double>(u(rng), u(rng));
      w.opacities[i] = u(rng);
      for (auto& c : w.sh[i]) c = u(rng);
      w.normals[i] = Vec3d(u(rng), u(rng), u(rng));
      w.angles[i] = u(rng);
    }
  }
  double apply(const GaussianSet<double>& g) const {
    double s = 0;
    for (std::size_t i = 0; i < g.size(); ++i)
      s += w.positions[i].dot(g.positions[i]) + w.scales[i].dot(g.scales[i]) + w.opacities[i] * g.opacities[i] +
           w.sh[i].dot(g.sh[i]) + w.normals[i].dot(g.normals[i]) + w.angles[i] * g.angles[i];
    return s;
  }
};

}  // namespace

TEST(Encoder, SinglePointGivesFiniteFeatures) {
  auto pc = prepare_cloud<float>(random_cloud(3, 1), 16, 3);
  GaussianSet<float> one;
  one.space = SpaceTag::Normalized;
  one.push_back_from(pc.init, 0);
  auto m = make_module<float>(ArchConfig{}, 2);
  auto f = encode(m.encoder, module_inputs(one), neighbor_table(NeighborIndex({Vec3d::Zero()}), 16));
  ASSERT_EQ(f.rows(), 1);
  ASSERT_EQ(f.cols(), 640);
  EXPECT_TRUE(f.allFinite());
}

TEST(Encoder, PermutationEquivariant) {
  auto cloud = random_cloud(60, 3);
  auto pc = prepare_cloud<double>(cloud, 5, 8);
  auto m = make_module<double>(tiny_arch(), 4);
  auto f = encode(m.encoder, module_inputs(pc.init), pc.neighbors);

  std::vector<std::uint32_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), 0u);
  std::mt19937_64 rng(5);
  std::shuffle(perm.begin(), perm.end(), rng);
  GaussianSet<double> shuffled;
  shuffled.space = SpaceTag::Normalized;
  std::vector<Vec3d> pts;
  for (auto id : perm) {
    shuffled.push_back_from(pc.init, id);
    pts.push_back(pc.init.positions[id]);
  }
  auto g = encode(m.encoder, module_inputs(shuffled), neighbor_table(NeighborIndex(pts), 5));
  for (std::size_t i = 0; i < perm.size(); ++i)
    EXPECT_LT((g.row(Eigen::Index(i)) - f.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, ZeroWeightsGiveIdenticalRows) {
  auto pc = prepare_cloud<double>(random_cloud(20, 6), 4, 8);
  auto m = make_module<double>(tiny_arch(), 7);
  m.encoder.embed.weight.setZero();
  for (auto& b : m.encoder.blocks) {
    b.local.weight.setZero();
    b.project.weight.setZero();
    if (b.has_skip()) b.skip.weight.setZero();
  }
  auto f = encode(m.encoder, module_inputs(pc.init), pc.neighbors);
  for (Eigen::Index r = 1; r < f.rows(); ++r) EXPECT_EQ(f.row(r), f.row(0));
}

TEST(Decoder, SplitShapeAndBoundary) {
  auto m = make_module<double>(tiny_arch(4), 8);
  randomize_final_layers(m, 9);
  Matrix<double> feats = Matrix<double>::Random(5, 12);
  Matrix<double> in = Matrix<double>::Random(5, kInputWidth);
  auto out = split_decode(m.decoders.heads[kHeadPosition], feats, in, 4, 3);
  EXPECT_EQ(out.rows(), 20);
  EXPECT_EQ(out.cols(), 3);
  // Rows jK..jK+K-1 come from point j.
  auto plain = mlp_forward(m.decoders.heads[kHeadPosition], decoder_inputs(feats, in)).output;
  for (int j = 0; j < 5; ++j)
    for (int s = 0; s < 4; ++s)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out(4 * j + s, c), plain(j, 3 * s + c));

  auto m1 = make_module<double>(tiny_arch(1), 8);
  randomize_final_layers(m1, 10);
  EXPECT_EQ(split_decode(m1.decoders.heads[kHeadScale], feats, in, 1, 2),
            mlp_forward(m1.decoders.heads[kHeadScale], decoder_inputs(feats, in)).output);

  auto zero = make_module<double>(tiny_arch(4), 8);
  EXPECT_TRUE(split_decode(zero.decoders.heads[kHeadColor], feats, in, 4, 27).isZero(0));
}

TEST(Predict, IdentityAtInitialization) {
  auto pc = prepare_cloud<double>(random_cloud(50, 11), 4, 8);
  auto m = make_module<double>(tiny_arch(4), 12);
  auto g = predict_gaussians(m, pc.init, pc.neighbors);
  ASSERT_EQ(g.size(), 200u);
  const double o = 1 / (1 + std::exp(-6.0));
  EXPECT_NEAR(o, 0.9975, 1e-4);
  for (std::size_t j = 0; j < 50; ++j)
    for (std::size_t s = 0; s < 4; ++s) {
      const auto r = 4 * j + s;
      EXPECT_EQ(g.positions[r], pc.init.positions[j]);
      EXPECT_EQ(g.scales[r], pc.init.scales[j]);
      EXPECT_EQ(g.sh[r], pc.init.sh[j]);
      EXPECT_LT((g.normals[r] - pc.init.normals[j]).norm(), 1e-12);
      EXPECT_EQ(g.angles[r], pc.init.angles[j]);
      EXPECT_NEAR(g.opacities[r], o, 1e-15);
    }
}

TEST(Predict, OutputCountAndUnitNormals) {
  auto pc = prepare_cloud<float>(random_cloud(2048, 13), 16, 16);
  auto m = make_module<float>(ArchConfig{}, 14);
  auto g = predict_gaussians(m, pc.init, pc.neighbors);
  EXPECT_EQ(g.size(), 8192u);
  auto md = make_module<double>(tiny_arch(3), 15);
  randomize_final_layers(md, 16, 1.0);
  auto pd = prepare_cloud<double>(random_cloud(40, 17), 4, 8);
  auto gd = predict_gaussians(md, pd.init, pd.neighbors);
  EXPECT_EQ(gd.size(), 120u);
  for (const auto& n : gd.normals) EXPECT_NEAR(n.norm(), 1.0, 1e-6);
}

TEST(Predict, RejectsWorldSpaceInput) {
  auto pc = prepare_cloud<double>(random_cloud(10, 18), 4, 8);
  auto m = make_module<double>(tiny_arch(), 19);
  auto world = denormalize_gaussians(pc.init, pc.transform);
  EXPECT_EQ(error_kind_of([&] { predict_gaussians(m, world, pc.neighbors); }), ErrorKind::InvalidState);
}

TEST(Backward, ZeroUpstreamGivesZero) {
  auto pc = prepare_cloud<double>(random_cloud(12, 20), 3, 8);
  auto m = make_module<double>(tiny_arch(), 21);
  randomize_final_layers(m, 22);
  auto g = backward(m, pc.init, pc.neighbors, GaussianGradients<double>(24));
  visit_tensors(g.params, [](const auto& t) { EXPECT_TRUE(t.isZero(0)); });
}

TEST(Backward, TinyNetworkMatchesFiniteDifferences) {
  auto pc = prepare_cloud<double>(random_cloud(4, 23), 3, 3);
  auto m = make_module<double>(tiny_arch(2), 24);
  randomize_final_layers(m, 25);
  const FieldWeights fw(8, 26);
  const auto base = predict_with_cache(m, pc.init, pc.neighbors);
  const auto base_sig = prediction_signature(base);
  auto grads = backward(m, pc.init, base, fw.w);
  auto work = m;
  auto ws = tensor_spans(work);
  auto gs = tensor_spans(grads.params);
  const double h = 1e-5;
  int checked = 0, skipped = 0;
  for (std::size_t t = 0; t < ws.size(); ++t)
    for (std::size_t i = 0; i < ws[t].size(); ++i) {
      const double keep = ws[t][i];
      ws[t][i] = keep + h;
      auto pp = predict_with_cache(work, pc.init, pc.neighbors);
      ws[t][i] = keep - h;
      auto pm = predict_with_cache(work, pc.init, pc.neighbors);
      ws[t][i] = keep;
      if (prediction_signature(pp) != base_sig || prediction_signature(pm) != base_sig) {
        ++skipped;
        continue;
      }
      const double fd = (fw.apply(pp.gaussians) - fw.apply(pm.gaussians)) / (2 * h);
      ++checked;
      EXPECT_NEAR(gs[t][i], fd, std::max(1e-4 * std::abs(fd), 1e-9)) << "tensor " << t << " entry " << i;
    }
  EXPECT_EQ(std::size_t(checked + skipped), parameter_count(m));
  EXPECT_GT(checked, int(0.9 * (checked + skipped)));

  // Input partials, with the neighbor table held fixed.
  for (std::size_t j = 0; j < 4; ++j)
    for (int c = 0; c < 3; ++c) {
      auto ip = pc.init, im = pc.init;
      ip.positions[j][c] += h;
      im.positions[j][c] -= h;
      const double fd = (fw.apply(predict_gaussians(m, ip, pc.neighbors)) -
                         fw.apply(predict_gaussians(m, im, pc.neighbors))) / (2 * h);
      EXPECT_NEAR(grads.init.positions[j][c], fd, std::max(1e-4 * std::abs(fd), 1e-9));
    }
}

TEST(Backward, PositionIndifferentLossLeavesPositionHeadAlone) {
  auto pc = prepare_cloud<double>(random_cloud(12, 27), 3, 8);
  auto m = make_module<double>(tiny_arch(), 28);
  randomize_final_layers(m, 29);
  FieldWeights fw(24, 30);
  for (auto& p : fw.w.positions) p.setZero();
  auto g = backward(m, pc.init, pc.neighbors, fw.w);
  EXPECT_TRUE(g.params.decoders.heads[kHeadPosition].layers.back().weight.isZero(0));
  EXPECT_TRUE(g.params.decoders.heads[kHeadPosition].layers.back().bias.isZero(0));
  EXPECT_FALSE(g.params.decoders.heads[kHeadColor].layers.back().weight.isZero(0));
}

TEST(Backward, LibraryGradcheckPasses) {
  auto rep = network_gradcheck(3);
  EXPECT_TRUE(rep.passed()) << rep.worst_where << " ratio " << rep.worst_ratio;
}

TEST(Adam, HandComputedFirstStep) {
  ModuleParams<double> p;
  p.encoder.embed.weight = Matrix<double>::Constant(1, 1, 2.0);
  p.encoder.embed.bias = RowVector<double>::Zero(1);
  auto g = zeros_like(p);
  g.encoder.embed.weight(0, 0) = 1.0;
  AdamState<double> st(p, 0.1);
  adam_step(st, p, g);
  // Bias-corrected moments are exactly g and g^2 after one step.
  EXPECT_NEAR(p.encoder.embed.weight(0, 0), 2.0 - 0.1 * 1.0 / (1.0 + st.eps), 1e-15);
  EXPECT_EQ(p.encoder.embed.bias(0), 0.0);
  EXPECT_EQ(st.step, 1u);

  auto z = zeros_like(p);
  auto before = p;
  AdamState<double> fresh(p, 0.1);
  adam_step(fresh, p, z);
  EXPECT_EQ(p.encoder.embed.weight, before.encoder.embed.weight);
  EXPECT_EQ(fresh.step, 1u);
}

TEST(Adam, NonFiniteGradientLeavesStateAlone) {
  auto p = make_module<double>(tiny_arch(), 31);
  auto g = zeros_like(p);
  g.encoder.embed.weight(0, 0) = 1;
  AdamState<double> st(p, 0.01);
  adam_step(st, p, g);
  auto p_before = p;
  auto st_before = st;
  g.decoders.heads[kHeadAngle].layers[0].bias(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(error_kind_of([&] { adam_step(st, p, g); }), ErrorKind::NonFiniteGradient);
  EXPECT_EQ(st.step, st_before.step);
  auto a = tensor_spans(p), b = tensor_spans(p_before);
  auto ma = tensor_spans(st.first), mb = tensor_spans(st_before.first);
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE(std::equal(a[t].begin(), a[t].end(), b[t].begin()));
    EXPECT_TRUE(std::equal(ma[t].begin(), ma[t].end(), mb[t].begin()));
  }
}

TEST(Adam, HundredStepsAreDeterministic) {
  auto run = [] {
    auto p = make_module<float>(tiny_arch(), 32);
    AdamState<float> st(p, 1e-3);
    std::mt19937_64 rng(33);
    std::normal_distribution<float> n;
    for (int s = 0; s < 100; ++s) {
      auto g = zeros_like(p);
      visit_tensors(g, [&](auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
      });
      adam_step(st, p, g);
    }
    return p;
  };
  auto a = run(), b = run();
  auto sa = tensor_spans(a), sb = tensor_spans(b);
  for (std::size_t t = 0; t < sa.size(); ++t)
    EXPECT_EQ(0, std::memcmp(sa[t].data(), sb[t].data(), sa[t].size_bytes()));
}

TEST(Module, InitializationIsSeeded) {
  auto a = make_module<float>(tiny_arch(), 34), b = make_module<float>(tiny_arch(), 34),
       c = make_module<float>(tiny_arch(), 35);
  auto sa = tensor_spans(a), sb = tensor_spans(b), sc = tensor_spans(c);
  bool differs = false;
  for (std::size_t t = 0; t < sa.size(); ++t) {
    EXPECT_TRUE(std::equal(sa[t].begin(), sa[t].end(), sb[t].begin()));
    differs = differs || !std::equal(sa[t].begin(), sa[t].end(), sc[t].begin());
  }
  EXPECT_TRUE(differs);
  // Decoder output layers start at zero, everything else does not.
  for (const auto& head : a.decoders.heads) {
    EXPECT_TRUE(head.layers.back().weight.isZero(0));
    EXPECT_FALSE(head.layers.front().weight.isZero(0));
    EXPECT_EQ(head.layers.front().weight.cols(), 12 + kInputWidth);
  }
  EXPECT_EQ(a.decoders.heads[kHeadColor].layers.back().weight.rows(), 2 * 27);
}
