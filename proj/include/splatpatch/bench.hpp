#pragma once

#include <chrono>
#include <cstdint>

#include "splatpatch/pipeline.hpp"
#include "splatpatch/synth.hpp"

namespace splatpatch {

struct BenchResult {
  std::size_t gaussians = 0;
  int width = 0, height = 0, frames = 0;
  double prepare_ms = 0;   // projection, culling, depth sort, tile binning per frame
  double forward_ms = 0;   // full render per frame
  double backward_ms = 0;  // render_backward per frame
  double fps = 0;          // frames per second of the forward pass
};

/// Initialized splats of a sampled cube seen from frames cameras on the view
/// sphere. Timings are per-frame means.
inline BenchResult bench_render(std::size_t m, int width, int height, int frames, std::uint64_t seed = 0,
                                bool with_backward = true) {
  require(m >= 2 && width >= 1 && height >= 1 && frames >= 1, ErrorKind::InvalidArgument,
          "bench needs >= 2 gaussians, a positive resolution and >= 1 frame");
  const Mesh cube = make_scene(SceneKind::Cube, {}, seed);
  const auto pc = prepare_cloud<float>(sample_points(cube, m, seed + 1), 16, 16);
  const auto world = denormalize_gaussians(pc.init, pc.transform);
  const auto cams = view_sphere_cameras(std::size_t(frames), kViewRadiusFactor * cube.radius(), width, height);
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
  BenchResult r;
  r.gaussians = m;
  r.width = width;
  r.height = height;
  r.frames = frames;
  const RenderOptions opts;
  // One untimed frame warms caches and the thread pool.
  render(world, cams[0], opts);
  for (const auto& cam : cams) {
    auto t0 = clock::now();
    const detail::CameraT<float> camt(cam);
    detail::prepare(world, camt, opts);
    auto t1 = clock::now();
    render(world, cam, opts);
    auto t2 = clock::now();
    r.prepare_ms += ms(t1 - t0);
    r.forward_ms += ms(t2 - t1);
    if (with_backward) {
      const ImageBuffer<float> ones(width, height, 1.0f);
      auto t3 = clock::now();
      render_backward(world, cam, opts, ones);
      r.backward_ms += ms(clock::now() - t3);
    }
  }
  r.prepare_ms /= frames;
  r.forward_ms /= frames;
  r.backward_ms /= frames;
  r.fps = 1000.0 / r.forward_ms;
  return r;
}

}  // namespace splatpatch
