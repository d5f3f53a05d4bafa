// Command-line front end: dataset synthesis, initialization, training,
// evaluation, gradient checks and benchmarks.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "splatpatch/splatpatch.hpp"

namespace sp = splatpatch;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericFailure = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) sp::fail(sp::ErrorKind::MissingFile, p.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), {}};
}

void warn(const std::string& msg) { std::cerr << "splatpatch: warning: " << msg << "\n"; }

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::vector<sp::SceneData> load_dataset(const fs::path& dir, int resolution) {
  std::vector<sp::SceneData> scenes;
  for (const auto& m : sp::find_manifests(dir)) scenes.push_back(sp::load_scene(m, resolution));
  std::cout << "loaded " << scenes.size() << " scenes from " << dir.string() << "\n";
  return scenes;
}

sp::TrainConfig load_config(const std::string& path) {
  sp::TrainConfig cfg;
  if (!path.empty()) cfg = sp::parse_train_config(read_text(path));
  return cfg;
}

void echo_config(const sp::TrainConfig& cfg) {
  std::cout << "# resolved configuration\n" << sp::format_train_config(cfg) << std::flush;
}

sp::LogSink stdout_log() {
  return [](const std::string& s) { std::cout << s << std::endl; };
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::vector<std::string> kinds = {"cube", "sphere"};
  std::size_t scenes = 2, views = 16, points = 2048;
  int res = 64;
  std::uint64_t seed = 0;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  sp::DatasetSpec spec;
  spec.kinds.clear();
  for (const auto& k : a.kinds) spec.kinds.push_back(sp::parse_scene_kind(k));
  spec.scenes = a.scenes;
  spec.views = a.views;
  spec.resolution = a.res;
  spec.points = a.points;
  spec.seed = a.seed;
  const auto manifests = sp::emit_dataset(spec, a.out);
  for (const auto& m : manifests) std::cout << m.string() << "\n";
  std::cout << manifests.size() << " scenes, " << manifests.size() * a.views << " images\n";
  return kOk;
}

struct NormalsArgs {
  std::string in, out;
  int k = 16;
};

int run_normals(const NormalsArgs& a) {
  auto cloud = sp::read_ply(a.in);
  const sp::NeighborIndex index(cloud.positions);
  cloud.normals = sp::estimate_normals(cloud, index, std::size_t(a.k));
  sp::write_ply(cloud, a.out);
  std::cout << "wrote " << cloud.size() << " points with normals to " << a.out << "\n";
  return kOk;
}

struct InitArgs {
  std::string in, out;
  int k = 16;
};

int run_init(const InitArgs& a) {
  const auto cloud = sp::read_ply(a.in);
  const auto pc = sp::prepare_cloud<float>(cloud, 1, a.k);
  sp::GaussianCheckpoint<float> ck{sp::denormalize_gaussians(pc.init, pc.transform), "", 0};
  sp::save_checkpoint(ck, a.out);
  std::cout << "wrote " << ck.gaussians.size() << " gaussians to " << a.out << "\n";
  return kOk;
}

struct RenderArgs {
  std::string gaussians, entire, manifest, out;
  std::size_t view = 0;
  int k = 16;
};

int run_render(const RenderArgs& a) {
  if (a.gaussians.empty() == a.entire.empty()) throw UsageError("render needs exactly one of --gaussians or --entire");
  const auto m = sp::load_manifest(a.manifest);
  if (a.view >= m.views.size())
    throw UsageError("--view " + std::to_string(a.view) + " out of range, manifest has " +
                     std::to_string(m.views.size()) + " views");
  sp::GaussianSet<float> g;
  if (!a.gaussians.empty()) {
    g = sp::load_gaussian_checkpoint<float>(a.gaussians).gaussians;
  } else {
    const auto params = sp::load_module_checkpoint<float>(a.entire).params;
    g = sp::entire_prediction(params, sp::read_ply(m.cloud), a.k).world;
  }
  sp::RenderOptions opts;
  opts.background = m.background;
  const auto img = sp::render(g, m.camera(a.view), opts);
  sp::write_image(img, a.out);
  const auto gt = sp::read_image<float>(m.views[a.view].image);
  const auto black = sp::ImageBuffer<float>(gt.width, gt.height);
  std::cout << "view " << a.view << " psnr " << fixed(sp::psnr(img, gt)) << " dB (black image "
            << fixed(sp::psnr(black, gt)) << " dB), wrote " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, entire, resume, log;
  std::optional<std::uint64_t> seed;
  double max_seconds = 0;
};

sp::TrainConfig resolve_train_config(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.max_seconds > 0) cfg.max_seconds = a.max_seconds;
  if (!a.log.empty()) cfg.loss_log = a.log;
  cfg.validate();
  echo_config(cfg);
  return cfg;
}

void save_result(const sp::TrainResult<float>& res, const std::string& out) {
  sp::save_checkpoint(sp::ModuleCheckpoint<float>{res.params, res.rng_state, res.steps}, out);
  std::cout << "steps " << res.steps << " skipped " << res.skipped << " best epoch loss " << res.best_loss
            << ", wrote " << out << "\n";
  if (res.skipped == res.steps && res.steps > 0) throw NumericFailure("every training step was non-finite");
}

int run_train_entire(const TrainArgs& a) {
  const auto cfg = resolve_train_config(a);
  const auto scenes = load_dataset(a.data, cfg.resolution);
  std::optional<sp::ModuleParams<float>> start;
  if (!a.resume.empty()) start = sp::load_module_checkpoint<float>(a.resume).params;
  save_result(sp::train_entire<float>(scenes, cfg, start, stdout_log()), a.out);
  return kOk;
}

int run_train_patch(const TrainArgs& a) {
  const auto cfg = resolve_train_config(a);
  const auto scenes = load_dataset(a.data, cfg.resolution);
  const auto entire = sp::load_module_checkpoint<float>(a.entire).params;
  std::optional<sp::ModuleParams<float>> start;
  if (!a.resume.empty()) start = sp::load_module_checkpoint<float>(a.resume).params;
  save_result(sp::train_patch<float>(scenes, entire, cfg, start, stdout_log()), a.out);
  return kOk;
}

struct EvalArgs {
  std::string manifest, entire, patch, report;
  std::size_t n_p = 2048;
  std::uint64_t seed = 0;
  int resolution = 0, k = 16;
};

int run_eval(const EvalArgs& a) {
  const auto scene = sp::load_scene(a.manifest, a.resolution);
  sp::RenderOptions opts;
  opts.background = scene.background;
  struct Row {
    std::string mode;
    std::vector<double> psnr, ssim;
  };
  std::vector<Row> rows;
  auto score = [&](const std::string& mode, const std::vector<sp::ImageBuffer<float>>& imgs) {
    Row r{mode, {}, {}};
    for (std::size_t v = 0; v < imgs.size(); ++v) {
      r.psnr.push_back(sp::psnr(imgs[v], scene.images[v]));
      r.ssim.push_back(double(sp::ssim(imgs[v], scene.images[v]).value));
    }
    rows.push_back(std::move(r));
  };
  const auto entire = sp::load_module_checkpoint<float>(a.entire).params;
  score("entire", sp::infer_entire(entire, scene.cloud, scene.cameras, opts, a.k).images);
  if (!a.patch.empty()) {
    const auto patch = sp::load_module_checkpoint<float>(a.patch).params;
    auto inf = sp::infer_patchwise(patch, scene.cloud, scene.cameras, a.n_p, a.seed, opts, true, a.k,
                                   [](const std::string& m) { warn(m); });
    score(inf.fell_back ? "patch_fallback" : "patch", inf.images);
  }
  std::ostringstream csv;
  csv << "mode,view,psnr,ssim\n";
  for (const auto& r : rows) {
    double mp = 0, ms = 0;
    for (std::size_t v = 0; v < r.psnr.size(); ++v) {
      csv << r.mode << ',' << v << ',' << fixed(r.psnr[v], 6) << ',' << fixed(r.ssim[v], 6) << '\n';
      mp += r.psnr[v];
      ms += r.ssim[v];
    }
    mp /= double(r.psnr.size());
    ms /= double(r.ssim.size());
    csv << r.mode << ",mean," << fixed(mp, 6) << ',' << fixed(ms, 6) << '\n';
    std::cout << r.mode << ": mean psnr " << fixed(mp) << " dB, mean ssim " << fixed(ms) << " over "
              << r.psnr.size() << " views\n";
  }
  if (!a.report.empty()) {
    std::ofstream out(a.report, std::ios::trunc);
    if (!out) sp::fail(sp::ErrorKind::IoError, a.report + ": cannot write report");
    out << csv.str();
  } else {
    std::cout << csv.str();
  }
  return kOk;
}

struct GradcheckArgs {
  std::string module = "all";
  std::size_t trials = 0;
  std::uint64_t seed = 1;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::vector<sp::GradcheckReport> reports;
  const bool all = a.module == "all";
  if (all || a.module == "rasterizer") reports.push_back(sp::rasterizer_gradcheck(a.trials ? a.trials : 200, a.seed));
  if (all || a.module == "network") {
    const std::size_t n = a.trials ? a.trials : 1;
    sp::GradcheckReport merged;
    merged.module = "network";
    for (std::size_t t = 0; t < n; ++t) {
      auto r = sp::network_gradcheck(a.seed + t);
      merged.configs += r.configs;
      merged.checked += r.checked;
      merged.excluded += r.excluded;
      merged.failed += r.failed;
      if (r.worst_ratio > merged.worst_ratio) {
        merged.worst_ratio = r.worst_ratio;
        merged.worst_where = r.worst_where;
      }
      merged.worst_rel = std::max(merged.worst_rel, r.worst_rel);
    }
    reports.push_back(merged);
  }
  if (all || a.module == "metrics") reports.push_back(sp::metrics_gradcheck(a.trials ? a.trials : 20, a.seed));
  if (reports.empty()) throw UsageError("unknown --module '" + a.module + "'");
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << r.module << ": " << (r.passed() ? "pass" : "FAIL") << " configs=" << r.configs
              << " checked=" << r.checked << " excluded=" << r.excluded << " failed=" << r.failed
              << " worst_rel=" << std::scientific << std::setprecision(3) << r.worst_rel
              << " worst_ratio=" << r.worst_ratio << std::defaultfloat << " at " << r.worst_where << "\n";
    ok = ok && r.passed();
  }
  if (!ok) throw NumericFailure("gradient check failed");
  return kOk;
}

struct BenchArgs {
  std::size_t gaussians = 10000;
  std::string res = "256x256";
  int frames = 20;
  std::uint64_t seed = 0;
  bool no_backward = false;
};

int run_bench(const BenchArgs& a) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream rs(a.res);
  if (!(rs >> w >> x >> h) || x != 'x' || w < 1 || h < 1) throw UsageError("--res must look like 256x256");
  const auto r = sp::bench_render(a.gaussians, w, h, a.frames, a.seed, !a.no_backward);
  std::cout << "gaussians=" << r.gaussians << " res=" << w << "x" << h << " frames=" << r.frames
            << " threads=" << sp::thread_count() << "\n"
            << "prepare_ms=" << fixed(r.prepare_ms, 3) << " forward_ms=" << fixed(r.forward_ms, 3)
            << " backward_ms=" << fixed(r.backward_ms, 3) << "\n"
            << "fps=" << fixed(r.fps, 2) << "\n";
  return kOk;
}

struct PatchifyArgs {
  std::string in;
  std::size_t n_p = 2048;
  std::uint64_t seed = 0;
  bool stats = false;
};

int run_patchify(const PatchifyArgs& a) {
  const auto cloud = sp::read_ply(a.in);
  const sp::NeighborIndex index(cloud.positions);
  if (cloud.size() < a.n_p) {
    warn(std::to_string(cloud.size()) + " points, fewer than N_p = " + std::to_string(a.n_p) +
         "; the whole cloud is one patch");
    std::cout << "patches=1 points=" << cloud.size() << " coverage=1.000\n";
    return kOk;
  }
  sp::Rng rng(a.seed);
  const auto patches = sp::cover_with_patches(index, a.n_p, rng);
  std::vector<std::uint32_t> hits(cloud.size(), 0);
  for (const auto& p : patches)
    for (auto id : p.members) ++hits[id];
  const auto covered = std::count_if(hits.begin(), hits.end(), [](auto h) { return h > 0; });
  std::cout << "patches=" << patches.size() << " points=" << cloud.size() << " n_p=" << a.n_p
            << " coverage=" << fixed(double(covered) / double(cloud.size()), 3) << "\n";
  if (a.stats) {
    const auto [lo, hi] = std::minmax_element(hits.begin(), hits.end());
    std::cout << "lower_bound=" << (cloud.size() + a.n_p - 1) / a.n_p
              << " mean_multiplicity=" << fixed(double(patches.size() * a.n_p) / double(cloud.size()), 3)
              << " min_multiplicity=" << *lo << " max_multiplicity=" << *hi << "\n";
  }
  return kOk;
}

int report(int code, const std::string& kind, const std::string& what) {
  static const char* names[] = {"ok", "usage", "data", "numeric"};
  std::string line = what;
  for (auto& c : line)
    if (c == '\n') c = ' ';
  if (line.rfind(kind + ": ", 0) == 0) line.erase(0, kind.size() + 2);
  std::cerr << "splatpatch: error[" << names[code] << "] " << kind << ": " << line << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point cloud to 2D Gaussian splats: synthesis, training, evaluation and checks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: SPLATPATCH_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic dataset of meshes, clouds and views");
  c_synth->add_option("--kinds", synth.kinds, "Scene kinds: cube, sphere, checker_plane, two_spheres")
      ->delimiter(',');
  c_synth->add_option("--scenes", synth.scenes, "Number of scenes")->capture_default_str();
  c_synth->add_option("--views", synth.views, "Views per scene")->capture_default_str();
  c_synth->add_option("--res", synth.res, "Image width and height")->capture_default_str();
  c_synth->add_option("--points", synth.points, "Points per cloud")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  c_synth->add_option("--out", synth.out, "Output directory")->required();

  NormalsArgs normals;
  auto* c_normals = app.add_subcommand("normals", "Estimate PCA normals and write them into a PLY");
  c_normals->add_option("--in", normals.in, "Input PLY")->required();
  c_normals->add_option("--out", normals.out, "Output PLY")->required();
  c_normals->add_option("--k", normals.k, "Neighborhood size")->capture_default_str();

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "Initialize one splat per point and save a Gaussian checkpoint");
  c_init->add_option("--in", init.in, "Input PLY")->required();
  c_init->add_option("--out", init.out, "Output checkpoint")->required();
  c_init->add_option("--k", init.k, "Neighborhood size for normals")->capture_default_str();

  RenderArgs rend;
  auto* c_render = app.add_subcommand("render", "Render one manifest view of a Gaussian set or a trained module");
  c_render->add_option("--gaussians", rend.gaussians, "Gaussian checkpoint");
  c_render->add_option("--entire", rend.entire, "Entire-module checkpoint applied to the manifest cloud");
  c_render->add_option("--manifest", rend.manifest, "Scene manifest")->required();
  c_render->add_option("--view", rend.view, "View index")->capture_default_str();
  c_render->add_option("--out", rend.out, "Output image (.png or .ppm)")->required();
  c_render->add_option("--k", rend.k, "Neighborhood size for normals")->capture_default_str();

  TrainArgs te, tp;
  auto add_train = [](CLI::App* c, TrainArgs& a) {
    c->add_option("--data", a.data, "Dataset directory")->required();
    c->add_option("--config", a.config, "Training config file (key = value)");
    c->add_option("--out", a.out, "Output checkpoint")->required();
    c->add_option("--resume", a.resume, "Start from this module checkpoint");
    c->add_option("--seed", a.seed, "Override the config seed");
    c->add_option("--max-seconds", a.max_seconds, "Wall-clock budget");
    c->add_option("--log", a.log, "Loss CSV path");
  };
  auto* c_te = app.add_subcommand("train-entire", "Train the entire-cloud module");
  add_train(c_te, te);
  auto* c_tp = app.add_subcommand("train-patch", "Train the patch module against a frozen entire module");
  add_train(c_tp, tp);
  c_tp->add_option("--entire", tp.entire, "Frozen entire-module checkpoint")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Per-view PSNR/SSIM of trained modules on a scene");
  c_eval->add_option("--manifest", ev.manifest, "Scene manifest")->required();
  c_eval->add_option("--entire", ev.entire, "Entire-module checkpoint")->required();
  c_eval->add_option("--patch", ev.patch, "Patch-module checkpoint for patchwise inference");
  c_eval->add_option("--report", ev.report, "CSV report path (stdout when omitted)");
  c_eval->add_option("--np", ev.n_p, "Points per patch")->capture_default_str();
  c_eval->add_option("--seed", ev.seed, "Patch coverage seed")->capture_default_str();
  c_eval->add_option("--resolution", ev.resolution, "Evaluate at this width (0 = manifest)");
  c_eval->add_option("--k", ev.k, "Neighborhood size for normals")->capture_default_str();

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Analytic gradients against central finite differences");
  c_gc->add_option("--module", gc.module, "rasterizer, network, metrics or all")
      ->check(CLI::IsMember({"rasterizer", "network", "metrics", "all"}))
      ->capture_default_str();
  c_gc->add_option("--trials", gc.trials, "Configurations (default per module)");
  c_gc->add_option("--seed", gc.seed, "Random seed")->capture_default_str();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Render throughput on an initialized cube");
  c_bench->add_option("--gaussians", bench.gaussians, "Number of splats")->capture_default_str();
  c_bench->add_option("--res", bench.res, "Resolution WxH")->capture_default_str();
  c_bench->add_option("--frames", bench.frames, "Frames to time")->capture_default_str();
  c_bench->add_option("--seed", bench.seed, "Scene seed")->capture_default_str();
  c_bench->add_flag("--no-backward", bench.no_backward, "Skip timing the backward pass");

  PatchifyArgs pf;
  auto* c_pf = app.add_subcommand("patchify", "Cover a cloud with k-NN patches and report coverage");
  c_pf->add_option("--in", pf.in, "Input PLY")->required();
  c_pf->add_option("--np", pf.n_p, "Points per patch")->capture_default_str();
  c_pf->add_option("--seed", pf.seed, "Random seed")->capture_default_str();
  c_pf->add_flag("--stats", pf.stats, "Print multiplicity statistics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(kUsage, e.get_name(), e.what());
  }

  try {
    if (threads > 0) sp::set_thread_count(threads);
    if (*c_synth) return run_synth(synth);
    if (*c_normals) return run_normals(normals);
    if (*c_init) return run_init(init);
    if (*c_render) return run_render(rend);
    if (*c_te) return run_train_entire(te);
    if (*c_tp) return run_train_patch(tp);
    if (*c_eval) return run_eval(ev);
    if (*c_gc) return run_gradcheck(gc);
    if (*c_bench) return run_bench(bench);
    if (*c_pf) return run_patchify(pf);
  } catch (const UsageError& e) {
    return report(kUsage, "Usage", e.what());
  } catch (const NumericFailure& e) {
    return report(kNumericFailure, "NumericFailure", e.what());
  } catch (const sp::Error& e) {
    const auto kind = std::string(sp::to_string(e.kind()));
    if (e.is_data_error()) return report(kDataError, kind, e.what());
    if (e.kind() == sp::ErrorKind::NonFiniteInput || e.kind() == sp::ErrorKind::NonFiniteGradient)
      return report(kNumericFailure, kind, e.what());
    return report(kUsage, kind, e.what());
  } catch (const std::exception& e) {
    return report(kDataError, "Exception", e.what());
  }
  return kUsage;
}
