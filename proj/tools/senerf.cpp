// senerf command-line front end.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "senerf/senerf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace senerf;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;
  int threads = default_threads();
  std::optional<std::uint64_t> seed;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw IoError("config file not found: " + path);
  return io::read_json(path);
}

/// Flag > SENERF_SEED > config file > default.
std::uint64_t resolve_seed(const Common& c, const json& cfg) {
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("SENERF_SEED"); env && *env) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("SENERF_SEED is not an unsigned integer: ") + env);
    }
  }
  return cfg.value("seed", std::uint64_t{0});
}

selftrain::SelfTrainConfig resolve_train_config(const Common& c, const json& cfg) {
  auto st = selftrain::config_from_json(cfg);
  st.seed = resolve_seed(c, cfg);
  st.threads = c.threads;
  return st;
}

struct LoadedData {
  scene::Dataset ds;
  std::vector<const scene::Frame*> train, held_out;
  std::optional<scene::SceneSpec> oracle;
};

LoadedData load_data(const std::string& dir, int train_views, std::uint64_t seed, double bound) {
  LoadedData d;
  d.ds = scene::read_dataset(dir);
  if (d.ds.empty()) throw std::invalid_argument("dataset " + dir + " has no frames; nothing to train on");
  if (fs::exists(fs::path(dir) / "scene.json")) d.oracle = scene::scene_from_json(io::read_json(fs::path(dir) / "scene.json"));
  if (train_views <= 0 || static_cast<std::size_t>(train_views) >= d.ds.size()) {
    for (const auto& f : d.ds.frames) d.train.push_back(&f);
    return d;
  }
  if (train_views != 3) throw UsageError("--train-views supports 3 (extreme split) or 0 (all views)");
  std::vector<scene::PoseSpec> poses;
  for (const auto& f : d.ds.frames) poses.push_back(scene::pose_of(f.camera));
  const auto split = scene::make_extreme_split(poses, seed, bound);
  for (auto i : split.train) d.train.push_back(&d.ds.frames[i]);
  for (auto i : split.test) d.held_out.push_back(&d.ds.frames[i]);
  return d;
}

json metric_report(const selftrain::EvalReport& e, double runtime) {
  json j = e.to_json();
  j["mask"] = nullptr;
  j["lpips"] = nullptr;
  j["average"] = nullptr;
  j["runtime_s"] = runtime;
  return j;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"senerf: few-view radiance fields with teacher/student self-training"};
  app.require_subcommand(1, 1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--out", common.out, "output path");
    sub->add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", common.seed, "random seed (overrides SENERF_SEED and config)");
  };

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "render an analytic scene into a dataset directory");
  std::string spec_path;
  std::optional<int> views, width, height;
  std::optional<double> fov, radius;
  bool no_depth = false;
  gen->add_option("--spec", spec_path, "scene JSON (default scene when omitted)");
  gen->add_option("--views", views, "number of random poses");
  gen->add_option("--width", width);
  gen->add_option("--height", height);
  gen->add_option("--fov", fov, "horizontal field of view, degrees");
  gen->add_option("--radius", radius, "camera distance");
  gen->add_flag("--no-depth", no_depth, "skip depth maps");
  add_common(gen);

  // train / self-train
  std::string data_dir;
  int train_views = 3;
  std::optional<int> steps, iters, bins;
  double split_bound = 40.0;
  auto* train = app.add_subcommand("train", "train a field on the training views (photometric loss)");
  auto* self = app.add_subcommand("self-train", "teacher/student self-training");
  for (auto* sub : {train, self}) {
    sub->add_option("--data", data_dir, "dataset directory")->required();
    sub->add_option("--train-views", train_views, "3 for the one-sided split, 0 for all views");
    sub->add_option("--steps", steps, "optimization steps per field");
    sub->add_option("--bins", bins, "samples per ray");
    sub->add_option("--split-bound", split_bound, "pairwise angle bound of the training trio, degrees");
    add_common(sub);
  }
  self->add_option("--iters", iters, "self-training iterations");

  // render / eval
  std::string ckpt;
  std::string pose;
  auto* rend = app.add_subcommand("render", "render views of a checkpoint");
  rend->add_option("--ckpt", ckpt, "checkpoint")->required();
  rend->add_option("--data", data_dir, "dataset whose cameras to render");
  rend->add_option("--pose", pose, "phi,theta[,radius] in degrees (64x64, 40 deg FOV)");
  rend->add_option("--bins", bins);
  add_common(rend);
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint against a dataset");
  ev->add_option("--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--train-views", train_views, "score the held-out views of this split (0 = all views)");
  ev->add_option("--bins", bins);
  ev->add_option("--split-bound", split_bound);
  add_common(ev);

  // mask-eval
  std::string pred, gt;
  auto* me = app.add_subcommand("mask-eval", "precision/recall/FPR of a predicted mask");
  me->add_option("--pred", pred, "predicted mask PNG")->required();
  me->add_option("--gt", gt, "reference mask PNG")->required();
  add_common(me);

  // grad-check
  std::string precision = "both";
  int gc_rays = 8, gc_bins = 16;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the student objective");
  gc->add_option("--precision", precision, "float, double or both")->check(CLI::IsMember({"float", "double", "both"}));
  gc->add_option("--rays", gc_rays);
  gc->add_option("--bins", gc_bins);
  add_common(gc);

  std::string command = "senerf";
  try {
    app.parse(argc, argv);
    command = app.get_subcommands().front()->get_name();
    const json cfg = load_config(common.config);
    const auto t0 = std::chrono::steady_clock::now();

    if (command == "gen-scene") {
      if (common.out.empty()) throw UsageError("--out is required");
      const scene::SceneSpec spec =
          spec_path.empty() ? scene::default_scene() : scene::scene_from_json(io::read_json(spec_path));
      scene::CameraModel model;
      model.width = width.value_or(cfg.value("width", model.width));
      model.height = height.value_or(cfg.value("height", model.height));
      model.fov_x_deg = fov.value_or(cfg.value("fov", model.fov_x_deg));
      model.radius = radius.value_or(cfg.value("radius", model.radius));
      const int n = views.value_or(cfg.value("views", 100));
      if (n < 0) throw UsageError("--views must be non-negative");
      const auto poses = scene::random_poses(static_cast<std::size_t>(n), model.radius, resolve_seed(common, cfg));
      const auto ds = scene::make_dataset(spec, poses, model, !no_depth && !cfg.value("no_depth", false));
      scene::write_dataset(ds, common.out);
      io::write_text_atomic(fs::path(common.out) / "scene.json", scene::to_json(spec).dump(2));
      std::cout << json{{"frames", ds.size()}, {"out", common.out}}.dump() << "\n";
      return 0;
    }

    if (command == "train" || command == "self-train") {
      if (common.out.empty()) throw UsageError("--out is required");
      auto c = resolve_train_config(common, cfg);
      if (steps) c.steps = c.teacher_steps = *steps;
      if (bins) c.bins = *bins;
      if (iters) c.iterations = *iters;
      c.validate();
      const auto data = load_data(data_dir, train_views, c.seed, split_bound);
      const auto& eval_set = data.held_out.empty() ? data.train : data.held_out;
      fs::create_directories(common.out);
      if (command == "train") {
        auto f = selftrain::make_field(c, selftrain::detail::stage_key(c.seed, 0));
        selftrain::train_field(f, data.train, nullptr, c, selftrain::detail::stage_key(c.seed, 100), c.teacher_steps);
        field::save_checkpoint(fs::path(common.out) / "field.ckpt", f, c.teacher_steps, selftrain::checkpoint_header(c));
        const auto rep = metric_report(selftrain::evaluate(f, eval_set, c.bins, c.threads, c.background), seconds_since(t0));
        io::write_text_atomic(fs::path(common.out) / "report.json", rep.dump(2));
        std::cout << json{{"mean_psnr", rep["mean_psnr"]}, {"mean_ssim", rep["mean_ssim"]}}.dump() << "\n";
        return 0;
      }
      selftrain::SelfTrainInputs in;
      in.known = data.train;
      in.held_out = eval_set;
      in.oracle = data.oracle ? &*data.oracle : nullptr;
      in.run_dir = fs::path(common.out);
      const auto result = selftrain::self_train(in, c, log_line);
      const auto& last = result.reports.back();
      std::cout << json{{"teacher_psnr", result.reports.front().teacher.mean_psnr},
                        {"student_psnr", last.student.mean_psnr},
                        {"iterations", result.reports.size()}}
                       .dump()
                << "\n";
      return 0;
    }

    if (command == "render") {
      if (common.out.empty()) throw UsageError("--out is required");
      const auto ck = field::load_checkpoint<float>(ckpt);
      std::vector<std::pair<std::string, Camera>> cams;
      if (!pose.empty()) {
        std::vector<double> v;
        std::stringstream ss(pose);
        for (std::string tok; std::getline(ss, tok, ',');) v.push_back(std::stod(tok));
        if (v.size() < 2 || v.size() > 3) throw UsageError("--pose expects phi,theta[,radius]");
        scene::PoseSpec p{v[0], v[1], v.size() == 3 ? v[2] : 4.0};
        cams.emplace_back("pose", scene::make_camera(p, scene::CameraModel{}));
      } else if (!data_dir.empty()) {
        const auto ds = scene::read_dataset(data_dir);
        for (const auto& f : ds.frames) cams.emplace_back(fs::path(f.file_path).filename().string(), f.camera);
      } else {
        throw UsageError("render needs --pose or --data");
      }
      fs::create_directories(common.out);
      render::RenderOptions ro;
      ro.bins = bins.value_or(cfg.value("bins", 48));
      ro.threads = common.threads;
      for (const auto& [name, cam] : cams) {
        const auto v = render::render_view(ck.field, cam, ro);
        io::write_png(fs::path(common.out) / (name + ".png"), v.color);
        io::write_pfm(fs::path(common.out) / (name + "_depth.pfm"), v.depth);
        io::write_pfm(fs::path(common.out) / (name + "_opacity.pfm"), v.opacity);
      }
      std::cout << json{{"rendered", cams.size()}, {"out", common.out}}.dump() << "\n";
      return 0;
    }

    if (command == "eval") {
      const auto ck = field::load_checkpoint<float>(ckpt);
      const auto data = load_data(data_dir, train_views, resolve_seed(common, cfg), split_bound);
      const auto& set = data.held_out.empty() ? data.train : data.held_out;
      const auto rep = metric_report(
          selftrain::evaluate(ck.field, set, bins.value_or(cfg.value("bins", 48)), common.threads), seconds_since(t0));
      if (!common.out.empty()) io::write_text_atomic(common.out, rep.dump(2));
      std::cout << rep.dump() << "\n";
      return 0;
    }

    if (command == "mask-eval") {
      const auto m = reliability::mask_metrics(io::read_png(pred), io::read_png(gt));
      const json j = {{"precision", m.precision}, {"recall", m.recall}, {"fpr", m.fpr},
                      {"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}};
      if (!common.out.empty()) io::write_text_atomic(common.out, j.dump(2));
      std::cout << j.dump() << "\n";
      return 0;
    }

    if (command == "grad-check") {
      json out = json::object();
      auto run = [&]<class T>(const std::string& name) {
        const auto r = selftrain::student_grad_check<T>(gc_rays, gc_bins, resolve_seed(common, cfg));
        out[name] = {{"max_relative_error", r.max_relative_error},
                     {"worst_parameter", r.worst_parameter},
                     {"worst_index", r.worst_index},
                     {"coordinates", r.coordinates}};
      };
      if (precision != "double") run.operator()<float>("float");
      if (precision != "float") run.operator()<double>("double");
      if (!common.out.empty()) io::write_text_atomic(common.out, out.dump(2));
      std::cout << out.dump() << "\n";
      return 0;
    }
    throw UsageError("unknown subcommand");
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"command", command}, {"message", e.what()}}.dump() << "\n"
              << app.help();
    return 2;
  } catch (const UsageError& e) {
    std::cerr << json{{"error", "usage"}, {"command", command}, {"message", e.what()}}.dump() << "\n"
              << app.help();
    return 2;
  } catch (const IoError& e) {
    std::cerr << json{{"error", "io"}, {"command", command}, {"message", e.what()}}.dump() << "\n" << app.help();
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << json{{"error", "invalid_input"}, {"command", command}, {"message", e.what()}}.dump() << "\n"
              << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "runtime"}, {"command", command}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}
