// quadrank command-line tool: train, detect, eval, bench, make-fixtures,
// inspect-model.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "quadrank/quadrank.hpp"

namespace {

using namespace quadrank;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> parse_budgets(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v < 1) throw CLI::ValidationError("--budgets", "bad budget '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw CLI::ValidationError("--budgets", "empty budget list");
  return out;
}

// "dog", "random" (seeded) or a model file.
NamedModel resolve_model(const std::string& spec, std::uint64_t seed) {
  if (spec == "dog") return {"dog", make_dog_model()};
  if (spec == "random") return {"random", make_random_model(seed)};
  return {std::filesystem::path(spec).stem().string(), load_model(spec)};
}

TransformRole parse_role(const std::string& s) {
  if (s == "invariance") return TransformRole::invariance;
  if (s == "augmentation") return TransformRole::augmentation;
  return TransformRole::frozen;
}

void print_config(const std::string& cmd,
                  const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cout << "quadrank " << kVersion << " " << cmd << "\n";
  for (const auto& [k, v] : kv) std::cout << "  " << k << " = " << v << "\n";
  std::cout.flush();
}

std::string str(std::uint64_t v) { return std::to_string(v); }
std::string str(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%g", v);
  return b;
}

struct TrainArgs {
  std::string arch = "linear";
  std::size_t epochs = 200;
  std::size_t batch = 256;
  std::size_t quads = 2000;
  std::uint64_t seed = 0;
  std::string source = "warp-small";
  std::string images;
  std::string pairs;
  std::string out;
  std::string log;
  bool log_timing = false;
  std::size_t checkpoint_every = 0;
  std::string checkpoint_dir;
  std::string resume;
  std::string rotation = "invariance";
  std::string scale = "augmentation";
  std::size_t heldout_every = 10;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.arch = a.arch;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.quads_per_pair = a.quads;
  cfg.seed = a.seed;
  cfg.heldout_every = a.heldout_every;
  cfg.sampling.rotation = parse_role(a.rotation);
  cfg.sampling.scale = parse_role(a.scale);
  cfg.checkpoint_every = a.checkpoint_every;
  if (a.checkpoint_every > 0) {
    cfg.checkpoint_dir = a.checkpoint_dir.empty()
                             ? std::filesystem::path(a.out).parent_path()
                             : std::filesystem::path(a.checkpoint_dir);
    if (cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = ".";
    cfg.checkpoint_stem = std::filesystem::path(a.out).stem().string();
  }
  if (!a.resume.empty()) cfg.resume_from = a.resume;

  std::vector<PairSource> sources;
  if (a.source == "aligned") {
    if (a.pairs.empty()) throw CLI::RequiredError("--pairs (required for --source aligned)");
    for (auto& p : load_pairs(a.pairs)) {
      sources.push_back(fixed_source(std::make_shared<const CorrespondencePair>(
          make_aligned_pair(std::move(p.image_a), std::move(p.image_b)))));
    }
  } else {
    if (a.images.empty()) throw CLI::RequiredError("--images (required for warp sources)");
    auto imgs = std::make_shared<const std::vector<GrayImage>>(load_images(a.images));
    sources.push_back(warp_source(imgs, a.source == "warp-large" ? kLargeWarpMax : kSmallWarpMax));
  }

  print_config("train", {{"arch", a.arch},
                         {"epochs", str(std::uint64_t(a.epochs))},
                         {"batch", str(std::uint64_t(a.batch))},
                         {"quads_per_pair", str(std::uint64_t(a.quads))},
                         {"source", a.source},
                         {"rotation", a.rotation},
                         {"scale", a.scale},
                         {"sources", str(std::uint64_t(sources.size()))},
                         {"resume", a.resume.empty() ? "-" : a.resume},
                         {"out", a.out},
                         {"seed", str(a.seed)}});
  const auto res = train(cfg, sources, [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %zu loss %.6f misrank %.4f (%.2fs)\n", r.epoch, r.mean_loss,
                 r.misrank_fraction, r.wall_seconds);
  });
  const TrainingState ts{cfg.epochs, res.optimizer};
  save_model(res.model, a.out, &ts);
  if (!a.log.empty()) write_file_atomic(a.log, train_log_csv(res.log, a.seed, a.log_timing));
  std::printf("held-out misrank %.4f -> %.4f\n", res.log.initial_heldout_misrank(),
              res.log.final_heldout_misrank());
  return 0;
}

struct DetectArgs {
  std::string model;
  std::string image;
  std::size_t n = 100;
  double threshold = 0;
  std::uint64_t seed = 0;
  int octaves = 0;
  std::string out;
  std::string heatmaps;
};

int run_detect(const DetectArgs& a) {
  print_config("detect", {{"model", a.model},
                          {"image", a.image},
                          {"n", str(std::uint64_t(a.n))},
                          {"threshold", str(a.threshold)},
                          {"octaves", a.octaves > 0 ? str(std::uint64_t(a.octaves)) : "auto"},
                          {"out", a.out},
                          {"seed", str(a.seed)}});
  const NamedModel m = resolve_model(a.model, a.seed);
  const GrayImage img = load_image(a.image);
  DetectOptions opt;
  opt.octaves = a.octaves > 0 ? a.octaves : auto_octaves(img.width(), img.height());
  const ScalePyramid pyr = build_pyramid(img, opt.octaves, opt.scales_per_octave, opt.sigma0);
  const ResponseVolume vol = compute_volume(m.model, pyr);
  const auto dets = detect_in_volume(vol, a.n, a.threshold);
  write_file_atomic(a.out, detections_csv(dets, a.seed));
  if (!a.heatmaps.empty()) {
    save_volume_heatmaps(vol, a.heatmaps, std::filesystem::path(a.image).stem().string());
  }
  std::printf("%zu detections\n", dets.size());
  return 0;
}

struct BenchArgs {
  std::string models = "dog,random";
  std::string pairs;
  std::string budgets = "50,100,200";
  std::uint64_t seed = 0;
  std::string out;
};

int run_bench(const std::string& cmd, const BenchArgs& a) {
  const auto budgets = parse_budgets(a.budgets);
  print_config(cmd, {{"models", a.models},
                     {"pairs", a.pairs},
                     {"budgets", a.budgets},
                     {"out", a.out},
                     {"seed", str(a.seed)}});
  std::vector<NamedModel> models;
  for (const auto& spec : split_list(a.models)) models.push_back(resolve_model(spec, a.seed));
  if (models.empty()) throw CLI::ValidationError("--models", "no models given");
  const auto pairs = load_pairs(a.pairs);
  const auto rows = bench_matrix(models, pairs, budgets);
  write_file_atomic(a.out, bench_csv(rows, a.seed));
  for (const auto& m : models) {
    for (std::size_t b : budgets) {
      std::printf("%-16s budget %4zu  mean repeatability %.4f\n", m.name.c_str(), b,
                  mean_repeatability(rows, m.name, b));
    }
  }
  return 0;
}

struct FixtureArgs {
  std::string out;
  std::uint64_t seed = 0;
  int base_images = 5;
  int train_images = 5;
  int size = 256;
};

int run_make_fixtures(const FixtureArgs& a) {
  print_config("make-fixtures", {{"out", a.out},
                                 {"base_images", str(std::uint64_t(a.base_images))},
                                 {"train_images", str(std::uint64_t(a.train_images))},
                                 {"size", str(std::uint64_t(a.size))},
                                 {"seed", str(a.seed)}});
  FixtureOptions opt;
  opt.base_images = a.base_images;
  opt.train_images = a.train_images;
  opt.size = a.size;
  const auto suite = make_fixture_suite(a.seed, opt);
  write_fixture_suite(suite, a.out);
  std::printf("%zu pairs, %zu training images\n", suite.pairs.size(), suite.train_images.size());
  return 0;
}

int run_inspect(const std::string& path) {
  const ModelFile f = load_model_file(path);
  std::printf("file          %s\n", path.c_str());
  std::printf("version       %u\n", f.version);
  std::printf("architecture  %s\n", f.model.architecture().c_str());
  std::printf("parameters    %zu\n", f.model.param_count());
  std::printf("buffers       %zu\n", f.model.buffers().size());
  const auto& shapes = f.model.shapes();
  for (std::size_t k = 0; k < f.model.layers().size(); ++k) {
    std::printf("  %-14s -> %d x %d x %d\n", f.model.layers()[k].notation().c_str(), shapes[k + 1].c,
                shapes[k + 1].h, shapes[k + 1].w);
  }
  if (f.training) {
    std::printf("training      epoch %llu, adadelta rho %g eps %g\n",
                static_cast<unsigned long long>(f.training->epoch), f.training->optimizer.rho,
                f.training->optimizer.epsilon);
  } else {
    std::printf("training      none\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quadrank: learned scale-space interest point detectors"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a response model");
  train_cmd->add_option("--arch", ta.arch, "Preset name or layer notation")->capture_default_str();
  train_cmd->add_option("--epochs", ta.epochs, "Epochs (one pair per epoch)")->capture_default_str();
  train_cmd->add_option("--batch", ta.batch, "Quadruples per batch")->capture_default_str();
  train_cmd->add_option("--quads", ta.quads, "Quadruples drawn per pair")->capture_default_str();
  train_cmd->add_option("--seed", ta.seed, "Random seed")->capture_default_str();
  train_cmd->add_option("--source", ta.source, "Correspondence source")
      ->check(CLI::IsMember({"warp-small", "warp-large", "aligned"}))
      ->capture_default_str();
  train_cmd->add_option("--images", ta.images, "Training image or directory (warp sources)");
  train_cmd->add_option("--pairs", ta.pairs, "Pair manifest or directory (aligned source)");
  train_cmd->add_option("--out", ta.out, "Output model file")->required();
  train_cmd->add_option("--log", ta.log, "Training log CSV");
  train_cmd->add_flag("--log-timing", ta.log_timing, "Include wall time in the log");
  train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint cadence in epochs");
  train_cmd->add_option("--checkpoint-dir", ta.checkpoint_dir, "Checkpoint directory");
  train_cmd->add_option("--resume", ta.resume, "Resume from a checkpoint");
  train_cmd->add_option("--heldout-every", ta.heldout_every, "Held-out evaluation cadence")
      ->capture_default_str();
  train_cmd->add_option("--rotation", ta.rotation, "Rotation role")
      ->check(CLI::IsMember({"invariance", "augmentation", "frozen"}))
      ->capture_default_str();
  train_cmd->add_option("--scale", ta.scale, "Scale role")
      ->check(CLI::IsMember({"invariance", "augmentation", "frozen"}))
      ->capture_default_str();

  DetectArgs da;
  auto* detect_cmd = app.add_subcommand("detect", "Detect interest points in one image");
  detect_cmd->add_option("--model", da.model, "Model file, 'dog' or 'random'")->required();
  detect_cmd->add_option("--image", da.image, "Input PGM/PPM/PNG")->required();
  detect_cmd->add_option("--n", da.n, "Number of points")->check(CLI::PositiveNumber)->capture_default_str();
  detect_cmd->add_option("--threshold", da.threshold, "Minimum |response|")->capture_default_str();
  detect_cmd->add_option("--seed", da.seed, "Seed for the random model")->capture_default_str();
  detect_cmd->add_option("--octaves", da.octaves, "Octave count (0: automatic)")->capture_default_str();
  detect_cmd->add_option("--out", da.out, "Output CSV")->required();
  detect_cmd->add_option("--heatmaps", da.heatmaps, "Directory for per-level response heat maps");

  BenchArgs ea;
  std::string eval_model;
  std::size_t eval_n = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Repeatability of one model on pairs");
  eval_cmd->add_option("--model", eval_model, "Model file, 'dog' or 'random'")->required();
  eval_cmd->add_option("--pairs", ea.pairs, "Pair manifest or directory")->required();
  auto* eval_n_opt = eval_cmd->add_option("--n", eval_n, "Single budget")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--budgets", ea.budgets, "Comma-separated budgets")
      ->excludes(eval_n_opt)
      ->capture_default_str();
  eval_cmd->add_option("--seed", ea.seed, "Seed for the random model")->capture_default_str();
  eval_cmd->add_option("--out", ea.out, "Output CSV")->required();

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Repeatability matrix over models and budgets");
  bench_cmd->add_option("--models", ba.models, "Comma-separated: dog, random, model files")
      ->capture_default_str();
  bench_cmd->add_option("--pairs", ba.pairs, "Pair manifest or directory")->required();
  bench_cmd->add_option("--budgets", ba.budgets, "Comma-separated budgets")->capture_default_str();
  bench_cmd->add_option("--seed", ba.seed, "Seed for the random model")->capture_default_str();
  bench_cmd->add_option("--out", ba.out, "Output CSV")->required();

  FixtureArgs fa;
  auto* fix_cmd = app.add_subcommand("make-fixtures", "Generate the synthetic evaluation suite");
  fix_cmd->add_option("--out", fa.out, "Output directory")->required();
  fix_cmd->add_option("--seed", fa.seed, "Random seed")->capture_default_str();
  fix_cmd->add_option("--base-images", fa.base_images, "Base images")->check(CLI::Range(1, 1000))->capture_default_str();
  fix_cmd->add_option("--train-images", fa.train_images, "Training images")->check(CLI::Range(0, 1000))->capture_default_str();
  fix_cmd->add_option("--size", fa.size, "Image side in pixels")->check(CLI::Range(64, 4096))->capture_default_str();

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect-model", "Print a model file summary");
  inspect_cmd->add_option("--model", inspect_path, "Model file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return run_train(ta);
    if (*detect_cmd) return run_detect(da);
    if (*eval_cmd) {
      ea.models = eval_model;
      if (eval_n > 0) ea.budgets = std::to_string(eval_n);
      return run_bench("eval", ea);
    }
    if (*bench_cmd) return run_bench("bench", ba);
    if (*fix_cmd) return run_make_fixtures(fa);
    if (*inspect_cmd) return run_inspect(inspect_path);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
