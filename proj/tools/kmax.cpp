// kmax: train, evaluate, ablate and visualize the toy k-means mask
// transformer.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "kmax/acceptance.hpp"
#include "kmax/inference.hpp"
#include "kmax/train.hpp"
#include "kmax/visualize.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string checkpoint;
  std::vector<std::string> overrides;
};

kmax::Config load_config(const CommonFlags& flags) {
  kmax::Config c = flags.config_path.empty() ? kmax::Config{} : kmax::Config::load(flags.config_path);
  for (const auto& kv : flags.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw kmax::ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw kmax::IoError("cannot write " + path.string());
  out << text;
}

int run_train(const CommonFlags& flags) {
  kmax::Config c = load_config(flags);
  if (flags.seed) c.train.seed = *flags.seed;
  kmax::TrainOptions opts;
  opts.out_dir = flags.out_dir.empty() ? "run" : flags.out_dir;
  opts.progress = &std::cerr;
  const kmax::TrainResult result = kmax::train_loop(c, opts);
  std::cout << kmax::format_report(result.final_eval);
  std::cerr << "wrote " << opts.out_dir << "/{metrics.csv,model.ckpt,config.txt}\n";
  return 0;
}

kmax::LoadedCheckpoint load_for_inference(const CommonFlags& flags) {
  if (flags.checkpoint.empty()) throw kmax::ArgumentError("--checkpoint is required");
  kmax::LoadedCheckpoint ckpt = kmax::load_checkpoint(flags.checkpoint);
  if (!flags.config_path.empty() || !flags.overrides.empty()) {
    // Data and inference settings may be overridden; the model section must
    // stay as trained.
    kmax::Config c = load_config(flags);
    c.model = ckpt.config.model;
    ckpt.config = c;
  }
  if (flags.seed) ckpt.config.data.val_seed = *flags.seed;
  return ckpt;
}

int run_eval(const CommonFlags& flags) {
  const kmax::LoadedCheckpoint ckpt = load_for_inference(flags);
  const kmax::Config& c = ckpt.config;
  const auto spec = kmax::SceneSpec::from_config(c.data, c.data.val_seed);
  const kmax::EvalReport report = kmax::evaluate(ckpt.model, spec, c.data.val_size,
                                                 kmax::MergeOptions::from_config(c.infer),
                                                 c.data.threads);
  const std::string text = kmax::format_report(report);
  std::cout << text;
  if (!flags.out_dir.empty()) {
    std::filesystem::create_directories(flags.out_dir);
    write_text(std::filesystem::path(flags.out_dir) / "report.txt", text);
  }
  return 0;
}

int run_visualize(const CommonFlags& flags, std::uint64_t index) {
  const kmax::LoadedCheckpoint ckpt = load_for_inference(flags);
  const kmax::Config& c = ckpt.config;
  const auto spec = kmax::SceneSpec::from_config(c.data, c.data.val_seed);
  const kmax::Sample sample = kmax::generate(spec, index);
  const std::string dir = flags.out_dir.empty() ? "vis" : flags.out_dir;
  const auto paths = kmax::write_visualizations(ckpt.model, sample.image, spec.class_table(),
                                                kmax::MergeOptions::from_config(c.infer), dir);
  std::filesystem::path input = std::filesystem::path(dir) / "input";
  kmax::write_ppm(input.string() + ".ppm", sample.image.height(), sample.image.width(),
                  kmax::image_to_rgb8(sample.image));
  for (const auto& p : paths) std::cout << p << "\n";
  return 0;
}

int run_ablate(const CommonFlags& flags, std::size_t seed_count) {
  kmax::Config base = load_config(flags);
  const std::uint64_t first = flags.seed.value_or(base.train.seed);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < seed_count; ++i) seeds.push_back(first + i);

  auto variant = [&](const std::string& name, auto edit) {
    kmax::Config c = base;
    edit(c);
    c.validate();
    return kmax::StudyVariant{name, c};
  };
  const std::vector<kmax::StudyVariant> kernels{
      variant("softmax", [](kmax::Config& c) { c.model.kernel = kmax::InteractionKernel::kSoftmax; }),
      variant("kmeans", [](kmax::Config& c) {
        c.model.kernel = kmax::InteractionKernel::kKMeans;
        c.model.kmeans_normalize = false;
      }),
      variant("kmeans-normalized", [](kmax::Config& c) {
        c.model.kernel = kmax::InteractionKernel::kKMeans;
        c.model.kmeans_normalize = true;
      })};
  const std::vector<kmax::StudyVariant> depths{
      variant("decoders (1,1,1)", [](kmax::Config& c) { c.model.schedule = {1, 1, 1}; }),
      variant("decoders (2,2,2)", [](kmax::Config& c) { c.model.schedule = {2, 2, 2}; }),
      variant("decoders (3,3,3)", [](kmax::Config& c) { c.model.schedule = {3, 3, 3}; })};

  std::string text = "pixel-cluster interaction (" + std::to_string(base.train.steps) + " steps)\n";
  text += kmax::format_study(kmax::run_study(kernels, seeds, &std::cerr));
  text += "\nnumber of decoders (" + std::string(kmax::to_string(base.model.kernel)) + ")\n";
  text += kmax::format_study(kmax::run_study(depths, seeds, &std::cerr));
  std::cout << text;
  if (!flags.out_dir.empty()) {
    std::filesystem::create_directories(flags.out_dir);
    write_text(std::filesystem::path(flags.out_dir) / "ablation.txt", text);
  }
  return 0;
}

int run_selftest(const CommonFlags& flags, bool quick) {
  kmax::AcceptanceOptions opts;
  opts.base = load_config(flags);
  opts.training = !quick;
  opts.progress = &std::cerr;
  if (flags.seed) opts.seeds = {*flags.seed, *flags.seed + 1, *flags.seed + 2};
  bool all = true;
  kmax::run_acceptance(opts, [&](const kmax::CriterionResult& r) {
    std::cout << kmax::format_criterion(r) << std::endl;
    all = all && r.passed;
  });
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"k-means mask transformer (toy scale)"};
  app.require_subcommand(1);
  CommonFlags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config_path, "Config file (key = value with sections)");
    sub->add_option("--seed", flags.seed, "Seed override");
    sub->add_option("--out", flags.out_dir, "Output directory");
    sub->add_option("--set", flags.overrides, "Config override, e.g. train.steps=200");
  };

  auto* train = app.add_subcommand("train", "Train a model and write checkpoint + metrics");
  add_common(train);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  add_common(eval);
  eval->add_option("--checkpoint", flags.checkpoint, "Checkpoint path")->required();

  std::size_t seed_count = 1;
  auto* ablate = app.add_subcommand("ablate", "Kernel and decoder-count ablations");
  add_common(ablate);
  ablate->add_option("--seeds", seed_count, "Number of consecutive seeds per variant")
      ->check(CLI::PositiveNumber);

  std::uint64_t index = 0;
  auto* visualize = app.add_subcommand("visualize", "Render per-stage cluster assignments");
  add_common(visualize);
  visualize->add_option("--checkpoint", flags.checkpoint, "Checkpoint path")->required();
  visualize->add_option("--index", index, "Validation scene index");

  bool quick = false;
  auto* selftest = app.add_subcommand("selftest", "Run the acceptance suite");
  add_common(selftest);
  selftest->add_flag("--quick", quick, "Skip the training criteria (7-9)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) return run_train(flags);
    if (*eval) return run_eval(flags);
    if (*ablate) return run_ablate(flags, seed_count);
    if (*visualize) return run_visualize(flags, index);
    if (*selftest) return run_selftest(flags, quick);
  } catch (const kmax::IoError& e) {
    std::cerr << "kmax: " << e.what() << "\n";
    return 2;
  } catch (const kmax::ConfigError& e) {
    std::cerr << "kmax: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "kmax: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
