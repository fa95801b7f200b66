// fullglow: data generation, training, sampling, content transfer, bpd and verification.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fullglow/acceptance.hpp"
#include "fullglow/config.hpp"
#include "fullglow/training.hpp"

namespace fs = std::filesystem;
using namespace fullglow;

namespace {

enum ExitCode { ok = 0, usage = 1, validation = 2, numerical = 3, io = 4 };

struct Options {
  // gen-data
  std::size_t n = 64, size = 32, classes = kNumClasses;
  std::uint64_t seed = 0;
  std::string out;
  // train
  std::string config, data, resume, log;
  std::vector<std::string> overrides;
  // sample / transfer / bpd
  std::string ckpt, cond, cond_instances;
  double temperature = -1.0;  // < 0: use the model's configured default
  std::string content_photo, content_seg, target_seg;
  // verify
  bool quick = false;
  std::vector<int> only;
};

// Without an instance map every distinct color counts as one instance.
Tensor<float> boundary_for(const Image8& seg, const std::string& instances_path) {
  const InstanceMap ids = instances_path.empty() ? instances_from_colors(seg) : read_pgm16(instances_path);
  return boundary_tensor<float>(boundary_map(ids));
}

bool uses_boundary(const ModelConfig& c) { return c.use_boundary && c.conditioning != ConditioningMode::unconditional; }

void check_image(const ModelConfig& c, const Image8& img, const std::string& what) {
  if (img.channels != c.in_channels || img.height != c.image_size || img.width != c.image_size) {
    throw ConfigError(what + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                      ", the model expects " + std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  }
}

int gen_data(const Options& o) {
  if (o.size < 8) throw ConfigError("--size must be at least 8");
  std::vector<PairedSample> samples(o.n);
  const auto count = static_cast<std::ptrdiff_t>(o.n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    samples[static_cast<std::size_t>(i)] = generate_scene(o.seed + static_cast<std::uint64_t>(i), o.size, o.classes);
  }
  write_dataset(o.out, samples);
  std::cout << "wrote " << o.n << " pairs to " << (fs::path(o.out) / "pairs").string() << '\n';
  return ok;
}

int train_cmd(const Options& o) {
  std::map<std::string, std::string> values;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw IoError("cannot open config " + o.config);
    std::ostringstream ss;
    ss << in.rdbuf();
    values = parse_key_values(ss.str());
  }
  // Command-line overrides win over the file.
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    values[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  RunConfig run = apply_run_config(RunConfig{}, values);
  const std::vector<PairedSample> data = read_dataset(o.data);

  std::optional<LoadedCheckpoint<float>> resumed;
  if (!o.resume.empty()) resumed.emplace(load_checkpoint<float>(o.resume));
  FullGlow<float> fresh_model(resumed ? resumed->model.config() : run.model);
  FullGlow<float>& model = resumed ? resumed->model : fresh_model;
  TrainState<float> fresh_state;
  TrainState<float>& state = resumed ? resumed->state : fresh_state;
  if (resumed && model_config_text(model.config()) != model_config_text(run.model) && !o.config.empty()) {
    std::cerr << "note: model settings come from the resumed checkpoint\n";
  }

  const std::string log_path = o.log.empty() ? o.out + ".csv" : o.log;
  TrainHooks<float> hooks;
  hooks.on_record = [&](const LossRecord& r) {
    if (r.iteration % 50 == 0 || r.iteration + 1 == run.train.iterations) {
      std::cout << "iter " << r.iteration << " loss " << r.loss << " bpd_source " << r.bpd_source << " bpd_target "
                << r.bpd_target << std::endl;
    }
  };
  hooks.on_checkpoint = [&](const FullGlow<float>& m, const TrainState<float>& s) { save_checkpoint(o.out, m, s); };
  const auto trace = train(model, state, data, run.train, hooks);
  write_loss_csv(log_path, trace);
  std::cout << "checkpoint " << o.out << ", loss trace " << log_path << '\n';
  return ok;
}

int sample_cmd(const Options& o) {
  auto loaded = load_checkpoint<float>(o.ckpt);
  FullGlow<float>& model = loaded.model;
  const ModelConfig& c = model.config();
  const double temperature = o.temperature < 0 ? c.temperature : o.temperature;
  const Image8 seg = read_ppm(o.cond);
  check_image(c, seg, o.cond);
  const Tensor<float> x_a = bin_centers<float>(seg);
  const Tensor<float> bnd = uses_boundary(c) ? boundary_for(seg, o.cond_instances) : Tensor<float>();
  fs::create_directories(o.out);
  std::mt19937_64 rng(o.seed);
  for (std::size_t k = 0; k < o.n; ++k) {
    const Tensor<float> x = model.sample(x_a, temperature, rng, uses_boundary(c) ? &bnd : nullptr);
    const fs::path path = fs::path(o.out) / ("sample_" + std::to_string(k) + ".ppm");
    write_ppm(path, quantize(x));
    std::cout << path.string() << '\n';
  }
  return ok;
}

int transfer_cmd(const Options& o) {
  auto loaded = load_checkpoint<float>(o.ckpt);
  FullGlow<float>& model = loaded.model;
  const ModelConfig& c = model.config();
  const Image8 photo = read_ppm(o.content_photo), seg1 = read_ppm(o.content_seg), seg2 = read_ppm(o.target_seg);
  check_image(c, photo, o.content_photo);
  check_image(c, seg1, o.content_seg);
  check_image(c, seg2, o.target_seg);
  Tensor<float> b1, b2;
  if (uses_boundary(c)) {
    b1 = boundary_for(seg1, "");
    b2 = boundary_for(seg2, "");
  }
  const Tensor<float> out =
      model.content_transfer(bin_centers<float>(seg1), bin_centers<float>(photo), bin_centers<float>(seg2),
                             uses_boundary(c) ? &b1 : nullptr, uses_boundary(c) ? &b2 : nullptr);
  write_ppm(o.out, quantize(out));
  std::cout << o.out << '\n';
  return ok;
}

int bpd_cmd(const Options& o) {
  auto loaded = load_checkpoint<float>(o.ckpt);
  const std::vector<PairedSample> data = read_dataset(o.data);
  for (const auto& s : data) check_image(loaded.model.config(), s.photo, "dataset image");
  std::cout << mean_bpd(loaded.model, data, o.seed) << '\n';
  return ok;
}

int verify_cmd(const Options& o) {
  AcceptanceOptions a;
  a.quick = o.quick;
  a.only = o.only;
  return run_acceptance(a, std::cout) ? ok : numerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional Glow for paired image translation"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Write synthetic segmentation/photo pairs");
  gen->add_option("--n", o.n, "Number of pairs")->check(CLI::PositiveNumber);
  gen->add_option("--size", o.size, "Image side length");
  gen->add_option("--seed", o.seed, "First scene seed");
  gen->add_option("--classes", o.classes, "Palette classes in use (2-8)")->check(CLI::Range(2, 8));
  gen->add_option("--out", o.out, "Dataset root")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", o.config, "key=value config file")->check(CLI::ExistingFile);
  tr->add_option("--data", o.data, "Dataset root")->required();
  tr->add_option("--out", o.out, "Checkpoint path")->required();
  tr->add_option("--set", o.overrides, "Override a config key (key=value), repeatable");
  tr->add_option("--resume", o.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--log", o.log, "Loss trace CSV (default <out>.csv)");

  auto* sa = app.add_subcommand("sample", "Sample photos for a segmentation image");
  sa->add_option("--ckpt", o.ckpt)->required();
  sa->add_option("--cond", o.cond, "Segmentation image (P6)")->required();
  sa->add_option("--cond-instances", o.cond_instances, "Instance map (P5) for boundary maps");
  sa->add_option("--temperature", o.temperature, "Latent standard deviation (default: model setting)");
  sa->add_option("--n", o.n, "Number of samples")->check(CLI::PositiveNumber);
  sa->add_option("--seed", o.seed);
  sa->add_option("--out", o.out, "Output directory")->required();

  auto* tf = app.add_subcommand("transfer", "Move a photo's content onto a new segmentation");
  tf->add_option("--ckpt", o.ckpt)->required();
  tf->add_option("--content-photo", o.content_photo)->required();
  tf->add_option("--content-seg", o.content_seg)->required();
  tf->add_option("--target-seg", o.target_seg)->required();
  tf->add_option("--out", o.out, "Output image (P6)")->required();

  auto* bp = app.add_subcommand("bpd", "Mean conditional bits per dimension over a dataset");
  bp->add_option("--ckpt", o.ckpt)->required();
  bp->add_option("--data", o.data)->required();
  bp->add_option("--seed", o.seed, "Dequantization noise seed");

  auto* ve = app.add_subcommand("verify", "Run the acceptance suite");
  ve->add_flag("--quick", o.quick, "Skip the training experiments");
  ve->add_option("--only", o.only, "Criterion ids to run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }
  if (sa->parsed() && o.temperature < 0 && sa->count("--temperature")) {
    std::cerr << "validation error: --temperature must be >= 0\n";
    return validation;
  }

  try {
    if (gen->parsed()) return gen_data(o);
    if (tr->parsed()) return train_cmd(o);
    if (sa->parsed()) return sample_cmd(o);
    if (tf->parsed()) return transfer_cmd(o);
    if (bp->parsed()) return bpd_cmd(o);
    if (ve->parsed()) return verify_cmd(o);
  } catch (const ConfigError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return validation;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return usage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return numerical;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return io;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io;
  }
  return usage;
}
