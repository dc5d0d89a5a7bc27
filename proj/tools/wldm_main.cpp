// wldm: phantom generation, autoencoder pretraining, diffusion training,
// sampling, evaluation and the four-arm ablation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "wldm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace wldm;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kUsage = 2, kIo = 3, kParse = 4, kContract = 5 };

struct Resolved {
  RunConfig config;
  std::string data;
  std::string out;
};

// Config validation and env overrides happen before any compute.
Resolved resolve(const std::string& config_path, const std::string& data, const std::string& out,
                 const std::string& default_subdir) {
  Resolved r;
  r.config = config_path.empty() ? RunConfig{} : load_config(config_path);
  apply_env_overrides(r.config);
  r.data = data.empty() ? r.config.data_dir : data;
  r.out = out.empty() ? (fs::path(r.config.output_dir) / default_subdir).string() : out;
  r.config.data_dir = r.data;
  r.config.output_dir = r.out;
  return r;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

Progress logger() {
  return [](const std::string& m) { spdlog::info("{}", m); };
}

// Config stored next to a checkpoint, unless one is given explicitly.
RunConfig config_near(const std::string& explicit_path, const std::string& ckpt) {
  if (!explicit_path.empty()) return load_config(explicit_path);
  const fs::path p = fs::path(ckpt).parent_path() / "config.toml";
  if (!fs::exists(p)) throw IoError("no config.toml next to " + ckpt + "; pass --config");
  return load_config(p.string());
}

int cmd_phantom(std::int64_t count, std::int64_t size, std::uint64_t seed, const std::string& out) {
  if (count < 2) throw ConfigError("--count must be at least 2");
  const std::int64_t train = count * 4 / 5;
  const Dataset d = make_dataset(seed, size, train, count - train);
  write_dataset(out, d, seed);
  spdlog::info("wrote {} train / {} eval phantoms of size {} to {}", d.train.size(), d.eval.size(), size, out);
  return kOk;
}

int cmd_pretrain(const std::string& config_path, const std::string& data, const std::string& out,
                 const std::string& resume) {
  const Resolved r = resolve(config_path, data, out, "pretrain");
  RunLock lock(r.out);
  save_config((fs::path(r.out) / "config.toml").string(), r.config);
  const Dataset d = read_dataset(r.data);
  const ArmSettings arm = arm_settings(r.config);
  AutoencoderModel model(autoencoder_config(r.config), r.config.seed, AdamConfig{r.config.ae_lr},
                         AdamConfig{r.config.disc_lr, 0.5, 0.999});
  if (!resume.empty()) {
    model.load(read_checkpoint(resume));
    spdlog::info("resuming from step {}", model.step);
  }
  const std::int64_t total = r.config.ae_epochs * r.config.ae_steps_per_epoch;
  const auto logs = pretrain(model, r.config, arm, d.train, std::max<std::int64_t>(0, total - model.step), logger());
  std::ofstream log(fs::path(r.out) / "pretrain_log.txt", resume.empty() ? std::ios::trunc : std::ios::app);
  if (resume.empty()) log << "epoch rec kl structure modality disentangle adv_gen adv_disc total\n";
  for (const auto& e : logs)
    log << e.epoch << ' ' << e.mean.rec << ' ' << e.mean.kl << ' ' << e.mean.structure << ' ' << e.mean.modality
        << ' ' << e.mean.disentangle << ' ' << e.mean.adv_gen << ' ' << e.mean.adv_disc << ' ' << e.mean.total
        << '\n';
  write_checkpoint((fs::path(r.out) / "autoencoder.wck").string(), model.state());
  spdlog::info("autoencoder checkpoint written to {}", r.out);
  return kOk;
}

int cmd_train_diffusion(const std::string& config_path, const std::string& data, const std::string& ae_ckpt,
                        const std::string& out) {
  const Resolved r = resolve(config_path, data, out, "diffusion");
  RunLock lock(r.out);
  save_config((fs::path(r.out) / "config.toml").string(), r.config);
  const Dataset d = read_dataset(r.data);
  // Frozen autoencoder: loaded, never handed to an optimizer.
  AutoencoderModel ae(autoencoder_config(r.config), r.config.seed);
  ae.load(read_checkpoint(ae_ckpt));
  DenoiserModel dn(denoiser_config(r.config), r.config.seed, AdamConfig{r.config.dn_lr});
  dn.norm = fit_latent_norm(*ae.ae, d.train);
  const auto losses = train_denoiser(dn, r.config, encode_pairs(*ae.ae, d.train, dn.norm), logger());
  std::ofstream log(fs::path(r.out) / "diffusion_log.txt");
  log << "epoch loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) log << i << ' ' << losses[i] << '\n';
  write_checkpoint((fs::path(r.out) / "denoiser.wck").string(), dn.state());
  fs::copy_file(ae_ckpt, fs::path(r.out) / "autoencoder.wck", fs::copy_options::overwrite_existing);
  spdlog::info("denoiser checkpoint written to {}", r.out);
  return kOk;
}

int cmd_sample(const std::string& mr_path, const std::string& ae_ckpt, const std::string& dn_ckpt,
               std::optional<std::int64_t> steps, std::uint64_t seed, const std::string& out,
               const std::string& config_path) {
  RunConfig cfg = config_near(config_path, dn_ckpt);
  if (steps) {
    if (*steps < 1 || *steps > cfg.T) throw ConfigError("--steps must lie in [1, T]");
    cfg.inference_steps = *steps;
  }
  const auto ae_entries = read_checkpoint(ae_ckpt);
  const auto dn_entries = read_checkpoint(dn_ckpt);
  const Tensor mr = read_volume(mr_path);
  AutoencoderModel ae(autoencoder_config(cfg), cfg.seed);
  ae.load(ae_entries);
  DenoiserModel dn(denoiser_config(cfg), cfg.seed);
  dn.load(dn_entries);
  Rng rng(seed, 0x53414d50ULL);
  const Tensor ct = synthesize(*ae.ae, dn, schedule_of(cfg), mr, rng);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_volume(out, ct);
  spdlog::info("synthetic CT written to {}", out);
  return kOk;
}

int cmd_eval(const std::string& pred, const std::string& ref, const std::string& labels, const std::string& out) {
  const Tensor p = read_volume(pred);
  const Tensor r = read_volume(ref);
  std::optional<LabelVolume> l;
  if (!labels.empty()) l = read_labels(labels);
  bool flat = false;
  ncc(p, r, &flat);
  if (flat) spdlog::warn("a volume is constant; NCC reported as 0");
  const MetricReport m = evaluate_volume(p, r, l ? &*l : nullptr);
  std::cout << report_text(m);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "metrics.txt", report_text(m));
    write_text(fs::path(out) / "metrics.json", report_json(m));
  }
  return kOk;
}

int cmd_ablate(const std::string& config_path, const std::string& data, const std::string& out) {
  const Resolved r = resolve(config_path, data, out, "ablation");
  RunLock lock(r.out);
  save_config((fs::path(r.out) / "config.toml").string(), r.config);
  const Dataset d = read_dataset(r.data);
  const auto results = run_ablation(r.config, d, r.out, logger());
  std::cout << ablation_table(results);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D wavelet latent diffusion for MR to CT translation on phantoms"};
  app.require_subcommand(1);

  std::int64_t count = 250, size = 32;
  std::uint64_t seed = 7;
  std::string out, config, data, ae_ckpt, dn_ckpt, mr, pred, ref, labels, resume;
  std::optional<std::int64_t> steps;

  auto* phantom = app.add_subcommand("phantom", "generate a paired phantom dataset");
  phantom->add_option("--count", count, "number of patients (4:1 train/eval split)");
  phantom->add_option("--size", size, "volume extent (16, 32 or 64)");
  phantom->add_option("--seed", seed, "generator seed");
  phantom->add_option("--out", out, "dataset directory")->required();

  auto* pre = app.add_subcommand("pretrain", "train the autoencoder");
  pre->add_option("--config", config, "run config (TOML)");
  pre->add_option("--data", data, "dataset directory");
  pre->add_option("--out", out, "run directory");
  pre->add_option("--resume", resume, "continue from an autoencoder checkpoint");

  auto* diff = app.add_subcommand("train-diffusion", "train the latent denoiser with a frozen autoencoder");
  diff->add_option("--config", config, "run config (TOML)");
  diff->add_option("--data", data, "dataset directory");
  diff->add_option("--ae-ckpt", ae_ckpt, "autoencoder checkpoint")->required();
  diff->add_option("--out", out, "run directory");

  auto* smp = app.add_subcommand("sample", "synthesize a CT volume from an MR volume");
  smp->add_option("--mr", mr, "input MR volume (.wvl)")->required();
  smp->add_option("--ae-ckpt", ae_ckpt, "autoencoder checkpoint")->required();
  smp->add_option("--dn-ckpt", dn_ckpt, "denoiser checkpoint")->required();
  smp->add_option("--steps", steps, "inference steps");
  smp->add_option("--seed", seed, "sampling seed");
  smp->add_option("--out", out, "output CT volume (.wvl)")->required();
  smp->add_option("--config", config, "run config (default: config.toml next to the denoiser checkpoint)");

  auto* ev = app.add_subcommand("eval", "compare a synthetic volume against the reference");
  ev->add_option("--pred", pred, "synthetic volume")->required();
  ev->add_option("--ref", ref, "reference volume")->required();
  ev->add_option("--labels", labels, "label volume for bone Dice");
  ev->add_option("--out", out, "report directory");

  auto* abl = app.add_subcommand("ablate", "train and evaluate the four ablation arms");
  abl->add_option("--config", config, "run config (TOML)");
  abl->add_option("--data", data, "dataset directory");
  abl->add_option("--out", out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (phantom->parsed()) return cmd_phantom(count, size, seed, out);
    if (pre->parsed()) return cmd_pretrain(config, data, out, resume);
    if (diff->parsed()) return cmd_train_diffusion(config, data, ae_ckpt, out);
    if (smp->parsed()) return cmd_sample(mr, ae_ckpt, dn_ckpt, steps, seed, out, config);
    if (ev->parsed()) return cmd_eval(pred, ref, labels, out);
    if (abl->parsed()) return cmd_ablate(config, data, out);
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kUsage;
  } catch (const IoError& e) {
    spdlog::error("io: {}", e.what());
    return kIo;
  } catch (const ParseError& e) {
    spdlog::error("parse: {}", e.what());
    return kParse;
  } catch (const ContractViolation& e) {
    spdlog::error("contract: {}", e.what());
    return kContract;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("io: {}", e.what());
    return kIo;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kOther;
  }
  return kOther;
}
