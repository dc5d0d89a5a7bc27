#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "wldm/autoencoder.hpp"
#include "wldm/denoiser.hpp"
#include "wldm/diffusion.hpp"
#include "wldm/metrics.hpp"
#include "wldm/phantom.hpp"

namespace wldm {

// ---- configuration ----

enum class Arm { Vanilla, Wrm, WrmSmd, Full };

std::string arm_name(Arm arm);
Arm parse_arm(const std::string& name);

struct RunConfig {
  // [model]
  std::int64_t latent_channels = 8;
  std::vector<std::int64_t> ae_widths{8, 16, 32};
  std::int64_t base_width = 16;
  std::int64_t scales = 3;
  std::int64_t blocks_per_stage = 2;
  // [schedule]
  std::int64_t T = 1000;
  double beta1 = 1e-4;
  double betaT = 0.2;
  std::int64_t inference_steps = 50;
  // [loss]
  double alpha = 1e-6;
  double beta = 0.1;
  double gamma = 0.05;
  // [ablation]
  Arm arm = Arm::Full;
  // [train]
  std::uint64_t seed = 1234;
  std::int64_t crop = 32;
  bool augment = true;
  std::int64_t ae_epochs = 8;
  std::int64_t ae_steps_per_epoch = 50;
  double ae_lr = 1e-3;
  double disc_lr = 2e-4;
  std::int64_t dn_epochs = 60;
  std::int64_t dn_batch = 8;
  double dn_lr = 1e-3;
  // [data]
  std::uint64_t data_seed = 7;
  std::int64_t size = 32;
  std::int64_t train_count = 200;
  std::int64_t eval_count = 50;
  std::string data_dir = "data";
  std::string output_dir = "runs";

  bool operator==(const RunConfig&) const = default;
};

// TOML subset: [table] headers, key = value with integers, reals, booleans,
// double-quoted strings and flat integer arrays, '#' comments. Unknown tables
// or keys and out-of-range values raise ConfigError.
RunConfig parse_config(const std::string& text);
std::string serialize_config(const RunConfig& config);
RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& config);

// WLDM_DATA_ROOT and WLDM_OUTPUT_ROOT replace data_dir / output_dir.
void apply_env_overrides(RunConfig& config);

// Network switches implied by the ablation arm.
struct ArmSettings {
  bool ae_wrm = true;
  double beta = 0.1;
  bool dn_wrm = true;
  bool dn_dsca = true;
};
ArmSettings arm_settings(const RunConfig& config);

AutoencoderConfig autoencoder_config(const RunConfig& config);
DenoiserConfig denoiser_config(const RunConfig& config);
NoiseSchedule schedule_of(const RunConfig& config);

// ---- checkpoints (WCK1) ----

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& entries);
// Typed ParseError for bad magic, truncation, rank or trailing bytes.
NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::string& path, const NamedTensors& entries);
NamedTensors read_checkpoint(const std::string& path);

// Copies matching entries into the store; every store tensor must be present
// with the same shape.
void load_into(ParamStore& store, const NamedTensors& entries);
const Tensor* find_entry(const NamedTensors& entries, const std::string& name);

// ---- run directories ----

// Exclusive per-directory lock file, released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::string& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

// ---- datasets ----

struct Dataset {
  std::vector<PhantomPair> train;
  std::vector<PhantomPair> eval;
};

// In-memory split: the first 4/5 of the patients train, the rest evaluate
// unless counts are given.
Dataset make_dataset(std::uint64_t seed, std::int64_t size, std::int64_t train_count, std::int64_t eval_count);
// Writes p<id>_{mr,ct,labels}.wvl and manifest.json.
void write_dataset(const std::string& dir, const Dataset& data, std::uint64_t seed);
Dataset read_dataset(const std::string& dir);

// ---- models ----

struct AutoencoderModel {
  ParamStore store;
  std::unique_ptr<Autoencoder> ae;
  std::unique_ptr<Discriminator> disc;
  std::int64_t step = 0;
  std::unique_ptr<PretrainOptimizers> opt;

  AutoencoderModel(const AutoencoderConfig& config, std::uint64_t seed, const AdamConfig& gen = {},
                   const AdamConfig& disc = {});
  NamedTensors state() const;
  void load(const NamedTensors& entries);
};

// Maps posterior means to the space the denoiser works in:
// z = (mu - shift[c]) * scale[c]. Empty vectors mean the identity.
struct LatentNorm {
  std::vector<double> shift, scale;
  LatentBounds bounds;  // for sampling, in normalized units

  Tensor apply(const Tensor& mu) const;
  Tensor invert(const Tensor& z) const;
};

struct DenoiserModel {
  ParamStore store;
  std::unique_ptr<Denoiser> net;
  LatentNorm norm;
  std::unique_ptr<Adam> opt;

  DenoiserModel(const DenoiserConfig& config, std::uint64_t seed, const AdamConfig& adam = {});
  NamedTensors state() const;
  void load(const NamedTensors& entries);
  NoisePredictor predictor() const;
};

struct EpochLog {
  std::int64_t epoch = 0;
  PretrainReport mean;
};

using Progress = std::function<void(const std::string&)>;

// Pretraining steps [model.step, model.step + steps). Step s draws its two
// patients, crops and augmentation from Rng(seed).split(s), so a resumed run
// repeats the trajectory of an uninterrupted one.
std::vector<EpochLog> pretrain(AutoencoderModel& model, const RunConfig& config, const ArmSettings& arm,
                               const std::vector<PhantomPair>& train, std::int64_t steps,
                               const Progress& progress = {});
PretrainReport pretrain_one(AutoencoderModel& model, const RunConfig& config, const ArmSettings& arm,
                            const std::vector<PhantomPair>& train);

// Posterior means of a set of volumes, batched.
Tensor encode_mu(const Autoencoder& ae, const std::vector<Tensor>& volumes);

struct LatentSet {
  Tensor ct;  // [N,c,d,h,w], normalized
  Tensor mr;
};
LatentSet encode_pairs(const Autoencoder& ae, const std::vector<PhantomPair>& pairs, const LatentNorm& norm);
// Per-channel mean and 1/std over the CT and MR posterior means of `pairs`;
// bounds are the per-channel kBoundQuantile and 1 - kBoundQuantile quantiles
// of the normalized CT latents.
inline constexpr double kBoundQuantile = 0.01;
LatentNorm fit_latent_norm(const Autoencoder& ae, const std::vector<PhantomPair>& pairs);

std::vector<double> train_denoiser(DenoiserModel& model, const RunConfig& config, const LatentSet& latents,
                                   const Progress& progress = {});

// MR volumes [N,1,D,H,W] -> synthetic CT, with noise drawn from rng.
Tensor synthesize(const Autoencoder& ae, const DenoiserModel& dn, const NoiseSchedule& s, const Tensor& mr,
                  Rng& rng);

struct MetricReport {
  double psnr = 0, ssim = 0, mae = 0, ncc = 0, dice = 0;
  std::int64_t count = 0;
};
MetricReport evaluate_volume(const Tensor& pred, const Tensor& ref, const LabelVolume* labels);
// Mean over volumes.
MetricReport average(const std::vector<MetricReport>& reports);
std::string report_text(const MetricReport& r);
std::string report_json(const MetricReport& r);

struct DisentanglementStats {
  double s_paired = 0;     // mean cos(S_CT, S_MR)
  double s_unpaired = 0;   // mean cos(S_CT, S_CT')
  double m_unpaired = 0;   // mean cos(M_CT, M_CT')
  double m_paired = 0;     // mean cos(M_CT, M_MR)
};
DisentanglementStats disentanglement(const Autoencoder& ae, const std::vector<PhantomPair>& pairs);

struct ArmResult {
  Arm arm = Arm::Full;
  MetricReport metrics;
  DisentanglementStats codes;
  double seconds = 0;
};

// Trains and evaluates the four arms on one dataset. Autoencoders are shared
// between arms whose autoencoder settings coincide. Checkpoints and reports
// go under out_dir/<arm>/.
std::vector<ArmResult> run_ablation(const RunConfig& config, const Dataset& data, const std::string& out_dir,
                                    const Progress& progress = {});
std::string ablation_table(const std::vector<ArmResult>& results);
std::string ablation_json(const std::vector<ArmResult>& results);

}  // namespace wldm
