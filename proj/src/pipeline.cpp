#include "wldm/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <variant>

#include "json.hpp"

namespace wldm {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Stream ids for the run seed.
namespace {
constexpr std::uint64_t kAeInitStream = 11;
constexpr std::uint64_t kPretrainStream = 12;
constexpr std::uint64_t kDnInitStream = 21;
constexpr std::uint64_t kDnTrainStream = 22;
constexpr std::uint64_t kSampleStream = 31;
}  // namespace

// ---- configuration ----

std::string arm_name(Arm arm) {
  switch (arm) {
    case Arm::Vanilla: return "vanilla";
    case Arm::Wrm: return "wrm";
    case Arm::WrmSmd: return "wrm_smd";
    case Arm::Full: return "full";
  }
  return "full";
}

Arm parse_arm(const std::string& name) {
  for (Arm a : {Arm::Vanilla, Arm::Wrm, Arm::WrmSmd, Arm::Full})
    if (arm_name(a) == name) return a;
  throw ConfigError("unknown ablation arm \"" + name + "\" (expected vanilla, wrm, wrm_smd or full)");
}

namespace {

using Value = std::variant<std::int64_t, double, bool, std::string, std::vector<std::int64_t>>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

std::int64_t parse_int(const std::string& s, const std::string& where) {
  std::int64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(where + ": bad integer \"" + s + "\"");
  return v;
}

Value parse_value(const std::string& raw, const std::string& where) {
  const std::string s = trim(raw);
  if (s.empty()) throw ConfigError(where + ": missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError(where + ": unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size()) {
        const char c = s[++i];
        out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        out += s[i];
      }
    }
    return out;
  }
  if (s == "true") return true;
  if (s == "false") return false;
  if (s.front() == '[') {
    if (s.back() != ']') throw ConfigError(where + ": unterminated array");
    std::vector<std::int64_t> items;
    std::stringstream in(s.substr(1, s.size() - 2));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) items.push_back(parse_int(item, where));
    }
    return items;
  }
  if (s.find_first_of(".eE") != std::string::npos || s == "inf" || s == "nan") {
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(where + ": bad number \"" + s + "\"");
    return v;
  }
  return parse_int(s, where);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

// One binding per config key: how to read it from a parsed value and how to
// print it back.
struct Binding {
  const char* table;
  const char* key;
  std::function<void(RunConfig&, const Value&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Binding bind_int(const char* table, const char* key, T RunConfig::*field) {
  return {table, key,
          [field](RunConfig& c, const Value& v, const std::string& where) {
            if (!std::holds_alternative<std::int64_t>(v)) throw ConfigError(where + ": expected an integer");
            const auto x = std::get<std::int64_t>(v);
            if constexpr (std::is_unsigned_v<T>) {
              if (x < 0) throw ConfigError(where + ": must be non-negative");
            }
            c.*field = static_cast<T>(x);
          },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

Binding bind_real(const char* table, const char* key, double RunConfig::*field) {
  return {table, key,
          [field](RunConfig& c, const Value& v, const std::string& where) {
            if (std::holds_alternative<double>(v)) {
              c.*field = std::get<double>(v);
            } else if (std::holds_alternative<std::int64_t>(v)) {
              c.*field = static_cast<double>(std::get<std::int64_t>(v));
            } else {
              throw ConfigError(where + ": expected a number");
            }
          },
          [field](const RunConfig& c) { return format_double(c.*field); }};
}

Binding bind_string(const char* table, const char* key, std::string RunConfig::*field) {
  return {table, key,
          [field](RunConfig& c, const Value& v, const std::string& where) {
            if (!std::holds_alternative<std::string>(v)) throw ConfigError(where + ": expected a string");
            c.*field = std::get<std::string>(v);
          },
          [field](const RunConfig& c) { return quote(c.*field); }};
}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> all = {
      bind_int("model", "latent_channels", &RunConfig::latent_channels),
      {"model", "ae_widths",
       [](RunConfig& c, const Value& v, const std::string& where) {
         if (!std::holds_alternative<std::vector<std::int64_t>>(v))
           throw ConfigError(where + ": expected an integer array");
         c.ae_widths = std::get<std::vector<std::int64_t>>(v);
       },
       [](const RunConfig& c) {
         std::string s = "[";
         for (std::size_t i = 0; i < c.ae_widths.size(); ++i)
           s += (i ? ", " : "") + std::to_string(c.ae_widths[i]);
         return s + "]";
       }},
      bind_int("model", "base_width", &RunConfig::base_width),
      bind_int("model", "scales", &RunConfig::scales),
      bind_int("model", "blocks_per_stage", &RunConfig::blocks_per_stage),
      bind_int("schedule", "T", &RunConfig::T),
      bind_real("schedule", "beta1", &RunConfig::beta1),
      bind_real("schedule", "betaT", &RunConfig::betaT),
      bind_int("schedule", "inference_steps", &RunConfig::inference_steps),
      bind_real("loss", "alpha", &RunConfig::alpha),
      bind_real("loss", "beta", &RunConfig::beta),
      bind_real("loss", "gamma", &RunConfig::gamma),
      {"ablation", "arm",
       [](RunConfig& c, const Value& v, const std::string& where) {
         if (!std::holds_alternative<std::string>(v)) throw ConfigError(where + ": expected a string");
         c.arm = parse_arm(std::get<std::string>(v));
       },
       [](const RunConfig& c) { return quote(arm_name(c.arm)); }},
      bind_int("train", "seed", &RunConfig::seed),
      bind_int("train", "crop", &RunConfig::crop),
      {"train", "augment",
       [](RunConfig& c, const Value& v, const std::string& where) {
         if (!std::holds_alternative<bool>(v)) throw ConfigError(where + ": expected true or false");
         c.augment = std::get<bool>(v);
       },
       [](const RunConfig& c) { return std::string(c.augment ? "true" : "false"); }},
      bind_int("train", "ae_epochs", &RunConfig::ae_epochs),
      bind_int("train", "ae_steps_per_epoch", &RunConfig::ae_steps_per_epoch),
      bind_real("train", "ae_lr", &RunConfig::ae_lr),
      bind_real("train", "disc_lr", &RunConfig::disc_lr),
      bind_int("train", "dn_epochs", &RunConfig::dn_epochs),
      bind_int("train", "dn_batch", &RunConfig::dn_batch),
      bind_real("train", "dn_lr", &RunConfig::dn_lr),
      bind_int("data", "seed", &RunConfig::data_seed),
      bind_int("data", "size", &RunConfig::size),
      bind_int("data", "train_count", &RunConfig::train_count),
      bind_int("data", "eval_count", &RunConfig::eval_count),
      bind_string("data", "data_dir", &RunConfig::data_dir),
      bind_string("data", "output_dir", &RunConfig::output_dir),
  };
  return all;
}

void validate(const RunConfig& c) {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  check(c.latent_channels > 0 && c.latent_channels % 2 == 0, "model.latent_channels must be even and positive");
  check(c.ae_widths.size() == 3 && std::all_of(c.ae_widths.begin(), c.ae_widths.end(), [](auto w) { return w > 0; }),
        "model.ae_widths must hold three positive widths");
  check(c.base_width > 0, "model.base_width must be positive");
  check(c.scales >= 1 && c.scales <= 4, "model.scales must be in [1, 4]");
  check(c.blocks_per_stage >= 1, "model.blocks_per_stage must be at least 1");
  check(c.T >= 1, "schedule.T must be at least 1");
  check(c.beta1 > 0 && c.beta1 <= c.betaT && c.betaT < 1, "schedule needs 0 < beta1 <= betaT < 1");
  check(c.inference_steps >= 1 && c.inference_steps <= c.T, "schedule.inference_steps must be in [1, T]");
  check(c.alpha >= 0 && c.beta >= 0 && c.gamma >= 0, "loss weights must be non-negative");
  check(c.size == 16 || c.size == 32 || c.size == 64, "data.size must be 16, 32 or 64");
  check(c.crop >= 8 && c.crop % 8 == 0 && c.crop <= c.size, "train.crop must be a multiple of 8 within data.size");
  check(c.size / 4 % (std::int64_t{1} << (c.scales - 1)) == 0, "latent extent must be divisible by 2^(scales-1)");
  check(c.ae_epochs >= 0 && c.ae_steps_per_epoch >= 1, "train.ae_epochs / ae_steps_per_epoch out of range");
  check(c.dn_epochs >= 0 && c.dn_batch >= 1, "train.dn_epochs / dn_batch out of range");
  check(c.ae_lr > 0 && c.disc_lr > 0 && c.dn_lr > 0, "learning rates must be positive");
  check(c.train_count >= 2, "data.train_count must be at least 2 (pretraining pairs two patients)");
  check(c.eval_count >= 1, "data.eval_count must be at least 1");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::string table;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + ": malformed table header");
      table = trim(s.substr(1, s.size() - 2));
      const bool known = std::any_of(bindings().begin(), bindings().end(), [&](const Binding& b) { return table == b.table; });
      if (!known) throw ConfigError(where + ": unknown table [" + table + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    const std::string full = table + "." + key;
    const auto it = std::find_if(bindings().begin(), bindings().end(),
                                 [&](const Binding& b) { return table == b.table && key == b.key; });
    if (it == bindings().end()) throw ConfigError(where + ": unknown key " + full);
    if (!seen.insert(full).second) throw ConfigError(where + ": duplicate key " + full);
    it->set(c, parse_value(s.substr(eq + 1), where + " (" + full + ")"), where + " (" + full + ")");
  }
  validate(c);
  return c;
}

std::string serialize_config(const RunConfig& c) {
  std::string out;
  std::string table;
  for (const auto& b : bindings()) {
    if (table != b.table) {
      out += (out.empty() ? "[" : "\n[") + std::string(b.table) + "]\n";
      table = b.table;
    }
    out += std::string(b.key) + " = " + b.get(c) + "\n";
  }
  return out;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void save_config(const std::string& path, const RunConfig& config) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write config " + path);
  f << serialize_config(config);
}

void apply_env_overrides(RunConfig& config) {
  if (const char* d = std::getenv("WLDM_DATA_ROOT"); d && *d) config.data_dir = d;
  if (const char* o = std::getenv("WLDM_OUTPUT_ROOT"); o && *o) config.output_dir = o;
}

ArmSettings arm_settings(const RunConfig& c) {
  switch (c.arm) {
    case Arm::Vanilla: return {false, 0.0, false, false};
    case Arm::Wrm: return {true, 0.0, true, false};
    case Arm::WrmSmd: return {true, c.beta, true, false};
    case Arm::Full: return {true, c.beta, true, true};
  }
  return {};
}

AutoencoderConfig autoencoder_config(const RunConfig& c) {
  AutoencoderConfig a;
  a.latent_channels = c.latent_channels;
  a.widths = c.ae_widths;
  a.use_wrm = arm_settings(c).ae_wrm;
  return a;
}

DenoiserConfig denoiser_config(const RunConfig& c) {
  DenoiserConfig d;
  const ArmSettings s = arm_settings(c);
  d.latent_channels = c.latent_channels;
  d.base_width = c.base_width;
  d.scales = c.scales;
  d.blocks_per_stage = c.blocks_per_stage;
  d.use_wrm = s.dn_wrm;
  d.use_dsca = s.dn_dsca;
  return d;
}

NoiseSchedule schedule_of(const RunConfig& c) {
  return make_schedule(static_cast<int>(c.T), c.beta1, c.betaT, static_cast<int>(c.inference_steps));
}

// ---- checkpoints ----

namespace {

constexpr char kCkptMagic[4] = {'W', 'C', 'K', '1'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

struct Reader {
  const std::vector<std::uint8_t>& in;
  std::size_t pos = 0;

  template <class T>
  T get(const char* what) {
    if (in.size() - pos < sizeof(T)) throw ParseError(std::string("truncated checkpoint: ") + what);
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& entries) {
  require(entries.size() <= std::numeric_limits<std::uint32_t>::max(), "too many checkpoint entries");
  std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    require(!name.empty() && name.size() <= 0xffff, "checkpoint entry names must be 1..65535 bytes");
    require(t.ndim() <= 255, "checkpoint tensors are limited to 255 dimensions");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (Real v : t.data()) put<float>(out, static_cast<float>(v));
  }
  return out;
}

NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw ParseError("bad magic, expected \"WCK1\"");
  Reader r{bytes, 4};
  const auto count = r.get<std::uint32_t>("entry count");
  NamedTensors out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint16_t>("name length");
    if (len == 0) throw ParseError("checkpoint entry with empty name");
    if (bytes.size() - r.pos < len) throw ParseError("truncated checkpoint: name");
    std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
    r.pos += len;
    const auto ndims = r.get<std::uint8_t>("rank");
    Shape shape;
    std::uint64_t n = 1;
    for (int d = 0; d < ndims; ++d) {
      const auto ext = r.get<std::uint32_t>("extent");
      if (ext == 0) throw ParseError("checkpoint entry " + name + " has a zero extent");
      n *= ext;
      if (n > (bytes.size() - r.pos) / 4 + 1) throw ParseError("truncated checkpoint: payload of " + name);
      shape.push_back(ext);
    }
    if ((bytes.size() - r.pos) / 4 < n) throw ParseError("truncated checkpoint: payload of " + name);
    std::vector<Real> data(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, bytes.data() + r.pos + 4 * i, 4);
      data[i] = static_cast<Real>(v);
    }
    r.pos += 4 * n;
    out.emplace_back(std::move(name), Tensor::from(shape, std::move(data)));
  }
  if (r.pos != bytes.size()) throw ParseError("trailing bytes after checkpoint entries");
  return out;
}

void write_checkpoint(const std::string& path, const NamedTensors& entries) {
  const auto bytes = encode_checkpoint(entries);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot create " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

NamedTensors read_checkpoint(const std::string& path) { return decode_checkpoint(slurp(path)); }

const Tensor* find_entry(const NamedTensors& entries, const std::string& name) {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

void load_into(ParamStore& store, const NamedTensors& entries) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : entries) by_name[n] = &t;
  for (const auto& [name, param] : store.entries()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("checkpoint lacks parameter " + name);
    if (it->second->shape() != param.shape())
      throw ParseError("checkpoint parameter " + name + " has shape " + shape_str(it->second->shape()) +
                       ", model expects " + shape_str(param.shape()));
    Tensor dst = param;
    std::copy(it->second->data().begin(), it->second->data().end(), dst.data().begin());
  }
}

// ---- run directories ----

RunLock::RunLock(const std::string& dir) : path_((fs::path(dir) / ".lock").string()) {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    path_.clear();
    throw IoError("run directory " + dir + " is locked by another process (remove .lock if stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  if (!path_.empty()) {
    std::error_code ec;
    fs::remove(path_, ec);
  }
}

// ---- datasets ----

Dataset make_dataset(std::uint64_t seed, std::int64_t size, std::int64_t train_count, std::int64_t eval_count) {
  Dataset d;
  for (std::int64_t i = 0; i < train_count + eval_count; ++i)
    (i < train_count ? d.train : d.eval).push_back(generate_one(seed, i, size));
  return d;
}

namespace {

std::string stem_of(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%04lld", static_cast<long long>(id));
  return buf;
}

}  // namespace

void write_dataset(const std::string& dir, const Dataset& data, std::uint64_t seed) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "wldm-phantoms";
  manifest["seed"] = seed;
  manifest["spacing_mm"] = {kDefaultSpacing[0], kDefaultSpacing[1], kDefaultSpacing[2]};
  auto list = [&](const std::vector<PhantomPair>& pairs) {
    json ids = json::array();
    for (const auto& p : pairs) {
      const std::string stem = (fs::path(dir) / stem_of(p.patient_id)).string();
      write_volume(stem + "_mr.wvl", p.mr);
      write_volume(stem + "_ct.wvl", p.ct);
      write_labels(stem + "_labels.wvl", p.labels);
      ids.push_back(p.patient_id);
    }
    return ids;
  };
  manifest["train"] = list(data.train);
  manifest["eval"] = list(data.eval);
  manifest["size"] = data.train.empty() ? (data.eval.empty() ? 0 : data.eval[0].labels.dims[0])
                                        : data.train[0].labels.dims[0];
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw IoError("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw IoError("no dataset manifest at " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  auto load = [&](const char* key) {
    std::vector<PhantomPair> out;
    if (!manifest.contains(key) || !manifest[key].is_array()) throw ParseError("manifest lacks \"" + std::string(key) + "\"");
    for (const auto& id : manifest[key]) {
      PhantomPair p;
      p.patient_id = id.get<std::int64_t>();
      const std::string stem = (fs::path(dir) / stem_of(p.patient_id)).string();
      p.mr = read_volume(stem + "_mr.wvl");
      p.ct = read_volume(stem + "_ct.wvl");
      p.labels = read_labels(stem + "_labels.wvl");
      if (p.mr.shape() != p.ct.shape() || p.mr.numel() != p.labels.numel())
        throw ParseError("patient " + stem + ": mr, ct and labels differ in geometry");
      out.push_back(std::move(p));
    }
    return out;
  };
  return {load("train"), load("eval")};
}

// ---- models ----

namespace {

NamedTensors prefixed(const std::string& prefix, const NamedTensors& in) {
  NamedTensors out;
  for (const auto& [n, t] : in) out.emplace_back(prefix + n, t);
  return out;
}

NamedTensors with_prefix(const NamedTensors& in, const std::string& prefix) {
  NamedTensors out;
  for (const auto& [n, t] : in)
    if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
  return out;
}

}  // namespace

AutoencoderModel::AutoencoderModel(const AutoencoderConfig& config, std::uint64_t seed, const AdamConfig& gen,
                                   const AdamConfig& disc_cfg) {
  Rng rng(seed, kAeInitStream);
  ae = std::make_unique<Autoencoder>(store, config, rng);
  Rng drng = rng.split(1);
  disc = std::make_unique<Discriminator>(store, "disc", drng);
  std::vector<Tensor> g = store.tensors_with_prefix("encoder/");
  for (const auto& t : store.tensors_with_prefix("decoder/")) g.push_back(t);
  opt = std::make_unique<PretrainOptimizers>(
      PretrainOptimizers{Adam(g, gen), Adam(store.tensors_with_prefix("disc/"), disc_cfg)});
}

NamedTensors AutoencoderModel::state() const {
  NamedTensors out = store.entries();
  for (auto& e : prefixed("optim/gen/", opt->generator.state())) out.push_back(e);
  for (auto& e : prefixed("optim/disc/", opt->discriminator.state())) out.push_back(e);
  out.emplace_back("train/step", Tensor::from({1}, {static_cast<Real>(step)}));
  return out;
}

void AutoencoderModel::load(const NamedTensors& entries) {
  load_into(store, entries);
  const auto gen = with_prefix(entries, "optim/gen/");
  if (!gen.empty()) opt->generator.load_state(gen);
  const auto dis = with_prefix(entries, "optim/disc/");
  if (!dis.empty()) opt->discriminator.load_state(dis);
  if (const Tensor* s = find_entry(entries, "train/step")) step = static_cast<std::int64_t>(s->data()[0]);
}

DenoiserModel::DenoiserModel(const DenoiserConfig& config, std::uint64_t seed, const AdamConfig& adam) {
  Rng rng(seed, kDnInitStream);
  net = std::make_unique<Denoiser>(store, config, rng);
  opt = std::make_unique<Adam>(store.tensors(), adam);
}

NamedTensors DenoiserModel::state() const {
  NamedTensors out = store.entries();
  for (auto& e : prefixed("optim/dn/", opt->state())) out.push_back(e);
  auto vec = [&](const std::string& name, const std::vector<double>& v) {
    std::vector<Real> r(v.begin(), v.end());
    out.emplace_back(name, Tensor::from({static_cast<std::int64_t>(r.size())}, r));
  };
  vec("latent/shift", norm.shift);
  vec("latent/scale", norm.scale);
  vec("latent/lo", norm.bounds.lo);
  vec("latent/hi", norm.bounds.hi);
  return out;
}

void DenoiserModel::load(const NamedTensors& entries) {
  load_into(store, entries);
  const auto st = with_prefix(entries, "optim/dn/");
  if (!st.empty()) opt->load_state(st);
  auto vec = [&](const std::string& name) {
    const Tensor* t = find_entry(entries, name);
    if (!t) throw ParseError("denoiser checkpoint lacks " + name);
    if (t->ndim() != 1 || (t->numel() != 0 && t->numel() != net->config().latent_channels))
      throw ParseError(name + " has shape " + shape_str(t->shape()) + ", expected one entry per latent channel");
    return std::vector<double>(t->data().begin(), t->data().end());
  };
  norm.shift = vec("latent/shift");
  norm.scale = vec("latent/scale");
  norm.bounds.lo = vec("latent/lo");
  norm.bounds.hi = vec("latent/hi");
  if (norm.shift.size() != norm.scale.size() || norm.bounds.lo.size() != norm.bounds.hi.size())
    throw ParseError("denoiser checkpoint has inconsistent latent normalization");
}

NoisePredictor DenoiserModel::predictor() const {
  const Denoiser* n = net.get();
  return [n](const Tensor& z, const std::vector<int>& t, const Tensor& cond) { return n->forward(z, t, cond); };
}

// ---- pretraining ----

PretrainReport pretrain_one(AutoencoderModel& model, const RunConfig& config, const ArmSettings& arm,
                            const std::vector<PhantomPair>& train) {
  require(train.size() >= 2, "pretraining needs at least two patients");
  Rng rng = Rng(config.seed, kPretrainStream).split(static_cast<std::uint64_t>(model.step));
  const auto n = static_cast<std::int64_t>(train.size());
  const std::int64_t ia = rng.uniform_int(0, n - 1);
  std::int64_t ib = rng.uniform_int(0, n - 2);
  if (ib >= ia) ++ib;
  // Both patients share the crop window and the geometric transform, so
  // position alone does not tell the two codes apart.
  Rng crop_rng = rng;
  PhantomPair a = crop_pair(train[ia], config.crop, &crop_rng);
  crop_rng = rng;
  PhantomPair b = crop_pair(train[ib], config.crop, &crop_rng);
  rng = crop_rng;
  if (config.augment) {
    const AugmentParams ga = draw_augment(rng);
    AugmentParams gb = draw_augment(rng);
    gb.flip = ga.flip;
    gb.rotation_deg = ga.rotation_deg;
    gb.scale = ga.scale;
    a = apply_augment(a, ga);
    b = apply_augment(b, gb);
  }
  const PretrainWeights w{config.alpha, arm.beta, config.gamma};
  const PretrainReport r = pretrain_step(*model.ae, *model.disc, *model.opt, a, b, w, rng);
  ++model.step;
  return r;
}

std::vector<EpochLog> pretrain(AutoencoderModel& model, const RunConfig& config, const ArmSettings& arm,
                               const std::vector<PhantomPair>& train, std::int64_t steps, const Progress& progress) {
  std::vector<EpochLog> logs;
  PretrainReport acc;
  std::int64_t in_epoch = 0;
  auto flush = [&] {
    if (in_epoch == 0) return;
    EpochLog log;
    log.epoch = (model.step - 1) / config.ae_steps_per_epoch;
    const double k = 1.0 / static_cast<double>(in_epoch);
    log.mean = {acc.rec * k,        acc.kl * k,      acc.structure * k, acc.modality * k,
                acc.disentangle * k, acc.adv_gen * k, acc.adv_disc * k,  acc.total * k};
    logs.push_back(log);
    if (progress) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "pretrain epoch %lld: rec=%.5f kl=%.4f L_stru=%.4f L_modal=%.4f adv_g=%.4f adv_d=%.4f total=%.5f",
                    static_cast<long long>(log.epoch), log.mean.rec, log.mean.kl, log.mean.structure, log.mean.modality,
                    log.mean.adv_gen, log.mean.adv_disc, log.mean.total);
      progress(buf);
    }
    acc = {};
    in_epoch = 0;
  };
  for (std::int64_t i = 0; i < steps; ++i) {
    const PretrainReport r = pretrain_one(model, config, arm, train);
    acc.rec += r.rec;
    acc.kl += r.kl;
    acc.structure += r.structure;
    acc.modality += r.modality;
    acc.disentangle += r.disentangle;
    acc.adv_gen += r.adv_gen;
    acc.adv_disc += r.adv_disc;
    acc.total += r.total;
    ++in_epoch;
    if (model.step % config.ae_steps_per_epoch == 0) flush();
  }
  flush();
  return logs;
}

// ---- latents ----

Tensor encode_mu(const Autoencoder& ae, const std::vector<Tensor>& volumes) {
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < volumes.size(); i += 8) {
    std::vector<Tensor> chunk(volumes.begin() + static_cast<std::ptrdiff_t>(i),
                              volumes.begin() + static_cast<std::ptrdiff_t>(std::min(volumes.size(), i + 8)));
    parts.push_back(ae.encode(concat(chunk, 0)).mu);
  }
  return concat(parts, 0);
}

namespace {

Tensor per_channel(const Tensor& x, const std::function<double(double, std::size_t)>& f) {
  Tensor out = Tensor::zeros(x.shape());
  const std::int64_t c = x.dim(1), inner = x.numel() / (x.dim(0) * c);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out.data()[i] = static_cast<Real>(f(x.data()[i], static_cast<std::size_t>((i / inner) % c)));
  return out;
}

}  // namespace

Tensor LatentNorm::apply(const Tensor& mu) const {
  if (shift.empty()) return mu;
  require(mu.ndim() == 5 && mu.dim(1) == static_cast<std::int64_t>(shift.size()),
          "latent normalization expects " + std::to_string(shift.size()) + " channels, got " + shape_str(mu.shape()));
  return per_channel(mu, [&](double v, std::size_t c) { return (v - shift[c]) * scale[c]; });
}

Tensor LatentNorm::invert(const Tensor& z) const {
  if (shift.empty()) return z;
  require(z.ndim() == 5 && z.dim(1) == static_cast<std::int64_t>(shift.size()),
          "latent normalization expects " + std::to_string(shift.size()) + " channels, got " + shape_str(z.shape()));
  return per_channel(z, [&](double v, std::size_t c) { return v / scale[c] + shift[c]; });
}

LatentNorm fit_latent_norm(const Autoencoder& ae, const std::vector<PhantomPair>& pairs) {
  std::vector<Tensor> ct, mr;
  for (const auto& p : pairs) {
    ct.push_back(p.ct);
    mr.push_back(p.mr);
  }
  const Tensor zc = encode_mu(ae, ct), zm = encode_mu(ae, mr);
  const auto c = static_cast<std::size_t>(zc.dim(1));
  const std::int64_t inner = zc.numel() / (zc.dim(0) * zc.dim(1));
  std::vector<double> sum(c, 0), sq(c, 0);
  for (const Tensor* z : {&zc, &zm})
    for (std::int64_t i = 0; i < z->numel(); ++i) {
      const double v = z->data()[i];
      const auto ch = static_cast<std::size_t>((i / inner) % zc.dim(1));
      sum[ch] += v;
      sq[ch] += v * v;
    }
  const double n = 2.0 * static_cast<double>(zc.numel()) / static_cast<double>(c);
  LatentNorm norm;
  for (std::size_t k = 0; k < c; ++k) {
    const double m = sum[k] / n, var = sq[k] / n - m * m;
    norm.shift.push_back(m);
    norm.scale.push_back(var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0);
  }
  const Tensor nc = norm.apply(zc);
  std::vector<std::vector<float>> per_channel(c);
  for (std::int64_t i = 0; i < nc.numel(); ++i)
    per_channel[static_cast<std::size_t>((i / inner) % zc.dim(1))].push_back(nc.data()[i]);
  for (auto& v : per_channel) {
    const auto last = static_cast<double>(v.size() - 1);
    auto at = [&](double q) {
      auto it = v.begin() + static_cast<std::ptrdiff_t>(std::llround(q * last));
      std::nth_element(v.begin(), it, v.end());
      return double(*it);
    };
    norm.bounds.lo.push_back(at(kBoundQuantile));
    norm.bounds.hi.push_back(at(1 - kBoundQuantile));
  }
  return norm;
}

LatentSet encode_pairs(const Autoencoder& ae, const std::vector<PhantomPair>& pairs, const LatentNorm& norm) {
  std::vector<Tensor> ct, mr;
  for (const auto& p : pairs) {
    ct.push_back(p.ct);
    mr.push_back(p.mr);
  }
  NoGradGuard no_grad;
  return {norm.apply(encode_mu(ae, ct)), norm.apply(encode_mu(ae, mr))};
}

namespace {

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  Shape shape = x.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  Tensor out = Tensor::zeros(shape);
  const std::int64_t per = x.numel() / x.dim(0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + rows[i] * per, per, out.data().begin() + static_cast<std::int64_t>(i) * per);
  return out;
}

}  // namespace

std::vector<double> train_denoiser(DenoiserModel& model, const RunConfig& config, const LatentSet& latents,
                                   const Progress& progress) {
  const NoiseSchedule s = schedule_of(config);
  const NoisePredictor eps = model.predictor();
  const std::int64_t n = latents.ct.dim(0);
  std::vector<double> losses;
  std::int64_t step = model.opt->steps();
  const std::int64_t first_epoch = step / std::max<std::int64_t>(1, (n + config.dn_batch - 1) / config.dn_batch);
  for (std::int64_t epoch = first_epoch; epoch < config.dn_epochs; ++epoch) {
    Rng order = Rng(config.seed, kDnTrainStream).split(static_cast<std::uint64_t>(epoch));
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[order.uniform_int(0, i)]);
    double total = 0;
    std::int64_t batches = 0;
    for (std::int64_t b = 0; b < n; b += config.dn_batch) {
      const std::vector<std::int64_t> rows(perm.begin() + b, perm.begin() + std::min(n, b + config.dn_batch));
      Rng rng = Rng(config.seed, kDnTrainStream).split(0x100000000ULL + static_cast<std::uint64_t>(step));
      model.opt->zero_grad();
      const Tensor loss = training_loss(gather_rows(latents.ct, rows), gather_rows(latents.mr, rows), rng, eps, s);
      loss.backward();
      model.opt->step();
      total += loss.item();
      ++batches;
      ++step;
    }
    losses.push_back(total / static_cast<double>(batches));
    if (progress) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "denoiser epoch %lld: loss=%.5f", static_cast<long long>(epoch), losses.back());
      progress(buf);
    }
  }
  return losses;
}

Tensor synthesize(const Autoencoder& ae, const DenoiserModel& dn, const NoiseSchedule& s, const Tensor& mr,
                  Rng& rng) {
  NoGradGuard no_grad;
  const Tensor cond = dn.norm.apply(ae.encode(mr).mu);
  const LatentBounds* bounds = dn.norm.bounds.lo.empty() ? nullptr : &dn.norm.bounds;
  const Tensor z = sample(cond, dn.predictor(), s, rng, nullptr, bounds);
  return ae.decode(dn.norm.invert(z));
}

// ---- evaluation ----

MetricReport evaluate_volume(const Tensor& pred, const Tensor& ref, const LabelVolume* labels) {
  MetricReport r;
  r.psnr = psnr(pred, ref);
  r.ssim = ssim3d(pred, ref);
  r.mae = mae(pred, ref);
  r.ncc = ncc(pred, ref);
  r.dice = labels ? dice(segment_bone(pred), label_mask(*labels, kBone)) : dice(segment_bone(pred), segment_bone(ref));
  r.count = 1;
  return r;
}

MetricReport average(const std::vector<MetricReport>& reports) {
  MetricReport m;
  for (const auto& r : reports) {
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.mae += r.mae;
    m.ncc += r.ncc;
    m.dice += r.dice;
    m.count += r.count;
  }
  const double k = reports.empty() ? 0.0 : 1.0 / static_cast<double>(reports.size());
  m.psnr *= k;
  m.ssim *= k;
  m.mae *= k;
  m.ncc *= k;
  m.dice *= k;
  return m;
}

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

json num_json(double v) { return std::isfinite(v) ? json(v) : json(num(v)); }

}  // namespace

std::string report_text(const MetricReport& r) {
  return "psnr=" + num(r.psnr) + "\nssim=" + num(r.ssim) + "\nmae=" + num(r.mae) + "\nncc=" + num(r.ncc) +
         "\nbone_dice=" + num(r.dice) + "\nvolumes=" + std::to_string(r.count) + "\n";
}

std::string report_json(const MetricReport& r) {
  json j;
  j["psnr"] = num_json(r.psnr);
  j["ssim"] = num_json(r.ssim);
  j["mae"] = num_json(r.mae);
  j["ncc"] = num_json(r.ncc);
  j["bone_dice"] = num_json(r.dice);
  j["volumes"] = r.count;
  return j.dump(2) + "\n";
}

DisentanglementStats disentanglement(const Autoencoder& ae, const std::vector<PhantomPair>& pairs) {
  require(pairs.size() >= 2, "disentanglement statistics need at least two patients");
  std::vector<Tensor> ct, mr;
  for (const auto& p : pairs) {
    ct.push_back(p.ct);
    mr.push_back(p.mr);
  }
  const Tensor zc = encode_mu(ae, ct), zm = encode_mu(ae, mr);
  const std::int64_t n = zc.dim(0), per = zc.numel() / n, half = per / 2;
  auto cosine = [&](const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j, std::int64_t off) {
    double ab = 0, aa = 0, bb = 0;
    for (std::int64_t k = 0; k < half; ++k) {
      const double x = a.data()[i * per + off + k], y = b.data()[j * per + off + k];
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    return ab / std::max(std::sqrt(aa * bb), 1e-8);
  };
  DisentanglementStats s;
  for (std::int64_t i = 0; i < n; ++i) {
    s.s_paired += cosine(zc, i, zm, i, 0);
    s.m_paired += cosine(zc, i, zm, i, half);
  }
  s.s_paired /= double(n);
  s.m_paired /= double(n);
  std::int64_t pairs_count = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = i + 1; j < n; ++j) {
      s.s_unpaired += cosine(zc, i, zc, j, 0);
      s.m_unpaired += cosine(zc, i, zc, j, half);
      ++pairs_count;
    }
  s.s_unpaired /= double(pairs_count);
  s.m_unpaired /= double(pairs_count);
  return s;
}

// ---- ablation ----

std::vector<ArmResult> run_ablation(const RunConfig& config, const Dataset& data, const std::string& out_dir,
                                    const Progress& progress) {
  using clock = std::chrono::steady_clock;
  const auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  struct CachedAe {
    std::unique_ptr<AutoencoderModel> model;
    std::string dir;
    double seconds = 0;
  };
  std::map<std::pair<bool, double>, CachedAe> cache;
  std::vector<ArmResult> results;
  const NoiseSchedule s = schedule_of(config);

  for (Arm arm : {Arm::Vanilla, Arm::Wrm, Arm::WrmSmd, Arm::Full}) {
    const auto start = clock::now();
    RunConfig cfg = config;
    cfg.arm = arm;
    const ArmSettings settings = arm_settings(cfg);
    const std::string dir = (fs::path(out_dir) / arm_name(arm)).string();
    fs::create_directories(dir);
    save_config((fs::path(dir) / "config.toml").string(), cfg);

    auto& slot = cache[{settings.ae_wrm, settings.beta}];
    if (!slot.model) {
      say("[" + arm_name(arm) + "] pretraining autoencoder");
      slot.model = std::make_unique<AutoencoderModel>(autoencoder_config(cfg), cfg.seed, AdamConfig{cfg.ae_lr},
                                                      AdamConfig{cfg.disc_lr, 0.5, 0.999});
      pretrain(*slot.model, cfg, settings, data.train, cfg.ae_epochs * cfg.ae_steps_per_epoch, progress);
      slot.dir = dir;
      slot.seconds = std::chrono::duration<double>(clock::now() - start).count();
    } else {
      say("[" + arm_name(arm) + "] reusing autoencoder from " + slot.dir);
    }
    write_checkpoint((fs::path(dir) / "autoencoder.wck").string(), slot.model->state());
    const Autoencoder& ae = *slot.model->ae;

    DenoiserModel dn(denoiser_config(cfg), cfg.seed, AdamConfig{cfg.dn_lr});
    dn.norm = fit_latent_norm(ae, data.train);
    say("[" + arm_name(arm) + "] training denoiser");
    train_denoiser(dn, cfg, encode_pairs(ae, data.train, dn.norm), progress);
    write_checkpoint((fs::path(dir) / "denoiser.wck").string(), dn.state());

    say("[" + arm_name(arm) + "] sampling " + std::to_string(data.eval.size()) + " eval volumes");
    std::vector<MetricReport> per;
    Rng rng(cfg.seed, kSampleStream);
    for (std::size_t i = 0; i < data.eval.size(); i += 10) {
      std::vector<Tensor> mr;
      for (std::size_t j = i; j < std::min(data.eval.size(), i + 10); ++j) mr.push_back(data.eval[j].mr);
      const Tensor ct = synthesize(ae, dn, s, concat(mr, 0), rng);
      const std::int64_t per_vol = ct.numel() / ct.dim(0);
      for (std::size_t j = 0; j < mr.size(); ++j) {
        Tensor one = Tensor::zeros(data.eval[i + j].ct.shape());
        std::copy_n(ct.data().begin() + static_cast<std::int64_t>(j) * per_vol, per_vol, one.data().begin());
        per.push_back(evaluate_volume(one, data.eval[i + j].ct, &data.eval[i + j].labels));
      }
    }
    ArmResult res;
    res.arm = arm;
    res.metrics = average(per);
    res.codes = disentanglement(ae, data.eval);
    res.seconds = std::chrono::duration<double>(clock::now() - start).count();
    {
      std::ofstream f(fs::path(dir) / "metrics.txt");
      f << report_text(res.metrics);
      std::ofstream j(fs::path(dir) / "metrics.json");
      j << report_json(res.metrics);
    }
    say("[" + arm_name(arm) + "] mae=" + num(res.metrics.mae) + " ssim=" + num(res.metrics.ssim) +
        " dice=" + num(res.metrics.dice));
    results.push_back(res);
  }
  std::ofstream(fs::path(out_dir) / "ablation.txt") << ablation_table(results);
  std::ofstream(fs::path(out_dir) / "ablation.json") << ablation_json(results);
  return results;
}

std::string ablation_table(const std::vector<ArmResult>& results) {
  std::string out = "arm        mae       ssim      psnr      ncc       bone_dice  cosS_pair cosS_unp  cosM_unp  cosM_pair seconds\n";
  for (const auto& r : results) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-10s %-9.5f %-9.5f %-9.3f %-9.5f %-10.5f %-9.4f %-9.4f %-9.4f %-9.4f %.0f\n",
                  arm_name(r.arm).c_str(), r.metrics.mae, r.metrics.ssim, r.metrics.psnr, r.metrics.ncc,
                  r.metrics.dice, r.codes.s_paired, r.codes.s_unpaired, r.codes.m_unpaired, r.codes.m_paired,
                  r.seconds);
    out += buf;
  }
  return out;
}

std::string ablation_json(const std::vector<ArmResult>& results) {
  json arr = json::array();
  for (const auto& r : results) {
    json j = json::parse(report_json(r.metrics));
    j["arm"] = arm_name(r.arm);
    j["cos_s_paired"] = r.codes.s_paired;
    j["cos_s_unpaired"] = r.codes.s_unpaired;
    j["cos_m_unpaired"] = r.codes.m_unpaired;
    j["cos_m_paired"] = r.codes.m_paired;
    j["seconds"] = r.seconds;
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

}  // namespace wldm
