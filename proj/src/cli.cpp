#include "rawshield/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <iostream>
#include <sstream>
#include <thread>

#include "rawshield/attack.hpp"
#include "rawshield/errors.hpp"
#include "rawshield/image_tensor.hpp"
#include "rawshield/io.hpp"
#include "rawshield/profiles.hpp"

namespace rawshield::cli {

namespace {

const std::vector<std::string> kCommands{"attack", "perturb", "predict", "train-predictor",
                                         "train-defense", "stats-variance", "verify"};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_timings(const fs::path& dir, const std::string& command, const Stopwatch& clock, json extra = json::object()) {
  extra["command"] = command;
  extra["seconds"] = clock.seconds();
  io::write_text(dir / "timings.json", extra.dump(2) + "\n");
}

/// Runs f(i) for i in [0, n) on `jobs` threads. f must handle its own
/// per-item errors; anything that escapes is rethrown after the join.
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, 64));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
  }
  if (failure) std::rethrow_exception(failure);
}

InjectionMode mode_from(ConfigReader& r, const std::string& key, InjectionMode fallback) {
  const auto name = r.optional<std::string>(key);
  if (!name) return fallback;
  try {
    return injection_mode_from_string(*name);
  } catch (const Error& e) {
    throw InputError("config key '" + key + "': " + e.what());
  }
}

void prepare_output(const fs::path& input_dir, const fs::path& output_dir) {
  std::error_code ec;
  if (fs::exists(output_dir) && fs::equivalent(input_dir, output_dir, ec))
    throw InputError("output directory must differ from the input directory");
  fs::create_directories(output_dir, ec);
  if (ec) throw IoError("cannot create " + output_dir.string() + ": " + ec.message());
}

void prepare_output(const fs::path& output_dir) {
  std::error_code ec;
  fs::create_directories(output_dir, ec);
  if (ec) throw IoError("cannot create " + output_dir.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

fs::path sidecar_path(const fs::path& output_dir, const fs::path& input) {
  return output_dir / (input.stem().string() + ".json");
}

Summary summarize(const Manifest& m) {
  Summary s;
  for (const auto& r : m.records()) (r.contains("error") ? s.failed : s.written)++;
  return s;
}

json predictor_to_json(const nets::PredictorConfig& c) {
  return {{"widths", c.widths}, {"hidden", c.hidden}, {"leaky_slope", c.leaky_slope}};
}

nets::PredictorConfig predictor_from(ConfigReader& r, nets::PredictorConfig c) {
  c.widths = r.get("widths", c.widths);
  c.hidden = r.get("hidden", c.hidden);
  c.leaky_slope = r.get("leaky_slope", c.leaky_slope);
  return c;
}

nets::PredictorConfig predictor_from_json(const json& j) {
  ConfigReader r(j);
  auto c = predictor_from(r, {});
  r.finish();
  return c;
}

json backbone_to_json(const nets::BackboneConfig& c) {
  return {{"width", c.width},
          {"leaky_slope", c.leaky_slope},
          {"bottleneck_mode", nets::to_string(c.bottleneck_mode)},
          {"decoder_mode", nets::to_string(c.decoder_mode)},
          {"insert_moe", c.insert_moe},
          {"gaussian_units", c.moe.gaussian_units},
          {"gate_hidden", c.moe.gate_hidden},
          {"sft_latent", c.moe.sft.latent}};
}

nets::MoeMode moe_mode_from(ConfigReader& r, const std::string& key, nets::MoeMode fallback) {
  const auto name = r.optional<std::string>(key);
  if (!name) return fallback;
  try {
    return nets::moe_mode_from_string(*name);
  } catch (const Error& e) {
    throw InputError("config key '" + key + "': " + e.what());
  }
}

nets::BackboneConfig backbone_from(ConfigReader& r, nets::BackboneConfig c) {
  c.width = r.get("width", c.width);
  c.leaky_slope = r.get("leaky_slope", c.leaky_slope);
  c.bottleneck_mode = moe_mode_from(r, "bottleneck_mode", c.bottleneck_mode);
  c.decoder_mode = moe_mode_from(r, "decoder_mode", c.decoder_mode);
  c.insert_moe = r.get("insert_moe", c.insert_moe);
  c.moe.gaussian_units = r.get("gaussian_units", c.moe.gaussian_units);
  c.moe.gate_hidden = r.get("gate_hidden", c.moe.gate_hidden);
  c.moe.sft.latent = r.get("sft_latent", c.moe.sft.latent);
  return c;
}

json data_to_json(const train::ToyDataOptions& d) {
  return {{"patch_size", d.patch_size},
          {"mode", to_string(d.mode)},
          {"brightness_min", d.brightness_min},
          {"brightness_max", d.brightness_max},
          {"synthesis", d.synthesis == train::Synthesis::Pds ? "pds" : "srgb"}};
}

train::ToyDataOptions data_from(ConfigReader& r, train::ToyDataOptions d) {
  d.patch_size = r.get("patch_size", d.patch_size);
  d.mode = mode_from(r, "mode", d.mode);
  d.brightness_min = r.get("brightness_min", d.brightness_min);
  d.brightness_max = r.get("brightness_max", d.brightness_max);
  if (const auto s = r.optional<std::string>("synthesis")) {
    if (*s == "pds")
      d.synthesis = train::Synthesis::Pds;
    else if (*s == "srgb")
      d.synthesis = train::Synthesis::SrgbGaussian;
    else
      throw InputError("config key 'synthesis' must be \"pds\" or \"srgb\", got \"" + *s + "\"");
  }
  return d;
}

std::string history_csv(const std::vector<double>& losses) {
  std::ostringstream s;
  s.precision(10);
  s << "epoch,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) s << i + 1 << ',' << losses[i] << '\n';
  return s.str();
}

json output_record(const fs::path& path, const std::string& kind) {
  return {{"output_path", path.generic_string()}, {"kind", kind}};
}

}  // namespace

// ---- config -------------------------------------------------------------------------

ConfigReader::ConfigReader(json object) : obj_(std::move(object)) {
  if (obj_.is_null()) obj_ = json::object();
  if (!obj_.is_object()) throw InputError("config must be a JSON object");
}

void ConfigReader::finish() const {
  std::string unknown;
  for (const auto& [key, value] : obj_.items())
    if (!used_.contains(key)) unknown += (unknown.empty() ? "" : ", ") + key;
  if (!unknown.empty()) throw InputError("unknown config keys: " + unknown);
}

json load_command_config(const std::optional<fs::path>& path, const std::string& command) {
  if (!path) return json::object();
  json j;
  try {
    j = json::parse(io::read_text(*path));
  } catch (const json::parse_error& e) {
    throw InputError("config " + path->string() + ": " + e.what());
  }
  if (!j.is_object()) throw InputError("config " + path->string() + " must be a JSON object");
  if (j.contains(command)) return j.at(command);
  for (const auto& c : kCommands)
    if (j.contains(c)) return json::object();  // sections for other commands only
  return j;
}

// ---- manifest -----------------------------------------------------------------------

Manifest::Manifest(std::string command, json config, std::uint64_t seed)
    : header_{{"command", std::move(command)}, {"config", std::move(config)}, {"seed", seed}, {"tool_version", kToolVersion}} {}

void Manifest::add(json record) {
  std::lock_guard lock(mutex_);
  records_.push_back(std::move(record));
}

std::string Manifest::serialize() const {
  std::lock_guard lock(mutex_);
  auto sorted = records_;
  auto key = [](const json& r) {
    return std::pair(r.value("input_path", std::string{}), r.value("output_path", std::string{}));
  };
  std::sort(sorted.begin(), sorted.end(), [&](const json& a, const json& b) { return key(a) < key(b); });
  std::string out = header_.dump() + "\n";
  for (const auto& r : sorted) out += r.dump() + "\n";
  return out;
}

void Manifest::write(const fs::path& dir) const { io::write_text(dir / "manifest.jsonl", serialize()); }

json sidecar(const DegradedSample& s) {
  return {{"k", s.attack.k},
          {"sigma", s.attack.sigma},
          {"mode", to_string(s.mode)},
          {"seed", s.seed},
          {"profile", profile_to_json(s.profile)},
          {"cropped", s.cropped}};
}

json sidecar(const PerturbedPair& pair, const CameraProfile& profile, InjectionMode mode) {
  return {{"k", pair.k_per},
          {"sigma", pair.sigma_per},
          {"mode", to_string(mode)},
          {"seed", pair.seed},
          {"profile", profile_to_json(profile)}};
}

CameraProfile resolve_profile(const std::string& spec) {
  for (const auto& p : bundled_profiles())
    if (p.name == spec) return p;
  if (fs::exists(spec)) return load_profile(spec);
  throw InputError("unknown profile '" + spec + "' (not a bundled name or a file)");
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.push_back(entry.path());
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  if (out.empty()) throw IoError("no PNG files in " + dir.string());
  std::sort(out.begin(), out.end());
  return out;
}

// ---- attack / perturb ---------------------------------------------------------------

AttackConfig AttackConfig::from(ConfigReader& r) {
  AttackConfig c;
  c.k = r.optional<double>("k");
  c.sigma = r.optional<double>("sigma");
  c.profile = r.optional<std::string>("profile");
  c.mode = mode_from(r, "mode", c.mode);
  if (c.k.has_value() != c.sigma.has_value()) throw InputError("attack: give both k and sigma, or neither");
  return c;
}

json AttackConfig::to_json() const {
  return {{"k", k ? json(*k) : json()},
          {"sigma", sigma ? json(*sigma) : json()},
          {"profile", profile ? json(*profile) : json()},
          {"mode", to_string(mode)}};
}

Summary run_attack(const fs::path& input_dir, const fs::path& output_dir, const AttackConfig& config,
                   const RunOptions& options) {
  const Stopwatch clock;
  const auto files = list_pngs(input_dir);
  prepare_output(input_dir, output_dir);
  AttackOptions base;
  base.mode = config.mode;
  if (config.profile) base.profile = resolve_profile(*config.profile);
  if (config.k) base.params = NoiseParams{*config.k, *config.sigma};
  Manifest manifest("attack", config.to_json(), options.seed);
  parallel_for(files.size(), options.jobs, [&](std::size_t i) {
    json record{{"input_path", files[i].generic_string()}};
    try {
      const ImagePlane img = io::read_png(files[i]);
      const DegradedSample s = synthesize_attack(img, base, derive_seed(options.seed, i));
      const fs::path out = output_dir / files[i].filename();
      io::write_png(out, s.image);
      const json side = sidecar(s);
      write_json(sidecar_path(output_dir, files[i]), side);
      record["output_path"] = out.generic_string();
      record["sidecar_path"] = sidecar_path(output_dir, files[i]).generic_string();
      record.update(side);
    } catch (const Error& e) {
      record["error"] = e.what();
    }
    manifest.add(std::move(record));
  });
  manifest.write(output_dir);
  write_timings(output_dir, "attack", clock, {{"images", files.size()}});
  return summarize(manifest);
}

Summary replay_attack(const fs::path& manifest_path, const fs::path& output_dir, int jobs) {
  std::istringstream in(io::read_text(manifest_path));
  std::string line;
  std::vector<json> records;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError("manifest " + manifest_path.string() + ": " + e.what());
    }
    if (header) {
      if (j.value("command", std::string{}) != "attack") throw FormatError("replay needs an attack manifest");
      header = false;
      continue;
    }
    if (!j.contains("error")) records.push_back(std::move(j));
  }
  if (header) throw FormatError("manifest " + manifest_path.string() + " is empty");
  prepare_output(output_dir);
  Summary summary;
  std::mutex m;
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    const json& r = records[i];
    AttackOptions o;
    try {
      o.profile = profile_from_json(r.at("profile"));
      o.params = NoiseParams{r.at("k").get<double>(), r.at("sigma").get<double>()};
      o.mode = injection_mode_from_string(r.at("mode").get<std::string>());
      const ImagePlane img = io::read_png(r.at("input_path").get<std::string>());
      const DegradedSample s = synthesize_attack(img, o, r.at("seed").get<std::uint64_t>());
      io::write_png(output_dir / fs::path(r.at("output_path").get<std::string>()).filename(), s.image);
      std::lock_guard lock(m);
      ++summary.written;
    } catch (const json::exception& e) {
      throw FormatError(std::string("manifest record: ") + e.what());
    }
  });
  return summary;
}

PerturbConfig PerturbConfig::from(ConfigReader& r) {
  PerturbConfig c;
  c.sigma_per = r.optional<double>("sigma_per");
  c.profile = r.optional<std::string>("profile");
  c.mode = mode_from(r, "mode", c.mode);
  return c;
}

json PerturbConfig::to_json() const {
  return {{"sigma_per", sigma_per ? json(*sigma_per) : json()},
          {"profile", profile ? json(*profile) : json()},
          {"mode", to_string(mode)}};
}

Summary run_perturb(const fs::path& input_dir, const fs::path& output_dir, const PerturbConfig& config,
                    const RunOptions& options) {
  const Stopwatch clock;
  const auto files = list_pngs(input_dir);
  prepare_output(input_dir, output_dir);
  std::optional<CameraProfile> fixed;
  if (config.profile) fixed = resolve_profile(*config.profile);
  Manifest manifest("perturb", config.to_json(), options.seed);
  parallel_for(files.size(), options.jobs, [&](std::size_t i) {
    json record{{"input_path", files[i].generic_string()}};
    try {
      const std::uint64_t seed = derive_seed(options.seed, i);
      CounterRng profile_rng(seed, attack_stream::profile);
      const CameraProfile profile = fixed ? *fixed : sample_profile(profile_rng);
      const ImagePlane img = io::read_png(files[i]);
      const PerturbedPair pair = perturb_lowlight(img, config.sigma_per, profile, seed, config.mode);
      const fs::path out = output_dir / files[i].filename();
      io::write_png(out, pair.perturbed);
      const json side = sidecar(pair, profile, config.mode);
      write_json(sidecar_path(output_dir, files[i]), side);
      record["output_path"] = out.generic_string();
      record["sidecar_path"] = sidecar_path(output_dir, files[i]).generic_string();
      record.update(side);
    } catch (const Error& e) {
      record["error"] = e.what();
    }
    manifest.add(std::move(record));
  });
  manifest.write(output_dir);
  write_timings(output_dir, "perturb", clock, {{"images", files.size()}});
  return summarize(manifest);
}

// ---- predictor ----------------------------------------------------------------------

Summary run_predict(const fs::path& checkpoint, const fs::path& input_dir, const fs::path& output_dir,
                    const RunOptions& options) {
  const Stopwatch clock;
  const auto meta = io::load_adt1(checkpoint).meta;
  if (!meta.contains("predictor")) throw FormatError(checkpoint.string() + " is not a predictor checkpoint");
  nets::NoisePredictorNet<float> net(predictor_from_json(meta.at("predictor")), 0);
  train::load_checkpoint(checkpoint, net.parameters());
  const auto files = list_pngs(input_dir);
  prepare_output(input_dir, output_dir);
  Manifest manifest("predict", {{"checkpoint", checkpoint.generic_string()}}, options.seed);
  parallel_for(files.size(), options.jobs, [&](std::size_t i) {
    json record{{"input_path", files[i].generic_string()}};
    try {
      const ImagePlane img = io::read_png(files[i]);
      ad::NoGradGuard guard;
      const auto p = net.forward(image_to_tensor<float>(img));
      const NormalizedNoiseParams n{p.value()[0], p.value()[1]};
      const NoiseParams d = denormalize(n);
      const json side{{"k", d.k}, {"sigma", d.sigma}, {"k_n", n.k_n}, {"sigma_n", n.sigma_n}};
      write_json(sidecar_path(output_dir, files[i]), side);
      record["output_path"] = sidecar_path(output_dir, files[i]).generic_string();
      record.update(side);
    } catch (const Error& e) {
      record["error"] = e.what();
    }
    manifest.add(std::move(record));
  });
  manifest.write(output_dir);
  write_timings(output_dir, "predict", clock, {{"images", files.size()}});
  return summarize(manifest);
}

PredictorRunConfig PredictorRunConfig::from(ConfigReader& r) {
  PredictorRunConfig c;
  c.n_samples = r.get("n_samples", c.n_samples);
  c.n_heldout = r.get("n_heldout", c.n_heldout);
  c.data = data_from(r, c.data);
  c.net = predictor_from(r, c.net);
  c.train.epochs = r.get("epochs", c.train.epochs);
  c.train.lr = r.get("lr", c.train.lr);
  c.train.lr_final_ratio = r.get("lr_final_ratio", c.train.lr_final_ratio);
  c.train.batch = r.get("batch", c.train.batch);
  c.train.crop = r.get("crop", c.train.crop);
  c.train.use_normal = r.get("use_normal", c.train.use_normal);
  c.train.use_low = r.get("use_low", c.train.use_low);
  c.train.augment = r.get("augment", c.train.augment);
  if (c.n_samples < 1 || c.n_heldout < 0) throw InputError("n_samples must be >= 1 and n_heldout >= 0");
  return c;
}

json PredictorRunConfig::to_json() const {
  json j = data_to_json(data);
  j.update(predictor_to_json(net));
  j.update({{"n_samples", n_samples},
            {"n_heldout", n_heldout},
            {"epochs", train.epochs},
            {"lr", train.lr},
            {"lr_final_ratio", train.lr_final_ratio},
            {"batch", train.batch},
            {"crop", train.crop},
            {"use_normal", train.use_normal},
            {"use_low", train.use_low},
            {"augment", train.augment}});
  return j;
}

train::PredictorTrainResult run_train_predictor(const fs::path& output_dir, const PredictorRunConfig& config,
                                                const RunOptions& options, bool verbose) {
  const Stopwatch clock;
  prepare_output(output_dir);
  const auto train_data = train::synth_toy_dataset(config.n_samples, derive_seed(options.seed, 1), config.data);
  const auto heldout = train::synth_toy_dataset(config.n_heldout, derive_seed(options.seed, 2), config.data);
  nets::NoisePredictorNet<float> net(config.net, derive_seed(options.seed, 3));
  auto tc = config.train;
  tc.seed = derive_seed(options.seed, 4);
  const auto result = train::train_noise_predictor(net, train_data, heldout, tc, [&](int epoch, double loss) {
    if (verbose) std::cerr << "epoch " << epoch << " loss " << loss << "\n";
  });

  const json net_json = predictor_to_json(config.net);
  train::save_checkpoint<float>(output_dir / "predictor.adt1", net.parameters(), nullptr, {{"predictor", net_json}});
  io::write_text(output_dir / "history.csv", history_csv(result.epoch_loss));
  const json report{{"heldout_spearman_sigma", result.heldout.spearman_sigma},
                    {"heldout_spearman_k", result.heldout.spearman_k},
                    {"heldout_mse", result.heldout.mse},
                    {"dead_parameters", result.dead_parameters},
                    {"train_digest", train::dataset_digest(train_data)},
                    {"heldout_digest", train::dataset_digest(heldout)}};
  write_json(output_dir / "report.json", report);

  Manifest manifest("train-predictor", config.to_json(), options.seed);
  manifest.add(output_record(output_dir / "predictor.adt1", "checkpoint"));
  manifest.add(output_record(io::index_path(output_dir / "predictor.adt1"), "checkpoint_index"));
  manifest.add(output_record(output_dir / "history.csv", "history"));
  manifest.add(output_record(output_dir / "report.json", "report"));
  manifest.write(output_dir);
  write_timings(output_dir, "train-predictor", clock);
  return result;
}

// ---- defense ------------------------------------------------------------------------

DefenseRunConfig DefenseRunConfig::from(ConfigReader& r) {
  DefenseRunConfig c;
  c.n_samples = r.get("n_samples", c.n_samples);
  c.n_test = r.get("n_test", c.n_test);
  c.data = data_from(r, c.data);
  c.predictor.widths = r.get("predictor_widths", c.predictor.widths);
  c.predictor.hidden = r.get("predictor_hidden", c.predictor.hidden);
  c.backbone = backbone_from(r, c.backbone);
  if (const auto modes = r.optional<std::vector<std::string>>("moe_modes")) {
    if (modes->size() != 2) throw InputError("moe_modes must be [bottleneck, decoder]");
    try {
      c.backbone.bottleneck_mode = nets::moe_mode_from_string((*modes)[0]);
      c.backbone.decoder_mode = nets::moe_mode_from_string((*modes)[1]);
    } catch (const Error& e) {
      throw InputError(std::string("moe_modes: ") + e.what());
    }
  }
  c.train.epochs = r.get("epochs", c.train.epochs);
  c.train.lr = r.get("lr", c.train.lr);
  c.train.lr_final_ratio = r.get("lr_final_ratio", c.train.lr_final_ratio);
  c.train.batch = r.get("batch", c.train.batch);
  c.train.crop = r.get("crop", c.train.crop);
  c.train.weights.lambda_con = r.get("lambda_con", c.train.weights.lambda_con);
  c.train.weights.lambda_met = r.get("lambda_met", c.train.weights.lambda_met);
  c.train.eta = r.get("eta", c.train.eta);
  c.train.use_consist = r.get("use_consist", c.train.use_consist);
  c.train.use_metric = r.get("use_metric", c.train.use_metric);
  c.train.freeze_predictor = r.get("freeze_predictor", c.train.freeze_predictor);
  c.train.clip_norm = r.get("clip_norm", c.train.clip_norm);
  c.predictor_checkpoint = r.optional<std::string>("predictor_checkpoint");
  if (c.n_samples < 1 || c.n_test < 1) throw InputError("n_samples and n_test must be >= 1");
  return c;
}

json DefenseRunConfig::to_json() const {
  json j = data_to_json(data);
  j.update(backbone_to_json(backbone));
  j.update({{"n_samples", n_samples},
            {"n_test", n_test},
            {"predictor_widths", predictor.widths},
            {"predictor_hidden", predictor.hidden},
            {"epochs", train.epochs},
            {"lr", train.lr},
            {"lr_final_ratio", train.lr_final_ratio},
            {"batch", train.batch},
            {"crop", train.crop},
            {"lambda_con", train.weights.lambda_con},
            {"lambda_met", train.weights.lambda_met},
            {"eta", train.eta},
            {"use_consist", train.use_consist},
            {"use_metric", train.use_metric},
            {"freeze_predictor", train.freeze_predictor},
            {"clip_norm", train.clip_norm},
            {"predictor_checkpoint", predictor_checkpoint ? json(*predictor_checkpoint) : json()}});
  return j;
}

train::DefenseTrainResult run_train_defense(const fs::path& output_dir, const DefenseRunConfig& config,
                                            const RunOptions& options, bool verbose) {
  const Stopwatch clock;
  prepare_output(output_dir);
  nets::PredictorConfig pc = config.predictor;
  if (config.predictor_checkpoint) {
    const auto meta = io::load_adt1(*config.predictor_checkpoint).meta;
    if (!meta.contains("predictor")) throw FormatError(*config.predictor_checkpoint + " is not a predictor checkpoint");
    pc = predictor_from_json(meta.at("predictor"));
  }
  train::DefenseSystem system(pc, config.backbone, derive_seed(options.seed, 3));
  if (config.predictor_checkpoint) train::load_checkpoint(*config.predictor_checkpoint, system.predictor.parameters());

  const auto train_data = train::synth_toy_dataset(config.n_samples, derive_seed(options.seed, 1), config.data);
  auto test_options = config.data;
  test_options.synthesis = train::Synthesis::Pds;
  const auto test_data = train::synth_toy_dataset(config.n_test, derive_seed(options.seed, 2), test_options);
  auto tc = config.train;
  tc.seed = derive_seed(options.seed, 4);
  const auto result = train::train_defense_toy(system, train_data, test_data, tc, {}, [&](int epoch, double loss) {
    if (verbose) std::cerr << "epoch " << epoch << " loss " << loss << "\n";
  });

  train::save_checkpoint<float>(output_dir / "defense.adt1", system.parameters(true), nullptr,
                                {{"predictor", predictor_to_json(pc)}, {"backbone", backbone_to_json(config.backbone)}});
  io::write_text(output_dir / "history.csv", history_csv(result.epoch_loss));
  std::string log;
  for (const auto& s : result.steps) log += train::to_json(s).dump() + "\n";
  const json report{{"heldout_mae", result.heldout.mae},
                    {"heldout_input_mae", result.heldout.input_mae},
                    {"gate_delta", result.heldout.gate_delta},
                    {"dead_parameters", result.dead_parameters},
                    {"train_digest", train::dataset_digest(train_data)},
                    {"test_digest", train::dataset_digest(test_data)},
                    {"final_step", result.steps.empty() ? json() : train::to_json(result.steps.back())}};
  write_json(output_dir / "report.json", report);
  io::write_text(output_dir / "train_log.jsonl", log);

  Manifest manifest("train-defense", config.to_json(), options.seed);
  manifest.add(output_record(output_dir / "defense.adt1", "checkpoint"));
  manifest.add(output_record(io::index_path(output_dir / "defense.adt1"), "checkpoint_index"));
  manifest.add(output_record(output_dir / "history.csv", "history"));
  manifest.add(output_record(output_dir / "report.json", "report"));
  manifest.add(output_record(output_dir / "train_log.jsonl", "loss_log"));
  manifest.write(output_dir);
  write_timings(output_dir, "train-defense", clock);
  return result;
}

// ---- experiments --------------------------------------------------------------------

verify::StatsVarianceConfig stats_variance_config(ConfigReader& r) {
  verify::StatsVarianceConfig c;
  c.intensities = r.get("intensities", c.intensities);
  c.patch = r.get("patch", c.patch);
  c.repeats = r.get("repeats", c.repeats);
  c.params.k = r.get("k", c.params.k);
  c.params.sigma = r.get("sigma", c.params.sigma);
  c.profile = r.get("profile", c.profile);
  c.mode = mode_from(r, "mode", c.mode);
  c.k0_sigma = r.get("k0_sigma", c.k0_sigma);
  c.flat_tol = r.get("flat_tol", c.flat_tol);
  c.min_cv = r.get("min_cv", c.min_cv);
  c.k0_tol = r.get("k0_tol", c.k0_tol);
  return c;
}

json to_json(const verify::StatsVarianceConfig& c) {
  return {{"intensities", c.intensities}, {"patch", c.patch},       {"repeats", c.repeats},
          {"k", c.params.k},              {"sigma", c.params.sigma}, {"profile", c.profile},
          {"mode", to_string(c.mode)},    {"k0_sigma", c.k0_sigma},  {"flat_tol", c.flat_tol},
          {"min_cv", c.min_cv},           {"k0_tol", c.k0_tol}};
}

verify::StatsVarianceResult run_stats_variance(const fs::path& output_dir, const verify::StatsVarianceConfig& config,
                                               const RunOptions& options) {
  const Stopwatch clock;
  prepare_output(output_dir);
  auto c = config;
  c.seed = options.seed;
  auto result = verify::run_stats_variance(c);
  io::write_text(output_dir / "variance.csv", verify::to_csv(result));
  io::write_text(output_dir / "variance.svg", verify::to_svg(result));
  json report = to_json(result.report);
  report["srgb_stddev"] = result.srgb_stddev;
  write_json(output_dir / "report.json", report);
  Manifest manifest("stats-variance", to_json(config), options.seed);
  manifest.add(output_record(output_dir / "variance.csv", "table"));
  manifest.add(output_record(output_dir / "variance.svg", "plot"));
  manifest.add(output_record(output_dir / "report.json", "report"));
  manifest.write(output_dir);
  write_timings(output_dir, "stats-variance", clock);
  return result;
}

VerifyConfig VerifyConfig::from(ConfigReader& r) {
  VerifyConfig c;
  c.suites = r.get("suites", c.suites);
  c.corrupt_demosaic = r.get("corrupt_demosaic", c.corrupt_demosaic);
  c.clt_mode = mode_from(r, "clt_mode", c.clt_mode);
  c.grad_seeds = r.get("grad_seeds", c.grad_seeds);
  return c;
}

json VerifyConfig::to_json() const {
  return {{"suites", suites},
          {"corrupt_demosaic", corrupt_demosaic},
          {"clt_mode", to_string(clt_mode)},
          {"grad_seeds", grad_seeds}};
}

std::vector<verify::SuiteReport> run_verify(const VerifyConfig& config, const RunOptions& options) {
  static const std::vector<std::string> all{"ROUNDTRIP", "CLT", "GRAD", "MARGIN", "LINEARITY", "ADDITIVE"};
  std::vector<std::string> suites = config.suites.empty() ? all : config.suites;
  for (auto& s : suites) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return std::toupper(ch); });
    if (std::find(all.begin(), all.end(), s) == all.end()) throw InputError("unknown verify suite '" + s + "'");
  }
  std::vector<verify::SuiteReport> out;
  for (const auto& s : suites) {
    if (s == "ROUNDTRIP") {
      verify::RoundTripOptions o;
      o.corrupt_demosaic = config.corrupt_demosaic;
      out.push_back(verify::verify_roundtrip(o));
    } else if (s == "CLT") {
      verify::CltOptions o;
      o.mode = config.clt_mode;
      o.seed = options.seed;
      out.push_back(verify::verify_clt(o));
    } else if (s == "GRAD") {
      verify::GradOptions o;
      o.seeds = config.grad_seeds;
      o.first_seed = options.seed + 1;
      out.push_back(verify::verify_gradients(o));
    } else if (s == "MARGIN") {
      out.push_back(verify::verify_margin());
    } else if (s == "LINEARITY") {
      verify::LinearityOptions o;
      o.seed = options.seed;
      out.push_back(verify::verify_variance_linearity(o));
    } else {
      out.push_back(verify::verify_additive_variance());
    }
  }
  return out;
}

json to_json(const verify::SuiteReport& r) {
  json checks = json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name},
                      {"passed", c.passed},
                      {"observed", c.observed},
                      {"threshold", c.threshold},
                      {"detail", c.detail}});
  json j{{"suite", r.suite}, {"passed", r.passed()}, {"checks", checks}};
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

std::string format_report(const verify::SuiteReport& r) {
  std::ostringstream s;
  s.precision(6);
  if (!r.note.empty()) s << r.suite << ": " << r.note << "\n";
  for (const auto& c : r.checks)
    s << r.suite << "/" << c.name << ' ' << (c.passed ? "PASS" : "FAIL") << " observed=" << c.observed
      << " threshold=" << c.threshold << (c.detail.empty() ? "" : "  " + c.detail) << "\n";
  return s.str();
}

}  // namespace rawshield::cli
