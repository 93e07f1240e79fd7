#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rawshield/noise.hpp"
#include "rawshield/training.hpp"
#include "rawshield/verify.hpp"

/// Batch commands behind the `rawshield` executable. Every command writes a
/// `manifest.jsonl` (header line, then one record per output sorted by path)
/// that is byte-identical across reruns with the same seed and config, and a
/// separate `timings.json` with wall-clock durations.
namespace rawshield::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

/// Per-command config read from a JSON object. Every key must be consumed;
/// leftovers are reported as a usage error by `finish`.
class ConfigReader {
 public:
  explicit ConfigReader(json object);

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!obj_.contains(key)) return fallback;
    used_.insert(key);
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InputError("config key '" + key + "': " + e.what());
    }
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    if (!obj_.contains(key) || obj_.at(key).is_null()) {
      if (obj_.contains(key)) used_.insert(key);
      return std::nullopt;
    }
    return get<T>(key, T{});
  }

  void finish() const;

 private:
  json obj_;
  std::set<std::string> used_;
};

/// Reads `path` (if given) and returns the object under `command`, or the
/// whole file when it has no such key and no other command's key.
json load_command_config(const std::optional<fs::path>& path, const std::string& command);

struct RunOptions {
  std::uint64_t seed = 0;
  int jobs = 1;
};

class Manifest {
 public:
  Manifest(std::string command, json config, std::uint64_t seed);

  /// Thread-safe.
  void add(json record);
  /// Header line then records sorted by (input_path, output_path).
  std::string serialize() const;
  void write(const fs::path& dir) const;
  const std::vector<json>& records() const { return records_; }

 private:
  json header_;
  std::vector<json> records_;
  mutable std::mutex mutex_;
};

/// {"k", "sigma", "mode", "seed", "profile", "cropped"}.
json sidecar(const DegradedSample& sample);
json sidecar(const PerturbedPair& pair, const CameraProfile& profile, InjectionMode mode);

/// Bundled profile name, or a path to a profile JSON file.
CameraProfile resolve_profile(const std::string& spec);

/// Sorted *.png files directly inside `dir`. Throws IoError when the
/// directory is missing or has no PNG files.
std::vector<fs::path> list_pngs(const fs::path& dir);

struct Summary {
  std::size_t written = 0;
  std::size_t failed = 0;
};

// ---- attack / perturb -------------------------------------------------------------

struct AttackConfig {
  std::optional<double> k;
  std::optional<double> sigma;
  std::optional<std::string> profile;  ///< nullopt: random per image
  InjectionMode mode = InjectionMode::GaussApprox;

  static AttackConfig from(ConfigReader& r);
  json to_json() const;
};

/// Image i (sorted order) uses seed derive_seed(seed, i).
Summary run_attack(const fs::path& input_dir, const fs::path& output_dir, const AttackConfig& config,
                   const RunOptions& options);

/// Rebuilds every output of an attack manifest into `output_dir` from the
/// recorded input paths and sidecars alone.
Summary replay_attack(const fs::path& manifest, const fs::path& output_dir, int jobs = 1);

struct PerturbConfig {
  std::optional<double> sigma_per;      ///< nullopt: uniform in [1e-3, 5e-3]
  std::optional<std::string> profile;   ///< nullopt: random per image
  InjectionMode mode = InjectionMode::GaussApprox;

  static PerturbConfig from(ConfigReader& r);
  json to_json() const;
};

Summary run_perturb(const fs::path& input_dir, const fs::path& output_dir, const PerturbConfig& config,
                    const RunOptions& options);

// ---- predictor ----------------------------------------------------------------------

Summary run_predict(const fs::path& checkpoint, const fs::path& input_dir, const fs::path& output_dir,
                    const RunOptions& options);

struct PredictorRunConfig {
  int n_samples = 500;
  int n_heldout = 100;
  train::ToyDataOptions data;
  nets::PredictorConfig net;
  /// Normal-light term only, flip/transpose augmentation, cosine decay to
  /// 5% of the initial rate.
  train::PredictorTrainConfig train{.use_low = false, .augment = true, .lr_final_ratio = 0.05};

  static PredictorRunConfig from(ConfigReader& r);
  json to_json() const;
};

train::PredictorTrainResult run_train_predictor(const fs::path& output_dir, const PredictorRunConfig& config,
                                                const RunOptions& options, bool verbose = false);

// ---- defense ------------------------------------------------------------------------

struct DefenseRunConfig {
  int n_samples = 64;
  int n_test = 32;
  train::ToyDataOptions data;
  nets::PredictorConfig predictor{{8, 16, 32}, 32, 0.2};
  nets::BackboneConfig backbone;
  train::DefenseTrainConfig train;
  std::optional<std::string> predictor_checkpoint;

  static DefenseRunConfig from(ConfigReader& r);
  json to_json() const;
};

train::DefenseTrainResult run_train_defense(const fs::path& output_dir, const DefenseRunConfig& config,
                                            const RunOptions& options, bool verbose = false);

// ---- experiments --------------------------------------------------------------------

verify::StatsVarianceConfig stats_variance_config(ConfigReader& r);
json to_json(const verify::StatsVarianceConfig& c);

/// Writes variance.csv, variance.svg and report.json.
verify::StatsVarianceResult run_stats_variance(const fs::path& output_dir, const verify::StatsVarianceConfig& config,
                                               const RunOptions& options);

struct VerifyConfig {
  /// ROUNDTRIP, CLT, GRAD, MARGIN, LINEARITY, ADDITIVE; empty = all.
  std::vector<std::string> suites;
  bool corrupt_demosaic = false;
  InjectionMode clt_mode = InjectionMode::ExactPoissonGaussian;
  int grad_seeds = 20;

  static VerifyConfig from(ConfigReader& r);
  json to_json() const;
};

std::vector<verify::SuiteReport> run_verify(const VerifyConfig& config, const RunOptions& options);

json to_json(const verify::SuiteReport& report);
/// One line per check: "SUITE/check PASS observed=… threshold=… detail".
std::string format_report(const verify::SuiteReport& report);

}  // namespace rawshield::cli
