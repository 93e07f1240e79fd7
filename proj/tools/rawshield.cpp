// rawshield: batch attack synthesis, toy training and verification experiments.
//
// Exit codes: 0 ok, 1 usage or bad configuration, 2 verification failure,
// 3 I/O failure (including files skipped during a batch).

#include <CLI11.hpp>

#include <iostream>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <optional>
#include <string>

#include "rawshield/cli.hpp"
#include "rawshield/errors.hpp"
#include "rawshield/io.hpp"

namespace {

namespace cli = rawshield::cli;
using nlohmann::json;

enum Exit { kOk = 0, kUsage = 1, kVerify = 2, kIo = 3 };

template <typename T>
void override(json& config, const std::string& key, const std::optional<T>& value) {
  if (value) config[key] = *value;
}

int report_batch(const std::string& command, const cli::Summary& s) {
  std::cout << command << ": " << s.written << " written";
  if (s.failed) std::cout << ", " << s.failed << " skipped (see manifest.jsonl)";
  std::cout << "\n";
  return s.failed ? kIo : kOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training allocates and frees many multi-megabyte tensors per step; with
  // the default thresholds each one is an mmap/munmap pair.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"RAW-domain noise attack synthesis, toy defense training and verification"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", cli::kToolVersion);

  std::uint64_t seed = 0;
  std::optional<std::string> config_path;
  int jobs = 1;
  app.add_option("--seed", seed, "Master seed (every output records the seed it derived)");
  app.add_option("--config", config_path, "JSON config; keys of the subcommand's section, or a flat object");
  app.add_option("--jobs", jobs, "Worker threads for per-image commands")->check(CLI::Range(1, 64));

  // attack
  auto* attack = app.add_subcommand("attack", "RAW-domain noise attack on a directory of PNGs");
  std::vector<std::string> attack_paths;
  std::optional<double> k, sigma;
  std::optional<std::string> attack_mode, attack_profile, replay;
  attack->add_option("paths", attack_paths, "INPUT_DIR OUTPUT_DIR (only OUTPUT_DIR with --replay)")->required()->expected(1, 2);
  attack->add_option("--k", k, "Shot-noise coefficient (with --sigma; default: sampled per image)");
  attack->add_option("--sigma", sigma, "Read-noise stddev (with --k)");
  attack->add_option("--mode", attack_mode, "gauss | pg");
  attack->add_option("--profile", attack_profile, "Bundled profile name or profile JSON (default: random per image)");
  attack->add_option("--replay", replay, "Regenerate the outputs of an attack manifest");

  // perturb
  auto* perturb = app.add_subcommand("perturb", "Read-noise self-perturbation of low-light PNGs");
  std::string perturb_in, perturb_out;
  std::optional<double> sigma_per;
  std::optional<std::string> perturb_mode, perturb_profile;
  perturb->add_option("input", perturb_in)->required();
  perturb->add_option("output", perturb_out)->required();
  perturb->add_option("--sigma-per", sigma_per, "Added read-noise stddev (default: uniform in [1e-3, 5e-3])");
  perturb->add_option("--mode", perturb_mode, "gauss | pg");
  perturb->add_option("--profile", perturb_profile, "Bundled profile name or profile JSON (default: random per image)");

  // predict
  auto* predict = app.add_subcommand("predict", "Run a predictor checkpoint on PNGs and write parameter sidecars");
  std::string checkpoint, predict_in, predict_out;
  predict->add_option("checkpoint", checkpoint)->required();
  predict->add_option("input", predict_in)->required();
  predict->add_option("output", predict_out)->required();

  // train-predictor
  auto* train_pred = app.add_subcommand("train-predictor", "Train the noise predictor on synthetic patches");
  std::string tp_out;
  std::optional<int> tp_epochs, tp_samples;
  bool tp_verbose = false;
  train_pred->add_option("output", tp_out)->required();
  train_pred->add_option("--epochs", tp_epochs);
  train_pred->add_option("--n-samples", tp_samples);
  train_pred->add_flag("--verbose", tp_verbose, "Print the loss after every epoch");

  // train-defense
  auto* train_def = app.add_subcommand("train-defense", "Train the toy defense (predictor + DA-MoE backbone)");
  std::string td_out;
  std::optional<int> td_epochs, td_samples;
  std::optional<std::string> td_checkpoint;
  bool td_verbose = false;
  train_def->add_option("output", td_out)->required();
  train_def->add_option("--epochs", td_epochs);
  train_def->add_option("--n-samples", td_samples);
  train_def->add_option("--predictor-checkpoint", td_checkpoint, "Initialise the predictor from a checkpoint");
  train_def->add_flag("--verbose", td_verbose, "Print the loss after every epoch");

  // stats-variance
  auto* stats = app.add_subcommand("stats-variance", "Output variance against intensity: RAW attack vs sRGB noise");
  std::string stats_out;
  stats->add_option("output", stats_out)->required();

  // verify
  auto* verify = app.add_subcommand("verify", "Run verification suites");
  std::vector<std::string> suites;
  bool corrupt = false;
  std::optional<std::string> clt_mode, report_path;
  std::optional<int> grad_seeds;
  verify->add_option("--suite", suites, "ROUNDTRIP, CLT, GRAD, MARGIN, LINEARITY, ADDITIVE (default: all)");
  verify->add_flag("--corrupt-demosaic", corrupt, "Negative control: wrong demosaic kernel in ROUNDTRIP");
  verify->add_option("--clt-mode", clt_mode, "gauss | pg");
  verify->add_option("--grad-seeds", grad_seeds);
  verify->add_option("--report", report_path, "Also write the reports as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  const cli::RunOptions options{seed, jobs};
  const auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    json config = cli::load_command_config(config_path ? std::optional<cli::fs::path>(*config_path) : std::nullopt, command);
    if (!config.is_object()) throw rawshield::InputError("config section for " + command + " must be an object");

    if (command == "attack") {
      if (replay) {
        if (attack_paths.size() != 1) throw rawshield::InputError("attack --replay takes only OUTPUT_DIR");
        const auto s = cli::replay_attack(*replay, attack_paths[0], jobs);
        std::cout << "attack --replay: " << s.written << " written\n";
        return kOk;
      }
      if (attack_paths.size() != 2) throw rawshield::InputError("attack needs INPUT_DIR OUTPUT_DIR");
      override(config, "k", k);
      override(config, "sigma", sigma);
      override(config, "mode", attack_mode);
      override(config, "profile", attack_profile);
      cli::ConfigReader r(config);
      const auto c = cli::AttackConfig::from(r);
      r.finish();
      return report_batch(command, cli::run_attack(attack_paths[0], attack_paths[1], c, options));
    }
    if (command == "perturb") {
      override(config, "sigma_per", sigma_per);
      override(config, "mode", perturb_mode);
      override(config, "profile", perturb_profile);
      cli::ConfigReader r(config);
      const auto c = cli::PerturbConfig::from(r);
      r.finish();
      return report_batch(command, cli::run_perturb(perturb_in, perturb_out, c, options));
    }
    if (command == "predict") {
      cli::ConfigReader(config).finish();
      return report_batch(command, cli::run_predict(checkpoint, predict_in, predict_out, options));
    }
    if (command == "train-predictor") {
      override(config, "epochs", tp_epochs);
      override(config, "n_samples", tp_samples);
      cli::ConfigReader r(config);
      const auto c = cli::PredictorRunConfig::from(r);
      r.finish();
      const auto result = cli::run_train_predictor(tp_out, c, options, tp_verbose);
      std::cout << "held-out spearman sigma " << result.heldout.spearman_sigma << ", k " << result.heldout.spearman_k
                << "\n";
      return kOk;
    }
    if (command == "train-defense") {
      override(config, "epochs", td_epochs);
      override(config, "n_samples", td_samples);
      override(config, "predictor_checkpoint", td_checkpoint);
      cli::ConfigReader r(config);
      const auto c = cli::DefenseRunConfig::from(r);
      r.finish();
      const auto result = cli::run_train_defense(td_out, c, options, td_verbose);
      std::cout << "held-out MAE " << result.heldout.mae << " (input " << result.heldout.input_mae << ")\n";
      return kOk;
    }
    if (command == "stats-variance") {
      cli::ConfigReader r(config);
      const auto c = cli::stats_variance_config(r);
      r.finish();
      const auto result = cli::run_stats_variance(stats_out, c, options);
      std::cout << cli::format_report(result.report);
      return result.report.passed() ? kOk : kVerify;
    }
    // verify
    if (!suites.empty()) config["suites"] = suites;
    if (corrupt) config["corrupt_demosaic"] = true;
    override(config, "clt_mode", clt_mode);
    override(config, "grad_seeds", grad_seeds);
    cli::ConfigReader r(config);
    const auto c = cli::VerifyConfig::from(r);
    r.finish();
    const auto reports = cli::run_verify(c, options);
    bool ok = true;
    json all = json::array();
    for (const auto& rep : reports) {
      std::cout << cli::format_report(rep);
      ok = ok && rep.passed();
      all.push_back(cli::to_json(rep));
    }
    if (report_path) rawshield::io::write_text(*report_path, all.dump(2) + "\n");
    std::cout << (ok ? "all checks passed" : "verification FAILED") << "\n";
    return ok ? kOk : kVerify;
  } catch (const rawshield::IoError& e) {
    std::cerr << command << ": " << e.what() << "\n";
    return kIo;
  } catch (const rawshield::FormatError& e) {
    std::cerr << command << ": " << e.what() << "\n";
    return kIo;
  } catch (const rawshield::Error& e) {
    std::cerr << command << ": " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << command << ": " << e.what() << "\n";
    return kIo;
  }
}
