// coilwatch command-line front end.
//
// Exit codes: 0 success, 1 runtime or data failure, 2 usage error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "coilwatch/config.hpp"
#include "coilwatch/data.hpp"
#include "coilwatch/error.hpp"
#include "coilwatch/network.hpp"
#include "coilwatch/pipeline.hpp"
#include "coilwatch/preprocessing.hpp"
#include "coilwatch/random.hpp"

namespace fs = std::filesystem;
using namespace coilwatch;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& text) { std::cerr << "[coilwatch] " << text << "\n"; }

double broken_share(std::span<const NcmSample> samples) {
  if (samples.empty()) return 0.0;
  const auto broken = std::count_if(samples.begin(), samples.end(), [](const NcmSample& s) { return s.label == Label::broken; });
  return static_cast<double>(broken) / static_cast<double>(samples.size());
}

// Options shared by the commands that build a RunConfig.
struct ConfigFlags {
  std::string config_path;
  std::string channels, ncms;
  std::size_t coils = 0;
  double broken_fraction = 0.0;
  std::size_t measurements = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> variants;
  bool no_augment = false;
  bool ablation = false;
  double target_ratio = 0.0;
  std::size_t folds = 0;
  std::size_t epochs = 0;
  std::size_t jobs = 0;
  bool pooled_meta = false;

  CLI::Option *o_coils{}, *o_fraction{}, *o_measurements{}, *o_seed{}, *o_variants{}, *o_ratio{}, *o_folds{},
      *o_epochs{}, *o_jobs{}, *o_channels{}, *o_ncms{};

  void add_data(CLI::App& app) {
    app.add_option("--config", config_path, "JSON run configuration; flags override it")->check(CLI::ExistingFile);
    o_channels = app.add_option("--channels", channels, "channel table (CSV); use with --ncms");
    o_ncms = app.add_option("--ncms", ncms, "NCM table (CSV); use with --channels");
    o_coils = app.add_option("--coils", coils, "synthetic coil count")->check(CLI::PositiveNumber);
    o_fraction = app.add_option("--broken-fraction", broken_fraction, "synthetic broken-coil share")
                     ->check(CLI::Range(0.0, 1.0));
    o_measurements = app.add_option("--measurements", measurements, "synthetic measurement events per coil")
                         ->check(CLI::PositiveNumber);
    o_seed = app.add_option("--seed", seed, "master seed (also seeds the synthetic generator)");
  }

  void add_training(CLI::App& app) {
    o_variants = app.add_option("--cnn-variant", variants, "cnn1, cnn2, cnn3, cnn4 or all (repeatable)");
    app.add_flag("--no-augment", no_augment, "train the CNNs on measured matrices only");
    app.add_flag("--augment-ablation", ablation, "also train every CNN without augmentation");
    o_ratio = app.add_option("--target-ratio", target_ratio, "broken share after augmentation")
                  ->check(CLI::Range(0.0, 1.0));
    o_folds = app.add_option("--folds", folds, "cross-validation folds")->check(CLI::Range(2, 1000));
    o_epochs = app.add_option("--epochs", epochs, "max epochs for every network")->check(CLI::NonNegativeNumber);
    o_jobs = app.add_option("--jobs", jobs, "folds trained in parallel")->check(CLI::PositiveNumber);
    app.add_flag("--pooled-meta", pooled_meta, "fit the meta learner on rows pooled over folds");
  }

  RunConfig build() const {
    RunConfig c;
    try {
      if (!config_path.empty()) c = load_config(config_path);
    } catch (const ContractViolation& e) {
      throw UsageError(e.what());
    }
    if (o_channels->count() != o_ncms->count()) throw UsageError("--channels and --ncms must be given together");
    if (o_channels->count()) {
      c.channel_table = channels;
      c.ncm_table = ncms;
    }
    if (o_coils->count()) c.synthetic.coils = coils;
    if (o_fraction->count()) c.synthetic.broken_fraction = broken_fraction;
    if (o_measurements->count()) c.synthetic.measurements_per_coil = measurements;
    if (o_seed->count()) c.seed = c.synthetic.seed = seed;
    if (o_variants && o_variants->count()) {
      c.cnn.variants.clear();
      for (const auto& v : variants) {
        if (v == "all") {
          c.cnn.variants.assign(std::begin(kAllCnnVariants), std::end(kAllCnnVariants));
          continue;
        }
        try {
          const CnnVariant parsed = parse_cnn_variant(v);
          if (std::find(c.cnn.variants.begin(), c.cnn.variants.end(), parsed) == c.cnn.variants.end())
            c.cnn.variants.push_back(parsed);
        } catch (const ContractViolation& e) {
          throw UsageError(e.what());
        }
      }
    }
    if (no_augment) c.augment.enabled = false;
    if (ablation) c.augment.ablation = true;
    if (o_ratio && o_ratio->count()) c.augment.target_ratio = target_ratio;
    if (o_folds && o_folds->count()) c.cv.folds = folds;
    if (o_epochs && o_epochs->count()) c.fcn.train.max_epochs = c.cnn.train.max_epochs = epochs;
    if (o_jobs && o_jobs->count()) c.jobs = jobs;
    if (pooled_meta) c.meta.pooled = true;
    try {
      c.validate();
    } catch (const ContractViolation& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

int cmd_generate(const ConfigFlags& flags, const fs::path& out_dir) {
  const RunConfig config = flags.build();
  const Dataset data = generate_synthetic(config.synthetic);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  save_channel_table(out_dir / "channels.csv", data.channels);
  save_ncm_records(out_dir / "ncms.csv", data.ncms);
  std::size_t broken = 0;
  const auto coils = data.coils();
  for (const auto& [id, rec] : coils) broken += rec.label == Label::broken;
  std::cout << "coils " << coils.size() << " (broken " << broken << ")\n"
            << "channel rows " << data.channels.size() << " -> " << (out_dir / "channels.csv").string() << "\n"
            << "matrices " << data.ncms.size() << " -> " << (out_dir / "ncms.csv").string() << "\n";
  return kOk;
}

int cmd_augment(const fs::path& in, const fs::path& out, double ratio, std::uint64_t seed, bool full) {
  const auto samples = load_ncm_records(in);
  const double before = broken_share(samples);
  if (std::none_of(samples.begin(), samples.end(), [](const NcmSample& s) { return s.label == Label::broken; })) {
    log_line("no broken matrices in " + in.string() + "; nothing to augment");
    return kFailure;
  }
  std::mt19937_64 rng(mix_seed(seed, 0));
  const auto balanced = balance_to_ratio(samples, ratio, rng, {full});
  if (balanced.size() == samples.size()) {
    if (fs::exists(out) && fs::equivalent(in, out)) return kOk;
    fs::copy_file(in, out, fs::copy_options::overwrite_existing);
  } else {
    for (const auto& s : balanced) validate_ncm(s.matrix, "augmented matrix of coil " + s.coil_id);
    save_ncm_records(out, balanced, true);
  }
  std::cout << "matrices " << samples.size() << " -> " << balanced.size() << "\n"
            << "broken share " << before << " -> " << broken_share(balanced) << "\n";
  return kOk;
}

int cmd_train_base(const ConfigFlags& flags, const fs::path& out_dir) {
  const RunConfig config = flags.build();
  const Dataset data = load_dataset(config);
  // Stratified base-train/tune split over all coils.
  std::vector<std::string> broken, normal;
  for (const auto& [id, rec] : data.coils()) (rec.label == Label::broken ? broken : normal).push_back(id);
  std::mt19937_64 rng(mix_seed(config.seed, 0));
  shuffle(broken, rng);
  shuffle(normal, rng);
  std::vector<std::string> base, tune;
  for (auto* group : {&broken, &normal}) {
    const auto cut = static_cast<std::size_t>(std::llround(config.cv.base_fraction * static_cast<double>(group->size())));
    base.insert(base.end(), group->begin(), group->begin() + static_cast<std::ptrdiff_t>(cut));
    tune.insert(tune.end(), group->begin() + static_cast<std::ptrdiff_t>(cut), group->end());
  }
  std::sort(base.begin(), base.end());
  std::sort(tune.begin(), tune.end());
  const BaseModels models = train_base_models(config, data, base, tune, std::nullopt, mix_seed(config.seed, 1), log_line);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  save_model(models.fcn, out_dir / "fcn.json");
  std::cout << "fcn -> " << (out_dir / "fcn.json").string() << " (epoch " << models.fcn.selected_epoch << ")\n";
  for (const auto& [stage, model] : models.cnns) {
    const auto path = out_dir / (stage + ".json");
    save_model(model, path);
    std::cout << stage << " -> " << path.string() << " (epoch " << model.selected_epoch << ")\n";
  }
  return kOk;
}

int cmd_evaluate(const ConfigFlags& flags, const fs::path& out_dir) {
  const RunConfig config = flags.build();
  const EvalReport report = run_pipeline(config, log_line);
  write_report(report, out_dir);
  std::cout << render_text(report);
  log_line("report written to " + out_dir.string());
  return report.failed_folds() == 0 ? kOk : kFailure;
}

int cmd_report(const fs::path& in, const std::string& out_dir) {
  const EvalReport report = read_report(in);
  if (!out_dir.empty()) write_report(report, out_dir);
  std::cout << render_text(report);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coilwatch: coil failure prediction from channel features and noise covariance matrices"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, train_flags, eval_flags;
  std::string gen_out, train_out, eval_out = "coilwatch-report";

  auto* gen = app.add_subcommand("generate", "write a synthetic channel table and NCM table");
  gen_flags.add_data(*gen);
  gen->add_option("--out", gen_out, "output directory")->required();

  std::string aug_in, aug_out;
  double aug_ratio = 0.2;
  std::uint64_t aug_seed = 1;
  bool aug_full = false;
  auto* aug = app.add_subcommand("augment", "balance an NCM table with permuted broken matrices");
  aug->add_option("--in", aug_in, "input NCM table")->required()->check(CLI::ExistingFile);
  aug->add_option("--out", aug_out, "output NCM table (with provenance column)")->required();
  aug->add_option("--ratio", aug_ratio, "target broken share")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  aug->add_option("--seed", aug_seed, "seed")->capture_default_str();
  aug->add_flag("--full-expansion", aug_full, "expand every broken matrix N-1 times, then subsample");

  auto* tb = app.add_subcommand("train-base", "train the FCN and CNN base learners and save checkpoints");
  train_flags.add_data(*tb);
  train_flags.add_training(*tb);
  tb->add_option("--out", train_out, "checkpoint directory")->required();

  auto* ev = app.add_subcommand("evaluate", "grouped cross-validation of all stages");
  eval_flags.add_data(*ev);
  eval_flags.add_training(*ev);
  ev->add_option("--out", eval_out, "report directory")->capture_default_str();

  std::string rep_in, rep_out;
  auto* rep = app.add_subcommand("report", "print the tables of a saved report");
  rep->add_option("--in", rep_in, "report.json")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", rep_out, "rewrite report files into this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_flags, gen_out);
    if (aug->parsed()) return cmd_augment(aug_in, aug_out, aug_ratio, aug_seed, aug_full);
    if (tb->parsed()) return cmd_train_base(train_flags, train_out);
    if (ev->parsed()) return cmd_evaluate(eval_flags, eval_out);
    if (rep->parsed()) return cmd_report(rep_in, rep_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
