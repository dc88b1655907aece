// kdas: data generation, teacher training, search, selection and retraining,
// ablation tables and the gradient-check suite.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "kdas/binary_io.hpp"
#include "kdas/checkpoint.hpp"
#include "kdas/experiment.hpp"
#include "kdas/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace kdas;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "flat JSON config; missing keys take their defaults");
  cmd->add_option("--seed", f.seed, "root seed (gen-data, train-teacher) or the single run seed (other commands)");
  cmd->add_option("--out", f.out, "output directory (overrides out_dir)");
  cmd->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig load_config(const CommonFlags& f, bool seed_is_root) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(f.config);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.seed) {
    if (seed_is_root) {
      cfg.seed = *f.seed;
    } else {
      cfg.seeds = {*f.seed};
    }
  }
  cfg.validate();
  return cfg;
}

void write(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  binio::write_file(path.string(), text);
}

void log(const std::string& msg) {
  std::cerr << "[kdas] " << msg << std::endl;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

PreparedData data_for(const ExperimentConfig& cfg) { return load_or_generate_data(cfg, cfg.out_dir + "/data"); }

int cmd_gen_data(const CommonFlags& f, const std::string& kind) {
  ExperimentConfig cfg = load_config(f, true);
  if (!kind.empty()) cfg.data.kind = kind;
  cfg.validate();
  const auto dir = cfg.out_dir + "/data";
  DataSplits splits = make_splits(cfg.data, SeedStreams(cfg.seed));
  save_splits(dir, splits);
  const PreparedData data = prepare_data(std::move(splits));
  const nlohmann::json info = {{"kind", cfg.data.kind},
                               {"seed", cfg.seed},
                               {"hash", data.hash},
                               {"train", data.train.size()},
                               {"val", data.val.size()},
                               {"test", data.test.size()},
                               {"norm_mean", data.norm.mean},
                               {"norm_std", data.norm.stddev}};
  write(fs::path(dir) / "data.json", info.dump(2) + "\n");
  log("wrote " + dir + " (train " + std::to_string(data.train.size()) + ", val " + std::to_string(data.val.size()) +
      ", test " + std::to_string(data.test.size()) + ")");
  return 0;
}

int cmd_train_teacher(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f, true);
  const PreparedData data = data_for(cfg);
  log("training " + std::to_string(cfg.ensemble_size) + " teacher members");
  const EnsembleTeacher teacher = train_teacher(cfg, data, f.threads);
  const fs::path dir = fs::path(cfg.manifest_path()).parent_path();
  const auto manifest = save_ensemble(dir.string(), teacher, data.hash);
  const nlohmann::json summary = teacher_summary(teacher, data);
  write(dir / "teacher_summary.json", summary.dump(2) + "\n");
  write(dir / "histogram.csv", histogram_csv(correctness_histogram(teacher.test_logits, data.test.labels)));
  std::string curves;
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    const auto csv = training_log_csv(teacher.logs[k].log, teacher.seeds[k]);
    curves += k == 0 ? csv : csv.substr(csv.find('\n') + 1);
  }
  write(dir / "training_curves.csv", curves);
  log("manifest " + manifest + ": test oracle " + std::to_string(summary["test"]["oracle_acc"].get<double>()) +
      ", average " + std::to_string(summary["test"]["average_acc"].get<double>()));
  return 0;
}

std::optional<EnsembleTeacher> teacher_if_needed(const ExperimentConfig& cfg, const PreparedData& data,
                                                 bool needed) {
  if (!needed) return std::nullopt;
  return load_teacher(cfg.manifest_path(), data);
}

int cmd_search(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f, false);
  const PreparedData data = data_for(cfg);
  const auto teacher = teacher_if_needed(cfg, data, cfg.search_loss != LossKind::kCE);
  for (auto seed : cfg.seeds) {
    log("search seed " + std::to_string(seed) + " with " + to_string(cfg.search_loss));
    const auto start = std::chrono::steady_clock::now();
    const SearchResult r = search_stage(cfg, data, cfg.search_loss, teacher ? &*teacher : nullptr, seed, f.threads);
    const fs::path dir = fs::path(cfg.out_dir) / "search" / seed_dir(seed);
    fs::create_directories(dir);
    save_pool((dir / "pool.odtw").string(), r.pool);
    save_checkpoint(dir / "controller.odtw", r.policy.to_named());
    nlohmann::json board = nlohmann::json::array();
    for (const auto& e : r.leaderboard) board.push_back({{"genome", genome_to_json(e.genome)}, {"reward", e.reward}});
    write(dir / "leaderboard.json", board.dump(2) + "\n");
    write(dir / "reward_curve.csv", reward_curve_csv(r.curve));
    const nlohmann::json state = {
        {"seed", seed},
        {"updates", r.curve.size()},
        {"shared_steps", r.shared_steps},
        {"converged", r.converged},
        {"baseline", r.baseline.value},
        {"argmax", genome_to_json(r.policy.argmax())},
        {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
    write(dir / "search.json", state.dump(2) + "\n");
    log("seed " + std::to_string(seed) + ": " + std::to_string(r.curve.size()) + " controller updates, argmax " +
        canonical_genome(r.policy.argmax()));
  }
  return 0;
}

SearchResult load_search(const ExperimentConfig& cfg, std::uint64_t seed) {
  const fs::path dir = fs::path(cfg.out_dir) / "search" / seed_dir(seed);
  if (!fs::exists(dir / "pool.odtw") || !fs::exists(dir / "controller.odtw")) {
    throw std::runtime_error("no search artifacts in " + dir.string() + "; run search first");
  }
  const auto bb = cfg.backbone_spec();
  const auto layout = cfg.layout();
  Rng init(0);
  SearchResult r{load_pool((dir / "pool.odtw").string(), bb, layout),
                 ControllerPolicy(layout, bb.id, cfg.search.controller, init),
                 BaselineState{},
                 {},
                 {},
                 false,
                 0};
  r.policy.load_named(load_checkpoint(dir / "controller.odtw"));
  if (fs::exists(dir / "leaderboard.json")) {
    for (const auto& e : nlohmann::json::parse(binio::read_file((dir / "leaderboard.json").string()))) {
      r.leaderboard.push_back({genome_from_json(e.at("genome")), e.at("reward").get<double>()});
    }
  }
  return r;
}

int cmd_select_retrain(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f, false);
  const PreparedData data = data_for(cfg);
  const auto teacher = teacher_if_needed(cfg, data, cfg.train_loss != LossKind::kCE);
  RunRecord record{"select-retrain", cfg.hash(), code_version(), {}, {}};
  std::string metrics = "seed,genome,params,budget,search_reward,val_acc,test_acc\n";
  for (auto seed : cfg.seeds) {
    const SearchResult search = load_search(cfg, seed);
    const SelectionReport report = select_stage(cfg, data, search, seed);
    const fs::path dir = fs::path(cfg.out_dir) / "retrain" / seed_dir(seed);
    fs::create_directories(dir);
    write(dir / "selection.json", report.to_json().dump(2) + "\n");
    write(dir / "genome.json", genome_to_json(report.winner.genome).dump(2) + "\n");
    log("seed " + std::to_string(seed) + ": winner " + canonical_genome(report.winner.genome) + " with " +
        std::to_string(report.winner.params) + " parameters; retraining with " + to_string(cfg.train_loss));
    const RetrainResult r =
        retrain_stage(cfg, data, report.winner.genome, cfg.train_loss, teacher ? &*teacher : nullptr, seed);
    save_checkpoint(dir / "model.odtw", r.params.to_named());
    write(dir / "training_curve.csv", training_log_csv(r.result.log, seed));
    record.runs.push_back({seed,
                           {{"test_acc", r.result.test_acc},
                            {"val_acc", r.result.val_acc},
                            {"params", static_cast<double>(r.net.param_count)},
                            {"search_reward", report.winner.reward}}});
    std::ostringstream row;
    row.precision(17);
    row << seed << ",\"" << canonical_genome(report.winner.genome) << "\"," << r.net.param_count << ','
        << report.budget << ',' << report.winner.reward << ',' << r.result.val_acc << ',' << r.result.test_acc << '\n';
    metrics += row.str();
    log("seed " + std::to_string(seed) + ": test accuracy " + std::to_string(r.result.test_acc));
  }
  record.summarize();
  const fs::path dir = fs::path(cfg.out_dir) / "retrain";
  write(dir / "run_record.json", record.to_json().dump(2) + "\n");
  write(dir / "metrics.csv", metrics);
  const auto& acc = record.summary.at("test_acc");
  log("test accuracy " + std::to_string(acc.mean) + " +- " + std::to_string(acc.stddev));
  return 0;
}

int cmd_ablation(const CommonFlags& f) {
  const ExperimentConfig cfg = load_config(f, false);
  const PreparedData data = data_for(cfg);
  const EnsembleTeacher teacher = load_teacher(cfg.manifest_path(), data);
  const auto rows = run_ablation(cfg, data, teacher, f.threads, log);
  const fs::path path = fs::path(cfg.out_dir) / "ablation" / "ablation.csv";
  write(path, ablation_csv(rows));
  std::cout << ablation_csv(rows);
  log("wrote " + path.string());
  return 0;
}

int cmd_gradcheck(const CommonFlags& f) {
  const auto report = run_grad_checks(standard_grad_cases(f.seed.value_or(8)));
  for (const auto& e : report.entries) {
    std::printf("%-24s %.3e %s\n", e.name.c_str(), e.max_rel_error, e.passed ? "ok" : "FAIL");
  }
  std::printf("%zu checks, tolerance %.0e, %.2f s: %s\n", report.entries.size(), report.tolerance, report.seconds,
              report.passed() ? "PASS" : "FAIL");
  if (!f.out.empty()) write(fs::path(f.out) / "gradcheck.csv", report.to_csv());
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Oracle knowledge distillation with backbone-anchored architecture search"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string kind;

  auto* gen = app.add_subcommand("gen-data", "generate (or import) the train/val/test splits");
  add_common(gen, flags);
  gen->add_option("--kind", kind, "synthetic-gaussian-classes, synthetic-textured-patches or external-binary");
  auto* teacher = app.add_subcommand("train-teacher", "train the ensemble teacher and cache its logits");
  add_common(teacher, flags);
  auto* search = app.add_subcommand("search", "shared-weight search with the recurrent controller");
  add_common(search, flags);
  auto* select = app.add_subcommand("select-retrain", "pick the best feasible genome and retrain it from scratch");
  add_common(select, flags);
  auto* ablation = app.add_subcommand("ablation", "loss ablation table over students, enlarged and searched models");
  add_common(ablation, flags);
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and loss");
  add_common(grad, flags);

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(flags, kind);
    if (teacher->parsed()) return cmd_train_teacher(flags);
    if (search->parsed()) return cmd_search(flags);
    if (select->parsed()) return cmd_select_retrain(flags);
    if (ablation->parsed()) return cmd_ablation(flags);
    if (grad->parsed()) return cmd_gradcheck(flags);
  } catch (const std::exception& e) {
    std::cerr << "kdas: " << e.what() << std::endl;
    return 2;
  }
  return 1;
}
