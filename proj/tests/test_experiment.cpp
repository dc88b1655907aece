#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "kdas/binary_io.hpp"
#include "kdas/experiment.hpp"

using namespace kdas;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.data.classes = 4;
  c.data.train_per_class = 20;
  c.data.test_per_class = 8;
  c.data.height = 8;
  c.data.width = 8;
  c.ensemble_size = 2;
  c.teacher_epochs = 1;
  c.train.epochs = 1;
  c.train.batch_size = 32;
  c.search.epochs = 1;
  c.search.controller_steps = 1;
  c.search.controller.samples_per_update = 2;
  c.search.reward_batch = 8;
  c.candidates = 2;
  c.seeds = {5};
  c.manual_extra_blocks = {1, 2};
  return c;
}

std::string error_of(const nlohmann::json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ExperimentConfigTest, CommittedDefaultsMatchTheBuiltInDefaults) {
  const auto text = binio::read_file(std::string(KDAS_SOURCE_DIR) + "/configs/defaults.json");
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j, ExperimentConfig{}.to_json());
  EXPECT_EQ(ExperimentConfig::from_json(j).hash(), ExperimentConfig{}.hash());
}

TEST(ExperimentConfigTest, JsonRoundTripAndPartialOverrides) {
  ExperimentConfig c = tiny_config();
  c.search_loss = LossKind::kCE;
  c.train.milestones = {1};
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  const auto partial = ExperimentConfig::from_json({{"slots", 2}, {"train_loss", "KD"}});
  EXPECT_EQ(partial.slots, 2);
  EXPECT_EQ(partial.train_loss, LossKind::kKD);
  EXPECT_EQ(partial.ensemble_size, ExperimentConfig{}.ensemble_size);
}

TEST(ExperimentConfigTest, FieldLevelDiagnostics) {
  EXPECT_NE(error_of({{"slotz", 2}}).find("config.slotz: unknown field"), std::string::npos);
  EXPECT_NE(error_of({{"slots", "four"}}).find("config.slots"), std::string::npos);
  EXPECT_NE(error_of({{"slots", -1}}).find("config.slots"), std::string::npos);
  EXPECT_NE(error_of({{"lr", true}}).find("config.lr"), std::string::npos);
  EXPECT_NE(error_of({{"search_loss", "MSE"}}).find("config.search_loss"), std::string::npos);
  EXPECT_NE(error_of({{"budget_mode", "bytes"}}).find("config.budget_mode"), std::string::npos);
  EXPECT_NE(error_of({{"budget_mode", "absolute"}, {"budget", 10.5}}).find("config.budget"), std::string::npos);
  EXPECT_NE(error_of({{"seeds", nlohmann::json::array()}}).find("config.seeds"), std::string::npos);
  EXPECT_NE(error_of({{"seeds", {1, 1}}}).find("config.seeds"), std::string::npos);
  EXPECT_NE(error_of({{"seed", -3}}).find("config.seed"), std::string::npos);
  EXPECT_NE(error_of({{"backbone", "vgg"}}).find("config.backbone"), std::string::npos);
  EXPECT_NE(error_of({{"temperature", 0.5}}).find("config.distill"), std::string::npos);
  EXPECT_NE(error_of({{"val_fraction", 1.5}}).find("config.data"), std::string::npos);
  EXPECT_NE(error_of({{"controller_lr", -1.0}}).find("config.search"), std::string::npos);
  EXPECT_NE(error_of(nlohmann::json::array()).find("top level"), std::string::npos);
}

TEST(ExperimentConfigTest, HashIgnoresOutputLocationOnly) {
  ExperimentConfig a, b;
  b.out_dir = "elsewhere";
  b.teacher_manifest = "x/manifest.json";
  EXPECT_EQ(a.hash(), b.hash());
  b.slots = 3;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(ExperimentConfigTest, BudgetAndSchedules) {
  ExperimentConfig c;
  EXPECT_EQ(c.budget_params(), 2 * param_count(c.backbone_spec()));
  c.budget_mode = "absolute";
  c.budget = 12345;
  EXPECT_EQ(c.budget_params(), 12345);
  c.train.milestones = {3};
  EXPECT_TRUE(c.teacher_schedule().milestones.empty());
  EXPECT_EQ(c.teacher_schedule().epochs, c.teacher_epochs);
  const auto sc = c.search_config(3);
  EXPECT_EQ(sc.threads, 3);
  EXPECT_EQ(sc.shared.epochs, c.search.epochs);
  EXPECT_EQ(sc.loss, c.search_loss);
  EXPECT_EQ(c.layout().total(), c.slots);
}

TEST(RunRecordTest, SummaryIsRecomputableExactly) {
  RunRecord r{"x", "h", code_version(), {}, {}};
  r.runs = {{1, {{"acc", 0.7}}}, {2, {{"acc", 0.8}}}, {3, {{"acc", 0.75}}}};
  r.summarize();
  EXPECT_NEAR(r.summary.at("acc").mean, 0.75, 1e-15);
  EXPECT_NEAR(r.summary.at("acc").stddev, 0.05, 1e-15);
  const auto back = RunRecord::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.summary.at("acc").mean, r.summary.at("acc").mean);
  EXPECT_EQ(back.summary.at("acc").stddev, r.summary.at("acc").stddev);
  auto j = r.to_json();
  j["summary"]["acc"]["mean"] = 0.76;
  EXPECT_THROW(RunRecord::from_json(j), std::invalid_argument);
  EXPECT_FALSE(code_version().empty());
}

TEST(RunRecordTest, SingleSeedHasZeroSpread) {
  const std::vector<double> one{0.5};
  const auto s = summarize(one);
  EXPECT_EQ(s.mean, 0.5);
  EXPECT_EQ(s.stddev, 0.0);
  EXPECT_EQ(s.count, 1u);
}

TEST(AblationCsvTest, RoundTripsExactly) {
  std::vector<AblationRow> rows{{"mini-resnet", "-", "CE", 0.1 + 0.2, 1.0 / 3.0, 10962, 3},
                                {"searched", "OD", "KD", 0.777, 0.0125, 15001, 3}};
  EXPECT_EQ(parse_ablation_csv(ablation_csv(rows)), rows);
  EXPECT_THROW(parse_ablation_csv("bad header\n"), std::invalid_argument);
  EXPECT_THROW(parse_ablation_csv("model,search_loss,train_loss,acc_mean,acc_std,params,seeds\na,b\n"),
               std::invalid_argument);
}

TEST(ExperimentPipelineTest, HistogramCsvSumsToHundred) {
  CorrectnessHistogram h{{3, 0, 5, 1}};
  const auto csv = histogram_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "members_correct,count,percent");
  const auto pct = h.percentages();
  EXPECT_NEAR(std::accumulate(pct.begin(), pct.end(), 0.0), 100.0, 1e-9);
}

TEST(ExperimentPipelineTest, DataIsWrittenOnceAndReloadedIdentically) {
  const auto dir = (std::filesystem::temp_directory_path() / "kdas_experiment_data").string();
  std::filesystem::remove_all(dir);
  const auto cfg = tiny_config();
  const auto a = load_or_generate_data(cfg, dir);
  const auto b = load_or_generate_data(cfg, dir);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(a.val.size(), 8u);
  std::filesystem::remove_all(dir);
}

TEST(ExperimentPipelineTest, TeacherManifestMustMatchTheDataset) {
  const auto dir = std::filesystem::temp_directory_path() / "kdas_experiment_teacher";
  std::filesystem::remove_all(dir);
  const auto cfg = tiny_config();
  const auto data = prepare_data(make_splits(cfg.data, SeedStreams(cfg.seed)));
  const auto teacher = train_teacher(cfg, data, 2);
  const auto manifest = save_ensemble(dir.string(), teacher, data.hash);
  EXPECT_EQ(load_teacher(manifest, data).size(), 2u);
  auto other_cfg = cfg;
  other_cfg.seed = 99;
  const auto other = prepare_data(make_splits(other_cfg.data, SeedStreams(other_cfg.seed)));
  EXPECT_THROW(load_teacher(manifest, other), std::runtime_error);
  EXPECT_THROW(load_teacher((dir / "missing.json").string(), data), std::runtime_error);
  const auto summary = teacher_summary(teacher, data);
  EXPECT_GE(summary["test"]["oracle_acc"].get<double>(), summary["test"]["member_acc"][0].get<double>());
  EXPECT_EQ(teacher_logits_for(LossKind::kCE, nullptr), nullptr);
  EXPECT_THROW(teacher_logits_for(LossKind::kOD, nullptr), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

TEST(ExperimentPipelineTest, AblationGridIsComplete) {
  const auto cfg = tiny_config();
  const auto data = prepare_data(make_splits(cfg.data, SeedStreams(cfg.seed)));
  const auto teacher = train_teacher(cfg, data, 1);
  int calls = 0;
  const auto rows = run_ablation(cfg, data, teacher, 1, [&](const std::string&) { ++calls; });
  ASSERT_EQ(rows.size(), 3u + 3u * 2u + 9u);
  EXPECT_GT(calls, 0);
  EXPECT_EQ(rows[0].model, "mini-resnet");
  EXPECT_EQ(rows[0].search_loss, "-");
  EXPECT_EQ(rows[0].params, param_count(cfg.backbone_spec()));
  EXPECT_EQ(rows[3].model, "mini-resnet+deep1");
  EXPECT_EQ(rows[6].model, "mini-resnet+deep2");
  std::set<std::pair<std::string, std::string>> searched;
  for (std::size_t i = 9; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].model, "searched");
    EXPECT_LE(rows[i].params, cfg.budget_params());
    searched.insert({rows[i].search_loss, rows[i].train_loss});
  }
  EXPECT_EQ(searched.size(), 9u);
  EXPECT_EQ(parse_ablation_csv(ablation_csv(rows)), rows);
}

TEST(ExperimentPipelineTest, StagesAreDeterministic) {
  const auto cfg = tiny_config();
  const auto data = prepare_data(make_splits(cfg.data, SeedStreams(cfg.seed)));
  const auto teacher = train_teacher(cfg, data, 1);
  auto once = [&] {
    const auto s = search_stage(cfg, data, LossKind::kOD, &teacher, 5, 1);
    const auto rep = select_stage(cfg, data, s, 5);
    const auto r = retrain_stage(cfg, data, rep.winner.genome, LossKind::kOD, &teacher, 5);
    return std::make_pair(canonical_genome(rep.winner.genome), r.result.test_acc);
  };
  EXPECT_EQ(once(), once());
  const auto student = train_student(cfg, data, cfg.backbone_spec(), LossKind::kKD, &teacher, 5);
  EXPECT_EQ(student.net.param_count, param_count(cfg.backbone_spec()));
}
