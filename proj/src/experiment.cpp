#include "kdas/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "kdas/binary_io.hpp"

namespace kdas {

namespace {

[[noreturn]] void field_error(const std::string& field, const std::string& msg) {
  throw std::invalid_argument("config." + field + ": " + msg);
}

class FieldReader {
 public:
  explicit FieldReader(const nlohmann::json& j) : j_(j) {
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  }

  template <typename T>
  void read(const std::string& key, T& dst) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      dst = convert<T>(key, *it);
    } catch (const nlohmann::json::exception& e) {
      field_error(key, std::string("wrong type (") + e.what() + ")");
    }
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) field_error(it.key(), "unknown field");
    }
  }

 private:
  template <typename T>
  static T convert(const std::string& key, const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) field_error(key, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) field_error(key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          field_error(key, "expected a non-negative integer");
        }
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) field_error(key, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) field_error(key, "expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) field_error(key, "expected an array");
      T out;
      for (const auto& e : v) out.push_back(convert<typename T::value_type>(key, e));
      return out;
    }
  }

  const nlohmann::json& j_;
  std::set<std::string> seen_;
};

LossKind read_loss(const std::string& field, const std::string& name) {
  try {
    return parse_loss_kind(name);
  } catch (const std::invalid_argument&) {
    field_error(field, "expected CE, KD or OD, got '" + name + "'");
  }
}

Schedule with_epochs(const Schedule& base, int epochs) {
  Schedule s = base;
  s.epochs = epochs;
  s.milestones.clear();
  return s;
}

std::string dataset_hash(const DataSplits& s) {
  return binio::hex64(binio::fnv1a(encode_dataset(s.train) + encode_dataset(s.val) + encode_dataset(s.test)));
}

}  // namespace

void ExperimentConfig::validate() const {
  auto wrap = [](const std::string& field, auto&& check) {
    try {
      check();
    } catch (const std::invalid_argument& e) {
      field_error(field, e.what());
    }
  };
  wrap("data", [&] { data.validate(); });
  if (seeds.empty()) field_error("seeds", "needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    field_error("seeds", "seeds must be distinct");
  }
  wrap("backbone", [&] { make_backbone(backbone, data.classes, data.channels); });
  for (int extra : manual_extra_blocks)
    if (extra < 1) field_error("manual_extra_blocks", "entries must be >= 1");
  if (ensemble_size < 1) field_error("ensemble_size", "must be >= 1");
  wrap("distill", [&] { distill.validate(); });
  if (slots < 0) field_error("slots", "must be >= 0");
  if (budget_mode != "multiple" && budget_mode != "absolute") {
    field_error("budget_mode", "expected 'multiple' or 'absolute', got '" + budget_mode + "'");
  }
  if (!(budget > 0.0) || !std::isfinite(budget)) field_error("budget", "must be a positive number");
  if (budget_mode == "absolute" && budget != std::floor(budget)) {
    field_error("budget", "an absolute budget must be a whole parameter count");
  }
  if (teacher_epochs < 1) field_error("teacher_epochs", "must be >= 1");
  if (train.epochs < 1) field_error("epochs", "must be >= 1");
  wrap("schedule", [&] { train.validate(); });
  wrap("search", [&] { search_config(1).validate(); });
  if (candidates < 1) field_error("candidates", "must be >= 1");
  if (out_dir.empty()) field_error("out_dir", "must not be empty");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"dataset", data.kind},
      {"classes", data.classes},
      {"channels", data.channels},
      {"height", data.height},
      {"width", data.width},
      {"train_per_class", data.train_per_class},
      {"test_per_class", data.test_per_class},
      {"separation", data.separation},
      {"noise", data.noise},
      {"mix", data.mix},
      {"val_fraction", data.val_fraction},
      {"external_train", data.external_train},
      {"external_test", data.external_test},
      {"seed", seed},
      {"seeds", seeds},
      {"backbone", backbone},
      {"manual_extra_blocks", manual_extra_blocks},
      {"ensemble_size", ensemble_size},
      {"search_loss", to_string(search_loss)},
      {"train_loss", to_string(train_loss)},
      {"temperature", distill.temperature},
      {"balance", distill.balance},
      {"slots", slots},
      {"budget_mode", budget_mode},
      {"budget", budget},
      {"teacher_epochs", teacher_epochs},
      {"epochs", train.epochs},
      {"batch_size", train.batch_size},
      {"lr", train.lr},
      {"milestones", train.milestones},
      {"warmup_iters", train.warmup_iters},
      {"warmup_lr", train.warmup_lr},
      {"momentum", train.momentum},
      {"weight_decay", train.weight_decay},
      {"nesterov", train.nesterov},
      {"augment", train.augment},
      {"augment_padding", train.augment_padding},
      {"search_epochs", search.epochs},
      {"controller_steps", search.controller_steps},
      {"controller_samples", search.controller.samples_per_update},
      {"controller_lr", search.controller.lr},
      {"controller_momentum", search.controller.momentum},
      {"controller_hidden", search.controller.hidden},
      {"entropy_weight", search.controller.entropy_weight},
      {"baseline_decay", search.controller.baseline_decay},
      {"reward_batch", search.reward_batch},
      {"steps_per_sample", search.steps_per_sample},
      {"leaderboard_size", search.leaderboard_size},
      {"convergence_window", search.convergence_window},
      {"convergence_tol", search.convergence_tol},
      {"max_updates", search.max_updates},
      {"candidates", candidates},
      {"out_dir", out_dir},
      {"teacher_manifest", teacher_manifest},
  };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  FieldReader r(j);
  r.read("dataset", c.data.kind);
  r.read("classes", c.data.classes);
  r.read("channels", c.data.channels);
  r.read("height", c.data.height);
  r.read("width", c.data.width);
  r.read("train_per_class", c.data.train_per_class);
  r.read("test_per_class", c.data.test_per_class);
  r.read("separation", c.data.separation);
  r.read("noise", c.data.noise);
  r.read("mix", c.data.mix);
  r.read("val_fraction", c.data.val_fraction);
  r.read("external_train", c.data.external_train);
  r.read("external_test", c.data.external_test);
  r.read("seed", c.seed);
  r.read("seeds", c.seeds);
  r.read("backbone", c.backbone);
  r.read("manual_extra_blocks", c.manual_extra_blocks);
  r.read("ensemble_size", c.ensemble_size);
  std::string search_loss = to_string(c.search_loss), train_loss = to_string(c.train_loss);
  r.read("search_loss", search_loss);
  r.read("train_loss", train_loss);
  c.search_loss = read_loss("search_loss", search_loss);
  c.train_loss = read_loss("train_loss", train_loss);
  r.read("temperature", c.distill.temperature);
  r.read("balance", c.distill.balance);
  r.read("slots", c.slots);
  r.read("budget_mode", c.budget_mode);
  r.read("budget", c.budget);
  r.read("teacher_epochs", c.teacher_epochs);
  r.read("epochs", c.train.epochs);
  r.read("batch_size", c.train.batch_size);
  r.read("lr", c.train.lr);
  r.read("milestones", c.train.milestones);
  r.read("warmup_iters", c.train.warmup_iters);
  r.read("warmup_lr", c.train.warmup_lr);
  r.read("momentum", c.train.momentum);
  r.read("weight_decay", c.train.weight_decay);
  r.read("nesterov", c.train.nesterov);
  r.read("augment", c.train.augment);
  r.read("augment_padding", c.train.augment_padding);
  r.read("search_epochs", c.search.epochs);
  r.read("controller_steps", c.search.controller_steps);
  r.read("controller_samples", c.search.controller.samples_per_update);
  r.read("controller_lr", c.search.controller.lr);
  r.read("controller_momentum", c.search.controller.momentum);
  r.read("controller_hidden", c.search.controller.hidden);
  r.read("entropy_weight", c.search.controller.entropy_weight);
  r.read("baseline_decay", c.search.controller.baseline_decay);
  r.read("reward_batch", c.search.reward_batch);
  r.read("steps_per_sample", c.search.steps_per_sample);
  r.read("leaderboard_size", c.search.leaderboard_size);
  r.read("convergence_window", c.search.convergence_window);
  r.read("convergence_tol", c.search.convergence_tol);
  r.read("max_updates", c.search.max_updates);
  r.read("candidates", c.candidates);
  r.read("out_dir", c.out_dir);
  r.read("teacher_manifest", c.teacher_manifest);
  r.reject_unknown();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  nlohmann::json j = to_json();
  j.erase("out_dir");
  j.erase("teacher_manifest");
  return binio::hex64(binio::fnv1a(j.dump()));
}

BackboneSpec ExperimentConfig::backbone_spec() const { return make_backbone(backbone, data.classes, data.channels); }

SlotLayout ExperimentConfig::layout() const { return even_layout(slots, backbone_spec().stages.size()); }

std::int64_t ExperimentConfig::budget_params() const {
  if (budget_mode == "absolute") return static_cast<std::int64_t>(budget);
  return static_cast<std::int64_t>(std::floor(budget * static_cast<double>(param_count(backbone_spec()))));
}

Schedule ExperimentConfig::teacher_schedule() const { return with_epochs(train, teacher_epochs); }

SearchConfig ExperimentConfig::search_config(int threads) const {
  SearchConfig s = search;
  s.loss = search_loss;
  s.distill = distill;
  s.shared = with_epochs(train, search.epochs);
  s.threads = threads;
  return s;
}

std::string ExperimentConfig::manifest_path() const {
  return teacher_manifest.empty() ? out_dir + "/teacher/manifest.json" : teacher_manifest;
}

std::string code_version() { return KDAS_CODE_VERSION; }

PreparedData prepare_data(DataSplits splits) {
  PreparedData d;
  d.hash = dataset_hash(splits);
  d.norm = Normalization::fit(splits.train);
  d.train = to_tensor_dataset(splits.train, d.norm);
  d.val = to_tensor_dataset(splits.val, d.norm);
  d.test = to_tensor_dataset(splits.test, d.norm);
  d.splits = std::move(splits);
  return d;
}

PreparedData load_or_generate_data(const ExperimentConfig& cfg, const std::string& dir) {
  if (std::filesystem::exists(dir + "/train.kdtd")) return prepare_data(load_splits(dir));
  DataSplits splits = make_splits(cfg.data, SeedStreams(cfg.seed));
  save_splits(dir, splits);
  return prepare_data(std::move(splits));
}

EnsembleTeacher train_teacher(const ExperimentConfig& cfg, const PreparedData& data, int threads) {
  const auto seeds = member_seeds(SeedStreams(cfg.seed).seed("teacher"), static_cast<std::size_t>(cfg.ensemble_size));
  return train_ensemble(cfg.backbone_spec(), data.train, data.val, data.test, cfg.teacher_schedule(), seeds, threads);
}

EnsembleTeacher load_teacher(const std::string& manifest_path, const PreparedData& data) {
  if (!std::filesystem::exists(manifest_path)) {
    throw std::runtime_error("teacher manifest " + manifest_path + " not found; run train-teacher first");
  }
  LoadedEnsemble loaded = load_ensemble(manifest_path);
  if (loaded.dataset_hash != data.hash) {
    throw std::runtime_error("teacher manifest " + manifest_path + " was built on dataset " + loaded.dataset_hash +
                             ", current dataset is " + data.hash);
  }
  return std::move(loaded.teacher);
}

std::string histogram_csv(const CorrectnessHistogram& h) {
  std::ostringstream os;
  os.precision(17);
  os << "members_correct,count,percent\n";
  const auto pct = h.percentages();
  for (std::size_t k = 0; k < h.counts.size(); ++k) os << k << ',' << h.counts[k] << ',' << pct[k] << '\n';
  return os.str();
}

nlohmann::json teacher_summary(const EnsembleTeacher& teacher, const PreparedData& data) {
  nlohmann::json out = {{"arch", teacher.arch.id}, {"members", teacher.size()}, {"dataset_hash", data.hash}};
  auto split = [&](const Tensor& logits, const std::vector<int>& labels) {
    std::vector<double> members;
    for (std::size_t k = 0; k < teacher.size(); ++k) members.push_back(member_accuracy(logits, k, labels));
    const double oracle = oracle_accuracy(logits, labels);
    const double average = ensemble_accuracy(logits, labels);
    return nlohmann::json{{"member_acc", members},
                          {"oracle_acc", oracle},
                          {"average_acc", average},
                          {"oracle_minus_average", oracle - average},
                          {"histogram_percent", correctness_histogram(logits, labels).percentages()}};
  };
  out["val"] = split(teacher.val_logits, data.val.labels);
  out["test"] = split(teacher.test_logits, data.test.labels);
  return out;
}

const Tensor* teacher_logits_for(LossKind loss, const EnsembleTeacher* teacher) {
  if (loss == LossKind::kCE) return nullptr;
  if (teacher == nullptr) throw std::invalid_argument("loss " + to_string(loss) + " needs a teacher");
  return &teacher->train_logits;
}

RetrainResult train_student(const ExperimentConfig& cfg, const PreparedData& data, const BackboneSpec& arch,
                            LossKind loss, const EnsembleTeacher* teacher, std::uint64_t run_seed) {
  const SlotLayout none{std::vector<int>(arch.stages.size(), 0)};
  return retrain(neutral_genome(none, arch.id), arch, none, data.train, &data.val, &data.test,
                 teacher_logits_for(loss, teacher), loss, cfg.distill, cfg.train,
                 SeedStreams(run_seed).seed("student." + arch.id));
}

SearchResult search_stage(const ExperimentConfig& cfg, const PreparedData& data, LossKind search_loss,
                          const EnsembleTeacher* teacher, std::uint64_t run_seed, int threads) {
  SearchConfig sc = cfg.search_config(threads);
  sc.loss = search_loss;
  return run_search(cfg.backbone_spec(), cfg.layout(), data.train, data.val, teacher_logits_for(search_loss, teacher),
                    sc, SeedStreams(run_seed).child("search"));
}

SelectionReport select_stage(const ExperimentConfig& cfg, const PreparedData& data, const SearchResult& search,
                             std::uint64_t run_seed) {
  std::vector<ArchitectureGenome> extra;
  for (const auto& s : search.leaderboard) extra.push_back(s.genome);
  Rng rng = SeedStreams(run_seed).stream("select");
  return select_best(search.pool, search.policy, cfg.budget_params(), cfg.candidates, data.val, rng, extra);
}

RetrainResult retrain_stage(const ExperimentConfig& cfg, const PreparedData& data, const ArchitectureGenome& genome,
                            LossKind loss, const EnsembleTeacher* teacher, std::uint64_t run_seed) {
  return retrain(genome, cfg.backbone_spec(), cfg.layout(), data.train, &data.val, &data.test,
                 teacher_logits_for(loss, teacher), loss, cfg.distill, cfg.train,
                 SeedStreams(run_seed).seed("retrain"));
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

std::map<std::string, MetricSummary> summaries_of(const std::vector<SeedMetrics>& runs) {
  std::map<std::string, std::vector<double>> columns;
  for (const auto& r : runs)
    for (const auto& [name, v] : r.metrics) columns[name].push_back(v);
  std::map<std::string, MetricSummary> out;
  for (const auto& [name, values] : columns) out[name] = summarize(values);
  return out;
}

}  // namespace

void RunRecord::summarize() { summary = summaries_of(runs); }

void RunRecord::validate() const {
  const auto expected = summaries_of(runs);
  if (expected.size() != summary.size()) throw std::invalid_argument("run record: summary metrics do not match runs");
  for (const auto& [name, s] : expected) {
    auto it = summary.find(name);
    if (it == summary.end() || it->second.mean != s.mean || it->second.stddev != s.stddev ||
        it->second.count != s.count) {
      throw std::invalid_argument("run record: summary of '" + name + "' does not match the per-seed metrics");
    }
  }
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json runs_j = nlohmann::json::array();
  for (const auto& r : runs) runs_j.push_back({{"seed", r.seed}, {"metrics", r.metrics}});
  nlohmann::json summary_j = nlohmann::json::object();
  for (const auto& [name, s] : summary) summary_j[name] = {{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}};
  return {{"command", command},
          {"config_hash", config_hash},
          {"code_version", code_version},
          {"runs", runs_j},
          {"summary", summary_j}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.command = j.at("command").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.code_version = j.at("code_version").get<std::string>();
  for (const auto& e : j.at("runs")) {
    r.runs.push_back({e.at("seed").get<std::uint64_t>(), e.at("metrics").get<std::map<std::string, double>>()});
  }
  for (const auto& [name, s] : j.at("summary").items()) {
    r.summary[name] = {s.at("mean").get<double>(), s.at("std").get<double>(), s.at("count").get<std::size_t>()};
  }
  r.validate();
  return r;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "model,search_loss,train_loss,acc_mean,acc_std,params,seeds\n";
  for (const auto& r : rows) {
    os << r.model << ',' << r.search_loss << ',' << r.train_loss << ',' << r.acc_mean << ',' << r.acc_std << ','
       << r.params << ',' << r.seeds << '\n';
  }
  return os.str();
}

std::vector<AblationRow> parse_ablation_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "model,search_loss,train_loss,acc_mean,acc_std,params,seeds") {
    throw std::invalid_argument("ablation csv: unexpected header");
  }
  std::vector<AblationRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw std::invalid_argument("ablation csv line " + std::to_string(lineno) + ": expected 7 fields");
    try {
      rows.push_back({f[0], f[1], f[2], std::stod(f[3]), std::stod(f[4]), std::stoll(f[5]), std::stoi(f[6])});
    } catch (const std::logic_error&) {
      throw std::invalid_argument("ablation csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const PreparedData& data,
                                      const EnsembleTeacher& teacher, int threads, const ProgressFn& progress) {
  const std::vector<LossKind> losses{LossKind::kCE, LossKind::kKD, LossKind::kOD};
  auto say = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  auto row = [&](const std::string& model, const std::string& ls, LossKind lt, const std::vector<double>& acc,
                 const std::vector<double>& params) {
    const auto a = summarize(acc);
    const auto p = summarize(params);
    return AblationRow{model, ls, to_string(lt), a.mean, a.stddev, std::llround(p.mean), static_cast<int>(acc.size())};
  };

  std::vector<AblationRow> rows;
  std::vector<BackboneSpec> manual{cfg.backbone_spec()};
  for (int extra : cfg.manual_extra_blocks) manual.push_back(deepen(cfg.backbone_spec(), extra));
  for (const auto& arch : manual) {
    for (LossKind lt : losses) {
      std::vector<double> acc, params;
      for (auto seed : cfg.seeds) {
        say(arch.id + " " + to_string(lt) + " seed " + std::to_string(seed));
        auto r = train_student(cfg, data, arch, lt, &teacher, seed);
        acc.push_back(r.result.test_acc);
        params.push_back(static_cast<double>(r.net.param_count));
      }
      rows.push_back(row(arch.id, "-", lt, acc, params));
    }
  }
  for (LossKind ls : losses) {
    std::map<LossKind, std::vector<double>> acc, params;
    for (auto seed : cfg.seeds) {
      say("search " + to_string(ls) + " seed " + std::to_string(seed));
      const SearchResult search = search_stage(cfg, data, ls, &teacher, seed, threads);
      const SelectionReport report = select_stage(cfg, data, search, seed);
      for (LossKind lt : losses) {
        say("retrain " + to_string(ls) + "/" + to_string(lt) + " seed " + std::to_string(seed));
        auto r = retrain_stage(cfg, data, report.winner.genome, lt, &teacher, seed);
        acc[lt].push_back(r.result.test_acc);
        params[lt].push_back(static_cast<double>(r.net.param_count));
      }
    }
    for (LossKind lt : losses) rows.push_back(row("searched", to_string(ls), lt, acc[lt], params[lt]));
  }
  return rows;
}

}  // namespace kdas
