#include "kdas/ensemble.hpp"

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "kdas/binary_io.hpp"

namespace kdas {

namespace {

CandidateNetwork plain_network(const BackboneSpec& arch) {
  const SlotLayout layout{std::vector<int>(arch.stages.size(), 0)};
  return decode(neutral_genome(layout, arch.id), arch, layout);
}

void check_member_logits(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 3 || logits.dim(1) != static_cast<std::int64_t>(labels.size()) || logits.dim(0) < 1) {
    throw std::invalid_argument("ensemble: member logits " + shape_str(logits.shape()) + " do not match " +
                                std::to_string(labels.size()) + " labels");
  }
}

}  // namespace

std::vector<std::uint64_t> member_seeds(std::uint64_t root, std::size_t n) {
  const SeedStreams teacher = SeedStreams(root).child("teacher");
  std::vector<std::uint64_t> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(teacher.seed("member" + std::to_string(k)));
  return out;
}

ParamStore train_member(const BackboneSpec& arch, const TensorDataset& train, const TensorDataset* val,
                        const Schedule& schedule, std::uint64_t seed, TrainResult* log) {
  const SeedStreams streams(seed);
  const auto net = plain_network(arch);
  Rng init = streams.stream("init");
  ParamStore store = init_params(net, init);
  Rng order = streams.stream("order");
  TrainOptions opt;
  opt.val = val;
  TrainResult result = train_network(net, store, train, schedule, opt, order);
  if (log != nullptr) *log = std::move(result);
  return store;
}

Tensor member_logits(const BackboneSpec& arch, std::vector<ParamStore>& members, const TensorDataset& data) {
  if (members.empty()) throw std::invalid_argument("ensemble: no members");
  const auto net = plain_network(arch);
  const auto n = static_cast<std::int64_t>(members.size());
  const auto b = static_cast<std::int64_t>(data.size());
  const auto c = static_cast<std::int64_t>(arch.num_classes);
  Array out(n * b * c);
  for (std::int64_t j = 0; j < n; ++j) {
    const Tensor l = predict_logits(net, members[static_cast<std::size_t>(j)], data);
    out.segment(j * b * c, b * c) = l.values();
  }
  return Tensor({n, b, c}, std::move(out));
}

EnsembleTeacher train_ensemble(const BackboneSpec& arch, const TensorDataset& train, const TensorDataset& val,
                               const TensorDataset& test, const Schedule& schedule,
                               const std::vector<std::uint64_t>& seeds, int threads) {
  if (seeds.empty()) throw std::invalid_argument("ensemble: need at least one member seed");
  EnsembleTeacher t;
  t.arch = arch;
  t.seeds = seeds;
  t.members.resize(seeds.size());
  t.logs.resize(seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < seeds.size(); k = next++) {
      try {
        t.members[k] = train_member(arch, train, &val, schedule, seeds[k], &t.logs[k]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const auto n_threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, seeds.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  t.train_logits = member_logits(arch, t.members, train);
  t.val_logits = member_logits(arch, t.members, val);
  t.test_logits = member_logits(arch, t.members, test);
  return t;
}

Tensor average_logits(const Tensor& member_logits) { return mean_over_members(member_logits).detach(); }

double member_accuracy(const Tensor& member_logits, std::size_t member, std::span<const int> labels) {
  check_member_logits(member_logits, labels);
  if (static_cast<std::int64_t>(member) >= member_logits.dim(0)) throw std::out_of_range("ensemble: member index");
  const auto b = member_logits.dim(1), c = member_logits.dim(2);
  const double* base = member_logits.values().data() + static_cast<std::int64_t>(member) * b * c;
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < b; ++i) hits += predicts(base + i * c, c, labels[static_cast<std::size_t>(i)]);
  return static_cast<double>(hits) / static_cast<double>(b);
}

double oracle_accuracy(const Tensor& member_logits, std::span<const int> labels) {
  check_member_logits(member_logits, labels);
  const auto o = oracle_target(member_logits, labels);
  std::int64_t hits = 0;
  for (auto p : o.present) hits += p;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double ensemble_accuracy(const Tensor& member_logits, std::span<const int> labels) {
  check_member_logits(member_logits, labels);
  return accuracy(average_logits(member_logits), labels);
}

std::int64_t CorrectnessHistogram::total() const {
  std::int64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

std::vector<double> CorrectnessHistogram::percentages() const {
  const auto n = total();
  std::vector<double> out;
  for (auto c : counts) out.push_back(n > 0 ? 100.0 * static_cast<double>(c) / static_cast<double>(n) : 0.0);
  return out;
}

CorrectnessHistogram correctness_histogram(const Tensor& member_logits, std::span<const int> labels) {
  check_member_logits(member_logits, labels);
  const auto o = oracle_target(member_logits, labels);
  CorrectnessHistogram h;
  h.counts.assign(static_cast<std::size_t>(o.members + 1), 0);
  for (std::int64_t i = 0; i < o.batch; ++i) ++h.counts[static_cast<std::size_t>(o.correct_count(i))];
  return h;
}

std::string save_ensemble(const std::string& dir, const EnsembleTeacher& teacher, const std::string& dataset_hash) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t k = 0; k < teacher.size(); ++k) {
    const auto name = "member_" + std::to_string(k) + ".odtw";
    save_checkpoint(fs::path(dir) / name, teacher.members[k].to_named());
    members.push_back({{"checkpoint", name}, {"seed", teacher.seeds[k]}});
  }
  save_checkpoint(fs::path(dir) / "logits.odtw",
                  {{"train", teacher.train_logits}, {"val", teacher.val_logits}, {"test", teacher.test_logits}});
  const nlohmann::json manifest = {
      {"arch", teacher.arch.id},
      {"num_classes", teacher.arch.num_classes},
      {"in_channels", teacher.arch.in_channels},
      {"members", members},
      {"logit_cache", "logits.odtw"},
      {"dataset_hash", dataset_hash},
  };
  const auto path = (fs::path(dir) / "manifest.json").string();
  binio::write_file(path, manifest.dump(2) + "\n");
  return path;
}

LoadedEnsemble load_ensemble(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(binio::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("ensemble manifest " + manifest_path + ": " + e.what());
  }
  const fs::path dir = fs::path(manifest_path).parent_path();
  LoadedEnsemble out;
  try {
    out.teacher.arch =
        make_backbone(m.at("arch").get<std::string>(), m.at("num_classes").get<int>(), m.at("in_channels").get<int>());
    out.dataset_hash = m.at("dataset_hash").get<std::string>();
    for (const auto& e : m.at("members")) {
      out.teacher.seeds.push_back(e.at("seed").get<std::uint64_t>());
      out.teacher.members.push_back(
          ParamStore::from_named(load_checkpoint(dir / e.at("checkpoint").get<std::string>())));
    }
    const auto cache = load_checkpoint(dir / m.at("logit_cache").get<std::string>());
    for (const auto& [name, t] : cache) {
      if (name == "train") out.teacher.train_logits = t;
      if (name == "val") out.teacher.val_logits = t;
      if (name == "test") out.teacher.test_logits = t;
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("ensemble manifest " + manifest_path + ": " + e.what());
  }
  const auto n = static_cast<std::int64_t>(out.teacher.size());
  for (const Tensor* t : {&out.teacher.train_logits, &out.teacher.val_logits, &out.teacher.test_logits}) {
    if (!t->defined() || t->rank() != 3 || t->dim(0) != n || t->dim(2) != out.teacher.arch.num_classes) {
      throw std::runtime_error("ensemble manifest " + manifest_path + ": logit cache does not match the members");
    }
  }
  if (n == 0) throw std::runtime_error("ensemble manifest " + manifest_path + ": no members");
  return out;
}

}  // namespace kdas
