#pragma once

// Pretraining trajectories (episodic checkpoints) and their file format.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "farzi/binio.hpp"
#include "farzi/corpus.hpp"
#include "farzi/errors.hpp"
#include "farzi/models.hpp"
#include "farzi/optim.hpp"
#include "farzi/seed.hpp"

namespace farzi {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"arch", to_string(c.arch)},
          {"max_seq_len", c.max_seq_len}, {"dropout", c.dropout}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

struct Trajectory {
  std::vector<ParamVector> checkpoints;  ///< θ at steps[i]
  std::vector<std::size_t> steps;        ///< strictly increasing, starts at 0
  std::vector<double> train_losses;      ///< loss on the probe set at each checkpoint
  std::uint64_t seed = 0;

  bool operator==(const Trajectory&) const = default;
};

struct TrajectoryStore {
  ModelConfig model_config;
  std::vector<Trajectory> trajectories;
  std::uint64_t corpus_fingerprint = 0;

  bool empty() const noexcept { return trajectories.empty(); }

  /// Throws unless the store was trained for `cfg`'s vocabulary and width.
  void require_conformal(const ModelConfig& cfg) const {
    if (cfg.vocab_size != model_config.vocab_size || cfg.embed_dim != model_config.embed_dim ||
        cfg.arch != model_config.arch || cfg.max_seq_len != model_config.max_seq_len) {
      throw ConfigError("trajectory store (" + to_string(model_config.arch) + ", V=" +
                        std::to_string(model_config.vocab_size) + ", d=" + std::to_string(model_config.embed_dim) +
                        ") does not match the requested model (" + to_string(cfg.arch) +
                        ", V=" + std::to_string(cfg.vocab_size) + ", d=" + std::to_string(cfg.embed_dim) + ")");
    }
  }

  bool operator==(const TrajectoryStore&) const = default;
};

struct PretrainOptions {
  std::size_t n_runs = 5;
  std::size_t epochs = 2;
  std::size_t batch = 32;
  std::size_t checkpoint_every = 10;
  std::size_t probe_sequences = 256;  ///< train sequences scored at each checkpoint
  AdamHyper hyper;
  std::uint64_t seed = 0;
};

/// Worker threads: FARZI_THREADS if set, else the hardware count.
inline std::size_t thread_budget() {
  if (const char* env = std::getenv("FARZI_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
    std::clog << "warning: ignoring FARZI_THREADS='" << env << "'\n";
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

namespace trajectory_detail {

inline double probe_loss(const ModelConfig& cfg, const ParamVector& w, const HardBatch& probe) {
  return hard_nll(cfg, w, probe);
}

inline Trajectory pretrain_one(const TokenCorpus& corpus, ModelConfig cfg, const PretrainOptions& o, std::size_t run) {
  Trajectory tr;
  tr.seed = mix_seed(o.seed, run);
  cfg.seed = tr.seed;
  const auto& train = corpus.split(Split::Train);
  const std::vector<std::size_t> probe_idx(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(
                                                                             std::min(train.size(), o.probe_sequences)));
  const auto probe = make_hard_batch(corpus, probe_idx, cfg.max_seq_len);
  const std::size_t steps_per_epoch = (train.size() + o.batch - 1) / o.batch;
  const std::size_t total = o.epochs * steps_per_epoch;
  auto it = batch_iter(corpus, Split::Train, o.batch, cfg.max_seq_len, mix_seed(tr.seed, 1));
  AdamState s = AdamState::start(init_params(cfg));
  auto snapshot = [&](std::size_t step) {
    const double loss = probe_loss(cfg, s.w, probe);
    if (!std::isfinite(loss)) throw NumericError("run " + std::to_string(run) + ", step " + std::to_string(step), "non-finite training loss");
    tr.checkpoints.push_back(s.w);
    tr.steps.push_back(step);
    tr.train_losses.push_back(loss);
  };
  snapshot(0);
  for (std::size_t step = 1; step <= total; ++step) {
    const auto hb = it.next();
    HardNllLoss loss{cfg, &hb, mix_seed(tr.seed, 1000 + step), true};
    ad::GradResult g;
    try {
      g = ad::value_and_grad(loss, s.w);
    } catch (const NumericError& e) {
      throw NumericError("run " + std::to_string(run) + ", step " + std::to_string(step), e.what());
    }
    s = adam_step(s, g.grad, o.hyper);
    if (step % o.checkpoint_every == 0) snapshot(step);
  }
  return tr;
}

}  // namespace trajectory_detail

/// Independent seeded Adam runs on the training split. Run r uses seed
/// mix_seed(seed, r) for both initialization and batching, so results do not
/// depend on the thread count. A run whose loss becomes non-finite is dropped
/// with a diagnostic; if every run fails the first error is rethrown.
inline TrajectoryStore pretrain_trajectories(const TokenCorpus& corpus, const ModelConfig& cfg,
                                             const PretrainOptions& o) {
  cfg.validate();
  o.hyper.validate();
  if (o.n_runs < 1) throw ConfigError("pretraining needs at least one run");
  if (o.epochs < 1 || o.batch < 1 || o.checkpoint_every < 1) {
    throw ConfigError("epochs, batch and checkpoint_every must be >= 1");
  }
  if (corpus.split(Split::Train).empty()) throw ConfigError("training split is empty");
  if (corpus.vocab > cfg.vocab_size) {
    throw ConfigError("corpus vocabulary " + std::to_string(corpus.vocab) + " exceeds model vocab " +
                      std::to_string(cfg.vocab_size));
  }
  const std::size_t steps = o.epochs * ((corpus.split(Split::Train).size() + o.batch - 1) / o.batch);
  if (steps < o.checkpoint_every) throw ConfigError("checkpoint_every exceeds the number of training steps");

  std::vector<std::optional<Trajectory>> runs(o.n_runs);
  std::vector<std::exception_ptr> errors(o.n_runs);
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    while (true) {
      std::size_t r;
      {
        std::lock_guard lock(mu);
        if (next >= o.n_runs) return;
        r = next++;
      }
      try {
        runs[r] = trajectory_detail::pretrain_one(corpus, cfg, o, r);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(thread_budget(), o.n_runs);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  }

  TrajectoryStore store{cfg, {}, fingerprint(corpus)};
  std::exception_ptr first;
  for (std::size_t r = 0; r < o.n_runs; ++r) {
    if (runs[r]) {
      store.trajectories.push_back(std::move(*runs[r]));
      continue;
    }
    if (!first) first = errors[r];
    try {
      std::rethrow_exception(errors[r]);
    } catch (const NumericError& e) {
      std::clog << "warning: pretraining run " << r << " aborted: " << e.what() << "\n";
    } catch (...) {
      throw;
    }
  }
  if (store.trajectories.empty()) std::rethrow_exception(first);
  return store;
}

// ----------------------------------------------------------------------------
// File format: "FARZITRJ", u32 version, u64 header length, JSON header, then
// per trajectory: losses, then each checkpoint's flat parameters (LE f64).
// ----------------------------------------------------------------------------

inline constexpr std::uint32_t kTrajectoryFormatVersion = 1;

inline void save_store(const TrajectoryStore& store, const std::string& path) {
  if (store.trajectories.empty()) throw ConfigError("refusing to save an empty trajectory store");
  const ParamVector& ref = store.trajectories.front().checkpoints.front();
  nlohmann::json header;
  header["model_config"] = to_json(store.model_config);
  std::ostringstream fp;
  fp << std::hex << store.corpus_fingerprint;
  header["corpus_fingerprint"] = fp.str();
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& seg : ref.layout()) layout.push_back({{"name", seg.name}, {"shape", seg.shape}});
  header["layout"] = layout;
  nlohmann::json trs = nlohmann::json::array();
  for (const auto& t : store.trajectories) {
    if (t.checkpoints.size() != t.steps.size() || t.steps.size() != t.train_losses.size()) {
      throw ConfigError("trajectory has inconsistent checkpoint lists");
    }
    for (const auto& c : t.checkpoints) ref.require_conformal(c, "save_store");
    trs.push_back({{"seed", t.seed}, {"steps", t.steps}});
  }
  header["trajectories"] = trs;
  const std::string text = header.dump();

  binio::Writer w(path);
  w.bytes("FARZITRJ");
  w.u32(kTrajectoryFormatVersion);
  w.u64(text.size());
  w.bytes(text);
  for (const auto& t : store.trajectories) {
    w.f64s(t.train_losses);
    for (const auto& c : t.checkpoints) w.f64s(c.flat());
  }
  w.close();
}

/// Loads a store. A fingerprint mismatch against `expected_fingerprint` is
/// only a warning.
inline TrajectoryStore load_store(const std::string& path,
                                  std::optional<std::uint64_t> expected_fingerprint = std::nullopt) {
  binio::Reader r(path);
  r.expect_magic("FARZITRJ");
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kTrajectoryFormatVersion) {
    throw FormatError("unsupported trajectory-store version " + std::to_string(v), version_at);
  }
  const std::size_t len = r.u64("header length");
  const std::size_t header_at = r.offset();
  const std::string text = r.bytes(len, "header");
  TrajectoryStore store;
  ParamVector like;
  std::vector<std::pair<std::uint64_t, std::vector<std::size_t>>> shapes;
  try {
    const auto h = nlohmann::json::parse(text);
    store.model_config = model_config_from_json(h.at("model_config"));
    store.corpus_fingerprint = std::stoull(h.at("corpus_fingerprint").get<std::string>(), nullptr, 16);
    std::vector<std::pair<std::string, Tensor>> segs;
    for (const auto& s : h.at("layout")) segs.emplace_back(s.at("name").get<std::string>(), Tensor(s.at("shape").get<Shape>()));
    like = ParamVector(segs);
    for (const auto& t : h.at("trajectories")) {
      shapes.emplace_back(t.at("seed").get<std::uint64_t>(), t.at("steps").get<std::vector<std::size_t>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what(), header_at);
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed header: ") + e.what(), header_at);
  }
  const ModelConfig& cfg = store.model_config;
  try {
    cfg.validate();
    if (!init_params(cfg).conformal(like)) throw ConfigError("layout does not match the model config");
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed header: ") + e.what(), header_at);
  }
  for (auto& [seed, steps] : shapes) {
    Trajectory t;
    t.seed = seed;
    t.steps = std::move(steps);
    t.train_losses.resize(t.steps.size());
    r.f64s(t.train_losses, "train losses");
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      auto p = ParamVector::zeros_like(like);
      r.f64s(p.flat(), "checkpoint payload");
      t.checkpoints.push_back(std::move(p));
    }
    for (std::size_t i = 1; i < t.steps.size(); ++i) {
      if (t.steps[i] <= t.steps[i - 1]) throw FormatError("checkpoint steps are not increasing", header_at);
    }
    store.trajectories.push_back(std::move(t));
  }
  r.expect_end();
  if (expected_fingerprint && *expected_fingerprint != store.corpus_fingerprint) {
    std::clog << "warning: trajectory store was trained on a different corpus (fingerprint " << std::hex
              << store.corpus_fingerprint << " vs " << *expected_fingerprint << std::dec << ")\n";
  }
  return store;
}

}  // namespace farzi
