// farzi: corpus generation, teacher pretraining, distillation, student
// evaluation and gradient checks from the command line.
//
// Exit codes: 0 ok, 2 configuration or input error, 3 numeric failure
// (including reversal drift), 4 gradient-check failure.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "farzi/corpus.hpp"
#include "farzi/distill.hpp"
#include "farzi/eval.hpp"
#include "farzi/gradcheck.hpp"
#include "farzi/synthetic.hpp"
#include "farzi/trajectory.hpp"

using namespace farzi;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitGradcheck = 4;

struct CorpusArgs {
  std::string path;
  std::string format = "tokens";
  std::size_t vocab = 0;
  std::uint64_t split_seed = 0;

  void add(CLI::App* app) {
    app->add_option("--corpus", path, "Corpus file")->required();
    app->add_option("--format", format, "tokens or jsonl");
    app->add_option("--vocab", vocab, "Vocabulary size (0 infers max token + 1)");
    app->add_option("--split-seed", split_seed, "Seed of the train/valid/test split");
  }

  TokenCorpus load() const { return load_corpus(path, parse_corpus_format(format), vocab, split_seed); }
};

/// Model flags. Unset flags may be filled from a trajectory store.
struct ModelArgs {
  std::string arch = "embed";
  std::size_t dim = 8;
  std::size_t max_len = 8;
  double dropout = 0.0;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app, const std::string& prefix = "") {
    opts = {app->add_option("--" + prefix + "arch", arch, "embed, attention or recurrent"),
            app->add_option("--" + prefix + "dim", dim, "Embedding dimension"),
            app->add_option("--" + prefix + "max-len", max_len, "Maximum sequence length"),
            app->add_option("--" + prefix + "dropout", dropout, "Dropout on real-data training")};
  }

  ModelConfig config(std::size_t vocab) const {
    ModelConfig c;
    c.vocab_size = vocab;
    c.arch = parse_arch(arch);
    c.embed_dim = dim;
    c.max_seq_len = max_len;
    c.dropout = dropout;
    c.validate();
    return c;
  }

  /// `base` with every explicitly given flag applied on top.
  ModelConfig over(ModelConfig base) const {
    if (opts[0]->count()) base.arch = parse_arch(arch);
    if (opts[1]->count()) base.embed_dim = dim;
    if (opts[2]->count()) base.max_seq_len = max_len;
    if (opts[3]->count()) base.dropout = dropout;
    base.validate();
    return base;
  }
};

struct StudentArgs {
  StudentHyper h;

  StudentArgs() {
    h.steps = 400;
    h.adam.lr = 0.02;
    h.select_every = 25;
  }

  void add(CLI::App* app) {
    app->add_option("--student-steps", h.steps, "Student training steps");
    app->add_option("--student-batch", h.batch, "Student batch size");
    app->add_option("--student-lr", h.adam.lr, "Student Adam learning rate");
    app->add_option("--select-every", h.select_every,
                    "Keep the student with the best validation perplexity, checked every N steps (0 keeps the last)");
  }
};

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  return out;
}

// ---------------------------------------------------------------- gen-corpus

struct GenCorpusCmd {
  std::uint64_t seed = 0;
  std::size_t vocab = 16;
  std::size_t order = 1;
  std::size_t sequences = 2500;
  std::size_t length = 10;
  double concentration = 0.2;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--seed", seed);
    app->add_option("--vocab", vocab);
    app->add_option("--order", order, "Markov order (1 or 2)");
    app->add_option("--sequences", sequences);
    app->add_option("--length", length);
    app->add_option("--concentration", concentration, "Dirichlet concentration of transition rows");
    app->add_option("--out", out, "Output corpus (tokens format)")->required();
  }

  int run() const {
    const auto c = gen_markov_corpus(seed, vocab, order, sequences, length, concentration);
    save_corpus(c, out);
    std::cout << "wrote " << c.sequences.size() << " sequences (V=" << c.vocab << ") to " << out << "\n";
    return kExitOk;
  }
};

// ------------------------------------------------------------------ pretrain

struct PretrainCmd {
  CorpusArgs corpus;
  ModelArgs model;
  PretrainOptions opts;
  std::string out;

  void add(CLI::App* app) {
    corpus.add(app);
    model.add(app);
    app->add_option("--runs", opts.n_runs, "Number of independent runs");
    app->add_option("--epochs", opts.epochs);
    app->add_option("--batch", opts.batch);
    app->add_option("--ckpt-every", opts.checkpoint_every, "Steps between stored checkpoints");
    app->add_option("--probe", opts.probe_sequences, "Train sequences in the recorded probe loss");
    app->add_option("--lr", opts.hyper.lr, "Adam learning rate");
    app->add_option("--seed", opts.seed);
    app->add_option("--out", out, "Output trajectory file")->required();
  }

  int run() const {
    const auto c = corpus.load();
    const auto store = pretrain_trajectories(c, model.config(c.vocab), opts);
    save_store(store, out);
    for (std::size_t r = 0; r < store.trajectories.size(); ++r) {
      const auto& t = store.trajectories[r];
      std::cout << "run " << r << ": " << t.checkpoints.size() << " checkpoints, final loss " << std::setprecision(6)
                << t.train_losses.back() << "\n";
    }
    std::cout << "wrote " << out << "\n";
    return kExitOk;
  }
};

// ------------------------------------------------------------------- distill

struct DistillCmd {
  CorpusArgs corpus;
  ModelArgs model;
  StudentArgs student;
  DistillConfig cfg;
  std::string objective = "farzi";
  std::string inner = "adam";
  std::string store_path;
  std::string out;
  std::string report = "-";
  bool timing = false;

  void add(CLI::App* app) {
    corpus.add(app);
    model.add(app);
    student.add(app);
    app->add_option("--store", store_path, "Trajectory file (required for farzi and mtt)");
    app->add_option("--objective", objective, "farzi, mm, dc or mtt");
    app->add_option("--inner", inner, "Inner optimizer: adam or sgd");
    app->add_option("--mu", cfg.shape.mu, "Synthetic sequences");
    app->add_option("--xi", cfg.shape.xi, "Synthetic sequence length");
    app->add_option("--latent-dim", cfg.shape.dim, "Latent dimension d");
    app->add_option("--tau", cfg.shape.tau, "Softmax temperature");
    app->add_option("--T", cfg.T, "Inner steps");
    app->add_option("--outer-steps", cfg.outer_steps);
    app->add_option("--b", cfg.b, "Real sequences per meta-step");
    app->add_option("--b-syn", cfg.b_syn, "Synthetic sequences per inner step");
    app->add_option("--outer-lr", cfg.outer_lr);
    app->add_option("--weight-decay", cfg.outer_weight_decay);
    app->add_flag("--freeze-decoder", cfg.freeze_decoder);
    app->add_option("--inner-lr", inner_lr_, "Inner learning rate (Adam or SGD)");
    app->add_option("--momentum", cfg.inner_sgd.momentum, "Inner SGD momentum");
    app->add_option("--ckpt-interval", cfg.ckpt.interval, "Inner-loop checkpoint interval (0 stores none)");
    app->add_option("--M-real", cfg.mtt_m_real, "Trajectory matching: target offset in checkpoints");
    app->add_option("--N-syn", cfg.mtt_n_syn, "Trajectory matching: synthetic steps");
    app->add_option("--eval-every", cfg.eval_every, "Evaluate a fresh student every N outer steps");
    app->add_option("--seed", cfg.seed);
    app->add_option("--out", out, "Output synthetic-data file")->required();
    app->add_option("--report", report, "JSON-lines report path ('-' for stdout)");
    app->add_flag("--timing", timing, "Include wall-clock seconds in report lines");
  }

  int run() {
    const auto c = corpus.load();
    std::optional<TrajectoryStore> store;
    if (!store_path.empty()) store = load_store(store_path, fingerprint(c));
    cfg.objective = parse_objective(objective);
    cfg.inner = parse_inner_optimizer(inner);
    cfg.model = store ? model.over(store->model_config) : model.config(c.vocab);
    cfg.shape.vocab = cfg.model.vocab_size;
    if (inner_lr_) {
      cfg.inner_adam.lr = *inner_lr_;
      cfg.inner_sgd.lr = *inner_lr_;
    }
    cfg.eval_hyper = student.h;
    cfg.validate();

    std::ofstream file;
    std::ostream* rep = &std::cout;
    if (report != "-") {
      file = open_out(report);
      rep = &file;
    }
    auto emit = [&](const MetaStepReport& r) {
      auto j = to_json(r);
      if (!timing) j.erase("wall_seconds");
      *rep << j.dump() << "\n";
      rep->flush();
    };

    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto res = distill(cfg, c, store ? &*store : nullptr, emit);
      save_synthetic(res.syn, out);
      std::clog << "rank " << res.rank << " (d=" << res.syn.dim() << "), wrote " << out << " in "
                << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    } catch (const DistillFailure& f) {
      save_synthetic(f.partial(), out);
      std::cerr << "error: " << f.what() << "\npartial result (before step " << f.step() << ") saved to " << out
                << "\n";
      f.rethrow_cause();
    }
    return kExitOk;
  }

 private:
  std::optional<double> inner_lr_;
};

// ------------------------------------------------------------------ fit-eval

struct FitEvalCmd {
  CorpusArgs corpus;
  ModelArgs model;
  StudentArgs student;
  std::string syn_path;
  std::string data = "syn";
  std::vector<std::size_t> ks{10, 100};
  std::string split = "test";
  std::uint64_t seed = 0;
  std::string out;

  void add(CLI::App* app) {
    corpus.add(app);
    model.add(app, "student-");
    app->add_option("--student", model.arch, "Alias of --student-arch");
    student.add(app);
    app->add_option("--syn", syn_path, "Synthetic-data file");
    app->add_option("--data", data, "syn (train on --syn) or full (train on the real train split)");
    app->add_option("--ks", ks, "Cutoffs for HR and nDCG");
    app->add_option("--split", split, "Evaluation split");
    app->add_option("--seed", seed);
    app->add_option("--out", out, "Write the JSON record to this file");
  }

  int run() {
    const auto c = corpus.load();
    student.h.seed = seed;
    const ModelConfig cfg = model.config(c.vocab);
    MetricReport r;
    if (data == "full") {
      r = eval_student_on_corpus(c, cfg, student.h, ks, parse_split(split));
    } else if (data == "syn") {
      if (syn_path.empty()) throw ConfigError("--syn is required unless --data full");
      const auto syn = load_synthetic(syn_path);
      r = eval_student_on_synthetic(syn, cfg, student.h, c, ks, parse_split(split));
    } else {
      throw ConfigError("--data must be syn or full, got '" + data + "'");
    }
    auto record = to_json(r);
    record["data"] = data == "full" ? "full" : syn_path;
    record["student"] = to_string(cfg.arch);
    record["split"] = split;
    record["seed"] = seed;
    print_table(record);
    std::cout << record.dump() << "\n";
    if (!out.empty()) open_out(out) << record.dump() << "\n";
    return kExitOk;
  }

 private:
  static void print_table(const nlohmann::json& record) {
    std::vector<std::string> cols{"data", "student"};
    for (const auto& [k, v] : record.items()) {
      if (v.is_number_float() || k == "ppl") cols.push_back(k);
    }
    cols.push_back("n");
    std::vector<std::string> cells;
    for (const auto& k : cols) {
      const auto& v = record.at(k);
      std::ostringstream os;
      if (v.is_number_float()) {
        os << std::fixed << std::setprecision(4) << v.get<double>();
      } else if (v.is_string()) {
        os << v.get<std::string>();
      } else {
        os << v.dump();
      }
      cells.push_back(os.str());
    }
    for (int row = 0; row < 2; ++row) {
      for (std::size_t i = 0; i < cols.size(); ++i) {
        const std::size_t w = i + 1 < cols.size() ? std::max(cols[i].size(), cells[i].size()) : 0;
        std::cout << (i ? "  " : "") << std::left << std::setw(static_cast<int>(w)) << (row ? cells[i] : cols[i]);
      }
      std::cout << "\n";
    }
  }
};

// ----------------------------------------------------------------- gradcheck

struct GradcheckCmd {
  gradcheck::Options opts;
  std::vector<std::size_t> horizons{1, 2, 5, 10};
  bool inject_fault = false;

  void add(CLI::App* app) {
    app->add_option("--T", horizons, "Horizons to check; 1 alone runs the finite-difference check only");
    app->add_option("--tol", opts.tol, "Relative error bound for the T=1 check");
    app->add_option("--instances", opts.instances, "Random instances per check");
    app->add_option("--seed", opts.seed);
    app->add_flag("--inject-fault", inject_fault)->group("");
  }

  int run() {
    opts.horizons = horizons;
    if (inject_fault) opts.fault = ReverseFault::FlipMomentJacobianSign;
    const auto rep = gradcheck::run(opts);
    for (const auto& line : rep.lines) {
      std::cout << (line.passed ? "PASS " : "FAIL ") << line.name << ": " << line.detail << "\n";
    }
    return rep.ok() ? kExitOk : kExitGradcheck;
  }
};

int exit_code_for_current_exception() {
  try {
    throw;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ReversalDriftError& e) {
    std::cerr << "numeric error: " << e.what() << " (step " << e.step() << ", magnitude " << e.magnitude() << ")\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DegenerateTrajectoryError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Synthetic sequence data distillation");
  app.set_config("--config", "", "Config file; one [command] section per command, keys are flag names");
  app.allow_config_extras(false);
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenCorpusCmd gen;
  PretrainCmd pretrain;
  DistillCmd dist;
  FitEvalCmd fit;
  GradcheckCmd check;
  auto* gen_app = app.add_subcommand("gen-corpus", "Sample a Markov-chain corpus")->fallthrough();
  auto* pre_app = app.add_subcommand("pretrain", "Record teacher training trajectories")->fallthrough();
  auto* dist_app = app.add_subcommand("distill", "Distill a synthetic dataset")->fallthrough();
  auto* fit_app = app.add_subcommand("fit-eval", "Train a fresh student and report metrics")->fallthrough();
  auto* check_app = app.add_subcommand("gradcheck", "Check the reverse-mode meta-gradient")->fallthrough();
  gen.add(gen_app);
  pretrain.add(pre_app);
  dist.add(dist_app);
  fit.add(fit_app);
  check.add(check_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen_app) return gen.run();
    if (*pre_app) return pretrain.run();
    if (*dist_app) return dist.run();
    if (*fit_app) return fit.run();
    return check.run();
  } catch (...) {
    return exit_code_for_current_exception();
  }
}
