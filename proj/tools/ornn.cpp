// ornn: command-line front end for the experiment runner.
//
// Exit codes: 0 success, 1 check failed or runtime error, 2 configuration
// error, 3 training diverged.

#include "ornn/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace ornn;

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

Model gradcheck_model(const std::string& name, int inputs, int hidden, int outputs,
                      const std::string& nonlinearity, SeededRng& rng) {
  ModelShape shape;
  shape.inputs = inputs;
  shape.hidden = hidden;
  shape.outputs = outputs;
  shape.nonlinearity = parse_nonlinearity(nonlinearity);
  if (name == "srnn") shape.architecture = Architecture::srnn;
  else if (name == "ltrnn") shape.architecture = Architecture::ltrnn;
  else if (name == "lstm") shape.architecture = Architecture::lstm;
  else if (name == "lstm-peephole") {
    shape.architecture = Architecture::lstm;
    shape.peephole = true;
  } else if (name == "pooled") {
    shape.architecture = Architecture::pooled;
    if (hidden % 2 != 0) throw ConfigError("pooled: hidden must be even");
  } else {
    throw ConfigError("gradcheck: unknown architecture '" + name +
                      "' (srnn, ltrnn, lstm, lstm-peephole, pooled)");
  }
  return random_model(shape, rng, 0.3);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Orthogonal and identity LT-RNN experiments on the copy and adding tasks"};
  app.require_subcommand(1);

  // figure1
  Figure1Options fig;
  std::string fig_out = "figure1.csv";
  auto* figure1 = app.add_subcommand("figure1", "clock-mechanism success sweep over (K, S)");
  figure1->add_option("--out", fig_out, "CSV path")->capture_default_str();
  figure1->add_option("--seed", fig.seed)->capture_default_str();
  figure1->add_option("--d", fig.d, "rotation blocks")->capture_default_str();
  figure1->add_option("--T", fig.T)->capture_default_str();
  figure1->add_option("--trials", fig.trials)->capture_default_str();
  figure1->add_option("--K", fig.K_grid, "alphabet sizes")->delimiter(',');
  figure1->add_option("--S", fig.S_grid, "sequence lengths")->delimiter(',');

  // train
  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train a model and write a metrics CSV");
  train_flags.attach(*train);
  bool quiet = false;
  train->add_flag("--quiet", quiet, "do not echo rows to stdout");

  // probe
  std::string probe_ckpt, probe_out = "-";
  bool probe_adder = false, probe_untrained = false, probe_zero = false;
  int probe_T = 500, probe_hidden = 128;
  std::uint64_t probe_seed = 1;
  auto* probe = app.add_subcommand("probe", "per-step hidden activations on one adding sample");
  auto* src_ckpt = probe->add_option("--checkpoint", probe_ckpt, "trained model checkpoint");
  auto* src_adder = probe->add_flag("--adder", probe_adder, "probe the exact adding mechanism");
  auto* src_untrained = probe->add_flag("--untrained", probe_untrained, "fresh pooled-ornn model");
  src_ckpt->excludes(src_adder, src_untrained);
  src_adder->excludes(src_untrained);
  probe->add_flag("--zero-input", probe_zero, "feed an all-zero input sequence");
  probe->add_option("--T", probe_T)->capture_default_str();
  probe->add_option("--hidden", probe_hidden, "hidden size for --untrained")->capture_default_str();
  probe->add_option("--seed", probe_seed)->capture_default_str();
  probe->add_option("--out", probe_out, "CSV path, - for stdout")->capture_default_str();

  // gradcheck
  std::string gc_arch = "ltrnn", gc_task = "copy", gc_nl = "tanh";
  int gc_hidden = 8, gc_T = 20;
  double gc_tol = 1e-4;
  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "compare BPTT against central differences");
  gradcheck->add_option("--arch", gc_arch, "srnn | ltrnn | lstm | lstm-peephole | pooled")->capture_default_str();
  gradcheck->add_option("--task", gc_task, "copy | adding")->capture_default_str();
  gradcheck->add_option("--nonlinearity", gc_nl)->capture_default_str();
  gradcheck->add_option("--hidden", gc_hidden)->capture_default_str();
  gradcheck->add_option("--T", gc_T, "sequence length")->capture_default_str();
  gradcheck->add_option("--tol", gc_tol)->capture_default_str();
  gradcheck->add_option("--seed", gc_seed)->capture_default_str();

  // mechanism-adding
  int ma_T = 750, ma_samples = 10000;
  std::uint64_t ma_seed = 1;
  auto* mech_add = app.add_subcommand("mechanism-adding", "run the exact adder on random samples");
  mech_add->add_option("--T", ma_T)->capture_default_str();
  mech_add->add_option("--samples", ma_samples)->capture_default_str();
  mech_add->add_option("--seed", ma_seed)->capture_default_str();

  // mechanism-copy
  int mc_d = 128, mc_K = 8, mc_S = 10, mc_T = 500, mc_trials = 500;
  std::uint64_t mc_seed = 1;
  auto* mech_copy = app.add_subcommand("mechanism-copy", "success rate of the clock construction");
  mech_copy->add_option("--d", mc_d, "rotation blocks")->capture_default_str();
  mech_copy->add_option("--K", mc_K)->capture_default_str();
  mech_copy->add_option("--S", mc_S)->capture_default_str();
  mech_copy->add_option("--T", mc_T)->capture_default_str();
  mech_copy->add_option("--trials", mc_trials)->capture_default_str();
  mech_copy->add_option("--seed", mc_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (argc <= 1) std::cerr << app.help();
    return kExitConfig;
  }

  try {
    if (*figure1) {
      const auto rows = run_figure1(fig, fig_out);
      write_sweep_csv(std::cout, rows, fig.seed);
      return 0;
    }
    if (*train) {
      const ExperimentConfig cfg = resolve_config(train_flags.merged());
      RunOptions opt;
      opt.csv = train_flags.out;
      if (!train_flags.checkpoint.empty()) opt.checkpoint = train_flags.checkpoint;
      opt.resume = train_flags.resume;
      opt.record_time = train_flags.record_time;
      if (!quiet) opt.log = &std::cout;
      const RunResult r = run_training(cfg, opt);
      if (r.status == RunStatus::diverged) {
        std::cerr << "training diverged; see the last row of " << opt.csv << '\n';
        return kExitDiverged;
      }
      return 0;
    }
    if (*probe) {
      SeededRng rng(probe_seed, 0);
      Model model;
      if (!probe_ckpt.empty()) {
        model = load_checkpoint(probe_ckpt).model;
      } else if (probe_adder) {
        model = build_adding_mechanism();
      } else if (probe_untrained) {
        Json j{{"task", "adding"}, {"model", "pooled-ornn"}, {"hidden", probe_hidden}, {"seed", probe_seed}};
        const ExperimentConfig cfg = resolve_config(j);
        SeededRng init(cfg.seed, kInitStream);
        model = init_model(cfg, init);
      } else {
        throw ConfigError("probe: give --checkpoint, --adder or --untrained");
      }
      AddingSample sample = gen_adding(AddingConfig{probe_T}, rng);
      if (probe_zero) {
        std::fill(sample.values.begin(), sample.values.end(), 0.0);
        std::fill(sample.markers.begin(), sample.markers.end(), 0);
        sample.target = 0.0;
      }
      if (probe_out == "-") {
        run_activation_probe(model, sample, std::cout);
      } else {
        std::ofstream os(probe_out);
        if (!os) throw std::runtime_error("cannot write " + probe_out);
        run_activation_probe(model, sample, os);
      }
      return 0;
    }
    if (*gradcheck) {
      SeededRng rng(gc_seed, 0);
      Batch batch;
      Model model;
      if (gc_task == "copy") {
        const CopyConfig cc{3, 2, std::max(2, gc_T - 4)};
        model = gradcheck_model(gc_arch, cc.num_classes(), gc_hidden, cc.num_classes(), gc_nl, rng);
        std::vector<CopySample> s;
        for (int i = 0; i < 3; ++i) s.push_back(gen_copy(cc, rng));
        batch = make_batch(std::span<const CopySample>(s));
      } else if (gc_task == "adding") {
        model = gradcheck_model(gc_arch, 2, gc_hidden, 1, gc_nl, rng);
        std::vector<AddingSample> s;
        for (int i = 0; i < 3; ++i) s.push_back(gen_adding(AddingConfig{gc_T}, rng));
        batch = make_batch(std::span<const AddingSample>(s));
      } else {
        throw ConfigError("gradcheck: task must be copy or adding");
      }
      const GradCheckReport report = grad_check(model, batch, gc_tol);
      std::printf("tensor,max_rel_error,checked,skipped\n");
      for (const auto& t : report.tensors)
        std::printf("%s,%.3e,%zu,%zu\n", t.name.c_str(), t.max_rel_error, t.checked, t.skipped);
      std::printf("%s max_rel_error=%.3e tol=%.1e\n", report.passed() ? "PASS" : "FAIL",
                  report.max_rel_error(), gc_tol);
      return report.passed() ? 0 : 1;
    }
    if (*mech_add) {
      if (ma_T < 2 || ma_samples < 1) throw ConfigError("mechanism-adding: need T >= 2, samples >= 1");
      const LtRnnParams p = build_adding_mechanism();
      SeededRng rng(ma_seed, 0);
      double worst = 0.0;
      for (int done = 0; done < ma_samples; done += 1000) {
        std::vector<AddingSample> s;
        for (int i = done; i < std::min(ma_samples, done + 1000); ++i) s.push_back(gen_adding(AddingConfig{ma_T}, rng));
        const Batch b = make_batch(std::span<const AddingSample>(s));
        const auto tr = ltrnn_forward(p, b.inputs);
        const auto& y = tr.output(ma_T - 1);
        for (std::size_t c = 0; c < s.size(); ++c)
          worst = std::max(worst, std::abs(y(0, static_cast<Eigen::Index>(c)) - s[c].target));
      }
      std::printf("T=%d samples=%d max_abs_error=%.3e\n", ma_T, ma_samples, worst);
      return worst < 1e-9 ? 0 : 1;
    }
    if (*mech_copy) {
      if (mc_d < 1 || mc_K < 2 || mc_S < 1 || mc_T < 2 || mc_trials < 1) {
        throw ConfigError("mechanism-copy: need d >= 1, K >= 2, S >= 1, T >= 2, trials >= 1");
      }
      const std::vector<int> Ks{mc_K}, Ss{mc_S};
      const auto rows = success_sweep(mc_d, mc_T, Ks, Ss, mc_trials, SeededRng(mc_seed, 0));
      write_sweep_csv(std::cout, rows, mc_seed);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
