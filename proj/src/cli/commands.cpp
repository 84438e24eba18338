#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "ntklab/bounds.hpp"
#include "ntklab/cli.hpp"
#include "ntklab/grad.hpp"
#include "ntklab/io.hpp"
#include "ntklab/kernel.hpp"
#include "ntklab/trainer.hpp"

namespace ntklab::cli {

namespace {

namespace fs = std::filesystem;

// Independent random streams derived from the run seed.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kParamStream = 2;
constexpr std::uint64_t kSampleStream = 3;

// Default input scale for the width experiments. At d_m = 4000 the initial
// NTK's top eigenvalue is about 6.6e3 C_x^2, so gamma = 1 is stable only below
// C_x ~ 0.0175. The kernel grows during training, so the default keeps
// gamma * lambda_max below 1 at initialization.
constexpr double kTrainInputScale = 0.012;

Tau0Rule parse_tau0_rule(const std::string& s) {
  if (s == "inv_sqrt_width") return Tau0Rule::InvSqrtWidth;
  if (s == "inv_width") return Tau0Rule::InvWidth;
  if (s == "custom") return Tau0Rule::Custom;
  throw ConfigError(fmt::format("unknown tau0_rule '{}' (expected inv_sqrt_width, inv_width or custom)", s));
}

HessianTarget parse_target(const std::string& s) {
  if (s == "network") return HessianTarget::Network;
  if (s == "loss") return HessianTarget::Loss;
  throw ConfigError(fmt::format("unknown hessian target '{}' (expected network or loss)", s));
}

struct ModelSetup {
  InitName init = InitName::LeCun;
  Tau0Rule rule = Tau0Rule::InvSqrtWidth;
  double custom_tau0 = 1.0;
  Pooling pooling = Pooling::Sum;

  InitScheme scheme(const Dims& dims) const { return InitScheme::named(init, dims); }
  ScalingScheme scaling(const InitScheme& s, Index d_m) const {
    return make_scaling(s, rule, d_m, pooling, custom_tau0);
  }
};

ModelSetup read_model_setup(ConfigReader& r, const std::string& init, const std::string& rule,
                            const std::string& pooling = "sum") {
  ModelSetup m;
  try {
    m.init = parse_init_name(r.get<std::string>("init", init));
    m.pooling = parse_pooling(r.get<std::string>("pooling", pooling));
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  m.rule = parse_tau0_rule(r.get<std::string>("tau0_rule", rule));
  const auto custom = r.maybe<double>("tau0");
  if (m.rule == Tau0Rule::Custom) {
    if (!custom || !(*custom > 0.0)) throw ConfigError("tau0_rule 'custom' needs a positive 'tau0'");
    m.custom_tau0 = *custom;
  } else if (custom) {
    throw ConfigError("'tau0' is only allowed with tau0_rule 'custom'");
  }
  return m;
}

std::uint64_t read_seed(ConfigReader& r, std::optional<std::uint64_t> override_seed) {
  const auto seed = r.get<std::uint64_t>("seed", 1);
  if (override_seed) {
    r.set("seed", *override_seed);
    return *override_seed;
  }
  return seed;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void require_positive(Index v, const char* name) { require(v >= 1, fmt::format("'{}' must be >= 1", name)); }

void require_widths(const std::vector<Index>& widths) {
  require(!widths.empty(), "'widths' must not be empty");
  for (Index w : widths) require_positive(w, "widths");
}

Dataset make_dataset(Index N, Index d_s, Index d, double C_x, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kDataStream));
  return gen_synthetic(N, d_s, d, C_x, rng);
}

ModelParams make_params(const Dims& dims, const InitScheme& scheme, std::uint64_t seed) {
  Rng rng(derive_seed(derive_seed(seed, kParamStream), static_cast<std::uint64_t>(dims.d_m)));
  return init_params(dims, scheme, rng);
}

void emit(CommandResult& res, const fs::path& dir, const std::string& name, const std::string& content) {
  write_file_atomic(dir / name, content);
  res.outputs.push_back(name);
}

void check(CommandResult& res, std::string name, bool passed, std::string detail) {
  res.checks.push_back({std::move(name), passed, std::move(detail)});
}

std::string opt_cell(const std::optional<double>& v) { return v ? cell(*v) : std::string(); }

CsvTable trace_table(const TrainTrace& trace) {
  CsvTable t;
  t.header = {"epoch", "loss", "move_Q", "move_K", "move_V", "move_O", "alpha_t", "envelope"};
  for (const TrainRecord& r : trace.records) {
    t.rows.push_back({cell(r.epoch), cell(r.loss), cell(r.move[0]), cell(r.move[1]), cell(r.move[2]),
                      cell(r.move[3]), opt_cell(r.alpha_t), opt_cell(r.envelope)});
  }
  return t;
}

bool contains(const std::vector<Index>& v, Index x) { return std::find(v.begin(), v.end(), x) != v.end(); }

// ---------------------------------------------------------------- train

CommandResult cmd_train(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const Index N = r.get<Index>("N", 100);
  const Index d_s = r.get<Index>("d_s", 10);
  const Index d = r.get<Index>("d", 100);
  const double C_x = r.get<double>("C_x", kTrainInputScale);
  const auto widths = r.get<std::vector<Index>>("widths", {10, 100, 1000, 4000});
  const ModelSetup setup = read_model_setup(r, "lecun", "inv_sqrt_width");
  HyperParams hyper;
  hyper.gamma = r.get<double>("gamma", 1.0);
  hyper.epochs = r.get<Index>("epochs", 400);
  const std::string mode = r.get<std::string>("mode", "gd");
  hyper.alpha_track = r.get<bool>("alpha_track", true);
  hyper.alpha_every = r.get<Index>("alpha_every", 10);
  const auto expect_converged = r.get<std::vector<Index>>("expect_converged", {1000, 4000});
  const double converged_ratio = r.get<double>("converged_ratio", 1e-2);
  const auto expect_stalled = r.get<std::vector<Index>>("expect_stalled", {10});
  const double stalled_ratio = r.get<double>("stalled_ratio", 1e-1);
  const Index movement_width = r.get<Index>("movement_width", 4000);
  const Index movement_after = r.get<Index>("movement_after", 50);
  const double movement_ratio = r.get<double>("movement_ratio", 0.1);
  const bool save_params = r.get<bool>("save_params", false);
  r.finish();
  res.effective_config = r.effective();

  require_positive(N, "N");
  require_positive(d_s, "d_s");
  require_positive(d, "d");
  require_widths(widths);
  require(C_x > 0.0, "'C_x' must be positive");
  require(mode == "gd" || mode == "sgd", "'mode' must be gd or sgd");
  hyper.mode = mode == "gd" ? TrainMode::GD : TrainMode::SGD;
  try {
    hyper.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }

  const Dataset data = make_dataset(N, d_s, d, C_x, res.seed);
  emit(res, out, "dataset.txt", serialize_dataset(data));

  CsvTable cond;
  cond.header = {"d_m", "alpha", "width_lhs", "width_rhs", "width_pass", "init_lhs", "init_rhs", "init_pass",
                 "gamma_max", "loss0", "final_loss", "final_ratio", "diverged"};
  for (Index d_m : widths) {
    const Dims dims{N, d_s, d, d_m};
    const InitScheme scheme = setup.scheme(dims);
    const ScalingScheme scaling = setup.scaling(scheme, d_m);
    const ModelParams p0 = make_params(dims, scheme, res.seed);
    if (save_params) emit(res, out, fmt::format("params_dm{}_init.txt", d_m), serialize_params(p0));

    const double loss0 = loss(data, p0, scaling);
    const TheoryConstants tc = theory_constants(p0, dims, scaling, Radii{}, C_x, loss0);
    const ConditionReport rep = check_conditions(tc, alpha(batch_features(data, p0, scaling)), loss0, scaling.tau0);

    TrainTrace trace;
    bool diverged = false;
    try {
      if (hyper.mode == TrainMode::GD) {
        trace = gd_train(data, p0, scaling, hyper);
      } else {
        Rng rng(derive_seed(res.seed, kSampleStream));
        trace = sgd_train(data, p0, scaling, hyper, rng);
      }
    } catch (const DivergenceError& e) {
      trace = e.partial();
      diverged = true;
      res.partial = true;
      res.notes.push_back(fmt::format("d_m={}: {}", d_m, e.what()));
    }
    emit(res, out, fmt::format("train_dm{}.csv", d_m), trace_table(trace).render());
    if (save_params) emit(res, out, fmt::format("params_dm{}_final.txt", d_m), serialize_params(trace.final_params));

    const double final_loss = trace.records.back().loss;
    const double ratio = final_loss / loss0;
    cond.rows.push_back({cell(d_m), cell(rep.alpha), cell(rep.width.lhs), cell(rep.width.rhs),
                         rep.width.pass ? "1" : "0", cell(rep.init.lhs), cell(rep.init.rhs), rep.init.pass ? "1" : "0",
                         cell(rep.gamma_max), cell(loss0), cell(final_loss), cell(ratio), diverged ? "1" : "0"});

    if (contains(expect_converged, d_m)) {
      check(res, fmt::format("d_m={} final loss ratio < {}", d_m, converged_ratio), !diverged && ratio < converged_ratio,
            fmt::format("ratio {}", ratio));
    } else if (contains(expect_stalled, d_m)) {
      check(res, fmt::format("d_m={} final loss ratio > {}", d_m, stalled_ratio), ratio > stalled_ratio,
            fmt::format("ratio {}", ratio));
    } else {
      check(res, fmt::format("d_m={} trained without divergence", d_m), !diverged, diverged ? "diverged" : "");
    }
    if (d_m == movement_width && !diverged && hyper.epochs > movement_after) {
      const auto inc = late_increment_ratio(trace, movement_after);
      const double worst = *std::max_element(inc.begin(), inc.end());
      check(res, fmt::format("d_m={} movement increments after epoch {} < {} of epoch 1", d_m, movement_after,
                             movement_ratio),
            worst < movement_ratio, fmt::format("Q {} K {} V {} O {}", inc[0], inc[1], inc[2], inc[3]));
    }
  }
  emit(res, out, "conditions.csv", cond.render());
  return res;
}

// ---------------------------------------------------------------- kernel

CommandResult cmd_kernel(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const Index N = r.get<Index>("N", 30);
  const Index d_s = r.get<Index>("d_s", 10);
  const Index d = r.get<Index>("d", 100);
  const double C_x = r.get<double>("C_x", kTrainInputScale);
  const auto widths = r.get<std::vector<Index>>("widths", {100, 1000, 4000});
  const ModelSetup setup = read_model_setup(r, "lecun", "inv_sqrt_width");
  HyperParams hyper;
  hyper.gamma = r.get<double>("gamma", 1.0);
  hyper.epochs = r.get<Index>("epochs", 400);
  hyper.kernel_checkpoint_every = r.get<Index>("checkpoint_every", 50);
  hyper.kernel_block_size = r.get<Index>("block_size", 30);
  const double budget_mb = r.get<double>("memory_budget_mb", 1024.0);
  const bool expect_ordering = r.get<bool>("expect_ordering", true);
  const bool save_kernels = r.get<bool>("save_kernels", true);
  r.finish();
  res.effective_config = r.effective();

  require_positive(N, "N");
  require_positive(d_s, "d_s");
  require_positive(d, "d");
  require_widths(widths);
  require(hyper.kernel_checkpoint_every >= 1, "'checkpoint_every' must be >= 1");
  require(budget_mb > 0.0, "'memory_budget_mb' must be positive");
  try {
    hyper.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  const auto budget = static_cast<std::size_t>(budget_mb * 1024.0 * 1024.0);
  for (Index d_m : widths) {
    const Index P = Dims{N, d_s, d, d_m}.param_count();
    const std::size_t need = empirical_ntk_bytes(P, std::min(hyper.kernel_block_size, N));
    if (need > budget) {
      throw ConfigError(fmt::format("d_m={}: kernel block needs {} MB, budget is {} MB", d_m,
                                    static_cast<double>(need) / 1048576.0, budget_mb));
    }
  }

  const Dataset data = make_dataset(N, d_s, d, C_x, res.seed);
  CsvTable dist;
  dist.header = {"d_m", "epoch", "distance"};
  std::vector<std::pair<Index, double>> finals;
  for (Index d_m : widths) {
    const Dims dims{N, d_s, d, d_m};
    const InitScheme scheme = setup.scheme(dims);
    const ScalingScheme scaling = setup.scaling(scheme, d_m);
    const ModelParams p0 = make_params(dims, scheme, res.seed);
    TrainTrace trace;
    try {
      trace = gd_train(data, p0, scaling, hyper);
    } catch (const DivergenceError& e) {
      trace = e.partial();
      res.partial = true;
      check(res, fmt::format("d_m={} trained without divergence", d_m), false, e.what());
    }
    // The last epoch is always compared, even off the checkpoint cadence.
    if (trace.kernel_checkpoints.empty() || trace.kernel_checkpoints.back().epoch != trace.records.back().epoch) {
      trace.kernel_checkpoints.push_back({trace.records.back().epoch,
                                          empirical_ntk(data, trace.final_params, scaling, hyper.kernel_block_size,
                                                        budget).K});
    }
    const Matrix& K0 = trace.kernel_checkpoints.front().K;
    double last = 0.0;
    for (const KernelCheckpoint& kc : trace.kernel_checkpoints) {
      last = kernel_distance(K0, kc.K);
      dist.rows.push_back({cell(d_m), cell(kc.epoch), cell(last)});
    }
    check(res, fmt::format("d_m={} distance at epoch 0 is 0", d_m),
          kernel_distance(K0, trace.kernel_checkpoints.front().K) == 0.0, "");
    finals.emplace_back(d_m, last);
    if (save_kernels) {
      emit(res, out, fmt::format("kernel_dm{}_epoch0.csv", d_m), kernel_table(K0).render());
      emit(res, out, fmt::format("kernel_dm{}_epoch{}.csv", d_m, trace.kernel_checkpoints.back().epoch),
           kernel_table(trace.kernel_checkpoints.back().K).render());
    }
  }
  emit(res, out, "kernel_distance.csv", dist.render());
  if (expect_ordering && finals.size() > 1) {
    std::sort(finals.begin(), finals.end());
    bool decreasing = true;
    std::string detail;
    for (std::size_t i = 0; i < finals.size(); ++i) {
      detail += fmt::format("{}{}:{}", i ? " " : "", finals[i].first, finals[i].second);
      if (i > 0 && !(finals[i].second < finals[i - 1].second)) decreasing = false;
    }
    check(res, "final kernel distance strictly decreases with width", decreasing, detail);
  }
  return res;
}

// ---------------------------------------------------------------- hessian

CommandResult cmd_hessian(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const auto widths = r.get<std::vector<Index>>("widths", {64, 128, 256, 512, 1024, 2048, 4096});
  const Index reps = r.get<Index>("reps", 5);
  HessianSweepSetup setup;
  setup.d_s = r.get<Index>("d_s", 4);
  setup.d = r.get<Index>("d", 1);
  setup.C_x = r.get<double>("C_x", 1.0);
  const ModelSetup model = read_model_setup(r, "ntk", "inv_width");
  require(model.rule != Tau0Rule::Custom, "hessian sweeps need a width-dependent tau0_rule");
  setup.init = model.init;
  setup.tau0_rule = model.rule;
  setup.pooling = model.pooling;
  setup.target = parse_target(r.get<std::string>("target", "network"));
  setup.hvp_step = r.get<double>("hvp_step", 1e-4);
  setup.tol = r.get<double>("tol", 1e-6);
  const auto band = r.get<std::vector<double>>("slope_band", {-0.65, -0.35});
  r.finish();
  res.effective_config = r.effective();

  require_widths(widths);
  require_positive(reps, "reps");
  require_positive(setup.d_s, "d_s");
  require_positive(setup.d, "d");
  require(setup.hvp_step > 0.0 && setup.tol > 0.0, "'hvp_step' and 'tol' must be positive");
  require(band.size() == 2 && band[0] <= band[1], "'slope_band' must be [low, high]");

  const std::vector<SweepRow> rows = hessian_sweep(widths, res.seed, reps, setup);
  CsvTable t;
  t.header = {"rep", "d_m", "norm", "iterations", "status"};
  bool all_converged = true;
  for (const SweepRow& row : rows) {
    t.rows.push_back({cell(row.rep), cell(row.d_m), cell(row.norm), cell(static_cast<Index>(row.iterations)),
                      row.converged ? "converged" : "not_converged"});
    all_converged = all_converged && row.converged;
  }
  check(res, "power iteration converged for every width", all_converged, "");

  std::vector<Index> distinct = widths;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) {
    t.footer.push_back("slope,undefined");
    res.notes.push_back("a single width gives no slope");
  } else {
    const double slope = mean_rep_slope(rows);
    t.footer.push_back("slope," + cell(slope));
    const bool sweep_ok = distinct.size() >= 4 &&
                          static_cast<double>(distinct.back()) / static_cast<double>(distinct.front()) >= 64.0;
    if (sweep_ok) {
      check(res, fmt::format("slope in [{}, {}]", band[0], band[1]), slope >= band[0] && slope <= band[1],
            fmt::format("slope {}", slope));
    } else {
      res.notes.push_back("fewer than 4 widths or a span under 64x: slope reported, not checked");
    }
  }
  emit(res, out, "hessian.csv", t.render());
  return res;
}

// ---------------------------------------------------------------- assumptions

CommandResult cmd_assumptions(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const Index N = r.get<Index>("N", 100);
  const Index d_s = r.get<Index>("d_s", 10);
  const Index d = r.get<Index>("d", 100);
  const double C_x = r.get<double>("C_x", 1.0);
  auto t_grid = r.maybe<std::vector<double>>("t_grid");
  const double rank_tol = r.get<double>("rank_tol", 1e-8);
  const bool plant_duplicate = r.get<bool>("plant_duplicate", false);
  const double decay_factor = r.get<double>("decay_factor", 4.0);
  const double decay_max_frequency = r.get<double>("decay_max_frequency", 0.05);
  r.finish();
  res.effective_config = r.effective();

  require(N >= 2, "'N' must be >= 2");
  require_positive(d_s, "d_s");
  require_positive(d, "d");
  require(C_x > 0.0, "'C_x' must be positive");
  if (plant_duplicate) require(d_s >= 2, "plant_duplicate needs d_s >= 2");

  Dataset data = make_dataset(N, d_s, d, C_x, res.seed);
  if (plant_duplicate) {
    data.inputs[0].row(1) = data.inputs[0].row(0);
    res.notes.push_back("sample 0: token 1 replaced by a copy of token 0");
  }
  if (d_s > d) res.notes.push_back("d_s > d: inputs cannot have full row rank");
  if (N < d) res.notes.push_back("N < d: the empirical covariance is singular");

  const std::vector<double> sims = pair_similarities(data);
  std::vector<double> mags(sims.size());
  std::transform(sims.begin(), sims.end(), mags.begin(), [](double s) { return std::abs(s); });
  std::vector<double> sorted = mags;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];
  const double max_mag = sorted.back();
  if (!t_grid) {
    // Multiples of the median, out past the largest observed value.
    std::vector<double> grid;
    for (int k = 0; k <= 16; ++k) grid.push_back(0.5 * k * median);
    grid.push_back(2.0 * max_mag);
    std::sort(grid.begin(), grid.end());
    t_grid = grid;
  }
  require(std::is_sorted(t_grid->begin(), t_grid->end()), "'t_grid' must be ascending");

  const AssumptionReport report = assumption_report(data, *t_grid, rank_tol);
  CsvTable tail;
  tail.header = {"t", "frequency"};
  bool monotone = true;
  for (std::size_t i = 0; i < report.tail_curve.size(); ++i) {
    tail.rows.push_back({cell(report.tail_curve[i].t), cell(report.tail_curve[i].frequency)});
    if (i > 0 && report.tail_curve[i].frequency > report.tail_curve[i - 1].frequency) monotone = false;
  }
  emit(res, out, "tail.csv", tail.render());
  check(res, "tail curve non-increasing", monotone, "");
  if (!t_grid->empty() && t_grid->front() <= 0.0) {
    check(res, "frequency 1 at t = 0", report.tail_curve.front().frequency == 1.0, "");
  }
  if (!t_grid->empty() && t_grid->back() > max_mag) {
    check(res, "frequency 0 above the largest similarity", report.tail_curve.back().frequency == 0.0, "");
  }
  const double t_decay = decay_factor * median;
  const double freq_decay = static_cast<double>(std::count_if(mags.begin(), mags.end(),
                                                              [&](double m) { return m >= t_decay; })) /
                            static_cast<double>(mags.size());
  check(res, fmt::format("frequency at {} x median < {}", decay_factor, decay_max_frequency),
        freq_decay < decay_max_frequency, fmt::format("frequency {}", freq_decay));

  CsvTable rank;
  rank.header = {"sample", "sigma_min"};
  for (Index n = 0; n < data.N(); ++n) rank.rows.push_back({cell(n), cell(report.rank.sigma_min(n))});
  emit(res, out, "rank.csv", rank.render());
  if (plant_duplicate) {
    check(res, "rank check fails on the planted duplicate", !report.rank.full_rank,
          fmt::format("worst sigma_min {} at sample {}", report.rank.worst_sigma_min, report.rank.worst_index));
  } else if (d_s <= d) {
    check(res, "rank check passes", report.rank.full_rank,
          fmt::format("worst sigma_min {} at sample {}", report.rank.worst_sigma_min, report.rank.worst_index));
  }

  const double population = synthetic_covariance_eig(d_s, d, C_x);
  if (N >= 10 * d) {
    const double ratio = report.cov_min_eig / population;
    check(res, "covariance min eigenvalue within [0.5, 1.5] of the population value", ratio >= 0.5 && ratio <= 1.5,
          fmt::format("ratio {}", ratio));
  }
  CsvTable summary;
  summary.header = {"key", "value"};
  summary.rows = {{"full_rank", report.rank.full_rank ? "1" : "0"},
                  {"worst_sigma_min", cell(report.rank.worst_sigma_min)},
                  {"worst_index", cell(report.rank.worst_index)},
                  {"median_similarity", cell(median)},
                  {"max_similarity", cell(max_mag)},
                  {"cov_min_eig", cell(report.cov_min_eig)},
                  {"cov_population_eig", cell(population)}};
  emit(res, out, "summary.csv", summary.render());
  return res;
}

// ---------------------------------------------------------------- vector

CommandResult cmd_vector(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const Index N = r.get<Index>("N", 100);
  const Index dim = r.get<Index>("dim", 100);
  const Index d_m = r.get<Index>("d_m", 100);
  const double vector_norm = r.get<double>("vector_norm", 1.0);
  const ModelSetup setup = read_model_setup(r, "lecun", "inv_width", "average");
  HyperParams hyper;
  hyper.gamma = r.get<double>("gamma", 0.1);
  hyper.epochs = r.get<Index>("epochs", 400);
  hyper.alpha_track = false;
  const double embedding_ratio = r.get<double>("embedding_max_ratio", 1e-2);
  const double sequence_ratio = r.get<double>("sequence_min_ratio", 0.5);
  r.finish();
  res.effective_config = r.effective();

  require_positive(N, "N");
  require_positive(dim, "dim");
  require_positive(d_m, "d_m");
  require(vector_norm > 0.0, "'vector_norm' must be positive");
  try {
    hyper.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }

  Rng rng(derive_seed(res.seed, kDataStream));
  Matrix vectors = gaussian_matrix(N, dim, 1.0, rng);
  for (Index n = 0; n < N; ++n) vectors.row(n) *= vector_norm / vectors.row(n).norm();
  const Vector targets = gaussian_vector(N, 1.0, rng);

  for (const auto& [mode, name] : {std::pair{VectorMode::Embedding, "embedding"},
                                   std::pair{VectorMode::Sequence, "sequence"}}) {
    const Dataset data = vectorize_mode(vectors, targets, mode);
    const Dims dims{N, data.d_s(), data.d(), d_m};
    const InitScheme scheme = setup.scheme(dims);
    const ScalingScheme scaling = setup.scaling(scheme, d_m);
    const ModelParams p0 = make_params(dims, scheme, res.seed);
    TrainTrace trace;
    bool diverged = false;
    try {
      trace = gd_train(data, p0, scaling, hyper);
    } catch (const DivergenceError& e) {
      trace = e.partial();
      diverged = true;
      res.partial = true;
      res.notes.push_back(fmt::format("{}: {}", name, e.what()));
    }
    emit(res, out, fmt::format("vector_{}.csv", name), trace_table(trace).render());
    const double ratio = trace.records.back().loss / trace.records.front().loss;
    if (mode == VectorMode::Embedding) {
      check(res, fmt::format("embedding mode final loss ratio < {}", embedding_ratio),
            !diverged && ratio < embedding_ratio, fmt::format("ratio {}", ratio));
    } else {
      check(res, fmt::format("sequence mode final loss ratio > {}", sequence_ratio),
            !diverged && ratio > sequence_ratio, fmt::format("ratio {}", ratio));
    }
  }
  return res;
}

// ---------------------------------------------------------------- limit

CommandResult cmd_limit(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const Index N = r.get<Index>("N", 20);
  const Index d_s = r.get<Index>("d_s", 4);
  const Index d = r.get<Index>("d", 10);
  const double C_x = r.get<double>("C_x", 1.0);
  const Index samples = r.get<Index>("samples", 200000);
  const double z_max = r.get<double>("z_max", 4.0);
  const auto widths = r.get<std::vector<Index>>("widths", {256, 1024, 4096});
  const Index block_size = r.get<Index>("block_size", 20);
  r.finish();
  res.effective_config = r.effective();

  require_positive(N, "N");
  require_positive(d_s, "d_s");
  require_positive(d, "d");
  require_positive(samples, "samples");
  require_positive(block_size, "block_size");
  require(!widths.empty(), "'widths' must not be empty");
  for (Index w : widths) require_positive(w, "widths");

  const Dataset data = make_dataset(N, d_s, d, C_x, res.seed);
  const KernelMatrix closed = limiting_ntk_closed(data);
  for (const auto& w : closed.warnings) res.notes.push_back(w);
  Rng rng(derive_seed(res.seed, kSampleStream));
  const MonteCarloKernel mc = limiting_ntk_mc(data, samples, rng);
  CsvTable t;
  t.header = {"n", "m", "closed", "mc_mean", "mc_stderr", "z"};
  double worst_z = 0.0;
  for (Index n = 0; n < N; ++n) {
    for (Index m = n; m < N; ++m) {
      const double se = mc.std_error(n, m);
      const double diff = mc.mean.K(n, m) - closed.K(n, m);
      const double z = se > 0.0 ? diff / se : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
      worst_z = std::max(worst_z, std::abs(z));
      t.rows.push_back({cell(n), cell(m), cell(closed.K(n, m)), cell(mc.mean.K(n, m)), cell(se), cell(z)});
    }
  }
  emit(res, out, "limit.csv", t.render());
  check(res, fmt::format("max |z| <= {}", z_max), worst_z <= z_max, fmt::format("max |z| {}", worst_z));

  CsvTable e;
  e.header = {"d_m", "relative_error"};
  std::vector<double> errors;
  for (Index d_m : widths) {
    const Dims dims{N, d_s, d, d_m};
    const InitScheme scheme = InitScheme::ntk(dims);
    const ScalingScheme scaling = make_scaling(scheme, Tau0Rule::InvWidth, d_m);
    const ModelParams p = make_params(dims, scheme, res.seed);
    const double err = relative_kernel_error(empirical_ntk(data, p, scaling, block_size).K, closed.K);
    errors.push_back(err);
    e.rows.push_back({cell(d_m), cell(err)});
  }
  emit(res, out, "ntk_error.csv", e.render());
  if (errors.size() > 1) {
    bool decreasing = true;
    for (std::size_t i = 1; i < errors.size(); ++i) decreasing = decreasing && errors[i] < errors[i - 1];
    std::string detail;
    for (double v : errors) detail += (detail.empty() ? "" : " ") + cell(v);
    check(res, "empirical NTK error decreases with width", decreasing, detail);
  }
  return res;
}

// ---------------------------------------------------------------- bounds

struct GoldenRow {
  std::string key;
  double value;
};

CommandResult cmd_bounds(const Json& config, const fs::path& out, std::optional<std::uint64_t> seed_override) {
  ConfigReader r(config);
  CommandResult res;
  res.seed = read_seed(r, seed_override);
  const Index N = r.get<Index>("N", 20);
  const Index d_s = r.get<Index>("d_s", 10);
  const Index d = r.get<Index>("d", 100);
  const Index d_m = r.get<Index>("d_m", 4000);
  const double C_x = r.get<double>("C_x", 1.0);
  const ModelSetup setup = read_model_setup(r, "lecun", "inv_sqrt_width");
  const auto radii_v = r.get<std::vector<double>>("radii", {1.0, 1.0, 1.0, 1.0});
  const auto golden = r.maybe<std::string>("golden");
  const double golden_tol = r.get<double>("golden_rel_tol", 1e-8);
  r.finish();
  res.effective_config = r.effective();

  require_positive(N, "N");
  require_positive(d_s, "d_s");
  require_positive(d, "d");
  require_positive(d_m, "d_m");
  require(radii_v.size() == 4 && std::all_of(radii_v.begin(), radii_v.end(), [](double c) { return c > 0.0; }),
          "'radii' must hold four positive values (Q, K, V, O)");
  const Radii radii{radii_v[0], radii_v[1], radii_v[2], radii_v[3]};

  const Dataset data = make_dataset(N, d_s, d, C_x, res.seed);
  const Dims dims{N, d_s, d, d_m};
  const InitScheme scheme = setup.scheme(dims);
  const ScalingScheme scaling = setup.scaling(scheme, d_m);
  const ModelParams p0 = make_params(dims, scheme, res.seed);
  const double loss0 = loss(data, p0, scaling);
  const TheoryConstants tc = theory_constants(p0, dims, scaling, radii, C_x, loss0);
  const double a = alpha(batch_features(data, p0, scaling));
  const ConditionReport rep = check_conditions(tc, a, loss0, scaling.tau0);
  const Matrix phi = attention_features(data, p0, scaling.tau0);
  const double gersh = gershgorin_lambda_min_lower(phi);
  const double exact = sym_min_eigen(phi * phi.transpose());
  const GradientNormReport grad = gradient_norm_report(data, p0, scaling, tc);

  std::vector<GoldenRow> rows = {
      {"loss0", loss0},
      {"lambda_bar_Q", tc.lambda_bar_Q},
      {"lambda_bar_K", tc.lambda_bar_K},
      {"lambda_bar_V", tc.lambda_bar_V},
      {"lambda_bar_O", tc.lambda_bar_O},
      {"rho", tc.rho},
      {"z", tc.z},
      {"c1", tc.c1},
      {"c2", tc.c2},
      {"c3", tc.c3},
      {"C_step", tc.C_step},
      {"gamma_max", rep.gamma_max},
      {"alpha", a},
      {"width_lhs", rep.width.lhs},
      {"width_rhs", rep.width.rhs},
      {"width_pass", rep.width.pass ? 1.0 : 0.0},
      {"init_lhs", rep.init.lhs},
      {"init_rhs", rep.init.rhs},
      {"init_pass", rep.init.pass ? 1.0 : 0.0},
      {"gershgorin_lower", gersh},
      {"attention_gram_min_eig", exact},
      {"lambda0_diagnostic", lambda0_diagnostic(scheme.eta_V, phi)},
  };
  static constexpr const char* groups[] = {"Q", "K", "V", "O"};
  for (std::size_t g = 0; g < 4; ++g) {
    rows.push_back({fmt::format("grad_{}_actual", groups[g]), grad.groups[g].actual});
    rows.push_back({fmt::format("grad_{}_bound", groups[g]), grad.groups[g].bound});
  }
  CsvTable t;
  t.header = {"key", "value"};
  for (const GoldenRow& row : rows) t.rows.push_back({row.key, cell(row.value)});
  emit(res, out, "bounds.csv", t.render());

  std::string summary = fmt::format(
      "alpha = {}\ncondition (width): {} >= {} : {}\ncondition (init):  {} >= {} : {}\ngamma_max = {}\n"
      "Gershgorin lower bound {} <= exact {}\n",
      a, rep.width.lhs, rep.width.rhs, rep.width.pass ? "PASS" : "FAIL", rep.init.lhs, rep.init.rhs,
      rep.init.pass ? "PASS" : "FAIL", rep.gamma_max, gersh, exact);
  emit(res, out, "bounds.txt", summary);

  check(res, "Gershgorin bound <= exact lambda_min", gersh <= exact, fmt::format("{} vs {}", gersh, exact));
  if (grad.applicable) {
    check(res, "gradient norms within their caps", grad.all_slack_nonnegative(), "");
  } else {
    res.notes.push_back("gradient-norm caps not applicable: " + grad.note);
  }
  if (golden) {
    const CsvTable ref = read_csv(*golden);
    const std::size_t kc = ref.column("key");
    const std::size_t vc = ref.column("value");
    std::map<std::string, double> expected;
    for (const auto& row : ref.rows) expected[row.at(kc)] = std::stod(row.at(vc));
    std::string mismatches;
    for (const GoldenRow& row : rows) {
      const auto it = expected.find(row.key);
      if (it == expected.end()) {
        mismatches += row.key + " missing; ";
        continue;
      }
      const double scale = std::max(std::abs(it->second), 1e-300);
      if (std::abs(row.value - it->second) > golden_tol * scale) {
        mismatches += fmt::format("{}: {} vs {}; ", row.key, row.value, it->second);
      }
    }
    check(res, fmt::format("matches golden values within {} relative", golden_tol), mismatches.empty(), mismatches);
  }
  return res;
}

}  // namespace

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"train", "kernel", "hessian", "assumptions", "vector", "limit", "bounds"};
  return names;
}

CommandResult run_command(const std::string& name, const Json& config, const fs::path& out_dir,
                          std::optional<std::uint64_t> seed_override) {
  fs::create_directories(out_dir);
  if (name == "train") return cmd_train(config, out_dir, seed_override);
  if (name == "kernel") return cmd_kernel(config, out_dir, seed_override);
  if (name == "hessian") return cmd_hessian(config, out_dir, seed_override);
  if (name == "assumptions") return cmd_assumptions(config, out_dir, seed_override);
  if (name == "vector") return cmd_vector(config, out_dir, seed_override);
  if (name == "limit") return cmd_limit(config, out_dir, seed_override);
  if (name == "bounds") return cmd_bounds(config, out_dir, seed_override);
  throw ConfigError(fmt::format("unknown subcommand '{}'", name));
}

}  // namespace ntklab::cli
