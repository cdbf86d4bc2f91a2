// SPDX-License-Identifier: Apache-2.0

#include "absvit/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "absvit/abs_hierarchy.hpp"
#include "absvit/checkpoint.hpp"
#include "absvit/config.hpp"
#include "absvit/experiments.hpp"
#include "absvit/selftest.hpp"
#include "absvit/sparse_coding.hpp"
#include "absvit/train.hpp"

namespace absvit::cli {

namespace {

namespace fs = std::filesystem;

struct Flags {
  std::string config, checkpoint, out, td_mode, prior = "learned", image = "composite:0:1:0";
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::size_t n = 0, fit = 256;
  std::optional<int> class_a, class_b;
  bool inject_fault = false, sweep = false;
};

std::string fmt_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Writes to the output stream and, when open, a log file.
struct Logger {
  std::ostream& out;
  std::ofstream file;
  void operator()(const std::string& line) {
    out << line << "\n" << std::flush;
    if (file) file << line << "\n" << std::flush;
  }
};

fs::path out_dir(const Flags& f, const fs::path& fallback) {
  const fs::path dir = f.out.empty() ? fallback : fs::path(f.out);
  fs::create_directories(dir);
  return dir;
}

struct Loaded {
  cfg::RunConfig config;
  model::ParamMap<float> params;
};

Loaded load_model(const Flags& f) {
  if (f.checkpoint.empty()) throw cfg::ConfigError("--checkpoint is required");
  auto ck = ckpt::load<float>(f.checkpoint);
  if (!f.td_mode.empty()) ck.config.model.td_mode = attn::parse_td_mode(f.td_mode);
  return {ck.config, std::move(ck.params)};
}

std::pair<double, model::PriorSpec> resolve_prior(const Flags& f, const Loaded& m) {
  const auto choice = exp::PriorChoice::parse(f.prior);
  if (choice.kind == exp::PriorChoice::Kind::class_prototype && choice.class_id >= m.config.model.classes) {
    throw cfg::ConfigError("--prior class id " + std::to_string(choice.class_id) + " is out of range");
  }
  return {choice.effective_alpha(f.alpha.value_or(m.config.model.alpha)), choice.resolve(m.params)};
}

void write_norm_outputs(const fs::path& dir, const std::string& stem, const exp::NormMap& map) {
  exp::write_pgm((dir / (stem + ".pgm")).string(), map.values, map.rows, map.cols);
  exp::write_norm_csv((dir / (stem + ".csv")).string(), map);
}

int cmd_selftest(const Flags& f, std::ostream& out) {
  selftest::Options opts;
  if (f.inject_fault) opts.fault_decoder_bias = 0.5;
  const auto report = selftest::run_all(opts, [&](const std::string& line) { out << line << "\n" << std::flush; });
  out << "event=selftest checks=" << report.lines.size() << " failed=" << report.failures
      << " fault_injected=" << (f.inject_fault ? "true" : "false") << "\n";
  return report.failures == 0 ? kOk : kInvariantFailure;
}

int cmd_train(const Flags& f, std::ostream& out) {
  cfg::RunConfig config = f.config.empty() ? cfg::RunConfig{} : cfg::RunConfig::load(f.config);
  if (f.seed) config.train.seed = *f.seed;
  if (f.epochs) config.train.epochs = *f.epochs;
  if (!f.td_mode.empty()) config.model.td_mode = attn::parse_td_mode(f.td_mode);
  if (!f.out.empty()) config.out_dir = f.out;
  config.validate();
  const fs::path dir = out_dir(f, config.out_dir);
  config.save((dir / "config.json").string());

  Logger log{out, std::ofstream(dir / "train.log", std::ios::trunc)};
  const auto result = train::train(config, std::ref(log));

  std::ofstream csv(dir / "metrics.csv", std::ios::trunc);
  csv << "epoch,loss,ce,recon,prior_loss,train_acc,test_acc,lr,seconds\n";
  for (const auto& r : result.history) {
    csv << r.epoch << "," << fmt_num(r.loss) << "," << fmt_num(r.ce) << "," << fmt_num(r.recon) << "," << fmt_num(r.prior_loss) << ","
        << fmt_num(r.train_accuracy) << "," << fmt_num(r.test_accuracy) << "," << fmt_num(r.lr) << "," << fmt_num(r.seconds) << "\n";
  }
  const std::string ck = (dir / "checkpoint.json").string();
  ckpt::save(ck, config, result.params);
  log("event=checkpoint path=" + ck + " blob=" + ckpt::blob_path_for(ck));
  return kOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  const auto m = load_model(f);
  const auto [alpha, prior] = resolve_prior(f, m);
  const std::size_t n = f.n ? f.n : static_cast<std::size_t>(m.config.train.test_size);
  const auto test = data::make_dataset(data::Split::test, n, m.config.data);
  train::Predictor pred(m.config.model, m.params);
  const double acc = train::accuracy(pred, test, alpha, prior);
  const std::string line = "event=eval split=test n=" + std::to_string(n) + " alpha=" + fmt_num(alpha) + " prior=" +
                           f.prior + " td_mode=" + attn::td_mode_name(m.config.model.td_mode) +
                           " accuracy=" + fmt_num(acc);
  out << line << "\n";
  if (!f.out.empty()) {
    std::ofstream csv(out_dir(f, f.out) / "eval.csv", std::ios::trunc);
    csv << "split,n,alpha,prior,td_mode,accuracy\ntest," << n << "," << fmt_num(alpha) << "," << f.prior << ","
        << attn::td_mode_name(m.config.model.td_mode) << "," << fmt_num(acc) << "\n";
  }
  return kOk;
}

int cmd_steer(const Flags& f, std::ostream& out, std::ostream& err) {
  const auto m = load_model(f);
  std::optional<std::pair<int, int>> classes;
  if (f.class_a.has_value() != f.class_b.has_value()) throw cfg::ConfigError("--class-a and --class-b go together");
  if (f.class_a) {
    for (int c : {*f.class_a, *f.class_b})
      if (c < 0 || c >= m.config.model.classes) throw cfg::ConfigError("class id " + std::to_string(c) + " out of range");
    if (*f.class_a == *f.class_b) err << "warning: --class-a equals --class-b; both cues select the same class\n";
    classes = std::pair{*f.class_a, *f.class_b};
  }
  const double alpha = f.alpha.value_or(10.0);
  const std::size_t n = f.n ? f.n : 200;
  const fs::path dir = out_dir(f, fs::path(f.checkpoint).parent_path() / "steer");

  train::Predictor pred(m.config.model, m.params, 64, model::TraceLevel::full);
  const auto rep = exp::steer(pred, m.config.data, n, alpha, classes);
  {
    std::ofstream csv(dir / "steer.csv", std::ios::trunc);
    csv << "index,left_class,right_class,cued_side,cued_class,other_class,gap_base,gap_steer,success\n";
    for (const auto& r : rep.rows) {
      csv << r.index << "," << r.left_class << "," << r.right_class << "," << data::side_name(r.cued) << ","
          << r.cued_class << "," << r.other_class << "," << fmt_num(r.gap_base) << "," << fmt_num(r.gap_steer) << ","
          << (r.success ? 1 : 0) << "\n";
    }
  }
  // Token-norm maps of the first composite under each condition.
  const auto first = exp::steer_composite(0, m.config.data, classes);
  const auto H = static_cast<std::size_t>(m.config.data.height), W = static_cast<std::size_t>(m.config.data.width);
  const num::Tensor<float> image({1, H, W}, first.image.pixels);
  write_norm_outputs(dir, "norm_base", exp::token_norm_map(pred, image, 0.0, {}));
  for (auto side : {data::Side::left, data::Side::right}) {
    const auto prior = model::PriorSpec::external(exp::prototype(m.params, first.class_on(side)));
    write_norm_outputs(dir, std::string("norm_cue_") + data::side_name(side),
                       exp::token_norm_map(pred, image, alpha, prior));
  }
  out << "event=steer n=" << n << " alpha=" << fmt_num(alpha) << " success_left=" << fmt_num(rep.success_left)
      << " success_right=" << fmt_num(rep.success_right) << " argmax_cued_base=" << fmt_num(rep.argmax_cued_base)
      << " argmax_cued_steer=" << fmt_num(rep.argmax_cued_steer) << " out=" << dir.string() << "\n";

  if (f.sweep) {
    const auto sweep = exp::alpha_sweep(pred, m.config.data, n, {0.0, 1.0, 5.0, 10.0});
    std::ofstream csv(dir / "sweep.csv", std::ios::trunc);
    csv << "alpha,cued_mass,cued_mass_left,cued_mass_right\n";
    for (const auto& p : sweep) {
      csv << fmt_num(p.alpha) << "," << fmt_num(p.cued_mass) << "," << fmt_num(p.cued_mass_left) << "," << fmt_num(p.cued_mass_right)
          << "\n";
      out << "event=sweep alpha=" << fmt_num(p.alpha) << " cued_mass=" << fmt_num(p.cued_mass) << "\n";
    }
    out << "event=sweep_summary non_decreasing=" << (exp::non_decreasing(sweep, 0.01) ? "true" : "false") << "\n";
  }
  return kOk;
}

int cmd_probe(const Flags& f, std::ostream& out) {
  const auto m = load_model(f);
  const double alpha = f.alpha.value_or(m.config.model.alpha);
  const std::size_t n = f.n ? f.n : 100;
  const fs::path dir = out_dir(f, fs::path(f.checkpoint).parent_path() / "probe");
  train::Predictor pred(m.config.model, m.params, 64, model::TraceLevel::full);
  const auto rep = exp::probe(pred, m.config.data, f.fit, n, alpha);

  std::ofstream csv(dir / "probe.csv", std::ios::trunc);
  csv << "signal,all,foreground,background\n";
  for (auto [name, e] : {std::pair{"bu", rep.bu}, std::pair{"td", rep.td}, std::pair{"bu_plus_td", rep.combined}}) {
    csv << name << "," << fmt_num(e.all) << "," << fmt_num(e.foreground) << "," << fmt_num(e.background) << "\n";
    out << "event=probe signal=" << name << " mse=" << fmt_num(e.all) << " mse_fg=" << fmt_num(e.foreground)
        << " mse_bg=" << fmt_num(e.background) << "\n";
  }
  const char* names[] = {"original", "recon_bu", "recon_td", "recon_bu_plus_td"};
  for (std::size_t i = 0; i < rep.example.size(); ++i) {
    const std::vector<double> px(rep.example[i].begin(), rep.example[i].end());
    exp::write_pgm((dir / (std::string(names[i]) + ".pgm")).string(), px, m.config.data.height, m.config.data.width);
  }
  out << "event=probe_summary alpha=" << fmt_num(alpha) << " fit_images=" << rep.fit_images
      << " eval_images=" << rep.eval_images << " fit_mse=" << fmt_num(rep.fit_error)
      << " bg_ratio=" << fmt_num(rep.combined.background / rep.bu.background)
      << " fg_ratio=" << fmt_num(rep.combined.foreground / rep.bu.foreground) << " out=" << dir.string() << "\n";
  return kOk;
}

int cmd_export_attn(const Flags& f, std::ostream& out) {
  const auto m = load_model(f);
  const auto [alpha, prior] = resolve_prior(f, m);
  const auto image = exp::parse_image_spec(f.image, m.config.data);
  const fs::path dir = out_dir(f, fs::path(f.checkpoint).parent_path() / "attn");
  train::Predictor pred(m.config.model, m.params, 1, model::TraceLevel::full);
  const auto map = exp::token_norm_map(pred, image, alpha, prior);
  write_norm_outputs(dir, "attn", map);
  out << "event=export_attn image=" << f.image << " prior=" << f.prior << " alpha=" << fmt_num(alpha)
      << " rows=" << map.rows << " cols=" << map.cols << " pgm=" << (dir / "attn.pgm").string()
      << " csv=" << (dir / "attn.csv").string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Top-down attention ViT on synthetic shapes"};
  app.require_subcommand(1);
  Flags f;

  auto add_model_flags = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", f.checkpoint, "checkpoint manifest (.json)")->required();
    cmd->add_option("--td-mode", f.td_mode, "override the top-down mode")->check(CLI::IsMember({"value_only", "qkv"}));
    cmd->add_option("--out", f.out, "output directory");
  };
  auto add_alpha = [&](CLI::App* cmd) { cmd->add_option("--alpha", f.alpha, "top-down scale"); };
  auto add_prior = [&](CLI::App* cmd) {
    cmd->add_option("--prior", f.prior, "learned, class:ID or none");
  };

  auto* selftest = app.add_subcommand("selftest", "run every invariant check");
  selftest->add_flag("--inject-fault", f.inject_fault, "add a decoder bias (negative control)");

  auto* train = app.add_subcommand("train", "train and write a checkpoint");
  train->add_option("--config", f.config, "run configuration (.json)");
  train->add_option("--seed", f.seed, "override the training seed");
  train->add_option("--epochs", f.epochs, "override the epoch count");
  train->add_option("--out", f.out, "output directory (overrides out_dir)");
  train->add_option("--td-mode", f.td_mode, "top-down mode")->check(CLI::IsMember({"value_only", "qkv"}));

  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  add_model_flags(eval);
  add_alpha(eval);
  add_prior(eval);
  eval->add_option("--n", f.n, "test images (default: config test_size)");

  auto* steer = app.add_subcommand("steer", "prior-steered inference on two-object composites");
  add_model_flags(steer);
  add_alpha(steer);
  steer->add_option("--n", f.n, "composites (default 200)");
  steer->add_option("--class-a", f.class_a, "left class for every composite");
  steer->add_option("--class-b", f.class_b, "right class for every composite");
  steer->add_flag("--sweep", f.sweep, "also sweep alpha over {0, 1, 5, 10}");

  auto* probe = app.add_subcommand("probe", "linear decoding probe of the block-1 signals");
  add_model_flags(probe);
  add_alpha(probe);
  probe->add_option("--n", f.n, "evaluation composites (default 100)");
  probe->add_option("--fit", f.fit, "single-object images for the least-squares fit");

  auto* exp_attn = app.add_subcommand("export-attn", "token-norm map of one image");
  add_model_flags(exp_attn);
  add_alpha(exp_attn);
  add_prior(exp_attn);
  exp_attn->add_option("--image", f.image, "single:CLASS:SEED or composite:A:B:SEED");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (selftest->parsed()) return cmd_selftest(f, out);
    if (train->parsed()) return cmd_train(f, out);
    if (eval->parsed()) return cmd_eval(f, out);
    if (steer->parsed()) return cmd_steer(f, out, err);
    if (probe->parsed()) return cmd_probe(f, out);
    if (exp_attn->parsed()) return cmd_export_attn(f, out);
  } catch (const num::NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const sparse::ConvergenceError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const abs::DivergenceError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const cfg::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ckpt::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    err << "file error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return kConfigError;
}

}  // namespace absvit::cli
