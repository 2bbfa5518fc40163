// cual: run experiments, sweeps and CEMB utilities from the command line.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cual/cual.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> budget;
  std::optional<std::string> out;
  std::optional<std::string> synthetic;
  std::optional<std::string> dataset;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_path, "key=value or .json config file");
  app->add_option("--seed", f.seed, "root seed");
  app->add_option("--strategy", f.strategy, "strategy name, e.g. CUAL, CUAL-only-AL, ER-Ent");
  app->add_option("--budget", f.budget, "label budget as a fraction of each task pool");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--synthetic", f.synthetic, "synthetic dataset K,D,N,SEP[,LATENT]");
  app->add_option("--dataset", f.dataset, "labeled CEMB file");
  app->add_option("--set", f.overrides, "extra key=value overrides")->take_all();
}

// Defaults < config file < --set < dedicated flags.
cual::RunConfig resolve(const CommonFlags& f) {
  cual::RunConfig cfg;
  if (!f.config_path.empty()) cfg = cual::parse_config_file(f.config_path, cfg);
  for (const auto& o : f.overrides) cual::apply_override(cfg, o);
  if (f.seed) cfg.seed = *f.seed;
  if (f.strategy) cfg.strategy = *f.strategy;
  if (f.budget) cfg.budget_fraction = *f.budget;
  if (f.out) cfg.out = *f.out;
  if (f.synthetic) {
    cfg.synthetic = *f.synthetic;
    cfg.dataset.clear();
  }
  if (f.dataset) {
    cfg.dataset = *f.dataset;
    cfg.synthetic.clear();
  }
  cfg.validate();
  return cfg;
}

int print_error(const std::exception& e) {
  cual::report_error(std::cerr, e);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual active learning over embedding streams"};
  app.require_subcommand(1);

  CommonFlags run_flags;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, run_flags);

  CommonFlags sweep_flags;
  std::string axis = "strategy";
  std::vector<std::string> values;
  auto* sweep = app.add_subcommand("sweep", "run one experiment per value of an axis");
  add_common(sweep, sweep_flags);
  sweep->add_option("--axis", axis, "strategy or budget")->check(CLI::IsMember({"strategy", "budget"}));
  sweep->add_option("--values", values, "axis values")->delimiter(',');

  std::string synth_spec;
  std::uint64_t synth_seed = 0;
  double synth_noise = 0.1;
  std::string synth_out;
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic labeled dataset as CEMB");
  gen->add_option("--synthetic", synth_spec, "K,D,N,SEP[,LATENT]")->required();
  gen->add_option("--seed", synth_seed, "root seed");
  gen->add_option("--noise", synth_noise, "isotropic noise relative to the latent spread");
  gen->add_option("--out", synth_out, "output CEMB path")->required();

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "print a CEMB header");
  inspect->add_option("file", inspect_path, "CEMB file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cual::cmd_run(resolve(run_flags));
    if (sweep->parsed()) {
      cual::RunConfig cfg = resolve(sweep_flags);
      return cual::cmd_sweep(cfg, cual::parse_sweep_axis(axis), values);
    }
    if (gen->parsed()) {
      cual::RunConfig cfg;
      cfg.synthetic = synth_spec;
      cfg.synthetic_noise = synth_noise;
      cfg.seed = synth_seed;
      const auto set = cual::generate_synthetic(cfg.synthetic_spec());
      cual::write_embeddings(set, synth_out);
      std::cout << "wrote " << set.size() << " x " << set.dim() << " to " << synth_out << "\n";
      return 0;
    }
    if (inspect->parsed()) {
      const auto bytes = cual::read_file_bytes(inspect_path);
      const auto h = cual::decode_cemb_header(bytes);
      nlohmann::ordered_json j;
      j["path"] = inspect_path;
      j["version"] = h.version;
      j["rows"] = h.rows;
      j["dim"] = h.dim;
      j["has_labels"] = h.has_labels;
      j["file_bytes"] = bytes.size();
      std::cout << j.dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    return print_error(e);
  }
  return 0;
}
