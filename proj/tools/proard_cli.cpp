// proard: command-line front end over proard::cli.
//
//   proard <command> [--config run.json] [--seed N] [--output-dir DIR]
//                    [--set /json/pointer=value]... [--checkpoint FILE] [--subnet CFG]
//
// Exit status: 0 success, 2 configuration or usage error, 1 any other failure.

#include <iostream>

#include <CLI11.hpp>

#include "proard/cli.hpp"

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::vector<std::string> overrides;
  proard::cli::CommandArgs args;
};

const char* describe(const std::string& command) {
  if (command == "train-teacher") return "TRADES-train the maximal network";
  if (command == "train-progressive") return "distill students phase by phase from the teacher";
  if (command == "train-random") return "distill randomly sampled students from the teacher";
  if (command == "eval-subnet") return "natural and robust accuracy of one subnet";
  if (command == "build-pred-dataset") return "evaluate sampled subnets for the predictor";
  if (command == "train-predictor") return "fit the accuracy-robustness predictor";
  if (command == "search") return "NSGA-II search under a FLOPs limit";
  return "evaluate sampled subnets into config,acc,rob,flops";
}

proard::cli::RunConfig load(const Options& o) {
  using proard::cli::json;
  json j = o.config_path.empty() ? json::object() : proard::cli::read_json_file(o.config_path);
  for (const auto& s : o.overrides) proard::cli::apply_override(j, s);
  if (o.seed) j["seed"] = *o.seed;
  if (!o.output_dir.empty()) j["output_dir"] = o.output_dir;
  return proard::cli::parse_config(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust once-for-all training, prediction and search"};
  app.require_subcommand(1);
  Options opt;
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : proard::cli::commands()) {
    CLI::App* sub = app.add_subcommand(name, describe(name));
    sub->add_option("-c,--config", opt.config_path, "run configuration (JSON)");
    sub->add_option("--seed", opt.seed, "root seed");
    sub->add_option("-o,--output-dir", opt.output_dir, "artifact directory");
    sub->add_option("--set", opt.overrides, "override: /json/pointer=value (repeatable)");
    if (name != "train-teacher" && name != "train-predictor" && name != "search")
      sub->add_option("--checkpoint", opt.args.checkpoint,
                      "input checkpoint, relative to the output directory");
    if (name == "eval-subnet")
      sub->add_option("--subnet", opt.args.subnet, "'max' or a config string");
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::string command;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;

  try {
    const auto summary = proard::cli::run(command, load(opt), opt.args);
    std::cout << summary.dump(2) << "\n";
    return 0;
  } catch (const proard::Error& e) {
    std::cerr << "error[" << proard::to_string(e.kind()) << "]: " << e.detail() << "\n";
    return proard::cli::exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error[runtime]: " << e.what() << "\n";
    return 1;
  }
}
