// ccr: synthesize data, train, evaluate, localize and run ablation sweeps.
//
// Every subcommand accepts --config FILE plus one --KEY VALUE flag per config
// key; flags override the file. CCR_DATA_ROOT, when set, is the directory
// feature paths in manifests are resolved against.

#include "ccr/commands.hpp"
#include "ccr/errors.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <map>
#include <string>

namespace {

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key = value run configuration file");
  for (const auto& k : ccr::RunConfig::keys()) {
    std::string help = k.doc + " (default: " + (k.default_value.empty() ? "unset" : k.default_value) + ")";
    cmd->add_option_function<std::string>(
        "--" + k.name, [&flags, name = k.name](const std::string& v) { flags.overrides[name] = v; },
        help);
  }
}

ccr::RunConfig resolve(const ConfigFlags& flags) {
  ccr::RunConfig cfg = flags.config_path.empty() ? ccr::RunConfig{} : ccr::RunConfig::load(flags.config_path);
  for (const auto& [k, v] : flags.overrides) cfg.set(k, v);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual cross-modality reasoning for weakly supervised moment localization"};
  app.require_subcommand(1);

  ConfigFlags synth_flags, train_flags, eval_flags, localize_flags, ablate_flags, config_flags;
  auto* synth = app.add_subcommand("synth", "write a synthetic manifest and feature files to out_dir");
  add_config_flags(synth, synth_flags);
  auto* train = app.add_subcommand("train", "train on a manifest; writes checkpoint and logs to out_dir");
  add_config_flags(train, train_flags);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest; writes reports to out_dir");
  add_config_flags(eval, eval_flags);
  auto* localize = app.add_subcommand("localize", "rank segments of one video for one query");
  add_config_flags(localize, localize_flags);
  std::string features, query;
  double duration = 0.0;
  localize->add_option("--features", features, "FMAT feature file")->required();
  localize->add_option("--query", query, "query text")->required();
  localize->add_option("--duration", duration, "video duration in seconds (default: frame count)");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the strategy x aggregator grid");
  add_config_flags(ablate, ablate_flags);
  auto* show = app.add_subcommand("config", "print every config key with its resolved value");
  add_config_flags(show, config_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ccr::kExitOk : ccr::kExitConfig;
  }

  try {
    if (synth->parsed()) {
      ccr::cmd_synth(resolve(synth_flags), std::cerr);
    } else if (train->parsed()) {
      ccr::cmd_train(resolve(train_flags), std::cerr);
    } else if (eval->parsed()) {
      std::cout << ccr::format_report(ccr::cmd_eval(resolve(eval_flags), std::cerr).report);
    } else if (localize->parsed()) {
      const ccr::RunConfig cfg = resolve(localize_flags);
      if (duration <= 0.0) duration = static_cast<double>(ccr::load_features(features).frame_count());
      const ccr::Prediction p = ccr::cmd_localize(cfg, features, query, duration);
      nlohmann::json segments = nlohmann::json::array();
      for (const auto& r : p.ranked) {
        segments.push_back({{"start", r.segment.start}, {"end", r.segment.end}, {"score", r.score}});
      }
      std::cout << nlohmann::json{{"video_id", p.video_id}, {"segments", segments}}.dump(2) << '\n';
    } else if (ablate->parsed()) {
      ccr::cmd_ablate(resolve(ablate_flags), std::cerr);
    } else if (show->parsed()) {
      const ccr::RunConfig cfg = resolve(config_flags);
      cfg.validate();
      std::cout << cfg.dump();
    }
  } catch (const ccr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return ccr::kExitConfig;
  } catch (const ccr::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return ccr::kExitNumerical;
  } catch (const ccr::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return ccr::kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return ccr::kExitData;
  }
  return ccr::kExitOk;
}
