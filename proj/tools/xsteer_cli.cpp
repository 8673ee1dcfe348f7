#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <functional>

#include "xsteer/pipeline.hpp"

using namespace xsteer;

int main(int argc, char** argv) {
  CLI::App app{"Cross-architecture activation steering on a toy teacher/student pair"};
  app.require_subcommand(1);

  struct Options {
    std::string config;
    std::string out;
    std::uint64_t seed = 42;
  } opts;

  const std::pair<const char*, const char*> stages[] = {
      {"corpus-gen", "generate the verbal and math corpora"},
      {"train-pair", "train the teacher and student on the shared corpus"},
      {"extract", "cache residual-stream activations at the grid layers"},
      {"fit-mappers", "fit ridge, lasso and permutation mappers per layer pair"},
      {"sweep", "run the 16 x 8 intervention sweep on both domains"},
      {"dissociate", "cross-domain transfer of the affine mappers"},
      {"report", "summarize the run into report.md"},
      {"all", "run every stage in order"},
  };
  const std::function<void(const pipeline::RunConfig&)> handlers[] = {
      pipeline::cmd_corpus_gen, pipeline::cmd_train_pair, pipeline::cmd_extract, pipeline::cmd_fit_mappers,
      pipeline::cmd_sweep,      pipeline::cmd_dissociate, pipeline::cmd_report,  pipeline::cmd_all,
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "run_config.json to start from")->check(CLI::ExistingFile);
    sub->add_option("--out", opts.out, "output directory (default runs/seed<seed>)");
    sub->add_option("--seed", opts.seed, "global seed")->capture_default_str();
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    pipeline::RunConfig cfg = opts.config.empty() ? pipeline::default_config(opts.seed)
                                                  : pipeline::load_config(opts.config);
    bool seed_given = false;
    for (CLI::App* sub : subs) seed_given |= sub->parsed() && sub->count("--seed") > 0;
    if (seed_given && !opts.config.empty()) {
      cfg.seed = opts.seed;
      cfg.out_dir = "runs/seed" + std::to_string(opts.seed);
    }
    if (!opts.out.empty()) cfg.out_dir = opts.out;
    cfg.resolve();
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (subs[i]->parsed()) handlers[i](cfg);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
