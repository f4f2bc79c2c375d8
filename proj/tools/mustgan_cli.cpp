// mustgan: data generation, two-phase training, sweeping, synthesis and evaluation.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort, 5 I/O error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "mustgan/mustgan.hpp"

namespace fs = std::filesystem;
using namespace mustgan;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4, kIo = 5 };

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log(const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); }

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

/// Refuses to reuse a non-empty output location unless forced; with force it is cleared.
void prepare_output(const fs::path& out, bool force) {
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out))) {
    if (!force) throw IoError(out.string() + ": output exists and is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
}

std::string checkpoint_dtype(const fs::path& ckpt) {
  return read_manifest(ckpt).at("topology").at("dtype").get<std::string>();
}

PhantomDataset load_split(const fs::path& dir, const std::string& split) {
  auto ds = read_dataset(dir, split);
  if (ds.samples.empty()) throw DataError(dir.string() + ": split '" + split + "' is empty");
  return ds;
}

std::vector<const PhantomSample*> all_samples(const PhantomDataset& ds) {
  std::vector<const PhantomSample*> out;
  for (const auto& s : ds.samples) out.push_back(&s);
  return out;
}

void check_data_matches(const RunConfig& cfg, const PhantomDataset& ds) {
  if (ds.spec.contrasts != cfg.data.contrasts)
    throw DataError("dataset contrasts do not match the config's data.contrasts");
  if (ds.spec.image_size % cfg.generator.required_multiple() != 0)
    throw DataError("dataset image size " + std::to_string(ds.spec.image_size) + " is not a multiple of " +
                    std::to_string(cfg.generator.required_multiple()));
}

std::string epoch_line(const char* phase, std::size_t e, std::size_t total, double s) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s epoch %zu/%zu (%.1f s)", phase, e, total, s);
  return buf;
}

// ---- commands --------------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const nlohmann::json& echo, const fs::path& out, bool force, bool pgm) {
  prepare_output(out, force);
  auto ds = generate_phantoms(cfg.data, cfg.seed);
  assign_splits(ds, cfg.splits);
  write_dataset(ds, out, pgm, echo);
  log("wrote " + std::to_string(ds.samples.size()) + " samples to " + out.string());
  return kOk;
}

template <class T>
int cmd_train_streams(const RunConfig& cfg, const nlohmann::json& echo, const fs::path& data, const fs::path& out,
                      bool force) {
  prepare_output(out, force);
  const auto ds = load_split(data, "train");
  check_data_matches(cfg, ds);
  const auto roles = resolve_roles(ds.spec, cfg.roles);
  const auto train = make_training_set<T>(all_samples(ds), roles);

  MultiStreamModel<T> model(cfg.K(), cfg.generator, cfg.discriminator, cfg.seed);
  model.roles() = role_names(ds.spec, roles);
  StreamTrainer<T> trainer(model, cfg.train_streams);
  LossLog losses;
  trainer.run(train, &losses, 1, [&](std::size_t e, double s) {
    log(epoch_line("streams", e, cfg.train_streams.epochs, s));
  });
  save_checkpoint(out, model,
                  CheckpointMeta{"streams", cfg.train_streams.epochs, echo,
                                 {{"seed", cfg.train_streams.seed}, {"next_epoch", cfg.train_streams.epochs + 1}}},
                  trainer.optimizers());
  write_text(out / "loss_log.csv", losses.to_csv());
  log("wrote stream checkpoint " + out.string());
  return kOk;
}

template <class T>
int cmd_train_joint(const RunConfig& cfg, const nlohmann::json& echo, const fs::path& data, const fs::path& streams,
                    std::size_t fusion, std::size_t epochs, const fs::path& out, bool force) {
  if (fusion == 0) fusion = cfg.fusion_i;
  if (fusion == 0) throw ConfigError("train_joint.fusion_i", "no fusion position (pass --fusion or set it in the config)");
  if (fusion >= cfg.generator.total_layers())
    throw ConfigError("--fusion", "must lie in 1.." + std::to_string(cfg.generator.total_layers() - 1));
  prepare_output(out, force);
  const auto ds = load_split(data, "train");
  check_data_matches(cfg, ds);

  auto model = load_model<T>(streams);
  const auto roles = resolve_roles(ds.spec, model.roles());
  if (model.K() != roles.sources.size()) throw DataError("stream checkpoint K does not match the dataset roles");
  model.detach_joint();
  model.attach_joint(fusion, cfg.train_joint.seed);

  TrainConfig tc = cfg.train_joint;
  if (epochs) tc.epochs = epochs;
  JointTrainer<T> trainer(model, tc, cfg.finetune_lr_ratio);
  LossLog losses;
  trainer.run(make_training_set<T>(all_samples(ds), roles), &losses, 1,
              [&](std::size_t e, double s) { log(epoch_line("joint", e, tc.epochs, s)); });
  auto meta_echo = echo;
  meta_echo["train_joint"]["fusion_i"] = fusion;
  meta_echo["train_joint"]["epochs"] = tc.epochs;
  save_checkpoint(out, model,
                  CheckpointMeta{"joint", tc.epochs, meta_echo, {{"seed", tc.seed}, {"next_epoch", tc.epochs + 1}}},
                  trainer.optimizers());
  write_text(out / "loss_log.csv", losses.to_csv());
  log("wrote joint checkpoint " + out.string());
  return kOk;
}

template <class T>
int cmd_sweep(const RunConfig& cfg, const nlohmann::json& echo, const fs::path& data, const fs::path& streams,
              const fs::path& out, std::size_t parallel, bool force) {
  prepare_output(out, force);
  const auto train_ds = load_split(data, "train");
  const auto val_ds = load_split(data, "val");
  check_data_matches(cfg, train_ds);
  const auto model = load_model<T>(streams);
  const auto roles = resolve_roles(train_ds.spec, model.roles());

  SweepOptions opt;
  opt.parallel = parallel ? parallel : cfg.sweep_parallel;
  opt.finetune_lr_ratio = cfg.finetune_lr_ratio;
  opt.on_cell = [](const SweepCell& c) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "cell i=%zu epochs=%zu: %s psnr %.4f ssim %.4f", c.fusion_i, c.epochs,
                  c.status.c_str(), c.val_psnr, c.val_ssim);
    log(buf);
  };
  auto res = run_sweep(model, make_training_set<T>(all_samples(train_ds), roles), all_samples(val_ds), roles, cfg.sweep,
                       cfg.train_joint, opt);
  const auto sens = sensitivity(res.report, model.generator_spec(), model.K());
  fs::create_directories(out);
  auto j = to_json(res.report, sens);
  j["config"] = echo;
  write_text(out / "sweep.json", j.dump(2) + "\n");
  write_text(out / "sweep.csv", res.report.to_csv());
  write_text(out / "summary.txt", summary_text(res.report, sens));
  if (res.best_model) {
    auto best_echo = echo;
    best_echo["train_joint"]["fusion_i"] = res.report.selected->fusion_i;
    best_echo["train_joint"]["epochs"] = res.report.selected->epochs;
    save_checkpoint(out / "best", *res.best_model,
                    CheckpointMeta{"joint", res.report.selected->epochs, best_echo,
                                   {{"seed", cfg.train_joint.seed}, {"next_epoch", res.report.selected->epochs + 1}}});
  }
  std::fputs(summary_text(res.report, sens).c_str(), stdout);
  return kOk;
}

template <class T>
int cmd_synth(const fs::path& ckpt, const fs::path& input, const fs::path& out, const std::string& which) {
  const auto model = load_model<T>(ckpt);
  if (model.roles().sources.empty()) throw DataError(ckpt.string() + ": checkpoint records no contrast roles");
  if (which == "mustgan" && !model.has_joint())
    throw DataError(ckpt.string() + ": checkpoint has no joint network (pass --stream to run a single stream)");
  std::vector<Tensor<T>> sources;
  for (const auto& name : model.roles().sources) {
    const auto f = input / (name + ".mtns");
    if (!fs::exists(f)) throw DataError(f.string() + ": missing source image");
    try {
      sources.push_back(to_network<T>(read_mtns<double>(f)));
    } catch (const MtnsError& e) {
      throw DataError(std::string("corrupt source image ") + e.what());
    }
  }
  const auto y = which == "mustgan" ? synthesize(model, sources)
                                    : synthesize_stream(model, std::stoul(which.substr(6)), sources);
  const auto img = from_network(y);
  fs::create_directories(out);
  write_mtns(out / (model.roles().target + ".mtns"), img);
  write_pgm(out / (model.roles().target + ".pgm"), img);
  log("wrote " + (out / (model.roles().target + ".mtns")).string());
  return kOk;
}

struct LoadedModel {
  std::string name;
  std::variant<MultiStreamModel<float>, MultiStreamModel<double>> model;
};

int cmd_eval(const std::vector<std::string>& models, const fs::path& data, const std::string& split, const fs::path& out,
             bool with_streams, bool force) {
  prepare_output(out, force);
  const auto ds = load_split(data, split);
  std::vector<std::unique_ptr<LoadedModel>> loaded;
  std::vector<std::pair<std::string, Synthesizer>> synths;
  std::optional<RoleIndices> roles;
  auto set_roles = [&](const ContrastRoles& r) {
    const auto ri = resolve_roles(ds.spec, r);
    if (roles && (roles->sources != ri.sources || roles->target != ri.target))
      throw DataError("models disagree on contrast roles");
    roles = ri;
  };
  for (const auto& m : models) {
    if (m == "@ground-truth") continue;
    const fs::path p(m);
    auto lm = std::make_unique<LoadedModel>(LoadedModel{p.filename().string(), MultiStreamModel<float>(1, {}, {}, 0)});
    if (checkpoint_dtype(p) == "f64")
      lm->model.emplace<MultiStreamModel<double>>(load_model<double>(p));
    else
      lm->model.emplace<MultiStreamModel<float>>(load_model<float>(p));
    std::visit([&](const auto& mm) { set_roles(mm.roles()); }, lm->model);
    loaded.push_back(std::move(lm));
  }
  if (!roles) roles = resolve_roles(ds.spec, {});
  for (const auto& m : models)
    if (m == "@ground-truth") synths.emplace_back("ground-truth", ground_truth_synthesizer(*roles));
  for (const auto& lm : loaded)
    std::visit(
        [&](const auto& mm) {
          if (mm.has_joint()) synths.emplace_back(lm->name, model_synthesizer(mm, *roles, "mustgan"));
          if (with_streams || !mm.has_joint())
            for (std::size_t id = 1; id <= mm.K() + 1; ++id) {
              const std::string s = "stream" + std::to_string(id);
              synths.emplace_back(lm->name + ":" + s, model_synthesizer(mm, *roles, s));
            }
        },
        lm->model);
  const auto rep = evaluate(synths, all_samples(ds), *roles, split);
  fs::create_directories(out);
  write_text(out / "report.json", rep.to_json().dump(2) + "\n");
  write_text(out / "report.txt", rep.to_table());
  std::fputs(rep.to_table().c_str(), stdout);
  return kOk;
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    log(std::string("config error: ") + e.what());
    return kConfig;
  } catch (const NumericAbort& e) {
    log(std::string("numeric abort: ") + e.what());
    return kNumeric;
  } catch (const DataError& e) {
    log(std::string("data error: ") + e.what());
    return kData;
  } catch (const CheckpointError& e) {
    log(std::string("checkpoint error: ") + e.what());
    return kIo;
  } catch (const IoError& e) {
    log(std::string("i/o error: ") + e.what());
    return kIo;
  } catch (const MtnsError& e) {
    log(std::string("i/o error: ") + e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    log(std::string("i/o error: ") + e.what());
    return kIo;
  } catch (const std::invalid_argument& e) {
    log(std::string("config error: ") + e.what());
    return kConfig;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return kIo;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mustgan: multi-stream adversarial image synthesis on phantom data"};
  app.require_subcommand(1);

  std::string config, out, data, streams, model, input, split = "test", models, stream;
  std::size_t fusion = 0, epochs = 0, parallel = 0;
  bool force = false, pgm = false, with_streams = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a phantom dataset");
  gen->add_option("--config", config, "RunConfig JSON")->required();
  gen->add_option("--out", out, "Dataset directory")->required();
  gen->add_flag("--force", force, "Overwrite a non-empty output directory");
  gen->add_flag("--pgm", pgm, "Also write PGM previews");

  auto* ts = app.add_subcommand("train-streams", "Phase 1: train the K+1 streams");
  ts->add_option("--config", config, "RunConfig JSON")->required();
  ts->add_option("--data", data, "Dataset directory from gen-data")->required();
  ts->add_option("--out", out, "Checkpoint directory")->required();
  ts->add_flag("--force", force, "Overwrite a non-empty output directory");

  auto* tj = app.add_subcommand("train-joint", "Phase 2: fuse at one position and train the joint network");
  tj->add_option("--config", config, "RunConfig JSON")->required();
  tj->add_option("--data", data, "Dataset directory from gen-data")->required();
  tj->add_option("--streams", streams, "Phase-1 checkpoint")->required();
  tj->add_option("--fusion", fusion, "Fusion position i (default: train_joint.fusion_i)");
  tj->add_option("--epochs", epochs, "Joint epochs (default: train_joint.epochs)");
  tj->add_option("--out", out, "Output directory")->required();
  tj->add_flag("--force", force, "Overwrite a non-empty output directory");

  auto* sw = app.add_subcommand("sweep", "Grid search over fusion position and epochs");
  sw->add_option("--config", config, "RunConfig JSON")->required();
  sw->add_option("--data", data, "Dataset directory from gen-data")->required();
  sw->add_option("--streams", streams, "Phase-1 checkpoint")->required();
  sw->add_option("--out", out, "Report directory")->required();
  sw->add_option("--parallel", parallel, "Fusion positions trained concurrently");
  sw->add_flag("--force", force, "Overwrite a non-empty output directory");

  auto* sy = app.add_subcommand("synth", "Synthesize the target contrast for one sample");
  sy->add_option("--model", model, "Checkpoint")->required();
  sy->add_option("--input", input, "Sample directory holding {contrast}.mtns")->required();
  sy->add_option("--out", out, "Output directory")->required();
  sy->add_option("--stream", stream, "Run stream k alone instead of the fused model");

  auto* ev = app.add_subcommand("eval", "Score checkpoints on a dataset split");
  ev->add_option("--models", models, "Comma-separated checkpoints; @ground-truth scores the target itself")->required();
  ev->add_option("--data", data, "Dataset directory from gen-data")->required();
  ev->add_option("--split", split, "Split to score (default test)")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", out, "Output directory")->required();
  ev->add_flag("--streams", with_streams, "Also score every stream of each checkpoint");
  ev->add_flag("--force", force, "Overwrite a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  return guarded([&]() -> int {
    std::optional<RunConfig> cfg;
    nlohmann::json echo;
    if (!config.empty()) {
      cfg = load_run_config(config);
      echo = to_json(*cfg);
    }
    const bool f64 = cfg && cfg->dtype == "f64";
    if (*gen) return cmd_gen_data(*cfg, echo, out, force, pgm);
    if (*ts) return f64 ? cmd_train_streams<double>(*cfg, echo, data, out, force)
                        : cmd_train_streams<float>(*cfg, echo, data, out, force);
    if (*tj) return f64 ? cmd_train_joint<double>(*cfg, echo, data, streams, fusion, epochs, out, force)
                        : cmd_train_joint<float>(*cfg, echo, data, streams, fusion, epochs, out, force);
    if (*sw) return f64 ? cmd_sweep<double>(*cfg, echo, data, streams, out, parallel, force)
                        : cmd_sweep<float>(*cfg, echo, data, streams, out, parallel, force);
    if (*sy) {
      const std::string which = stream.empty() ? "mustgan" : "stream" + stream;
      return checkpoint_dtype(model) == "f64" ? cmd_synth<double>(model, input, out, which)
                                              : cmd_synth<float>(model, input, out, which);
    }
    std::vector<std::string> list;
    std::stringstream ss(models);
    for (std::string item; std::getline(ss, item, ',');)
      if (!item.empty()) list.push_back(item);
    return cmd_eval(list, data, split, out, with_streams, force);
  });
}
