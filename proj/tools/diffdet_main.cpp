// diffdet command line: config-driven experiment stages plus the full
// pipeline. Exit codes: 0 success, 1 validation error, 2 stage failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "diffdet/config.hpp"
#include "diffdet/evaluate.hpp"
#include "diffdet/model_io.hpp"
#include "diffdet/pipeline.hpp"
#include "diffdet/report.hpp"
#include "diffdet/training.hpp"

namespace fs = std::filesystem;
using namespace diffdet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitStage = 2;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  f >> j;
  return j;
}

// Loads + validates the experiment config; prints errors and returns
// nullopt on failure.
std::optional<ExperimentConfig> load_config(const std::string& path,
                                            std::optional<std::uint64_t> seed_override) {
  nlohmann::json raw = path.empty() ? nlohmann::json::object() : read_json_file(path);
  if (seed_override) raw["seed"] = *seed_override;
  auto validated = validate_config(raw);
  if (!validated.ok()) {
    std::cerr << "config validation failed:\n";
    for (const auto& e : validated.errors) std::cerr << "  " << e << "\n";
    return std::nullopt;
  }
  return std::move(validated.config);
}

std::vector<std::string> taxonomy() {
  std::vector<std::string> names;
  for (int i = 0; i < data::kClassCount; ++i) names.emplace_back(data::class_name(i));
  return names;
}

int cmd_ddpm_train(const ExperimentConfig& cfg, const std::string& out) {
  const auto dataset = build_dataset(cfg);
  ddpm::UNetF net(cfg.unet);
  Rng rng(derive_seed(cfg.seed, "ddpm.init"));
  net.init(rng);
  std::vector<Image> images;
  for (const auto& item : dataset.train) images.push_back(item.image);
  const auto schedule = cfg.schedule.build();
  const auto result = train_denoiser(net, images, schedule, cfg.ddpm_train);
  save_ddpm_checkpoint(out, net, cfg.schedule,
                       {{"val_loss_initial", result.val_loss_initial},
                        {"val_loss_final", result.val_loss_final}});
  std::cout << "ddpm-train: " << result.loss_history.size() << " steps, val loss "
            << result.val_loss_initial << " -> " << result.val_loss_final << "\n"
            << "saved " << out << "\n";
  return kExitOk;
}

int cmd_feature_cache(const ExperimentConfig& cfg, const std::string& ddpm_path,
                      const std::string& data_dir, const std::string& out_dir) {
  LoadedDdpm ddpm = load_ddpm_checkpoint(ddpm_path);
  std::vector<std::pair<std::string, Image>> images;
  if (!data_dir.empty()) {
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(data_dir))
      if (e.is_regular_file() && e.path().extension() == ".pgm") paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths)
      images.emplace_back(fs::relative(p, data_dir).replace_extension("").generic_string(),
                          read_pgm(p.string()));
    if (images.empty()) throw std::runtime_error("no .pgm images under " + data_dir);
  } else {
    const auto dataset = build_dataset(cfg);
    for (const auto& item : dataset.train) images.emplace_back(item.id, item.image);
  }

  features::BuildCacheStats stats;
  auto manifest = features::build_cache(images, ddpm.net, ddpm.schedule, cfg.extraction,
                                        ddpm.file_hash, out_dir, &stats);
  features::save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
  std::cout << "feature-cache: extracted " << stats.extracted << ", kept " << stats.skipped
            << ", failed " << stats.failed_ids.size() << "\n";
  if (!stats.failed_ids.empty()) {
    for (const auto& id : stats.failed_ids) std::cerr << "  failed: " << id << "\n";
    return kExitStage;
  }
  return kExitOk;
}

int cmd_detect_train(const ExperimentConfig& cfg, const std::string& mode,
                     const std::string& init, const std::string& features_manifest,
                     const std::string& out) {
  const auto dataset = build_dataset(cfg);
  if (mode == "baseline") {
    det::DetectorF model(cfg.detector);
    Rng rng(derive_seed(cfg.seed, "detector.init"));
    model.init(rng);
    if (!init.empty()) {
      const auto start = load_detector_checkpoint(init);
      load_matching_params(model, start.raw);
    }
    const auto hist = train_detector(model, nullptr, {}, dataset.train, cfg.train_baseline,
                                     TrainMode::Baseline);
    save_detector_checkpoint(out, model, "baseline", nullptr, {{"config_hash", cfg.hash()}});
    std::cout << "detect-train baseline: " << hist.loss_history.size() << " steps, final loss "
              << (hist.loss_history.empty() ? 0.0 : hist.loss_history.back()) << "\n"
              << "saved " << out << "\n";
    return kExitOk;
  }

  // diffyolo fine-tune
  if (init.empty() || features_manifest.empty())
    throw std::runtime_error("diffyolo mode needs --init <baseline.ckpt> and --features <manifest>");
  const auto cache = features::load_manifest(features_manifest);
  const fs::path cache_dir = fs::path(features_manifest).parent_path();

  det::DetectorF model(cfg.diffyolo_detector());
  Rng rng(derive_seed(cfg.seed, "detector.init"));
  model.init(rng);
  const auto baseline = load_detector_checkpoint(init);
  for (const auto& name : load_matching_params(model, baseline.raw))
    if (name.rfind("adapter.", 0) != 0)
      throw std::runtime_error("baseline checkpoint lacks parameter " + name);

  std::map<std::string, std::string> cache_paths;
  for (const auto& e : cache.entries)
    cache_paths[e.id] = (cache_dir / e.path).string();

  std::vector<int> tap_channels;
  for (int level : cfg.extraction.tap_levels)
    tap_channels.push_back(cfg.unet.level_channels(level));
  features::FusionProjector projector(cfg.extraction.tap_levels, tap_channels,
                                      cfg.extraction.fused_channels);
  Rng prng(derive_seed(cfg.seed, "fusion.init"));
  projector.init(prng);

  TapSource taps = [&](const std::string& id, const Image&) {
    auto it = cache_paths.find(id);
    if (it == cache_paths.end())
      throw std::runtime_error("image " + id + " missing from feature cache");
    features::Provenance want;
    want.image_id = id;
    want.t = cfg.extraction.t;
    want.tap_levels = cfg.extraction.tap_levels;
    want.eps_seed = features::eps_seed_for_image(cfg.extraction.seed, id);
    want.ddpm_checkpoint = cache.ddpm_checkpoint;
    return features::load_feature(it->second, &want);
  };

  const auto hist = train_detector(model, &projector, taps, dataset.train,
                                   cfg.train_diffyolo, TrainMode::DiffYolo);
  nlohmann::json prov{{"ddpm_checkpoint", cache.ddpm_checkpoint},
                      {"baseline_checkpoint", baseline.file_hash},
                      {"extraction", cfg.extraction.to_json()},
                      {"unet", unet_config_to_json(cfg.unet)}};
  save_detector_checkpoint(out, model, "diffyolo", &projector, std::move(prov),
                           {{"config_hash", cfg.hash()}});
  std::cout << "detect-train diffyolo: " << hist.loss_history.size() << " steps, final loss "
            << (hist.loss_history.empty() ? 0.0 : hist.loss_history.back()) << "\n"
            << "saved " << out << "\n";
  return kExitOk;
}

int cmd_noise_gen(const CorruptionSpec& spec, const std::string& in_dir,
                  const std::string& out_dir) {
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw std::runtime_error("no .pgm images under " + in_dir);
  fs::create_directories(out_dir);
  for (const auto& p : paths) {
    const Image img = read_pgm(p.string());
    CorruptionSpec per_image = spec;
    const auto rel = fs::relative(p, in_dir).generic_string();
    per_image.seed = derive_seed(spec.seed, "corrupt." + rel);
    const Image noisy = corrupt(img, per_image);
    const fs::path out_path = fs::path(out_dir) / rel;
    fs::create_directories(out_path.parent_path());
    write_pgm(out_path.string(), noisy);
    // annotations travel with their image when present
    fs::path ann = p;
    ann.replace_extension(".txt");
    if (fs::exists(ann)) {
      fs::path out_ann = out_path;
      out_ann.replace_extension(".txt");
      fs::copy_file(ann, out_ann, fs::copy_options::overwrite_existing);
    }
  }
  std::cout << "noise-gen: wrote " << paths.size() << " images to " << out_dir << "\n";
  return kExitOk;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& ckpt_path,
                 const std::string& ddpm_path, const std::string& split,
                 const std::string& noise, const std::string& out) {
  const auto dataset = build_dataset(cfg);
  const auto& subset = split == "train" ? dataset.train : split == "val" ? dataset.val
                                                                         : dataset.test;
  if (subset.empty()) throw std::runtime_error("split '" + split + "' is empty");

  CorruptionSpec spec;
  if (!noise.empty() && noise != "none") {
    bool found = false;
    for (const auto& s : cfg.corruptions)
      if (corruption_kind_name(s.kind) == noise) {
        spec = s;
        found = true;
      }
    if (!found) spec = corruption_from_json(nlohmann::json::parse(noise));
    if (spec.seed == 0)
      spec.seed = derive_seed(cfg.seed, "eval.noise." + corruption_kind_name(spec.kind));
  }

  auto loaded = load_detector_checkpoint(ckpt_path);
  eval::EvalReport rep;
  if (loaded.mode == "diffyolo") {
    if (ddpm_path.empty())
      throw std::runtime_error("evaluating a diffyolo checkpoint needs --ddpm <ckpt>");
    LoadedDdpm dd = load_ddpm_checkpoint(ddpm_path);
    const std::string want_hash =
        loaded.provenance.value("ddpm_checkpoint", std::string());
    if (!want_hash.empty() && want_hash != dd.file_hash)
      throw std::runtime_error("checkpoint was fine-tuned against ddpm " + want_hash +
                               " but --ddpm hashes to " + dd.file_hash);
    const auto extraction =
        features::ExtractionConfig::from_json(loaded.provenance.at("extraction"));
    const auto unet_cfg = unet_config_from_json(loaded.provenance.at("unet"));
    std::vector<int> tap_channels;
    for (int level : extraction.tap_levels)
      tap_channels.push_back(unet_cfg.level_channels(level));
    features::FusionProjector projector(extraction.tap_levels, tap_channels,
                                        extraction.fused_channels);
    projector.visit_params([&loaded](const std::string& name, TensorF& w, TensorF&) {
      w = loaded.raw.param(name);
    });
    TapSource live = [&](const std::string& id, const Image& image) {
      return features::extract_taps(image, dd.net, dd.schedule, extraction, id, dd.file_hash);
    };
    rep = evaluate_detector(loaded.model, &projector, live, subset, spec, cfg.eval, taxonomy());
    rep.model = "diffyolo";
  } else {
    rep = evaluate_detector(loaded.model, nullptr, {}, subset, spec, cfg.eval, taxonomy());
    rep.model = "baseline";
  }
  rep.config_hash = cfg.hash();

  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  f << rep.to_json().dump(2) << "\n";
  std::cout << "evaluate: " << rep.model << " on " << split << "/" << rep.condition
            << ": mAP@0.5 " << rep.all.ap50 << ", mAP@[.5:.95] " << rep.all.ap << "\n"
            << "saved " << out << "\n";
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& pair_paths, const std::string& out_text,
               const std::string& out_csv) {
  std::vector<eval::EvalReport> reports;
  for (const auto& p : pair_paths)
    reports.push_back(eval::EvalReport::from_json(read_json_file(p)));
  const auto doc = eval::render_report(reports);
  std::cout << doc.text;
  if (!out_text.empty()) {
    std::ofstream f(out_text);
    f << doc.text;
  }
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    f << doc.csv;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion-feature detection experiments"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_dir, ddpm_path, init_path, features_path;
  std::string ckpt_path, report_out;
  std::string mode = "baseline", split = "test", noise = "none";
  std::string in_dir, out_dir, out_text, out_csv;
  std::vector<std::string> pair_paths;
  std::optional<std::uint64_t> seed_override;
  std::uint64_t seed_value = 0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { seed_override = v; }, "override config seed");
  };

  auto* ddpm_train = app.add_subcommand("ddpm-train", "train the denoising U-Net");
  add_config(ddpm_train);
  ddpm_train->add_option("--out", out_path, "output checkpoint")->required();

  auto* feature_cache =
      app.add_subcommand("feature-cache", "precompute fused-feature taps to disk");
  add_config(feature_cache);
  feature_cache->add_option("--ddpm", ddpm_path, "ddpm checkpoint")->required();
  feature_cache->add_option("--data", data_dir, "image directory (default: config train split)");
  feature_cache->add_option("--out", out_dir, "cache output directory")->required();

  auto* detect_train = app.add_subcommand("detect-train", "train or fine-tune the detector");
  add_config(detect_train);
  detect_train->add_option("--mode", mode, "baseline|diffyolo")
      ->check(CLI::IsMember({"baseline", "diffyolo"}));
  detect_train->add_option("--init", init_path, "starting checkpoint");
  detect_train->add_option("--features", features_path, "feature cache manifest (diffyolo)");
  detect_train->add_option("--out", out_path, "output checkpoint")->required();

  auto* noise_gen = app.add_subcommand("noise-gen", "corrupt an image directory");
  std::string kind = "gaussian";
  double sigma = 0.1, amount = 0.05, salt_fraction = 0.5, peak = 255.0;
  noise_gen->add_option("--kind", kind, "none|gaussian|salt_pepper|poisson");
  noise_gen->add_option("--sigma", sigma, "gaussian stddev");
  noise_gen->add_option("--amount", amount, "salt_pepper pixel fraction");
  noise_gen->add_option("--salt-fraction", salt_fraction, "salt probability");
  noise_gen->add_option("--peak", peak, "poisson peak");
  noise_gen->add_option("--seed", seed_value, "noise seed");
  noise_gen->add_option("--in", in_dir, "input directory")->required();
  noise_gen->add_option("--out", out_dir, "output directory")->required();

  auto* evaluate = app.add_subcommand("evaluate", "run a checkpoint over a split");
  add_config(evaluate);
  evaluate->add_option("--ckpt", ckpt_path, "detector checkpoint")->required();
  evaluate->add_option("--ddpm", ddpm_path, "ddpm checkpoint (diffyolo checkpoints)");
  evaluate->add_option("--split", split, "train|val|test");
  evaluate->add_option("--noise", noise, "condition name or inline JSON spec");
  evaluate->add_option("--out", report_out, "report JSON path")->required();

  auto* report = app.add_subcommand("report", "render baseline/diffyolo comparison tables");
  report->add_option("--pair", pair_paths, "report JSON files (baseline+diffyolo per condition)")
      ->required()
      ->expected(2, -1);
  report->add_option("--out-text", out_text, "write the text table here");
  report->add_option("--out-csv", out_csv, "write the CSV here");

  auto* run = app.add_subcommand("run", "run the full pipeline");
  add_config(run);

  CLI11_PARSE(app, argc, argv);

  try {
    if (noise_gen->parsed()) {
      CorruptionSpec spec;
      spec.kind = corruption_kind_from_name(kind);
      spec.sigma = sigma;
      spec.amount = amount;
      spec.salt_fraction = salt_fraction;
      spec.peak = peak;
      spec.seed = seed_value;
      spec.validate();
      return cmd_noise_gen(spec, in_dir, out_dir);
    }
    if (report->parsed()) return cmd_report(pair_paths, out_text, out_csv);

    const auto cfg = load_config(config_path, seed_override);
    if (!cfg) return kExitValidation;

    if (ddpm_train->parsed()) return cmd_ddpm_train(*cfg, out_path);
    if (feature_cache->parsed()) return cmd_feature_cache(*cfg, ddpm_path, data_dir, out_dir);
    if (detect_train->parsed())
      return cmd_detect_train(*cfg, mode, init_path, features_path, out_path);
    if (evaluate->parsed())
      return cmd_evaluate(*cfg, ckpt_path, ddpm_path, split, noise, report_out);
    if (run->parsed()) {
      const auto result = run_pipeline(*cfg);
      for (const auto& s : result.stages_skipped) std::cout << "skipped " << s << "\n";
      for (const auto& s : result.stages_run) std::cout << "ran     " << s << "\n";
      std::cout << "pipeline complete: " << cfg->out_dir << "\n";
      return kExitOk;
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitOk;
}
