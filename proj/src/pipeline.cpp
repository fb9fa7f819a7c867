#include "diffdet/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "diffdet/evaluate.hpp"
#include "diffdet/hash.hpp"
#include "diffdet/model_io.hpp"
#include "diffdet/report.hpp"
#include "diffdet/training.hpp"

namespace fs = std::filesystem;

namespace diffdet {

namespace {

std::vector<std::string> taxonomy() {
  std::vector<std::string> names;
  for (int i = 0; i < data::kClassCount; ++i) names.emplace_back(data::class_name(i));
  return names;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

// Stage ledger inside manifest.json: every stage stores its key and the
// hash of each output file.
class RunManifest {
 public:
  RunManifest(const std::string& dir, const std::string& config_hash)
      : dir_(dir), path_((fs::path(dir) / artifacts::kManifest).string()) {
    if (fs::exists(path_)) {
      std::ifstream f(path_);
      try {
        f >> doc_;
      } catch (const nlohmann::json::exception&) {
        doc_ = nlohmann::json::object();
      }
      if (doc_.value("config_hash", "") != config_hash)
        doc_ = nlohmann::json::object();  // config changed: all stages stale
    }
    doc_["version"] = 1;
    doc_["config_hash"] = config_hash;
    if (!doc_.contains("stages")) doc_["stages"] = nlohmann::json::object();
  }

  bool is_current(const std::string& stage, const std::string& key,
                  const std::vector<std::string>& outputs) const {
    if (!doc_.at("stages").contains(stage)) return false;
    const auto& rec = doc_.at("stages").at(stage);
    if (rec.value("key", "") != key) return false;
    for (const auto& rel : outputs) {
      const auto full = (fs::path(dir_) / rel).string();
      if (!fs::exists(full)) return false;
      if (rec.at("outputs").value(rel, "") != file_fnv_hex(full)) return false;
    }
    return true;
  }

  void record(const std::string& stage, const std::string& key,
              const std::vector<std::string>& outputs) {
    nlohmann::json rec;
    rec["key"] = key;
    rec["outputs"] = nlohmann::json::object();
    for (const auto& rel : outputs)
      rec["outputs"][rel] = file_fnv_hex((fs::path(dir_) / rel).string());
    doc_["stages"][stage] = std::move(rec);
    write_text(path_, doc_.dump(2) + "\n");
  }

 private:
  std::string dir_;
  std::string path_;
  nlohmann::json doc_;
};

std::string section_key(const ExperimentConfig& cfg, const std::vector<std::string>& sections,
                        const std::vector<std::string>& upstream_hashes = {}) {
  Fnv1a64 h;
  for (const auto& s : sections) h.update(canonical_dump(cfg.canonical.at(s)));
  h.update(canonical_dump(cfg.canonical.at("seed")));
  for (const auto& u : upstream_hashes) h.update(u);
  return h.hex();
}

}  // namespace

DatasetBundle build_dataset(const ExperimentConfig& cfg) {
  std::vector<data::AnnotatedImage> all;
  if (cfg.dataset_source == "synthetic") {
    all = data::generate_synthetic(cfg.synthetic_count, cfg.synthetic, cfg.seed);
  } else {
    std::vector<std::string> warnings;
    all = data::load_deeppcb(cfg.deeppcb_root, &warnings);
    for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    if (all.empty())
      throw std::runtime_error("no annotated images found under " + cfg.deeppcb_root);
  }
  std::vector<std::string> ids;
  ids.reserve(all.size());
  for (const auto& a : all) ids.push_back(a.id);
  const auto split = data::split_ids(ids, cfg.split_ratios, cfg.split_seed);
  DatasetBundle out;
  out.train = data::select_by_ids(all, split.train);
  out.val = data::select_by_ids(all, split.val);
  out.test = data::select_by_ids(all, split.test);
  return out;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg) {
  PipelineResult result;
  const std::string dir = cfg.out_dir;
  fs::create_directories(dir);
  fs::create_directories(fs::path(dir) / artifacts::kFeatureDir);
  fs::create_directories(fs::path(dir) / artifacts::kReportDir);

  write_text((fs::path(dir) / artifacts::kConfig).string(),
             cfg.canonical.dump(2) + "\n");
  RunManifest manifest(dir, cfg.hash());

  auto full = [&dir](const std::string& rel) { return (fs::path(dir) / rel).string(); };
  auto run_stage = [&](const std::string& name, const std::string& key,
                       const std::vector<std::string>& outputs, auto&& body) {
    if (manifest.is_current(name, key, outputs)) {
      result.stages_skipped.push_back(name);
      return;
    }
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    manifest.record(name, key, outputs);
    result.stages_run.push_back(name);
  };

  const DatasetBundle dataset = build_dataset(cfg);
  if (dataset.train.empty() || dataset.test.empty())
    throw StageError("dataset", "train or test split is empty; adjust count/ratios");

  // ddpm-train
  const std::string ddpm_key = section_key(cfg, {"dataset", "schedule", "unet", "ddpm_train"});
  run_stage("ddpm-train", ddpm_key, {artifacts::kDdpm}, [&] {
    ddpm::UNetF net(cfg.unet);
    Rng rng(derive_seed(cfg.seed, "ddpm.init"));
    net.init(rng);
    const auto schedule = cfg.schedule.build();
    std::vector<Image> images;
    for (const auto& item : dataset.train) images.push_back(item.image);
    const auto train_result = train_denoiser(net, images, schedule, cfg.ddpm_train);
    save_ddpm_checkpoint(full(artifacts::kDdpm), net, cfg.schedule,
                         {{"val_loss_initial", train_result.val_loss_initial},
                          {"val_loss_final", train_result.val_loss_final}});
  });
  const std::string ddpm_hash = file_fnv_hex(full(artifacts::kDdpm));

  // feature-cache over the training split
  const std::string feat_key = section_key(cfg, {"extraction"}, {ddpm_hash});
  run_stage("feature-cache", feat_key, {artifacts::kFeatureManifest}, [&] {
    LoadedDdpm ddpm = load_ddpm_checkpoint(full(artifacts::kDdpm));
    std::vector<std::pair<std::string, Image>> images;
    for (const auto& item : dataset.train) images.emplace_back(item.id, item.image);
    features::BuildCacheStats stats;
    auto cache = features::build_cache(images, ddpm.net, ddpm.schedule, cfg.extraction,
                                       ddpm.file_hash, full(artifacts::kFeatureDir), &stats);
    if (!stats.failed_ids.empty()) {
      std::string msg = "feature extraction failed for:";
      for (const auto& id : stats.failed_ids) msg += " " + id;
      throw std::runtime_error(msg);
    }
    features::save_manifest(cache, full(artifacts::kFeatureManifest));
  });

  // baseline-train
  const std::string base_key =
      section_key(cfg, {"dataset", "detector", "train_baseline"});
  run_stage("baseline-train", base_key, {artifacts::kBaseline}, [&] {
    det::DetectorF model(cfg.detector);
    Rng rng(derive_seed(cfg.seed, "detector.init"));
    model.init(rng);
    train_detector(model, nullptr, {}, dataset.train, cfg.train_baseline,
                   TrainMode::Baseline);
    save_detector_checkpoint(full(artifacts::kBaseline), model, "baseline", nullptr,
                             {{"config_hash", cfg.hash()}});
  });
  const std::string baseline_hash = file_fnv_hex(full(artifacts::kBaseline));

  // diffyolo-finetune
  const std::string diff_key = section_key(
      cfg, {"dataset", "detector", "extraction", "train_diffyolo"},
      {ddpm_hash, baseline_hash, file_fnv_hex(full(artifacts::kFeatureManifest))});
  run_stage("diffyolo-finetune", diff_key, {artifacts::kDiffYolo}, [&] {
    // provenance guard: manifest must match the ddpm checkpoint and its
    // files must be intact before training starts
    const auto cache = features::load_manifest(full(artifacts::kFeatureManifest));
    if (cache.ddpm_checkpoint != ddpm_hash)
      throw std::runtime_error("feature manifest was built against ddpm checkpoint " +
                               cache.ddpm_checkpoint + " but " + ddpm_hash +
                               " is present; rebuild the cache");

    std::map<std::string, std::string> cache_paths;
    for (const auto& e : cache.entries)
      cache_paths[e.id] = (fs::path(full(artifacts::kFeatureDir)) / e.path).string();

    det::DetectorF model(cfg.diffyolo_detector());
    Rng rng(derive_seed(cfg.seed, "detector.init"));
    model.init(rng);
    const auto baseline = load_detector_checkpoint(full(artifacts::kBaseline));
    const auto missing = load_matching_params(model, baseline.raw);
    for (const auto& name : missing)
      if (name.rfind("adapter.", 0) != 0)
        throw std::runtime_error("baseline checkpoint lacks parameter " + name);

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
      want.ddpm_checkpoint = ddpm_hash;
      return features::load_feature(it->second, &want);
    };

    train_detector(model, &projector, taps, dataset.train, cfg.train_diffyolo,
                   TrainMode::DiffYolo);

    nlohmann::json prov{{"ddpm_checkpoint", ddpm_hash},
                        {"baseline_checkpoint", baseline_hash},
                        {"extraction", cfg.extraction.to_json()},
                        {"unet", unet_config_to_json(cfg.unet)}};
    save_detector_checkpoint(full(artifacts::kDiffYolo), model, "diffyolo", &projector,
                             std::move(prov), {{"config_hash", cfg.hash()}});
  });

  // noise-sweep evaluation: every condition for both models on the test split
  std::vector<std::string> report_files;
  for (const auto& spec : cfg.corruptions)
    for (const std::string model : {"baseline", "diffyolo"})
      report_files.push_back(std::string(artifacts::kReportDir) + "/" + model + "_" +
                             corruption_kind_name(spec.kind) + ".json");

  const std::string eval_key =
      section_key(cfg, {"dataset", "eval", "corruptions"},
                  {baseline_hash, file_fnv_hex(full(artifacts::kDiffYolo))});
  run_stage("evaluate", eval_key, report_files, [&] {
    const auto names = taxonomy();
    auto baseline = load_detector_checkpoint(full(artifacts::kBaseline));
    auto diffyolo = load_detector_checkpoint(full(artifacts::kDiffYolo));
    LoadedDdpm ddpm = load_ddpm_checkpoint(full(artifacts::kDdpm));

    std::vector<int> tap_channels;
    for (int level : cfg.extraction.tap_levels)
      tap_channels.push_back(cfg.unet.level_channels(level));
    features::FusionProjector projector(cfg.extraction.tap_levels, tap_channels,
                                        cfg.extraction.fused_channels);
    projector.visit_params([&diffyolo](const std::string& name, TensorF& w, TensorF&) {
      w = diffyolo.raw.param(name);
    });

    TapSource live = [&](const std::string& id, const Image& image) {
      return features::extract_taps(image, ddpm.net, ddpm.schedule, cfg.extraction, id,
                                    ddpm.file_hash);
    };

    for (const auto& spec : cfg.corruptions) {
      const std::string cond = corruption_kind_name(spec.kind);
      auto rep_b = evaluate_detector(baseline.model, nullptr, {}, dataset.test, spec,
                                     cfg.eval, names);
      rep_b.model = "baseline";
      rep_b.config_hash = cfg.hash();
      write_text(full(std::string(artifacts::kReportDir) + "/baseline_" + cond + ".json"),
                 rep_b.to_json().dump(2) + "\n");

      auto rep_d = evaluate_detector(diffyolo.model, &projector, live, dataset.test, spec,
                                     cfg.eval, names);
      rep_d.model = "diffyolo";
      rep_d.config_hash = cfg.hash();
      write_text(full(std::string(artifacts::kReportDir) + "/diffyolo_" + cond + ".json"),
                 rep_d.to_json().dump(2) + "\n");
    }
  });

  // comparison tables
  std::vector<std::string> eval_hashes;
  for (const auto& rel : report_files) eval_hashes.push_back(file_fnv_hex(full(rel)));
  const std::string report_key = section_key(cfg, {"corruptions"}, eval_hashes);
  run_stage("report", report_key,
            {artifacts::kComparisonText, artifacts::kComparisonCsv}, [&] {
    std::vector<eval::EvalReport> reports;
    for (const auto& rel : report_files) {
      std::ifstream f(full(rel));
      nlohmann::json j;
      f >> j;
      reports.push_back(eval::EvalReport::from_json(j));
    }
    const auto doc = eval::render_report(reports);
    write_text(full(artifacts::kComparisonText), doc.text);
    write_text(full(artifacts::kComparisonCsv), doc.csv);
  });

  return result;
}

}  // namespace diffdet
