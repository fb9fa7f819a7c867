#include "diffdet/config.hpp"

#include <cmath>
#include <set>

#include "diffdet/hash.hpp"

namespace diffdet {

namespace {

// Field-by-field reader that records type errors with their JSON path
// instead of throwing on the first problem.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  template <typename T>
  T get(const nlohmann::json& obj, const std::string& path, const std::string& key,
        T fallback) {
    if (!obj.is_object() || !obj.contains(key)) return fallback;
    try {
      return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(join(path, key) + ": wrong type");
      return fallback;
    }
  }

  nlohmann::json section(const nlohmann::json& obj, const std::string& path,
                         const std::string& key) {
    if (!obj.is_object() || !obj.contains(key)) return nlohmann::json::object();
    if (!obj.at(key).is_object() && !obj.at(key).is_array()) {
      errors_.push_back(join(path, key) + ": expected an object");
      return nlohmann::json::object();
    }
    return obj.at(key);
  }

  void error(const std::string& path, const std::string& msg) {
    errors_.push_back(path + ": " + msg);
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

 private:
  std::vector<std::string>& errors_;
};

}  // namespace

nlohmann::json corruption_to_json(const CorruptionSpec& c) {
  nlohmann::json j{{"kind", corruption_kind_name(c.kind)}, {"seed", c.seed}};
  switch (c.kind) {
    case CorruptionKind::Gaussian:
      j["sigma"] = c.sigma;
      break;
    case CorruptionKind::SaltPepper:
      j["amount"] = c.amount;
      j["salt_fraction"] = c.salt_fraction;
      break;
    case CorruptionKind::Poisson:
      j["peak"] = c.peak;
      break;
    case CorruptionKind::None:
      break;
  }
  return j;
}

CorruptionSpec corruption_from_json(const nlohmann::json& j) {
  CorruptionSpec c;
  c.kind = corruption_kind_from_name(j.at("kind").get<std::string>());
  c.seed = j.value("seed", std::uint64_t{0});
  c.sigma = j.value("sigma", c.sigma);
  c.amount = j.value("amount", c.amount);
  c.salt_fraction = j.value("salt_fraction", c.salt_fraction);
  c.peak = j.value("peak", c.peak);
  return c;
}

std::string canonical_dump(const nlohmann::json& j) {
  // nlohmann::json already keeps object keys sorted; compact dump is the
  // canonical form
  return j.dump();
}

std::string ExperimentConfig::hash() const { return fnv1a64_hex(canonical_dump(canonical)); }

ConfigValidation validate_config(const nlohmann::json& raw) {
  ConfigValidation out;
  Reader r(out.errors);
  ExperimentConfig& c = out.config;

  if (!raw.is_object() && !raw.is_null()) {
    out.errors.push_back("config root must be a JSON object");
    return out;
  }
  const nlohmann::json root = raw.is_null() ? nlohmann::json::object() : raw;

  {
    std::set<std::string> known = {"seed",       "out_dir",   "dataset",       "schedule",
                                   "unet",       "ddpm_train", "extraction",   "detector",
                                   "train_baseline", "train_diffyolo", "eval", "corruptions"};
    for (auto it = root.begin(); it != root.end(); ++it)
      if (!known.count(it.key())) r.error(it.key(), "unknown config section");
  }

  c.seed = r.get<std::uint64_t>(root, "", "seed", 0);
  c.out_dir = r.get<std::string>(root, "", "out_dir", "runs/exp");

  // dataset
  {
    const auto ds = r.section(root, "", "dataset");
    c.dataset_source = r.get<std::string>(ds, "dataset", "source", "synthetic");
    if (c.dataset_source != "synthetic" && c.dataset_source != "deeppcb")
      r.error("dataset.source", "must be 'synthetic' or 'deeppcb'");
    c.deeppcb_root = r.get<std::string>(ds, "dataset", "deeppcb_root", "");
    if (c.dataset_source == "deeppcb" && c.deeppcb_root.empty())
      r.error("dataset.deeppcb_root", "required when source is 'deeppcb'");
    const auto sy = r.section(ds, "dataset", "synthetic");
    c.synthetic_count = r.get<int>(sy, "dataset.synthetic", "count", 350);
    c.synthetic.image_size = r.get<int>(sy, "dataset.synthetic", "image_size", 64);
    c.synthetic.min_defects = r.get<int>(sy, "dataset.synthetic", "min_defects", 2);
    c.synthetic.max_defects = r.get<int>(sy, "dataset.synthetic", "max_defects", 4);
    if (c.synthetic_count < 1) r.error("dataset.synthetic.count", "must be >= 1");
    if (c.synthetic.min_defects < 0 || c.synthetic.max_defects < c.synthetic.min_defects)
      r.error("dataset.synthetic.min_defects", "need 0 <= min_defects <= max_defects");
    const auto sp = r.section(ds, "dataset", "split");
    const auto ratios = r.get<std::vector<double>>(sp, "dataset.split", "ratios",
                                                   {0.8, 0.1, 0.1});
    if (ratios.size() != 3)
      r.error("dataset.split.ratios", "expected [train, val, test]");
    else {
      c.split_ratios = {ratios[0], ratios[1], ratios[2]};
      if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
        r.error("dataset.split.ratios", "must sum to 1");
    }
    c.split_seed = r.get<std::uint64_t>(sp, "dataset.split", "seed", 0);
  }

  // schedule
  {
    const auto sj = r.section(root, "", "schedule");
    c.schedule.steps = r.get<int>(sj, "schedule", "steps", 1000);
    c.schedule.beta_start = r.get<double>(sj, "schedule", "beta_start", 1e-4);
    c.schedule.beta_end = r.get<double>(sj, "schedule", "beta_end", 0.02);
    if (c.schedule.steps < 1) r.error("schedule.steps", "must be >= 1");
    if (!(c.schedule.beta_start > 0 && c.schedule.beta_start < 1))
      r.error("schedule.beta_start", "must lie in (0,1)");
    if (!(c.schedule.beta_end > 0 && c.schedule.beta_end < 1))
      r.error("schedule.beta_end", "must lie in (0,1)");
    if (c.schedule.beta_start > c.schedule.beta_end)
      r.error("schedule.beta_start", "must not exceed beta_end");
  }

  // unet
  {
    const auto uj = r.section(root, "", "unet");
    c.unet.in_channels = 1;  // grayscale pipeline
    c.unet.base_channels = r.get<int>(uj, "unet", "base_channels", 16);
    c.unet.channel_multipliers =
        r.get<std::vector<int>>(uj, "unet", "channel_multipliers", {1, 2, 2});
    c.unet.time_embed_dim = r.get<int>(uj, "unet", "time_embed_dim", 64);
    c.unet.tap_levels = r.get<std::vector<int>>(uj, "unet", "tap_levels", {1, 2});
    c.unet.norm_groups = r.get<int>(uj, "unet", "norm_groups", 8);
    if (c.unet.levels() < 2) r.error("unet.channel_multipliers", "need at least 2 levels");
    for (std::size_t i = 0; i < c.unet.tap_levels.size(); ++i) {
      const int l = c.unet.tap_levels[i];
      if (l < 0 || l >= c.unet.levels())
        r.error("unet.tap_levels[" + std::to_string(i) + "]",
                "level " + std::to_string(l) + " outside [0," +
                    std::to_string(c.unet.levels() - 1) + "]");
    }
    for (int l = 0; l < c.unet.levels(); ++l)
      if (c.unet.level_channels(l) % c.unet.norm_groups != 0)
        r.error("unet.norm_groups", "must divide channels at level " + std::to_string(l));
  }

  // ddpm_train
  {
    const auto tj = r.section(root, "", "ddpm_train");
    c.ddpm_train.steps = r.get<int>(tj, "ddpm_train", "steps", 1200);
    c.ddpm_train.batch_size = r.get<int>(tj, "ddpm_train", "batch_size", 8);
    c.ddpm_train.lr = r.get<double>(tj, "ddpm_train", "lr", 2e-4);
    c.ddpm_train.crop = r.get<int>(tj, "ddpm_train", "crop", 32);
    c.ddpm_train.seed = c.seed;
    if (c.ddpm_train.steps < 1) r.error("ddpm_train.steps", "must be >= 1");
    if (c.ddpm_train.batch_size < 1) r.error("ddpm_train.batch_size", "must be >= 1");
    if (!(c.ddpm_train.lr > 0)) r.error("ddpm_train.lr", "must be > 0");
  }

  // extraction
  {
    const auto ej = r.section(root, "", "extraction");
    c.extraction.t = r.get<int>(ej, "extraction", "t", 50);
    c.extraction.tap_levels =
        r.get<std::vector<int>>(ej, "extraction", "tap_levels", c.unet.tap_levels);
    c.extraction.fused_channels = r.get<int>(ej, "extraction", "fused_channels", 32);
    c.extraction.seed = c.seed;
    if (c.extraction.t < 1 || c.extraction.t > c.schedule.steps)
      r.error("extraction.t", "must lie in [1, schedule.steps]");
    for (std::size_t i = 0; i < c.extraction.tap_levels.size(); ++i) {
      const int l = c.extraction.tap_levels[i];
      bool tapped = false;
      for (int ul : c.unet.tap_levels) tapped = tapped || ul == l;
      if (!tapped)
        r.error("extraction.tap_levels[" + std::to_string(i) + "]",
                "level " + std::to_string(l) + " is not tapped by the U-Net");
    }
    if (c.extraction.tap_levels.empty())
      r.error("extraction.tap_levels", "at least one tap level required");
    if (c.extraction.fused_channels < 1)
      r.error("extraction.fused_channels", "must be >= 1");
  }

  // detector
  {
    const auto dj = r.section(root, "", "detector");
    c.detector.in_channels = 1;
    c.detector.input_size = r.get<int>(dj, "detector", "input_size", c.synthetic.image_size);
    c.detector.stem_channels = r.get<int>(dj, "detector", "stem_channels", 16);
    c.detector.stage_channels =
        r.get<std::vector<int>>(dj, "detector", "stage_channels", {32, 48, 64, 64, 64});
    c.detector.neck_channels = r.get<int>(dj, "detector", "neck_channels", 48);
    c.detector.head_channels = r.get<int>(dj, "detector", "head_channels", 48);
    c.detector.class_count = r.get<int>(dj, "detector", "class_count", data::kClassCount);
    c.detector.norm_groups = r.get<int>(dj, "detector", "norm_groups", 8);
    c.detector.assign_small_max = r.get<double>(dj, "detector", "assign_small_max", 16.0);
    c.detector.assign_medium_max = r.get<double>(dj, "detector", "assign_medium_max", 32.0);
    c.detector.box_weight = r.get<double>(dj, "detector", "box_weight", 5.0);
    c.detector.obj_weight = r.get<double>(dj, "detector", "obj_weight", 1.0);
    c.detector.cls_weight = r.get<double>(dj, "detector", "cls_weight", 1.0);
    c.detector.obj_pos_weight = r.get<double>(dj, "detector", "obj_pos_weight", 2.0);
    const auto ij = r.section(dj, "detector", "injection");
    c.detector.injection.enabled = false;  // per-mode variants derive from this
    c.detector.injection.scale = r.get<int>(ij, "detector.injection", "scale", 8);
    c.detector.injection.fused_channels = c.extraction.fused_channels;

    if (c.detector.class_count != data::kClassCount)
      r.error("detector.class_count", "PCB taxonomy is fixed at " +
                                          std::to_string(data::kClassCount) + " classes");
    if (c.detector.input_size % 32 != 0)
      r.error("detector.input_size", "must be a multiple of 32");
    if (c.detector.stage_channels.size() != 5)
      r.error("detector.stage_channels", "expected five stages");
    bool scale_ok = false;
    for (int s : det::kStrides) scale_ok = scale_ok || s == c.detector.injection.scale;
    if (!scale_ok)
      r.error("detector.injection.scale", "valid strides are {8,16,32}");
    else {
      c.extraction.fused_h = c.detector.input_size / c.detector.injection.scale;
      c.extraction.fused_w = c.extraction.fused_h;
    }
  }

  // cross-field: dataset/detector/unet geometry
  if (c.dataset_source == "synthetic" && c.synthetic.image_size != c.detector.input_size)
    r.error("detector.input_size", "must match dataset.synthetic.image_size");
  {
    const int div = 1 << (c.unet.levels() - 1);
    if (c.detector.input_size % div != 0)
      r.error("unet.channel_multipliers",
              "input size " + std::to_string(c.detector.input_size) +
                  " not divisible by 2^(levels-1) = " + std::to_string(div));
  }

  // training
  auto read_train = [&r](const nlohmann::json& tj, const std::string& path,
                         DetectorTrainParams& p, int def_epochs, double def_lr) {
    p.epochs = r.get<int>(tj, path, "epochs", def_epochs);
    p.batch_size = r.get<int>(tj, path, "batch_size", 8);
    p.lr = r.get<double>(tj, path, "lr", def_lr);
    p.final_lr_fraction = r.get<double>(tj, path, "final_lr_fraction", 0.1);
    if (p.epochs < 0) r.error(path + ".epochs", "must be >= 0");
    if (p.batch_size < 1) r.error(path + ".batch_size", "must be >= 1");
    if (!(p.lr > 0)) r.error(path + ".lr", "must be > 0");
  };
  {
    const auto tb = r.section(root, "", "train_baseline");
    read_train(tb, "train_baseline", c.train_baseline, 48, 1e-3);
    c.train_baseline.seed = c.seed;
    const auto td = r.section(root, "", "train_diffyolo");
    read_train(td, "train_diffyolo", c.train_diffyolo, 24, 5e-4);
    c.train_diffyolo.train_neck = r.get<bool>(td, "train_diffyolo", "train_neck", false);
    c.train_diffyolo.seed = c.seed;
  }

  // eval
  {
    const auto ej = r.section(root, "", "eval");
    c.eval.conf_threshold = r.get<double>(ej, "eval", "conf_threshold", 0.25);
    c.eval.nms_iou = r.get<double>(ej, "eval", "nms_iou", 0.45);
    c.eval.decode_conf = r.get<double>(ej, "eval", "decode_conf", 0.001);
    for (const auto& [k, v] : {std::pair<const char*, double>{"conf_threshold", c.eval.conf_threshold},
                               {"nms_iou", c.eval.nms_iou},
                               {"decode_conf", c.eval.decode_conf}})
      if (!(v > 0 && v < 1)) r.error(std::string("eval.") + k, "must lie in (0,1)");
  }

  // corruptions
  {
    nlohmann::json cj = root.contains("corruptions") ? root.at("corruptions") : nlohmann::json();
    if (cj.is_null()) {
      CorruptionSpec none;
      CorruptionSpec gauss;
      gauss.kind = CorruptionKind::Gaussian;
      CorruptionSpec sp;
      sp.kind = CorruptionKind::SaltPepper;
      CorruptionSpec poisson;
      poisson.kind = CorruptionKind::Poisson;
      c.corruptions = {none, gauss, sp, poisson};
    } else if (!cj.is_array()) {
      r.error("corruptions", "expected an array");
    } else {
      for (std::size_t i = 0; i < cj.size(); ++i) {
        try {
          c.corruptions.push_back(corruption_from_json(cj[i]));
          c.corruptions.back().validate();
        } catch (const std::exception& e) {
          r.error("corruptions[" + std::to_string(i) + "]", e.what());
        }
      }
    }
    std::set<std::string> seen;
    for (auto& spec : c.corruptions) {
      const std::string name = corruption_kind_name(spec.kind);
      if (!seen.insert(name).second)
        r.error("corruptions", "duplicate condition '" + name + "'");
      if (spec.seed == 0) spec.seed = derive_seed(c.seed, "eval.noise." + name);
    }
  }

  if (!out.ok()) return out;

  // canonical normalized echo
  nlohmann::json canon;
  canon["seed"] = c.seed;
  canon["out_dir"] = c.out_dir;
  canon["dataset"] = {{"source", c.dataset_source},
                      {"deeppcb_root", c.deeppcb_root},
                      {"synthetic",
                       {{"count", c.synthetic_count},
                        {"image_size", c.synthetic.image_size},
                        {"min_defects", c.synthetic.min_defects},
                        {"max_defects", c.synthetic.max_defects}}},
                      {"split",
                       {{"ratios", c.split_ratios}, {"seed", c.split_seed}}}};
  canon["schedule"] = c.schedule.to_json();
  canon["unet"] = unet_config_to_json(c.unet);
  canon["ddpm_train"] = {{"steps", c.ddpm_train.steps},
                         {"batch_size", c.ddpm_train.batch_size},
                         {"lr", c.ddpm_train.lr},
                         {"crop", c.ddpm_train.crop}};
  canon["extraction"] = c.extraction.to_json();
  canon["detector"] = detector_config_to_json(c.detector);
  auto train_json = [](const DetectorTrainParams& p) {
    return nlohmann::json{{"epochs", p.epochs},
                          {"batch_size", p.batch_size},
                          {"lr", p.lr},
                          {"final_lr_fraction", p.final_lr_fraction}};
  };
  canon["train_baseline"] = train_json(c.train_baseline);
  canon["train_diffyolo"] = train_json(c.train_diffyolo);
  canon["train_diffyolo"]["train_neck"] = c.train_diffyolo.train_neck;
  canon["eval"] = {{"conf_threshold", c.eval.conf_threshold},
                   {"nms_iou", c.eval.nms_iou},
                   {"decode_conf", c.eval.decode_conf}};
  canon["corruptions"] = nlohmann::json::array();
  for (const auto& spec : c.corruptions) canon["corruptions"].push_back(corruption_to_json(spec));
  c.canonical = std::move(canon);
  return out;
}

}  // namespace diffdet
