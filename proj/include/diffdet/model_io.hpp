#pragma once

// Checkpoint save/load for the U-Net and the detector, including config
// echoes so a checkpoint restores without external knowledge. Detector
// checkpoints carry mode and, in diffyolo mode, the fusion projections
// plus the feature provenance they were trained against.

#include <json.hpp>

#include "diffdet/checkpoint.hpp"
#include "diffdet/ddpm.hpp"
#include "diffdet/detector.hpp"
#include "diffdet/features.hpp"

namespace diffdet {

struct ScheduleParams {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  ddpm::NoiseSchedule build() const { return ddpm::make_schedule(steps, beta_start, beta_end); }

  nlohmann::json to_json() const {
    return {{"steps", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}};
  }
  static ScheduleParams from_json(const nlohmann::json& j) {
    ScheduleParams s;
    s.steps = j.at("steps").get<int>();
    s.beta_start = j.at("beta_start").get<double>();
    s.beta_end = j.at("beta_end").get<double>();
    return s;
  }
};

inline nlohmann::json unet_config_to_json(const ddpm::UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"base_channels", c.base_channels},
          {"channel_multipliers", c.channel_multipliers},
          {"time_embed_dim", c.time_embed_dim},
          {"tap_levels", c.tap_levels},
          {"norm_groups", c.norm_groups}};
}

inline ddpm::UNetConfig unet_config_from_json(const nlohmann::json& j) {
  ddpm::UNetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.tap_levels = j.at("tap_levels").get<std::vector<int>>();
  c.norm_groups = j.at("norm_groups").get<int>();
  return c;
}

inline nlohmann::json detector_config_to_json(const det::DetectorConfig& c) {
  return {{"in_channels", c.in_channels},
          {"input_size", c.input_size},
          {"stem_channels", c.stem_channels},
          {"stage_channels", c.stage_channels},
          {"neck_channels", c.neck_channels},
          {"head_channels", c.head_channels},
          {"class_count", c.class_count},
          {"norm_groups", c.norm_groups},
          {"assign_small_max", c.assign_small_max},
          {"assign_medium_max", c.assign_medium_max},
          {"box_weight", c.box_weight},
          {"obj_weight", c.obj_weight},
          {"cls_weight", c.cls_weight},
          {"obj_pos_weight", c.obj_pos_weight},
          {"injection",
           {{"enabled", c.injection.enabled},
            {"scale", c.injection.scale},
            {"fused_channels", c.injection.fused_channels}}}};
}

inline det::DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  det::DetectorConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.stem_channels = j.at("stem_channels").get<int>();
  c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  c.neck_channels = j.at("neck_channels").get<int>();
  c.head_channels = j.at("head_channels").get<int>();
  c.class_count = j.at("class_count").get<int>();
  c.norm_groups = j.at("norm_groups").get<int>();
  c.assign_small_max = j.at("assign_small_max").get<double>();
  c.assign_medium_max = j.at("assign_medium_max").get<double>();
  c.box_weight = j.at("box_weight").get<double>();
  c.obj_weight = j.at("obj_weight").get<double>();
  c.cls_weight = j.at("cls_weight").get<double>();
  c.obj_pos_weight = j.at("obj_pos_weight").get<double>();
  const auto& inj = j.at("injection");
  c.injection.enabled = inj.at("enabled").get<bool>();
  c.injection.scale = inj.at("scale").get<int>();
  c.injection.fused_channels = inj.at("fused_channels").get<int>();
  return c;
}

template <typename Model>
std::vector<NamedParam> collect_params(Model& model) {
  std::vector<NamedParam> out;
  model.visit_params([&out](const std::string& name, TensorF& w, TensorF&) {
    out.push_back({name, w.shape(), w.data(), w.numel()});
  });
  return out;
}

template <typename Model>
void load_params_into(Model& model, const Checkpoint& ckpt) {
  model.visit_params([&ckpt](const std::string& name, TensorF& w, TensorF&) {
    TensorF stored = ckpt.param(name);
    if (stored.shape() != w.shape())
      throw CheckpointError("shape mismatch for parameter " + name);
    w = std::move(stored);
  });
}

// ---------------------------------------------------------------------------
// ddpm checkpoints

inline void save_ddpm_checkpoint(const std::string& path, ddpm::UNet<float>& net,
                                 const ScheduleParams& sched,
                                 nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json header = std::move(extra);
  header["kind"] = "ddpm";
  header["unet"] = unet_config_to_json(net.config());
  header["schedule"] = sched.to_json();
  save_checkpoint(path, std::move(header), collect_params(net));
}

struct LoadedDdpm {
  ddpm::UNet<float> net;
  ScheduleParams schedule_params;
  ddpm::NoiseSchedule schedule;
  std::string file_hash;
};

inline LoadedDdpm load_ddpm_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.header.at("kind").get<std::string>() != "ddpm")
    throw CheckpointError("not a ddpm checkpoint: " + path);
  LoadedDdpm out{ddpm::UNet<float>(unet_config_from_json(ckpt.header.at("unet"))),
                 ScheduleParams::from_json(ckpt.header.at("schedule")),
                 {},
                 ckpt.file_hash};
  load_params_into(out.net, ckpt);
  out.schedule = out.schedule_params.build();
  return out;
}

// ---------------------------------------------------------------------------
// detector checkpoints

inline void save_detector_checkpoint(const std::string& path, det::Detector<float>& model,
                                     const std::string& mode,
                                     features::FusionProjector* projector,
                                     nlohmann::json provenance = nlohmann::json::object(),
                                     nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json header = std::move(extra);
  header["kind"] = "detector";
  header["mode"] = mode;
  header["detector"] = detector_config_to_json(model.config());
  header["provenance"] = std::move(provenance);
  std::vector<NamedParam> params = collect_params(model);
  if (projector) {
    auto fusion = collect_params(*projector);
    params.insert(params.end(), fusion.begin(), fusion.end());
  }
  save_checkpoint(path, std::move(header), params);
}

struct LoadedDetector {
  det::Detector<float> model;
  std::string mode;
  nlohmann::json provenance;
  Checkpoint raw;
  std::string file_hash;
};

inline LoadedDetector load_detector_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.header.at("kind").get<std::string>() != "detector")
    throw CheckpointError("not a detector checkpoint: " + path);
  LoadedDetector out{det::Detector<float>(detector_config_from_json(ckpt.header.at("detector"))),
                     ckpt.header.at("mode").get<std::string>(),
                     ckpt.header.value("provenance", nlohmann::json::object()),
                     {},
                     ckpt.file_hash};
  load_params_into(out.model, ckpt);
  out.raw = std::move(ckpt);
  return out;
}

}  // namespace diffdet
