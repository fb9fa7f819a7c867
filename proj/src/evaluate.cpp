#include "diffdet/evaluate.hpp"

#include "diffdet/detector_ops.hpp"

namespace diffdet {

eval::EvalReport evaluate_detector(det::DetectorF& model,
                                   features::FusionProjector* projector,
                                   const TapSource& taps,
                                   const std::vector<data::AnnotatedImage>& dataset,
                                   const CorruptionSpec& corruption,
                                   const EvalParams& params,
                                   const std::vector<std::string>& class_names) {
  if (model.config().class_count != static_cast<int>(class_names.size()))
    throw std::invalid_argument("evaluate: model expects " +
                                std::to_string(model.config().class_count) +
                                " classes, taxonomy has " +
                                std::to_string(class_names.size()));
  const bool injected = model.config().injection.enabled;
  if (injected && (projector == nullptr || !taps))
    throw std::invalid_argument("evaluate: injected model needs projector and tap source");

  std::vector<eval::PooledDetection> dets;
  std::vector<eval::PooledGroundTruth> gts;

  for (int i = 0; i < static_cast<int>(dataset.size()); ++i) {
    const auto& item = dataset[static_cast<std::size_t>(i)];

    CorruptionSpec per_image = corruption;
    per_image.seed = derive_seed(corruption.seed, "corrupt." + item.id);
    const Image seen = corrupt(item.image, per_image);
    const Image diff = to_diffusion_range(seen);

    std::vector<TensorF> raw;
    if (injected) {
      const features::TapStack stack = taps(item.id, seen);
      features::FusedFeature fused = projector->forward(stack);
      raw = model.forward(diff.data, &fused.data);
    } else {
      raw = model.forward(diff.data);
    }

    const auto found =
        det::decode_and_nms(raw, model.config(), params.decode_conf, params.nms_iou);
    for (const auto& d : found) dets.push_back({i, d});
    for (const auto& g : item.boxes) gts.push_back({i, g});
  }

  eval::EvalReport rep =
      eval::compute_report(dets, gts, class_names, params.conf_threshold);
  rep.images = static_cast<int>(dataset.size());
  rep.condition = corruption_kind_name(corruption.kind);
  return rep;
}

}  // namespace diffdet
