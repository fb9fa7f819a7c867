#include "diffdet/training.hpp"

#include <algorithm>
#include <cmath>

#include "diffdet/detector_ops.hpp"

namespace diffdet {

namespace {

// random square crop in diffusion range; full image when crop == 0
TensorF crop_or_full(const TensorF& img, int crop, Rng& rng) {
  if (crop <= 0 || (crop >= img.height() && crop >= img.width())) return img;
  const int max_y = img.height() - crop;
  const int max_x = img.width() - crop;
  const int y0 = max_y > 0 ? rng.uniform_int(0, max_y) : 0;
  const int x0 = max_x > 0 ? rng.uniform_int(0, max_x) : 0;
  TensorF out({img.channels(), crop, crop});
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

struct ValItem {
  TensorF x_t;
  TensorF eps;
  int t;
};

double denoiser_loss_forward_only(ddpm::UNetF& net, const std::vector<ValItem>& items) {
  double total = 0;
  for (const auto& item : items) {
    const auto out = net.forward(item.x_t, item.t);
    double se = 0;
    for (std::int64_t i = 0; i < item.eps.numel(); ++i) {
      const double d = static_cast<double>(out.eps_pred[i]) - static_cast<double>(item.eps[i]);
      se += d * d;
    }
    total += se / static_cast<double>(item.eps.numel());
  }
  return total / static_cast<double>(items.size());
}

}  // namespace

DdpmTrainResult train_denoiser(ddpm::UNetF& net, const std::vector<Image>& images,
                               const ddpm::NoiseSchedule& schedule,
                               const DdpmTrainParams& params) {
  if (images.empty()) throw std::invalid_argument("train_denoiser: empty dataset");

  std::vector<TensorF> diff_images;
  diff_images.reserve(images.size());
  for (const auto& img : images) diff_images.push_back(to_diffusion_range(img).data);

  // fixed validation items: deterministic (image, t, eps) triples
  Rng val_rng(derive_seed(params.seed, "ddpm.val"));
  std::vector<ValItem> val_items;
  const int n_val = std::max(1, std::min<int>(params.val_items,
                                              static_cast<int>(images.size()) * 2));
  for (int i = 0; i < n_val; ++i) {
    ValItem item;
    const auto& base =
        diff_images[val_rng.uniform_int(static_cast<std::uint64_t>(diff_images.size()))];
    const TensorF x0 = crop_or_full(base, params.crop, val_rng);
    item.t = val_rng.uniform_int(1, schedule.steps);
    item.eps = ddpm::standard_normal_like<float>(x0.shape(), val_rng);
    item.x_t = ddpm::q_sample(x0, item.t, item.eps, schedule);
    val_items.push_back(std::move(item));
  }

  DdpmTrainResult result;
  result.val_loss_initial = denoiser_loss_forward_only(net, val_items);

  Rng rng(derive_seed(params.seed, "ddpm.train"));
  nn::Adam<float> adam(static_cast<float>(params.lr));
  auto adam_params = net.param_list();

  for (int step = 0; step < params.steps; ++step) {
    net.zero_grads();
    double batch_loss = 0;
    for (int b = 0; b < params.batch_size; ++b) {
      const auto& base =
          diff_images[rng.uniform_int(static_cast<std::uint64_t>(diff_images.size()))];
      const TensorF x0 = crop_or_full(base, params.crop, rng);
      const int t = rng.uniform_int(1, schedule.steps);
      const TensorF eps = ddpm::standard_normal_like<float>(x0.shape(), rng);
      const TensorF x_t = ddpm::q_sample(x0, t, eps, schedule);

      auto out = net.forward(x_t, t);
      const auto n = static_cast<double>(eps.numel());
      double se = 0;
      TensorF deps(eps.shape());
      for (std::int64_t i = 0; i < eps.numel(); ++i) {
        const double d = static_cast<double>(out.eps_pred[i]) - static_cast<double>(eps[i]);
        se += d * d;
        deps[i] = static_cast<float>(2.0 * d / (n * params.batch_size));
      }
      batch_loss += se / n;
      net.backward(deps);
    }
    batch_loss /= params.batch_size;
    if (!std::isfinite(batch_loss))
      throw DivergenceError("ddpm training diverged at step " + std::to_string(step) +
                            " (loss=" + std::to_string(batch_loss) + ")");
    result.loss_history.push_back(batch_loss);
    adam.step(adam_params);
  }

  result.val_loss_final = denoiser_loss_forward_only(net, val_items);
  return result;
}

// ---------------------------------------------------------------------------

DetectorTrainResult train_detector(det::DetectorF& model,
                                   features::FusionProjector* projector,
                                   const TapSource& taps,
                                   const std::vector<data::AnnotatedImage>& train_set,
                                   const DetectorTrainParams& params, TrainMode mode) {
  if (train_set.empty()) throw std::invalid_argument("train_detector: empty dataset");
  const bool injected = model.config().injection.enabled;
  if (mode == TrainMode::DiffYolo && (!injected || projector == nullptr || !taps))
    throw std::invalid_argument("train_detector: diffyolo mode needs injection, projector and taps");
  if (mode == TrainMode::Baseline && injected)
    throw std::invalid_argument("train_detector: baseline mode must not enable injection");

  // trainable parameter selection; everything else keeps its weights
  std::vector<std::pair<TensorF*, TensorF*>> trainable;
  auto want = [&](const std::string& name) {
    if (mode == TrainMode::Baseline) return true;
    if (name.rfind("adapter.", 0) == 0 || name.rfind("head", 0) == 0) return true;
    if (params.train_neck && name.rfind("neck.", 0) == 0) return true;
    return false;  // backbone stays frozen in diffyolo mode
  };
  model.visit_params([&](const std::string& name, TensorF& w, TensorF& g) {
    if (want(name)) trainable.emplace_back(&w, &g);
  });
  if (projector && mode == TrainMode::DiffYolo)
    projector->visit_params(
        [&](const std::string&, TensorF& w, TensorF& g) { trainable.emplace_back(&w, &g); });

  nn::Adam<float> adam(static_cast<float>(params.lr));
  DetectorTrainResult result;

  std::vector<int> indices(train_set.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);

  const int total_epochs = std::max(1, params.epochs);
  long step_counter = 0;
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    Rng epoch_rng(derive_seed(params.seed, "detector.epoch", static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(indices);

    // linear decay to final_lr_fraction * lr over the run
    const double frac = total_epochs > 1 ? static_cast<double>(epoch) / (total_epochs - 1) : 0.0;
    const double lr_now = params.lr * (1.0 - (1.0 - params.final_lr_fraction) * frac);
    adam.set_lr(static_cast<float>(lr_now));

    for (std::size_t start = 0; start < indices.size(); start += params.batch_size) {
      const std::size_t end = std::min(indices.size(), start + params.batch_size);
      const auto count = static_cast<int>(end - start);

      model.zero_grads();
      if (projector) projector->zero_grads();
      double batch_loss = 0;

      for (std::size_t bi = start; bi < end; ++bi) {
        const auto& item = train_set[static_cast<std::size_t>(indices[bi])];
        const Image diff = to_diffusion_range(item.image);

        std::vector<TensorF> raw;
        features::FusedFeature fused;
        if (mode == TrainMode::DiffYolo) {
          const features::TapStack stack = taps(item.id, item.image);
          fused = projector->forward(stack);
          raw = model.forward(diff.data, &fused.data);
        } else {
          raw = model.forward(diff.data);
        }

        std::vector<TensorF> draw;
        const auto loss = det::detection_loss(raw, item.boxes, model.config(), &draw);
        batch_loss += loss.total;
        for (auto& g : draw) g.scale_(1.0f / static_cast<float>(count));
        const TensorF dfused = model.backward(draw);
        if (mode == TrainMode::DiffYolo) projector->backward(dfused);
      }

      batch_loss /= count;
      if (!std::isfinite(batch_loss))
        throw DivergenceError("detector training diverged at step " +
                              std::to_string(step_counter));
      result.loss_history.push_back(batch_loss);
      adam.step(trainable);
      ++step_counter;
    }
  }
  return result;
}

}  // namespace diffdet
