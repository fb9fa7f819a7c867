#include "diffdet/features.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "diffdet/hash.hpp"

namespace fs = std::filesystem;

namespace diffdet::features {

namespace {
constexpr char kFeatureMagic[9] = "DFFEAT01";
}

nlohmann::json ExtractionConfig::to_json() const {
  return {{"t", t},
          {"tap_levels", tap_levels},
          {"fused_channels", fused_channels},
          {"fused_h", fused_h},
          {"fused_w", fused_w},
          {"seed", seed}};
}

ExtractionConfig ExtractionConfig::from_json(const nlohmann::json& j) {
  ExtractionConfig c;
  c.t = j.at("t").get<int>();
  c.tap_levels = j.at("tap_levels").get<std::vector<int>>();
  c.fused_channels = j.at("fused_channels").get<int>();
  c.fused_h = j.at("fused_h").get<int>();
  c.fused_w = j.at("fused_w").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

nlohmann::json Provenance::to_json() const {
  return {{"image_id", image_id},
          {"t", t},
          {"tap_levels", tap_levels},
          {"eps_seed", eps_seed},
          {"ddpm_checkpoint", ddpm_checkpoint}};
}

Provenance Provenance::from_json(const nlohmann::json& j) {
  Provenance p;
  p.image_id = j.at("image_id").get<std::string>();
  p.t = j.at("t").get<int>();
  p.tap_levels = j.at("tap_levels").get<std::vector<int>>();
  p.eps_seed = j.at("eps_seed").get<std::uint64_t>();
  p.ddpm_checkpoint = j.at("ddpm_checkpoint").get<std::string>();
  return p;
}

// ---------------------------------------------------------------------------
// Fusion

FusionProjector::FusionProjector(const std::vector<int>& tap_levels,
                                 const std::vector<int>& tap_channels, int out_channels)
    : tap_levels_(tap_levels) {
  if (tap_levels.size() != tap_channels.size())
    throw std::invalid_argument("fusion: levels/channels size mismatch");
  for (std::size_t i = 0; i < tap_levels.size(); ++i)
    proj_.emplace_back("fusion.proj" + std::to_string(tap_levels[i]),
                       tap_channels[i], out_channels, 1, 1, 0);
}

void FusionProjector::init(Rng& rng) {
  for (auto& p : proj_) p.init(rng);
}

FusedFeature FusionProjector::forward(const TapStack& stack) {
  if (stack.taps.size() != proj_.size())
    throw std::invalid_argument("fusion: tap count does not match projector");
  FusedFeature out;
  out.prov = stack.prov;
  for (std::size_t i = 0; i < proj_.size(); ++i) {
    TensorF y = proj_[i].forward(stack.taps[i]);
    if (i == 0)
      out.data = std::move(y);
    else
      out.data.add_(y);
  }
  return out;
}

void FusionProjector::backward(const TensorF& dfused) {
  // sum fusion: the same gradient feeds every projection
  for (auto& p : proj_) p.backward(dfused);
}

void FusionProjector::visit_params(const nn::ParamVisitor<float>& v) {
  for (auto& p : proj_) p.visit_params(v);
}

void FusionProjector::zero_grads() {
  visit_params([](const std::string&, TensorF&, TensorF& g) { g.fill(0.0f); });
}

// ---------------------------------------------------------------------------
// Extraction

std::uint64_t eps_seed_for_image(std::uint64_t root, const std::string& image_id) {
  return derive_seed(root, "features.eps." + image_id);
}

TapStack extract_taps(const Image& image, ddpm::UNetF& unet,
                      const ddpm::NoiseSchedule& schedule, const ExtractionConfig& cfg,
                      const std::string& image_id, const std::string& ddpm_hash) {
  schedule.require_valid_t(cfg.t);
  for (int level : cfg.tap_levels) {
    bool present = false;
    for (int l : unet.config().tap_levels) present = present || l == level;
    if (!present)
      throw std::invalid_argument("extract_taps: level " + std::to_string(level) +
                                  " not tapped by this U-Net");
  }

  TapStack out;
  out.prov.image_id = image_id;
  out.prov.t = cfg.t;
  out.prov.tap_levels = cfg.tap_levels;
  out.prov.eps_seed = eps_seed_for_image(cfg.seed, image_id);
  out.prov.ddpm_checkpoint = ddpm_hash;

  const Image diff = to_diffusion_range(image);
  Rng rng(out.prov.eps_seed);
  const TensorF eps = ddpm::standard_normal_like<float>(diff.data.shape(), rng);
  const TensorF x_t = ddpm::q_sample(diff.data, cfg.t, eps, schedule);

  auto result = unet.forward(x_t, cfg.t);
  for (int level : cfg.tap_levels) {
    const auto it = result.taps.find(level);
    if (it == result.taps.end())
      throw std::invalid_argument("extract_taps: U-Net produced no tap for level " +
                                  std::to_string(level));
    out.taps.push_back(nn::bilinear_resize(it->second, cfg.fused_h, cfg.fused_w));
  }
  return out;
}

FusedFeature extract_fused(const Image& image, ddpm::UNetF& unet,
                           const ddpm::NoiseSchedule& schedule, const ExtractionConfig& cfg,
                           const std::string& image_id, const std::string& ddpm_hash,
                           FusionProjector& projector) {
  return projector.forward(extract_taps(image, unet, schedule, cfg, image_id, ddpm_hash));
}

// ---------------------------------------------------------------------------
// Cache files

void save_feature(const TapStack& stack, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["dtype"] = "f32le";
  nlohmann::json taps = nlohmann::json::array();
  std::size_t payload_floats = 0;
  for (std::size_t i = 0; i < stack.taps.size(); ++i) {
    taps.push_back({{"level", stack.prov.tap_levels.at(i)},
                    {"shape", stack.taps[i].shape()}});
    payload_floats += static_cast<std::size_t>(stack.taps[i].numel());
  }
  header["taps"] = std::move(taps);
  header["provenance"] = stack.prov.to_json();
  const std::string hjson = header.dump();

  std::string payload;
  payload.reserve(payload_floats * 4);
  for (const auto& t : stack.taps)
    payload.append(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::size_t>(t.numel()) * 4);
  const std::uint32_t checksum = crc32(payload.data(), payload.size());

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_feature: cannot open " + path);
  f.write(kFeatureMagic, 8);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hjson.size());
  f.write(reinterpret_cast<const char*>(&hlen), 4);
  f.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  f.write(reinterpret_cast<const char*>(&checksum), 4);
  if (!f) throw std::runtime_error("save_feature: write failed for " + path);
}

void require_compatible(const Provenance& have, const Provenance& want) {
  auto mismatch = [&](const std::string& what) {
    throw CacheStaleError("stale feature cache (" + what + " changed) for image '" +
                          want.image_id + "'");
  };
  if (have.image_id != want.image_id) mismatch("image id");
  if (have.t != want.t) mismatch("timestep");
  if (have.tap_levels != want.tap_levels) mismatch("tap levels");
  if (have.eps_seed != want.eps_seed) mismatch("eps seed");
  if (have.ddpm_checkpoint != want.ddpm_checkpoint) mismatch("ddpm checkpoint");
}

TapStack load_feature(const std::string& path, const Provenance* expect) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_feature: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || bytes.compare(0, 8, kFeatureMagic, 8) != 0)
    throw CacheCorruptError("not a feature cache file: " + path);

  std::uint32_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 4);
  if (12 + static_cast<std::size_t>(hlen) + 4 > bytes.size())
    throw CacheCorruptError("truncated feature cache header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::exception&) {
    throw CacheCorruptError("unreadable feature cache header: " + path);
  }

  const std::size_t payload_off = 12 + hlen;
  const std::size_t payload_len = bytes.size() - payload_off - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc32(bytes.data() + payload_off, payload_len) != stored)
    throw CacheCorruptError("feature cache checksum mismatch: " + path);

  TapStack stack;
  stack.prov = Provenance::from_json(header.at("provenance"));
  if (header.at("dtype").get<std::string>() != "f32le")
    throw CacheCorruptError("unsupported feature dtype in " + path);

  std::size_t off = payload_off;
  for (const auto& tj : header.at("taps")) {
    std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
    const auto numel = TensorF::numel_of(shape);
    const std::size_t nbytes = static_cast<std::size_t>(numel) * 4;
    if (off + nbytes > bytes.size() - 4)
      throw CacheCorruptError("feature cache payload short: " + path);
    std::vector<float> data(static_cast<std::size_t>(numel));
    std::memcpy(data.data(), bytes.data() + off, nbytes);
    off += nbytes;
    stack.taps.emplace_back(std::move(shape), std::move(data));
  }
  if (off != bytes.size() - 4)
    throw CacheCorruptError("feature cache payload overlong: " + path);

  if (expect) require_compatible(stack.prov, *expect);
  return stack;
}

// ---------------------------------------------------------------------------
// Batch cache building

nlohmann::json CacheManifest::to_json() const {
  nlohmann::json entries_j = nlohmann::json::array();
  for (const auto& e : entries)
    entries_j.push_back({{"id", e.id}, {"path", e.path}, {"checksum", e.checksum}});
  return {{"version", version},
          {"ddpm_checkpoint", ddpm_checkpoint},
          {"extraction", extraction.to_json()},
          {"entries", std::move(entries_j)}};
}

CacheManifest CacheManifest::from_json(const nlohmann::json& j) {
  CacheManifest m;
  m.version = j.at("version").get<int>();
  m.ddpm_checkpoint = j.at("ddpm_checkpoint").get<std::string>();
  m.extraction = ExtractionConfig::from_json(j.at("extraction"));
  for (const auto& e : j.at("entries"))
    m.entries.push_back({e.at("id").get<std::string>(), e.at("path").get<std::string>(),
                         e.at("checksum").get<std::string>()});
  return m;
}

namespace {

std::string cache_filename(const std::string& id) {
  std::string safe;
  for (char c : id)
    safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return safe + "_" + fnv1a64_hex(id).substr(0, 8) + ".dft";
}

std::string file_crc_hex(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32(bytes.data(), bytes.size()));
  return buf;
}

}  // namespace

CacheManifest build_cache(const std::vector<std::pair<std::string, Image>>& images,
                          ddpm::UNetF& unet, const ddpm::NoiseSchedule& schedule,
                          const ExtractionConfig& cfg, const std::string& ddpm_hash,
                          const std::string& out_dir, BuildCacheStats* stats) {
  fs::create_directories(out_dir);
  CacheManifest manifest;
  manifest.ddpm_checkpoint = ddpm_hash;
  manifest.extraction = cfg;

  BuildCacheStats local;
  BuildCacheStats& st = stats ? *stats : local;

  for (const auto& [id, image] : images) {
    const std::string fname = cache_filename(id);
    const std::string full = (fs::path(out_dir) / fname).string();

    Provenance want;
    want.image_id = id;
    want.t = cfg.t;
    want.tap_levels = cfg.tap_levels;
    want.eps_seed = eps_seed_for_image(cfg.seed, id);
    want.ddpm_checkpoint = ddpm_hash;

    bool valid = false;
    if (fs::exists(full)) {
      try {
        (void)load_feature(full, &want);
        valid = true;
      } catch (const std::exception&) {
        valid = false;  // rebuilt below
      }
    }

    try {
      if (!valid) {
        const TapStack stack = extract_taps(image, unet, schedule, cfg, id, ddpm_hash);
        save_feature(stack, full);
        ++st.extracted;
      } else {
        ++st.skipped;
      }
      manifest.entries.push_back({id, fname, file_crc_hex(full)});
    } catch (const std::exception&) {
      st.failed_ids.push_back(id);
    }
  }
  return manifest;
}

CacheManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
  nlohmann::json j;
  f >> j;
  return CacheManifest::from_json(j);
}

void save_manifest(const CacheManifest& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_manifest: cannot open " + path);
  f << m.to_json().dump(2) << "\n";
}

}  // namespace diffdet::features
