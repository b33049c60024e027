#ifndef MEMFCN_DATA_HPP
#define MEMFCN_DATA_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "memfcn/common.hpp"
#include "memfcn/resample.hpp"
#include "memfcn/rng.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/volio.hpp"

namespace memfcn {

// Intensity preprocessing constants (CT-style window, per-case z-score).
inline constexpr double kClipLo = -79.0;
inline constexpr double kClipHi = 304.0;
inline constexpr double kZscoreFloor = 1e-8;
inline constexpr std::array<double, 3> kTargetSpacing = {3.22, 1.62, 1.62};

/* Synthetic abdominal-style phantoms: an ellipsoidal organ on a darker
   background, a smaller co-axial tumor ellipsoid strictly inside it, and
   Gaussian intensity noise. Labels: 0 background, 1 organ (outside the
   tumor), 2 tumor. */
struct SynthSpec {
  std::array<std::int64_t, 3> extent = {64, 64, 64};
  std::array<double, 3> spacing = kTargetSpacing;
  double mean_background = -50.0;
  double mean_organ = 120.0;
  double mean_tumor = 220.0;
  double noise_sigma = 20.0;
  double organ_frac_lo = 0.50, organ_frac_hi = 0.75;  // semi-axes / half-extent
  double tumor_frac_lo = 0.25, tumor_frac_hi = 0.45;  // semi-axes / organ semi-axes
  std::uint64_t seed = 1;

  void validate() const {
    for (std::int64_t e : extent) check_config(e >= 8, "synth: extents must be at least 8");
    for (double s : spacing) check_config(s > 0.0, "synth: spacing must be positive");
    check_config(noise_sigma >= 0.0, "synth: noise_sigma must be non-negative");
    check_config(0.0 < organ_frac_lo && organ_frac_lo <= organ_frac_hi && organ_frac_hi < 0.95,
                 "synth: organ fraction range must lie inside (0, 0.95)");
    check_config(0.0 < tumor_frac_lo && tumor_frac_lo <= tumor_frac_hi && tumor_frac_hi < 0.7,
                 "synth: tumor fraction range must lie inside (0, 0.7)");
  }
};

namespace detail {

template <typename T>
T json_field(const nlohmann::json& j, const char* key, T fallback) {
  auto it = j.find(key);
  return it == j.end() ? fallback : it->get<T>();
}

}  // namespace detail

inline SynthSpec synth_spec_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad synth spec: ") + e.what());
  }
  static const char* known[] = {"extent", "spacing", "mean_background", "mean_organ",
                                "mean_tumor", "noise_sigma", "organ_frac", "tumor_frac", "seed"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("synth spec: unknown key \"" + key + "\"");
  }
  SynthSpec s;
  try {
    s.extent = detail::json_field(j, "extent", s.extent);
    s.spacing = detail::json_field(j, "spacing", s.spacing);
    s.mean_background = detail::json_field(j, "mean_background", s.mean_background);
    s.mean_organ = detail::json_field(j, "mean_organ", s.mean_organ);
    s.mean_tumor = detail::json_field(j, "mean_tumor", s.mean_tumor);
    s.noise_sigma = detail::json_field(j, "noise_sigma", s.noise_sigma);
    if (j.contains("organ_frac")) {
      auto v = j.at("organ_frac").get<std::array<double, 2>>();
      s.organ_frac_lo = v[0];
      s.organ_frac_hi = v[1];
    }
    if (j.contains("tumor_frac")) {
      auto v = j.at("tumor_frac").get<std::array<double, 2>>();
      s.tumor_frac_lo = v[0];
      s.tumor_frac_hi = v[1];
    }
    s.seed = detail::json_field(j, "seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad synth spec value: ") + e.what());
  }
  s.validate();
  return s;
}

inline std::string synth_spec_to_json(const SynthSpec& s) {
  nlohmann::json j;
  j["extent"] = s.extent;
  j["spacing"] = s.spacing;
  j["mean_background"] = s.mean_background;
  j["mean_organ"] = s.mean_organ;
  j["mean_tumor"] = s.mean_tumor;
  j["noise_sigma"] = s.noise_sigma;
  j["organ_frac"] = std::array<double, 2>{s.organ_frac_lo, s.organ_frac_hi};
  j["tumor_frac"] = std::array<double, 2>{s.tumor_frac_lo, s.tumor_frac_hi};
  j["seed"] = s.seed;
  return j.dump(2) + "\n";
}

struct SynthCase {
  Tensor image;   // [1,D,H,W] F32, raw intensities
  Tensor labels;  // [D,H,W] F32 in {0,1,2}
};

/* One phantom. The tumor ellipsoid shares the organ's axes at scale s, so
   placing its center at organ-normalized radius <= 1 - s - margin keeps it
   strictly inside the organ surface. */
inline SynthCase synth_case(const SynthSpec& spec, std::int64_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const double d = static_cast<double>(spec.extent[0]);
  const double h = static_cast<double>(spec.extent[1]);
  const double w = static_cast<double>(spec.extent[2]);

  auto uniform_in = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };

  // Organ: semi-axes per axis, center jittered so the organ stays in frame.
  std::array<double, 3> oa{}, oc{};
  const std::array<double, 3> half = {d / 2, h / 2, w / 2};
  for (int i = 0; i < 3; ++i) {
    oa[static_cast<std::size_t>(i)] =
        uniform_in(spec.organ_frac_lo, spec.organ_frac_hi) * half[static_cast<std::size_t>(i)];
    const double slack = half[static_cast<std::size_t>(i)] - oa[static_cast<std::size_t>(i)];
    oc[static_cast<std::size_t>(i)] =
        half[static_cast<std::size_t>(i)] + uniform_in(-0.8, 0.8) * slack;
  }

  // Tumor: organ axes scaled by s, center at organ-normalized radius rho.
  const double s = uniform_in(spec.tumor_frac_lo, spec.tumor_frac_hi);
  constexpr double kMargin = 0.05;
  const double rho_max = std::max(0.0, 1.0 - s - kMargin);
  const double rho = rho_max * std::cbrt(rng.uniform());
  // Uniform direction via normal deviates.
  std::array<double, 3> dir = {rng.normal(), rng.normal(), rng.normal()};
  double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  if (norm < 1e-12) {
    dir = {1.0, 0.0, 0.0};
    norm = 1.0;
  }
  std::array<double, 3> ta{}, tc{};
  for (int i = 0; i < 3; ++i) {
    ta[static_cast<std::size_t>(i)] = s * oa[static_cast<std::size_t>(i)];
    tc[static_cast<std::size_t>(i)] = oc[static_cast<std::size_t>(i)] +
                                      rho * dir[static_cast<std::size_t>(i)] / norm *
                                          oa[static_cast<std::size_t>(i)];
  }

  SynthCase out;
  out.image = Tensor(Shape{1, spec.extent[0], spec.extent[1], spec.extent[2]}, DType::F32);
  out.labels = Tensor(Shape{spec.extent[0], spec.extent[1], spec.extent[2]}, DType::F32);
  auto img = out.image.f32();
  auto lab = out.labels.f32();
  std::int64_t o = 0;
  for (std::int64_t z = 0; z < spec.extent[0]; ++z)
    for (std::int64_t y = 0; y < spec.extent[1]; ++y)
      for (std::int64_t x = 0; x < spec.extent[2]; ++x, ++o) {
        const double pz = (static_cast<double>(z) + 0.5 - oc[0]) / oa[0];
        const double py = (static_cast<double>(y) + 0.5 - oc[1]) / oa[1];
        const double px = (static_cast<double>(x) + 0.5 - oc[2]) / oa[2];
        const bool organ = pz * pz + py * py + px * px <= 1.0;
        const double qz = (static_cast<double>(z) + 0.5 - tc[0]) / ta[0];
        const double qy = (static_cast<double>(y) + 0.5 - tc[1]) / ta[1];
        const double qx = (static_cast<double>(x) + 0.5 - tc[2]) / ta[2];
        const bool tumor = qz * qz + qy * qy + qx * qx <= 1.0;
        double mean = spec.mean_background;
        float cls = 0.0f;
        if (tumor) {
          mean = spec.mean_tumor;
          cls = 2.0f;
        } else if (organ) {
          mean = spec.mean_organ;
          cls = 1.0f;
        }
        img[static_cast<std::size_t>(o)] =
            static_cast<float>(mean + spec.noise_sigma * rng.normal());
        lab[static_cast<std::size_t>(o)] = cls;
      }
  return out;
}

// --------------------------------------------------------------- preprocess

// Window to [-79, 304], then z-score over the case (std floored at 1e-8).
inline void clip_and_zscore(Tensor& x) {
  auto p = x.f32();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = std::min(kClipHi, std::max(kClipLo, static_cast<double>(p[i])));
    p[i] = static_cast<float>(v);
    sum += v;
  }
  const double mean = sum / static_cast<double>(p.size());
  double ss = 0.0;
  for (float v : p) ss += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  const double stddev = std::max(kZscoreFloor, std::sqrt(ss / static_cast<double>(p.size())));
  for (std::size_t i = 0; i < p.size(); ++i)
    p[i] = static_cast<float>((static_cast<double>(p[i]) - mean) / stddev);
}

// Full image pipeline: resample to the target spacing, window, z-score.
inline Tensor preprocess_image(const Tensor& raw, const std::array<double, 3>& spacing) {
  check_shape(raw.ndim() == 4, "preprocess_image: expected a C,D,H,W tensor");
  Tensor x = spacing == kTargetSpacing ? raw.clone()
                                       : resample_trilinear(raw, spacing, kTargetSpacing);
  if (x.dtype() != DType::F32) x = x.to(DType::F32);
  clip_and_zscore(x);
  return x;
}

inline Tensor preprocess_labels(const Tensor& raw, const std::array<double, 3>& spacing) {
  check_shape(raw.ndim() == 3, "preprocess_labels: expected a D,H,W tensor");
  if (spacing == kTargetSpacing) return raw.clone();
  return resample_nearest(raw, spacing, kTargetSpacing);
}

// ------------------------------------------------------------------- crops

enum class CropKind { Random, Center };

struct PatchPair {
  Tensor image;   // [1,pd,ph,pw]
  Tensor labels;  // [pd,ph,pw]
};

inline PatchPair crop_patch(const Tensor& image, const Tensor& labels,
                            const std::array<std::int64_t, 3>& patch, CropKind kind,
                            std::uint64_t seed = 0) {
  check_shape(image.ndim() == 4 && labels.ndim() == 3, "crop_patch: image [C,D,H,W], labels [D,H,W]");
  const std::array<std::int64_t, 3> ext = {image.dim(1), image.dim(2), image.dim(3)};
  for (int i = 0; i < 3; ++i)
    check_config(patch[static_cast<std::size_t>(i)] >= 1 &&
                     patch[static_cast<std::size_t>(i)] <= ext[static_cast<std::size_t>(i)],
                 "crop_patch: patch exceeds volume extents");
  std::array<std::int64_t, 3> off{};
  if (kind == CropKind::Center) {
    for (int i = 0; i < 3; ++i)
      off[static_cast<std::size_t>(i)] =
          (ext[static_cast<std::size_t>(i)] - patch[static_cast<std::size_t>(i)]) / 2;
  } else {
    Rng rng(seed);
    for (int i = 0; i < 3; ++i) {
      const std::int64_t room =
          ext[static_cast<std::size_t>(i)] - patch[static_cast<std::size_t>(i)] + 1;
      off[static_cast<std::size_t>(i)] =
          static_cast<std::int64_t>(rng.uniform() * static_cast<double>(room));
      if (off[static_cast<std::size_t>(i)] >= room) off[static_cast<std::size_t>(i)] = room - 1;
    }
  }
  PatchPair out;
  out.image = Tensor(Shape{image.dim(0), patch[0], patch[1], patch[2]}, image.dtype());
  out.labels = Tensor(Shape{patch[0], patch[1], patch[2]}, labels.dtype());
  for (std::int64_t c = 0; c < image.dim(0); ++c)
    for (std::int64_t z = 0; z < patch[0]; ++z)
      for (std::int64_t y = 0; y < patch[1]; ++y)
        for (std::int64_t x = 0; x < patch[2]; ++x) {
          const std::int64_t src =
              ((c * ext[0] + off[0] + z) * ext[1] + off[1] + y) * ext[2] + off[2] + x;
          const std::int64_t dst = ((c * patch[0] + z) * patch[1] + y) * patch[2] + x;
          out.image.set(dst, image.at(src));
        }
  for (std::int64_t z = 0; z < patch[0]; ++z)
    for (std::int64_t y = 0; y < patch[1]; ++y)
      for (std::int64_t x = 0; x < patch[2]; ++x) {
        const std::int64_t src = ((off[0] + z) * ext[1] + off[1] + y) * ext[2] + off[2] + x;
        const std::int64_t dst = (z * patch[1] + y) * patch[2] + x;
        out.labels.set(dst, labels.at(src));
      }
  return out;
}

// ----------------------------------------------------------------- dataset

struct CasePaths {
  std::string dir;     // case_0007
  std::string image;   // case_0007/image.vol
  std::string labels;  // case_0007/labels.vol
};

struct Manifest {
  SynthSpec spec;
  std::vector<CasePaths> cases;
};

inline void write_manifest(const std::string& root, const Manifest& m) {
  nlohmann::json j;
  j["spec"] = nlohmann::json::parse(synth_spec_to_json(m.spec));
  nlohmann::json cases = nlohmann::json::array();
  for (const CasePaths& c : m.cases) {
    nlohmann::json cj;
    cj["dir"] = c.dir;
    cj["image"] = c.image;
    cj["labels"] = c.labels;
    cases.push_back(std::move(cj));
  }
  j["cases"] = std::move(cases);
  detail::write_file(root + "/manifest.json", j.dump(2) + "\n");
}

inline Manifest read_manifest(const std::string& root) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(root + "/manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
  Manifest m;
  m.spec = synth_spec_from_json(j.at("spec").dump());
  for (const nlohmann::json& cj : j.at("cases")) {
    CasePaths c;
    c.dir = cj.at("dir").get<std::string>();
    c.image = cj.at("image").get<std::string>();
    c.labels = cj.at("labels").get<std::string>();
    m.cases.push_back(std::move(c));
  }
  return m;
}

// Generates `count` phantoms under root/case_%04d/ plus a manifest.
inline Manifest synth_dataset(const SynthSpec& spec, const std::string& root, int count) {
  spec.validate();
  check_config(count >= 1, "synth: case count must be >= 1");
  std::filesystem::create_directories(root);
  Manifest m;
  m.spec = spec;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "case_%04d", i);
    const std::string dir = root + "/" + name;
    std::filesystem::create_directories(dir);
    SynthCase sc = synth_case(spec, i);
    write_vol(dir + "/image.vol", sc.image);
    write_vol(dir + "/labels.vol", sc.labels, /*as_labels=*/true);
    CasePaths c;
    c.dir = name;
    c.image = std::string(name) + "/image.vol";
    c.labels = std::string(name) + "/labels.vol";
    m.cases.push_back(std::move(c));
  }
  write_manifest(root, m);
  return m;
}

struct CaseData {
  Tensor image;   // [1,D,H,W] F32, preprocessed
  Tensor labels;  // [D,H,W] F32
};

// Loads and preprocesses every case in manifest order.
inline std::vector<CaseData> load_dataset(const std::string& root) {
  const Manifest m = read_manifest(root);
  std::vector<CaseData> out;
  out.reserve(m.cases.size());
  for (const CasePaths& c : m.cases) {
    VolData img = read_vol(root + "/" + c.image);
    VolData lab = read_vol(root + "/" + c.labels);
    check_shape(img.tensor.ndim() == 4, "dataset image must be C,D,H,W");
    check_shape(lab.tensor.ndim() == 3, "dataset labels must be D,H,W");
    CaseData cd;
    cd.image = preprocess_image(img.tensor, m.spec.spacing);
    cd.labels = preprocess_labels(lab.tensor, m.spec.spacing);
    check_shape(cd.image.dim(1) == cd.labels.dim(0) && cd.image.dim(2) == cd.labels.dim(1) &&
                    cd.image.dim(3) == cd.labels.dim(2),
                "dataset image/label extents disagree after preprocessing");
    out.push_back(std::move(cd));
  }
  return out;
}

}  // namespace memfcn

#endif  // MEMFCN_DATA_HPP
