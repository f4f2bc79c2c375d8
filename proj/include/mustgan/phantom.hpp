#pragma once

// Procedural multi-contrast phantoms. Each slice is one tissue-label map rendered once per
// contrast through an intensity lookup, so every contrast is co-registered by construction.
//
// Tissue labels: 0 background, 1 scalp, 2 CSF, 3 gray matter, 4 white matter, 5 lesion.
// Lesions are the unique features: each one is always drawn in the target, and with probability
// unique_feature_rate it is visible in exactly one source (otherwise in all of them). Where a
// source does not show a lesion it renders the tissue underneath.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/core/parallel.hpp"
#include "mustgan/mtns.hpp"
#include "mustgan/nn.hpp"

namespace mustgan {

/// Invalid or unreadable dataset; names the offending file or field.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kLesionLabel = 5;

struct PhantomSpec {
  std::size_t image_size = 64;
  std::size_t n_subjects = 10;
  std::size_t slices_per_subject = 20;
  std::vector<std::string> contrasts = {"A", "B", "T"};
  std::size_t tissue_count = 6;
  /// intensity[c][label]: mean intensity of tissue `label` in contrast c.
  std::vector<std::vector<double>> intensity = {{0.0, 0.80, 0.15, 0.50, 0.75, 0.35},
                                                {0.0, 0.50, 0.95, 0.60, 0.35, 0.85},
                                                {0.0, 0.70, 0.80, 0.65, 0.50, 0.95}};
  double unique_feature_rate = 0.5;
  double noise_sigma = 0.02;
  /// Lesions per slice are drawn uniformly from 0..max_lesions.
  std::size_t max_lesions = 3;
  /// Peak relative amplitude of the smooth multiplicative bias field.
  double bias_strength = 0.1;

  std::size_t K() const { return contrasts.size() - 1; }

  void validate() const {
    if (contrasts.size() < 2) throw std::invalid_argument("phantom needs at least 2 contrasts (K >= 1 sources + target)");
    if (image_size < 8) throw std::invalid_argument("phantom image_size must be >= 8");
    if (n_subjects < 1 || slices_per_subject < 1) throw std::invalid_argument("phantom needs subjects and slices");
    if (intensity.size() != contrasts.size())
      throw std::invalid_argument("intensity lookup has " + std::to_string(intensity.size()) + " rows for " +
                                  std::to_string(contrasts.size()) + " contrasts");
    if (tissue_count != kLesionLabel + 1)
      throw std::invalid_argument("tissue_count must be " + std::to_string(kLesionLabel + 1) +
                                  " (background, scalp, CSF, GM, WM, lesion)");
    for (std::size_t c = 0; c < intensity.size(); ++c) {
      if (intensity[c].size() < tissue_count)
        throw std::invalid_argument("tissue_count " + std::to_string(tissue_count) + " exceeds the intensity lookup of contrast " +
                                    contrasts[c] + " (" + std::to_string(intensity[c].size()) + " entries)");
      for (double v : intensity[c])
        if (!(v >= 0 && v <= 1)) throw std::invalid_argument("intensity lookup of contrast " + contrasts[c] + " leaves [0,1]");
    }
    for (std::size_t a = 0; a < contrasts.size(); ++a)
      for (std::size_t b = a + 1; b < contrasts.size(); ++b)
        if (contrasts[a] == contrasts[b]) throw std::invalid_argument("duplicate contrast name " + contrasts[a]);
    if (!(unique_feature_rate >= 0 && unique_feature_rate <= 1))
      throw std::invalid_argument("unique_feature_rate must lie in [0, 1]");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (!(bias_strength >= 0 && bias_strength < 1)) throw std::invalid_argument("bias_strength must lie in [0, 1)");
  }

  std::size_t contrast_index(const std::string& name) const {
    for (std::size_t c = 0; c < contrasts.size(); ++c)
      if (contrasts[c] == name) return c;
    throw std::invalid_argument("unknown contrast '" + name + "'");
  }
};

using LabelMap = std::vector<std::uint8_t>;

struct PhantomSample {
  std::size_t subject_id = 0;  // 1-based
  std::size_t slice_id = 0;    // 1-based
  /// One [1,1,H,W] image in [0,1] per contrast, in PhantomSpec::contrasts order.
  std::vector<Tensor<double>> images;
  /// Labels shared by the whole slice, lesions included.
  LabelMap tissue_map;
  /// Labels each contrast actually rendered (empty after reading from disk).
  std::vector<LabelMap> contrast_labels;
  std::string split;

  /// Default roles: every contrast but the last is a source.
  std::vector<Tensor<double>> sources() const { return {images.begin(), images.end() - 1}; }
  const Tensor<double>& target() const { return images.back(); }
};

struct PhantomDataset {
  PhantomSpec spec;
  std::uint64_t seed = 0;
  std::vector<PhantomSample> samples;

  std::vector<const PhantomSample*> split(const std::string& name) const {
    std::vector<const PhantomSample*> out;
    for (const auto& s : samples)
      if (s.split == name) out.push_back(&s);
    return out;
  }
};

// ---------------------------------------------------------------------------------------------

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry, angle;
  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = ((x - cx) * c + (y - cy) * s) / rx, v = (-(x - cx) * s + (y - cy) * c) / ry;
    return u * u + v * v <= 1.0;
  }
};

/// Smooth blob: ellipse whose radius is modulated by a few low-order harmonics.
struct Blob {
  double cx, cy, r;
  double a2, p2, a3, p3;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy, t = std::atan2(dy, dx);
    const double rr = r * (1 + a2 * std::cos(2 * t + p2) + a3 * std::cos(3 * t + p3));
    return dx * dx + dy * dy <= rr * rr;
  }
};

struct SubjectAnatomy {
  double cx, cy, rx, ry, angle;
  double csf, gm, wm;  // relative radii of the nested shells
};

inline SubjectAnatomy draw_anatomy(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  SubjectAnatomy a;
  a.cx = 0.5 + 0.04 * (u(rng) - 0.5);
  a.cy = 0.5 + 0.04 * (u(rng) - 0.5);
  a.rx = 0.40 + 0.05 * u(rng);
  a.ry = 0.44 + 0.04 * u(rng);
  a.angle = 0.3 * (u(rng) - 0.5);
  a.csf = 0.88 + 0.03 * u(rng);
  a.gm = 0.80 + 0.04 * u(rng);
  a.wm = 0.60 + 0.08 * u(rng);
  return a;
}

inline Blob draw_blob(std::mt19937_64& rng, double cx, double cy, double spread, double rmin, double rmax) {
  std::uniform_real_distribution<double> u(0, 1);
  const double t = 2 * M_PI * u(rng), d = spread * std::sqrt(u(rng));
  return Blob{cx + d * std::cos(t), cy + d * std::sin(t), rmin + (rmax - rmin) * u(rng),
              0.25 * u(rng),        2 * M_PI * u(rng),   0.15 * u(rng), 2 * M_PI * u(rng)};
}

struct SliceLayout {
  LabelMap base;                     // anatomy without lesions
  std::vector<std::vector<std::size_t>> lesion_pixels;
  std::vector<int> lesion_source;    // -1: visible in every source, else the one source showing it
};

inline SliceLayout draw_slice(const PhantomSpec& spec, const SubjectAnatomy& a, std::size_t slice, std::mt19937_64& rng) {
  const std::size_t n = spec.image_size;
  std::uniform_real_distribution<double> u(0, 1);
  // Slices sweep through the head: outer shells shrink towards the ends of the volume.
  const double z = spec.slices_per_subject == 1 ? 0.0
                                                : -0.7 + 1.4 * static_cast<double>(slice) /
                                                             static_cast<double>(spec.slices_per_subject - 1);
  const double shrink = std::sqrt(1 - 0.5 * z * z);
  const Ellipse head{a.cx, a.cy, a.rx * shrink, a.ry * shrink, a.angle};
  const Ellipse csf{a.cx, a.cy, a.rx * shrink * a.csf, a.ry * shrink * a.csf, a.angle};
  const Ellipse gm{a.cx, a.cy, a.rx * shrink * a.gm, a.ry * shrink * a.gm, a.angle};
  const Ellipse wm{a.cx, a.cy, a.rx * shrink * a.wm, a.ry * shrink * a.wm, a.angle};

  // Ventricles (CSF) and gray-matter islands inside white matter.
  std::vector<std::pair<Blob, std::uint8_t>> blobs;
  const double inner = std::min(wm.rx, wm.ry);
  blobs.push_back({draw_blob(rng, a.cx - 0.06, a.cy, 0.02, 0.03, 0.06), 2});
  blobs.push_back({draw_blob(rng, a.cx + 0.06, a.cy, 0.02, 0.03, 0.06), 2});
  const std::size_t islands = 1 + static_cast<std::size_t>(u(rng) * 3);
  for (std::size_t k = 0; k < islands; ++k) blobs.push_back({draw_blob(rng, a.cx, a.cy, 0.8 * inner, 0.03, 0.07), 3});

  SliceLayout out;
  out.base.assign(n * n, 0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = (x + 0.5) / n, py = (y + 0.5) / n;
      std::uint8_t l = 0;
      if (head.contains(px, py)) l = 1;
      if (csf.contains(px, py)) l = 2;
      if (gm.contains(px, py)) l = 3;
      if (wm.contains(px, py)) {
        l = 4;
        for (const auto& [b, lab] : blobs)
          if (b.contains(px, py)) l = lab;
      }
      out.base[y * n + x] = l;
    }

  const std::size_t n_lesions = static_cast<std::size_t>(u(rng) * (spec.max_lesions + 1)) % (spec.max_lesions + 1);
  for (std::size_t k = 0; k < n_lesions; ++k) {
    const Blob b = draw_blob(rng, a.cx, a.cy, 0.9 * inner, 0.025, 0.06);
    const bool unique = u(rng) < spec.unique_feature_rate;
    const int src = static_cast<int>(u(rng) * static_cast<double>(spec.K())) % static_cast<int>(spec.K());
    std::vector<std::size_t> pixels;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        if (out.base[y * n + x] >= 2 && b.contains((x + 0.5) / n, (y + 0.5) / n)) pixels.push_back(y * n + x);
    out.lesion_pixels.push_back(std::move(pixels));
    out.lesion_source.push_back(unique ? src : -1);
  }
  return out;
}

/// Smooth multiplicative field 1 + s * (bilinear-ish low-order polynomial), within [1-s, 1+s].
inline std::vector<double> bias_field(std::size_t n, double strength, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  const double ax = u(rng), ay = u(rng), axy = u(rng);
  const double norm = std::abs(ax) + std::abs(ay) + std::abs(axy) + 1e-12;
  std::vector<double> f(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = 2 * (x + 0.5) / n - 1, py = 2 * (y + 0.5) / n - 1;
      f[y * n + x] = 1 + strength * (ax * px + ay * py + axy * px * py) / norm;
    }
  return f;
}

}  // namespace detail

/// Divides every image of one subject's volume (one contrast) by the volume maximum.
inline void normalize_volume(std::vector<Tensor<double>*>& volume) {
  double mx = 0;
  for (const auto* t : volume)
    for (double v : t->values()) mx = std::max(mx, v);
  if (!(mx > 0)) throw DataError("cannot normalize an all-zero volume");
  for (auto* t : volume)
    for (double& v : t->mutable_values()) v /= mx;
}

inline void normalize_volume(std::vector<Tensor<double>>& volume) {
  std::vector<Tensor<double>*> ptrs;
  for (auto& t : volume) ptrs.push_back(&t);
  normalize_volume(ptrs);
}

/// Deterministic in (spec, seed); each subject draws from its own stream so generation order
/// and thread count do not matter.
inline PhantomDataset generate_phantoms(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.image_size, C = spec.contrasts.size(), S = spec.slices_per_subject;
  PhantomDataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.samples.resize(spec.n_subjects * S);

  parallel_for(0, spec.n_subjects, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t subj = lo; subj < hi; ++subj) {
      std::mt19937_64 rng(mix_seed(seed, subj + 1));
      const auto anatomy = detail::draw_anatomy(rng);
      std::vector<std::vector<double>> bias;
      for (std::size_t c = 0; c < C; ++c) bias.push_back(detail::bias_field(n, spec.bias_strength, rng));
      std::normal_distribution<double> noise(0.0, 1.0);

      for (std::size_t sl = 0; sl < S; ++sl) {
        auto& s = ds.samples[subj * S + sl];
        s.subject_id = subj + 1;
        s.slice_id = sl + 1;
        const auto layout = detail::draw_slice(spec, anatomy, sl, rng);
        s.tissue_map = layout.base;
        for (const auto& px : layout.lesion_pixels)
          for (std::size_t p : px) s.tissue_map[p] = kLesionLabel;
        for (std::size_t c = 0; c < C; ++c) {
          LabelMap labels = layout.base;
          for (std::size_t k = 0; k < layout.lesion_pixels.size(); ++k) {
            const bool target = c == C - 1;
            const int only = layout.lesion_source[k];
            if (target || only < 0 || static_cast<std::size_t>(only) == c)
              for (std::size_t p : layout.lesion_pixels[k]) labels[p] = kLesionLabel;
          }
          Tensor<double> img(Shape{1, 1, n, n});
          auto v = img.mutable_values();
          for (std::size_t p = 0; p < n * n; ++p) {
            const double clean = spec.intensity[c][labels[p]];
            const double noisy = std::max(0.0, clean + spec.noise_sigma * noise(rng));
            v[p] = noisy * bias[c][p];
          }
          s.images.push_back(std::move(img));
          s.contrast_labels.push_back(std::move(labels));
        }
      }
      for (std::size_t c = 0; c < C; ++c) {
        std::vector<Tensor<double>*> vol;
        for (std::size_t sl = 0; sl < S; ++sl) vol.push_back(&ds.samples[subj * S + sl].images[c]);
        normalize_volume(vol);
      }
    }
  });
  return ds;
}

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};

/// Sequential subject-level split: the first `train` subjects, then `val`, then `test`.
/// Subjects beyond the counts are left unassigned (empty split tag).
inline void assign_splits(PhantomDataset& ds, const SplitCounts& counts) {
  const std::size_t total = counts.train + counts.val + counts.test;
  if (total > ds.spec.n_subjects)
    throw std::invalid_argument("split counts " + std::to_string(counts.train) + "/" + std::to_string(counts.val) + "/" +
                                std::to_string(counts.test) + " exceed " + std::to_string(ds.spec.n_subjects) + " subjects");
  for (auto& s : ds.samples) {
    const std::size_t k = s.subject_id;
    s.split = k <= counts.train ? "train" : k <= counts.train + counts.val ? "val" : k <= total ? "test" : "";
  }
}

// ---- persistence ----------------------------------------------------------------------------

inline nlohmann::json to_json(const PhantomSpec& s) {
  return {{"image_size", s.image_size},   {"n_subjects", s.n_subjects},
          {"slices_per_subject", s.slices_per_subject}, {"contrasts", s.contrasts},
          {"tissue_count", s.tissue_count}, {"intensity", s.intensity},
          {"unique_feature_rate", s.unique_feature_rate}, {"noise_sigma", s.noise_sigma},
          {"max_lesions", s.max_lesions}, {"bias_strength", s.bias_strength}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  s.image_size = j.at("image_size").get<std::size_t>();
  s.n_subjects = j.at("n_subjects").get<std::size_t>();
  s.slices_per_subject = j.at("slices_per_subject").get<std::size_t>();
  s.contrasts = j.at("contrasts").get<std::vector<std::string>>();
  s.tissue_count = j.at("tissue_count").get<std::size_t>();
  s.intensity = j.at("intensity").get<std::vector<std::vector<double>>>();
  s.unique_feature_rate = j.at("unique_feature_rate").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.max_lesions = j.at("max_lesions").get<std::size_t>();
  s.bias_strength = j.at("bias_strength").get<double>();
  return s;
}

/// Binary greymap, maxval 255, pixel = round(255 * clamp(v, 0, 1)).
inline void write_pgm(const std::filesystem::path& path, const Tensor<double>& image) {
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  for (std::size_t p = 0; p < h * w; ++p)
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(image[p], 0.0, 1.0)))));
  write_file_atomic(path, bytes);
}

inline std::filesystem::path sample_dir(const std::filesystem::path& root, std::size_t subject, std::size_t slice) {
  return root / ("sub" + std::to_string(subject)) / ("slice" + std::to_string(slice));
}

/// Layout: dir/manifest.json and dir/sub{S}/slice{I}/{contrast}.mtns (+ tissue.mtns, optional .pgm).
inline void write_dataset(const PhantomDataset& ds, const std::filesystem::path& dir, bool pgm = false,
                          const nlohmann::json& config_echo = nullptr) {
  std::filesystem::create_directories(dir);
  nlohmann::json subjects = nlohmann::json::array();
  std::map<std::size_t, std::pair<std::string, std::size_t>> per_subject;
  for (const auto& s : ds.samples) {
    const auto d = sample_dir(dir, s.subject_id, s.slice_id);
    for (std::size_t c = 0; c < ds.spec.contrasts.size(); ++c) {
      write_mtns(d / (ds.spec.contrasts[c] + ".mtns"), s.images[c]);
      if (pgm) write_pgm(d / (ds.spec.contrasts[c] + ".pgm"), s.images[c]);
    }
    Tensor<double> labels(s.images[0].shape());
    for (std::size_t p = 0; p < s.tissue_map.size(); ++p) labels.mutable_values()[p] = s.tissue_map[p];
    write_mtns(d / "tissue.mtns", labels);
    auto& e = per_subject[s.subject_id];
    e.first = s.split;
    e.second = std::max(e.second, s.slice_id);
  }
  for (const auto& [id, e] : per_subject) subjects.push_back({{"id", id}, {"split", e.first}, {"slices", e.second}});
  nlohmann::json m = {{"format", "mustgan-phantoms"}, {"version", 1},        {"seed", ds.seed},
                      {"spec", to_json(ds.spec)},    {"contrasts", ds.spec.contrasts}, {"subjects", subjects}};
  if (!config_echo.is_null()) m["config"] = config_echo;
  const std::string text = m.dump(2) + "\n";
  write_file_atomic(dir / "manifest.json", std::vector<char>(text.begin(), text.end()));
}

inline nlohmann::json read_dataset_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw DataError(path.string() + ": dataset manifest missing");
  try {
    nlohmann::json m;
    is >> m;
    if (m.value("format", "") != "mustgan-phantoms") throw DataError(path.string() + ": not a phantom dataset manifest");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": invalid manifest: " + e.what());
  }
}

/// Reads a dataset, optionally only the subjects tagged with `only_split`.
inline PhantomDataset read_dataset(const std::filesystem::path& dir, const std::string& only_split = "") {
  const auto m = read_dataset_manifest(dir);
  PhantomDataset ds;
  try {
    ds.spec = phantom_spec_from_json(m.at("spec"));
    ds.seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
  for (const auto& sj : m.at("subjects")) {
    const auto id = sj.at("id").get<std::size_t>();
    const auto split = sj.at("split").get<std::string>();
    if (!only_split.empty() && split != only_split) continue;
    for (std::size_t sl = 1; sl <= sj.at("slices").get<std::size_t>(); ++sl) {
      PhantomSample s;
      s.subject_id = id;
      s.slice_id = sl;
      s.split = split;
      const auto d = sample_dir(dir, id, sl);
      auto load = [&](const std::filesystem::path& f) {
        if (!std::filesystem::exists(f)) throw DataError(f.string() + ": missing image file");
        try {
          return read_mtns<double>(f);
        } catch (const MtnsError& e) {
          throw DataError(std::string("corrupt image file ") + e.what());
        }
      };
      for (const auto& c : ds.spec.contrasts) s.images.push_back(load(d / (c + ".mtns")));
      if (std::filesystem::exists(d / "tissue.mtns")) {
        const auto labels = load(d / "tissue.mtns");
        for (double v : labels.values()) s.tissue_map.push_back(static_cast<std::uint8_t>(v));
      }
      for (const auto& img : s.images)
        if (img.shape() != s.images[0].shape()) throw DataError(d.string() + ": contrasts are not co-shaped");
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace mustgan
