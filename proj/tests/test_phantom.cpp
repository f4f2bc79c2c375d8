#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mustgan/phantom.hpp"

namespace fs = std::filesystem;
using namespace mustgan;

namespace {

PhantomSpec small_spec() {
  PhantomSpec s;
  s.image_size = 32;
  s.n_subjects = 3;
  s.slices_per_subject = 4;
  return s;
}

bool identical(const PhantomDataset& a, const PhantomDataset& b) {
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t k = 0; k < a.samples.size(); ++k) {
    const auto &x = a.samples[k], &y = b.samples[k];
    if (x.subject_id != y.subject_id || x.slice_id != y.slice_id || x.images.size() != y.images.size()) return false;
    for (std::size_t c = 0; c < x.images.size(); ++c)
      if (!std::equal(x.images[c].values().begin(), x.images[c].values().end(), y.images[c].values().begin())) return false;
  }
  return true;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("mustgan_phantom_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Phantom, Deterministic) {
  const auto a = generate_phantoms(small_spec(), 42);
  const auto b = generate_phantoms(small_spec(), 42);
  EXPECT_TRUE(identical(a, b));
  EXPECT_FALSE(identical(a, generate_phantoms(small_spec(), 43)));
}

TEST(Phantom, ThreadCountDoesNotMatter) {
  PhantomDataset a, b;
  {
    SequentialScope seq;
    a = generate_phantoms(small_spec(), 5);
  }
  {
    ThreadCountScope four(4);
    b = generate_phantoms(small_spec(), 5);
  }
  EXPECT_TRUE(identical(a, b));
}

TEST(Phantom, Counting) {
  PhantomSpec s = small_spec();
  s.image_size = 16;
  s.n_subjects = 10;
  s.slices_per_subject = 20;
  const auto ds = generate_phantoms(s, 1);
  ASSERT_EQ(ds.samples.size(), 200u);
  for (const auto& x : ds.samples) {
    EXPECT_EQ(x.sources().size(), 2u);
    EXPECT_EQ(x.images.size(), 3u);
    EXPECT_EQ(x.target().shape(), (Shape{1, 1, 16, 16}));
  }
}

TEST(Phantom, RangeAndVolumeNormalization) {
  const auto ds = generate_phantoms(small_spec(), 3);
  const std::size_t S = ds.spec.slices_per_subject;
  for (std::size_t subj = 0; subj < ds.spec.n_subjects; ++subj)
    for (std::size_t c = 0; c < 3; ++c) {
      double mx = 0;
      for (std::size_t sl = 0; sl < S; ++sl)
        for (double v : ds.samples[subj * S + sl].images[c].values()) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
          mx = std::max(mx, v);
        }
      EXPECT_EQ(mx, 1.0);
    }
}

TEST(Phantom, CoRegistration) {
  PhantomSpec s = small_spec();
  s.max_lesions = 3;
  const auto ds = generate_phantoms(s, 8);
  for (const auto& x : ds.samples) {
    ASSERT_EQ(x.contrast_labels.size(), 3u);
    for (std::size_t p = 0; p < x.tissue_map.size(); ++p) {
      // outside lesions every contrast renders the shared map
      if (x.tissue_map[p] != kLesionLabel)
        for (const auto& l : x.contrast_labels) ASSERT_EQ(l[p], x.tissue_map[p]);
      // the target always shows the lesion
      if (x.tissue_map[p] == kLesionLabel) ASSERT_EQ(x.contrast_labels.back()[p], kLesionLabel);
    }
  }
}

TEST(Phantom, ZeroUniqueRateSharesEveryLesion) {
  PhantomSpec s = small_spec();
  s.unique_feature_rate = 0;
  const auto ds = generate_phantoms(s, 8);
  std::size_t lesion_pixels = 0;
  for (const auto& x : ds.samples)
    for (const auto& l : x.contrast_labels) {
      EXPECT_EQ(l, x.tissue_map);
      for (auto v : l) lesion_pixels += v == kLesionLabel;
    }
  EXPECT_GT(lesion_pixels, 0u);
}

TEST(Phantom, UniqueFeaturesExist) {
  PhantomSpec s = small_spec();
  s.unique_feature_rate = 0.5;
  const auto ds = generate_phantoms(s, 8);
  std::size_t only_one = 0, all = 0;
  for (const auto& x : ds.samples)
    for (std::size_t p = 0; p < x.tissue_map.size(); ++p) {
      if (x.tissue_map[p] != kLesionLabel) continue;
      std::size_t shown = 0;
      for (std::size_t c = 0; c + 1 < x.contrast_labels.size(); ++c) shown += x.contrast_labels[c][p] == kLesionLabel;
      EXPECT_GE(shown, 1u);  // every target structure is visible in some source
      only_one += shown == 1;
      all += shown == 2;
    }
  EXPECT_GT(only_one, 0u);
  EXPECT_GT(all, 0u);
}

TEST(Phantom, RateOneHidesEveryLesionFromOtherSources) {
  PhantomSpec s = small_spec();
  s.unique_feature_rate = 1;
  const auto ds = generate_phantoms(s, 2);
  for (const auto& x : ds.samples)
    for (std::size_t p = 0; p < x.tissue_map.size(); ++p)
      if (x.tissue_map[p] == kLesionLabel)
        EXPECT_EQ((x.contrast_labels[0][p] == kLesionLabel) + (x.contrast_labels[1][p] == kLesionLabel), 1);
}

TEST(Phantom, NoiselessRenderingFollowsLookup) {
  PhantomSpec s = small_spec();
  s.noise_sigma = 0;
  s.bias_strength = 0;
  const auto ds = generate_phantoms(s, 4);
  // without noise and bias, each contrast is lookup / max(lookup over tissues present)
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& lut = s.intensity[c];
    for (std::size_t subj = 0; subj < s.n_subjects; ++subj) {
      double mx = 0;
      for (std::size_t sl = 0; sl < s.slices_per_subject; ++sl)
        for (auto l : ds.samples[subj * s.slices_per_subject + sl].contrast_labels[c]) mx = std::max(mx, lut[l]);
      for (std::size_t sl = 0; sl < s.slices_per_subject; ++sl) {
        const auto& x = ds.samples[subj * s.slices_per_subject + sl];
        for (std::size_t p = 0; p < x.tissue_map.size(); ++p)
          ASSERT_DOUBLE_EQ(x.images[c][p], lut[x.contrast_labels[c][p]] / mx);
      }
    }
  }
}

TEST(Phantom, SpecValidation) {
  PhantomSpec s = small_spec();
  s.tissue_count = 7;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.intensity[1].pop_back();
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.unique_feature_rate = 1.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.intensity[0][2] = 1.2;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_spec();
  s.contrasts = {"A", "A", "T"};
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Normalize, Examples) {
  std::vector<Tensor<double>> vol = {Tensor<double>(Shape{2}, std::vector<double>{0.5, 2.0}),
                                     Tensor<double>(Shape{2}, std::vector<double>{1.0, 0.0})};
  normalize_volume(vol);
  EXPECT_EQ(vol[0][0], 0.25);
  EXPECT_EQ(vol[0][1], 1.0);
  EXPECT_EQ(vol[1][0], 0.5);
  const auto before = vol[0].clone();
  normalize_volume(vol);
  EXPECT_EQ(vol[0][0], before[0]);
  std::vector<Tensor<double>> zero = {Tensor<double>(Shape{3})};
  EXPECT_THROW(normalize_volume(zero), DataError);
}

TEST(Split, SequentialSubjects) {
  PhantomSpec s = small_spec();
  s.n_subjects = 10;
  s.slices_per_subject = 2;
  s.image_size = 16;
  auto ds = generate_phantoms(s, 1);
  assign_splits(ds, {5, 2, 3});
  for (const auto& x : ds.samples) {
    const std::string want = x.subject_id <= 5 ? "train" : x.subject_id <= 7 ? "val" : "test";
    EXPECT_EQ(x.split, want) << x.subject_id;
  }
  EXPECT_EQ(ds.split("train").size(), 10u);
  EXPECT_EQ(ds.split("val").size(), 4u);
  EXPECT_EQ(ds.split("test").size(), 6u);

  assign_splits(ds, {0, 0, 10});
  EXPECT_EQ(ds.split("test").size(), 20u);
  EXPECT_THROW(assign_splits(ds, {6, 3, 2}), std::invalid_argument);
}

TEST(Split, SubjectsNeverStraddle) {
  auto ds = generate_phantoms(small_spec(), 1);
  assign_splits(ds, {1, 1, 1});
  std::map<std::size_t, std::set<std::string>> tags;
  for (const auto& x : ds.samples) tags[x.subject_id].insert(x.split);
  for (const auto& [s, t] : tags) EXPECT_EQ(t.size(), 1u);
}

TEST(DatasetIo, RoundTrip) {
  TempDir tmp("roundtrip");
  auto ds = generate_phantoms(small_spec(), 9);
  assign_splits(ds, {1, 1, 1});
  write_dataset(ds, tmp.path, true);
  const auto back = read_dataset(tmp.path);
  EXPECT_TRUE(identical(ds, back));
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    EXPECT_EQ(back.samples[k].split, ds.samples[k].split);
    EXPECT_EQ(back.samples[k].tissue_map, ds.samples[k].tissue_map);
  }
  const auto m = read_dataset_manifest(tmp.path);
  EXPECT_EQ(m["contrasts"], (std::vector<std::string>{"A", "B", "T"}));
  EXPECT_EQ(read_dataset(tmp.path, "val").samples.size(), 4u);
}

TEST(DatasetIo, PgmFormat) {
  TempDir tmp("pgm");
  Tensor<double> img(Shape{1, 1, 2, 3}, std::vector<double>{0.0, 0.5, 1.0, 1.2, -0.1, 0.2});
  write_pgm(tmp.path / "x.pgm", img);
  std::ifstream is(tmp.path / "x.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const std::vector<int> px = {0, 128, 255, 255, 0, 51};
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + k]), px[k]);
}

TEST(DatasetIo, MissingAndCorruptFilesNamed) {
  TempDir tmp("broken");
  auto ds = generate_phantoms(small_spec(), 9);
  assign_splits(ds, {3, 0, 0});
  write_dataset(ds, tmp.path);
  fs::remove(tmp.path / "sub2" / "slice3" / "B.mtns");
  try {
    read_dataset(tmp.path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("sub2/slice3/B.mtns"), std::string::npos) << e.what();
  }
  write_dataset(ds, tmp.path);
  fs::resize_file(tmp.path / "sub1" / "slice1" / "T.mtns", 10);
  try {
    read_dataset(tmp.path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("sub1/slice1/T.mtns"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dataset(tmp.path / "nope"), DataError);
}
