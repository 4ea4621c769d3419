#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "ctflab/error.hpp"
#include "ctflab/synth/augment.hpp"
#include "ctflab/synth/dataset.hpp"

using namespace ctflab;
using namespace ctflab::synth;
using numerics::Tensor;

namespace {

DatasetConfig small_config() {
  DatasetConfig c;
  c.n_labeled = 10;
  c.n_unlabeled = 90;
  c.n_validation = 20;
  c.seed = 7;
  return c;
}

const std::vector<Annotation>& gt(const Sample& s) { return s.annotations(HarnessAccess{}); }

// Flat gray canvas with solid colored rectangles; no noise, so geometric
// transforms can be checked pixel by pixel.
Sample rect_sample(Role role = Role::labeled) {
  Tensor img(numerics::Shape{64, 64, 3}, 0.4);
  std::vector<Annotation> ann{{{8, 10, 24, 26}, 0}, {{36, 30, 52, 50}, 1}, {{20, 40, 32, 58}, 2}};
  for (const auto& a : ann) {
    for (auto y = static_cast<std::size_t>(a.box.y1); y < static_cast<std::size_t>(a.box.y2); ++y)
      for (auto x = static_cast<std::size_t>(a.box.x1); x < static_cast<std::size_t>(a.box.x2); ++x)
        for (std::size_t k = 0; k < 3; ++k)
          img.at(y, x, k) = static_cast<int>(k) == a.class_id ? 0.9 : 0.1;
  }
  return Sample(1, role, img, ann);
}

bool pixel_has_class(const Tensor& img, std::size_t y, std::size_t x, int cls) {
  const double own = img.at(y, x, static_cast<std::size_t>(cls));
  for (std::size_t k = 0; k < 3; ++k) {
    if (static_cast<int>(k) == cls) continue;
    if (own - img.at(y, x, k) < 0.3) return false;
  }
  return true;
}

double pixel_sum(const Tensor& t) { return std::accumulate(t.values().begin(), t.values().end(), 0.0); }

}  // namespace

TEST(Dataset, SameConfigGivesIdenticalSamples) {
  const auto a = generate_dataset(small_config());
  const auto b = generate_dataset(small_config());
  EXPECT_TRUE(a == b);
}

TEST(Dataset, DifferentSeedsDiffer) {
  auto c = small_config();
  const auto a = generate_dataset(c);
  c.seed = 8;
  const auto b = generate_dataset(c);
  EXPECT_FALSE(a.labeled[0].image() == b.labeled[0].image());
}

TEST(Dataset, TenPercentLabeledSplit) {
  const auto d = generate_dataset(small_config());
  ASSERT_EQ(d.labeled.size(), 10u);
  ASSERT_EQ(d.unlabeled.size(), 90u);
  const double frac =
      static_cast<double>(d.labeled.size()) / static_cast<double>(d.labeled.size() + d.unlabeled.size());
  EXPECT_DOUBLE_EQ(frac, 0.10);
}

TEST(Dataset, SplitsAreDisjointAndRolesMatch) {
  const auto d = generate_dataset(small_config());
  std::set<std::uint64_t> ids;
  for (const auto& s : d.labeled) {
    EXPECT_EQ(s.role(), Role::labeled);
    ids.insert(s.id());
  }
  for (const auto& s : d.unlabeled) {
    EXPECT_EQ(s.role(), Role::unlabeled);
    ids.insert(s.id());
  }
  for (const auto& s : d.validation) {
    EXPECT_EQ(s.role(), Role::validation);
    ids.insert(s.id());
  }
  EXPECT_EQ(ids.size(), 120u);
}

TEST(Dataset, EveryBoxContainsItsClassSignature) {
  auto c = small_config();
  c.n_unlabeled = 40;
  const auto d = generate_dataset(c);
  std::size_t boxes = 0;
  for (const auto* split : {&d.labeled, &d.unlabeled, &d.validation}) {
    for (const auto& s : *split) {
      const auto& img = s.image();
      for (double v : img.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
      ASSERT_GE(gt(s).size(), c.min_objects);
      ASSERT_LE(gt(s).size(), c.max_objects);
      for (const auto& a : gt(s)) {
        ++boxes;
        ASSERT_TRUE(a.box.valid());
        ASSERT_GE(a.box.x1, 0.0);
        ASSERT_LE(a.box.x2, 64.0);
        bool found = false;
        for (auto y = static_cast<std::size_t>(a.box.y1); y < static_cast<std::size_t>(a.box.y2) && !found; ++y)
          for (auto x = static_cast<std::size_t>(a.box.x1); x < static_cast<std::size_t>(a.box.x2) && !found; ++x)
            found = pixel_has_class(img, y, x, a.class_id);
        EXPECT_TRUE(found) << "sample " << s.id() << " class " << a.class_id;
      }
    }
  }
  EXPECT_GT(boxes, 100u);
}

TEST(Dataset, ObjectsDoNotOverlap) {
  const auto d = generate_dataset(small_config());
  for (const auto& s : d.unlabeled) {
    const auto& a = gt(s);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = i + 1; j < a.size(); ++j) EXPECT_EQ(intersection_area(a[i].box, a[j].box), 0.0);
  }
}

TEST(Dataset, SignatureClassAgreesWithScan) {
  const auto d = generate_dataset(small_config());
  const auto& img = d.labeled[0].image();
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      int expect = -1;
      for (int c = 0; c < 3; ++c)
        if (pixel_has_class(img, y, x, c)) expect = c;
      EXPECT_EQ(signature_class(img, y, x), expect);
    }
}

TEST(Dataset, ConfigValidation) {
  DatasetConfig c;
  c.n_labeled = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DatasetConfig{};
  c.image_size = 16;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DatasetConfig{};
  c.num_classes = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Dataset, ExportImportRoundTrip) {
  const auto d = generate_dataset(small_config());
  const auto dir = std::filesystem::temp_directory_path() / "ctflab_test_export";
  std::filesystem::remove_all(dir);
  export_dataset(d, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.txt"));
  const auto back = import_dataset(dir);
  EXPECT_TRUE(back == d);
  std::filesystem::remove_all(dir);
}

TEST(Flip, BoxReflection) {
  Tensor img(numerics::Shape{64, 64, 3}, 0.5);
  const Sample s(0, Role::labeled, img, {{{10, 5, 20, 15}, 1}});
  const Sample f = flip_horizontal(s);
  EXPECT_EQ(f.annotations()[0].box, (Box{44, 5, 54, 15}));
  EXPECT_EQ(f.annotations()[0].class_id, 1);
}

TEST(Flip, Involution) {
  const auto d = generate_dataset(small_config());
  for (const auto& s : d.labeled) EXPECT_TRUE(flip_horizontal(flip_horizontal(s)) == s);
}

TEST(Flip, IndexSwapOracle) {
  const auto d = generate_dataset(small_config());
  const auto& s = d.validation[3];
  const auto f = flip_horizontal(s);
  const std::size_t w = s.width();
  for (std::size_t y = 0; y < s.height(); ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) ASSERT_EQ(f.image().at(y, x, k), s.image().at(y, w - 1 - x, k));
}

TEST(Augment, IdentitySpecLeavesSampleUnchanged) {
  const auto d = generate_dataset(small_config());
  Rng rng(3);
  for (const auto& s : d.labeled) EXPECT_TRUE(augment(s, AugmentationSpec::identity(), rng) == s);
}

TEST(Augment, ZeroProbabilitiesAndUnitScaleAreIdentity) {
  auto spec = AugmentationSpec::strong();
  spec.flip_prob = spec.color_prob = spec.grayscale_prob = spec.blur_prob = 0.0;
  for (auto& c : spec.cutout) c.prob = 0.0;
  spec.scale_lo = spec.scale_hi = 1.0;
  const auto d = generate_dataset(small_config());
  Rng rng(11);
  for (const auto& s : d.labeled) EXPECT_TRUE(augment(s, spec, rng) == s);
}

TEST(Augment, WeakPreservesAnnotationCount) {
  const auto d = generate_dataset(small_config());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    for (const auto& s : d.labeled) EXPECT_EQ(gt(augment(s, AugmentationSpec::weak(), rng)).size(), gt(s).size());
  }
}

TEST(Augment, CutoutChangesPixelsButNotAnnotations) {
  auto spec = AugmentationSpec::strong();
  spec.geometric = false;
  spec.color_prob = spec.grayscale_prob = spec.blur_prob = 0.0;
  for (auto& c : spec.cutout) c.prob = 1.0;
  const auto d = generate_dataset(small_config());
  Rng rng(5);
  for (const auto& s : d.labeled) {
    const auto out = augment(s, spec, rng);
    EXPECT_EQ(gt(out), gt(s));
    EXPECT_NE(pixel_sum(out.image()), pixel_sum(s.image()));
  }
}

TEST(Augment, DeterministicGivenStreamSeed) {
  const auto d = generate_dataset(small_config());
  Rng a(99), b(99);
  for (const auto& s : d.labeled)
    EXPECT_TRUE(augment(s, AugmentationSpec::strong(), a) == augment(s, AugmentationSpec::strong(), b));
}

TEST(Augment, ValuesStayInUnitRange) {
  const auto d = generate_dataset(small_config());
  Rng rng(17);
  for (const auto& s : d.labeled) {
    const auto out = augment(s, AugmentationSpec::strong(), rng);
    for (double v : out.image().values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(Augment, ScaleIsClampedToKeepShortSide) {
  EXPECT_DOUBLE_EQ(min_scale_for(64), 0.5);
  auto spec = AugmentationSpec::identity();
  spec.scale_lo = spec.scale_hi = 0.2;
  Rng rng(1);
  const auto v = augment_view(rect_sample().image(), gt(rect_sample()), spec, rng);
  EXPECT_DOUBLE_EQ(v.transform.scale, 0.5);
}

TEST(Augment, InvalidSpecRejected) {
  auto spec = AugmentationSpec::weak();
  spec.flip_prob = 1.5;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = AugmentationSpec::weak();
  spec.scale_lo = -1.0;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Augment, GeometricConsistencyPixelScan) {
  const Sample base = rect_sample();
  auto spec = AugmentationSpec::labeled();
  spec.photometric = false;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    Rng rng(seed);
    const auto v = augment_view(base.image(), gt(base), spec, rng);
    for (const auto& a : v.annotations) {
      // Interior pixels (one-pixel inset) carry the class color.
      const auto y0 = static_cast<std::size_t>(std::ceil(a.box.y1 + 1.0));
      const auto y1 = static_cast<std::size_t>(std::floor(a.box.y2 - 1.0));
      const auto x0 = static_cast<std::size_t>(std::ceil(a.box.x1 + 1.0));
      const auto x1 = static_cast<std::size_t>(std::floor(a.box.x2 - 1.0));
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          ASSERT_TRUE(pixel_has_class(v.image, y, x, a.class_id))
              << "seed " << seed << " pixel " << x << "," << y;
      // A one-pixel ring just outside the box does not.
      for (long y = static_cast<long>(a.box.y1) - 2; y <= static_cast<long>(a.box.y2) + 1; ++y)
        for (long x = static_cast<long>(a.box.x1) - 2; x <= static_cast<long>(a.box.x2) + 1; ++x) {
          if (y < 0 || x < 0 || y >= 64 || x >= 64) continue;
          const double cx = x + 0.5, cy = y + 0.5;
          const bool outside = cx < a.box.x1 - 1.0 || cx > a.box.x2 + 1.0 || cy < a.box.y1 - 1.0 ||
                               cy > a.box.y2 + 1.0;
          if (outside) {
            ASSERT_FALSE(pixel_has_class(v.image, static_cast<std::size_t>(y), static_cast<std::size_t>(x),
                                         a.class_id))
                << "seed " << seed;
          }
        }
    }
  }
}

TEST(Augment, InverseTransformRecoversBoxes) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    GeometricTransform t{64, 64, rng.bernoulli(0.5), rng.uniform(0.5, 1.8), 0, 0};
    if (t.scale > 1.0) {
      t.offset_x = std::floor(rng.uniform(0, (t.scale - 1) * 64));
      t.offset_y = std::floor(rng.uniform(0, (t.scale - 1) * 64));
    }
    const Box b{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(31, 64), rng.uniform(31, 64)};
    const Box r = t.invert(t.apply(b));
    EXPECT_NEAR(r.x1, b.x1, 1e-9);
    EXPECT_NEAR(r.y1, b.y1, 1e-9);
    EXPECT_NEAR(r.x2, b.x2, 1e-9);
    EXPECT_NEAR(r.y2, b.y2, 1e-9);
  }
}

TEST(Firewall, UnlabeledAnnotationsAreGuarded) {
  AccessGuard::clear();
  const Sample s = rect_sample(Role::unlabeled);
  EXPECT_THROW((void)s.annotations(), FirewallViolation);
  EXPECT_EQ(AccessGuard::violations(), 1u);
  EXPECT_EQ(s.annotations(HarnessAccess{}).size(), 3u);
  EXPECT_EQ(AccessGuard::violations(), 1u);
  AccessGuard::clear();
  EXPECT_EQ(AccessGuard::violations(), 0u);
}

TEST(Firewall, AugmentationDoesNotTripGuard) {
  AccessGuard::clear();
  const Sample s = rect_sample(Role::unlabeled);
  Rng rng(2);
  const auto out = augment(s, AugmentationSpec::strong(), rng);
  EXPECT_EQ(out.role(), Role::unlabeled);
  EXPECT_EQ(AccessGuard::violations(), 0u);
}

TEST(Firewall, LabeledAndValidationAreReadable) {
  AccessGuard::clear();
  EXPECT_NO_THROW((void)rect_sample(Role::labeled).annotations());
  EXPECT_NO_THROW((void)rect_sample(Role::validation).annotations());
  EXPECT_EQ(AccessGuard::violations(), 0u);
}
