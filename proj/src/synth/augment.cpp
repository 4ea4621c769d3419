#include "ctflab/synth/augment.hpp"

#include <algorithm>
#include <cmath>

#include "ctflab/error.hpp"

namespace ctflab::synth {

using numerics::Shape;
using numerics::Tensor;

namespace {

void check_prob(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(what) + " must be in [0, 1]");
}

Tensor flip_image(const Tensor& in) {
  const std::size_t h = in.extent(0), w = in.extent(1), c = in.extent(2);
  Tensor out(in.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out.at(y, x, k) = in.at(y, w - 1 - x, k);
  return out;
}

Tensor rescale_image(const Tensor& in, double s, double ox, double oy) {
  const std::size_t h = in.extent(0), w = in.extent(1), c = in.extent(2);
  Tensor out(in.shape(), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    const double sy = std::floor((static_cast<double>(y) + 0.5 + oy) / s);
    if (sy < 0.0 || sy >= static_cast<double>(h)) continue;
    for (std::size_t x = 0; x < w; ++x) {
      const double sx = std::floor((static_cast<double>(x) + 0.5 + ox) / s);
      if (sx < 0.0 || sx >= static_cast<double>(w)) continue;
      for (std::size_t k = 0; k < c; ++k) {
        out.at(y, x, k) = in.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), k);
      }
    }
  }
  return out;
}

double luminance(const Tensor& img, std::size_t y, std::size_t x) {
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

void color_jitter(Tensor& img, const AugmentationSpec& spec, Rng& rng) {
  const std::size_t h = img.extent(0), w = img.extent(1);
  const double b = rng.uniform(1.0 - spec.brightness, 1.0 + spec.brightness);
  const double con = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
  const double sat = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation);
  std::array<double, 3> gain{};
  for (auto& g : gain) g = rng.uniform(1.0 - spec.hue, 1.0 + spec.hue);

  for (double& v : img.values()) v = std::clamp(v * b, 0.0, 1.0);

  double mean = 0.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) mean += luminance(img, y, x);
  mean /= static_cast<double>(h * w);
  for (double& v : img.values()) v = std::clamp(mean + con * (v - mean), 0.0, 1.0);

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double gray = luminance(img, y, x);
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = gray + sat * (img.at(y, x, k) - gray);
        img.at(y, x, k) = std::clamp(v * gain[k], 0.0, 1.0);
      }
    }
  }
}

void to_grayscale(Tensor& img) {
  for (std::size_t y = 0; y < img.extent(0); ++y) {
    for (std::size_t x = 0; x < img.extent(1); ++x) {
      const double g = luminance(img, y, x);
      for (std::size_t k = 0; k < 3; ++k) img.at(y, x, k) = g;
    }
  }
}

void gaussian_blur(Tensor& img, double sigma) {
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  const long h = static_cast<long>(img.extent(0));
  const long w = static_cast<long>(img.extent(1));
  Tensor tmp(img.shape());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) {
        double acc = 0.0;
        for (long i = -radius; i <= radius; ++i) {
          const long sx = std::clamp(x + i, 0L, w - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(y, sx, k);
        }
        tmp.at(y, x, k) = acc;
      }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (std::size_t k = 0; k < 3; ++k) {
        double acc = 0.0;
        for (long i = -radius; i <= radius; ++i) {
          const long sy = std::clamp(y + i, 0L, h - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(sy, x, k);
        }
        img.at(y, x, k) = acc;
      }
}

void cutout(Tensor& img, const CutoutSpec& spec, Rng& rng) {
  const double h = static_cast<double>(img.extent(0));
  const double w = static_cast<double>(img.extent(1));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(spec.scale_lo, spec.scale_hi) * h * w;
    const double ratio =
        std::exp(rng.uniform(std::log(spec.ratio_lo), std::log(spec.ratio_hi)));
    const auto eh = static_cast<std::size_t>(std::round(std::sqrt(area * ratio)));
    const auto ew = static_cast<std::size_t>(std::round(std::sqrt(area / ratio)));
    if (eh < 1 || ew < 1 || eh >= img.extent(0) || ew >= img.extent(1)) continue;
    const std::size_t y0 = rng.below(img.extent(0) - eh + 1);
    const std::size_t x0 = rng.below(img.extent(1) - ew + 1);
    for (std::size_t y = y0; y < y0 + eh; ++y)
      for (std::size_t x = x0; x < x0 + ew; ++x)
        for (std::size_t k = 0; k < 3; ++k) img.at(y, x, k) = rng.uniform();
    return;
  }
}

}  // namespace

double min_scale_for(std::size_t image_size) { return 32.0 / static_cast<double>(image_size); }

void AugmentationSpec::validate() const {
  check_prob(flip_prob, "flip_prob");
  check_prob(color_prob, "color_prob");
  check_prob(grayscale_prob, "grayscale_prob");
  check_prob(blur_prob, "blur_prob");
  if (!(scale_lo > 0.0 && scale_hi >= scale_lo)) throw ConfigError("scale range must be positive");
  for (double f : {brightness, contrast, saturation, hue}) {
    if (!(f >= 0.0 && f < 1.0)) throw ConfigError("color jitter strengths must be in [0, 1)");
  }
  if (!(blur_sigma_lo > 0.0 && blur_sigma_hi >= blur_sigma_lo))
    throw ConfigError("blur sigma range must be positive");
  for (const auto& c : cutout) {
    check_prob(c.prob, "cutout prob");
    if (!(c.scale_lo > 0.0 && c.scale_hi >= c.scale_lo && c.scale_hi < 1.0))
      throw ConfigError("cutout scale range must lie in (0, 1)");
    if (!(c.ratio_lo > 0.0 && c.ratio_hi >= c.ratio_lo))
      throw ConfigError("cutout ratio range must be positive");
  }
}

AugmentationSpec AugmentationSpec::identity() { return AugmentationSpec{}; }

AugmentationSpec AugmentationSpec::labeled() {
  AugmentationSpec s;
  s.flip_prob = 0.5;
  s.scale_lo = 0.2;
  s.scale_hi = 1.8;
  s.brightness = s.contrast = s.saturation = 0.4;
  s.hue = 0.1;
  s.color_prob = 0.8;
  s.grayscale_prob = 0.2;
  s.blur_prob = 0.5;
  return s;
}

AugmentationSpec AugmentationSpec::weak() {
  AugmentationSpec s;
  s.flip_prob = 0.5;
  // Short side resized within 500..800 against a nominal 800.
  s.scale_lo = 500.0 / 800.0;
  s.scale_hi = 1.0;
  s.photometric = false;
  return s;
}

AugmentationSpec AugmentationSpec::strong() {
  AugmentationSpec s = labeled();
  s.scale_lo = 0.5;
  s.scale_hi = 1.5;
  s.cutout = {CutoutSpec{0.05, 0.2, 0.3, 3.3, 0.7}, CutoutSpec{0.02, 0.2, 0.1, 6.0, 0.5},
              CutoutSpec{0.02, 0.2, 0.05, 8.0, 0.3}};
  return s;
}

Box GeometricTransform::apply(const Box& b) const {
  Box f = flipped ? Box{width - b.x2, b.y1, width - b.x1, b.y2} : b;
  return Box{scale * f.x1 - offset_x, scale * f.y1 - offset_y, scale * f.x2 - offset_x,
             scale * f.y2 - offset_y};
}

Box GeometricTransform::invert(const Box& b) const {
  Box u{(b.x1 + offset_x) / scale, (b.y1 + offset_y) / scale, (b.x2 + offset_x) / scale,
        (b.y2 + offset_y) / scale};
  return flipped ? Box{width - u.x2, u.y1, width - u.x1, u.y2} : u;
}

std::vector<Annotation> GeometricTransform::apply(const std::vector<Annotation>& annotations) const {
  std::vector<Annotation> out;
  out.reserve(annotations.size());
  for (const auto& a : annotations) {
    const Box moved = apply(a.box);
    const Box clipped = clip_box(moved, width, height);
    if (clipped.width() < 2.0 || clipped.height() < 2.0) continue;
    if (clipped.area() < 0.25 * moved.area()) continue;
    out.push_back({clipped, a.class_id});
  }
  return out;
}

AugmentedView augment_view(const Tensor& image, const std::vector<Annotation>& annotations,
                           const AugmentationSpec& spec, Rng& rng) {
  AugmentedView view{image, annotations, {}};
  const std::size_t h = image.extent(0);
  const std::size_t w = image.extent(1);
  GeometricTransform& t = view.transform;
  t.width = static_cast<double>(w);
  t.height = static_cast<double>(h);

  if (spec.geometric) {
    t.flipped = rng.bernoulli(spec.flip_prob);
    const double lo = std::max(spec.scale_lo, min_scale_for(std::min(h, w)));
    const double hi = std::max(spec.scale_hi, lo);
    t.scale = lo == hi ? lo : rng.uniform(lo, hi);
    if (t.scale > 1.0) {
      t.offset_x = std::floor(rng.uniform(0.0, (t.scale - 1.0) * static_cast<double>(w)));
      t.offset_y = std::floor(rng.uniform(0.0, (t.scale - 1.0) * static_cast<double>(h)));
    }
    if (t.flipped) view.image = flip_image(view.image);
    if (t.scale != 1.0 || t.offset_x != 0.0 || t.offset_y != 0.0) {
      view.image = rescale_image(view.image, t.scale, t.offset_x, t.offset_y);
    }
    view.annotations = t.apply(annotations);
  }

  if (spec.photometric) {
    if (rng.bernoulli(spec.color_prob)) color_jitter(view.image, spec, rng);
    if (rng.bernoulli(spec.grayscale_prob)) to_grayscale(view.image);
    if (rng.bernoulli(spec.blur_prob)) {
      gaussian_blur(view.image, rng.uniform(spec.blur_sigma_lo, spec.blur_sigma_hi));
    }
    for (const auto& c : spec.cutout) {
      if (rng.bernoulli(c.prob)) cutout(view.image, c, rng);
    }
  }
  return view;
}

Sample augment(const Sample& sample, const AugmentationSpec& spec, Rng& stream) {
  spec.validate();
  // Hidden annotations travel with the sample but stay behind the firewall.
  AugmentedView v = augment_view(sample.image(), sample.annotations(HarnessAccess{}), spec, stream);
  return Sample(sample.id(), sample.role(), std::move(v.image), std::move(v.annotations));
}

Sample flip_horizontal(const Sample& sample) {
  GeometricTransform t;
  t.width = static_cast<double>(sample.width());
  t.height = static_cast<double>(sample.height());
  t.flipped = true;
  std::vector<Annotation> ann;
  for (const auto& a : sample.annotations(HarnessAccess{})) ann.push_back({t.apply(a.box), a.class_id});
  return Sample(sample.id(), sample.role(), flip_image(sample.image()), std::move(ann));
}

}  // namespace ctflab::synth
