#pragma once

#include <string>
#include <vector>

#include "ctflab/numerics/tensor.hpp"
#include "ctflab/random.hpp"
#include "ctflab/synth/sample.hpp"

namespace ctflab::synth {

struct CutoutSpec {
  double scale_lo = 0.02;  // erased area as a fraction of the image
  double scale_hi = 0.2;
  double ratio_lo = 0.3;  // aspect ratio h / w, drawn log-uniformly
  double ratio_hi = 3.3;
  double prob = 0.5;
};

struct AugmentationSpec {
  bool geometric = true;    // gates flip and scale jitter
  bool photometric = true;  // gates color, grayscale, blur and cutout

  double flip_prob = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;

  double brightness = 0.0;  // factor drawn from [1 - b, 1 + b]
  double contrast = 0.0;
  double saturation = 0.0;
  double hue = 0.0;  // per-channel gain jitter in [1 - hue, 1 + hue]
  double color_prob = 0.0;

  double grayscale_prob = 0.0;

  double blur_sigma_lo = 0.1;
  double blur_sigma_hi = 2.0;
  double blur_prob = 0.0;

  std::vector<CutoutSpec> cutout;

  void validate() const;

  static AugmentationSpec identity();
  // Labeled-data pipeline: flip, multi-scale (0.2, 1.8), color jitter,
  // grayscale and blur; no cutout.
  static AugmentationSpec labeled();
  // Weak unlabeled view: flip plus a mild down-scale.
  static AugmentationSpec weak();
  // Strong unlabeled view: labeled pipeline with scale (0.5, 1.5) and three
  // cutout passes.
  static AugmentationSpec strong();
};

// Flip about the vertical axis followed by isotropic scaling onto the fixed
// canvas: x' = scale * x - offset_x (flip applied first). Down-scaled content
// sits at the top-left and is padded; up-scaled content is cropped at
// (offset_x, offset_y).
struct GeometricTransform {
  double width = 0.0;
  double height = 0.0;
  bool flipped = false;
  double scale = 1.0;
  double offset_x = 0.0;
  double offset_y = 0.0;

  Box apply(const Box& b) const;
  Box invert(const Box& b) const;
  // Transformed and clipped annotations; objects that end up mostly outside
  // the canvas are dropped.
  std::vector<Annotation> apply(const std::vector<Annotation>& annotations) const;
};

struct AugmentedView {
  numerics::Tensor image;
  std::vector<Annotation> annotations;
  GeometricTransform transform;
};

// Applies flip, scale jitter, color jitter, grayscale, blur and cutout in that
// order, each gated by its probability drawn from `stream`. Annotations follow
// the geometric steps only.
AugmentedView augment_view(const numerics::Tensor& image, const std::vector<Annotation>& annotations,
                           const AugmentationSpec& spec, Rng& stream);

Sample augment(const Sample& sample, const AugmentationSpec& spec, Rng& stream);

Sample flip_horizontal(const Sample& sample);

// Clamp the scale range so that the short side of the rescaled content stays
// at least 32 pixels.
double min_scale_for(std::size_t image_size);

}  // namespace ctflab::synth
