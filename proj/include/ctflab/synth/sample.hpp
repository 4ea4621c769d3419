#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ctflab/numerics/tensor.hpp"
#include "ctflab/synth/box.hpp"

namespace ctflab::synth {

struct Annotation {
  Box box;
  int class_id = 0;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

enum class Role { labeled, unlabeled, validation };

std::string_view role_name(Role role);
Role parse_role(std::string_view name);

// Passkey for code that is allowed to see unlabeled ground truth: the
// evaluation harness and the estimator-consistency oracle. Training code must
// never construct one.
struct HarnessAccess {
  explicit HarnessAccess() = default;
};

// Process-wide record of attempted reads of unlabeled ground truth through
// the training accessor. Must stay empty for any training run.
class AccessGuard {
 public:
  static void record(std::string entry);
  static std::vector<std::string> log();
  static std::size_t violations();
  static void clear();
};

class Sample {
 public:
  Sample(std::uint64_t id, Role role, numerics::Tensor image, std::vector<Annotation> annotations);

  std::uint64_t id() const { return id_; }
  Role role() const { return role_; }
  const numerics::Tensor& image() const { return image_; }
  std::size_t height() const { return image_.extent(0); }
  std::size_t width() const { return image_.extent(1); }

  // Ground truth as seen by training. Reading it from an unlabeled sample is
  // logged with the AccessGuard and raises FirewallViolation.
  const std::vector<Annotation>& annotations() const;

  // Ground truth for evaluation, regardless of role.
  const std::vector<Annotation>& annotations(HarnessAccess) const { return annotations_; }

  friend bool operator==(const Sample&, const Sample&) = default;

 private:
  std::uint64_t id_;
  Role role_;
  numerics::Tensor image_;
  std::vector<Annotation> annotations_;
};

}  // namespace ctflab::synth
