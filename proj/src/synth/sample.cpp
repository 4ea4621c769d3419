#include "ctflab/synth/sample.hpp"

#include <mutex>

#include "ctflab/error.hpp"

namespace ctflab::synth {

std::string_view role_name(Role role) {
  switch (role) {
    case Role::labeled:
      return "labeled";
    case Role::unlabeled:
      return "unlabeled";
    case Role::validation:
      return "validation";
  }
  return "?";
}

Role parse_role(std::string_view name) {
  if (name == "labeled") return Role::labeled;
  if (name == "unlabeled") return Role::unlabeled;
  if (name == "validation") return Role::validation;
  throw Error("unknown sample role: " + std::string(name));
}

namespace {

std::mutex& guard_mutex() {
  static std::mutex m;
  return m;
}

std::vector<std::string>& guard_log() {
  static std::vector<std::string> log;
  return log;
}

}  // namespace

void AccessGuard::record(std::string entry) {
  std::lock_guard lock(guard_mutex());
  guard_log().push_back(std::move(entry));
}

std::vector<std::string> AccessGuard::log() {
  std::lock_guard lock(guard_mutex());
  return guard_log();
}

std::size_t AccessGuard::violations() {
  std::lock_guard lock(guard_mutex());
  return guard_log().size();
}

void AccessGuard::clear() {
  std::lock_guard lock(guard_mutex());
  guard_log().clear();
}

Sample::Sample(std::uint64_t id, Role role, numerics::Tensor image,
               std::vector<Annotation> annotations)
    : id_(id), role_(role), image_(std::move(image)), annotations_(std::move(annotations)) {
  if (image_.rank() != 3 || image_.extent(2) != 3) {
    throw ShapeError("sample image must be H x W x 3, got " + numerics::shape_string(image_.shape()));
  }
}

const std::vector<Annotation>& Sample::annotations() const {
  if (role_ == Role::unlabeled) {
    std::string entry = "ground truth of unlabeled sample " + std::to_string(id_) + " read";
    AccessGuard::record(entry);
    throw FirewallViolation(entry);
  }
  return annotations_;
}

}  // namespace ctflab::synth
