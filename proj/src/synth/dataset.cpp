#include "ctflab/synth/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ctflab/binary_io.hpp"
#include "ctflab/error.hpp"
#include "ctflab/random.hpp"

namespace ctflab::synth {

using numerics::Shape;
using numerics::Tensor;

namespace {

constexpr std::uint64_t kGeneratePipeline = 0x67656e;  // "gen"

bool inside_shape(int cls, const Box& b, double px, double py) {
  switch (cls) {
    case kCircle: {
      const double r = 0.5 * b.width();
      const double dx = px - b.center_x();
      const double dy = py - b.center_y();
      return dx * dx + dy * dy <= r * r;
    }
    case kSquare:
      return px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2;
    case kTriangle: {
      // Apex at top centre, base along the bottom edge.
      if (py < b.y1 || py > b.y2) return false;
      const double half = 0.5 * b.width() * (py - b.y1) / b.height();
      return std::abs(px - b.center_x()) <= half;
    }
  }
  return false;
}

bool overlaps_with_margin(const Box& a, const Box& b, double margin) {
  return a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 &&
         b.y1 - margin < a.y2;
}

}  // namespace

void DatasetConfig::validate() const {
  if (image_size < 32) throw ConfigError("dataset.image_size must be >= 32");
  if (num_classes < 1 || num_classes > kMaxClasses)
    throw ConfigError("dataset.num_classes must be in [1, 3]");
  if (n_labeled < 1 || n_unlabeled < 1 || n_validation < 1)
    throw ConfigError("dataset split counts must be >= 1");
  if (min_objects < 1 || max_objects < min_objects)
    throw ConfigError("dataset object count range is invalid");
  if (min_object_size < 4 || max_object_size < min_object_size ||
      max_object_size > image_size / 2)
    throw ConfigError("dataset object size range is invalid");
}

Sample generate_sample(const DatasetConfig& cfg, std::uint64_t id, Role role) {
  Rng rng(derive_seed({cfg.seed, id, 0, kGeneratePipeline}));
  const std::size_t n = cfg.image_size;
  Tensor image(Shape{n, n, 3});

  // Gray textured background with a faint tint and pixel noise.
  const double base = rng.uniform(0.25, 0.55);
  const double amp = rng.uniform(0.03, 0.08);
  const double fx = rng.uniform(0.1, 0.5);
  const double fy = rng.uniform(0.1, 0.5);
  const double phx = rng.uniform(0.0, 2.0 * M_PI);
  const double phy = rng.uniform(0.0, 2.0 * M_PI);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.03, 0.03);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double tex = amp * std::sin(fx * x + phx) * std::sin(fy * y + phy);
      for (std::size_t c = 0; c < 3; ++c) {
        image.at(y, x, c) = std::clamp(base + tex + tint[c] + 0.03 * rng.normal(), 0.0, 1.0);
      }
    }
  }

  std::vector<Annotation> annotations;
  const std::size_t count =
      cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
  const std::size_t span = cfg.max_object_size - cfg.min_object_size + 1;
  for (std::size_t k = 0; k < count; ++k) {
    const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    for (int attempt = 0; attempt < 200; ++attempt) {
      const std::size_t w = cfg.min_object_size + rng.below(span);
      const std::size_t h = cls == kTriangle ? cfg.min_object_size + rng.below(span) : w;
      const double x1 = static_cast<double>(rng.below(n - w + 1));
      const double y1 = static_cast<double>(rng.below(n - h + 1));
      const Box box{x1, y1, x1 + static_cast<double>(w), y1 + static_cast<double>(h)};
      bool clash = false;
      for (const auto& a : annotations) clash = clash || overlaps_with_margin(a.box, box, 2.0);
      if (clash) continue;
      annotations.push_back({box, cls});
      break;
    }
  }

  for (const auto& a : annotations) {
    std::array<double, 3> color{};
    for (std::size_t c = 0; c < 3; ++c) {
      color[c] = static_cast<int>(c) == a.class_id ? rng.uniform(0.75, 0.95) : rng.uniform(0.05, 0.3);
    }
    const auto y0 = static_cast<std::size_t>(a.box.y1);
    const auto y1 = static_cast<std::size_t>(a.box.y2);
    const auto x0 = static_cast<std::size_t>(a.box.x1);
    const auto x1 = static_cast<std::size_t>(a.box.x2);
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        if (!inside_shape(a.class_id, a.box, x + 0.5, y + 0.5)) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          image.at(y, x, c) = std::clamp(color[c] + 0.02 * rng.normal(), 0.0, 1.0);
        }
      }
    }
  }
  return Sample(id, role, std::move(image), std::move(annotations));
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset data;
  std::uint64_t id = 0;
  for (std::size_t i = 0; i < cfg.n_labeled; ++i) data.labeled.push_back(generate_sample(cfg, id++, Role::labeled));
  for (std::size_t i = 0; i < cfg.n_unlabeled; ++i) data.unlabeled.push_back(generate_sample(cfg, id++, Role::unlabeled));
  for (std::size_t i = 0; i < cfg.n_validation; ++i) data.validation.push_back(generate_sample(cfg, id++, Role::validation));
  return data;
}

int signature_class(const Tensor& image, std::size_t y, std::size_t x, double margin) {
  for (int c = 0; c < 3; ++c) {
    const double v = image.at(y, x, static_cast<std::size_t>(c));
    bool dominant = true;
    for (int o = 0; o < 3; ++o) {
      if (o != c && v - image.at(y, x, static_cast<std::size_t>(o)) < margin) dominant = false;
    }
    if (dominant) return c;
  }
  return -1;
}

void export_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.txt");
  manifest << "# ctflab dataset v1: id role n_objects {x1 y1 x2 y2 class}*\n";
  const HarnessAccess harness;
  auto write_split = [&](const std::vector<Sample>& split) {
    for (const auto& s : split) {
      const auto& ann = s.annotations(harness);
      manifest << s.id() << ' ' << role_name(s.role()) << ' ' << ann.size();
      for (const auto& a : ann) {
        manifest << ' ' << binary_io::format_double(a.box.x1) << ' '
                 << binary_io::format_double(a.box.y1) << ' '
                 << binary_io::format_double(a.box.x2) << ' '
                 << binary_io::format_double(a.box.y2) << ' ' << a.class_id;
      }
      manifest << '\n';
      std::ofstream img(dir / "images" / (std::to_string(s.id()) + ".bin"), std::ios::binary);
      binary_io::write_tensor(img, s.image());
      if (!img) throw Error("failed to write image for sample " + std::to_string(s.id()));
    }
  };
  write_split(data.labeled);
  write_split(data.unlabeled);
  write_split(data.validation);
  if (!manifest) throw Error("failed to write manifest in " + dir.string());
}

Dataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("cannot open " + (dir / "manifest.txt").string());
  Dataset data;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::uint64_t id = 0;
    std::string role_text;
    std::size_t count = 0;
    if (!(ls >> id >> role_text >> count)) throw ConfigError("malformed manifest record", line_no);
    std::vector<Annotation> ann(count);
    for (auto& a : ann) {
      std::string x1, y1, x2, y2;
      if (!(ls >> x1 >> y1 >> x2 >> y2 >> a.class_id)) throw ConfigError("malformed box", line_no);
      a.box = Box{binary_io::parse_double(x1), binary_io::parse_double(y1),
                  binary_io::parse_double(x2), binary_io::parse_double(y2)};
    }
    std::ifstream img(dir / "images" / (std::to_string(id) + ".bin"), std::ios::binary);
    if (!img) throw Error("missing image for sample " + std::to_string(id));
    const Role role = parse_role(role_text);
    Sample s(id, role, binary_io::read_tensor(img), std::move(ann));
    switch (role) {
      case Role::labeled:
        data.labeled.push_back(std::move(s));
        break;
      case Role::unlabeled:
        data.unlabeled.push_back(std::move(s));
        break;
      case Role::validation:
        data.validation.push_back(std::move(s));
        break;
    }
  }
  return data;
}

}  // namespace ctflab::synth
