#include "trajguard/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "json.hpp"

namespace trajguard {

using json = nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::reserved: return "reserved";
    case Split::test: return "test";
  }
  return "unknown";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "reserved") return Split::reserved;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split tag '" + s + "'");
}

void LabeledDataset::push_back(std::span<const float> x, float label, std::uint64_t id) {
  if (x.size() != shape.size()) {
    throw ShapeError("sample of " + std::to_string(x.size()) + " values does not match shape " +
                     shape.str());
  }
  samples.insert(samples.end(), x.begin(), x.end());
  labels.push_back(label);
  ids.push_back(id);
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.shape = shape;
  out.split = split;
  out.samples.reserve(indices.size() * shape.size());
  for (std::size_t i : indices) out.push_back(sample(i), labels.at(i), ids.at(i));
  return out;
}

LabeledDataset LabeledDataset::head(std::size_t count) const {
  std::vector<std::size_t> idx(std::min(count, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

void LabeledDataset::validate() const {
  if (ids.size() != labels.size() || samples.size() != labels.size() * shape.size()) {
    throw ShapeError("dataset arrays disagree: " + std::to_string(labels.size()) + " labels, " +
                     std::to_string(ids.size()) + " ids, " + std::to_string(samples.size()) +
                     " sample values for shape " + shape.str());
  }
}

void save_dataset(const std::filesystem::path& dir, const LabeledDataset& data) {
  data.validate();
  std::filesystem::create_directories(dir);
  json m;
  m["kind"] = "labeled_dataset";
  m["split"] = to_string(data.split);
  m["shape"] = {data.shape.channels, data.shape.height, data.shape.width};
  m["count"] = data.size();
  m["ids"] = data.ids;
  m["samples"] = "samples.bin";
  m["labels"] = "labels.bin";
  io::write_f32(dir / "samples.bin", data.samples);
  io::write_f32(dir / "labels.bin", data.labels);
  io::write_text(dir / "manifest.json", m.dump(2));
}

LabeledDataset load_dataset(const std::filesystem::path& dir) {
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  LabeledDataset data;
  const auto shape = m.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw ShapeError("dataset shape must have three entries");
  data.shape = {shape[0], shape[1], shape[2]};
  data.split = split_from_string(m.at("split").get<std::string>());
  const auto count = m.at("count").get<std::size_t>();
  data.ids = m.at("ids").get<std::vector<std::uint64_t>>();
  data.samples = io::read_f32(dir / m.value("samples", "samples.bin"), count * data.shape.size());
  data.labels = io::read_f32(dir / m.value("labels", "labels.bin"), count);
  data.validate();
  return data;
}

namespace {

bool inside_triangle(double u, double v) {
  // apex up; image rows grow downward
  const double ax = 0.0, ay = -0.85, bx = -0.85, by = 0.7, cx = 0.85, cy = 0.7;
  auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
    return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
  };
  const double e0 = edge(ax, ay, bx, by, u, v);
  const double e1 = edge(bx, by, cx, cy, u, v);
  const double e2 = edge(cx, cy, ax, ay, u, v);
  return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
}

bool plus_shape(double u, double v) {
  return (std::abs(u) <= 0.22 && std::abs(v) <= 0.85) || (std::abs(v) <= 0.22 && std::abs(u) <= 0.85);
}

bool bars(double along, double across) {
  if (std::abs(along) > 0.85 || std::abs(across) > 0.9) return false;
  return std::fmod(across + 0.9, 0.6) < 0.3;
}

bool glyph_ink(int label, double u, double v) {
  const double r = std::hypot(u, v);
  const double box = std::max(std::abs(u), std::abs(v));
  switch (label) {
    case 0: return r <= 0.8;
    case 1: return r >= 0.5 && r <= 0.85;
    case 2: return box <= 0.75;
    case 3: return box >= 0.45 && box <= 0.8;
    case 4: return inside_triangle(u, v);
    case 5: return plus_shape(u, v);
    case 6: {
      const double k = std::numbers::sqrt2 / 2.0;
      return plus_shape(k * (u - v), k * (u + v));
    }
    case 7: return bars(u, v);
    case 8: return bars(v, u);
    case 9:
      return (std::abs(v + 0.6) <= 0.22 && std::abs(u) <= 0.85) ||
             (std::abs(u) <= 0.22 && v >= -0.6 && v <= 0.85);
    default: return false;
  }
}

}  // namespace

void render_glyph(const GlyphSetConfig& config, std::uint64_t id, std::span<float> out) {
  const int n = config.size;
  if (out.size() != static_cast<std::size_t>(n) * n) throw ShapeError("glyph buffer size mismatch");
  std::mt19937_64 rng(mix_seed(config.seed, id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int label = static_cast<int>(id % kGlyphClasses);
  const double centre = (n - 1) / 2.0;
  const double cx = centre + uniform(-config.jitter, config.jitter);
  const double cy = centre + uniform(-config.jitter, config.jitter);
  const double half = (n * 0.27) * uniform(0.8, 1.15);
  const double angle = uniform(-config.rotation_deg, config.rotation_deg) * std::numbers::pi / 180.0;
  const double contrast = uniform(config.min_contrast, config.max_contrast);
  const double base = uniform(config.min_background, config.max_background);
  const double gx = uniform(-config.gradient, config.gradient);
  const double gy = uniform(-config.gradient, config.gradient);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const int corner = std::max(3, n / 7);
  std::normal_distribution<double> noise(0.0, config.noise_sigma);

  constexpr int kSuper = 3;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double coverage = 0.0;
      const bool in_corner = (x < corner || x >= n - corner) && (y < corner || y >= n - corner);
      if (!in_corner) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper - 0.5 - cx;
            const double py = y + (sy + 0.5) / kSuper - 0.5 - cy;
            const double u = (ca * px + sa * py) / half;
            const double v = (-sa * px + ca * py) / half;
            hits += glyph_ink(label, u, v) ? 1 : 0;
          }
        }
        coverage = static_cast<double>(hits) / (kSuper * kSuper);
      }
      const double bg = base + gx * (x - centre) + gy * (y - centre);
      const double value = bg + coverage * contrast + noise(rng);
      out[static_cast<std::size_t>(y) * n + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
}

LabeledDataset make_glyph_set(const GlyphSetConfig& config, Split split, std::uint64_t first_id,
                              std::size_t count) {
  LabeledDataset data;
  data.shape = {1, config.size, config.size};
  data.split = split;
  data.samples.resize(count * data.shape.size());
  data.labels.resize(count);
  data.ids.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t id = first_id + i;
    render_glyph(config, id, data.sample(i));
    data.labels[i] = static_cast<float>(id % kGlyphClasses);
    data.ids[i] = id;
  }
  return data;
}

}  // namespace trajguard
