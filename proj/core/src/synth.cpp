#include "voxseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "voxseg/categories.hpp"

namespace voxseg {

namespace {

constexpr std::size_t kTargetPoints = 2500;
constexpr double kMinPartFraction = 0.01;

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Primitive box(double x0, double x1, double y0, double y1, double z0, double z1, int label) {
  Primitive p;
  p.kind = Primitive::Kind::kBox;
  p.center = {(x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2};
  p.size = {(x1 - x0) / 2, (y1 - y0) / 2, (z1 - z0) / 2};
  p.label = label;
  return p;
}

Primitive cylinder(double x, double y0, double y1, double z, double radius, int label) {
  Primitive p;
  p.kind = Primitive::Kind::kCylinder;
  p.center = {x, (y0 + y1) / 2, z};
  p.size = {radius, (y1 - y0) / 2, 0};
  p.label = label;
  return p;
}

// Four legs under a rectangle of half extents (hx, hz) reaching height `top`.
void add_legs(std::vector<Primitive>& parts, double hx, double hz, double top, double thick, int label) {
  for (double sx : {-1.0, 1.0}) {
    for (double sz : {-1.0, 1.0}) {
      const double x1 = sx * hx;
      const double x0 = x1 - sx * thick;
      const double z1 = sz * hz;
      const double z0 = z1 - sz * thick;
      parts.push_back(box(std::min(x0, x1), std::max(x0, x1), 0, top, std::min(z0, z1),
                          std::max(z0, z1), label));
    }
  }
}

std::vector<Primitive> table_parts(Rng& rng) {
  const double hx = uniform(rng, 0.6, 0.9);
  const double hz = uniform(rng, 0.4, 0.6);
  const double height = uniform(rng, 0.9, 1.2);
  const double top = uniform(rng, 0.08, 0.12);
  const double leg = uniform(rng, 0.14, 0.18);
  std::vector<Primitive> parts{box(-hx, hx, height - top, height, -hz, hz, 1)};
  add_legs(parts, hx - 0.05, hz - 0.05, height - top, leg, 2);
  return parts;
}

std::vector<Primitive> chair_parts(Rng& rng) {
  const double hx = uniform(rng, 0.4, 0.5);
  const double hz = uniform(rng, 0.4, 0.5);
  const double seat_top = uniform(rng, 0.8, 1.0);
  const double seat = uniform(rng, 0.08, 0.12);
  const double back_h = uniform(rng, 0.8, 1.1);
  const double back_t = uniform(rng, 0.08, 0.12);
  const double leg = uniform(rng, 0.14, 0.18);
  const bool arms = std::bernoulli_distribution(0.5)(rng);

  std::vector<Primitive> parts;
  // back = 1, seat = 2, leg = 3, arm = 4
  parts.push_back(box(-hx, hx, seat_top, seat_top + back_h, -hz, -hz + back_t, 1));
  parts.push_back(box(-hx, hx, seat_top - seat, seat_top, -hz, hz, 2));
  add_legs(parts, hx, hz, seat_top - seat, leg, 3);
  if (arms) {
    const double w = uniform(rng, 0.12, 0.16);
    const double rest = seat_top + uniform(rng, 0.25, 0.35);
    const double t = uniform(rng, 0.1, 0.14);
    for (double s : {-1.0, 1.0}) {
      const double x0 = s > 0 ? hx - w : -hx;
      const double x1 = s > 0 ? hx : -hx + w;
      parts.push_back(box(x0, x1, rest, rest + t, -hz + back_t, hz, 4));  // rest
      parts.push_back(box(x0, x1, seat_top, rest, hz - w, hz, 4));        // front post
    }
  }
  return parts;
}

std::vector<Primitive> lamp_parts(Rng& rng) {
  const double base_r = uniform(rng, 0.4, 0.6);
  const double base_h = uniform(rng, 0.08, 0.12);
  const double pole_r = uniform(rng, 0.1, 0.14);
  const double pole_h = uniform(rng, 1.2, 1.6);
  const double shade_r = uniform(rng, 0.4, 0.6);
  const double shade_h = uniform(rng, 0.3, 0.5);
  return {cylinder(0, 0, base_h, 0, base_r, 1),
          cylinder(0, base_h, base_h + pole_h, 0, pole_r, 2),
          cylinder(0, base_h + pole_h, base_h + pole_h + shade_h, 0, shade_r, 3)};
}

Point3 sample_surface(const Primitive& p, Rng& rng) {
  const auto& c = p.center;
  const auto& s = p.size;
  if (p.kind == Primitive::Kind::kBox) {
    // Faces normal to x, y, z have areas 4 s_y s_z, 4 s_x s_z, 4 s_x s_y.
    const double a[3] = {s[1] * s[2], s[0] * s[2], s[0] * s[1]};
    const double u = uniform(rng, 0, a[0] + a[1] + a[2]);
    const int axis = u < a[0] ? 0 : (u < a[0] + a[1] ? 1 : 2);
    const double side = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
    Point3 q{};
    for (int k = 0; k < 3; ++k) {
      q[k] = k == axis ? c[k] + side * s[k] : c[k] + uniform(rng, -s[k], s[k]);
    }
    return q;
  }
  const double r = s[0];
  const double h = s[1];
  const double side_area = 2 * std::numbers::pi * r * 2 * h;
  const double cap_area = std::numbers::pi * r * r;
  const double u = uniform(rng, 0, side_area + 2 * cap_area);
  const double theta = uniform(rng, 0, 2 * std::numbers::pi);
  if (u < side_area) {
    return {c[0] + r * std::cos(theta), c[1] + uniform(rng, -h, h), c[2] + r * std::sin(theta)};
  }
  const double rho = r * std::sqrt(uniform(rng, 0, 1));
  const double y = u < side_area + cap_area ? c[1] - h : c[1] + h;
  return {c[0] + rho * std::cos(theta), y, c[2] + rho * std::sin(theta)};
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

double Primitive::area() const {
  if (kind == Kind::kBox) {
    return 8 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2]);
  }
  return 2 * std::numbers::pi * size[0] * 2 * size[1] + 2 * std::numbers::pi * size[0] * size[0];
}

double Primitive::surface_distance(const Point3& p) const {
  if (kind == Kind::kBox) {
    double outside = 0;
    double inside = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
      const double d = std::abs(p[k] - center[k]) - size[k];
      outside += std::max(d, 0.0) * std::max(d, 0.0);
      inside = std::min(inside, -d);
    }
    return outside > 0 ? std::sqrt(outside) : inside;
  }
  const double radial = std::hypot(p[0] - center[0], p[2] - center[2]) - size[0];
  const double axial = std::abs(p[1] - center[1]) - size[1];
  if (radial > 0 || axial > 0) {
    return std::hypot(std::max(radial, 0.0), std::max(axial, 0.0));
  }
  return std::min(-radial, -axial);
}

bool recipe_has_label(const ShapeRecipe& recipe, int label) {
  return std::any_of(recipe.parts.begin(), recipe.parts.end(),
                     [label](const Primitive& p) { return p.label == label; });
}

GeneratedShape generate_shape(const std::string& category, std::uint64_t seed) {
  std::vector<Primitive> (*build)(Rng&) = nullptr;
  if (category == "table") build = table_parts;
  if (category == "chair") build = chair_parts;
  if (category == "lamp") build = lamp_parts;
  if (!build) {
    throw std::invalid_argument("unknown synthetic category \"" + category +
                                "\" (known: table, chair, lamp)");
  }
  const int part_count = find_category(category).part_count();

  Rng rng(seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    GeneratedShape g;
    g.recipe.category = category;
    g.recipe.seed = seed;
    g.recipe.parts = build(rng);
    double total = 0;
    for (const auto& p : g.recipe.parts) total += p.area();
    g.recipe.density = static_cast<double>(kTargetPoints) / total;

    std::vector<std::size_t> per_label(static_cast<std::size_t>(part_count) + 1, 0);
    for (std::size_t k = 0; k < g.recipe.parts.size(); ++k) {
      const auto& prim = g.recipe.parts[k];
      const auto n = static_cast<std::size_t>(std::max(1.0, std::round(g.recipe.density * prim.area())));
      for (std::size_t i = 0; i < n; ++i) {
        g.cloud.points.push_back(sample_surface(prim, rng));
        g.cloud.labels.push_back(prim.label);
        g.primitive_index.push_back(k);
      }
      per_label[static_cast<std::size_t>(prim.label)] += n;
    }
    const double floor = kMinPartFraction * static_cast<double>(g.cloud.size());
    bool ok = true;
    for (int l = 1; l <= part_count; ++l) {
      if (recipe_has_label(g.recipe, l) && static_cast<double>(per_label[l]) < floor) ok = false;
    }
    if (!ok) continue;
    g.cloud.category = category;
    return g;
  }
  throw std::runtime_error("could not generate a " + category + " with every part above 1% of points");
}

std::uint64_t dataset_shape_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 is a bijection, so distinct (seed, index) pairs with equal seed differ.
  return splitmix64(splitmix64(seed) + index);
}

DatasetManifest make_dataset(const std::string& category, std::size_t n_train, std::size_t n_test,
                             std::uint64_t seed, const std::string& dir) {
  if (n_train < 1 || n_test < 1) throw std::invalid_argument("need at least one train and one test shape");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.category = category;
  char id[64];
  for (std::size_t i = 0; i < n_train + n_test; ++i) {
    std::snprintf(id, sizeof id, "%s_%04zu", category.c_str(), i);
    auto g = generate_shape(category, dataset_shape_seed(seed, i));
    g.cloud.shape_id = id;
    write_point_cloud((std::filesystem::path(dir) / (std::string(id) + ".txt")).string(), g.cloud);
    (i < n_train ? m.train : m.test).push_back(id);
  }
  nlohmann::json j;
  j["category"] = m.category;
  j["train"] = m.train;
  j["test"] = m.test;
  const auto path = (std::filesystem::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
  return m;
}

Dataset load_dataset(const std::string& dir) {
  const auto path = (std::filesystem::path(dir) / "manifest.json").string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  Dataset d;
  try {
    d.manifest.category = j.at("category").get<std::string>();
    d.manifest.train = j.at("train").get<std::vector<std::string>>();
    d.manifest.test = j.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": expected {\"category\", \"train\", \"test\"}: " + e.what());
  }
  const int parts = find_category(d.manifest.category).part_count();
  auto load = [&](const std::vector<std::string>& ids, std::vector<LabeledPointCloud>& out) {
    for (const auto& id : ids) {
      auto c = read_point_cloud((std::filesystem::path(dir) / (id + ".txt")).string());
      for (int l : c.labels) {
        if (l > parts) {
          throw std::runtime_error(id + ": label " + std::to_string(l) + " exceeds the " +
                                   std::to_string(parts) + " parts of " + d.manifest.category);
        }
      }
      c.category = d.manifest.category;
      c.shape_id = id;
      out.push_back(std::move(c));
    }
  };
  load(d.manifest.train, d.train);
  load(d.manifest.test, d.test);
  return d;
}

}  // namespace voxseg
