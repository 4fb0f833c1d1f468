// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lptq/detector.hpp"
#include "lptq/error.hpp"
#include "lptq/nn/model_io.hpp"
#include "lptq/random.hpp"

namespace lptq {

/// Synthetic scene distribution. Object surfaces and ground returns are
/// sampled with density falling off as 1 / d^falloff from the sensor at the
/// origin.
struct SceneSpec {
  int min_objects = 4;
  int max_objects = 12;
  double vehicle_fraction = 0.6;
  // size ranges in meters: {min, max}
  double vehicle_l[2] = {3.8, 5.2};
  double vehicle_w[2] = {1.7, 2.1};
  double vehicle_h[2] = {1.4, 1.9};
  double ped_lw[2] = {0.5, 0.9};
  double ped_h[2] = {1.5, 1.9};
  double surface_density = 400.0;  // points per m^2 at 1 m
  double falloff = 1.5;
  double ground_points = 2000;     // expected ground returns per scene
  int max_distractors = 6;         // poles and bushes
  double min_range = 3.0;
  double sensor_range = 44.0;
  double placement_half_extent = 30.0;  // object centers lie in [-e, e]^2
  double yaw_jitter = 0.15;

  void validate() const {
    if (min_objects < 0 || max_objects < min_objects) throw ParamError("scene: bad object count range");
    if (surface_density < 0 || ground_points < 0 || falloff < 0) {
      throw ParamError("scene: densities must be >= 0");
    }
    if (vehicle_l[0] <= 0 || vehicle_w[0] <= 0 || vehicle_h[0] <= 0 || ped_lw[0] <= 0 ||
        ped_h[0] <= 0) {
      throw ParamError("scene: sizes must be positive");
    }
  }
};

struct Scene {
  PointCloud points;
  std::vector<Box3D> boxes;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Stochastic rounding so expected counts survive small densities.
inline int sample_count(Rng& rng, double expected) {
  const double f = std::floor(expected);
  return static_cast<int>(f) + (rng.uniform() < expected - f ? 1 : 0);
}

/// Sample points on the sensor-facing faces and the top of an oriented box.
inline void sample_box_surface(Rng& rng, const Box3D& b, double density, double falloff,
                               double reflect_lo, double reflect_hi, PointCloud& out,
                               bool at_least_one) {
  const double d = std::max(1.0, std::hypot(b.x, b.y));
  const double rho = density / std::pow(d, falloff);
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  // local frame: u along l, v along w
  auto emit = [&](double u, double v, double z) {
    const double x = b.x + c * u - s * v + rng.normal(0, 0.02);
    const double y = b.y + s * u + c * v + rng.normal(0, 0.02);
    out.push_back({static_cast<float>(x), static_cast<float>(y), static_cast<float>(z),
                   static_cast<float>(rng.uniform(reflect_lo, reflect_hi))});
  };
  const std::size_t before = out.size();
  // to-sensor direction in the local frame
  const double tx = -b.x, ty = -b.y;
  const double lu = c * tx + s * ty, lv = -s * tx + c * ty;
  struct Face {
    double nu, nv, len;
  };
  const Face faces[4] = {{1, 0, b.w}, {-1, 0, b.w}, {0, 1, b.l}, {0, -1, b.l}};
  for (const auto& f : faces) {
    if (f.nu * lu + f.nv * lv <= 0) continue;
    const int n = sample_count(rng, rho * f.len * b.h);
    for (int i = 0; i < n; ++i) {
      const double along = rng.uniform(-0.5, 0.5) * f.len;
      const double z = rng.uniform(0.0, b.h);
      if (f.nu != 0) emit(f.nu * b.l / 2, along, z);
      else emit(along, f.nv * b.w / 2, z);
    }
  }
  const int top = sample_count(rng, 0.5 * rho * b.l * b.w);
  for (int i = 0; i < top; ++i) {
    emit(rng.uniform(-0.5, 0.5) * b.l, rng.uniform(-0.5, 0.5) * b.w, b.h);
  }
  if (at_least_one && out.size() == before) emit(0.0, 0.0, b.h);
}

}  // namespace detail

/// Generate one scene. Objects never overlap (0.5 m margin between
/// footprints); placement that cannot succeed within bounded retries is an
/// error.
inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Scene sc;
  const int n_obj = spec.min_objects +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
  std::vector<BevRect> taken;
  auto overlaps = [&](const BevRect& r) {
    for (const auto& t : taken) {
      if (r.x0 < t.x1 + 0.5 && t.x0 < r.x1 + 0.5 && r.y0 < t.y1 + 0.5 && t.y0 < r.y1 + 0.5) return true;
    }
    return false;
  };
  const double e = spec.placement_half_extent;
  for (int i = 0; i < n_obj; ++i) {
    Box3D b;
    b.cls = rng.uniform() < spec.vehicle_fraction ? 0 : 1;
    if (b.cls == 0) {
      b.l = rng.uniform(spec.vehicle_l[0], spec.vehicle_l[1]);
      b.w = rng.uniform(spec.vehicle_w[0], spec.vehicle_w[1]);
      b.h = rng.uniform(spec.vehicle_h[0], spec.vehicle_h[1]);
    } else {
      b.l = rng.uniform(spec.ped_lw[0], spec.ped_lw[1]);
      b.w = rng.uniform(spec.ped_lw[0], spec.ped_lw[1]);
      b.h = rng.uniform(spec.ped_h[0], spec.ped_h[1]);
    }
    const double base = rng.uniform() < 0.5 ? 0.0 : std::numbers::pi / 2;
    b.yaw = normalize_yaw(base + rng.uniform(-spec.yaw_jitter, spec.yaw_jitter));
    b.z = b.h / 2;
    b.score = 1.0;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      b.x = rng.uniform(-e, e);
      b.y = rng.uniform(-e, e);
      const double d = std::hypot(b.x, b.y);
      if (d < spec.min_range || d > spec.sensor_range) continue;
      const BevRect r = bev_rect(b);
      if (overlaps(r)) continue;
      taken.push_back(r);
      placed = true;
    }
    if (!placed) {
      throw Error("generate_scene: could not place object " + std::to_string(i) +
                  " without overlap after 200 attempts");
    }
    if (b.cls == 0) {
      detail::sample_box_surface(rng, b, spec.surface_density, spec.falloff, 0.3, 0.9, sc.points, true);
    } else {
      detail::sample_box_surface(rng, b, spec.surface_density, spec.falloff, 0.1, 0.4, sc.points, true);
    }
    sc.boxes.push_back(b);
  }

  // distractors: thin tall poles and low wide bushes
  const int n_dis = spec.max_distractors > 0
                        ? static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_distractors + 1)))
                        : 0;
  for (int i = 0; i < n_dis; ++i) {
    Box3D d;
    const bool pole = rng.uniform() < 0.5;
    d.l = pole ? rng.uniform(0.2, 0.4) : rng.uniform(1.0, 2.0);
    d.w = pole ? d.l : rng.uniform(0.8, 1.5);
    d.h = pole ? rng.uniform(2.8, 4.0) : rng.uniform(0.4, 0.9);
    d.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
    for (int attempt = 0; attempt < 50; ++attempt) {
      d.x = rng.uniform(-e, e);
      d.y = rng.uniform(-e, e);
      const double dist = std::hypot(d.x, d.y);
      if (dist < spec.min_range || dist > spec.sensor_range) continue;
      const BevRect r = bev_rect(d);
      if (overlaps(r)) continue;
      taken.push_back(r);
      detail::sample_box_surface(rng, d, spec.surface_density, spec.falloff, 0.0, 0.6, sc.points, true);
      break;
    }
  }

  // ground returns: uniform angle, radius uniform on [1, range] gives the
  // 1/d areal falloff of a spinning sensor
  const int n_ground = detail::sample_count(rng, spec.ground_points);
  for (int i = 0; i < n_ground; ++i) {
    const double a = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double r = rng.uniform(1.0, spec.sensor_range);
    sc.points.push_back({static_cast<float>(r * std::cos(a)), static_cast<float>(r * std::sin(a)),
                         static_cast<float>(rng.normal(0.0, 0.03)),
                         static_cast<float>(rng.uniform(0.0, 0.15))});
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// Every dataset file read goes through here so commands can prove which
/// files they touched.
class AccessLog {
 public:
  struct Entry {
    std::string kind;  // manifest | points | labels | model
    std::string path;
  };
  void record(std::string kind, std::string path) { entries_.push_back({std::move(kind), std::move(path)}); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count(const std::string& kind) const {
    return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(),
                                                  [&](const Entry& e) { return e.kind == kind; }));
  }
  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write access log '" + path + "'");
    for (const auto& e : entries_) out << e.kind << ',' << e.path << '\n';
  }

 private:
  std::vector<Entry> entries_;
};

inline constexpr char kPcl1Magic[4] = {'P', 'C', 'L', '1'};

/// PCL1: magic, u32 point count, then little-endian float32 (x, y, z, r).
inline std::vector<std::uint8_t> encode_pcl1(const PointCloud& pc) {
  nn::io::ByteWriter w;
  w.bytes(kPcl1Magic, 4);
  w.u32(static_cast<std::uint32_t>(pc.size()));
  for (const auto& p : pc) {
    w.f32(p.x);
    w.f32(p.y);
    w.f32(p.z);
    w.f32(p.r);
  }
  return w.buffer();
}

inline PointCloud decode_pcl1(const std::vector<std::uint8_t>& bytes) {
  nn::io::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kPcl1Magic, 4) != 0) throw FormatError("not a PCL1 file (bad magic)");
  const std::uint32_t n = r.u32();
  PointCloud pc(n);
  for (auto& p : pc) {
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
    p.r = r.f32();
  }
  if (!r.done()) throw FormatError("PCL1: trailing bytes");
  return pc;
}

/// One box per line: x,y,z,h,w,l,yaw,class.
inline std::string encode_labels(const std::vector<Box3D>& boxes) {
  std::string s;
  char buf[256];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", b.x, b.y, b.z, b.h,
                  b.w, b.l, b.yaw, b.cls);
    s += buf;
  }
  return s;
}

inline std::vector<Box3D> decode_labels(const std::string& text) {
  std::vector<Box3D> boxes;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Box3D b;
    int cls = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf,%lf,%lf,%d", &b.x, &b.y, &b.z, &b.h, &b.w,
                    &b.l, &b.yaw, &cls) != 8) {
      throw FormatError("label line " + std::to_string(lineno) + ": expected 8 comma-separated fields");
    }
    b.cls = cls;
    b.score = 1.0;
    boxes.push_back(b);
  }
  return boxes;
}

struct Frame {
  int id = 0;
  std::string split;  // train | val
  Scene scene;
};

/// Frames 0 .. n_train-1 are train, the next n_val are val. Each frame's
/// scene depends only on (seed, frame id).
inline std::vector<Frame> generate_dataset(const SceneSpec& spec, int n_train, int n_val,
                                           std::uint64_t seed) {
  std::vector<Frame> frames;
  frames.reserve(static_cast<std::size_t>(n_train + n_val));
  for (int i = 0; i < n_train + n_val; ++i) {
    frames.push_back({i, i < n_train ? "train" : "val",
                      generate_scene(spec, detail::mix_seed(seed, static_cast<std::uint64_t>(i)))});
  }
  return frames;
}

struct ManifestEntry {
  int id = 0;
  std::string split;
  std::string pcl_path;    // relative to the dataset root
  std::string label_path;
};

/// Writes frames/NNNNNN.pcl, labels/NNNNNN.txt and manifest.csv
/// (frame_id,split,pcl_path,label_path).
inline void write_dataset(const std::vector<Frame>& frames, const std::string& root) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "frames");
  fs::create_directories(fs::path(root) / "labels");
  std::ofstream manifest(fs::path(root) / "manifest.csv", std::ios::trunc);
  if (!manifest) throw Error("cannot write manifest in '" + root + "'");
  for (const auto& f : frames) {
    char name[32];
    std::snprintf(name, sizeof name, "%06d", f.id);
    const std::string pcl = std::string("frames/") + name + ".pcl";
    const std::string lab = std::string("labels/") + name + ".txt";
    nn::io::write_file((fs::path(root) / pcl).string(), encode_pcl1(f.scene.points));
    const std::string text = encode_labels(f.scene.boxes);
    nn::io::write_file((fs::path(root) / lab).string(),
                       std::vector<std::uint8_t>(text.begin(), text.end()));
    manifest << f.id << ',' << f.split << ',' << pcl << ',' << lab << '\n';
  }
}

/// Read-side view of an on-disk dataset. Points and labels load separately
/// and every read is logged.
class DatasetReader {
 public:
  DatasetReader(std::string root, AccessLog& log) : root_(std::move(root)), log_(&log) {
    const std::string path = (std::filesystem::path(root_) / "manifest.csv").string();
    std::ifstream in(path);
    if (!in) throw ConfigError("dataset manifest not found: '" + path + "'");
    log_->record("manifest", path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      ManifestEntry e;
      std::string id;
      if (!std::getline(ls, id, ',') || !std::getline(ls, e.split, ',') ||
          !std::getline(ls, e.pcl_path, ',') || !std::getline(ls, e.label_path)) {
        throw FormatError("manifest: malformed line '" + line + "'");
      }
      e.id = std::stoi(id);
      entries_.push_back(std::move(e));
    }
  }

  std::vector<ManifestEntry> split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries_) {
      if (e.split == name) out.push_back(e);
    }
    return out;
  }

  PointCloud points(const ManifestEntry& e) const {
    const std::string path = (std::filesystem::path(root_) / e.pcl_path).string();
    log_->record("points", path);
    return decode_pcl1(nn::io::read_file(path));
  }

  std::vector<Box3D> labels(const ManifestEntry& e) const {
    const std::string path = (std::filesystem::path(root_) / e.label_path).string();
    log_->record("labels", path);
    const auto bytes = nn::io::read_file(path);
    return decode_labels(std::string(bytes.begin(), bytes.end()));
  }

 private:
  std::string root_;
  AccessLog* log_;
  std::vector<ManifestEntry> entries_;
};

}  // namespace lptq
