#include "oamix/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "oamix/errors.hpp"
#include "oamix/rng.hpp"
#include "oamix/tensor_io.hpp"

namespace oamix {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticSpec::validate() const {
  if (classes < 2 || classes > 4)
    throw ConfigError("synthetic spec: classes must be in [2, 4] (one procedural shape each)");
  if (bg_families < 2 || bg_families > 8)
    throw ConfigError("synthetic spec: bg_families must be in [2, 8]");
  if (image <= 0 || patch <= 0 || image % patch != 0)
    throw ConfigError("synthetic spec: image must be a positive multiple of patch");
  if (channels != 3) throw ConfigError("synthetic spec: channels must be 3");
  if (bg_correlation < 0.0 || bg_correlation > 1.0)
    throw ConfigError("synthetic spec: bg_correlation must be in [0, 1]");
  if (train_samples < 1 || eval_samples < 1)
    throw ConfigError("synthetic spec: sample counts must be positive");
  if (image < 2 * patch)
    throw ConfigError("synthetic spec: need at least a 2x2 patch grid");
}

namespace {

struct TexParams {
  double cell_x, cell_y, angle;
  float base[3], amp[3];
};

// fixed palette of texture families; frequency/orientation/color separate them
const TexParams kFamilies[8] = {
    {10.0, 10.0, 0.00, {0.10f, 0.20f, 0.45f}, {0.15f, 0.20f, 0.30f}},  // blue blobs
    {3.0, 3.0, 0.00, {0.12f, 0.40f, 0.15f}, {0.20f, 0.30f, 0.15f}},    // green grain
    {14.0, 3.0, 0.00, {0.50f, 0.30f, 0.10f}, {0.30f, 0.20f, 0.10f}},   // warm banding
    {12.0, 3.0, 0.785, {0.35f, 0.12f, 0.45f}, {0.25f, 0.15f, 0.30f}},  // purple diagonal
    {6.0, 6.0, 0.00, {0.40f, 0.40f, 0.12f}, {0.25f, 0.25f, 0.10f}},    // olive speckle
    {3.0, 12.0, 0.00, {0.12f, 0.38f, 0.40f}, {0.12f, 0.28f, 0.28f}},   // teal vertical
    {8.0, 8.0, 0.40, {0.45f, 0.18f, 0.18f}, {0.30f, 0.12f, 0.12f}},    // rust tilt
    {5.0, 5.0, 1.10, {0.25f, 0.25f, 0.25f}, {0.30f, 0.30f, 0.30f}},    // gray weave
};

// bilinear value noise over a seeded lattice, periodic in both directions
struct ValueNoise {
  int64_t gx, gy;
  std::vector<double> lattice;

  ValueNoise(Rng& rng, int64_t gx_, int64_t gy_) : gx(gx_), gy(gy_) {
    lattice.resize(static_cast<size_t>(gx * gy));
    for (auto& v : lattice) v = rng.uniform();
  }

  double at(double u, double v) const {
    double fu = std::floor(u), fv = std::floor(v);
    int64_t i0 = static_cast<int64_t>(fu), j0 = static_cast<int64_t>(fv);
    double du = u - fu, dv = v - fv;
    auto wrap = [](int64_t a, int64_t n) { return ((a % n) + n) % n; };
    auto L = [&](int64_t i, int64_t j) {
      return lattice[static_cast<size_t>(wrap(j, gy) * gx + wrap(i, gx))];
    };
    double top = L(i0, j0) * (1.0 - du) + L(i0 + 1, j0) * du;
    double bot = L(i0, j0 + 1) * (1.0 - du) + L(i0 + 1, j0 + 1) * du;
    return top * (1.0 - dv) + bot * dv;
  }
};

void render_background(Rng rng, int64_t family, int64_t size, std::vector<float>& img) {
  const TexParams& tp = kFamilies[family % 8];
  Rng r1 = rng.fork("octave1");
  Rng r2 = rng.fork("octave2");
  ValueNoise n1(r1, 8, 8);
  ValueNoise n2(r2, 16, 16);
  double ca = std::cos(tp.angle), sa = std::sin(tp.angle);
  double cx = size / 2.0, cy = size / 2.0;
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      double xr = cx + (x - cx) * ca - (y - cy) * sa;
      double yr = cy + (x - cx) * sa + (y - cy) * ca;
      double v = 0.65 * n1.at(xr / tp.cell_x, yr / tp.cell_y) +
                 0.35 * n2.at(xr / (tp.cell_x * 0.5), yr / (tp.cell_y * 0.5));
      for (int64_t c = 0; c < 3; ++c) {
        float val = tp.base[c] + tp.amp[c] * static_cast<float>(v);
        img[static_cast<size_t>(c * size * size + y * size + x)] = std::clamp(val, 0.0f, 1.0f);
      }
    }
}

struct FgParams {
  int64_t shape;  // 0 disk, 1 ring, 2 cross, 3 bar
  double cx, cy, radius, width;
  bool vertical;
  float color[3];
};

FgParams draw_foreground(Rng rng, int64_t shape, int64_t size) {
  FgParams fg;
  fg.shape = shape;
  fg.radius = rng.uniform(0.22, 0.34) * static_cast<double>(size);
  double margin = fg.radius + 1.0;
  fg.cx = rng.uniform(margin, static_cast<double>(size) - margin);
  fg.cy = rng.uniform(margin, static_cast<double>(size) - margin);
  fg.width = std::max(2.0, fg.radius / 3.0);
  fg.vertical = rng.uniform() < 0.5;
  // saturated random hue so color carries no class signal
  double h = rng.uniform() * 6.0;
  double f = h - std::floor(h);
  double p = 0.95 * (1.0 - 0.9), q = 0.95 * (1.0 - 0.9 * f), t = 0.95 * (1.0 - 0.9 * (1.0 - f));
  double rgb[3];
  switch (static_cast<int>(h) % 6) {
    case 0: rgb[0] = 0.95; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = 0.95; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = 0.95; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = 0.95; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = 0.95; break;
    default: rgb[0] = 0.95; rgb[1] = p; rgb[2] = q; break;
  }
  for (int c = 0; c < 3; ++c) fg.color[c] = static_cast<float>(rgb[c]);
  return fg;
}

bool fg_member(const FgParams& fg, double px, double py) {
  double dx = px - fg.cx, dy = py - fg.cy;
  if (fg.vertical) std::swap(dx, dy);
  double r2 = dx * dx + dy * dy;
  double R2 = fg.radius * fg.radius;
  switch (fg.shape) {
    case 0:  // disk
      return r2 <= R2;
    case 1:  // ring
      return r2 <= R2 && r2 > 0.30 * R2;
    case 2:  // cross
      return (std::abs(dx) <= fg.width && std::abs(dy) <= fg.radius) ||
             (std::abs(dy) <= fg.width && std::abs(dx) <= fg.radius);
    default:  // bar
      return std::abs(dy) <= fg.width && std::abs(dx) <= fg.radius;
  }
}

Sample render_sample(const SyntheticSpec& spec, Rng rng_bg, Rng rng_fg, int64_t class_id,
                     int64_t bg_family, bool with_fg, int64_t fg_instance) {
  const int64_t size = spec.image;
  std::vector<float> img(static_cast<size_t>(3 * size * size));
  render_background(rng_bg, bg_family, size, img);

  const int64_t grid = spec.grid();
  std::vector<double> coverage(static_cast<size_t>(grid * grid), 0.0);
  if (with_fg) {
    FgParams fg = draw_foreground(rng_fg, class_id, size);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        if (!fg_member(fg, x + 0.5, y + 0.5)) continue;
        for (int64_t c = 0; c < 3; ++c)
          img[static_cast<size_t>(c * size * size + y * size + x)] = fg.color[c];
        coverage[static_cast<size_t>((y / spec.patch) * grid + (x / spec.patch))] += 1.0;
      }
    double inv = 1.0 / static_cast<double>(spec.patch * spec.patch);
    for (auto& v : coverage) v *= inv;
  }

  Sample s;
  s.image = Tensor<float>::from_data({3, size, size}, std::move(img));
  s.label_map.height = grid;
  s.label_map.width = grid;
  s.label_map.classes = 1;
  s.label_map.kind = LabelKind::BinarySoft;
  s.label_map.values = std::move(coverage);
  s.class_id = class_id;
  s.bg_family = bg_family;
  s.fg_instance = fg_instance;
  return s;
}

int64_t family_of(const SyntheticSpec& spec, int64_t class_id) {
  return class_id % spec.bg_families;
}

int64_t other_family(const SyntheticSpec& spec, int64_t avoid, Rng& rng) {
  int64_t f = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(spec.bg_families - 1)));
  return f >= avoid ? f + 1 : f;
}

}  // namespace

Dataset gen_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  Rng root(spec.seed);

  BenchmarkSplit original{"original", {}};
  Rng r_orig = root.fork("original");
  for (int64_t i = 0; i < spec.train_samples; ++i) {
    Rng r = r_orig.fork(static_cast<uint64_t>(i));
    int64_t cls = static_cast<int64_t>(r.uniform_int(static_cast<uint64_t>(spec.classes)));
    int64_t fam = family_of(spec, cls);
    if (r.uniform() >= spec.bg_correlation) fam = other_family(spec, fam, r);
    original.samples.push_back(
        render_sample(spec, r.fork("bg"), r.fork("fg"), cls, fam, true, -1));
  }
  ds.splits["original"] = std::move(original);

  BenchmarkSplit same{"mixed_same", {}}, rand{"mixed_rand", {}}, only{"only_bg", {}};
  Rng r_eval = root.fork("eval");
  for (int64_t i = 0; i < spec.eval_samples; ++i) {
    Rng r = r_eval.fork(static_cast<uint64_t>(i));
    int64_t cls = i % spec.classes;  // balanced eval splits
    int64_t fam = family_of(spec, cls);
    Rng r_fg = r.fork("fg");  // one foreground instance, two backgrounds
    Rng r_rf = r.fork("rand_family");
    int64_t fam_rand = other_family(spec, fam, r_rf);
    same.samples.push_back(render_sample(spec, r.fork("bg_same"), r_fg, cls, fam, true, i));
    rand.samples.push_back(render_sample(spec, r.fork("bg_rand"), r_fg, cls, fam_rand, true, i));
    only.samples.push_back(render_sample(spec, r.fork("bg_only"), r_fg, cls, fam, false, -1));
  }
  ds.splits["mixed_same"] = std::move(same);
  ds.splits["mixed_rand"] = std::move(rand);
  ds.splits["only_bg"] = std::move(only);
  return ds;
}

PatchLabels sample_patch_labels(const Sample& s, int64_t grid_h, int64_t grid_w) {
  return pool_to_patches(s.label_map, grid_h, grid_w);
}

// ---------------------------------------------------------------------------
// on-disk layout

namespace {

json spec_to_json(const SyntheticSpec& s) {
  return json{{"image", s.image},
              {"channels", s.channels},
              {"patch", s.patch},
              {"classes", s.classes},
              {"bg_families", s.bg_families},
              {"bg_correlation", s.bg_correlation},
              {"train_samples", s.train_samples},
              {"eval_samples", s.eval_samples},
              {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const json& j) {
  SyntheticSpec s;
  s.image = j.value("image", s.image);
  s.channels = j.value("channels", s.channels);
  s.patch = j.value("patch", s.patch);
  s.classes = j.value("classes", s.classes);
  s.bg_families = j.value("bg_families", s.bg_families);
  s.bg_correlation = j.value("bg_correlation", s.bg_correlation);
  s.train_samples = j.value("train_samples", s.train_samples);
  s.eval_samples = j.value("eval_samples", s.eval_samples);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::string index_name(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05lld", static_cast<long long>(i));
  return buf;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(dir);
  json meta;
  meta["spec"] = spec_to_json(ds.spec);
  for (const auto& [name, split] : ds.splits) {
    fs::create_directories(dir + "/" + name);
    json cls = json::array(), fam = json::array(), inst = json::array();
    for (int64_t i = 0; i < static_cast<int64_t>(split.samples.size()); ++i) {
      const Sample& s = split.samples[static_cast<size_t>(i)];
      std::string stem = dir + "/" + name + "/" + index_name(i);
      save_oat1(stem + ".oat1", s.image);
      save_label_map(stem + ".oal1", s.label_map);
      cls.push_back(s.class_id);
      fam.push_back(s.bg_family);
      inst.push_back(s.fg_instance);
    }
    meta["splits"][name] = {{"count", split.samples.size()},
                            {"class", cls},
                            {"bg_family", fam},
                            {"fg_instance", inst}};
  }
  std::ofstream f(dir + "/meta.json", std::ios::trunc);
  if (!f) throw FormatError("cannot write " + dir + "/meta.json");
  f << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/meta.json");
  if (!f) throw FormatError("cannot open " + dir + "/meta.json");
  json meta = json::parse(f);
  Dataset ds;
  ds.spec = spec_from_json(meta.at("spec"));
  for (auto& [name, info] : meta.at("splits").items()) {
    BenchmarkSplit split;
    split.name = name;
    int64_t count = info.at("count");
    for (int64_t i = 0; i < count; ++i) {
      std::string stem = dir + "/" + name + "/" + index_name(i);
      Sample s;
      s.image = load_oat1<float>(stem + ".oat1");
      s.label_map = load_label_map(stem + ".oal1");
      s.class_id = info.at("class").at(static_cast<size_t>(i));
      s.bg_family = info.at("bg_family").at(static_cast<size_t>(i));
      s.fg_instance = info.at("fg_instance").at(static_cast<size_t>(i));
      split.samples.push_back(std::move(s));
    }
    ds.splits[name] = std::move(split);
  }
  return ds;
}

uint64_t dir_digest(const std::string& dir) {
  std::vector<std::string> files;
  for (auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
  std::sort(files.begin(), files.end());
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& fpath : files) {
    mix(fpath);
    mix(read_file_bytes(dir + "/" + fpath));
  }
  return h;
}

}  // namespace oamix
