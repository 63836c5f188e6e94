#include "fmbff/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "fmbff/image_io.hpp"
#include "fmbff/ops.hpp"

namespace fs = std::filesystem;

namespace fmbff {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Portable Fisher-Yates (std::shuffle's draw sequence is library-defined).
template <typename V>
void seeded_shuffle(std::vector<V>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

struct Ellipse {
  double cx, cy, rx, ry, angle;
  double dist(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = x - cx, dy = y - cy;
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    return std::sqrt(u * u + v * v);
  }
};

Sample synthesize(Index h, Index w, std::mt19937_64& rng, const std::string& id) {
  const double size = static_cast<double>(std::min(h, w));
  const Index plane = h * w;
  std::vector<Ellipse> blobs;
  std::vector<float> mask(static_cast<std::size_t>(plane));
  std::vector<double> dmin(static_cast<std::size_t>(plane));
  for (;;) {
    blobs.clear();
    const int count = 1 + static_cast<int>(rng() % 3);
    for (int b = 0; b < count; ++b) {
      blobs.push_back({uniform(rng, 0.2, 0.8) * (w - 1), uniform(rng, 0.2, 0.8) * (h - 1),
                       uniform(rng, 0.08, 0.28) * size, uniform(rng, 0.08, 0.28) * size,
                       uniform(rng, 0, std::numbers::pi)});
    }
    Index fg = 0;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double d = 1e9;
        for (const Ellipse& e : blobs) d = std::min(d, e.dist(double(x), double(y)));
        dmin[y * w + x] = d;
        mask[y * w + x] = d < 1.0 ? 1.0f : 0.0f;
        fg += d < 1.0;
      }
    const double frac = double(fg) / double(plane);
    if (frac >= 0.02 && frac <= 0.6) break;
  }

  // Tissue-like base tint, a lesion tint offset in brightness and hue.
  double base[3] = {uniform(rng, 0.5, 0.7), uniform(rng, 0.3, 0.45), uniform(rng, 0.28, 0.42)};
  const double sign = rng() % 2 ? 1.0 : -1.0;
  const double lift = sign * uniform(rng, 0.14, 0.26);
  double lesion[3] = {base[0] + lift, base[1] + lift * uniform(rng, 0.5, 1.2), base[2] + lift * uniform(rng, 0.3, 1.0)};

  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3];
  for (Wave& wv : waves) {
    wv = {uniform(rng, 0.5, 4.0) * 2 * std::numbers::pi / w, uniform(rng, 0.5, 4.0) * 2 * std::numbers::pi / h,
          uniform(rng, 0, 2 * std::numbers::pi), uniform(rng, 0.015, 0.04)};
  }
  const double edge = uniform(rng, 0.1, 0.25);  // soft-edge half width, normalized radius

  std::vector<float> img(static_cast<std::size_t>(3 * plane));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double tex = 0;
      for (const Wave& wv : waves) tex += wv.amp * std::sin(wv.fx * x + wv.fy * y + wv.phase);
      const double a = std::clamp((1.0 + edge - dmin[y * w + x]) / (2 * edge), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - a) * base[c] + a * lesion[c] + tex + uniform(rng, -0.03, 0.03);
        img[c * plane + y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return {Tensor<float>({3, h, w}, std::move(img)), Tensor<float>({1, h, w}, std::move(mask)), id};
}

std::string sample_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "syn_%04d", i);
  return buf;
}

}  // namespace

void validate_sample(const Sample& s) {
  if (s.image.rank() != 3 || s.image.dim(0) != 3) {
    throw ValidationError(s.id + ": image must be 3 x H x W, got " + shape_str(s.image.shape()));
  }
  if (s.mask.rank() != 3 || s.mask.dim(0) != 1 || s.mask.dim(1) != s.image.dim(1) ||
      s.mask.dim(2) != s.image.dim(2)) {
    throw ValidationError(s.id + ": mask " + shape_str(s.mask.shape()) + " does not match image " +
                          shape_str(s.image.shape()));
  }
  for (float v : s.mask.data())
    if (v != 0.0f && v != 1.0f) throw ValidationError(s.id + ": mask is not binary");
}

double foreground_fraction(const Tensor<float>& mask) {
  double fg = 0;
  for (float v : mask.data()) fg += v;
  return fg / static_cast<double>(mask.numel());
}

std::vector<Sample> generate_synthetic(int n, Index height, Index width, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synth: n must be >= 1");
  if (height < 8 || width < 8) throw ConfigError("synth: size must be at least 8x8");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i))));
    out.push_back(synthesize(height, width, rng, sample_id(i)));
  }
  return out;
}

Sample augment(const Sample& s, int rotation_deg, double brightness) {
  if (rotation_deg < 0 || rotation_deg >= 360 || rotation_deg % kRotationStep != 0) {
    throw ConfigError("augment: rotation must be a multiple of 30 in [0, 360), got " + std::to_string(rotation_deg));
  }
  if (std::none_of(std::begin(kBrightnessFactors), std::end(kBrightnessFactors),
                   [&](double f) { return std::abs(f - brightness) < 1e-12; })) {
    throw ConfigError("augment: brightness must be one of 1.0, 0.8, 1.2");
  }
  const Index h = s.image.dim(1), w = s.image.dim(2), plane = h * w;
  const double theta = rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const bool exact = rotation_deg % 90 == 0;

  std::vector<float> img(static_cast<std::size_t>(3 * plane), 0.0f);
  std::vector<float> mask(static_cast<std::size_t>(plane), 0.0f);
  const auto src = s.image.data();
  const auto msrc = s.mask.data();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + cs * dx - sn * dy, sy = cy + sn * dx + cs * dy;
      const Index nx = std::lround(sx), ny = std::lround(sy);
      const bool inside = nx >= 0 && nx < w && ny >= 0 && ny < h;
      if (inside) mask[y * w + x] = msrc[ny * w + nx];
      if (exact) {
        if (inside)
          for (Index c = 0; c < 3; ++c) img[c * plane + y * w + x] = src[c * plane + ny * w + nx];
        continue;
      }
      const Index x0 = static_cast<Index>(std::floor(sx)), y0 = static_cast<Index>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (Index c = 0; c < 3; ++c) {
        double acc = 0;
        for (int j = 0; j < 2; ++j)
          for (int i = 0; i < 2; ++i) {
            const Index px = x0 + i, py = y0 + j;
            if (px < 0 || px >= w || py < 0 || py >= h) continue;
            acc += (i ? fx : 1 - fx) * (j ? fy : 1 - fy) * src[c * plane + py * w + px];
          }
        img[c * plane + y * w + x] = static_cast<float>(acc);
      }
    }
  if (brightness != 1.0)
    for (float& v : img) v = std::clamp(static_cast<float>(v * brightness), 0.0f, 1.0f);

  std::ostringstream id;
  id << s.id << "_r" << rotation_deg << "_b" << brightness;
  return {Tensor<float>({3, h, w}, std::move(img)), Tensor<float>({1, h, w}, std::move(mask)), id.str()};
}

std::vector<Sample> expand_augmentations(const Sample& s) {
  std::vector<Sample> out;
  for (int deg = 0; deg < 360; deg += kRotationStep)
    for (double b : kBrightnessFactors) out.push_back(augment(s, deg, b));
  return out;
}

Sample random_augmentation(const Sample& s, std::mt19937_64& rng) {
  const std::uint64_t k = rng() % (12 * std::size(kBrightnessFactors));
  return augment(s, static_cast<int>(k / 3) * kRotationStep, kBrightnessFactors[k % 3]);
}

SplitPlan split(const std::vector<std::string>& ids, double ratio, std::uint64_t seed) {
  if (ids.empty()) throw ConfigError("split: no ids");
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("split: ratio must be in (0, 1)");
  std::vector<std::string> v = ids;
  seeded_shuffle(v, seed);
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(v.size())));
  SplitPlan p;
  p.train_ids.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n_train));
  p.val_ids.assign(v.begin() + static_cast<std::ptrdiff_t>(n_train), v.end());
  return p;
}

SplitPlan kfold(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("kfold: k must be >= 1");
  if (static_cast<std::size_t>(k) > ids.size()) {
    throw ConfigError("kfold: k = " + std::to_string(k) + " exceeds " + std::to_string(ids.size()) + " ids");
  }
  std::vector<std::string> v = ids;
  seeded_shuffle(v, seed);
  SplitPlan p;
  const std::size_t base = v.size() / k, extra = v.size() % k;
  std::size_t at = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    p.folds.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(at), v.begin() + static_cast<std::ptrdiff_t>(at + len));
    at += len;
  }
  return p;
}

SplitPlan fold_split(const SplitPlan& plan, int fold) {
  if (fold < 0 || static_cast<std::size_t>(fold) >= plan.folds.size()) {
    throw ConfigError("fold " + std::to_string(fold) + " out of range");
  }
  SplitPlan p;
  p.folds = plan.folds;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    auto& dst = static_cast<int>(f) == fold ? p.val_ids : p.train_ids;
    dst.insert(dst.end(), plan.folds[f].begin(), plan.folds[f].end());
  }
  return p;
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples) {
  std::error_code ec;
  fs::create_directories(fs::path(root) / "images", ec);
  if (!ec) fs::create_directories(fs::path(root) / "masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + root + ": " + ec.message());
  std::string manifest;
  for (const Sample& s : samples) {
    write_image((fs::path(root) / "images" / (s.id + ".ppm")).string(), s.image);
    write_mask((fs::path(root) / "masks" / (s.id + "_mask.pgm")).string(), s.mask);
    manifest += s.id + "\n";
  }
  write_file((fs::path(root) / "manifest.txt").string(), manifest);
}

std::vector<std::string> read_manifest(const std::string& root) {
  const fs::path manifest = fs::path(root) / "manifest.txt";
  std::vector<std::string> ids;
  if (fs::exists(manifest)) {
    std::istringstream in(read_file(manifest.string()));
    for (std::string line; std::getline(in, line);) {
      while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
      if (!line.empty()) ids.push_back(line);
    }
    return ids;
  }
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(fs::path(root) / "images", ec)) {
    const auto ext = e.path().extension();
    if (ext == ".ppm" || ext == ".png") ids.push_back(e.path().stem().string());
  }
  if (ec) throw IoError("cannot list " + (fs::path(root) / "images").string() + ": " + ec.message());
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

fs::path first_existing(const fs::path& dir, const std::string& stem) {
  for (const char* ext : {".ppm", ".pgm", ".png"}) {
    fs::path p = dir / (stem + ext);
    if (fs::exists(p)) return p;
  }
  throw IoError("no image file for " + (dir / stem).string() + ".{ppm,pgm,png}");
}

}  // namespace

std::vector<Sample> load_dataset(const std::string& root) {
  std::vector<Sample> out;
  for (const std::string& id : read_manifest(root)) {
    Sample s{read_image(first_existing(fs::path(root) / "images", id).string()),
             read_mask(first_existing(fs::path(root) / "masks", id + "_mask").string()), id};
    validate_sample(s);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("dataset at " + root + " is empty");
  return out;
}

std::vector<Sample> select(const std::vector<Sample>& all, const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  for (const std::string& id : ids) {
    auto it = std::find_if(all.begin(), all.end(), [&](const Sample& s) { return s.id == id; });
    if (it == all.end()) throw ValidationError("unknown sample id " + id);
    out.push_back(*it);
  }
  return out;
}

namespace {

Tensor<float> stack(const std::vector<const Sample*>& batch, bool masks) {
  if (batch.empty()) throw UsageError("stack: empty batch");
  const Tensor<float>& first = masks ? batch[0]->mask : batch[0]->image;
  Shape shape{static_cast<Index>(batch.size()), first.dim(0), first.dim(1), first.dim(2)};
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const Sample* s : batch) {
    const Tensor<float>& t = masks ? s->mask : s->image;
    if (t.shape() != first.shape()) throw ValidationError("stack: " + s->id + " has extents " + shape_str(t.shape()));
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensor<float>(shape, std::move(v));
}

}  // namespace

Tensor<float> stack_images(const std::vector<const Sample*>& batch) { return stack(batch, false); }
Tensor<float> stack_masks(const std::vector<const Sample*>& batch) { return stack(batch, true); }

}  // namespace fmbff
