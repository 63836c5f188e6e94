#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <numeric>
#include <set>

#include "fmbff/data.hpp"
#include "fmbff/image_io.hpp"
#include "test_helpers.hpp"

using namespace fmbff;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fmbff_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
  return ids;
}

// Mask pixels with a 4-neighbour of the other class.
Index boundary_pixels(const Tensor<float>& m) {
  const Index h = m.dim(1), w = m.dim(2);
  Index n = 0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const float v = m[y * w + x];
      bool edge = false;
      if (x > 0) edge |= m[y * w + x - 1] != v;
      if (x + 1 < w) edge |= m[y * w + x + 1] != v;
      if (y > 0) edge |= m[(y - 1) * w + x] != v;
      if (y + 1 < h) edge |= m[(y + 1) * w + x] != v;
      n += edge;
    }
  return n;
}

Index count(const Tensor<float>& m) {
  return static_cast<Index>(std::accumulate(m.data().begin(), m.data().end(), 0.0));
}

}  // namespace

TEST_CASE("synthetic generation is deterministic under the seed") {
  auto a = generate_synthetic(6, 32, 48, 11);
  auto b = generate_synthetic(6, 32, 48, 11);
  auto c = generate_synthetic(6, 32, 48, 12);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(same(a[i].image, b[i].image));
    CHECK(same(a[i].mask, b[i].mask));
    CHECK(a[i].image.shape() == Shape{3, 32, 48});
  }
  CHECK_FALSE(same(a[0].image, c[0].image));
  // Sample i does not depend on n.
  CHECK(same(generate_synthetic(2, 32, 48, 11)[1].image, a[1].image));
}

TEST_CASE("synthetic masks are binary, nonempty, and within the foreground band") {
  const auto samples = generate_synthetic(500, 64, 64, 7);
  double lo = 1, hi = 0;
  for (const Sample& s : samples) {
    validate_sample(s);
    const double f = foreground_fraction(s.mask);
    lo = std::min(lo, f);
    hi = std::max(hi, f);
    for (float v : s.image.data()) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
  CHECK(lo >= 0.02);
  CHECK(hi <= 0.6);
}

TEST_CASE("lesion and background differ in mean intensity") {
  for (const Sample& s : generate_synthetic(20, 64, 64, 3)) {
    const Index plane = 64 * 64;
    double fg = 0, bg = 0;
    Index nf = 0;
    for (Index i = 0; i < plane; ++i) {
      double v = (s.image[i] + s.image[plane + i] + s.image[2 * plane + i]) / 3;
      if (s.mask[i] > 0.5f) {
        fg += v;
        ++nf;
      } else {
        bg += v;
      }
    }
    CHECK(std::abs(fg / nf - bg / (plane - nf)) > 0.05);
  }
}

TEST_CASE("augment: identity, brightness, and invalid arguments") {
  const Sample s = generate_synthetic(1, 16, 16, 1)[0];
  const Sample id = augment(s, 0, 1.0);
  CHECK(same(id.image, s.image));
  CHECK(same(id.mask, s.mask));

  Sample half{Tensor<float>({3, 2, 2}, std::vector<float>(12, 0.5f)), Tensor<float>({1, 2, 2}), "h"};
  const Sample dim = augment(half, 0, 0.8);
  for (float v : dim.image.data()) CHECK(v == doctest::Approx(0.4).epsilon(1e-7));
  Sample bright{Tensor<float>({3, 2, 2}, std::vector<float>(12, 0.9f)), Tensor<float>({1, 2, 2}), "b"};
  const Sample lit = augment(bright, 0, 1.2);
  for (float v : lit.image.data()) CHECK(v == 1.0f);

  CHECK_THROWS_AS(augment(s, 45, 1.0), ConfigError);
  CHECK_THROWS_AS(augment(s, 360, 1.0), ConfigError);
  CHECK_THROWS_AS(augment(s, -30, 1.0), ConfigError);
  CHECK_THROWS_AS(augment(s, 30, 0.9), ConfigError);
}

TEST_CASE("four successive 90 degree rotations restore the sample exactly") {
  for (Index size : {16, 17}) {
    Sample s = generate_synthetic(1, size, size, 5)[0];
    Sample r = s;
    for (int i = 0; i < 4; ++i) {
      r = augment(r, 90, 1.0);
      CHECK(count(r.mask) == count(s.mask));
    }
    CHECK(same(r.image, s.image));
    CHECK(same(r.mask, s.mask));
  }
  // 90 degrees moves the top-left corner to the bottom-left.
  Sample p{Tensor<float>({3, 3, 3}), Tensor<float>({1, 3, 3}), "p"};
  p.mask.mutable_data()[0] = 1;
  CHECK(augment(p, 90, 1.0).mask[6] == 1.0f);
  CHECK(augment(p, 180, 1.0).mask[8] == 1.0f);
}

TEST_CASE("rotated masks stay binary and change area only within the boundary band") {
  for (const Sample& s : generate_synthetic(10, 64, 64, 9)) {
    // Pixels that can leave the frame: outside the inscribed circle.
    Index outside = 0;
    for (Index y = 0; y < 64; ++y)
      for (Index x = 0; x < 64; ++x) {
        const double dx = x - 31.5, dy = y - 31.5;
        outside += s.mask[y * 64 + x] > 0.5f && dx * dx + dy * dy > 31.5 * 31.5;
      }
    const Index band = 2 * boundary_pixels(s.mask);
    for (int deg = 30; deg < 360; deg += 30) {
      CAPTURE(deg);
      const Sample r = augment(s, deg, 1.0);
      for (float v : r.mask.data()) REQUIRE((v == 0.0f || v == 1.0f));
      const Index diff = std::abs(count(r.mask) - count(s.mask));
      if (deg % 90 == 0)
        CHECK(diff == 0);
      else
        CHECK(diff <= band + outside);
    }
  }
}

TEST_CASE("full expansion yields 12 rotations x 3 brightness variants") {
  const Sample s = generate_synthetic(1, 16, 16, 2)[0];
  const auto all = expand_augmentations(s);
  CHECK(all.size() == 36);
  std::set<std::string> ids;
  for (const Sample& a : all) ids.insert(a.id);
  CHECK(ids.size() == 36);

  std::mt19937_64 rng(4);
  std::set<std::string> drawn;
  for (int i = 0; i < 2000; ++i) drawn.insert(random_augmentation(s, rng).id);
  CHECK(drawn == ids);
}

TEST_CASE("split 80/20 is an exact seeded partition") {
  const auto ids = make_ids(100);
  const SplitPlan p = split(ids, 0.8, 3);
  CHECK(p.train_ids.size() == 80);
  CHECK(p.val_ids.size() == 20);
  std::multiset<std::string> all(p.train_ids.begin(), p.train_ids.end());
  all.insert(p.val_ids.begin(), p.val_ids.end());
  CHECK(all == std::multiset<std::string>(ids.begin(), ids.end()));
  CHECK(split(ids, 0.8, 3).train_ids == p.train_ids);
  CHECK(split(ids, 0.8, 4).train_ids != p.train_ids);
  CHECK_THROWS_AS(split({}, 0.8, 1), ConfigError);
  CHECK_THROWS_AS(split(ids, 1.0, 1), ConfigError);
}

TEST_CASE("5-fold over 103 ids") {
  const auto ids = make_ids(103);
  const SplitPlan p = kfold(ids, 5, 8);
  REQUIRE(p.folds.size() == 5);
  const std::size_t expect[] = {21, 21, 21, 20, 20};
  std::multiset<std::string> all;
  for (int f = 0; f < 5; ++f) {
    CHECK(p.folds[f].size() == expect[f]);
    all.insert(p.folds[f].begin(), p.folds[f].end());
  }
  CHECK(all == std::multiset<std::string>(ids.begin(), ids.end()));
  CHECK(kfold(ids, 5, 8).folds == p.folds);
  for (int f = 0; f < 5; ++f) {
    const SplitPlan s = fold_split(p, f);
    CHECK(s.val_ids == p.folds[f]);
    CHECK(s.train_ids.size() + s.val_ids.size() == 103);
    std::set<std::string> tr(s.train_ids.begin(), s.train_ids.end());
    for (const auto& v : s.val_ids) CHECK(tr.count(v) == 0);
  }
  CHECK_THROWS_AS(kfold(make_ids(4), 5, 1), ConfigError);
  CHECK_THROWS_AS(fold_split(p, 5), ConfigError);
}

TEST_CASE("randomized partitions: fold sizes differ by at most one") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 200);
    const int k = 1 + static_cast<int>(rng() % std::min(n, 10));
    const SplitPlan p = kfold(make_ids(n), k, rng());
    std::size_t lo = n, hi = 0, total = 0;
    std::set<std::string> seen;
    for (const auto& f : p.folds) {
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
      total += f.size();
      seen.insert(f.begin(), f.end());
    }
    CHECK(hi - lo <= 1);
    CHECK(total == static_cast<std::size_t>(n));
    CHECK(seen.size() == static_cast<std::size_t>(n));
  }
}

TEST_CASE("augmenting a training split never touches validation ids") {
  const auto samples = generate_synthetic(10, 16, 16, 6);
  std::vector<std::string> ids;
  for (const Sample& s : samples) ids.push_back(s.id);
  const SplitPlan p = split(ids, 0.8, 1);
  std::set<std::string> sources;
  for (const Sample& s : select(samples, p.train_ids))
    for (const Sample& a : expand_augmentations(s)) sources.insert(a.id.substr(0, a.id.find("_r")));
  for (const auto& v : p.val_ids) CHECK(sources.count(v) == 0);
}

TEST_CASE("image and mask round trips") {
  const fs::path dir = scratch_dir("roundtrip");
  std::mt19937_64 rng(2);
  auto img = test::random_tensor<float>({3, 7, 5}, rng, 0, 1);
  write_image((dir / "a.ppm").string(), img);
  auto back = read_image((dir / "a.ppm").string());
  REQUIRE(back.shape() == img.shape());
  CHECK(test::max_abs_diff<float>(img.data(), back.data()) <= 1.0 / 255 + 1e-7);

  Tensor<float> zero({1, 4, 6});
  write_mask((dir / "z.pgm").string(), zero);
  CHECK(same(read_mask((dir / "z.pgm").string()), zero));

  write_file((dir / "m.pgm").string(), std::string("P5\n2 2\n255\n") + std::string("\x00\xff\xff\x00", 4));
  auto m = read_mask((dir / "m.pgm").string());
  CHECK(m.shape() == Shape{1, 2, 2});
  CHECK(std::vector<float>(m.data().begin(), m.data().end()) == std::vector<float>{0, 1, 1, 0});
  // Gray images replicate to three channels.
  auto g = read_image((dir / "m.pgm").string());
  CHECK(g.shape() == Shape{3, 2, 2});
  CHECK(g[4 + 1] == 1.0f);
}

TEST_CASE("threshold sits at 127") {
  Raster r{1, 1, 2, std::string("\x7f\x80", 2)};
  const fs::path dir = scratch_dir("threshold");
  write_file((dir / "t.pgm").string(), encode_pnm(r));
  auto m = read_mask((dir / "t.pgm").string());
  CHECK(m[0] == 0.0f);
  CHECK(m[1] == 1.0f);
}

TEST_CASE("malformed PNM headers report byte offsets") {
  auto offset_of = [](const std::string& bytes) -> std::size_t {
    try {
      decode_pnm(bytes);
    } catch (const ParseError& e) {
      return e.offset();
    }
    return std::string::npos;
  };
  CHECK(offset_of("P3\n1 1\n255\n") == 0);
  CHECK(offset_of("P5\nx 1\n255\n") == 3);
  CHECK(offset_of("P5\n2 2\n65535\n") == 7);
  CHECK(offset_of("P5 # comment\n2 2\n255\nab") == 23);
  CHECK(offset_of("P5\n2 2\n255\n") == 11);
  CHECK_NOTHROW(decode_pnm(std::string("P5 # c\n2 2\n255\nabcd")));
}

TEST_CASE("PNG masks decode through the same threshold") {
  const unsigned char png[] = {
      0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00,
      0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x00, 0x00, 0x00, 0x00, 0x57, 0xdd, 0x52, 0xf8, 0x00, 0x00, 0x00,
      0x0c, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x60, 0xf8, 0x0f, 0x84, 0x00, 0x06, 0x00, 0x01, 0xff, 0x93,
      0xd1, 0xe4, 0x89, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82};
  const fs::path dir = scratch_dir("png");
  write_file((dir / "m.png").string(), std::string(reinterpret_cast<const char*>(png), sizeof png));
  auto m = read_mask((dir / "m.png").string());
  CHECK(std::vector<float>(m.data().begin(), m.data().end()) == std::vector<float>{0, 1, 1, 0});
  CHECK_THROWS_AS(decode_png(std::string_view(reinterpret_cast<const char*>(png), 20)), FormatError);
}

TEST_CASE("dataset directory round trip") {
  const fs::path dir = scratch_dir("dataset");
  const auto samples = generate_synthetic(4, 16, 24, 13);
  write_dataset(dir.string(), samples);
  CHECK(fs::exists(dir / "images" / "syn_0002.ppm"));
  CHECK(fs::exists(dir / "masks" / "syn_0002_mask.pgm"));
  const auto loaded = load_dataset(dir.string());
  REQUIRE(loaded.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(same(loaded[i].mask, samples[i].mask));
    CHECK(test::max_abs_diff<float>(loaded[i].image.data(), samples[i].image.data()) <= 0.5 / 255 + 1e-6);
  }
  // Without a manifest the image directory is scanned in name order.
  fs::remove(dir / "manifest.txt");
  CHECK(read_manifest(dir.string()) == std::vector<std::string>{"syn_0000", "syn_0001", "syn_0002", "syn_0003"});

  std::vector<const Sample*> batch{&loaded[0], &loaded[2]};
  CHECK(stack_images(batch).shape() == Shape{2, 3, 16, 24});
  CHECK(stack_masks(batch).shape() == Shape{2, 1, 16, 24});
  CHECK_THROWS_AS(select(loaded, {"nope"}), ValidationError);
}

TEST_CASE("mismatched mask extents are a validation error") {
  const fs::path dir = scratch_dir("mismatch");
  write_dataset(dir.string(), generate_synthetic(1, 16, 16, 1));
  write_mask((dir / "masks" / "syn_0000_mask.pgm").string(), Tensor<float>({1, 8, 16}));
  CHECK_THROWS_AS(load_dataset(dir.string()), ValidationError);
  CHECK_THROWS_AS(load_dataset((dir / "missing").string()), IoError);
}
