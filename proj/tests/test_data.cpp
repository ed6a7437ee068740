#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>

#include "dynseg/data.hpp"

using namespace dynseg;
using namespace dynseg::data;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dynseg_test_data_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(GenerateCase, Deterministic) {
  auto a = generate_case(3, 64, 64, 32);
  auto b = generate_case(3, 64, 64, 32);
  auto c = generate_case(4, 64, 64, 32);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a.labels == c.labels);
  EXPECT_THROW(generate_case(1, 60, 64, 32), std::invalid_argument);
  EXPECT_THROW(generate_case(1, 64, 64, 4), std::invalid_argument);
}

TEST(GenerateCase, LabelsNestAndIntensitiesStandardized) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = generate_case(seed, 64, 64, 32);
    struct Box {
      Index lo[3]{1 << 20, 1 << 20, 1 << 20}, hi[3]{-1, -1, -1};
      void add(Index y, Index x, Index z) {
        const Index p[3]{y, x, z};
        for (int i = 0; i < 3; ++i) lo[i] = std::min(lo[i], p[i]), hi[i] = std::max(hi[i], p[i]);
      }
      bool inside(const Box& o) const {
        for (int i = 0; i < 3; ++i)
          if (lo[i] < o.lo[i] || hi[i] > o.hi[i]) return false;
        return true;
      }
    } et, tc, wt;
    std::size_t n4 = 0;
    for (Index y = 0; y < c.height; ++y)
      for (Index x = 0; x < c.width; ++x)
        for (Index z = 0; z < c.depth; ++z) {
          const auto l = c.labels[c.voxel(y, x, z)];
          ASSERT_TRUE(l == 0 || l == 1 || l == 2 || l == 4);
          if (l == 4) et.add(y, x, z), ++n4;
          if (l == 1 || l == 4) tc.add(y, x, z);
          if (l != 0) wt.add(y, x, z);
        }
    ASSERT_GT(n4, 0u) << "seed " << seed;
    EXPECT_TRUE(et.inside(tc));
    EXPECT_TRUE(tc.inside(wt));
    // Strict nesting in-plane: the core never touches the whole-tumour boundary box.
    EXPECT_GT(et.lo[0], wt.lo[0]);
    EXPECT_LT(et.hi[1], wt.hi[1]);

    const std::size_t N = c.labels.size();
    for (Index m = 0; m < kModalities; ++m) {
      double s = 0, s2 = 0;
      std::size_t n = 0;
      for (std::size_t v = 0; v < N; ++v) {
        const double val = c.intensities[std::size_t(m) * N + v];
        ASSERT_TRUE(std::isfinite(val));
        if (val == 0.0) continue;
        s += val, s2 += val * val, ++n;
      }
      EXPECT_NEAR(s / double(n), 0.0, 0.05);
      EXPECT_NEAR(s2 / double(n) - (s / double(n)) * (s / double(n)), 1.0, 0.05);
    }
  }
}

TEST(GenerateCase, EmptySliceFractionOverSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto c = generate_case(seed, 64, 64, 32);
    int empty = 0;
    for (const auto& s : slice_iter(c)) empty += !s.has_foreground();
    const double frac = double(empty) / double(c.depth);
    EXPECT_GE(frac, 0.3) << "seed " << seed;
    EXPECT_LE(frac, 0.8) << "seed " << seed;
  }
}

TEST(GenerateCase, TumourBrighterOnFlair) {
  auto c = generate_case(11, 64, 64, 32);
  double in = 0, out = 0;
  std::size_t ni = 0, no = 0;
  for (Index y = 0; y < 64; ++y)
    for (Index x = 0; x < 64; ++x)
      for (Index z = 0; z < 32; ++z) {
        const float v = c.intensity(3, y, x, z);
        if (c.labels[c.voxel(y, x, z)] != 0) {
          in += v, ++ni;
        } else if (v != 0.0f) {
          out += v, ++no;
        }
      }
  EXPECT_GT(in / double(ni), out / double(no) + 1.0);
}

TEST(Slices, OrderAndLayout) {
  auto c = generate_case(2, 32, 48, 16);
  auto slices = slice_iter(c);
  ASSERT_EQ(slices.size(), 16u);
  for (Index z = 0; z < 16; ++z) {
    const auto& s = slices[std::size_t(z)];
    EXPECT_EQ(s.slice_index, z);
    EXPECT_EQ(s.image.shape(), (Shape{1, 4, 32, 48}));
    EXPECT_EQ(s.image.at(std::size_t((2 * 32 + 5) * 48 + 7)), c.intensity(2, 5, 7, z));
    EXPECT_EQ(s.labels[std::size_t(9 * 48 + 20)], c.labels[c.voxel(9, 20, z)]);
  }
}

TEST(Augment, IdentityFlipsAndDeterminism) {
  auto c = generate_case(5, 32, 32, 16);
  auto s = extract_slice(c, 8);
  auto same = augment(s, AugmentParams{});
  for (std::size_t i = 0; i < s.image.numel(); ++i) ASSERT_EQ(same.image.at(i), s.image.at(i));
  EXPECT_EQ(same.labels, s.labels);

  AugmentParams h;
  h.flip_horizontal = true;
  auto once = augment(s, h);
  auto twice = augment(once, h);
  for (std::size_t i = 0; i < s.image.numel(); ++i) ASSERT_EQ(twice.image.at(i), s.image.at(i));
  EXPECT_EQ(twice.labels, s.labels);
  // Labels move with the pixels.
  EXPECT_EQ(once.labels[3 * 32 + 0], s.labels[3 * 32 + 31]);
  EXPECT_EQ(once.image.at(3 * 32 + 0), s.image.at(3 * 32 + 31));

  AugmentParams v;
  v.flip_vertical = true;
  v.scale = 1.05;
  v.shift = -0.05;
  auto vv = augment(s, v);
  EXPECT_EQ(vv.labels[0 * 32 + 4], s.labels[31 * 32 + 4]);
  EXPECT_NEAR(vv.image.at(4), s.image.at(31 * 32 + 4) * 1.05 - 0.05, 1e-6);

  auto a1 = augment(s, std::uint64_t(9)), a2 = augment(s, std::uint64_t(9));
  for (std::size_t i = 0; i < s.image.numel(); ++i) ASSERT_EQ(a1.image.at(i), a2.image.at(i));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto p = draw_augment(seed);
    EXPECT_GE(p.scale, 0.9);
    EXPECT_LE(p.scale, 1.1);
    EXPECT_LE(std::abs(p.shift), 0.1);
  }
}

TEST(KFold, Partition) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("c" + std::to_string(i));
  auto folds = kfold_split(ids, 5, 1);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::string> all;
  for (const auto& f : folds) {
    EXPECT_EQ(f.size(), 2u);
    for (const auto& id : f) EXPECT_TRUE(all.insert(id).second);
  }
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(kfold_split(ids, 5, 1), folds);

  for (int i = 10; i < 16; ++i) ids.push_back("c" + std::to_string(i));
  std::vector<std::size_t> sizes;
  for (const auto& f : kfold_split(ids, 5, 2)) sizes.push_back(f.size());
  EXPECT_EQ(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()), 1u);
  EXPECT_THROW(kfold_split(ids, 1, 0), std::invalid_argument);
  EXPECT_THROW(kfold_split(ids, 17, 0), std::invalid_argument);
}

TEST(CaseIo, RoundTrip) {
  auto dir = temp_dir("roundtrip");
  auto c = generate_case(7, 32, 32, 16);
  c.spacing = {1.0, 1.0, 2.5};
  save_case(c, dir);
  auto back = load_case(dir);
  EXPECT_TRUE(back == c);
  nlohmann::json h;
  std::ifstream(dir / "header.json") >> h;
  EXPECT_EQ(h.at("dtype"), "f32-le");
  EXPECT_EQ(h.at("label_values"), nlohmann::json::array({0, 1, 2, 4}));
  EXPECT_EQ(std::filesystem::file_size(dir / "intensities.bin"), 4u * 4u * 32u * 32u * 16u);
  EXPECT_EQ(std::filesystem::file_size(dir / "labels.bin"), 32u * 32u * 16u);
}

TEST(CaseIo, CorruptionIsReported) {
  auto dir = temp_dir("corrupt");
  auto c = generate_case(8, 32, 32, 16);
  save_case(c, dir);
  std::filesystem::resize_file(dir / "intensities.bin", 1000);
  auto msg = error_of([&] { load_case(dir); });
  EXPECT_NE(msg.find("intensities.bin"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected 262144"), std::string::npos) << msg;
  EXPECT_NE(msg.find("found 1000"), std::string::npos) << msg;

  save_case(c, dir);
  nlohmann::json h;
  std::ifstream(dir / "header.json") >> h;
  h["label_values"] = {0, 1, 2, 3};
  std::ofstream(dir / "header.json") << h.dump();
  msg = error_of([&] { load_case(dir); });
  EXPECT_NE(msg.find("label_values"), std::string::npos) << msg;
  EXPECT_NE(msg.find("header.json"), std::string::npos) << msg;

  save_case(c, dir);
  h["label_values"] = {0, 1, 2, 4};
  h["dims"] = {32, 32, 8};
  std::ofstream(dir / "header.json") << h.dump();
  EXPECT_THROW(load_case(dir), DataError);

  save_case(c, dir);
  {
    std::fstream f(dir / "labels.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put(char(3));
  }
  msg = error_of([&] { load_case(dir); });
  EXPECT_NE(msg.find("labels.bin"), std::string::npos) << msg;

  std::filesystem::remove(dir / "header.json");
  msg = error_of([&] { load_case(dir); });
  EXPECT_NE(msg.find("header.json"), std::string::npos) << msg;
}

TEST(Dataset, GenerateAndManifest) {
  auto dir = temp_dir("dataset");
  auto m = generate_dataset(dir, 6, 42, 32, 32, 16, 3);
  auto back = load_manifest(dir);
  ASSERT_EQ(back.cases.size(), 6u);
  EXPECT_EQ(back.depth, 16);
  std::vector<int> per_fold(3, 0);
  for (const auto& e : back.cases) {
    ++per_fold[std::size_t(e.fold)];
    auto c = load_case(dir / e.path);
    EXPECT_EQ(c.case_id, e.case_id);
  }
  EXPECT_EQ(per_fold, (std::vector<int>{2, 2, 2}));
  EXPECT_EQ(back.case_ids(1, true).size(), 2u);
  EXPECT_EQ(back.case_ids(1, false).size(), 4u);
  auto again = generate_dataset(temp_dir("dataset2"), 6, 42, 32, 32, 16, 3);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(again.cases[i].fold, m.cases[i].fold);
}
