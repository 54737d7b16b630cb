#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "mhvae/data.hpp"

using namespace mhvae;

namespace {

std::vector<std::uint8_t> build_idx(std::uint32_t magic, const std::vector<std::uint32_t>& dims,
                                    const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, magic);
  for (std::uint32_t d : dims) detail::put_be32(b, d);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

}  // namespace

TEST_CASE("idx parsing of a hand-built file") {
  // two 2x2 images
  auto bytes = build_idx(kIdxImagesMagic, {2, 2, 2}, {0, 64, 128, 255, 1, 2, 3, 4});
  auto idx = parse_idx_bytes(bytes, IdxKind::images, "mem");
  REQUIRE(idx.dims == std::vector<int>{2, 2, 2});
  REQUIRE(idx.count() == 2);
  REQUIRE(idx.bytes.size() == 8);
  REQUIRE(idx.bytes[3] == 255);

  auto lbl_bytes = build_idx(kIdxLabelsMagic, {2}, {7, 3});
  auto lbl = parse_idx_bytes(lbl_bytes, IdxKind::labels, "mem");
  REQUIRE(lbl.dims == std::vector<int>{2});
  REQUIRE(lbl.bytes[0] == 7);
}

TEST_CASE("idx error paths are distinct") {
  // kind mismatch: image magic where labels are expected
  auto img = build_idx(kIdxImagesMagic, {1, 2, 2}, {1, 2, 3, 4});
  REQUIRE_THROWS_MATCHES(parse_idx_bytes(img, IdxKind::labels, "f"), FormatError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("kind mismatch")));

  // unknown magic
  auto junk = build_idx(0xdeadbeef, {1}, {0});
  REQUIRE_THROWS_MATCHES(parse_idx_bytes(junk, IdxKind::labels, "f"), FormatError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("bad IDX magic 0xdeadbeef")));

  // truncated payload, with both byte counts in the message
  auto cut = build_idx(kIdxImagesMagic, {2, 2, 2}, {1, 2, 3, 4, 5});
  REQUIRE_THROWS_MATCHES(
      parse_idx_bytes(cut, IdxKind::images, "f"), DataError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("promises 8") &&
                                      Catch::Matchers::ContainsSubstring("found 5")));

  // trailing garbage
  auto extra = build_idx(kIdxLabelsMagic, {2}, {1, 2, 3});
  REQUIRE_THROWS_MATCHES(parse_idx_bytes(extra, IdxKind::labels, "f"), FormatError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("trailing")));

  // dimension overflow
  auto huge = build_idx(kIdxImagesMagic, {70000, 65536, 65536}, {});
  REQUIRE_THROWS_MATCHES(parse_idx_bytes(huge, IdxKind::images, "f"), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("dimension overflow")));

  // empty buffer
  REQUIRE_THROWS_AS(parse_idx_bytes({}, IdxKind::images, "f"), FormatError);
}

TEST_CASE("idx round trip is byte exact") {
  RngStream rng(5);
  IdxData img;
  img.kind = IdxKind::images;
  img.dims = {7, 4, 3};
  for (int i = 0; i < 7 * 4 * 3; ++i)
    img.bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
  auto bytes = write_idx_bytes(img);
  auto back = parse_idx_bytes(bytes, IdxKind::images, "mem");
  REQUIRE(write_idx_bytes(back) == bytes);

  // and through the filesystem
  const std::string path = "/tmp/mhvae_test_roundtrip.idx";
  write_idx(path, img);
  auto from_disk = parse_idx(path, IdxKind::images);
  REQUIRE(write_idx_bytes(from_disk) == bytes);
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(parse_idx("/nonexistent/nope.idx", IdxKind::images), DataError);
}

TEST_CASE("split counts follow the floor rules") {
  auto c = split_counts(70000);
  REQUIRE(c.train == 53550);
  REQUIRE(c.val == 5950);
  REQUIRE(c.test == 10500);

  auto c10k = split_counts(10000);
  REQUIRE(c10k.train == 7650);
  REQUIRE(c10k.val == 850);
  REQUIRE(c10k.test == 1500);

  for (int n : {20, 21, 99, 100, 12345}) {
    auto s = split_counts(n);
    REQUIRE(s.train + s.val + s.test == n);
    REQUIRE(s.train + s.val == std::int64_t(n) * 85 / 100);
    REQUIRE(s.val == (s.train + s.val) / 10);
    REQUIRE(s.train > 0);
    REQUIRE(s.val >= 0);
    REQUIRE(s.test > 0);
  }
  REQUIRE_THROWS_AS(split_counts(19), ContractError);
}

TEST_CASE("normalize_and_split fills tensors and partitions records") {
  const int n = 200;
  auto [img, lbl] = generate_glyphs(n, 11);
  auto ds = normalize_and_split(img, lbl, 42);
  REQUIRE(ds.count() == n);
  REQUIRE(ds.images.shape() == Shape{n, 1, 28, 28});
  REQUIRE(ds.labels.shape() == Shape{n, 10});

  // pixel scaling endpoints
  bool saw_zero = false, saw_one = false;
  for (std::int64_t i = 0; i < ds.images.size(); ++i) {
    REQUIRE(ds.images[i] >= 0.0f);
    REQUIRE(ds.images[i] <= 1.0f);
    saw_zero = saw_zero || ds.images[i] == 0.0f;
    saw_one = saw_one || ds.images[i] == 1.0f;
  }
  REQUIRE(saw_zero);
  REQUIRE(saw_one);

  // exactly one hot per row, matching the class index
  for (int i = 0; i < n; ++i) {
    int hot = -1;
    for (int k = 0; k < 10; ++k)
      if (ds.labels[std::int64_t(i) * 10 + k] == 1.0f) {
        REQUIRE(hot == -1);
        hot = k;
      } else {
        REQUIRE(ds.labels[std::int64_t(i) * 10 + k] == 0.0f);
      }
    REQUIRE(hot == ds.classes[static_cast<size_t>(i)]);
  }

  // tags partition the records and agree with the index lists
  auto c = split_counts(n);
  REQUIRE(static_cast<int>(ds.ids(Split::train).size()) == c.train);
  REQUIRE(static_cast<int>(ds.ids(Split::val).size()) == c.val);
  REQUIRE(static_cast<int>(ds.ids(Split::test).size()) == c.test);
  std::set<int> seen;
  for (auto s : {Split::train, Split::val, Split::test})
    for (int id : ds.ids(s)) {
      REQUIRE(ds.tag[static_cast<size_t>(id)] == s);
      REQUIRE(seen.insert(id).second);
    }
  REQUIRE(static_cast<int>(seen.size()) == n);
}

TEST_CASE("split membership is seed determined") {
  auto [img, lbl] = generate_glyphs(60, 13);
  auto a = normalize_and_split(img, lbl, 7);
  auto b = normalize_and_split(img, lbl, 7);
  auto c = normalize_and_split(img, lbl, 8);
  REQUIRE(a.classes == b.classes);
  for (std::int64_t i = 0; i < a.images.size(); ++i) REQUIRE(a.images[i] == b.images[i]);
  REQUIRE(a.classes != c.classes);  // a different shuffle rearranges the classes

  // subset mode keeps a smaller but still partitioned dataset
  auto sub = normalize_and_split(img, lbl, 7, 30);
  REQUIRE(sub.count() == 30);
  auto sc = split_counts(30);
  REQUIRE(static_cast<int>(sub.ids(Split::train).size()) == sc.train);
  // the subset is a prefix of the same shuffle
  for (int i = 0; i < 30; ++i) REQUIRE(sub.classes[static_cast<size_t>(i)] == a.classes[static_cast<size_t>(i)]);
}

TEST_CASE("count mismatch is rejected") {
  auto [img, lbl] = generate_glyphs(24, 3);
  IdxData short_lbl = lbl;
  short_lbl.dims = {23};
  short_lbl.bytes.resize(23);
  REQUIRE_THROWS_AS(normalize_and_split(img, short_lbl, 1), DataError);
  REQUIRE_THROWS_AS(normalize_and_split(lbl, lbl, 1), ContractError);
}

TEST_CASE("batch indices cover the split deterministically") {
  auto b = batch_indices(130, 64, 3, 0, true, 2);
  REQUIRE(b.size() == 3);
  REQUIRE(b[0].size() == 64);
  REQUIRE(b[1].size() == 64);
  REQUIRE(b[2].size() == 2);
  std::set<int> seen;
  for (const auto& batch : b)
    for (int i : batch) REQUIRE(seen.insert(i).second);
  REQUIRE(seen.size() == 130);

  // a lone trailing record is dropped when min_final = 2
  auto b1 = batch_indices(129, 64, 3, 0, true, 2);
  REQUIRE(b1.size() == 2);
  auto b1_keep = batch_indices(129, 64, 3, 0, true, 1);
  REQUIRE(b1_keep.size() == 3);
  REQUIRE(b1_keep[2].size() == 1);

  // shuffle off: original order
  auto plain = batch_indices(10, 4, 3, 0, false);
  REQUIRE(plain[0] == std::vector<int>{0, 1, 2, 3});
  REQUIRE(plain[2] == std::vector<int>{8, 9});

  // same seed: epoch changes the permutation, rerun does not
  auto e0 = batch_indices(100, 10, 5, 0, true);
  auto e0_again = batch_indices(100, 10, 5, 0, true);
  auto e1 = batch_indices(100, 10, 5, 1, true);
  REQUIRE(e0 == e0_again);
  REQUIRE(e0 != e1);
}

TEST_CASE("take_rows and modal_batch gather records") {
  auto [img, lbl] = generate_glyphs(40, 17);
  auto ds = normalize_and_split(img, lbl, 5);
  std::vector<int> ids{3, 0, 17};
  auto batch = modal_batch(ds, ids);
  REQUIRE(batch.size() == 2);
  REQUIRE(batch[0].shape() == Shape{3, 1, 28, 28});
  REQUIRE(batch[1].shape() == Shape{3, 10});
  for (int b = 0; b < 3; ++b)
    for (int j = 0; j < 784; ++j)
      REQUIRE(batch[0][b * 784 + j] == ds.images[std::int64_t(ids[static_cast<size_t>(b)]) * 784 + j]);
  REQUIRE_THROWS_AS(take_rows(ds.images, {99}), ContractError);
}

TEST_CASE("glyph generation is deterministic and classed") {
  auto [img1, lbl1] = generate_glyphs(50, 23);
  auto [img2, lbl2] = generate_glyphs(50, 23);
  auto [img3, lbl3] = generate_glyphs(50, 24);
  REQUIRE(img1.bytes == img2.bytes);
  REQUIRE(lbl1.bytes == lbl2.bytes);
  REQUIRE(img1.bytes != img3.bytes);

  // classes cycle and each image has real ink
  for (int i = 0; i < 50; ++i) {
    REQUIRE(lbl1.bytes[static_cast<size_t>(i)] == i % 10);
    std::int64_t ink = 0;
    for (int j = 0; j < 784; ++j) ink += img1.bytes[std::int64_t(i) * 784 + j];
    REQUIRE(ink > 784);  // average intensity above one count per pixel
  }

  // same class, different jitter: images differ
  bool differ = false;
  for (int j = 0; j < 784; ++j)
    if (img1.bytes[j] != img1.bytes[10 * 784 + j]) differ = true;
  REQUIRE(differ);
}

TEST_CASE("data dir resolution order") {
  REQUIRE(resolve_data_dir("/explicit") == "/explicit");
  const char* saved = std::getenv("MHVAE_DATA_DIR");
  setenv("MHVAE_DATA_DIR", "/from_env", 1);
  REQUIRE(resolve_data_dir("") == "/from_env");
  REQUIRE(resolve_data_dir("/explicit") == "/explicit");
  unsetenv("MHVAE_DATA_DIR");
  REQUIRE(resolve_data_dir("") == "data");
  if (saved) setenv("MHVAE_DATA_DIR", saved, 1);
}
