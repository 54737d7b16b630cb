#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mhvae/rng.hpp"
#include "mhvae/tensor.hpp"

namespace mhvae {

// ---------------------------------------------------------------------------
// IDX container (the MNIST distribution format: big-endian, magic-tagged)
// ---------------------------------------------------------------------------

enum class IdxKind { images, labels };

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // u8 payload, 3 dims
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // u8 payload, 1 dim

struct IdxData {
  IdxKind kind = IdxKind::images;
  std::vector<int> dims;           // (n, rows, cols) or (n)
  std::vector<std::uint8_t> bytes; // payload, unscaled

  int count() const { return dims.empty() ? 0 : dims[0]; }
};

namespace detail {

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

inline std::string hex32(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x00000000";
  for (int i = 0; i < 8; ++i) s[9 - i] = digits[(v >> (4 * i)) & 0xF];
  return s;
}

}  // namespace detail

// Each parsed record set stays below this many payload bytes; a header that
// promises more is treated as corrupt rather than attempted.
inline constexpr std::int64_t kIdxMaxPayload = std::int64_t(1) << 33;

inline IdxData parse_idx_bytes(const std::vector<std::uint8_t>& buf, IdxKind expected,
                               const std::string& origin) {
  if (buf.size() < 4)
    throw FormatError(origin + ": too short for an IDX magic (" + std::to_string(buf.size()) +
                      " bytes)");
  const std::uint32_t magic = detail::be32(buf, 0);
  const std::uint32_t want = expected == IdxKind::images ? kIdxImagesMagic : kIdxLabelsMagic;
  if (magic != want) {
    const std::uint32_t other = expected == IdxKind::images ? kIdxLabelsMagic : kIdxImagesMagic;
    if (magic == other)
      throw FormatError(origin + ": kind mismatch, expected " +
                        (expected == IdxKind::images ? "an image" : "a label") + " file (magic " +
                        detail::hex32(want) + ") but found magic " + detail::hex32(magic));
    throw FormatError(origin + ": bad IDX magic " + detail::hex32(magic) + ", expected " +
                      detail::hex32(want));
  }
  const size_t ndims = expected == IdxKind::images ? 3 : 1;
  const size_t header = 4 + 4 * ndims;
  if (buf.size() < header)
    throw FormatError(origin + ": truncated header, need " + std::to_string(header) +
                      " bytes, found " + std::to_string(buf.size()));

  IdxData out;
  out.kind = expected;
  std::int64_t payload = 1;
  for (size_t d = 0; d < ndims; ++d) {
    const std::uint32_t v = detail::be32(buf, 4 + 4 * d);
    if (v > 0x7FFFFFFFu || (payload *= v) > kIdxMaxPayload)
      throw DataError(origin + ": dimension overflow, sizes exceed " +
                      std::to_string(kIdxMaxPayload) + " payload bytes");
    out.dims.push_back(static_cast<int>(v));
  }
  const std::int64_t found = static_cast<std::int64_t>(buf.size() - header);
  if (found < payload)
    throw DataError(origin + ": truncated payload, header promises " + std::to_string(payload) +
                    " bytes, found " + std::to_string(found));
  if (found > payload)
    throw FormatError(origin + ": " + std::to_string(found - payload) +
                      " trailing bytes after the payload");
  out.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(header), buf.end());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f),
                                   std::istreambuf_iterator<char>());
}

inline IdxData parse_idx(const std::string& path, IdxKind expected) {
  return parse_idx_bytes(read_file_bytes(path), expected, path);
}

inline std::vector<std::uint8_t> write_idx_bytes(const IdxData& idx) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * idx.dims.size() + idx.bytes.size());
  detail::put_be32(out, idx.kind == IdxKind::images ? kIdxImagesMagic : kIdxLabelsMagic);
  for (int d : idx.dims) detail::put_be32(out, static_cast<std::uint32_t>(d));
  out.insert(out.end(), idx.bytes.begin(), idx.bytes.end());
  return out;
}

inline void write_idx(const std::string& path, const IdxData& idx) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  const std::vector<std::uint8_t> bytes = write_idx_bytes(idx);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write to '" + path + "'");
}

// ---------------------------------------------------------------------------
// normalized bimodal dataset with split tags
// ---------------------------------------------------------------------------

enum class Split { train = 0, val = 1, test = 2 };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

struct SplitCounts {
  int train = 0, val = 0, test = 0;
};

// train pool = floor(0.85 n); validation = floor(0.10 pool), taken out of the
// pool; evaluation = everything else. 70,000 -> 53,550 / 5,950 / 10,500.
inline SplitCounts split_counts(int n) {
  require(n >= 20, "split: need at least 20 records, got " + std::to_string(n));
  SplitCounts c;
  const int pool = static_cast<int>(std::int64_t(n) * 85 / 100);
  c.val = pool / 10;
  c.train = pool - c.val;
  c.test = n - pool;
  return c;
}

struct BimodalDataset {
  Tensor<float> images;              // [n x 1 x rows x cols], values in [0, 1]
  Tensor<float> labels;              // [n x k] one-hot
  std::vector<int> classes;          // [n]
  std::vector<Split> tag;            // [n]
  std::array<std::vector<int>, 3> split_index;  // record ids per split

  int count() const { return images.empty() ? 0 : images.dim(0); }
  int n_classes() const { return labels.empty() ? 0 : labels.dim(1); }
  const std::vector<int>& ids(Split s) const { return split_index[static_cast<size_t>(s)]; }
};

// Scale pixels by 1/255, one-hot the labels, then shuffle once with the seed
// and cut the shuffled order into train/val/test. `max_records` (0 = all)
// keeps a random subset, drawn after the shuffle so it stays unbiased.
inline BimodalDataset normalize_and_split(const IdxData& images, const IdxData& labels,
                                          std::uint64_t seed, int max_records = 0,
                                          int n_classes = 10) {
  require(images.kind == IdxKind::images && labels.kind == IdxKind::labels,
          "normalize_and_split: arguments are (images, labels)");
  const int n_all = images.count();
  if (n_all != labels.count())
    throw DataError("normalize_and_split: " + std::to_string(n_all) + " images vs " +
                    std::to_string(labels.count()) + " labels");
  const int rows = images.dims[1], cols = images.dims[2];
  const std::int64_t px = std::int64_t(rows) * cols;

  std::vector<int> order(static_cast<size_t>(n_all));
  for (int i = 0; i < n_all; ++i) order[static_cast<size_t>(i)] = i;
  RngStream rng = substream(seed, "split");
  rng.shuffle(order);
  const int n = (max_records > 0 && max_records < n_all) ? max_records : n_all;

  BimodalDataset ds;
  ds.images = Tensor<float>(Shape{n, 1, rows, cols});
  ds.labels = Tensor<float>(Shape{n, n_classes}, 0.0f);
  ds.classes.resize(static_cast<size_t>(n));
  float* im = ds.images.mutable_data();
  float* lb = ds.labels.mutable_data();
  for (int i = 0; i < n; ++i) {
    const int src = order[static_cast<size_t>(i)];
    const std::uint8_t* p = images.bytes.data() + px * src;
    for (std::int64_t j = 0; j < px; ++j)
      im[px * i + j] = static_cast<float>(p[j]) * (1.0f / 255.0f);
    const int cls = labels.bytes[static_cast<size_t>(src)];
    if (cls >= n_classes)
      throw DataError("normalize_and_split: label " + std::to_string(cls) +
                      " out of range for " + std::to_string(n_classes) + " classes");
    ds.classes[static_cast<size_t>(i)] = cls;
    lb[std::int64_t(i) * n_classes + cls] = 1.0f;
  }

  const SplitCounts c = split_counts(n);
  ds.tag.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Split s = i < c.train ? Split::train
                    : i < c.train + c.val ? Split::val
                                          : Split::test;
    ds.tag[static_cast<size_t>(i)] = s;
    ds.split_index[static_cast<size_t>(s)].push_back(i);
  }
  return ds;
}

// Rows of `t` (along axis 0) at the given record ids, in order.
template <class T>
Tensor<T> take_rows(const Tensor<T>& t, const std::vector<int>& ids) {
  require(t.rank() >= 1, "take_rows: rank-0 tensor");
  Shape s = t.shape();
  const std::int64_t stride = t.size() / s[0];
  s[0] = static_cast<int>(ids.size());
  Tensor<T> out(s);
  T* od = out.mutable_data();
  const T* td = t.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < t.dim(0),
            "take_rows: id " + std::to_string(ids[i]) + " out of range");
    std::copy(td + stride * ids[i], td + stride * (ids[i] + 1),
              od + stride * static_cast<std::int64_t>(i));
  }
  return out;
}

// Both modality tensors for one batch of record ids: {images, labels}.
inline std::vector<Tensor<float>> modal_batch(const BimodalDataset& ds,
                                              const std::vector<int>& ids) {
  return {take_rows(ds.images, ids), take_rows(ds.labels, ids)};
}

// Deterministic batch order for one epoch: a per-(seed, epoch) permutation cut
// into batch_size pieces. A final fragment shorter than min_final is dropped
// (the trainer passes 2 so batch statistics stay defined).
inline std::vector<std::vector<int>> batch_indices(int n, int batch_size, std::uint64_t seed,
                                                   int epoch, bool shuffle, int min_final = 1) {
  require(n > 0, "batch_indices: empty split");
  require(batch_size >= 1, "batch_indices: batch_size must be >= 1");
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  if (shuffle) {
    RngStream rng = substream(seed, "shuffle", static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);
  }
  std::vector<std::vector<int>> out;
  for (int at = 0; at < n; at += batch_size) {
    const int take = std::min(batch_size, n - at);
    if (take < min_final) break;
    out.emplace_back(order.begin() + at, order.begin() + at + take);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic glyph dataset (a stand-in with the exact MNIST container shape)
// ---------------------------------------------------------------------------

namespace detail {

// seven-segment strokes per class, on the unit square
inline const std::vector<std::array<float, 4>>& glyph_strokes(int cls) {
  static const std::array<float, 4> seg[7] = {
      {0.25f, 0.20f, 0.75f, 0.20f},  // A top
      {0.75f, 0.20f, 0.75f, 0.50f},  // B upper right
      {0.75f, 0.50f, 0.75f, 0.80f},  // C lower right
      {0.25f, 0.80f, 0.75f, 0.80f},  // D bottom
      {0.25f, 0.50f, 0.25f, 0.80f},  // E lower left
      {0.25f, 0.20f, 0.25f, 0.50f},  // F upper left
      {0.25f, 0.50f, 0.75f, 0.50f},  // G middle
  };
  static const std::vector<std::vector<int>> lit = {
      {0, 1, 2, 3, 4, 5},    // 0
      {1, 2},                // 1
      {0, 1, 6, 4, 3},       // 2
      {0, 1, 6, 2, 3},       // 3
      {5, 6, 1, 2},          // 4
      {0, 5, 6, 2, 3},       // 5
      {0, 5, 6, 4, 2, 3},    // 6
      {0, 1, 2},             // 7
      {0, 1, 2, 3, 4, 5, 6}, // 8
      {0, 1, 2, 3, 5, 6},    // 9
  };
  static std::vector<std::vector<std::array<float, 4>>> cache = [] {
    std::vector<std::vector<std::array<float, 4>>> c(10);
    for (int k = 0; k < 10; ++k)
      for (int s : lit[static_cast<size_t>(k)]) c[static_cast<size_t>(k)].push_back(seg[s]);
    return c;
  }();
  return cache[static_cast<size_t>(cls)];
}

inline float point_segment_dist2(float px, float py, const std::array<float, 4>& s) {
  const float dx = s[2] - s[0], dy = s[3] - s[1];
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((px - s[0]) * dx + (py - s[1]) * dy) / len2 : 0.0f;
  t = std::min(1.0f, std::max(0.0f, t));
  const float cx = s[0] + t * dx - px, cy = s[1] + t * dy - py;
  return cx * cx + cy * cy;
}

}  // namespace detail

// Ten stroke-rendered glyph classes at 28x28 with per-sample rotation, scale
// and shift. Strokes saturate to full intensity with a narrow antialiased
// falloff and the background stays exactly zero, matching the pixel statistics
// of scanned-digit archives (the soft-bernoulli entropy of an image is a few
// dozen nats, all of it on stroke edges). Fills the exact IDX container
// layout, so everything downstream treats it like the real archive. Classes
// cycle 0..9 in record order; the split shuffle mixes them.
inline std::pair<IdxData, IdxData> generate_glyphs(int n, std::uint64_t seed, int rows = 28,
                                                   int cols = 28) {
  require(n >= 1, "generate_glyphs: n must be >= 1");
  IdxData images;
  images.kind = IdxKind::images;
  images.dims = {n, rows, cols};
  images.bytes.resize(static_cast<size_t>(n) * rows * cols);
  IdxData labels;
  labels.kind = IdxKind::labels;
  labels.dims = {n};
  labels.bytes.resize(static_cast<size_t>(n));

  RngStream rng = substream(seed, "datagen");
  const float sigma = 0.017f;
  const float gain = 3.0f;
  const float inv2s2 = 1.0f / (2.0f * sigma * sigma);
  for (int i = 0; i < n; ++i) {
    const int cls = i % 10;
    labels.bytes[static_cast<size_t>(i)] = static_cast<std::uint8_t>(cls);
    const float theta = static_cast<float>((rng.uniform() * 2.0 - 1.0) * 0.22);
    const float scale = static_cast<float>(0.85 + 0.30 * rng.uniform());
    const float shift_x = static_cast<float>((rng.uniform() * 2.0 - 1.0) * 0.06);
    const float shift_y = static_cast<float>((rng.uniform() * 2.0 - 1.0) * 0.06);
    const float ca = std::cos(theta) * scale, sa = std::sin(theta) * scale;

    std::vector<std::array<float, 4>> segs = detail::glyph_strokes(cls);
    for (auto& s : segs) {
      for (int e = 0; e < 2; ++e) {
        const float x = s[2 * e] - 0.5f, y = s[2 * e + 1] - 0.5f;
        s[2 * e] = ca * x - sa * y + 0.5f + shift_x;
        s[2 * e + 1] = sa * x + ca * y + 0.5f + shift_y;
      }
    }

    std::uint8_t* out = images.bytes.data() + std::int64_t(i) * rows * cols;
    for (int r = 0; r < rows; ++r) {
      const float py = (static_cast<float>(r) + 0.5f) / static_cast<float>(rows);
      for (int c = 0; c < cols; ++c) {
        const float px = (static_cast<float>(c) + 0.5f) / static_cast<float>(cols);
        float best = 1e9f;
        for (const auto& s : segs) best = std::min(best, detail::point_segment_dist2(px, py, s));
        const float v = std::min(1.0f, gain * std::exp(-best * inv2s2));
        out[r * cols + c] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
      }
    }
  }
  return {std::move(images), std::move(labels)};
}

// Data directory resolution: explicit path, then MHVAE_DATA_DIR, then ./data.
inline std::string resolve_data_dir(const std::string& cli_value) {
  if (!cli_value.empty()) return cli_value;
  if (const char* env = std::getenv("MHVAE_DATA_DIR"); env && *env) return env;
  return "data";
}

}  // namespace mhvae
