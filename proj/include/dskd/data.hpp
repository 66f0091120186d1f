#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dskd/tensor.hpp"

namespace dskd {

/// Grayscale image in [0,1] and its binary vessel mask, both [1,H,W].
struct ImageSample {
  std::string id;
  Tensor image;
  Tensor mask;
};

// ---- PGM --------------------------------------------------------------------

enum class PgmErrorKind { kIo, kUnsupportedMagic, kBadHeader, kMaxvalTooLarge, kTruncated };

class PgmError : public std::runtime_error {
 public:
  PgmError(PgmErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  PgmErrorKind kind() const noexcept { return kind_; }

 private:
  PgmErrorKind kind_;
};

/// Reads a P2 or P5 graymap (maxval <= 255) as [1,H,W] values in [0,1].
Tensor load_pgm(const std::filesystem::path& path);
Tensor parse_pgm(std::span<const unsigned char> bytes);
/// Same as load_pgm, then binarized at 0.5.
Tensor load_pgm_mask(const std::filesystem::path& path);
/// Writes a P5 graymap with maxval 255; values are clamped to [0,1] and
/// rounded to the nearest level.
void save_pgm(const Tensor& image, const std::filesystem::path& path);

/// Pads [1,H,W] up to the next multiple of `multiple` on the bottom/right by
/// replicating edge pixels.
Tensor pad_to_multiple(const Tensor& plane, std::size_t multiple);

/// Loads `dir/images/*.pgm` paired with `dir/masks/*.pgm` by filename stem,
/// sorted by stem, padded to `multiple`.
std::vector<ImageSample> load_directory(const std::filesystem::path& dir, std::size_t multiple);
void save_directory(const std::vector<ImageSample>& samples, const std::filesystem::path& dir);

// ---- synthetic vessels ------------------------------------------------------

/// Procedural angiogram-like samples: branching dark vessel trees over a
/// smooth background, blurred, with additive noise. Deterministic per seed.
std::vector<ImageSample> generate_synthetic(std::uint64_t seed, int count, int size);

// ---- splitting and batching -------------------------------------------------

struct DatasetSplit {
  std::vector<std::size_t> train;  // indices into the source sample list
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::array<double, 3> ratios{7.0, 1.0, 2.0};
};

/// Seeded shuffle, then validation and test receive round(N * ratio / sum)
/// samples each and training takes the remainder.
DatasetSplit split_dataset(std::size_t count, std::array<double, 3> ratios, std::uint64_t seed);

/// Per-epoch shuffled partition of `count` items into batches; positions are
/// indices into the partition. The last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t seed, int epoch);

}  // namespace dskd
