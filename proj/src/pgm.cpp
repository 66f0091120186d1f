#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "dskd/data.hpp"

namespace dskd {
namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  // Next whitespace-delimited token, skipping '#' comments.
  std::string token(const char* what) {
    skip_space_and_comments();
    std::string out;
    while (pos_ < bytes_.size() && !std::isspace(bytes_[pos_]) && bytes_[pos_] != '#') {
      out.push_back(static_cast<char>(bytes_[pos_++]));
    }
    if (out.empty()) {
      throw PgmError(PgmErrorKind::kTruncated, std::string("PGM truncated before ") + what);
    }
    return out;
  }

  long integer(const char* what) {
    const std::string t = token(what);
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      throw PgmError(PgmErrorKind::kBadHeader, std::string("PGM ") + what + " is not an integer: '" + t + "'");
    }
    if (t.size() > 9) throw PgmError(PgmErrorKind::kBadHeader, std::string("PGM ") + what + " too large");
    return std::stol(t);
  }

  std::size_t pos() const noexcept { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Tensor parse_pgm(std::span<const unsigned char> bytes) {
  if (bytes.size() < 2) throw PgmError(PgmErrorKind::kTruncated, "PGM truncated before magic");
  const std::string magic(bytes.begin(), bytes.begin() + 2);
  if (magic != "P2" && magic != "P5") {
    throw PgmError(PgmErrorKind::kUnsupportedMagic, "unsupported magic '" + magic + "'");
  }
  HeaderReader reader(bytes);
  reader.advance(2);
  const long width = reader.integer("width");
  const long height = reader.integer("height");
  const long maxval = reader.integer("maxval");
  if (width <= 0 || height <= 0) throw PgmError(PgmErrorKind::kBadHeader, "PGM has an empty raster");
  if (maxval == 0) throw PgmError(PgmErrorKind::kBadHeader, "PGM maxval must be positive");
  if (maxval > 255) {
    throw PgmError(PgmErrorKind::kMaxvalTooLarge,
                   "PGM maxval " + std::to_string(maxval) + " exceeds 255");
  }

  const auto count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  std::vector<Real> values(count);
  const auto scale = static_cast<Real>(maxval);
  if (magic == "P5") {
    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t start = reader.pos();
    if (start >= bytes.size() || !std::isspace(bytes[start])) {
      throw PgmError(PgmErrorKind::kTruncated, "PGM truncated before raster");
    }
    ++start;
    if (bytes.size() - start < count) {
      throw PgmError(PgmErrorKind::kTruncated,
                     "PGM raster truncated: expected " + std::to_string(count) + " bytes, found " +
                         std::to_string(bytes.size() - start));
    }
    for (std::size_t i = 0; i < count; ++i) {
      const long v = bytes[start + i];
      if (v > maxval) throw PgmError(PgmErrorKind::kBadHeader, "PGM sample exceeds maxval");
      values[i] = static_cast<Real>(v) / scale;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const long v = reader.integer("raster sample");
      if (v > maxval) throw PgmError(PgmErrorKind::kBadHeader, "PGM sample exceeds maxval");
      values[i] = static_cast<Real>(v) / scale;
    }
  }
  return Tensor::from_data({1, static_cast<std::size_t>(height), static_cast<std::size_t>(width)},
                           std::move(values));
}

Tensor load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PgmError(PgmErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return parse_pgm(bytes);
}

Tensor load_pgm_mask(const std::filesystem::path& path) {
  Tensor raw = load_pgm(path);
  std::vector<Real> bin(raw.numel());
  auto src = raw.data();
  for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = src[i] >= 0.5 ? 1.0 : 0.0;
  return Tensor::from_data(raw.shape(), std::move(bin));
}

void save_pgm(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("save_pgm", "channels", 1, image.rank() == 3 ? image.dim(0) : image.rank());
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PgmError(PgmErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  out << "P5\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
  std::vector<unsigned char> raster(image.numel());
  auto src = image.data();
  for (std::size_t i = 0; i < raster.size(); ++i) {
    raster[i] = static_cast<unsigned char>(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raster.data()),
            static_cast<std::streamsize>(raster.size()));
  if (!out) throw PgmError(PgmErrorKind::kIo, "write failed for '" + path.string() + "'");
}

Tensor pad_to_multiple(const Tensor& plane, std::size_t multiple) {
  if (multiple == 0) throw std::invalid_argument("pad_to_multiple: multiple must be >= 1");
  if (plane.rank() != 3) throw ShapeError("pad_to_multiple", "rank", 3, plane.rank());
  const std::size_t c = plane.dim(0);
  const std::size_t h = plane.dim(1);
  const std::size_t w = plane.dim(2);
  const std::size_t oh = (h + multiple - 1) / multiple * multiple;
  const std::size_t ow = (w + multiple - 1) / multiple * multiple;
  if (oh == h && ow == w) return plane;
  auto src = plane.data();
  std::vector<Real> out(c * oh * ow);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < oh; ++i) {
      const std::size_t si = std::min(i, h - 1);
      for (std::size_t j = 0; j < ow; ++j) {
        out[(k * oh + i) * ow + j] = src[(k * h + si) * w + std::min(j, w - 1)];
      }
    }
  }
  return Tensor::from_data({c, oh, ow}, std::move(out));
}

std::vector<ImageSample> load_directory(const std::filesystem::path& dir, std::size_t multiple) {
  namespace fs = std::filesystem;
  const fs::path images = dir / "images";
  const fs::path masks = dir / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw PgmError(PgmErrorKind::kIo,
                   "'" + dir.string() + "' must contain images/ and masks/ subdirectories");
  }
  std::map<std::string, fs::path> by_stem;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pgm") {
      by_stem[entry.path().stem().string()] = entry.path();
    }
  }
  std::vector<ImageSample> out;
  for (const auto& [stem, path] : by_stem) {
    const fs::path mask_path = masks / (stem + ".pgm");
    if (!fs::exists(mask_path)) {
      throw PgmError(PgmErrorKind::kIo, "no mask for image '" + stem + "'");
    }
    Tensor image = load_pgm(path);
    Tensor mask = load_pgm_mask(mask_path);
    if (image.shape() != mask.shape()) {
      throw ShapeError("load_directory(" + stem + ")", "image/mask size", image.numel(),
                       mask.numel());
    }
    out.push_back({stem, pad_to_multiple(image, multiple), pad_to_multiple(mask, multiple)});
  }
  return out;
}

void save_directory(const std::vector<ImageSample>& samples, const std::filesystem::path& dir) {
  for (const auto& s : samples) {
    save_pgm(s.image, dir / "images" / (s.id + ".pgm"));
    save_pgm(s.mask, dir / "masks" / (s.id + ".pgm"));
  }
}

}  // namespace dskd
