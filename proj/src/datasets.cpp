#include "spnas/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "spnas/error.hpp"

namespace spnas {

namespace {

class ByteReader {
 public:
  ByteReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open IDX file '" + path + "'");
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("IDX '" + path_ + "': truncated " + what + ", expected " + std::to_string(pos_ + n) +
                        " bytes but file ends at byte offset " + std::to_string(bytes_.size()));
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }

  const unsigned char* take(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

}  // namespace

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(classes, 0);
  for (int l : labels) ++counts[l];
  return counts;
}

Tensor Dataset::batch_images(std::span<const int> indices) const {
  const std::size_t per = static_cast<std::size_t>(channels()) * height() * width();
  Tensor out({static_cast<int>(indices.size()), channels(), height(), width()});
  for (std::size_t b = 0; b < indices.size(); ++b)
    std::copy_n(images.data() + indices[b] * per, per, out.data() + b * per);
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(labels[i]);
  return out;
}

nlohmann::json Dataset::manifest() const {
  return {{"source", source},
          {"n", size()},
          {"channels", channels()},
          {"height", height()},
          {"width", width()},
          {"classes", classes},
          {"class_counts", class_counts()},
          {"train", train.size()},
          {"valid", valid.size()},
          {"split_seed", split_seed}};
}

std::vector<int> shuffled(std::vector<int> base, std::mt19937_64& rng) {
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = base.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(base[i - 1], base[j]);
  }
  return base;
}

void split_dataset(Dataset& d, std::uint64_t seed, double valid_fraction) {
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) throw ConfigError("valid fraction must be in [0, 1)");
  std::vector<int> all(d.size());
  for (int i = 0; i < d.size(); ++i) all[i] = i;
  std::mt19937_64 rng(seed);
  all = shuffled(std::move(all), rng);
  const auto n_valid = static_cast<std::size_t>(std::floor(valid_fraction * d.size()));
  d.valid.assign(all.begin(), all.begin() + n_valid);
  d.train.assign(all.begin() + n_valid, all.end());
  d.split_seed = seed;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::uint64_t seed) {
  ByteReader img(images_path);
  const std::uint32_t magic = img.u32("header");
  if (magic != 0x00000803u) {
    throw FormatError("IDX '" + images_path + "': bad magic at byte offset 0 (expected 0x00000803)");
  }
  const std::uint32_t n = img.u32("dimensions"), h = img.u32("dimensions"), w = img.u32("dimensions");
  if (n == 0 || h == 0 || w == 0) throw FormatError("IDX '" + images_path + "': zero dimension at byte offset 4");
  const std::size_t count = static_cast<std::size_t>(n) * h * w;
  const unsigned char* px = img.take(count, "pixel data");

  ByteReader lab(labels_path);
  if (lab.u32("header") != 0x00000801u) {
    throw FormatError("IDX '" + labels_path + "': bad magic at byte offset 0 (expected 0x00000801)");
  }
  const std::uint32_t nl = lab.u32("dimensions");
  if (nl != n) {
    throw FormatError("IDX '" + labels_path + "': " + std::to_string(nl) + " labels at byte offset 4 for " +
                      std::to_string(n) + " images");
  }
  const unsigned char* lb = lab.take(n, "label data");

  Dataset d;
  d.source = "idx";
  d.images = Tensor({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
  for (std::size_t i = 0; i < count; ++i) d.images[i] = px[i] / 255.0;
  d.labels.assign(lb, lb + n);
  d.classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  split_dataset(d, seed);
  return d;
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  if (d.channels() != 1) throw ConfigError("IDX export supports single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw ConfigError("cannot write '" + images_path + "'");
  put_u32(img, 0x00000803u);
  put_u32(img, static_cast<std::uint32_t>(d.size()));
  put_u32(img, static_cast<std::uint32_t>(d.height()));
  put_u32(img, static_cast<std::uint32_t>(d.width()));
  for (double v : d.images.vec()) img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw ConfigError("cannot write '" + labels_path + "'");
  put_u32(lab, 0x00000801u);
  put_u32(lab, static_cast<std::uint32_t>(d.size()));
  for (int l : d.labels) {
    if (l < 0 || l > 255) throw ConfigError("IDX labels must fit in one byte");
    lab.put(static_cast<char>(l));
  }
}

Dataset synth_classification(int classes, int n, int image_size, std::uint64_t seed, double noise) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (!(noise >= 0.0)) throw ConfigError("synthetic noise must be >= 0");
  if (n < 1 || image_size < 4) throw ConfigError("synthetic dataset needs n >= 1 and image size >= 4");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset d;
  d.source = "synthetic";
  d.classes = classes;
  d.images = Tensor({n, 1, image_size, image_size});
  d.labels.resize(n);
  const double c0 = 0.5 * (image_size - 1);
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    d.labels[i] = label;
    const double theta = std::numbers::pi * label / classes;
    const double freq = 0.12 + 0.1 * u(rng);  // cycles per pixel
    const double phase = 2.0 * std::numbers::pi * u(rng);
    const double contrast = 0.3 + 0.15 * u(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        const double t = (x - c0) * ct + (y - c0) * st;
        const double v = 0.5 + contrast * std::sin(2.0 * std::numbers::pi * freq * t + phase) + noise * gauss(rng);
        d.images.at(i, 0, y, x) = std::clamp(v, 0.0, 1.0);
      }
  }
  split_dataset(d, seed);
  return d;
}

}  // namespace spnas
