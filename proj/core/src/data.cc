#include "branchconnect/data.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

namespace branchconnect {

std::span<const Scalar> Dataset::image(std::size_t i) const {
  return images.data().subspan(i * image_size(), image_size());
}

std::size_t CifarRecordSize(CifarVariant variant) {
  const std::size_t pixels = 3 * kCifarSide * kCifarSide;
  return variant == CifarVariant::kCifar10 ? 1 + pixels : 2 + pixels;
}

namespace {

std::size_t LabelBytes(CifarVariant variant) { return variant == CifarVariant::kCifar10 ? 1 : 2; }
std::size_t ClassCount(CifarVariant variant) { return variant == CifarVariant::kCifar10 ? 10 : 100; }

Dataset Subset(const Dataset& ds, std::span<const std::size_t> indices, std::string name) {
  Dataset out;
  out.name = std::move(name);
  out.classes = ds.classes;
  out.height = ds.height;
  out.width = ds.width;
  out.mean_image = ds.mean_image;
  if (indices.empty()) return out;
  out.images = Tensor({indices.size(), 3, ds.height, ds.width});
  const std::size_t sz = ds.image_size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto src = ds.image(indices[k]);
    std::copy(src.begin(), src.end(), out.images.data().begin() + k * sz);
    out.labels.push_back(ds.labels[indices[k]]);
  }
  return out;
}

}  // namespace

Dataset ParseCifarBinary(std::span<const std::uint8_t> bytes, CifarVariant variant, std::size_t side) {
  const std::size_t label_bytes = LabelBytes(variant);
  const std::size_t pixels = 3 * side * side;
  const std::size_t record = label_bytes + pixels;
  if (bytes.size() % record != 0) {
    throw FormatError("file length " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(record) + "-byte record size");
  }
  Dataset ds;
  ds.name = variant == CifarVariant::kCifar10 ? "cifar10" : "cifar100";
  ds.classes = ClassCount(variant);
  ds.height = side;
  ds.width = side;
  const std::size_t n = bytes.size() / record;
  if (n > 0) ds.images = Tensor({n, 3, side, side});
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const std::size_t label = rec[label_bytes - 1];
    if (label >= ds.classes) {
      throw FormatError("record " + std::to_string(i) + " has label " + std::to_string(label) + " >= " +
                        std::to_string(ds.classes) + " classes");
    }
    ds.labels.push_back(static_cast<int>(label));
    Scalar* dst = ds.images.data().data() + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) dst[p] = static_cast<Scalar>(rec[label_bytes + p]) / Scalar{255};
  }
  ds.mean_image = ComputeMeanImage(ds);
  return ds;
}

Dataset LoadCifarBinary(const std::string& path, CifarVariant variant) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Dataset ds = ParseCifarBinary(bytes, variant);
  return ds;
}

std::vector<std::uint8_t> EncodeCifarBinary(const Dataset& ds, CifarVariant variant) {
  const std::size_t label_bytes = LabelBytes(variant);
  const std::size_t pixels = ds.image_size();
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * (label_bytes + pixels));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int label = ds.labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= ClassCount(variant)) {
      throw FormatError("label " + std::to_string(label) + " does not fit the CIFAR variant");
    }
    // CIFAR-100 coarse label is not tracked; write 0.
    if (label_bytes == 2) out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(label));
    for (Scalar v : ds.image(i)) {
      const long q = std::lround(std::clamp<double>(v, 0.0, 1.0) * 255.0);
      out.push_back(static_cast<std::uint8_t>(q));
    }
  }
  return out;
}

void WriteCifarBinary(const std::string& path, const Dataset& ds, CifarVariant variant) {
  const std::vector<std::uint8_t> bytes = EncodeCifarBinary(ds, variant);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor ComputeMeanImage(const Dataset& ds) {
  Tensor mean({3, ds.height, ds.width}, 0);
  if (ds.size() == 0) return mean;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto img = ds.image(i);
    for (std::size_t p = 0; p < mean.size(); ++p) mean[p] += img[p];
  }
  for (Scalar& v : mean.data()) v /= static_cast<Scalar>(ds.size());
  return mean;
}

Dataset GenerateSynthetic(std::size_t classes, std::size_t per_class, std::size_t side, std::uint64_t seed,
                          double noise) {
  if (classes < 2) throw Error("synthetic dataset needs at least 2 classes");
  if (side < 8) throw Error("synthetic images must be at least 8x8");
  Rng rng(seed);
  constexpr std::size_t kBlobs = 3;
  const std::size_t plane = side * side;
  std::vector<double> templates(classes * 3 * plane, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    double* t = templates.data() + c * 3 * plane;
    for (std::size_t b = 0; b < kBlobs; ++b) {
      const double cy = Uniform01(rng) * static_cast<double>(side);
      const double cx = Uniform01(rng) * static_cast<double>(side);
      const double sigma = static_cast<double>(side) * (0.08 + 0.17 * Uniform01(rng));
      double color[3];
      for (double& v : color) v = Uniform01(rng) * 2.0 - 1.0;
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double w = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
          for (std::size_t ch = 0; ch < 3; ++ch) t[ch * plane + y * side + x] += 0.4 * color[ch] * w;
        }
      }
    }
    for (std::size_t p = 0; p < 3 * plane; ++p) t[p] = std::clamp(0.5 + t[p], 0.0, 1.0);
  }

  Dataset ds;
  ds.name = "synthetic";
  ds.classes = classes;
  ds.height = side;
  ds.width = side;
  ds.images = Tensor({classes * per_class, 3, side, side});
  std::size_t idx = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double* t = templates.data() + c * 3 * plane;
    for (std::size_t i = 0; i < per_class; ++i, ++idx) {
      Scalar* dst = ds.images.data().data() + idx * 3 * plane;
      for (std::size_t p = 0; p < 3 * plane; ++p) {
        const double v = std::clamp(t[p] + noise * StandardNormal(rng), 0.0, 1.0);
        dst[p] = static_cast<Scalar>(std::round(v * 255.0) / 255.0);
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.mean_image = ComputeMeanImage(ds);
  return ds;
}

std::pair<Dataset, Dataset> Split(const Dataset& ds, std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  if (n_train + n_test > ds.size()) {
    throw Error("split needs " + std::to_string(n_train + n_test) + " records but the dataset has " +
                std::to_string(ds.size()));
  }
  if (n_train == 0) throw Error("split needs at least one training record");
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[UniformIndex(rng, i)]);
  std::span<const std::size_t> all(order);
  Dataset train = Subset(ds, all.subspan(0, n_train), ds.name + "-train");
  train.mean_image = ComputeMeanImage(train);
  Dataset test = Subset(ds, all.subspan(n_train, n_test), ds.name + "-test");
  test.mean_image = train.mean_image;
  return {std::move(train), std::move(test)};
}

std::vector<std::size_t> ClassCounts(const Dataset& ds) {
  std::vector<std::size_t> counts(ds.classes, 0);
  for (int y : ds.labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

void MirrorImage(std::span<Scalar> image, std::size_t channels, std::size_t height, std::size_t width) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      Scalar* row = image.data() + (c * height + y) * width;
      std::reverse(row, row + width);
    }
  }
}

Batch Preprocess(const Dataset& ds, std::span<const std::size_t> indices, const PreprocessOptions& options,
                 PreprocessMode mode, Rng& rng) {
  if (indices.empty()) throw Error("preprocess: empty batch");
  const std::size_t h = ds.height, w = ds.width;
  const std::size_t crop_h = options.crop.value_or(h);
  const std::size_t crop_w = options.crop.value_or(w);
  if (crop_h > h || crop_w > w || crop_h == 0) {
    throw Error("crop " + std::to_string(crop_h) + " does not fit " + std::to_string(h) + "x" + std::to_string(w) +
                " images");
  }
  RequireShape(ds.mean_image, {3, h, w}, "mean image");
  Batch batch;
  batch.images = Tensor({indices.size(), 3, crop_h, crop_w});
  std::vector<Scalar> centered(3 * h * w);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto src = ds.image(indices[k]);
    for (std::size_t p = 0; p < centered.size(); ++p) centered[p] = src[p] - ds.mean_image[p];
    std::size_t off_y = (h - crop_h) / 2, off_x = (w - crop_w) / 2;
    bool mirror = false;
    if (mode == PreprocessMode::kTrain) {
      if (options.crop) {
        off_x = UniformIndex(rng, w - crop_w + 1);
        off_y = UniformIndex(rng, h - crop_h + 1);
      }
      if (options.mirror) mirror = Uniform01(rng) < 0.5;
    }
    auto dst = batch.images.data().subspan(k * 3 * crop_h * crop_w, 3 * crop_h * crop_w);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < crop_h; ++y) {
        for (std::size_t x = 0; x < crop_w; ++x) {
          dst[(c * crop_h + y) * crop_w + x] = centered[(c * h + off_y + y) * w + off_x + x];
        }
      }
    }
    if (mirror) MirrorImage(dst, 3, crop_h, crop_w);
    batch.labels.push_back(ds.labels[indices[k]]);
  }
  return batch;
}

std::uint64_t MeanChecksum(const Tensor& mean) {
  std::uint64_t hash = 1469598103934665603ull;
  for (Scalar v : mean.data()) {
    unsigned char bytes[sizeof(Scalar)];
    std::memcpy(bytes, &v, sizeof(Scalar));
    for (unsigned char b : bytes) {
      hash ^= b;
      hash *= 1099511628211ull;
    }
  }
  return hash;
}

std::string DatasetMetadataJson(const Dataset& ds) {
  char checksum[17];
  std::snprintf(checksum, sizeof(checksum), "%016llx", static_cast<unsigned long long>(MeanChecksum(ds.mean_image)));
  nlohmann::ordered_json j;
  j["name"] = ds.name;
  j["classes"] = ds.classes;
  j["records"] = ds.size();
  j["height"] = ds.height;
  j["width"] = ds.width;
  j["mean_checksum"] = checksum;
  return j.dump(2) + "\n";
}

}  // namespace branchconnect
