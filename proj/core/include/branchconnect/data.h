#ifndef BRANCHCONNECT_DATA_H_
#define BRANCHCONNECT_DATA_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "branchconnect/random.h"
#include "branchconnect/tensor.h"

namespace branchconnect {

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Labeled images, N x 3 x H x W with pixels in [0,1]. `mean_image` is the
/// per-pixel mean of the training split it was computed from; test splits
/// carry the training mean.
struct Dataset {
  std::string name;
  Tensor images;  // empty when N == 0
  std::vector<int> labels;
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor mean_image;  // 3 x H x W

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return 3 * height * width; }
  std::span<const Scalar> image(std::size_t i) const;
};

struct Batch {
  Tensor images;  // B x 3 x H' x W'
  std::vector<int> labels;
};

enum class CifarVariant { kCifar10, kCifar100 };

inline constexpr std::size_t kCifarSide = 32;
std::size_t CifarRecordSize(CifarVariant variant);

/// Reads a CIFAR binary batch file. CIFAR-100 records carry a coarse and a
/// fine label; the fine label is used.
Dataset LoadCifarBinary(const std::string& path, CifarVariant variant);
Dataset ParseCifarBinary(std::span<const std::uint8_t> bytes, CifarVariant variant, std::size_t side = kCifarSide);
/// Inverse of ParseCifarBinary; pixels are quantized with round(x * 255).
std::vector<std::uint8_t> EncodeCifarBinary(const Dataset& ds, CifarVariant variant);
void WriteCifarBinary(const std::string& path, const Dataset& ds, CifarVariant variant);

/// Per-pixel mean over all images (3 x H x W).
Tensor ComputeMeanImage(const Dataset& ds);

/// Synthetic stand-in for CIFAR: each class has a fixed random blob template;
/// samples add N(0, noise^2) pixel noise, clamp to [0,1] and quantize to
/// 1/255 steps so they export losslessly to the CIFAR layout.
Dataset GenerateSynthetic(std::size_t classes, std::size_t per_class, std::size_t side, std::uint64_t seed,
                          double noise);

/// Seeded shuffle then disjoint prefix split. The train split's mean image
/// is recomputed and shared with the test split.
std::pair<Dataset, Dataset> Split(const Dataset& ds, std::size_t n_train, std::size_t n_test, std::uint64_t seed);

std::vector<std::size_t> ClassCounts(const Dataset& ds);

enum class PreprocessMode { kTrain, kEval };

struct PreprocessOptions {
  std::optional<std::size_t> crop;
  bool mirror = false;
};

/// Mean subtraction, then cropping/mirroring. Train mode draws, per image and
/// in this order, crop-x, crop-y and the mirror coin (only the draws that
/// apply). Eval mode takes the center crop and never mirrors.
Batch Preprocess(const Dataset& ds, std::span<const std::size_t> indices, const PreprocessOptions& options,
                 PreprocessMode mode, Rng& rng);

/// Horizontal flip of every channel of a C x H x W image.
void MirrorImage(std::span<Scalar> image, std::size_t channels, std::size_t height, std::size_t width);

/// FNV-1a over the bytes of the mean image.
std::uint64_t MeanChecksum(const Tensor& mean);
/// Small JSON sidecar: name, classes, records, mean checksum.
std::string DatasetMetadataJson(const Dataset& ds);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_DATA_H_
