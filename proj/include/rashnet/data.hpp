#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rashnet/tensor.hpp"

namespace rashnet {

/// Bad or unreadable input data (manifest, image, fold plan).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Label vocabulary
// ---------------------------------------------------------------------------

enum class FineLabel : std::uint8_t {
  bowens_disease,
  chickenpox,
  chigger_bites,
  dermatofibroma,
  eczema,
  enterovirus,
  keratosis,
  measles,
  normal_skin,
  psoriasis,
  ringworm,
  scabies,
};

inline constexpr std::size_t kFineLabelCount = 12;

std::string_view label_name(FineLabel label);
std::optional<FineLabel> parse_label(std::string_view name);

/// Binary task: measles is the positive class (1), everything else 0.
inline int binary_label(FineLabel label) { return label == FineLabel::measles ? 1 : 0; }

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct Sample {
  std::string path;
  FineLabel label = FineLabel::normal_skin;
  std::int64_t id = 0;

  int binary() const { return binary_label(label); }
  bool positive() const { return label == FineLabel::measles; }
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  std::vector<Sample> samples;
  std::array<std::size_t, kFineLabelCount> counts{};
  int schema_version = kSchemaVersion;
  std::filesystem::path base_dir;  // relative image paths resolve here

  std::size_t size() const { return samples.size(); }
  std::size_t positives() const;
  std::size_t negatives() const { return size() - positives(); }
  std::size_t count(FineLabel label) const { return counts[static_cast<std::size_t>(label)]; }
  std::vector<int> binary_labels() const;

  /// Recomputes counts from the sample list.
  void recount();
  /// Appends a sample with the next id.
  void add(std::string path, FineLabel label);
  /// Sub-manifest of the given sample indices, ids preserved.
  DatasetManifest subset(const std::vector<std::size_t>& indices) const;
};

/// CSV with header `path,label`. Rejects unknown labels, duplicate paths and
/// empty files; errors name the offending line.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(std::istream& in, const std::string& origin,
                               std::filesystem::path base_dir = {});
void write_manifest(std::ostream& out, const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// 8-bit interleaved image, row-major H×W×channels.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  static Image8 solid(int height, int width, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

/// PNG or baseline JPEG, detected from the file signature, decoded to RGB.
Image8 decode_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);
void write_jpeg(const std::filesystem::path& path, const Image8& image, int quality = 95);

struct PreprocessOptions {
  int size = 224;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
  DType dtype = DType::f32;
};

/// Bilinear resize (half-pixel centers) to size×size, scale to [0,1],
/// per-channel standardization. Returns 3×size×size.
Tensor preprocess(const Image8& image, const PreprocessOptions& options = {});

// ---------------------------------------------------------------------------
// Augmentation (train side only)
// ---------------------------------------------------------------------------

Tensor hflip(const Tensor& chw);
/// Rotation about the image center, bilinear, edge-replicate fill.
Tensor rotate(const Tensor& chw, double degrees);

struct AugmentOptions {
  double flip_probability = 0.5;
  double max_rotation_degrees = 15.0;
};

Tensor augment(const Tensor& chw, std::mt19937_64& rng, const AugmentOptions& options = {});

// ---------------------------------------------------------------------------
// Oversampling and folds
// ---------------------------------------------------------------------------

struct OversampleResult {
  DatasetManifest manifest;  // may repeat samples (same id)
  std::size_t duplicates = 0;
  std::vector<std::string> warnings;
};

/// Duplicates minority-class samples round-robin until the binary classes
/// differ by at most one.
OversampleResult oversample(const DatasetManifest& manifest);

struct BalancedIndices {
  std::vector<std::size_t> indices;  // input order, then the duplicates
  std::size_t duplicates = 0;
  std::vector<std::string> warnings;
};

/// The same rule over a subset: `indices` select entries of `labels`.
BalancedIndices oversample_indices(const std::vector<int>& labels,
                                   const std::vector<std::size_t>& indices);

struct FoldPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> validation;  // sorted sample indices per fold
  std::vector<int> fold_of;                          // fold of each sample index

  std::vector<std::size_t> training(int fold) const;
};

/// Seeded shuffle within each binary class, then one round-robin over the
/// folds that continues from the positives into the negatives.
FoldPlan stratified_kfold(const DatasetManifest& manifest, int k = 5, std::uint64_t seed = 0);
FoldPlan stratified_kfold(const std::vector<int>& binary_labels, int k, std::uint64_t seed);

/// `sample_id,fold` rows in sample order.
void write_fold_plan(std::ostream& out, const FoldPlan& plan, const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Sources for training
// ---------------------------------------------------------------------------

class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t index) const = 0;
  /// Preprocessed 3×S×S tensor.
  virtual Tensor image(std::size_t index) const = 0;
};

class TensorSource final : public ImageSource {
 public:
  TensorSource(std::vector<Tensor> images, std::vector<int> labels);
  std::size_t size() const override { return images_.size(); }
  int label(std::size_t i) const override { return labels_.at(i); }
  Tensor image(std::size_t i) const override { return images_.at(i); }

 private:
  std::vector<Tensor> images_;
  std::vector<int> labels_;
};

/// Decodes and preprocesses manifest images on demand.
class ManifestSource final : public ImageSource {
 public:
  ManifestSource(DatasetManifest manifest, PreprocessOptions options);
  std::size_t size() const override { return manifest_.size(); }
  int label(std::size_t i) const override { return manifest_.samples.at(i).binary(); }
  Tensor image(std::size_t i) const override;
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  PreprocessOptions options_;
};

}  // namespace rashnet
