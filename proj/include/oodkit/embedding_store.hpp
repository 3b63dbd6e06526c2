#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodkit/error.hpp"

namespace oodkit {

/// Dense N×D row-major matrix of f32 features. Every element is finite and
/// both extents are at least one; construction validates this.
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    FeatureMatrix(std::size_t n_samples, std::size_t dim, std::vector<float> data);

    static FeatureMatrix from_rows(const std::vector<std::vector<float>>& rows);

    std::size_t n_samples() const noexcept { return n_; }
    std::size_t dim() const noexcept { return d_; }
    bool empty() const noexcept { return n_ == 0; }

    std::span<const float> row(std::size_t i) const { return {data_.data() + i * d_, d_}; }
    float operator()(std::size_t i, std::size_t j) const { return data_[i * d_ + j]; }
    std::span<const float> data() const noexcept { return data_; }

    /// Subset of rows in the given order.
    FeatureMatrix select_rows(std::span<const std::size_t> indices) const;

    /// Copy with every row scaled to unit L2 norm. Requires non-zero rows.
    FeatureMatrix l2_normalized() const;

    /// Throws InvariantViolation naming the first row with zero L2 norm.
    void require_nonzero_rows() const;

    friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

private:
    std::size_t n_ = 0;
    std::size_t d_ = 0;
    std::vector<float> data_;
};

struct LabelVector {
    std::vector<std::uint32_t> labels;
    std::uint32_t n_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }

    /// Every label lies in [0, n_classes).
    void validate() const;
    /// Sample count per class.
    std::vector<std::size_t> class_counts() const;
    /// Throws ContractViolation when some class in [0, n_classes) has no sample.
    void require_all_classes_present() const;
    LabelVector select(std::span<const std::size_t> indices) const;

    friend bool operator==(const LabelVector&, const LabelVector&) = default;
};

struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const noexcept { return channels * height * width; }
    friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// CHW image with pixels in [0, 1].
class ImageTensor {
public:
    ImageTensor() = default;
    ImageTensor(std::size_t height, std::size_t width, std::vector<float> pixels);

    const ImageShape& shape() const noexcept { return shape_; }
    std::size_t height() const noexcept { return shape_.height; }
    std::size_t width() const noexcept { return shape_.width; }
    std::span<const float> pixels() const noexcept { return pixels_; }
    std::vector<double> pixels_as_double() const { return {pixels_.begin(), pixels_.end()}; }

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

private:
    ImageShape shape_;
    std::vector<float> pixels_;
};

enum class DatasetRole { InTrain, InTest, OutTest, LinearHead };

const char* to_string(DatasetRole role);
DatasetRole parse_role(const std::string& text);

struct DatasetManifest {
    std::string name;
    DatasetRole role = DatasetRole::InTrain;
    std::optional<std::vector<std::string>> class_names;
    std::string source_checksum;
    std::string extractor;
    /// Keys beyond the fixed schema (e.g. "resize"), preserved verbatim.
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct EmbeddingFile {
    FeatureMatrix matrix;
    std::optional<LabelVector> labels;
    DatasetManifest manifest;
};

struct ImageFile {
    std::vector<ImageTensor> images;
    std::optional<LabelVector> labels;
    DatasetManifest manifest;
};

// Container layout (little-endian), 64-byte header:
//   0  char[4] "OODK"      4  u32 version       8  u64 rows      16 u64 cols
//   24 u8 dtype (1=f32)    25 u8 has_labels     26 u8 kind       27 u8 reserved
//   28 u32 crc32(body)     32 u32 n_classes     36 u32 height    40 u32 width
//   44..63 zero
// Body: rows·cols f32, [rows u32 labels], [rows f32 bias if kind=head],
//       u32 manifest length, manifest UTF-8 JSON.
namespace container {
inline constexpr char kMagic[4] = {'O', 'O', 'D', 'K'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 64;
inline constexpr std::uint8_t kDtypeF32 = 1;

enum class Kind : std::uint8_t { Features = 0, Images = 1, LinearHead = 2 };

/// Total file size for the given extents (manifest_bytes = serialized JSON length).
std::uint64_t file_size(std::uint64_t rows, std::uint64_t cols, bool has_labels, Kind kind,
                        std::uint64_t manifest_bytes);

struct Header {
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    bool has_labels = false;
    Kind kind = Kind::Features;
    std::uint32_t checksum = 0;
    std::uint32_t n_classes = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
};

/// Raw decoded container; the typed readers below build on it.
struct Raw {
    Header header;
    std::vector<float> values;
    std::vector<std::uint32_t> labels;
    std::vector<float> bias;
    DatasetManifest manifest;
};

std::vector<std::uint8_t> encode(const Raw& raw);
Raw decode(std::span<const std::uint8_t> bytes);
Raw read_raw(const std::filesystem::path& path);
void write_raw(const Raw& raw, const std::filesystem::path& path);
}  // namespace container

void write_embeddings(const FeatureMatrix& matrix, const std::optional<LabelVector>& labels,
                      const DatasetManifest& manifest, const std::filesystem::path& path);
EmbeddingFile read_embeddings(const std::filesystem::path& path);

/// All images must share one shape.
void write_images(std::span<const ImageTensor> images, const std::optional<LabelVector>& labels,
                  const DatasetManifest& manifest, const std::filesystem::path& path);
ImageFile read_images(const std::filesystem::path& path);

}  // namespace oodkit
