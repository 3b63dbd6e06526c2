#include "oodkit/embedding_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <zlib.h>

namespace oodkit {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::Io: return "io";
        case ErrorCode::BadMagic: return "bad magic";
        case ErrorCode::VersionMismatch: return "version mismatch";
        case ErrorCode::TruncatedPayload: return "truncated payload";
        case ErrorCode::ChecksumMismatch: return "checksum mismatch";
        case ErrorCode::MalformedContainer: return "malformed container";
        case ErrorCode::InvariantViolation: return "invariant violation";
        case ErrorCode::DimensionMismatch: return "dimension mismatch";
        case ErrorCode::ContractViolation: return "contract violation";
        case ErrorCode::SingularCovariance: return "singular covariance";
        case ErrorCode::NonFiniteLoss: return "non-finite loss";
        case ErrorCode::BridgeFailure: return "bridge failure";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// FeatureMatrix

FeatureMatrix::FeatureMatrix(std::size_t n_samples, std::size_t dim, std::vector<float> data)
    : n_(n_samples), d_(dim), data_(std::move(data)) {
    require(n_ >= 1, ErrorCode::InvariantViolation, "invariant violation: n_samples >= 1");
    require(d_ >= 1, ErrorCode::InvariantViolation, "invariant violation: dim >= 1");
    require(data_.size() == n_ * d_, ErrorCode::InvariantViolation,
            "invariant violation: data size " + std::to_string(data_.size()) + " != " +
                std::to_string(n_) + "x" + std::to_string(d_));
    for (std::size_t k = 0; k < data_.size(); ++k) {
        if (!std::isfinite(data_[k])) {
            fail(ErrorCode::InvariantViolation, "non-finite value at row " + std::to_string(k / d_) +
                                                    ", col " + std::to_string(k % d_));
        }
    }
}

FeatureMatrix FeatureMatrix::from_rows(const std::vector<std::vector<float>>& rows) {
    require(!rows.empty(), ErrorCode::InvariantViolation, "invariant violation: n_samples >= 1");
    const std::size_t d = rows.front().size();
    std::vector<float> flat;
    flat.reserve(rows.size() * d);
    for (const auto& r : rows) {
        require(r.size() == d, ErrorCode::DimensionMismatch, "ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return FeatureMatrix(rows.size(), d, std::move(flat));
}

FeatureMatrix FeatureMatrix::select_rows(std::span<const std::size_t> indices) const {
    std::vector<float> out;
    out.reserve(indices.size() * d_);
    for (std::size_t i : indices) {
        require(i < n_, ErrorCode::ContractViolation, "row index out of range");
        auto r = row(i);
        out.insert(out.end(), r.begin(), r.end());
    }
    return FeatureMatrix(indices.size(), d_, std::move(out));
}

void FeatureMatrix::require_nonzero_rows() const {
    for (std::size_t i = 0; i < n_; ++i) {
        double sq = 0.0;
        for (float v : row(i)) sq += double(v) * double(v);
        if (!(sq > 0.0)) {
            fail(ErrorCode::InvariantViolation,
                 "invariant violation: zero-norm row " + std::to_string(i));
        }
    }
}

FeatureMatrix FeatureMatrix::l2_normalized() const {
    require_nonzero_rows();
    std::vector<float> out(data_.size());
    for (std::size_t i = 0; i < n_; ++i) {
        double sq = 0.0;
        for (float v : row(i)) sq += double(v) * double(v);
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < d_; ++j) out[i * d_ + j] = float(double(data_[i * d_ + j]) * inv);
    }
    return FeatureMatrix(n_, d_, std::move(out));
}

// ---------------------------------------------------------------------------
// LabelVector

void LabelVector::validate() const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= n_classes) {
            fail(ErrorCode::InvariantViolation, "invariant violation: label " +
                                                    std::to_string(labels[i]) + " at index " +
                                                    std::to_string(i) + " outside [0, " +
                                                    std::to_string(n_classes) + ")");
        }
    }
}

std::vector<std::size_t> LabelVector::class_counts() const {
    validate();
    std::vector<std::size_t> counts(n_classes, 0);
    for (auto y : labels) ++counts[y];
    return counts;
}

void LabelVector::require_all_classes_present() const {
    const auto counts = class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) {
            fail(ErrorCode::ContractViolation, "class " + std::to_string(c) + " has no samples");
        }
    }
}

LabelVector LabelVector::select(std::span<const std::size_t> indices) const {
    LabelVector out;
    out.n_classes = n_classes;
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        require(i < labels.size(), ErrorCode::ContractViolation, "label index out of range");
        out.labels.push_back(labels[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// ImageTensor

ImageTensor::ImageTensor(std::size_t height, std::size_t width, std::vector<float> pixels)
    : shape_{3, height, width}, pixels_(std::move(pixels)) {
    require(height >= 2 && width >= 2, ErrorCode::InvariantViolation,
            "invariant violation: image height and width must be >= 2");
    require(pixels_.size() == shape_.size(), ErrorCode::InvariantViolation,
            "invariant violation: pixel count " + std::to_string(pixels_.size()) +
                " != 3x" + std::to_string(height) + "x" + std::to_string(width));
    for (std::size_t k = 0; k < pixels_.size(); ++k) {
        const float p = pixels_[k];
        if (!(p >= 0.0f && p <= 1.0f)) {
            fail(ErrorCode::InvariantViolation,
                 "invariant violation: pixel " + std::to_string(k) + " outside [0,1]");
        }
    }
}

// ---------------------------------------------------------------------------
// DatasetManifest

const char* to_string(DatasetRole role) {
    switch (role) {
        case DatasetRole::InTrain: return "in-train";
        case DatasetRole::InTest: return "in-test";
        case DatasetRole::OutTest: return "out-test";
        case DatasetRole::LinearHead: return "linear-head";
    }
    return "unknown";
}

DatasetRole parse_role(const std::string& text) {
    if (text == "in-train") return DatasetRole::InTrain;
    if (text == "in-test") return DatasetRole::InTest;
    if (text == "out-test") return DatasetRole::OutTest;
    if (text == "linear-head") return DatasetRole::LinearHead;
    fail(ErrorCode::MalformedContainer, "unknown manifest role '" + text + "'");
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json j = extra.is_object() ? extra : nlohmann::json::object();
    j["name"] = name;
    j["role"] = to_string(role);
    if (class_names) {
        j["class_names"] = *class_names;
    } else {
        j["class_names"] = nullptr;
    }
    j["source_checksum"] = source_checksum;
    j["extractor"] = extractor;
    return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorCode::MalformedContainer, "manifest is not a JSON object");
    DatasetManifest m;
    try {
        m.name = j.value("name", std::string{});
        m.role = parse_role(j.value("role", std::string{"in-train"}));
        if (j.contains("class_names") && !j["class_names"].is_null()) {
            m.class_names = j["class_names"].get<std::vector<std::string>>();
        }
        m.source_checksum = j.value("source_checksum", std::string{});
        m.extractor = j.value("extractor", std::string{});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedContainer, std::string("manifest: ") + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        static const std::set<std::string> known = {"name", "role", "class_names",
                                                    "source_checksum", "extractor"};
        if (!known.contains(it.key())) m.extra[it.key()] = it.value();
    }
    return m;
}

// ---------------------------------------------------------------------------
// Container codec

namespace container {
namespace {

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int s = 0; s < 32; s += 8) out_.push_back(std::uint8_t(v >> s));
    }
    void u64(std::uint64_t v) {
        for (int s = 0; s < 64; s += 8) out_.push_back(std::uint8_t(v >> s));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        auto b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    std::size_t remaining() const { return in_.size() - pos_; }
    std::size_t position() const { return pos_; }

    void need(std::uint64_t n) const {
        if (n > remaining()) fail(ErrorCode::TruncatedPayload, "truncated payload");
    }
    std::uint8_t u8() {
        need(1);
        return in_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int s = 0; s < 32; s += 8) v |= std::uint32_t(in_[pos_++]) << s;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int s = 0; s < 64; s += 8) v |= std::uint64_t(in_[pos_++]) << s;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> body) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for bodies over 4 GiB.
    const std::size_t chunk = std::size_t(1) << 30;
    for (std::size_t off = 0; off < body.size(); off += chunk) {
        const std::size_t n = std::min(chunk, body.size() - off);
        crc = crc32(crc, body.data() + off, static_cast<uInt>(n));
    }
    return static_cast<std::uint32_t>(crc);
}

constexpr std::uint64_t kMax = std::numeric_limits<std::uint64_t>::max();

// Saturating arithmetic so corrupted headers cannot wrap the size computation.
std::uint64_t sat_mul(std::uint64_t a, std::uint64_t b) {
    if (a != 0 && b > kMax / a) return kMax;
    return a * b;
}
std::uint64_t sat_add(std::uint64_t a, std::uint64_t b) { return b > kMax - a ? kMax : a + b; }

std::uint64_t fixed_body_size(const Header& h) {
    std::uint64_t n = sat_mul(sat_mul(h.rows, h.cols), 4);
    if (h.has_labels) n = sat_add(n, sat_mul(h.rows, 4));
    if (h.kind == Kind::LinearHead) n = sat_add(n, sat_mul(h.rows, 4));
    return sat_add(n, 4);  // manifest length prefix
}

}  // namespace

std::uint64_t file_size(std::uint64_t rows, std::uint64_t cols, bool has_labels, Kind kind,
                        std::uint64_t manifest_bytes) {
    Header h;
    h.rows = rows;
    h.cols = cols;
    h.has_labels = has_labels;
    h.kind = kind;
    return sat_add(sat_add(kHeaderSize, fixed_body_size(h)), manifest_bytes);
}

std::vector<std::uint8_t> encode(const Raw& raw) {
    const Header& h = raw.header;
    require(raw.values.size() == h.rows * h.cols, ErrorCode::InvariantViolation,
            "invariant violation: payload size does not match header extents");
    require(!h.has_labels || raw.labels.size() == h.rows, ErrorCode::InvariantViolation,
            "invariant violation: label count must equal n_samples");
    require(h.kind != Kind::LinearHead || raw.bias.size() == h.rows,
            ErrorCode::InvariantViolation, "invariant violation: bias count must equal rows");

    const std::string manifest = raw.manifest.to_json().dump();
    std::vector<std::uint8_t> out;
    out.reserve(file_size(h.rows, h.cols, h.has_labels, h.kind, manifest.size()));
    out.resize(kHeaderSize, 0);

    Writer body(out);
    for (float v : raw.values) body.f32(v);
    if (h.has_labels) {
        for (auto y : raw.labels) body.u32(y);
    }
    if (h.kind == Kind::LinearHead) {
        for (float b : raw.bias) body.f32(b);
    }
    require(manifest.size() <= std::numeric_limits<std::uint32_t>::max(),
            ErrorCode::InvariantViolation, "manifest too large");
    body.u32(static_cast<std::uint32_t>(manifest.size()));
    body.bytes(manifest.data(), manifest.size());

    const std::uint32_t crc = crc32_of(std::span(out).subspan(kHeaderSize));

    std::vector<std::uint8_t> header;
    header.reserve(kHeaderSize);
    Writer hw(header);
    hw.bytes(kMagic, 4);
    hw.u32(kVersion);
    hw.u64(h.rows);
    hw.u64(h.cols);
    hw.u8(kDtypeF32);
    hw.u8(h.has_labels ? 1 : 0);
    hw.u8(static_cast<std::uint8_t>(h.kind));
    hw.u8(0);
    hw.u32(crc);
    hw.u32(h.n_classes);
    hw.u32(h.height);
    hw.u32(h.width);
    header.resize(kHeaderSize, 0);
    std::memcpy(out.data(), header.data(), kHeaderSize);
    return out;
}

Raw decode(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        fail(ErrorCode::BadMagic, "bad magic: not an OODK container");
    }
    if (bytes.size() < kHeaderSize) fail(ErrorCode::TruncatedPayload, "truncated payload: header");
    r.skip(4);
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        fail(ErrorCode::VersionMismatch,
             "version mismatch: file has " + std::to_string(version) + ", reader supports " +
                 std::to_string(kVersion));
    }
    Raw raw;
    Header& h = raw.header;
    h.rows = r.u64();
    h.cols = r.u64();
    const std::uint8_t dtype = r.u8();
    const std::uint8_t label_flag = r.u8();
    const std::uint8_t kind = r.u8();
    r.skip(1);
    h.checksum = r.u32();
    h.n_classes = r.u32();
    h.height = r.u32();
    h.width = r.u32();
    r.skip(kHeaderSize - r.position());

    require(dtype == kDtypeF32, ErrorCode::MalformedContainer,
            "unsupported dtype tag " + std::to_string(dtype));
    require(label_flag <= 1, ErrorCode::MalformedContainer, "bad label-presence flag");
    require(kind <= 2, ErrorCode::MalformedContainer, "unknown container kind");
    h.has_labels = label_flag == 1;
    h.kind = static_cast<Kind>(kind);
    require(h.rows >= 1, ErrorCode::InvariantViolation, "invariant violation: n_samples >= 1");
    require(h.cols >= 1, ErrorCode::InvariantViolation, "invariant violation: dim >= 1");

    // Size check before any allocation: the body must hold every declared section.
    const std::uint64_t fixed = fixed_body_size(h);
    if (fixed > r.remaining()) fail(ErrorCode::TruncatedPayload, "truncated payload");

    const std::uint32_t crc = crc32_of(bytes.subspan(kHeaderSize));

    raw.values.resize(h.rows * h.cols);
    for (auto& v : raw.values) v = r.f32();
    if (h.has_labels) {
        raw.labels.resize(h.rows);
        for (auto& y : raw.labels) y = r.u32();
    }
    if (h.kind == Kind::LinearHead) {
        raw.bias.resize(h.rows);
        for (auto& b : raw.bias) b = r.f32();
    }
    const std::uint32_t manifest_len = r.u32();
    if (manifest_len > r.remaining()) fail(ErrorCode::TruncatedPayload, "truncated payload");
    const std::string manifest = r.str(manifest_len);
    if (r.remaining() != 0) {
        fail(ErrorCode::MalformedContainer,
             std::to_string(r.remaining()) + " trailing bytes after manifest");
    }
    if (crc != h.checksum) fail(ErrorCode::ChecksumMismatch, "checksum mismatch");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(manifest);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedContainer, std::string("manifest JSON: ") + e.what());
    }
    raw.manifest = DatasetManifest::from_json(j);
    return raw;
}

Raw read_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(bool(in), ErrorCode::Io, "cannot open " + path.string());
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(bool(in), ErrorCode::Io, "read failed for " + path.string());
    return decode(bytes);
}

void write_raw(const Raw& raw, const std::filesystem::path& path) {
    const auto bytes = encode(raw);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(bool(out), ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(bool(out), ErrorCode::Io, "write failed for " + path.string());
}

}  // namespace container

// ---------------------------------------------------------------------------
// Typed readers / writers

namespace {

void check_manifest(const DatasetManifest& manifest, const std::optional<LabelVector>& labels) {
    if (manifest.class_names && labels) {
        require(manifest.class_names->size() == labels->n_classes, ErrorCode::InvariantViolation,
                "invariant violation: class_names length " +
                    std::to_string(manifest.class_names->size()) + " != n_classes " +
                    std::to_string(labels->n_classes));
    }
}

void check_labels(const std::optional<LabelVector>& labels, std::size_t n) {
    if (!labels) return;
    require(labels->size() == n, ErrorCode::InvariantViolation,
            "invariant violation: label count " + std::to_string(labels->size()) +
                " != n_samples " + std::to_string(n));
    labels->validate();
}

std::optional<LabelVector> labels_of(const container::Raw& raw) {
    if (!raw.header.has_labels) return std::nullopt;
    LabelVector lv{raw.labels, raw.header.n_classes};
    lv.validate();
    return lv;
}

}  // namespace

void write_embeddings(const FeatureMatrix& matrix, const std::optional<LabelVector>& labels,
                      const DatasetManifest& manifest, const std::filesystem::path& path) {
    require(!matrix.empty(), ErrorCode::InvariantViolation, "invariant violation: n_samples >= 1");
    check_labels(labels, matrix.n_samples());
    check_manifest(manifest, labels);

    container::Raw raw;
    raw.header.rows = matrix.n_samples();
    raw.header.cols = matrix.dim();
    raw.header.kind = container::Kind::Features;
    raw.header.has_labels = labels.has_value();
    raw.header.n_classes = labels ? labels->n_classes : 0;
    raw.values.assign(matrix.data().begin(), matrix.data().end());
    if (labels) raw.labels = labels->labels;
    raw.manifest = manifest;
    container::write_raw(raw, path);
}

EmbeddingFile read_embeddings(const std::filesystem::path& path) {
    auto raw = container::read_raw(path);
    require(raw.header.kind == container::Kind::Features, ErrorCode::MalformedContainer,
            path.string() + " is not a feature container");
    EmbeddingFile f;
    f.labels = labels_of(raw);
    f.matrix = FeatureMatrix(raw.header.rows, raw.header.cols, std::move(raw.values));
    f.manifest = std::move(raw.manifest);
    check_manifest(f.manifest, f.labels);
    return f;
}

void write_images(std::span<const ImageTensor> images, const std::optional<LabelVector>& labels,
                  const DatasetManifest& manifest, const std::filesystem::path& path) {
    require(!images.empty(), ErrorCode::InvariantViolation, "invariant violation: n_samples >= 1");
    const ImageShape shape = images.front().shape();
    check_labels(labels, images.size());
    check_manifest(manifest, labels);

    container::Raw raw;
    raw.header.rows = images.size();
    raw.header.cols = shape.size();
    raw.header.kind = container::Kind::Images;
    raw.header.has_labels = labels.has_value();
    raw.header.n_classes = labels ? labels->n_classes : 0;
    raw.header.height = static_cast<std::uint32_t>(shape.height);
    raw.header.width = static_cast<std::uint32_t>(shape.width);
    raw.values.reserve(images.size() * shape.size());
    for (const auto& img : images) {
        require(img.shape() == shape, ErrorCode::DimensionMismatch,
                "all images in a container must share one shape");
        raw.values.insert(raw.values.end(), img.pixels().begin(), img.pixels().end());
    }
    if (labels) raw.labels = labels->labels;
    raw.manifest = manifest;
    container::write_raw(raw, path);
}

ImageFile read_images(const std::filesystem::path& path) {
    auto raw = container::read_raw(path);
    const auto& h = raw.header;
    require(h.kind == container::Kind::Images, ErrorCode::MalformedContainer,
            path.string() + " is not an image container");
    require(std::uint64_t(3) * h.height * h.width == h.cols, ErrorCode::MalformedContainer,
            "image extents do not match row width");
    ImageFile f;
    f.labels = labels_of(raw);
    f.images.reserve(h.rows);
    for (std::uint64_t i = 0; i < h.rows; ++i) {
        auto first = raw.values.begin() + static_cast<std::ptrdiff_t>(i * h.cols);
        f.images.emplace_back(h.height, h.width,
                              std::vector<float>(first, first + static_cast<std::ptrdiff_t>(h.cols)));
    }
    f.manifest = std::move(raw.manifest);
    check_manifest(f.manifest, f.labels);
    return f;
}

}  // namespace oodkit
