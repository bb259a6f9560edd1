#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ternq/config.hpp"
#include "ternq/plan.hpp"
#include "ternq/ternarizer.hpp"

namespace ternq {

/// Bit-packed low-bit tensor. Element k of the row-major flattening occupies bits
/// [bits*k, bits*k + bits) of the little-endian bit stream; for 2-bit codes that is
/// bits 2*(k mod 4) .. 2*(k mod 4)+1 of byte k/4.
///
/// 2-bit codes: 00 -> 0, 01 -> +1, 10 -> -1, 11 reserved.
/// 3-bit and 8-bit codes: two's complement, with the most negative pattern reserved.
struct PackedBlob {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 2;
    Granularity granularity = Granularity::layer;
    std::vector<std::uint8_t> bytes;
    std::vector<float> scales;

    bool operator==(const PackedBlob&) const = default;
};

using PackedTernaryBlob = PackedBlob;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ChecksumError : public FormatError {
public:
    ChecksumError(const std::string& tensor, const std::string& what) : FormatError(what), tensor_(tensor) {}
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

std::size_t packed_byte_length(std::size_t elements, int bits);
PackedBlob pack(const QuantTensor& t);
/// Throws FormatError on a reserved code. Thresholds are not stored and come back empty.
QuantTensor unpack(const PackedBlob& blob);

/// Compares everything that is serialized (shape, bit width, granularity, codes, scales).
bool same_encoding(const QuantTensor& a, const QuantTensor& b);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Size accounting

enum class SizeCategory { transformer_weights, word_embedding, unquantized };

struct SizeEntry {
    std::string name;
    SizeCategory category;
    std::size_t elements = 0;
    int bits = 32;
    std::size_t scale_count = 0;
    std::uint64_t code_bits = 0;
    std::uint64_t scale_bits = 0;
    std::uint64_t total_bits() const { return code_bits + scale_bits; }
};

struct SizeReport {
    std::string plan;
    std::vector<SizeEntry> entries;
    std::uint64_t transformer_bits = 0;
    std::uint64_t embedding_bits = 0;
    std::uint64_t unquantized_bits = 0;
    std::uint64_t total_bits = 0;
    std::uint64_t fp32_bits = 0;

    /// Sizes are reported in MB of 2^20 bytes.
    double total_mb() const;
    double fp32_mb() const;
    double ratio() const;
};

inline constexpr double kBytesPerMB = 1024.0 * 1024.0;

/// Counts code bits plus 32 bits per scale for quantized tensors and 32 bits per element
/// for everything the plan leaves in full precision.
SizeReport size_report(const ModelConfig& config, const QuantPlan& plan);

// ---------------------------------------------------------------------------
// Model files

inline constexpr std::uint32_t kFormatVersion = 1;

struct StoredTensor {
    std::string name;
    ParamRole role = ParamRole::bias;
    std::string method = "fp32";
    std::variant<Tensor, QuantTensor> value;

    bool is_quantized() const { return std::holds_alternative<QuantTensor>(value); }
    Tensor dense() const;
};

struct ModelFile {
    ModelConfig config;
    /// Free-form string metadata (plan, activation scheme, seed, ...).
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<StoredTensor> tensors;

    const StoredTensor& find(const std::string& name) const;
    std::string meta_value(const std::string& key, const std::string& fallback = "") const;
};

/// Layout: "TQM1" | u32 version | u64 manifest length | u32 manifest CRC | manifest JSON |
/// blobs. Blob offsets in the manifest are relative to the first byte after the manifest.
/// Integers are little-endian. Written to a temporary file and renamed into place.
void save_model(const std::filesystem::path& path, const ModelFile& model);
std::vector<std::uint8_t> serialize_model(const ModelFile& model);

ModelFile load_model(const std::filesystem::path& path);
ModelFile parse_model(std::span<const std::uint8_t> bytes);

}  // namespace ternq
