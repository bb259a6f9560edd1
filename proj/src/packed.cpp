#include "ternq/packed.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include <json.hpp>

namespace ternq {

namespace {

using json = nlohmann::json;

constexpr std::array<std::uint8_t, 4> kMagic = {'T', 'Q', 'M', '1'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 4;

std::uint32_t encode_code(std::int8_t code, int bits) {
    if (bits == 2) {
        switch (code) {
            case 0: return 0b00;
            case 1: return 0b01;
            case -1: return 0b10;
            default: throw ContractError("pack: 2-bit code out of range");
        }
    }
    const int limit = (1 << (bits - 1)) - 1;
    if (code < -limit || code > limit) throw ContractError("pack: code out of range for bit width");
    return static_cast<std::uint32_t>(code) & ((1u << bits) - 1u);
}

std::int8_t decode_code(std::uint32_t raw, int bits) {
    if (bits == 2) {
        switch (raw) {
            case 0b00: return 0;
            case 0b01: return 1;
            case 0b10: return -1;
            default: throw FormatError("unpack: reserved 2-bit code 11");
        }
    }
    const std::uint32_t sign_bit = 1u << (bits - 1);
    if (raw == sign_bit) throw FormatError("unpack: reserved code pattern for " + std::to_string(bits) + "-bit blob");
    const std::int32_t value = (raw & sign_bit) ? static_cast<std::int32_t>(raw) - (1 << bits) : static_cast<std::int32_t>(raw);
    return static_cast<std::int8_t>(value);
}

void check_bits(int bits) {
    if (bits != 2 && bits != 3 && bits != 8) throw ContractError("packed blobs hold 2, 3 or 8-bit codes");
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
    return v;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> values) {
    for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> get_floats(std::span<const std::uint8_t> b, std::size_t at, std::size_t count) {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_u32(b, at + 4 * i));
    return out;
}

json config_to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},
                {"hidden", c.hidden},
                {"heads", c.heads},
                {"ffn", c.ffn},
                {"vocab", c.vocab},
                {"segments", c.segments},
                {"max_positions", c.max_positions},
                {"classes", c.classes},
                {"attention_scale", c.attention_scale == AttentionScale::hidden ? "hidden" : "head"},
                {"dropout", c.dropout}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ffn = j.at("ffn").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.segments = j.at("segments").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    const std::string scale = j.at("attention_scale").get<std::string>();
    if (scale != "hidden" && scale != "head") throw FormatError("manifest: bad attention_scale '" + scale + "'");
    c.attention_scale = scale == "hidden" ? AttentionScale::hidden : AttentionScale::head;
    c.dropout = j.at("dropout").get<float>();
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Packing

std::size_t packed_byte_length(std::size_t elements, int bits) {
    return (elements * static_cast<std::size_t>(bits) + 7) / 8;
}

PackedBlob pack(const QuantTensor& t) {
    check_bits(t.bits);
    if (t.codes.size() != t.rows * t.cols) throw DimensionError("pack: code count does not match shape");
    PackedBlob blob{t.rows, t.cols, t.bits, t.granularity, {}, t.scales};
    blob.bytes.assign(packed_byte_length(t.codes.size(), t.bits), 0);
    std::size_t bit = 0;
    for (std::int8_t code : t.codes) {
        const std::uint32_t raw = encode_code(code, t.bits);
        for (int b = 0; b < t.bits; ++b, ++bit) {
            if ((raw >> b) & 1u) blob.bytes[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
        }
    }
    return blob;
}

QuantTensor unpack(const PackedBlob& blob) {
    check_bits(blob.bits);
    const std::size_t n = blob.rows * blob.cols;
    if (blob.bytes.size() != packed_byte_length(n, blob.bits)) throw FormatError("unpack: byte length mismatch");
    const std::size_t groups = blob.granularity == Granularity::layer ? (n == 0 ? blob.scales.size() : 1) : blob.rows;
    if (blob.scales.size() != groups) throw FormatError("unpack: scale count does not match granularity");
    QuantTensor t;
    t.rows = blob.rows;
    t.cols = blob.cols;
    t.bits = blob.bits;
    t.granularity = blob.granularity;
    t.scales = blob.scales;
    t.codes.resize(n);
    std::size_t bit = 0;
    for (std::size_t k = 0; k < n; ++k) {
        std::uint32_t raw = 0;
        for (int b = 0; b < blob.bits; ++b, ++bit) raw |= static_cast<std::uint32_t>((blob.bytes[bit / 8] >> (bit % 8)) & 1u) << b;
        t.codes[k] = decode_code(raw, blob.bits);
    }
    return t;
}

bool same_encoding(const QuantTensor& a, const QuantTensor& b) {
    return a.rows == b.rows && a.cols == b.cols && a.bits == b.bits && a.granularity == b.granularity &&
           a.codes == b.codes && a.scales.size() == b.scales.size() &&
           std::equal(a.scales.begin(), a.scales.end(), b.scales.begin(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes a uInt length; feed large buffers in chunks.
    std::size_t at = 0;
    while (at < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - at, 1u << 30);
        crc = ::crc32(crc, bytes.data() + at, static_cast<uInt>(n));
        at += n;
    }
    return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// Size accounting

double SizeReport::total_mb() const { return static_cast<double>(total_bits) / 8.0 / kBytesPerMB; }
double SizeReport::fp32_mb() const { return static_cast<double>(fp32_bits) / 8.0 / kBytesPerMB; }
double SizeReport::ratio() const {
    return total_bits == 0 ? 0.0 : static_cast<double>(fp32_bits) / static_cast<double>(total_bits);
}

SizeReport size_report(const ModelConfig& config, const QuantPlan& plan) {
    plan.validate();
    SizeReport report;
    report.plan = plan.notation();
    for (const ParamSpec& spec : param_layout(config)) {
        SizeEntry e;
        e.name = spec.name;
        e.elements = shape_numel(spec.shape);
        e.category = spec.role == ParamRole::transformer_weight ? SizeCategory::transformer_weights
                     : spec.role == ParamRole::word_embedding    ? SizeCategory::word_embedding
                                                                 : SizeCategory::unquantized;
        const auto qc = plan.config_for(spec.role);
        if (qc) {
            e.bits = spec.role == ParamRole::transformer_weight ? plan.weight_bits : plan.embedding_bits;
            e.scale_count = qc->granularity == Granularity::layer ? 1 : spec.shape[0];
        }
        e.code_bits = static_cast<std::uint64_t>(e.elements) * static_cast<std::uint64_t>(e.bits);
        e.scale_bits = 32ull * e.scale_count;
        switch (e.category) {
            case SizeCategory::transformer_weights: report.transformer_bits += e.total_bits(); break;
            case SizeCategory::word_embedding: report.embedding_bits += e.total_bits(); break;
            case SizeCategory::unquantized: report.unquantized_bits += e.total_bits(); break;
        }
        report.fp32_bits += 32ull * e.elements;
        report.entries.push_back(std::move(e));
    }
    report.total_bits = report.transformer_bits + report.embedding_bits + report.unquantized_bits;
    return report;
}

// ---------------------------------------------------------------------------
// Model files

Tensor StoredTensor::dense() const {
    if (const auto* q = std::get_if<QuantTensor>(&value)) {
        Tensor d = dequantize(*q);
        return d;
    }
    return std::get<Tensor>(value);
}

const StoredTensor& ModelFile::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw std::out_of_range("model file has no tensor '" + name + "'");
}

std::string ModelFile::meta_value(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    return fallback;
}

std::vector<std::uint8_t> serialize_model(const ModelFile& model) {
    json entries = json::array();
    std::vector<std::uint8_t> data;
    for (const StoredTensor& t : model.tensors) {
        const std::size_t offset = data.size();
        json e{{"name", t.name}, {"role", std::string(to_string(t.role))}, {"method", t.method}, {"offset", offset}};
        if (const auto* q = std::get_if<QuantTensor>(&t.value)) {
            const PackedBlob blob = pack(*q);
            data.insert(data.end(), blob.bytes.begin(), blob.bytes.end());
            put_floats(data, blob.scales);
            e["bits"] = blob.bits;
            e["granularity"] = std::string(to_string(blob.granularity));
            e["shape"] = json::array({blob.rows, blob.cols});
            e["code_bytes"] = blob.bytes.size();
            e["scale_count"] = blob.scales.size();
        } else {
            const Tensor& d = std::get<Tensor>(t.value);
            put_floats(data, d.data());
            e["bits"] = 32;
            e["granularity"] = "layer";
            e["shape"] = d.shape();
            e["code_bytes"] = d.size() * 4;
            e["scale_count"] = 0;
        }
        e["length"] = data.size() - offset;
        e["crc32"] = crc32(std::span<const std::uint8_t>(data).subspan(offset));
        entries.push_back(std::move(e));
    }
    json meta = json::object();
    for (const auto& [k, v] : model.meta) meta[k] = v;
    const json manifest{{"format", "TQM1"},
                        {"format_version", kFormatVersion},
                        {"config", config_to_json(model.config)},
                        {"meta", meta},
                        {"tensors", entries}};
    const std::string text = manifest.dump();
    const std::span<const std::uint8_t> text_bytes(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());

    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    put_u32(out, kFormatVersion);
    put_u64(out, text.size());
    put_u32(out, crc32(text_bytes));
    out.insert(out.end(), text_bytes.begin(), text_bytes.end());
    out.insert(out.end(), data.begin(), data.end());
    return out;
}

void save_model(const std::filesystem::path& path, const ModelFile& model) {
    const std::vector<std::uint8_t> bytes = serialize_model(model);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw std::runtime_error("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

ModelFile parse_model(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes) {
        throw TruncatedError("model file truncated: " + std::to_string(bytes.size()) + " bytes, header needs " +
                             std::to_string(kHeaderBytes));
    }
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw FormatError("not a TQM1 model file (bad magic)");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kFormatVersion) {
        throw VersionError("unsupported model format version " + std::to_string(version) + " (expected " +
                           std::to_string(kFormatVersion) + ")");
    }
    const std::uint64_t manifest_len = get_u64(bytes, 8);
    const std::uint32_t manifest_crc = get_u32(bytes, 16);
    if (manifest_len > bytes.size() - kHeaderBytes) throw TruncatedError("model file truncated inside the manifest");
    const auto manifest_bytes = bytes.subspan(kHeaderBytes, manifest_len);
    if (crc32(manifest_bytes) != manifest_crc) throw ChecksumError("<manifest>", "manifest checksum mismatch");
    const auto data = bytes.subspan(kHeaderBytes + manifest_len);

    json manifest;
    try {
        manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }

    ModelFile model;
    try {
        if (manifest.at("format_version").get<std::uint32_t>() != kFormatVersion) {
            throw VersionError("manifest format version mismatch");
        }
        model.config = config_from_json(manifest.at("config"));
        for (const auto& [k, v] : manifest.at("meta").items()) model.meta.emplace_back(k, v.get<std::string>());

        std::vector<std::pair<std::size_t, std::size_t>> ranges;
        for (const json& e : manifest.at("tensors")) {
            StoredTensor t;
            t.name = e.at("name").get<std::string>();
            t.role = parse_param_role(e.at("role").get<std::string>());
            t.method = e.at("method").get<std::string>();
            const std::size_t offset = e.at("offset").get<std::size_t>();
            const std::size_t length = e.at("length").get<std::size_t>();
            if (offset > data.size() || length > data.size() - offset) {
                throw TruncatedError("model file truncated inside tensor '" + t.name + "'");
            }
            ranges.emplace_back(offset, length);
            const auto blob = data.subspan(offset, length);
            if (crc32(blob) != e.at("crc32").get<std::uint32_t>()) {
                throw ChecksumError(t.name, "checksum mismatch in tensor '" + t.name + "'");
            }
            const int bits = e.at("bits").get<int>();
            const Shape shape = e.at("shape").get<Shape>();
            const std::size_t code_bytes = e.at("code_bytes").get<std::size_t>();
            const std::size_t scale_count = e.at("scale_count").get<std::size_t>();
            if (code_bytes + 4 * scale_count != length) throw FormatError("tensor '" + t.name + "': inconsistent lengths");
            if (bits == 32) {
                if (code_bytes != 4 * shape_numel(shape)) throw FormatError("tensor '" + t.name + "': size mismatch");
                t.value = Tensor(shape, get_floats(blob, 0, shape_numel(shape)));
            } else {
                if (shape.size() != 2) throw FormatError("tensor '" + t.name + "': quantized tensors are matrices");
                PackedBlob pb;
                pb.rows = shape[0];
                pb.cols = shape[1];
                pb.bits = bits;
                pb.granularity = parse_granularity(e.at("granularity").get<std::string>());
                pb.bytes.assign(blob.begin(), blob.begin() + static_cast<std::ptrdiff_t>(code_bytes));
                pb.scales = get_floats(blob, code_bytes, scale_count);
                t.value = unpack(pb);
            }
            model.tensors.push_back(std::move(t));
        }

        std::sort(ranges.begin(), ranges.end());
        std::size_t cursor = 0;
        for (const auto& [off, len] : ranges) {
            if (off < cursor) throw FormatError("manifest: overlapping tensor blobs");
            cursor = off + len;
        }
        if (cursor != data.size()) throw FormatError("model file has trailing bytes after the last blob");
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }

    model.config.validate();
    const auto layout = param_layout(model.config);
    if (layout.size() != model.tensors.size()) throw FormatError("manifest tensor count does not match the config");
    std::map<std::string, const StoredTensor*> by_name;
    for (const auto& t : model.tensors) {
        if (!by_name.emplace(t.name, &t).second) throw FormatError("manifest lists '" + t.name + "' twice");
    }
    for (const auto& spec : layout) {
        const auto it = by_name.find(spec.name);
        if (it == by_name.end()) throw FormatError("manifest is missing '" + spec.name + "'");
        const StoredTensor& t = *it->second;
        const Shape shape = t.is_quantized() ? Shape{std::get<QuantTensor>(t.value).rows, std::get<QuantTensor>(t.value).cols}
                                             : std::get<Tensor>(t.value).shape();
        if (shape != spec.shape || t.role != spec.role) throw FormatError("tensor '" + spec.name + "' does not match the config");
    }
    return model;
}

ModelFile load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open model file '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_model(bytes);
}

}  // namespace ternq
