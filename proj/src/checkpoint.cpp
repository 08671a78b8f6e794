#include "bridge/checkpoint.hpp"

#include "bridge/binio.hpp"

namespace bridge {

namespace {
constexpr uint32_t kMagic = 0x47445242u;  // "BRDG" read as little-endian u32
}

void save_checkpoint(const std::string& path, const Model& model, const std::string& config_text, char stage,
                     uint64_t step) {
    std::vector<uint8_t> head;
    binio::put_u32(head, kMagic);
    binio::put_u32(head, kCheckpointVersion);
    binio::put_string(head, config_text);
    binio::put_u32(head, static_cast<uint32_t>(stage));
    binio::put_u64(head, step);

    const auto& entries = model.params().entries();
    binio::put_u32(head, static_cast<uint32_t>(entries.size()));
    std::vector<uint8_t> payload;
    for (const auto& e : entries) {
        binio::put_string(head, e.name);
        const auto& shape = e.value.shape();
        binio::put_u32(head, static_cast<uint32_t>(shape.size()));
        for (int d : shape) binio::put_u32(head, static_cast<uint32_t>(d));
        for (size_t i = 0; i < e.value.data().size(); ++i)
            binio::put_f32(payload, static_cast<float>(e.value.data().at(i)));
    }

    std::vector<uint8_t> out = std::move(head);
    out.insert(out.end(), payload.begin(), payload.end());
    binio::put_u32(out, binio::crc32(payload.data(), payload.size()));
    binio::write_file(path, out);
}

namespace {

struct ParsedHeader {
    CheckpointMeta meta;
    std::vector<std::pair<std::string, std::vector<int>>> table;
    size_t payload_offset = 0;
    size_t payload_size = 0;
};

ParsedHeader parse_header(const std::vector<uint8_t>& bytes, const std::string& path) {
    binio::Reader r(bytes.data(), bytes.size());
    if (r.u32() != kMagic) throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    ParsedHeader h;
    h.meta.version = r.u32();
    if (h.meta.version != kCheckpointVersion)
        throw VersionError("checkpoint version " + std::to_string(h.meta.version) + " unsupported (loader expects " +
                           std::to_string(kCheckpointVersion) + ")");
    h.meta.config_text = r.string();
    h.meta.stage = static_cast<char>(r.u32());
    h.meta.step = r.u64();
    const uint32_t count = r.u32();
    size_t values = 0;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.string();
        const uint32_t ndim = r.u32();
        std::vector<int> shape;
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<int>(r.u32()));
            numel *= static_cast<size_t>(shape.back());
        }
        values += numel;
        h.table.push_back({std::move(name), std::move(shape)});
    }
    h.payload_offset = r.pos();
    h.payload_size = values * 4;
    if (bytes.size() < h.payload_offset + h.payload_size + 4) throw IoError("truncated checkpoint '" + path + "'");
    return h;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    return parse_header(binio::read_file(path), path).meta;
}

CheckpointMeta load_checkpoint(const std::string& path, Model& model, const std::string* expected_config_text) {
    const std::vector<uint8_t> bytes = binio::read_file(path);
    ParsedHeader h = parse_header(bytes, path);

    binio::Reader crc_r(bytes.data() + h.payload_offset + h.payload_size, 4);
    const uint32_t stored_crc = crc_r.u32();
    const uint32_t actual_crc = binio::crc32(bytes.data() + h.payload_offset, h.payload_size);
    if (stored_crc != actual_crc) throw ChecksumError("checkpoint payload checksum mismatch in '" + path + "'");

    if (expected_config_text && *expected_config_text != h.meta.config_text)
        throw ConfigError("checkpoint config snapshot differs from the loading model's config; refusing to load");

    auto& entries = model.params().entries();
    if (entries.size() != h.table.size())
        throw ShapeError("checkpoint has " + std::to_string(h.table.size()) + " parameters, model expects " +
                         std::to_string(entries.size()));
    binio::Reader pr(bytes.data() + h.payload_offset, h.payload_size);
    for (size_t k = 0; k < entries.size(); ++k) {
        const auto& [name, shape] = h.table[k];
        if (entries[k].name != name)
            throw ShapeError("checkpoint parameter '" + name + "' does not match model parameter '" +
                             entries[k].name + "'");
        if (entries[k].value.shape() != shape)
            throw ShapeError("parameter '" + name + "': checkpoint shape " + shape_to_string(shape) +
                             " vs model shape " + shape_to_string(entries[k].value.shape()));
        Tensor& t = entries[k].value.mutable_data();
        for (size_t i = 0; i < t.size(); ++i) t.at(i) = static_cast<double>(pr.f32());
    }
    return h.meta;
}

}  // namespace bridge
