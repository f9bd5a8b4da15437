#include "mpo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mpo {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "blob writer assumes a little-endian host; transcode before porting");

struct TensorEntry {
    std::string name;
    std::string role;
    int layer = -1;
    std::vector<int64_t> shape;
    int64_t byte_offset = 0;
    int64_t byte_length = 0;
};

struct Manifest {
    int format_version = kCheckpointFormatVersion;
    std::string kind;
    std::string endianness = "little";
    Json extra;  // kind-specific fields (config, plan, donor depth, ...)
    std::vector<TensorEntry> tensors;
};

class BlobWriter {
public:
    void append(const std::string& name, const DenseTensor& tensor, const std::string& role = "",
                int layer = -1) {
        TensorEntry entry;
        entry.name = name;
        entry.role = role;
        entry.layer = layer;
        entry.shape = tensor.shape();
        entry.byte_offset = static_cast<int64_t>(bytes_.size());
        entry.byte_length = tensor.size() * 8;
        const size_t old = bytes_.size();
        bytes_.resize(old + static_cast<size_t>(entry.byte_length));
        std::memcpy(bytes_.data() + old, tensor.data(), static_cast<size_t>(entry.byte_length));
        entries_.push_back(std::move(entry));
    }

    const std::vector<char>& bytes() const { return bytes_; }
    const std::vector<TensorEntry>& entries() const { return entries_; }

private:
    std::vector<char> bytes_;
    std::vector<TensorEntry> entries_;
};

void write_file_atomic(const fs::path& path, const char* data, size_t length) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(data, static_cast<std::streamsize>(length));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

void save_bundle(const fs::path& dir, const std::string& kind, const Json& extra,
                 const BlobWriter& blob) {
    fs::create_directories(dir);

    Json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["kind"] = kind;
    manifest["endianness"] = "little";
    manifest["index_order"] = "row-major, mixed-radix big-endian on rows and columns";
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
    Json tensors = Json::array();
    for (const TensorEntry& entry : blob.entries()) {
        Json t;
        t["name"] = entry.name;
        t["role"] = entry.role;
        t["layer"] = entry.layer;
        t["shape"] = entry.shape;
        t["byte_offset"] = entry.byte_offset;
        t["byte_length"] = entry.byte_length;
        tensors.push_back(std::move(t));
    }
    manifest["tensors"] = std::move(tensors);

    write_file_atomic(dir / "tensors.bin", blob.bytes().data(), blob.bytes().size());
    const std::string text = manifest.dump(2) + "\n";
    write_file_atomic(dir / "manifest.json", text.data(), text.size());
}

struct LoadedBundle {
    Json manifest;
    std::vector<char> blob;

    const Json& tensor_entry(const std::string& name) const {
        for (const Json& entry : manifest.at("tensors"))
            if (entry.at("name").get<std::string>() == name) return entry;
        throw CorruptManifest("manifest has no tensor named " + name);
    }

    DenseTensor tensor_at(const Json& entry) const {
        std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        const int64_t offset = entry.at("byte_offset").get<int64_t>();
        const int64_t length = entry.at("byte_length").get<int64_t>();
        DenseTensor out{shape};
        if (length != out.size() * 8)
            throw CorruptManifest("tensor " + entry.at("name").get<std::string>() +
                                  " byte length " + std::to_string(length) +
                                  " does not equal 8 x " + std::to_string(out.size()));
        if (offset < 0 || offset + length > static_cast<int64_t>(blob.size()))
            throw CorruptManifest("tensor " + entry.at("name").get<std::string>() +
                                  " spans bytes [" + std::to_string(offset) + ", " +
                                  std::to_string(offset + length) + ") but the blob holds only " +
                                  std::to_string(blob.size()) + " bytes");
        std::memcpy(out.data(), blob.data() + offset, static_cast<size_t>(length));
        return out;
    }

    DenseTensor tensor(const std::string& name) const { return tensor_at(tensor_entry(name)); }
};

LoadedBundle load_bundle(const fs::path& dir, const std::string& expected_kind) {
    LoadedBundle bundle;

    std::ifstream manifest_in(dir / "manifest.json");
    if (!manifest_in) throw IoError("cannot read " + (dir / "manifest.json").string());
    try {
        manifest_in >> bundle.manifest;
    } catch (const std::exception& e) {
        throw CorruptManifest(std::string("manifest is not valid JSON: ") + e.what());
    }

    if (!bundle.manifest.contains("format_version") || !bundle.manifest.contains("tensors") ||
        !bundle.manifest.contains("kind"))
        throw CorruptManifest("manifest is missing required fields");
    const int version = bundle.manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
        throw VersionUnsupported("format version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointFormatVersion) + ")");
    const std::string endianness = bundle.manifest.value("endianness", "little");
    if (endianness != "little")
        throw VersionUnsupported("blob endianness '" + endianness + "' needs transcoding");
    const std::string kind = bundle.manifest.at("kind").get<std::string>();
    if (!expected_kind.empty() && kind != expected_kind)
        throw CorruptManifest("expected a '" + expected_kind + "' checkpoint, found '" + kind + "'");

    std::ifstream blob_in(dir / "tensors.bin", std::ios::binary);
    if (!blob_in) throw IoError("cannot read " + (dir / "tensors.bin").string());
    bundle.blob.assign(std::istreambuf_iterator<char>(blob_in), std::istreambuf_iterator<char>());

    // Validate entries: unique names, sane spans.
    std::vector<std::string> names;
    for (const Json& entry : bundle.manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        for (const std::string& seen : names)
            if (seen == name) throw CorruptManifest("duplicate tensor name " + name);
        names.push_back(name);
        const int64_t offset = entry.at("byte_offset").get<int64_t>();
        const int64_t length = entry.at("byte_length").get<int64_t>();
        if (offset < 0 || length < 0 || offset + length > static_cast<int64_t>(bundle.blob.size()))
            throw CorruptManifest("tensor " + name + " spans bytes [" + std::to_string(offset) +
                                  ", " + std::to_string(offset + length) +
                                  ") but the blob holds only " + std::to_string(bundle.blob.size()) +
                                  " bytes");
    }
    return bundle;
}

Json config_to_json(const ModelConfig& cfg) {
    Json j;
    j["layers"] = cfg.layers;
    j["hidden"] = cfg.hidden;
    j["heads"] = cfg.heads;
    j["d_ff"] = cfg.d_ff;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["mpo_order"] = cfg.mpo_order;
    j["adapter_rank"] = cfg.adapter_rank;
    j["num_groups"] = cfg.num_groups;
    j["use_adapters"] = cfg.use_adapters;
    j["use_sharing"] = cfg.use_sharing;
    return j;
}

ModelConfig config_from_json(const Json& j) {
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.mpo_order = j.at("mpo_order").get<int>();
    cfg.adapter_rank = j.at("adapter_rank").get<int>();
    cfg.num_groups = j.at("num_groups").get<int>();
    cfg.use_adapters = j.at("use_adapters").get<bool>();
    cfg.use_sharing = j.at("use_sharing").get<bool>();
    return cfg;
}

}  // namespace

void save_model(const ToyTransformer& model, const fs::path& dir) {
    BlobWriter blob;
    model.for_each_param([&blob](const std::string& name, const DenseTensor& value) {
        blob.append(name, value);
    });
    Json extra;
    extra["config"] = config_to_json(model.config);
    extra["tied_layers"] = model.tied_layers;
    save_bundle(dir, "model", extra, blob);
}

ToyTransformer load_model(const fs::path& dir) {
    const LoadedBundle bundle = load_bundle(dir, "model");
    ToyTransformer model = build_model_structure(
        config_from_json(bundle.manifest.at("config")),
        bundle.manifest.value("tied_layers", false));
    model.for_each_param([&bundle](const std::string& name, DenseTensor& value) {
        const DenseTensor loaded = bundle.tensor(name);
        if (loaded.shape() != value.shape())
            throw ShapeMismatch("tensor " + name + " has shape " + loaded.shape_string() +
                                " but the model expects " + value.shape_string());
        value = loaded;
    });
    return model;
}

void save_donor(const DonorCheckpoint& donor, const fs::path& dir) {
    BlobWriter blob;
    for (Role role : all_roles()) {
        blob.append(std::string("weight.") + role_name(role), donor.weights.at(role),
                    role_name(role));
        blob.append(std::string("bias.") + role_name(role), donor.biases.at(role),
                    role_name(role));
    }
    blob.append("ln1.gamma", donor.ln1_gamma);
    blob.append("ln1.beta", donor.ln1_beta);
    blob.append("ln2.gamma", donor.ln2_gamma);
    blob.append("ln2.beta", donor.ln2_beta);
    blob.append("token_embedding", donor.token_embedding);
    blob.append("position_embedding", donor.position_embedding);
    blob.append("output_bias", donor.output_bias);

    Json extra;
    extra["donor_depth"] = donor.donor_depth;
    extra["config"] = config_to_json(donor.config);
    save_bundle(dir, "donor", extra, blob);
}

DonorCheckpoint load_donor(const fs::path& dir) {
    const LoadedBundle bundle = load_bundle(dir, "donor");
    DonorCheckpoint donor;
    donor.donor_depth = bundle.manifest.at("donor_depth").get<int>();
    donor.config = config_from_json(bundle.manifest.at("config"));
    for (Role role : all_roles()) {
        donor.weights[role] = bundle.tensor(std::string("weight.") + role_name(role));
        donor.biases[role] = bundle.tensor(std::string("bias.") + role_name(role));
    }
    donor.ln1_gamma = bundle.tensor("ln1.gamma");
    donor.ln1_beta = bundle.tensor("ln1.beta");
    donor.ln2_gamma = bundle.tensor("ln2.gamma");
    donor.ln2_beta = bundle.tensor("ln2.beta");
    donor.token_embedding = bundle.tensor("token_embedding");
    donor.position_embedding = bundle.tensor("position_embedding");
    donor.output_bias = bundle.tensor("output_bias");
    return donor;
}

void save_matrix(const DenseTensor& matrix, const fs::path& dir) {
    if (matrix.rank() != 2) throw RankMismatch("matrix checkpoints hold rank-2 tensors");
    BlobWriter blob;
    blob.append("matrix", matrix);
    save_bundle(dir, "matrix", Json::object(), blob);
}

DenseTensor load_matrix(const fs::path& dir) {
    const LoadedBundle bundle = load_bundle(dir, "matrix");
    DenseTensor matrix = bundle.tensor("matrix");
    if (matrix.rank() != 2) throw ShapeMismatch("matrix checkpoint tensor is not rank-2");
    return matrix;
}

void save_mpo(const MpoTensorSet& set, const fs::path& dir) {
    set.validate();
    BlobWriter blob;
    for (size_t k = 0; k < set.cores.size(); ++k)
        blob.append("core" + std::to_string(k), set.cores[k]);
    Json extra;
    extra["row_factors"] = set.plan.row_factors;
    extra["col_factors"] = set.plan.col_factors;
    extra["bonds"] = set.bonds();
    save_bundle(dir, "mpo", extra, blob);
}

MpoTensorSet load_mpo(const fs::path& dir) {
    const LoadedBundle bundle = load_bundle(dir, "mpo");
    MpoTensorSet set;
    set.plan.row_factors = bundle.manifest.at("row_factors").get<std::vector<int64_t>>();
    set.plan.col_factors = bundle.manifest.at("col_factors").get<std::vector<int64_t>>();
    for (int k = 0; k < set.plan.order(); ++k)
        set.cores.push_back(bundle.tensor("core" + std::to_string(k)));
    set.validate();
    return set;
}

std::string checkpoint_kind(const fs::path& dir) {
    const LoadedBundle bundle = load_bundle(dir, "");
    return bundle.manifest.at("kind").get<std::string>();
}

}  // namespace mpo
