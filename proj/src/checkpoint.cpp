// Copyright (c) 2026, The clusterup Authors
// SPDX-License-Identifier: Apache-2.0

#include "clusterup/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "clusterup/error.hpp"

namespace clusterup {

namespace {

using nlohmann::json;

std::string filename_of(const std::string& path) { return std::filesystem::path(path).filename().string(); }

void append_f32(std::string& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float read_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed for '" + path + "'");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingInput, "cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json block_meta(const Block& block) {
    if (const auto* d = std::get_if<DenseFfn>(&block)) return {{"kind", "dense"}, {"h", d->hidden_dim()}};
    const auto& m = std::get<MoeLayer>(block);
    return {{"kind", "moe"},
            {"h", m.experts.front().hidden_dim()},
            {"n_experts", m.num_experts()},
            {"k", m.k},
            {"capacity_factor", std::isfinite(m.capacity_factor) ? json(m.capacity_factor) : json("inf")}};
}

DenseFfn empty_ffn(std::size_t d, std::size_t h) {
    return DenseFfn{Matrix(h, d), std::vector<double>(h, 0.0), Matrix(d, h), std::vector<double>(d, 0.0), Activation::relu};
}

MoeLayer empty_moe(std::size_t d, std::size_t h, std::size_t n, std::size_t k, double cf) {
    MoeLayer layer;
    layer.experts.assign(n, empty_ffn(d, h));
    layer.router = Matrix(n, d);
    layer.k = k;
    layer.capacity_factor = cf;
    return layer;
}

void fill(std::span<double> dst, std::size_t rows, std::size_t cols, const NamedTensor& src) {
    if (src.rows != rows || src.cols != cols || src.values.size() != dst.size())
        throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor '" + src.name + "' has the wrong shape");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(src.values[i]);
}

template <typename View>
void append_views(const std::vector<View>& views, std::vector<NamedTensor>& out) {
    for (const auto& v : views) {
        NamedTensor t{v.name, v.rows, v.cols, {}};
        t.values.reserve(v.values.size());
        for (double x : v.values) t.values.push_back(static_cast<float>(x));
        out.push_back(std::move(t));
    }
}

}  // namespace

const NamedTensor& Checkpoint::tensor(const std::string& name) const {
    for (const NamedTensor& t : tensors)
        if (t.name == name) return t;
    throw Error(ErrorCode::MissingInput, "checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const NamedTensor& t : tensors)
        if (t.name == name) return true;
    return false;
}

json manifest(const Checkpoint& ckpt, const std::string& blob_name) {
    json tensors = json::array();
    std::size_t offset = 0;
    for (const NamedTensor& t : ckpt.tensors) {
        tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
        offset += t.values.size() * 4;
    }
    return {{"format_version", kCheckpointFormatVersion},
            {"kind", ckpt.kind},
            {"dtype", "f32"},
            {"byte_order", "little"},
            {"blob", blob_name},
            {"blob_bytes", offset},
            {"tensors", tensors},
            {"config", ckpt.config},
            {"seeds", ckpt.seeds},
            {"meta", ckpt.meta}};
}

void save_checkpoint(const std::string& stem, const Checkpoint& ckpt) {
    std::string blob;
    for (const NamedTensor& t : ckpt.tensors) {
        if (t.values.size() != t.rows * t.cols)
            throw Error(ErrorCode::ShapeMismatch, "tensor '" + t.name + "' size does not match its shape");
        for (float v : t.values) append_f32(blob, v);
    }
    const std::filesystem::path parent = std::filesystem::path(stem).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    write_file(stem + ".bin", blob);
    write_file(stem + ".json", manifest(ckpt, filename_of(stem) + ".bin").dump(2) + "\n");
}

bool checkpoint_exists(const std::string& stem) {
    return std::filesystem::exists(stem + ".json") && std::filesystem::exists(stem + ".bin");
}

Checkpoint load_checkpoint(const std::string& stem) {
    json m;
    try {
        m = json::parse(read_file(stem + ".json"));
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::Io, stem + ".json: " + e.what());
    }
    try {
        if (m.at("format_version").get<int>() != kCheckpointFormatVersion)
            throw Error(ErrorCode::Io, stem + ".json: unsupported format_version");
        if (m.at("dtype").get<std::string>() != "f32") throw Error(ErrorCode::Io, stem + ".json: unsupported dtype");
        const std::string blob = read_file(stem + ".bin");
        if (blob.size() != m.at("blob_bytes").get<std::size_t>())
            throw Error(ErrorCode::Io, stem + ".bin: length does not match the manifest");

        Checkpoint ckpt;
        ckpt.kind = m.at("kind").get<std::string>();
        ckpt.config = m.at("config");
        ckpt.seeds = m.at("seeds");
        ckpt.meta = m.at("meta");
        const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
        for (const json& t : m.at("tensors")) {
            NamedTensor nt;
            nt.name = t.at("name").get<std::string>();
            nt.rows = t.at("shape").at(0).get<std::size_t>();
            nt.cols = t.at("shape").at(1).get<std::size_t>();
            const auto offset = t.at("offset").get<std::size_t>();
            const std::size_t count = nt.rows * nt.cols;
            if (offset + count * 4 > blob.size()) throw Error(ErrorCode::Io, stem + ": tensor '" + nt.name + "' out of range");
            nt.values.resize(count);
            for (std::size_t i = 0; i < count; ++i) nt.values[i] = read_f32(bytes + offset + 4 * i);
            ckpt.tensors.push_back(std::move(nt));
        }
        return ckpt;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Io, stem + ".json: malformed manifest: " + e.what());
    }
}

Checkpoint model_checkpoint(const ToyModel& model, const TeacherSet* teachers, const std::string& kind) {
    model.validate();
    Checkpoint ckpt;
    ckpt.kind = kind;
    json blocks = json::array();
    for (const Block& b : model.blocks) blocks.push_back(block_meta(b));
    ckpt.meta = {{"input_dim", model.input_dim}, {"n_classes", model.num_classes()}, {"blocks", blocks}};
    append_views(parameter_tensors(model), ckpt.tensors);
    if (teachers) {
        const std::vector<std::size_t> sites = model.moe_sites();
        if (teachers->size() != sites.size()) throw Error(ErrorCode::ShapeMismatch, "one teacher per MoE site required");
        json tmeta = json::array();
        for (std::size_t s = 0; s < sites.size(); ++s) {
            const EmaTeacher& t = (*teachers)[s];
            tmeta.push_back({{"site", sites[s]}, {"beta", t.beta}, {"step_count", t.step_count}});
            append_views(layer_tensors(t.mirror, "teacher.blocks." + std::to_string(sites[s]) + "."), ckpt.tensors);
        }
        ckpt.meta["teachers"] = tmeta;
    }
    return ckpt;
}

ToyModel model_from_checkpoint(const Checkpoint& ckpt) {
    try {
        ToyModel model;
        model.input_dim = ckpt.meta.at("input_dim").get<std::size_t>();
        const auto n_classes = ckpt.meta.at("n_classes").get<std::size_t>();
        for (const json& b : ckpt.meta.at("blocks")) {
            const auto h = b.at("h").get<std::size_t>();
            if (b.at("kind") == "dense") {
                model.blocks.emplace_back(empty_ffn(model.input_dim, h));
            } else {
                const json& cf = b.at("capacity_factor");
                model.blocks.emplace_back(empty_moe(model.input_dim, h, b.at("n_experts").get<std::size_t>(),
                                                    b.at("k").get<std::size_t>(),
                                                    cf.is_string() ? kUnlimitedCapacity : cf.get<double>()));
            }
        }
        model.head = Matrix(n_classes, model.input_dim);
        for (TensorView& v : parameter_tensors(model)) fill(v.values, v.rows, v.cols, ckpt.tensor(v.name));
        model.validate();
        return model;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Io, "malformed model metadata: " + std::string(e.what()));
    }
}

std::optional<TeacherSet> teachers_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("teachers")) return std::nullopt;
    const ToyModel model = model_from_checkpoint(ckpt);
    TeacherSet teachers;
    for (const json& t : ckpt.meta.at("teachers")) {
        const auto site = t.at("site").get<std::size_t>();
        EmaTeacher teacher = make_teacher(model.moe(site), t.at("beta").get<double>());
        teacher.step_count = t.at("step_count").get<std::size_t>();
        for (TensorView& v : layer_tensors(teacher.mirror, "teacher.blocks." + std::to_string(site) + "."))
            fill(v.values, v.rows, v.cols, ckpt.tensor(v.name));
        teachers.push_back(std::move(teacher));
    }
    return teachers;
}

Matrix to_matrix(const NamedTensor& t) {
    Matrix m(t.rows, t.cols);
    for (std::size_t i = 0; i < t.values.size(); ++i) m.values()[i] = static_cast<double>(t.values[i]);
    return m;
}

NamedTensor from_matrix(std::string name, const Matrix& m) {
    NamedTensor t{std::move(name), m.rows(), m.cols(), {}};
    t.values.reserve(m.size());
    for (double v : m.values()) t.values.push_back(static_cast<float>(v));
    return t;
}

Checkpoint bank_checkpoint(const ActivationBank& bank) {
    Checkpoint ckpt;
    ckpt.kind = "activation_bank";
    json sites = json::array();
    for (const auto& [site, x] : bank.per_site) {
        sites.push_back(site);
        ckpt.tensors.push_back(from_matrix("site." + std::to_string(site), x));
    }
    ckpt.meta = {{"token_cap", bank.token_cap}, {"sites", sites}};
    return ckpt;
}

ActivationBank bank_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "activation_bank") throw Error(ErrorCode::InvalidArgument, "checkpoint is not an activation bank");
    ActivationBank bank;
    bank.token_cap = ckpt.meta.at("token_cap").get<std::size_t>();
    for (const json& s : ckpt.meta.at("sites")) {
        const auto site = s.get<std::size_t>();
        bank.per_site.emplace(site, to_matrix(ckpt.tensor("site." + std::to_string(site))));
    }
    return bank;
}

}  // namespace clusterup
