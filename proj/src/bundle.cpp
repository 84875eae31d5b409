#include "ppmn/bundle.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <set>

#include "ppmn/config_io.hpp"
#include "ppmn/errors.hpp"

namespace fs = std::filesystem;

namespace ppmn {

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 1; }
std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "u8"; }

namespace {

DType dtype_from_name(const std::string& s, const std::string& tensor) {
    if (s == "f32") return DType::f32;
    if (s == "u8") return DType::u8;
    throw FormatError("tensor '" + tensor + "': unknown dtype '" + s + "'");
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

std::vector<std::uint8_t> read_file(const fs::path& path, const std::string& tensor) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("tensor '" + tensor + "': missing payload file '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("missing file '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    const std::string text = j.dump(2) + "\n";
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

BundleTensor BundleTensor::from_f32(std::string name, Shape shape, std::span<const float> values) {
    if (numel(shape) != values.size()) throw DimensionError("bundle tensor '" + name + "': shape/data mismatch");
    BundleTensor t{std::move(name), DType::f32, std::move(shape), {}};
    t.bytes.resize(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (std::size_t b = 0; b < 4; ++b) t.bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return t;
}

BundleTensor BundleTensor::from_u8(std::string name, Shape shape, std::span<const std::uint8_t> values) {
    if (numel(shape) != values.size()) throw DimensionError("bundle tensor '" + name + "': shape/data mismatch");
    return {std::move(name), DType::u8, std::move(shape), {values.begin(), values.end()}};
}

std::vector<float> BundleTensor::as_f32() const {
    if (dtype != DType::f32) throw FormatError("tensor '" + name + "': expected f32, found " + dtype_name(dtype));
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

const BundleTensor& TensorBundle::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t;
    }
    throw FormatError("bundle has no tensor named '" + name + "'");
}

void write_bundle(const TensorBundle& bundle, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json manifest = bundle.extra.is_object() ? bundle.extra : nlohmann::json::object();
    manifest["version"] = 1;
    manifest["annotations"] = bundle.annotations;
    nlohmann::json entries = nlohmann::json::array();
    std::set<std::string> names;
    for (const auto& t : bundle.tensors) {
        if (!names.insert(t.name).second) throw FormatError("duplicate tensor name '" + t.name + "'");
        if (t.bytes.size() != numel(t.shape) * dtype_size(t.dtype)) {
            throw FormatError("tensor '" + t.name + "': payload size does not match shape " + shape_str(t.shape));
        }
        const std::string file = t.name + ".bin";
        write_file(dir / file, t.bytes);
        entries.push_back({{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"file", file}});
    }
    manifest["tensors"] = std::move(entries);
    write_json(dir / kManifestName, manifest);
}

TensorBundle read_bundle(const fs::path& dir) {
    const nlohmann::json manifest = read_json(dir / kManifestName);
    TensorBundle b;
    try {
        if (manifest.at("version").get<int>() != 1) throw FormatError("unsupported bundle version in '" + dir.string() + "'");
        std::set<std::string> names;
        for (const auto& e : manifest.at("tensors")) {
            BundleTensor t;
            t.name = e.at("name").get<std::string>();
            if (!names.insert(t.name).second) throw FormatError("duplicate tensor name '" + t.name + "'");
            t.dtype = dtype_from_name(e.at("dtype").get<std::string>(), t.name);
            t.shape = e.at("shape").get<Shape>();
            const auto file = e.at("file").get<std::string>();
            if (file.empty() || fs::path(file).has_parent_path()) {
                throw FormatError("tensor '" + t.name + "': payload file must be a plain file name");
            }
            t.bytes = read_file(dir / file, t.name);
            const std::size_t expected = numel(t.shape) * dtype_size(t.dtype);
            if (t.bytes.size() != expected) {
                throw FormatError("tensor '" + t.name + "': payload has " + std::to_string(t.bytes.size()) +
                                  " bytes, shape " + shape_str(t.shape) + " needs " + std::to_string(expected));
            }
            b.tensors.push_back(std::move(t));
        }
        b.annotations = manifest.value("annotations", nlohmann::json::array());
        for (const auto& [key, value] : manifest.items()) {
            if (key != "version" && key != "tensors" && key != "annotations") b.extra[key] = value;
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest in '" + dir.string() + "': " + e.what());
    }
    return b;
}

TensorBundle sample_to_bundle(const Sample& s) {
    TensorBundle b;
    b.tensors.push_back(BundleTensor::from_f32("visual", {s.height, s.width, s.visual_dim}, s.visual));
    b.tensors.push_back(BundleTensor::from_f32("phrases", {s.num_phrases(), s.phrase_dim}, s.phrases));
    b.tensors.push_back(BundleTensor::from_f32("words", {s.num_words(), s.phrase_dim}, s.words));
    b.tensors.push_back(BundleTensor::from_u8("masks", {s.num_phrases(), s.height, s.width}, s.truth.masks));
    b.tensors.push_back(BundleTensor::from_u8("segments", {s.height, s.width}, s.segments));
    for (const auto& a : s.annotations) {
        b.annotations.push_back({{"id", a.id},
                                 {"class", a.class_id},
                                 {"grounded", a.grounded},
                                 {"plurality", to_string(a.plurality)},
                                 {"category", to_string(a.category)},
                                 {"word_span", a.word_span},
                                 {"instances", a.instances}});
    }
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : s.segment_info) {
        segs.push_back({{"id", seg.id}, {"class", seg.class_id}, {"category", to_string(seg.category)}});
    }
    b.extra["segments"] = std::move(segs);
    return b;
}

Sample sample_from_bundle(const TensorBundle& b) {
    Sample s;
    const auto& visual = b.get("visual");
    const auto& phrases = b.get("phrases");
    const auto& words = b.get("words");
    const auto& masks = b.get("masks");
    const auto& segments = b.get("segments");
    if (visual.shape.size() != 3 || phrases.shape.size() != 2 || words.shape.size() != 2 || masks.shape.size() != 3 ||
        segments.shape.size() != 2) {
        throw FormatError("sample bundle: unexpected tensor ranks");
    }
    s.height = visual.shape[0];
    s.width = visual.shape[1];
    s.visual_dim = visual.shape[2];
    s.phrase_dim = phrases.shape[1];
    const std::size_t n = phrases.shape[0];
    if (words.shape[1] != s.phrase_dim || masks.shape != Shape{n, s.height, s.width} ||
        segments.shape != Shape{s.height, s.width}) {
        throw FormatError("sample bundle: tensor shapes disagree");
    }
    if (masks.dtype != DType::u8 || segments.dtype != DType::u8) throw FormatError("sample bundle: masks must be u8");
    s.visual = visual.as_f32();
    s.phrases = phrases.as_f32();
    s.words = words.as_f32();
    s.segments = segments.bytes;
    try {
        for (const auto& seg : b.extra.at("segments")) {
            s.segment_info.push_back({seg.at("id").get<std::uint32_t>(), seg.at("class").get<std::uint32_t>(),
                                      category_from_string(seg.at("category").get<std::string>())});
        }
        if (b.annotations.size() != n) throw FormatError("sample bundle: annotation count differs from phrase count");
        for (const auto& j : b.annotations) {
            PhraseAnnotation a;
            a.id = j.at("id").get<std::uint32_t>();
            a.class_id = j.at("class").get<std::uint32_t>();
            a.grounded = j.at("grounded").get<bool>();
            a.plurality = plurality_from_string(j.at("plurality").get<std::string>());
            a.category = category_from_string(j.at("category").get<std::string>());
            a.word_span = j.at("word_span").get<std::vector<std::uint32_t>>();
            a.instances = j.at("instances").get<std::vector<std::uint32_t>>();
            s.annotations.push_back(std::move(a));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("sample bundle: malformed annotations: ") + e.what());
    }
    s.truth.phrases = n;
    s.truth.height = s.height;
    s.truth.width = s.width;
    s.truth.masks = masks.bytes;
    for (const auto& a : s.annotations) {
        s.truth.valid.push_back(a.grounded);
        s.truth.category.push_back(a.category);
        s.truth.plurality.push_back(a.plurality);
    }
    s.truth.validate();
    return s;
}

TensorBundle params_to_bundle(const ModelParams<float>& p) {
    TensorBundle b;
    p.visit([&](const std::string& name, const Tensor<float>& t) {
        b.tensors.push_back(BundleTensor::from_f32(name, t.shape(), t.data()));
    });
    b.extra["config"] = to_json(p.config);
    return b;
}

ModelParams<float> params_from_bundle(const TensorBundle& b, bool requires_grad) {
    if (!b.extra.contains("config")) throw FormatError("checkpoint bundle: missing config block");
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(b.extra.at("config"));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint bundle: ") + e.what());
    }
    const auto layout = parameter_layout(cfg);
    if (b.tensors.size() != layout.size()) {
        throw FormatError("checkpoint bundle: " + std::to_string(b.tensors.size()) + " tensors, config implies " +
                          std::to_string(layout.size()));
    }
    ModelParams<float> p = init_params<float>(cfg, 0);
    std::size_t k = 0;
    p.visit([&](const std::string& name, Tensor<float>& t) {
        const auto& entry = b.get(name);
        if (entry.shape != layout[k].second) {
            throw FormatError("tensor '" + name + "': shape " + shape_str(entry.shape) + " does not match config " +
                              shape_str(layout[k].second));
        }
        t = Tensor<float>::from(entry.shape, entry.as_f32(), requires_grad);
        ++k;
    });
    return p;
}

void write_sample(const Sample& s, const fs::path& dir) { write_bundle(sample_to_bundle(s), dir); }
Sample read_sample(const fs::path& dir) { return sample_from_bundle(read_bundle(dir)); }
void write_checkpoint(const ModelParams<float>& p, const fs::path& dir) { write_bundle(params_to_bundle(p), dir); }
ModelParams<float> read_checkpoint(const fs::path& dir) { return params_from_bundle(read_bundle(dir)); }

void write_dataset(std::span<const Sample> samples, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json index = {{"version", 1}, {"samples", nlohmann::json::array()}};
    char name[32];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::snprintf(name, sizeof(name), "sample_%05zu", i);
        write_sample(samples[i], dir / name);
        index["samples"].push_back(name);
    }
    write_json(dir / "index.json", index);
}

std::vector<Sample> read_dataset(const fs::path& dir) {
    const auto index = read_json(dir / "index.json");
    std::vector<Sample> out;
    try {
        if (index.at("version").get<int>() != 1) throw FormatError("unsupported dataset index version");
        for (const auto& rel : index.at("samples")) out.push_back(read_sample(dir / rel.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed dataset index in '" + dir.string() + "': " + e.what());
    }
    return out;
}

}  // namespace ppmn
