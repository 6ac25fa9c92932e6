#include "vssa/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace vssa {

namespace {

constexpr char kMagic[4] = {'V', 'S', 'S', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Bounds-checked little-endian reader: a corrupted file must fail with a
// format error, never run past the buffer.
class Reader {
public:
    Reader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

    void need(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) {
            throw FormatError("checkpoint " + path_ + ": truncated while reading " + std::string(what));
        }
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void floats(float* dst, std::size_t n, const char* what) {
        need(n * 4, what);
        std::memcpy(dst, bytes_.data() + pos_, n * 4);
        pos_ += n * 4;
    }

    bool done() const { return pos_ == bytes_.size(); }
    const std::string& path() const { return path_; }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff) throw std::invalid_argument("checkpoint: tensor name too long: " + t.name);
        if (t.value.rank() > 255) throw std::invalid_argument("checkpoint: tensor rank too large: " + t.name);
        put_u16(out, static_cast<std::uint16_t>(t.name.size()));
        out.append(t.name);
        out.push_back(static_cast<char>(t.value.rank()));
        for (std::int64_t d : t.value.shape) put_u32(out, static_cast<std::uint32_t>(d));
        const std::size_t bytes = static_cast<std::size_t>(t.value.size()) * 4;
        const std::size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, t.value.ptr(), bytes);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw FormatError("checkpoint: short write to " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader r(bytes, path.string());

    const std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw FormatError("checkpoint " + path.string() + ": bad magic (not a checkpoint file)");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32("tensor count");
    if (count > 1u << 20) {
        throw FormatError("checkpoint " + path.string() + ": implausible tensor count " + std::to_string(count));
    }
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        NamedTensor t;
        t.name = r.str(name_len, "name");
        const std::uint8_t rank = r.u8("rank");
        Shape shape;
        std::int64_t elems = 1;
        for (int d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32("dimension");
            if (dim == 0 || elems > (1ll << 31) / std::max<std::int64_t>(1, dim)) {
                throw FormatError("checkpoint " + path.string() + ": implausible shape for tensor '" + t.name + "'");
            }
            shape.push_back(static_cast<std::int64_t>(dim));
            elems *= dim;
        }
        t.value = Tensor<float>::zeros(shape);
        r.floats(t.value.ptr(), static_cast<std::size_t>(t.value.size()), t.name.c_str());
        tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("checkpoint " + path.string() + ": trailing bytes after last tensor");
    return tensors;
}

std::vector<NamedTensor> pack_model(const DetectorModel<float>& model, std::uint32_t iteration, bool with_velocity) {
    std::vector<NamedTensor> out;
    auto meta_it = Tensor<float>::full({1}, static_cast<float>(iteration));
    out.push_back({"__meta.iteration", meta_it});
    const auto& c = model.config();
    auto meta_cfg = Tensor<float>::zeros({9});
    meta_cfg.ptr()[0] = static_cast<float>(c.input_size);
    meta_cfg.ptr()[1] = static_cast<float>(c.width_multiplier);
    meta_cfg.ptr()[2] = static_cast<float>(c.num_classes);
    meta_cfg.ptr()[3] = static_cast<float>(c.attention_hidden);
    meta_cfg.ptr()[4] = static_cast<float>(c.capsule_coarse);
    meta_cfg.ptr()[5] = static_cast<float>(c.capsule_mid);
    meta_cfg.ptr()[6] = static_cast<float>(static_cast<int>(c.orientation));
    meta_cfg.ptr()[7] = static_cast<float>(c.anchor_scale_min);
    meta_cfg.ptr()[8] = static_cast<float>(c.anchor_scale_max);
    out.push_back({"__meta.config", meta_cfg});
    for (const auto& p : model.params().all()) {
        out.push_back({p.name, p.value});
        if (with_velocity && p.velocity.size() > 0) out.push_back({"opt." + p.name, p.velocity});
    }
    return out;
}

namespace {

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

}  // namespace

ModelConfig config_from_checkpoint(const std::vector<NamedTensor>& tensors) {
    const auto* t = find_tensor(tensors, "__meta.config");
    if (!t || t->value.size() != 9) throw FormatError("checkpoint: missing or malformed __meta.config tensor");
    const float* v = t->value.ptr();
    ModelConfig c;
    c.input_size = static_cast<int>(v[0]);
    c.width_multiplier = v[1];
    c.num_classes = static_cast<int>(v[2]);
    c.attention_hidden = static_cast<int>(v[3]);
    c.capsule_coarse = static_cast<int>(v[4]);
    c.capsule_mid = static_cast<int>(v[5]);
    const int orient = static_cast<int>(v[6]);
    if (orient < 0 || orient > 2) throw FormatError("checkpoint: invalid orientation code in __meta.config");
    c.orientation = static_cast<HeadOrientation>(orient);
    c.anchor_scale_min = v[7];
    c.anchor_scale_max = v[8];
    c.validate();
    return c;
}

std::uint32_t iteration_from_checkpoint(const std::vector<NamedTensor>& tensors) {
    const auto* t = find_tensor(tensors, "__meta.iteration");
    if (!t || t->value.size() != 1) throw FormatError("checkpoint: missing __meta.iteration tensor");
    return static_cast<std::uint32_t>(t->value.at(0));
}

void unpack_into_model(DetectorModel<float>& model, const std::vector<NamedTensor>& tensors) {
    std::vector<bool> consumed(tensors.size(), false);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].name.rfind("__meta.", 0) == 0) consumed[i] = true;
    }
    for (auto& p : model.params().all()) {
        const NamedTensor* src = nullptr;
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (tensors[i].name == p.name) {
                src = &tensors[i];
                consumed[i] = true;
                break;
            }
        }
        if (!src) throw FormatError("checkpoint: missing tensor '" + p.name + "'");
        if (src->value.shape != p.value.shape) {
            throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(src->value.shape) +
                              " but the model expects " + shape_str(p.value.shape));
        }
        std::memcpy(p.value.ptr(), src->value.ptr(), static_cast<std::size_t>(p.value.size()) * 4);

        const std::string opt_name = "opt." + p.name;
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (tensors[i].name == opt_name) {
                if (tensors[i].value.shape != p.value.shape) {
                    throw FormatError("checkpoint: tensor '" + opt_name + "' has shape " +
                                      shape_str(tensors[i].value.shape) + " but the parameter is " +
                                      shape_str(p.value.shape));
                }
                p.velocity = Tensor<float>::zeros(p.value.shape);
                std::memcpy(p.velocity.ptr(), tensors[i].value.ptr(),
                            static_cast<std::size_t>(p.velocity.size()) * 4);
                consumed[i] = true;
                break;
            }
        }
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (!consumed[i]) {
            throw FormatError("checkpoint: unexpected tensor '" + tensors[i].name +
                              "' (model/checkpoint configuration mismatch)");
        }
    }
}

}  // namespace vssa
