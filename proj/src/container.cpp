#include "ctxspeech/container.hpp"

#include <cstring>
#include <fstream>

#include "ctxspeech/errors.hpp"

namespace ctxspeech {

namespace {

constexpr char kMagic[4] = {'N', 'T', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (i * 8)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (i * 8)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw InputError("container truncated while reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (i * 8);
    return v;
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) throw InputError("container truncated while reading u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (i * 8);
    return v;
}

} // namespace

void TensorContainer::put(const std::string& name, Tensor t) {
    if (name.empty()) throw InputError("container entry name must be non-empty");
    entries_[name] = std::move(t);
}

const Tensor& TensorContainer::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw InputError("container has no entry named '" + name + "'");
    return it->second;
}

bool TensorContainer::contains(const std::string& name) const {
    return entries_.find(name) != entries_.end();
}

void TensorContainer::save(std::ostream& out) const {
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u64(out, entries_.size());
    for (const auto& [name, tensor] : entries_) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        tensor.save(out);
    }
    if (!out) throw InputError("failed writing tensor container stream");
}

TensorContainer TensorContainer::load(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw InputError("not a tensor container: bad magic");
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw InputError("unsupported container version " + std::to_string(version));
    const std::uint64_t count = read_u64(in);
    TensorContainer c;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(in);
        if (name_len == 0 || name_len > 4096)
            throw InputError("container entry name length " + std::to_string(name_len) +
                             " out of range");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw InputError("container truncated while reading entry name");
        c.entries_[name] = Tensor::load(in);
    }
    return c;
}

void TensorContainer::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    save(out);
}

TensorContainer TensorContainer::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "' for reading");
    return load(in);
}

} // namespace ctxspeech
