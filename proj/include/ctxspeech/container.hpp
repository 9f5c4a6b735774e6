#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

// Ordered name-to-tensor map with a small binary file format, used for model
// checkpoints. Layout: magic "NTC1", u32 version (currently 1), u64 entry
// count, then per entry a u32 name length, the raw name bytes, and the
// tensor in its binary form. All integers little-endian.
class TensorContainer {
public:
    void put(const std::string& name, Tensor t);
    const Tensor& get(const std::string& name) const; // InputError when missing
    bool contains(const std::string& name) const;
    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, Tensor>& entries() const { return entries_; }

    void save(std::ostream& out) const;
    static TensorContainer load(std::istream& in);

    void save_file(const std::string& path) const;
    static TensorContainer load_file(const std::string& path);

private:
    std::map<std::string, Tensor> entries_;
};

} // namespace ctxspeech
