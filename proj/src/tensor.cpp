#include "ctxspeech/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "ctxspeech/errors.hpp"
#include "ctxspeech/memtrack.hpp"

namespace ctxspeech {

namespace {

std::size_t shape_product(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw InputError("tensor load: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw InputError("tensor load: truncated payload");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

const std::vector<double>& empty_payload() {
    static const std::vector<double> e;
    return e;
}

} // namespace

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

TensorId Tensor::next_id() {
    static std::atomic<TensorId> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

std::shared_ptr<const std::vector<double>> Tensor::hold(std::vector<double>&& v) {
    const std::size_t bytes = v.size() * sizeof(double);
    memtrack::add(bytes);
    return std::shared_ptr<const std::vector<double>>(new std::vector<double>(std::move(v)),
                                                      [bytes](const std::vector<double>* p) {
                                                          memtrack::sub(bytes);
                                                          delete p;
                                                      });
}

Tensor Tensor::from_vec(Shape shape, std::vector<double> values) {
    if (shape_product(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = hold(std::move(values));
    t.id_ = next_id();
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> v(shape_product(shape), 0.0);
    return from_vec(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> v(shape_product(shape), value);
    return from_vec(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return from_vec({}, {value}); }

std::size_t Tensor::size() const { return data_ ? data_->size() : 0; }

std::span<const double> Tensor::data() const {
    const std::vector<double>& v = data_ ? *data_ : empty_payload();
    return {v.data(), v.size()};
}

const double* Tensor::ptr() const { return data_ ? data_->data() : nullptr; }

double Tensor::item() const {
    if (size() != 1) throw ContractError("tensor: item() on non-scalar of shape " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    t.id_ = next_id();
    t.requires_grad_ = false;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data())
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::save(std::ostream& os) const {
    write_u32(os, static_cast<std::uint32_t>(rank()));
    for (std::size_t d : shape_) write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : data()) write_f64(os, v);
}

Tensor Tensor::load(std::istream& is) {
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw InputError("tensor load: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = read_u32(is);
    std::vector<double> values(shape_product(shape));
    for (double& v : values) v = read_f64(is);
    return from_vec(std::move(shape), std::move(values));
}

std::string Tensor::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"shape\":[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ",";
        os << shape_[i];
    }
    os << "],\"data\":[";
    auto d = data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (i) os << ",";
        os << d[i];
    }
    os << "]}";
    return os.str();
}

} // namespace ctxspeech
