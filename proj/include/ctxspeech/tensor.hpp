#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ctxspeech {

using TensorId = std::uint64_t;
using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense row-major f64 array. The payload is immutable after construction;
// copies are cheap and share both the payload and the tensor id. Fresh ids are
// only minted when a new value is created (construction, op results, detach).
//
// A dimension of 0 is allowed so that empty segment caches can be ordinary
// tensors of shape [0, D].
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value); // rank 0, one element
    static Tensor from_vec(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const;                 // product of dims
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }

    std::span<const double> data() const;
    const double* ptr() const;
    double item() const; // requires size() == 1

    TensorId id() const { return id_; }
    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    // Same payload, fresh id, no grad flag.
    Tensor detach() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    // little-endian binary form: u32 rank, u32 per dim, f64 payload
    void save(std::ostream& os) const;
    static Tensor load(std::istream& is);
    std::string to_json() const; // {"shape":[...],"data":[...]}

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    TensorId id_ = 0;
    bool requires_grad_ = false;

    static TensorId next_id();
    static std::shared_ptr<const std::vector<double>> hold(std::vector<double>&& v);
};

} // namespace ctxspeech
