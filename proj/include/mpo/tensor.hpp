#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpo/errors.hpp"

namespace mpo {

/// Dense n-dimensional array of doubles in row-major order (last axis fastest).
/// Every extent must be >= 1; rank-0 tensors hold exactly one value.
class DenseTensor {
public:
    DenseTensor() : data_(1, 0.0) {}

    explicit DenseTensor(std::vector<int64_t> shape);
    DenseTensor(std::vector<int64_t> shape, std::vector<double> data);

    static DenseTensor matrix(int64_t rows, int64_t cols) {
        return DenseTensor({rows, cols});
    }
    static DenseTensor scalar(double value) { return DenseTensor({}, {value}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// Element access by multi-index (bounds unchecked beyond size asserts).
    double& at(std::span<const int64_t> idx) { return data_[static_cast<size_t>(offset(idx))]; }
    double at(std::span<const int64_t> idx) const { return data_[static_cast<size_t>(offset(idx))]; }
    double& at(std::initializer_list<int64_t> idx) {
        return at(std::span<const int64_t>(idx.begin(), idx.size()));
    }
    double at(std::initializer_list<int64_t> idx) const {
        return at(std::span<const int64_t>(idx.begin(), idx.size()));
    }

    int64_t rows() const;  // rank-2 only
    int64_t cols() const;  // rank-2 only

    int64_t offset(std::span<const int64_t> idx) const;

    std::string shape_string() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

/// Factorizations of a matrix's two dimensions, one factor pair per tensor core.
struct FactorPlan {
    std::vector<int64_t> row_factors;
    std::vector<int64_t> col_factors;

    int order() const { return static_cast<int>(row_factors.size()); }
    int64_t rows() const;
    int64_t cols() const;
    void validate() const;
};

// ---------------------------------------------------------------------------
// Shape manipulation. All index conventions are big-endian mixed-radix: the
// first factor of a dimension is the most significant digit of its index.
// ---------------------------------------------------------------------------

/// Pure relabeling to a new shape with the same element count and order.
DenseTensor reshape(const DenseTensor& t, std::vector<int64_t> new_shape);

/// (I, J) matrix -> rank-2n tensor with shape (i_1..i_n, j_1..j_n).
DenseTensor reshape_mixed_radix(const DenseTensor& matrix, const FactorPlan& plan);

/// Inverse of reshape_mixed_radix.
DenseTensor flatten_mixed_radix(const DenseTensor& t, const FactorPlan& plan);

/// Copies with axes reordered; out axis a carries in axis perm[a].
DenseTensor permute_axes(const DenseTensor& t, std::span<const int> perm);

/// (i_1..i_n, j_1..j_n) -> (i_1, j_1, i_2, j_2, ..., i_n, j_n).
DenseTensor interleave(const DenseTensor& t, int n);

/// Inverse of interleave.
DenseTensor deinterleave(const DenseTensor& t, int n);

// ---------------------------------------------------------------------------
// Contraction.
// ---------------------------------------------------------------------------

/// Sums over the paired axes; result keeps the free axes of a, then of b,
/// in their original order.
DenseTensor contract(const DenseTensor& a, const DenseTensor& b,
                     std::span<const int> axes_a, std::span<const int> axes_b);

inline DenseTensor contract(const DenseTensor& a, const DenseTensor& b,
                            std::initializer_list<int> axes_a,
                            std::initializer_list<int> axes_b) {
    return contract(a, b, std::span<const int>(axes_a.begin(), axes_a.size()),
                    std::span<const int>(axes_b.begin(), axes_b.size()));
}

/// Rank-2 fast path: (M,K) x (K,N) -> (M,N).
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);

/// dst += alpha * src over raw values; shapes must match.
void add_scaled(DenseTensor& dst, double alpha, const DenseTensor& src);

void scale_inplace(DenseTensor& t, double alpha);

double frobenius_norm(const DenseTensor& t);
double max_abs_diff(const DenseTensor& a, const DenseTensor& b);
double relative_frobenius_error(const DenseTensor& approx, const DenseTensor& reference);

DenseTensor transpose(const DenseTensor& matrix);

}  // namespace mpo
