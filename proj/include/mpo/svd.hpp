#pragma once

#include <vector>

#include "mpo/tensor.hpp"

namespace mpo {

/// Thin SVD of a rank-2 tensor: matrix == u * diag(singular) * v^T.
/// singular is non-negative and non-increasing; u and v carry min(rows, cols)
/// orthonormal columns (zero singular values keep their columns).
struct SvdResult {
    DenseTensor u;
    std::vector<double> singular;
    DenseTensor v;
};

SvdResult svd(const DenseTensor& matrix);

}  // namespace mpo
