#include "mpo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mpo {

namespace {

int64_t checked_product(const std::vector<int64_t>& extents) {
    int64_t total = 1;
    for (int64_t e : extents) {
        if (e < 1) throw ShapeMismatch("tensor extents must be >= 1, got " + std::to_string(e));
        total *= e;
    }
    return total;
}

}  // namespace

DenseTensor::DenseTensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(checked_product(shape_)), 0.0) {}

DenseTensor::DenseTensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    const int64_t expected = checked_product(shape_);
    if (expected != static_cast<int64_t>(data_.size()))
        throw ShapeMismatch("data length " + std::to_string(data_.size()) +
                            " does not match shape product " + std::to_string(expected));
}

int64_t DenseTensor::rows() const {
    if (rank() != 2) throw RankMismatch("rows() requires a rank-2 tensor, got rank " +
                                        std::to_string(rank()));
    return shape_[0];
}

int64_t DenseTensor::cols() const {
    if (rank() != 2) throw RankMismatch("cols() requires a rank-2 tensor, got rank " +
                                        std::to_string(rank()));
    return shape_[1];
}

int64_t DenseTensor::offset(std::span<const int64_t> idx) const {
    int64_t off = 0;
    int64_t stride = 1;
    for (int a = rank() - 1; a >= 0; --a) {
        off += idx[static_cast<size_t>(a)] * stride;
        stride *= shape_[static_cast<size_t>(a)];
    }
    return off;
}

std::string DenseTensor::shape_string() const {
    std::ostringstream out;
    out << "(";
    for (size_t a = 0; a < shape_.size(); ++a) out << (a ? "," : "") << shape_[a];
    out << ")";
    return out.str();
}

int64_t FactorPlan::rows() const {
    int64_t p = 1;
    for (int64_t f : row_factors) p *= f;
    return p;
}

int64_t FactorPlan::cols() const {
    int64_t p = 1;
    for (int64_t f : col_factors) p *= f;
    return p;
}

void FactorPlan::validate() const {
    if (row_factors.empty() || row_factors.size() != col_factors.size())
        throw ShapeMismatch("factor plan must pair equally many row and column factors");
    for (int64_t f : row_factors)
        if (f < 1) throw ShapeMismatch("row factor must be >= 1");
    for (int64_t f : col_factors)
        if (f < 1) throw ShapeMismatch("column factor must be >= 1");
}

DenseTensor reshape(const DenseTensor& t, std::vector<int64_t> new_shape) {
    DenseTensor out(std::move(new_shape), t.values());
    if (out.size() != t.size())
        throw ShapeMismatch("reshape must preserve element count");
    return out;
}

DenseTensor reshape_mixed_radix(const DenseTensor& matrix, const FactorPlan& plan) {
    plan.validate();
    if (matrix.rank() != 2)
        throw ShapeMismatch("reshape_mixed_radix expects a rank-2 tensor");
    if (matrix.rows() != plan.rows() || matrix.cols() != plan.cols())
        throw ShapeMismatch("matrix shape " + matrix.shape_string() +
                            " does not match plan products (" + std::to_string(plan.rows()) +
                            "," + std::to_string(plan.cols()) + ")");
    // Big-endian factor order on a row-major layout is a pure relabeling.
    std::vector<int64_t> shape = plan.row_factors;
    shape.insert(shape.end(), plan.col_factors.begin(), plan.col_factors.end());
    return DenseTensor(std::move(shape), matrix.values());
}

DenseTensor flatten_mixed_radix(const DenseTensor& t, const FactorPlan& plan) {
    plan.validate();
    if (t.rank() != 2 * plan.order())
        throw RankMismatch("flatten_mixed_radix expects rank " +
                           std::to_string(2 * plan.order()) + ", got " +
                           std::to_string(t.rank()));
    return DenseTensor({plan.rows(), plan.cols()}, t.values());
}

DenseTensor permute_axes(const DenseTensor& t, std::span<const int> perm) {
    const int r = t.rank();
    if (static_cast<int>(perm.size()) != r)
        throw RankMismatch("permutation length must equal tensor rank");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int a : perm) {
        if (a < 0 || a >= r || seen[static_cast<size_t>(a)])
            throw RankMismatch("invalid axis permutation");
        seen[static_cast<size_t>(a)] = true;
    }
    if (r == 0) return t;

    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int a = r - 2; a >= 0; --a)
        in_strides[static_cast<size_t>(a)] =
            in_strides[static_cast<size_t>(a) + 1] * t.extent(a + 1);

    std::vector<int64_t> out_shape(static_cast<size_t>(r));
    std::vector<int64_t> mapped_stride(static_cast<size_t>(r));
    for (int a = 0; a < r; ++a) {
        out_shape[static_cast<size_t>(a)] = t.extent(perm[static_cast<size_t>(a)]);
        mapped_stride[static_cast<size_t>(a)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(a)])];
    }

    DenseTensor out(out_shape);
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t src = 0;
    const int64_t total = out.size();
    for (int64_t flat = 0; flat < total; ++flat) {
        out[flat] = t[src];
        for (int a = r - 1; a >= 0; --a) {
            idx[static_cast<size_t>(a)]++;
            src += mapped_stride[static_cast<size_t>(a)];
            if (idx[static_cast<size_t>(a)] < out_shape[static_cast<size_t>(a)]) break;
            src -= mapped_stride[static_cast<size_t>(a)] * out_shape[static_cast<size_t>(a)];
            idx[static_cast<size_t>(a)] = 0;
        }
    }
    return out;
}

namespace {

std::vector<int> interleave_perm(int n) {
    std::vector<int> perm(static_cast<size_t>(2 * n));
    for (int k = 0; k < n; ++k) {
        perm[static_cast<size_t>(2 * k)] = k;
        perm[static_cast<size_t>(2 * k + 1)] = n + k;
    }
    return perm;
}

}  // namespace

DenseTensor interleave(const DenseTensor& t, int n) {
    if (n < 1 || t.rank() != 2 * n)
        throw RankMismatch("interleave expects rank 2n, got rank " + std::to_string(t.rank()) +
                           " for n=" + std::to_string(n));
    return permute_axes(t, interleave_perm(n));
}

DenseTensor deinterleave(const DenseTensor& t, int n) {
    if (n < 1 || t.rank() != 2 * n)
        throw RankMismatch("deinterleave expects rank 2n, got rank " + std::to_string(t.rank()) +
                           " for n=" + std::to_string(n));
    const std::vector<int> fwd = interleave_perm(n);
    std::vector<int> inv(fwd.size());
    for (size_t a = 0; a < fwd.size(); ++a) inv[static_cast<size_t>(fwd[a])] = static_cast<int>(a);
    return permute_axes(t, inv);
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw RankMismatch("matmul expects rank-2 tensors");
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ShapeMismatch("matmul inner extents disagree: " + a.shape_string() + " vs " +
                            b.shape_string());
    DenseTensor c({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (int64_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        const double* arow = pa + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

DenseTensor contract(const DenseTensor& a, const DenseTensor& b,
                     std::span<const int> axes_a, std::span<const int> axes_b) {
    if (axes_a.size() != axes_b.size())
        throw AxisMismatch("contract requires equally many axes on both operands");
    for (size_t p = 0; p < axes_a.size(); ++p) {
        const int aa = axes_a[p], ab = axes_b[p];
        if (aa < 0 || aa >= a.rank() || ab < 0 || ab >= b.rank())
            throw AxisMismatch("contraction axis out of range");
        if (a.extent(aa) != b.extent(ab))
            throw AxisMismatch("paired axes have unequal extents: " +
                               std::to_string(a.extent(aa)) + " vs " +
                               std::to_string(b.extent(ab)));
    }

    std::vector<bool> used_a(static_cast<size_t>(a.rank()), false);
    std::vector<bool> used_b(static_cast<size_t>(b.rank()), false);
    for (int x : axes_a) {
        if (used_a[static_cast<size_t>(x)]) throw AxisMismatch("duplicate contraction axis");
        used_a[static_cast<size_t>(x)] = true;
    }
    for (int x : axes_b) {
        if (used_b[static_cast<size_t>(x)]) throw AxisMismatch("duplicate contraction axis");
        used_b[static_cast<size_t>(x)] = true;
    }

    std::vector<int> perm_a, perm_b;
    std::vector<int64_t> out_shape;
    int64_t m = 1, k = 1, n = 1;
    for (int x = 0; x < a.rank(); ++x)
        if (!used_a[static_cast<size_t>(x)]) {
            perm_a.push_back(x);
            out_shape.push_back(a.extent(x));
            m *= a.extent(x);
        }
    for (int x : axes_a) perm_a.push_back(x);
    for (int x : axes_b) {
        perm_b.push_back(x);
        k *= b.extent(x);
    }
    for (int x = 0; x < b.rank(); ++x)
        if (!used_b[static_cast<size_t>(x)]) {
            perm_b.push_back(x);
            out_shape.push_back(b.extent(x));
            n *= b.extent(x);
        }

    const DenseTensor am = reshape(permute_axes(a, perm_a), {m, k});
    const DenseTensor bm = reshape(permute_axes(b, perm_b), {k, n});
    DenseTensor cm = matmul(am, bm);
    return DenseTensor(std::move(out_shape), std::move(cm.values()));
}

void add_scaled(DenseTensor& dst, double alpha, const DenseTensor& src) {
    if (dst.shape() != src.shape())
        throw ShapeMismatch("add_scaled shape mismatch: " + dst.shape_string() + " vs " +
                            src.shape_string());
    double* d = dst.data();
    const double* s = src.data();
    const int64_t total = dst.size();
    for (int64_t i = 0; i < total; ++i) d[i] += alpha * s[i];
}

void scale_inplace(DenseTensor& t, double alpha) {
    for (int64_t i = 0; i < t.size(); ++i) t[i] *= alpha;
}

double frobenius_norm(const DenseTensor& t) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.size(); ++i) acc += t[i] * t[i];
    return std::sqrt(acc);
}

double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape() != b.shape())
        throw ShapeMismatch("max_abs_diff shape mismatch");
    double worst = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

double relative_frobenius_error(const DenseTensor& approx, const DenseTensor& reference) {
    if (approx.shape() != reference.shape())
        throw ShapeMismatch("relative error shape mismatch");
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < approx.size(); ++i) {
        const double d = approx[i] - reference[i];
        num += d * d;
        den += reference[i] * reference[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

DenseTensor transpose(const DenseTensor& matrix) {
    if (matrix.rank() != 2) throw RankMismatch("transpose expects a rank-2 tensor");
    const int perm[2] = {1, 0};
    return permute_axes(matrix, perm);
}

}  // namespace mpo
