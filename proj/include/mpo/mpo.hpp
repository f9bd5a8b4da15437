#pragma once

#include <optional>
#include <vector>

#include "mpo/tensor.hpp"

namespace mpo {

/// Tensor-train factorization of a matrix: core k has shape
/// (d_{k-1}, i_k, j_k, d_k) with d_0 = d_n = 1 and adjacent cores agreeing
/// on their shared bond.
struct MpoTensorSet {
    std::vector<DenseTensor> cores;
    FactorPlan plan;

    int order() const { return static_cast<int>(cores.size()); }

    /// Bond extents d_0..d_n read off the cores.
    std::vector<int64_t> bonds() const;

    void validate() const;
};

/// 1-based index of the central core: ceil(n / 2).
int central_index(int order);

/// Factors `dim` into `order` natural numbers minimizing the maximum factor;
/// ties resolved by successively minimizing the next-largest factors.
/// Returned non-decreasing. Deterministic; 1-padding guarantees a result.
std::vector<int64_t> factorize_dims(int64_t dim, int order);

/// Plan with the factorize_dims sequences used in non-decreasing order.
/// This is the on-disk/CLI default ordering.
FactorPlan ascending_plan(int64_t rows, int64_t cols, int order);

/// Plan with each factor list arranged center-out: the largest factor sits at
/// the central index, remaining factors fill positions outward (left before
/// right at equal distance) in descending order. Concentrates bond dimension
/// at the central core, which is what the sharing architecture relies on.
FactorPlan balanced_plan(int64_t rows, int64_t cols, int order);

struct Decomposition {
    MpoTensorSet set;
    /// Singular values dropped at each of the n-1 cuts (empty when exact).
    std::vector<std::vector<double>> discarded;
    /// sqrt(sum of squared discarded singular values) across all cuts.
    double error_bound = 0.0;
};

/// Sequential TT-SVD over the interleaved tensor. Without bond_cap the bonds
/// take their full structural values min(prod left, prod right) and the
/// reconstruction is exact to rounding; with bond_cap every bond is clamped
/// and the discarded spectrum is recorded.
Decomposition mpo_decompose(const DenseTensor& w, const FactorPlan& plan,
                            std::optional<int64_t> bond_cap = std::nullopt);

/// Contracts cores left-to-right over bonds, de-interleaves, and undoes the
/// mixed-radix reshape; returns the (I, J) matrix.
DenseTensor mpo_reconstruct(const MpoTensorSet& set);

struct TruncationLimit {
    std::optional<int64_t> bond_cap;
    /// Per-cut cap on the Frobenius norm of the discarded spectrum.
    std::optional<double> tolerance;
};

struct TruncationResult {
    MpoTensorSet set;
    std::vector<std::vector<double>> discarded;
    double error_bound = 0.0;
};

/// Standard TT rounding: right-to-left orthogonalization, then a left-to-right
/// truncated-SVD sweep. The reported error_bound majorizes the Frobenius error
/// of the reconstruction. A cap already satisfied returns the set unchanged.
TruncationResult truncate_bonds(const MpoTensorSet& set, const TruncationLimit& limit);

struct CentralAuxSplit {
    DenseTensor central;
    std::vector<DenseTensor> auxiliaries;  // the n-1 non-central cores, in order
    int central_pos = 1;                   // 1-based
};

CentralAuxSplit split_central_aux(const MpoTensorSet& set);

/// Reassembles the full core chain from a split.
std::vector<DenseTensor> assemble_cores(const CentralAuxSplit& split);

struct ParamReport {
    std::vector<int64_t> per_core_counts;
    int64_t total = 0;
    int64_t central_count = 0;
    double central_fraction = 0.0;
    int64_t dense_count = 0;
    double ratio_to_dense = 0.0;
};

ParamReport param_report(const MpoTensorSet& set);

/// Structural (untruncated) bond profile for a plan:
/// d_k = min(prod_{m<=k} i_m j_m, prod_{m>k} i_m j_m).
std::vector<int64_t> exact_bond_profile(const FactorPlan& plan);

}  // namespace mpo
