#include "mpo/mpo.hpp"

#include <algorithm>
#include <cmath>

#include "mpo/svd.hpp"

namespace mpo {

std::vector<int64_t> MpoTensorSet::bonds() const {
    std::vector<int64_t> out;
    out.reserve(cores.size() + 1);
    out.push_back(1);
    for (const DenseTensor& core : cores) out.push_back(core.extent(3));
    return out;
}

void MpoTensorSet::validate() const {
    plan.validate();
    if (static_cast<int>(cores.size()) != plan.order())
        throw BondMismatch("core count does not match plan order");
    int64_t prev_bond = 1;
    for (int k = 0; k < order(); ++k) {
        const DenseTensor& core = cores[static_cast<size_t>(k)];
        if (core.rank() != 4) throw BondMismatch("cores must be rank-4");
        if (core.extent(0) != prev_bond)
            throw BondMismatch("adjacent cores disagree on bond " + std::to_string(k));
        if (core.extent(1) != plan.row_factors[static_cast<size_t>(k)] ||
            core.extent(2) != plan.col_factors[static_cast<size_t>(k)])
            throw BondMismatch("core " + std::to_string(k) + " physical extents disagree with plan");
        prev_bond = core.extent(3);
    }
    if (prev_bond != 1) throw BondMismatch("last bond must be 1");
}

int central_index(int order) { return (order + 1) / 2; }

namespace {

// Enumerates non-decreasing factor sequences of `dim` and keeps the one whose
// descending-sorted form is lexicographically smallest (smallest max factor,
// then smallest second-largest, ...).
void search_factors(int64_t remaining, int slots, int64_t min_factor,
                    std::vector<int64_t>& current, std::vector<int64_t>& best) {
    if (slots == 1) {
        if (remaining < min_factor) return;
        current.push_back(remaining);
        std::vector<int64_t> desc = current;
        std::sort(desc.begin(), desc.end(), std::greater<int64_t>());
        if (best.empty()) {
            best = desc;
        } else {
            if (std::lexicographical_compare(desc.begin(), desc.end(), best.begin(), best.end()))
                best = desc;
        }
        current.pop_back();
        return;
    }
    for (int64_t f = min_factor; f <= remaining; ++f) {
        if (remaining % f != 0) continue;
        current.push_back(f);
        search_factors(remaining / f, slots - 1, f, current, best);
        current.pop_back();
    }
}

}  // namespace

std::vector<int64_t> factorize_dims(int64_t dim, int order) {
    if (dim < 1) throw ShapeMismatch("factorize_dims requires dim >= 1");
    if (order < 1) throw ShapeMismatch("factorize_dims requires order >= 1");
    std::vector<int64_t> best, current;
    search_factors(dim, order, 1, current, best);
    std::sort(best.begin(), best.end());
    return best;
}

FactorPlan ascending_plan(int64_t rows, int64_t cols, int order) {
    return FactorPlan{factorize_dims(rows, order), factorize_dims(cols, order)};
}

namespace {

// Positions ordered by distance from the central index, left before right.
std::vector<int> center_out_positions(int order) {
    const int center = central_index(order) - 1;  // 0-based
    std::vector<int> positions;
    positions.push_back(center);
    for (int dist = 1; static_cast<int>(positions.size()) < order; ++dist) {
        if (center - dist >= 0) positions.push_back(center - dist);
        if (center + dist < order) positions.push_back(center + dist);
    }
    return positions;
}

std::vector<int64_t> arrange_center_out(std::vector<int64_t> factors) {
    std::sort(factors.begin(), factors.end(), std::greater<int64_t>());
    const std::vector<int> positions = center_out_positions(static_cast<int>(factors.size()));
    std::vector<int64_t> arranged(factors.size());
    for (size_t k = 0; k < factors.size(); ++k)
        arranged[static_cast<size_t>(positions[k])] = factors[k];
    return arranged;
}

}  // namespace

FactorPlan balanced_plan(int64_t rows, int64_t cols, int order) {
    return FactorPlan{arrange_center_out(factorize_dims(rows, order)),
                      arrange_center_out(factorize_dims(cols, order))};
}

std::vector<int64_t> exact_bond_profile(const FactorPlan& plan) {
    plan.validate();
    const int n = plan.order();
    std::vector<int64_t> site(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k)
        site[static_cast<size_t>(k)] =
            plan.row_factors[static_cast<size_t>(k)] * plan.col_factors[static_cast<size_t>(k)];
    std::vector<int64_t> bonds(static_cast<size_t>(n) + 1, 1);
    int64_t left = 1;
    int64_t right = 1;
    for (int64_t s : site) right *= s;
    for (int k = 1; k < n; ++k) {
        left *= site[static_cast<size_t>(k - 1)];
        right /= site[static_cast<size_t>(k - 1)];
        bonds[static_cast<size_t>(k)] = std::min(left, right);
    }
    return bonds;
}

Decomposition mpo_decompose(const DenseTensor& w, const FactorPlan& plan,
                            std::optional<int64_t> bond_cap) {
    plan.validate();
    if (bond_cap && *bond_cap < 1) throw InvalidCap("bond cap must be >= 1");
    const int n = plan.order();

    const DenseTensor interleaved = interleave(reshape_mixed_radix(w, plan), n);

    std::vector<int64_t> site(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k)
        site[static_cast<size_t>(k)] =
            plan.row_factors[static_cast<size_t>(k)] * plan.col_factors[static_cast<size_t>(k)];

    Decomposition out;
    out.set.plan = plan;
    out.set.cores.reserve(static_cast<size_t>(n));

    int64_t rest = 1;
    for (int64_t s : site) rest *= s;

    DenseTensor carry = reshape(interleaved, {1 * site[0], rest / site[0]});
    int64_t left_bond = 1;
    double discarded_energy = 0.0;

    for (int k = 0; k < n - 1; ++k) {
        const int64_t rows = carry.rows();
        const int64_t cols = carry.cols();
        SvdResult factors = svd(carry);
        const int64_t full = static_cast<int64_t>(factors.singular.size());
        int64_t keep = full;
        if (bond_cap) keep = std::min(keep, *bond_cap);

        std::vector<double> dropped(factors.singular.begin() + keep, factors.singular.end());
        for (double s : dropped) discarded_energy += s * s;
        out.discarded.push_back(std::move(dropped));

        DenseTensor core({rows, keep});
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < keep; ++j) core[i * keep + j] = factors.u[i * full + j];
        out.set.cores.push_back(reshape(core, {left_bond, plan.row_factors[static_cast<size_t>(k)],
                                               plan.col_factors[static_cast<size_t>(k)], keep}));

        // carry = diag(S) V^T restricted to the kept rank.
        DenseTensor next({keep, cols});
        for (int64_t i = 0; i < keep; ++i) {
            const double s = factors.singular[static_cast<size_t>(i)];
            for (int64_t j = 0; j < cols; ++j) next[i * cols + j] = s * factors.v[j * full + i];
        }
        left_bond = keep;
        rest = cols / site[static_cast<size_t>(k + 1)];
        carry = reshape(std::move(next), {keep * site[static_cast<size_t>(k + 1)], rest});
    }

    out.set.cores.push_back(reshape(carry, {left_bond, plan.row_factors.back(),
                                            plan.col_factors.back(), 1}));
    out.error_bound = std::sqrt(discarded_energy);
    return out;
}

DenseTensor mpo_reconstruct(const MpoTensorSet& set) {
    set.validate();
    const int n = set.order();
    const FactorPlan& plan = set.plan;

    // Fold left to right; acc is (prod of visited site dims) x d_k.
    int64_t sites_done = set.cores[0].extent(1) * set.cores[0].extent(2);
    DenseTensor acc = reshape(set.cores[0], {sites_done, set.cores[0].extent(3)});
    for (int k = 1; k < n; ++k) {
        const DenseTensor& core = set.cores[static_cast<size_t>(k)];
        const int64_t s = core.extent(1) * core.extent(2);
        const int64_t d_prev = core.extent(0);
        const int64_t d_next = core.extent(3);
        DenseTensor folded = matmul(acc, reshape(core, {d_prev, s * d_next}));
        sites_done *= s;
        acc = reshape(std::move(folded), {sites_done, d_next});
    }

    std::vector<int64_t> interleaved_shape;
    for (int k = 0; k < n; ++k) {
        interleaved_shape.push_back(plan.row_factors[static_cast<size_t>(k)]);
        interleaved_shape.push_back(plan.col_factors[static_cast<size_t>(k)]);
    }
    const DenseTensor interleaved = reshape(std::move(acc), std::move(interleaved_shape));
    return flatten_mixed_radix(deinterleave(interleaved, n), plan);
}

TruncationResult truncate_bonds(const MpoTensorSet& set, const TruncationLimit& limit) {
    set.validate();
    if (limit.bond_cap && *limit.bond_cap < 1) throw InvalidCap("bond cap must be >= 1");
    if (limit.tolerance && *limit.tolerance < 0.0) throw InvalidCap("tolerance must be >= 0");

    const int n = set.order();
    TruncationResult out;

    // Nothing to do when the cap already holds and no tolerance was requested.
    if (limit.bond_cap && !limit.tolerance) {
        const std::vector<int64_t> current = set.bonds();
        if (*std::max_element(current.begin(), current.end()) <= *limit.bond_cap) {
            out.set = set;
            out.discarded.assign(static_cast<size_t>(std::max(0, n - 1)), {});
            out.error_bound = 0.0;
            return out;
        }
    }

    std::vector<DenseTensor> cores = set.cores;

    // Right-to-left orthogonalization: leave core k with orthonormal rows in
    // its (d_{k-1}) x (s_k d_k) unfolding, absorbing the rest leftward.
    for (int k = n - 1; k >= 1; --k) {
        DenseTensor& core = cores[static_cast<size_t>(k)];
        const int64_t d_prev = core.extent(0);
        const int64_t i_k = core.extent(1), j_k = core.extent(2), d_next = core.extent(3);
        SvdResult factors = svd(reshape(core, {d_prev, i_k * j_k * d_next}));
        const int64_t r = static_cast<int64_t>(factors.singular.size());

        DenseTensor vt({r, i_k * j_k * d_next});
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < i_k * j_k * d_next; ++j)
                vt[i * (i_k * j_k * d_next) + j] = factors.v[j * r + i];
        core = reshape(std::move(vt), {r, i_k, j_k, d_next});

        DenseTensor l({d_prev, r});
        for (int64_t i = 0; i < d_prev; ++i)
            for (int64_t j = 0; j < r; ++j)
                l[i * r + j] = factors.u[i * r + j] * factors.singular[static_cast<size_t>(j)];

        DenseTensor& left = cores[static_cast<size_t>(k - 1)];
        const int64_t lb = left.extent(0), li = left.extent(1), lj = left.extent(2);
        DenseTensor folded = matmul(reshape(left, {lb * li * lj, d_prev}), l);
        left = reshape(std::move(folded), {lb, li, lj, r});
    }

    // Left-to-right truncation sweep. With the right part orthonormal, the
    // singular values at each cut are global, so discarded energies add.
    double discarded_energy = 0.0;
    for (int k = 0; k < n - 1; ++k) {
        DenseTensor& core = cores[static_cast<size_t>(k)];
        const int64_t d_prev = core.extent(0);
        const int64_t i_k = core.extent(1), j_k = core.extent(2), d_next = core.extent(3);
        SvdResult factors = svd(reshape(core, {d_prev * i_k * j_k, d_next}));
        const int64_t full = static_cast<int64_t>(factors.singular.size());

        int64_t keep = full;
        if (limit.bond_cap) keep = std::min(keep, *limit.bond_cap);
        if (limit.tolerance) {
            const double budget = *limit.tolerance * *limit.tolerance;
            double tail = 0.0;
            int64_t tol_keep = full;
            while (tol_keep > 1) {
                const double s = factors.singular[static_cast<size_t>(tol_keep - 1)];
                if (tail + s * s > budget) break;
                tail += s * s;
                --tol_keep;
            }
            keep = std::min(keep, tol_keep);
        }

        std::vector<double> dropped(factors.singular.begin() + keep, factors.singular.end());
        for (double s : dropped) discarded_energy += s * s;
        out.discarded.push_back(std::move(dropped));

        DenseTensor u_kept({d_prev * i_k * j_k, keep});
        for (int64_t i = 0; i < d_prev * i_k * j_k; ++i)
            for (int64_t j = 0; j < keep; ++j) u_kept[i * keep + j] = factors.u[i * full + j];
        core = reshape(std::move(u_kept), {d_prev, i_k, j_k, keep});

        DenseTensor carry({keep, d_next});
        for (int64_t i = 0; i < keep; ++i) {
            const double s = factors.singular[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d_next; ++j) carry[i * d_next + j] = s * factors.v[j * full + i];
        }
        DenseTensor& right = cores[static_cast<size_t>(k + 1)];
        const int64_t ri = right.extent(1), rj = right.extent(2), rd = right.extent(3);
        DenseTensor folded = matmul(carry, reshape(right, {d_next, ri * rj * rd}));
        right = reshape(std::move(folded), {keep, ri, rj, rd});
    }

    out.set.plan = set.plan;
    out.set.cores = std::move(cores);
    out.error_bound = std::sqrt(discarded_energy);
    return out;
}

CentralAuxSplit split_central_aux(const MpoTensorSet& set) {
    set.validate();
    CentralAuxSplit out;
    out.central_pos = central_index(set.order());
    out.central = set.cores[static_cast<size_t>(out.central_pos - 1)];
    for (int k = 0; k < set.order(); ++k)
        if (k != out.central_pos - 1) out.auxiliaries.push_back(set.cores[static_cast<size_t>(k)]);
    return out;
}

std::vector<DenseTensor> assemble_cores(const CentralAuxSplit& split) {
    std::vector<DenseTensor> cores;
    cores.reserve(split.auxiliaries.size() + 1);
    size_t aux = 0;
    const int n = static_cast<int>(split.auxiliaries.size()) + 1;
    for (int k = 1; k <= n; ++k) {
        if (k == split.central_pos)
            cores.push_back(split.central);
        else
            cores.push_back(split.auxiliaries[aux++]);
    }
    return cores;
}

ParamReport param_report(const MpoTensorSet& set) {
    set.validate();
    ParamReport report;
    for (const DenseTensor& core : set.cores) {
        report.per_core_counts.push_back(core.size());
        report.total += core.size();
    }
    report.central_count =
        report.per_core_counts[static_cast<size_t>(central_index(set.order()) - 1)];
    report.central_fraction =
        static_cast<double>(report.central_count) / static_cast<double>(report.total);
    report.dense_count = set.plan.rows() * set.plan.cols();
    report.ratio_to_dense =
        static_cast<double>(report.total) / static_cast<double>(report.dense_count);
    return report;
}

}  // namespace mpo
