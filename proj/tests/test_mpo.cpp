#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "mpo/mpo.hpp"
#include "test_util.hpp"

using namespace mpo;
using testutil::random_tensor;

namespace {

// Brute-force oracle: enumerate every ordered factorization and return the
// smallest achievable maximum factor.
int64_t min_max_factor_oracle(int64_t dim, int order, int64_t current_max = 1) {
    if (order == 1) return std::max(current_max, dim);
    int64_t best = std::numeric_limits<int64_t>::max();
    for (int64_t f = 1; f <= dim; ++f) {
        if (dim % f != 0) continue;
        best = std::min(best, min_max_factor_oracle(dim / f, order - 1, std::max(current_max, f)));
    }
    return best;
}

int64_t product(const std::vector<int64_t>& xs) {
    int64_t p = 1;
    for (int64_t x : xs) p *= x;
    return p;
}

}  // namespace

TEST_CASE("factorize_dims balanced splits") {
    CHECK(factorize_dims(16, 2) == std::vector<int64_t>{4, 4});
    CHECK(factorize_dims(7, 2) == std::vector<int64_t>{1, 7});
    CHECK(factorize_dims(16, 3) == std::vector<int64_t>{2, 2, 4});
    CHECK(factorize_dims(1, 3) == std::vector<int64_t>{1, 1, 1});
}

TEST_CASE("factorize_dims(768, 5) matches the exhaustive-search oracle") {
    const std::vector<int64_t> got = factorize_dims(768, 5);
    CHECK(product(got) == 768);
    CHECK(std::is_sorted(got.begin(), got.end()));
    const int64_t best_max = min_max_factor_oracle(768, 5);
    CHECK(*std::max_element(got.begin(), got.end()) == best_max);
    CHECK(got == std::vector<int64_t>{3, 4, 4, 4, 4});
}

TEST_CASE("factorize_dims minimizes the tail after the max factor") {
    const std::vector<int64_t> got = factorize_dims(3072, 5);
    CHECK(product(got) == 3072);
    CHECK(*std::max_element(got.begin(), got.end()) == min_max_factor_oracle(3072, 5));
    CHECK(got == std::vector<int64_t>{4, 4, 4, 6, 8});
}

TEST_CASE("balanced_plan puts large factors at the central site") {
    const FactorPlan plan = balanced_plan(768, 3072, 5);
    CHECK(plan.row_factors == std::vector<int64_t>{4, 4, 4, 4, 3});
    CHECK(plan.col_factors == std::vector<int64_t>{4, 6, 8, 4, 4});
    CHECK(plan.rows() == 768);
    CHECK(plan.cols() == 3072);
}

TEST_CASE("exact bond profile matches min of unfolding sizes") {
    const FactorPlan plan{{2, 2, 4}, {2, 2, 4}};
    CHECK(exact_bond_profile(plan) == std::vector<int64_t>{1, 4, 16, 1});
}

TEST_CASE("decompose reconstructs the 4x4 identity exactly") {
    DenseTensor eye({4, 4});
    for (int64_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    const Decomposition result = mpo_decompose(eye, FactorPlan{{2, 2}, {2, 2}});
    CHECK(max_abs_diff(mpo_reconstruct(result.set), eye) < 1e-12);
    CHECK(result.error_bound == 0.0);
}

TEST_CASE("decompose of the zero matrix reconstructs zero exactly") {
    const DenseTensor zero({16, 16});
    const Decomposition result = mpo_decompose(zero, ascending_plan(16, 16, 3));
    const DenseTensor back = mpo_reconstruct(result.set);
    CHECK(max_abs_diff(back, zero) == 0.0);
}

TEST_CASE("decompose of a random 8x12 with plan (2,2,2)/(2,2,3) is exact") {
    std::mt19937_64 rng(41);
    const DenseTensor w = random_tensor({8, 12}, rng);
    const Decomposition result = mpo_decompose(w, FactorPlan{{2, 2, 2}, {2, 2, 3}});
    CHECK(relative_frobenius_error(mpo_reconstruct(result.set), w) < 1e-12);
}

TEST_CASE("decompose-reconstruct inverse property over sizes and orders") {
    std::mt19937_64 rng(43);
    for (int order : {1, 3, 5}) {
        for (int trial = 0; trial < 4; ++trial) {
            std::uniform_int_distribution<int64_t> dim(1, 64);
            const int64_t rows = dim(rng), cols = dim(rng);
            const DenseTensor w = random_tensor({rows, cols}, rng);
            const FactorPlan plan = trial % 2 == 0 ? ascending_plan(rows, cols, order)
                                                   : balanced_plan(rows, cols, order);
            const Decomposition result = mpo_decompose(w, plan);
            CHECK(relative_frobenius_error(mpo_reconstruct(result.set), w) < 1e-10);

            // Bond bound invariant.
            const std::vector<int64_t> profile = exact_bond_profile(plan);
            const std::vector<int64_t> bonds = result.set.bonds();
            for (size_t k = 0; k < bonds.size(); ++k) CHECK(bonds[k] <= profile[k]);
        }
    }
}

TEST_CASE("an n=1 set is just the matrix in a single core") {
    std::mt19937_64 rng(47);
    const DenseTensor w = random_tensor({5, 7}, rng);
    MpoTensorSet set;
    set.plan = FactorPlan{{5}, {7}};
    set.cores.push_back(reshape(w, {1, 5, 7, 1}));
    CHECK(max_abs_diff(mpo_reconstruct(set), w) == 0.0);
}

TEST_CASE("Kronecker product stays exact at bond cap 1") {
    std::mt19937_64 rng(53);
    const DenseTensor a = random_tensor({3, 2}, rng);
    const DenseTensor b = random_tensor({4, 5}, rng);
    // Oracle construction of a (x) b with row index r1*4+r2, col index c1*5+c2.
    DenseTensor kron({12, 10});
    for (int64_t r1 = 0; r1 < 3; ++r1)
        for (int64_t r2 = 0; r2 < 4; ++r2)
            for (int64_t c1 = 0; c1 < 2; ++c1)
                for (int64_t c2 = 0; c2 < 5; ++c2)
                    kron[(r1 * 4 + r2) * 10 + (c1 * 5 + c2)] =
                        a[r1 * 2 + c1] * b[r2 * 5 + c2];

    const Decomposition capped = mpo_decompose(kron, FactorPlan{{3, 4}, {2, 5}}, 1);
    CHECK(relative_frobenius_error(mpo_reconstruct(capped.set), kron) < 1e-10);
    CHECK(capped.set.bonds() == std::vector<int64_t>{1, 1, 1});
}

TEST_CASE("truncate_bonds leaves a satisfied cap unchanged") {
    std::mt19937_64 rng(59);
    const DenseTensor w = random_tensor({8, 8}, rng);
    const Decomposition exact = mpo_decompose(w, ascending_plan(8, 8, 3));
    const std::vector<int64_t> bonds = exact.set.bonds();
    const int64_t cap = *std::max_element(bonds.begin(), bonds.end());

    const TruncationResult result = truncate_bonds(exact.set, TruncationLimit{cap, std::nullopt});
    CHECK(result.error_bound == 0.0);
    for (size_t k = 0; k < exact.set.cores.size(); ++k)
        CHECK(result.set.cores[k].values() == exact.set.cores[k].values());
}

TEST_CASE("rank-1 outer product survives cap 1 with n=1") {
    std::mt19937_64 rng(61);
    const DenseTensor u = random_tensor({6}, rng);
    const DenseTensor v = random_tensor({4}, rng);
    DenseTensor outer({6, 4});
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 4; ++j) outer[i * 4 + j] = u[i] * v[j];
    const Decomposition exact = mpo_decompose(outer, FactorPlan{{6}, {4}});
    const TruncationResult result = truncate_bonds(exact.set, TruncationLimit{1, std::nullopt});
    CHECK(result.error_bound == 0.0);
    CHECK(relative_frobenius_error(mpo_reconstruct(result.set), outer) < 1e-12);
}

TEST_CASE("truncation error bound is sound on a random 32x32") {
    std::mt19937_64 rng(67);
    const DenseTensor w = random_tensor({32, 32}, rng);
    const Decomposition exact = mpo_decompose(w, ascending_plan(32, 32, 3));
    const TruncationResult truncated = truncate_bonds(exact.set, TruncationLimit{2, std::nullopt});
    const std::vector<int64_t> bonds = truncated.set.bonds();
    for (int64_t b : bonds) CHECK(b <= 2);
    const double measured = relative_frobenius_error(mpo_reconstruct(truncated.set), w) *
                            frobenius_norm(w);
    CHECK(measured <= truncated.error_bound + 1e-9 * frobenius_norm(w));
    CHECK(truncated.error_bound > 0.0);
}

TEST_CASE("truncation bound is monotone in the cap and property-sound") {
    std::mt19937_64 rng(71);
    for (int trial = 0; trial < 10; ++trial) {
        std::uniform_int_distribution<int64_t> dim(4, 24);
        const int64_t rows = dim(rng), cols = dim(rng);
        const DenseTensor w = random_tensor({rows, cols}, rng);
        const Decomposition exact = mpo_decompose(w, ascending_plan(rows, cols, 3));

        double previous_bound = std::numeric_limits<double>::infinity();
        for (int64_t cap = 1; cap <= 6; ++cap) {
            const TruncationResult r = truncate_bonds(exact.set, TruncationLimit{cap, std::nullopt});
            const double measured =
                relative_frobenius_error(mpo_reconstruct(r.set), w) * frobenius_norm(w);
            CHECK(measured <= r.error_bound + 1e-9 * frobenius_norm(w));
            CHECK(r.error_bound <= previous_bound + 1e-12 * (1.0 + frobenius_norm(w)));
            previous_bound = r.error_bound;
        }
    }
}

TEST_CASE("tolerance-based truncation respects the per-cut budget") {
    std::mt19937_64 rng(73);
    const DenseTensor w = random_tensor({16, 16}, rng);
    const Decomposition exact = mpo_decompose(w, ascending_plan(16, 16, 3));
    const double tol = 0.5;
    const TruncationResult r =
        truncate_bonds(exact.set, TruncationLimit{std::nullopt, tol});
    for (const std::vector<double>& cut : r.discarded) {
        double energy = 0.0;
        for (double s : cut) energy += s * s;
        CHECK(energy <= tol * tol + 1e-12);
    }
    CHECK_THROWS_AS(truncate_bonds(exact.set, TruncationLimit{0, std::nullopt}), InvalidCap);
}

TEST_CASE("invalid tensor sets are rejected") {
    std::mt19937_64 rng(101);
    const DenseTensor w = random_tensor({8, 8}, rng);
    MpoTensorSet set = mpo_decompose(w, ascending_plan(8, 8, 3)).set;

    MpoTensorSet bad_bond = set;
    bad_bond.cores[1] = DenseTensor({3, 2, 2, 4});  // disagrees with core 0's right bond
    CHECK_THROWS_AS(mpo_reconstruct(bad_bond), BondMismatch);

    MpoTensorSet bad_edge = set;
    bad_edge.cores.back() = DenseTensor({bad_edge.cores.back().extent(0), 2, 2, 2});
    CHECK_THROWS_AS(bad_edge.validate(), BondMismatch);
}

TEST_CASE("split_central_aux picks the middle core") {
    std::mt19937_64 rng(79);
    for (const auto& [order, want_central] : {std::pair<int, int>{5, 3}, {3, 2}, {1, 1}, {4, 2}}) {
        const int64_t dim = 1 << order;
        const DenseTensor w = random_tensor({dim, dim}, rng);
        const Decomposition d = mpo_decompose(w, ascending_plan(dim, dim, order));
        const CentralAuxSplit split = split_central_aux(d.set);
        CHECK(split.central_pos == want_central);
        CHECK(static_cast<int>(split.auxiliaries.size()) == order - 1);

        // Reassembly reproduces the source set exactly.
        const std::vector<DenseTensor> cores = assemble_cores(split);
        REQUIRE(cores.size() == d.set.cores.size());
        for (size_t k = 0; k < cores.size(); ++k)
            CHECK(cores[k].values() == d.set.cores[k].values());
    }
}

TEST_CASE("param_report matches the hand-checked 16x16 example") {
    std::mt19937_64 rng(83);
    const DenseTensor w = random_tensor({16, 16}, rng);
    const Decomposition d = mpo_decompose(w, FactorPlan{{2, 2, 4}, {2, 2, 4}});
    CHECK(d.set.bonds() == std::vector<int64_t>{1, 4, 16, 1});
    const ParamReport report = param_report(d.set);
    CHECK(report.per_core_counts == std::vector<int64_t>{16, 256, 256});
    CHECK(report.total == 528);
    CHECK(report.central_count == 256);
    CHECK(report.central_fraction == doctest::Approx(256.0 / 528.0).epsilon(1e-15));
    CHECK(report.dense_count == 256);
}

TEST_CASE("n=1 report has central fraction one") {
    std::mt19937_64 rng(89);
    const DenseTensor w = random_tensor({6, 9}, rng);
    const Decomposition d = mpo_decompose(w, ascending_plan(6, 9, 1));
    CHECK(param_report(d.set).central_fraction == 1.0);
}

TEST_CASE("central dominance of balanced plans via the counting oracle") {
    // Counting oracle: totals from the structural bond profile alone.
    const auto oracle = [](const FactorPlan& plan) {
        const std::vector<int64_t> bonds = exact_bond_profile(plan);
        int64_t total = 0;
        std::vector<int64_t> per_core;
        for (int k = 0; k < plan.order(); ++k) {
            const int64_t count = bonds[static_cast<size_t>(k)] *
                                  plan.row_factors[static_cast<size_t>(k)] *
                                  plan.col_factors[static_cast<size_t>(k)] *
                                  bonds[static_cast<size_t>(k) + 1];
            per_core.push_back(count);
            total += count;
        }
        return std::pair{per_core, total};
    };

    std::mt19937_64 rng(97);
    const FactorPlan plan = balanced_plan(64, 256, 5);
    const DenseTensor w = random_tensor({64, 256}, rng);
    const ParamReport report = param_report(mpo_decompose(w, plan).set);
    const auto [per_core, total] = oracle(plan);
    CHECK(report.per_core_counts == per_core);
    CHECK(report.total == total);
    CHECK(report.central_fraction > 0.85);
}
