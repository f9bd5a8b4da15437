#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpo/stability.hpp"
#include "test_util.hpp"

using namespace mpo;

namespace {

ScalarChain random_chain(int depth, uint64_t seed, double amplitude = 0.6) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.1, amplitude);
    ScalarChain chain;
    chain.depth = depth;
    for (int l = 0; l < depth; ++l) {
        chain.u.push_back(dist(rng));
        chain.v.push_back(dist(rng));
    }
    chain.c = dist(rng);
    chain.x = 1.0;
    chain.y = 0.0;
    chain.eta = 1e-3;
    return chain;
}

}  // namespace

TEST_CASE("scalar forward with zero weights is the identity") {
    ScalarChain chain;
    chain.depth = 5;
    chain.u.assign(5, 0.0);
    chain.v.assign(5, 1.0);
    chain.c = 1.0;
    chain.x = 3.25;
    CHECK(scalar_forward(chain) == 3.25);
}

TEST_CASE("single layer with theta=1 multiplies by sqrt(2)") {
    ScalarChain chain;
    chain.depth = 1;
    chain.u = {1.0};
    chain.v = {1.0};
    chain.c = 1.0;
    chain.x = 2.0;
    CHECK(scalar_forward(chain) == doctest::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("scalar forward matches the product-of-multipliers oracle") {
    const ScalarChain chain = random_chain(3, 7);
    double expected = chain.x;
    for (int l = 0; l < 3; ++l) {
        const double theta = chain.u[static_cast<size_t>(l)] * chain.c * chain.v[static_cast<size_t>(l)];
        expected *= (1.0 + theta) / std::sqrt(1.0 + theta * theta);
    }
    CHECK(scalar_forward(chain) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("chain multiplier stays within (-sqrt(2), sqrt(2)] and survives overflow") {
    for (double theta : {-1e308, -1e160, -5.0, -1.0, 0.0, 0.3, 1.0, 7.0, 1e160, 1e308}) {
        const double m = chain_multiplier(theta);
        CHECK(m > -std::sqrt(2.0));
        CHECK(m <= std::sqrt(2.0) + 1e-15);
        CHECK(std::isfinite(m));
    }
    // |F| <= sqrt(2)^N |x|.
    const ScalarChain chain = random_chain(40, 11);
    CHECK(std::abs(scalar_forward(chain)) <= std::pow(std::sqrt(2.0), 40) * std::abs(chain.x));
}

TEST_CASE("eta zero produces zero update") {
    ScalarChain chain = random_chain(6, 13);
    chain.eta = 0.0;
    CHECK(scalar_update_norm(chain) == 0.0);
}

TEST_CASE("shared-c gradient is the sum of per-layer partials") {
    const ScalarChain chain = random_chain(5, 17);
    const ScalarGrads grads = scalar_gradients(chain);

    // Isolate layer l by zeroing every other layer's dependence on c: compute
    // the per-layer partial with a chain whose c only enters layer l. Finite
    // difference per layer: vary theta_l's c-contribution alone.
    double summed = 0.0;
    const double step = 1e-7;
    for (int l = 0; l < chain.depth; ++l) {
        const auto eval = [&](double c_l) {
            double value = chain.x;
            for (int m = 0; m < chain.depth; ++m) {
                const double c_here = (m == l) ? c_l : chain.c;
                const double theta = chain.u[static_cast<size_t>(m)] * c_here *
                                     chain.v[static_cast<size_t>(m)];
                value *= chain_multiplier(theta);
            }
            const double diff = value - chain.y;
            return 0.5 * diff * diff;
        };
        summed += (eval(chain.c + step) - eval(chain.c - step)) / (2.0 * step);
    }
    CHECK(testutil::rel_err(grads.dc, summed) < 1e-6);
}

TEST_CASE("update norm halves when eta halves (first order)") {
    ScalarChain chain = random_chain(4, 19);
    chain.eta = 1e-6;
    const double full = scalar_update_norm(chain);
    chain.eta = 5e-7;
    const double half = scalar_update_norm(chain);
    CHECK(full / half > 1.8);
    CHECK(full / half < 2.2);
}

TEST_CASE("analytic chain gradients match finite differences at 1e-6") {
    ScalarChain chain = random_chain(6, 23);
    const ScalarGrads grads = scalar_gradients(chain);
    const double step = 1e-7;

    const auto loss = [&](const ScalarChain& c) {
        const double diff = scalar_forward(c) - c.y;
        return 0.5 * diff * diff;
    };

    for (int l = 0; l < chain.depth; ++l) {
        ScalarChain plus = chain, minus = chain;
        plus.u[static_cast<size_t>(l)] += step;
        minus.u[static_cast<size_t>(l)] -= step;
        const double fd = (loss(plus) - loss(minus)) / (2.0 * step);
        CHECK(testutil::rel_err(grads.du[static_cast<size_t>(l)], fd) < 1e-6);

        ScalarChain vplus = chain, vminus = chain;
        vplus.v[static_cast<size_t>(l)] += step;
        vminus.v[static_cast<size_t>(l)] -= step;
        const double vfd = (loss(vplus) - loss(vminus)) / (2.0 * step);
        CHECK(testutil::rel_err(grads.dv[static_cast<size_t>(l)], vfd) < 1e-6);
    }
    ScalarChain cplus = chain, cminus = chain;
    cplus.c += step;
    cminus.c -= step;
    const double cfd = (loss(cplus) - loss(cminus)) / (2.0 * step);
    CHECK(testutil::rel_err(grads.dc, cfd) < 1e-6);
}

TEST_CASE("scaling product equals 1/N exactly under the damped choice") {
    for (int depth : {1, 2, 4, 16, 64, 256, 1024}) {
        const double value = scaling_bound_product(depth);
        CHECK(testutil::rel_err(value, 1.0 / depth) < 1e-12);
    }
}

TEST_CASE("depth_sweep records thetas and is deterministic") {
    const std::vector<int> depths{2, 4, 8};
    const SweepResult a = depth_sweep(depths, Scheme::Scaled, 1e-3, 0.5);
    const SweepResult b = depth_sweep(depths, Scheme::Scaled, 1e-3, 0.5);
    REQUIRE(a.records.size() == 3);
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].delta_f == b.records[i].delta_f);
        CHECK(static_cast<int>(a.records[i].theta.size()) == a.records[i].depth);
        // theta = (2N)^(-1/2) * c under the scaled scheme.
        const double want = std::pow(2.0 * a.records[i].depth, -0.5) * 0.5;
        for (double theta : a.records[i].theta)
            CHECK(theta == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("unit-scheme update norms grow with depth") {
    const SweepResult sweep = depth_sweep({2, 4, 8, 16}, Scheme::Unit, 1e-3, 0.5);
    for (size_t i = 1; i < sweep.records.size(); ++i)
        CHECK(sweep.records[i].delta_f > sweep.records[i - 1].delta_f);
}

TEST_CASE("eta zero zeroes the transformer sweep") {
    std::vector<ModelConfig> configs{sweep_model_config(2)};
    const SweepResult sweep = transformer_depth_sweep(configs, Scheme::Scaled, 0.0, 3);
    CHECK(sweep.records[0].delta_f == 0.0);
}

TEST_CASE("transformer sweep is deterministic given seeds") {
    std::vector<ModelConfig> configs{sweep_model_config(2), sweep_model_config(4)};
    const SweepResult a = transformer_depth_sweep(configs, Scheme::Scaled, 1e-3, 5);
    const SweepResult b = transformer_depth_sweep(configs, Scheme::Scaled, 1e-3, 5);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i)
        CHECK(a.records[i].delta_f == b.records[i].delta_f);
    CHECK(a.records[0].delta_f > 0.0);
}
