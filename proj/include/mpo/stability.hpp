#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpo/transformer.hpp"

namespace mpo {

/// The scalar Post-LN chain: x_{l+1} = (1 + theta_l)/sqrt(1 + theta_l^2) * x_l
/// with theta_l = u_l * c * v_l and a single shared c.
struct ScalarChain {
    int depth = 1;
    std::vector<double> u;
    std::vector<double> v;
    double c = 1.0;
    double x = 1.0;
    double y = 0.0;
    double eta = 1e-3;

    double theta(int l) const { return u[static_cast<size_t>(l)] * c * v[static_cast<size_t>(l)]; }
};

/// Chain multiplier (1 + theta)/sqrt(1 + theta^2); overflow-safe.
double chain_multiplier(double theta);
double chain_multiplier_derivative(double theta);

double scalar_forward(const ScalarChain& chain);

struct ScalarGrads {
    std::vector<double> du;
    std::vector<double> dv;
    double dc = 0.0;  // accumulated over layers
};

/// Analytic gradients of L = 1/2 (F - y)^2 w.r.t. every u_l, v_l and the
/// shared c.
ScalarGrads scalar_gradients(const ScalarChain& chain);

/// One SGD step on a copy (u, v and shared c all updated); returns
/// |F_after - F_before|.
double scalar_update_norm(const ScalarChain& chain);

enum class Scheme { Unit, Scaled };
std::string scheme_name(Scheme scheme);

struct SweepRecord {
    int depth = 0;
    Scheme scheme = Scheme::Unit;
    double delta_f = 0.0;
    std::vector<double> theta;
};

struct SweepResult {
    std::vector<SweepRecord> records;
};

/// The update-bound scaling product (v^2 + u^2)(u_N v_N) evaluated at
/// u = v = (2N)^(-1/4); equals 1/N in exact arithmetic, which is what makes
/// the damped scheme's per-layer updates sum to a depth-independent total.
double scaling_bound_product(int depth);

/// Scalar chains per depth: scaled scheme sets u = v = (2N)^(-1/4), unit
/// scheme sets u = v = 1; c starts at central_value everywhere.
SweepResult depth_sweep(const std::vector<int>& depths, Scheme scheme, double eta,
                        double central_value, double x = 1.0, double y = 0.0);

/// Builds toy transformers at the given configs (scaled or plain Xavier) and
/// measures model_update_norm on a fixed seeded masked batch.
SweepResult transformer_depth_sweep(const std::vector<ModelConfig>& configs, Scheme scheme,
                                    double eta, uint64_t seed);

ModelConfig sweep_model_config(int depth);

}  // namespace mpo
