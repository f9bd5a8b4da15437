#include "mpo/stability.hpp"

#include <cmath>

#include "mpo/init.hpp"
#include "mpo/rng.hpp"

namespace mpo {

double chain_multiplier(double theta) {
    // hypot keeps 1 + theta^2 from overflowing for extreme updates.
    return (1.0 + theta) / std::hypot(1.0, theta);
}

double chain_multiplier_derivative(double theta) {
    const double h = std::hypot(1.0, theta);
    return (1.0 - theta) / (h * h * h);
}

double scalar_forward(const ScalarChain& chain) {
    double value = chain.x;
    for (int l = 0; l < chain.depth; ++l) value *= chain_multiplier(chain.theta(l));
    return value;
}

ScalarGrads scalar_gradients(const ScalarChain& chain) {
    const int n = chain.depth;
    ScalarGrads grads;
    grads.du.assign(static_cast<size_t>(n), 0.0);
    grads.dv.assign(static_cast<size_t>(n), 0.0);

    // prefix[l] = x * prod_{m<l} m(theta_m); suffix[l] = prod_{m>l} m(theta_m).
    std::vector<double> prefix(static_cast<size_t>(n)), suffix(static_cast<size_t>(n));
    double acc = chain.x;
    for (int l = 0; l < n; ++l) {
        prefix[static_cast<size_t>(l)] = acc;
        acc *= chain_multiplier(chain.theta(l));
    }
    const double f = acc;
    acc = 1.0;
    for (int l = n - 1; l >= 0; --l) {
        suffix[static_cast<size_t>(l)] = acc;
        acc *= chain_multiplier(chain.theta(l));
    }

    const double residual = f - chain.y;  // dL/dF for L = 1/2 (F - y)^2
    for (int l = 0; l < n; ++l) {
        const double df_dtheta = prefix[static_cast<size_t>(l)] *
                                 chain_multiplier_derivative(chain.theta(l)) *
                                 suffix[static_cast<size_t>(l)];
        const double dl_dtheta = residual * df_dtheta;
        grads.du[static_cast<size_t>(l)] = dl_dtheta * chain.c * chain.v[static_cast<size_t>(l)];
        grads.dv[static_cast<size_t>(l)] = dl_dtheta * chain.c * chain.u[static_cast<size_t>(l)];
        grads.dc += dl_dtheta * chain.u[static_cast<size_t>(l)] * chain.v[static_cast<size_t>(l)];
    }
    return grads;
}

double scalar_update_norm(const ScalarChain& chain) {
    const double before = scalar_forward(chain);
    const ScalarGrads grads = scalar_gradients(chain);
    ScalarChain stepped = chain;
    for (int l = 0; l < chain.depth; ++l) {
        stepped.u[static_cast<size_t>(l)] -= chain.eta * grads.du[static_cast<size_t>(l)];
        stepped.v[static_cast<size_t>(l)] -= chain.eta * grads.dv[static_cast<size_t>(l)];
    }
    stepped.c -= chain.eta * grads.dc;
    return std::abs(scalar_forward(stepped) - before);
}

std::string scheme_name(Scheme scheme) { return scheme == Scheme::Unit ? "unit" : "scaled"; }

double scaling_bound_product(int depth) {
    const double uv = std::pow(2.0 * static_cast<double>(depth), -0.25);
    return (uv * uv + uv * uv) * (uv * uv);
}

SweepResult depth_sweep(const std::vector<int>& depths, Scheme scheme, double eta,
                        double central_value, double x, double y) {
    SweepResult out;
    for (int depth : depths) {
        ScalarChain chain;
        chain.depth = depth;
        const double uv = scheme == Scheme::Scaled
                              ? std::pow(2.0 * static_cast<double>(depth), -0.25)
                              : 1.0;
        chain.u.assign(static_cast<size_t>(depth), uv);
        chain.v.assign(static_cast<size_t>(depth), uv);
        chain.c = central_value;
        chain.x = x;
        chain.y = y;
        chain.eta = eta;

        SweepRecord record;
        record.depth = depth;
        record.scheme = scheme;
        record.delta_f = scalar_update_norm(chain);
        for (int l = 0; l < depth; ++l) record.theta.push_back(chain.theta(l));
        out.records.push_back(std::move(record));
    }
    return out;
}

namespace {

int64_t mlm_loss_positions(const std::vector<int32_t>& labels) {
    int64_t count = 0;
    for (int32_t label : labels)
        if (label >= 0) count++;
    return count;
}

}  // namespace

ModelConfig sweep_model_config(int depth) {
    ModelConfig cfg;
    cfg.layers = depth;
    cfg.hidden = 32;
    cfg.heads = 2;
    cfg.d_ff = 128;
    cfg.vocab_size = 32;
    cfg.max_seq_len = 16;
    cfg.num_groups = 1;
    return cfg;
}

SweepResult transformer_depth_sweep(const std::vector<ModelConfig>& configs, Scheme scheme,
                                    double eta, uint64_t seed) {
    SweepResult out;
    for (const ModelConfig& cfg : configs) {
        ToyTransformer model = xavier_init(cfg, seed, scheme == Scheme::Scaled);

        // Fixed seeded batch of lexical tokens, masked with the same seed.
        TokenBatch tokens;
        tokens.batch = 4;
        tokens.seq = std::min(8, cfg.max_seq_len);
        Rng rng = Rng::fork(seed, 0x62617463);
        for (int i = 0; i < tokens.batch * tokens.seq; ++i)
            tokens.ids.push_back(kNumSpecialTokens +
                                 static_cast<int32_t>(rng.uniform_int(
                                     static_cast<uint64_t>(cfg.vocab_size - kNumSpecialTokens))));
        MaskResult masked = mlm_mask(tokens, cfg.vocab_size, seed ^ 0x6d61736bull);
        for (uint64_t bump = 1; mlm_loss_positions(masked.labels) == 0; ++bump)
            masked = mlm_mask(tokens, cfg.vocab_size, (seed ^ 0x6d61736bull) + bump);

        SweepRecord record;
        record.depth = cfg.layers;
        record.scheme = scheme;
        record.delta_f = model_update_norm(model, masked.corrupted, masked.labels, eta);
        out.records.push_back(std::move(record));
    }
    return out;
}

}  // namespace mpo
