#include "mpo/init.hpp"

#include <cmath>

#include "mpo/rng.hpp"

namespace mpo {

double scaling_coefficient(int layers) {
    if (layers < 1) throw ShapeMismatch("scaling_coefficient requires L >= 1");
    return std::pow(2.0 * static_cast<double>(layers), -0.25);
}

void xavier_fill(DenseTensor& core, int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (int64_t i = 0; i < core.size(); ++i) core[i] = rng.uniform(-limit, limit);
}

namespace {

void xavier_fill_core(DenseTensor& core, Rng& rng) {
    // Core unfolding (d_{k-1} i_k) x (j_k d_k).
    xavier_fill(core, core.extent(0) * core.extent(1), core.extent(2) * core.extent(3), rng);
}

void gaussian_fill(DenseTensor& t, double sigma, Rng& rng) {
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian(0.0, sigma);
}

void init_adapter(MpoLinear& linear, Rng& rng) {
    if (!linear.adapter) return;
    for (int64_t i = 0; i < linear.adapter->u.size(); ++i) linear.adapter->u[i] = 0.0;
    gaussian_fill(linear.adapter->d, kAdapterInitSigma, rng);
}

void init_embeddings(ToyTransformer& model, Rng& rng) {
    gaussian_fill(model.token_embedding, kEmbeddingInitSigma, rng);
    gaussian_fill(model.position_embedding, kEmbeddingInitSigma, rng);
    // output_bias and linear biases stay zero.
}

}  // namespace

std::map<Role, CentralAuxSplit> decompose_donor(const DonorCheckpoint& donor, int mpo_order) {
    std::map<Role, CentralAuxSplit> out;
    for (const auto& [role, weight] : donor.weights) {
        const FactorPlan plan = balanced_plan(weight.rows(), weight.cols(), mpo_order);
        out[role] = split_central_aux(mpo_decompose(weight, plan).set);
    }
    return out;
}

ToyTransformer init_from_donor(const DonorCheckpoint& donor, const ModelConfig& config,
                               ExtendMode extend, uint64_t seed) {
    config.validate();
    if (donor.config.hidden != config.hidden || donor.config.d_ff != config.d_ff ||
        donor.config.vocab_size != config.vocab_size ||
        donor.config.max_seq_len != config.max_seq_len)
        throw ShapeMismatch("donor dimensions do not match the target config");

    ToyTransformer model = build_model_structure(config);
    const std::map<Role, CentralAuxSplit> splits = decompose_donor(donor, config.mpo_order);
    const double coeff = scaling_coefficient(config.layers);

    for (Role role : all_roles()) {
        const CentralAuxSplit& split = splits.at(role);
        for (int g = 0; g < config.effective_groups(); ++g)
            model.store.central_mut(CentralKey{role, g}) = split.central;
    }

    Rng adapter_rng = Rng::fork(seed, 0x61646170);
    Rng extend_rng = Rng::fork(seed, 0x65787464);
    for (int l = 0; l < config.layers; ++l) {
        TransformerLayer& layer = model.layers[static_cast<size_t>(l)];
        const bool copy_branch = (l + 1) <= donor.donor_depth;  // Algorithm line: 0 < l <= D_d
        for (Role role : all_roles()) {
            MpoLinear& linear = layer.linear(role);
            const CentralAuxSplit& split = splits.at(role);
            if (copy_branch) {
                linear.aux = split.auxiliaries;
            } else if (extend == ExtendMode::ScaledDonor) {
                linear.aux = split.auxiliaries;
                for (DenseTensor& core : linear.aux) scale_inplace(core, coeff);
            } else {
                for (DenseTensor& core : linear.aux) {
                    xavier_fill_core(core, extend_rng);
                    scale_inplace(core, coeff);
                }
            }
            linear.bias = donor.biases.at(role);
            init_adapter(linear, adapter_rng);
        }
        layer.ln1.gamma = donor.ln1_gamma;
        layer.ln1.beta = donor.ln1_beta;
        layer.ln2.gamma = donor.ln2_gamma;
        layer.ln2.beta = donor.ln2_beta;
    }

    model.token_embedding = donor.token_embedding;
    model.position_embedding = donor.position_embedding;
    model.output_bias = donor.output_bias;
    return model;
}

ToyTransformer xavier_init(const ModelConfig& config, uint64_t seed, bool depth_scale,
                           bool scale_central) {
    config.validate();
    ToyTransformer model = build_model_structure(config);
    const double coeff = depth_scale ? scaling_coefficient(config.layers) : 1.0;

    Rng central_rng = Rng::fork(seed, 0x636e7472);
    for (auto& [key, central] : model.store.entries_mut()) {
        xavier_fill_core(central, central_rng);
        if (depth_scale && scale_central) scale_inplace(central, coeff);
    }

    Rng layer_rng = Rng::fork(seed, 0x6c617972);
    for (TransformerLayer& layer : model.layers) {
        for (Role role : all_roles()) {
            MpoLinear& linear = layer.linear(role);
            for (DenseTensor& core : linear.aux) {
                xavier_fill_core(core, layer_rng);
                scale_inplace(core, coeff);
            }
            init_adapter(linear, layer_rng);
        }
    }

    Rng emb_rng = Rng::fork(seed, 0x656d6264);
    init_embeddings(model, emb_rng);
    return model;
}

}  // namespace mpo
