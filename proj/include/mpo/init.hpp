#pragma once

#include <cstdint>
#include <map>

#include "mpo/rng.hpp"
#include "mpo/transformer.hpp"

namespace mpo {

/// A fully weight-shared donor model: one weight matrix per role used at
/// every layer, plus the depth it was trained at.
struct DonorCheckpoint {
    int donor_depth = 0;
    ModelConfig config;  // config the donor was trained with (layers == donor_depth)
    std::map<Role, DenseTensor> weights;
    std::map<Role, DenseTensor> biases;
    DenseTensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    DenseTensor token_embedding, position_embedding, output_bias;
};

/// Depth-dependent damping (2L)^(-1/4) applied to auxiliary tensors.
double scaling_coefficient(int layers);

/// How to fill layers beyond the donor depth: scale copied donor auxiliaries,
/// or scale freshly drawn Xavier auxiliaries.
enum class ExtendMode { ScaledDonor, ScaledRandom };

/// MPO-decomposes each donor matrix once per role (balanced plans).
std::map<Role, CentralAuxSplit> decompose_donor(const DonorCheckpoint& donor, int mpo_order);

/// Donor-based initialization: shared centrals take the donor central; layers
/// up to the donor depth copy the donor auxiliaries; deeper layers get them
/// scaled by scaling_coefficient(L) (or scaled fresh Xavier draws). Adapters
/// start at u = 0, d ~ N(0, sigma^2). Embeddings, biases and layer norms are
/// copied from the donor.
ToyTransformer init_from_donor(const DonorCheckpoint& donor, const ModelConfig& config,
                               ExtendMode extend, uint64_t seed);

/// Xavier-uniform over each core's (d_{k-1} i_k) x (j_k d_k) unfolding, then
/// auxiliaries multiplied by scaling_coefficient(L); centrals stay unscaled
/// unless scale_central is set. depth_scale=false gives plain Xavier.
ToyTransformer xavier_init(const ModelConfig& config, uint64_t seed, bool depth_scale,
                           bool scale_central = false);

inline ToyTransformer scaled_xavier_init(const ModelConfig& config, uint64_t seed,
                                         bool scale_central = false) {
    return xavier_init(config, seed, true, scale_central);
}

/// Fills a core with Xavier-uniform samples over the given fan pair.
void xavier_fill(DenseTensor& core, int64_t fan_in, int64_t fan_out, Rng& rng);

constexpr double kAdapterInitSigma = 0.02;
constexpr double kEmbeddingInitSigma = 0.02;

}  // namespace mpo
