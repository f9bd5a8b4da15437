#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpo/init.hpp"
#include "test_util.hpp"

using namespace mpo;
using testutil::random_tensor;

namespace {

ModelConfig donor_scale_config(int layers) {
    ModelConfig cfg;
    cfg.layers = layers;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = 16;
    cfg.max_seq_len = 8;
    cfg.mpo_order = 3;
    cfg.adapter_rank = 2;
    cfg.num_groups = 1;
    return cfg;
}

DonorCheckpoint synthetic_donor(const ModelConfig& base, int donor_depth, uint64_t seed) {
    DonorCheckpoint donor;
    donor.donor_depth = donor_depth;
    donor.config = base;
    donor.config.layers = donor_depth;
    std::mt19937_64 rng(seed);
    for (Role role : all_roles()) {
        const int64_t d_in = (role == Role::FfnOut) ? base.d_ff : base.hidden;
        const int64_t d_out = (role == Role::FfnIn) ? base.d_ff : base.hidden;
        donor.weights[role] = random_tensor({d_in, d_out}, rng, 0.5);
        donor.biases[role] = random_tensor({d_out}, rng, 0.1);
    }
    donor.ln1_gamma = random_tensor({base.hidden}, rng, 0.1);
    donor.ln1_beta = random_tensor({base.hidden}, rng, 0.1);
    donor.ln2_gamma = random_tensor({base.hidden}, rng, 0.1);
    donor.ln2_beta = random_tensor({base.hidden}, rng, 0.1);
    for (int64_t i = 0; i < base.hidden; ++i) {
        donor.ln1_gamma[i] += 1.0;
        donor.ln2_gamma[i] += 1.0;
    }
    donor.token_embedding = random_tensor({base.vocab_size, base.hidden}, rng, 0.1);
    donor.position_embedding = random_tensor({base.max_seq_len, base.hidden}, rng, 0.1);
    donor.output_bias = random_tensor({base.vocab_size}, rng, 0.1);
    return donor;
}

}  // namespace

TEST_CASE("scaling coefficient values") {
    CHECK(scaling_coefficient(8) == 0.5);  // 16^(-1/4) is exact
    CHECK(std::abs(scaling_coefficient(2) - 1.0 / std::sqrt(std::sqrt(4.0))) < 1e-15);
    CHECK(std::abs(scaling_coefficient(2) - 0.70710678118654752440) < 1e-15);
    // 96^(-1/4), evaluated directly.
    CHECK(std::abs(scaling_coefficient(48) - std::exp(-0.25 * std::log(96.0))) < 1e-15);
    CHECK(scaling_coefficient(48) == doctest::Approx(0.3194715521231362).epsilon(1e-14));

    double previous = 2.0;
    for (int layers = 1; layers <= 300; ++layers) {
        const double value = scaling_coefficient(layers);
        CHECK(value < previous);
        previous = value;
    }
}

TEST_CASE("decompose_donor is deterministic and reconstructs the donor") {
    ModelConfig cfg = donor_scale_config(4);
    cfg.hidden = 64;
    cfg.d_ff = 256;
    const DonorCheckpoint donor = synthetic_donor(cfg, 2, 71);

    const auto splits_a = decompose_donor(donor, 5);
    const auto splits_b = decompose_donor(donor, 5);
    for (Role role : all_roles()) {
        CHECK(splits_a.at(role).central.values() == splits_b.at(role).central.values());
        MpoTensorSet set;
        set.plan = balanced_plan(donor.weights.at(role).rows(), donor.weights.at(role).cols(), 5);
        set.cores = assemble_cores(splits_a.at(role));
        CHECK(relative_frobenius_error(mpo_reconstruct(set), donor.weights.at(role)) < 1e-10);
        // Central dominance at the toy model shapes (64 and 256 wide).
        CHECK(param_report(set).central_fraction >= 0.5);
    }
}

TEST_CASE("donor init copies every layer when the model is no deeper") {
    const ModelConfig cfg = donor_scale_config(3);
    const DonorCheckpoint donor = synthetic_donor(cfg, 3, 73);
    const ToyTransformer model = init_from_donor(donor, cfg, ExtendMode::ScaledDonor, 7);
    const auto splits = decompose_donor(donor, cfg.mpo_order);

    for (int l = 0; l < cfg.layers; ++l)
        for (Role role : all_roles()) {
            const MpoLinear& linear = model.layers[static_cast<size_t>(l)].linear(role);
            const CentralAuxSplit& split = splits.at(role);
            REQUIRE(linear.aux.size() == split.auxiliaries.size());
            for (size_t a = 0; a < linear.aux.size(); ++a)
                CHECK(linear.aux[a].values() == split.auxiliaries[a].values());  // bit-exact
        }

    // Donor deeper than the model is fine too (extension branch unused).
    ModelConfig shallow = cfg;
    shallow.layers = 2;
    const ToyTransformer small = init_from_donor(donor, shallow, ExtendMode::ScaledDonor, 7);
    CHECK(small.config.layers == 2);
}

TEST_CASE("layers beyond the donor depth carry scaled donor auxiliaries") {
    const ModelConfig cfg = donor_scale_config(6);
    const DonorCheckpoint donor = synthetic_donor(cfg, 3, 79);
    const ToyTransformer model = init_from_donor(donor, cfg, ExtendMode::ScaledDonor, 7);
    const auto splits = decompose_donor(donor, cfg.mpo_order);
    const double coeff = scaling_coefficient(cfg.layers);

    // Branch boundary: layer donor_depth (1-based) copies, the next one scales.
    for (Role role : all_roles()) {
        const CentralAuxSplit& split = splits.at(role);
        const MpoLinear& at_boundary = model.layers[2].linear(role);   // layer 3, 1-based
        const MpoLinear& past_boundary = model.layers[3].linear(role); // layer 4
        for (size_t a = 0; a < split.auxiliaries.size(); ++a) {
            CHECK(at_boundary.aux[a].values() == split.auxiliaries[a].values());
            for (int64_t i = 0; i < past_boundary.aux[a].size(); ++i)
                CHECK(std::abs(past_boundary.aux[a][i] - coeff * split.auxiliaries[a][i]) <=
                      1e-15 * std::max(1.0, std::abs(split.auxiliaries[a][i])));
        }
    }

    // Adapters start inert: u identically zero.
    for (const TransformerLayer& layer : model.layers)
        for (Role role : all_roles()) {
            const MpoLinear& linear = layer.linear(role);
            REQUIRE(linear.adapter.has_value());
            for (int64_t i = 0; i < linear.adapter->u.size(); ++i)
                CHECK(linear.adapter->u[i] == 0.0);
        }
}

TEST_CASE("effective weights after donor init match direct reconstruction") {
    const ModelConfig cfg = donor_scale_config(4);
    const DonorCheckpoint donor = synthetic_donor(cfg, 2, 83);
    const ToyTransformer model = init_from_donor(donor, cfg, ExtendMode::ScaledDonor, 7);
    const double coeff = scaling_coefficient(cfg.layers);
    const int aux_count = cfg.mpo_order - 1;

    for (Role role : all_roles()) {
        // Copy branch reproduces the donor matrix.
        const DenseTensor w_copy = model.layers[1].linear(role).effective_weight(model.store);
        CHECK(relative_frobenius_error(w_copy, donor.weights.at(role)) < 1e-10);

        // Scaled branch equals the donor matrix times coeff^(n-1): scaling
        // every auxiliary core scales the full contraction multiplicatively.
        const DenseTensor w_scaled = model.layers[3].linear(role).effective_weight(model.store);
        DenseTensor oracle = donor.weights.at(role);
        scale_inplace(oracle, std::pow(coeff, aux_count));
        CHECK(relative_frobenius_error(w_scaled, oracle) < 1e-10);
    }
}

TEST_CASE("scaled-random extension draws fresh scaled auxiliaries") {
    const ModelConfig cfg = donor_scale_config(4);
    const DonorCheckpoint donor = synthetic_donor(cfg, 2, 89);
    const ToyTransformer model = init_from_donor(donor, cfg, ExtendMode::ScaledRandom, 7);
    const auto splits = decompose_donor(donor, cfg.mpo_order);

    // Beyond the donor depth the auxiliaries are not the donor's.
    const MpoLinear& fresh = model.layers[3].linear(Role::Query);
    double diff = 0.0;
    for (size_t a = 0; a < fresh.aux.size(); ++a)
        diff += max_abs_diff(fresh.aux[a], splits.at(Role::Query).auxiliaries[a]);
    CHECK(diff > 1e-6);

    // Deterministic given the seed.
    const ToyTransformer again = init_from_donor(donor, cfg, ExtendMode::ScaledRandom, 7);
    CHECK(again.layers[3].linear(Role::Query).aux[0].values() == fresh.aux[0].values());
}

TEST_CASE("donor init at donor depth reproduces donor forward outputs") {
    const ModelConfig cfg = donor_scale_config(2);
    const DonorCheckpoint donor = synthetic_donor(cfg, 2, 97);
    const ToyTransformer model = init_from_donor(donor, cfg, ExtendMode::ScaledDonor, 7);

    // Reference: a model whose every layer applies the donor weights densely.
    // Build it through the same structure but with exact decompositions of
    // the donor matrices (which is what init_from_donor does); here we check
    // the end-to-end forward against an explicitly assembled twin.
    ToyTransformer twin = build_model_structure(cfg);
    const auto splits = decompose_donor(donor, cfg.mpo_order);
    for (Role role : all_roles()) {
        twin.store.central_mut(CentralKey{role, 0}) = splits.at(role).central;
        for (int l = 0; l < cfg.layers; ++l) {
            MpoLinear& linear = twin.layers[static_cast<size_t>(l)].linear(role);
            linear.aux = splits.at(role).auxiliaries;
            linear.bias = donor.biases.at(role);
            if (linear.adapter)
                for (int64_t i = 0; i < linear.adapter->u.size(); ++i) linear.adapter->u[i] = 0.0;
        }
    }
    for (int l = 0; l < cfg.layers; ++l) {
        twin.layers[static_cast<size_t>(l)].ln1.gamma = donor.ln1_gamma;
        twin.layers[static_cast<size_t>(l)].ln1.beta = donor.ln1_beta;
        twin.layers[static_cast<size_t>(l)].ln2.gamma = donor.ln2_gamma;
        twin.layers[static_cast<size_t>(l)].ln2.beta = donor.ln2_beta;
    }
    twin.token_embedding = donor.token_embedding;
    twin.position_embedding = donor.position_embedding;
    twin.output_bias = donor.output_bias;

    TokenBatch tokens;
    tokens.batch = 2;
    tokens.seq = 4;
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int32_t> dist(kNumSpecialTokens, cfg.vocab_size - 1);
    for (int i = 0; i < 8; ++i) tokens.ids.push_back(dist(rng));

    const DenseTensor a = model_forward(model, tokens).logits;
    const DenseTensor b = model_forward(twin, tokens).logits;
    CHECK(max_abs_diff(a, b) < 1e-8);
}

TEST_CASE("xavier variance scales with the square of the coefficient") {
    // Large synthetic core so the sample variance is tight.
    DenseTensor big({1, 400, 300, 1});
    Rng rng_a(5);
    xavier_fill(big, 400, 300, rng_a);
    double var_unscaled = 0.0;
    for (int64_t i = 0; i < big.size(); ++i) var_unscaled += big[i] * big[i];
    var_unscaled /= static_cast<double>(big.size());

    DenseTensor scaled = big;
    const double coeff = scaling_coefficient(8);  // 0.5
    scale_inplace(scaled, coeff);
    double var_scaled = 0.0;
    for (int64_t i = 0; i < scaled.size(); ++i) var_scaled += scaled[i] * scaled[i];
    var_scaled /= static_cast<double>(scaled.size());

    CHECK(std::abs(var_scaled - coeff * coeff * var_unscaled) / (coeff * coeff * var_unscaled) <
          0.05);
    CHECK(big.size() >= 100000);
}

TEST_CASE("L=8 scaled init halves every auxiliary entry") {
    ModelConfig cfg = donor_scale_config(8);
    const ToyTransformer plain = xavier_init(cfg, 123, /*depth_scale=*/false);
    const ToyTransformer scaled = xavier_init(cfg, 123, /*depth_scale=*/true);

    for (size_t l = 0; l < plain.layers.size(); ++l)
        for (Role role : all_roles()) {
            const MpoLinear& a = plain.layers[l].linear(role);
            const MpoLinear& b = scaled.layers[l].linear(role);
            for (size_t core = 0; core < a.aux.size(); ++core)
                for (int64_t i = 0; i < a.aux[core].size(); ++i)
                    CHECK(b.aux[core][i] == 0.5 * a.aux[core][i]);
        }

    // Centrals stay unscaled by default, scale under the flag.
    const ToyTransformer with_central = xavier_init(cfg, 123, true, /*scale_central=*/true);
    const DenseTensor& c_plain = plain.store.central(CentralKey{Role::Query, 0});
    const DenseTensor& c_default = scaled.store.central(CentralKey{Role::Query, 0});
    const DenseTensor& c_scaled = with_central.store.central(CentralKey{Role::Query, 0});
    CHECK(c_default.values() == c_plain.values());
    for (int64_t i = 0; i < c_plain.size(); ++i) CHECK(c_scaled[i] == 0.5 * c_plain[i]);
}
