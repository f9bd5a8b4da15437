#include "mpo/trainer.hpp"

#include <cmath>

#include "mpo/rng.hpp"

namespace mpo {

void TrainConfig::validate() const {
    if (steps < 0 || batch < 1 || seq_len < 2 || lr < 0.0)
        throw ShapeMismatch("invalid train config");
    if (clip_norm && *clip_norm <= 0.0) throw ShapeMismatch("clip norm must be positive");
}

Corpus make_toy_corpus(uint64_t seed, int num_sequences, int seq_len, int vocab_size) {
    if (vocab_size < 4)
        throw VocabTooSmall("vocab must reserve special ids and keep >= 2 lexical tokens");
    Corpus corpus;
    corpus.vocab_size = vocab_size;
    corpus.seq_len = seq_len;
    const int lexical = corpus.lexical();

    // Sparse transition structure: three successors per token with strongly
    // skewed weights, so masked tokens are near-determined by their context.
    Rng structure_rng = Rng::fork(seed, 0x73747275);
    const int fanout = std::min(3, lexical);
    const double weights[3] = {0.96, 0.03, 0.01};
    corpus.transition.assign(static_cast<size_t>(lexical) * lexical, 0.0);
    for (int a = 0; a < lexical; ++a) {
        std::vector<int> successors;
        while (static_cast<int>(successors.size()) < fanout) {
            const int candidate = static_cast<int>(structure_rng.uniform_int(
                static_cast<uint64_t>(lexical)));
            bool fresh = true;
            for (int s : successors) fresh = fresh && s != candidate;
            if (fresh) successors.push_back(candidate);
        }
        double total = 0.0;
        for (int s = 0; s < fanout; ++s) total += weights[s];
        for (int s = 0; s < fanout; ++s)
            corpus.transition[static_cast<size_t>(a) * lexical + successors[static_cast<size_t>(s)]] =
                weights[s] / total;
    }

    Rng walk_rng = Rng::fork(seed, 0x77616c6b);
    corpus.sequences.reserve(static_cast<size_t>(num_sequences));
    for (int s = 0; s < num_sequences; ++s) {
        std::vector<int32_t> seq;
        seq.reserve(static_cast<size_t>(seq_len));
        int state = static_cast<int>(walk_rng.uniform_int(static_cast<uint64_t>(lexical)));
        seq.push_back(static_cast<int32_t>(kNumSpecialTokens + state));
        for (int t = 1; t < seq_len; ++t) {
            const double draw = walk_rng.uniform();
            double cumulative = 0.0;
            int next = lexical - 1;
            for (int b = 0; b < lexical; ++b) {
                cumulative += corpus.transition[static_cast<size_t>(state) * lexical + b];
                if (draw < cumulative) {
                    next = b;
                    break;
                }
            }
            state = next;
            seq.push_back(static_cast<int32_t>(kNumSpecialTokens + state));
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

TokenBatch sample_batch(const Corpus& corpus, const TrainConfig& config, int step) {
    if (corpus.sequences.empty()) throw VocabTooSmall("corpus has no sequences to sample");
    TokenBatch batch;
    batch.batch = config.batch;
    batch.seq = std::min(config.seq_len, corpus.seq_len);
    Rng rng = Rng::fork(config.seed ^ 0x62617463686573ull, static_cast<uint64_t>(step));
    for (int b = 0; b < config.batch; ++b) {
        const size_t pick = static_cast<size_t>(rng.uniform_int(corpus.sequences.size()));
        const std::vector<int32_t>& seq = corpus.sequences[pick];
        for (int t = 0; t < batch.seq; ++t) batch.ids.push_back(seq[static_cast<size_t>(t)]);
    }
    return batch;
}

LossCurve train(ToyTransformer& model, const Corpus& corpus, const TrainConfig& config) {
    config.validate();
    LossCurve curve;
    curve.config = config;
    curve.losses.reserve(static_cast<size_t>(config.steps));

    for (int step = 0; step < config.steps; ++step) {
        const TokenBatch batch = sample_batch(corpus, config, step);
        const MaskResult masked =
            mlm_mask(batch, model.config.vocab_size,
                     Rng::fork(config.seed ^ 0x6d61736bull, static_cast<uint64_t>(step)).next_u64());

        LossAndGrads result = model_loss_and_grads(model, masked.corrupted, masked.labels);
        if (!std::isfinite(result.loss.value))
            throw NonFiniteLoss("non-finite loss at step " + std::to_string(step));
        curve.losses.push_back(result.loss.value);
        sgd_step(model, result.grads, config.lr, config.clip_norm);
    }
    return curve;
}

DonorCheckpoint export_donor(const ToyTransformer& tied_model) {
    if (!tied_model.tied_layers)
        throw ShapeMismatch("export_donor expects a fully weight-shared model");
    DonorCheckpoint donor;
    donor.donor_depth = tied_model.config.layers;
    donor.config = tied_model.config;
    const TransformerLayer& layer = tied_model.layers.front();
    for (Role role : all_roles()) {
        const MpoLinear& linear = layer.linear(role);
        donor.weights[role] = linear.effective_weight(tied_model.store);
        donor.biases[role] = linear.bias;
    }
    donor.ln1_gamma = layer.ln1.gamma;
    donor.ln1_beta = layer.ln1.beta;
    donor.ln2_gamma = layer.ln2.gamma;
    donor.ln2_beta = layer.ln2.beta;
    donor.token_embedding = tied_model.token_embedding;
    donor.position_embedding = tied_model.position_embedding;
    donor.output_bias = tied_model.output_bias;
    return donor;
}

DonorCheckpoint train_donor(const ModelConfig& donor_config, const Corpus& corpus,
                            const TrainConfig& config, uint64_t init_seed) {
    ModelConfig cfg = donor_config;
    cfg.use_adapters = false;  // the donor is an ALBERT-style plain shared model
    cfg.num_groups = 1;
    cfg.validate();

    ToyTransformer model = build_model_structure(cfg, /*tied_layers=*/true);
    // Fill the single physical layer with Xavier cores (no depth scaling: the
    // donor trains at its own shallow depth).
    ToyTransformer seeded = xavier_init(cfg, init_seed, /*depth_scale=*/false);
    model.token_embedding = seeded.token_embedding;
    model.position_embedding = seeded.position_embedding;
    model.output_bias = seeded.output_bias;
    for (auto& [key, value] : model.store.entries_mut())
        value = seeded.store.central(key);
    TransformerLayer& tied = model.layers.front();
    const TransformerLayer& src = seeded.layers.front();
    for (Role role : all_roles()) tied.linear(role).aux = src.linear(role).aux;

    train(model, corpus, config);
    return export_donor(model);
}

namespace {

int crossing_step(const std::vector<double>& losses, double threshold) {
    for (size_t s = 0; s < losses.size(); ++s)
        if (losses[s] <= threshold) return static_cast<int>(s);
    return static_cast<int>(losses.size());  // never crossed
}

}  // namespace

ConvergenceComparison convergence_compare(const ModelConfig& config, const Corpus& corpus,
                                          const TrainConfig& train_config,
                                          const DonorCheckpoint& donor, uint64_t init_seed,
                                          ExtendMode extend) {
    ConvergenceComparison out;

    ToyTransformer scratch = scaled_xavier_init(config, init_seed);
    out.scratch = train(scratch, corpus, train_config);

    ToyTransformer warm = init_from_donor(donor, config, extend, init_seed);
    out.donor_init = train(warm, corpus, train_config);

    out.threshold = 0.8 * out.scratch.losses.back();
    out.scratch_cross_step = crossing_step(out.scratch.losses, out.threshold);
    out.donor_cross_step = crossing_step(out.donor_init.losses, out.threshold);
    return out;
}

}  // namespace mpo
