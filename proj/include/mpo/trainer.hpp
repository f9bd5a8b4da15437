#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mpo/init.hpp"
#include "mpo/transformer.hpp"

namespace mpo {

struct TrainConfig {
    int steps = 200;
    int batch = 128;
    int seq_len = 16;
    double lr = 1.0;
    uint64_t seed = 1;
    std::optional<double> clip_norm = 5.0;

    void validate() const;
};

/// Synthetic corpus drawn from a seeded order-1 Markov chain over the lexical
/// tokens. Each token transitions to a small set of successors with skewed
/// probabilities, so masked tokens are predictable from context.
struct Corpus {
    int vocab_size = 0;
    int seq_len = 0;
    std::vector<std::vector<int32_t>> sequences;
    /// transition[(a - specials) * lexical + (b - specials)] = P(b | a).
    std::vector<double> transition;

    int lexical() const { return vocab_size - kNumSpecialTokens; }
};

Corpus make_toy_corpus(uint64_t seed, int num_sequences, int seq_len, int vocab_size);

struct LossCurve {
    std::vector<double> losses;
    TrainConfig config;
};

/// Seeded batch of whole corpus sequences for one step.
TokenBatch sample_batch(const Corpus& corpus, const TrainConfig& config, int step);

/// MLM training loop: mask, forward, loss, backward, SGD (shared centrals
/// accumulate). Deterministic given seeds; aborts on non-finite loss.
LossCurve train(ToyTransformer& model, const Corpus& corpus, const TrainConfig& config);

/// Trains a fully weight-shared model at depth donor_config.layers and
/// exports it as a donor checkpoint.
DonorCheckpoint train_donor(const ModelConfig& donor_config, const Corpus& corpus,
                            const TrainConfig& config, uint64_t init_seed);

/// Extracts the donor view (dense per-role weights) from a tied model.
DonorCheckpoint export_donor(const ToyTransformer& tied_model);

struct ConvergenceComparison {
    LossCurve scratch;
    LossCurve donor_init;
    double threshold = 0.0;       // 80% of the scratch run's final loss
    int scratch_cross_step = 0;   // first step at/below threshold; steps if never
    int donor_cross_step = 0;
};

/// Runs the same training twice (identical seeds and data): scaled-Xavier
/// scratch vs donor-based initialization.
ConvergenceComparison convergence_compare(const ModelConfig& config, const Corpus& corpus,
                                          const TrainConfig& train_config,
                                          const DonorCheckpoint& donor, uint64_t init_seed,
                                          ExtendMode extend = ExtendMode::ScaledDonor);

}  // namespace mpo
