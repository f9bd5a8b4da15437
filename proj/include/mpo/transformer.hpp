#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpo/shared_linear.hpp"
#include "mpo/tensor.hpp"

namespace mpo {

constexpr int32_t kPadToken = 0;
constexpr int32_t kMaskToken = 1;
constexpr int32_t kNumSpecialTokens = 2;
constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    int layers = 2;
    int hidden = 32;
    int heads = 2;
    int d_ff = 128;
    int vocab_size = 32;
    int max_seq_len = 16;
    int mpo_order = 5;
    int adapter_rank = 8;
    int num_groups = 1;
    bool use_adapters = true;
    bool use_sharing = true;

    void validate() const;
    /// Group count actually in effect: num_groups when sharing, else one
    /// group per layer (no cross-layer sharing).
    int effective_groups() const { return use_sharing ? num_groups : layers; }
};

struct LayerNormParams {
    DenseTensor gamma;
    DenseTensor beta;
};

struct TransformerLayer {
    MpoLinear q, k, v, o, ff1, ff2;
    LayerNormParams ln1, ln2;

    MpoLinear& linear(Role role);
    const MpoLinear& linear(Role role) const;
};

/// Integer token ids, batch-major: ids[b * seq + t].
struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int32_t> ids;

    int32_t at(int b, int t) const { return ids[static_cast<size_t>(b) * seq + t]; }
};

/// Post-LN transformer encoder whose matrix roles are MpoLinears over a
/// SharedCentralStore, with a tied masked-language-model head.
///
/// When `tied_layers` is true the model holds one physical layer applied at
/// every depth (the fully weight-shared donor configuration).
class ToyTransformer {
public:
    ModelConfig config;
    bool tied_layers = false;
    DenseTensor token_embedding;     // vocab x H
    DenseTensor position_embedding;  // max_seq x H
    DenseTensor output_bias;         // vocab
    std::vector<TransformerLayer> layers;
    SharedCentralStore store;

    TransformerLayer& physical_layer(int depth_index);
    const TransformerLayer& physical_layer(int depth_index) const;
    int physical_layer_count() const { return static_cast<int>(layers.size()); }

    /// Visits every unique trainable tensor with a stable name. Shared
    /// centrals are visited once each.
    void for_each_param(const std::function<void(const std::string&, DenseTensor&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const DenseTensor&)>& fn) const;

    std::vector<DenseTensor*> collect_params();

    int64_t total_param_count() const;
};

/// Allocates the model structure (all tensors zero) for a config: plans,
/// bond profiles, group map, central slots. Initializers fill the values.
ToyTransformer build_model_structure(const ModelConfig& config, bool tied_layers = false);

// ---------------------------------------------------------------------------
// Masking and loss.
// ---------------------------------------------------------------------------

struct MaskResult {
    TokenBatch corrupted;
    std::vector<int32_t> labels;  // original token at selected positions, -1 elsewhere
};

/// BERT-style corruption: each position selected independently with p=0.15;
/// selected positions become [MASK] / stay / become a random lexical token
/// with probabilities 0.8 / 0.1 / 0.1. Deterministic given the seed.
MaskResult mlm_mask(const TokenBatch& tokens, int vocab_size, uint64_t seed);

struct MlmLoss {
    double value = 0.0;
    int64_t masked_count = 0;
    bool no_masked_positions = false;
};

/// Mean cross-entropy over the masked positions only. No masked positions
/// yields loss 0 with the warning flag set.
MlmLoss mlm_loss(const DenseTensor& logits, const std::vector<int32_t>& labels);

/// Gradient of mlm_loss w.r.t. the logits (softmax minus one-hot over the
/// masked positions, divided by their count).
DenseTensor mlm_loss_backward(const DenseTensor& logits, const std::vector<int32_t>& labels);

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

struct LayerNormCache {
    DenseTensor normalized;  // x-hat before affine
    std::vector<double> inv_std;
};

struct LayerCache {
    DenseTensor x_in;  // rows x H
    LinearCache q, k, v, o, ff1, ff2;
    DenseTensor probs;     // batch*heads*seq*seq softmax weights
    DenseTensor q_val, k_val, v_val, ctx;
    DenseTensor residual1;  // x_in + attention output
    LayerNormCache ln1;
    DenseTensor h1;        // after first LN
    DenseTensor ff_pre;    // rows x d_ff before activation
    DenseTensor ff_act;    // gelu(ff_pre)
    DenseTensor residual2;
    LayerNormCache ln2;
    DenseTensor h2;
};

struct ForwardCache {
    TokenBatch tokens;
    DenseTensor x0;
    std::vector<LayerCache> layer_caches;
    DenseTensor final_hidden;  // rows x H
    DenseTensor logits;        // batch x seq x vocab
};

/// Gradient accumulator mirroring the model's unique-parameter layout.
struct ModelGrads {
    std::map<std::string, DenseTensor> by_name;

    DenseTensor& at(const std::string& name);
    void for_each(const std::function<void(const std::string&, DenseTensor&)>& fn);
    double global_norm() const;
    void scale_all(double factor);
};

ModelGrads zero_grads_like(const ToyTransformer& model);

ForwardCache model_forward(const ToyTransformer& model, const TokenBatch& tokens);

/// One encoder layer applied to an explicit (batch, seq, H) tensor.
DenseTensor layer_forward(const ToyTransformer& model, const DenseTensor& x, int depth_index);

ModelGrads model_backward(const ToyTransformer& model, const ForwardCache& cache,
                          const DenseTensor& grad_logits);

struct LossAndGrads {
    MlmLoss loss;
    ModelGrads grads;
    DenseTensor logits;
};

LossAndGrads model_loss_and_grads(const ToyTransformer& model, const TokenBatch& corrupted,
                                  const std::vector<int32_t>& labels);

/// p <- p - eta * g for every parameter; optional exact global-norm clip.
void sgd_step(ToyTransformer& model, ModelGrads& grads, double eta,
              std::optional<double> clip_norm = std::nullopt);

/// Frobenius norm of the logits change after one SGD step on a clone,
/// evaluated on the same masked batch.
double model_update_norm(const ToyTransformer& model, const TokenBatch& corrupted,
                         const std::vector<int32_t>& labels, double eta);

// ---------------------------------------------------------------------------
// Parameter accounting (supports the sharing ablations).
// ---------------------------------------------------------------------------

struct ParamBreakdown {
    int64_t shared_central_total = 0;  // centrals shared within groups
    int64_t unshared_total = 0;        // every layer owns a full tensor set
    int64_t all_shared_total = 0;      // one set of everything for all layers
    int64_t central_per_layer = 0;     // sum over roles of one central
    int64_t groups = 0;
    int64_t layers = 0;
    int64_t embedding_params = 0;  // reported separately, outside mode totals
    int64_t layernorm_params = 0;
};

ParamBreakdown model_param_breakdown(const ToyTransformer& model);

// Exposed pieces used by tests and the stability module.
DenseTensor layer_norm_forward(const DenseTensor& x, const LayerNormParams& params,
                               LayerNormCache* cache);
double gelu(double x);
double gelu_derivative(double x);

}  // namespace mpo
