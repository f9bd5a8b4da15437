#include "mpo/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "mpo/rng.hpp"

namespace mpo {

void ModelConfig::validate() const {
    if (layers < 1 || hidden < 1 || heads < 1 || d_ff < 1 || vocab_size < 1 ||
        max_seq_len < 1 || mpo_order < 1 || adapter_rank < 0)
        throw ShapeMismatch("model config sizes must be positive");
    if (hidden % heads != 0)
        throw ShapeMismatch("hidden size must be divisible by the head count");
    if (num_groups < 1 || num_groups > layers)
        throw InvalidGroupCount("need 1 <= groups <= layers");
}

MpoLinear& TransformerLayer::linear(Role role) {
    switch (role) {
        case Role::Query: return q;
        case Role::Key: return k;
        case Role::Value: return v;
        case Role::AttnOut: return o;
        case Role::FfnIn: return ff1;
        case Role::FfnOut: return ff2;
    }
    throw Error("bad role");
}

const MpoLinear& TransformerLayer::linear(Role role) const {
    return const_cast<TransformerLayer*>(this)->linear(role);
}

TransformerLayer& ToyTransformer::physical_layer(int depth_index) {
    return layers[static_cast<size_t>(tied_layers ? 0 : depth_index)];
}

const TransformerLayer& ToyTransformer::physical_layer(int depth_index) const {
    return layers[static_cast<size_t>(tied_layers ? 0 : depth_index)];
}

namespace {

std::pair<int64_t, int64_t> role_dims(const ModelConfig& cfg, Role role) {
    switch (role) {
        case Role::Query:
        case Role::Key:
        case Role::Value:
        case Role::AttnOut: return {cfg.hidden, cfg.hidden};
        case Role::FfnIn: return {cfg.hidden, cfg.d_ff};
        case Role::FfnOut: return {cfg.d_ff, cfg.hidden};
    }
    throw Error("bad role");
}

MpoLinear make_linear_structure(const ModelConfig& cfg, Role role, int layer) {
    auto [d_in, d_out] = role_dims(cfg, role);
    MpoLinear linear;
    linear.role = role;
    linear.layer = layer;
    linear.plan = balanced_plan(d_in, d_out, cfg.mpo_order);
    linear.central_pos = central_index(cfg.mpo_order);
    linear.d_in = d_in;
    linear.d_out = d_out;

    const std::vector<int64_t> bonds = exact_bond_profile(linear.plan);
    for (int k = 1; k <= cfg.mpo_order; ++k) {
        if (k == linear.central_pos) continue;
        linear.aux.push_back(DenseTensor({bonds[static_cast<size_t>(k - 1)],
                                          linear.plan.row_factors[static_cast<size_t>(k - 1)],
                                          linear.plan.col_factors[static_cast<size_t>(k - 1)],
                                          bonds[static_cast<size_t>(k)]}));
    }
    if (cfg.use_adapters && cfg.adapter_rank > 0) {
        AdapterPair adapter;
        adapter.rank = cfg.adapter_rank;
        adapter.u = DenseTensor({d_in, cfg.adapter_rank});
        adapter.d = DenseTensor({cfg.adapter_rank, d_out});
        linear.adapter = std::move(adapter);
    }
    linear.bias = DenseTensor({d_out});
    return linear;
}

DenseTensor central_structure(const ModelConfig& cfg, Role role) {
    auto [d_in, d_out] = role_dims(cfg, role);
    const FactorPlan plan = balanced_plan(d_in, d_out, cfg.mpo_order);
    const std::vector<int64_t> bonds = exact_bond_profile(plan);
    const int c = central_index(cfg.mpo_order);
    return DenseTensor({bonds[static_cast<size_t>(c - 1)], plan.row_factors[static_cast<size_t>(c - 1)],
                        plan.col_factors[static_cast<size_t>(c - 1)], bonds[static_cast<size_t>(c)]});
}

std::string central_name(Role role, int group) {
    return std::string("central.") + role_name(role) + ".g" + std::to_string(group);
}

std::string layer_prefix(int layer, Role role) {
    return "layer" + std::to_string(layer) + "." + role_name(role);
}

}  // namespace

ToyTransformer build_model_structure(const ModelConfig& config, bool tied_layers) {
    config.validate();
    ToyTransformer model;
    model.config = config;
    model.tied_layers = tied_layers;
    model.token_embedding = DenseTensor({config.vocab_size, config.hidden});
    model.position_embedding = DenseTensor({config.max_seq_len, config.hidden});
    model.output_bias = DenseTensor({config.vocab_size});

    model.store.set_group_map(assign_groups(config.layers, config.effective_groups()));
    for (Role role : all_roles())
        for (int g = 0; g < config.effective_groups(); ++g)
            model.store.insert(CentralKey{role, g}, central_structure(config, role));

    const int physical = tied_layers ? 1 : config.layers;
    for (int l = 0; l < physical; ++l) {
        TransformerLayer layer;
        for (Role role : all_roles()) layer.linear(role) = make_linear_structure(config, role, l);
        layer.ln1.gamma = DenseTensor({config.hidden});
        layer.ln1.beta = DenseTensor({config.hidden});
        layer.ln2.gamma = DenseTensor({config.hidden});
        layer.ln2.beta = DenseTensor({config.hidden});
        for (int i = 0; i < config.hidden; ++i) {
            layer.ln1.gamma[i] = 1.0;
            layer.ln2.gamma[i] = 1.0;
        }
        model.layers.push_back(std::move(layer));
    }
    return model;
}

void ToyTransformer::for_each_param(
    const std::function<void(const std::string&, DenseTensor&)>& fn) {
    fn("token_embedding", token_embedding);
    fn("position_embedding", position_embedding);
    fn("output_bias", output_bias);
    for (auto& [key, value] : store.entries_mut()) fn(central_name(key.role, key.group), value);
    for (size_t l = 0; l < layers.size(); ++l) {
        TransformerLayer& layer = layers[l];
        for (Role role : all_roles()) {
            MpoLinear& linear = layer.linear(role);
            const std::string prefix = layer_prefix(static_cast<int>(l), role);
            for (size_t a = 0; a < linear.aux.size(); ++a)
                fn(prefix + ".aux" + std::to_string(a), linear.aux[a]);
            if (linear.adapter) {
                fn(prefix + ".adapter_u", linear.adapter->u);
                fn(prefix + ".adapter_d", linear.adapter->d);
            }
            fn(prefix + ".bias", linear.bias);
        }
        const std::string lp = "layer" + std::to_string(l);
        fn(lp + ".ln1.gamma", layer.ln1.gamma);
        fn(lp + ".ln1.beta", layer.ln1.beta);
        fn(lp + ".ln2.gamma", layer.ln2.gamma);
        fn(lp + ".ln2.beta", layer.ln2.beta);
    }
}

void ToyTransformer::for_each_param(
    const std::function<void(const std::string&, const DenseTensor&)>& fn) const {
    const_cast<ToyTransformer*>(this)->for_each_param(
        [&fn](const std::string& name, DenseTensor& value) { fn(name, value); });
}

std::vector<DenseTensor*> ToyTransformer::collect_params() {
    std::vector<DenseTensor*> out;
    for_each_param([&out](const std::string&, DenseTensor& value) { out.push_back(&value); });
    return out;
}

int64_t ToyTransformer::total_param_count() const {
    int64_t total = 0;
    for_each_param([&total](const std::string&, const DenseTensor& value) { total += value.size(); });
    return total;
}

// ---------------------------------------------------------------------------
// Masking and loss.
// ---------------------------------------------------------------------------

MaskResult mlm_mask(const TokenBatch& tokens, int vocab_size, uint64_t seed) {
    const int lexical = vocab_size - kNumSpecialTokens;
    if (lexical <= 0) throw EmptyVocab("vocab has no lexical tokens beyond the reserved ids");

    MaskResult out;
    out.corrupted = tokens;
    out.labels.assign(tokens.ids.size(), -1);
    Rng rng(seed);
    for (size_t p = 0; p < tokens.ids.size(); ++p) {
        if (rng.uniform() >= 0.15) continue;
        out.labels[p] = tokens.ids[p];
        const double branch = rng.uniform();
        if (branch < 0.8) {
            out.corrupted.ids[p] = kMaskToken;
        } else if (branch < 0.9) {
            // left unchanged
        } else {
            out.corrupted.ids[p] =
                kNumSpecialTokens + static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(lexical)));
        }
    }
    return out;
}

namespace {

double log_sum_exp(const double* row, int64_t n) {
    double peak = row[0];
    for (int64_t j = 1; j < n; ++j) peak = std::max(peak, row[j]);
    double acc = 0.0;
    for (int64_t j = 0; j < n; ++j) acc += std::exp(row[j] - peak);
    return peak + std::log(acc);
}

}  // namespace

MlmLoss mlm_loss(const DenseTensor& logits, const std::vector<int32_t>& labels) {
    if (logits.rank() != 3) throw ShapeMismatch("mlm_loss expects batch x seq x vocab logits");
    const int64_t positions = logits.extent(0) * logits.extent(1);
    const int64_t vocab = logits.extent(2);
    if (static_cast<int64_t>(labels.size()) != positions)
        throw ShapeMismatch("labels length does not match logits positions");

    MlmLoss out;
    double total = 0.0;
    for (int64_t p = 0; p < positions; ++p) {
        const int32_t label = labels[static_cast<size_t>(p)];
        if (label < 0) continue;
        const double* row = logits.data() + p * vocab;
        total += log_sum_exp(row, vocab) - row[label];
        out.masked_count++;
    }
    if (out.masked_count == 0) {
        out.no_masked_positions = true;
        out.value = 0.0;
        return out;
    }
    out.value = total / static_cast<double>(out.masked_count);
    return out;
}

DenseTensor mlm_loss_backward(const DenseTensor& logits, const std::vector<int32_t>& labels) {
    const int64_t positions = logits.extent(0) * logits.extent(1);
    const int64_t vocab = logits.extent(2);
    int64_t masked = 0;
    for (int32_t label : labels)
        if (label >= 0) masked++;
    DenseTensor grad(logits.shape());
    if (masked == 0) return grad;
    const double inv = 1.0 / static_cast<double>(masked);
    for (int64_t p = 0; p < positions; ++p) {
        const int32_t label = labels[static_cast<size_t>(p)];
        if (label < 0) continue;
        const double* row = logits.data() + p * vocab;
        double* grow = grad.data() + p * vocab;
        const double lse = log_sum_exp(row, vocab);
        for (int64_t j = 0; j < vocab; ++j) grow[j] = std::exp(row[j] - lse) * inv;
        grow[label] -= inv;
    }
    return grad;
}

// ---------------------------------------------------------------------------
// Layer norm and activation.
// ---------------------------------------------------------------------------

DenseTensor layer_norm_forward(const DenseTensor& x, const LayerNormParams& params,
                               LayerNormCache* cache) {
    const int64_t rows = x.rows(), width = x.cols();
    DenseTensor out({rows, width});
    DenseTensor normalized({rows, width});
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * width;
        double mean = 0.0;
        for (int64_t j = 0; j < width; ++j) mean += row[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (int64_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(width);
        const double denom = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[static_cast<size_t>(r)] = denom;
        for (int64_t j = 0; j < width; ++j) {
            const double xhat = (row[j] - mean) * denom;
            normalized[r * width + j] = xhat;
            out[r * width + j] = params.gamma[j] * xhat + params.beta[j];
        }
    }
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

namespace {

DenseTensor layer_norm_backward(const DenseTensor& grad_out, const LayerNormCache& cache,
                                const LayerNormParams& params, DenseTensor& d_gamma,
                                DenseTensor& d_beta) {
    const int64_t rows = grad_out.rows(), width = grad_out.cols();
    DenseTensor dx({rows, width});
    for (int64_t r = 0; r < rows; ++r) {
        const double* dy = grad_out.data() + r * width;
        const double* xhat = cache.normalized.data() + r * width;
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int64_t j = 0; j < width; ++j) {
            d_gamma[j] += dy[j] * xhat[j];
            d_beta[j] += dy[j];
            const double dxhat = dy[j] * params.gamma[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[j];
        }
        mean_dxhat /= static_cast<double>(width);
        mean_dxhat_xhat /= static_cast<double>(width);
        const double inv_std = cache.inv_std[static_cast<size_t>(r)];
        for (int64_t j = 0; j < width; ++j) {
            const double dxhat = dy[j] * params.gamma[j];
            dx[r * width + j] = inv_std * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    return dx;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Attention.
// ---------------------------------------------------------------------------

namespace {

struct AttnDims {
    int batch, seq, heads, head_dim, hidden;
};

DenseTensor attention_mix(const DenseTensor& q, const DenseTensor& k, const DenseTensor& v,
                          const AttnDims& dims, DenseTensor& probs_out) {
    const auto [batch, seq, heads, head_dim, hidden] = dims;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    probs_out = DenseTensor({batch, heads, seq, seq});
    DenseTensor ctx({static_cast<int64_t>(batch) * seq, hidden});

    std::vector<double> row(static_cast<size_t>(seq));
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const int64_t col0 = static_cast<int64_t>(h) * head_dim;
            for (int i = 0; i < seq; ++i) {
                const double* qrow = q.data() + (static_cast<int64_t>(b) * seq + i) * hidden + col0;
                double peak = -1e300;
                for (int j = 0; j < seq; ++j) {
                    const double* krow = k.data() + (static_cast<int64_t>(b) * seq + j) * hidden + col0;
                    double dot = 0.0;
                    for (int d = 0; d < head_dim; ++d) dot += qrow[d] * krow[d];
                    row[static_cast<size_t>(j)] = dot * scale;
                    peak = std::max(peak, row[static_cast<size_t>(j)]);
                }
                double denom = 0.0;
                for (int j = 0; j < seq; ++j) {
                    row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - peak);
                    denom += row[static_cast<size_t>(j)];
                }
                double* prow = probs_out.data() +
                               ((static_cast<int64_t>(b) * heads + h) * seq + i) * seq;
                double* crow = ctx.data() + (static_cast<int64_t>(b) * seq + i) * hidden + col0;
                for (int j = 0; j < seq; ++j) {
                    const double p = row[static_cast<size_t>(j)] / denom;
                    prow[j] = p;
                    const double* vrow =
                        v.data() + (static_cast<int64_t>(b) * seq + j) * hidden + col0;
                    for (int d = 0; d < head_dim; ++d) crow[d] += p * vrow[d];
                }
            }
        }
    }
    return ctx;
}

void attention_backward(const DenseTensor& d_ctx, const DenseTensor& probs, const DenseTensor& q,
                        const DenseTensor& k, const DenseTensor& v, const AttnDims& dims,
                        DenseTensor& dq, DenseTensor& dk, DenseTensor& dv) {
    const auto [batch, seq, heads, head_dim, hidden] = dims;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    dq = DenseTensor({static_cast<int64_t>(batch) * seq, hidden});
    dk = DenseTensor({static_cast<int64_t>(batch) * seq, hidden});
    dv = DenseTensor({static_cast<int64_t>(batch) * seq, hidden});

    std::vector<double> dprobs(static_cast<size_t>(seq));
    std::vector<double> dscores(static_cast<size_t>(seq));
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const int64_t col0 = static_cast<int64_t>(h) * head_dim;
            for (int i = 0; i < seq; ++i) {
                const double* dcrow =
                    d_ctx.data() + (static_cast<int64_t>(b) * seq + i) * hidden + col0;
                const double* prow =
                    probs.data() + ((static_cast<int64_t>(b) * heads + h) * seq + i) * seq;
                double inner = 0.0;
                for (int j = 0; j < seq; ++j) {
                    const double* vrow =
                        v.data() + (static_cast<int64_t>(b) * seq + j) * hidden + col0;
                    double dot = 0.0;
                    for (int d = 0; d < head_dim; ++d) dot += dcrow[d] * vrow[d];
                    dprobs[static_cast<size_t>(j)] = dot;
                    inner += dot * prow[j];
                    double* dvrow = dv.data() + (static_cast<int64_t>(b) * seq + j) * hidden + col0;
                    for (int d = 0; d < head_dim; ++d) dvrow[d] += prow[j] * dcrow[d];
                }
                for (int j = 0; j < seq; ++j)
                    dscores[static_cast<size_t>(j)] =
                        prow[j] * (dprobs[static_cast<size_t>(j)] - inner);
                double* dqrow = dq.data() + (static_cast<int64_t>(b) * seq + i) * hidden + col0;
                const double* qrow = q.data() + (static_cast<int64_t>(b) * seq + i) * hidden + col0;
                for (int j = 0; j < seq; ++j) {
                    const double ds = dscores[static_cast<size_t>(j)] * scale;
                    const double* krow = k.data() + (static_cast<int64_t>(b) * seq + j) * hidden + col0;
                    double* dkrow = dk.data() + (static_cast<int64_t>(b) * seq + j) * hidden + col0;
                    for (int d = 0; d < head_dim; ++d) {
                        dqrow[d] += ds * krow[d];
                        dkrow[d] += ds * qrow[d];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

namespace {

LayerCache run_layer_forward(const ToyTransformer& model, const TransformerLayer& layer,
                             const DenseTensor& x, int batch, int seq) {
    const int hidden = model.config.hidden;
    LayerCache cache;
    cache.x_in = x;

    auto [q, qc] = linear_forward(x, layer.q, model.store);
    auto [k, kc] = linear_forward(x, layer.k, model.store);
    auto [v, vc] = linear_forward(x, layer.v, model.store);
    cache.q = std::move(qc);
    cache.k = std::move(kc);
    cache.v = std::move(vc);
    cache.q_val = std::move(q);
    cache.k_val = std::move(k);
    cache.v_val = std::move(v);

    const AttnDims dims{batch, seq, model.config.heads, hidden / model.config.heads, hidden};
    cache.ctx = attention_mix(cache.q_val, cache.k_val, cache.v_val, dims, cache.probs);

    auto [attn_out, oc] = linear_forward(cache.ctx, layer.o, model.store);
    cache.o = std::move(oc);

    cache.residual1 = cache.x_in;
    add_scaled(cache.residual1, 1.0, attn_out);
    cache.h1 = layer_norm_forward(cache.residual1, layer.ln1, &cache.ln1);

    auto [ff_pre, f1c] = linear_forward(cache.h1, layer.ff1, model.store);
    cache.ff1 = std::move(f1c);
    cache.ff_pre = std::move(ff_pre);
    cache.ff_act = DenseTensor(cache.ff_pre.shape());
    for (int64_t i = 0; i < cache.ff_pre.size(); ++i) cache.ff_act[i] = gelu(cache.ff_pre[i]);

    auto [ffn_out, f2c] = linear_forward(cache.ff_act, layer.ff2, model.store);
    cache.ff2 = std::move(f2c);

    cache.residual2 = cache.h1;
    add_scaled(cache.residual2, 1.0, ffn_out);
    cache.h2 = layer_norm_forward(cache.residual2, layer.ln2, &cache.ln2);
    return cache;
}

}  // namespace

ForwardCache model_forward(const ToyTransformer& model, const TokenBatch& tokens) {
    const ModelConfig& cfg = model.config;
    if (tokens.seq > cfg.max_seq_len)
        throw ShapeMismatch("sequence length exceeds max_seq_len");
    for (int32_t id : tokens.ids)
        if (id < 0 || id >= cfg.vocab_size) throw ShapeMismatch("token id out of vocabulary");

    ForwardCache cache;
    cache.tokens = tokens;
    const int64_t rows = static_cast<int64_t>(tokens.batch) * tokens.seq;
    cache.x0 = DenseTensor({rows, cfg.hidden});
    for (int b = 0; b < tokens.batch; ++b)
        for (int t = 0; t < tokens.seq; ++t) {
            const int64_t r = static_cast<int64_t>(b) * tokens.seq + t;
            const double* emb = model.token_embedding.data() +
                                static_cast<int64_t>(tokens.at(b, t)) * cfg.hidden;
            const double* pos = model.position_embedding.data() + static_cast<int64_t>(t) * cfg.hidden;
            double* dst = cache.x0.data() + r * cfg.hidden;
            for (int j = 0; j < cfg.hidden; ++j) dst[j] = emb[j] + pos[j];
        }

    const DenseTensor* x = &cache.x0;
    for (int depth = 0; depth < cfg.layers; ++depth) {
        cache.layer_caches.push_back(
            run_layer_forward(model, model.physical_layer(depth), *x, tokens.batch, tokens.seq));
        x = &cache.layer_caches.back().h2;
    }
    cache.final_hidden = *x;

    // Tied output head: logits = hidden * embedding^T + output bias.
    DenseTensor logits = matmul(cache.final_hidden, transpose(model.token_embedding));
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t jv = 0; jv < cfg.vocab_size; ++jv)
            logits[r * cfg.vocab_size + jv] += model.output_bias[jv];
    cache.logits = reshape(std::move(logits), {tokens.batch, tokens.seq, cfg.vocab_size});
    return cache;
}

DenseTensor layer_forward(const ToyTransformer& model, const DenseTensor& x, int depth_index) {
    if (x.rank() != 3 || x.extent(2) != model.config.hidden)
        throw ShapeMismatch("layer_forward expects batch x seq x hidden input");
    const int batch = static_cast<int>(x.extent(0));
    const int seq = static_cast<int>(x.extent(1));
    const DenseTensor flat = reshape(x, {static_cast<int64_t>(batch) * seq, model.config.hidden});
    LayerCache cache =
        run_layer_forward(model, model.physical_layer(depth_index), flat, batch, seq);
    return reshape(cache.h2, {batch, seq, model.config.hidden});
}

DenseTensor& ModelGrads::at(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("no gradient slot named " + name);
    return it->second;
}

void ModelGrads::for_each(const std::function<void(const std::string&, DenseTensor&)>& fn) {
    for (auto& [name, value] : by_name) fn(name, value);
}

double ModelGrads::global_norm() const {
    double acc = 0.0;
    for (const auto& [name, value] : by_name)
        for (int64_t i = 0; i < value.size(); ++i) acc += value[i] * value[i];
    return std::sqrt(acc);
}

void ModelGrads::scale_all(double factor) {
    for (auto& [name, value] : by_name) scale_inplace(value, factor);
}

ModelGrads zero_grads_like(const ToyTransformer& model) {
    ModelGrads grads;
    model.for_each_param([&grads](const std::string& name, const DenseTensor& value) {
        grads.by_name.emplace(name, DenseTensor(value.shape()));
    });
    return grads;
}

namespace {

// Routes a LinearGrads bundle into the named accumulator slots.
void accumulate_linear(ModelGrads& grads, const ToyTransformer& model, int physical,
                       int logical_depth, Role role, const LinearGrads& lg) {
    const std::string prefix = layer_prefix(physical, role);
    const int group = model.store.group_of(logical_depth);
    add_scaled(grads.at(central_name(role, group)), 1.0, lg.d_central);
    for (size_t a = 0; a < lg.d_aux.size(); ++a)
        add_scaled(grads.at(prefix + ".aux" + std::to_string(a)), 1.0, lg.d_aux[a]);
    const bool has_adapter =
        model.layers[static_cast<size_t>(physical)].linear(role).adapter.has_value();
    if (has_adapter) {
        add_scaled(grads.at(prefix + ".adapter_u"), 1.0, lg.d_u);
        add_scaled(grads.at(prefix + ".adapter_d"), 1.0, lg.d_d);
    }
    add_scaled(grads.at(prefix + ".bias"), 1.0, lg.d_bias);
}

}  // namespace

ModelGrads model_backward(const ToyTransformer& model, const ForwardCache& cache,
                          const DenseTensor& grad_logits) {
    const ModelConfig& cfg = model.config;
    const TokenBatch& tokens = cache.tokens;
    const int64_t rows = static_cast<int64_t>(tokens.batch) * tokens.seq;
    if (grad_logits.size() != rows * cfg.vocab_size)
        throw ShapeMismatch("grad_logits does not match forward logits");

    ModelGrads grads = zero_grads_like(model);

    const DenseTensor grad_logits_mat = reshape(grad_logits, {rows, cfg.vocab_size});

    // Tied head: d hidden = dlogits * E; dE += dlogits^T * hidden; d bias = colsum.
    DenseTensor dx = matmul(grad_logits_mat, model.token_embedding);
    add_scaled(grads.at("token_embedding"), 1.0,
               matmul(transpose(grad_logits_mat), cache.final_hidden));
    {
        DenseTensor& d_out_bias = grads.at("output_bias");
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t jv = 0; jv < cfg.vocab_size; ++jv)
                d_out_bias[jv] += grad_logits_mat[r * cfg.vocab_size + jv];
    }

    const AttnDims dims{tokens.batch, tokens.seq, cfg.heads, cfg.hidden / cfg.heads, cfg.hidden};

    for (int depth = cfg.layers - 1; depth >= 0; --depth) {
        const LayerCache& lc = cache.layer_caches[static_cast<size_t>(depth)];
        const TransformerLayer& layer = model.physical_layer(depth);
        const int physical = model.tied_layers ? 0 : depth;
        const std::string lp = "layer" + std::to_string(physical);

        // Second sublayer: h2 = LN2(h1 + FF2(gelu(FF1(h1)))).
        DenseTensor d_res2 = layer_norm_backward(dx, lc.ln2, layer.ln2,
                                                 grads.at(lp + ".ln2.gamma"),
                                                 grads.at(lp + ".ln2.beta"));
        DenseTensor dh1 = d_res2;

        LinearGrads ff2_grads = linear_backward(d_res2, lc.ff2, layer.ff2, model.store);
        accumulate_linear(grads, model, physical, depth, Role::FfnOut, ff2_grads);

        DenseTensor d_ff_pre = std::move(ff2_grads.dx);
        for (int64_t i = 0; i < d_ff_pre.size(); ++i)
            d_ff_pre[i] *= gelu_derivative(lc.ff_pre[i]);

        LinearGrads ff1_grads = linear_backward(d_ff_pre, lc.ff1, layer.ff1, model.store);
        accumulate_linear(grads, model, physical, depth, Role::FfnIn, ff1_grads);
        add_scaled(dh1, 1.0, ff1_grads.dx);

        // First sublayer: h1 = LN1(x_in + O(attention(x_in))).
        DenseTensor d_res1 = layer_norm_backward(dh1, lc.ln1, layer.ln1,
                                                 grads.at(lp + ".ln1.gamma"),
                                                 grads.at(lp + ".ln1.beta"));
        DenseTensor dx_in = d_res1;

        LinearGrads o_grads = linear_backward(d_res1, lc.o, layer.o, model.store);
        accumulate_linear(grads, model, physical, depth, Role::AttnOut, o_grads);

        DenseTensor dq, dk, dv;
        attention_backward(o_grads.dx, lc.probs, lc.q_val, lc.k_val, lc.v_val, dims, dq, dk, dv);

        LinearGrads q_grads = linear_backward(dq, lc.q, layer.q, model.store);
        accumulate_linear(grads, model, physical, depth, Role::Query, q_grads);
        add_scaled(dx_in, 1.0, q_grads.dx);
        LinearGrads k_grads = linear_backward(dk, lc.k, layer.k, model.store);
        accumulate_linear(grads, model, physical, depth, Role::Key, k_grads);
        add_scaled(dx_in, 1.0, k_grads.dx);
        LinearGrads v_grads = linear_backward(dv, lc.v, layer.v, model.store);
        accumulate_linear(grads, model, physical, depth, Role::Value, v_grads);
        add_scaled(dx_in, 1.0, v_grads.dx);

        dx = std::move(dx_in);
    }

    // Embedding lookups.
    DenseTensor& d_tok = grads.at("token_embedding");
    DenseTensor& d_pos = grads.at("position_embedding");
    for (int b = 0; b < tokens.batch; ++b)
        for (int t = 0; t < tokens.seq; ++t) {
            const int64_t r = static_cast<int64_t>(b) * tokens.seq + t;
            const double* src = dx.data() + r * cfg.hidden;
            double* tok_row = d_tok.data() + static_cast<int64_t>(tokens.at(b, t)) * cfg.hidden;
            double* pos_row = d_pos.data() + static_cast<int64_t>(t) * cfg.hidden;
            for (int j = 0; j < cfg.hidden; ++j) {
                tok_row[j] += src[j];
                pos_row[j] += src[j];
            }
        }
    return grads;
}

LossAndGrads model_loss_and_grads(const ToyTransformer& model, const TokenBatch& corrupted,
                                  const std::vector<int32_t>& labels) {
    ForwardCache cache = model_forward(model, corrupted);
    LossAndGrads out;
    out.loss = mlm_loss(cache.logits, labels);
    const DenseTensor grad_logits = mlm_loss_backward(cache.logits, labels);
    out.grads = model_backward(model, cache, grad_logits);
    out.logits = cache.logits;
    return out;
}

void sgd_step(ToyTransformer& model, ModelGrads& grads, double eta,
              std::optional<double> clip_norm) {
    if (clip_norm) {
        const double norm = grads.global_norm();
        if (norm > *clip_norm && norm > 0.0) grads.scale_all(*clip_norm / norm);
    }
    model.for_each_param([&grads, eta](const std::string& name, DenseTensor& value) {
        add_scaled(value, -eta, grads.at(name));
    });
}

double model_update_norm(const ToyTransformer& model, const TokenBatch& corrupted,
                         const std::vector<int32_t>& labels, double eta) {
    ForwardCache before = model_forward(model, corrupted);
    const DenseTensor grad_logits = mlm_loss_backward(before.logits, labels);
    ModelGrads grads = model_backward(model, before, grad_logits);

    ToyTransformer stepped = model;
    sgd_step(stepped, grads, eta);
    ForwardCache after = model_forward(stepped, corrupted);

    double acc = 0.0;
    for (int64_t i = 0; i < before.logits.size(); ++i) {
        const double d = after.logits[i] - before.logits[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

ParamBreakdown model_param_breakdown(const ToyTransformer& model) {
    const ModelConfig& cfg = model.config;
    ParamBreakdown out;
    out.groups = cfg.effective_groups();
    out.layers = cfg.layers;

    const TransformerLayer& sample = model.layers.front();
    for (Role role : all_roles()) {
        const MpoLinear& linear = sample.linear(role);
        const int64_t central =
            model.store.central(CentralKey{role, 0}).size();
        int64_t aux = 0;
        for (const DenseTensor& core : linear.aux) aux += core.size();
        const int64_t adapter =
            linear.adapter ? linear.adapter->u.size() + linear.adapter->d.size() : 0;
        const int64_t bias = linear.bias.size();

        out.central_per_layer += central;
        out.shared_central_total += out.groups * central + out.layers * (aux + adapter + bias);
        out.unshared_total += out.layers * (central + aux + adapter + bias);
        out.all_shared_total += central + aux + adapter + bias;
    }
    out.embedding_params = model.token_embedding.size() + model.position_embedding.size() +
                           model.output_bias.size();
    out.layernorm_params = out.layers * 4 * cfg.hidden;
    return out;
}

}  // namespace mpo
