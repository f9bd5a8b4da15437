#include "mpo/shared_linear.hpp"

#include <algorithm>

namespace mpo {

const char* role_name(Role role) {
    switch (role) {
        case Role::Query: return "q";
        case Role::Key: return "k";
        case Role::Value: return "v";
        case Role::AttnOut: return "o";
        case Role::FfnIn: return "ff1";
        case Role::FfnOut: return "ff2";
    }
    return "?";
}

Role role_from_name(const std::string& name) {
    for (Role role : all_roles())
        if (name == role_name(role)) return role;
    throw Error("unknown role name: " + name);
}

std::vector<Role> all_roles() {
    return {Role::Query, Role::Key, Role::Value, Role::AttnOut, Role::FfnIn, Role::FfnOut};
}

int SharedCentralStore::group_of(int layer) const {
    if (layer < 0 || layer >= static_cast<int>(group_of_.size()))
        throw InvalidGroupCount("layer " + std::to_string(layer) + " has no group assignment");
    return group_of_[static_cast<size_t>(layer)];
}

int SharedCentralStore::num_groups() const {
    int highest = -1;
    for (int g : group_of_) highest = std::max(highest, g);
    return highest + 1;
}

const DenseTensor& SharedCentralStore::central(const CentralKey& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end())
        throw MissingCentral(std::string("no central for role ") + role_name(key.role) +
                             " group " + std::to_string(key.group));
    return it->second;
}

DenseTensor& SharedCentralStore::central_mut(const CentralKey& key) {
    auto it = entries_.find(key);
    if (it == entries_.end())
        throw MissingCentral(std::string("no central for role ") + role_name(key.role) +
                             " group " + std::to_string(key.group));
    return it->second;
}

std::vector<int> assign_groups(int num_layers, int num_groups) {
    if (num_groups < 1 || num_groups > num_layers)
        throw InvalidGroupCount("need 1 <= groups <= layers, got " + std::to_string(num_groups) +
                                " groups for " + std::to_string(num_layers) + " layers");
    const int base = num_layers / num_groups;
    const int larger = num_layers % num_groups;
    std::vector<int> group_of;
    group_of.reserve(static_cast<size_t>(num_layers));
    for (int g = 0; g < num_groups; ++g) {
        const int size = base + (g < larger ? 1 : 0);
        for (int i = 0; i < size; ++i) group_of.push_back(g);
    }
    return group_of;
}

int64_t adapter_param_count(int64_t num_layers, int64_t rank, int64_t d_in, int64_t d_out) {
    return num_layers * rank * (d_in + d_out);
}

std::vector<DenseTensor> MpoLinear::chain(const DenseTensor& central) const {
    std::vector<DenseTensor> cores;
    cores.reserve(aux.size() + 1);
    size_t next_aux = 0;
    const int n = static_cast<int>(aux.size()) + 1;
    for (int k = 1; k <= n; ++k) {
        if (k == central_pos)
            cores.push_back(central);
        else
            cores.push_back(aux[next_aux++]);
    }
    return cores;
}

DenseTensor MpoLinear::effective_weight(const SharedCentralStore& store) const {
    MpoTensorSet set{chain(store.central(central_key(store))), plan};
    DenseTensor w = mpo_reconstruct(set);
    if (adapter) {
        const DenseTensor correction = matmul(adapter->u, adapter->d);
        add_scaled(w, 1.0, correction);
    }
    return w;
}

std::pair<DenseTensor, LinearCache> linear_forward(const DenseTensor& x, const MpoLinear& layer,
                                                   const SharedCentralStore& store) {
    if (x.rank() != 2 || x.cols() != layer.d_in)
        throw ShapeMismatch("linear_forward input " + x.shape_string() + " does not match d_in=" +
                            std::to_string(layer.d_in));
    LinearCache cache;
    cache.w_eff = layer.effective_weight(store);
    cache.x = x;
    cache.d_in = layer.d_in;
    cache.d_out = layer.d_out;
    cache.valid = true;

    DenseTensor y = matmul(x, cache.w_eff);
    const int64_t batch = y.rows();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t j = 0; j < layer.d_out; ++j) y[b * layer.d_out + j] += layer.bias[j];
    return {std::move(y), std::move(cache)};
}

std::vector<DenseTensor> chain_core_gradients(const DenseTensor& grad_w,
                                              const std::vector<DenseTensor>& cores,
                                              const FactorPlan& plan) {
    const int n = plan.order();
    const DenseTensor grad_int = interleave(reshape_mixed_radix(grad_w, plan), n);

    std::vector<int64_t> site(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k)
        site[static_cast<size_t>(k)] =
            plan.row_factors[static_cast<size_t>(k)] * plan.col_factors[static_cast<size_t>(k)];

    // left_env[k]: (prod of sites < k) x d_{k-1}; right_env[k]: d_k x (prod of sites > k).
    std::vector<DenseTensor> left_env(static_cast<size_t>(n));
    std::vector<DenseTensor> right_env(static_cast<size_t>(n));
    left_env[0] = DenseTensor({1, 1}, {1.0});
    int64_t left_sites = 1;
    for (int k = 1; k < n; ++k) {
        const DenseTensor& core = cores[static_cast<size_t>(k - 1)];
        const int64_t d_prev = core.extent(0), d_next = core.extent(3);
        DenseTensor folded = matmul(left_env[static_cast<size_t>(k - 1)],
                                    reshape(core, {d_prev, site[static_cast<size_t>(k - 1)] * d_next}));
        left_sites *= site[static_cast<size_t>(k - 1)];
        left_env[static_cast<size_t>(k)] = reshape(std::move(folded), {left_sites, d_next});
    }
    right_env[static_cast<size_t>(n - 1)] = DenseTensor({1, 1}, {1.0});
    int64_t right_sites = 1;
    for (int k = n - 2; k >= 0; --k) {
        const DenseTensor& core = cores[static_cast<size_t>(k + 1)];
        const int64_t d_prev = core.extent(0), d_next = core.extent(3);
        const int64_t s = site[static_cast<size_t>(k + 1)];
        DenseTensor folded = matmul(reshape(core, {d_prev * s, d_next}),
                                    right_env[static_cast<size_t>(k + 1)]);
        right_sites *= s;
        right_env[static_cast<size_t>(k)] = reshape(std::move(folded), {d_prev, right_sites});
    }

    std::vector<DenseTensor> grads;
    grads.reserve(static_cast<size_t>(n));
    int64_t sites_before = 1;
    for (int k = 0; k < n; ++k) {
        const int64_t s_k = site[static_cast<size_t>(k)];
        int64_t sites_after = 1;
        for (int m = k + 1; m < n; ++m) sites_after *= site[static_cast<size_t>(m)];
        const DenseTensor g3 = reshape(grad_int, {sites_before, s_k, sites_after});

        // t1[d_{k-1}, s_k, sites_after] = sum_ls L[ls, d] g3[ls, s, rs]
        const DenseTensor t1 = contract(left_env[static_cast<size_t>(k)], g3, {0}, {0});
        // grad[d_{k-1}, s_k, d_k] = sum_rs t1[d, s, rs] R[dk, rs]
        const DenseTensor g = contract(t1, right_env[static_cast<size_t>(k)], {2}, {1});
        grads.push_back(reshape(g, {cores[static_cast<size_t>(k)].extent(0),
                                    plan.row_factors[static_cast<size_t>(k)],
                                    plan.col_factors[static_cast<size_t>(k)],
                                    cores[static_cast<size_t>(k)].extent(3)}));
        sites_before *= s_k;
    }
    return grads;
}

LinearGrads linear_backward(const DenseTensor& grad_y, const LinearCache& cache,
                            const MpoLinear& layer, const SharedCentralStore& store) {
    if (!cache.valid || cache.d_in != layer.d_in || cache.d_out != layer.d_out)
        throw StaleCache("linear_backward cache does not match layer");
    if (grad_y.rank() != 2 || grad_y.rows() != cache.x.rows() || grad_y.cols() != layer.d_out)
        throw ShapeMismatch("grad_y shape " + grad_y.shape_string() + " does not match forward");

    LinearGrads grads;
    grads.dx = matmul(grad_y, transpose(cache.w_eff));
    const DenseTensor grad_w = matmul(transpose(cache.x), grad_y);

    const DenseTensor& central = store.central(layer.central_key(store));
    std::vector<DenseTensor> core_grads =
        chain_core_gradients(grad_w, layer.chain(central), layer.plan);
    const int n = static_cast<int>(core_grads.size());
    for (int k = 1; k <= n; ++k) {
        if (k == layer.central_pos)
            grads.d_central = std::move(core_grads[static_cast<size_t>(k - 1)]);
        else
            grads.d_aux.push_back(std::move(core_grads[static_cast<size_t>(k - 1)]));
    }

    if (layer.adapter) {
        grads.d_u = matmul(grad_w, transpose(layer.adapter->d));
        grads.d_d = matmul(transpose(layer.adapter->u), grad_w);
    }

    grads.d_bias = DenseTensor({layer.d_out});
    for (int64_t b = 0; b < grad_y.rows(); ++b)
        for (int64_t j = 0; j < layer.d_out; ++j) grads.d_bias[j] += grad_y[b * layer.d_out + j];
    return grads;
}

}  // namespace mpo
