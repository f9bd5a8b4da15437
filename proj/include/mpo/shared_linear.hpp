#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpo/mpo.hpp"
#include "mpo/tensor.hpp"

namespace mpo {

/// The six matrix roles of a transformer layer.
enum class Role { Query, Key, Value, AttnOut, FfnIn, FfnOut };

constexpr int kNumRoles = 6;
const char* role_name(Role role);
Role role_from_name(const std::string& name);
std::vector<Role> all_roles();

struct CentralKey {
    Role role;
    int group;
    auto operator<=>(const CentralKey&) const = default;
};

/// Registry of shared central tensors keyed by (matrix role, layer group),
/// plus the layer -> group assignment.
class SharedCentralStore {
public:
    void set_group_map(std::vector<int> group_of) { group_of_ = std::move(group_of); }
    const std::vector<int>& group_map() const { return group_of_; }

    int group_of(int layer) const;
    int num_groups() const;

    bool has(const CentralKey& key) const { return entries_.count(key) > 0; }
    const DenseTensor& central(const CentralKey& key) const;
    DenseTensor& central_mut(const CentralKey& key);
    void insert(const CentralKey& key, DenseTensor value) { entries_[key] = std::move(value); }

    const std::map<CentralKey, DenseTensor>& entries() const { return entries_; }
    std::map<CentralKey, DenseTensor>& entries_mut() { return entries_; }

private:
    std::map<CentralKey, DenseTensor> entries_;
    std::vector<int> group_of_;
};

/// Contiguous layer groups with sizes differing by at most one, earlier
/// groups no smaller than later ones.
std::vector<int> assign_groups(int num_layers, int num_groups);

/// L * r * (d_in + d_out).
int64_t adapter_param_count(int64_t num_layers, int64_t rank, int64_t d_in, int64_t d_out);

/// Low-rank additive correction W_adapter = u * d. u starts all-zero so a
/// fresh adapter contributes nothing.
struct AdapterPair {
    DenseTensor u;  // d_in x rank
    DenseTensor d;  // rank x d_out
    int64_t rank = 0;
};

/// One layer's view of a weight matrix: layer-owned auxiliary cores, a
/// reference to the shared central, an optional adapter, and a bias.
struct MpoLinear {
    Role role = Role::Query;
    int layer = 0;
    FactorPlan plan;
    int central_pos = 1;  // 1-based position of the central core
    std::vector<DenseTensor> aux;
    std::optional<AdapterPair> adapter;
    DenseTensor bias;
    int64_t d_in = 0;
    int64_t d_out = 0;

    CentralKey central_key(const SharedCentralStore& store) const {
        return CentralKey{role, store.group_of(layer)};
    }

    /// Full core chain with the shared central inserted at its position.
    std::vector<DenseTensor> chain(const DenseTensor& central) const;

    /// W_eff = reconstruct(chain) + u * d.
    DenseTensor effective_weight(const SharedCentralStore& store) const;
};

struct LinearCache {
    DenseTensor x;      // batch x d_in
    DenseTensor w_eff;  // d_in x d_out
    int64_t d_in = 0;
    int64_t d_out = 0;
    bool valid = false;
};

struct LinearGrads {
    DenseTensor dx;
    DenseTensor d_central;
    std::vector<DenseTensor> d_aux;
    DenseTensor d_u;
    DenseTensor d_d;
    DenseTensor d_bias;
};

/// y = x * W_eff + bias (bias broadcast over the batch axis).
std::pair<DenseTensor, LinearCache> linear_forward(const DenseTensor& x, const MpoLinear& layer,
                                                   const SharedCentralStore& store);

/// Chain rule through the reconstruction: dW = x^T dy, core gradients by
/// contracting dW against every other core, adapter gradients dU = dW D^T and
/// dD = U^T dW, bias gradient = column sums of dy.
LinearGrads linear_backward(const DenseTensor& grad_y, const LinearCache& cache,
                            const MpoLinear& layer, const SharedCentralStore& store);

/// Gradients of the chain reconstruction with respect to each core, given the
/// gradient of the reconstructed (d_in x d_out) matrix.
std::vector<DenseTensor> chain_core_gradients(const DenseTensor& grad_w,
                                              const std::vector<DenseTensor>& cores,
                                              const FactorPlan& plan);

}  // namespace mpo
