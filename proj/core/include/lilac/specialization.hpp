#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "lilac/model.hpp"

namespace lilac::specialization {

struct SelectionStrategy {
    std::string name;
    std::vector<model::ModulePath> paths;  // kept sorted, duplicate-free
};

// Built-in strategies for an architecture; keys are the CLI names.
std::map<std::string, SelectionStrategy> named_strategies(model::Arch arch, int layers = 4);

enum class InitMode { kCopyInit, kCopyPrevious, kRandom };

// Holds the shared parameters θ^{M\S} (the model's own fusion parameters
// outside S) plus one copy of the selected modules per task, and swaps the
// selected copies into the model on bind().
class ParameterBank {
public:
    ParameterBank(model::VlModel& m, SelectionStrategy strategy);

    const SelectionStrategy& strategy() const { return strategy_; }

    // Records the current values of the selected modules as the init
    // snapshot used by copy-init instantiation.
    void store_init_snapshot();
    const std::map<std::string, Tensor>& init_snapshot() const { return init_snapshot_; }

    bool has_task(int task_id) const { return per_task_.count(task_id) > 0; }
    std::vector<int> instantiated_tasks() const;

    // rng is required for InitMode::kRandom (fresh random module init).
    void instantiate_task(int task_id, InitMode mode, Rng* rng = nullptr);

    void bind(int task_id);
    // Restores the init-snapshot values of the selected modules (used when
    // evaluating a task that has no copy yet). Never trainable.
    void bind_init();
    int bound_task() const { return bound_; }

    // "shared": freeze θ^{M\S}, unfreeze θ^S_t (adaptation phase).
    // "task":   freeze θ^S_t, unfreeze θ^{M\S} (consolidation phase).
    // Only parameters that are naturally trainable are ever unfrozen.
    void freeze_set(const std::string& which);
    // Joint training: both partitions trainable (naturally trainable only).
    void unfreeze_all();

    std::vector<ParamPtr> shared_params() const;
    std::vector<ParamPtr> task_params(int task_id) const;
    const std::set<std::string>& selected_ids() const { return selected_; }

    std::int64_t selected_param_count() const;
    std::int64_t total_param_count() const;  // shared fusion + all task copies

private:
    model::VlModel& model_;
    SelectionStrategy strategy_;
    std::set<std::string> selected_;            // fusion param ids under S
    std::set<std::string> naturally_trainable_; // excludes bn running stats
    std::map<std::string, Tensor> init_snapshot_;
    std::map<std::string, ParamPtr> init_copies_;  // frozen, for bind_init()
    std::map<int, std::map<std::string, ParamPtr>> per_task_;
    std::vector<int> task_order_;
    int bound_ = -1;
};

}  // namespace lilac::specialization
