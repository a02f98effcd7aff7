#include "lilac/specialization.hpp"

#include <algorithm>
#include <stdexcept>

namespace lilac::specialization {

using model::Arch;
using model::ModulePath;

std::map<std::string, SelectionStrategy> named_strategies(Arch arch, int layers) {
    std::map<std::string, SelectionStrategy> out;
    auto add = [&](const std::string& name, std::vector<ModulePath> paths) {
        std::sort(paths.begin(), paths.end());
        paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
        for (const ModulePath& p : paths) model::validate_module_path(p, layers);
        out.emplace(name, SelectionStrategy{name, std::move(paths)});
    };
    auto layer_paths = [&](int layer) {
        std::vector<ModulePath> ps;
        for (const std::string& k : model::module_kinds(arch)) ps.push_back({arch, layer, k});
        return ps;
    };
    auto kind_paths = [&](const std::string& kind) {
        std::vector<ModulePath> ps;
        for (int l = 0; l < layers; ++l) ps.push_back({arch, l, kind});
        return ps;
    };

    add("monolithic", {});
    std::vector<ModulePath> all;
    for (int l = 0; l < layers; ++l)
        for (const ModulePath& p : layer_paths(l)) all.push_back(p);
    add("expert", all);
    add("first-layer", layer_paths(0));
    add("last-layer", layer_paths(layers - 1));

    if (arch == Arch::kTransformer) {
        add("all-ffn1", kind_paths("ffn1"));
        add("all-attn", kind_paths("attn"));
        add("norm1", kind_paths("norm1"));
        add("norm2", kind_paths("norm2"));
        std::vector<ModulePath> norms = kind_paths("norm1");
        for (const ModulePath& p : kind_paths("norm2")) norms.push_back(p);
        add("norm1+norm2", norms);
    } else {
        add("conv-last-layer", {{arch, layers - 1, "conv1"}, {arch, layers - 1, "conv2"}});
        std::vector<ModulePath> bns = kind_paths("bn1");
        for (const ModulePath& p : kind_paths("bn2")) bns.push_back(p);
        add("bn-all", bns);
        add("mod-gamma", kind_paths("mod_gamma"));
        add("mod-beta", kind_paths("mod_beta"));
    }
    return out;
}

ParameterBank::ParameterBank(model::VlModel& m, SelectionStrategy strategy)
    : model_(m), strategy_(std::move(strategy)) {
    std::sort(strategy_.paths.begin(), strategy_.paths.end());
    strategy_.paths.erase(std::unique(strategy_.paths.begin(), strategy_.paths.end()),
                          strategy_.paths.end());
    for (const ModulePath& p : strategy_.paths) {
        model::validate_module_path(p, m.config().layers);
        if (p.arch != m.config().arch)
            throw std::invalid_argument("strategy arch does not match model: " + p.str());
        for (const std::string& id : m.module_param_ids(p)) selected_.insert(id);
    }
    for (const ParamPtr& p : m.fusion_params())
        if (p->trainable) naturally_trainable_.insert(p->id);
    store_init_snapshot();
}

void ParameterBank::store_init_snapshot() {
    init_snapshot_.clear();
    init_copies_.clear();
    for (const std::string& id : selected_) {
        init_snapshot_[id] = model_.param(id)->value;
        auto p = std::make_shared<Parameter>(id, init_snapshot_[id]);
        p->trainable = false;
        init_copies_.emplace(id, std::move(p));
    }
}

std::vector<int> ParameterBank::instantiated_tasks() const { return task_order_; }

void ParameterBank::instantiate_task(int task_id, InitMode mode, Rng* rng) {
    if (per_task_.count(task_id)) throw std::logic_error("task already instantiated");
    std::map<std::string, ParamPtr> copies;
    if (mode == InitMode::kRandom) {
        if (rng == nullptr) throw std::invalid_argument("random init requires an rng");
        model::VlModel fresh(model_.config(), rng->fork(static_cast<std::uint64_t>(task_id)));
        for (const std::string& id : selected_) {
            auto p = std::make_shared<Parameter>(id, fresh.param(id)->value);
            p->trainable = naturally_trainable_.count(id) > 0;
            copies.emplace(id, std::move(p));
        }
    } else {
        for (const std::string& id : selected_) {
            Tensor src;
            if (mode == InitMode::kCopyInit) {
                src = init_snapshot_.at(id);
            } else {
                if (task_order_.empty()) throw std::logic_error("copy-previous with no prior task");
                src = per_task_.at(task_order_.back()).at(id)->value;
            }
            auto p = std::make_shared<Parameter>(id, std::move(src));
            p->trainable = naturally_trainable_.count(id) > 0;
            copies.emplace(id, std::move(p));
        }
    }
    per_task_.emplace(task_id, std::move(copies));
    task_order_.push_back(task_id);
}

void ParameterBank::bind(int task_id) {
    auto it = per_task_.find(task_id);
    if (it == per_task_.end()) throw std::out_of_range("unknown task id in bind");
    for (const auto& [id, p] : it->second) model_.set_param(id, p);
    bound_ = task_id;
}

void ParameterBank::bind_init() {
    for (const auto& [id, p] : init_copies_) model_.set_param(id, p);
    bound_ = 0;
}

void ParameterBank::freeze_set(const std::string& which) {
    if (which != "shared" && which != "task")
        throw std::invalid_argument("freeze_set expects 'shared' or 'task'");
    bool freeze_shared = which == "shared";
    // Shared partition: the model's fusion parameters outside S.
    for (const ParamPtr& p : shared_params())
        p->trainable = !freeze_shared && naturally_trainable_.count(p->id) > 0;
    // Task partition: every instantiated copy (bound or not).
    for (auto& [task, copies] : per_task_)
        for (auto& [id, p] : copies)
            p->trainable = freeze_shared && naturally_trainable_.count(id) > 0;
}

void ParameterBank::unfreeze_all() {
    for (const ParamPtr& p : shared_params())
        p->trainable = naturally_trainable_.count(p->id) > 0;
    for (auto& [task, copies] : per_task_)
        for (auto& [id, p] : copies) p->trainable = naturally_trainable_.count(id) > 0;
}

std::vector<ParamPtr> ParameterBank::shared_params() const {
    std::vector<ParamPtr> out;
    for (const ParamPtr& p : model_.fusion_params())
        if (!selected_.count(p->id)) out.push_back(p);
    return out;
}

std::vector<ParamPtr> ParameterBank::task_params(int task_id) const {
    auto it = per_task_.find(task_id);
    if (it == per_task_.end()) throw std::out_of_range("unknown task id");
    std::vector<ParamPtr> out;
    for (const auto& [id, p] : it->second) out.push_back(p);
    return out;
}

std::int64_t ParameterBank::selected_param_count() const {
    std::int64_t n = 0;
    for (const std::string& id : selected_) n += model_.param(id)->value.numel();
    return n;
}

std::int64_t ParameterBank::total_param_count() const {
    std::int64_t n = 0;
    for (const ParamPtr& p : shared_params()) n += p->value.numel();
    for (const auto& [task, copies] : per_task_)
        for (const auto& [id, p] : copies) n += p->value.numel();
    return n;
}

}  // namespace lilac::specialization
