#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lilac/analysis.hpp"
#include "lilac/data.hpp"
#include "lilac/model.hpp"
#include "lilac/ops.hpp"
#include "lilac/specialization.hpp"

namespace lilac::trainer {

struct ACSchedule {
    int adaptation_epochs = 30;  // desk profile: 12
    int adapt_freq = 6;          // consolidation at e mod adapt_freq == 0
};

struct TrainConfig {
    int batch_size = 32;          // paper profile: 128
    float temperature = 0.5f;     // InfoNCE τ
    float init_lr = 4.5e-4f;
    float lr = 6e-4f;             // continual phase
    int init_epochs = 10;
    ACSchedule schedule{12, 6};
    // Joint baselines get the same total epoch budget as A&C
    // (adaptation epochs + consolidation epochs).
    int joint_epochs() const {
        return schedule.adaptation_epochs + schedule.adaptation_epochs / schedule.adapt_freq;
    }
    float ewc_lambda_ac = 20000.0f;
    float ewc_lambda_joint = 2000.0f;  // 3D: 600
    float ewc_discount = 0.9f;
    int buffer_capacity = 3000;
};

struct EpochLog {
    std::string run_id;
    int task = 0;
    int epoch = 0;
    std::string phase;  // adapt | consolidate | joint
    double loss = 0.0;
    float lr = 0.0f;
};

std::string to_json(const EpochLog& log);
using LogSink = std::function<void(const EpochLog&)>;

// Per-item: −log( exp(s⁺/τ) / (exp(s⁺/τ) + exp(s⁻/τ)) ), s = cosine; batch mean.
Var infonce_loss(Graph& g, Var anchor, Var pos, Var neg, float temperature);

// InfoNCE over a set of examples (mixed token lengths allowed: the set is
// forwarded per length group and the group means recombined by weight).
Var batch_loss(Graph& g, model::VlModel& m, const std::vector<const data::Example*>& examples,
               float temperature, bool train);

// Correct iff cos(anchor, pos) > cos(anchor, neg) strictly; ties incorrect.
bool predict(model::VlModel& m, const data::Example& ex);
double evaluate(model::VlModel& m, const std::vector<data::Example>& test, int batch_size);

// Accuracies on every task's test set; task j is evaluated with its own
// parameter copy when one exists, otherwise with the init snapshot.
std::vector<double> evaluate_stream(model::VlModel& m, specialization::ParameterBank& bank,
                                    const data::TaskStream& stream, int batch_size);

class ReplayBuffer {
public:
    explicit ReplayBuffer(int capacity = 3000);

    void insert(const data::Example& ex, Rng& rng);
    // Uniform without replacement; n > size() is an error.
    std::vector<data::Example> sample(int n, Rng& rng) const;

    int capacity() const { return capacity_; }
    int size() const { return static_cast<int>(items_.size()); }
    long long seen() const { return seen_; }
    const std::vector<data::Example>& items() const { return items_; }

private:
    int capacity_;
    long long seen_ = 0;
    std::vector<data::Example> items_;
};

// Online EWC: after each task F ← discount·F + F_task, anchor ← θ;
// penalty = (λ/2) Σ F_i (w_i − w*_i)².
class FisherState {
public:
    FisherState(float discount = 0.9f, float lambda = 20000.0f)
        : discount_(discount), lambda_(lambda) {}

    // One pass over the task's train set; F_task = batch mean of squared grads.
    void update(model::VlModel& m, const std::vector<ParamPtr>& params,
                const std::vector<data::Example>& train, const TrainConfig& cfg, Rng& rng);
    double penalty(const std::vector<ParamPtr>& params) const;
    // Adds λ·F·(w − w*) to each parameter's gradient; returns the penalty.
    double apply_to_grads(const std::vector<ParamPtr>& params) const;

    // Direct entry injection for synthetic penalty checks.
    void set_entry(const std::string& id, Tensor fisher, Tensor anchor);

    float lambda() const { return lambda_; }
    const std::map<std::string, Tensor>& fisher() const { return fisher_; }
    const std::map<std::string, Tensor>& anchor() const { return anchor_; }

private:
    float discount_, lambda_;
    std::map<std::string, Tensor> fisher_, anchor_;
};

// Records the per-module accumulators behind IS_grad / IS_act while a run
// trains; observe_gradients is called after each backward, end_task once per
// finished task (with that task's train set for the activation pass).
class ImportanceTracer {
public:
    explicit ImportanceTracer(model::VlModel& m);

    void observe_gradients();
    void end_task(const std::vector<data::Example>& train, const TrainConfig& cfg);

    const std::map<std::string, analysis::ModuleTrace>& traces() const { return traces_; }

private:
    model::VlModel& model_;
    std::vector<model::ModulePath> modules_;
    std::map<std::string, double> grad_accum_;
    std::map<std::string, analysis::ModuleTrace> traces_;
};

// Extensions injected into training steps (all optional).
struct StepHooks {
    // ER: examples appended to the step's batch (at most n).
    std::function<std::vector<data::Example>(int n, Rng& rng)> replay;
    // EWC: mutate gradients after backward; returns penalty value for the log.
    std::function<double(const std::vector<ParamPtr>&)> penalty;
    // Importance tracing: inspect gradients after backward.
    std::function<void()> observe;
};

// Joint training on the held-out init instructions; freezes g, h, d after.
void train_init(model::VlModel& m, const std::vector<data::Example>& init_set,
                const TrainConfig& cfg, Rng rng, const LogSink& log = {},
                const std::string& run_id = "init");

// Alg. 1: adaptation epochs update only θ^S_t; every adapt_freq-th epoch is
// followed by one consolidation epoch updating only θ^{M\S}. Hooks apply to
// consolidation steps only. Hash-checks the frozen partition every epoch.
void train_ac(model::VlModel& m, specialization::ParameterBank& bank, int task_id,
              const data::TaskData& task, const TrainConfig& cfg, Rng rng,
              const StepHooks& hooks = {}, const LogSink& log = {},
              const std::string& run_id = "run");

// Updates θ^S_t and θ^{M\S} together every step; hooks apply to every step.
void train_joint(model::VlModel& m, specialization::ParameterBank& bank, int task_id,
                 const data::TaskData& task, int epochs, const TrainConfig& cfg, Rng rng,
                 const StepHooks& hooks = {}, const LogSink& log = {},
                 const std::string& run_id = "run");

struct RunConfig {
    model::ModelConfig model;
    TrainConfig train;
    // SFT|ER|EWC|MTL|Expert|strategy|strategy+ER|strategy+EWC|strategy-joint
    // ("strategy-joint" keeps the per-task selection but trains all
    //  parameters jointly every epoch — the Fig. 4 comparison point).
    std::string baseline = "SFT";
    std::string strategy = "all-attn";  // used by the strategy variants
    // Explicit selection; overrides the named strategy when non-empty.
    std::vector<model::ModulePath> custom_paths;
    std::uint64_t seed = 0;
    std::string run_id = "run";
    bool trace_importance = false;
};

struct RunOutput {
    analysis::AccuracyMatrix matrix;
    std::map<std::string, analysis::ModuleTrace> traces;  // keyed by ModulePath::str()
};

RunOutput run_baseline(const RunConfig& cfg, const data::TaskStream& stream,
                       const LogSink& log = {});

}  // namespace lilac::trainer
