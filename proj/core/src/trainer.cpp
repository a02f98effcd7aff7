#include "lilac/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <stdexcept>

namespace lilac::trainer {

namespace {

std::uint64_t hash_values(const std::vector<ParamPtr>& ps) {
    std::uint64_t h = 1469598103934665603ull;
    for (const ParamPtr& p : ps)
        for (float v : p->value.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            h = (h ^ bits) * 1099511628211ull;
        }
    return h;
}

void zero_grads(model::VlModel& m) {
    for (const ParamPtr& p : m.all_params()) p->zero_grad();
}

// Equal-token-length groups in deterministic (length-ascending) order.
std::map<int, std::vector<const data::Example*>> by_length(
    const std::vector<const data::Example*>& examples) {
    std::map<int, std::vector<const data::Example*>> groups;
    for (const data::Example* e : examples) groups[static_cast<int>(e->tokens.size())].push_back(e);
    return groups;
}

void emit(const LogSink& log, const std::string& run_id, int task, int epoch,
          const std::string& phase, double loss, float lr) {
    if (log) log(EpochLog{run_id, task, epoch, phase, loss, lr});
}

// One optimization pass over `order`; returns the mean step loss.
double run_epoch(model::VlModel& m, const std::vector<const data::Example*>& order,
                 const std::vector<ParamPtr>& step_params, const TrainConfig& cfg, float lr,
                 Rng& rng, const StepHooks* hooks) {
    bool mix_replay = hooks && hooks->replay;
    int fresh_per_batch = mix_replay ? std::max(1, cfg.batch_size / 2) : cfg.batch_size;
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(fresh_per_batch)) {
        std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(fresh_per_batch));
        std::vector<const data::Example*> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                                                order.begin() + static_cast<std::ptrdiff_t>(end));
        std::vector<data::Example> replayed;
        if (mix_replay) {
            replayed = hooks->replay(static_cast<int>(batch.size()), rng);
            for (const data::Example& e : replayed) batch.push_back(&e);
        }
        Graph g;
        Var loss = batch_loss(g, m, batch, cfg.temperature, true);
        double value = g.val(loss).at(0);
        g.backward(loss);
        if (hooks && hooks->penalty) value += hooks->penalty(step_params);
        if (hooks && hooks->observe) hooks->observe();
        ops::adam_step(step_params, lr);
        loss_sum += value;
        ++steps;
    }
    return steps ? loss_sum / steps : 0.0;
}

std::vector<const data::Example*> shuffled(const std::vector<data::Example>& xs, Rng& rng) {
    std::vector<const data::Example*> order;
    order.reserve(xs.size());
    for (const data::Example& x : xs) order.push_back(&x);
    rng.shuffle(order);
    return order;
}

}  // namespace

std::string to_json(const EpochLog& log) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "{\"run_id\":\"%s\",\"task\":%d,\"epoch\":%d,\"phase\":\"%s\",\"loss\":%.17g,"
                  "\"lr\":%.9g}",
                  log.run_id.c_str(), log.task, log.epoch, log.phase.c_str(), log.loss,
                  static_cast<double>(log.lr));
    return buf;
}

Var infonce_loss(Graph& g, Var anchor, Var pos, Var neg, float temperature) {
    if (g.val(anchor).shape != g.val(pos).shape || g.val(anchor).shape != g.val(neg).shape)
        throw std::invalid_argument("infonce_loss: embedding shapes differ");
    Var sp = ops::cosine_rows(g, anchor, pos);
    Var sn = ops::cosine_rows(g, anchor, neg);
    // −log σ((s⁺ − s⁻)/τ) = softplus((s⁻ − s⁺)/τ)
    Var margin = ops::affine(g, ops::sub(g, sn, sp), 1.0f / temperature, 0.0f);
    return ops::mean_all(g, ops::softplus(g, margin));
}

Var batch_loss(Graph& g, model::VlModel& m, const std::vector<const data::Example*>& examples,
               float temperature, bool train) {
    if (examples.empty()) throw std::invalid_argument("batch_loss: empty batch");
    auto groups = by_length(examples);
    Var total{-1};
    float n_total = static_cast<float>(examples.size());
    for (const auto& [len, group] : groups) {
        model::Batch b = model::make_batch(group);
        Var anchor = m.forward_premise(g, b.tokens, b.n, b.s, b.premise, train);
        Var pos = m.forward_hypothesis(g, b.positive, train);
        Var neg = m.forward_hypothesis(g, b.negative, train);
        Var l = infonce_loss(g, anchor, pos, neg, temperature);
        Var weighted = ops::affine(g, l, static_cast<float>(group.size()) / n_total, 0.0f);
        total = total.idx < 0 ? weighted : ops::add(g, total, weighted);
    }
    return total;
}

bool predict(model::VlModel& m, const data::Example& ex) {
    model::Batch b = model::make_batch({&ex});
    Graph g;
    Var anchor = m.forward_premise(g, b.tokens, b.n, b.s, b.premise, false);
    Var sp = ops::cosine_rows(g, anchor, m.forward_hypothesis(g, b.positive, false));
    Var sn = ops::cosine_rows(g, anchor, m.forward_hypothesis(g, b.negative, false));
    return g.val(sp).at(0) > g.val(sn).at(0);
}

double evaluate(model::VlModel& m, const std::vector<data::Example>& test, int batch_size) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    std::vector<const data::Example*> ptrs;
    for (const data::Example& e : test) ptrs.push_back(&e);
    long correct = 0;
    for (const auto& [len, group] : by_length(ptrs)) {
        for (std::size_t at = 0; at < group.size(); at += static_cast<std::size_t>(batch_size)) {
            std::size_t end = std::min(group.size(), at + static_cast<std::size_t>(batch_size));
            std::vector<const data::Example*> chunk(group.begin() + static_cast<std::ptrdiff_t>(at),
                                                    group.begin() + static_cast<std::ptrdiff_t>(end));
            model::Batch b = model::make_batch(chunk);
            Graph g;
            Var anchor = m.forward_premise(g, b.tokens, b.n, b.s, b.premise, false);
            Var sp = ops::cosine_rows(g, anchor, m.forward_hypothesis(g, b.positive, false));
            Var sn = ops::cosine_rows(g, anchor, m.forward_hypothesis(g, b.negative, false));
            for (int i = 0; i < b.n; ++i) correct += g.val(sp).at(i) > g.val(sn).at(i);
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::vector<double> evaluate_stream(model::VlModel& m, specialization::ParameterBank& bank,
                                    const data::TaskStream& stream, int batch_size) {
    std::vector<double> accs;
    for (std::size_t j = 0; j < stream.tasks.size(); ++j) {
        int task_id = static_cast<int>(j) + 1;
        if (bank.has_task(task_id))
            bank.bind(task_id);
        else
            bank.bind_init();
        accs.push_back(evaluate(m, stream.tasks[j].test, batch_size));
    }
    return accs;
}

// ReplayBuffer -----------------------------------------------------------------

ReplayBuffer::ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
}

void ReplayBuffer::insert(const data::Example& ex, Rng& rng) {
    ++seen_;
    if (static_cast<int>(items_.size()) < capacity_) {
        items_.push_back(ex);
        return;
    }
    long long slot = static_cast<long long>(rng.uniform() * static_cast<double>(seen_));
    if (slot < capacity_) items_[static_cast<std::size_t>(slot)] = ex;
}

std::vector<data::Example> ReplayBuffer::sample(int n, Rng& rng) const {
    if (n < 0 || n > size()) throw std::invalid_argument("ReplayBuffer::sample: n exceeds size");
    std::vector<int> idx(items_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::vector<data::Example> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {  // partial Fisher-Yates
        int j = i + rng.randint(static_cast<int>(idx.size()) - i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        out.push_back(items_[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
    }
    return out;
}

// FisherState ------------------------------------------------------------------

void FisherState::update(model::VlModel& m, const std::vector<ParamPtr>& params,
                         const std::vector<data::Example>& train, const TrainConfig& cfg,
                         Rng& rng) {
    std::vector<bool> saved;
    for (const ParamPtr& p : params) {
        saved.push_back(p->trainable);
        p->trainable = true;
    }
    zero_grads(m);
    std::map<std::string, Tensor> accum;
    for (const ParamPtr& p : params) accum[p->id] = Tensor::zeros(p->value.shape);

    std::vector<const data::Example*> order = shuffled(train, rng);
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
        std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
        std::vector<const data::Example*> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                                                order.begin() + static_cast<std::ptrdiff_t>(end));
        Graph g;
        g.backward(batch_loss(g, m, batch, cfg.temperature, false));
        for (const ParamPtr& p : params) {
            Tensor& a = accum[p->id];
            for (std::int64_t k = 0; k < a.numel(); ++k) {
                float gk = p->grad.data[static_cast<std::size_t>(k)];
                a.data[static_cast<std::size_t>(k)] += gk * gk;
            }
        }
        zero_grads(m);
        ++batches;
    }
    for (const ParamPtr& p : params) {
        Tensor& a = accum[p->id];
        if (batches > 0)
            for (float& v : a.data) v /= static_cast<float>(batches);
        auto it = fisher_.find(p->id);
        if (it == fisher_.end()) {
            fisher_[p->id] = a;
        } else {
            for (std::int64_t k = 0; k < a.numel(); ++k)
                it->second.data[static_cast<std::size_t>(k)] =
                    discount_ * it->second.data[static_cast<std::size_t>(k)] +
                    a.data[static_cast<std::size_t>(k)];
        }
        anchor_[p->id] = p->value;
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->trainable = saved[i];
}

void FisherState::set_entry(const std::string& id, Tensor fisher, Tensor anchor) {
    if (fisher.shape != anchor.shape)
        throw std::invalid_argument("FisherState::set_entry: shape mismatch");
    fisher_[id] = std::move(fisher);
    anchor_[id] = std::move(anchor);
}

double FisherState::penalty(const std::vector<ParamPtr>& params) const {
    double s = 0.0;
    for (const ParamPtr& p : params) {
        auto f = fisher_.find(p->id);
        if (f == fisher_.end()) continue;
        const Tensor& star = anchor_.at(p->id);
        for (std::int64_t k = 0; k < p->value.numel(); ++k) {
            double d = static_cast<double>(p->value.data[static_cast<std::size_t>(k)]) -
                       star.data[static_cast<std::size_t>(k)];
            s += f->second.data[static_cast<std::size_t>(k)] * d * d;
        }
    }
    return 0.5 * lambda_ * s;
}

double FisherState::apply_to_grads(const std::vector<ParamPtr>& params) const {
    for (const ParamPtr& p : params) {
        auto f = fisher_.find(p->id);
        if (f == fisher_.end() || !p->trainable) continue;
        const Tensor& star = anchor_.at(p->id);
        for (std::int64_t k = 0; k < p->value.numel(); ++k) {
            float d = p->value.data[static_cast<std::size_t>(k)] -
                      star.data[static_cast<std::size_t>(k)];
            p->grad.data[static_cast<std::size_t>(k)] +=
                lambda_ * f->second.data[static_cast<std::size_t>(k)] * d;
        }
    }
    return penalty(params);
}

// ImportanceTracer -------------------------------------------------------------

ImportanceTracer::ImportanceTracer(model::VlModel& m) : model_(m), modules_(m.list_modules()) {
    for (const model::ModulePath& path : modules_) {
        analysis::ModuleTrace& t = traces_[path.str()];
        for (const std::string& id : m.module_param_ids(path))
            t.param_count += m.param(id)->value.numel();
    }
}

void ImportanceTracer::observe_gradients() {
    for (const model::ModulePath& path : modules_) {
        double s = 0.0;
        for (const std::string& id : model_.module_param_ids(path))
            for (float gk : model_.param(id)->grad.data) s += std::fabs(gk);
        grad_accum_[path.str()] += s;
    }
}

void ImportanceTracer::end_task(const std::vector<data::Example>& train, const TrainConfig& cfg) {
    for (const model::ModulePath& path : modules_) {
        double w = 0.0;
        for (const std::string& id : model_.module_param_ids(path))
            for (float v : model_.param(id)->value.data) w += std::fabs(v);
        traces_[path.str()].grad_term.push_back(w + 0.5 * grad_accum_[path.str()]);
        grad_accum_[path.str()] = 0.0;
    }
    // Activation pass: one eval-mode sweep over the task's train set with the
    // post-task parameters.
    std::map<std::string, double> act;
    model_.activation_hook = [&](const model::ModulePath& path, const Tensor& out) {
        double s = 0.0;
        for (float v : out.data) s += std::fabs(v);
        act[path.str()] += s;
    };
    std::vector<const data::Example*> ptrs;
    for (const data::Example& e : train) ptrs.push_back(&e);
    for (const auto& [len, group] : by_length(ptrs)) {
        for (std::size_t at = 0; at < group.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(group.size(), at + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const data::Example*> chunk(group.begin() + static_cast<std::ptrdiff_t>(at),
                                                    group.begin() + static_cast<std::ptrdiff_t>(end));
            model::Batch b = model::make_batch(chunk);
            Graph g;
            model_.forward_premise(g, b.tokens, b.n, b.s, b.premise, false);
        }
    }
    model_.activation_hook = nullptr;
    for (const model::ModulePath& path : modules_)
        traces_[path.str()].act_l1.push_back(act[path.str()]);
}

// Training loops ---------------------------------------------------------------

void train_init(model::VlModel& m, const std::vector<data::Example>& init_set,
                const TrainConfig& cfg, Rng rng, const LogSink& log, const std::string& run_id) {
    if (init_set.empty()) throw std::invalid_argument("train_init: empty init set");
    std::vector<ParamPtr> params = m.all_params();
    for (int e = 1; e <= cfg.init_epochs; ++e) {
        Rng er = rng.fork(static_cast<std::uint64_t>(e));
        std::vector<const data::Example*> order = shuffled(init_set, er);
        double loss = run_epoch(m, order, params, cfg, cfg.init_lr, er, nullptr);
        emit(log, run_id, 0, e, "joint", loss, cfg.init_lr);
    }
    m.freeze_encoders();
}

void train_ac(model::VlModel& m, specialization::ParameterBank& bank, int task_id,
              const data::TaskData& task, const TrainConfig& cfg, Rng rng,
              const StepHooks& hooks, const LogSink& log, const std::string& run_id) {
    if (bank.strategy().paths.empty())
        throw std::invalid_argument("train_ac: empty selection has no adaptable parameters; "
                                    "use train_joint");
    if (bank.bound_task() != task_id) throw std::logic_error("train_ac: task not bound");
    const ACSchedule& sched = cfg.schedule;
    for (int e = 1; e <= sched.adaptation_epochs; ++e) {
        Rng er = rng.fork("adapt").fork(static_cast<std::uint64_t>(e));
        bank.freeze_set("shared");
        std::uint64_t before = hash_values(bank.shared_params());
        std::vector<const data::Example*> order = shuffled(task.train, er);
        double loss = run_epoch(m, order, bank.task_params(task_id), cfg, cfg.lr, er, nullptr);
        if (hash_values(bank.shared_params()) != before)
            throw std::logic_error("train_ac: adaptation epoch mutated shared parameters");
        emit(log, run_id, task_id, e, "adapt", loss, cfg.lr);

        if (e % sched.adapt_freq != 0) continue;
        Rng ce = rng.fork("consolidate").fork(static_cast<std::uint64_t>(e));
        bank.freeze_set("task");
        std::uint64_t task_before = hash_values(bank.task_params(task_id));
        order = shuffled(task.train, ce);
        loss = run_epoch(m, order, bank.shared_params(), cfg, cfg.lr, ce, &hooks);
        if (hash_values(bank.task_params(task_id)) != task_before)
            throw std::logic_error("train_ac: consolidation epoch mutated task parameters");
        emit(log, run_id, task_id, e, "consolidate", loss, cfg.lr);
    }
}

void train_joint(model::VlModel& m, specialization::ParameterBank& bank, int task_id,
                 const data::TaskData& task, int epochs, const TrainConfig& cfg, Rng rng,
                 const StepHooks& hooks, const LogSink& log, const std::string& run_id) {
    if (bank.bound_task() != task_id) throw std::logic_error("train_joint: task not bound");
    bank.unfreeze_all();
    std::vector<ParamPtr> params = bank.shared_params();
    for (const ParamPtr& p : bank.task_params(task_id)) params.push_back(p);
    for (int e = 1; e <= epochs; ++e) {
        Rng er = rng.fork(static_cast<std::uint64_t>(e));
        std::vector<const data::Example*> order = shuffled(task.train, er);
        double loss = run_epoch(m, order, params, cfg, cfg.lr, er, &hooks);
        emit(log, run_id, task_id, e, "joint", loss, cfg.lr);
    }
}

// Baseline harness -------------------------------------------------------------

RunOutput run_baseline(const RunConfig& cfg, const data::TaskStream& stream, const LogSink& log) {
    static const std::set<std::string> kKnown = {"SFT",    "ER",       "EWC",
                                                 "MTL",    "Expert",   "strategy",
                                                 "strategy+ER", "strategy+EWC",
                                                 "strategy-joint"};
    if (!kKnown.count(cfg.baseline))
        throw std::invalid_argument("unknown baseline: " + cfg.baseline);
    bool spec_sel = cfg.baseline.rfind("strategy", 0) == 0;
    bool uses_ac = spec_sel && cfg.baseline != "strategy-joint";
    bool uses_er = cfg.baseline == "ER" || cfg.baseline == "strategy+ER";
    bool uses_ewc = cfg.baseline == "EWC" || cfg.baseline == "strategy+EWC";

    Rng root(cfg.seed);
    model::VlModel m(cfg.model, root.fork("model-init"));
    train_init(m, stream.init_set, cfg.train, root.fork("init"), log, cfg.run_id);

    specialization::SelectionStrategy selection;
    if (spec_sel && !cfg.custom_paths.empty()) {
        selection.name = "custom";
        selection.paths = cfg.custom_paths;
        for (const model::ModulePath& p : selection.paths) {
            if (p.arch != cfg.model.arch)
                throw std::invalid_argument("selection path for wrong architecture: " + p.str());
            model::validate_module_path(p, cfg.model.layers);
        }
        std::sort(selection.paths.begin(), selection.paths.end());
        selection.paths.erase(std::unique(selection.paths.begin(), selection.paths.end()),
                              selection.paths.end());
    } else {
        std::string strat =
            spec_sel ? cfg.strategy : (cfg.baseline == "Expert" ? "expert" : "monolithic");
        auto strategies = specialization::named_strategies(cfg.model.arch, cfg.model.layers);
        auto sit = strategies.find(strat);
        if (sit == strategies.end()) throw std::invalid_argument("unknown strategy: " + strat);
        selection = sit->second;
    }
    specialization::ParameterBank bank(m, selection);

    int T = static_cast<int>(stream.tasks.size());
    ImportanceTracer tracer(m);
    ReplayBuffer buffer(cfg.train.buffer_capacity);
    FisherState fisher(cfg.train.ewc_discount,
                       uses_ac ? cfg.train.ewc_lambda_ac : cfg.train.ewc_lambda_joint);
    Rng replay_rng = root.fork("replay");
    Rng fisher_rng = root.fork("fisher");
    Rng expert_rng = root.fork("expert-init");

    RunOutput out;

    if (cfg.baseline == "MTL") {
        out.matrix = analysis::AccuracyMatrix::with_rows(T, 2);
        std::vector<double> init_row = evaluate_stream(m, bank, stream, cfg.train.batch_size);
        for (int t = 1; t <= T; ++t) out.matrix.set(0, t, init_row[static_cast<std::size_t>(t - 1)]);
        data::TaskData pooled;
        for (const data::TaskData& td : stream.tasks)
            pooled.train.insert(pooled.train.end(), td.train.begin(), td.train.end());
        bank.instantiate_task(1, specialization::InitMode::kCopyInit);
        bank.bind(1);
        train_joint(m, bank, 1, pooled, cfg.train.joint_epochs(), cfg.train, root.fork("mtl"), {},
                    log, cfg.run_id);
        std::vector<double> row = evaluate_stream(m, bank, stream, cfg.train.batch_size);
        for (int t = 1; t <= T; ++t) out.matrix.set(1, t, row[static_cast<std::size_t>(t - 1)]);
        return out;
    }

    out.matrix = analysis::AccuracyMatrix::with_rows(T, T + 1);
    std::vector<double> init_row = evaluate_stream(m, bank, stream, cfg.train.batch_size);
    for (int t = 1; t <= T; ++t) out.matrix.set(0, t, init_row[static_cast<std::size_t>(t - 1)]);

    for (int t = 1; t <= T; ++t) {
        const data::TaskData& task = stream.tasks[static_cast<std::size_t>(t - 1)];
        bank.instantiate_task(t,
                              cfg.baseline == "Expert" ? specialization::InitMode::kRandom
                                                       : specialization::InitMode::kCopyInit,
                              &expert_rng);
        bank.bind(t);

        StepHooks hooks;
        if (uses_er)
            hooks.replay = [&](int n, Rng& r) {
                int k = std::min(n, buffer.size());
                return k > 0 ? buffer.sample(k, r) : std::vector<data::Example>{};
            };
        if (uses_ewc)
            hooks.penalty = [&](const std::vector<ParamPtr>& ps) {
                return fisher.apply_to_grads(ps);
            };
        if (cfg.trace_importance)
            hooks.observe = [&] { tracer.observe_gradients(); };

        Rng task_rng = root.fork("task").fork(static_cast<std::uint64_t>(t));
        if (uses_ac)
            train_ac(m, bank, t, task, cfg.train, task_rng, hooks, log, cfg.run_id);
        else
            train_joint(m, bank, t, task, cfg.train.joint_epochs(), cfg.train, task_rng, hooks,
                        log, cfg.run_id);

        if (uses_er)
            for (const data::Example& e : task.train) buffer.insert(e, replay_rng);
        if (uses_ewc) fisher.update(m, bank.shared_params(), task.train, cfg.train, fisher_rng);
        if (cfg.trace_importance) tracer.end_task(task.train, cfg.train);

        std::vector<double> row = evaluate_stream(m, bank, stream, cfg.train.batch_size);
        for (int j = 1; j <= T; ++j) out.matrix.set(t, j, row[static_cast<std::size_t>(j - 1)]);
    }

    if (cfg.trace_importance) out.traces = tracer.traces();
    return out;
}

}  // namespace lilac::trainer
