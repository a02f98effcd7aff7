#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lilac/model.hpp"

namespace lilac::analysis {

// (T+1)-row accuracy record over T tasks: row 0 holds the post-init
// accuracies A_init,t; row i the accuracies measured after training task i.
// A multi-task-learning run only fills row 0 plus one final row.
struct AccuracyMatrix {
    int T = 0;
    std::vector<std::vector<double>> rows;

    static AccuracyMatrix with_rows(int T, int n_rows);

    // A_{i,t}: i in [0, rows), t is the 1-based task index.
    double a(int i, int t) const;
    void set(int i, int t, double v);
    bool full() const { return static_cast<int>(rows.size()) == T + 1; }
};

std::string matrix_to_csv(const AccuracyMatrix& m);
AccuracyMatrix matrix_from_csv(const std::string& csv);

// ACC = (1/T) Σ_t A_{last,t}
double acc(const AccuracyMatrix& m);
// CF = (1/T) Σ_{t=1}^{T-1} (A_{t,t} − A_{T,t}); needs the full matrix.
double cf(const AccuracyMatrix& m);
// FT = 1/(T−1) Σ_{t=2}^{T} (A_{t−1,t} − A_{init,t}); needs the full matrix.
double ft(const AccuracyMatrix& m);

double delta_acc(double acc_specialized, double acc_monolithic);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Per-module accumulators collected during a run; one entry per task.
//   grad_term[t] = Σ_{w∈θ^m} (|w at task end| + ½ Σ_steps |∂L/∂w|)
//   act_l1[t]    = Σ_{train examples} ‖module output‖₁ with post-task params
struct ModuleTrace {
    std::int64_t param_count = 0;
    std::vector<double> grad_term;
    std::vector<double> act_l1;
};

// IS_grad = α Σ_t grad_term[t], α = 1 / (T · ln|θ^m|). |θ^m| ≤ 1 is an error.
double is_grad(const ModuleTrace& trace);
// IS_act = α Σ_t act_l1[t], same α.
double is_act(const ModuleTrace& trace);

struct ImportanceReport {
    struct Row {
        model::ModulePath path;
        double is_grad = 0.0, is_act = 0.0, delta_acc = 0.0;
    };
    std::vector<Row> rows;
    double pearson_grad = 0.0;  // corr(is_grad, delta_acc) across modules
    double pearson_act = 0.0;

    static ImportanceReport build(std::vector<Row> rows);
    std::string to_csv() const;  // module, layer, kind, is_grad, is_act, delta_acc
};

}  // namespace lilac::analysis
