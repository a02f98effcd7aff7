#include "lilac/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace lilac::analysis {

AccuracyMatrix AccuracyMatrix::with_rows(int T, int n_rows) {
    if (T < 1 || n_rows < 1 || n_rows > T + 1)
        throw std::invalid_argument("AccuracyMatrix: bad dimensions");
    AccuracyMatrix m;
    m.T = T;
    m.rows.assign(static_cast<std::size_t>(n_rows),
                  std::vector<double>(static_cast<std::size_t>(T), 0.0));
    return m;
}

double AccuracyMatrix::a(int i, int t) const {
    if (i < 0 || i >= static_cast<int>(rows.size()) || t < 1 || t > T)
        throw std::out_of_range("AccuracyMatrix::a");
    return rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(t - 1)];
}

void AccuracyMatrix::set(int i, int t, double v) {
    if (i < 0 || i >= static_cast<int>(rows.size()) || t < 1 || t > T)
        throw std::out_of_range("AccuracyMatrix::set");
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("accuracy outside [0,1]");
    rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(t - 1)] = v;
}

std::string matrix_to_csv(const AccuracyMatrix& m) {
    std::string out = "row";
    for (int t = 1; t <= m.T; ++t) out += ",task" + std::to_string(t);
    out += "\n";
    char buf[64];
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
        out += std::to_string(i);
        for (double v : m.rows[i]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

AccuracyMatrix matrix_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    // Leading '#' lines carry provenance (config hash, tool version).
    do {
        if (!std::getline(in, line)) throw std::invalid_argument("empty matrix csv");
    } while (line.empty() || line[0] == '#');
    int T = 0;
    for (char c : line) T += c == ',';
    AccuracyMatrix m;
    m.T = T;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');  // row index
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<int>(row.size()) != T) throw std::invalid_argument("ragged matrix csv");
        m.rows.push_back(std::move(row));
    }
    if (m.rows.empty()) throw std::invalid_argument("matrix csv has no rows");
    return m;
}

double acc(const AccuracyMatrix& m) {
    if (m.rows.empty()) throw std::invalid_argument("acc: empty matrix");
    double s = 0.0;
    for (double v : m.rows.back()) s += v;
    return s / m.T;
}

double cf(const AccuracyMatrix& m) {
    if (!m.full()) throw std::invalid_argument("cf: matrix rows incomplete");
    double s = 0.0;
    for (int t = 1; t <= m.T - 1; ++t) s += m.a(t, t) - m.a(m.T, t);
    return s / m.T;
}

double ft(const AccuracyMatrix& m) {
    if (!m.full()) throw std::invalid_argument("ft: matrix rows incomplete");
    if (m.T < 2) throw std::invalid_argument("ft: needs at least two tasks");
    double s = 0.0;
    for (int t = 2; t <= m.T; ++t) s += m.a(t - 1, t) - m.a(0, t);
    return s / (m.T - 1);
}

double delta_acc(double acc_specialized, double acc_monolithic) {
    return acc_specialized - acc_monolithic;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
    std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("pearson: need at least two points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: zero variance");
    return sxy / std::sqrt(sxx * syy);
}

namespace {
double alpha(const ModuleTrace& t, std::size_t n_tasks) {
    if (t.param_count <= 1) throw std::invalid_argument("importance: |θ^m| must exceed 1");
    if (n_tasks == 0) throw std::invalid_argument("importance: empty trace");
    return 1.0 / (static_cast<double>(n_tasks) * std::log(static_cast<double>(t.param_count)));
}
}  // namespace

double is_grad(const ModuleTrace& trace) {
    double s = 0.0;
    for (double v : trace.grad_term) s += v;
    return alpha(trace, trace.grad_term.size()) * s;
}

double is_act(const ModuleTrace& trace) {
    double s = 0.0;
    for (double v : trace.act_l1) s += v;
    return alpha(trace, trace.act_l1.size()) * s;
}

ImportanceReport ImportanceReport::build(std::vector<Row> rows) {
    ImportanceReport r;
    r.rows = std::move(rows);
    std::vector<double> g, a, d;
    for (const Row& row : r.rows) {
        g.push_back(row.is_grad);
        a.push_back(row.is_act);
        d.push_back(row.delta_acc);
    }
    // Degenerate (constant) columns happen at toy scale; report NaN rather
    // than failing the whole report.
    try {
        r.pearson_grad = pearson(g, d);
    } catch (const std::invalid_argument&) {
        r.pearson_grad = std::numeric_limits<double>::quiet_NaN();
    }
    try {
        r.pearson_act = pearson(a, d);
    } catch (const std::invalid_argument&) {
        r.pearson_act = std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

std::string ImportanceReport::to_csv() const {
    std::string out = "module,layer,kind,is_grad,is_act,delta_acc\n";
    char buf[160];
    for (const Row& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%d,%s,%.17g,%.17g,%.17g\n", r.path.str().c_str(),
                      r.path.layer, r.path.kind.c_str(), r.is_grad, r.is_act, r.delta_acc);
        out += buf;
    }
    return out;
}

}  // namespace lilac::analysis
