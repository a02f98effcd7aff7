#include "lilac/runner.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lilac/serialize.hpp"

namespace fs = std::filesystem;

namespace lilac::expctl {

namespace {

using nlohmann::json;

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string provenance(const ExperimentConfig& c) {
    return "# config " + config_hash_hex(c) + "\n# " + kToolVersion + "\n";
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << bytes;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int max_threads() {
    if (const char* env = std::getenv("LILAC_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// Runs fn(0..n-1) on up to LILAC_THREADS workers; rethrows the first failure.
void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::min(n, max_threads());
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= n || failed.load()) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(error_mu);
                    if (!error) error = std::current_exception();
                    failed.store(true);
                    return;
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// Standard error of the mean: sd/sqrt(n) with the n−1 sample variance.
double stderr_of(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double mu = mean_of(xs), ss = 0.0;
    for (double x : xs) ss += (x - mu) * (x - mu);
    double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return sd / std::sqrt(static_cast<double>(xs.size()));
}

std::string metrics_csv(const ExperimentConfig& c, const RunResult& r) {
    std::string out = provenance(c);
    out += "metric,value\n";
    out += "acc," + num(r.acc) + "\n";
    out += "cf," + num(r.cf) + "\n";
    out += "ft," + num(r.ft) + "\n";
    return out;
}

std::string job_stem(const std::string& baseline, std::uint64_t seed) {
    return baseline + "-seed" + std::to_string(seed);
}

json matrix_to_json(const analysis::AccuracyMatrix& m) {
    return json{{"T", m.T}, {"rows", m.rows}};
}

analysis::AccuracyMatrix matrix_from_json(const json& j) {
    analysis::AccuracyMatrix m;
    m.T = j.at("T").get<int>();
    m.rows = j.at("rows").get<std::vector<std::vector<double>>>();
    return m;
}

json metric_to_json(double v) {
    if (std::isnan(v)) return nullptr;
    return v;
}

double metric_from_json(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string to_json(const RunResult& r) {
    json j;
    j["config_hash"] = hex64(r.config_hash);
    j["tool_version"] = r.tool_version;
    j["baseline"] = r.baseline;
    j["seed"] = r.seed;
    j["matrix"] = matrix_to_json(r.matrix);
    j["acc"] = metric_to_json(r.acc);
    j["cf"] = metric_to_json(r.cf);
    j["ft"] = metric_to_json(r.ft);
    json logs = json::array();
    for (const trainer::EpochLog& l : r.logs)
        logs.push_back(json{{"run_id", l.run_id},
                            {"task", l.task},
                            {"epoch", l.epoch},
                            {"phase", l.phase},
                            {"loss", l.loss},
                            {"lr", l.lr}});
    j["logs"] = std::move(logs);
    return j.dump(2) + "\n";
}

RunResult run_result_from_json(const std::string& text) {
    json j = json::parse(text);
    RunResult r;
    r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    r.tool_version = j.at("tool_version").get<std::string>();
    r.baseline = j.at("baseline").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.matrix = matrix_from_json(j.at("matrix"));
    r.acc = metric_from_json(j.at("acc"));
    r.cf = metric_from_json(j.at("cf"));
    r.ft = metric_from_json(j.at("ft"));
    for (const json& l : j.at("logs")) {
        trainer::EpochLog e;
        e.run_id = l.at("run_id").get<std::string>();
        e.task = l.at("task").get<int>();
        e.epoch = l.at("epoch").get<int>();
        e.phase = l.at("phase").get<std::string>();
        e.loss = l.at("loss").get<double>();
        e.lr = l.at("lr").get<float>();
        r.logs.push_back(std::move(e));
    }
    return r;
}

std::string run_dir(const ExperimentConfig& c) {
    return (fs::path(c.out) / config_hash_hex(c)).string();
}

data::TaskStream stream_for_seed(const ExperimentConfig& c, std::uint64_t seed) {
    data::TaskStream s = data::build_stream(c.dataset == "3d" ? data::Dataset::kLilac3D
                                                              : data::Dataset::kLilac2D,
                                            c.data_seed, c.counts);
    Rng order_rng = Rng(seed).fork("task-order");
    std::vector<int> perm = order_rng.permutation(static_cast<int>(s.tasks.size()));
    data::TaskStream p = s;
    p.instruction_to_task.clear();
    for (std::size_t i = 0; i < perm.size(); ++i) {
        p.tasks[i] = s.tasks[static_cast<std::size_t>(perm[i])];
        p.task_instructions[i] = s.task_instructions[static_cast<std::size_t>(perm[i])];
        for (int instr : p.task_instructions[i])
            p.instruction_to_task[instr] = static_cast<int>(i) + 1;
    }
    return p;
}

RunResult execute(const ExperimentConfig& c, const std::string& baseline, std::uint64_t seed,
                  std::map<std::string, analysis::ModuleTrace>* traces) {
    data::TaskStream stream = stream_for_seed(c, seed);
    trainer::RunConfig rc = run_config(c, baseline, seed);
    rc.trace_importance = traces != nullptr;

    RunResult r;
    r.config_hash = config_hash(c);
    r.baseline = baseline;
    r.seed = seed;

    auto t0 = std::chrono::steady_clock::now();
    trainer::RunOutput out =
        trainer::run_baseline(rc, stream, [&](const trainer::EpochLog& l) { r.logs.push_back(l); });
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    r.matrix = std::move(out.matrix);
    r.acc = analysis::acc(r.matrix);
    if (r.matrix.full()) {
        r.cf = analysis::cf(r.matrix);
        r.ft = analysis::ft(r.matrix);
    } else {
        r.cf = std::numeric_limits<double>::quiet_NaN();
        r.ft = std::numeric_limits<double>::quiet_NaN();
    }
    if (traces) *traces = std::move(out.traces);
    return r;
}

void cmd_gen(const ExperimentConfig& c, bool force) {
    fs::path dir(run_dir(c));
    fs::create_directories(dir);
    write_file(dir / "config.json", canonical_json(c) + "\n");

    for (std::uint64_t seed : c.seeds) {
        fs::path out = dir / ("stream-" + c.dataset + "-seed" + std::to_string(seed) + ".lilc");
        if (fs::exists(out) && !force)
            throw ConfigError(out.string() + " exists; pass --force to overwrite");
    }
    parallel_for(static_cast<int>(c.seeds.size()), [&](int i) {
        std::uint64_t seed = c.seeds[static_cast<std::size_t>(i)];
        data::TaskStream s = data::build_stream(c.dataset == "3d" ? data::Dataset::kLilac3D
                                                                  : data::Dataset::kLilac2D,
                                                seed, c.counts);
        fs::path out = dir / ("stream-" + c.dataset + "-seed" + std::to_string(seed) + ".lilc");
        serialize::export_stream(s, out.string());
        // The binary container has no comment channel; provenance goes in a
        // sidecar next to it.
        write_file(out.string() + ".meta", provenance(c));
    });
}

namespace {

// Writes all artifacts of one finished job.
void write_job(const ExperimentConfig& c, const fs::path& dir, const RunResult& r) {
    std::string stem = job_stem(r.baseline, r.seed);
    write_file(dir / (stem + ".json"), to_json(r));
    write_file(dir / (stem + "-matrix.csv"), provenance(c) + analysis::matrix_to_csv(r.matrix));
    write_file(dir / (stem + "-metrics.csv"), metrics_csv(c, r));
    write_file(dir / (stem + "-time.txt"), provenance(c) + "seconds," + num(r.wall_seconds) + "\n");
}

// Aggregates metrics for one baseline by re-reading the per-seed files.
std::string aggregate_csv(const ExperimentConfig& c, const fs::path& dir,
                          const std::string& baseline) {
    std::vector<double> accs, cfs, fts;
    for (std::uint64_t seed : c.seeds) {
        RunResult r = run_result_from_json(
            read_file(dir / (job_stem(baseline, seed) + ".json")));
        accs.push_back(r.acc);
        cfs.push_back(r.cf);
        fts.push_back(r.ft);
    }
    std::string out = provenance(c);
    out += "metric,mean,stderr,n\n";
    std::size_t n = c.seeds.size();
    out += "acc," + num(mean_of(accs)) + "," + num(stderr_of(accs)) + "," + std::to_string(n) + "\n";
    out += "cf," + num(mean_of(cfs)) + "," + num(stderr_of(cfs)) + "," + std::to_string(n) + "\n";
    out += "ft," + num(mean_of(fts)) + "," + num(stderr_of(fts)) + "," + std::to_string(n) + "\n";
    return out;
}

struct Job {
    std::string baseline;
    std::uint64_t seed = 0;
};

std::vector<Job> job_list(const ExperimentConfig& c) {
    std::vector<Job> jobs;
    for (const std::string& b : c.baselines)
        for (std::uint64_t seed : c.seeds) jobs.push_back({b, seed});
    return jobs;
}

// Runs every (baseline, seed) job, with clash refusal (run) or reuse of
// already-written results (sweep re-aggregation).
void ensure_results(const ExperimentConfig& c, bool force, bool reuse_existing) {
    fs::path dir(run_dir(c));
    fs::create_directories(dir);
    write_file(dir / "config.json", canonical_json(c) + "\n");

    std::vector<Job> jobs = job_list(c);
    std::vector<Job> todo;
    for (const Job& j : jobs) {
        fs::path result = dir / (job_stem(j.baseline, j.seed) + ".json");
        if (fs::exists(result) && !force) {
            if (reuse_existing) continue;
            throw ConfigError(result.string() + " exists; pass --force to overwrite");
        }
        todo.push_back(j);
    }
    parallel_for(static_cast<int>(todo.size()), [&](int i) {
        const Job& j = todo[static_cast<std::size_t>(i)];
        write_job(c, dir, execute(c, j.baseline, j.seed));
    });
    for (const std::string& b : c.baselines)
        write_file(dir / (b + "-aggregate.csv"), aggregate_csv(c, dir, b));
}

}  // namespace

void cmd_run(const ExperimentConfig& c, bool force) { ensure_results(c, force, false); }

void cmd_sweep(const ExperimentConfig& c, bool force) {
    fs::path dir(run_dir(c));
    fs::path table = dir / "sweep.csv";
    if (fs::exists(table) && !force)
        throw ConfigError(table.string() + " exists; pass --force to overwrite");
    ensure_results(c, force, /*reuse_existing=*/true);

    std::string out = provenance(c);
    out += "baseline,acc_mean,acc_stderr,cf_mean,cf_stderr,ft_mean,ft_stderr,n\n";
    for (const std::string& b : c.baselines) {
        std::vector<double> accs, cfs, fts;
        for (std::uint64_t seed : c.seeds) {
            RunResult r = run_result_from_json(read_file(dir / (job_stem(b, seed) + ".json")));
            accs.push_back(r.acc);
            cfs.push_back(r.cf);
            fts.push_back(r.ft);
        }
        out += b + "," + num(mean_of(accs)) + "," + num(stderr_of(accs)) + "," +
               num(mean_of(cfs)) + "," + num(stderr_of(cfs)) + "," + num(mean_of(fts)) + "," +
               num(stderr_of(fts)) + "," + std::to_string(c.seeds.size()) + "\n";
    }
    write_file(table, out);
}

void cmd_importance(const ExperimentConfig& c, bool force) {
    fs::path dir(run_dir(c));
    fs::path report_path = dir / "importance-report.csv";
    if (fs::exists(report_path) && !force)
        throw ConfigError(report_path.string() + " exists; pass --force to overwrite");
    fs::create_directories(dir);
    write_file(dir / "config.json", canonical_json(c) + "\n");

    model::Arch arch = model::arch_from_string(c.arch);
    std::vector<model::ModulePath> paths;
    for (int l = 0; l < c.model.layers; ++l)
        for (const std::string& k : model::module_kinds(arch)) paths.push_back({arch, l, k});

    int S = static_cast<int>(c.seeds.size());
    int P = static_cast<int>(paths.size());
    // Per seed: one traced monolithic run, then one A&C and one joint run per
    // single-module selection.
    std::vector<double> acc_sft(static_cast<std::size_t>(S));
    std::vector<std::map<std::string, analysis::ModuleTrace>> traces(
        static_cast<std::size_t>(S));
    std::vector<std::vector<double>> acc_ac(static_cast<std::size_t>(P),
                                            std::vector<double>(static_cast<std::size_t>(S)));
    std::vector<std::vector<double>> acc_joint = acc_ac;

    int total = S * (1 + 2 * P);
    parallel_for(total, [&](int idx) {
        int si = idx % S;
        int kind = idx / S;  // 0 = SFT, then (path, ac|joint) pairs
        std::uint64_t seed = c.seeds[static_cast<std::size_t>(si)];
        if (kind == 0) {
            RunResult r = execute(c, "SFT", seed, &traces[static_cast<std::size_t>(si)]);
            acc_sft[static_cast<std::size_t>(si)] = r.acc;
            return;
        }
        int pi = (kind - 1) / 2;
        bool joint = (kind - 1) % 2;
        ExperimentConfig single = c;
        single.modules = {paths[static_cast<std::size_t>(pi)].str()};
        RunResult r = execute(single, joint ? "strategy-joint" : "strategy", seed);
        auto& slot = joint ? acc_joint : acc_ac;
        slot[static_cast<std::size_t>(pi)][static_cast<std::size_t>(si)] = r.acc;
    });

    std::vector<analysis::ImportanceReport::Row> rows;
    std::vector<std::vector<double>> grid_delta(static_cast<std::size_t>(P));
    std::vector<std::vector<double>> grid_gain(static_cast<std::size_t>(P));
    for (int pi = 0; pi < P; ++pi) {
        const model::ModulePath& p = paths[static_cast<std::size_t>(pi)];
        analysis::ImportanceReport::Row row;
        row.path = p;
        std::vector<double> isg, isa, deltas, gains;
        for (int si = 0; si < S; ++si) {
            const analysis::ModuleTrace& t = traces[static_cast<std::size_t>(si)].at(p.str());
            isg.push_back(analysis::is_grad(t));
            isa.push_back(analysis::is_act(t));
            deltas.push_back(analysis::delta_acc(
                acc_ac[static_cast<std::size_t>(pi)][static_cast<std::size_t>(si)],
                acc_sft[static_cast<std::size_t>(si)]));
            gains.push_back(acc_ac[static_cast<std::size_t>(pi)][static_cast<std::size_t>(si)] -
                            acc_joint[static_cast<std::size_t>(pi)][static_cast<std::size_t>(si)]);
        }
        row.is_grad = mean_of(isg);
        row.is_act = mean_of(isa);
        row.delta_acc = mean_of(deltas);
        rows.push_back(row);
        grid_delta[static_cast<std::size_t>(pi)] = {row.delta_acc};
        grid_gain[static_cast<std::size_t>(pi)] = {mean_of(gains)};
    }

    analysis::ImportanceReport report = analysis::ImportanceReport::build(std::move(rows));
    std::string rep = provenance(c) + report.to_csv();
    rep += "# pearson_grad," + num(report.pearson_grad) + "\n";
    rep += "# pearson_act," + num(report.pearson_act) + "\n";
    write_file(report_path, rep);

    // kind-by-layer grids (one row per module kind, one column per layer)
    auto grid_csv = [&](const std::vector<std::vector<double>>& vals) {
        std::string out = provenance(c) + "kind";
        for (int l = 0; l < c.model.layers; ++l) out += ",L" + std::to_string(l);
        out += "\n";
        const auto& kinds = model::module_kinds(arch);
        for (std::size_t k = 0; k < kinds.size(); ++k) {
            out += kinds[k];
            for (int l = 0; l < c.model.layers; ++l) {
                int pi = l * static_cast<int>(kinds.size()) + static_cast<int>(k);
                out += "," + num(vals[static_cast<std::size_t>(pi)][0]);
            }
            out += "\n";
        }
        return out;
    };
    write_file(dir / "fig6-delta-acc.csv", grid_csv(grid_delta));
    write_file(dir / "fig4-ac-vs-joint.csv", grid_csv(grid_gain));
}

}  // namespace lilac::expctl
