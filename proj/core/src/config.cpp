#include "lilac/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lilac/specialization.hpp"

namespace lilac::expctl {

namespace {

using nlohmann::json;

// Appendix-table defaults for the given profile.
void apply_profile(ExperimentConfig& c) {
    bool paper = c.scale == "paper";
    bool is3d = c.dataset == "3d";
    bool film = c.arch == "film";

    c.counts = paper ? data::StreamCounts{500, 100, 100} : data::StreamCounts{60, 20, 20};

    trainer::TrainConfig t;
    t.batch_size = paper ? 128 : 32;
    t.temperature = 0.5f;
    t.init_epochs = 10;
    t.init_lr = is3d ? 2e-4f : 4.5e-4f;
    if (film)
        t.lr = is3d ? 1e-3f : 8e-4f;
    else
        t.lr = is3d ? 7e-4f : 6e-4f;
    t.schedule = paper ? trainer::ACSchedule{30, 6} : trainer::ACSchedule{12, 6};
    t.ewc_lambda_ac = 20000.0f;
    t.ewc_lambda_joint = is3d ? 600.0f : 2000.0f;
    t.ewc_discount = 0.9f;
    t.buffer_capacity = 3000;
    c.train = t;

    c.model = model::ModelConfig::defaults(film ? model::Arch::kFilm : model::Arch::kTransformer,
                                           is3d ? data::Dataset::kLilac3D : data::Dataset::kLilac2D,
                                           paper);
    // The flagship selection per architecture (FiLM has no attention blocks).
    c.strategy = film ? "conv-last-layer" : "all-attn";
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void expect_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key \"" + it.key() + "\" in " + where);
}

void validate(const ExperimentConfig& c) {
    static const std::set<std::string> kDatasets = {"2d", "3d"};
    static const std::set<std::string> kArchs = {"film", "transformer"};
    static const std::set<std::string> kScales = {"desk", "paper"};
    static const std::set<std::string> kBaselines = {
        "SFT", "ER", "EWC", "MTL", "Expert", "strategy", "strategy+ER", "strategy+EWC",
        "strategy-joint"};
    if (!kDatasets.count(c.dataset)) throw ConfigError("dataset must be 2d or 3d");
    if (!kArchs.count(c.arch)) throw ConfigError("arch must be film or transformer");
    if (!kScales.count(c.scale)) throw ConfigError("scale must be desk or paper");
    if (c.baselines.empty()) throw ConfigError("baselines must not be empty");
    for (const std::string& b : c.baselines)
        if (!kBaselines.count(b)) throw ConfigError("unknown baseline: " + b);
    if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
    if (c.counts.train <= 0 || c.counts.val <= 0 || c.counts.test <= 0)
        throw ConfigError("per-instruction counts must be positive");
    if (c.train.batch_size <= 0 || c.train.init_epochs < 0 ||
        c.train.schedule.adaptation_epochs <= 0 || c.train.schedule.adapt_freq <= 0)
        throw ConfigError("invalid training schedule");

    model::Arch arch = model::arch_from_string(c.arch);
    if (c.modules.empty()) {
        auto strategies = specialization::named_strategies(arch, c.model.layers);
        if (!strategies.count(c.strategy)) throw ConfigError("unknown strategy: " + c.strategy);
    } else {
        for (const std::string& s : c.modules) {
            model::ModulePath p;
            try {
                p = model::module_path_from_string(s);
                model::validate_module_path(p, c.model.layers);
            } catch (const std::exception& e) {
                throw ConfigError(std::string("bad module path \"") + s + "\": " + e.what());
            }
            if (p.arch != arch) throw ConfigError("module path for wrong architecture: " + s);
        }
    }
}

}  // namespace

ExperimentConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    expect_keys(j,
                {"dataset", "arch", "scale", "baselines", "strategy", "modules", "seeds",
                 "data_seed", "out", "counts", "train", "model"},
                "config");

    ExperimentConfig c;
    try {
        read_if(j, "dataset", c.dataset);
        read_if(j, "arch", c.arch);
        read_if(j, "scale", c.scale);
        apply_profile(c);  // resolve defaults before field-level overrides

        read_if(j, "baselines", c.baselines);
        read_if(j, "strategy", c.strategy);
        read_if(j, "modules", c.modules);
        read_if(j, "seeds", c.seeds);
        read_if(j, "data_seed", c.data_seed);
        read_if(j, "out", c.out);

        if (j.contains("counts")) {
            const json& jc = j.at("counts");
            expect_keys(jc, {"train", "val", "test"}, "counts");
            read_if(jc, "train", c.counts.train);
            read_if(jc, "val", c.counts.val);
            read_if(jc, "test", c.counts.test);
        }
        if (j.contains("train")) {
            const json& jt = j.at("train");
            expect_keys(jt,
                        {"batch_size", "temperature", "init_lr", "lr", "init_epochs",
                         "adaptation_epochs", "adapt_freq", "ewc_lambda_ac", "ewc_lambda_joint",
                         "ewc_discount", "buffer_capacity"},
                        "train");
            read_if(jt, "batch_size", c.train.batch_size);
            read_if(jt, "temperature", c.train.temperature);
            read_if(jt, "init_lr", c.train.init_lr);
            read_if(jt, "lr", c.train.lr);
            read_if(jt, "init_epochs", c.train.init_epochs);
            read_if(jt, "adaptation_epochs", c.train.schedule.adaptation_epochs);
            read_if(jt, "adapt_freq", c.train.schedule.adapt_freq);
            read_if(jt, "ewc_lambda_ac", c.train.ewc_lambda_ac);
            read_if(jt, "ewc_lambda_joint", c.train.ewc_lambda_joint);
            read_if(jt, "ewc_discount", c.train.ewc_discount);
            read_if(jt, "buffer_capacity", c.train.buffer_capacity);
        }
        if (j.contains("model")) {
            const json& jm = j.at("model");
            expect_keys(jm,
                        {"layers", "heads", "ffn_dim", "embed_dim", "film_word_dim", "gru_dim",
                         "channels", "decoder_dim"},
                        "model");
            read_if(jm, "layers", c.model.layers);
            read_if(jm, "heads", c.model.heads);
            read_if(jm, "ffn_dim", c.model.ffn_dim);
            read_if(jm, "embed_dim", c.model.embed_dim);
            read_if(jm, "film_word_dim", c.model.film_word_dim);
            read_if(jm, "gru_dim", c.model.gru_dim);
            read_if(jm, "channels", c.model.channels);
            read_if(jm, "decoder_dim", c.model.decoder_dim);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }

    validate(c);
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

std::string canonical_json(const ExperimentConfig& c) {
    // nlohmann::json keeps object keys in a sorted map, so dump() is a
    // canonical byte sequence for the fully resolved config.
    json j;
    j["dataset"] = c.dataset;
    j["arch"] = c.arch;
    j["scale"] = c.scale;
    j["baselines"] = c.baselines;
    j["strategy"] = c.strategy;
    j["modules"] = c.modules;
    j["seeds"] = c.seeds;
    j["data_seed"] = c.data_seed;
    j["counts"] = {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"temperature", c.train.temperature},
                  {"init_lr", c.train.init_lr},
                  {"lr", c.train.lr},
                  {"init_epochs", c.train.init_epochs},
                  {"adaptation_epochs", c.train.schedule.adaptation_epochs},
                  {"adapt_freq", c.train.schedule.adapt_freq},
                  {"ewc_lambda_ac", c.train.ewc_lambda_ac},
                  {"ewc_lambda_joint", c.train.ewc_lambda_joint},
                  {"ewc_discount", c.train.ewc_discount},
                  {"buffer_capacity", c.train.buffer_capacity}};
    j["model"] = {{"layers", c.model.layers},
                  {"heads", c.model.heads},
                  {"ffn_dim", c.model.ffn_dim},
                  {"embed_dim", c.model.embed_dim},
                  {"film_word_dim", c.model.film_word_dim},
                  {"gru_dim", c.model.gru_dim},
                  {"channels", c.model.channels},
                  {"decoder_dim", c.model.decoder_dim}};
    // Note: "out" is deliberately excluded — moving results elsewhere is not
    // a different experiment.
    return j.dump();
}

std::uint64_t config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char b : canonical_json(c)) h = (h ^ b) * 1099511628211ull;
    return h;
}

std::string config_hash_hex(const ExperimentConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(config_hash(c)));
    return buf;
}

trainer::RunConfig run_config(const ExperimentConfig& c, const std::string& baseline,
                              std::uint64_t seed) {
    trainer::RunConfig rc;
    rc.model = c.model;
    rc.train = c.train;
    rc.baseline = baseline;
    rc.strategy = c.strategy;
    for (const std::string& s : c.modules)
        rc.custom_paths.push_back(model::module_path_from_string(s));
    rc.seed = seed;
    rc.run_id = baseline + "-seed" + std::to_string(seed);
    return rc;
}

}  // namespace lilac::expctl
