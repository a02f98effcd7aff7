#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lilac/data.hpp"
#include "lilac/graph.hpp"
#include "lilac/rng.hpp"

namespace lilac::model {

enum class Arch { kFilm, kTransformer };

Arch arch_from_string(const std::string& s);
std::string arch_to_string(Arch a);

struct ModulePath {
    Arch arch = Arch::kFilm;
    int layer = 0;
    std::string kind;

    std::string str() const;  // e.g. "transformer/L0/attn"
    auto operator<=>(const ModulePath&) const = default;
};

ModulePath module_path_from_string(const std::string& s);
// Throws std::invalid_argument if kind is not valid for arch or layer out of range.
void validate_module_path(const ModulePath& p, int layers);

const std::vector<std::string>& module_kinds(Arch a);

struct ModelConfig {
    Arch arch = Arch::kTransformer;
    data::Dataset dataset = data::Dataset::kLilac2D;
    int layers = 4;        // L
    int heads = 2;
    int ffn_dim = 64;
    int embed_dim = 96;    // transformer token dim D (paper profile: 256)
    int film_word_dim = 128;
    int gru_dim = 256;
    int channels = 32;     // vision encoder output channels
    int decoder_dim = 128; // joint embedding width P

    static ModelConfig defaults(Arch arch, data::Dataset dataset, bool paper_scale);

    int raster() const;      // input H=W
    int feat_hw() const;     // vision feature map side after encoder
    int vis_tokens() const;  // transformer visual token count (after 2x2 pool)
    int max_tokens() const;  // longest instruction in words
};

// Batch of examples with equal token length, stacked into tensors.
struct Batch {
    std::vector<int> tokens;  // flattened [n*s]
    int n = 0, s = 0;
    Tensor premise, positive, negative;  // [n,3,H,W]
};

Batch make_batch(const std::vector<const data::Example*>& examples);

// The vision-language model: frozen encoders g (language), h (vision),
// decoder d, and the trainable fusion stack f of L named layers.
class VlModel {
public:
    VlModel(const ModelConfig& cfg, Rng rng);

    const ModelConfig& config() const { return cfg_; }

    ParamPtr param(const std::string& id) const;
    void set_param(const std::string& id, ParamPtr p);

    std::vector<std::string> param_ids() const { return order_; }
    std::vector<ParamPtr> all_params() const;
    std::vector<ParamPtr> trainable_params() const;
    std::vector<ParamPtr> fusion_params() const;   // parameters of f only
    std::vector<ParamPtr> encoder_params() const;  // g, h, d

    std::vector<ModulePath> list_modules() const;
    std::vector<std::string> module_param_ids(const ModulePath& p) const;
    // Fraction of layer parameters held by the attention module (transformer).
    double attention_param_share(int layer) const;

    void freeze_encoders();

    Var forward_premise(Graph& g, const std::vector<int>& tokens, int n, int s,
                        const Tensor& premise, bool train);
    Var forward_hypothesis(Graph& g, const Tensor& images, bool train);

    // Single fusion layers, exposed for direct inspection and gradient checks.
    Var film_layer(Graph& g, Var x, Var code, int layer, bool train);
    Var transformer_layer(Graph& g, Var x, int n, int s, int layer);

    // Invoked with each fusion module's output values during forward_premise;
    // used by the activation-importance tracer.
    std::function<void(const ModulePath&, const Tensor&)> activation_hook;

private:
    Var leaf(Graph& g, const std::string& id);
    Var bn(Graph& g, Var x, const std::string& prefix, bool train);
    Var encode_vision(Graph& g, Var img, bool train);
    Var encode_instruction(Graph& g, const std::vector<int>& tokens, int n, int s);
    Var decode(Graph& g, Var x);
    void hook(const std::string& kind, int layer, Graph& g, Var v);

    ModelConfig cfg_;
    std::map<std::string, ParamPtr> params_;
    std::vector<std::string> order_;
    bool encoders_frozen_ = false;
};

}  // namespace lilac::model
