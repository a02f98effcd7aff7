#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <unordered_set>

#include "fd_check.hpp"
#include "lilac/model.hpp"
#include "lilac/ops.hpp"

using namespace lilac;
using namespace lilac::model;
using fdtest::grad_rel_err_ref;
namespace R = reffwd;
using R::RT;

namespace {
constexpr double kGradTol = 1e-4;

ModelConfig tiny_config(Arch arch) {
    ModelConfig c;
    c.arch = arch;
    c.dataset = data::Dataset::kLilac2D;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 4;
    c.embed_dim = 8;
    c.film_word_dim = 6;
    c.gru_dim = 10;
    c.channels = 4;
    c.decoder_dim = 5;
    return c;
}

void randomize_grad_params(const std::vector<ParamPtr>& ps, Rng& rng) {
    for (const ParamPtr& p : ps)
        for (float& v : p->value.data) v = rng.uniform(-0.5f, 0.5f);
}

}  // namespace

TEST_CASE("list_modules: counts, canonical contents, invalid paths rejected") {
    Rng rng(1);
    VlModel film(ModelConfig::defaults(Arch::kFilm, data::Dataset::kLilac2D, false), rng.fork("a"));
    VlModel xf(ModelConfig::defaults(Arch::kTransformer, data::Dataset::kLilac2D, false), rng.fork("b"));
    CHECK(film.list_modules().size() == 24);  // 6 kinds x 4 layers
    CHECK(xf.list_modules().size() == 20);    // 5 kinds x 4 layers

    ModulePath attn0{Arch::kTransformer, 0, "attn"};
    auto mods = xf.list_modules();
    CHECK(std::find(mods.begin(), mods.end(), attn0) != mods.end());
    CHECK_THROWS_AS(validate_module_path(ModulePath{Arch::kFilm, 0, "attn"}, 4), std::invalid_argument);
    CHECK_THROWS_AS(validate_module_path(ModulePath{Arch::kFilm, 4, "conv1"}, 4), std::invalid_argument);
    CHECK(module_path_from_string("transformer/L2/ffn1") == (ModulePath{Arch::kTransformer, 2, "ffn1"}));
}

TEST_CASE("parameter partition: fusion params covered exactly once by module paths") {
    Rng rng(2);
    for (Arch arch : {Arch::kFilm, Arch::kTransformer}) {
        VlModel m(ModelConfig::defaults(arch, data::Dataset::kLilac2D, false), rng.fork(arch_to_string(arch)));
        std::set<std::string> covered;
        for (const ModulePath& p : m.list_modules())
            for (const std::string& id : m.module_param_ids(p))
                CHECK(covered.insert(id).second);  // pairwise disjoint
        std::set<std::string> fusion;
        for (const ParamPtr& p : m.fusion_params()) fusion.insert(p->id);
        CHECK(covered == fusion);
    }
}

TEST_CASE("attention parameter share is about 73% at configured dims") {
    Rng rng(3);
    VlModel m(ModelConfig::defaults(Arch::kTransformer, data::Dataset::kLilac2D, false), rng);
    for (int l = 0; l < 4; ++l) {
        double share = m.attention_param_share(l);
        CHECK(share > 0.68);
        CHECK(share < 0.78);
    }
}

TEST_CASE("film layer: zero heads with gamma bias 1 reduce to plain conv block") {
    Rng rng(4);
    VlModel m(tiny_config(Arch::kFilm), rng);
    // Zero modulation weights; gamma bias 1, beta bias 0.
    m.param("f/L0/mod_gamma/w")->value.fill(0.0f);
    m.param("f/L0/mod_gamma/b")->value.fill(1.0f);
    m.param("f/L0/mod_beta/w")->value.fill(0.0f);
    m.param("f/L0/mod_beta/b")->value.fill(0.0f);

    Tensor x = Tensor::zeros({2, 4, 5, 5});
    Tensor code = Tensor::zeros({2, 10});
    Rng fill(5);
    for (float& v : x.data) v = fill.uniform(-1, 1);
    for (float& v : code.data) v = fill.uniform(-1, 1);

    Graph g;
    Var out = m.film_layer(g, g.constant(x), g.constant(code), 0, true);

    // Plain conv block: conv1 -> bn1 -> relu -> conv2 -> bn2 -> relu.
    Graph g2;
    Var c1 = ops::conv2d(g2, g2.constant(x), g2.leaf(m.param("f/L0/conv1/w")),
                         g2.leaf(m.param("f/L0/conv1/b")), 1, 1);
    Var b1 = ops::batch_norm(g2, c1, g2.leaf(m.param("f/L0/bn1/gamma")), g2.leaf(m.param("f/L0/bn1/beta")),
                             m.param("f/L0/bn1/rm"), m.param("f/L0/bn1/rv"), true);
    Var c2 = ops::conv2d(g2, ops::relu(g2, b1), g2.leaf(m.param("f/L0/conv2/w")),
                         g2.leaf(m.param("f/L0/conv2/b")), 1, 1);
    Var b2 = ops::batch_norm(g2, c2, g2.leaf(m.param("f/L0/bn2/gamma")), g2.leaf(m.param("f/L0/bn2/beta")),
                             m.param("f/L0/bn2/rm"), m.param("f/L0/bn2/rv"), true);
    Var ref = ops::relu(g2, b2);

    for (std::size_t i = 0; i < g.val(out).data.size(); ++i)
        CHECK(g.val(out).data[i] == doctest::Approx(g2.val(ref).data[i]).epsilon(1e-4));
}

TEST_CASE("film layer: zero gamma head makes pre-norm features equal broadcast beta") {
    Rng rng(6);
    ModelConfig cfg = tiny_config(Arch::kFilm);
    VlModel m(cfg, rng);
    m.param("f/L0/mod_gamma/w")->value.fill(0.0f);
    m.param("f/L0/mod_gamma/b")->value.fill(0.0f);

    Tensor x = Tensor::zeros({2, 4, 5, 5});
    Tensor code = Tensor::zeros({2, 10});
    Rng fill(7);
    for (float& v : x.data) v = fill.uniform(-1, 1);
    for (float& v : code.data) v = fill.uniform(-1, 1);

    // With gamma == 0 the modulated features are exactly the broadcast beta
    // values; observe them through the mod_beta and bn2 hooks.
    Tensor beta_vals, conv_scaled;
    m.activation_hook = [&](const ModulePath& p, const Tensor& t) {
        if (p.layer == 0 && p.kind == "mod_beta") beta_vals = t;
    };
    Graph g;
    m.film_layer(g, g.constant(x), g.constant(code), 0, true);
    REQUIRE(beta_vals.numel() == 8);

    Graph g2;
    Var scaled = ops::channel_shift(
        g2, ops::channel_scale(g2, g2.constant(Tensor::zeros({2, 4, 5, 5})), g2.constant(Tensor::zeros({2, 4}))),
        g2.constant(beta_vals));
    // channel_shift of zeros by beta = beta broadcast; compare against direct
    // reconstruction of the modulated tensor.
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < 4; ++c)
            for (int p = 0; p < 25; ++p) {
                float v = g2.val(scaled).data[static_cast<std::size_t>((i * 4 + c) * 25 + p)];
                CHECK(v == doctest::Approx(beta_vals.at(i, c)));
            }
}

TEST_CASE("film layer full gradient check vs f64 finite differences") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        VlModel m(tiny_config(Arch::kFilm), rng.fork(static_cast<std::uint64_t>(trial)));
        auto x = std::make_shared<Parameter>("x", Tensor::zeros({2, 4, 5, 5}));
        auto code = std::make_shared<Parameter>("code", Tensor::zeros({2, 10}));
        auto wgt = std::make_shared<Parameter>("wgt", Tensor::zeros({2, 4, 5, 5}));
        Rng fill = rng.fork("fill").fork(static_cast<std::uint64_t>(trial));
        randomize_grad_params({x, code, wgt}, fill);

        std::vector<ParamPtr> params = {x, code, wgt};
        std::vector<std::string> ids = {"f/L0/conv1/w", "f/L0/conv1/b", "f/L0/bn1/gamma",
                                        "f/L0/bn1/beta", "f/L0/conv2/w", "f/L0/conv2/b",
                                        "f/L0/mod_gamma/w", "f/L0/mod_gamma/b",
                                        "f/L0/mod_beta/w", "f/L0/mod_beta/b",
                                        "f/L0/bn2/gamma", "f/L0/bn2/beta"};
        for (const std::string& id : ids) params.push_back(m.param(id));

        auto loss = [&](Graph& g) {
            Var out = m.film_layer(g, g.leaf(x), g.leaf(code), 0, true);
            return ops::mean_all(g, ops::mul(g, out, g.leaf(wgt)));
        };
        auto ref = [](const std::vector<RT>& p) {
            // p: x, code, wgt, then the 12 layer parameters in `ids` order.
            RT c1 = R::rconv2d(p[0], p[3], p[4], 1, 1);
            RT b1 = R::rbatch_norm_train(c1, p[5], p[6]);
            RT c2 = R::rconv2d(R::rrelu(b1), p[7], p[8], 1, 1);
            RT gamma = R::radd_bias(R::rmatmul(p[1], p[9]), p[10]);
            RT beta = R::radd_bias(R::rmatmul(p[1], p[11]), p[12]);
            RT mod = R::rchannel_shift(R::rchannel_scale(c2, gamma), beta);
            RT b2 = R::rbatch_norm_train(mod, p[13], p[14]);
            return R::rmean(R::rmul(R::rrelu(b2), p[2]));
        };
        CHECK(grad_rel_err_ref(params, loss, ref) < kGradTol);
    }
}

TEST_CASE("transformer layer: zero attn/ffn weights reduce to norm2(norm1(x))") {
    Rng rng(9);
    VlModel m(tiny_config(Arch::kTransformer), rng);
    for (const char* w : {"wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"})
        m.param(std::string("f/L0/attn/") + w)->value.fill(0.0f);
    for (const char* w : {"ffn1/w", "ffn1/b", "ffn2/w", "ffn2/b"})
        m.param(std::string("f/L0/") + w)->value.fill(0.0f);

    Tensor x = Tensor::zeros({2, 3, 8});
    Rng fill(10);
    for (float& v : x.data) v = fill.uniform(-1, 1);

    Graph g;
    Var out = m.transformer_layer(g, g.constant(x), 2, 3, 0);
    Graph g2;
    Var n1 = ops::layer_norm(g2, g2.constant(x), g2.leaf(m.param("f/L0/norm1/gamma")),
                             g2.leaf(m.param("f/L0/norm1/beta")));
    Var n2 = ops::layer_norm(g2, n1, g2.leaf(m.param("f/L0/norm2/gamma")),
                             g2.leaf(m.param("f/L0/norm2/beta")));
    for (std::size_t i = 0; i < g.val(out).data.size(); ++i)
        CHECK(g.val(out).data[i] == doctest::Approx(g2.val(n2).data[i]).epsilon(1e-4));
}

TEST_CASE("transformer layer: permuting batch items permutes outputs identically") {
    Rng rng(11);
    VlModel m(tiny_config(Arch::kTransformer), rng);
    Tensor x = Tensor::zeros({3, 4, 8});
    Rng fill(12);
    for (float& v : x.data) v = fill.uniform(-1, 1);

    Tensor xp = Tensor::zeros({3, 4, 8});  // batch order (2, 0, 1)
    int perm[3] = {2, 0, 1};
    for (int i = 0; i < 3; ++i)
        std::copy(x.data.begin() + perm[i] * 32, x.data.begin() + (perm[i] + 1) * 32,
                  xp.data.begin() + i * 32);

    Graph g;
    const Tensor& out = g.val(m.transformer_layer(g, g.constant(x), 3, 4, 0));
    Graph g2;
    const Tensor& outp = g2.val(m.transformer_layer(g2, g2.constant(xp), 3, 4, 0));
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 32; ++k)
            CHECK(outp.data[static_cast<std::size_t>(i * 32 + k)] ==
                  out.data[static_cast<std::size_t>(perm[i] * 32 + k)]);
}

TEST_CASE("transformer layer full gradient check vs f64 finite differences") {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        VlModel m(tiny_config(Arch::kTransformer), rng.fork(static_cast<std::uint64_t>(trial)));
        auto x = std::make_shared<Parameter>("x", Tensor::zeros({2, 3, 8}));
        auto wgt = std::make_shared<Parameter>("wgt", Tensor::zeros({2, 3, 8}));
        Rng fill = rng.fork("fill").fork(static_cast<std::uint64_t>(trial));
        randomize_grad_params({x, wgt}, fill);

        std::vector<ParamPtr> params = {x, wgt};
        std::vector<std::string> ids = {"f/L0/attn/wq", "f/L0/attn/bq", "f/L0/attn/wk", "f/L0/attn/bk",
                                        "f/L0/attn/wv", "f/L0/attn/bv", "f/L0/attn/wo", "f/L0/attn/bo",
                                        "f/L0/norm1/gamma", "f/L0/norm1/beta",
                                        "f/L0/ffn1/w", "f/L0/ffn1/b", "f/L0/ffn2/w", "f/L0/ffn2/b",
                                        "f/L0/norm2/gamma", "f/L0/norm2/beta"};
        for (const std::string& id : ids) params.push_back(m.param(id));

        auto loss = [&](Graph& g) {
            Var out = m.transformer_layer(g, g.leaf(x), 2, 3, 0);
            return ops::mean_all(g, ops::mul(g, out, g.leaf(wgt)));
        };
        auto ref = [](const std::vector<RT>& p) {
            RT xf = R::rreshape(p[0], {6, 8});
            auto proj = [&](const RT& w, const RT& b) {
                return R::rreshape(R::radd_bias(R::rmatmul(xf, w), b), {2, 3, 8});
            };
            RT q = proj(p[2], p[3]), k = proj(p[4], p[5]), v = proj(p[6], p[7]);
            RT att = R::rsoftmax_last(R::rqk_scores(q, k, 2));
            RT mixed = R::rattn_mix(att, v, 2);
            RT ao = R::rreshape(R::radd_bias(R::rmatmul(R::rreshape(mixed, {6, 8}), p[8]), p[9]), {2, 3, 8});
            RT y = R::rlayer_norm(R::radd(p[0], ao), p[10], p[11]);
            RT f1 = R::radd_bias(R::rmatmul(R::rreshape(y, {6, 8}), p[12]), p[13]);
            RT f2 = R::radd_bias(R::rmatmul(R::rrelu(f1), p[14]), p[15]);
            RT z = R::rlayer_norm(R::radd(y, R::rreshape(f2, {2, 3, 8})), p[16], p[17]);
            return R::rmean(R::rmul(z, p[1]));
        };
        CHECK(grad_rel_err_ref(params, loss, ref) < kGradTol);
    }
}

TEST_CASE("forward_premise / forward_hypothesis contracts") {
    Rng rng(14);
    for (Arch arch : {Arch::kFilm, Arch::kTransformer}) {
        ModelConfig cfg = tiny_config(arch);
        VlModel m(cfg, rng.fork(arch_to_string(arch)));

        Rng gen(15);
        data::Example ex = data::generate_example(data::Dataset::kLilac2D, 0, gen);
        model::Batch b = make_batch({&ex});

        Graph g;
        Var anchor = m.forward_premise(g, b.tokens, b.n, b.s, b.premise, false);
        CHECK(g.val(anchor).shape == std::vector<int>{1, cfg.decoder_dim});
        Graph g2;
        Var hyp = m.forward_hypothesis(g2, b.positive, false);
        CHECK(g2.val(hyp).shape == std::vector<int>{1, cfg.decoder_dim});

        // Determinism in eval mode.
        Graph g3;
        Var again = m.forward_premise(g3, b.tokens, b.n, b.s, b.premise, false);
        CHECK(g3.val(again).data == g.val(anchor).data);
        Graph g4;
        CHECK(g4.val(m.forward_hypothesis(g4, b.positive, false)).data == g2.val(hyp).data);
    }
}

TEST_CASE("embeddings react to instruction and image changes") {
    Rng rng(16);
    ModelConfig cfg = tiny_config(Arch::kFilm);
    VlModel m(cfg, rng);
    Rng gen(17);
    int changed_instr = 0, changed_img = 0;
    const int trials = 100;
    for (int i = 0; i < trials; ++i) {
        Rng r = gen.fork(static_cast<std::uint64_t>(i));
        int ia = r.randint(72);
        int ib = (ia + 1 + r.randint(71)) % 72;
        data::Example ea = data::generate_example(data::Dataset::kLilac2D, ia, r);
        data::Example eb = data::generate_example(data::Dataset::kLilac2D, ib, r);

        // Same premise, different instruction.
        model::Batch ba = make_batch({&ea});
        Graph g1, g2;
        auto va = g1.val(m.forward_premise(g1, ba.tokens, 1, ba.s, ba.premise, false)).data;
        model::Batch bb = make_batch({&eb});
        auto vb = g2.val(m.forward_premise(g2, bb.tokens, 1, bb.s, ba.premise, false)).data;
        if (va != vb) ++changed_instr;

        // Distinct images give distinct embeddings.
        Graph g3, g4;
        auto ha = g3.val(m.forward_hypothesis(g3, ba.premise, false)).data;
        auto hb = g4.val(m.forward_hypothesis(g4, bb.premise, false)).data;
        if (ha != hb) ++changed_img;
    }
    CHECK(changed_instr == trials);
    CHECK(changed_img == trials);
}

TEST_CASE("after freeze, 1000 optimizer steps leave g/h/d bytes unchanged") {
    Rng rng(18);
    ModelConfig cfg = tiny_config(Arch::kTransformer);
    VlModel m(cfg, rng);
    m.freeze_encoders();
    std::vector<Tensor> before;
    for (const ParamPtr& p : m.encoder_params()) before.push_back(p->value);

    Rng gen(19);
    data::Example ex = data::generate_example(data::Dataset::kLilac2D, 3, gen);
    model::Batch b = make_batch({&ex});
    auto all = m.all_params();
    for (int step = 0; step < 1000; ++step) {
        if (step < 3) {
            // Real forward/backward to route genuine gradients.
            Graph g;
            Var out = m.forward_premise(g, b.tokens, b.n, b.s, b.premise, true);
            g.backward(ops::mean_all(g, out));
        } else {
            for (const ParamPtr& p : all) p->grad.fill(0.01f);
        }
        ops::adam_step(all, 1e-2f);
    }
    auto after = m.encoder_params();
    for (std::size_t i = 0; i < after.size(); ++i)
        CHECK(after[i]->value.data == before[i].data);
}

TEST_CASE("make_batch rejects mixed token lengths") {
    Rng gen(20);
    data::Example a = data::generate_example(data::Dataset::kLilac2D, 0, gen);  // "...down": 5 words
    data::Example b = data::generate_example(data::Dataset::kLilac2D, 1, gen);  // "...to the left": 7
    REQUIRE(a.tokens.size() != b.tokens.size());
    CHECK_THROWS_AS(make_batch({&a, &b}), std::invalid_argument);
}
