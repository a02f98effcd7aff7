// Microbenchmarks for the hot forward paths: GEMM, convolution, attention,
// and a full fusion-layer forward per architecture.

#include <benchmark/benchmark.h>

#include "lilac/model.hpp"
#include "lilac/ops.hpp"

using namespace lilac;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    for (float& v : t.data) v = rng.normal();
    return t;
}

void BM_matmul(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Rng rng(1);
    Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
    for (auto _ : state) {
        Graph g;
        Var out = ops::matmul(g, g.constant(a), g.constant(b));
        benchmark::DoNotOptimize(g.val(out).data.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void BM_conv2d(benchmark::State& state) {
    int n = static_cast<int>(state.range(0));
    Rng rng(2);
    Tensor img = random_tensor({n, 3, 56, 56}, rng);
    Tensor w = random_tensor({32, 3, 3, 3}, rng);
    Tensor b = random_tensor({32}, rng);
    for (auto _ : state) {
        Graph g;
        Var out = ops::conv2d(g, g.constant(img), g.constant(w), g.constant(b), 2, 1);
        benchmark::DoNotOptimize(g.val(out).data.data());
    }
}

void BM_attention(benchmark::State& state) {
    int s = static_cast<int>(state.range(0));
    model::ModelConfig cfg =
        model::ModelConfig::defaults(model::Arch::kTransformer, data::Dataset::kLilac2D, false);
    model::VlModel m(cfg, Rng(3));
    Rng rng(4);
    Tensor x = random_tensor({8, s, cfg.embed_dim}, rng);
    for (auto _ : state) {
        Graph g;
        Var out = m.transformer_layer(g, g.constant(x), 8, s, 0);
        benchmark::DoNotOptimize(g.val(out).data.data());
    }
}

void BM_film_layer(benchmark::State& state) {
    model::ModelConfig cfg =
        model::ModelConfig::defaults(model::Arch::kFilm, data::Dataset::kLilac2D, false);
    model::VlModel m(cfg, Rng(5));
    Rng rng(6);
    int side = cfg.feat_hw();
    Tensor x = random_tensor({8, cfg.channels, side, side}, rng);
    Tensor code = random_tensor({8, cfg.gru_dim}, rng);
    for (auto _ : state) {
        Graph g;
        Var out = m.film_layer(g, g.constant(x), g.constant(code), 0, true);
        benchmark::DoNotOptimize(g.val(out).data.data());
    }
}

}  // namespace

BENCHMARK(BM_matmul)->Arg(64)->Arg(256);
BENCHMARK(BM_conv2d)->Arg(4)->Arg(16);
BENCHMARK(BM_attention)->Arg(16)->Arg(56);
BENCHMARK(BM_film_layer);

BENCHMARK_MAIN();
