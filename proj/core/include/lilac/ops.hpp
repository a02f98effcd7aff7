#pragma once

#include <vector>

#include "lilac/graph.hpp"

namespace lilac::ops {

// Elementwise / structural ------------------------------------------------

Var add(Graph& g, Var a, Var b);           // same shape
Var sub(Graph& g, Var a, Var b);           // same shape
Var mul(Graph& g, Var a, Var b);           // same shape, elementwise
Var affine(Graph& g, Var a, float k, float c);  // k*a + c
Var add_bias(Graph& g, Var x, Var bias);   // broadcast over last dim
Var relu(Graph& g, Var a);
Var sigmoid(Graph& g, Var a);
Var tanh_(Graph& g, Var a);
Var softplus(Graph& g, Var a);             // log(1 + e^x), overflow-safe
Var reshape(Graph& g, Var a, std::vector<int> shape);
Var softmax_last(Graph& g, Var a);         // softmax over the last dim

// Reductions ---------------------------------------------------------------

Var sum_all(Graph& g, Var a);              // -> scalar
Var mean_all(Graph& g, Var a);             // -> scalar
Var mean_seq(Graph& g, Var x);             // [N,S,D] -> [N,D]
Var maxpool_hw(Graph& g, Var x);           // [N,C,H,W] -> [N,C]; ties: first in row-major
Var meanpool_hw(Graph& g, Var x);          // [N,C,H,W] -> [N,C]
Var avgpool2x2(Graph& g, Var x);           // [N,C,H,W] -> [N,C,H/2,W/2]; H,W even

// Linear algebra -----------------------------------------------------------

Var matmul(Graph& g, Var a, Var b);        // [M,K]x[K,N] -> [M,N]

// Attention pieces: q,k,v are [N,S,D] already projected; heads divides D.
Var qk_scores(Graph& g, Var q, Var k, int heads);     // -> [N,h,S,S], scaled by 1/sqrt(D/h)
Var attn_mix(Graph& g, Var w, Var v, int heads);      // [N,h,S,S],[N,S,D] -> [N,S,D]

// Convolution / normalization ----------------------------------------------

// x [N,C,H,W], w [F,C,kh,kw], bias [F]; zero padding.
Var conv2d(Graph& g, Var x, Var w, Var bias, int stride, int pad);

// gamma/beta [C]; running stats are mutated in training mode (momentum
// update), read in eval mode. x is [N,C,H,W].
// update_stats=false keeps training-mode normalization (batch statistics)
// while leaving the running buffers untouched — used for frozen modules.
Var batch_norm(Graph& g, Var x, Var gamma, Var beta, const ParamPtr& running_mean,
               const ParamPtr& running_var, bool training, float momentum = 0.1f,
               float eps = 1e-5f, bool update_stats = true);

// Normalizes the last dim; gamma/beta [D].
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, float eps = 1e-5f);

// Sequence utilities ---------------------------------------------------------

Var concat_seq(Graph& g, Var a, Var b);    // [N,S1,D] + [N,S2,D] -> [N,S1+S2,D]
Var slice_seq(Graph& g, Var x, int t);     // [N,S,E] -> [N,E]
Var gather_rows(Graph& g, Var table, const std::vector<int>& ids, int n, int s);  // -> [N,S,D]
Var spatial_to_seq(Graph& g, Var x);       // [N,C,H,W] -> [N,H*W,C]
Var channel_scale(Graph& g, Var x, Var s); // [N,C,H,W] * [N,C]
Var channel_shift(Graph& g, Var x, Var b); // [N,C,H,W] + [N,C]

// Similarity ----------------------------------------------------------------

Var cosine_rows(Graph& g, Var a, Var b, float eps = 1e-8f);  // [N,P],[N,P] -> [N]

// Optimizer -------------------------------------------------------------------

/// One Adam update with bias correction over every trainable parameter;
/// gradients are zeroed afterwards. Frozen parameters are untouched.
void adam_step(const std::vector<ParamPtr>& params, float lr, float beta1 = 0.9f,
               float beta2 = 0.999f, float eps = 1e-8f);

}  // namespace lilac::ops
