#include "lilac/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace lilac::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

MapConst as_mat(const Tensor& t, int rows, int cols) { return MapConst(t.data.data(), rows, cols); }
MapMat as_mat(Tensor& t, int rows, int cols) { return MapMat(t.data.data(), rows, cols); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace

Var add(Graph& g, Var a, Var b) {
    const Tensor& A = g.val(a);
    check_same_shape(A, g.val(b), "add");
    Tensor out = A;
    const Tensor& B = g.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& ga = gg.grad(a);
        Tensor& gb = gg.grad(b);
        for (std::size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] += go.data[i];
        }
    });
}

Var sub(Graph& g, Var a, Var b) {
    const Tensor& A = g.val(a);
    check_same_shape(A, g.val(b), "sub");
    Tensor out = A;
    const Tensor& B = g.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& ga = gg.grad(a);
        Tensor& gb = gg.grad(b);
        for (std::size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] -= go.data[i];
        }
    });
}

Var mul(Graph& g, Var a, Var b) {
    const Tensor& A = g.val(a);
    check_same_shape(A, g.val(b), "mul");
    Tensor out = A;
    const Tensor& B = g.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& A2 = gg.val(a);
        const Tensor& B2 = gg.val(b);
        Tensor& ga = gg.grad(a);
        Tensor& gb = gg.grad(b);
        for (std::size_t i = 0; i < go.data.size(); ++i) {
            ga.data[i] += go.data[i] * B2.data[i];
            gb.data[i] += go.data[i] * A2.data[i];
        }
    });
}

Var affine(Graph& g, Var a, float k, float c) {
    Tensor out = g.val(a);
    for (float& v : out.data) v = k * v + c;
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += k * go.data[i];
    });
}

Var add_bias(Graph& g, Var x, Var bias) {
    const Tensor& X = g.val(x);
    const Tensor& B = g.val(bias);
    int d = X.shape.back();
    if (B.ndim() != 1 || B.dim(0) != d)
        throw std::invalid_argument("add_bias: bias must match last dim");
    Tensor out = X;
    std::int64_t rows = X.numel() / d;
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) out.data[static_cast<std::size_t>(r * d + j)] += B.data[static_cast<std::size_t>(j)];
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        Tensor& gb = gg.grad(bias);
        for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) {
                float v = go.data[static_cast<std::size_t>(r * d + j)];
                gx.data[static_cast<std::size_t>(r * d + j)] += v;
                gb.data[static_cast<std::size_t>(j)] += v;
            }
    });
}

Var relu(Graph& g, Var a) {
    Tensor out = g.val(a);
    for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& A = gg.val(a);
        Tensor& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            if (A.data[i] > 0.0f) ga.data[i] += go.data[i];
    });
}

Var sigmoid(Graph& g, Var a) {
    Tensor out = g.val(a);
    for (float& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& Y = gg.val(o);
        Tensor& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[i] += go.data[i] * Y.data[i] * (1.0f - Y.data[i]);
    });
}

Var tanh_(Graph& g, Var a) {
    Tensor out = g.val(a);
    for (float& v : out.data) v = std::tanh(v);
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& Y = gg.val(o);
        Tensor& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[i] += go.data[i] * (1.0f - Y.data[i] * Y.data[i]);
    });
}

Var softplus(Graph& g, Var a) {
    Tensor out = g.val(a);
    for (float& v : out.data) {
        if (v > 20.0f) continue;                       // softplus(x) ~ x
        v = v < -20.0f ? std::exp(v) : std::log1p(std::exp(v));
    }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& A = gg.val(a);
        Tensor& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            ga.data[i] += go.data[i] / (1.0f + std::exp(-A.data[i]));
    });
}

Var reshape(Graph& g, Var a, std::vector<int> shape) {
    Tensor out = g.val(a).reshaped(std::move(shape));
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& ga = gg.grad(a);
        for (std::size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
    });
}

Var softmax_last(Graph& g, Var a) {
    const Tensor& A = g.val(a);
    int d = A.shape.back();
    std::int64_t rows = A.numel() / d;
    Tensor out = A;
    for (std::int64_t r = 0; r < rows; ++r) {
        float* row = out.data.data() + r * d;
        float mx = *std::max_element(row, row + d);
        double sum = 0.0;
        for (int j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < d; ++j) row[j] *= inv;
    }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& Y = gg.val(o);
        Tensor& ga = gg.grad(a);
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* y = Y.data.data() + r * d;
            const float* dy = go.data.data() + r * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += static_cast<double>(y[j]) * dy[j];
            float* dx = ga.data.data() + r * d;
            for (int j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - static_cast<float>(dot));
        }
    });
}

Var sum_all(Graph& g, Var a) {
    const Tensor& A = g.val(a);
    double s = 0.0;
    for (float v : A.data) s += v;
    Var o{static_cast<int>(g.size())};
    return g.make(Tensor::scalar(static_cast<float>(s)), [=](Graph& gg) {
        float go = gg.grad(o).at(0);
        Tensor& ga = gg.grad(a);
        for (float& v : ga.data) v += go;
    });
}

Var mean_all(Graph& g, Var a) {
    const Tensor& A = g.val(a);
    double s = 0.0;
    for (float v : A.data) s += v;
    float inv = 1.0f / static_cast<float>(A.numel());
    Var o{static_cast<int>(g.size())};
    return g.make(Tensor::scalar(static_cast<float>(s) * inv), [=](Graph& gg) {
        float go = gg.grad(o).at(0) * inv;
        Tensor& ga = gg.grad(a);
        for (float& v : ga.data) v += go;
    });
}

Var mean_seq(Graph& g, Var x) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 3) throw std::invalid_argument("mean_seq: expected [N,S,D]");
    int n = X.dim(0), s = X.dim(1), d = X.dim(2);
    if (s < 1) throw std::invalid_argument("mean_seq: empty reduction axis");
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int t = 0; t < s; ++t) acc += X.at(i, t, j);
            out.at(i, j) = static_cast<float>(acc / s);
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        float inv = 1.0f / s;
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < s; ++t)
                for (int j = 0; j < d; ++j) gx.at(i, t, j) += go.at(i, j) * inv;
    });
}

Var maxpool_hw(Graph& g, Var x) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 4) throw std::invalid_argument("maxpool_hw: expected [N,C,H,W]");
    int n = X.dim(0), c = X.dim(1), hw = X.dim(2) * X.dim(3);
    if (hw < 1) throw std::invalid_argument("maxpool_hw: empty reduction axis");
    Tensor out = Tensor::zeros({n, c});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * c);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const float* p = X.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            int best = 0;
            for (int k = 1; k < hw; ++k)
                if (p[k] > p[best]) best = k;  // strict: first max wins ties
            out.at(i, j) = p[best];
            (*argmax)[static_cast<std::size_t>(i) * c + j] = best;
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                int best = (*argmax)[static_cast<std::size_t>(i) * c + j];
                gx.data[(static_cast<std::size_t>(i) * c + j) * hw + best] += go.at(i, j);
            }
    });
}

Var meanpool_hw(Graph& g, Var x) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 4) throw std::invalid_argument("meanpool_hw: expected [N,C,H,W]");
    int n = X.dim(0), c = X.dim(1), hw = X.dim(2) * X.dim(3);
    if (hw < 1) throw std::invalid_argument("meanpool_hw: empty reduction axis");
    Tensor out = Tensor::zeros({n, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const float* p = X.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            double acc = 0.0;
            for (int k = 0; k < hw; ++k) acc += p[k];
            out.at(i, j) = static_cast<float>(acc / hw);
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        float inv = 1.0f / hw;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                float v = go.at(i, j) * inv;
                float* p = gx.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                for (int k = 0; k < hw; ++k) p[k] += v;
            }
    });
}

Var avgpool2x2(Graph& g, Var x) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 4 || X.dim(2) % 2 || X.dim(3) % 2)
        throw std::invalid_argument("avgpool2x2: expected [N,C,2h,2w]");
    int n = X.dim(0), c = X.dim(1), h = X.dim(2) / 2, w = X.dim(3) / 2;
    Tensor out = Tensor::zeros({n, c, h, w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            for (int r = 0; r < h; ++r)
                for (int q = 0; q < w; ++q)
                    out.at(i, j, r, q) = 0.25f * (X.at(i, j, 2 * r, 2 * q) + X.at(i, j, 2 * r, 2 * q + 1) +
                                                  X.at(i, j, 2 * r + 1, 2 * q) + X.at(i, j, 2 * r + 1, 2 * q + 1));
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                for (int r = 0; r < h; ++r)
                    for (int q = 0; q < w; ++q) {
                        float v = 0.25f * go.at(i, j, r, q);
                        gx.at(i, j, 2 * r, 2 * q) += v;
                        gx.at(i, j, 2 * r, 2 * q + 1) += v;
                        gx.at(i, j, 2 * r + 1, 2 * q) += v;
                        gx.at(i, j, 2 * r + 1, 2 * q + 1) += v;
                    }
    });
}

Var matmul(Graph& g, Var a, Var b) {
    const Tensor& A = g.val(a);
    const Tensor& B = g.val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
        throw std::invalid_argument("matmul: bad shapes " + shape_str(A.shape) + " x " + shape_str(B.shape));
    int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out = Tensor::zeros({m, n});
    as_mat(out, m, n).noalias() = as_mat(A, m, k) * as_mat(B, k, n);
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& A2 = gg.val(a);
        const Tensor& B2 = gg.val(b);
        as_mat(gg.grad(a), m, k).noalias() += as_mat(go, m, n) * as_mat(B2, k, n).transpose();
        as_mat(gg.grad(b), k, n).noalias() += as_mat(A2, m, k).transpose() * as_mat(go, m, n);
    });
}

Var qk_scores(Graph& g, Var q, Var k, int heads) {
    const Tensor& Q = g.val(q);
    const Tensor& K = g.val(k);
    check_same_shape(Q, K, "qk_scores");
    if (Q.ndim() != 3) throw std::invalid_argument("qk_scores: expected [N,S,D]");
    int n = Q.dim(0), s = Q.dim(1), d = Q.dim(2);
    if (d % heads) throw std::invalid_argument("qk_scores: D not divisible by heads");
    int dh = d / heads;
    float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Tensor out = Tensor::zeros({n, heads, s, s});
    // Head slices are strided in [N,S,D]; copy to contiguous buffers for GEMM.
    RowMat qh(s, dh), kh(s, dh);
    for (int i = 0; i < n; ++i)
        for (int hh = 0; hh < heads; ++hh) {
            for (int t = 0; t < s; ++t)
                for (int e = 0; e < dh; ++e) {
                    qh(t, e) = Q.at(i, t, hh * dh + e);
                    kh(t, e) = K.at(i, t, hh * dh + e);
                }
            MapMat(out.data.data() + ((static_cast<std::size_t>(i) * heads + hh) * s) * s, s, s).noalias() =
                qh * kh.transpose() * scale;
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& Q2 = gg.val(q);
        const Tensor& K2 = gg.val(k);
        Tensor& gq = gg.grad(q);
        Tensor& gk = gg.grad(k);
        RowMat qh2(s, dh), kh2(s, dh), dq(s, dh), dk(s, dh);
        for (int i = 0; i < n; ++i)
            for (int hh = 0; hh < heads; ++hh) {
                for (int t = 0; t < s; ++t)
                    for (int e = 0; e < dh; ++e) {
                        qh2(t, e) = Q2.at(i, t, hh * dh + e);
                        kh2(t, e) = K2.at(i, t, hh * dh + e);
                    }
                MapConst gs(go.data.data() + ((static_cast<std::size_t>(i) * heads + hh) * s) * s, s, s);
                dq.noalias() = gs * kh2 * scale;
                dk.noalias() = gs.transpose() * qh2 * scale;
                for (int t = 0; t < s; ++t)
                    for (int e = 0; e < dh; ++e) {
                        gq.at(i, t, hh * dh + e) += dq(t, e);
                        gk.at(i, t, hh * dh + e) += dk(t, e);
                    }
            }
    });
}

Var attn_mix(Graph& g, Var w, Var v, int heads) {
    const Tensor& W = g.val(w);
    const Tensor& V = g.val(v);
    if (W.ndim() != 4 || V.ndim() != 3) throw std::invalid_argument("attn_mix: bad ranks");
    int n = V.dim(0), s = V.dim(1), d = V.dim(2);
    if (W.dim(0) != n || W.dim(1) != heads || W.dim(2) != s || W.dim(3) != s || d % heads)
        throw std::invalid_argument("attn_mix: shape mismatch");
    int dh = d / heads;
    Tensor out = Tensor::zeros({n, s, d});
    RowMat vh(s, dh), oh(s, dh);
    for (int i = 0; i < n; ++i)
        for (int hh = 0; hh < heads; ++hh) {
            for (int t = 0; t < s; ++t)
                for (int e = 0; e < dh; ++e) vh(t, e) = V.at(i, t, hh * dh + e);
            MapConst wm(W.data.data() + ((static_cast<std::size_t>(i) * heads + hh) * s) * s, s, s);
            oh.noalias() = wm * vh;
            for (int t = 0; t < s; ++t)
                for (int e = 0; e < dh; ++e) out.at(i, t, hh * dh + e) = oh(t, e);
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& W2 = gg.val(w);
        const Tensor& V2 = gg.val(v);
        Tensor& gw = gg.grad(w);
        Tensor& gv = gg.grad(v);
        RowMat vh2(s, dh), goh(s, dh), dvh(s, dh);
        for (int i = 0; i < n; ++i)
            for (int hh = 0; hh < heads; ++hh) {
                for (int t = 0; t < s; ++t)
                    for (int e = 0; e < dh; ++e) {
                        vh2(t, e) = V2.at(i, t, hh * dh + e);
                        goh(t, e) = go.at(i, t, hh * dh + e);
                    }
                MapConst wm(W2.data.data() + ((static_cast<std::size_t>(i) * heads + hh) * s) * s, s, s);
                MapMat gwm(gw.data.data() + ((static_cast<std::size_t>(i) * heads + hh) * s) * s, s, s);
                gwm.noalias() += goh * vh2.transpose();
                dvh.noalias() = wm.transpose() * goh;
                for (int t = 0; t < s; ++t)
                    for (int e = 0; e < dh; ++e) gv.at(i, t, hh * dh + e) += dvh(t, e);
            }
    });
}

namespace {

// Packs receptive fields of one sample into cols [C*kh*kw, Ho*Wo].
void im2col(const Tensor& x, int ni, int kh, int kw, int stride, int pad, int ho, int wo, RowMat& cols) {
    int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    for (int cc = 0; cc < c; ++cc)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int row = (cc * kh + ki) * kw + kj;
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride + ki - pad;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride + kj - pad;
                        cols(row, oi * wo + oj) =
                            (ii >= 0 && ii < h && jj >= 0 && jj < w) ? x.at(ni, cc, ii, jj) : 0.0f;
                    }
                }
            }
}

void col2im_add(Tensor& gx, int ni, int kh, int kw, int stride, int pad, int ho, int wo, const RowMat& cols) {
    int c = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
    for (int cc = 0; cc < c; ++cc)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int row = (cc * kh + ki) * kw + kj;
                for (int oi = 0; oi < ho; ++oi) {
                    int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    for (int oj = 0; oj < wo; ++oj) {
                        int jj = oj * stride + kj - pad;
                        if (jj < 0 || jj >= w) continue;
                        gx.at(ni, cc, ii, jj) += cols(row, oi * wo + oj);
                    }
                }
            }
}

}  // namespace

Var conv2d(Graph& g, Var x, Var w, Var bias, int stride, int pad) {
    const Tensor& X = g.val(x);
    const Tensor& W = g.val(w);
    const Tensor& B = g.val(bias);
    if (X.ndim() != 4 || W.ndim() != 4) throw std::invalid_argument("conv2d: expected 4-d input and kernel");
    if (X.dim(1) != W.dim(1))
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(X.shape) + " vs " + shape_str(W.shape));
    int n = X.dim(0), f = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    if (B.numel() != f) throw std::invalid_argument("conv2d: bias size mismatch");
    int ho = (X.dim(2) + 2 * pad - kh) / stride + 1;
    int wo = (X.dim(3) + 2 * pad - kw) / stride + 1;
    int ck = X.dim(1) * kh * kw;
    Tensor out = Tensor::zeros({n, f, ho, wo});
    RowMat cols(ck, ho * wo);
    MapConst wm(W.data.data(), f, ck);
    for (int i = 0; i < n; ++i) {
        im2col(X, i, kh, kw, stride, pad, ho, wo, cols);
        MapMat om(out.data.data() + static_cast<std::size_t>(i) * f * ho * wo, f, ho * wo);
        om.noalias() = wm * cols;
        for (int ff = 0; ff < f; ++ff) om.row(ff).array() += B.data[static_cast<std::size_t>(ff)];
    }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& X2 = gg.val(x);
        const Tensor& W2 = gg.val(w);
        Tensor& gx = gg.grad(x);
        Tensor& gw = gg.grad(w);
        Tensor& gb = gg.grad(bias);
        RowMat cols2(ck, ho * wo), dcols(ck, ho * wo);
        MapConst wm2(W2.data.data(), f, ck);
        MapMat gwm(gw.data.data(), f, ck);
        for (int i = 0; i < n; ++i) {
            MapConst gom(go.data.data() + static_cast<std::size_t>(i) * f * ho * wo, f, ho * wo);
            im2col(X2, i, kh, kw, stride, pad, ho, wo, cols2);
            gwm.noalias() += gom * cols2.transpose();
            dcols.noalias() = wm2.transpose() * gom;
            col2im_add(gx, i, kh, kw, stride, pad, ho, wo, dcols);
            // Plain loop: Eigen's redux splits at the first aligned element,
            // so its rounding would depend on the buffer address.
            for (int ff = 0; ff < f; ++ff) {
                const float* row = go.data.data() +
                                   (static_cast<std::size_t>(i) * f + static_cast<std::size_t>(ff)) *
                                       static_cast<std::size_t>(ho * wo);
                float sum = 0.0f;
                for (int k2 = 0; k2 < ho * wo; ++k2) sum += row[k2];
                gb.data[static_cast<std::size_t>(ff)] += sum;
            }
        }
    });
}

Var batch_norm(Graph& g, Var x, Var gamma, Var beta, const ParamPtr& running_mean,
               const ParamPtr& running_var, bool training, float momentum, float eps,
               bool update_stats) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 4) throw std::invalid_argument("batch_norm: expected [N,C,H,W]");
    int n = X.dim(0), c = X.dim(1), hw = X.dim(2) * X.dim(3);
    const Tensor& G = g.val(gamma);
    const Tensor& B = g.val(beta);
    if (G.numel() != c || B.numel() != c) throw std::invalid_argument("batch_norm: gamma/beta size mismatch");
    std::int64_t m = static_cast<std::int64_t>(n) * hw;

    auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
    if (training) {
        for (int j = 0; j < c; ++j) {
            double s = 0.0, s2 = 0.0;
            for (int i = 0; i < n; ++i) {
                const float* p = X.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                for (int k = 0; k < hw; ++k) {
                    s += p[k];
                    s2 += static_cast<double>(p[k]) * p[k];
                }
            }
            double mu = s / static_cast<double>(m);
            double var = s2 / static_cast<double>(m) - mu * mu;
            if (var < 0.0) var = 0.0;
            (*mean)[static_cast<std::size_t>(j)] = static_cast<float>(mu);
            (*inv_std)[static_cast<std::size_t>(j)] = static_cast<float>(1.0 / std::sqrt(var + eps));
            if (update_stats) {
                double var_unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
                running_mean->value.at(j) = (1.0f - momentum) * running_mean->value.at(j) + momentum * static_cast<float>(mu);
                running_var->value.at(j) = (1.0f - momentum) * running_var->value.at(j) + momentum * static_cast<float>(var_unbiased);
            }
        }
    } else {
        for (int j = 0; j < c; ++j) {
            (*mean)[static_cast<std::size_t>(j)] = running_mean->value.at(j);
            (*inv_std)[static_cast<std::size_t>(j)] = 1.0f / std::sqrt(running_var->value.at(j) + eps);
        }
    }

    Tensor out = Tensor::zeros(X.shape);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const float* p = X.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            float* q = out.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            float mu = (*mean)[static_cast<std::size_t>(j)], is = (*inv_std)[static_cast<std::size_t>(j)];
            float gj = G.at(j), bj = B.at(j);
            for (int k = 0; k < hw; ++k) q[k] = (p[k] - mu) * is * gj + bj;
        }

    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& X2 = gg.val(x);
        const Tensor& G2 = gg.val(gamma);
        Tensor& gx = gg.grad(x);
        Tensor& ggam = gg.grad(gamma);
        Tensor& gbet = gg.grad(beta);
        for (int j = 0; j < c; ++j) {
            float mu = (*mean)[static_cast<std::size_t>(j)], is = (*inv_std)[static_cast<std::size_t>(j)];
            float gj = G2.at(j);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = 0; i < n; ++i) {
                const float* p = X2.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                const float* dy = go.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                for (int k = 0; k < hw; ++k) {
                    sum_dy += dy[k];
                    sum_dy_xhat += static_cast<double>(dy[k]) * (p[k] - mu) * is;
                }
            }
            ggam.at(j) += static_cast<float>(sum_dy_xhat);
            gbet.at(j) += static_cast<float>(sum_dy);
            if (training) {
                float inv_m = 1.0f / static_cast<float>(m);
                for (int i = 0; i < n; ++i) {
                    const float* p = X2.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                    const float* dy = go.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                    float* dx = gx.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                    for (int k = 0; k < hw; ++k) {
                        float xhat = (p[k] - mu) * is;
                        dx[k] += gj * is * (dy[k] - inv_m * static_cast<float>(sum_dy) -
                                            xhat * inv_m * static_cast<float>(sum_dy_xhat));
                    }
                }
            } else {
                for (int i = 0; i < n; ++i) {
                    const float* dy = go.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                    float* dx = gx.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                    for (int k = 0; k < hw; ++k) dx[k] += dy[k] * gj * is;
                }
            }
        }
    });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, float eps) {
    const Tensor& X = g.val(x);
    int d = X.shape.back();
    const Tensor& G = g.val(gamma);
    const Tensor& B = g.val(beta);
    if (G.numel() != d || B.numel() != d) throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
    std::int64_t rows = X.numel() / d;
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
    auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
    Tensor out = Tensor::zeros(X.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* p = X.data.data() + r * d;
        double s = 0.0, s2 = 0.0;
        for (int j = 0; j < d; ++j) {
            s += p[j];
            s2 += static_cast<double>(p[j]) * p[j];
        }
        double mu = s / d;
        double var = s2 / d - mu * mu;
        if (var < 0.0) var = 0.0;
        float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*mean)[static_cast<std::size_t>(r)] = static_cast<float>(mu);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        float* q = out.data.data() + r * d;
        for (int j = 0; j < d; ++j) q[j] = (p[j] - static_cast<float>(mu)) * is * G.at(j) + B.at(j);
    }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& X2 = gg.val(x);
        const Tensor& G2 = gg.val(gamma);
        Tensor& gx = gg.grad(x);
        Tensor& ggam = gg.grad(gamma);
        Tensor& gbet = gg.grad(beta);
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* p = X2.data.data() + r * d;
            const float* dy = go.data.data() + r * d;
            float mu = (*mean)[static_cast<std::size_t>(r)], is = (*inv_std)[static_cast<std::size_t>(r)];
            double sum_dg = 0.0, sum_dg_xhat = 0.0;
            for (int j = 0; j < d; ++j) {
                float xhat = (p[j] - mu) * is;
                float dg = dy[j] * G2.at(j);
                sum_dg += dg;
                sum_dg_xhat += static_cast<double>(dg) * xhat;
                ggam.at(j) += dy[j] * xhat;
                gbet.at(j) += dy[j];
            }
            float* dx = gx.data.data() + r * d;
            float inv_d = 1.0f / d;
            for (int j = 0; j < d; ++j) {
                float xhat = (p[j] - mu) * is;
                float dg = dy[j] * G2.at(j);
                dx[j] += is * (dg - inv_d * static_cast<float>(sum_dg) -
                               xhat * inv_d * static_cast<float>(sum_dg_xhat));
            }
        }
    });
}

Var concat_seq(Graph& g, Var a, Var b) {
    const Tensor& A = g.val(a);
    const Tensor& B = g.val(b);
    if (A.ndim() != 3 || B.ndim() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2))
        throw std::invalid_argument("concat_seq: incompatible shapes");
    int n = A.dim(0), s1 = A.dim(1), s2 = B.dim(1), d = A.dim(2);
    Tensor out = Tensor::zeros({n, s1 + s2, d});
    for (int i = 0; i < n; ++i) {
        std::copy_n(A.data.data() + static_cast<std::size_t>(i) * s1 * d, static_cast<std::size_t>(s1) * d,
                    out.data.data() + static_cast<std::size_t>(i) * (s1 + s2) * d);
        std::copy_n(B.data.data() + static_cast<std::size_t>(i) * s2 * d, static_cast<std::size_t>(s2) * d,
                    out.data.data() + static_cast<std::size_t>(i) * (s1 + s2) * d + static_cast<std::size_t>(s1) * d);
    }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& ga = gg.grad(a);
        Tensor& gb = gg.grad(b);
        for (int i = 0; i < n; ++i) {
            const float* src = go.data.data() + static_cast<std::size_t>(i) * (s1 + s2) * d;
            float* pa = ga.data.data() + static_cast<std::size_t>(i) * s1 * d;
            float* pb = gb.data.data() + static_cast<std::size_t>(i) * s2 * d;
            for (std::int64_t k = 0; k < static_cast<std::int64_t>(s1) * d; ++k) pa[k] += src[k];
            for (std::int64_t k = 0; k < static_cast<std::int64_t>(s2) * d; ++k) pb[k] += src[static_cast<std::size_t>(s1) * d + k];
        }
    });
}

Var slice_seq(Graph& g, Var x, int t) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 3 || t < 0 || t >= X.dim(1)) throw std::invalid_argument("slice_seq: bad index");
    int n = X.dim(0), s = X.dim(1), d = X.dim(2);
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
        std::copy_n(X.data.data() + (static_cast<std::size_t>(i) * s + t) * d, static_cast<std::size_t>(d),
                    out.data.data() + static_cast<std::size_t>(i) * d);
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) gx.at(i, t, j) += go.at(i, j);
    });
}

Var gather_rows(Graph& g, Var table, const std::vector<int>& ids, int n, int s) {
    const Tensor& T = g.val(table);
    if (T.ndim() != 2) throw std::invalid_argument("gather_rows: expected [V,D] table");
    if (static_cast<int>(ids.size()) != n * s) throw std::invalid_argument("gather_rows: ids size mismatch");
    int v = T.dim(0), d = T.dim(1);
    Tensor out = Tensor::zeros({n, s, d});
    for (int i = 0; i < n * s; ++i) {
        int id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= v) throw std::out_of_range("gather_rows: id out of range");
        std::copy_n(T.data.data() + static_cast<std::size_t>(id) * d, static_cast<std::size_t>(d),
                    out.data.data() + static_cast<std::size_t>(i) * d);
    }
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gt = gg.grad(table);
        for (int i = 0; i < n * s; ++i) {
            int id = (*ids_copy)[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j)
                gt.data[static_cast<std::size_t>(id) * d + j] += go.data[static_cast<std::size_t>(i) * d + j];
        }
    });
}

Var spatial_to_seq(Graph& g, Var x) {
    const Tensor& X = g.val(x);
    if (X.ndim() != 4) throw std::invalid_argument("spatial_to_seq: expected [N,C,H,W]");
    int n = X.dim(0), c = X.dim(1), hw = X.dim(2) * X.dim(3);
    Tensor out = Tensor::zeros({n, hw, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            for (int k = 0; k < hw; ++k)
                out.at(i, k, j) = X.data[(static_cast<std::size_t>(i) * c + j) * hw + k];
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                for (int k = 0; k < hw; ++k)
                    gx.data[(static_cast<std::size_t>(i) * c + j) * hw + k] += go.at(i, k, j);
    });
}

Var channel_scale(Graph& g, Var x, Var s) {
    const Tensor& X = g.val(x);
    const Tensor& S = g.val(s);
    if (X.ndim() != 4 || S.ndim() != 2 || S.dim(0) != X.dim(0) || S.dim(1) != X.dim(1))
        throw std::invalid_argument("channel_scale: shape mismatch");
    int n = X.dim(0), c = X.dim(1), hw = X.dim(2) * X.dim(3);
    Tensor out = X;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            float v = S.at(i, j);
            float* p = out.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            for (int k = 0; k < hw; ++k) p[k] *= v;
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& X2 = gg.val(x);
        const Tensor& S2 = gg.val(s);
        Tensor& gx = gg.grad(x);
        Tensor& gs = gg.grad(s);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                const float* dy = go.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                const float* p = X2.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                float* dx = gx.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                float v = S2.at(i, j);
                double acc = 0.0;
                for (int k = 0; k < hw; ++k) {
                    dx[k] += dy[k] * v;
                    acc += static_cast<double>(dy[k]) * p[k];
                }
                gs.at(i, j) += static_cast<float>(acc);
            }
    });
}

Var channel_shift(Graph& g, Var x, Var b) {
    const Tensor& X = g.val(x);
    const Tensor& B = g.val(b);
    if (X.ndim() != 4 || B.ndim() != 2 || B.dim(0) != X.dim(0) || B.dim(1) != X.dim(1))
        throw std::invalid_argument("channel_shift: shape mismatch");
    int n = X.dim(0), c = X.dim(1), hw = X.dim(2) * X.dim(3);
    Tensor out = X;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            float v = B.at(i, j);
            float* p = out.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            for (int k = 0; k < hw; ++k) p[k] += v;
        }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        Tensor& gx = gg.grad(x);
        Tensor& gb = gg.grad(b);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                const float* dy = go.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                float* dx = gx.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                double acc = 0.0;
                for (int k = 0; k < hw; ++k) {
                    dx[k] += dy[k];
                    acc += dy[k];
                }
                gb.at(i, j) += static_cast<float>(acc);
            }
    });
}

Var cosine_rows(Graph& g, Var a, Var b, float eps) {
    const Tensor& A = g.val(a);
    const Tensor& B = g.val(b);
    check_same_shape(A, B, "cosine_rows");
    if (A.ndim() != 2) throw std::invalid_argument("cosine_rows: expected [N,P]");
    int n = A.dim(0), p = A.dim(1);
    Tensor out = Tensor::zeros({n});
    auto na = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
    auto nb = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (int j = 0; j < p; ++j) {
            dot += static_cast<double>(A.at(i, j)) * B.at(i, j);
            sa += static_cast<double>(A.at(i, j)) * A.at(i, j);
            sb += static_cast<double>(B.at(i, j)) * B.at(i, j);
        }
        float la = static_cast<float>(std::sqrt(sa + eps));
        float lb = static_cast<float>(std::sqrt(sb + eps));
        (*na)[static_cast<std::size_t>(i)] = la;
        (*nb)[static_cast<std::size_t>(i)] = lb;
        out.at(i) = static_cast<float>(dot) / (la * lb);
    }
    Var o{static_cast<int>(g.size())};
    return g.make(std::move(out), [=](Graph& gg) {
        const Tensor& go = gg.grad(o);
        const Tensor& A2 = gg.val(a);
        const Tensor& B2 = gg.val(b);
        const Tensor& S = gg.val(o);
        Tensor& ga = gg.grad(a);
        Tensor& gb = gg.grad(b);
        for (int i = 0; i < n; ++i) {
            float la = (*na)[static_cast<std::size_t>(i)], lb = (*nb)[static_cast<std::size_t>(i)];
            float si = S.at(i), dyi = go.at(i);
            for (int j = 0; j < p; ++j) {
                ga.at(i, j) += dyi * (B2.at(i, j) / (la * lb) - si * A2.at(i, j) / (la * la));
                gb.at(i, j) += dyi * (A2.at(i, j) / (la * lb) - si * B2.at(i, j) / (lb * lb));
            }
        }
    });
}

void adam_step(const std::vector<ParamPtr>& params, float lr, float beta1, float beta2, float eps) {
    for (const ParamPtr& p : params) {
        if (!p->trainable) continue;
        if (p->adam_m.numel() != p->value.numel()) {
            p->adam_m = Tensor::zeros(p->value.shape);
            p->adam_v = Tensor::zeros(p->value.shape);
            p->adam_steps = 0;
        }
        ++p->adam_steps;
        float bc1 = 1.0f - std::pow(beta1, static_cast<float>(p->adam_steps));
        float bc2 = 1.0f - std::pow(beta2, static_cast<float>(p->adam_steps));
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            std::size_t k = static_cast<std::size_t>(i);
            float gv = p->grad.data[k];
            p->adam_m.data[k] = beta1 * p->adam_m.data[k] + (1.0f - beta1) * gv;
            p->adam_v.data[k] = beta2 * p->adam_v.data[k] + (1.0f - beta2) * gv * gv;
            float mhat = p->adam_m.data[k] / bc1;
            float vhat = p->adam_v.data[k] / bc2;
            p->value.data[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        p->zero_grad();
    }
}

}  // namespace lilac::ops
