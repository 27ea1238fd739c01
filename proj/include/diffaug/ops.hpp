// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "diffaug/rng.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug::ndgrad {

// Returns the gradient buffer of a parent, or nullptr when the parent does
// not take part in differentiation. Handles share one node, so a const
// handle still reaches the mutable gradient storage.
template <typename T>
inline std::vector<T>* grad_buf(const Tensor<T>& p) {
    if (!p.requires_grad()) return nullptr;
    p.node()->ensure_grad();
    return &p.node()->grad;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("add", a, b);
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op<T>("add", a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (auto* g = grad_buf(b))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("sub", a, b);
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
        if (auto* g = grad_buf(b))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("mul", a, b);
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a)) {
            const auto& bv2 = b.data();
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * bv2[i];
        }
        if (auto* g = grad_buf(b)) {
            const auto& av = a.data();
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * av[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) v *= c;
    return make_op<T>("scale", a.shape(), std::move(out), {a}, [a, c](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * c;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) v += c;
    return make_op<T>("add_scalar", a.shape(), std::move(out), {a}, [a](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) {
        const T s = T(1) / (T(1) + std::exp(-v));
        v = v * s;
    }
    return make_op<T>("silu", a.shape(), std::move(out), {a}, [a](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a)) {
            const auto& x = a.data();
            for (size_t i = 0; i < g->size(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-x[i]));
                (*g)[i] += n.grad[i] * (s * (T(1) + x[i] * (T(1) - s)));
            }
        }
    });
}

// |x| with subgradient 0 at x == 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = std::fabs(v);
    return make_op<T>("abs", a.shape(), std::move(out), {a}, [a](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(a)) {
            const auto& x = a.data();
            for (size_t i = 0; i < g->size(); ++i) {
                const T s = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
                (*g)[i] += n.grad[i] * s;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// C[M,N] += op(A) * op(B). The k accumulation order is ascending for every
// output element, so results are bit-stable across runs.
template <typename T>
void gemm_acc(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
    if (!ta && !tb) {
        for (int64_t i = 0; i < M; ++i)
            for (int64_t k = 0; k < K; ++k) {
                const T a = A[i * K + k];
                const T* brow = B + k * N;
                T* crow = C + i * N;
                for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
            }
    } else if (!ta && tb) {
        for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < N; ++j) {
                const T* arow = A + i * K;
                const T* brow = B + j * K;
                T acc = T(0);
                for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
                C[i * N + j] += acc;
            }
    } else if (ta && !tb) {
        for (int64_t k = 0; k < K; ++k)
            for (int64_t i = 0; i < M; ++i) {
                const T a = A[k * M + i];
                const T* brow = B + k * N;
                T* crow = C + i * N;
                for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
            }
    } else {
        for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < N; ++j) {
                T acc = T(0);
                for (int64_t k = 0; k < K; ++k) acc += A[k * M + i] * B[j * K + k];
                C[i * N + j] += acc;
            }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
    if (a.rank() != 2 || b.rank() != 2)
        op_error("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                               shape_str(b.shape()));
    const int64_t M = trans_a ? a.dim(1) : a.dim(0);
    const int64_t Ka = trans_a ? a.dim(0) : a.dim(1);
    const int64_t Kb = trans_b ? b.dim(1) : b.dim(0);
    const int64_t N = trans_b ? b.dim(0) : b.dim(1);
    if (Ka != Kb)
        op_error("matmul", "inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
    std::vector<T> out(size_t(M * N), T(0));
    gemm_acc(trans_a, trans_b, M, N, Ka, a.data().data(), b.data().data(), out.data());
    return make_op<T>(
        "matmul", Shape{M, N}, std::move(out), {a, b},
        [a, b, trans_a, trans_b, M, N, Ka](TensorNode<T>& n) mutable {
            // dA = dC * B^T (layouts depend on the transpose flags)
            if (auto* ga = grad_buf(a)) {
                if (!trans_a)
                    gemm_acc<T>(false, !trans_b, M, Ka, N, n.grad.data(), b.data().data(),
                                ga->data());
                else
                    gemm_acc<T>(trans_b, true, Ka, M, N, b.data().data(), n.grad.data(),
                                ga->data());
            }
            if (auto* gb = grad_buf(b)) {
                if (!trans_b)
                    gemm_acc<T>(!trans_a, false, Ka, N, M, a.data().data(), n.grad.data(),
                                gb->data());
                else
                    gemm_acc<T>(true, trans_a, N, Ka, M, n.grad.data(), a.data().data(),
                                gb->data());
            }
        });
}

// x[B,N] + v[N], broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
        op_error("add_rowvec", "shapes " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
    const int64_t B = x.dim(0), N = x.dim(1);
    std::vector<T> out(x.data());
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < N; ++j) out[i * N + j] += v.data()[j];
    return make_op<T>("add_rowvec", x.shape(), std::move(out), {x, v},
                      [x, v, B, N](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
                          if (auto* g = grad_buf(v))
                              for (int64_t i = 0; i < B; ++i)
                                  for (int64_t j = 0; j < N; ++j) (*g)[j] += n.grad[i * N + j];
                      });
}

// x[B,C,H,W] + v[B,C], broadcast over the spatial dims (per-sample channel
// bias; carries the timestep/class conditioning into each stage).
template <typename T>
Tensor<T> add_chanvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.rank() != 4 || v.rank() != 2 || x.dim(0) != v.dim(0) || x.dim(1) != v.dim(1))
        op_error("add_chanvec", "shapes " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(x.data());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T add = v.data()[b * C + c];
            T* p = out.data() + (b * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) p[i] += add;
        }
    return make_op<T>("add_chanvec", x.shape(), std::move(out), {x, v},
                      [x, v, B, C, HW](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
                          if (auto* g = grad_buf(v))
                              for (int64_t b = 0; b < B; ++b)
                                  for (int64_t c = 0; c < C; ++c) {
                                      const T* p = n.grad.data() + (b * C + c) * HW;
                                      T acc = T(0);
                                      for (int64_t i = 0; i < HW; ++i) acc += p[i];
                                      (*g)[b * C + c] += acc;
                                  }
                      });
}

// ---------------------------------------------------------------------------
// convolution and resampling (3x3, stride 1, zero padding 1)
// ---------------------------------------------------------------------------

template <typename T>
void im2col3x3(const T* x, int64_t C, int64_t H, int64_t W, T* col) {
    const int64_t HW = H * W;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
                T* dst = col + ((c * 3 + ky) * 3 + kx) * HW;
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + ky - 1;
                    if (sy < 0 || sy >= H) {
                        for (int64_t xw = 0; xw < W; ++xw) dst[y * W + xw] = T(0);
                        continue;
                    }
                    const T* src = x + c * HW + sy * W;
                    for (int64_t xw = 0; xw < W; ++xw) {
                        const int64_t sx = xw + kx - 1;
                        dst[y * W + xw] = (sx < 0 || sx >= W) ? T(0) : src[sx];
                    }
                }
            }
}

// Transposed layout [H*W, C*9]; used by the weight-gradient gemm so the
// inner loop is contiguous in both operands.
template <typename T>
void im2colT3x3(const T* x, int64_t C, int64_t H, int64_t W, T* colT) {
    const int64_t HW = H * W, K9 = C * 9;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t xw = 0; xw < W; ++xw) {
            T* row = colT + (y * W + xw) * K9;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t ky = 0; ky < 3; ++ky) {
                    const int64_t sy = y + ky - 1;
                    for (int64_t kx = 0; kx < 3; ++kx) {
                        const int64_t sx = xw + kx - 1;
                        row[(c * 3 + ky) * 3 + kx] =
                            (sy < 0 || sy >= H || sx < 0 || sx >= W)
                                ? T(0)
                                : x[c * HW + sy * W + sx];
                    }
                }
        }
}

template <typename T>
void col2im3x3_acc(const T* col, int64_t C, int64_t H, int64_t W, T* x) {
    const int64_t HW = H * W;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
                const T* src = col + ((c * 3 + ky) * 3 + kx) * HW;
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + ky - 1;
                    if (sy < 0 || sy >= H) continue;
                    T* dst = x + c * HW + sy * W;
                    for (int64_t xw = 0; xw < W; ++xw) {
                        const int64_t sx = xw + kx - 1;
                        if (sx >= 0 && sx < W) dst[sx] += src[y * W + xw];
                    }
                }
            }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (x.rank() != 4) op_error("conv2d", "input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
        op_error("conv2d", "weight must be [OC,C,3,3], got " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        op_error("conv2d", "channel mismatch " + shape_str(x.shape()) + " vs " +
                               shape_str(w.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t OC = w.dim(0), K9 = C * 9, HW = H * W;
    if (bias.rank() != 1 || bias.dim(0) != OC)
        op_error("conv2d", "bias must be [OC], got " + shape_str(bias.shape()));

    std::vector<T> out(size_t(N * OC * HW), T(0));
    std::vector<T> col(size_t(K9 * HW));
    for (int64_t n = 0; n < N; ++n) {
        im2col3x3(x.data().data() + n * C * HW, C, H, W, col.data());
        gemm_acc<T>(false, false, OC, HW, K9, w.data().data(), col.data(),
                    out.data() + n * OC * HW);
        for (int64_t oc = 0; oc < OC; ++oc) {
            T* p = out.data() + (n * OC + oc) * HW;
            const T bv = bias.data()[oc];
            for (int64_t i = 0; i < HW; ++i) p[i] += bv;
        }
    }
    return make_op<T>(
        "conv2d", Shape{N, OC, H, W}, std::move(out), {x, w, bias},
        [x, w, bias, N, C, H, W, OC, K9, HW](TensorNode<T>& n) mutable {
            auto* gx = grad_buf(x);
            auto* gw = grad_buf(w);
            auto* gb = grad_buf(bias);
            std::vector<T> colT(size_t(K9 * HW));
            std::vector<T> dcol(size_t(K9 * HW));
            for (int64_t img = 0; img < N; ++img) {
                const T* dy = n.grad.data() + img * OC * HW;
                if (gw) {
                    im2colT3x3(x.data().data() + img * C * HW, C, H, W, colT.data());
                    // dW[oc,k] += sum_p dy[oc,p] colT[p,k]
                    gemm_acc<T>(false, false, OC, K9, HW, dy, colT.data(), gw->data());
                }
                if (gb)
                    for (int64_t oc = 0; oc < OC; ++oc) {
                        T acc = T(0);
                        const T* p = dy + oc * HW;
                        for (int64_t i = 0; i < HW; ++i) acc += p[i];
                        (*gb)[oc] += acc;
                    }
                if (gx) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    gemm_acc<T>(true, false, K9, HW, OC, w.data().data(), dy, dcol.data());
                    col2im3x3_acc(dcol.data(), C, H, W, gx->data() + img * C * HW);
                }
            }
        });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
        op_error("avg_pool2", "input must be [N,C,2h,2w], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(size_t(N * C * Ho * Wo));
    const T* in = x.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < Ho; ++y)
            for (int64_t xw = 0; xw < Wo; ++xw) {
                const T* p = in + nc * H * W + 2 * y * W + 2 * xw;
                out[(nc * Ho + y) * Wo + xw] = (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
            }
    return make_op<T>("avg_pool2", Shape{N, C, Ho, Wo}, std::move(out), {x},
                      [x, N, C, H, W, Ho, Wo](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (int64_t nc = 0; nc < N * C; ++nc)
                                  for (int64_t y = 0; y < Ho; ++y)
                                      for (int64_t xw = 0; xw < Wo; ++xw) {
                                          const T gv =
                                              n.grad[(nc * Ho + y) * Wo + xw] * T(0.25);
                                          T* p = g->data() + nc * H * W + 2 * y * W + 2 * xw;
                                          p[0] += gv;
                                          p[1] += gv;
                                          p[W] += gv;
                                          p[W + 1] += gv;
                                      }
                      });
}

// Nearest-neighbour x2 upsampling; downstream convs smooth the result.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
    if (x.rank() != 4) op_error("upsample2", "input must be [N,C,H,W], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Ho = 2 * H, Wo = 2 * W;
    std::vector<T> out(size_t(N * C * Ho * Wo));
    const T* in = x.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xw = 0; xw < W; ++xw) {
                const T v = in[nc * H * W + y * W + xw];
                T* p = out.data() + nc * Ho * Wo + 2 * y * Wo + 2 * xw;
                p[0] = v;
                p[1] = v;
                p[Wo] = v;
                p[Wo + 1] = v;
            }
    return make_op<T>("upsample2", Shape{N, C, Ho, Wo}, std::move(out), {x},
                      [x, N, C, H, W, Ho, Wo](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (int64_t nc = 0; nc < N * C; ++nc)
                                  for (int64_t y = 0; y < H; ++y)
                                      for (int64_t xw = 0; xw < W; ++xw) {
                                          const T* p =
                                              n.grad.data() + nc * Ho * Wo + 2 * y * Wo + 2 * xw;
                                          (*g)[nc * H * W + y * W + xw] +=
                                              p[0] + p[1] + p[Wo] + p[Wo + 1];
                                      }
                      });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Per-channel normalization over the spatial dims with learned scale/shift.
// Statistics are per (sample, channel), so the op is batch-size independent.
template <typename T>
Tensor<T> affine_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      T eps = T(1e-5)) {
    if (x.rank() != 4) op_error("affine_norm", "input must be [N,C,H,W], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        op_error("affine_norm", "scale/shift must be [C]=" + std::to_string(C) + ", got " +
                                    shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    std::vector<T> out(size_t(N * C * HW));
    auto stats = std::make_shared<std::vector<T>>(size_t(N * C * 2));  // mu, inv per slice
    const T* in = x.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* p = in + nc * HW;
        T mu = T(0);
        for (int64_t i = 0; i < HW; ++i) mu += p[i];
        mu /= T(HW);
        T var = T(0);
        for (int64_t i = 0; i < HW; ++i) {
            const T d = p[i] - mu;
            var += d * d;
        }
        var /= T(HW);
        const T inv = T(1) / std::sqrt(var + eps);
        (*stats)[nc * 2] = mu;
        (*stats)[nc * 2 + 1] = inv;
        const T g = gamma.data()[nc % C], b = beta.data()[nc % C];
        T* o = out.data() + nc * HW;
        for (int64_t i = 0; i < HW; ++i) o[i] = g * (p[i] - mu) * inv + b;
    }
    return make_op<T>(
        "affine_norm", x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, stats, N, C, HW](TensorNode<T>& n) mutable {
            auto* gx = grad_buf(x);
            auto* gg = grad_buf(gamma);
            auto* gb = grad_buf(beta);
            const T* in = x.data().data();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T mu = (*stats)[nc * 2], inv = (*stats)[nc * 2 + 1];
                const T gam = gamma.data()[nc % C];
                const T* p = in + nc * HW;
                const T* dy = n.grad.data() + nc * HW;
                T sum_dy = T(0), sum_dy_xh = T(0);
                for (int64_t i = 0; i < HW; ++i) {
                    const T xh = (p[i] - mu) * inv;
                    sum_dy += dy[i];
                    sum_dy_xh += dy[i] * xh;
                }
                if (gg) (*gg)[nc % C] += sum_dy_xh;
                if (gb) (*gb)[nc % C] += sum_dy;
                if (gx) {
                    const T m = T(1) / T(HW);
                    T* o = gx->data() + nc * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const T xh = (p[i] - mu) * inv;
                        o[i] += gam * inv * (dy[i] - sum_dy * m - xh * sum_dy_xh * m);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() != 2) op_error("softmax", "input must be [B,C], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1);
    std::vector<T> out(x.data());
    for (int64_t b = 0; b < B; ++b) {
        T* row = out.data() + b * C;
        T m = row[0];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        T s = T(0);
        for (int64_t c = 0; c < C; ++c) {
            row[c] = std::exp(row[c] - m);
            s += row[c];
        }
        const T inv = T(1) / s;
        for (int64_t c = 0; c < C; ++c) row[c] *= inv;
    }
    return make_op<T>("softmax", x.shape(), std::move(out), {x},
                      [x, B, C](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (int64_t b = 0; b < B; ++b) {
                                  const T* p = n.value.data() + b * C;
                                  const T* dy = n.grad.data() + b * C;
                                  T dot = T(0);
                                  for (int64_t c = 0; c < C; ++c) dot += dy[c] * p[c];
                                  T* o = g->data() + b * C;
                                  for (int64_t c = 0; c < C; ++c) o[c] += p[c] * (dy[c] - dot);
                              }
                      });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    if (x.rank() != 2) op_error("log_softmax", "input must be [B,C], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1);
    std::vector<T> out(x.data());
    for (int64_t b = 0; b < B; ++b) {
        T* row = out.data() + b * C;
        T m = row[0];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        T s = T(0);
        for (int64_t c = 0; c < C; ++c) s += std::exp(row[c] - m);
        const T lse = m + std::log(s);
        for (int64_t c = 0; c < C; ++c) row[c] -= lse;
    }
    return make_op<T>("log_softmax", x.shape(), std::move(out), {x},
                      [x, B, C](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (int64_t b = 0; b < B; ++b) {
                                  const T* lp = n.value.data() + b * C;
                                  const T* dy = n.grad.data() + b * C;
                                  T sum_dy = T(0);
                                  for (int64_t c = 0; c < C; ++c) sum_dy += dy[c];
                                  T* o = g->data() + b * C;
                                  for (int64_t c = 0; c < C; ++c)
                                      o[c] += dy[c] - std::exp(lp[c]) * sum_dy;
                              }
                      });
}

// ---------------------------------------------------------------------------
// lookup, dropout, shape ops, reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        op_error("embedding", "table must be [V,D], got " + shape_str(table.shape()));
    const int64_t V = table.dim(0), D = table.dim(1);
    const int64_t B = int64_t(ids.size());
    std::vector<T> out(size_t(B * D));
    for (int64_t b = 0; b < B; ++b) {
        const int id = ids[size_t(b)];
        if (id < 0 || id >= V)
            op_error("embedding", "index " + std::to_string(id) + " out of range [0," +
                                      std::to_string(V) + ")");
        std::copy_n(table.data().data() + int64_t(id) * D, D, out.data() + b * D);
    }
    return make_op<T>("embedding", Shape{B, D}, std::move(out), {table},
                      [table, ids, D](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(table))
                              for (size_t b = 0; b < ids.size(); ++b) {
                                  const T* dy = n.grad.data() + int64_t(b) * D;
                                  T* o = g->data() + int64_t(ids[b]) * D;
                                  for (int64_t d = 0; d < D; ++d) o[d] += dy[d];
                              }
                      });
}

// Inverted dropout. rate == 0 is an exact identity and consumes no rng.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        op_error("dropout", "rate must be in [0,1), got " + std::to_string(rate));
    if (rate == 0.0) {
        std::vector<T> out(x.data());
        return make_op<T>("dropout", x.shape(), std::move(out), {x},
                          [x](TensorNode<T>& n) mutable {
                              if (auto* g = grad_buf(x))
                                  for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
                          });
    }
    const T keep_scale = T(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<uint8_t>>(x.data().size());
    std::vector<T> out(x.data());
    for (size_t i = 0; i < out.size(); ++i) {
        const bool keep = rng.uniform() >= rate;
        (*mask)[i] = keep;
        out[i] = keep ? out[i] * keep_scale : T(0);
    }
    return make_op<T>("dropout", x.shape(), std::move(out), {x},
                      [x, mask, keep_scale](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (size_t i = 0; i < g->size(); ++i)
                                  if ((*mask)[i]) (*g)[i] += n.grad[i] * keep_scale;
                      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        op_error("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    std::vector<T> out(x.data());
    return make_op<T>("reshape", std::move(shape), std::move(out), {x},
                      [x](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
                      });
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, size_t axis) {
    if (a.rank() != b.rank() || axis >= a.rank())
        op_error("concat", "rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (size_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.shape()[i] != b.shape()[i])
            op_error("concat",
                     "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ outside axis " + std::to_string(axis));
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    const int64_t da = a.shape()[axis], db = b.shape()[axis];
    Shape oshape = a.shape();
    oshape[axis] = da + db;
    std::vector<T> out(size_t(outer * (da + db) * inner));
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(a.data().data() + o * da * inner, da * inner,
                    out.data() + o * (da + db) * inner);
        std::copy_n(b.data().data() + o * db * inner, db * inner,
                    out.data() + o * (da + db) * inner + da * inner);
    }
    return make_op<T>("concat", std::move(oshape), std::move(out), {a, b},
                      [a, b, outer, inner, da, db](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(a))
                              for (int64_t o = 0; o < outer; ++o) {
                                  const T* src = n.grad.data() + o * (da + db) * inner;
                                  T* dst = g->data() + o * da * inner;
                                  for (int64_t i = 0; i < da * inner; ++i) dst[i] += src[i];
                              }
                          if (auto* g = grad_buf(b))
                              for (int64_t o = 0; o < outer; ++o) {
                                  const T* src = n.grad.data() + o * (da + db) * inner + da * inner;
                                  T* dst = g->data() + o * db * inner;
                                  for (int64_t i = 0; i < db * inner; ++i) dst[i] += src[i];
                              }
                      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    return make_op<T>("sum", Shape{}, {acc}, {x}, [x](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(x))
            for (auto& v : *g) v += n.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) op_error("mean", "empty tensor");
    T acc = T(0);
    for (T v : x.data()) acc += v;
    const T inv = T(1) / T(x.numel());
    return make_op<T>("mean", Shape{}, {acc * inv}, {x}, [x, inv](TensorNode<T>& n) mutable {
        if (auto* g = grad_buf(x))
            for (auto& v : *g) v += n.grad[0] * inv;
    });
}

// out[b] = x[b, ids[b]]
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& ids) {
    if (x.rank() != 2 || x.dim(0) != int64_t(ids.size()))
        op_error("gather_rows", "input " + shape_str(x.shape()) + " vs " +
                                    std::to_string(ids.size()) + " indices");
    const int64_t C = x.dim(1);
    std::vector<T> out(ids.size());
    for (size_t b = 0; b < ids.size(); ++b) {
        if (ids[b] < 0 || int64_t(ids[b]) >= C)
            op_error("gather_rows", "index " + std::to_string(ids[b]) + " out of range");
        out[b] = x.data()[int64_t(b) * C + ids[b]];
    }
    return make_op<T>("gather_rows", Shape{int64_t(ids.size())}, std::move(out), {x},
                      [x, ids, C](TensorNode<T>& n) mutable {
                          if (auto* g = grad_buf(x))
                              for (size_t b = 0; b < ids.size(); ++b)
                                  (*g)[int64_t(b) * C + ids[b]] += n.grad[b];
                      });
}

// ---------------------------------------------------------------------------
// compositions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// Mean cross entropy of logits against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    return scale(mean(gather_rows(log_softmax(logits), labels)), T(-1));
}

// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    auto d = sub(a, b);
    return mean(mul(d, d));
}

}  // namespace diffaug::ndgrad
