#pragma once

// Differentiable operators used by the generator, discriminator and encoder.
// Image tensors are NCHW. Dense GEMMs go through Eigen.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "styledem/nn/autograd.hpp"

namespace styledem::nn {

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <class T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

namespace detail {

inline void require(bool ok, const char* op, const std::string& what) {
    if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

template <class T>
void im2col(const T* x, int C, int H, int W, int K, T* cols) {
    const int pad = K / 2;
    const int HW = H * W;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < K; ++ky) {
            for (int kx = 0; kx < K; ++kx) {
                T* row = cols + static_cast<std::size_t>((c * K + ky) * K + kx) * HW;
                const int dy = ky - pad;
                const int dx = kx - pad;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy;
                    T* dst = row + y * W;
                    if (sy < 0 || sy >= H) {
                        std::fill(dst, dst + W, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * H + sy) * W;
                    for (int xx = 0; xx < W; ++xx) {
                        const int sx = xx + dx;
                        dst[xx] = (sx < 0 || sx >= W) ? T(0) : src[sx];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, int C, int H, int W, int K, T* x) {
    const int pad = K / 2;
    const int HW = H * W;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < K; ++ky) {
            for (int kx = 0; kx < K; ++kx) {
                const T* row = cols + static_cast<std::size_t>((c * K + ky) * K + kx) * HW;
                const int dy = ky - pad;
                const int dx = kx - pad;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= H) continue;
                    T* dst = x + (static_cast<std::size_t>(c) * H + sy) * W;
                    const T* src = row + y * W;
                    const int x0 = std::max(0, -dx);
                    const int x1 = std::min(W, W - dx);
                    for (int xx = x0; xx < x1; ++xx) dst[xx + dx] += src[xx];
                }
            }
        }
    }
}

// Bilinear 2x upsampling taps along one axis (half-pixel centers, clamped).
inline void up_taps(int p, int n, int& i0, int& i1, double& w0, double& w1) {
    const int i = p / 2;
    i0 = i;
    i1 = (p % 2 == 0) ? std::max(i - 1, 0) : std::min(i + 1, n - 1);
    w0 = 0.75;
    w1 = 0.25;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape() == b.shape(), "add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = self.parent(k);
            if (!p.requires_grad) continue;
            auto& g = p.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape() == b.shape(), "sub", "shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.parent(0).requires_grad) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parent(1).requires_grad) {
            auto& g = self.parent(1).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= s;
    return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

// y = x for x >= 0, slope * x otherwise, times gain.
template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2), T gain = T(std::sqrt(2.0))) {
    Tensor<T> out = x.value();
    for (auto& v : out.data) v = (v >= T(0) ? v : v * slope) * gain;
    return make_result<T>(std::move(out), {x}, [slope, gain](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * gain * (p.value[i] >= T(0) ? T(1) : slope);
    });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    detail::require(numel(shape) == x.size(), "reshape", "element count mismatch");
    Tensor<T> out(std::move(shape), x.value().data);
    return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------- dense

// y[N,Out] = weight_gain * x[N,In] W[Out,In]^T + bias_gain * b[Out]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b, T weight_gain, T bias_gain) {
    detail::require(x.value().rank() == 2 && w.value().rank() == 2, "linear", "expects rank-2 input and weight");
    const int N = x.dim(0), In = x.dim(1), Out = w.dim(0);
    detail::require(w.dim(1) == In, "linear", "input width " + std::to_string(In) + " vs weight " + shape_str(w.shape()));
    const bool has_bias = b.defined();
    Tensor<T> out({N, Out});
    MapRM<T> Y(out.ptr(), N, Out);
    ConstMapRM<T> X(x.value().ptr(), N, In);
    ConstMapRM<T> Wm(w.value().ptr(), Out, In);
    Y.noalias() = weight_gain * (X * Wm.transpose());
    if (has_bias)
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < Out; ++o) Y(n, o) += bias_gain * b.value()[o];
    std::vector<Var<T>> inputs{x, w};
    if (has_bias) inputs.push_back(b);
    return make_result<T>(std::move(out), inputs, [N, In, Out, weight_gain, bias_gain, has_bias](Node<T>& self) {
        ConstMapRM<T> G(self.grad.ptr(), N, Out);
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        if (px.requires_grad) {
            MapRM<T> GX(px.grad_buffer().ptr(), N, In);
            ConstMapRM<T> Wm(pw.value.ptr(), Out, In);
            GX.noalias() += weight_gain * (G * Wm);
        }
        if (pw.requires_grad) {
            MapRM<T> GW(pw.grad_buffer().ptr(), Out, In);
            ConstMapRM<T> X(px.value.ptr(), N, In);
            GW.noalias() += weight_gain * (G.transpose() * X);
        }
        if (has_bias && self.parent(2).requires_grad) {
            auto& gb = self.parent(2).grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < Out; ++o) gb[o] += bias_gain * G(n, o);
        }
    });
}

// z / sqrt(mean(z^2) + eps) per row.
template <class T>
Var<T> pixel_norm(const Var<T>& z, T eps = T(1e-8)) {
    const int N = z.dim(0);
    const int D = static_cast<int>(z.size()) / N;
    Tensor<T> out = z.value();
    std::vector<T> inv(N);
    for (int n = 0; n < N; ++n) {
        T ms = 0;
        for (int d = 0; d < D; ++d) ms += out[n * D + d] * out[n * D + d];
        inv[n] = T(1) / std::sqrt(ms / D + eps);
        for (int d = 0; d < D; ++d) out[n * D + d] *= inv[n];
    }
    return make_result<T>(std::move(out), {z}, [N, D, inv](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.grad_buffer();
        for (int n = 0; n < N; ++n) {
            T dot = 0;
            for (int d = 0; d < D; ++d) dot += self.grad[n * D + d] * p.value[n * D + d];
            const T r = inv[n];
            for (int d = 0; d < D; ++d)
                g[n * D + d] += r * self.grad[n * D + d] - r * r * r * dot * p.value[n * D + d] / D;
        }
    });
}

// Picks row j out of [N,L,D] giving [N,D].
template <class T>
Var<T> select_row(const Var<T>& ws, int j) {
    detail::require(ws.value().rank() == 3, "select_row", "expects [N,L,D]");
    const int N = ws.dim(0), L = ws.dim(1), D = ws.dim(2);
    detail::require(j >= 0 && j < L, "select_row", "row out of range");
    Tensor<T> out({N, D});
    for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) out[n * D + d] = ws.value()[(n * L + j) * D + d];
    return make_result<T>(std::move(out), {ws}, [N, L, D, j](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) g[(n * L + j) * D + d] += self.grad[n * D + d];
    });
}

// Stacks [N,D] rows into [N,L,D].
template <class T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
    detail::require(!rows.empty(), "stack_rows", "no rows");
    const int N = rows[0].dim(0), D = rows[0].dim(1);
    const int L = static_cast<int>(rows.size());
    Tensor<T> out({N, L, D});
    for (int j = 0; j < L; ++j) {
        detail::require(rows[j].shape() == rows[0].shape(), "stack_rows", "row shape mismatch");
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) out[(n * L + j) * D + d] = rows[j].value()[n * D + d];
    }
    return make_result<T>(std::move(out), rows, [N, L, D](Node<T>& self) {
        for (int j = 0; j < L; ++j) {
            auto& p = self.parent(j);
            if (!p.requires_grad) continue;
            auto& g = p.grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d) g[n * D + d] += self.grad[(n * L + j) * D + d];
        }
    });
}

// ---------------------------------------------------------------- images

// Same-padded stride-1 convolution: x[N,C,H,W] * w[O,C,K,K] * gain.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, T gain) {
    detail::require(x.value().rank() == 4 && w.value().rank() == 4, "conv2d", "expects NCHW input and OCKK weight");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), K = w.dim(2);
    detail::require(w.dim(1) == C && w.dim(3) == K && K % 2 == 1, "conv2d",
                    "weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    const int HW = H * W, CKK = C * K * K;
    Tensor<T> out({N, O, H, W});
    std::vector<T> cols(K == 1 ? 0 : static_cast<std::size_t>(CKK) * HW);
    ConstMapRM<T> Wm(w.value().ptr(), O, CKK);
    for (int n = 0; n < N; ++n) {
        const T* xn = x.value().ptr() + static_cast<std::size_t>(n) * C * HW;
        const T* src = xn;
        if (K != 1) {
            detail::im2col(xn, C, H, W, K, cols.data());
            src = cols.data();
        }
        MapRM<T> Y(out.ptr() + static_cast<std::size_t>(n) * O * HW, O, HW);
        Y.noalias() = gain * (Wm * ConstMapRM<T>(src, CKK, HW));
    }
    return make_result<T>(std::move(out), {x, w}, [N, C, H, W, O, K, gain](Node<T>& self) {
        const int HW = H * W, CKK = C * K * K;
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        std::vector<T> cols(static_cast<std::size_t>(CKK) * HW);
        ConstMapRM<T> Wm(pw.value.ptr(), O, CKK);
        T* gx = px.requires_grad ? px.grad_buffer().ptr() : nullptr;
        T* gw = pw.requires_grad ? pw.grad_buffer().ptr() : nullptr;
        for (int n = 0; n < N; ++n) {
            ConstMapRM<T> G(self.grad.ptr() + static_cast<std::size_t>(n) * O * HW, O, HW);
            const T* xn = px.value.ptr() + static_cast<std::size_t>(n) * C * HW;
            if (gw) {
                const T* src = xn;
                if (K != 1) {
                    detail::im2col(xn, C, H, W, K, cols.data());
                    src = cols.data();
                }
                MapRM<T>(gw, O, CKK).noalias() += gain * (G * ConstMapRM<T>(src, CKK, HW).transpose());
            }
            if (gx) {
                T* gxn = gx + static_cast<std::size_t>(n) * C * HW;
                if (K == 1) {
                    MapRM<T>(gxn, C, HW).noalias() += gain * (Wm.transpose() * G);
                } else {
                    MapRM<T>(cols.data(), CKK, HW).noalias() = gain * (Wm.transpose() * G);
                    detail::col2im_add(cols.data(), C, H, W, K, gxn);
                }
            }
        }
    });
}

// y[n,c,:,:] = x[n,c,:,:] * s[n,c]
template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
    const int N = x.dim(0), C = x.dim(1);
    const int HW = static_cast<int>(x.size()) / (N * C);
    detail::require(s.value().rank() == 2 && s.dim(0) == N && s.dim(1) == C, "scale_channels",
                    "scale " + shape_str(s.shape()) + " vs input " + shape_str(x.shape()));
    Tensor<T> out = x.value();
    for (int nc = 0; nc < N * C; ++nc) {
        const T f = s.value()[nc];
        for (int i = 0; i < HW; ++i) out[static_cast<std::size_t>(nc) * HW + i] *= f;
    }
    return make_result<T>(std::move(out), {x, s}, [N, C, HW](Node<T>& self) {
        auto& px = self.parent(0);
        auto& ps = self.parent(1);
        for (int nc = 0; nc < N * C; ++nc) {
            const std::size_t base = static_cast<std::size_t>(nc) * HW;
            if (px.requires_grad) {
                auto& g = px.grad_buffer();
                const T f = ps.value[nc];
                for (int i = 0; i < HW; ++i) g[base + i] += self.grad[base + i] * f;
            }
            if (ps.requires_grad) {
                T acc = 0;
                for (int i = 0; i < HW; ++i) acc += self.grad[base + i] * px.value[base + i];
                ps.grad_buffer()[nc] += acc;
            }
        }
    });
}

// Weight demodulation coefficients for a modulated convolution:
// d[n,o] = 1 / sqrt(gain^2 * sum_c s[n,c]^2 * sum_k w[o,c,k]^2 + eps)
template <class T>
Var<T> demodulation(const Var<T>& s, const Var<T>& w, T gain, T eps = T(1e-8)) {
    const int N = s.dim(0), C = s.dim(1), O = w.dim(0);
    const int KK = w.dim(2) * w.dim(3);
    detail::require(w.dim(1) == C, "demodulation", "channel mismatch");
    MatrixRM<T> w2(O, C);
    for (int o = 0; o < O; ++o)
        for (int c = 0; c < C; ++c) {
            T acc = 0;
            for (int k = 0; k < KK; ++k) {
                const T v = w.value()[(static_cast<std::size_t>(o) * C + c) * KK + k];
                acc += v * v;
            }
            w2(o, c) = acc * gain * gain;
        }
    MatrixRM<T> s2 = ConstMapRM<T>(s.value().ptr(), N, C).array().square().matrix();
    MatrixRM<T> q = s2 * w2.transpose();
    Tensor<T> out({N, O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) out[n * O + o] = T(1) / std::sqrt(q(n, o) + eps);
    return make_result<T>(std::move(out), {s, w}, [N, C, O, KK, gain, w2, s2](Node<T>& self) {
        // dq = -1/2 d^3 * grad
        MatrixRM<T> dq(N, O);
        for (int i = 0; i < N * O; ++i) {
            const T d = self.value[i];
            dq.data()[i] = T(-0.5) * d * d * d * self.grad[i];
        }
        auto& ps = self.parent(0);
        auto& pw = self.parent(1);
        if (ps.requires_grad) {
            MatrixRM<T> ds = dq * w2;  // [N,C], times 2 s
            auto& g = ps.grad_buffer();
            for (int i = 0; i < N * C; ++i) g[i] += ds.data()[i] * T(2) * ps.value[i];
        }
        if (pw.requires_grad) {
            MatrixRM<T> dw2 = dq.transpose() * s2;  // [O,C], times 2 gain^2 w
            auto& g = pw.grad_buffer();
            for (int o = 0; o < O; ++o)
                for (int c = 0; c < C; ++c) {
                    const T f = dw2(o, c) * T(2) * gain * gain;
                    for (int k = 0; k < KK; ++k) {
                        const std::size_t idx = (static_cast<std::size_t>(o) * C + c) * KK + k;
                        g[idx] += f * pw.value[idx];
                    }
                }
        }
    });
}

// y = x + gain * b[c]
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b, T gain = T(1)) {
    const int N = x.dim(0), C = x.dim(1);
    const int HW = static_cast<int>(x.size()) / (N * C);
    detail::require(static_cast<int>(b.size()) == C, "add_channel_bias", "bias size mismatch");
    Tensor<T> out = x.value();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T v = gain * b.value()[c];
            T* p = out.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) p[i] += v;
        }
    return make_result<T>(std::move(out), {x, b}, [N, C, HW, gain](Node<T>& self) {
        if (self.parent(0).requires_grad) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parent(1).requires_grad) {
            auto& g = self.parent(1).grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T* p = self.grad.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
                    T acc = 0;
                    for (int i = 0; i < HW; ++i) acc += p[i];
                    g[c] += gain * acc;
                }
        }
    });
}

// y = x + strength * noise, noise is [N or 1, 1, H, W] and not differentiated.
template <class T>
Var<T> add_noise(const Var<T>& x, const Tensor<T>& noise, const Var<T>& strength) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int HW = H * W;
    detail::require(noise.rank() == 4 && noise.dim(1) == 1 && noise.dim(2) == H && noise.dim(3) == W &&
                        (noise.dim(0) == 1 || noise.dim(0) == N),
                    "add_noise", "noise shape " + shape_str(noise.shape) + " vs " + shape_str(x.shape()));
    const bool shared = noise.dim(0) == 1;
    const T k = strength.value()[0];
    Tensor<T> out = x.value();
    for (int n = 0; n < N; ++n) {
        const T* nz = noise.ptr() + (shared ? 0 : static_cast<std::size_t>(n) * HW);
        for (int c = 0; c < C; ++c) {
            T* p = out.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) p[i] += k * nz[i];
        }
    }
    return make_result<T>(std::move(out), {x, strength}, [N, C, HW, shared, noise, k](Node<T>& self) {
        if (self.parent(0).requires_grad) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parent(1).requires_grad) {
            T acc = 0;
            for (int n = 0; n < N; ++n) {
                const T* nz = noise.ptr() + (shared ? 0 : static_cast<std::size_t>(n) * HW);
                for (int c = 0; c < C; ++c) {
                    const T* p = self.grad.ptr() + (static_cast<std::size_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) acc += p[i] * nz[i];
                }
            }
            self.parent(1).grad_buffer()[0] += acc;
        }
    });
}

// Bilinear 2x upsampling with half-pixel centers and clamped borders.
template <class T>
Var<T> upsample2x(const Var<T>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int H2 = 2 * H, W2 = 2 * W;
    Tensor<T> out({N, C, H2, W2});
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = x.value().ptr() + static_cast<std::size_t>(nc) * H * W;
        T* dst = out.ptr() + static_cast<std::size_t>(nc) * H2 * W2;
        for (int py = 0; py < H2; ++py) {
            int y0, y1;
            double wy0, wy1;
            detail::up_taps(py, H, y0, y1, wy0, wy1);
            for (int px = 0; px < W2; ++px) {
                int x0, x1;
                double wx0, wx1;
                detail::up_taps(px, W, x0, x1, wx0, wx1);
                dst[py * W2 + px] = static_cast<T>(wy0 * (wx0 * src[y0 * W + x0] + wx1 * src[y0 * W + x1]) +
                                                   wy1 * (wx0 * src[y1 * W + x0] + wx1 * src[y1 * W + x1]));
            }
        }
    }
    return make_result<T>(std::move(out), {x}, [N, C, H, W](Node<T>& self) {
        const int H2 = 2 * H, W2 = 2 * W;
        auto& g = self.parent(0).grad_buffer();
        for (int nc = 0; nc < N * C; ++nc) {
            const T* gy = self.grad.ptr() + static_cast<std::size_t>(nc) * H2 * W2;
            T* gx = g.ptr() + static_cast<std::size_t>(nc) * H * W;
            for (int py = 0; py < H2; ++py) {
                int y0, y1;
                double wy0, wy1;
                detail::up_taps(py, H, y0, y1, wy0, wy1);
                for (int px = 0; px < W2; ++px) {
                    int x0, x1;
                    double wx0, wx1;
                    detail::up_taps(px, W, x0, x1, wx0, wx1);
                    const T v = gy[py * W2 + px];
                    gx[y0 * W + x0] += static_cast<T>(wy0 * wx0) * v;
                    gx[y0 * W + x1] += static_cast<T>(wy0 * wx1) * v;
                    gx[y1 * W + x0] += static_cast<T>(wy1 * wx0) * v;
                    gx[y1 * W + x1] += static_cast<T>(wy1 * wx1) * v;
                }
            }
        }
    });
}

// 2x2 mean pooling.
template <class T>
Var<T> avgpool2x(const Var<T>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(H % 2 == 0 && W % 2 == 0, "avgpool2x", "odd spatial size");
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, C, Ho, Wo});
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = x.value().ptr() + static_cast<std::size_t>(nc) * H * W;
        T* dst = out.ptr() + static_cast<std::size_t>(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx)
                dst[y * Wo + xx] = T(0.25) * (src[2 * y * W + 2 * xx] + src[2 * y * W + 2 * xx + 1] +
                                              src[(2 * y + 1) * W + 2 * xx] + src[(2 * y + 1) * W + 2 * xx + 1]);
    }
    return make_result<T>(std::move(out), {x}, [N, C, H, W](Node<T>& self) {
        const int Ho = H / 2, Wo = W / 2;
        auto& g = self.parent(0).grad_buffer();
        for (int nc = 0; nc < N * C; ++nc) {
            const T* gy = self.grad.ptr() + static_cast<std::size_t>(nc) * Ho * Wo;
            T* gx = g.ptr() + static_cast<std::size_t>(nc) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) {
                    const T v = T(0.25) * gy[y * Wo + xx];
                    gx[2 * y * W + 2 * xx] += v;
                    gx[2 * y * W + 2 * xx + 1] += v;
                    gx[(2 * y + 1) * W + 2 * xx] += v;
                    gx[(2 * y + 1) * W + 2 * xx + 1] += v;
                }
        }
    });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> mean_all(const Var<T>& x) {
    T acc = 0;
    for (T v : x.value().data) acc += v;
    const T inv = T(1) / static_cast<T>(x.size());
    return make_result<T>(Tensor<T>({1}, {acc * inv}), {x}, [inv](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        const T v = self.grad[0] * inv;
        for (auto& e : g.data) e += v;
    });
}

// mean((a - b)^2)
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    detail::require(a.shape() == b.shape(), "mse", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    T acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    const T inv = T(1) / static_cast<T>(a.size());
    return make_result<T>(Tensor<T>({1}, {acc * inv}), {a, b}, [inv](Node<T>& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        const T k = T(2) * inv * self.grad[0];
        for (std::size_t i = 0; i < pa.value.size(); ++i) {
            const T d = k * (pa.value[i] - pb.value[i]);
            if (pa.requires_grad) pa.grad_buffer()[i] += d;
            if (pb.requires_grad) pb.grad_buffer()[i] -= d;
        }
    });
}

// mean(softplus(sign * x)), the logistic GAN loss.
template <class T>
Var<T> softplus_mean(const Var<T>& x, T sign) {
    T acc = 0;
    for (T v : x.value().data) {
        const T u = sign * v;
        acc += u > T(0) ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
    }
    const T inv = T(1) / static_cast<T>(x.size());
    return make_result<T>(Tensor<T>({1}, {acc * inv}), {x}, [inv, sign](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T u = sign * p.value[i];
            const T sig = T(1) / (T(1) + std::exp(-u));
            g[i] += self.grad[0] * inv * sign * sig;
        }
    });
}

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
    detail::require(terms.size() == weights.size() && !terms.empty(), "weighted_sum", "size mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) acc += weights[i] * terms[i].value()[0];
    return make_result<T>(Tensor<T>({1}, {acc}), terms, [weights](Node<T>& self) {
        for (std::size_t i = 0; i < weights.size(); ++i)
            if (self.parent(i).requires_grad) self.parent(i).grad_buffer()[0] += weights[i] * self.grad[0];
    });
}

}  // namespace styledem::nn
