#pragma once

// Internal 3x3 convolution kernels with replicate padding, shared by the
// tiny conv link and the convolutional ensemble variants. Input channels are
// visited in the caller-supplied order so that models with permuted channel
// storage produce bit-identical sums.

#include <cstddef>
#include <vector>

namespace mthg::detail {

inline int clamp_coord(int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); }

// out[o] must be preallocated to w*h per output map. Kernels are laid out
// [out_map][in_channel][ky*3+kx]; `order` lists input-channel indices in
// traversal order.
inline void conv3x3_forward(int w, int h, const std::vector<const double*>& in_planes,
                            const double* kernels, const double* bias, int out_maps,
                            const std::vector<int>& order, std::vector<double*>& out) {
    const int cin = static_cast<int>(in_planes.size());
    for (int o = 0; o < out_maps; ++o) {
        double* dst = out[o];
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = bias[o];
                for (int oc : order) {
                    const double* plane = in_planes[oc];
                    const double* k = kernels + (static_cast<std::size_t>(o) * cin + oc) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int sy = clamp_coord(y + ky - 1, h);
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sx = clamp_coord(x + kx - 1, w);
                            acc += k[ky * 3 + kx] * plane[static_cast<std::size_t>(sy) * w + sx];
                        }
                    }
                }
                dst[static_cast<std::size_t>(y) * w + x] = acc;
            }
        }
    }
}

// Accumulates kernel/bias gradients and (when d_in is non-null) input-plane
// gradients for the replicate-padded 3x3 convolution.
inline void conv3x3_backward(int w, int h, const std::vector<const double*>& in_planes,
                             const double* kernels, int out_maps, const std::vector<int>& order,
                             const std::vector<const double*>& d_out, double* d_kernels,
                             double* d_bias, std::vector<double*>* d_in) {
    const int cin = static_cast<int>(in_planes.size());
    for (int o = 0; o < out_maps; ++o) {
        const double* g = d_out[o];
        for (std::size_t p = 0; p < static_cast<std::size_t>(w) * h; ++p) d_bias[o] += g[p];
        for (int oc : order) {
            const double* plane = in_planes[oc];
            const std::size_t kbase = (static_cast<std::size_t>(o) * cin + oc) * 9;
            const double* k = kernels + kbase;
            double* dk = d_kernels + kbase;
            double* din = d_in ? (*d_in)[oc] : nullptr;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const double gv = g[static_cast<std::size_t>(y) * w + x];
                    if (gv == 0.0) continue;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int sy = clamp_coord(y + ky - 1, h);
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sx = clamp_coord(x + kx - 1, w);
                            const std::size_t src = static_cast<std::size_t>(sy) * w + sx;
                            dk[ky * 3 + kx] += gv * plane[src];
                            if (din) din[src] += gv * k[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace mthg::detail
