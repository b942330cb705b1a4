"""Per-pixel alpha blending kernels (forward and backward).

Splats are visited in depth order; each splat touches the pixels of its
bounding box.  The forward pass records, for every (splat, pixel) pair,
the transmittance in front of the splat and the alpha it contributed,
so the backward pass never divides by (1 - alpha).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def blend_forward(order, means2d, conics, opac, feats, rect, offsets,
                  height, width, min_alpha, min_transmittance):
    n_ch = feats.shape[1]
    image = np.zeros((height, width, n_ch))
    trans = np.ones((height, width))
    total = offsets[-1]
    saved_t = np.zeros(total)
    saved_a = np.zeros(total)
    for oi in range(order.shape[0]):
        i = order[oi]
        x0, x1, y0, y1 = rect[i, 0], rect[i, 1], rect[i, 2], rect[i, 3]
        a, b, c = conics[i, 0], conics[i, 1], conics[i, 2]
        mx, my = means2d[i, 0], means2d[i, 1]
        k = offsets[oi]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                t = trans[py, px]
                if t < min_transmittance:
                    k += 1
                    continue
                dx = px - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                alpha = opac[i] * np.exp(power)
                if alpha < min_alpha:
                    k += 1
                    continue
                w = alpha * t
                for ch in range(n_ch):
                    image[py, px, ch] += feats[i, ch] * w
                saved_t[k] = t
                saved_a[k] = alpha
                trans[py, px] = t * (1.0 - alpha)
                k += 1
    return image, 1.0 - trans, saved_t, saved_a


@njit(cache=True)
def blend_backward(order, means2d, conics, opac, feats, rect, offsets,
                   saved_t, saved_a, grad_image):
    n = means2d.shape[0]
    n_ch = feats.shape[1]
    height, width = grad_image.shape[0], grad_image.shape[1]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_feat = np.zeros((n, n_ch))
    behind = np.zeros((height, width, n_ch))
    for oi in range(order.shape[0] - 1, -1, -1):
        i = order[oi]
        x0, x1, y0, y1 = rect[i, 0], rect[i, 1], rect[i, 2], rect[i, 3]
        a, b, c = conics[i, 0], conics[i, 1], conics[i, 2]
        mx, my = means2d[i, 0], means2d[i, 1]
        k = offsets[oi]
        for py in range(y0, y1 + 1):
            dy = py - my
            for px in range(x0, x1 + 1):
                alpha = saved_a[k]
                if alpha == 0.0:
                    k += 1
                    continue
                t = saved_t[k]
                d_alpha = 0.0
                for ch in range(n_ch):
                    g = grad_image[py, px, ch]
                    s = behind[py, px, ch]
                    g_feat[i, ch] += g * alpha * t
                    d_alpha += g * t * (feats[i, ch] - s)
                    behind[py, px, ch] = alpha * feats[i, ch] + (1.0 - alpha) * s
                dx = px - mx
                g_opac[i] += d_alpha * alpha / opac[i]
                g_pow = d_alpha * alpha
                g_conic[i, 0] += -0.5 * g_pow * dx * dx
                g_conic[i, 1] += -g_pow * dx * dy
                g_conic[i, 2] += -0.5 * g_pow * dy * dy
                g_mean[i, 0] += g_pow * (a * dx + b * dy)
                g_mean[i, 1] += g_pow * (b * dx + c * dy)
                k += 1
    return g_mean, g_conic, g_opac, g_feat
