"""Writes resize_golden.txt: MATLAB-style bicubic resize values computed with
dense per-axis weight matrices in float64.

Format: one case per block. A line `case h w out_h out_w`, then the input
values (row-major, one line), then the expected output values (one line).
"""
import numpy as np


def cubic(x):
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


def weight_matrix(n_in, n_out):
    scale = n_out / n_in
    width = 4.0 if scale >= 1 else 4.0 / scale
    a = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 1) / scale + 0.5 * (1 - 1 / scale)
        left = int(np.floor(u - width / 2))
        for j in range(left, left + int(np.ceil(width)) + 2):
            d = u - j
            w = cubic(d) if scale >= 1 else scale * cubic(scale * d)
            # symmetric padding on the 1-based index j
            k = j - 1
            period = 2 * n_in
            k = k % period
            if k >= n_in:
                k = period - 1 - k
            a[i, k] += w
        a[i] /= a[i].sum()
    return a


def main():
    rng = np.random.default_rng(20261016)
    cases = [(12, 16, 6, 8), (12, 16, 3, 4), (6, 8, 12, 16), (10, 14, 7, 9), (5, 7, 20, 28)]
    with open("resize_golden.txt", "w") as f:
        for h, w, oh, ow in cases:
            x = rng.random((h, w))
            y = weight_matrix(h, oh) @ x @ weight_matrix(w, ow).T
            f.write(f"case {h} {w} {oh} {ow}\n")
            f.write(" ".join(repr(float(v)) for v in x.ravel()) + "\n")
            f.write(" ".join(repr(float(v)) for v in y.ravel()) + "\n")


if __name__ == "__main__":
    main()
