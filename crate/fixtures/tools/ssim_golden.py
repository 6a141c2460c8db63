"""Writes ssim_golden.txt with scikit-image SSIM values (Gaussian window,
sigma 1.5, population covariance, data range 1) for random plane pairs.

Format: `case h w ssim`, then plane a (one line), then plane b (one line).
"""
import numpy as np
from skimage.metrics import structural_similarity


def main():
    rng = np.random.default_rng(7)
    with open("ssim_golden.txt", "w") as f:
        for h, w, noise in [(24, 20, 0.05), (16, 16, 0.3), (30, 13, 0.01), (11, 11, 0.2)]:
            a = rng.random((h, w))
            b = np.clip(a + noise * rng.standard_normal((h, w)), 0, 1)
            s = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                      use_sample_covariance=False, data_range=1.0)
            f.write(f"case {h} {w} {float(s)!r}\n")
            f.write(" ".join(repr(float(v)) for v in a.ravel()) + "\n")
            f.write(" ".join(repr(float(v)) for v in b.ravel()) + "\n")


if __name__ == "__main__":
    main()
