#!/usr/bin/env python3
"""Regenerates the pre-recorded oracle values in tests/data/oracles.json.

Inputs (committed, produced once from the project's own phantom):
  tests/data/fbp_slices.vol  -- slices 30-33 of the 64^3 head phantom
  tests/data/ssim_clean.vol  -- slices 28-35 of the 64^3 head phantom

Outputs:
  tests/data/ssim_noisy.vol(.json) -- clean slices + seeded Gaussian noise
  tests/data/oracles.json          -- reference FBP PSNR and reference SSIM

The FBP reference is scikit-image's radon/iradon pipeline (ramp filter) run
per slice; the SSIM reference is scikit-image's structural_similarity with
an 11x11 Gaussian window (sigma 1.5) and population covariance, matching the
metric definition used by the C++ implementation.
"""

import json
import pathlib

import numpy as np
from skimage.metrics import structural_similarity
from skimage.transform import iradon, radon

DATA = pathlib.Path(__file__).resolve().parent.parent / "data"
NOISE_SIGMA = 0.05
NOISE_SEED = 20240817


def load_volume(path: pathlib.Path) -> np.ndarray:
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    assert header["dtype"] == "f32le" and header["layout"] == "c-order"
    return np.fromfile(path, dtype="<f4").reshape(header["shape"])


def save_volume(path: pathlib.Path, vol: np.ndarray, description: str) -> None:
    vol.astype("<f4").tofile(path)
    header = {
        "shape": list(vol.shape),
        "dtype": "f32le",
        "layout": "c-order",
        "description": description,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2) + "\n")


def fbp_reference_psnr() -> float:
    vol = load_volume(DATA / "fbp_slices.vol")
    theta = np.arange(180.0)
    rec = np.stack(
        [iradon(radon(s, theta=theta), theta=theta, filter_name="ramp") for s in vol]
    )
    mse = np.mean((rec - vol) ** 2)
    return float(10.0 * np.log10(1.0 / mse))


def ssim_reference() -> float:
    clean = load_volume(DATA / "ssim_clean.vol")
    rng = np.random.default_rng(NOISE_SEED)
    noisy = (clean + rng.normal(0.0, NOISE_SIGMA, clean.shape)).astype("<f4")
    save_volume(DATA / "ssim_noisy.vol", noisy, f"ssim_clean + N(0, {NOISE_SIGMA}^2), seed {NOISE_SEED}")
    scores = [
        structural_similarity(
            clean[z],
            noisy[z],
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
        for z in range(clean.shape[0])
    ]
    return float(np.mean(scores))


def main() -> None:
    oracles = {
        "fbp_reference_psnr_db": fbp_reference_psnr(),
        "ssim_noisy_pair": ssim_reference(),
        "ssim_noise_sigma": NOISE_SIGMA,
        "ssim_noise_seed": NOISE_SEED,
    }
    (DATA / "oracles.json").write_text(json.dumps(oracles, indent=2) + "\n")
    print(json.dumps(oracles, indent=2))


if __name__ == "__main__":
    main()
