"""Seeded synthetic identity datasets in feature-map (or pixel) space."""

from __future__ import annotations

import numpy as np

from .data_io import Dataset


def _labels(num_ids: int, images_per_id: int, cameras: int):
    pids = np.repeat(np.arange(num_ids), images_per_id)
    cams = np.tile(np.arange(images_per_id) % cameras, num_ids)
    return pids, cams


def _check_counts(**counts):
    for name, value in counts.items():
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")


def _prototype(rng, c: int, hw: int, decay: float) -> np.ndarray:
    # Random singular vectors, geometric spectrum, unit mean-square entry.
    r = min(c, hw)
    left, _ = np.linalg.qr(rng.standard_normal((c, r)))
    right, _ = np.linalg.qr(rng.standard_normal((hw, r)))
    spectrum = decay ** np.arange(r)
    spectrum *= np.sqrt(c * hw / np.sum(spectrum**2))
    return (left * spectrum) @ right.T


def generate_synthetic(
    num_ids: int = 20,
    images_per_id: int = 8,
    cameras: int = 2,
    channels: int = 32,
    h: int = 4,
    w: int = 8,
    intra_noise: float = 0.8,
    camera_shift: float = 1.0,
    seed: int = 0,
    spectrum_decay: float = 0.6,
) -> Dataset:
    """Prototype-plus-noise identities.

    Every identity gets a random prototype map whose singular values decay
    geometrically (ratio ``spectrum_decay``; 1.0 gives a flat spectrum),
    scaled to unit mean-square entry. An image is
    ``prototype + intra_noise * N(0, 1) + shift[camera]``, where the camera
    shift is a per-channel offset with std ``camera_shift`` shared by all
    identities. Image ``i`` of an identity is seen by camera
    ``i % cameras``. Independent unit-power prototypes put class means an
    RMS distance of about ``sqrt(2)`` apart per entry, so the separation to
    noise ratio is ``sqrt(2) / intra_noise``.
    """
    _check_counts(num_ids=num_ids, images_per_id=images_per_id, cameras=cameras,
                  channels=channels, h=h, w=w)
    if not 0.0 < spectrum_decay <= 1.0:
        raise ValueError(f"spectrum_decay must be in (0, 1], got {spectrum_decay}")
    rng = np.random.default_rng(seed)
    prototypes = np.stack(
        [_prototype(rng, channels, h * w, spectrum_decay) for _ in range(num_ids)]
    ).reshape(num_ids, channels, h, w)
    shifts = camera_shift * rng.standard_normal((cameras, channels, 1, 1))
    pids, cams = _labels(num_ids, images_per_id, cameras)
    noise = intra_noise * rng.standard_normal((len(pids), channels, h, w))
    tensors = prototypes[pids] + noise + shifts[cams]
    paths = [f"id{p:04d}_c{c}_{i:06d}.sptf" for i, (p, c) in enumerate(zip(pids, cams))]
    return Dataset(tensors, pids, cams, paths)


def generate_redundant_channels(
    num_ids: int = 20,
    images_per_id: int = 8,
    cameras: int = 2,
    channels: int = 32,
    h: int = 4,
    w: int = 8,
    latent_rank: int = 3,
    mean_strength: float = 0.5,
    intra_noise: float = 0.3,
    camera_shift: float = 0.5,
    seed: int = 0,
) -> Dataset:
    """Identities defined by which channels co-vary, not by channel means.

    Each identity owns a mixing matrix ``B`` (channels x latent_rank, random
    orthonormal columns scaled by ``sqrt(channels / latent_rank)``) and a weak
    mean profile ``mu`` of std ``mean_strength``. An image is
    ``B @ Z + mu + noise + shift[camera]`` with fresh latent maps ``Z``
    (latent_rank x h*w, N(0, 1)), so the channels are strongly correlated
    linear mixtures of a few sources and the per-channel spatial means carry
    little identity information.
    """
    _check_counts(num_ids=num_ids, images_per_id=images_per_id, cameras=cameras,
                  channels=channels, h=h, w=w, latent_rank=latent_rank)
    if latent_rank > channels:
        raise ValueError("latent_rank cannot exceed channels")
    rng = np.random.default_rng(seed)
    hw = h * w
    mixers = np.empty((num_ids, channels, latent_rank))
    for i in range(num_ids):
        q, _ = np.linalg.qr(rng.standard_normal((channels, latent_rank)))
        mixers[i] = q * np.sqrt(channels / latent_rank)
    means = mean_strength * rng.standard_normal((num_ids, channels, 1))
    shifts = camera_shift * rng.standard_normal((cameras, channels, 1))
    pids, cams = _labels(num_ids, images_per_id, cameras)
    latents = rng.standard_normal((len(pids), latent_rank, hw))
    noise = intra_noise * rng.standard_normal((len(pids), channels, hw))
    maps = np.einsum("ncr,nrl->ncl", mixers[pids], latents) + means[pids] + noise + shifts[cams]
    paths = [f"id{p:04d}_c{c}_{i:06d}.sptf" for i, (p, c) in enumerate(zip(pids, cams))]
    return Dataset(maps.reshape(len(pids), channels, h, w), pids, cams, paths)
