import numpy as np
import pytest
import torch

from queryveil.backends import FeatureBackend
from queryveil.image import Image


def central_difference(f, x: torch.Tensor, coord, step: float):
    """Central difference at one coordinate, or None when a ReLU/maxpool kink
    sits inside the interval (detected by step halving: for smooth functions
    the two estimates agree to O(step^2); across a kink they do not)."""

    def estimate(h: float) -> float:
        with torch.no_grad():
            xp = x.detach().clone()
            xp[coord] += h
            xm = x.detach().clone()
            xm[coord] -= h
            return (float(f(xp)) - float(f(xm))) / (2 * h)

    d_full = estimate(step)
    d_half = estimate(step / 2)
    scale = max(abs(d_full), abs(d_half), 1e-8)
    if abs(d_full - d_half) / scale > 5e-4:
        return None
    return d_full


def check_gradient(f, x: torch.Tensor, n_coords: int, rel_tol: float,
                   seed: int = 0, step: float = 1e-3) -> int:
    """Compare analytic gradients against central differences on sampled
    coordinates; returns how many coordinates were checked."""
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    grad = x.grad
    local = np.random.default_rng(seed)
    checked = 0
    attempts = 0
    while checked < n_coords and attempts < n_coords * 8:
        attempts += 1
        coord = tuple(int(local.integers(n)) for n in x.shape)
        fd = central_difference(f, x, coord, step)
        if fd is None:
            continue
        g = float(grad[coord])
        denom = max(abs(fd), abs(g), 1e-6)
        assert abs(fd - g) / denom < rel_tol, (
            f"coord {coord}: analytic {g} vs finite-difference {fd}"
        )
        checked += 1
    return checked


def make_image(rng: np.random.Generator, h: int, w: int, smooth: bool = True,
               id: str = "") -> Image:
    """Random test image; smooth ones avoid degenerate descriptors."""
    if smooth:
        base = rng.random((h // 8 + 2, w // 8 + 2, 3))
        t = torch.from_numpy(base).permute(2, 0, 1).unsqueeze(0)
        up = torch.nn.functional.interpolate(
            t, size=(h, w), mode="bilinear", align_corners=False)
        arr = up.squeeze(0).permute(1, 2, 0).numpy()
    else:
        arr = rng.random((h, w, 3))
    return Image(np.clip(arr, 0.0, 1.0).astype(np.float32), id=id)


STRUCTURED_KINDS = ("checker", "stripes", "blobs", "gradient", "blocks")


def structured_image(kind: str, h: int, w: int, seed: int = 0) -> Image:
    """Structurally distinctive synthetic photo stand-ins. Unlike smooth
    noise, these keep descriptor baselines between different images well
    below 1, so attacks have real work to do."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    colors = rng.random(3) * 0.8 + 0.2
    colors2 = rng.random(3) * 0.8 + 0.2
    if kind == "checker":
        period = int(rng.integers(24, 64))
        mask = ((yy // period + xx // period) % 2)[..., None]
        img = mask * colors + (1 - mask) * colors2 * 0.2
    elif kind == "stripes":
        freq = rng.uniform(8, 24)
        img = (0.5 + 0.5 * np.sin(xx / freq + yy / (2 * freq)))[..., None] * colors
    elif kind == "blobs":
        img = np.zeros((h, w, 3))
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(min(h, w) / 8, min(h, w) / 3)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))[..., None] \
                * (rng.random(3) * 0.9)
    elif kind == "gradient":
        img = (xx / w)[..., None] * colors + (yy / h)[..., None] * colors2
    elif kind == "blocks":
        cell = int(rng.integers(48, 128))
        base = rng.random((h // cell + 1, w // cell + 1, 3))
        img = np.kron(base, np.ones((cell, cell, 1)))[:h, :w]
    else:
        raise ValueError(f"unknown structured image kind {kind!r}")
    return Image(np.clip(img, 0, 1).astype(np.float32), id=f"{kind}{seed}")


def noise_texture(h: int, w: int, seed: int = 0, grain: int = 1) -> Image:
    """Fine-grained noise texture. Matching its activation statistics takes
    large pixel changes, so distortion-regularized attacks have to trade
    similarity for distortion on these (unlike on smooth structured images,
    where mild regularization costs nothing)."""
    rng = np.random.default_rng(seed)
    base = rng.random((h // grain + 1, w // grain + 1, 3))
    img = np.kron(base, np.ones((grain, grain, 1)))[:h, :w]
    tint = rng.random(3) * 0.5 + 0.5
    return Image(np.clip(img * tint, 0, 1).astype(np.float32),
                 id=f"noise{seed}g{grain}")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def backend_a():
    return FeatureBackend("A", seed=0)


@pytest.fixture(scope="session")
def backend_a64():
    return FeatureBackend("A", seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def backend_r():
    return FeatureBackend("R", seed=0)


@pytest.fixture()
def image_pair(rng):
    target = make_image(rng, 96, 128, id="target")
    carrier = make_image(rng, 96, 128, id="carrier")
    return target, carrier
