import numpy as np
import pytest

from depthbayes import peft
from depthbayes.loss import affine_invariant_mae, normalize_map
from depthbayes.model import ModelConfig, build_model
from depthbayes.train import gradient


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def loss_and_smooth_signature(model, desc, batch, vec):
    """Batch loss plus a fingerprint of the smooth piece the loss sits on.

    The loss is piecewise smooth in the subspace vector; pieces are delimited
    by (a) which pixels form each prediction map's middle order statistics,
    (b) the side of the median every pixel lies on (the mae subgradient
    terms), and (c) the sign of every normalized residual. A central
    difference is only a valid derivative estimate when both endpoints share
    all three patterns.
    """
    peft.unflatten(model, desc, vec)
    signature = []
    predictions = []
    targets = []
    for image, target in batch:
        prediction = model.forward(image)[0]
        predictions.append(prediction)
        target = target[0] if target.ndim == 3 else target
        targets.append(target)
        flat = prediction.ravel()
        order = np.argsort(flat, kind="stable")
        n = flat.size
        middle = (order[n // 2],) if n % 2 else tuple(sorted(order[n // 2 - 1 : n // 2 + 1]))
        normalized = normalize_map(prediction)
        residual = normalized.values - normalize_map(target).values
        signature.append(
            (
                middle,
                np.sign(flat - normalized.median).tobytes(),
                np.sign(residual).tobytes(),
            )
        )
    return affine_invariant_mae(predictions, targets), signature


def directional_fd_error(model, desc, batch, warm, rng, step=1e-5, spread=0.05, residual_margin=1e-4):
    """Relative error between the subspace gradient and a central difference.

    Draws random (point, direction) pairs, rejecting kink neighborhoods:
    the center point must keep every normalized residual at least
    ``residual_margin`` from zero, and both difference endpoints must lie on
    the same smooth piece of the loss.
    """
    for _ in range(200):
        vec = warm + spread * rng.normal(size=desc.dim)
        peft.unflatten(model, desc, vec)
        clear = True
        for image, target in batch:
            prediction = normalize_map(model.forward(image)[0]).values
            target = target[0] if target.ndim == 3 else target
            residual = prediction - normalize_map(target).values
            if float(np.min(np.abs(residual))) < residual_margin:
                clear = False
                break
        if not clear:
            continue
        direction = rng.normal(size=desc.dim)
        direction /= np.linalg.norm(direction)
        hi, sig_hi = loss_and_smooth_signature(model, desc, batch, vec + step * direction)
        lo, sig_lo = loss_and_smooth_signature(model, desc, batch, vec - step * direction)
        if sig_hi != sig_lo:
            continue
        peft.unflatten(model, desc, vec)
        analytic = gradient(model, desc, batch)
        along = float(analytic @ direction)
        fd = (hi - lo) / (2.0 * step)
        return abs(along - fd) / max(abs(fd), abs(along), 1e-12)
    raise AssertionError("rejection rule starved the finite-difference sampler")


def tiny_config_text(
    root,
    method="colora",
    rank=2,
    inference="ckpt-ens",
    seeds="0 1",
    epochs=2,
    checkpoints=4,
    samples=8,
    train_count=8,
    test_count=2,
    lr="0.001",
    jitter="1e-08",
):
    """A config small enough for full pipeline runs inside unit tests."""
    rank_line = f"rank = {rank}\n" if rank is not None else ""
    return f"""
[model]
image_height = 16
image_width = 16
patch_size = 4
embed_dim = 16
blocks = 1
mlp_hidden = 24
decoder_channels = 8 4
seed = 0

[data]
seed = 11
train_count = {train_count}
test_count = {test_count}

[method]
name = {method}
{rank_line}
[inference]
name = {inference}
samples = {samples}
jitter = {jitter}
quantiles = 0.25 0.5 0.75 1.0

[schedule]
epochs = {epochs}
batch_size = 4
checkpoints = {checkpoints}
lr = {lr}

[experiment]
seeds = {seeds}

[paths]
root = {root}
"""


@pytest.fixture(scope="session")
def small_config():
    """A model small enough for exhaustive gradient checks."""
    return ModelConfig(
        image_height=16,
        image_width=16,
        patch_size=4,
        embed_dim=16,
        blocks=1,
        mlp_hidden=24,
        decoder_channels=(8, 4),
        seed=3,
    )


@pytest.fixture
def small_model(small_config):
    return build_model(small_config)


@pytest.fixture
def default_model():
    return build_model(ModelConfig())
