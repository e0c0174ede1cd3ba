"""Finite-difference checks for every trainable block, 10 random points each, in 64-bit mode."""
import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oarkit import nn
from oarkit.fusion import cumulative_fuse
from oarkit.model import ModelConfig, OARModel

POINTS = range(10)
TOL = 1e-3
SIZE = 16
MARGIN = 1e-4


@pytest.fixture(autouse=True)
def wide():
    with nn.float64_mode():
        yield


def make(seed: int) -> OARModel:
    cfg = ModelConfig(num_classes=3, height=SIZE, width=SIZE, gate_widths=(4, 4, 4), main_widths=(4, 4, 4, 4),
                      gating_hidden=6, tlsm_ratio=0.5, tlsm_frames=2)
    model = OARModel(cfg, seed=seed)
    # nonzero biases so the check is not run at a symmetric point
    g = torch.Generator().manual_seed(1000 + seed)
    with torch.no_grad():
        for name, p in model.params.items():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return model


def data(seed: int, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def kink_margin(loss) -> float:
    """Smallest |input| seen by any ReLU during one evaluation of ``loss``."""
    seen = [np.inf]
    real = torch.relu

    def spy(x):
        seen.append(float(x.detach().abs().min()))
        return real(x)

    torch.relu = spy
    try:
        with torch.no_grad():
            loss()
    finally:
        torch.relu = real
    return min(seen)


def check(model: OARModel, prefix: str, loss, seed: int) -> bool:
    """Finite differences are meaningless across a ReLU kink, so points that sit on one are redrawn."""
    if kink_margin(loss) < MARGIN:
        return False
    params = model.group(prefix)
    assert len(params.names()) > 0
    err = nn.grad_check(params, loss, step=1e-6, max_entries=6, seed=seed)
    assert err < TOL, f"{prefix} at point {seed}: relative error {err:.2e}"
    return True


def at_random_point(index: int, attempt) -> None:
    for k in range(50):
        if attempt(100 * index + k):
            return
    pytest.fail(f"no kink-free evaluation point found for index {index}")


@pytest.mark.parametrize("modality,channels", [("image", 1), ("motion", 2), ("residual", 1)])
@pytest.mark.parametrize("index", POINTS)
def test_gate_backbone(modality, channels, index):
    def attempt(seed):
        model = make(seed)
        x = data(seed, 2, 3, channels, SIZE, SIZE)
        target = (data(seed + 1, 2, 3) > 0).double()
        gate = model.branches[modality].gate
        return check(model, f"gate.{modality}.",
                     lambda: F.binary_cross_entropy_with_logits(gate.forward_sequence(x), target), seed)
    at_random_point(index, attempt)


def _saliency(seed, n):
    return torch.rand(n, SIZE // 2, SIZE // 2, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


@pytest.mark.parametrize("index", POINTS)
def test_main_backbone(index):
    def attempt(seed):
        model = make(seed)
        net = model.branches["motion"].main
        x, sal = data(seed, 2, 2, SIZE, SIZE), _saliency(seed, 2)
        y = torch.tensor([seed % 3, (seed + 1) % 3])
        return check(model, "main.motion.", lambda: F.cross_entropy(net.forward(x, sal)[1], y), seed)
    at_random_point(index, attempt)


@pytest.mark.parametrize("index", POINTS)
def test_msem_conv(index):
    def attempt(seed):
        model = make(seed)
        net = model.branches["image"].main
        x, sal = data(seed, 1, 1, SIZE, SIZE), _saliency(seed, 1)
        r = data(seed + 2, 1, 4, 1, 1)
        return check(model, "main.image.msem.", lambda: (net.features(x, sal) * r).sum(), seed)
    at_random_point(index, attempt)


@pytest.mark.parametrize("index", POINTS)
def test_modal_weight_conv(index):
    def attempt(seed):
        model = make(seed)
        c, h, w = model.feature_shape
        x, r = data(seed, c, h, w), data(seed + 3, c, h, w)
        return check(model, "fusion.weight.residual.",
                     lambda: (model.fusion.weigh("residual", x, 0.4)[1] * r).sum(), seed)
    at_random_point(index, attempt)


@pytest.mark.parametrize("index", POINTS)
def test_fusion_conv_and_classifier(index):
    def attempt(seed):
        model = make(seed)
        c, h, w = model.feature_shape
        x = data(seed, 3 * c, h, w)
        y = torch.tensor([seed % 3])
        loss = lambda: F.cross_entropy(model.fusion.logits(model.fusion.mix(x))[None], y)
        return check(model, "fusion.mix.", loss, seed) and check(model, "fusion.cls.", loss, seed)
    at_random_point(index, attempt)


@pytest.mark.parametrize("index", POINTS)
def test_gating_head(index):
    def attempt(seed):
        model = make(seed)
        c, h, w = model.feature_shape
        prev, curr = data(seed, 4, c, h, w), data(seed + 1, 4, c, h, w)
        target = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        return check(model, "gate_exit.",
                     lambda: F.binary_cross_entropy_with_logits(model.gating.logit(prev, curr), target), seed)
    at_random_point(index, attempt)


@pytest.mark.parametrize("index", POINTS)
def test_fusion_and_gating_end_to_end(index):
    def attempt(seed):
        model = make(seed)
        c, h, w = model.feature_shape
        feats = {m: data(seed + i, 5, c, h, w) for i, m in enumerate(model.config.modalities)}
        iies = {m: torch.rand(5, generator=torch.Generator().manual_seed(seed + 10 + i), dtype=torch.float64)
                for i, m in enumerate(model.config.modalities)}
        y = torch.full((5,), seed % 3)
        target = torch.tensor([0.0, 0.0, 1.0, 1.0, 1.0], dtype=torch.float64)

        def loss():
            weighted, means = [], []
            for m in model.config.modalities:
                _, xw, mean = model.fusion.weigh(m, feats[m], iies[m])
                weighted.append(xw)
                means.append(mean)
            fused = model.fusion.mix(torch.cat(weighted, dim=1))
            running = cumulative_fuse(fused, torch.stack(means, dim=1).sum(dim=1))
            prev = torch.cat([running[:1], running[:-1]])
            return (F.cross_entropy(model.fusion.logits(running), y)
                    + F.binary_cross_entropy_with_logits(model.gating.logit(prev, running), target))

        if kink_margin(loss) < MARGIN:
            return False
        params = model.group("fusion.")
        params.merge(model.group("gate_exit."))
        assert nn.grad_check(params, loss, step=1e-6, max_entries=4, seed=seed) < TOL
        return True
    at_random_point(index, attempt)
