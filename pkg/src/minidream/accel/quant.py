"""Simulated weight quantization: offline smoothing, per-layer sensitivity, greedy bit
assignment, fake-quant application and scale fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import LatentCodec, TrainBatch, fm_loss, item_prompt, sample_t
from ..generator import Generator

log = logging.getLogger(__name__)

BITS = (4, 8, 16)
GRANULARITIES = ("per-tensor", "per-channel")
PASSTHROUGH = 16
SMOOTH_ALPHA = 0.5


def qmax(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def base_scale(w: torch.Tensor, bits: int, granularity: str) -> torch.Tensor:
    """Symmetric scale amax/qmax, one per output row (per-channel) or a single value; never 0."""
    if granularity == "per-channel":
        amax = w.abs().amax(dim=1)
    elif granularity == "per-tensor":
        amax = w.abs().amax().reshape(1)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return torch.where(amax > 0, amax / qmax(bits), torch.ones_like(amax))


def _round_ste(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def fake_quant(w: torch.Tensor, scale: torch.Tensor, bits: int) -> torch.Tensor:
    """Quantize-dequantize ``w`` (out, in) with row-broadcast ``scale``; straight-through rounding."""
    if bits >= PASSTHROUGH:
        return w
    s = scale.view(-1, 1)
    q = torch.clamp(_round_ste(w / s), -qmax(bits), qmax(bits))
    return q * s


def smoothing_factors(act_max: torch.Tensor, w: torch.Tensor, alpha: float = SMOOTH_ALPHA) -> torch.Tensor:
    """s_j = max|a_j|^alpha / max|w_:,j|^(1-alpha); 1 where either side is all zero."""
    w_max = w.abs().amax(dim=0)
    s = act_max.clamp_min(0) ** alpha / w_max.clamp_min(1e-12) ** (1 - alpha)
    ok = (act_max > 0) & (w_max > 0) & torch.isfinite(s)
    return torch.where(ok, s, torch.ones_like(s))


@dataclass
class LayerPlan:
    path: str
    bits: int
    granularity: str
    scales: list[float]
    smoothing: list[float]

    def __post_init__(self):
        if self.bits not in BITS:
            raise ValueError(f"bits must be one of {BITS}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if any(not s > 0 for s in self.scales):
            raise ValueError(f"{self.path}: scales must be positive")


@dataclass
class QuantPlan:
    layers: dict[str, LayerPlan] = field(default_factory=dict)
    budget: float = 0.0
    predicted_increase: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"budget": self.budget, "predicted_increase": self.predicted_increase,
                           "layers": [asdict(lp) for lp in self.layers.values()]}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QuantPlan":
        d = json.loads(text)
        layers = {x["path"]: LayerPlan(**x) for x in d["layers"]}
        return cls(layers, d.get("budget", 0.0), d.get("predicted_increase", 0.0))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "QuantPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def quantizable_layers(model: nn.Module) -> dict[str, nn.Linear]:
    return {name: m for name, m in model.named_modules() if isinstance(m, nn.Linear)}


class QuantLinear(nn.Module):
    """Linear layer whose smoothed weight W*diag(s) is fake-quantized; only ``scale`` trains."""

    def __init__(self, linear: nn.Linear, bits: int, granularity: str, scale: torch.Tensor, smoothing: torch.Tensor):
        super().__init__()
        self.bits, self.granularity = bits, granularity
        self.in_features, self.out_features = linear.in_features, linear.out_features
        self.register_buffer("weight", linear.weight.detach().clone())
        self.register_buffer("bias", None if linear.bias is None else linear.bias.detach().clone())
        self.register_buffer("smooth", smoothing.to(linear.weight.dtype).clone())
        self.register_buffer("min_scale", base_scale(self.smoothed(), bits, granularity))
        self.scale = nn.Parameter(scale.to(linear.weight.dtype).clone())

    def smoothed(self) -> torch.Tensor:
        return self.weight * self.smooth[None]

    def clamp_scale_(self) -> None:
        # scales below amax/qmax would clip and break the scale/2 roundoff bound
        with torch.no_grad():
            self.scale.copy_(torch.maximum(self.scale, self.min_scale))

    def dequantized(self) -> torch.Tensor:
        """Quantized W*diag(s), before dividing the smoothing back out."""
        return fake_quant(self.smoothed(), self.scale, self.bits)

    def effective_weight(self) -> torch.Tensor:
        return self.dequantized() / self.smooth[None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


# ---------------------------------------------------------------------------
# calibration

def calibration_batches(items: Sequence, n_batches: int, batch_size: int, seed: int,
                        codec: LatentCodec = LatentCodec(), dtype=torch.float32) -> list[TrainBatch]:
    if not items or n_batches < 1:
        raise ValueError("calibration set is empty")
    rng = np.random.default_rng([seed, 61])
    gen = torch.Generator().manual_seed(seed + 5)
    lat = codec.encode(torch.from_numpy(np.stack([it.image for it in items])).to(dtype))
    out = []
    for _ in range(n_batches):
        idx = rng.integers(0, len(items), size=batch_size)
        x0 = lat[torch.as_tensor(idx)]
        out.append(TrainBatch(x0, tuple(item_prompt(items[int(i)], "textual", "none") for i in idx),
                              sample_t(batch_size, gen, dtype=dtype), torch.randn(x0.shape, generator=gen, dtype=dtype)))
    return out


@torch.no_grad()
def calib_loss(model: Generator, calib: Sequence[TrainBatch]) -> float:
    if not calib:
        raise ValueError("calibration set is empty")
    model.eval()
    return float(np.mean([fm_loss(model, b).item() for b in calib]))


@torch.no_grad()
def activation_maxima(model: Generator, calib: Sequence[TrainBatch]) -> dict[str, torch.Tensor]:
    """Per-input-channel max |activation| entering every Linear layer."""
    layers = quantizable_layers(model)
    stats: dict[str, torch.Tensor] = {}
    hooks = []
    for name, mod in layers.items():
        def hook(m, inp, out, name=name):
            a = inp[0].detach().abs().reshape(-1, inp[0].shape[-1]).amax(dim=0)
            stats[name] = torch.maximum(stats[name], a) if name in stats else a
        hooks.append(mod.register_forward_hook(hook))
    try:
        calib_loss(model, calib)
    finally:
        for h in hooks:
            h.remove()
    return {name: stats.get(name, torch.zeros(mod.in_features)) for name, mod in layers.items()}


# ---------------------------------------------------------------------------
# plan search and application

def _set_module(root: nn.Module, path: str, new: nn.Module) -> None:
    parent, _, leaf = path.rpartition(".")
    setattr(root.get_submodule(parent) if parent else root, leaf, new)


def layer_plan(path: str, linear: nn.Linear, bits: int, granularity: str, smoothing: torch.Tensor) -> LayerPlan:
    if bits >= PASSTHROUGH:
        return LayerPlan(path, PASSTHROUGH, granularity, [1.0], [1.0] * linear.in_features)
    scale = base_scale(linear.weight.detach() * smoothing[None], bits, granularity)
    return LayerPlan(path, bits, granularity, scale.tolist(), smoothing.tolist())


def passthrough_plan(model: Generator) -> QuantPlan:
    return QuantPlan({p: layer_plan(p, m, PASSTHROUGH, "per-tensor", torch.ones(m.in_features))
                      for p, m in quantizable_layers(model).items()})


def uniform_plan(model: Generator, bits: int, granularity: str, act_max: dict[str, torch.Tensor] | None = None) -> QuantPlan:
    """Every layer at the same setting; smoothing applied when activation maxima are given."""
    plan = QuantPlan()
    for path, m in quantizable_layers(model).items():
        s = smoothing_factors(act_max[path], m.weight.detach()) if act_max is not None else torch.ones(m.in_features)
        plan.layers[path] = layer_plan(path, m, bits, granularity, s)
    return plan


def apply_quant(model: Generator, plan: QuantPlan) -> Generator:
    """Copy of ``model`` with every planned layer fake-quantized; 16-bit entries stay untouched."""
    layers = quantizable_layers(model)
    missing = sorted(set(layers) - set(plan.layers))
    if missing:
        raise ValueError(f"plan does not cover layers: {missing[:5]}")
    extra = sorted(set(plan.layers) - set(layers))
    if extra:
        raise ValueError(f"plan names unknown layers: {extra[:5]}")
    qm = copy.deepcopy(model)
    for path, lp in plan.layers.items():
        if lp.bits >= PASSTHROUGH:
            continue
        lin = qm.get_submodule(path)
        dt = lin.weight.dtype
        _set_module(qm, path, QuantLinear(lin, lp.bits, lp.granularity, torch.tensor(lp.scales, dtype=dt),
                                          torch.tensor(lp.smoothing, dtype=dt)))
    return qm


def quant_layers(model: nn.Module) -> dict[str, QuantLinear]:
    return {n: m for n, m in model.named_modules() if isinstance(m, QuantLinear)}


def roundoff_violation(qlayer: QuantLinear) -> float:
    """max over elements of (|W*s - Q(W*s)| - scale/2) / scale; <= 0 when the bound holds exactly,
    float32 arithmetic leaves values of order 1e-7."""
    with torch.no_grad():
        scale = qlayer.scale.view(-1, 1)
        err = (qlayer.smoothed() - qlayer.dequantized()).abs()
        return float(((err - scale / 2) / scale).max())


def sensitivity(model: Generator, calib: Sequence[TrainBatch], path: str, bits: int, granularity: str,
                smoothing: torch.Tensor, base: float) -> float:
    """Calibration fm_loss increase from quantizing ``path`` alone."""
    if bits >= PASSTHROUGH:
        return 0.0
    plan = passthrough_plan(model)
    plan.layers[path] = layer_plan(path, model.get_submodule(path), bits, granularity, smoothing)
    return calib_loss(apply_quant(model, plan), calib) - base


def quant_sensitivity_search(model: Generator, calib: Sequence[TrainBatch], bit_options: Sequence[int] = (4, 8, 16),
                             granularities: Sequence[str] = GRANULARITIES, budget: float = 1e-3,
                             smooth: bool = True) -> tuple[QuantPlan, dict]:
    """Greedy plan: layers in order of robustness take the cheapest option that keeps the
    summed predicted loss increase under ``budget``; the rest stay at 16-bit passthrough."""
    if not calib:
        raise ValueError("calibration set is empty")
    if not bit_options:
        raise ValueError("no bit options")
    bad = [b for b in bit_options if b not in BITS]
    if bad:
        raise ValueError(f"unsupported bit widths {bad}")
    layers = quantizable_layers(model)
    base = calib_loss(model, calib)
    act = activation_maxima(model, calib) if smooth else None
    options = sorted({(b, g) for b in bit_options if b < PASSTHROUGH for g in granularities})
    table: dict[str, dict[tuple[int, str], float]] = {}
    smoothing: dict[str, torch.Tensor] = {}
    for path, m in layers.items():
        smoothing[path] = smoothing_factors(act[path], m.weight.detach()) if act is not None else torch.ones(m.in_features)
        table[path] = {opt: sensitivity(model, calib, path, *opt, smoothing[path], base) for opt in options}
    order = sorted(layers, key=lambda p: (min(table[p].values(), default=0.0), p))
    plan = QuantPlan(budget=budget)
    total = 0.0
    for path in order:
        chosen = (PASSTHROUGH, "per-tensor")
        for opt in options:  # cheapest first: fewer bits, then coarser granularity
            delta = max(table[path][opt], 0.0)
            if total + delta < budget:
                chosen = opt
                total += delta
                break
        plan.layers[path] = layer_plan(path, layers[path], chosen[0], chosen[1], smoothing[path])
    plan.layers = {p: plan.layers[p] for p in layers}
    plan.predicted_increase = total
    return plan, {"base_loss": base, "sensitivity": {p: {f"{b}/{g}": v for (b, g), v in t.items()}
                                                     for p, t in table.items()}}


def finetune_scales(qmodel: Generator, calib: Sequence[TrainBatch], steps: int = 50, lr: float = 1e-3) -> tuple[Generator, list[float]]:
    """Train only the quantization scales on calibration loss; keeps the best state seen, so
    the returned model never scores worse than the untuned one."""
    qmodel.requires_grad_(False)
    qls = quant_layers(qmodel)
    scales = [q.scale for q in qls.values()]
    if not scales or steps < 1:
        return qmodel, [calib_loss(qmodel, calib)]
    for s in scales:
        s.requires_grad_(True)
    opt = torch.optim.Adam(scales, lr=lr)
    best = calib_loss(qmodel, calib)
    best_state = [s.detach().clone() for s in scales]
    history = [best]
    for step in range(steps):
        qmodel.train()
        batch = calib[step % len(calib)]
        loss = fm_loss(qmodel, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        for q in qls.values():
            q.clamp_scale_()
        cur = calib_loss(qmodel, calib)
        history.append(cur)
        if cur < best:
            best = cur
            best_state = [s.detach().clone() for s in scales]
    with torch.no_grad():
        for s, b in zip(scales, best_state):
            s.copy_(b)
    for s in scales:
        s.requires_grad_(False)
    qmodel.eval()
    return qmodel, history


def materialize(qmodel: Generator) -> Generator:
    """Plain Generator carrying the effective (dequantized) weights, for checkpointing."""
    out = copy.deepcopy(qmodel)
    for path, q in quant_layers(out).items():
        lin = nn.Linear(q.weight.shape[1], q.weight.shape[0], bias=q.bias is not None).to(q.weight.dtype)
        with torch.no_grad():
            lin.weight.copy_(q.effective_weight())
            if q.bias is not None:
                lin.bias.copy_(q.bias)
        _set_module(out, path, lin)
    return out.requires_grad_(True)


def plan_with_scales(qmodel: Generator, plan: QuantPlan) -> QuantPlan:
    """Plan updated with the (possibly fine-tuned) scales held by ``qmodel``."""
    qls = quant_layers(qmodel)
    layers = {}
    for path, lp in plan.layers.items():
        q = qls.get(path)
        layers[path] = lp if q is None else LayerPlan(path, lp.bits, lp.granularity, q.scale.detach().tolist(),
                                                      lp.smoothing)
    return QuantPlan(layers, plan.budget, plan.predicted_increase)
