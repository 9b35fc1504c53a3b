"""Optimization utilities: gated AdamW, the warmup/cosine schedule, and a
plain supervised fine-tuning loop shared by stage-1 training, per-language
pruning fine-tunes, and few-shot adaptation.

The optimizer applies moment updates, weight decay, and the step itself only
at positions whose gradient is nonzero. Parameters cut off by a mask receive
exactly-zero gradients, so masked-out head slices stay bit-identical over any
number of steps (weight decay would otherwise drift them).
"""

from __future__ import annotations

import hashlib
import math

import torch

from .encoder import param_group
from .errors import UsageError
from .treebank import Sentence, epoch_batches


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from arbitrary string/int parts."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def cosine_warmup_lr(step: int, total_steps: int, peak: float,
                     warmup_fraction: float) -> float:
    """Linear warmup from zero, cosine decay to zero at the final step."""
    if total_steps <= 0:
        return 0.0
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps - warmup <= 0:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class GatedAdamW:
    """AdamW over a name->tensor dict with per-group learning rates.

    Moments, bias-correction time, decoupled weight decay, and the update are
    all element-gated on ``grad != 0``; entries absent from the grads dict are
    treated as all-zero and skipped entirely.
    """

    def __init__(self, params: dict[str, torch.Tensor],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0,
                 group_fn=param_group):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.group_fn = group_fn
        self.step_count = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, torch.Tensor], lrs: dict[str, float]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads.get(name)
                if g is None:
                    continue
                nz = g != 0
                if not bool(nz.any()):
                    continue
                m, v = self.m[name], self.v[name]
                m_new = b1 * m + (1.0 - b1) * g
                v_new = b2 * v + (1.0 - b2) * g * g
                m.copy_(torch.where(nz, m_new, m))
                v.copy_(torch.where(nz, v_new, v))
                lr = lrs[self.group_fn(name)]
                update = lr * ((m / bc1) / (torch.sqrt(v / bc2) + self.eps)
                               + self.weight_decay * p)
                p.sub_(torch.where(nz, update, torch.zeros_like(update)))


class GatedSGD:
    """Plain gradient descent with the same gating and group-LR interface."""

    def __init__(self, params: dict[str, torch.Tensor], weight_decay: float = 0.0,
                 group_fn=param_group):
        self.params = params
        self.weight_decay = weight_decay
        self.group_fn = group_fn

    def step(self, grads: dict[str, torch.Tensor], lrs: dict[str, float]) -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads.get(name)
                if g is None:
                    continue
                nz = g != 0
                if not bool(nz.any()):
                    continue
                lr = lrs[self.group_fn(name)]
                update = lr * (g + self.weight_decay * p)
                p.sub_(torch.where(nz, update, torch.zeros_like(update)))


def make_optimizer(kind: str, params: dict[str, torch.Tensor],
                   weight_decay: float = 0.0, group_fn=param_group):
    if kind == "adam":
        return GatedAdamW(params, weight_decay=weight_decay, group_fn=group_fn)
    if kind == "sgd":
        return GatedSGD(params, weight_decay=weight_decay, group_fn=group_fn)
    raise UsageError(f"unknown optimizer kind {kind!r}")


def autograd_dict(loss: torch.Tensor, params: dict[str, torch.Tensor],
                  extra: dict[str, torch.Tensor] | None = None,
                  retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradients of loss w.r.t. every tensor in params (and extras), with
    exact zeros for tensors the loss does not depend on."""
    merged = dict(params)
    if extra:
        merged.update(extra)
    names = sorted(merged)
    grads = torch.autograd.grad(loss, [merged[n] for n in names],
                                allow_unused=True, retain_graph=retain_graph)
    return {n: (torch.zeros_like(merged[n]) if g is None else g)
            for n, g in zip(names, grads)}


def train_supervised(model, sentences: list[Sentence], epochs: int,
                     batch_size: int, encoder_lr: float, classifier_lr: float,
                     weight_decay: float = 0.01, warmup_fraction: float = 0.10,
                     seed: int = 0, mask=None,
                     freeze_encoder_first_epoch: bool = False,
                     param_override: dict[str, torch.Tensor] | None = None) -> list[float]:
    """Mini-batch AdamW fine-tuning under an optional fixed head mask.

    Returns the mean per-batch loss of each epoch. The model is updated in
    place; the first epoch optionally freezes the encoder group (classifier
    and mixing weights keep training).
    """
    from .parser import batch_loss  # local import avoids a module cycle

    if not sentences:
        raise UsageError("no training sentences")
    if epochs == 0:
        return []
    n_batches = math.ceil(len(sentences) / batch_size)
    total_steps = epochs * n_batches
    opt = GatedAdamW(model.state.params, weight_decay=weight_decay)
    step = 0
    epoch_losses = []
    for epoch in range(epochs):
        freeze = freeze_encoder_first_epoch and epoch == 0
        running = 0.0
        for batch in epoch_batches(sentences, batch_size, stable_seed(seed, "epoch", epoch)):
            loss = batch_loss(model, batch, mask=mask, param_override=param_override)
            grads = autograd_dict(loss, model.state.params)
            if freeze:
                grads = {k: g for k, g in grads.items()
                         if param_group(k) == "classifier"}
            lrs = {
                "encoder": cosine_warmup_lr(step, total_steps, encoder_lr, warmup_fraction),
                "classifier": cosine_warmup_lr(step, total_steps, classifier_lr, warmup_fraction),
            }
            opt.step(grads, lrs)
            running += float(loss.detach())
            step += 1
        epoch_losses.append(running / n_batches)
    return epoch_losses
