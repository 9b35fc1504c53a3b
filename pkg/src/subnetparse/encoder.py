"""Trainable transformer encoder whose attention heads can be switched off.

Every head's context vector is multiplied by its mask value right before the
output projection, so a zero mask removes the head's contribution exactly and
the gradient with respect to the mask value is the sensitivity of the loss to
that head. Token representations for the task head are formed as
``eta * sum_i U_i * softmax(lambda)_i`` over the per-layer outputs.

All tensors are float64 on CPU; gradients come from reverse-mode autodiff and
are checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ContractError, DataError

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"SNPCKPT1\n"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 12
    n_heads: int = 12
    d_model: int = 96
    d_ff: int = 192
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"EncoderConfig.{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads


@dataclass
class ModelState:
    """All trainable tensors, keyed by name.

    Encoder weights live under ``layers.*`` / ``tok_emb`` / ``pos_emb``; the
    mixing weights are ``mix.lambda`` and ``mix.eta``; classifier parameters
    (attached by the parser head) live under ``clf.*`` and are serialized
    together with the rest.
    """

    config: EncoderConfig
    params: dict[str, torch.Tensor]

    def clone(self) -> "ModelState":
        return ModelState(self.config, {k: v.detach().clone().requires_grad_(True)
                                        for k, v in self.params.items()})


@dataclass
class MaskedForwardRecord:
    layer_outputs: list[torch.Tensor]   # one (T, d_model) tensor per layer
    mixed: torch.Tensor                 # (T, d_model)
    mask_tensor: torch.Tensor           # (n_layers, n_heads) leaf used in the pass
    cached: bool                        # grad graph retained


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().clone().requires_grad_(True)


def init_state(config: EncoderConfig) -> ModelState:
    """Seed-deterministic init: N(0, 0.02) weights, zero biases, unit gains.

    The mixing vector starts at zeros (uniform softmax) and the scale at 1.
    """
    g = torch.Generator().manual_seed(config.seed)

    def normal(*shape):
        return (torch.randn(*shape, generator=g, dtype=DTYPE) * 0.02).requires_grad_(True)

    def zeros(*shape):
        return torch.zeros(*shape, dtype=DTYPE, requires_grad=True)

    def ones(*shape):
        return torch.ones(*shape, dtype=DTYPE, requires_grad=True)

    d, dff = config.d_model, config.d_ff
    params: dict[str, torch.Tensor] = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_len, d),
        "mix.lambda": zeros(config.n_layers),
        "mix.eta": ones(()),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        for proj in ("wq", "wk", "wv", "wo"):
            params[p + proj] = normal(d, d)
        for bias in ("bq", "bk", "bv", "bo"):
            params[p + bias] = zeros(d)
        params[p + "ln1.g"] = ones(d)
        params[p + "ln1.b"] = zeros(d)
        params[p + "ln2.g"] = ones(d)
        params[p + "ln2.b"] = zeros(d)
        params[p + "ff.w1"] = normal(d, dff)
        params[p + "ff.b1"] = zeros(dff)
        params[p + "ff.w2"] = normal(dff, d)
        params[p + "ff.b2"] = zeros(d)
    return ModelState(config=config, params=params)


def param_group(name: str) -> str:
    """LR grouping: the task head (clf.*) and the mixing scalars follow the
    classifier learning rate; everything else is encoder."""
    return "classifier" if name.startswith(("clf.", "mix.")) else "encoder"


def head_param_slices(config: EncoderConfig, layer: int, head: int):
    """(name, index) pairs addressing exactly head (layer, head)'s parameters.

    Q/K/V split the projection output dimension, so a head owns a column
    block there; the output projection consumes the merged heads, so a head
    owns a row block of ``wo``.
    """
    dh = config.d_head
    cols = slice(head * dh, (head + 1) * dh)
    p = f"layers.{layer}."
    out = []
    for proj, bias in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
        out.append((p + proj, (slice(None), cols)))
        out.append((p + bias, (cols,)))
    out.append((p + "wo", (cols, slice(None))))
    return out


def as_mask_tensor(mask, config: EncoderConfig) -> torch.Tensor:
    """Normalize a mask argument to an (n_layers, n_heads) float tensor.

    Accepts None (all heads on), numpy / torch arrays, or any object with a
    ``forward_tensor()`` method (HeadMask, SoftMask).
    """
    if mask is None:
        return torch.ones(config.n_layers, config.n_heads, dtype=DTYPE)
    if hasattr(mask, "forward_tensor"):
        t = mask.forward_tensor()
    elif isinstance(mask, torch.Tensor):
        t = mask.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(mask), dtype=DTYPE)
    if tuple(t.shape) != (config.n_layers, config.n_heads):
        raise ContractError(
            f"mask shape {tuple(t.shape)} does not match "
            f"({config.n_layers}, {config.n_heads})")
    return t


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor, eps: float = 1e-5):
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * g + b


def forward_batch(config: EncoderConfig, params: dict[str, torch.Tensor],
                  ids: torch.Tensor, lengths: list[int],
                  mask_tensor: torch.Tensor,
                  param_override: dict[str, torch.Tensor] | None = None):
    """Run the encoder on a padded (B, T) id batch.

    Returns (layer_outputs, mixed) with shapes (B, T, d). Padded key
    positions are excluded from attention; padded rows carry garbage and
    must be sliced away by the caller via ``lengths``.
    """
    if param_override:
        params = {**params, **param_override}
    B, T = ids.shape
    if T > config.max_len:
        raise ContractError(f"sequence length {T} exceeds max_len {config.max_len}")
    H, dh = config.n_heads, config.d_head

    key_ok = torch.zeros(B, T, dtype=torch.bool)
    for b, n in enumerate(lengths):
        key_ok[b, :n] = True
    attn_bias = torch.where(key_ok, 0.0, float("-inf")).to(DTYPE).view(B, 1, 1, T)

    x = params["tok_emb"][ids] + params["pos_emb"][:T].unsqueeze(0)
    layer_outputs = []
    scale = 1.0 / math.sqrt(dh)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        q = (x @ params[p + "wq"] + params[p + "bq"]).view(B, T, H, dh).transpose(1, 2)
        k = (x @ params[p + "wk"] + params[p + "bk"]).view(B, T, H, dh).transpose(1, 2)
        v = (x @ params[p + "wv"] + params[p + "bv"]).view(B, T, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) * scale + attn_bias
        ctx = torch.softmax(scores, dim=-1) @ v              # (B, H, T, dh)
        ctx = ctx * mask_tensor[i].view(1, H, 1, 1)          # head gating
        merged = ctx.transpose(1, 2).reshape(B, T, config.d_model)
        x = _layer_norm(x + merged @ params[p + "wo"] + params[p + "bo"],
                        params[p + "ln1.g"], params[p + "ln1.b"])
        ff = torch.nn.functional.gelu(x @ params[p + "ff.w1"] + params[p + "ff.b1"])
        x = _layer_norm(x + ff @ params[p + "ff.w2"] + params[p + "ff.b2"],
                        params[p + "ln2.g"], params[p + "ln2.b"])
        layer_outputs.append(x)

    coeff = torch.softmax(params["mix.lambda"], dim=0)
    mixed = params["mix.eta"] * sum(layer_outputs[i] * coeff[i]
                                    for i in range(config.n_layers))
    return layer_outputs, mixed


def encode(tokens: list[int], state: ModelState, mask=None,
           cache_grads: bool = False) -> MaskedForwardRecord:
    """Encode one sentence of vocab indices under a head mask."""
    config = state.config
    if any(t < 0 or t >= config.vocab_size for t in tokens):
        raise ContractError("token index out of vocabulary range")
    if len(tokens) > config.max_len:
        raise ContractError(f"sentence length {len(tokens)} exceeds max_len")
    mask_tensor = as_mask_tensor(mask, config)
    if cache_grads:
        mask_tensor = mask_tensor.detach().clone().requires_grad_(True)
        ids = torch.tensor([tokens], dtype=torch.long)
        layer_outputs, mixed = forward_batch(config, state.params, ids,
                                             [len(tokens)], mask_tensor)
        return MaskedForwardRecord(
            layer_outputs=[u.squeeze(0) for u in layer_outputs],
            mixed=mixed.squeeze(0), mask_tensor=mask_tensor, cached=True)
    with torch.no_grad():
        ids = torch.tensor([tokens], dtype=torch.long)
        layer_outputs, mixed = forward_batch(config, state.params, ids,
                                             [len(tokens)], mask_tensor)
    return MaskedForwardRecord(
        layer_outputs=[u.squeeze(0) for u in layer_outputs],
        mixed=mixed.squeeze(0), mask_tensor=mask_tensor, cached=False)


def backward(record: MaskedForwardRecord, loss_grad: torch.Tensor,
             state: ModelState):
    """Reverse-mode gradients of <loss_grad, mixed> w.r.t. every parameter
    and every mask variable.

    Returns (param_grads, mask_grad); parameters that do not influence the
    encoder output (e.g. classifier weights) get exact zeros.
    """
    if not record.cached:
        raise ContractError("record was produced without gradient caching")
    names = sorted(state.params)
    inputs = [state.params[n] for n in names] + [record.mask_tensor]
    grads = torch.autograd.grad(
        outputs=record.mixed, inputs=inputs,
        grad_outputs=loss_grad.to(DTYPE), allow_unused=True, retain_graph=True)
    param_grads = {}
    for n, g in zip(names, grads[:-1]):
        param_grads[n] = torch.zeros_like(state.params[n]) if g is None else g
    mask_grad = grads[-1]
    if mask_grad is None:
        mask_grad = torch.zeros_like(record.mask_tensor)
    return param_grads, mask_grad


def flatten_grads(grads: dict[str, torch.Tensor], names: list[str]) -> np.ndarray:
    """Concatenate gradients in the given name order into one float64 vector."""
    parts = [grads[n].detach().reshape(-1).numpy() for n in names]
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# Checkpoints: self-describing container (JSON manifest + raw little-endian
# float64 payload), byte-identical for identical contents.


def save_checkpoint(path: str, state: ModelState, meta: dict | None = None,
                    rng_state: bytes | None = None) -> None:
    names = sorted(state.params)
    manifest = []
    blobs = []
    offset = 0
    for n in names:
        arr = np.ascontiguousarray(state.params[n].detach().numpy(), dtype="<f8")
        raw = arr.tobytes()
        # ascontiguousarray promotes 0-dim arrays, so record the true shape
        manifest.append({"name": n, "shape": list(state.params[n].shape),
                         "dtype": "float64", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": 1,
        "encoder_config": asdict(state.config),
        "meta": meta or {},
        "rng": rng_state.hex() if rng_state is not None else None,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str):
    """Returns (ModelState, meta dict, rng_state bytes or None)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("version") != 1:
            raise DataError(f"{path}: unsupported checkpoint version")
        config = EncoderConfig(**header["encoder_config"])
        params = {}
        for entry in header["tensors"]:
            raw = f.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise DataError(f"{path}: truncated tensor payload for {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
            params[entry["name"]] = torch.from_numpy(arr).requires_grad_(True)
    rng = bytes.fromhex(header["rng"]) if header.get("rng") else None
    return ModelState(config=config, params=params), header.get("meta", {}), rng
