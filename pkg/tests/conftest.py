import numpy as np
import pytest
import torch

from subnetparse.encoder import EncoderConfig
from subnetparse.parser import ParserModel, build_parser_model
from subnetparse.treebank import (Sentence, Token, ToyGrammarSpec, Treebank,
                                  build_label_vocab, build_word_vocab,
                                  gen_toy_treebank)


def make_sentence(heads, deprels, forms=None, language="xx", source_id="s1"):
    n = len(heads)
    forms = forms or [f"w{i}" for i in range(1, n + 1)]
    tokens = tuple(Token(index=i + 1, form=forms[i], head=heads[i], deprel=deprels[i])
                   for i in range(n))
    return Sentence(tokens=tokens, language=language, source_id=source_id)


def tiny_model(n_layers=2, n_heads=2, d_model=8, d_ff=12, seed=0,
               arc_hidden=6, tag_hidden=5, treebanks=None) -> ParserModel:
    """A minuscule parser model over a toy treebank's vocabulary."""
    if treebanks is None:
        spec = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=0)
        treebanks = [gen_toy_treebank(spec, 12, seed=7, language="xx")]
    wv = build_word_vocab(treebanks)
    lv = build_label_vocab(treebanks)
    cfg = EncoderConfig(vocab_size=wv.size, n_layers=n_layers, n_heads=n_heads,
                        d_model=d_model, d_ff=d_ff, max_len=32, seed=seed)
    return build_parser_model(cfg, wv, lv, arc_hidden=arc_hidden,
                              tag_hidden=tag_hidden)


def randomize_params(params: dict, seed: int, scale: float = 0.3) -> None:
    """Replace parameters with healthy-scale random values so gradients sit
    well above the finite-difference noise floor."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in params.items():
            if name.endswith((".g",)):      # layer-norm gains stay near 1
                t.copy_(1.0 + 0.1 * torch.randn(t.shape, generator=g,
                                                dtype=torch.float64))
            else:
                t.copy_(scale * torch.randn(t.shape, generator=g,
                                            dtype=torch.float64))


def finite_diff_grad(f, tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i].detach())
        with torch.no_grad():
            flat[i] = orig + eps
        up = f()
        with torch.no_grad():
            flat[i] = orig - eps
        down = f()
        with torch.no_grad():
            flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor, tiny: float = 1e-8) -> float:
    a = a.detach()
    b = b.detach()
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()),
                          torch.full_like(a, tiny))
    return float(((a - b).abs() / denom).max())


@pytest.fixture
def svo_treebank() -> Treebank:
    spec = ToyGrammarSpec(word_order="SVO", adposition="pre", vocab_seed=0)
    return gen_toy_treebank(spec, 30, seed=11, language="xx")
