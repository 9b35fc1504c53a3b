"""Multilingual dependency parsing with language-specific attention-head
subnetworks: mask discovery by importance pruning, static and dynamic masked
training (non-episodic and meta-learning), few-shot transfer, and
gradient-conflict analysis."""

from .encoder import EncoderConfig, ModelState, encode, init_state
from .parser import ParserConfig, ParserModel, ParseTree, build_parser_model, decode_cle, las
from .subnet import HeadMask, SoftMask, binarize, head_importance, iterative_prune, union_masks
from .training import MetaConfig, RunTrace, TrainConfig, meta_train, train_stage1, train_stage2
from .treebank import (LabelVocab, Sentence, Token, ToyGrammarSpec, Treebank,
                       gen_toy_treebank, parse_conllu)

__all__ = [
    "EncoderConfig", "ModelState", "encode", "init_state",
    "ParserConfig", "ParserModel", "ParseTree", "build_parser_model", "decode_cle", "las",
    "HeadMask", "SoftMask", "binarize", "head_importance", "iterative_prune", "union_masks",
    "MetaConfig", "RunTrace", "TrainConfig", "meta_train", "train_stage1", "train_stage2",
    "LabelVocab", "Sentence", "Token", "ToyGrammarSpec", "Treebank",
    "gen_toy_treebank", "parse_conllu",
]

__version__ = "0.1.0"
