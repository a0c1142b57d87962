"""Weight-free multi-layer propagation with per-layer input dropout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cogcl.compute import Tape, Var

EMBEDDING = "embedding"  # users then items
CODE_EMBEDDING = "code_embedding"  # user codes then item codes


@dataclass
class EncoderConfig:
    num_layers: int = 3
    embed_dim: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.num_layers < 1 or self.embed_dim < 1:
            raise ValueError("num_layers and embed_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


def encode(tape: Tape, graph, x0: Var, cfg: EncoderConfig,
           rng: np.random.Generator | None = None, train: bool = False) -> Var:
    """Mean of layers 1..L where ``Z^l = Â · dropout(Z^{l-1})``; Z^0 is not in the readout."""
    if x0.value.shape[0] != graph.num_nodes:
        raise ValueError(f"encode: input has {x0.value.shape[0]} rows, graph has {graph.num_nodes} nodes")
    z = x0
    layers = []
    for _ in range(cfg.num_layers):
        z = tape.spmm(graph, tape.dropout(z, cfg.dropout_rate, rng, train))
        layers.append(z)
    return layers[0] if len(layers) == 1 else tape.mean(layers)


@dataclass
class ViewRepresentations:
    base: Var
    aug1: Var | None = None
    aug2: Var | None = None


def encode_all_views(tape: Tape, base_graph, pair, store, cfg: EncoderConfig,
                     rngs=(None, None, None), train: bool = False) -> ViewRepresentations:
    """Base view from ID embeddings on the interaction graph; two augmented
    views from [ID; code] embeddings on the augmented graphs."""
    z0 = tape.param(store, EMBEDDING)
    base = encode(tape, base_graph, z0, cfg, rngs[0], train)
    if pair is None:
        return ViewRepresentations(base)
    full = tape.concat_rows([z0, tape.param(store, CODE_EMBEDDING)])
    aug1 = encode(tape, pair.graph1, full, cfg, rngs[1], train)
    aug2 = encode(tape, pair.graph2, full, cfg, rngs[2], train)
    return ViewRepresentations(base, aug1, aug2)


def base_representations(store, base_graph, cfg: EncoderConfig) -> np.ndarray:
    """Evaluation-mode (no dropout, no tape) representations of users and items."""
    tape = Tape(enabled=False)
    return encode(tape, base_graph, tape.param(store, EMBEDDING), cfg).value
