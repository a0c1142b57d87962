"""Multi-level cosine vector quantization of user and item representations.

Residual quantization (``rq``) assigns level h on the residual left by the
previous levels; product quantization (``pq``) assigns each of H column
blocks independently.  Assignment is the argmax of cosine similarity to the
level's codebook, and training maximises the tempered softmax likelihood of
the assigned code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cogcl.compute import Tape, Var
from cogcl.compute.tape import NORM_EPS
from cogcl.encoder import base_representations

SIDES = ("user", "item")


@dataclass
class QuantizerConfig:
    scheme: str = "rq"
    num_levels: int = 4
    codebook_size: int = 256
    tau: float = 0.2

    def __post_init__(self):
        if self.scheme not in ("rq", "pq"):
            raise ValueError(f"unknown quantization scheme {self.scheme!r}")
        if self.num_levels < 1 or self.codebook_size < 2:
            raise ValueError("need num_levels >= 1 and codebook_size >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def code_dim(self, embed_dim: int) -> int:
        if self.scheme == "rq":
            return embed_dim
        if embed_dim % self.num_levels:
            raise ValueError(f"pq needs embed_dim ({embed_dim}) divisible by num_levels ({self.num_levels})")
        return embed_dim // self.num_levels


@dataclass(eq=False)
class CodeAssignment:
    user_codes: np.ndarray  # (num_users, H) int64
    item_codes: np.ndarray  # (num_items, H) int64
    codebook_size: int
    epoch: int = 0

    @property
    def num_levels(self) -> int:
        return self.user_codes.shape[1]


def codebook_name(side: str, level: int) -> str:
    return f"codebook_{side}_{level}"


def init_codebooks(store, cfg: QuantizerConfig, embed_dim: int, rng: np.random.Generator) -> None:
    """Random unit-norm codebook vectors for both sides."""
    dim = cfg.code_dim(embed_dim)
    for side in SIDES:
        for h in range(cfg.num_levels):
            e = rng.standard_normal((cfg.codebook_size, dim))
            store.add(codebook_name(side, h), e / np.linalg.norm(e, axis=1, keepdims=True))


def _cosine_argmax(x: np.ndarray, book: np.ndarray) -> np.ndarray:
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_EPS)
    bn = book / np.maximum(np.linalg.norm(book, axis=1, keepdims=True), NORM_EPS)
    # argmax returns the first maximum, so ties go to the lowest index
    return np.argmax(xn @ bn.T, axis=1)


def quantize(tape: Tape, z: Var, books: list[Var], cfg: QuantizerConfig):
    """Hard codes plus the per-level inputs (taped, for the code loss)."""
    n, d = z.value.shape
    codes = np.empty((n, cfg.num_levels), dtype=np.int64)
    inputs: list[Var] = []
    width = cfg.code_dim(d)
    residual = z
    for h, book in enumerate(books):
        if cfg.scheme == "rq":
            x = residual
        else:
            x = tape.slice_cols(z, h * width, (h + 1) * width)
        codes[:, h] = _cosine_argmax(x.value, book.value)
        inputs.append(x)
        if cfg.scheme == "rq" and h + 1 < len(books):
            residual = tape.sub(residual, tape.take_rows(book, codes[:, h]))
    return codes, inputs


def assign_codes(z: np.ndarray, books: list[np.ndarray], cfg: QuantizerConfig):
    """Codes (n x H) and the per-level input matrices, without gradients."""
    tape = Tape(enabled=False)
    codes, inputs = quantize(tape, Var(z), [Var(b) for b in books], cfg)
    return codes, [x.value for x in inputs]


def code_loss(tape: Tape, level_inputs: list[Var], codes: np.ndarray,
              books: list[Var], cfg: QuantizerConfig) -> Var:
    """Mean over rows and levels of ``-log P(code | level input)``."""
    terms = [tape.softmax_xent(tape.cosine(x, book), codes[:, h], 1.0 / cfg.tau)
             for h, (x, book) in enumerate(zip(level_inputs, books))]
    return terms[0] if len(terms) == 1 else tape.mean(terms)


def side_code_loss(tape: Tape, store, z: Var, side: str, cfg: QuantizerConfig) -> Var:
    """Live assignment and code loss for one side's batch representations."""
    books = [tape.param(store, codebook_name(side, h)) for h in range(cfg.num_levels)]
    codes, inputs = quantize(tape, z, books, cfg)
    return code_loss(tape, inputs, codes, books, cfg)


def refresh_codes(store, base_graph, enc_cfg, cfg: QuantizerConfig, epoch: int = 0) -> CodeAssignment:
    """Evaluation-mode encode of everyone, then assign codes on both sides."""
    z = base_representations(store, base_graph, enc_cfg)
    nu = base_graph.num_users
    out = {}
    for side, rows in (("user", z[:nu]), ("item", z[nu:nu + base_graph.num_items])):
        books = [store.value(codebook_name(side, h)) for h in range(cfg.num_levels)]
        out[side], _ = assign_codes(rows, books, cfg)
    return CodeAssignment(out["user"], out["item"], cfg.codebook_size, epoch)


def code_usage(codes: np.ndarray, codebook_size: int) -> dict:
    """Per-level usage statistics used to surface codebook collapse."""
    levels = []
    for h in range(codes.shape[1]):
        counts = np.bincount(codes[:, h], minlength=codebook_size)
        levels.append({
            "used": int((counts > 0).sum()),
            "max_share": float(counts.max() / max(len(codes), 1)),
        })
    return {"levels": levels, "collapsed": any(lv["used"] <= 1 for lv in levels)}
