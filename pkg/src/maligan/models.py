"""Autoregressive generators, generator snapshots and the sequence discriminator.

Sequences travel as :class:`SequenceBatch`: a ``(B, T)`` integer token
matrix plus per-row lengths.  Positions at or beyond a row's length are
padding and never contribute to any likelihood or gradient.

Two run modes share the same code paths:

* fixed length (``eos=None``): every sequence has exactly ``max_len`` tokens
  drawn from ``0..n_tokens-1``; this is the mode the exact oracle and the
  binary-grid task use;
* variable length (``eos`` set): sampling stops after the end token, which is
  counted in the likelihood.  Tokens listed in ``banned`` (BOS, PAD) get zero
  probability.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

BOS, EOS, PAD = 0, 1, 2
SPECIALS = ("<bos>", "<eos>", "<pad>")
_MASK_LOGIT = -1e30


class Vocab:
    """Token strings indexed densely; 0, 1, 2 are BOS, EOS and PAD."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocab") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


@dataclass
class SequenceBatch:
    """Token matrix with lengths and provenance.

    ``clamp`` is the number of leading positions copied from real data (for
    clamped completions); ``groups`` maps each row to the real sample that
    spawned it.
    """

    tokens: np.ndarray
    lengths: np.ndarray
    real: bool = False
    clamp: int = 0
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim == 1:
            self.tokens = self.tokens[None, :]
        self.lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        if self.lengths.shape[0] != self.tokens.shape[0]:
            raise ValueError("lengths must have one entry per row")
        if np.any(self.lengths > self.tokens.shape[1]) or np.any(self.lengths < 0):
            raise ValueError("length outside token matrix")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < self.lengths[:, None]

    def rows(self, idx) -> "SequenceBatch":
        idx = np.atleast_1d(np.asarray(idx))
        groups = None if self.groups is None else self.groups[idx]
        return SequenceBatch(self.tokens[idx], self.lengths[idx], self.real, self.clamp, groups)

    def to_lists(self) -> list[list[int]]:
        return [row[:n].tolist() for row, n in zip(self.tokens, self.lengths)]

    @classmethod
    def fixed(cls, tokens, real: bool = False) -> "SequenceBatch":
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        return cls(tokens, np.full(tokens.shape[0], tokens.shape[1]), real=real)

    @classmethod
    def from_lists(cls, seqs: Sequence[Sequence[int]], width: int | None = None,
                   pad: int = PAD, real: bool = False) -> "SequenceBatch":
        width = width if width is not None else max((len(s) for s in seqs), default=0)
        tokens = np.full((len(seqs), width), pad, dtype=np.int64)
        for i, s in enumerate(seqs):
            if len(s) > width:
                raise ValueError(f"sequence {i} longer than width {width}")
            tokens[i, :len(s)] = s
        return cls(tokens, np.array([len(s) for s in seqs], dtype=np.int64), real=real)

    @classmethod
    def concat(cls, batches: Sequence["SequenceBatch"]) -> "SequenceBatch":
        width = max(b.width for b in batches)
        toks = [np.pad(b.tokens, ((0, 0), (0, width - b.width)), constant_values=PAD) for b in batches]
        return cls(np.concatenate(toks), np.concatenate([b.lengths for b in batches]))


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Smallest index whose cumulative probability reaches ``u`` (vocab order)."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class Generator:
    """Shared sampling and likelihood logic; subclasses provide the step model.

    Subclasses implement ``_init_state``, ``_advance``, ``_state_log_probs``,
    ``step_log_probs``, ``grad_weighted`` and ``grad_entropy``.
    """

    params: ad.ParamStore

    def __init__(self, n_tokens: int, max_len: int, eos: int | None = None,
                 banned: Sequence[int] = ()):
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.n_tokens = int(n_tokens)
        self.max_len = int(max_len)
        self.eos = eos
        self.banned = tuple(sorted(set(banned)))
        self.step = 0  # generator updates applied so far
        self._mask = np.zeros(self.n_tokens)
        self._mask[list(self.banned)] = _MASK_LOGIT

    @property
    def pad(self) -> int:
        return PAD if self.eos is not None else 0

    # -- likelihood -------------------------------------------------------
    def check_tokens(self, batch: SequenceBatch) -> None:
        toks = batch.tokens[batch.mask()]
        if toks.size and (toks.min() < 0 or toks.max() >= self.n_tokens):
            raise ValueError("token out of vocab")
        if batch.lengths.size and batch.lengths.max() > self.max_len:
            raise ValueError(f"sequence longer than max_len {self.max_len}")

    def chosen_log_probs(self, batch: SequenceBatch) -> np.ndarray:
        """``(B, W)`` per-step ``log p(a_t | s_t)``, zero on padding."""
        self.check_tokens(batch)
        lp = self.step_log_probs(batch.tokens)
        safe = np.where(batch.mask(), batch.tokens, 0)
        chosen = np.take_along_axis(lp, safe[:, :, None], axis=2)[:, :, 0]
        return np.where(batch.mask(), chosen, 0.0)

    def log_prob(self, batch: SequenceBatch) -> np.ndarray:
        return self.chosen_log_probs(batch).sum(axis=1)

    def grad_log_prob(self, batch: SequenceBatch) -> np.ndarray:
        """Flat gradient of ``sum_i log p(x_i)``; pass a one-row batch for a single sequence."""
        self.check_tokens(batch)
        return self.grad_weighted(batch, batch.mask().astype(np.float64))

    def state_probs_sum(self, batch: SequenceBatch) -> np.ndarray:
        return np.exp(self.step_log_probs(batch.tokens)).sum(axis=2)

    # -- sampling ---------------------------------------------------------
    def sample(self, n: int, rng: np.random.Generator, max_len: int | None = None) -> SequenceBatch:
        return self.clamped_sample(None, 0, rng, max_len=max_len, n=n)

    def clamped_sample(self, prefix: SequenceBatch | None, n_clamp: int, rng: np.random.Generator,
                       max_len: int | None = None, n: int | None = None) -> SequenceBatch:
        """Copy the first ``n_clamp`` tokens of each prefix row, sample the rest.

        Rows whose prefix already ends (EOS, or fixed length reached) inside the
        clamp are returned unchanged.
        """
        T = self.max_len if max_len is None else int(max_len)
        if T < 1:
            raise ValueError("max_len must be >= 1")
        if prefix is None:
            if n_clamp != 0:
                raise ValueError("n_clamp > 0 requires a prefix")
            B = int(n)
            ptoks = np.zeros((B, 0), dtype=np.int64)
            plens = np.zeros(B, dtype=np.int64)
        else:
            B = len(prefix)
            if np.any(n_clamp > prefix.lengths):
                raise ValueError(f"clamp length {n_clamp} exceeds prefix length")
            ptoks, plens = prefix.tokens, prefix.lengths
        n_clamp = min(int(n_clamp), T)
        tokens = np.full((B, T), self.pad, dtype=np.int64)
        lengths = np.full(B, T, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        if n_clamp:
            tokens[:, :n_clamp] = ptoks[:, :n_clamp]
            if self.eos is not None:
                hit = tokens[:, :n_clamp] == self.eos
                ended = hit.any(axis=1)
                lengths[ended] = hit[ended].argmax(axis=1) + 1
                done |= ended
        state = self._init_state(B)
        for t in range(n_clamp):
            state = self._advance(state, tokens[:, t])
        for t in range(n_clamp, T):
            probs = np.exp(self._state_log_probs(state))
            u = rng.random(B)
            tok = _inverse_cdf(probs, u)
            tok = np.where(done, self.pad, tok)
            tokens[:, t] = tok
            if self.eos is not None:
                newly = (~done) & (tok == self.eos)
                lengths[newly] = t + 1
                done |= newly
            if t + 1 < T:
                state = self._advance(state, tok)
        if self.eos is not None:
            tokens[np.arange(T)[None, :] >= lengths[:, None]] = self.pad
        groups = None if prefix is None else np.arange(B)
        return SequenceBatch(tokens, lengths, real=False, clamp=n_clamp, groups=groups)

    # -- bookkeeping ------------------------------------------------------
    def snapshot(self) -> "GeneratorSnapshot":
        return GeneratorSnapshot(self)

    def apply_gradient(self, grad: np.ndarray, lr: float, optimizer: str = "sgd") -> None:
        """Ascend along ``grad`` (realized as descent on its negation)."""
        self.params.set_flat_grad(-np.asarray(grad, dtype=np.float64))
        if optimizer == "adam":
            ad.adam_step(self.params, lr)
        elif optimizer == "sgd":
            ad.sgd_step(self.params, lr)
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.step += 1

    def _masked(self, logits: np.ndarray) -> np.ndarray:
        return logits + self._mask if self.banned else logits


def _np_log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class TabularGenerator(Generator):
    """Categorical per context, the context being the last ``order`` tokens.

    With ``order >= max_len - 1`` the context is the full history and the
    model can represent any distribution over fixed-length sequences.
    """

    def __init__(self, n_tokens: int, max_len: int, order: int | None = None, eos: int | None = None,
                 banned: Sequence[int] = (), logits: np.ndarray | None = None,
                 rng: np.random.Generator | None = None, init_scale: float = 0.0):
        super().__init__(n_tokens, max_len, eos, banned)
        self.order = max_len - 1 if order is None else int(order)
        V = self.n_tokens
        self._offsets = np.cumsum([0] + [V ** k for k in range(self.order + 1)])
        self.n_contexts = int(self._offsets[-1])
        if logits is None:
            logits = np.zeros((self.n_contexts, V))
            if init_scale and rng is not None:
                logits = init_scale * rng.standard_normal((self.n_contexts, V))
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (self.n_contexts, V):
            raise ValueError(f"logit table must have shape {(self.n_contexts, V)}")
        self.params = ad.ParamStore({"logits": logits})

    def meta(self) -> dict:
        return {"kind": "tabular", "n_tokens": self.n_tokens, "max_len": self.max_len,
                "order": self.order, "eos": self.eos, "banned": list(self.banned)}

    @property
    def logits(self) -> np.ndarray:
        return self.params["logits"].value

    def table_log_probs(self) -> np.ndarray:
        # Cached per parameter array; optimizer steps replace arrays rather than mutate them.
        arr = self.logits
        cache = getattr(self, "_lp_cache", None)
        if cache is None or cache[0] is not arr:
            cache = (arr, _np_log_softmax(self._masked(arr)))
            self._lp_cache = cache
        return cache[1]

    def contexts(self, tokens: np.ndarray) -> np.ndarray:
        """Context index of every position of a ``(B, W)`` token matrix."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B, W = tokens.shape
        ctx = np.empty((B, W), dtype=np.int64)
        state = self._init_state(B)
        for t in range(W):
            ctx[:, t] = self._context_of(state)
            state = self._advance(state, tokens[:, t])
        return ctx

    def step_log_probs(self, tokens: np.ndarray) -> np.ndarray:
        return self.table_log_probs()[self.contexts(tokens)]

    # Sampling state: (base-V code of the last min(t, order) tokens, t).
    def _init_state(self, B):
        return (np.zeros(B, dtype=np.int64), 0)

    def _context_of(self, state):
        code, t = state
        return self._offsets[min(t, self.order)] + code

    def _advance(self, state, tok):
        code, t = state
        c, V = self.order, self.n_tokens
        if c == 0:
            return (code, t + 1)
        if t >= c:
            code = code % (V ** (c - 1))
        return (code * V + tok, t + 1)

    def _state_log_probs(self, state):
        return self.table_log_probs()[self._context_of(state)]

    def _context_weights(self, batch: SequenceBatch, weights: np.ndarray):
        m = batch.mask()
        w = np.where(m, weights, 0.0)
        ctx = self.contexts(batch.tokens)
        return ctx, w, m

    def grad_weighted(self, batch: SequenceBatch, weights: np.ndarray) -> np.ndarray:
        """``sum_{i,t} w_it grad log p(a_it | s_it)`` in closed form."""
        ctx, w, m = self._context_weights(batch, np.asarray(weights, dtype=np.float64))
        V = self.n_tokens
        flat_idx = (ctx * V + np.where(m, batch.tokens, 0))[m]
        g = np.bincount(flat_idx, weights=w[m], minlength=self.n_contexts * V).reshape(self.n_contexts, V)
        wc = np.bincount(ctx[m], weights=w[m], minlength=self.n_contexts)
        g -= wc[:, None] * np.exp(self.table_log_probs())
        return g.ravel()

    def grad_entropy(self, batch: SequenceBatch, weights: np.ndarray) -> np.ndarray:
        ctx, w, m = self._context_weights(batch, np.asarray(weights, dtype=np.float64))
        lp = self.table_log_probs()
        p = np.exp(lp)
        plogp = np.where(p > 0, p * lp, 0.0)
        H = -plogp.sum(axis=1, keepdims=True)
        dH = -(plogp + p * H)
        wc = np.bincount(ctx[m], weights=w[m], minlength=self.n_contexts)
        return (wc[:, None] * dH).ravel()

    def entropies(self, batch: SequenceBatch) -> np.ndarray:
        lp = self.step_log_probs(batch.tokens)
        p = np.exp(lp)
        H = -np.where(p > 0, p * lp, 0.0).sum(axis=2)
        return np.where(batch.mask(), H, 0.0)

    @classmethod
    def uniform(cls, n_tokens: int, max_len: int, **kw) -> "TabularGenerator":
        return cls(n_tokens, max_len, **kw)


class _GRU:
    """GRU cell weights living in a ParamStore under ``prefix``."""

    def __init__(self, params: ad.ParamStore, prefix: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator, scale: float):
        self.p = params
        self.prefix = prefix
        self.n_hidden = n_hidden
        for gate in ("z", "r", "n"):
            params.add(f"{prefix}.W_{gate}", scale * rng.standard_normal((n_in, n_hidden)))
            params.add(f"{prefix}.U_{gate}", scale * rng.standard_normal((n_hidden, n_hidden)))
            params.add(f"{prefix}.b_{gate}", np.zeros(n_hidden))

    def __call__(self, x: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
        P = lambda name: self.p[f"{self.prefix}.{name}"]  # noqa: E731
        z = ad.sigmoid(x @ P("W_z") + h @ P("U_z") + P("b_z"))
        r = ad.sigmoid(x @ P("W_r") + h @ P("U_r") + P("b_r"))
        n = ad.tanh(x @ P("W_n") + (r * h) @ P("U_n") + P("b_n"))
        return n + z * (h - n)  # (1 - z) * n + z * h


class RecurrentGenerator(Generator):
    """Embedding, one GRU cell and a linear softmax head.

    The embedding table has one extra row (index ``n_tokens``) used as the
    start-of-sequence input.
    """

    def __init__(self, n_tokens: int, max_len: int, embed_dim: int = 8, hidden: int = 16,
                 eos: int | None = None, banned: Sequence[int] = (), seed: int = 0,
                 init_scale: float = 0.3):
        super().__init__(n_tokens, max_len, eos, banned)
        rng = np.random.default_rng(seed)
        self.embed_dim, self.hidden = embed_dim, hidden
        self.params = ad.ParamStore()
        self.params.add("embed", init_scale * rng.standard_normal((n_tokens + 1, embed_dim)))
        self.cell = _GRU(self.params, "gru", embed_dim, hidden, rng, init_scale)
        self.params.add("out.W", init_scale * rng.standard_normal((hidden, n_tokens)))
        self.params.add("out.b", np.zeros(n_tokens))

    def meta(self) -> dict:
        return {"kind": "recurrent", "n_tokens": self.n_tokens, "max_len": self.max_len,
                "embed_dim": self.embed_dim, "hidden": self.hidden, "eos": self.eos,
                "banned": list(self.banned)}

    def _logits(self, h: ad.Tensor) -> ad.Tensor:
        out = h @ self.params["out.W"] + self.params["out.b"]
        return out + self._mask if self.banned else out

    def _inputs(self, tokens: np.ndarray) -> np.ndarray:
        B = tokens.shape[0]
        start = np.full((B, 1), self.n_tokens, dtype=np.int64)
        prev = np.concatenate([start, tokens[:, :-1]], axis=1) if tokens.shape[1] else start[:, :0]
        return np.clip(prev, 0, self.n_tokens)

    def _forward_log_probs(self, tokens: np.ndarray) -> list[ad.Tensor]:
        prev = self._inputs(tokens)
        B, W = tokens.shape
        h = ad.constant(np.zeros((B, self.hidden)))
        out = []
        for t in range(W):
            x = ad.embedding(self.params["embed"], prev[:, t])
            h = self.cell(x, h)
            out.append(ad.log_softmax(self._logits(h)))
        return out

    def step_log_probs(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        with ad.no_grad():
            steps = self._forward_log_probs(tokens)
        if not steps:
            return np.zeros((tokens.shape[0], 0, self.n_tokens))
        return np.stack([s.value for s in steps], axis=1)

    def _init_state(self, B):
        return (np.zeros((B, self.hidden)), np.full(B, self.n_tokens, dtype=np.int64))

    def _advance(self, state, tok):
        h, prev = state
        with ad.no_grad():
            h = self.cell(ad.embedding(self.params["embed"], prev), ad.constant(h)).value
        return (h, np.asarray(tok, dtype=np.int64))

    def _state_log_probs(self, state):
        h, prev = state
        with ad.no_grad():
            h = self.cell(ad.embedding(self.params["embed"], prev), ad.constant(h))
            return ad.log_softmax(self._logits(h)).value

    def _weighted_objective(self, batch: SequenceBatch, weights: np.ndarray, entropy: bool) -> ad.Tensor:
        m = batch.mask()
        w = np.where(m, weights, 0.0)
        safe = np.where(m, batch.tokens, 0)
        total = ad.constant(0.0)
        for t, lp in enumerate(self._forward_log_probs(batch.tokens)):
            if entropy:
                term = ad.reduce_sum(lp * ad.exp(lp), axis=1) * (-w[:, t])
            else:
                coef = np.zeros((len(batch), self.n_tokens))
                coef[np.arange(len(batch)), safe[:, t]] = w[:, t]
                term = lp * coef
            total = total + ad.reduce_sum(term)
        return total

    def _grad(self, batch, weights, entropy):
        self.params.zero_grads()
        obj = self._weighted_objective(batch, np.asarray(weights, dtype=np.float64), entropy)
        ad.backward(obj)
        g = self.params.flat_grad()
        self.params.zero_grads()
        return g

    def grad_weighted(self, batch: SequenceBatch, weights: np.ndarray) -> np.ndarray:
        return self._grad(batch, weights, entropy=False)

    def grad_entropy(self, batch: SequenceBatch, weights: np.ndarray) -> np.ndarray:
        return self._grad(batch, weights, entropy=True)

    def weighted_objective_value(self, batch: SequenceBatch, weights: np.ndarray, entropy: bool = False) -> float:
        with ad.no_grad():
            return float(self._weighted_objective(batch, np.asarray(weights, dtype=np.float64), entropy).value)


class GeneratorSnapshot:
    """Frozen copy of a generator, tagged with the update count it was taken at."""

    def __init__(self, gen: Generator):
        self._gen = copy.deepcopy(gen)
        self.step = gen.step
        self.n_tokens, self.max_len, self.eos = gen.n_tokens, gen.max_len, gen.eos

    def sample(self, n, rng, max_len=None):
        return self._gen.sample(n, rng, max_len)

    def clamped_sample(self, prefix, n_clamp, rng, max_len=None, n=None):
        return self._gen.clamped_sample(prefix, n_clamp, rng, max_len, n)

    def log_prob(self, batch):
        return self._gen.log_prob(batch)

    def step_log_probs(self, tokens):
        return self._gen.step_log_probs(tokens)

    def flat_params(self) -> np.ndarray:
        return self._gen.params.flatten()

    def as_generator(self) -> Generator:
        """Independent live copy (the snapshot itself stays frozen)."""
        return copy.deepcopy(self._gen)


class Discriminator:
    """Embedding, bidirectional GRU encoder and a logistic head.

    Scores are clamped into ``[delta, 1 - delta]``.  The head starts at zero,
    so a fresh discriminator scores every sequence 0.5.
    """

    def __init__(self, n_tokens: int, embed_dim: int = 8, hidden: int = 16, delta: float = 1e-4,
                 seed: int = 0, init_scale: float = 0.3):
        rng = np.random.default_rng(seed)
        self.n_tokens, self.embed_dim, self.hidden, self.delta = n_tokens, embed_dim, hidden, delta
        self.params = ad.ParamStore()
        self.params.add("embed", init_scale * rng.standard_normal((n_tokens, embed_dim)))
        self.fwd = _GRU(self.params, "fwd", embed_dim, hidden, rng, init_scale)
        self.bwd = _GRU(self.params, "bwd", embed_dim, hidden, rng, init_scale)
        self.params.add("head.w", np.zeros((2 * hidden, 1)))
        self.params.add("head.b", np.zeros(1))

    def meta(self) -> dict:
        return {"kind": "discriminator", "n_tokens": self.n_tokens, "embed_dim": self.embed_dim,
                "hidden": self.hidden, "delta": self.delta}

    def logits(self, batch: SequenceBatch) -> ad.Tensor:
        if len(batch) == 0 or np.any(batch.lengths < 1):
            raise ValueError("cannot score an empty sequence")
        toks = np.clip(batch.tokens, 0, self.n_tokens - 1)
        m = batch.mask().astype(np.float64)
        B, W = toks.shape
        hf = ad.constant(np.zeros((B, self.hidden)))
        hb = ad.constant(np.zeros((B, self.hidden)))
        emb = self.params["embed"]
        for t in range(W):
            keep = m[:, t:t + 1]
            new = self.fwd(ad.embedding(emb, toks[:, t]), hf)
            hf = new * keep + hf * (1.0 - keep)  # exact select, keep is 0/1
        for t in range(W - 1, -1, -1):
            keep = m[:, t:t + 1]
            new = self.bwd(ad.embedding(emb, toks[:, t]), hb)
            hb = new * keep + hb * (1.0 - keep)
        z = ad.concat([hf, hb], axis=1) @ self.params["head.w"] + self.params["head.b"]
        return z

    def raw_logits(self, batch: SequenceBatch) -> np.ndarray:
        """Logits without a graph; identical rows are scored once so they agree bit for bit."""
        key = np.where(batch.mask(), batch.tokens, -1)
        uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        with ad.no_grad():
            z = self.logits(batch.rows(first)).value[:, 0]
        return z[inverse.reshape(-1)]

    def clamp(self, d: np.ndarray) -> np.ndarray:
        return np.clip(d, self.delta, 1.0 - self.delta)

    def score(self, batch: SequenceBatch) -> np.ndarray:
        z = self.raw_logits(batch)
        return self.clamp(0.5 * (1.0 + np.tanh(0.5 * z)))


def discriminate(disc, batch: SequenceBatch) -> np.ndarray:
    return disc.score(batch)


def snapshot(gen: Generator) -> GeneratorSnapshot:
    return gen.snapshot()


def make_generator(meta: dict, params: ad.ParamStore | None = None) -> Generator:
    """Rebuild a generator from checkpoint metadata (and optional parameters)."""
    kind = meta["kind"]
    if kind == "tabular":
        gen = TabularGenerator(meta["n_tokens"], meta["max_len"], order=meta["order"],
                               eos=meta.get("eos"), banned=meta.get("banned", ()))
    elif kind == "recurrent":
        gen = RecurrentGenerator(meta["n_tokens"], meta["max_len"], meta["embed_dim"], meta["hidden"],
                                 eos=meta.get("eos"), banned=meta.get("banned", ()))
    else:
        raise ValueError(f"unknown generator kind {kind!r}")
    if params is not None:
        if params.names() != gen.params.names():
            raise ValueError("checkpoint parameters do not match generator layout")
        gen.params = params
        if kind == "recurrent":
            gen.cell.p = params
        gen.step = int(meta.get("step", 0))
    return gen
