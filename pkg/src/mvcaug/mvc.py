"""Mixing visual concepts: new conditioning embeddings from a caption pool.

Indices in the public API are 1-based and ranges are inclusive, so
``coarse_mix(base, donor, 2, 3)`` replaces the second and third token rows.

RNG stream
----------
``mix_embeddings`` draws from ``rng.stream(config.seed, "mvc", class_label)``
(unless a generator is passed in) in exactly this order, for each output::

    base                       = integers(K)
    repeat P times:  donor     = draw_donor(K, base)
                     (r, s)    = sample_index_pair(m)
    repeat Q times:  donor     = draw_donor(K, base)
                     (u, v)    = sample_index_pair(d)
                     row       = integers(m) + 1

where ``draw_donor`` takes ``j = integers(K - 1)`` and skips the base index
(``j + 1 if j >= base``) and ``sample_index_pair(n)`` takes ``a = integers(n)``,
``b = integers(n - 1)``, bumps ``b`` past ``a`` and returns the sorted pair
shifted to 1-based.  ``integers(n)`` is ``Generator.integers(0, n)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .captions import export_embeddings, import_embeddings
from .errors import ConfigError, InvalidArgumentError, ParseError, ShapeError, StorageError

COARSE = "coarse"
FINE = "fine"


@dataclass(frozen=True)
class MixerConfig:
    P: int = 1
    Q: int = 2
    N_y: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.P < 0 or self.Q < 0:
            raise InvalidArgumentError(f"P and Q must be >= 0, got P={self.P}, Q={self.Q}")
        if self.N_y < 1:
            raise InvalidArgumentError(f"N_y must be >= 1, got {self.N_y}")


@dataclass
class MixedConditioning:
    e_cond: np.ndarray
    e_null: np.ndarray
    class_label: str
    base_index: int
    # (donor index, kind, range); coarse range = (r, s), fine range = (row, u, v)
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if self.e_cond.shape != self.e_null.shape:
            raise ShapeError(f"conditioning {self.e_cond.shape} and null {self.e_null.shape} differ")

    def provenance_json(self) -> dict:
        return {"class_label": self.class_label, "base": self.base_index,
                "edits": [{"donor": d, "kind": k, "range": list(r)} for d, k, r in self.provenance]}


def _same_shape(base, donor):
    if base.shape != donor.shape or base.ndim != 2:
        raise ShapeError(f"base {base.shape} and donor {donor.shape} must be equal 2-D shapes")


def coarse_mix(base: np.ndarray, donor: np.ndarray, r: int, s: int) -> np.ndarray:
    """Copy of ``base`` with token rows ``r..s`` taken from ``donor``."""
    _same_shape(base, donor)
    m = base.shape[0]
    if not 1 <= r < s <= m:
        raise InvalidArgumentError(f"need 1 <= r < s <= {m}, got r={r}, s={s}")
    out = base.copy()
    out[r - 1:s] = donor[r - 1:s]
    return out


def fine_mix(base: np.ndarray, donor: np.ndarray, row: int, u: int, v: int) -> np.ndarray:
    """Copy of ``base`` with entries ``u..v`` of token row ``row`` taken from ``donor``."""
    _same_shape(base, donor)
    m, d = base.shape
    if not 1 <= row <= m:
        raise InvalidArgumentError(f"need 1 <= row <= {m}, got {row}")
    if not 1 <= u < v <= d:
        raise InvalidArgumentError(f"need 1 <= u < v <= {d}, got u={u}, v={v}")
    out = base.copy()
    out[row - 1, u - 1:v] = donor[row - 1, u - 1:v]
    return out


def sample_index_pair(gen: np.random.Generator, bound: int) -> tuple[int, int]:
    """Uniform unordered pair of distinct indices from ``1..bound``, as ``(lo, hi)``."""
    if bound < 2:
        raise InvalidArgumentError(f"bound must be >= 2, got {bound}")
    a = int(gen.integers(0, bound))
    b = int(gen.integers(0, bound - 1))
    if b >= a:
        b += 1
    lo, hi = (a, b) if a < b else (b, a)
    return lo + 1, hi + 1


def draw_donor(gen: np.random.Generator, k: int, base: int) -> int:
    j = int(gen.integers(0, k - 1))
    return j + 1 if j >= base else j


def mix_embeddings(pool, config: MixerConfig, null_emb: np.ndarray, class_label: str = "",
                   gen: np.random.Generator | None = None) -> list[MixedConditioning]:
    """Generate ``config.N_y`` mixed conditionings from one class's embeddings.

    Donors are drawn from the pool excluding the base's original index, which
    stays fixed for all ``P + Q`` passes of an output.
    """
    pool = [np.asarray(e) for e in pool]
    if not pool:
        raise InvalidArgumentError("embedding pool is empty")
    k = len(pool)
    if k == 1 and config.P + config.Q > 0:
        raise ConfigError(f"class {class_label!r}: mixing needs at least 2 captions, pool has 1")
    shape = pool[0].shape
    for e in pool:
        if e.shape != shape:
            raise ShapeError(f"pool mixes shapes {shape} and {e.shape}")
    if null_emb.shape != shape:
        raise ShapeError(f"null embedding {null_emb.shape} != pool {shape}")
    m, d = shape
    if gen is None:
        gen = rng_mod.stream(config.seed, "mvc", class_label)

    out = []
    for _ in range(config.N_y):
        base = int(gen.integers(0, k))
        cur = pool[base].copy()
        prov = []
        for _ in range(config.P):
            donor = draw_donor(gen, k, base)
            r, s = sample_index_pair(gen, m)
            cur = coarse_mix(cur, pool[donor], r, s)
            prov.append((donor, COARSE, (r, s)))
        for _ in range(config.Q):
            donor = draw_donor(gen, k, base)
            u, v = sample_index_pair(gen, d)
            row = int(gen.integers(0, m)) + 1
            cur = fine_mix(cur, pool[donor], row, u, v)
            prov.append((donor, FINE, (row, u, v)))
        out.append(MixedConditioning(cur, null_emb.copy(), class_label, base, prov))
    return out


def replay_provenance(pool, null_emb, prov: dict) -> MixedConditioning:
    """Rebuild a conditioning from its stored provenance record."""
    pool = [np.asarray(e) for e in pool]
    cur = pool[prov["base"]].copy()
    edits = []
    for ed in prov["edits"]:
        rng_ = tuple(int(x) for x in ed["range"])
        if ed["kind"] == COARSE:
            cur = coarse_mix(cur, pool[ed["donor"]], *rng_)
        elif ed["kind"] == FINE:
            cur = fine_mix(cur, pool[ed["donor"]], *rng_)
        else:
            raise ParseError(f"unknown edit kind {ed['kind']!r}")
        edits.append((int(ed["donor"]), ed["kind"], rng_))
    return MixedConditioning(cur, np.asarray(null_emb).copy(), prov["class_label"], int(prov["base"]), edits)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".provenance.json")


def save_conditionings(path, conds: list[MixedConditioning]) -> None:
    """Archive the mixed matrices; provenance goes to ``<path>.provenance.json``.

    The null embedding is stored once, as the archive's last entry under the
    label ``"__null__"``.
    """
    if not conds:
        raise InvalidArgumentError("no conditionings to save")
    entries = [(c.class_label, c.e_cond) for c in conds] + [("__null__", conds[0].e_null)]
    export_embeddings(path, entries, extra={"kind": "mixed_conditionings"})
    try:
        sidecar_path(path).write_text(json.dumps([c.provenance_json() for c in conds], indent=1))
    except OSError as exc:
        raise StorageError(f"cannot write provenance sidecar: {exc}") from exc


def load_conditionings(path, m: int, d: int) -> list[MixedConditioning]:
    entries = import_embeddings(path, m, d)
    if not entries or entries[-1][0] != "__null__":
        raise ParseError(f"{path}: missing null embedding entry")
    null = entries[-1][1]
    try:
        provs = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad provenance sidecar: {exc}") from exc
    if len(provs) != len(entries) - 1:
        raise ParseError(f"{path}: {len(entries) - 1} matrices but {len(provs)} provenance records")
    out = []
    for (label, e), p in zip(entries[:-1], provs):
        edits = [(int(x["donor"]), x["kind"], tuple(x["range"])) for x in p["edits"]]
        out.append(MixedConditioning(e, null.copy(), label, int(p["base"]), edits))
    return out
