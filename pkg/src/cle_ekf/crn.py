"""Chemical reaction networks with product-of-affine-factor propensities.

A reaction's propensity is ``coefficient * prod(factor values)`` where each
factor is either a species value ``x_i`` or a conserved-total complement
``total - x_i``. That covers mass action plus the bound/free bookkeeping of
simple gene-expression models, and keeps every Jacobian exact.

All state-taking functions broadcast over leading axes: ``x`` may have
shape ``(n,)`` or ``(..., n)``.

Propensities are clamped at zero before use (the diffusion needs
``sqrt(a_j)``). States themselves are never clamped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._linalg import matvec
from .errors import ConfigError


@dataclass(frozen=True)
class SpeciesValue:
    index: int

    def evaluate(self, x):
        return x[..., self.index]


@dataclass(frozen=True)
class Complement:
    total: float
    index: int

    def __post_init__(self):
        if self.total < 0:
            raise ConfigError(f"complement total must be >= 0, got {self.total}")

    def evaluate(self, x):
        return self.total - x[..., self.index]


Factor = SpeciesValue | Complement


@dataclass(frozen=True)
class Reaction:
    coefficient: float
    factors: tuple[Factor, ...] = ()
    name: str | None = None

    def __post_init__(self):
        if not self.coefficient >= 0:
            raise ConfigError(f"reaction coefficient must be >= 0, got {self.coefficient}")
        object.__setattr__(self, "factors", tuple(self.factors))


@dataclass(frozen=True, eq=False)
class CRN:
    """Species, reactions and the n x m stoichiometric matrix ``V``."""

    species: tuple[str, ...]
    reactions: tuple[Reaction, ...]
    V: np.ndarray
    # packed factor tables, filled in __post_init__
    _coef: np.ndarray = field(init=False, repr=False)
    _idx: np.ndarray = field(init=False, repr=False)
    _scale: np.ndarray = field(init=False, repr=False)
    _offset: np.ndarray = field(init=False, repr=False)
    _onehot: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        species = tuple(self.species)
        reactions = tuple(self.reactions)
        V = np.array(self.V, dtype=float, copy=True)
        if V.ndim == 1:
            V = V.reshape(len(species), -1)
        n, m = len(species), len(reactions)
        if len(set(species)) != n:
            raise ConfigError(f"duplicate species names in {species}")
        if V.shape != (n, m):
            raise ConfigError(f"stoichiometric matrix has shape {V.shape}, expected {(n, m)}")
        if not np.all(V == np.round(V)):
            raise ConfigError("stoichiometric matrix must be integer valued")
        for j in range(m):
            if not np.any(V[:, j]):
                raise ConfigError(f"reaction {j} has an all-zero stoichiometric column")
            for f in reactions[j].factors:
                if not 0 <= f.index < n:
                    raise ConfigError(f"reaction {j} references species index {f.index} outside 0..{n - 1}")
        V.setflags(write=False)

        width = max([len(r.factors) for r in reactions] + [1])
        idx = np.zeros((m, width), dtype=np.intp)
        scale = np.zeros((m, width))
        offset = np.ones((m, width))  # padding slots evaluate to 1
        for j, r in enumerate(reactions):
            for s, f in enumerate(r.factors):
                idx[j, s] = f.index
                if isinstance(f, Complement):
                    scale[j, s], offset[j, s] = -1.0, f.total
                else:
                    scale[j, s], offset[j, s] = 1.0, 0.0
        coef = np.array([r.coefficient for r in reactions], dtype=float)
        # onehot[s, j, i] = d(factor s of reaction j) / d x_i
        onehot = np.zeros((width, m, n))
        for s in range(width):
            onehot[s, np.arange(m), idx[:, s]] = scale[:, s]
        for name, arr in (("species", species), ("reactions", reactions), ("V", V), ("_coef", coef),
                          ("_idx", idx), ("_scale", scale), ("_offset", offset), ("_onehot", onehot)):
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.species)

    @property
    def m(self) -> int:
        return len(self.reactions)

    def species_index(self, name: str) -> int:
        try:
            return self.species.index(name)
        except ValueError:
            raise ConfigError(f"unknown species {name!r}") from None

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.n:
            raise ConfigError(f"state has shape {x.shape}, expected trailing dimension {self.n}")
        return x

    def _factor_values(self, x):
        # (..., m, width)
        return self._offset + self._scale * x[..., self._idx]

    def raw_propensities(self, x) -> np.ndarray:
        """Unclamped propensities; may be negative when a complement overshoots."""
        x = self._check(x)
        return self._coef * np.prod(self._factor_values(x), axis=-1)


def build_crn(species: Sequence[str], reactions: Iterable[tuple[Reaction, dict[str, int]]]) -> CRN:
    """Assemble a CRN from ``(reaction, {species: change})`` pairs, one V column each."""
    species = tuple(species)
    pos = {s: i for i, s in enumerate(species)}
    reactions = list(reactions)
    V = np.zeros((len(species), len(reactions)))
    for j, (_, change) in enumerate(reactions):
        for name, nu in change.items():
            if name not in pos:
                raise ConfigError(f"stoichiometry of reaction {j} names unknown species {name!r}")
            V[pos[name], j] = nu
    return CRN(species, tuple(r for r, _ in reactions), V)


def propensities(crn: CRN, x) -> np.ndarray:
    """Propensity vector ``A(x)`` with every entry clamped at zero."""
    return np.maximum(crn.raw_propensities(x), 0.0)


def propensity_jacobian(crn: CRN, x) -> np.ndarray:
    """``d a_j / d x_i`` as an ``(..., m, n)`` array.

    Product rule over the affine factors. Rows whose raw propensity is
    negative (clamped to zero) are zeroed, the sub-gradient of the clamp.
    """
    x = crn._check(x)
    vals = crn._factor_values(x)
    width = vals.shape[-1]
    J = 0.0
    for s in range(width):
        others = crn._coef
        for t in range(width):
            if t != s:
                others = others * vals[..., t]
        J = J + others[..., None] * crn._onehot[s]
    raw = crn._coef * np.prod(vals, axis=-1)
    return np.where((raw < 0)[..., None], 0.0, J)


def _check_delta(delta: float) -> float:
    if not delta > 0:
        raise ConfigError(f"time step must be positive, got {delta}", field="delta")
    return float(delta)


def drift(crn: CRN, x, delta: float) -> np.ndarray:
    """Deterministic part of one CLE step, ``x + delta * V @ A(x)``."""
    delta = _check_delta(delta)
    x = crn._check(x)
    return x + matvec(crn.V, delta * propensities(crn, x))


def diffusion(crn: CRN, x, delta: float) -> np.ndarray:
    """Noise gain ``G = sqrt(delta) * V @ diag(sqrt(A(x)))``, shape ``(..., n, m)``."""
    delta = _check_delta(delta)
    root = np.sqrt(propensities(crn, x))
    return np.sqrt(delta) * crn.V * root[..., None, :]


def spectral_norm(M) -> float:
    """Largest singular value, from the symmetric eigensolve of ``M @ M.T``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    gram = M @ M.T if M.shape[0] <= M.shape[1] else M.T @ M
    lam = np.linalg.eigvalsh(0.5 * (gram + gram.T))[-1]
    return float(np.sqrt(max(lam, 0.0)))


# -- model files -------------------------------------------------------------

def crn_from_dict(doc: dict) -> CRN:
    try:
        species = [str(s) for s in doc["species"]]
        raw_reactions = doc["reactions"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"model is missing required key {exc}", field=str(exc).strip("'")) from None
    pos = {s: i for i, s in enumerate(species)}

    def lookup(name, j):
        if name not in pos:
            raise ConfigError(f"reaction {j} references undeclared species {name!r}", field="reactions")
        return pos[name]

    pairs = []
    for j, r in enumerate(raw_reactions):
        if "coefficient" not in r:
            raise ConfigError(f"reaction {j} has no coefficient", field="coefficient")
        if not r.get("stoichiometry"):
            raise ConfigError(f"reaction {j} has no stoichiometry", field="stoichiometry")
        factors = []
        for f in r.get("factors", []):
            if "species" in f:
                factors.append(SpeciesValue(lookup(f["species"], j)))
            elif "complement" in f:
                c = f["complement"]
                factors.append(Complement(float(c["total"]), lookup(c["species"], j)))
            else:
                raise ConfigError(f"reaction {j} has an unrecognised factor {f!r}", field="factors")
        change = {k: int(v) for k, v in r["stoichiometry"].items()}
        pairs.append((Reaction(float(r["coefficient"]), tuple(factors), r.get("name")), change))
    return build_crn(species, pairs)


def crn_to_dict(crn: CRN) -> dict:
    reactions = []
    for j, r in enumerate(crn.reactions):
        factors = []
        for f in r.factors:
            if isinstance(f, Complement):
                factors.append({"complement": {"total": f.total, "species": crn.species[f.index]}})
            else:
                factors.append({"species": crn.species[f.index]})
        entry = {"coefficient": r.coefficient, "factors": factors,
                 "stoichiometry": {crn.species[i]: int(crn.V[i, j]) for i in range(crn.n) if crn.V[i, j]}}
        if r.name:
            entry = {"name": r.name, **entry}
        reactions.append(entry)
    return {"species": list(crn.species), "reactions": reactions}


def load_model(path: str | Path) -> CRN:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return crn_from_dict(doc)
