"""Markov models of voltage-gated ionic currents.

A model is a linear ODE system dx/dt = A(V) x over state occupancies, where
every entry of A is either a constant rate or a rate of the form
``a * exp(sign * b * V)``.  The observed quantity is the current through the
conducting state, ``g * x[open] * (V - E_rev)``.

Units are fixed package-wide: time in ms, voltage in mV, conductance in uS,
current in nA, concentrations in mM.  Rate prefactors are ms^-1 and exponent
coefficients mV^-1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import constants as _const

from .errors import DegenerateModelError, NumericalFailureError, ParameterArityError

GAS_CONSTANT = _const.R  # J K^-1 mol^-1
FARADAY = _const.physical_constants["Faraday constant"][0]  # C mol^-1

RATE_KINDS = ("constant", "exponential")


@dataclass(frozen=True)
class RateExpr:
    """One transition rate, ``a * exp(sign * b * V)`` or a constant ``a``.

    The prefactor ``a`` and exponent coefficient ``b`` each refer either to an
    entry of the kinetic parameter vector (``*_index``) or to a fixed literal
    (``*_value``).  Exactly one of the two must be given for the prefactor;
    constant rates carry no exponent.
    """

    kind: str
    prefactor_index: int | None = None
    prefactor_value: float | None = None
    exponent_index: int | None = None
    exponent_value: float | None = None
    sign: int = 1

    def __post_init__(self):
        if self.kind not in RATE_KINDS:
            raise ValueError(f"unknown rate kind {self.kind!r}")
        if (self.prefactor_index is None) == (self.prefactor_value is None):
            raise ValueError("exactly one of prefactor_index/prefactor_value required")
        has_exp = (self.exponent_index is not None) or (self.exponent_value is not None)
        if self.kind == "constant" and has_exp:
            raise ValueError("constant rates take no exponent coefficient")
        if self.kind == "exponential":
            if (self.exponent_index is None) == (self.exponent_value is None):
                raise ValueError("exactly one of exponent_index/exponent_value required")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")
        if self.prefactor_value is not None and self.prefactor_value <= 0:
            raise ValueError("rate prefactor must be strictly positive")

    def prefactor(self, kinetic: np.ndarray) -> float:
        if self.prefactor_index is not None:
            return float(kinetic[self.prefactor_index])
        return float(self.prefactor_value)

    def exponent(self, kinetic: np.ndarray) -> float:
        if self.kind == "constant":
            return 0.0
        if self.exponent_index is not None:
            return float(kinetic[self.exponent_index])
        return float(self.exponent_value)

    def evaluate(self, kinetic: np.ndarray, voltage):
        """Rate k(V); ``voltage`` may be a scalar or an array."""
        a = self.prefactor(kinetic)
        b = self.exponent(kinetic)
        return a * np.exp(self.sign * b * np.asarray(voltage, dtype=float))


@dataclass(frozen=True)
class MarkovModel:
    """A named Markov state model with voltage-dependent transition rates."""

    name: str
    state_labels: tuple[str, ...]
    transitions: tuple[tuple[int, int, RateExpr], ...]
    conducting_state: int
    n_kinetic_params: int
    conserves_total: bool = True

    def __post_init__(self):
        object.__setattr__(self, "state_labels", tuple(self.state_labels))
        object.__setattr__(
            self, "transitions", tuple((f, t, r) for f, t, r in self.transitions)
        )
        n = self.n_states
        if n < 2:
            raise ValueError("a Markov model needs at least two states")
        if not 0 <= self.conducting_state < n:
            raise ValueError("conducting_state out of range")
        for frm, to, rate in self.transitions:
            if not (0 <= frm < n and 0 <= to < n):
                raise ValueError(f"transition ({frm}->{to}) references unknown state")
            if frm == to:
                raise ValueError("self-transitions are not allowed")
            for idx in (rate.prefactor_index, rate.exponent_index):
                if idx is not None and not 0 <= idx < self.n_kinetic_params:
                    raise ValueError(f"rate parameter index {idx} out of range")

    @property
    def n_states(self) -> int:
        return len(self.state_labels)

    @cached_property
    def _assembly(self):
        """Index arrays for vectorised matrix assembly."""
        frm = np.array([t[0] for t in self.transitions], dtype=np.intp)
        to = np.array([t[1] for t in self.transitions], dtype=np.intp)
        sign = np.array([t[2].sign for t in self.transitions], dtype=float)
        a_idx = np.array(
            [-1 if t[2].prefactor_index is None else t[2].prefactor_index
             for t in self.transitions], dtype=np.intp)
        a_lit = np.array(
            [0.0 if t[2].prefactor_value is None else t[2].prefactor_value
             for t in self.transitions])
        b_idx = np.array(
            [-1 if t[2].exponent_index is None else t[2].exponent_index
             for t in self.transitions], dtype=np.intp)
        b_lit = np.array(
            [t[2].exponent_value if t[2].exponent_value is not None else 0.0
             for t in self.transitions])
        is_exp = np.array([t[2].kind == "exponential" for t in self.transitions])
        a_sel = a_idx >= 0
        b_sel = b_idx >= 0
        return (frm, to, sign, a_sel, a_idx[a_sel], a_lit, b_sel, b_idx[b_sel],
                b_lit, is_exp)

    def rate_coefficients(self, kinetic: np.ndarray):
        """Per-transition (a, signed_b) with b = 0 for constant rates."""
        (_, _, sign, a_sel, a_pos, a_lit, b_sel, b_pos, b_lit,
         is_exp) = self._assembly
        kinetic = np.asarray(kinetic, dtype=float)
        a = a_lit.copy()
        a[a_sel] = kinetic[a_pos]
        b = b_lit.copy()
        b[b_sel] = kinetic[b_pos]
        return a, np.where(is_exp, sign * b, 0.0)

    def rates_at(self, kinetic: np.ndarray, voltages) -> np.ndarray:
        """Transition rates, shape ``voltages.shape + (n_transitions,)``."""
        a, sb = self.rate_coefficients(kinetic)
        v = np.asarray(voltages, dtype=float)
        return a * np.exp(np.multiply.outer(v, sb))

    def assemble(self, kinetic: np.ndarray, voltages) -> np.ndarray:
        """Rate matrices A(V), shape ``voltages.shape + (N, N)``.

        Entry (i, j), i != j, is the total rate from state j to state i; the
        diagonal holds the negated column sums, so columns sum to zero.
        """
        frm, to = self._assembly[0], self._assembly[1]
        v = np.atleast_1d(np.asarray(voltages, dtype=float))
        k = self.rates_at(kinetic, v)  # (K, T)
        n = self.n_states
        A = np.zeros(v.shape + (n, n))
        for t in range(len(self.transitions)):
            A[..., to[t], frm[t]] += k[..., t]
            A[..., frm[t], frm[t]] -= k[..., t]
        if np.isscalar(voltages) or np.ndim(voltages) == 0:
            return A[0]
        return A


@dataclass(frozen=True)
class ParameterSet:
    """Kinetic parameters plus the maximal conductance ``g`` (uS)."""

    kinetic: tuple[float, ...]
    conductance: float

    def __post_init__(self):
        object.__setattr__(self, "kinetic", tuple(float(v) for v in self.kinetic))
        object.__setattr__(self, "conductance", float(self.conductance))
        if any(not (v > 0) for v in self.kinetic) or not self.conductance > 0:
            raise ValueError("all parameters must be strictly positive and finite")

    @cached_property
    def kinetic_array(self) -> np.ndarray:
        return np.array(self.kinetic, dtype=float)

    def full_vector(self) -> np.ndarray:
        """Kinetic parameters with the conductance appended last."""
        return np.append(self.kinetic_array, self.conductance)

    @classmethod
    def from_full_vector(cls, values) -> "ParameterSet":
        values = np.asarray(values, dtype=float)
        return cls(kinetic=tuple(values[:-1]), conductance=float(values[-1]))


@dataclass(frozen=True)
class NernstInputs:
    """Inputs to the reversal-potential calculation."""

    gas_constant: float = GAS_CONSTANT  # J K^-1 mol^-1
    faraday: float = FARADAY  # C mol^-1
    temperature: float = 293.0  # K
    k_in: float = 120.0  # mM
    k_out: float = 5.0  # mM

    def __post_init__(self):
        for name in ("gas_constant", "faraday", "temperature", "k_in", "k_out"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def nernst_potential(inputs: NernstInputs = NernstInputs()) -> float:
    """Reversal potential (RT/F) ln(k_out / k_in), in mV."""
    rt_over_f = inputs.gas_constant * inputs.temperature / inputs.faraday  # volts
    return 1000.0 * rt_over_f * math.log(inputs.k_out / inputs.k_in)


def _check_arity(model: MarkovModel, params: ParameterSet):
    if len(params.kinetic) != model.n_kinetic_params:
        raise ParameterArityError(
            f"model {model.name!r} takes {model.n_kinetic_params} kinetic "
            f"parameters, got {len(params.kinetic)}"
        )


def assemble_matrix(model: MarkovModel, params: ParameterSet, voltage: float) -> np.ndarray:
    """Rate matrix A(V; theta), shape (N, N), columns summing to zero."""
    _check_arity(model, params)
    return model.assemble(params.kinetic_array, float(voltage))


def steady_state(model: MarkovModel, params: ParameterSet, voltage: float) -> np.ndarray:
    """Equilibrium occupancy at a fixed voltage.

    Solves A x = 0 subject to sum(x) = 1 by replacing one balance row with the
    conservation constraint; one step of iterative refinement keeps the
    residual near machine precision even for strongly graded rates.
    """
    A = assemble_matrix(model, params, voltage)
    n = model.n_states
    M = A.copy()
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        x = np.linalg.solve(M, rhs)
        x = x + np.linalg.solve(M, rhs - M @ x)
    except np.linalg.LinAlgError as exc:
        raise DegenerateModelError(
            f"steady state of {model.name!r} at {voltage} mV is not unique"
        ) from exc
    if not np.all(np.isfinite(x)) or np.max(np.abs(A @ x)) > 1e-8 * max(1.0, np.abs(A).max()):
        raise DegenerateModelError(
            f"steady state of {model.name!r} at {voltage} mV is not unique "
            "(rate matrix has a degenerate nullspace)"
        )
    if np.min(x) < -1e-12:
        raise NumericalFailureError(
            f"steady state has a negative component ({np.min(x):.3e}) at {voltage} mV"
        )
    return np.clip(x, 0.0, 1.0)


def observe_current(model: MarkovModel, params: ParameterSet, occupancy,
                    voltage, e_rev: float):
    """Current g * x[open] * (V - E_rev) in nA.

    ``occupancy`` may be a single state vector or an array of them (last axis
    indexes states); ``voltage`` broadcasts against the leading axes.
    """
    _check_arity(model, params)
    occupancy = np.asarray(occupancy, dtype=float)
    open_frac = occupancy[..., model.conducting_state]
    return params.conductance * open_frac * (np.asarray(voltage, dtype=float) - e_rev)


# ---------------------------------------------------------------------------
# Built-in model definitions
# ---------------------------------------------------------------------------

def _exp_rate(a_idx: int, b_idx: int, sign: int) -> RateExpr:
    return RateExpr(kind="exponential", prefactor_index=a_idx,
                    exponent_index=b_idx, sign=sign)


def _const_rate(a_idx: int) -> RateExpr:
    return RateExpr(kind="constant", prefactor_index=a_idx)


# Four-state model: x = [C, I, IC, O]; rates k1..k4 tied across parallel edges.
BEATTIE_MODEL = MarkovModel(
    name="beattie",
    state_labels=("C", "I", "IC", "O"),
    transitions=(
        (0, 3, _exp_rate(0, 1, +1)),  # C  -> O   k1
        (3, 0, _exp_rate(2, 3, -1)),  # O  -> C   k2
        (0, 2, _exp_rate(4, 5, +1)),  # C  -> IC  k3
        (2, 0, _exp_rate(6, 7, -1)),  # IC -> C   k4
        (2, 1, _exp_rate(0, 1, +1)),  # IC -> I   k1
        (1, 2, _exp_rate(2, 3, -1)),  # I  -> IC  k2
        (3, 1, _exp_rate(4, 5, +1)),  # O  -> I   k3
        (1, 3, _exp_rate(6, 7, -1)),  # I  -> O   k4
    ),
    conducting_state=3,
    n_kinetic_params=8,
)

BEATTIE_DEFAULTS = ParameterSet(
    kinetic=(2.26e-4, 6.99e-2, 3.45e-5, 5.46e-2, 8.73e-2, 8.91e-3, 5.15e-3, 3.16e-2),
    conductance=1.52e-1,
)

# Five-state model: x = [O, C1, C2, C3, I]; C2<->C3 rates are voltage-independent.
WANG_MODEL = MarkovModel(
    name="wang",
    state_labels=("O", "C1", "C2", "C3", "I"),
    transitions=(
        (1, 2, _exp_rate(2, 3, +1)),   # C1 -> C2  q3 e^{+q4 V}
        (2, 1, _exp_rate(10, 11, -1)),  # C2 -> C1  q11 e^{-q12 V}
        (2, 3, _const_rate(12)),        # C2 -> C3  kf
        (3, 2, _const_rate(13)),        # C3 -> C2  kb
        (3, 0, _exp_rate(4, 5, +1)),    # C3 -> O   q5 e^{+q6 V}
        (0, 3, _exp_rate(6, 7, -1)),    # O  -> C3  q7 e^{-q8 V}
        (0, 4, _exp_rate(0, 1, +1)),    # O  -> I   q1 e^{+q2 V}
        (4, 0, _exp_rate(8, 9, -1)),    # I  -> O   q9 e^{-q10 V}
    ),
    conducting_state=0,
    n_kinetic_params=14,
)

WANG_DEFAULTS = ParameterSet(
    kinetic=(2.23e-2, 1.18e-2, 4.70e-2, 6.31e-2, 1.37e-2, 3.82e-3, 6.89e-5,
             3.16e-2, 4.18e-2, 9.08e-2, 2.34e-2, 6.50e-3, 2.38e-2, 3.68e-2),
    conductance=1.52e-1,
)

_BUILTINS = {
    "beattie": (BEATTIE_MODEL, BEATTIE_DEFAULTS),
    "wang": (WANG_MODEL, WANG_DEFAULTS),
}


def builtin_model(name: str) -> tuple[MarkovModel, ParameterSet]:
    """Return a built-in model and its default parameter set by name."""
    try:
        return _BUILTINS[name.lower()]
    except KeyError:
        raise LookupError(
            f"unknown model {name!r}; available: {sorted(_BUILTINS)}"
        ) from None


# ---------------------------------------------------------------------------
# Model and parameter file formats
# ---------------------------------------------------------------------------

def model_to_dict(model: MarkovModel) -> dict:
    transitions = []
    for frm, to, rate in model.transitions:
        entry = {"from": frm, "to": to, "kind": rate.kind, "sign": rate.sign}
        if rate.prefactor_index is not None:
            entry["prefactor_index"] = rate.prefactor_index
        else:
            entry["prefactor_value"] = rate.prefactor_value
        if rate.kind == "exponential":
            if rate.exponent_index is not None:
                entry["exponent_index"] = rate.exponent_index
            else:
                entry["exponent_value"] = rate.exponent_value
        transitions.append(entry)
    return {
        "name": model.name,
        "states": list(model.state_labels),
        "conducting": model.conducting_state,
        "transitions": transitions,
        "n_kinetic_params": model.n_kinetic_params,
    }


def model_from_dict(data: dict) -> MarkovModel:
    try:
        transitions = tuple(
            (
                int(t["from"]),
                int(t["to"]),
                RateExpr(
                    kind=t["kind"],
                    prefactor_index=t.get("prefactor_index"),
                    prefactor_value=t.get("prefactor_value"),
                    exponent_index=t.get("exponent_index"),
                    exponent_value=t.get("exponent_value"),
                    sign=int(t.get("sign", 1)),
                ),
            )
            for t in data["transitions"]
        )
        return MarkovModel(
            name=str(data["name"]),
            state_labels=tuple(str(s) for s in data["states"]),
            transitions=transitions,
            conducting_state=int(data["conducting"]),
            n_kinetic_params=int(data["n_kinetic_params"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model definition: {exc}") from exc


def load_model(path) -> MarkovModel:
    """Read a model definition from a JSON file."""
    return model_from_dict(json.loads(Path(path).read_text()))


def save_model(model: MarkovModel, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_params(path) -> ParameterSet:
    """Read a flat JSON array of kinetic parameters with g last."""
    values = json.loads(Path(path).read_text())
    if not isinstance(values, list) or len(values) < 2:
        raise ValueError("parameter file must hold a flat array [kinetics..., g]")
    return ParameterSet.from_full_vector(values)


def save_params(params: ParameterSet, path):
    Path(path).write_text(json.dumps(list(params.full_vector())) + "\n")


def resolve_model(spec: str) -> tuple[MarkovModel, ParameterSet | None]:
    """Resolve a builtin name or a model-definition file path.

    File-based models carry no default parameters, so the second element is
    None for them.
    """
    if spec.lower() in _BUILTINS:
        return builtin_model(spec)
    path = Path(spec)
    if path.exists():
        return load_model(path), None
    raise LookupError(f"model {spec!r} is neither a builtin nor an existing file")
