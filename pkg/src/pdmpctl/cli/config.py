"""Experiment configuration: JSON blocks validated with pydantic."""

import hashlib
import json
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..mdp import QuadraticCostSpec, Reference, ValueGrid, rule_family
from ..models import (ConstantRateModel, ElementaryModel, HHChR2Model, HHParams,
                      RATE_FLOOR)
from ..pdmp import ConstantStrategy, OpenLoopStrategy, UpsilonPoint


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ------------------------------------------------------------------ model

class HHParamsBlock(Strict):
    g_K: Optional[float] = Field(None, gt=0)
    g_Na: Optional[float] = Field(None, gt=0)
    g_L: Optional[float] = Field(None, gt=0)
    g_ChR2: Optional[float] = Field(None, gt=0)
    V_K: Optional[float] = None
    V_Na: Optional[float] = None
    V_L: Optional[float] = None
    V_ChR2: Optional[float] = None
    rho: Optional[float] = Field(None, gt=0)
    C_m: Optional[float] = Field(None, gt=0)
    eps1: Optional[float] = Field(None, gt=0)
    eps2: Optional[float] = Field(None, gt=0)
    e12: Optional[float] = Field(None, gt=0)
    e21: Optional[float] = Field(None, gt=0)
    K_d1: Optional[float] = Field(None, gt=0)
    K_d2: Optional[float] = Field(None, gt=0)
    K_r: Optional[float] = Field(None, gt=0)
    K_d: Optional[float] = Field(None, gt=0)
    u_max: Optional[float] = Field(None, gt=0)


class HHModelBlock(Strict):
    model: Literal["hh-chr2"]
    N: int = Field(10, ge=2, le=1000)
    K: int = Field(64, ge=1, le=4096)
    params: HHParamsBlock = HHParamsBlock()
    chr2_variant: Literal["four-state", "three-state"] = "four-state"
    site_map: Optional[List[Literal["Na", "K", "ChR2"]]] = None
    h_transitions: bool = True
    rate_floor: float = Field(RATE_FLOOR, gt=0)

    @model_validator(mode="after")
    def _sites(self):
        if self.site_map is not None and len(self.site_map) != self.N - 1:
            raise ValueError(f"site_map needs N-1 = {self.N - 1} entries")
        return self

    def build(self):
        user = {k: v for k, v in self.params.model_dump().items() if v is not None}
        return HHChR2Model(self.N, self.K, HHParams(**user), self.chr2_variant,
                           self.site_map, self.h_transitions, self.rate_floor)

    def provenance(self):
        user = self.params.model_dump(exclude_unset=True)
        flags = {k: ("user" if k in user else "configuration-default")
                 for k in HHParams.__dataclass_fields__}
        for k in ("N", "K", "chr2_variant", "site_map", "h_transitions", "rate_floor"):
            flags[k] = "user" if k in self.model_fields_set else "configuration-default"
        flags["gating_rate_functions"] = "model-definition"
        flags["chr2_transition_structure"] = "model-definition"
        return flags


class ElementaryModelBlock(Strict):
    model: Literal["elementary"]
    K: int = Field(1, ge=1, le=64)
    u_max: float = Field(1.0, ge=0)

    def build(self):
        return ElementaryModel(self.K, self.u_max)

    def provenance(self):
        flags = {k: "user" if k in self.model_fields_set else "configuration-default"
                 for k in ("K", "u_max")}
        flags.update({k: "model-definition" for k in ("flow", "jump_rates", "transition")})
        return flags


class ConstantRateModelBlock(Strict):
    model: Literal["constant-rate"]
    rate: float = Field(1.0, gt=0)
    K: int = Field(1, ge=1, le=64)
    u_max: float = Field(1.0, ge=0)

    def build(self):
        return ConstantRateModel(self.rate, self.K, self.u_max)

    def provenance(self):
        return {k: "user" if k in self.model_fields_set else "configuration-default"
                for k in ("rate", "K", "u_max")}


ModelBlock = Annotated[Union[HHModelBlock, ElementaryModelBlock, ConstantRateModelBlock],
                       Field(discriminator="model")]


# ------------------------------------------------------------------- cost

class ConstantReference(Strict):
    type: Literal["constant"]
    coeffs: List[float] = Field(min_length=1)


class CsvReference(Strict):
    type: Literal["csv"]
    path: str


class CostBlock(Strict):
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    f: float = 0.0
    h: float = 0.0
    i: float = 0.0
    j: float = 0.0
    kappa: float = Field(0.0, ge=0)
    kappa_T: float = Field(0.0, ge=0)
    norm: Literal["H", "V"] = "H"
    reference: Optional[Annotated[Union[ConstantReference, CsvReference],
                                  Field(discriminator="type")]] = None

    def build(self, K, s_max, base):
        ref = None
        if isinstance(self.reference, ConstantReference):
            ref = Reference(_pad(self.reference.coeffs, K))
        elif isinstance(self.reference, CsvReference):
            r = Reference.from_csv(base / self.reference.path)
            ref = Reference(np.stack([_pad(row, K) for row in r.coeffs]), r.times)
        vals = self.model_dump(exclude={"reference"})
        return QuadraticCostSpec(**vals, reference=ref, s_max=s_max)


def _pad(coeffs, K):
    c = np.zeros(K)
    c[: min(K, len(coeffs))] = np.asarray(coeffs, dtype=float)[:K]
    return c


# ----------------------------------------------------------------- solver

class SolverBlock(Strict):
    M2: float = Field(1.0, gt=0)
    coeff_bound: Optional[float] = Field(None, gt=0)
    n_coeff: int = Field(21, ge=2, le=401)
    n_h: int = Field(11, ge=2, le=401)
    atoms: List[float] = Field([-1.0, 0.0, 1.0], min_length=1, max_length=5)
    n_t: List[Literal[1, 2, 3]] = Field([1], min_length=1)
    lattice: int = Field(4, ge=1, le=12)
    tol: float = Field(1e-6, gt=0)
    dt: Optional[float] = Field(None, gt=0)
    max_iter: int = Field(10_000, ge=1)
    zeta: Optional[float] = Field(None, ge=0)

    def grid(self, model, T):
        bound = self.coeff_bound or self.M2
        return ValueGrid.uniform(model.K, bound, self.n_coeff, model.discrete_states, T, self.n_h)

    def family(self):
        return rule_family(self.atoms, tuple(self.n_t), self.lattice)


# -------------------------------------------------------------------- run

class ConstantStrategyBlock(Strict):
    type: Literal["constant"]
    u: float = 0.0


class RelaxedStrategyBlock(Strict):
    type: Literal["relaxed"]
    atoms: List[float] = Field(min_length=1, max_length=5)
    weights: List[float] = Field(min_length=1, max_length=5)

    @model_validator(mode="after")
    def _weights(self):
        if len(self.atoms) != len(self.weights):
            raise ValueError("atoms and weights need the same length")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        return self


class TableStrategyBlock(Strict):
    type: Literal["table"]
    path: str


class PolicyStrategyBlock(Strict):
    type: Literal["policy"]
    path: str
    barycentric: bool = False


StrategyBlock = Annotated[Union[ConstantStrategyBlock, RelaxedStrategyBlock,
                                TableStrategyBlock, PolicyStrategyBlock],
                          Field(discriminator="type")]


class InitialBlock(Strict):
    coeffs: Optional[List[float]] = None
    d: Optional[Union[int, List[str]]] = None


class RunBlock(Strict):
    T: float = Field(1.0, gt=0, le=1e4)
    seed: int = Field(0, ge=0)
    n_traj: int = Field(100, ge=2, le=10_000_000)
    dt: Optional[float] = Field(None, gt=0)
    out: str = "out"
    initial: InitialBlock = InitialBlock()
    strategy: StrategyBlock = ConstantStrategyBlock(type="constant", u=0.0)
    n_dense: int = Field(1, ge=0)
    n_path_files: int = Field(100, ge=0)
    chunk_size: int = Field(2000, ge=1)


class ExperimentConfig(Strict):
    model: ModelBlock
    cost: CostBlock = CostBlock()
    solver: SolverBlock = SolverBlock()
    run: RunBlock = RunBlock()

    # file checks happen in load_config, relative to the config location
    def referenced_files(self):
        files = []
        if isinstance(self.cost.reference, CsvReference):
            files.append(("cost.reference.path", self.cost.reference.path))
        if isinstance(self.run.strategy, (TableStrategyBlock, PolicyStrategyBlock)):
            files.append(("run.strategy.path", self.run.strategy.path))
        return files


# ---------------------------------------------------------------- loading

def _line_of(text, loc):
    """Best-effort line number of the JSON key addressed by a pydantic loc."""
    pos, line = 0, None
    for part in loc:
        if isinstance(part, int):
            continue
        k = text.find(f'"{part}"', pos)
        if k < 0:
            break
        pos = k + 1
        line = text.count("\n", 0, k) + 1
    return line


def parse_config(text, base=Path("."), source="<config>"):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from None
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            path = ".".join(str(p) for p in err["loc"])
            line = _line_of(text, err["loc"])
            where = f" (line {line})" if line else ""
            msgs.append(f"{source}: field {path}{where}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None
    for field_path, rel in cfg.referenced_files():
        if not (base / rel).is_file():
            raise ConfigError(f"{source}: field {field_path}: file {rel!r} does not exist")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent, str(path))


def config_hash(cfg):
    """Short digest of the experiment; the output location does not enter."""
    data = cfg.model_dump(mode="json")
    data["run"].pop("out", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------- builders

def build_model(cfg):
    try:
        return cfg.model.build()
    except ValueError as exc:
        raise ConfigError(f"field model: {exc}") from None


def build_cost(cfg, model, base=Path(".")):
    s_max = max(abs(model.u_min), abs(model.u_max))
    try:
        return cfg.cost.build(model.K, s_max, base)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"field cost: {exc}") from None


def sim_dt(cfg):
    return cfg.run.dt or 1e-4 * cfg.run.T


def solver_dt(cfg):
    return cfg.solver.dt or cfg.run.T / 100.0


def initial_point(cfg, model):
    init = cfg.run.initial
    if isinstance(model, HHChR2Model):
        coeffs = _pad(init.coeffs or [], model.K)
        if init.d is None:
            d = model.rest_config().states
        elif isinstance(init.d, list):
            try:
                d = model.encode(init.d)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"field run.initial.d: {exc}") from None
        else:
            raise ConfigError("field run.initial.d: HH configurations are lists of state labels")
        return UpsilonPoint(coeffs, d, 0.0)
    coeffs = _pad(init.coeffs if init.coeffs is not None else [0.5], model.K)
    d = init.d if init.d is not None else model.discrete_states[-1]
    if d not in model.discrete_states:
        raise ConfigError(f"field run.initial.d: {d!r} not in {model.discrete_states}")
    return UpsilonPoint(coeffs, d, 0.0)


def read_table_strategy(path, T):
    """CSV with header ``t,u``: piecewise-constant open-loop control."""
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ConfigError(f"{path}: control table needs columns t,u")
    return OpenLoopStrategy(T, data[:, 0], data[:, 1])


def build_strategy(cfg, model, base=Path(".")):
    from ..mdp import PolicyStrategy
    s = cfg.run.strategy
    T = cfg.run.T
    try:
        if isinstance(s, ConstantStrategyBlock):
            model.check_control(s.u)
            return ConstantStrategy(T, s.u)
        if isinstance(s, RelaxedStrategyBlock):
            model.check_control(s.atoms)
            return ConstantStrategy(T, atoms=s.atoms, weights=s.weights)
        if isinstance(s, TableStrategyBlock):
            strat = read_table_strategy(base / s.path, T)
            model.check_control(strat.values)
            return strat
        data = json.loads((base / s.path).read_text())
        pol = PolicyStrategy.from_dict(data["policy"] if "policy" in data else data)
        if abs(pol.T - T) > 1e-12:
            raise ValueError(f"policy horizon {pol.T} differs from run.T = {T}")
        if s.barycentric:
            pol = pol.barycentric((model.u_min, model.u_max))
        return pol
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"field run.strategy: {exc}") from None
