"""Per-device performance and interference estimators.

Each device class gets an estimator bundle exposing five functions:

* compute time: seconds per sample at a batch size under a given node state
* update time: seconds per parameter exchange round (push, server-side
  update, pull), including a linear stand-in for multi-worker contention
* state: projected node state once a training task with batch ``b`` lands
* exec time: runtime of a co-located background task under a node state
* max batch size: largest batch whose projected memory stays under a ceiling

A bundle is backed by either a closed-form parametric profile or by fitted
models produced by the profiler (one per target); fitted entries override
the parametric form per target, so a registry can mix both.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields as dataclass_fields, replace
from pathlib import Path

import numpy as np

from .cluster import NodeState, ParseError, ValidationError, SCHEMA_VERSION

TARGETS = ("compute_time", "update_time", "state_cpu", "state_gpu", "state_mem", "exec_time")

# Feature vectors used when a target is fitted from sweep data.
FEATURES_BY_TARGET = {
    "compute_time": ("cpu_util", "gpu_util", "mem_util", "batch"),
    "update_time": ("cpu_util", "gpu_util", "mem_util", "batch", "ps_cpu_util", "n_workers"),
    "state_cpu": ("cpu_util", "gpu_util", "mem_util", "batch"),
    "state_gpu": ("cpu_util", "gpu_util", "mem_util", "batch"),
    "state_mem": ("cpu_util", "gpu_util", "mem_util", "batch"),
    "exec_time": ("cpu_util", "gpu_util", "mem_util"),
}

_POSITIVE_FLOOR = 1e-9


@dataclass(frozen=True)
class ParametricProfile:
    """Closed-form estimator coefficients for one device class.

    Compute: ``(base_forward + base_backward / b) * (1 + cpu_slope*cpu) * (1 + gpu_slope*gpu)``
    per sample; the backward term amortizes over the batch.

    Update: ``(base_push + base_pull) * (1 + cpu_slope*cpu) * (1 + batch_update_coef/b)
    + ps_update * (1 + ps_cpu_slope*ps_cpu) + contention_slope * (n_workers - 1)``.
    The per-batch factor is >= 1 and decays toward the base cost as b grows.

    State: additive pressures on cpu/gpu, memory footprint linear in b, all
    clamped to 1.

    Background exec: ``bg_base_exec * (1 + sum of slope*util)``.
    """

    base_forward: float
    base_backward: float = 0.0
    cpu_slope: float = 0.0
    gpu_slope: float = 0.0
    base_push: float = 0.0
    base_pull: float = 0.0
    ps_update: float = 0.0
    ps_cpu_slope: float = 0.0
    contention_slope: float = 0.0
    batch_update_coef: float = 0.0
    base_mem_footprint: float = 0.0
    mem_per_batch_unit: float = 0.0
    cpu_pressure: float = 0.0
    gpu_pressure: float = 0.0
    bg_base_exec: float = 0.0
    bg_cpu_slope: float = 0.0
    bg_gpu_slope: float = 0.0
    bg_mem_slope: float = 0.0

    def violations(self) -> list[str]:
        out = []
        if not (math.isfinite(self.base_forward) and self.base_forward > 0):
            out.append(f"profile.base_forward: must be > 0 seconds/sample, got {self.base_forward}")
        non_negative = (
            "base_backward", "cpu_slope", "gpu_slope", "base_push", "base_pull",
            "ps_update", "ps_cpu_slope", "contention_slope", "batch_update_coef",
            "mem_per_batch_unit", "cpu_pressure", "gpu_pressure",
            "bg_base_exec", "bg_cpu_slope", "bg_gpu_slope", "bg_mem_slope",
        )
        for name in non_negative:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                out.append(f"profile.{name}: must be >= 0, got {value}")
        if not (math.isfinite(self.base_mem_footprint) and 0.0 <= self.base_mem_footprint < 1.0):
            out.append(f"profile.base_mem_footprint: must lie in [0, 1), got {self.base_mem_footprint}")
        return out

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclass_fields(self)}


# --- fitted functions --------------------------------------------------------

def basis_terms(feature_names) -> list[tuple[str, tuple[int, ...], bool]]:
    """Fixed nonlinear basis over named features.

    Terms: intercept, each raw feature, each pairwise product, and (when a
    ``batch`` feature is present) every one of those divided by the batch
    size. Returned as (label, feature index tuple, divide_by_batch).
    """
    names = list(feature_names)
    terms: list[tuple[str, tuple[int, ...], bool]] = [("1", (), False)]
    for i, name in enumerate(names):
        terms.append((name, (i,), False))
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            terms.append((f"{names[i]}*{names[j]}", (i, j), False))
    if "batch" in names:
        b = names.index("batch")
        rest = [i for i in range(len(names)) if i != b]
        terms.append(("1/batch", (), True))
        for i in rest:
            terms.append((f"{names[i]}/batch", (i,), True))
        for a in range(len(rest)):
            for c in range(a + 1, len(rest)):
                i, j = rest[a], rest[c]
                terms.append((f"{names[i]}*{names[j]}/batch", (i, j), True))
    return terms


def design_matrix(feature_names, X: np.ndarray) -> np.ndarray:
    """Evaluate the basis on feature rows. X has one column per feature."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(tuple(feature_names)):
        raise ValueError(f"feature matrix must be (n, {len(tuple(feature_names))})")
    names = list(feature_names)
    batch_col = X[:, names.index("batch")] if "batch" in names else None
    cols = []
    for _, idx, recip in basis_terms(names):
        col = np.ones(X.shape[0])
        for i in idx:
            col = col * X[:, i]
        if recip:
            col = col / batch_col
        cols.append(col)
    return np.column_stack(cols)


@dataclass(frozen=True)
class FittedFunction:
    """A linear model over the fixed basis, loadable from a registry block."""

    target: str
    feature_names: tuple[str, ...]
    coefficients: tuple[float, ...]
    train_mape: float | None = None
    test_mape: float | None = None

    def __post_init__(self):
        expected = len(basis_terms(self.feature_names))
        if len(self.coefficients) != expected:
            raise ValidationError(
                f"fitted '{self.target}': expected {expected} coefficients for "
                f"features {list(self.feature_names)}, got {len(self.coefficients)}"
            )

    def term_names(self) -> list[str]:
        return [name for name, _, _ in basis_terms(self.feature_names)]

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        return design_matrix(self.feature_names, X) @ np.asarray(self.coefficients)

    def predict(self, features: dict) -> float:
        try:
            row = [features[name] for name in self.feature_names]
        except KeyError as exc:
            raise ValueError(f"fitted '{self.target}': missing feature {exc}") from None
        return float(self.predict_rows(np.asarray([row], dtype=float))[0])

    def as_block(self) -> dict:
        block = {
            "target": self.target,
            "features": list(self.feature_names),
            "terms": self.term_names(),
            "coefficients": [float(c) for c in self.coefficients],
        }
        if self.train_mape is not None:
            block["train_mape"] = self.train_mape
        if self.test_mape is not None:
            block["test_mape"] = self.test_mape
        return block


def fitted_from_block(block: dict, ctx: str = "fitted block") -> FittedFunction:
    if not isinstance(block, dict):
        raise ValidationError(f"{ctx}: expected an object")
    allowed = {"schema", "device_class", "target", "features", "terms", "coefficients",
               "train_mape", "test_mape", "n_train", "n_test"}
    for key in block:
        if key not in allowed:
            raise ValidationError(f"{ctx}: unknown field '{key}'")
    for key in ("target", "features", "coefficients"):
        if key not in block:
            raise ValidationError(f"{ctx}.{key}: missing")
    if block["target"] not in TARGETS:
        raise ValidationError(f"{ctx}.target: unknown target '{block['target']}'")
    return FittedFunction(
        target=block["target"],
        feature_names=tuple(block["features"]),
        coefficients=tuple(float(c) for c in block["coefficients"]),
        train_mape=block.get("train_mape"),
        test_mape=block.get("test_mape"),
    )


# --- the bundle ---------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorBundle:
    """Estimator set for one device class: parametric profile, fitted overrides, or both."""

    device_class: str
    profile: ParametricProfile | None = None
    models: dict = field(default_factory=dict)  # target name -> FittedFunction

    def __post_init__(self):
        if self.profile is None:
            missing = [t for t in TARGETS if t not in self.models]
            if missing:
                raise ValidationError(
                    f"bundle '{self.device_class}': no profile and no fitted model for {missing}"
                )
        else:
            problems = self.profile.violations()
            if problems:
                raise ValidationError(f"bundle '{self.device_class}': {problems[0]}")
        for target in self.models:
            if target not in TARGETS:
                raise ValidationError(f"bundle '{self.device_class}': unknown target '{target}'")

    # -- compute ---------------------------------------------------------

    def est_compute_time(self, state: NodeState, batch_size: int) -> float:
        """Seconds per sample to run one forward+backward pass at this batch size."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        model = self.models.get("compute_time")
        if model is not None:
            pred = model.predict({
                "cpu_util": state.cpu_util, "gpu_util": state.gpu_util,
                "mem_util": state.mem_util, "batch": float(batch_size),
            })
            return max(_POSITIVE_FLOOR, pred)
        p = self._profile("compute_time")
        load = (1.0 + p.cpu_slope * state.cpu_util) * (1.0 + p.gpu_slope * state.gpu_util)
        return p.base_forward * load + p.base_backward * load / batch_size

    # -- update ----------------------------------------------------------

    def est_update_time(self, state: NodeState, batch_size: int, ps_state: NodeState,
                        n_workers: int, batch_dist=None) -> float:
        """Seconds for one parameter exchange round (push + server update + pull).

        ``batch_dist`` (the full shard batch assignment) is accepted for
        model paths that want it; the built-in paths use only this worker's
        batch size and the worker count.
        """
        if n_workers < 1:
            raise ValueError(f"n_workers must be >= 1, got {n_workers}")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        model = self.models.get("update_time")
        if model is not None:
            pred = model.predict({
                "cpu_util": state.cpu_util, "gpu_util": state.gpu_util,
                "mem_util": state.mem_util, "batch": float(batch_size),
                "ps_cpu_util": ps_state.cpu_util, "n_workers": float(n_workers),
            })
            return max(_POSITIVE_FLOOR, pred)
        p = self._profile("update_time")
        push, service, pull = self._parametric_update_parts(p, state, batch_size, ps_state)
        return push + service + pull + p.contention_slope * (n_workers - 1)

    def update_components(self, state: NodeState, batch_size: int,
                          ps_state: NodeState) -> tuple[float, float, float]:
        """(push, server service, pull) durations for the event-driven simulator.

        For a parametric profile the sum equals ``est_update_time`` at
        ``n_workers=1`` exactly; queueing then replaces the linear contention
        stand-in. Fitted update models cannot be decomposed, so they get a
        fixed 0.3/0.4/0.3 split of the single-worker estimate.
        """
        if self.models.get("update_time") is not None or self.profile is None:
            total = self.est_update_time(state, batch_size, ps_state, n_workers=1)
            return 0.3 * total, 0.4 * total, 0.3 * total
        p = self.profile
        return self._parametric_update_parts(p, state, batch_size, ps_state)

    @staticmethod
    def _parametric_update_parts(p: ParametricProfile, state: NodeState,
                                 batch_size: int, ps_state: NodeState):
        worker_load = (1.0 + p.cpu_slope * state.cpu_util) * (1.0 + p.batch_update_coef / batch_size)
        service = p.ps_update * (1.0 + p.ps_cpu_slope * ps_state.cpu_util)
        return p.base_push * worker_load, service, p.base_pull * worker_load

    # -- state -----------------------------------------------------------

    def est_state(self, state: NodeState, batch_size: int) -> NodeState:
        """95th-percentile projected state once a batch-``b`` training task lands."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        values = {}
        for component, target in (("cpu_util", "state_cpu"), ("gpu_util", "state_gpu"),
                                  ("mem_util", "state_mem")):
            initial = getattr(state, component)
            model = self.models.get(target)
            if model is not None:
                pred = model.predict({
                    "cpu_util": state.cpu_util, "gpu_util": state.gpu_util,
                    "mem_util": state.mem_util, "batch": float(batch_size),
                })
            else:
                p = self._profile(target)
                if target == "state_cpu":
                    pred = initial + p.cpu_pressure
                elif target == "state_gpu":
                    pred = initial + p.gpu_pressure
                else:
                    pred = initial + p.base_mem_footprint + p.mem_per_batch_unit * batch_size
            # a running task never frees resources, and utilization saturates at 1
            values[component] = min(1.0, max(initial, pred))
        return NodeState(**values)

    # -- background exec ---------------------------------------------------

    def est_exec_time(self, state: NodeState) -> float:
        """Runtime of the co-located background task under the given state."""
        model = self.models.get("exec_time")
        if model is not None:
            pred = model.predict({
                "cpu_util": state.cpu_util, "gpu_util": state.gpu_util,
                "mem_util": state.mem_util,
            })
            return max(_POSITIVE_FLOOR, pred)
        p = self._profile("exec_time")
        return p.bg_base_exec * (1.0 + p.bg_cpu_slope * state.cpu_util
                                 + p.bg_gpu_slope * state.gpu_util
                                 + p.bg_mem_slope * state.mem_util)

    # -- max batch ---------------------------------------------------------

    def max_batch_size(self, mem_util: float, b_min: int, b_max: int,
                       mem_ceiling: float = 0.95) -> int:
        """Largest batch in [b_min, b_max] keeping projected memory <= ceiling; 0 if none."""
        if not 0.0 <= mem_util <= 1.0:
            raise ValueError(f"mem_util must lie in [0, 1], got {mem_util}")
        if b_min < 1 or b_max < b_min:
            raise ValueError(f"need 1 <= b_min <= b_max, got [{b_min}, {b_max}]")
        probe = NodeState(0.0, 0.0, mem_util)
        for batch in range(b_max, b_min - 1, -1):
            if self.est_state(probe, batch).mem_util <= mem_ceiling:
                return batch
        return 0

    def _profile(self, target: str) -> ParametricProfile:
        if self.profile is None:
            raise ValidationError(f"bundle '{self.device_class}': no parametric profile and "
                                  f"no fitted model for '{target}'")
        return self.profile


def get_max_batch_size(bundle: EstimatorBundle, mem_util: float, b_min: int, b_max: int,
                       mem_ceiling: float = 0.95) -> int:
    return bundle.max_batch_size(mem_util, b_min, b_max, mem_ceiling)


# --- built-in device profiles -------------------------------------------------

# Calibrated so an idle step at batch 16 costs 1.89 s on "tx2" and 2.69 s on
# "nano" (16*base_forward + base_backward), with the big board insulated from
# background interference and the small boards quite sensitive to it.
DEVICE_PROFILES = {
    "tx2": ParametricProfile(
        base_forward=0.09, base_backward=0.45,
        cpu_slope=0.6, gpu_slope=0.8,
        base_push=0.10, base_pull=0.10, ps_update=0.15,
        ps_cpu_slope=0.8, contention_slope=0.005, batch_update_coef=2.0,
        base_mem_footprint=0.12, mem_per_batch_unit=0.006,
        cpu_pressure=0.25, gpu_pressure=0.45,
        bg_base_exec=0.10, bg_cpu_slope=0.10, bg_gpu_slope=0.10, bg_mem_slope=0.05,
    ),
    "nano": ParametricProfile(
        base_forward=0.13, base_backward=0.61,
        cpu_slope=0.7, gpu_slope=0.9,
        base_push=0.15, base_pull=0.15, ps_update=0.15,
        ps_cpu_slope=0.8, contention_slope=0.005, batch_update_coef=2.0,
        base_mem_footprint=0.15, mem_per_batch_unit=0.012,
        cpu_pressure=0.25, gpu_pressure=0.45,
        bg_base_exec=0.10, bg_cpu_slope=0.45, bg_gpu_slope=0.55, bg_mem_slope=0.30,
    ),
}


def default_registry() -> dict:
    """device_class -> EstimatorBundle for the built-in profiles."""
    return {name: EstimatorBundle(device_class=name, profile=profile)
            for name, profile in DEVICE_PROFILES.items()}


def bundle_for(registry: dict, device_class: str) -> EstimatorBundle:
    try:
        return registry[device_class]
    except KeyError:
        raise ValidationError(f"registry has no estimator bundle for device class "
                              f"'{device_class}'") from None


# --- registry documents --------------------------------------------------------

def _profile_from_doc(obj: dict, ctx: str) -> ParametricProfile:
    if not isinstance(obj, dict):
        raise ValidationError(f"{ctx}: expected an object of profile coefficients")
    known = {f.name for f in dataclass_fields(ParametricProfile)}
    for key in obj:
        if key not in known:
            raise ValidationError(f"{ctx}: unknown field '{key}'")
    if "base_forward" not in obj:
        raise ValidationError(f"{ctx}.base_forward: missing")
    profile = ParametricProfile(**{k: float(v) for k, v in obj.items()})
    problems = profile.violations()
    if problems:
        raise ValidationError(f"{ctx}: {problems[0]}")
    return profile


def registry_from_doc(doc: dict) -> dict:
    from .cluster import _check_schema  # shared schema marker handling
    _check_schema(doc, "registry")
    for key in doc:
        if key not in {"schema", "devices"}:
            raise ValidationError(f"registry: unknown field '{key}'")
    if "devices" not in doc or not isinstance(doc["devices"], dict):
        raise ValidationError("registry.devices: missing or not an object")
    registry = {}
    for name, entry in doc["devices"].items():
        ctx = f"registry.devices['{name}']"
        if not isinstance(entry, dict):
            raise ValidationError(f"{ctx}: expected an object")
        kind = entry.get("type")
        if kind == "parametric":
            for key in entry:
                if key not in {"type", "profile"}:
                    raise ValidationError(f"{ctx}: unknown field '{key}'")
            registry[name] = EstimatorBundle(
                device_class=name,
                profile=_profile_from_doc(entry.get("profile", {}), f"{ctx}.profile"),
            )
        elif kind == "fitted":
            for key in entry:
                if key not in {"type", "base", "profile", "models"}:
                    raise ValidationError(f"{ctx}: unknown field '{key}'")
            profile = None
            if "profile" in entry:
                profile = _profile_from_doc(entry["profile"], f"{ctx}.profile")
            elif "base" in entry:
                base = entry["base"]
                if base not in DEVICE_PROFILES:
                    raise ValidationError(f"{ctx}.base: unknown built-in device class '{base}'")
                profile = DEVICE_PROFILES[base]
            models = {}
            for target, block in entry.get("models", {}).items():
                fn = fitted_from_block(block, ctx=f"{ctx}.models['{target}']")
                if fn.target != target:
                    raise ValidationError(f"{ctx}.models['{target}']: block is for "
                                          f"target '{fn.target}'")
                models[target] = fn
            registry[name] = EstimatorBundle(device_class=name, profile=profile, models=models)
        else:
            raise ValidationError(f"{ctx}.type: expected 'parametric' or 'fitted', got {kind!r}")
    return registry


def registry_to_doc(registry: dict) -> dict:
    devices = {}
    for name, bundle in registry.items():
        if bundle.models:
            entry = {"type": "fitted",
                     "models": {t: fn.as_block() for t, fn in sorted(bundle.models.items())}}
            if bundle.profile is not None:
                entry["profile"] = bundle.profile.as_dict()
        else:
            entry = {"type": "parametric", "profile": bundle.profile.as_dict()}
        devices[name] = entry
    return {"schema": SCHEMA_VERSION, "devices": devices}


def load_registry(source=None) -> dict:
    """Registry from a JSON document; None gives the built-in profiles."""
    if source is None:
        return default_registry()
    from .cluster import _load_doc
    return registry_from_doc(_load_doc(source))


def save_registry(registry: dict, path) -> None:
    Path(path).write_text(json.dumps(registry_to_doc(registry), indent=2) + "\n")
