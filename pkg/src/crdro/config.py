"""INI run configuration.

Grammar: ``configparser`` syntax (``[section]`` headers, ``key = value``
lines, ``#`` or ``;`` comments). Section and key names are fixed; anything
not listed in ``SCHEMA`` is rejected. Lists are comma-separated. Booleans
accept true/false/yes/no/1/0. See ``configs/README.md`` for every key.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .divergence import DivergenceError, DivergenceSpec


class ConfigError(ValueError):
    pass


FLOAT, INT, STR, BOOL, FLOATS, INTS, STRS = "float", "int", "str", "bool", "floats", "ints", "strs"

SCHEMA: dict[str, dict[str, str]] = {
    "divergence": {"family": STR, "k": FLOAT, "mu": FLOAT, "rho": FLOAT},
    "loss": {"model": STR, "B": FLOAT, "hidden": INT, "value": FLOAT, "init_scale": FLOAT,
             "radius": FLOAT, "safety": FLOAT},
    "data": {"source": STR, "path": STR, "label_column": STR, "classes": INT, "ratios": FLOATS,
             "base_n": INT, "d": INT, "separation": FLOAT, "seed": INT, "test_base_n": INT,
             "test_ratios": FLOATS, "test_path": STR},
    "solver": {"name": STR, "mode": STR, "iterations": INT, "step_alpha": FLOAT, "batch_nx": INT,
               "batch_nz": INT, "constant_C": FLOAT, "seed": INT, "epsilon": FLOAT, "delta": FLOAT,
               "lambda0": FLOAT, "full_batch": BOOL, "pan_lambda": FLOAT, "lambda_init": FLOAT,
               "eta_init": FLOAT},
    "bench": {"solvers": STRS, "seeds": INTS},
    "bias": {"losses": FLOATS, "weights": FLOATS, "n_grid": INTS, "trials": INT, "boundary_rho": BOOL},
    "oracle": {"losses": FLOATS, "weights": FLOATS, "lambda0": FLOAT},
    "gradcheck": {"points": INT, "h": FLOAT, "tol": FLOAT},
    "output": {"smoothing_window": INT},
}

SOLVERS = ("sfk_dro", "pgd", "pan_dro", "erm")
LOSS_MODELS = ("squashed_logistic", "tiny_mlp", "constant")


def _convert(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == FLOAT:
            return float(raw)
        if kind == INT:
            return int(raw)
        if kind == STR:
            return raw
        if kind == BOOL:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if kind == FLOATS:
            return tuple(float(s) for s in items)
        if kind == INTS:
            return tuple(int(s) for s in items)
        return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    divergence: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    gradcheck: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    source: str = "<string>"

    def spec(self) -> DivergenceSpec:
        d = self.divergence
        family = d.get("family", "cressie_read")
        if "rho" not in d:
            raise ConfigError(f"{self.source}: [divergence] rho is required")
        try:
            if family == "cressie_read":
                return DivergenceSpec.cressie_read(d.get("k", 2.0), d["rho"])
            if family == "smoothed_cvar":
                if "mu" not in d:
                    raise ConfigError(f"{self.source}: smoothed_cvar needs [divergence] mu")
                return DivergenceSpec.smoothed_cvar(d["mu"], d["rho"])
        except DivergenceError as exc:
            raise ConfigError(f"{self.source}: {exc}") from None
        raise ConfigError(f"{self.source}: unknown divergence family {family!r}")

    def validate(self) -> "RunConfig":
        self.spec()
        model = self.loss.get("model", "squashed_logistic")
        if model not in LOSS_MODELS:
            raise ConfigError(f"{self.source}: unknown loss model {model!r}")
        if model == "tiny_mlp" and "hidden" not in self.loss:
            raise ConfigError(f"{self.source}: tiny_mlp needs [loss] hidden")
        if model == "constant" and "value" not in self.loss:
            raise ConfigError(f"{self.source}: constant loss needs [loss] value")
        source = self.data.get("source", "generate")
        if source not in ("generate", "csv"):
            raise ConfigError(f"{self.source}: [data] source must be generate or csv")
        if source == "csv" and not {"path", "label_column"} <= self.data.keys():
            raise ConfigError(f"{self.source}: csv data needs path and label_column")
        name = self.solver.get("name", "sfk_dro")
        if name not in SOLVERS:
            raise ConfigError(f"{self.source}: unknown solver {name!r}")
        mode = self.solver.get("mode", "practical")
        if mode not in ("practical", "theory"):
            raise ConfigError(f"{self.source}: [solver] mode must be practical or theory")
        if mode == "theory" and "epsilon" not in self.solver:
            raise ConfigError(f"{self.source}: theory mode requires [solver] epsilon")
        # solver keys are only required once a [solver] section is present
        if mode == "practical" and self.solver:
            missing = {"iterations", "step_alpha"} - self.solver.keys()
            if missing:
                raise ConfigError(f"{self.source}: practical mode requires {sorted(missing)}")
        for s in self.bench.get("solvers", ()):
            if s not in SOLVERS:
                raise ConfigError(f"{self.source}: unknown solver {s!r} in [bench]")
        if "trials" in self.bias and self.bias["trials"] < 30:
            raise ConfigError(f"{self.source}: [bias] trials must be >= 30 for a stable slope fit")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        self.solver = {**self.solver, "seed": int(seed)}
        return self


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (B, constant_C)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig(source=source)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        keys = SCHEMA[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _convert(keys[key], raw, f"{source} [{section}] {key}")
        setattr(cfg, section, values)
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))
