"""Experiment configuration files.

Line-oriented ``key = value`` pairs; ``#`` starts a comment; lists are
comma-separated. Unknown keys are errors. Keys and defaults:

=================  ==========  ===============================================
key                default     meaning
=================  ==========  ===============================================
kind               (required)  sweep, diversity, complexity or landscape
family             (required)  linear_logistic, linear_regression,
                               nn_regression or index_model
d, r, t            (required)  dimension, representation width, train tasks
n_grid             (*)         samples per training task (sweep, complexity,
                               landscape: total samples)
m_grid             (*)         new-task sample sizes (sweep)
t_grid             t           task counts to sweep (sweep)
trials             1           independent repetitions per grid point
seed               0           base seed
noise              0.0         label noise standard deviation
c1                 2.0         head norm cap searched by ERM
c2                 1.0         norm cap of true heads and of F0
W                  1.0         index direction norm
kappa              4.0         head-matrix condition bound ("inf" disables)
radius             none        covariate truncation radius
hidden             16          hidden widths of the tanh network
layer_caps         2.0, 4.0    per-layer row-l1 caps of the tanh network
max_iters          5000        optimizer iteration cap
step_size          1.0         initial step
step_decay         0.5         backtracking factor
tol_grad           1e-7        projected-gradient stopping tolerance
restarts           5           random restarts
head_solve_every   10          iterations between exact head solves
n_eval             200000      Monte Carlo evaluation draws
samples            20          candidate representations (diversity)
starts             32          ascent starts for worst-case differences
draws              2000        noise draws for complexity estimates
epsilon            none        diversity slack (none: family default)
output             <kind>.csv  CSV destination
experiment_id      <kind>      label written to every row
=================  ==========  ===============================================

(*) ``n_grid`` is required for sweep, complexity and landscape; ``m_grid``
for sweep.
"""

from dataclasses import dataclass, fields

from .errors import ParseError, UnknownKey
from .models import Family

KINDS = ("sweep", "diversity", "complexity", "landscape")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    family: str
    d: int
    r: int
    t: int
    n_grid: tuple = ()
    m_grid: tuple = ()
    t_grid: tuple = ()
    trials: int = 1
    seed: int = 0
    noise: float = 0.0
    c1: float = 2.0
    c2: float = 1.0
    W: float = 1.0
    kappa: float = 4.0
    radius: float = None
    hidden: tuple = (16,)
    layer_caps: tuple = (2.0, 4.0)
    max_iters: int = 5000
    step_size: float = 1.0
    step_decay: float = 0.5
    tol_grad: float = 1e-7
    restarts: int = 5
    head_solve_every: int = 10
    n_eval: int = 200000
    samples: int = 20
    starts: int = 32
    draws: int = 2000
    epsilon: float = None
    output: str = None
    experiment_id: str = None

    @property
    def output_path(self):
        return self.output or f"{self.kind}.csv"

    @property
    def label(self):
        return self.experiment_id or self.kind

    @property
    def t_values(self):
        return self.t_grid or (self.t,)


_INT = {"d", "r", "t", "trials", "seed", "max_iters", "restarts", "head_solve_every", "n_eval", "samples", "starts", "draws"}
_FLOAT = {"noise", "c1", "c2", "W", "kappa", "step_size", "step_decay", "tol_grad"}
_OPT_FLOAT = {"radius", "epsilon"}
_INT_LIST = {"n_grid", "m_grid", "t_grid", "hidden"}
_FLOAT_LIST = {"layer_caps"}
_STR = {"kind", "family", "output", "experiment_id"}
_KEYS = [f.name for f in fields(ExperimentConfig)]
_POSITIVE_INT = {"d", "r", "t", "trials", "max_iters", "restarts", "head_solve_every", "n_eval", "samples", "starts", "draws"}
_NONNEG_FLOAT = {"noise"}
_POSITIVE_FLOAT = {"c1", "c2", "W", "step_size", "tol_grad"}


def _int(text, key, line):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{key}: expected an integer, got {text!r}", line) from None


def _float(text, key, line):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{key}: expected a number, got {text!r}", line) from None


def _parse_value(key, text, line):
    if key in _INT:
        return _int(text, key, line)
    if key in _FLOAT:
        return _float(text, key, line)
    if key in _OPT_FLOAT:
        return None if text.lower() == "none" else _float(text, key, line)
    if key in _INT_LIST:
        parts = [p.strip() for p in text.split(",")]
        if not parts or any(p == "" for p in parts):
            raise ParseError(f"{key}: empty list entry", line)
        return tuple(_int(p, key, line) for p in parts)
    if key in _FLOAT_LIST:
        parts = [p.strip() for p in text.split(",")]
        if any(p == "" for p in parts):
            raise ParseError(f"{key}: empty list entry", line)
        return tuple(_float(p, key, line) for p in parts)
    return text


def _check_value(key, value, line):
    if key in _POSITIVE_INT and value < 1:
        raise ParseError(f"{key} must be >= 1, got {value}", line)
    if key == "seed" and value < 0:
        raise ParseError("seed must be nonnegative", line)
    if key in _POSITIVE_FLOAT and not value > 0:
        raise ParseError(f"{key} must be positive, got {value}", line)
    if key in _NONNEG_FLOAT and not value >= 0:
        raise ParseError(f"{key} must be nonnegative, got {value}", line)
    if key == "kappa" and not value >= 1:
        raise ParseError("kappa must be >= 1", line)
    if key == "step_decay" and not 0 < value < 1:
        raise ParseError("step_decay must lie in (0, 1)", line)
    if key in _INT_LIST and any(v < 1 for v in value):
        raise ParseError(f"{key} entries must be >= 1", line)
    if key == "layer_caps" and any(not v > 0 for v in value):
        raise ParseError("layer_caps entries must be positive", line)
    if key == "radius" and value is not None and not value > 0:
        raise ParseError("radius must be positive", line)
    if key == "kind" and value not in KINDS:
        raise ParseError(f"kind must be one of {', '.join(KINDS)}", line)
    if key == "family":
        try:
            Family(value)
        except ValueError:
            raise ParseError(f"unknown family {value!r}", line) from None


def parse_config(text):
    """Parse configuration text into an :class:`ExperimentConfig`."""
    values, where = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise UnknownKey(f"unknown key {key!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        if val == "":
            raise ParseError(f"{key}: missing value", lineno)
        parsed = _parse_value(key, val, lineno)
        _check_value(key, parsed, lineno)
        values[key] = parsed
        where[key] = lineno
    for key in ("kind", "family", "d", "r", "t"):
        if key not in values:
            raise ParseError(f"missing required key {key!r}")
    if values["r"] > values["d"]:
        raise ParseError("r must not exceed d", where["r"])
    kind = values["kind"]
    if kind in ("sweep", "complexity", "landscape") and not values.get("n_grid"):
        raise ParseError(f"{kind} needs n_grid")
    if kind == "sweep" and not values.get("m_grid"):
        raise ParseError("sweep needs m_grid")
    return ExperimentConfig(**values)


def load_config(path):
    """Read and parse a configuration file."""
    with open(path) as fh:
        return parse_config(fh.read())


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg):
    """Text that :func:`parse_config` maps back to an equal config."""
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if v is None or v == ():
            continue
        lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
