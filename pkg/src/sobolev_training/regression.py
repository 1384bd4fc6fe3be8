"""Regular vs Sobolev regression on the 2-D benchmark functions."""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import benchmarks as bm
from .nn import Mlp, TrainStep, init_mlp, make_optimizer
from .seeding import child_rng, child_seed
from .sobolev import LossSpec, SobolevBatch, sobolev_loss

log = logging.getLogger(__name__)

MODES = ("regular", "sobolev")
TRAIN_SIZES = (20, 100, 10000)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``record`` holds the partial run."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class RegressionConfig:
    function: str = "styblinski_tang"
    train_size: int = 100
    mode: str = "sobolev"
    seed: int = 0
    steps: int = 50_000
    hidden: tuple = (256, 256)
    activation: str = "relu"
    optimizer: str = "adam"
    learning_rate: float = 3e-5
    batch_size: int | None = None  # None: full batch up to 100 points, else 100
    standardize: bool = False
    test_size: int = 10_000
    eval_every: int = 5_000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.train_size < 1:
            raise ValueError("train_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.test_size < 1:
            raise ValueError("test_size must be >= 1")

    @property
    def effective_batch(self) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, self.train_size)
        return self.train_size if self.train_size <= 100 else 100

    @property
    def function_name(self) -> str:
        return self.function if isinstance(self.function, str) else self.function.name


@dataclass
class ResultRecord:
    config: RegressionConfig
    train_mse: float
    test_mse: float
    test_grad_mse: float
    wall_time: float
    initial_test_mse: float = float("nan")
    step_log: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    model: object = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        c = self.config
        out = {
            "function": c.function_name,
            "mode": c.mode,
            "n": c.train_size,
            "seed": c.seed,
            "steps": c.steps,
            "train_mse": self.train_mse,
            "test_mse": self.test_mse,
            "test_grad_mse": self.test_grad_mse,
            "wall_ms": round(self.wall_time * 1000.0, 3),
            "initial_test_mse": self.initial_test_mse,
            "status": self.status,
        }
        if self.error:
            out["error"] = self.error
        return out


class ScaledModel:
    """``shift + scale * inner(x)``: undoes target standardisation inside the graph."""

    def __init__(self, inner: Mlp, shift: float, scale: float):
        self.inner = inner
        self.shift = float(shift)
        self.scale = float(scale)
        self.activation = inner.activation

    def __call__(self, x):
        return ad.add(ad.mul(self.inner(x), self.scale), self.shift)


@dataclass
class RegressionData:
    train_x: np.ndarray
    train_y: np.ndarray
    train_g: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_g: np.ndarray


def make_data(config: RegressionConfig) -> RegressionData:
    """Train and test sets drawn from seeds derived from ``config.seed``."""
    bench = bm.get_benchmark(config.function)
    x = bm.sample_domain(bench, config.train_size, child_rng(config.seed, "train-data"))
    tx = bm.sample_domain(bench, config.test_size, child_rng(config.seed, "test-data"))
    return RegressionData(x, bench.value(x), bench.gradient(x), tx, bench.value(tx), bench.gradient(tx))


def _metrics(model, x, y, g=None):
    with np.errstate(over="ignore", invalid="ignore"):  # a diverged model reports inf, not a warning
        return _raw_metrics(model, x, y, g)


def _raw_metrics(model, x, y, g):
    if g is None:
        tape = ad.Tape()
        pred = model(tape.constant(x)).value[:, 0]
        return float(np.mean((pred - y) ** 2)), None
    tape = ad.Tape()
    xn = tape.constant(x)
    out = model(xn)
    dg = ad.grad(ad.sum(out), [xn])[0]
    value_mse = float(np.mean((out.value[:, 0] - y) ** 2))
    grad_mse = float(np.mean((dg.value - g) ** 2))
    return value_mse, grad_mse


def train_regression(config: RegressionConfig, data: RegressionData | None = None):
    """Train one model; returns ``(ResultRecord, model)``."""
    t0 = time.perf_counter()
    data = data if data is not None else make_data(config)
    n = config.train_size
    sizes = (2, *config.hidden, 1)
    net = init_mlp(sizes, child_seed(config.seed, "init"), activation=config.activation)

    shift, scale = 0.0, 1.0
    if config.standardize:
        shift = float(np.mean(data.train_y))
        scale = float(np.std(data.train_y)) or 1.0
    y_fit = (data.train_y - shift) / scale
    g_fit = data.train_g / scale
    model = ScaledModel(net, shift, scale) if config.standardize else net

    batch_n = config.effective_batch
    order_rng = child_rng(config.seed, "batch-order")
    sobolev = config.mode == "sobolev"
    spec = LossSpec(order=1, derivative_losses=("l2",)) if sobolev else LossSpec(order=0, derivative_losses=())

    def batch_at(idx):
        return SobolevBatch(data.train_x[idx], y_fit[idx], g_fit[idx][:, None, :] if sobolev else None)

    perm = np.arange(n)
    cursor = n  # forces a shuffle before the first minibatch
    first = batch_at(perm[:batch_n])
    tape = ad.Tape()
    bound = first.bind(tape)
    loss = sobolev_loss(net, bound, spec, tape=tape)
    trainer = TrainStep(loss, [net], make_optimizer(config.optimizer, net.params, config.learning_rate))

    initial_test, _ = _metrics(model, data.test_x, data.test_y)
    step_log = [{"step": 0, "loss": float(loss.value), "test_mse": initial_test}]

    def record(status="ok", error="", steps_done=config.steps):
        train_mse, _ = _metrics(model, data.train_x, data.train_y)
        test_mse, test_grad_mse = _metrics(model, data.test_x, data.test_y, data.test_g)
        return ResultRecord(
            replace(config, steps=steps_done) if steps_done != config.steps else config,
            train_mse, test_mse, test_grad_mse, time.perf_counter() - t0,
            initial_test, step_log, status, error,
        )

    for step in range(1, config.steps + 1):
        if batch_n < n:
            if cursor + batch_n > n:
                perm = order_rng.permutation(n)
                cursor = 0
            bound.assign(batch_at(perm[cursor:cursor + batch_n]))
            cursor += batch_n
        try:
            value = trainer.step()
        except ad.NonFiniteError as exc:
            rec = _safe_record(record, "diverged", str(exc), step - 1)
            raise DivergenceError(f"{config.function_name}/{config.mode}: {exc}", rec) from exc
        if not np.isfinite(value):
            rec = _safe_record(record, "diverged", "non-finite loss", step - 1)
            raise DivergenceError(f"{config.function_name}/{config.mode}: non-finite loss at step {step}", rec)
        if config.eval_every and step % config.eval_every == 0:
            test_mse, _ = _metrics(model, data.test_x, data.test_y)
            step_log.append({"step": step, "loss": value, "test_mse": test_mse})
            log.debug("%s %s n=%d step %d loss %.4g test %.4g", config.function_name, config.mode, n,
                      step, value, test_mse)

    rec = record()
    rec.model = model
    return rec, model


def _safe_record(make, status, error, steps_done):
    try:
        return make(status, error, steps_done)
    except (ad.NonFiniteError, FloatingPointError):
        return None


def run_regression(config: RegressionConfig) -> ResultRecord:
    return train_regression(config)[0]


def _run_quietly(config: RegressionConfig) -> ResultRecord:
    try:
        rec = run_regression(config)
        rec.model = None  # not picklable across workers cheaply, and not persisted
        return rec
    except Exception as exc:  # a failed run must not stop the sweep
        nan = float("nan")
        rec = getattr(exc, "record", None)
        if rec is not None:
            rec.model = None
            return rec
        return ResultRecord(config, nan, nan, nan, 0.0, status="failed", error=f"{type(exc).__name__}: {exc}")


def sweep_configs(functions, sizes, modes, seeds, base: RegressionConfig | None = None) -> list[RegressionConfig]:
    for axis, name in ((functions, "functions"), (sizes, "sizes"), (modes, "modes"), (seeds, "seeds")):
        if not list(axis):
            raise ValueError(f"sweep axis '{name}' is empty")
    base = base or RegressionConfig()
    return [
        replace(base, function=f, train_size=int(n), mode=m, seed=int(s))
        for f, n, m, s in itertools.product(functions, sizes, modes, seeds)
    ]


def run_sweep(functions, sizes, modes, seeds, base: RegressionConfig | None = None, sink=None,
              workers: int = 1) -> list[ResultRecord]:
    """Cartesian product of runs.  Records stream to ``sink`` as they finish;
    the returned list is in product order."""
    configs = sweep_configs(functions, sizes, modes, seeds, base)
    results: list = [None] * len(configs)
    if workers <= 1:
        for i, cfg in enumerate(configs):
            results[i] = _run_quietly(cfg)
            if sink is not None:
                sink.write(results[i])
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_run_quietly, cfg): i for i, cfg in enumerate(configs)}
        for fut in as_completed(futures):
            i = futures[fut]
            results[i] = fut.result()
            if sink is not None:
                sink.write(results[i])
    return results


def dump_surface(model, function, shape=(50, 50)) -> tuple[tuple, np.ndarray]:
    """Model value and input gradient over a lattice, next to the true ones.

    Returns ``(header, rows)``; write with :func:`results.write_table`.
    """
    bench = bm.get_benchmark(function)
    pts = bm.lattice(bench, shape)
    tape = ad.Tape()
    xn = tape.constant(pts)
    out = model(xn)
    g = ad.grad(ad.sum(out), [xn])[0]
    true_f = bench.value(pts)
    true_g = bench.gradient(pts)
    if bench.singular is not None:
        true_g = np.where(bench.singular(pts[:, 0], pts[:, 1])[:, None] == 0.0, np.nan, true_g)
    rows = np.column_stack([pts, out.value[:, 0], g.value, true_f, true_g])
    header = ("x", "y", "f", "fx", "fy", "f_true", "fx_true", "fy_true")
    return header, rows


def config_dict(config: RegressionConfig) -> dict:
    d = asdict(config)
    d["function"] = config.function_name
    return d
