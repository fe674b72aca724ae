# Std lib
import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, NamedTuple, Optional, Sequence, Union
# Non Std Lib
import numpy as np
import tqdm
# Local
from actbench import activations as act
from actbench import tensor
from actbench import utils
from actbench import verify
from actbench.activations import ActivationKind, ConstrainedParams, FixedHyper, OpCount


CURVE_HEADER = ["x", "f", "dfdx"]
BENCH_HEADER = ["kind", "exps", "mults", "adds", "divs", "conditionals", "ns_per_element"]
CHECKS = ("input", "params", "continuity", "model")


def _sbmsg(msg) -> str:
    return f"[Subtask] {msg}"


class Task:
    def __init__(self,
                 inputs: Sequence[Hashable],
                 multiprocess: Optional[int] = None,
                 **options
                 ):
        """

        :param inputs: Independent cells of work, hashable so that their status can be tracked
        :param multiprocess: Number of worker threads (default = 1). Results keep the order of `inputs`.
        :param options: Task specific options
        """
        self.inputs: List[Hashable] = list(inputs)
        self._checked: Dict[Hashable, bool] = {}
        self.workers: int = multiprocess or 1

    def check(self) -> bool:
        raise NotImplementedError

    def process(self) -> bool:
        self.check()
        requires_processing = [
            cell for cell, status in self._checked.items()
            if not status
        ]
        if not len(requires_processing):
            print("Nothing to process here.")
            return True
        return self._process(requires_processing)

    def _process(self, inputs: List[Hashable]) -> bool:
        raise NotImplementedError

    def _map(self, function, inputs: List[Hashable], desc: str) -> list:
        """ Ordered map over `inputs` on the worker pool, with a progress bar """
        out = []
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            bar = tqdm.tqdm(total=len(inputs), desc=_sbmsg(desc))
            for result in executor.map(function, inputs):
                bar.update(1)
                out.append(result)
            bar.close()
        return out

    @property
    def output_files(self) -> List[str]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


class CurveRow(NamedTuple):
    x: float
    f: float
    dfdx: float


@dataclass(frozen=True)
class CurveJob:
    """ One sampled curve of an activation and of its gradient, written to `target` """
    kind: ActivationKind
    target: str
    alpha_p: float = 0.8
    alpha_n: float = 0.8
    xmin: float = -5.0
    xmax: float = 5.0
    samples: int = 1001
    hyper: FixedHyper = field(default_factory=FixedHyper)

    def __post_init__(self):
        if not self.xmin < self.xmax:
            raise ValueError(f"xmin ({self.xmin}) must be smaller than xmax ({self.xmax})")
        if self.samples < 2:
            raise ValueError(f"A curve needs at least 2 samples, got {self.samples}")
        if not (np.isfinite(self.alpha_p) and np.isfinite(self.alpha_n)):
            raise ValueError("Activation parameters must be finite")

    def rows(self) -> List[CurveRow]:
        xs = np.linspace(self.xmin, self.xmax, self.samples)
        params = ConstrainedParams(self.alpha_p, self.alpha_n)
        f = np.asarray(act.forward(self.kind, xs, params, self.hyper))
        dfdx = np.asarray(act.grad_input(self.kind, xs, params, self.hyper))
        return [CurveRow(float(x), float(y), float(d)) for x, y, d in zip(xs, f, dfdx)]


def write_curve(job: CurveJob) -> str:
    directory = os.path.dirname(job.target)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(job.target, "w") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for row in job.rows():
            writer.writerow([utils.format_real(v) for v in row])
    return job.target


class CurveTask(Task):
    """ Writes one CSV of (x, f, dfdx) per job

    :param skip_existing: Consider jobs whose target already exists as done
    """
    def __init__(self, inputs: List[CurveJob], *args, skip_existing: bool = False, **kwargs):
        super(CurveTask, self).__init__(inputs, *args, **kwargs)
        self.skip_existing: bool = skip_existing
        self._output_files: List[str] = []

    @property
    def output_files(self) -> List[str]:
        return self._output_files

    def check(self) -> bool:
        all_done: bool = True
        for job in self.inputs:
            done = self.skip_existing and os.path.exists(job.target)
            self._checked[job] = done
            if done:
                self._output_files.append(job.target)
            else:
                all_done = False
        return all_done

    def _process(self, inputs: List[CurveJob]) -> bool:
        self._output_files.extend(self._map(write_curve, inputs, "Writing curves"))
        return True


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


class GradCheckCell(NamedTuple):
    check: str
    kind: str
    seed: int


def model_check_inputs(kind: str, seed: int, hyper: Optional[FixedHyper] = None, batch: int = 3):
    """ Tiny model and batch for the end-to-end check. The wide init keeps gradients well above FD noise. """
    config = tensor.ModelConfig(
        vocab_size=5, d_model=4, n_layers=1, context_length=2, activation=kind, init_std=0.5,
        hyper=hyper or FixedHyper()
    )
    rng = np.random.default_rng(seed)
    model = tensor.ToyLm.create(config, seed=seed)
    tokens = rng.integers(0, config.vocab_size, size=(batch, config.context_length))
    targets = rng.integers(0, config.vocab_size, size=batch)
    return model, tokens, targets


class GradCheckTask(Task):
    """ Input, parameter, continuity and end-to-end model checks for each kind

    Every cell gets its own seed, spawned from the root seed, so reports do not depend on the number of workers.

    :param kinds: Activations to check
    :param seed: Root seed
    :param samples: Samples per input/parameter check
    :param draws: Parameter draws per continuity audit
    :param include_gated: Also run the model check on a gated (SwiGLU) block
    :param target: CSV report path
    """
    def __init__(self, kinds: Sequence[ActivationKind], *args, seed: int = 0, samples: int = 1000,
                 draws: int = 200, hyper: Optional[FixedHyper] = None, include_gated: bool = True,
                 target: Optional[str] = None, **kwargs):
        names = [kind.value for kind in kinds]
        cells = [(check, name) for name in names for check in CHECKS]
        if include_gated:
            cells.append(("model", tensor.GATED_ACTIVATION))
        seeds = utils.spawn_seeds(seed, len(cells))
        super(GradCheckTask, self).__init__(
            [GradCheckCell(check, name, cell_seed) for (check, name), cell_seed in zip(cells, seeds)],
            *args, **kwargs
        )
        self.samples: int = samples
        self.draws: int = draws
        self.hyper: FixedHyper = hyper or FixedHyper()
        self.target: Optional[str] = target
        self.reports: List[verify.GradCheckReport] = []

    @property
    def output_files(self) -> List[str]:
        return [self.target] if self.target and self.reports else []

    @property
    def passed(self) -> bool:
        return bool(self.reports) and all(report.passed for report in self.reports)

    @property
    def failures(self) -> List[verify.GradCheckReport]:
        return [report for report in self.reports if not report.passed]

    def check(self) -> bool:
        for cell in self.inputs:
            self._checked[cell] = False
        return False

    def run_cell(self, cell: GradCheckCell) -> verify.GradCheckReport:
        if cell.check == "model":
            model, tokens, targets = model_check_inputs(cell.kind, cell.seed, self.hyper)
            return verify.gradcheck_model(model, tokens, targets)
        kind = ActivationKind.from_name(cell.kind)
        if cell.check == "input":
            return verify.gradcheck_activation(kind, self.hyper, samples=self.samples, seed=cell.seed)
        if cell.check == "params":
            return verify.gradcheck_params(kind, self.hyper, samples=self.samples, seed=cell.seed)
        if cell.check == "continuity":
            return verify.continuity_report(kind, self.hyper, draws=self.draws, seed=cell.seed)
        raise ValueError(f"Unknown check `{cell.check}`")

    def _process(self, inputs: List[GradCheckCell]) -> bool:
        self.reports = self._map(self.run_cell, inputs, "Checking gradients")
        if self.target:
            directory = os.path.dirname(self.target)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(self.target, "w") as f:
                verify.write_reports(self.reports, f)
        return self.passed


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


# silu(x W_gate) * (x W_up): one product on top of SiLU
GATED_OPS: OpCount = act.op_count(ActivationKind.Silu) + OpCount(mults=1)


class BenchRow(NamedTuple):
    kind: str
    ops: OpCount
    ns_per_element: float

    def row(self) -> List[str]:
        return [self.kind] + [str(v) for v in self.ops] + [f"{self.ns_per_element:.3f}"]


class BenchTask(Task):
    """ Static operation census and wall-clock cost per element of the vectorised forward pass

    Timings only make sense relative to each other on the same machine.

    :param kinds: Activations to time, `swiglu` times the gated product silu(gate) * up
    """
    def __init__(self, kinds: Sequence[Union[ActivationKind, str]], *args, n: int = 100_000, repeats: int = 3,
                 seed: int = 0, **kwargs):
        names = [kind.value if isinstance(kind, ActivationKind) else kind.lower() for kind in kinds]
        for name in names:
            if name != tensor.GATED_ACTIVATION:
                ActivationKind.from_name(name)
        super(BenchTask, self).__init__(names, *args, **kwargs)
        if n < 1 or repeats < 1:
            raise ValueError("Benchmarks need at least one element and one repeat")
        self.n: int = n
        self.repeats: int = repeats
        self.seed: int = seed
        self.rows: List[BenchRow] = []

    @property
    def output_files(self) -> List[str]:
        return []

    def check(self) -> bool:
        for kind in self.inputs:
            self._checked[kind] = False
        return False

    def time_kind(self, name: str) -> BenchRow:
        rng = np.random.default_rng(self.seed)
        xs = rng.standard_normal(self.n)
        if name == tensor.GATED_ACTIVATION:
            ys = rng.standard_normal(self.n)
            run, ops = (lambda: act.silu(xs) * ys), GATED_OPS
        else:
            kind = ActivationKind.from_name(name)
            params, hyper = ConstrainedParams(0.8, 0.8), FixedHyper()
            run, ops = (lambda: act.forward(kind, xs, params, hyper)), act.op_count(kind)
        best = float("inf")
        for _ in range(self.repeats):
            start = time.perf_counter()
            run()
            best = min(best, time.perf_counter() - start)
        return BenchRow(name, ops, best * 1e9 / self.n)

    def _process(self, inputs: List[str]) -> bool:
        # Timings are taken one kind at a time whatever the worker count
        self.workers = 1
        self.rows = self._map(self.time_kind, inputs, "Benchmarking")
        return True

    def table(self) -> str:
        lines = ["\t".join(BENCH_HEADER)]
        lines.extend("\t".join(row.row()) for row in self.rows)
        return "\n".join(lines)
