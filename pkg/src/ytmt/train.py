"""Optimiser, schedule, training loop, two-stage protocol and ablation runner."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, Config, single_stage_counterpart
from .data import DatasetSpec, generate_dataset, load_dataset, stack_samples
from .errors import ContractError, NumericError
from .layers import Module
from .losses import Discriminator, FeatureExtractor, LossReport, total_loss
from .metrics import MetricsReport, evaluate_pairs
from .networks import TwoStageNet, build_network, build_two_stage
from .tensor import Tensor, no_grad

CURVE_COLUMNS = ("step",) + LossReport.columns
TRAIL = 50


# -- optimiser ----------------------------------------------------------------
class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameter {missing[0]!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def state_arrays(self, prefix: str = "adam.") -> dict:
        out = {}
        for name, _ in self.params:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, t: int, prefix: str = "adam.") -> None:
        for name, p in self.params:
            try:
                self.m[name] = arrays[f"{prefix}m.{name}"].astype(p.data.dtype).copy()
                self.v[name] = arrays[f"{prefix}v.{name}"].astype(p.data.dtype).copy()
            except KeyError as exc:
                raise ContractError(f"checkpoint lacks optimiser state for {name!r}") from exc
        self.t = int(t)


def adam_step(params, state: Adam, lr: Optional[float] = None) -> None:
    """Functional alias: apply one update of ``state`` to its parameters."""
    if params is not None:
        names = {id(p) for _, p in state.params}
        foreign = [p for p in params if id(p) not in names]
        if foreign:
            raise ContractError("parameters are not tracked by this optimiser state")
    state.step(lr)


def lr_at(step: int, total: int, base_lr: float, milestones=(0.5, 0.67, 0.83)) -> float:
    """Base rate halved once for every milestone fraction already passed."""
    passed = sum(1 for m in milestones if step >= int(round(m * total)))
    return base_lr * 0.5**passed


def clip_global_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm


# -- data -----------------------------------------------------------------------
@lru_cache(maxsize=8)
def _procedural_split(spec_key: tuple, start: int, count: int) -> tuple:
    from .data import procedural_sample

    spec = DatasetSpec(**dict(spec_key))
    arrays = stack_samples(procedural_sample(spec, start + i) for i in range(count))
    for a in arrays:
        a.setflags(write=False)
    return arrays


def _spec_key(spec: DatasetSpec) -> tuple:
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in vars(spec).items()))


def load_split(cfg: Config, split: str) -> tuple:
    """(I, T, R) float32 arrays for the ``train`` or ``test`` split.

    Procedural test samples use indices after the training block, so the two
    splits never share a sample.
    """
    d = cfg.data
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if d.source == "procedural":
        spec = d.dataset_spec(count=0)
        start, count = (0, d.train_count) if split == "train" else (d.train_count, d.test_count)
        return _procedural_split(_spec_key(spec), start, count)
    path = d.path if split == "train" else (d.test_path or d.path)
    count = d.train_count if split == "train" else d.test_count
    return stack_samples(load_dataset(d.dataset_spec(count=count, path=path)))


# -- run records ------------------------------------------------------------------
@dataclass
class EvalResult:
    report: MetricsReport
    input_psnr: float
    residual: float

    def summary(self) -> dict:
        out = self.report.summary()
        out["psnr_input"] = self.input_psnr
        out["additivity_residual"] = self.residual
        return out


@dataclass
class StageResult:
    net: Module
    curve: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    evaluation: Optional[EvalResult] = None

    def final_loss(self, trail: int = TRAIL) -> float:
        return trailing_mean(self.curve, trail)

    def initial_loss(self, trail: int = TRAIL) -> float:
        return trailing_mean(self.curve[:trail], trail)


def trailing_mean(curve, trail: int = TRAIL, column: str = "total") -> float:
    if not curve:
        return float("nan")
    idx = CURVE_COLUMNS.index(column)
    return float(np.mean([row[idx] for row in curve[-trail:]]))


def has_plateaued(curve, window: float = 0.2, tol: float = 0.01) -> bool:
    """True when the loss improved by less than ``tol`` (relative) over the last ``window`` of steps."""
    n = len(curve)
    span = max(2, int(round(window * n)))
    if n < 2 * span:
        return False
    idx = CURVE_COLUMNS.index("total")
    k = max(1, span // 5)
    before = float(np.mean([r[idx] for r in curve[n - span - k : n - span]]))
    after = float(np.mean([r[idx] for r in curve[n - k :]]))
    return (before - after) / max(abs(before), 1e-12) < tol


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CURVE_COLUMNS)
        for row in curve:
            out.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def read_curve(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CURVE_COLUMNS:
            raise ContractError(f"{path}: unexpected curve columns {header}")
        return [[int(r[0])] + [float(v) for v in r[1:]] for r in reader]


def evaluate(net: Module, arrays: tuple, batch: int = 50, ids=None) -> EvalResult:
    """Held-out metrics plus the input baseline and the mean additivity residual."""
    I, Tgt, Rgt = arrays
    outs_t, outs_r = [], []
    with no_grad():
        for s in range(0, len(I), batch):
            t, r = net(Tensor(I[s : s + batch]))
            outs_t.append(t.data)
            outs_r.append(r.data)
    if not outs_t:
        return EvalResult(MetricsReport(), float("nan"), float("nan"))
    That, Rhat = np.concatenate(outs_t), np.concatenate(outs_r)
    report = evaluate_pairs(I, Tgt, Rgt, That, Rhat, ids)
    baseline = evaluate_pairs(I, Tgt, Rgt, I, I, ids)
    residual = float(np.mean(np.abs(I.astype(np.float64) - That - Rhat)))
    return EvalResult(report, baseline.mean("psnr_T"), residual)


# -- checkpoint glue ----------------------------------------------------------------
def net_meta(net: Module) -> dict:
    if isinstance(net, TwoStageNet):
        return {"kind": "two_stage", "net": _net_cfg_dict(net.stage1.cfg),
                "stage2_with_input": net.plan.stage2_with_input}
    return {"kind": "single", "net": _net_cfg_dict(net.cfg)}


def _net_cfg_dict(cfg) -> dict:
    return {k: (v.value if hasattr(v, "value") else v) for k, v in vars(cfg).items()}


def checkpoint_tensors(net: Module, opt: Optional[Adam] = None, disc: Optional[Module] = None,
                       disc_opt: Optional[Adam] = None) -> dict:
    tensors = {f"param.{n}": p.data for n, p in net.named_parameters()}
    if opt is not None:
        tensors.update(opt.state_arrays("adam."))
    if disc is not None:
        tensors.update({f"disc.{n}": p.data for n, p in disc.named_parameters()})
    if disc_opt is not None:
        tensors.update(disc_opt.state_arrays("disc_adam."))
    return tensors


def load_params(net: Module, tensors: dict, prefix: str = "param.") -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    net.load_state_dict(state, strict=True)


def build_from_meta(meta: dict) -> Module:
    """Rebuild an untrained network with the architecture recorded in ``meta``."""
    from .networks import NetConfig, StagePlan

    cfg = NetConfig(**meta["net"])
    net = build_network(cfg, np.random.default_rng(0))
    if meta.get("kind") == "two_stage":
        plan = StagePlan(stages=2, stage2_with_input=bool(meta.get("stage2_with_input", False)))
        net = build_two_stage(net, np.random.default_rng(0), plan)
    return net


def load_network(path) -> tuple:
    """Return ``(net, meta)`` from a checkpoint written by :func:`train_stage`."""
    meta, tensors = load_checkpoint(path)
    if "net" not in meta:
        raise ContractError(f"{path}: checkpoint has no network description")
    net = build_from_meta(meta)
    load_params(net, tensors)
    return net, meta


# -- training loop --------------------------------------------------------------------
def batch_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, step])


def train_stage(net: Module, train_arrays: tuple, cfg: Config, out_dir, stage: int = 1,
                iterations: Optional[int] = None, test_arrays: Optional[tuple] = None,
                resume: Optional[str] = None, step_hook: Optional[Callable] = None,
                log: Optional[Callable] = None) -> StageResult:
    """Train the trainable parameters of ``net`` and write the run artefacts.

    Artefacts in ``out_dir``: ``stage{k}.ckpt`` (refreshed every
    ``checkpoint_every`` steps and at the end), ``stage{k}_curve.csv``,
    ``stage{k}_timing.json`` (wall and CPU seconds summed over resumes) and, when
    test data is given,
    ``stage{k}_eval.csv``.  Batches depend only on
    (seed, stage, step), so resuming from a checkpoint continues bit-exactly.
    """
    run = cfg.run
    iterations = run.iterations if iterations is None else iterations
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"stage{stage}.ckpt"
    curve_path = out_dir / f"stage{stage}_curve.csv"
    I_all, T_all, R_all = train_arrays
    n = len(I_all)
    if iterations and n == 0:
        raise ContractError("training set is empty")
    if iterations and n < run.batch_size:
        raise ContractError(f"batch size {run.batch_size} exceeds the {n} training samples")

    trainable = [(name, p) for name, p in net.named_parameters() if p.requires_grad]
    opt = Adam(trainable, lr=run.lr)
    extractor = FeatureExtractor() if run.perceptual else None
    disc = disc_opt = None
    if run.adversarial:
        disc = Discriminator(rng=np.random.default_rng([run.seed, stage, 7]))
        disc_opt = Adam(list(disc.named_parameters()), lr=run.lr)

    curve = []
    start = 0
    if resume is not None:
        meta, tensors = load_checkpoint(resume)
        if meta.get("stage") != stage:
            raise ContractError(f"{resume} holds stage {meta.get('stage')}, not stage {stage}")
        _check_config_echo(meta.get("config", {}), cfg.to_dict())
        load_params(net, tensors)
        opt.load_state_arrays(tensors, meta["adam_t"])
        if disc is not None:
            load_params(disc, tensors, "disc.")
            disc_opt.load_state_arrays(tensors, meta["disc_adam_t"], "disc_adam.")
        start = int(meta["step"])
        prior = Path(resume).with_name(f"stage{stage}_curve.csv")
        curve = [row for row in read_curve(prior) if row[0] < start] if prior.exists() else []
        if len(curve) != start:
            raise ContractError(f"loss curve next to {resume} has {len(curve)} rows, expected {start}")

    def save(step):
        meta = {
            "config": cfg.to_dict(), "stage": stage, "step": step, "iterations": iterations,
            "adam_t": opt.t, "disc_adam_t": disc_opt.t if disc_opt else 0, **net_meta(net),
        }
        save_checkpoint(ckpt_path, checkpoint_tensors(net, opt, disc, disc_opt), meta)
        write_curve(curve_path, curve)
        # wall time lives apart from the checkpoint and curve so those stay byte-reproducible
        timing_path.write_text(json.dumps({
            "seconds": prior["seconds"] + time.perf_counter() - began,
            "cpu_seconds": prior["cpu_seconds"] + time.process_time() - began_cpu,
            "steps": step}, sort_keys=True))

    timing_path = out_dir / f"stage{stage}_timing.json"
    prior = {"seconds": 0.0, "cpu_seconds": 0.0}
    if start and timing_path.exists():
        timing = json.loads(timing_path.read_text())
        if timing.get("steps") == start:
            prior = {k: float(timing.get(k, 0.0)) for k in prior}
    began, began_cpu = time.perf_counter(), time.process_time()
    for step in range(start, iterations):
        rng = batch_rng(run.seed, stage, step)
        idx = np.sort(rng.choice(n, size=run.batch_size, replace=False))
        I, Tgt, Rgt = Tensor(I_all[idx]), Tensor(T_all[idx]), Tensor(R_all[idx])
        lr = lr_at(step, iterations, run.lr, run.milestones)

        That, Rhat = net(I)
        loss, report = total_loss(That, Rhat, Tgt, Rgt, I, cfg.loss, extractor, disc, run.adversarial)
        if not np.isfinite(report.total):
            _dump_failure(out_dir, stage, step, run.seed, idx, report)
            raise NumericError(
                f"non-finite loss at stage {stage} step {step}; batch seed ({run.seed}, {stage}, {step})"
            )
        net.zero_grad()
        loss.backward()
        if run.grad_clip is not None:
            clip_global_norm([p for _, p in trainable], run.grad_clip)
        opt.step(lr)

        if disc is not None:
            from .losses import adversarial_losses

            disc.zero_grad()
            _, d_loss = adversarial_losses(Tgt, That.detach(), disc)
            d_loss.backward()
            disc_opt.step(lr)

        curve.append([step] + report.as_row())
        if step_hook is not None:
            step_hook(step, net)
        if log is not None and (step % 100 == 0 or step == iterations - 1):
            log(f"stage {stage} step {step}: total {report.total:.5f} lr {lr:.2e}")
        if (step + 1) % run.checkpoint_every == 0 and step + 1 < iterations:
            save(step + 1)

    save(iterations)
    result = StageResult(net=net, curve=curve, checkpoint=ckpt_path)
    if test_arrays is not None:
        result.evaluation = evaluate(net, test_arrays, run.eval_batch)
        result.evaluation.report.write_csv(out_dir / f"stage{stage}_eval.csv")
        (out_dir / f"stage{stage}_eval_summary.json").write_text(
            json.dumps(result.evaluation.summary(), sort_keys=True, indent=2)
        )
    return result


def _check_config_echo(saved: dict, current: dict) -> None:
    diffs = config_diff(saved, current, ignore={("run", "iterations"), ("run", "out_dir")})
    if diffs:
        raise ContractError("checkpoint config differs from the current config:\n" + "\n".join(diffs))


def config_diff(a: dict, b: dict, ignore=frozenset()) -> list:
    out = []
    for section in sorted(set(a) | set(b)):
        sa, sb = a.get(section, {}), b.get(section, {})
        for key in sorted(set(sa) | set(sb)):
            if (section, key) in ignore:
                continue
            if sa.get(key) != sb.get(key):
                out.append(f"  {section}.{key}: checkpoint={sa.get(key)!r} current={sb.get(key)!r}")
    return out


def _dump_failure(out_dir: Path, stage: int, step: int, seed: int, idx, report: LossReport) -> None:
    diag = {
        "stage": stage, "step": step, "batch_seed": [seed, stage, step],
        "batch_indices": [int(i) for i in idx],
        "losses": {c: repr(getattr(report, c)) for c in LossReport.columns},
    }
    (out_dir / "numeric_failure.json").write_text(json.dumps(diag, sort_keys=True, indent=2))


# -- protocols ----------------------------------------------------------------------
def init_network(cfg: Config) -> Module:
    return build_network(cfg.net_config(), np.random.default_rng([cfg.run.seed, 0]))


@dataclass
class RunResult:
    variant: str
    seed: int
    stages: list
    out_dir: Path

    @property
    def final(self) -> StageResult:
        return self.stages[-1]


def train_two_stage(cfg: Config, out_dir, stage1: Optional[StageResult] = None,
                    log: Optional[Callable] = None) -> RunResult:
    """Stage 1 to the budget (or plateau), then freeze it and train stage 2.

    A precomputed ``stage1`` result (same seed and settings) may be passed to
    share work with the single-stage counterpart.
    """
    run = cfg.run
    out_dir = Path(out_dir)
    train = load_split(cfg, "train")
    test = load_split(cfg, "test")
    if stage1 is None:
        stage1 = train_stage(init_network(cfg), train, cfg, out_dir, 1, test_arrays=test, log=log)
    plateaued = has_plateaued(stage1.curve, run.plateau_window, run.plateau_tol)
    if log is not None:
        log(f"stage 1 {'plateaued' if plateaued else 'budget exhausted'}; training stage 2")

    two = build_two_stage(stage1.net, np.random.default_rng([run.seed, 2]), cfg.stage_plan())
    two.check_frozen()
    frozen = {n: p.data.copy() for n, p in two.stage1.named_parameters()}

    def audit(step, net):
        for name, p in net.stage1.named_parameters():
            if p.requires_grad or (p.grad is not None and np.any(p.grad)):
                raise ContractError(f"stage-1 parameter {name} received a gradient at stage-2 step {step}")

    iters = run.stage2_iterations if run.stage2_iterations is not None else run.iterations
    stage2 = train_stage(two, train, cfg, out_dir, 2, iterations=iters, test_arrays=test,
                         step_hook=audit, log=log)
    for name, p in two.stage1.named_parameters():
        if not np.array_equal(p.data, frozen[name]):
            raise ContractError(f"stage-1 parameter {name} changed during stage-2 training")
    return RunResult(run.variant, run.seed, [stage1, stage2], out_dir)


def run_training(cfg: Config, out_dir=None, resume: Optional[str] = None,
                 log: Optional[Callable] = None) -> RunResult:
    """Train the configured variant (one or two stages)."""
    out_dir = Path(out_dir or cfg.run.out_dir)
    if VARIANTS[cfg.run.variant][3] == 1:
        net = init_network(cfg)
        res = train_stage(net, load_split(cfg, "train"), cfg, out_dir, 1,
                          test_arrays=load_split(cfg, "test"), resume=resume, log=log)
        return RunResult(cfg.run.variant, cfg.run.seed, [res], out_dir)
    if resume is not None:
        raise ContractError("resume is supported for single-stage variants only")
    return train_two_stage(cfg, out_dir, log=log)


# -- ablation ------------------------------------------------------------------------
ABLATION_VARIANTS = ("w/o-FI", "ReLU-only", "UCS", "UCT", "UAS", "UAT")
TABLE_COLUMNS = ("variant", "seed", "psnr_T", "ssim_T", "psnr_R", "ssim_R", "final_loss")


def _variant_dir(variant: str) -> str:
    return variant.replace("/", "")


def run_ablation_suite(cfg: Config, out_dir, variants=ABLATION_VARIANTS, seeds=(0, 1, 2),
                       log: Optional[Callable] = None) -> list:
    """Train every variant for every seed; write ``table.csv`` and return its rows.

    Two-stage variants reuse the stage 1 of their single-stage counterpart
    trained with the same seed.  Table metrics are recomputed from the
    per-image evaluation CSVs.  Re-running into the same directory skips
    finished runs and resumes interrupted single-stage runs from their last
    checkpoint, provided the saved config matches.
    """
    out_dir = Path(out_dir)
    results = {}
    for seed in seeds:
        for variant in variants:
            vcfg = cfg.override("run", variant=variant, seed=seed)
            run_dir = out_dir / _variant_dir(variant) / f"seed{seed}"
            two_stage = VARIANTS[vcfg.run.variant][3] == 2
            done = _finished_stage(run_dir, 2 if two_stage else 1, vcfg)
            if two_stage:
                base = results.get((single_stage_counterpart(variant), seed))
                stage1 = base.stages[0] if base is not None else None
                if done is not None and stage1 is not None:
                    results[(variant, seed)] = RunResult(variant, seed, [stage1, done], run_dir)
                else:
                    results[(variant, seed)] = train_two_stage(vcfg, run_dir, stage1, log=log)
            elif done is not None:
                results[(variant, seed)] = RunResult(variant, seed, [done], run_dir)
            else:
                resume = _resumable(run_dir / "stage1.ckpt", vcfg)
                results[(variant, seed)] = run_training(vcfg, run_dir, resume=resume, log=log)
    rows = []
    for variant in variants:
        for seed in seeds:
            res = results[(variant, seed)]
            stage = len(res.stages)
            report = MetricsReport.read_csv(res.out_dir / f"stage{stage}_eval.csv")
            s = report.summary()
            rows.append([variant, seed, s["psnr_T"], s["ssim_T"], s["psnr_R"], s["ssim_R"],
                         res.final.final_loss()])
    write_table(out_dir / "table.csv", rows)
    return rows


def _matching_meta(ckpt: Path, cfg: Config) -> Optional[dict]:
    if not ckpt.exists():
        return None
    meta, _ = load_checkpoint(ckpt)
    if config_diff(meta.get("config", {}), cfg.to_dict(), ignore={("run", "out_dir")}):
        return None
    return meta


def _finished_stage(run_dir: Path, stage: int, cfg: Config) -> Optional[StageResult]:
    """A completed, evaluated stage already on disk for exactly this config."""
    ckpt = run_dir / f"stage{stage}.ckpt"
    if not (run_dir / f"stage{stage}_eval.csv").exists():
        return None
    meta = _matching_meta(ckpt, cfg)
    if meta is None or meta["step"] != meta["iterations"]:
        return None
    net, _ = load_network(ckpt)
    return StageResult(net=net, curve=read_curve(run_dir / f"stage{stage}_curve.csv"), checkpoint=ckpt)


def _resumable(ckpt: Path, cfg: Config) -> Optional[str]:
    meta = _matching_meta(ckpt, cfg)
    if meta is None or not 0 < meta["step"] < meta["iterations"]:
        return None
    return str(ckpt)


def write_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TABLE_COLUMNS)
        for row in rows:
            out.writerow([row[0], int(row[1])] + [repr(float(v)) for v in row[2:]])


def read_table(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [[r[0], int(r[1])] + [float(v) for v in r[2:]] for r in reader]


def table_means(rows) -> dict:
    """Seed means per variant: ``{variant: {column: mean}}``."""
    out = {}
    for variant in dict.fromkeys(r[0] for r in rows):
        sel = [r for r in rows if r[0] == variant]
        out[variant] = {c: float(np.mean([r[i] for r in sel])) for i, c in enumerate(TABLE_COLUMNS) if i >= 2}
    return out
