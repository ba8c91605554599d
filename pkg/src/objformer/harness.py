"""Training, evaluation and experiment sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .autograd import AdamW, no_grad, ops
from .autograd.ops import ConfigurationError
from .data.dataset import LabeledBatch, make_batch
from .data.sample import SamplePair
from .data.transforms import DIRECTIONS, apply_registration_offset, augment, random_registration
from .losses import LossBundle, bcd_loss, scd_losses
from .metrics import MetricsReport, SCDAccumulator, binary_confusion, binary_from_cm
from .net import ModelConfig, ObjFormer

log = logging.getLogger(__name__)

MULTISCALE_MODES = ("train", "test", "both", "off")
REG_OFFSETS = (0, 4, 8, 12, 16)
LR_SCHEDULES = ("constant", "cosine")


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class RunConfig:
    task: str = "bcd"
    preset: str = "tiny"
    lr: float = 1e-4
    weight_decay: float = 5e-3
    lr_schedule: str = "constant"  # "constant" or "cosine" (decay to 0 at ``iterations``)
    batch_size: int = 16
    iterations: Optional[int] = None  # None: 7500 (BCD) / 10000 (SCD)
    seed: int = 0
    object_scales: tuple[int, ...] = (1500,)
    fusion: str = "mean"
    cce: bool = True
    multiscale: str = "off"
    augment: bool = True
    registration_aug: int = 0  # max random optical offset during training, 0 = off
    eval_every: int = 100
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.object_scales = tuple(int(s) for s in self.object_scales)
        if self.iterations is None:
            self.iterations = 7500 if self.task == "bcd" else 10000

    def validate(self) -> "RunConfig":
        if self.task not in ("bcd", "scd"):
            raise ConfigurationError("task must be 'bcd' or 'scd'")
        if self.preset not in ("paper", "tiny"):
            raise ConfigurationError("preset must be 'paper' or 'tiny'")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise ConfigurationError("lr must be > 0 and weight_decay >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 0:
            raise ConfigurationError("batch_size >= 1, iterations >= 0 and eval_every >= 0 required")
        if not self.object_scales or min(self.object_scales) < 1:
            raise ConfigurationError("need at least one positive object scale")
        if self.multiscale not in MULTISCALE_MODES:
            raise ConfigurationError(f"multiscale must be one of {MULTISCALE_MODES}")
        if self.registration_aug < 0:
            raise ConfigurationError("registration_aug must be >= 0")
        self.model_config()  # validates fusion and the preset
        return self

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the update that produces ``iteration`` (1-based)."""
        if self.lr_schedule == "constant" or not self.iterations:
            return self.lr
        frac = min(max(iteration - 1, 0) / self.iterations, 1.0)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_preset(self.preset, task=self.task, fusion=self.fusion)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_scales"] = list(self.object_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)

    @property
    def train_scales(self) -> tuple[int, ...]:
        return self.object_scales if self.multiscale in ("train", "both") else self.object_scales[:1]

    @property
    def test_scales(self) -> tuple[int, ...]:
        return self.object_scales if self.multiscale in ("test", "both") else self.object_scales[:1]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict_probs(model: ObjFormer, samples: Sequence[SamplePair], scales: Sequence[int], batch_size: int = 16):
    """Softmax probabilities averaged over ``scales`` (one forward per scale).

    Returns ``(p_change (N, 2, H, W), p_lcm_opt (N, C, H, W) or None)``;
    land-cover probabilities cover the foreground classes 1..C.
    """
    strides = model.cfg.stage_strides()
    p_bcd, p_lcm = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            acc_b = acc_l = None
            for sc in scales:
                out = model(make_batch(chunk, sc, strides).inputs())
                if model.cfg.task == "scd":
                    logits, _, lcm_opt = out
                    pl = ops.softmax(ops.slice_(lcm_opt, (slice(None), slice(1, None))), axis=1).data
                    acc_l = pl if acc_l is None else acc_l + pl
                else:
                    logits = out
                pb = ops.softmax(logits, axis=1).data
                acc_b = pb if acc_b is None else acc_b + pb
            p_bcd.append(acc_b / len(scales))
            if acc_l is not None:
                p_lcm.append(acc_l / len(scales))
    return np.concatenate(p_bcd), (np.concatenate(p_lcm) if p_lcm else None)


@dataclass
class Evaluation:
    report: MetricsReport
    pred_bcd: np.ndarray
    pred_lcm: Optional[np.ndarray]
    p_change: np.ndarray
    changed_acc: Optional[float] = None
    unchanged_acc: Optional[float] = None


def evaluate(model: ObjFormer, samples: Sequence[SamplePair], scales: Sequence[int]) -> Evaluation:
    p_bcd, p_lcm = predict_probs(model, samples, scales)
    pred_bcd = p_bcd.argmax(axis=1)
    y_bcd = np.stack([s.y_bcd for s in samples])
    report = binary_from_cm(binary_confusion(pred_bcd, y_bcd))
    ev = Evaluation(report, pred_bcd, None, p_bcd[:, 1])
    if p_lcm is not None:
        pred_lcm = p_lcm.argmax(axis=1) + 1
        ev.pred_lcm = pred_lcm
        if all(s.y_opt_full is not None for s in samples):
            y_full = np.stack([s.y_opt_full for s in samples])
            y_osm = np.stack([s.y_osm for s in samples])
            SCDAccumulator(model.cfg.n_classes_lcm).update(pred_lcm, y_full, pred_bcd, y_bcd, y_osm).report(report)
            hit = pred_lcm == y_full
            ch, un = y_bcd == 1, y_bcd == 0
            ev.changed_acc = float(hit[ch].mean()) if ch.any() else 0.0
            ev.unchanged_acc = float(hit[un].mean()) if un.any() else 0.0
    report.params = model.param_count()
    return ev


def selection_metric(task: str, rep: MetricsReport) -> float:
    """Checkpoint selection: highest KC for BCD, highest trKC for SCD."""
    return rep.kc if task == "bcd" else rep.tr_kc


# ---------------------------------------------------------------------------
# training


@dataclass
class StepRecord:
    iteration: int
    scale: int
    l_bcd: float
    l_lcm_osm: float = 0.0
    l_lcm_opt: float = 0.0
    l_cce: float = 0.0
    l_total: float = 0.0
    seconds: float = 0.0


class Trainer:
    """Owns the model, optimizer and RNG; one call to :meth:`step` is one
    optimizer update on a freshly sampled batch."""

    def __init__(self, cfg: RunConfig, train: Sequence[SamplePair], test: Sequence[SamplePair] = (),
                 run_dir: Optional[Path] = None):
        self.cfg = cfg.validate()
        self.train = list(train)
        self.test = list(test)
        if not self.train and cfg.iterations:
            raise ConfigurationError("no training samples")
        for s in self.train:
            missing = set(cfg.train_scales) - set(s.object_maps)
            if missing:
                raise ConfigurationError(f"sample {s.id} lacks object maps for scales {sorted(missing)}")
        self.model = ObjFormer(cfg.model_config(), seed=cfg.seed)
        self.opt = AdamW(self.model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.iteration = 0
        self.history: list[StepRecord] = []
        self.curve: list[dict] = []
        self.best: Optional[float] = None
        self.run_dir = Path(run_dir) if run_dir else None
        self.last_batch: Optional[LabeledBatch] = None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
            (self.run_dir / "run.json").write_text(json.dumps({"seed": cfg.seed, "git": git_describe()}, indent=1))

    # -- batches -----------------------------------------------------------
    def sample_batch(self) -> tuple[LabeledBatch, int]:
        rng = self.rng
        idx = rng.choice(len(self.train), size=min(self.cfg.batch_size, len(self.train)), replace=False)
        scales = self.cfg.train_scales
        scale = int(scales[int(rng.integers(0, len(scales)))]) if len(scales) > 1 else int(scales[0])
        samples = []
        for i in idx:
            s = self.train[int(i)]
            if self.cfg.augment:
                s = augment(s, rng)
            if self.cfg.registration_aug:
                s = random_registration(s, rng, self.cfg.registration_aug)
            samples.append(s)
        return make_batch(samples, scale, self.model.cfg.stage_strides()), scale

    def losses(self, batch: LabeledBatch) -> LossBundle:
        out = self.model(batch.inputs())
        if self.cfg.task == "bcd":
            l = bcd_loss(out, batch.y_bcd)
            zero = ops.scale(l, 0.0)
            return LossBundle(l, zero, zero, zero, l)
        return scd_losses(out, batch.y_bcd, batch.y_osm, batch.y_opt_partial, use_cce=self.cfg.cce)

    def step(self) -> StepRecord:
        t0 = time.perf_counter()
        batch, scale = self.sample_batch()
        self.last_batch = batch
        bundle = self.losses(batch)
        vals = bundle.values()
        if not all(math.isfinite(v) for v in vals.values()):
            self._dump_diagnostics(batch, vals)
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration + 1}: {vals}")
        self.opt.zero_grad()
        bundle.l_total.backward()
        self.opt.lr = self.cfg.lr_at(self.iteration + 1)
        self.opt.step()
        self.iteration += 1
        rec = StepRecord(self.iteration, scale, **vals, seconds=time.perf_counter() - t0)
        self.history.append(rec)
        return rec

    def _dump_diagnostics(self, batch: LabeledBatch, vals: dict) -> None:
        diag = {
            "iteration": self.iteration + 1,
            "losses": {k: repr(v) for k, v in vals.items()},
            "x_osm": {"mean": float(batch.x_osm.mean()), "std": float(batch.x_osm.std())},
            "x_opt": {"mean": float(batch.x_opt.mean()), "std": float(batch.x_opt.std())},
            "y_bcd_counts": {str(k): int(v) for k, v in zip(*np.unique(batch.y_bcd, return_counts=True))},
            "param_abs_max": {k: float(np.abs(p.data).max()) for k, p in self.model.named_parameters().items()},
        }
        text = json.dumps(diag, indent=1)
        log.error("training diverged: %s", text)
        if self.run_dir:
            (self.run_dir / "diverged.json").write_text(text)

    # -- evaluation and bookkeeping -----------------------------------------
    def evaluate(self, samples: Optional[Sequence[SamplePair]] = None, scales=None) -> Evaluation:
        return evaluate(self.model, list(samples if samples is not None else self.test),
                        scales or self.cfg.test_scales)

    def record_eval(self) -> dict:
        ev = self.evaluate()
        row = {"iteration": self.iteration, **{k: v for k, v in ev.report.to_dict().items()
                                                 if isinstance(v, float)}}
        if ev.changed_acc is not None:
            row["changed_acc"] = ev.changed_acc
            row["unchanged_acc"] = ev.unchanged_acc
        self.curve.append(row)
        score = selection_metric(self.cfg.task, ev.report)
        if self.best is None or score > self.best:
            self.best = score
            if self.run_dir:
                self.save(self.run_dir / "best.ckpt", meta={"selection": score})
        return row

    def fit(self, iterations: Optional[int] = None, log_every: int = 100) -> "Trainer":
        total = self.cfg.iterations if iterations is None else iterations
        while self.iteration < total:
            rec = self.step()
            if log_every and rec.iteration % log_every == 0:
                log.info("iter %d loss %.4f (%.3fs)", rec.iteration, rec.l_total, rec.seconds)
            if self.test and self.cfg.eval_every and rec.iteration % self.cfg.eval_every == 0:
                self.record_eval()
        if self.run_dir:
            self.save(self.run_dir / "last.ckpt")
            self.write_logs()
        return self

    def write_logs(self) -> None:
        write_csv(self.run_dir / "train_log.csv", [asdict(r) for r in self.history])
        if self.curve:
            write_csv(self.run_dir / "eval_curve.csv", self.curve)

    # -- checkpoints -----------------------------------------------------------
    def state(self, meta: Optional[dict] = None) -> ckpt.Checkpoint:
        tensors = {k: p.data for k, p in self.model.named_parameters().items()}
        for k, st in self.opt.state.items():
            tensors[f"adam.m/{k}"] = st["m"]
            tensors[f"adam.v/{k}"] = st["v"]
        return ckpt.Checkpoint(
            config={"run": self.cfg.to_dict(), "model": self.model.cfg.to_dict()},
            tensors=tensors,
            step=self.opt.t,
            rng_state=self.rng.bit_generator.state,
            meta={"iteration": self.iteration, "best": self.best, **(meta or {})},
        )

    def save(self, path, meta: Optional[dict] = None) -> None:
        ckpt.save(path, self.state(meta))

    def load_state(self, ck: ckpt.Checkpoint) -> "Trainer":
        params = self.model.named_parameters()
        for k, p in params.items():
            if k not in ck.tensors or ck.tensors[k].shape != p.data.shape:
                raise ckpt.CheckpointError(f"checkpoint lacks a matching tensor for {k}")
            p.data = ck.tensors[k].astype(p.data.dtype, copy=True)
        self.opt.state = {}
        for k in params:
            if f"adam.m/{k}" in ck.tensors:
                self.opt.state[k] = {"m": ck.tensors[f"adam.m/{k}"].copy(), "v": ck.tensors[f"adam.v/{k}"].copy()}
        self.opt.t = ck.step
        if ck.rng_state is not None:
            self.rng.bit_generator.state = ck.rng_state
        self.iteration = int(ck.meta.get("iteration", ck.step))
        self.best = ck.meta.get("best")
        return self

    @classmethod
    def resume(cls, path, train, test=(), run_dir=None, **overrides) -> "Trainer":
        ck = ckpt.load(path)
        cfg = RunConfig.from_dict({**ck.config["run"], **overrides})
        return cls(cfg, train, test, run_dir).load_state(ck)


def load_model(path) -> ObjFormer:
    ck = ckpt.load(path)
    model = ObjFormer(ModelConfig.from_dict(ck.config["model"]))
    for k, p in model.named_parameters().items():
        p.data = ck.tensors[k].astype(p.data.dtype, copy=True)
    return model


def write_csv(path, rows: Sequence[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# sweeps


def registration_sweep(model: ObjFormer, samples: Sequence[SamplePair], scales: Sequence[int],
                       offsets: Sequence[int] = REG_OFFSETS, directions: Sequence[str] = DIRECTIONS):
    """Evaluate with the optical raster shifted by each offset/direction.

    Returns ``(averaged rows, per-direction rows)``; the averaged row of an
    offset is the mean of its per-direction metrics.
    """
    per_dir, avg = [], []
    keys = ("rec", "pre", "f1", "oa", "kc") if model.cfg.task == "bcd" else ("clf_oa", "clf_kc", "cd_kc", "tr_oa",
                                                                              "tr_kc")
    for off in offsets:
        rows = []
        for d in directions:
            shifted = [apply_registration_offset(s, off, d) for s in samples]
            rep = evaluate(model, shifted, scales).report
            rows.append({"offset": off, "direction": d, **{k: getattr(rep, k) for k in keys}})
        per_dir += rows
        avg.append({"offset": off, **{k: _average([r[k] for r in rows]) for k in keys}})
    return avg, per_dir


def _average(vals: Sequence[float]) -> float:
    # a mean of equal floats can be off by one ulp; keep such rows exact
    if all(v == vals[0] for v in vals):
        return float(vals[0])
    return float(np.mean(vals))


def update_heatmap(p_change: np.ndarray) -> np.ndarray:
    """8-bit per-pixel changed-class confidence."""
    return np.clip(np.rint(p_change * 255.0), 0, 255).astype(np.uint8)


def pooling_sweep(base: RunConfig, train, test, fusions: Sequence[str] = ("mean", "max", "min", "mean+max")):
    """Train one model per token statistic with otherwise identical settings."""
    rows = []
    for fu in fusions:
        tr = Trainer(replace(base, fusion=fu), train, test).fit(log_every=0)
        rep = tr.evaluate().report
        keys = ("f1", "kc") if base.task == "bcd" else ("clf_kc", "cd_kc", "tr_oa", "tr_kc")
        rows.append({"fusion": fu, **{k: getattr(rep, k) for k in keys}})
    return rows


# ---------------------------------------------------------------------------
# attention benchmarks


def bench_attention_macs(sizes: Sequence[int], tokens: Sequence[int], channels: int = 32, heads: int = 1,
                         reduction: int = 8) -> list[dict]:
    """MACs of one self-attention layer per (map side, token count)."""
    from .attention import attention_mac_terms

    rows = []
    for side in sizes:
        van = attention_mac_terms("vanilla", side, side, channels, heads)
        sr = attention_mac_terms("spatial_reduction", side, side, channels, heads, reduction=reduction)
        for n in tokens:
            if n > side * side:
                continue
            obj = attention_mac_terms("object_guided", side, side, channels, heads, n_tokens=n)
            rows.append({
                "hw": side * side,
                "n_tokens": n,
                "vanilla": sum(van.values()),
                "spatial_reduction": sum(sr.values()),
                "object_guided": sum(obj.values()),
                "ratio": sum(van.values()) / sum(obj.values()),
                "score_ratio": van["scores"] / obj["scores"],
            })
    return rows


def _vanilla_attention(x: np.ndarray, wq, wk, wv, wo, heads: int, chunk: int = 1024) -> np.ndarray:
    """Pixel-level multi-head self-attention on (HW, C), queries in chunks."""
    n, c = x.shape
    dh = c // heads
    q = (x @ wq).reshape(n, heads, dh).transpose(1, 0, 2)
    k = (x @ wk).reshape(n, heads, dh).transpose(1, 0, 2)
    v = (x @ wv).reshape(n, heads, dh).transpose(1, 0, 2)
    out = np.empty_like(q)
    for s in range(0, n, chunk):
        sc = q[:, s : s + chunk] @ k.transpose(0, 2, 1) / math.sqrt(dh)
        sc -= sc.max(axis=-1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=-1, keepdims=True)
        out[:, s : s + chunk] = sc @ v
    return out.transpose(1, 0, 2).reshape(n, c) @ wo


def time_attention(side: int = 128, n_tokens: int = 1500, channels: int = 32, heads: int = 1,
                   repeats: int = 1, seed: int = 0) -> dict:
    """Wall-clock seconds of vanilla vs object-guided self-attention on a
    ``side x side`` map (forward only, float32)."""
    from .attention import AttentionWeights, object_self_attention
    from .autograd import Tensor
    from .segmentation import slic

    rng = np.random.default_rng(seed)
    feat = rng.standard_normal((1, channels, side, side)).astype(np.float32)
    img = (rng.random((side, side, 3)) * 255).astype(np.uint8)
    labels = slic(img, n_tokens, iters=2).labels[None]
    w = AttentionWeights.init(channels, heads, rng)
    x = feat[0].reshape(channels, -1).T.copy()
    mats = [w.wq.data, w.wk.data, w.wv.data, w.wo.data]

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    with no_grad():
        t_obj = best(lambda: object_self_attention(Tensor(feat), labels, w))
    t_van = best(lambda: _vanilla_attention(x, *mats, heads=heads))
    return {"hw": side * side, "n_tokens": int(labels.max()) + 1, "vanilla_s": t_van, "object_guided_s": t_obj,
            "speedup": t_van / t_obj}
