"""Experiment runs: one JSON config drives data, scattering, model, training
and evaluation. All randomness comes from ``seed`` (model init and batch
order) and, for generated data, ``dataset.synthetic.seed``.

Run directory layout::

    <output_dir>/config.json   resolved config
    <output_dir>/model.sgw     SGW1 checkpoint
    <output_dir>/loss.csv      per-epoch loss, "# key=value" header
    <output_dir>/eval/metrics.csv, summary.json, masks/*.png, probs/*.png
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .metrics import METRIC_COLUMNS, MetricsReport, report
from .nets import KINDS, ModelSpec, build_model
from .pipeline import generate_synthetic_dataset, load_dataset, prepare, save_png
from .pipeline.datasets import LAYOUTS, Prepared, to_chw
from .pipeline.localize import extract_roi, localize_od
from .scattering import ScatteringConfig, build_filter_bank, count_paths, scatter_batch
from .training import ArrayDataset, ConfigError, TrainConfig, infer, train

log = logging.getLogger(__name__)

CONFIG_KEYS = ("seed", "output_dir", "dataset", "scattering", "model", "train", "eval")


@dataclass
class DatasetSection:
    layout: str = "synthetic"
    root: str | None = None
    target: str = "od"
    size: int = 64
    channels: int = 3
    roi: bool = False
    train_split: str = "train"
    eval_split: str = "test"
    synthetic: dict | None = None   # {"task", "n_train", "n_test", "seed", "size"}

    def identity(self) -> dict:
        """What must agree for two runs to count as the same dataset."""
        d = asdict(self)
        if d["root"] is not None:
            d["root"] = str(Path(d["root"]).resolve())
        return {k: d[k] for k in ("layout", "root", "target", "size", "channels", "roi",
                                  "eval_split", "synthetic")}


@dataclass
class EvalSection:
    threshold: float = 0.5
    hausdorff_variant: str = "max"
    fit_hc: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    scattering: dict = field(default_factory=lambda: {"J": 3, "L": 8, "order": 2})
    model: dict = field(default_factory=lambda: {"kind": "dunet", "base_channels": 16})
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived --------------------------------------------------------------

    def scattering_config(self) -> ScatteringConfig:
        s = self.dataset.size
        return ScatteringConfig(input_size=(s, s), **self.scattering)

    def model_spec(self) -> ModelSpec:
        m = dict(self.model)
        kind = m.get("kind", "dunet")
        cfg = self.scattering_config()
        sc_pools = int(m.get("sc_pools", 0))
        m.setdefault("depth", cfg.J + sc_pools)
        m.setdefault("in_channels", self.dataset.channels)
        m.setdefault("input_size", (self.dataset.size, self.dataset.size))
        if "sc_channels" not in m:
            m["sc_channels"] = count_paths(cfg) * m["in_channels"] if kind != "unet" else 0
        return ModelSpec.from_dict(m)

    def problems(self) -> list[str]:
        out = []
        d = self.dataset
        if d.layout not in LAYOUTS:
            out.append(f"dataset.layout must be one of {LAYOUTS}, got {d.layout!r}")
        if d.root is None and d.synthetic is None:
            out.append("dataset needs either root or synthetic parameters")
        if d.root is not None and not Path(d.root).is_dir():
            out.append(f"dataset.root {d.root} does not exist")
        if d.synthetic is not None:
            unknown = set(d.synthetic) - {"task", "n_train", "n_test", "seed", "size"}
            if unknown:
                out.append(f"unknown dataset.synthetic fields: {sorted(unknown)}")
            for k in ("n_train", "n_test"):
                if int(d.synthetic.get(k, 1)) < 1:
                    out.append(f"dataset.synthetic.{k} must be >= 1")
        if d.size < 1 or d.channels not in (1, 3):
            out.append("dataset.size must be >= 1 and dataset.channels 1 or 3")
        try:
            cfg = self.scattering_config()
            cfg.validate()
        except (TypeError, ValueError) as exc:
            out.append(f"scattering: {exc}")
            cfg = None
        try:
            spec = self.model_spec()
            spec.validate()
            if cfg is not None:
                spec.check_scattering(cfg)
        except (TypeError, ValueError) as exc:
            out.append(f"model: {exc}")
        out += self.train.problems()
        if self.eval.hausdorff_variant not in ("max", "modified"):
            out.append("eval.hausdorff_variant must be 'max' or 'modified'")
        if not 0 < self.eval.threshold < 1:
            out.append("eval.threshold must be in (0, 1)")
        if self.train.warm_start_checkpoint and not Path(self.train.warm_start_checkpoint).is_file():
            out.append(f"warm-start checkpoint {self.train.warm_start_checkpoint} not found")
        return out

    def validate(self) -> None:
        probs = self.problems()
        if probs:
            raise ConfigError("invalid config: " + "; ".join(probs))

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {"seed": self.seed, "output_dir": self.output_dir, "dataset": asdict(self.dataset),
                "scattering": dict(self.scattering), "model": dict(self.model),
                "train": self.train.to_dict(), "eval": asdict(self.eval)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            ds = DatasetSection(**d.get("dataset", {}))
            ev = EvalSection(**d.get("eval", {}))
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from None
        cfg = cls(seed=int(d.get("seed", 0)), output_dir=str(d.get("output_dir", "runs/default")),
                  dataset=ds, scattering=dict(d.get("scattering", {"J": 3, "L": 8, "order": 2})),
                  model=dict(d.get("model", {"kind": "dunet"})),
                  train=TrainConfig.from_dict(d.get("train", {})), eval=ev)
        cfg.train.seed = cfg.seed
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)

    def with_overrides(self, seed=None, warm_start=None, output_dir=None) -> "ExperimentConfig":
        cfg = replace(self, train=replace(self.train))
        if seed is not None:
            cfg.seed = cfg.train.seed = int(seed)
        if warm_start is not None:
            cfg.train.warm_start_checkpoint = str(warm_start)
        if output_dir is not None:
            cfg.output_dir = str(output_dir)
        return cfg


# ---------------------------------------------------------------------------
# data

@dataclass
class Split:
    ids: list[str]
    raw: np.ndarray              # (N, C, S, S) in [0, 1], what the scattering sees
    masks: list[np.ndarray | None]
    pixel_sizes: list[float | None]
    sc: np.ndarray | None = None

    def network_input(self) -> np.ndarray:
        return standardize(self.raw)

    def arrays(self) -> ArrayDataset:
        keep = [i for i, m in enumerate(self.masks) if m is not None]
        if not keep:
            raise ConfigError("split has no samples with ground truth")
        masks = np.stack([self.masks[i][None] for i in keep]).astype(np.float32)
        return ArrayDataset(self.network_input()[keep], masks,
                            None if self.sc is None else self.sc[keep], [self.ids[i] for i in keep])


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-image, per-channel zero mean and unit variance (float32)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=(2, 3), keepdims=True)
    sd = x.std(axis=(2, 3), keepdims=True)
    return ((x - mu) / np.where(sd > 1e-6, sd, 1.0)).astype(np.float32)


def _synthetic_split(ds: DatasetSection, split: str) -> list[Prepared]:
    p = ds.synthetic
    task = p.get("task", "fundus")
    n = int(p.get("n_train" if split == "train" else "n_test", 8))
    # disjoint seeds so train and test never share samples
    seed = int(p.get("seed", 0)) * 2 + (0 if split == "train" else 1)
    src = int(p.get("size", ds.size))
    out = []
    for s in generate_synthetic_dataset(n, seed, task, src):
        mask = s.cup if ds.target == "oc" and s.cup is not None else s.mask
        img, px = s.image, s.pixel_size_mm
        if ds.roi:
            m = min(img.shape[:2])
            box = localize_od(img, max(2, int(0.06 * m)), max(3, int(0.25 * m)))
            img = extract_roi(img, box, ds.size)
            mask = extract_roi(mask.astype(np.float64), box, ds.size) >= 0.5
            scale = ds.size / box.side
        else:
            from .pipeline.localize import resize_bilinear
            img = resize_bilinear(img, ds.size)
            mask = resize_bilinear(mask.astype(np.float64), ds.size) >= 0.5
            scale = ds.size / src
        if px is not None:
            px = px / scale
        out.append(Prepared(s.id, to_chw(img, ds.channels), mask, px))
    return out


def load_split(cfg: ExperimentConfig, split: str, with_sc: bool) -> Split:
    ds = cfg.dataset
    if ds.root is None:
        items = _synthetic_split(ds, split)
    else:
        res = load_dataset(ds.root, ds.layout, ds.target)
        for e in res.errors:
            warnings.warn(f"dataset: {e}", stacklevel=2)
        recs = [r for r in res if r.split == split]
        items = [prepare(r, ds.size, ds.channels, roi=ds.roi) for r in recs]
    if not items:
        raise ConfigError(f"split {split!r} is empty")
    raw = np.stack([p.image for p in items]).astype(np.float32)
    sc = None
    if with_sc:
        scfg = cfg.scattering_config()
        sc = scatter_batch(raw, build_filter_bank(scfg), scfg)
    return Split([p.id for p in items], raw, [p.mask for p in items],
                 [p.pixel_size_mm for p in items], sc)


# ---------------------------------------------------------------------------
# runs

def _header(cfg: ExperimentConfig, spec: ModelSpec) -> dict:
    return {"seed": cfg.seed, "kind": spec.kind, "depth": spec.depth,
            "base_channels": spec.base_channels, "threads": _threads()}


def _threads():
    from .training import thread_count
    return thread_count() or "default"


def run_train(cfg: ExperimentConfig, data: Split | None = None, on_epoch=None):
    cfg.validate()
    spec = cfg.model_spec()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    if data is None:
        data = load_split(cfg, cfg.dataset.train_split, spec.uses_sc)
    g = build_model(spec, seed=cfg.seed)
    result = train(g, data.arrays(), cfg.train, out, header=_header(cfg, spec), on_epoch=on_epoch)
    return g, result


def run_eval(cfg: ExperimentConfig, ckpt=None, split: str | None = None, data: Split | None = None,
             out_dir=None) -> MetricsReport:
    """Predict a split and write masks, probability maps, metrics CSV and summary."""
    spec = cfg.model_spec()
    split = split or cfg.dataset.eval_split
    ckpt = Path(ckpt) if ckpt is not None else Path(cfg.output_dir) / "model.sgw"
    state = checkpoint.load(ckpt)
    g = build_model(spec, seed=cfg.seed)
    g.load_state(state)
    if data is None:
        data = load_split(cfg, split, spec.uses_sc)
    prob = infer(g, data.network_input(), data.sc)[:, 0]
    thr = cfg.eval.threshold
    preds = [p >= thr for p in prob]
    out = Path(out_dir) if out_dir is not None else Path(cfg.output_dir) / "eval"
    for sid, p, m in zip(data.ids, prob, preds):
        save_png(out / "masks" / f"{sid}.png", m)
        save_png(out / "probs" / f"{sid}.png", np.rint(p.astype(np.float64) * 255).astype(np.uint8))
    meta = {**_header(cfg, spec), "split": split, "checkpoint": ckpt.name}
    rep = report(data.ids, preds, data.masks, data.pixel_sizes, probs=list(prob),
                 hausdorff_variant=cfg.eval.hausdorff_variant, fit_hc=cfg.eval.fit_hc, meta=meta)
    rep.save(out / "metrics.csv", out / "summary.json")
    return rep


# ---------------------------------------------------------------------------
# comparison table

COMPARE_METRICS = ("dice", "miou", "hausdorff_mm", "hc_mm", "entropy")


def fmt_pm(stats: dict) -> str:
    if not stats or stats.get("n", 0) == 0 or not math.isfinite(stats.get("mean", math.nan)):
        return ""
    return f"{stats['mean']:.4f}±{stats['std']:.4f}"


def compare(entries: list[tuple[str, dict, dict]]) -> str:
    """CSV table, one row per model kind in canonical order.

    ``entries`` holds (kind, dataset identity, per-metric aggregate) for
    each run; runs of the same kind are pooled by averaging their means.
    """
    if not entries:
        raise ConfigError("nothing to compare")
    ident = entries[0][1]
    for kind, other, _ in entries[1:]:
        if other != ident:
            raise ConfigError(f"mismatched datasets across configs ({kind} differs)")
    by_kind: dict[str, list[dict]] = {}
    for kind, _, agg in entries:
        by_kind.setdefault(kind, []).append(agg)
    rows = ["model,runs," + ",".join(COMPARE_METRICS)]
    for kind in [k for k in KINDS if k in by_kind]:
        aggs = by_kind[kind]
        cells = []
        for m in COMPARE_METRICS:
            if len(aggs) == 1:
                cells.append(fmt_pm(aggs[0].get(m, {})))
                continue
            means = [a[m]["mean"] for a in aggs if a.get(m, {}).get("n", 0)]
            cells.append(fmt_pm({"mean": float(np.mean(means)), "std": float(np.std(means)),
                                 "n": len(means)}) if means else "")
        rows.append(f"{kind},{len(aggs)}," + ",".join(cells))
    return "\n".join(rows) + "\n"


def load_summary(run_dir) -> tuple[str, dict, dict]:
    """(kind, dataset identity, aggregate) for a finished run directory."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    summ = run_dir / "eval" / "summary.json"
    if not summ.exists():
        raise ConfigError(f"{run_dir} has no eval/summary.json; run eval first")
    agg = json.loads(summ.read_text())["aggregate"]
    return cfg.model_spec().kind, cfg.dataset.identity(), agg


__all__ = ["ExperimentConfig", "DatasetSection", "EvalSection", "Split", "load_split", "run_train",
           "run_eval", "compare", "load_summary", "standardize", "METRIC_COLUMNS"]
