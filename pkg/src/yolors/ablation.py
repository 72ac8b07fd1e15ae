"""Train/evaluate toggle variants under identical seeds and data order."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from . import detector, metrics
from .detector import ABLATION_VARIANTS, ModelConfig, TrainingDiverged

logger = logging.getLogger(__name__)

REQUIRED = ("full", "no-rfaconv", "no-bifpn", "no-self-attention", "no-rfafpn", "no-caa", "no-acmix")


def resolve_variants(names) -> list:
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    out = []
    for n in names:
        if n not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {n!r}; choose from {', '.join(ABLATION_VARIANTS)}")
        out.append(n)
    if not out:
        raise ValueError("no variants given")
    return out


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: metrics.EvalReport | None
    flops: int
    error: str | None = None
    minority_ap50: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = {"variant": self.variant, "seed": self.seed, "flops": self.flops, "error": self.error}
        if self.report is not None:
            r = self.report
            d.update(
                precision=r.precision["micro"],
                recall=r.recall["micro"],
                map50=r.map50,
                map50_95=r.map50_95,
                f1=r.f1["micro"],
                ap50={str(c): row[0.5] for c, row in r.ap.items()},
            )
        return d


def run_ablation(base: ModelConfig, variants, train_set, val_set, seeds=(0,)) -> list:
    """One row per (variant, seed); diverged runs are kept with their error."""
    rows = []
    for seed in seeds:
        for name in resolve_variants(variants):
            cfg = base.with_toggles(seed=seed, **ABLATION_VARIANTS[name])
            flops = detector.count_flops(cfg, {}).total
            try:
                res = detector.train(train_set, cfg)
                rep = detector.evaluate_model(res.model, val_set)
                rows.append(AblationRow(name, seed, rep, flops))
            except (TrainingDiverged, FloatingPointError) as e:
                logger.warning("variant %s seed %d diverged: %s", name, seed, e)
                rows.append(AblationRow(name, seed, None, flops, str(e)))
            logger.info("ablation %s", json.dumps(rows[-1].summary()))
    return rows


def to_json(rows) -> str:
    return json.dumps([r.summary() for r in rows], indent=2, sort_keys=True)


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}"


def to_markdown(rows) -> str:
    lines = [
        "| Variant | Seed | P (%) | R (%) | mAP@.5 (%) | mAP@.5-.95 (%) | F1 | MFLOPs |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        s = r.summary()
        if r.error:
            cells = ["diverged"] * 4 + ["-"]
        else:
            cells = [_pct(s["precision"]), _pct(s["recall"]), _pct(s["map50"]), _pct(s["map50_95"]), f"{s['f1']:.2f}"]
        lines.append(f"| {r.variant} | {r.seed} | " + " | ".join(cells) + f" | {r.flops / 1e6:.2f} |")
    return "\n".join(lines) + "\n"
