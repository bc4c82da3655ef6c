"""Grid runner over auxiliary weight, thought count and variant.

Every cell trains from the same seed and is evaluated on the same data.
Deltas are relative to the baseline cell (no thoughts) and printed in the
``value (↑ x.xx%)`` style.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

from .config import parse_key_values
from .data import load_jsonl
from .errors import ConfigError
from .training import evaluate, run_training

logger = logging.getLogger(__name__)


@dataclass
class AblationGrid:
    mu: tuple = (0.0, 0.3, 0.5, 0.8)
    n_thoughts: tuple = (5, 10)
    variants: tuple = ("base", "multi")
    include_baseline: bool = True

    def __post_init__(self):
        self.mu = tuple(float(m) for m in self.mu)
        self.n_thoughts = tuple(int(n) for n in self.n_thoughts)
        self.variants = tuple(str(v).lower() for v in self.variants)
        if any(v not in ("base", "multi") for v in self.variants):
            raise ConfigError(f"unknown variant in grid: {self.variants}")
        if any(m < 0 for m in self.mu) or any(n < 0 for n in self.n_thoughts):
            raise ConfigError("grid values must be non-negative")

    @classmethod
    def from_text(cls, text, source="<grid>"):
        return cls(**parse_key_values(text, cls, source))

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))

    def cells(self):
        """``(name, variant, n_thoughts, mu)`` tuples; the baseline comes first."""
        out = []
        if self.include_baseline or 0 in self.n_thoughts:
            out.append(("baseline", "base", 0, 0.0))
        for variant in self.variants:
            for nt in self.n_thoughts:
                if nt == 0:
                    continue
                for mu in self.mu:
                    out.append((f"{variant}_nt{nt}_mu{mu:g}", variant, nt, mu))
        if not out:
            raise ConfigError("ablation grid is empty")
        return out


@dataclass
class CellResult:
    name: str
    variant: str
    n_thoughts: int
    mu: float
    status: str = "ok"
    accuracy: float = None
    bleu: float = None
    accuracy_delta: float = None
    bleu_delta: float = None
    error: str = None


def _run_cell(base_cfg, cell, out_dir, train_samples, eval_samples):
    name, variant, nt, mu = cell
    cfg = base_cfg.replace(variant=variant, n_thoughts=nt, mu=mu)
    cell_dir = None if out_dir is None else os.path.join(out_dir, name)
    try:
        result = run_training(cfg, cell_dir, train_samples=train_samples)
        metrics = evaluate(result.model, eval_samples, cfg)
        if cell_dir is not None:
            with open(os.path.join(cell_dir, "report.json"), "w", encoding="utf-8") as fh:
                json.dump(metrics, fh, indent=2, sort_keys=True)
        return CellResult(name, variant, nt, mu, accuracy=metrics["accuracy"], bleu=metrics["bleu"])
    except Exception as exc:  # one failed cell must not stop the grid
        logger.exception("ablation cell %s failed", name)
        return CellResult(name, variant, nt, mu, status="failed", error=f"{type(exc).__name__}: {exc}")


def _relative_delta(value, base):
    if value is None or base is None or base == 0:
        return None
    return (value - base) / base * 100.0


def run_ablation(base_cfg, grid: AblationGrid = None, out_dir=None, train_samples=None, eval_samples=None,
                 n_jobs=1):
    """Train and evaluate every grid cell; returns a list of :class:`CellResult`."""
    grid = grid or AblationGrid()
    if train_samples is None:
        train_samples = load_jsonl(base_cfg.train_data)
    if eval_samples is None:
        eval_samples = load_jsonl(base_cfg.eval_data) if base_cfg.eval_data else train_samples
    cells = grid.cells()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_run_cell, base_cfg, c, out_dir, train_samples, eval_samples) for c in cells]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(base_cfg, c, out_dir, train_samples, eval_samples) for c in cells]

    base = next((r for r in results if r.n_thoughts == 0 and r.status == "ok"), None)
    for r in results:
        if base is not None and r.status == "ok":
            r.accuracy_delta = _relative_delta(r.accuracy, base.accuracy)
            r.bleu_delta = _relative_delta(r.bleu, base.bleu)
    if out_dir is not None:
        write_results(results, out_dir)
    return results


def _with_delta(value, delta, scale=100.0, is_base=False):
    if value is None:
        return "failed"
    text = f"{value * scale:.2f}"
    if is_base:
        return text + " (0.00%)"
    if delta is None:
        return text + " (n/a)"
    arrow = "↑" if delta >= 0 else "↓"
    return f"{text} ({arrow} {abs(delta):.2f}%)"


def format_table(results):
    """Aligned text table: accuracy (%) and BLEU (x100) with relative deltas."""
    header = ["Model", "mu", "N_t", "accuracy", "BLEU"]
    rows = []
    for r in results:
        is_base = r.n_thoughts == 0
        model = "Baseline" if is_base else f"MCOUT-{r.variant.capitalize()}"
        rows.append([
            model,
            "" if is_base else f"{r.mu:g}",
            str(r.n_thoughts),
            _with_delta(r.accuracy, r.accuracy_delta, is_base=is_base and r.status == "ok"),
            _with_delta(r.bleu, r.bleu_delta, is_base=is_base and r.status == "ok"),
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def write_results(results, out_dir):
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump([asdict(r) for r in results], fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "results.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_table(results))
