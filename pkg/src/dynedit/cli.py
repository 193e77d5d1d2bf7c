"""Operator-facing command surface.

Subcommands: invert (full optimization run, one archive per image), edit
(prompt-to-prompt editing from a stored archive), viz (attention grids
and mask overlays), eval (IoU curves against ground-truth masks).

Exit codes: 0 success, 2 usage or validation problem, 3 numerical failure.
"""
from __future__ import annotations

import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import archive as archive_io
from . import viz
from .backends.synthetic import SyntheticBackend
from .config import RunConfig, load_config
from .edit import EditSpec, edit_image
from .errors import DegenerateInputError, NotFoundError, NumericalFailureError
from .metrics import iou_curve
from .pipeline import load_run, run_pipeline, save_run

USAGE_ERRORS = (ValueError, DegenerateInputError, NotFoundError, KeyError,
                FileNotFoundError, json.JSONDecodeError, ImportError)


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NumericalFailureError as exc:
        _fail(3, str(exc))
    except USAGE_ERRORS as exc:
        _fail(2, str(exc))


def build_backend(config: RunConfig):
    if config.backend == "synthetic":
        return SyntheticBackend(config.synthetic, num_steps=config.num_steps)
    if config.backend == "real":
        from .backends.sd_adapter import StableDiffusionBackend

        return StableDiffusionBackend(
            checkpoint=config.resolved_checkpoint_dir(),
            num_steps=config.num_steps,
            attention_layers=config.attention_layers,
        )
    raise ValueError(f"unknown backend {config.backend!r}")


def load_image(path: str | Path, backend_name: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix == archive_io.DEFAULT_SUFFIX:
        arrays = archive_io.read_archive(path)
        if "image" not in arrays:
            raise ValueError(f"{path}: archive has no 'image' entry")
        return np.asarray(arrays["image"], dtype=np.float64)
    if path.suffix == ".npy":
        return np.load(path)
    if backend_name == "synthetic":
        raise ValueError("the synthetic backend takes images as .naa or .npy arrays")
    from PIL import Image

    return Image.open(path).convert("RGB")


@click.group()
def main() -> None:
    """Prompt-based image editing with leakage-repaired cross attention."""


@main.command("invert")
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--prompt", required=True)
@click.option("--nouns", required=True, help="comma-separated noun words from the prompt")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--backend", "backend_name", type=click.Choice(["synthetic", "real"]),
              default=None, help="overrides the config file")
@click.option("--seed", type=int, default=None, help="overrides the config file")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_invert(image_path: str, prompt: str, nouns: str, config_path: Optional[str],
               backend_name: Optional[str], seed: Optional[int], out_dir: str) -> None:
    """Invert an image and learn per-step noun and null embeddings."""

    def run() -> None:
        overrides: dict = {}
        if backend_name is not None:
            overrides["backend"] = backend_name
        if seed is not None:
            overrides["seed"] = seed
            overrides.setdefault("synthetic", {})["seed"] = seed
        config = load_config(config_path, overrides)
        noun_words = [n.strip() for n in nouns.split(",") if n.strip()]
        if not noun_words:
            raise ValueError("--nouns must name at least one word")
        backend = build_backend(config)
        image = load_image(image_path, config.backend)

        started = time.monotonic()
        result = run_pipeline(backend, image, prompt, noun_words, config)
        elapsed = time.monotonic() - started
        archive_path, manifest_path = save_run(
            result, out_dir, config,
            image_path=str(image_path),
            timings={"pipeline_seconds": elapsed},
        )
        click.echo(f"archive:  {archive_path}")
        click.echo(f"manifest: {manifest_path}")

    _guarded(run)


@main.command("edit")
@click.option("--archive", "archive_path", required=True, type=click.Path())
@click.option("--edit-config", "edit_config_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_edit(archive_path: str, edit_config_path: str, config_path: Optional[str],
             out_dir: str) -> None:
    """Apply a word-swap / refinement / re-weighting edit to a stored run."""

    def run() -> None:
        spec_data = json.loads(Path(edit_config_path).read_text())
        run_bundle = load_run(archive_path)
        config = load_config(config_path)
        # Injection windows default from the run config when the edit
        # description leaves them out.
        spec_data.setdefault("cross_injection_fraction",
                             config.edit.cross_injection_fraction)
        spec_data.setdefault("self_injection_fraction",
                             config.edit.self_injection_fraction)
        spec_data.setdefault("renormalize_after_reweight",
                             config.edit.renormalize_after_reweight)
        spec = EditSpec.from_dict(spec_data)
        stored = run_bundle.manifest.get("config", {})
        for key in ("backend", "num_steps"):
            if key in stored:
                setattr(config, key, stored[key])
        if "synthetic" in stored:
            for k, v in stored["synthetic"].items():
                setattr(config.synthetic, k, tuple(v) if isinstance(v, list) else v)
        backend = build_backend(config)

        result = edit_image(run_bundle, spec, backend, config)

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        archive_io.write_archive(out / "edit.naa", {
            "edited": result.edited_image,
            "reconstruction": result.reconstruction_image,
        })
        viz.latent_preview(result.edited_image).save(out / "edited.png")
        viz.latent_preview(result.reconstruction_image).save(out / "reconstruction.png")
        positions = run_bundle.noun_positions
        steps = sorted(result.source_maps_by_t)
        res = config.cross_resolution
        for name, maps_by_t in (("source", result.source_maps_by_t),
                                ("target", result.target_maps_by_t)):
            rows = [[maps_by_t[t][:, pos].reshape(res, res) for t in steps]
                    for pos in positions]
            viz.save_attention_grid(rows, out / f"attention_{name}.png")
        click.echo(f"edited artifacts written to {out}")

    _guarded(run)


@main.command("viz")
@click.option("--archive", "archive_path", required=True, type=click.Path())
@click.option("--timesteps", default="", help="comma-separated timesteps (default: 8 spread over the run)")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_viz(archive_path: str, timesteps: str, out_dir: str) -> None:
    """Per-token attention grids and the background-mask overlay."""

    def run() -> None:
        bundle = load_run(archive_path)
        arrays = bundle.arrays
        if timesteps.strip():
            steps = [int(s) for s in timesteps.split(",") if s.strip()]
        else:
            steps = sorted({max(1, round(t)) for t in
                            np.linspace(1, bundle.num_steps, num=min(8, bundle.num_steps))})
        if not steps:
            raise ValueError("no timesteps selected")
        missing = [t for t in steps if f"attention/post_t/{t}" not in arrays]
        if missing:
            raise ValueError(f"archive has no attention for timesteps {missing}")

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [[arrays[f"attention/post_t/{t}"][k] for t in steps]
                for k in range(len(bundle.noun_words))]
        viz.save_attention_grid(rows, out / "token_attention_grid.png")
        for k, word in enumerate(bundle.noun_words):
            viz.save_token_heatmap(arrays[f"attention/post/{k}"], out / f"token_{k}_{word}.png")
        mask32 = arrays["background/mask32"]
        viz.save_mask(mask32, out / "background_mask.png")
        base = arrays["image"].mean(axis=0)
        base32 = np.repeat(np.repeat(base, 4, axis=0), 4, axis=1)
        viz.save_mask_overlay(base32, mask32, out / "background_overlay.png")
        viz.save_sigma_table(arrays["sigma_table"], bundle.noun_words, out / "sigma.json")
        click.echo(f"figures written to {out}")

    _guarded(run)


def _eval_row(row: dict, runs_dir: Path, steps: int) -> dict:
    archive_path = _find_run(runs_dir, row["image"], row["prompt"])
    bundle = load_run(archive_path)
    noun = row["noun"].strip().lower()
    if noun not in bundle.noun_words:
        raise ValueError(f"noun {noun!r} not part of run {archive_path.name}")
    k = bundle.noun_words.index(noun)
    gt = _load_mask(row["gt_mask"])
    out = {"image": row["image"], "noun": noun}
    for label, entry in (("post", f"attention/post/{k}"), ("pre", f"attention/pre/{k}")):
        curve = iou_curve(bundle.arrays[entry], gt, steps=steps)
        out[label] = {
            "auc": curve.auc,
            "iou_at_0.5": curve.at(0.5),
            "thresholds": curve.thresholds.tolist(),
            "iou": curve.iou.tolist(),
        }
    return out


def _load_mask(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"ground-truth mask not found: {path}")
    if p.suffix == ".npy":
        return (np.load(p) > 0).astype(np.float64)
    from PIL import Image

    return (np.asarray(Image.open(p).convert("L")) > 127).astype(np.float64)


def _find_run(runs_dir: Path, image: str, prompt: str) -> Path:
    for manifest_path in sorted(runs_dir.glob("**/*.manifest.json")):
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("prompt") != prompt:
            continue
        recorded = manifest.get("image_path")
        if recorded and Path(recorded).name != Path(image).name:
            continue
        archive = manifest_path.with_name(manifest["outputs"]["archive"])
        if archive.exists():
            return archive
    raise FileNotFoundError(f"no run archive under {runs_dir} matches "
                            f"image={image!r} prompt={prompt!r}")


@main.command("eval")
@click.option("--manifest", "table_path", required=True, type=click.Path(),
              help="delimited table with columns image, prompt, noun, gt_mask")
@click.option("--runs", "runs_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=None, help="threshold steps (default from config)")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--jobs", type=int, default=1)
def cmd_eval(table_path: str, runs_dir: str, out_dir: str, steps: Optional[int],
             config_path: Optional[str], jobs: int) -> None:
    """IoU-vs-threshold curves for every (run, noun, mask) row."""

    def run() -> None:
        config = load_config(config_path)
        n_steps = steps or config.eval.threshold_steps
        with open(table_path, newline="", encoding="utf-8") as fh:
            sample = fh.read(4096)
            fh.seek(0)
            delimiter = "\t" if "\t" in sample.splitlines()[0] else ","
            rows = list(csv.DictReader(fh, delimiter=delimiter))
        if not rows:
            raise ValueError("evaluation table is empty")
        required = {"image", "prompt", "noun", "gt_mask"}
        if not required <= set(rows[0].keys()):
            raise ValueError(f"table must provide columns {sorted(required)}")

        results, skipped = [], []

        def worker(row: dict):
            try:
                return _eval_row(row, Path(runs_dir), n_steps)
            except FileNotFoundError as exc:
                skipped.append({"row": row, "reason": str(exc)})
                return None

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = [r for r in pool.map(worker, rows) if r is not None]
        else:
            results = [r for r in map(worker, rows) if r is not None]
        for item in skipped:
            click.echo(f"warning: skipped row {item['row']}: {item['reason']}", err=True)
        if not results:
            raise ValueError("no evaluable rows")

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = {
            "rows": results,
            "skipped": skipped,
            "mean_auc_post": float(np.mean([r["post"]["auc"] for r in results])),
            "mean_auc_pre": float(np.mean([r["pre"]["auc"] for r in results])),
            "threshold_steps": n_steps,
            # External-model metrics need an embedding client; absent here.
            "clip_score": None,
            "structure_dist": None,
        }
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        _plot_curves(results, out / "iou_curves.png")
        click.echo(f"report written to {out / 'report.json'}")

    _guarded(run)


def _plot_curves(results: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for result in results:
        label = f"{result['noun']} ({Path(result['image']).stem})"
        ax.plot(result["post"]["thresholds"], result["post"]["iou"], label=f"{label} post")
        ax.plot(result["pre"]["thresholds"], result["pre"]["iou"], "--", label=f"{label} pre")
    ax.set_xlabel("threshold")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
