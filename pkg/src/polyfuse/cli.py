"""Command-line interface exposing the full pipeline.

Conventions: data goes to stdout (or --out), logs and warnings go to
stderr, JSON is emitted with sorted keys so identical invocations are
byte-identical.  All randomness flows from --seed through named stream
derivation; --threads parallelizes only across independent jobs (folds,
grid cells, polymers) and never changes any numeric output.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import attribution as attribution_mod
from . import embed_store, model as model_mod, pipeline, psmiles, trainer
from .errors import DataError, NumericalError, PolyfuseError

FORMATS = ("json", "csv", "text")


def global_options(f):
    f = click.option("--seed", type=int, default=42, show_default=True, help="Master seed.")(f)
    f = click.option("--threads", type=int, default=1, show_default=True,
                     help="Parallel jobs; results are identical to --threads 1.")(f)
    f = click.option("--format", "fmt", type=click.Choice(FORMATS), default="json",
                     show_default=True, help="Output format where applicable.")(f)
    f = click.option("--verbose", is_flag=True, help="Chatty progress on stderr.")(f)
    f = click.option("--out", type=click.Path(dir_okay=False), default=None,
                     help="Write output here instead of stdout.")(f)
    return f


def _emit(text: str, out: str | None) -> None:
    if out is None:
        click.echo(text, nl=not text.endswith("\n"))
    else:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")


def _json(obj, fmt: str = "json") -> str:
    if fmt == "text":
        return json.dumps(obj, sort_keys=True, indent=2)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _csv_table(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _log(verbose: bool, message: str) -> None:
    if verbose:
        click.echo(message, err=True)


def _load_records(path: str) -> list[pipeline.PolymerRecord]:
    records, warnings = pipeline.load_dataset(path)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    return records


@click.group()
def cli():
    """Polymer property prediction from fused text/structure embeddings."""


# ---------------------------------------------------------------------------
# String commands


@cli.command()
@global_options
def cap(seed, threads, fmt, verbose, out):
    """Replace [*] connection points with C, one PSMILES per stdin line."""
    lines = [psmiles.cap(line) for line in sys.stdin.read().splitlines() if line.strip()]
    _emit("\n".join(lines), out)


@cli.command()
@global_options
def tokenize(seed, threads, fmt, verbose, out):
    """Tokenize stdin PSMILES lines; tokens are tab-separated."""
    lines = []
    for line in sys.stdin.read().splitlines():
        if line.strip():
            lines.append("\t".join(t.text for t in psmiles.tokenize(line)))
    _emit("\n".join(lines), out)


# ---------------------------------------------------------------------------
# Dataset commands


@cli.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@global_options
def ingest(csv_path, seed, threads, fmt, verbose, out):
    """Read a property CSV and emit the canonical JSON-lines dataset."""
    records, warnings = pipeline.load_csv(csv_path)
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    _log(verbose, f"ingested {len(records)} records from {csv_path}")
    _emit("\n".join(pipeline.record_to_json(r) for r in records), out)


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--property", "prop", default=None, help="Keep only records with this property.")
@global_options
def split(data, prop, seed, threads, fmt, verbose, out):
    """Plan the 85/15 test split and the 5 cross-validation folds."""
    records = _load_records(data)
    if prop is not None:
        records = pipeline.records_with_property(records, prop)
    plan = pipeline.make_split([r.id for r in records], seed)
    _emit(_json(plan.to_dict(), fmt), out)


# ---------------------------------------------------------------------------
# Embedding store commands


@cli.group()
def embed():
    """Create and inspect PLYE/PLYT embedding files."""


def _meta_dict(meta: embed_store.EmbeddingMeta, kind: str, count: int) -> dict:
    return {
        "kind": kind,
        "modality": meta.modality.name.lower(),
        "dim": meta.dim,
        "count": count,
        "source_tag": meta.source_tag,
        "version": meta.version,
    }


@embed.command("synth")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--modality", required=True, type=click.Choice(["text", "structure"]))
@click.option("--dim", type=int, default=None, help="Vector width (default per modality).")
@click.option("--plant", is_flag=True,
              help="Overwrite leading dims with unit-variance polymer features.")
@click.option("--tokens-out", type=click.Path(dir_okay=False), default=None,
              help="Also write per-token vectors (PLYT) here.")
@click.option("--dest", required=True, type=click.Path(dir_okay=False))
@global_options
def embed_synth(data, modality, dim, plant, tokens_out, dest, seed, threads, fmt, verbose, out):
    """Deterministic synthetic embeddings for every dataset record."""
    records = _load_records(data)
    mod = embed_store.Modality.from_name(modality)
    meta = embed_store.EmbeddingMeta(mod, dim or mod.default_dim, source_tag="synthetic")
    ids = [r.id for r in records]
    spec = None
    if plant:
        spec = embed_store.PlantSpec({r.id: r.psmiles for r in records})
    matrix = embed_store.synth_embeddings(ids, meta, seed, spec)
    embed_store.write_matrix(matrix, dest)
    result = {"pooled": _meta_dict(meta, "pooled", len(ids)), "path": dest}
    if tokens_out:
        items = [(r.id, [t.text for t in psmiles.tokenize(r.psmiles)]) for r in records]
        token_set = embed_store.synth_token_embeddings(items, meta, seed)
        embed_store.write_token_set(token_set, tokens_out)
        result["tokens"] = _meta_dict(meta, "tokens", len(items))
        result["tokens_path"] = tokens_out
    _emit(_json(result, fmt), out)


def _read_any(path: str):
    magic = embed_store.peek_magic(path)
    if magic == embed_store.MAGIC_POOLED:
        matrix = embed_store.read_matrix(path)
        return _meta_dict(matrix.meta, "pooled", len(matrix))
    token_set = embed_store.read_token_set(path)
    return _meta_dict(token_set.meta, "tokens", len(token_set))


@embed.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@global_options
def embed_validate(path, seed, threads, fmt, verbose, out):
    """Fully parse an embedding file; exit 2 with a reason if invalid."""
    info = _read_any(path)
    _emit(_json({"valid": True, **info}, fmt), out)


@embed.command("info")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@global_options
def embed_info(path, seed, threads, fmt, verbose, out):
    """Print embedding file metadata as JSON."""
    _emit(_json(_read_any(path), fmt), out)


# ---------------------------------------------------------------------------
# Training commands


def _train_config(config_path: str | None, seed: int, overrides: dict | None = None) -> trainer.TrainConfig:
    obj: dict = {}
    if config_path is not None:
        obj = json.loads(Path(config_path).read_text())
        if not isinstance(obj, dict):
            raise DataError(f"{config_path}: expected a JSON object of config fields")
    obj.setdefault("seed", seed)
    obj.update(overrides or {})
    try:
        return trainer.TrainConfig(**obj)
    except TypeError as exc:
        raise DataError(f"bad train config: {exc}") from exc


def _run_report_csv(reports: list[trainer.RunReport]) -> str:
    header = ["property", "r2_mean", "r2_std", "mae_mean", "mae_std",
              "mae_original_mean", "mae_original_std", "n_folds"]
    rows = [
        [r.property, r.r2_mean, r.r2_std, r.mae_mean, r.mae_std,
         r.mae_original_mean, r.mae_original_std, len(r.folds)]
        for r in sorted(reports, key=lambda r: r.property)
    ]
    return _csv_table(header, rows)


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--llm", required=True, type=click.Path(dir_okay=False))
@click.option("--uni", required=True, type=click.Path(dir_okay=False))
@click.option("--property", "prop", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint-dir", type=click.Path(file_okay=False), default=None)
@global_options
def train(data, llm, uni, prop, config_path, checkpoint_dir,
          seed, threads, fmt, verbose, out):
    """5-fold cross-validated training for one property."""
    records = _load_records(data)
    config = _train_config(config_path, seed)
    report = trainer.train_cv(
        records,
        embed_store.read_matrix(llm),
        embed_store.read_matrix(uni),
        prop,
        config,
        checkpoint_dir,
        threads=threads,
    )
    _log(verbose, f"{prop}: mean R2 {report.r2_mean:.4f} +- {report.r2_std:.4f}")
    if fmt == "csv":
        _emit(_run_report_csv([report]), out)
    else:
        _emit(_json(report.to_dict(), fmt), out)


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--llm", required=True, type=click.Path(dir_okay=False))
@click.option("--uni", required=True, type=click.Path(dir_okay=False))
@click.option("--property", "prop", required=True)
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help='JSON: {"grid": {field: [values]}, "base": {...}} or {"configs": [...]}.')
@click.option("--checkpoint-dir", type=click.Path(file_okay=False), default=None)
@global_options
def gridsearch(data, llm, uni, prop, grid_path, checkpoint_dir,
               seed, threads, fmt, verbose, out):
    """Grid search selected by mean validation loss across folds."""
    records = _load_records(data)
    spec = json.loads(Path(grid_path).read_text())
    if "configs" in spec:
        configs = [_train_config(None, seed, overrides=c) for c in spec["configs"]]
    elif "grid" in spec:
        base = _train_config(None, seed, overrides=spec.get("base", {}))
        axes = spec["grid"]
        if axes == "reference":
            configs = trainer.reference_grid(base)
        else:
            configs = trainer.expand_grid(axes, base)
    else:
        raise DataError(f"{grid_path}: expected a 'grid' or 'configs' key")
    best, reports = trainer.grid_search(
        records,
        embed_store.read_matrix(llm),
        embed_store.read_matrix(uni),
        prop,
        configs,
        checkpoint_dir,
        threads=threads,
    )
    result = {
        "best_config": asdict(best),
        "reports": [r.to_dict() for r in reports],
    }
    _emit(_json(result, fmt), out)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--llm", required=True, type=click.Path(dir_okay=False))
@click.option("--uni", required=True, type=click.Path(dir_okay=False))
@global_options
def evaluate(checkpoint, data, llm, uni, seed, threads, fmt, verbose, out):
    """Metrics for a saved checkpoint on a labeled dataset."""
    params, meta = model_mod.load_checkpoint(checkpoint)
    metrics = trainer.evaluate_checkpoint(
        params, meta, _load_records(data),
        embed_store.read_matrix(llm), embed_store.read_matrix(uni),
    )
    _emit(_json(metrics, fmt), out)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--llm", required=True, type=click.Path(dir_okay=False))
@click.option("--uni", required=True, type=click.Path(dir_okay=False))
@global_options
def predict(checkpoint, data, llm, uni, seed, threads, fmt, verbose, out):
    """Predict the checkpoint's property for every dataset record."""
    params, meta = model_mod.load_checkpoint(checkpoint)
    ids = [r.id for r in _load_records(data)]
    rows = trainer.predict_checkpoint(
        params, meta, ids,
        embed_store.read_matrix(llm), embed_store.read_matrix(uni),
    )
    if fmt == "csv":
        _emit(_csv_table(
            ["id", "property", "prediction", "prediction_original"],
            [[r["id"], r["property"], r["prediction"], r["prediction_original"]] for r in rows],
        ), out)
    else:
        _emit("\n".join(_json(r) for r in rows), out)


@cli.group()
def baseline():
    """Classical reference models over the same split."""


@baseline.command("ridge")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--llm", required=True, type=click.Path(dir_okay=False))
@click.option("--uni", required=True, type=click.Path(dir_okay=False))
@click.option("--property", "prop", required=True)
@click.option("--l2", "lam", type=float, default=1.0, show_default=True)
@global_options
def baseline_ridge(data, llm, uni, prop, lam, seed, threads, fmt, verbose, out):
    """Closed-form ridge regression on concatenated embeddings."""
    report = trainer.ridge_cv(
        _load_records(data),
        embed_store.read_matrix(llm),
        embed_store.read_matrix(uni),
        prop, seed, lam,
    )
    _emit(_json(report.to_dict(), fmt), out)


# ---------------------------------------------------------------------------
# Attribution commands


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tokens-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--uni", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", type=int, default=64, show_default=True)
@click.option("--ids", default=None, help="Comma-separated subset of polymer ids.")
@click.option("--merge/--no-merge", default=True,
              help="Regroup subword scores onto chemical tokens.")
@click.option("--normalize/--no-normalize", default=True,
              help="Divide scores by the first [*] token's score.")
@global_options
def attribute(checkpoint, tokens_file, uni, steps, ids, merge, normalize,
              seed, threads, fmt, verbose, out):
    """Integrated-gradients token attributions for each polymer."""
    params, _meta = model_mod.load_checkpoint(checkpoint)
    token_set = embed_store.read_token_set(tokens_file)
    uni_matrix = embed_store.read_matrix(uni)
    records = token_set.records
    if ids is not None:
        wanted = ids.split(",")
        records = [token_set.record(pid) for pid in wanted]

    def job(rec: embed_store.TokenRecord) -> dict:
        attr = attribution_mod.attribute_tokens(
            params, rec.tokens, rec.vectors.astype(np.float64),
            uni_matrix.row(rec.polymer_id).astype(np.float64),
            steps=steps, merge=merge, polymer_id=rec.polymer_id,
        )
        if normalize:
            attr = attribution_mod.normalize_by_star(attr)
        return attr.to_dict()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, records))
    else:
        results = [job(rec) for rec in records]
    _emit(_json(results, fmt), out)


@cli.command()
@click.option("--tokens-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--id", "polymer_id", required=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@global_options
def similarity(tokens_file, polymer_id, threshold, seed, threads, fmt, verbose, out):
    """Token cosine-similarity edge list for one polymer."""
    token_set = embed_store.read_token_set(tokens_file)
    rec = token_set.record(polymer_id)
    sim = attribution_mod.cosine_matrix(rec.tokens, rec.vectors.astype(np.float64), threshold)
    if fmt == "csv":
        _emit(_csv_table(
            ["i", "j", "token_i", "token_j", "value"],
            [[i, j, rec.tokens[i], rec.tokens[j], v] for i, j, v in sim.edges],
        ), out)
    else:
        _emit(_json(sim.to_dict(), fmt), out)


@cli.command()
@click.option("--embeddings", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=int, default=100, show_default=True)
@global_options
def pca(embeddings, k, seed, threads, fmt, verbose, out):
    """Reduce pooled embeddings to k principal components."""
    matrix = embed_store.read_matrix(embeddings)
    result = attribution_mod.pca_reduce(matrix.vectors.astype(np.float64), k)
    if fmt == "csv":
        _emit(_csv_table(
            ["id"] + [f"pc{i}" for i in range(k)],
            [[pid] + [float(c) for c in row] for pid, row in zip(matrix.ids, result.coords)],
        ), out)
    else:
        _emit(_json({
            "ids": matrix.ids,
            "coords": [[float(c) for c in row] for row in result.coords],
            "explained_variance_ratio": [float(v) for v in result.explained_variance_ratio],
        }, fmt), out)


# ---------------------------------------------------------------------------
# Report merging


@cli.command()
@click.argument("run_reports", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@global_options
def report(run_reports, seed, threads, fmt, verbose, out):
    """Merge RunReport JSON files into one table keyed by property."""
    rows = []
    for path in run_reports:
        obj = json.loads(Path(path).read_text())
        try:
            rows.append({
                "property": obj["property"],
                "r2_mean": obj["r2_mean"],
                "r2_std": obj["r2_std"],
                "mae_mean": obj["mae_mean"],
                "mae_std": obj["mae_std"],
                "mae_original_mean": obj["mae_original_mean"],
                "mae_original_std": obj["mae_original_std"],
                "n_folds": len(obj["folds"]),
            })
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: not a RunReport JSON ({exc})") from exc
    rows.sort(key=lambda r: r["property"])
    if fmt == "csv" or fmt == "text":
        header = list(rows[0].keys())
        _emit(_csv_table(header, [[r[h] for h in header] for r in rows]), out)
    else:
        _emit(_json(rows, fmt), out)


# ---------------------------------------------------------------------------
# Entry points


def dispatch(argv: list[str]) -> int:
    """Run the CLI; map error classes to the documented exit codes."""
    try:
        cli.main(args=list(argv), standalone_mode=False)
        return 0
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except np.linalg.LinAlgError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except PolyfuseError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
