"""Console script for metaknn."""

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated

import matplotlib.pyplot as plt
import pandas as pd
import typer
from rich.console import Console
from rich.logging import RichHandler

from metaknn.analysis import (
    GoldProbSeries,
    compare_series,
    plot_buckets,
    read_frequency_table,
    read_word_file,
    stack_tables,
    word_tables,
)
from metaknn.bench import bench as run_bench
from metaknn.config import RunConfig, load_yaml
from metaknn.constants import EXIT_FORMAT, EXIT_MISSING_INPUT, EXIT_NUMERIC, EXIT_USAGE
from metaknn.contexts import ContextPairs
from metaknn.datastore import Datastore
from metaknn.exceptions import DatastoreFormatError, MetaKnnError, MissingInputError, NumericError
from metaknn.experiments import adaptation_study, similarity_study, word_study
from metaknn.finetune import finetune_full, grad_check_trials, grid_search, validation_ppl
from metaknn.meta_optimizer import dual_check_trials
from metaknn.prediction import Projection, Variant, score_corpus
from metaknn.synthdata import SynthTask, base_projection, gen_task
from metaknn.utils import atomic_write_text, ensure_finite, tool_version

app = typer.Typer(help="Nearest-neighbor machine translation as implicit output-layer fine-tuning.")
console = Console(stderr=True)
logger = logging.getLogger("metaknn")


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[Path | None, typer.Option("--config", "-c", help="YAML configuration file.")] = None,
    seed: Annotated[int | None, typer.Option(help="Seed of every random stream.")] = None,
    report_format: Annotated[str | None, typer.Option("--format", help="Report format: json or csv.")] = None,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Log at DEBUG level.")] = False,
    quiet: Annotated[bool, typer.Option("--quiet", "-q", help="Log warnings and errors only.")] = False,
) -> None:
    """Run one metaknn workflow."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )
    ctx.obj = {"config": config, "flags": {"seed": seed, "report_format": report_format}}


@contextmanager
def _exit_codes():
    """Map library errors to process exit codes with a message on standard error."""
    try:
        yield
    except MissingInputError as e:
        console.print(f"[red]Missing input:[/red] {e}")
        raise typer.Exit(EXIT_MISSING_INPUT) from e
    except DatastoreFormatError as e:
        console.print(f"[red]Format violation ({e.code}):[/red] {e}")
        raise typer.Exit(EXIT_FORMAT) from e
    except NumericError as e:
        console.print(f"[red]Numeric failure:[/red] {e}")
        raise typer.Exit(EXIT_NUMERIC) from e
    except (MetaKnnError, ValueError) as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(EXIT_USAGE) from e


def _resolve(ctx: typer.Context, command: str, flags: dict | None = None, **paths) -> RunConfig:
    file = load_yaml(ctx.obj["config"]) if ctx.obj["config"] is not None else {}
    merged_flags = dict(ctx.obj["flags"])
    for key, value in (flags or {}).items():
        merged_flags[key] = value
    return RunConfig.resolve(command, file=file, flags=merged_flags, paths=paths)


def _header(cfg: RunConfig) -> dict:
    return {"tool": "metaknn", "version": tool_version(), "seed": cfg.seed, "config": cfg.echo()}


def _as_table(result) -> pd.DataFrame | None:
    if isinstance(result, pd.DataFrame):
        return result
    if isinstance(result, dict) and result and all(isinstance(v, pd.DataFrame) for v in result.values()):
        return stack_tables(result)
    if isinstance(result, dict) and not any(isinstance(v, (dict, list, pd.DataFrame)) for v in result.values()):
        return pd.DataFrame([result])
    return None


def _write_report(path: Path, cfg: RunConfig, result) -> None:
    """
    Write a report atomically, with a header carrying the tool version, seed and configuration.

    In CSV format a DataFrame is written as is, a mapping of named DataFrames as one long table
    with a ``table`` column and a flat mapping as a single row; the header becomes ``#`` comment
    lines. Nested results have no CSV form and are written as JSON with a warning. In JSON
    format DataFrames become lists of records.
    """
    header = _header(cfg)
    if cfg.report_format == "csv":
        table = _as_table(result)
        if table is not None:
            lines = [f"# metaknn {header['version']} seed={cfg.seed}", f"# config={json.dumps(header['config'])}"]
            atomic_write_text(path, "\n".join(lines) + "\n" + table.to_csv(index=table.index.name is not None))
            return
        logger.warning("The %s report has no CSV form; writing JSON to %s", cfg.command, path)
    if isinstance(result, pd.DataFrame):
        result = _records(result)
    elif isinstance(result, dict):
        result = {key: _records(v) if isinstance(v, pd.DataFrame) else v for key, v in result.items()}
    atomic_write_text(path, json.dumps(header | {"results": result}, indent=2, default=str))


def _hyper_flags(k, lam, temperature, metric) -> dict:
    return {"hyper": {"k": k, "lambda": lam, "temperature": temperature, "metric": metric}}


OutOption = Annotated[Path, typer.Option("--out", "-o", help="Output file.")]
KOption = Annotated[int | None, typer.Option("--k", help="Number of neighbors.")]
LambdaOption = Annotated[float | None, typer.Option("--lambda", help="Interpolation weight of the neighbors.")]
TemperatureOption = Annotated[float | None, typer.Option("--temperature", help="Neighbor softmax temperature.")]
MetricOption = Annotated[str | None, typer.Option("--metric", help="Retrieval metric: ip or l2.")]


@app.command()
def synth(
    ctx: typer.Context,
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")],
    base: Annotated[bool, typer.Option(help="Also train and write the base projection.")] = True,
) -> None:
    """Generate a synthetic task and, optionally, its base projection."""
    with _exit_codes():
        cfg = _resolve(ctx, "synth", out=out)
        task = gen_task(cfg.synth)
        task.write(out)
        if base:
            base_projection(cfg.synth, task.general).to_hdf5(out / "base.h5")


@app.command()
def build(
    ctx: typer.Context,
    pairs: Annotated[Path, typer.Option("--pairs", help="Context-pair file (KNCP).")],
    out: OutOption,
) -> None:
    """Build a datastore from a context-pair file."""
    with _exit_codes():
        cfg = _resolve(ctx, "build", pairs=pairs, out=out)
        cfg.require("pairs")
        corpus = ContextPairs.from_file(pairs)
        Datastore.from_arrays(corpus.vectors, corpus.tokens, corpus.vocab_size).save(out)
        logger.info("Built datastore of %d entries at %s", len(corpus), out)


@app.command()
def search(
    ctx: typer.Context,
    datastore: Annotated[Path, typer.Option("--datastore", help="Datastore file (KNDS).")],
    queries: Annotated[Path, typer.Option("--queries", help="Context-pair file of queries (KNCP).")],
    out: OutOption,
    k: KOption = None,
    metric: MetricOption = None,
) -> None:
    """Retrieve the k nearest neighbors of every query."""
    with _exit_codes():
        cfg = _resolve(ctx, "search", _hyper_flags(k, None, None, metric), datastore=datastore, queries=queries)
        cfg.require("datastore", "queries")
        ds = Datastore.load(datastore)
        rows = []
        for q, (h, _) in enumerate(ContextPairs.from_file(queries).steps()):
            nbrs = ds.search(h, cfg.hyper.k, cfg.hyper.metric)
            for rank, neighbor in enumerate(zip(nbrs.indices, nbrs.values, nbrs.scores, strict=True), start=1):
                index, value, similarity = neighbor
                rows.append({"query": q, "rank": rank, "index": int(index), "value": int(value), "score": similarity})
        _write_report(out, cfg, pd.DataFrame(rows, columns=["query", "rank", "index", "value", "score"]))


@app.command()
def score(
    ctx: typer.Context,
    projection: Annotated[Path, typer.Option("--projection", help="Projection file (HDF5).")],
    pairs: Annotated[Path, typer.Option("--pairs", help="Context-pair file to score (KNCP).")],
    out: OutOption,
    datastore: Annotated[Path | None, typer.Option("--datastore", help="Datastore file (KNDS).")] = None,
    variant: Annotated[str, typer.Option(help="nmt, knn or knn-mt.")] = Variant.KNN_MT.value,
    k: KOption = None,
    lam: LambdaOption = None,
    temperature: TemperatureOption = None,
    metric: MetricOption = None,
) -> None:
    """Teacher-forced scoring; writes the scored series as CSV."""
    with _exit_codes():
        variant = Variant(variant)
        if variant is Variant.OPL_FT:
            raise ValueError("Use the finetune subcommand for the opl-ft variant")
        flags = _hyper_flags(k, lam, temperature, metric)
        cfg = _resolve(ctx, "score", flags, projection=projection, pairs=pairs, datastore=datastore)
        cfg.require("projection", "pairs")
        ds = None
        if variant is not Variant.NMT:
            cfg.require("datastore")
            ds = Datastore.load(datastore)
        proj = Projection.from_hdf5(projection)
        scored = score_corpus(proj, ds, cfg.hyper, ContextPairs.from_file(pairs), variant)
        GoldProbSeries.write_csv(out, variant, scored, seed=cfg.seed)
        logger.info("Scored %d tokens (%s)", len(scored), variant.value)


@app.command("dual-check")
def dual_check(
    ctx: typer.Context,
    out: OutOption,
    trials: Annotated[int, typer.Option(help="Number of random instances.")] = 1000,
    tolerance: Annotated[float, typer.Option(help="Largest accepted residual.")] = 1e-6,
) -> None:
    """Check the dual-form identity of kNN interpolation on random instances."""
    with _exit_codes():
        cfg = _resolve(ctx, "dual-check")
        table = dual_check_trials(trials, seed=cfg.seed)
        _write_report(out, cfg, table)
        worst = float(table["residual"].max()) if len(table) else 0.0
        ensure_finite(table["residual"].to_numpy(), "residual")
        if worst > tolerance:
            raise NumericError(f"Largest residual {worst:.3e} exceeds {tolerance:.1e}")
        console.print(f"dual-check: {trials} trials, max residual {worst:.3e}")


@app.command("grad-check")
def grad_check(
    ctx: typer.Context,
    out: OutOption,
    trials: Annotated[int, typer.Option(help="Number of random instances.")] = 100,
    epsilon: Annotated[float, typer.Option(help="Finite-difference step.")] = 1e-5,
    tolerance: Annotated[float, typer.Option(help="Largest accepted relative error.")] = 1e-5,
) -> None:
    """Compare the analytic fine-tuning gradient with central finite differences."""
    with _exit_codes():
        cfg = _resolve(ctx, "grad-check")
        table = grad_check_trials(trials, seed=cfg.seed, epsilon=epsilon)
        _write_report(out, cfg, table)
        worst = float(table["max_rel_error"].max()) if len(table) else 0.0
        ensure_finite(table["max_rel_error"].to_numpy(), "max_rel_error")
        if worst > tolerance:
            raise NumericError(f"Largest relative error {worst:.3e} exceeds {tolerance:.1e}")
        console.print(f"grad-check: {trials} trials, max relative error {worst:.3e}")


@app.command()
def finetune(
    ctx: typer.Context,
    projection: Annotated[Path, typer.Option("--projection", help="Initial projection (HDF5).")],
    train: Annotated[Path, typer.Option("--train", help="Training pairs (KNCP).")],
    val: Annotated[Path, typer.Option("--val", help="Validation pairs (KNCP).")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Report of the selected lr, alpha and validation PPL.")],
    weights: Annotated[Path | None, typer.Option("--weights", help="Write the fine-tuned projection (HDF5).")] = None,
    lr: Annotated[float | None, typer.Option(help="Learning rate.")] = None,
    alpha: Annotated[float | None, typer.Option(help="l2 coefficient.")] = None,
    steps: Annotated[int | None, typer.Option(help="Optimizer steps.")] = None,
    batch: Annotated[int | None, typer.Option(help="Batch size.")] = None,
    search_grid: Annotated[bool, typer.Option("--search/--no-search", help="Grid-search lr and alpha.")] = False,
    strategy: Annotated[str | None, typer.Option(help="Grid-search strategy: full or staged.")] = None,
) -> None:
    """Fine-tune the output projection on a whole corpus."""
    with _exit_codes():
        flags = {
            "finetune": {"lr": lr, "alpha": alpha, "steps": steps, "batch": batch},
            "grid": {"strategy": strategy},
        }
        cfg = _resolve(ctx, "finetune", flags, projection=projection, train=train, val=val)
        cfg.require("projection", "train", "val")
        proj = Projection.from_hdf5(projection)
        train_pairs, val_pairs = ContextPairs.from_file(train), ContextPairs.from_file(val)
        ft = cfg.ft
        if search_grid:
            ft, _ = grid_search(
                proj,
                train_pairs,
                val_pairs,
                cfg.grid,
                steps=ft.steps,
                batch=ft.batch,
                strategy=cfg.strategy,
                eval_every=cfg.eval_every,
                seed=cfg.seed,
            )
        tuned = finetune_full(proj, train_pairs, ft, val_pairs, cfg.eval_every, cfg.patience, cfg.seed)
        ensure_finite(tuned.weights, "fine-tuned weights")
        ppl = validation_ppl(tuned, val_pairs)
        if weights is not None:
            tuned.to_hdf5(weights)
        report = {"lr": ft.lr, "alpha": ft.alpha, "steps": ft.steps, "batch": ft.batch, "ppl": ppl}
        _write_report(out, cfg, report)
        console.print(f"finetune: lr={ft.lr:g} alpha={ft.alpha:g}, validation PPL {ppl:.4f}")


@app.command()
def compare(
    ctx: typer.Context,
    series: Annotated[list[Path], typer.Option("--series", help="Scored-series CSV; repeat for each system.")],
    out: OutOption,
) -> None:
    """Mean and variance of gold-probability differences between every pair of scored series."""
    with _exit_codes():
        cfg = _resolve(ctx, "compare", **{f"series{i}": path for i, path in enumerate(series)})
        cfg.require(*(f"series{i}" for i in range(len(series))))
        if len(series) < 2:
            raise ValueError("compare needs at least two series")
        _write_report(out, cfg, compare_series([GoldProbSeries.read_csv(path) for path in series]))


def _load_task_models(cfg: RunConfig, task_dir: Path, projection: Path | None):
    task = SynthTask.read(task_dir)
    if projection is not None:
        cfg.require("projection")
        return task, Projection.from_hdf5(projection)
    if (task_dir / "base.h5").exists():
        return task, Projection.from_hdf5(task_dir / "base.h5")
    return task, base_projection(task.config, task.general)


@app.command()
def analyze(
    ctx: typer.Context,
    out: OutOption,
    task_dir: Annotated[Path | None, typer.Option("--task", help="Task directory written by synth.")] = None,
    hyp: Annotated[Path | None, typer.Option("--hyp", help="Tokenized hypotheses, one sentence per line.")] = None,
    hyp_ft: Annotated[
        Path | None, typer.Option("--hyp-ft", help="Hypotheses of the fine-tuned system, for incremental recall.")
    ] = None,
    ref: Annotated[Path | None, typer.Option("--ref", help="Tokenized references, one sentence per line.")] = None,
    freq_id: Annotated[Path | None, typer.Option("--freq-id", help="In-domain word counts (JSON).")] = None,
    freq_gd: Annotated[Path | None, typer.Option("--freq-gd", help="General-domain word counts (JSON).")] = None,
    projection: Annotated[Path | None, typer.Option("--projection", help="Base projection (HDF5).")] = None,
    tuned: Annotated[Path | None, typer.Option("--tuned", help="Fine-tuned projection (HDF5).")] = None,
    plot: Annotated[Path | None, typer.Option("--plot", help="Save a bar chart of recall by bucket.")] = None,
    k: KOption = None,
    lam: LambdaOption = None,
    temperature: TemperatureOption = None,
    metric: MetricOption = None,
) -> None:
    """
    Word-level analysis by domain specificity and in-domain frequency.

    Either runs the word study on a synthetic task (``--task``) or scores given hypotheses against
    references with the word counts of both domains (``--hyp``, ``--ref``, ``--freq-id``, ``--freq-gd``).
    """
    with _exit_codes():
        flags = _hyper_flags(k, lam, temperature, metric)
        paths = {"hyp": hyp, "hyp_ft": hyp_ft, "ref": ref, "freq_id": freq_id, "freq_gd": freq_gd}
        cfg = _resolve(ctx, "analyze", flags, task=task_dir, projection=projection, tuned=tuned, **paths)
        if task_dir is not None:
            cfg.require("task")
            task, base = _load_task_models(cfg, task_dir, projection)
            if tuned is not None:
                cfg.require("tuned")
                tuned_proj = Projection.from_hdf5(tuned)
            else:
                tuned_proj = finetune_full(base, task.train, cfg.ft, task.val, cfg.eval_every, cfg.patience, cfg.seed)
            tables = word_study(task, base, task.datastore(), cfg.hyper, tuned_proj).tables()
        elif None not in (hyp, ref, freq_id, freq_gd):
            cfg.require("hyp", "ref", "freq_id", "freq_gd")
            tables = word_tables(
                read_word_file(hyp),
                read_word_file(ref),
                read_frequency_table(freq_id),
                read_frequency_table(freq_gd),
                hyps_ft=read_word_file(hyp_ft) if hyp_ft is not None else None,
            )
        else:
            raise ValueError("analyze needs --task, or --hyp, --ref, --freq-id and --freq-gd")
        if plot is not None:
            if "recall_by_gamma" in tables:
                panels, column = (tables["recall_by_gamma"], tables["recall_by_frequency"]), "mean"
            else:
                panels, column = (tables["prf_by_gamma"], tables["prf_by_frequency"]), "recall"
            fig, axes = plt.subplots(1, 2, figsize=(10, 4))
            for panel, ax in zip(panels, axes, strict=True):
                plot_buckets(panel, column=column, ax=ax)
            fig.tight_layout()
            fig.savefig(plot)
            plt.close(fig)
        _write_report(out, cfg, tables)


@app.command("bench")
def bench_command(
    ctx: typer.Context,
    datastore: Annotated[Path, typer.Option("--datastore", help="Datastore file (KNDS).")],
    projection: Annotated[Path, typer.Option("--projection", help="Projection file (HDF5).")],
    queries: Annotated[Path, typer.Option("--queries", help="Context-pair file of queries (KNCP).")],
    out: OutOption,
    repeats: Annotated[int, typer.Option(help="Timed passes per variant.")] = 3,
    k: KOption = None,
    lam: LambdaOption = None,
    temperature: TemperatureOption = None,
    metric: MetricOption = None,
) -> None:
    """Per-token scoring time of the plain projection and of kNN-MT."""
    with _exit_codes():
        flags = _hyper_flags(k, lam, temperature, metric)
        cfg = _resolve(ctx, "bench", flags, datastore=datastore, projection=projection, queries=queries)
        cfg.require("datastore", "projection", "queries")
        ds, proj = Datastore.load(datastore), Projection.from_hdf5(projection)
        report = run_bench(ds, proj, cfg.hyper, ContextPairs.from_file(queries).steps(), repeats)
        _write_report(out, cfg, report)


@app.command()
def study(
    ctx: typer.Context,
    out: OutOption,
    task_dir: Annotated[Path | None, typer.Option("--task", help="Task directory; generated when omitted.")] = None,
    metric: MetricOption = None,
) -> None:
    """Run the adaptation, similarity and word-level protocols on a synthetic task."""
    with _exit_codes():
        cfg = _resolve(ctx, "study", _hyper_flags(None, None, None, metric), task=task_dir)
        if task_dir is not None:
            cfg.require("task")
            task, base = _load_task_models(cfg, task_dir, None)
        else:
            task = gen_task(cfg.synth)
            base = base_projection(task.config, task.general)
        adaptation = adaptation_study(
            task,
            cfg.hyper.metric,
            base,
            cfg.knn_grid,
            cfg.grid,
            steps=cfg.ft.steps,
            batch=cfg.ft.batch,
            strategy=cfg.strategy,
            seed=cfg.seed,
        )
        similarity = similarity_study(task, base, adaptation.datastore, cfg.hyper.metric, cfg.knn_grid)
        words = word_study(task, base, adaptation.datastore, adaptation.hyper, adaptation.tuned)
        report = {
            "adaptation": {
                "ppl": adaptation.ppl,
                "hyper": {
                    "k": adaptation.hyper.k,
                    "lambda": adaptation.hyper.lam,
                    "temperature": adaptation.hyper.temperature,
                },
                "finetune": {"lr": adaptation.ft.lr, "alpha": adaptation.ft.alpha},
            },
            "similarity": {"per_step_lr": similarity.lr, "pairs": _records(similarity.table)},
            "words": {name: _records(frame) for name, frame in words.tables().items()},
        }
        _write_report(out, cfg, report)


def _records(frame: pd.DataFrame) -> list[dict]:
    frame = frame.reset_index() if frame.index.name is not None else frame
    return json.loads(frame.to_json(orient="records"))


if __name__ == "__main__":
    app()
