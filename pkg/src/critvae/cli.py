"""Operator command line: prepare data, train models and blenders, build
critique datasets, evaluate, simulate, compare runs, and serve.

Every command accepts a flat JSON ``--config`` file whose keys mirror the
flags; explicit flags win over the file. The fully-resolved configuration is
echoed into every output artifact. Exit codes: 1 usage, 2 validation,
3 numeric failure, 4 environment.
"""

from __future__ import annotations

import json
import socket
import sys
from pathlib import Path

import click
from click.core import ParameterSource

from . import dataio
from .critique import (
    CritiqueBlender,
    IdentityBlender,
    UACBlender,
    build_synthetic_datasets,
    load_examples_jsonl,
    predicted_keyphrase_sets,
    save_examples_jsonl,
)
from .errors import (
    CheckpointError,
    ConfigError,
    CritVaeError,
    EmptyDatasetError,
    NumericError,
    ParseError,
    TrainingDivergedError,
)
from .model import MultimodalVAE
from .simulate import SimConfig, SimResult, compare_runs, comparison_csv, simulate

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_ENVIRONMENT = 4

DATASET_FILENAME = "dataset.bin"


def _resolve_config(ctx, exclude=("config", "out")):
    """Merge the config file under the flags; reject unknown keys."""
    params = {k: v for k, v in ctx.params.items() if k not in exclude}
    config_path = ctx.params.get("config")
    if config_path:
        file_cfg = json.loads(Path(config_path).read_text())
        unknown = sorted(set(file_cfg) - set(params))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in file_cfg.items():
            if ctx.get_parameter_source(key) != ParameterSource.COMMANDLINE:
                params[key] = value
    return params


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_data(path):
    p = Path(path)
    if p.is_dir():
        p = p / DATASET_FILENAME
    return dataio.InteractionData.load(p)


def _parse_ratios(text):
    try:
        ratios = tuple(float(x) for x in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"bad ratios {text!r}") from exc
    if len(ratios) != 3:
        raise ConfigError("ratios must have exactly three components")
    return ratios


@click.group()
def cli():
    """Multimodal VAE recommender with conversational critiquing."""


@cli.command()
@click.option("--input", "input_path", required=True, help="Interaction file.")
@click.option("--format", "fmt", default="jsonl", type=click.Choice(["jsonl", "csv"]),
              show_default=True, help="Input file format.")
@click.option("--threshold", default=3.5, show_default=True, type=float,
              help="Keep ratings strictly above this value.")
@click.option("--ratios", default="0.6,0.2,0.2", show_default=True,
              help="Train,val,test split fractions.")
@click.option("--seed", default=0, show_default=True, type=int, help="Split shuffle seed.")
@click.option("--out", required=True, help="Output directory.")
@click.option("--config", default=None, help="Flat JSON config file.")
@click.pass_context
def prepare(ctx, input_path, fmt, threshold, ratios, seed, out, config):
    """Binarize, index and split a corpus into a dataset bundle."""
    resolved = _resolve_config(ctx)
    ratios_t = _parse_ratios(resolved["ratios"])
    records = dataio.load_interactions(resolved["input_path"], format=resolved["fmt"])
    data = dataio.build_dataset(
        records, threshold=resolved["threshold"], split_ratios=ratios_t, seed=resolved["seed"]
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.save(out_dir / DATASET_FILENAME, config_echo=resolved)
    stats = data.stats().to_dict()
    stats["dropped_users"] = data.n_dropped_users
    _write_json(out_dir / "stats.json", {"config": resolved, "stats": stats})
    click.echo(f"dataset: {stats['users']} users, {stats['items']} items, "
               f"{stats['interactions']} interactions -> {out_dir}")


@cli.command()
@click.option("--variant", default="mms", type=click.Choice(["mms", "mms3", "mmsplus"]),
              show_default=True, help="Model variant.")
@click.option("--data", "data_path", required=True, help="Dataset bundle (file or directory).")
@click.option("--out", required=True, help="Output directory.")
@click.option("--latent-dim", default=16, show_default=True, type=int)
@click.option("--hidden-dim", default=None, type=int, help="Defaults to 2x latent dim.")
@click.option("--learning-rate", default=5e-5, show_default=True, type=float)
@click.option("--beta-max", default=0.2, show_default=True, type=float)
@click.option("--anneal-steps", default=None, type=int, help="Defaults to one epoch of batches.")
@click.option("--epochs", default=50, show_default=True, type=int)
@click.option("--batch-size", default=128, show_default=True, type=int)
@click.option("--dropout-rate", default=0.2, show_default=True, type=float)
@click.option("--margin", default=0.1, show_default=True, type=float,
              help="Margin handed to downstream blender training.")
@click.option("--patience", default=10, show_default=True, type=int,
              help="Early-stopping patience on validation NDCG.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--resume", default=None, help="Checkpoint to continue training from.")
@click.option("--config", default=None, help="Flat JSON config file.")
@click.pass_context
def train(ctx, variant, data_path, out, latent_dim, hidden_dim, learning_rate, beta_max,
          anneal_steps, epochs, batch_size, dropout_rate, margin, patience, seed,
          resume, config):
    """Train a model variant and write checkpoint + training logs."""
    resolved = _resolve_config(ctx)
    data = _load_data(resolved["data_path"])
    kwargs = dict(
        variant=resolved["variant"],
        latent_dim=resolved["latent_dim"],
        hidden_dim=resolved["hidden_dim"],
        learning_rate=resolved["learning_rate"],
        beta_max=resolved["beta_max"],
        anneal_steps=resolved["anneal_steps"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        dropout_rate=resolved["dropout_rate"],
        margin=resolved["margin"],
        patience=resolved["patience"],
        seed=resolved["seed"],
    )
    if resolved["resume"]:
        model = MultimodalVAE.load_checkpoint(resolved["resume"], expected_variant=resolved["variant"])
        model.set_params(**{k: v for k, v in kwargs.items() if k != "variant"}, warm_start=True)
    else:
        model = MultimodalVAE(**kwargs)
    model.fit(data)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out_dir / "model.ckpt")
    log = model.train_log_
    _write_json(out_dir / "train_log.json", {"config": resolved, "log": log})
    lines = ["epoch,loss," + ",".join(log["term_labels"]) + ",val_ndcg,beta"]
    for epoch, loss in enumerate(log["epoch_loss"]):
        terms = ",".join(repr(v) for v in log["epoch_term_loss"][epoch])
        lines.append(
            f"{epoch},{loss!r},{terms},{log['val_ndcg'][epoch]!r},{log['beta'][epoch]!r}"
        )
    (out_dir / "loss_curve.csv").write_text("\n".join(lines) + "\n")
    click.echo(
        f"trained {resolved['variant']} ({len(log['term_labels'])}-term objective) "
        f"for {len(log['epoch_loss'])} epochs; best val NDCG {log['best_val_ndcg']:.4f} "
        f"at epoch {log['best_epoch']} -> {out_dir}"
    )


@cli.command("build-critiques")
@click.option("--model", "model_path", required=True, help="Model checkpoint.")
@click.option("--data", "data_path", required=True, help="Dataset bundle.")
@click.option("--out", required=True, help="Output directory.")
@click.option("--cap", default=100, show_default=True, type=int,
              help="Max affected/unaffected items kept per example.")
@click.option("--top-e", default=10, show_default=True, type=int,
              help="Predicted explanation keyphrases excluded from positive sampling.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", default=None, help="Flat JSON config file.")
@click.pass_context
def build_critiques(ctx, model_path, data_path, out, cap, top_e, seed, config):
    """Construct the positive/negative self-supervision datasets."""
    resolved = _resolve_config(ctx)
    data = _load_data(resolved["data_path"])
    model = MultimodalVAE.load_checkpoint(resolved["model_path"])
    khat = predicted_keyphrase_sets(model, data, top_e=resolved["top_e"])
    result = build_synthetic_datasets(data, khat, seed=resolved["seed"], cap=resolved["cap"])

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_examples_jsonl(out_dir / "d_plus.jsonl", result.d_plus)
    save_examples_jsonl(out_dir / "d_minus.jsonl", result.d_minus)
    _write_json(
        out_dir / "report.json",
        {
            "config": resolved,
            "n_plus": len(result.d_plus),
            "n_minus": len(result.d_minus),
            "skipped_plus": result.skipped_plus,
            "skipped_minus": result.skipped_minus,
        },
    )
    click.echo(
        f"critiques: {len(result.d_plus)} positive / {len(result.d_minus)} negative "
        f"(skipped {result.skipped_plus}/{result.skipped_minus}) -> {out_dir}"
    )


@cli.command("train-blender")
@click.option("--model", "model_path", required=True, help="Frozen model checkpoint.")
@click.option("--data", "data_path", required=True, help="Dataset bundle.")
@click.option("--critiques", required=True, help="Directory with d_plus/d_minus.jsonl.")
@click.option("--out", required=True, help="Output directory.")
@click.option("--learning-rate", default=1e-3, show_default=True, type=float)
@click.option("--margin", default=0.1, show_default=True, type=float)
@click.option("--epochs", default=20, show_default=True, type=int)
@click.option("--batch-size", default=64, show_default=True, type=int)
@click.option("--encode-mode", default="auto", type=click.Choice(["auto", "shared", "split"]),
              show_default=True, help="Critique-latent encoder routing.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", default=None, help="Flat JSON config file.")
@click.pass_context
def train_blender(ctx, model_path, data_path, critiques, out, learning_rate, margin,
                  epochs, batch_size, encode_mode, seed, config):
    """Train the critique blender on the synthetic datasets (model frozen)."""
    resolved = _resolve_config(ctx)
    data = _load_data(resolved["data_path"])
    model = MultimodalVAE.load_checkpoint(resolved["model_path"])
    crit_dir = Path(resolved["critiques"])
    d_plus = load_examples_jsonl(crit_dir / "d_plus.jsonl")
    d_minus = load_examples_jsonl(crit_dir / "d_minus.jsonl")
    blender = CritiqueBlender(
        learning_rate=resolved["learning_rate"],
        margin=resolved["margin"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        encode_mode=resolved["encode_mode"],
        seed=resolved["seed"],
    ).fit(model, data, d_plus, d_minus)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    blender.save_checkpoint(out_dir / "blender.ckpt")
    _write_json(out_dir / "train_log.json", {"config": resolved, "log": blender.train_log_})
    losses = blender.train_log_["epoch_loss"]
    click.echo(f"blender: loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} epochs -> {out_dir}")


@cli.command("eval")
@click.option("--model", "model_path", required=True, help="Model checkpoint.")
@click.option("--data", "data_path", required=True, help="Dataset bundle.")
@click.option("--split", default="test", type=click.Choice(["val", "test"]), show_default=True)
@click.option("--k", default=10, show_default=True, type=int, help="Cutoff for @k metrics.")
@click.option("--out", default=None, help="Write the JSON report here (default: stdout).")
@click.option("--config", default=None, help="Flat JSON config file.")
@click.pass_context
def eval_cmd(ctx, model_path, data_path, split, k, out, config):
    """Ranking + explanation metrics on a held-out split."""
    resolved = _resolve_config(ctx)
    data = _load_data(resolved["data_path"])
    model = MultimodalVAE.load_checkpoint(resolved["model_path"])
    report = model.evaluation_report(data, split=resolved["split"], k=resolved["k"])
    payload = {"config": resolved, "report": report}
    if out:
        _write_json(out, payload)
        click.echo(f"eval report -> {out}")
    else:
        click.echo(json.dumps(payload, sort_keys=True, indent=2))


@cli.command("simulate")
@click.option("--model", "model_path", required=True, help="Model checkpoint.")
@click.option("--blender", "blender_path", default=None, help="Blender checkpoint (gru reranker).")
@click.option("--data", "data_path", required=True, help="Dataset bundle.")
@click.option("--reranker", default="gru", type=click.Choice(["gru", "uac", "identity"]),
              show_default=True, help="Blending strategy for the session re-ranking.")
@click.option("--polarity", default="positive", show_default=True,
              type=click.Choice(["positive", "negative"]))
@click.option("--strategy", default="pop", type=click.Choice(["pop", "diff"]), show_default=True)
@click.option("--top-n", default=10, show_default=True, type=int)
@click.option("--max-turns", default=10, show_default=True, type=int)
@click.option("--negatives", default=299, show_default=True, type=int,
              help="Sampled unseen items per session.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--label", default=None, help="Model label in outputs (default: checkpoint stem).")
@click.option("--out", required=True, help="Output JSON path.")
@click.option("--config", default=None, help="Flat JSON config file.")
@click.pass_context
def simulate_cmd(ctx, model_path, blender_path, data_path, reranker, polarity, strategy,
                 top_n, max_turns, negatives, seed, label, out, config):
    """Run the multi-step critiquing simulation and write the result JSON."""
    resolved = _resolve_config(ctx)
    data = _load_data(resolved["data_path"])
    model = MultimodalVAE.load_checkpoint(resolved["model_path"])
    if resolved["reranker"] == "gru":
        if not resolved["blender_path"]:
            raise ConfigError("--blender is required with the gru reranker")
        blender = CritiqueBlender.load_checkpoint(resolved["blender_path"])
    elif resolved["reranker"] == "uac":
        blender = UACBlender()
    else:
        blender = IdentityBlender()
    sim_config = SimConfig(
        polarity=resolved["polarity"],
        strategy=resolved["strategy"],
        top_n=resolved["top_n"],
        max_turns=resolved["max_turns"],
        n_candidate_negatives=resolved["negatives"],
        seed=resolved["seed"],
    )
    model_label = resolved["label"] or Path(resolved["model_path"]).stem
    result = simulate(model, blender, data, sim_config, model_label=model_label)
    payload = result.to_json_dict()
    payload["config"] = {**payload["config"], "cli": resolved}
    _write_json(out, payload)
    click.echo(
        f"simulated {result.n_sessions} sessions: success "
        f"{result.success_rate:.3f} +/- {result.success_ci:.3f}, "
        f"length {result.avg_length:.2f} +/- {result.length_ci:.2f} -> {out}"
    )


@cli.command()
@click.argument("results", nargs=-1, required=True)
@click.option("--out-csv", default=None, help="Comparison CSV path.")
@click.option("--out-json", default=None, help="Comparison JSON path.")
def compare(results, out_csv, out_json):
    """Align simulation result JSONs into a comparison table."""
    loaded = [SimResult.from_json_dict(json.loads(Path(p).read_text())) for p in results]
    rows = compare_runs(loaded)
    if out_json:
        _write_json(out_json, {"rows": rows})
    text = comparison_csv(rows)
    if out_csv:
        Path(out_csv).write_text(text)
    if not (out_csv or out_json):
        click.echo(text, nl=False)


@cli.command()
@click.option("--model", "model_path", required=True, envvar="MODEL_PATH", help="Model checkpoint.")
@click.option("--blender", "blender_path", required=True, envvar="BLENDER_PATH",
              help="Blender checkpoint.")
@click.option("--data", "data_path", required=True, envvar="DATA_PATH", help="Dataset bundle.")
@click.option("--port", default=8000, show_default=True, type=int, envvar="PORT")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--top-n", default=10, show_default=True, type=int, envvar="TOP_N")
@click.option("--max-turns", default=10, show_default=True, type=int, envvar="MAX_TURNS")
def serve(model_path, blender_path, data_path, port, host, top_n, max_turns):
    """Serve the interactive critiquing session API."""
    import hashlib

    import uvicorn

    from .service import create_app

    data = _load_data(data_path)
    model = MultimodalVAE.load_checkpoint(model_path)
    blender = CritiqueBlender.load_checkpoint(blender_path)
    checkpoint_info = {
        "checkpoint_file_sha256": hashlib.sha256(Path(model_path).read_bytes()).hexdigest()
    }

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError as exc:
        raise OSError(f"cannot bind {host}:{port}: {exc}") from exc
    finally:
        probe.close()

    app = create_app(
        model=model,
        blender=blender,
        data=data,
        top_n=top_n,
        max_turns=max_turns,
        checkpoint_info=checkpoint_info,
    )
    uvicorn.run(app, host=host, port=port)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except (TrainingDivergedError, NumericError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, EmptyDatasetError, CheckpointError) as exc:
        click.echo(f"validation error: {exc}", err=True)
        return EXIT_VALIDATION
    except (FileNotFoundError, json.JSONDecodeError, CritVaeError, ValueError, KeyError) as exc:
        click.echo(f"validation error: {exc}", err=True)
        return EXIT_VALIDATION
    except OSError as exc:
        click.echo(f"environment error: {exc}", err=True)
        return EXIT_ENVIRONMENT


if __name__ == "__main__":
    sys.exit(main())
