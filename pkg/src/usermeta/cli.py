"""Command-line entry points: data generation, experiments, embedding analysis."""

from __future__ import annotations

import logging
from pathlib import Path

import click

from .data import NormalizationStats, load_meta_dataset, normalize_meta
from .embedding import collect_embeddings, project, read_embeddings, write_embeddings, write_points
from .harness import ExperimentConfig, run_experiment
from .learners import load_learner
from .sim import EnvConfig, gen_meta_dataset


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command("gen-data")
@click.option("--users", type=int, required=True)
@click.option("--episodes", type=int, required=True, help="Episodes per user.")
@click.option("--len", "length", type=int, default=500, show_default=True, help="Timesteps per episode.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--csv", "as_csv", is_flag=True, help="Also write a CSV copy of every user file.")
@click.option("--train-users", default=None, help="Comma-separated ids used for the normalization fit.")
def gen_data(users, episodes, length, seed, out, as_csv, train_users):
    """Simulate a multi-user dataset."""
    train = [int(u) for u in train_users.split(",")] if train_users else None
    g = gen_meta_dataset(users, episodes, EnvConfig(episode_length=length), seed, out_dir=out,
                         train_users=train, csv=as_csv)
    click.echo(f"wrote {len(g.meta)} users x {episodes} episodes x {length} steps to {out}")


@main.command("run")
@click.option("--config", type=click.Path(exists=True, dir_okay=False), required=True)
def run(config):
    """Cross-validated comparison of the configured methods."""
    cfg = ExperimentConfig.load(config)
    run_experiment(cfg)
    click.echo((Path(cfg.out) / "results.txt").read_text(), nl=False)


@main.command("embed")
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--batches", type=int, default=50, show_default=True, help="Batches per user.")
@click.option("--batch-size", type=int, default=None, help="Samples per batch [default: users x batch size of training].")
@click.option("--stats", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Normalization file [default: <model>.stats.txt, else DATA/stats.txt].")
@click.option("--users", default=None, help="Comma-separated user ids [default: all].")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def embed(model, data, batches, batch_size, stats, users, seed, out):
    """Adapted user embeddings for sampled batches of every user."""
    learner = load_learner(model)
    if stats is None:
        beside = Path(model).with_suffix(".stats.txt")
        stats = beside if beside.exists() else Path(data) / "stats.txt"
    meta = normalize_meta(load_meta_dataset(data), NormalizationStats.load(stats))
    if users:
        meta = {int(u): meta[int(u)] for u in users.split(",")}
    size = batch_size or learner.hyper.n_users * learner.hyper.batch_size
    records = collect_embeddings(learner, meta, batches, size, seed)
    write_embeddings(out, records)
    click.echo(f"wrote {len(records)} embeddings to {out}")


@main.command("project")
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--method", type=click.Choice(["tsne", "pca"]), default="tsne", show_default=True)
@click.option("--perplexity", type=float, default=30.0, show_default=True)
@click.option("--iterations", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def project_cmd(inp, method, perplexity, iterations, seed, out):
    """2-D projection of an embeddings CSV."""
    records = read_embeddings(inp)
    params = {"perplexity": perplexity, "n_iter": iterations} if method == "tsne" else {}
    project(records, method, seed=seed, **params)
    write_points(out, records)
    click.echo(f"wrote {len(records)} points to {out}")


if __name__ == "__main__":
    main()
