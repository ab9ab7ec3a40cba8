"""Command surface for training and exporting baseline predictions."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import BaselineError
from .formats import read_codebook, read_manifest, read_split
from .model import Backbone, MultiHeadModelSpec, heads_for
from .predicting import export_predictions, load_checkpoint, predict
from .training import train

EXIT_CONFIG = 2


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main() -> None:
    """Supervised multi-head CNN baselines."""


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--split", "split_path", required=True, type=click.Path())
@click.option("--codebook", "codebook_path", required=True, type=click.Path())
@click.option("--image-root", required=True, type=click.Path())
@click.option("--augmented-root", default=None, type=click.Path())
@click.option(
    "--backbone",
    default=Backbone.Vgg16Like.value,
    type=click.Choice([b.value for b in Backbone]),
    show_default=True,
)
@click.option("--input-size", default=64, show_default=True)
@click.option("--learning-rate", default=1e-3, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", default="baseline-out", show_default=True, type=click.Path())
def cmd_train(manifest_path, split_path, codebook_path, image_root, augmented_root,
              backbone, input_size, learning_rate, epochs, batch_size, seed, out_dir) -> None:
    """Fit the shared encoder and per-attribute heads on the train split."""
    try:
        codebook = read_codebook(codebook_path)
        split = read_split(split_path)
        manifest = read_manifest(manifest_path)
        spec = MultiHeadModelSpec(
            backbone=Backbone(backbone),
            heads=heads_for(codebook, split.excluded_attributes),
            input_size=input_size,
            learning_rate=learning_rate,
            epochs=epochs,
            batch_size=batch_size,
        )
        result = train(
            spec,
            split,
            manifest,
            codebook,
            image_root=image_root,
            augmented_root=augmented_root,
            out_dir=out_dir,
            seed=seed,
        )
    except (BaselineError, FileNotFoundError) as error:
        _fail(str(error), EXIT_CONFIG)
        return
    final = result.history[-1]
    click.echo(
        f"trained {len(spec.heads)} heads for {len(result.history)} epochs: "
        f"final train loss {sum(final['train'].values()):.4f}, "
        f"val loss {sum(final['val'].values()):.4f}"
    )
    click.echo(f"wrote {result.checkpoint_path}")
    click.echo(f"wrote {result.log_path}")


@main.command("predict")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--codebook", "codebook_path", required=True, type=click.Path())
@click.option("--image-root", required=True, type=click.Path())
@click.option("--split", "split_path", default=None, type=click.Path())
@click.option(
    "--subset",
    default="test",
    type=click.Choice(["train", "validation", "test", "unseen"]),
    show_default=True,
)
@click.option("--out", "out_path", default="predictions.jsonl", show_default=True,
              type=click.Path())
def cmd_predict(checkpoint_path, manifest_path, codebook_path, image_root,
                split_path, subset, out_path) -> None:
    """Export model predictions in the pipeline's JSONL format."""
    try:
        codebook = read_codebook(codebook_path)
        manifest = read_manifest(manifest_path)
        loaded = load_checkpoint(checkpoint_path)
        image_ids = None
        if split_path:
            split = read_split(split_path)
            bucket = split.train_original if subset == "train" else getattr(split, subset)
            image_ids = sorted(bucket & {row.image_id for row in manifest})
        rows = predict(
            loaded, manifest, codebook, image_root=image_root, image_ids=image_ids
        )
        export_predictions(rows, out_path, loaded, codebook)
    except (BaselineError, FileNotFoundError) as error:
        _fail(str(error), EXIT_CONFIG)
        return
    click.echo(f"predicted {len(rows)} images with {loaded.backbone_tag}")
    click.echo(f"wrote {Path(out_path)}")
