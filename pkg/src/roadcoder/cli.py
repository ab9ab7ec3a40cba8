"""Operator commands gluing the pipeline together around one config file.

Configuration is TOML; command-line flags override file values. Every
output file carries a run-manifest (config hash, codebook version, template
hash) so results can be traced back to the exact setup that produced them.
Exit codes: 2 for configuration problems, 3 for backend or auth failures,
4 for an exhausted request budget.
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .assessment import (
    RoadPrediction,
    RoadUser,
    StarRatingInput,
    aggregate_segment,
    default_scoring_config_path,
    estimate_star_rating,
    load_scoring_config,
    star_rating_confusion,
)
from .codebook import Codebook, default_codebook_path, load_codebook
from .dataset import (
    ImageRecord,
    NoiseKind,
    SegmentRecord,
    augment_image,
    load_dataset,
    read_split,
    source_image_id,
    split_dataset,
    write_split,
)
from .errors import (
    AuthError,
    BudgetExceeded,
    DanglingReference,
    DegenerateFov,
    EmptyDataset,
    EmptyMatrix,
    GroundTruthCodeUnknown,
    InvalidConfiguration,
    LengthMismatch,
    ManifestParseError,
    MissingAttribute,
    MissingImageBytes,
    NotEquirectangular,
    QuotaExceeded,
    RateLimitedExhausted,
    ResponseUnparseable,
    SchemaViolation,
    SegmentImageMismatch,
    SegmentMismatch,
    TemplateError,
    TransportError,
    UnsupportedPixelFormat,
)
from .evaluation import (
    build_report,
    confusion_matrices,
    write_confusion_csv,
    write_report_csv,
    write_report_json,
    write_star_matrix_csv,
)
from .mapillary import ImageryQuery, MapillaryProvider, ReplayProvider, query_images
from .prompting import (
    PromptConfig,
    build_system_instruction,
    build_user_prompt,
    default_template_dir,
)
from .vlm import (
    BackendDescriptor,
    ParsedPredictions,
    RequestBudget,
    ResponseCache,
    TokenBucket,
    VlmClient,
    make_backend,
    read_predictions_jsonl,
    write_predictions_jsonl,
)

EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_BUDGET = 4

_CONFIG_ERRORS = (
    InvalidConfiguration,
    SchemaViolation,
    ManifestParseError,
    DanglingReference,
    GroundTruthCodeUnknown,
    EmptyDataset,
    TemplateError,
    MissingImageBytes,
    UnsupportedPixelFormat,
    SegmentImageMismatch,
    SegmentMismatch,
    MissingAttribute,
    LengthMismatch,
    EmptyMatrix,
    NotEquirectangular,
    DegenerateFov,
    FileNotFoundError,
)
_BACKEND_ERRORS = (
    AuthError,
    RateLimitedExhausted,
    ResponseUnparseable,
    QuotaExceeded,
    TransportError,
)


@dataclass(frozen=True)
class RunConfig:
    codebook_path: Path
    dataset_manifest: Path
    image_root: Path
    backend: BackendDescriptor
    prompt: PromptConfig
    scoring_config_path: Path
    cache_dir: Path
    output_dir: Path
    request_budget: int
    seed: int
    parallelism: int = 1
    fixtures_path: Path | None = None
    road_user: RoadUser = RoadUser.Motorcyclist
    default_operating_speed: float = 60.0
    default_aadt: float = 0.0


def load_run_config(
    path: str | Path,
    *,
    seed: int | None = None,
    budget: int | None = None,
    backend_name: str | None = None,
    parallelism: int | None = None,
    output_dir: str | None = None,
    cache_dir: str | None = None,
) -> RunConfig:
    """Parse a TOML run config; keyword arguments are flag overrides."""
    path = Path(path)
    if not path.is_file():
        raise InvalidConfiguration(f"config file {path} does not exist")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfiguration(f"{path}: invalid TOML ({exc})") from exc

    base = path.parent

    def _resolve(value: str) -> Path:
        if not isinstance(value, str):
            raise InvalidConfiguration(f"{path}: expected a string path, got {value!r}")
        p = Path(value)
        return p if p.is_absolute() else base / p

    def _number(kind, value, where: str):
        try:
            return kind(value)
        except (TypeError, ValueError):
            raise InvalidConfiguration(
                f"{path}: {where} must be a number, got {value!r}"
            ) from None

    paths = raw.get("paths", {})
    backend_raw = raw.get("backend", {})
    prompt_raw = raw.get("prompt", {})
    run_raw = raw.get("run", {})
    assess_raw = raw.get("assess", {})

    codebook_path = (
        _resolve(paths["codebook"]) if "codebook" in paths else default_codebook_path()
    )
    if "manifest" not in paths:
        raise InvalidConfiguration(f"{path}: [paths] manifest is required")
    manifest = _resolve(paths["manifest"])
    image_root = _resolve(paths.get("image_root", str(manifest.parent)))
    scoring = (
        _resolve(paths["scoring"])
        if "scoring" in paths
        else default_scoring_config_path()
    )
    for field_name, candidate in (
        ("codebook", codebook_path),
        ("manifest", manifest),
        ("scoring", scoring),
    ):
        if not candidate.is_file():
            raise InvalidConfiguration(
                f"{path}: [paths] {field_name} points to missing file {candidate}"
            )
    if not image_root.is_dir():
        raise InvalidConfiguration(
            f"{path}: [paths] image_root {image_root} is not a directory"
        )

    backend_label = backend_name or backend_raw.get("name", "mock")
    if not isinstance(backend_label, str):
        raise InvalidConfiguration(f"{path}: [backend] name must be a string")
    descriptor = BackendDescriptor(
        name=backend_label,
        endpoint=backend_raw.get("endpoint", ""),
        credentials_env=backend_raw.get("credentials_env", ""),
        request_timeout=_number(float, backend_raw.get("request_timeout", 60.0), "[backend] request_timeout"),
        max_retries=_number(int, backend_raw.get("max_retries", 3), "[backend] max_retries"),
        rate_limit=_number(float, backend_raw.get("rate_limit", 60.0), "[backend] rate_limit"),
    )
    prompt = PromptConfig(
        country=prompt_raw.get("country", "TH"),
        local_context=prompt_raw.get("local_context", ""),
        output_language=prompt_raw.get("output_language", "English"),
    )

    effective_budget = (
        budget if budget is not None else _number(int, run_raw.get("budget", 10_000), "[run] budget")
    )
    if effective_budget <= 0:
        raise InvalidConfiguration("request budget must be > 0")
    effective_parallelism = (
        parallelism
        if parallelism is not None
        else _number(int, run_raw.get("parallelism", 1), "[run] parallelism")
    )
    if effective_parallelism <= 0:
        raise InvalidConfiguration("parallelism must be > 0")

    fixtures = backend_raw.get("fixtures")
    try:
        road_user = RoadUser(assess_raw.get("road_user", "Motorcyclist"))
    except ValueError:
        raise InvalidConfiguration(
            f"{path}: [assess] road_user {assess_raw.get('road_user')!r} unknown"
        ) from None

    return RunConfig(
        codebook_path=codebook_path,
        dataset_manifest=manifest,
        image_root=image_root,
        backend=descriptor,
        prompt=prompt,
        scoring_config_path=scoring,
        cache_dir=_resolve(cache_dir) if cache_dir else _resolve(run_raw.get("cache_dir", ".roadcoder-cache")),
        output_dir=_resolve(output_dir) if output_dir else _resolve(run_raw.get("output_dir", "out")),
        request_budget=effective_budget,
        seed=seed if seed is not None else _number(int, run_raw.get("seed", 0), "[run] seed"),
        parallelism=effective_parallelism,
        fixtures_path=_resolve(fixtures) if fixtures else None,
        road_user=road_user,
        default_operating_speed=_number(
            float, assess_raw.get("operating_speed", 60.0), "[assess] operating_speed"
        ),
        default_aadt=_number(float, assess_raw.get("aadt", 0.0), "[assess] aadt"),
    )


def run_manifest_for(config: RunConfig, codebook: Codebook) -> dict[str, str]:
    """Provenance triple stamped onto every output file.

    The config hash covers only fields that change results; execution knobs
    like parallelism, directories, and the budget stay out so a rerun of the
    same experiment hashes the same.
    """
    payload = {
        "codebook_path": str(config.codebook_path),
        "dataset_manifest": str(config.dataset_manifest),
        "image_root": str(config.image_root),
        "backend": dataclasses.asdict(config.backend),
        "prompt": dataclasses.asdict(config.prompt),
        "scoring_config_path": str(config.scoring_config_path),
        "seed": config.seed,
        "road_user": config.road_user.value,
        "default_operating_speed": config.default_operating_speed,
        "default_aadt": config.default_aadt,
    }
    canonical = json.dumps(payload, sort_keys=True, default=str)
    config_hash = hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
    template_text = (default_template_dir() / "system_instruction.txt").read_bytes()
    template_hash = hashlib.sha256(template_text).hexdigest()[:12]
    return {
        "config": config_hash,
        "codebook": codebook.version,
        "template": template_hash,
    }


def _fail(exc: Exception, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(action) -> None:
    try:
        action()
    except BudgetExceeded as exc:
        _fail(exc, EXIT_BUDGET)
    except _BACKEND_ERRORS as exc:
        _fail(exc, EXIT_BACKEND)
    except _CONFIG_ERRORS as exc:
        _fail(exc, EXIT_CONFIG)


def _config_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path())(fn)
    fn = click.option("--seed", type=int, default=None, help="Override [run] seed.")(fn)
    fn = click.option("--budget", type=int, default=None, help="Override request budget.")(fn)
    fn = click.option("--backend", "backend_name", default=None, help="Override backend name.")(fn)
    fn = click.option("--parallelism", type=int, default=None, help="Worker count.")(fn)
    fn = click.option("--output-dir", default=None, help="Override output directory.")(fn)
    fn = click.option("--cache-dir", default=None, help="Override cache directory.")(fn)
    return fn


def _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir):
    return load_run_config(
        config_path,
        seed=seed,
        budget=budget,
        backend_name=backend_name,
        parallelism=parallelism,
        output_dir=output_dir,
        cache_dir=cache_dir,
    )


@click.group()
def main() -> None:
    """Road-attribute coding pipeline."""


@main.group("codebook")
def codebook_group() -> None:
    """Codebook inspection."""


@codebook_group.command("validate")
@click.option("--codebook", "codebook_path", default=None, type=click.Path())
def codebook_validate(codebook_path) -> None:
    """Load a codebook file and report its shape."""

    def action() -> None:
        path = Path(codebook_path) if codebook_path else default_codebook_path()
        book = load_codebook(path)
        n_classes = sum(len(attr.classes) for attr in book)
        click.echo(f"codebook {book.version}: {len(book)} attributes, {n_classes} classes")
        for group in book.groups_present():
            members = sum(1 for attr in book if attr.group is group)
            click.echo(f"  {group.value}: {members} attributes")
        click.echo("ok")

    _guarded(action)


@main.group("dataset")
def dataset_group() -> None:
    """Dataset preparation."""


@dataset_group.command("split")
@_config_options
@click.option("--out", "out_path", default=None, help="Split file destination.")
def dataset_split(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir, out_path) -> None:
    """Partition the manifest into train/validation/test/unseen."""

    def action() -> None:
        config = _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir)
        book = load_codebook(config.codebook_path)
        _, segments = load_dataset(
            config.dataset_manifest, config.image_root, book, allow_missing_images=True
        )
        split = split_dataset(segments, book, config.seed)
        config.output_dir.mkdir(parents=True, exist_ok=True)
        destination = Path(out_path) if out_path else config.output_dir / "split.json"
        write_split(split, destination, run_manifest_for(config, book))
        for bucket in ("train_original", "train_augmented", "validation", "test", "unseen", "excluded"):
            click.echo(f"{bucket}: {len(getattr(split, bucket))} images")
        for subject, note in split.provenance_log:
            click.echo(f"  {subject}: {note}")
        click.echo(f"wrote {destination}")

    _guarded(action)


@dataset_group.command("augment")
@_config_options
@click.option("--split", "split_path", required=True, type=click.Path())
@click.option("--kinds", default=None, help="Comma-separated noise kinds; default all.")
@click.option("--out-dir", "aug_dir", default=None, help="Directory for noised copies.")
def dataset_augment(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir, split_path, kinds, aug_dir) -> None:
    """Materialise the noised training copies listed in a split file."""

    def action() -> None:
        config = _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir)
        book = load_codebook(config.codebook_path)
        images, _ = load_dataset(config.dataset_manifest, config.image_root, book)
        by_id = {image.image_id: image for image in images}
        split = read_split(split_path)
        if kinds:
            try:
                selected = {NoiseKind(k.strip()) for k in kinds.split(",") if k.strip()}
            except ValueError as exc:
                raise InvalidConfiguration(f"unknown noise kind in --kinds: {exc}") from None
        else:
            selected = set(NoiseKind)
        destination = Path(aug_dir) if aug_dir else config.output_dir / "augmented"
        destination.mkdir(parents=True, exist_ok=True)
        counts = {kind: 0 for kind in sorted(selected, key=lambda k: k.value)}
        for augmented_id in sorted(split.train_augmented):
            original_id, kind = source_image_id(augmented_id)
            if kind not in selected:
                continue
            if original_id not in by_id:
                raise DanglingReference(
                    f"split references unknown source image {original_id}"
                )
            pixels = np.asarray(Image.open(by_id[original_id].path).convert("RGB"))
            image_seed = int.from_bytes(
                hashlib.sha256(f"{config.seed}:{augmented_id}".encode()).digest()[:8],
                "big",
            )
            noised = augment_image(pixels, kind, image_seed)
            Image.fromarray(noised).save(destination / f"{augmented_id}.png")
            counts[kind] += 1
        for kind, count in counts.items():
            click.echo(f"{kind.value}: {count} images written")
        click.echo(f"wrote {sum(counts.values())} files to {destination}")

    _guarded(action)


def _select_images(
    images: list[ImageRecord],
    segments: list[SegmentRecord],
    split_path: str | None,
    subset: str,
    segment_filter: str | None,
) -> list[ImageRecord]:
    chosen = images
    if segment_filter:
        wanted = {s.strip() for s in segment_filter.split(",") if s.strip()}
        known = {segment.segment_id for segment in segments}
        missing = wanted - known
        if missing:
            raise SegmentMismatch(f"unknown segment ids requested: {sorted(missing)}")
        chosen = [image for image in chosen if image.segment_id in wanted]
    if split_path:
        split = read_split(split_path)
        if subset == "train":
            allowed = split.train_original
        else:
            allowed = getattr(split, subset)
        chosen = [image for image in chosen if image.image_id in allowed]
    if not chosen:
        raise EmptyDataset("no images selected for assessment")
    return sorted(chosen, key=lambda image: image.image_id)


@main.command("assess")
@_config_options
@click.option("--split", "split_path", default=None, type=click.Path())
@click.option(
    "--subset",
    default="test",
    type=click.Choice(["train", "validation", "test", "unseen"]),
    show_default=True,
    help="Split bucket to assess when --split is given.",
)
@click.option("--segments", "segment_filter", default=None, help="Comma-separated segment ids.")
def assess(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir, split_path, subset, segment_filter) -> None:
    """Code images with the configured backend and aggregate per segment."""

    def action() -> None:
        config = _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir)
        book = load_codebook(config.codebook_path)
        images, segments = load_dataset(config.dataset_manifest, config.image_root, book)
        chosen = _select_images(images, segments, split_path, subset, segment_filter)
        system = build_system_instruction(book, config.prompt)

        fixtures = None
        if config.fixtures_path is not None:
            fixtures = json.loads(config.fixtures_path.read_text(encoding="utf-8"))
        backend = make_backend(config.backend, fixtures=fixtures, codebook=book)
        budget_tracker = RequestBudget(config.request_budget)
        client = VlmClient(
            config.backend,
            backend,
            ResponseCache(config.cache_dir),
            book,
            budget=budget_tracker,
            limiter=TokenBucket(config.backend.rate_limit),
        )

        results: dict[str, ParsedPredictions] = {}
        budget_hit: list[BudgetExceeded] = []

        def classify(image: ImageRecord) -> ParsedPredictions:
            return client.classify_image(system, build_user_prompt(image))

        with concurrent.futures.ThreadPoolExecutor(config.parallelism) as pool:
            futures = {pool.submit(classify, image): image for image in chosen}
            for future in concurrent.futures.as_completed(futures):
                image = futures[future]
                try:
                    results[image.image_id] = future.result()
                except concurrent.futures.CancelledError:
                    continue
                except BudgetExceeded as exc:
                    if not budget_hit:
                        budget_hit.append(exc)
                    for pending in futures:
                        pending.cancel()

        config.output_dir.mkdir(parents=True, exist_ok=True)
        manifest_header = run_manifest_for(config, book)
        predictions_path = config.output_dir / "predictions.jsonl"
        write_predictions_jsonl(
            [results[image_id] for image_id in sorted(results)],
            predictions_path,
            manifest_header,
        )

        segment_payloads = []
        by_segment: dict[str, list[ParsedPredictions]] = {}
        for image in chosen:
            if image.image_id in results:
                by_segment.setdefault(image.segment_id, []).append(results[image.image_id])
        segments_by_id = {segment.segment_id: segment for segment in segments}
        for segment_id in sorted(by_segment):
            road = aggregate_segment(by_segment[segment_id], segments_by_id[segment_id], book)
            segment_payloads.append(
                {
                    "segment_id": road.segment_id,
                    "aggregated": dict(sorted(road.aggregated.items())),
                    "contributing": dict(sorted(road.contributing.items())),
                    "n_images": road.n_images,
                    "unresolved": list(road.unresolved),
                }
            )
        aggregated_path = config.output_dir / "aggregated.json"
        aggregated_path.write_text(
            json.dumps(
                {"run_manifest": manifest_header, "segments": segment_payloads},
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )

        used = budget_tracker.used
        click.echo(
            f"coded {len(results)}/{len(chosen)} images "
            f"({used} requests, {len(results) - min(used, len(results))} cache hits)"
        )
        click.echo(f"wrote {predictions_path}")
        click.echo(f"wrote {aggregated_path}")
        if budget_hit:
            raise BudgetExceeded(
                f"request budget {config.request_budget} exhausted after {used} requests; "
                f"partial outputs flushed"
            )

    _guarded(action)


@main.command("ingest")
@_config_options
@click.option("--replay", "replay_path", default=None, type=click.Path())
@click.option("--buffer-m", default=50.0, show_default=True)
@click.option("--max-age-days", default=365, show_default=True)
@click.option("--reference-date", default=None, help="ISO timestamp anchoring recency.")
def ingest(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir, replay_path, buffer_m, max_age_days, reference_date) -> None:
    """Find nearby crowdsourced imagery for every segment."""

    def action() -> None:
        from datetime import datetime, timezone

        config = _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir)
        book = load_codebook(config.codebook_path)
        images, segments = load_dataset(
            config.dataset_manifest, config.image_root, book, allow_missing_images=True
        )
        first_image: dict[str, ImageRecord] = {}
        for image in sorted(images, key=lambda i: (i.segment_id, i.order_in_segment)):
            first_image.setdefault(image.segment_id, image)

        provider = ReplayProvider(replay_path) if replay_path else MapillaryProvider()
        reference = (
            datetime.fromisoformat(reference_date.replace("Z", "+00:00"))
            if reference_date
            else None
        )
        if reference is not None and reference.tzinfo is None:
            reference = reference.replace(tzinfo=timezone.utc)

        found: dict[str, list[dict]] = {}
        total = 0
        for segment in sorted(segments, key=lambda s: s.segment_id):
            anchor = first_image.get(segment.segment_id)
            if anchor is None:
                continue
            query = ImageryQuery(
                latitude=anchor.latitude,
                longitude=anchor.longitude,
                buffer_m=buffer_m,
                max_age_days=max_age_days,
                reference_date=reference,
            )
            candidates = query_images(query, provider)
            total += len(candidates)
            found[segment.segment_id] = [
                {
                    "provider_id": c.provider_id,
                    "latitude": c.latitude,
                    "longitude": c.longitude,
                    "captured_at": c.captured_at.isoformat(),
                    "is_panorama": c.is_panorama,
                    "distance_m": round(c.distance_m, 3),
                }
                for c in candidates
            ]
            click.echo(f"{segment.segment_id}: {len(candidates)} candidates")

        config.output_dir.mkdir(parents=True, exist_ok=True)
        out = config.output_dir / "candidates.json"
        out.write_text(
            json.dumps(
                {"run_manifest": run_manifest_for(config, book), "segments": found},
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        covered = sum(1 for candidates in found.values() if candidates)
        click.echo(f"{covered}/{len(found)} segments covered, {total} candidates total")
        click.echo(f"wrote {out}")

    _guarded(action)


@main.command("evaluate")
@_config_options
@click.option("--predictions", "predictions_path", required=True, type=click.Path())
@click.option("--split", "split_path", default=None, type=click.Path())
@click.option(
    "--subset",
    default="test",
    type=click.Choice(["train", "validation", "test", "unseen"]),
    show_default=True,
)
@click.option("--keep-missing/--drop-missing", "include_missing", default=True,
              help="Score segments lacking a prediction as wrong, or drop them.")
def evaluate(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir, predictions_path, split_path, subset, include_missing) -> None:
    """Compare per-image predictions against manifest ground truth."""

    def action() -> None:
        config = _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir)
        book = load_codebook(config.codebook_path)
        images, segments = load_dataset(
            config.dataset_manifest, config.image_root, book, allow_missing_images=True
        )
        image_to_segment = {image.image_id: image.segment_id for image in images}
        items = read_predictions_jsonl(predictions_path)
        unknown = sorted({i.image_id for i in items} - set(image_to_segment))
        if unknown:
            raise SegmentMismatch(
                f"predictions reference images absent from the manifest: {unknown}"
            )
        if split_path:
            split = read_split(split_path)
            allowed = split.train_original if subset == "train" else getattr(split, subset)
            items = [item for item in items if item.image_id in allowed]
        if not items:
            raise EmptyDataset("no predictions left to evaluate")

        by_segment: dict[str, list[ParsedPredictions]] = {}
        for item in items:
            by_segment.setdefault(image_to_segment[item.image_id], []).append(item)
        segments_by_id = {segment.segment_id: segment for segment in segments}
        roads = [
            aggregate_segment(by_segment[sid], segments_by_id[sid], book)
            for sid in sorted(by_segment)
        ]
        truths = [segments_by_id[road.segment_id] for road in roads]
        report = build_report(roads, truths, book, include_missing=include_missing)
        matrices = confusion_matrices(roads, truths, book, include_missing=include_missing)

        config.output_dir.mkdir(parents=True, exist_ok=True)
        header = run_manifest_for(config, book)
        write_report_json(report, config.output_dir / "report.json", header)
        write_report_csv(report, config.output_dir / "report.csv", header)
        matrix_dir = config.output_dir / "confusion"
        matrix_dir.mkdir(parents=True, exist_ok=True)
        for attr_id in sorted(matrices):
            write_confusion_csv(
                matrices[attr_id], matrix_dir / f"confusion_{attr_id}.csv", header
            )
        quartet = report.overall
        click.echo(
            f"evaluated {len(roads)} segments: accuracy {quartet.accuracy:.4f}, "
            f"precision {quartet.precision:.4f}, recall {quartet.recall:.4f}, "
            f"f1 {quartet.f1:.4f}"
        )
        click.echo(f"wrote {config.output_dir / 'report.json'}")
        click.echo(f"wrote {config.output_dir / 'report.csv'}")
        click.echo(f"wrote {len(matrices)} confusion matrices to {matrix_dir}")

    _guarded(action)


@main.group("report")
def report_group() -> None:
    """Derived summaries."""


@report_group.command("star-matrix")
@_config_options
@click.option("--aggregated", "aggregated_path", required=True, type=click.Path())
def star_matrix(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir, aggregated_path) -> None:
    """Star ratings from predictions vs ratings from ground truth."""

    def action() -> None:
        config = _load(config_path, seed, budget, backend_name, parallelism, output_dir, cache_dir)
        book = load_codebook(config.codebook_path)
        scoring = load_scoring_config(config.scoring_config_path)
        _, segments = load_dataset(
            config.dataset_manifest, config.image_root, book, allow_missing_images=True
        )
        segments_by_id = {segment.segment_id: segment for segment in segments}
        payload = json.loads(Path(aggregated_path).read_text(encoding="utf-8"))

        predicted = []
        truth_stars = []
        rows = []
        skipped = 0
        for entry in sorted(payload["segments"], key=lambda e: e["segment_id"]):
            segment = segments_by_id.get(entry["segment_id"])
            if segment is None:
                raise SegmentMismatch(
                    f"aggregated file references unknown segment {entry['segment_id']}"
                )
            if not segment.ground_truth:
                skipped += 1
                continue
            speed = segment.operating_speed or config.default_operating_speed
            aadt = segment.aadt if segment.aadt is not None else config.default_aadt
            road = RoadPrediction(
                segment_id=entry["segment_id"],
                aggregated=dict(entry["aggregated"]),
                contributing=dict(entry["contributing"]),
                n_images=int(entry["n_images"]),
                unresolved=tuple(entry.get("unresolved", [])),
            )
            rating = estimate_star_rating(
                StarRatingInput(road=road, aadt=aadt, operating_speed=speed, road_user=config.road_user),
                scoring,
                codebook=book,
            )
            truth_road = RoadPrediction(
                segment_id=segment.segment_id,
                aggregated=dict(segment.ground_truth),
                contributing={},
                n_images=len(segment.image_ids),
            )
            truth_rating = estimate_star_rating(
                StarRatingInput(road=truth_road, aadt=aadt, operating_speed=speed, road_user=config.road_user),
                scoring,
                codebook=book,
            )
            predicted.append(rating)
            truth_stars.append(truth_rating.stars)
            rows.append(
                {
                    "segment_id": segment.segment_id,
                    "predicted_stars": rating.stars,
                    "predicted_score": rating.score,
                    "truth_stars": truth_rating.stars,
                    "truth_score": truth_rating.score,
                    "substituted": list(rating.substitutions),
                }
            )
        if not rows:
            raise EmptyDataset("no segments with ground truth to rate")

        confusion = star_rating_confusion(predicted, truth_stars)
        config.output_dir.mkdir(parents=True, exist_ok=True)
        header = run_manifest_for(config, book)
        matrix_path = config.output_dir / "star_matrix.csv"
        write_star_matrix_csv(confusion, matrix_path, header)
        stars_path = config.output_dir / "stars.json"
        stars_path.write_text(
            json.dumps(
                {"run_manifest": header, "segments": rows}, indent=2, sort_keys=True
            )
            + "\n",
            encoding="utf-8",
        )
        agree = sum(confusion.matrix[i][i] for i in range(5))
        high_hits = confusion.high_risk[1][1]
        high_total = confusion.high_risk[1][0] + confusion.high_risk[1][1]
        click.echo(f"rated {len(rows)} segments ({skipped} skipped without truth)")
        click.echo(f"exact star agreement {agree}/{len(rows)}")
        click.echo(f"high-risk detection {high_hits}/{high_total}")
        click.echo(f"wrote {matrix_path}")
        click.echo(f"wrote {stars_path}")

    _guarded(action)


if __name__ == "__main__":
    main()
