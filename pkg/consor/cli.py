"""Console entry-point for consor."""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .annotations import load_annotations, resolve_taxonomy
from .checkpoint import load_checkpoint, restore_model, restore_trainer, save_checkpoint
from .cir import CirOutput, export_attention_maps, write_attention_maps
from .config import PathsConfig, RunConfig
from .encoders import EncoderProvider, FixtureProvider, SyntheticProvider, export_fixtures
from .errors import ConfigError, ConsorError, GradCheckError
from .evaluation import evaluate, write_metrics_report, write_score_csv
from .features import FeatureStore
from .gradcheck import grad_check
from .logs import attach_event_file, configure_console, detach_handler, emit
from .model import Dataset
from .msat import SHARING_ALIASES, SHARING_MODES, FusionSchedule
from .network import ConsorModel, build_model
from .prompts import CORPUS_KINDS, VocabSelector, class_name_prompts, load_corpora, write_prompt_file, write_vocab_report
from .report import REPORT_COLUMNS, load_reports, summary_rows, write_reports, write_table
from .toy import LABEL_MODES, ToySpec, generate_toy_dataset, write_toy_bundle
from .training import Trainer, train_accuracy

COMMANDS = (
    "gen-toy",
    "build-fixtures",
    "select-vocabs",
    "build-prompts",
    "train",
    "eval",
    "grad-check",
    "export-attn",
    "report",
)

ABLATIONS = {"intr": "use_interpersonal", "conr": "use_context", "gcf": "use_global_fusion"}


def _say(message: str) -> None:
    print(f"[consor] {message}")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config (.json or .toml); flags override its values")
    common.add_argument("--out", default="out", help="Output directory (created; files overwritten)")
    common.add_argument("--seed", type=int, help="Seed for model init, shuffling and synthetic features")
    common.add_argument("--provider", choices=("fixture", "synthetic", "clip"), help="Frozen-feature source")
    common.add_argument("--taxonomy", help="Built-in taxonomy name (pisc-fine, ...) or taxonomy JSON path")
    common.add_argument("--annotations", help="Annotation JSON (overrides paths.annotations)")
    common.add_argument("--fixtures", help="Feature-pack directory (overrides paths.fixtures)")
    common.add_argument("--corpora", help="Directory of <kind>.txt vocab corpora (overrides paths.corpora)")
    common.add_argument(
        "--corpora-subset",
        help=f"Comma-separated corpus kinds to use ({','.join(CORPUS_KINDS)}) or 'none'",
    )
    common.add_argument("--progress", action="store_true", help="Show tqdm progress bars")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More log output (-v info, -vv debug)")
    return common


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--fusion-layers",
        help="Frozen layers fused into the adapter: 'default', 'none', or a list such as '9,12'",
    )
    parser.add_argument(
        "--sharing",
        choices=SHARING_MODES + tuple(SHARING_ALIASES),
        help="Adapter sharing mode",
    )
    parser.add_argument("--classifier", choices=("prompt", "linear"), help="Prompt contrast or linear head")
    parser.add_argument(
        "--ablate",
        help="Comma-separated reasoning stages to switch off: intr, conr, gcf",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consor",
        description="Contextual social relation recognition on frozen dual-encoder features.",
    )
    parser.add_argument("--version", action="version", version=f"consor {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common_parser()

    toy = sub.add_parser("gen-toy", parents=[common], help="Generate a deterministic toy dataset with fixtures")
    toy.add_argument("--images", type=int, default=64, help="Number of toy images")
    toy.add_argument("--persons", type=int, default=3, help="Persons per toy image")
    toy.add_argument("--classes", type=int, default=3, help="Relation classes (ignored with --taxonomy)")
    toy.add_argument("--separation", type=float, default=2.0, help="Class signal strength (0 = no signal)")
    toy.add_argument(
        "--labels",
        choices=LABEL_MODES,
        default="image",
        help="Label per image (every pair shares it) or per pair (the role of the first person)",
    )
    toy.set_defaults(func=_cmd_gen_toy)

    fixtures = sub.add_parser("build-fixtures", parents=[common], help="Write feature packs for a dataset")
    fixtures.add_argument("--images-dir", help="Image files named <image_id>.<ext> (clip provider)")
    fixtures.add_argument("--device", default="cpu", help="Torch device for the clip provider")
    fixtures.set_defaults(func=_cmd_build_fixtures)

    vocabs = sub.add_parser("select-vocabs", parents=[common], help="Zero-shot visual-vocab selection per image")
    vocabs.add_argument("--image", action="append", help="Restrict to this image id (repeatable)")
    vocabs.set_defaults(func=_cmd_select_vocabs)

    prompts = sub.add_parser("build-prompts", parents=[common], help="Write the social prompts per image")
    prompts.add_argument("--image", action="append", help="Restrict to this image id (repeatable)")
    prompts.set_defaults(func=_cmd_build_prompts)

    train = sub.add_parser("train", parents=[common], help="Train adapter, reasoner and head")
    _model_flags(train)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--logit-scale", type=float, help="Temperature multiplying cosine logits")
    train.add_argument("--resume", help="Checkpoint to continue from (optimizer and schedule included)")
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="Score a dataset and write metrics")
    ev.add_argument("--checkpoint", help="Trained checkpoint (standard mode)")
    ev.add_argument("--mode", choices=("standard", "zeroshot"), help="Trained model or zero-shot class prompts")
    ev.add_argument("--ap-mode", choices=("ranked", "voc11"), help="Average-precision variant")
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("grad-check", parents=[common], help="Finite-difference check of all gradients")
    _model_flags(gc)
    gc.add_argument("--checkpoint", help="Check gradients at these weights instead of a fresh init")
    gc.add_argument("--coords", type=int, default=200, help="Sampled parameter coordinates")
    gc.add_argument("--step", type=float, default=1e-3, help="Finite-difference step")
    gc.add_argument("--tol", type=float, default=1e-4, help="Maximum relative error")
    gc.add_argument("--pairs", type=int, default=8, help="Pairs in the checked batch")
    gc.set_defaults(func=_cmd_grad_check)

    attn = sub.add_parser("export-attn", parents=[common], help="Export pair cross-attention maps")
    attn.add_argument("--checkpoint", help="Trained checkpoint")
    attn.add_argument("--image", action="append", help="Image id (repeatable; default: first image)")
    attn.add_argument("--pair", help="Person pair 'i,j' (default: every annotated pair of the image)")
    attn.set_defaults(func=_cmd_export_attn)

    rep = sub.add_parser("report", parents=[common], help="Summarize metrics.json files as TSV")
    rep.add_argument("metrics", nargs="+", help="metrics.json files (source label = parent directory)")
    rep.set_defaults(func=_cmd_report)
    return parser


# --- configuration ---------------------------------------------------------------------------


def _base_config(args: argparse.Namespace, default: Callable[[], RunConfig] = RunConfig) -> RunConfig:
    return RunConfig.load(args.config) if args.config else default()


def _parse_int_list(raw: str, flag: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated integers, got {raw!r}") from exc


def _fusion_schedule(raw: str, cfg: RunConfig) -> Optional[FusionSchedule]:
    value = raw.strip().lower()
    if value == "default":
        return None
    if value in ("none", ""):
        return FusionSchedule.empty()
    layers = _parse_int_list(value, "--fusion-layers")
    return FusionSchedule.from_layers(layers, cfg.encoder.n_layers, cfg.adapter.n_layers)


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    flags = vars(args)
    paths = {
        name: flags[name]
        for name in ("annotations", "fixtures", "corpora", "checkpoint")
        if flags.get(name) is not None
    }
    if flags.get("images_dir") is not None:
        paths["images"] = flags["images_dir"]
    if paths:
        cfg = cfg.replace(paths=dataclasses.replace(cfg.paths, **paths))
    if flags.get("provider") is not None:
        cfg = cfg.replace(provider=flags["provider"])
    if flags.get("taxonomy") is not None:
        cfg = cfg.replace(taxonomy=flags["taxonomy"])
    if flags.get("seed") is not None:
        cfg = cfg.replace(provider_seed=flags["seed"], train=dataclasses.replace(cfg.train, seed=flags["seed"]))
    if flags.get("corpora_subset") is not None:
        raw = flags["corpora_subset"].strip()
        kinds = () if raw.lower() == "none" else tuple(part.strip() for part in raw.split(",") if part.strip())
        cfg = cfg.replace(prompts=dataclasses.replace(cfg.prompts, kinds=kinds))

    train = {
        key: flags[flag]
        for key, flag in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("logit_scale", "logit_scale"))
        if flags.get(flag) is not None
    }
    if train:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, **train))
    evals = {key: flags[key] for key in ("mode", "ap_mode") if flags.get(key) is not None}
    if evals:
        cfg = cfg.replace(eval=dataclasses.replace(cfg.eval, **evals))

    adapter = {key: flags[flag] for key, flag in (("sharing_mode", "sharing"), ("classifier", "classifier")) if flags.get(flag)}
    if adapter:
        cfg = cfg.replace(adapter=dataclasses.replace(cfg.adapter, **adapter))
    if flags.get("ablate"):
        switches = {}
        for part in flags["ablate"].split(","):
            key = part.strip().lower()
            if key not in ABLATIONS:
                raise ConfigError(f"--ablate: unknown stage {key!r}; expected {', '.join(ABLATIONS)}")
            switches[ABLATIONS[key]] = False
        cfg = cfg.replace(cir=dataclasses.replace(cfg.cir, **switches))
    if flags.get("fusion_layers") is not None:
        cfg = cfg.replace(fusion=_fusion_schedule(flags["fusion_layers"], cfg))
    return cfg


def _require_path(value: Optional[str], what: str, directory: bool = False) -> Path:
    if value is None:
        raise ConfigError(f"no {what} given (set it in the config or pass the flag)")
    path = Path(value)
    ok = path.is_dir() if directory else path.exists()
    if not ok:
        raise ConfigError(f"{what} not found: {path}")
    return path


# --- shared pipeline pieces ------------------------------------------------------------------


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = _require_path(cfg.paths.annotations, "annotations (--annotations)")
    _say(f"Reading annotations from {path} …")
    dataset = load_annotations(path)
    if cfg.taxonomy:
        taxonomy = resolve_taxonomy(cfg.taxonomy)
        if taxonomy.size != dataset.taxonomy.size:
            raise ConfigError(
                f"--taxonomy {taxonomy.name} has {taxonomy.size} classes but the annotations use "
                f"{dataset.taxonomy.name} with {dataset.taxonomy.size}"
            )
        dataset = dataclasses.replace(dataset, taxonomy=taxonomy)
    _say(f"{len(dataset.images)} images, {len(dataset.samples)} pairs, taxonomy {dataset.taxonomy.name}")
    return dataset


def _provider(cfg: RunConfig) -> EncoderProvider:
    if cfg.provider == "synthetic":
        return SyntheticProvider(cfg.encoder, seed=cfg.provider_seed)
    if cfg.provider == "clip":
        raise ConfigError("the clip provider only fills fixtures: run build-fixtures --provider clip, then use fixtures")
    root = _require_path(cfg.paths.fixtures, "fixtures directory (--fixtures)", directory=True)
    return FixtureProvider(cfg.encoder, root=root)


def _corpora_dir(cfg: RunConfig) -> Optional[Path]:
    if cfg.paths.corpora is None:
        return None
    return _require_path(cfg.paths.corpora, "corpora directory (--corpora)", directory=True)


def _selector(cfg: RunConfig, provider: EncoderProvider) -> VocabSelector:
    corpora = load_corpora(_corpora_dir(cfg), cfg.prompts.kinds, cfg.prompts.top_k)
    return VocabSelector(corpora, provider)


def _selected_images(dataset: Dataset, requested: Optional[Sequence[str]]) -> List[str]:
    if not requested:
        return [image.image_id for image in dataset.images]
    known = {image.image_id for image in dataset.images}
    unknown = [image_id for image_id in requested if image_id not in known]
    if unknown:
        raise ConfigError(f"--image: not in the annotations: {', '.join(unknown)}")
    return list(dict.fromkeys(requested))


def _store(cfg: RunConfig, dataset: Dataset, provider: EncoderProvider, dtype: torch.dtype = torch.float32) -> FeatureStore:
    selector = _selector(cfg, provider) if cfg.adapter.classifier == "prompt" else None
    return FeatureStore(dataset, provider, selector, dtype=dtype)


def _new_model(cfg: RunConfig, n_classes: int, dtype: torch.dtype = torch.float32) -> ConsorModel:
    return build_model(
        cfg.encoder,
        cfg.adapter,
        cfg.schedule,
        cfg.cir,
        n_classes,
        logit_scale=cfg.train.logit_scale,
        seed=cfg.train.seed,
        dtype=dtype,
    )


def _checkpoint_model(path: Path, cfg: RunConfig, n_classes: int) -> tuple[ConsorModel, RunConfig]:
    """Rebuild the architecture recorded in the checkpoint; paths and provider stay from ``cfg``."""

    checkpoint = load_checkpoint(path)
    trained = RunConfig.from_mapping(checkpoint.config)
    model_cfg = cfg.replace(
        encoder=trained.encoder,
        adapter=trained.adapter,
        fusion=trained.schedule,
        cir=trained.cir,
        train=trained.train,
        prompts=trained.prompts,
    )
    if checkpoint.config_digest != trained.digest():
        _say(f"Note: {path} records config digest {checkpoint.config_digest[:12]}, recomputed {trained.digest()[:12]}")
    model = _new_model(model_cfg, n_classes)
    restore_model(model, checkpoint)
    _say(f"Loaded checkpoint {path} (epoch {checkpoint.manifest.get('epoch')}, step {checkpoint.manifest.get('step')})")
    return model, model_cfg


def _versions() -> Dict[str, str]:
    return {
        "consor": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__.split("+")[0],
    }


def _plain_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: value for key, value in sorted(vars(args).items()) if key != "func"}


def _write_manifest(out: Path, args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str], seed: int) -> Path:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "arguments": _plain_args(args),
        "config_digest": cfg.digest(),
        "config": cfg.to_mapping(),
        "seed": seed,
        "versions": _versions(),
    }
    path = out / "run_manifest.json"
    with path.open("w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=str)
        handle.write("\n")
    return path


# --- commands --------------------------------------------------------------------------------


def _cmd_gen_toy(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args, RunConfig.miniature), args)
    seed = args.seed if args.seed is not None else 0
    names: tuple = ()
    taxonomy_name = ""
    n_classes = args.classes
    if cfg.taxonomy:
        taxonomy = resolve_taxonomy(cfg.taxonomy)
        names, taxonomy_name, n_classes = taxonomy.classes, taxonomy.name, taxonomy.size
    spec = ToySpec(
        n_images=args.images,
        persons_per_image=args.persons,
        n_classes=n_classes,
        seed=seed,
        encoder_config=cfg.encoder,
        class_separation=args.separation,
        class_names=names,
        taxonomy_name=taxonomy_name,
        label_mode=args.labels,
    )
    _say(f"Generating {spec.n_images} toy images ({spec.n_classes} classes, seed {seed}) …")
    bundle = generate_toy_dataset(spec)
    written = write_toy_bundle(bundle, out)
    toy_cfg = cfg.replace(
        paths=PathsConfig(annotations="annotations.json", fixtures="fixtures", corpora="corpora"),
        taxonomy=None,
        provider="fixture",
        provider_seed=seed,
        train=dataclasses.replace(cfg.train, seed=seed, batch_size=8, logit_scale=20.0),
    )
    toy_cfg.write(out / "toy.json")
    emit(
        "toy.generated",
        images=len(bundle.dataset.images),
        pairs=len(bundle.dataset.samples),
        text_packs=len(bundle.text_packs),
        seed=seed,
    )
    _say(f"Wrote {written['annotations']}, {len(bundle.image_packs)} image and {len(bundle.text_packs)} text packs")
    _say(f"Run config: {out / 'toy.json'}")
    return toy_cfg


def _cmd_build_fixtures(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    if cfg.provider == "fixture":
        cfg = cfg.replace(provider="synthetic")
    dataset = _load_dataset(cfg)
    provider: EncoderProvider
    if cfg.provider == "clip":
        from .clip_backend import OpenClipFeatureExtractor

        images = _require_path(cfg.paths.images, "image directory (--images-dir)", directory=True)
        provider = OpenClipFeatureExtractor(cfg.encoder, images, device=args.device)
    else:
        provider = SyntheticProvider(cfg.encoder, seed=cfg.provider_seed)
    root = out / "fixtures"
    image_ids = [image.image_id for image in dataset.images]
    selector = _selector(cfg, provider)
    texts = selector.candidate_texts() + class_name_prompts(dataset.taxonomy)
    for image_id in image_ids:
        texts.extend(selector.prompt_texts(image_id, dataset.taxonomy))
    n_images, n_texts = export_fixtures(provider, root, image_ids, texts)
    emit("fixtures.written", provider=cfg.provider, images=n_images, texts=n_texts)
    _say(f"Wrote {n_images} image and {n_texts} text packs under {root}")
    return cfg


def _cmd_select_vocabs(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    dataset = _load_dataset(cfg)
    provider = _provider(cfg)
    selector = _selector(cfg, provider)
    image_ids = _selected_images(dataset, args.image)
    provider.require_images(image_ids)
    provider.require_texts(selector.candidate_texts())
    for image_id in image_ids:
        write_vocab_report(selector.select(image_id), out / "vocabs" / f"{image_id}.json")
    emit("vocabs.selected", images=len(image_ids))
    _say(f"Wrote {len(image_ids)} vocab report(s) under {out / 'vocabs'}")
    return cfg


def _cmd_build_prompts(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    dataset = _load_dataset(cfg)
    provider = _provider(cfg)
    selector = _selector(cfg, provider)
    image_ids = _selected_images(dataset, args.image)
    provider.require_images(image_ids)
    provider.require_texts(selector.candidate_texts())
    for image_id in image_ids:
        write_prompt_file(selector.prompts(image_id, dataset.taxonomy), out / "prompts" / f"{image_id}.txt")
    emit("prompts.built", images=len(image_ids), classes=dataset.taxonomy.size)
    _say(f"Wrote {len(image_ids)} prompt file(s) under {out / 'prompts'}")
    return cfg


def _cmd_train(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    dataset = _load_dataset(cfg)
    provider = _provider(cfg)
    store = _store(cfg, dataset, provider)
    store.check_available()
    model = _new_model(cfg, dataset.taxonomy.size)
    trainer = Trainer(model, store, cfg.train, out)
    if args.resume:
        checkpoint = load_checkpoint(_require_path(args.resume, "checkpoint (--resume)"))
        trained = RunConfig.from_mapping(checkpoint.config).model_mapping()
        current = cfg.model_mapping()
        if any(trained[key] != current[key] for key in ("encoder", "adapter", "fusion", "cir")):
            raise ConfigError("--resume checkpoint was trained with a different model architecture")
        restore_trainer(trainer, checkpoint)
        _say(f"Resumed from {args.resume} at epoch {trainer.epoch}")
    remaining = cfg.train.epochs - trainer.epoch
    if remaining > 0:
        history = trainer.fit(epochs=remaining, progress=args.progress)
        losses_path = out / "losses.tsv"
        with losses_path.open("w", encoding="utf-8") as handle:
            handle.write("step\tepoch\tloss\tlr\tn_pairs\n")
            for metrics in history.steps:
                handle.write(f"{metrics.step}\t{metrics.epoch}\t{metrics.loss!r}\t{metrics.lr!r}\t{metrics.n_pairs}\n")
        _say(f"Epoch mean losses: {', '.join(f'{loss:.4f}' for loss in history.epoch_means())}")
    accuracy = train_accuracy(model, store, dataset.samples, cfg.eval.batch_size)
    emit("train.done", epochs=trainer.epoch, steps=trainer.step, train_acc1=accuracy)
    checkpoint_path = save_checkpoint(out / "checkpoint.fpk", trainer, cfg.to_mapping(), cfg.digest())
    _say(f"Train top-1 {accuracy:.4f}; checkpoint written to {checkpoint_path}")
    return cfg


def _cmd_eval(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    dataset = _load_dataset(cfg)
    provider = _provider(cfg)
    model = None
    store = None
    if cfg.eval.mode == "standard":
        path = _require_path(cfg.paths.checkpoint, "checkpoint (--checkpoint)")
        model, model_cfg = _checkpoint_model(path, cfg, dataset.taxonomy.size)
        store = _store(model_cfg, dataset, provider)
        store.check_available()
    report, table = evaluate(dataset, provider, cfg.eval, model=model, store=store, progress=args.progress)
    write_metrics_report(report, out / "metrics.json")
    write_score_csv(table, out / "scores.csv")
    _say(f"mode={report.mode} acc@1={report.acc1:.4f} mAP={report.map:.4f} over {report.n_samples} pairs")
    _say(f"Wrote {out / 'metrics.json'} and {out / 'scores.csv'}")
    return cfg


def _cmd_grad_check(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    dataset = _load_dataset(cfg)
    provider = _provider(cfg)
    if args.pairs < 1:
        raise ConfigError("--pairs must be >= 1")
    samples = list(dataset.samples[: args.pairs])
    if cfg.paths.checkpoint:
        model, cfg = _checkpoint_model(_require_path(cfg.paths.checkpoint, "checkpoint (--checkpoint)"), cfg, dataset.taxonomy.size)
        model = model.double()
    else:
        model = _new_model(cfg, dataset.taxonomy.size, dtype=torch.float64)
    store = _store(cfg, dataset, provider, dtype=torch.float64)
    store.check_available(samples)
    report = grad_check(model, store.batch(samples), n_coords=args.coords, step=args.step, tol=args.tol, seed=cfg.train.seed)
    path = out / "gradcheck.json"
    with path.open("w", encoding="utf-8") as handle:
        json.dump({**report.to_mapping(), "parameters": report.parameters_covered()}, handle, indent=2)
        handle.write("\n")
    _say(f"{report.n_coords} coordinates, max relative error {report.max_rel_error:.3e} (tol {args.tol:g})")
    if not report.passed:
        raise GradCheckError(f"{len(report.failures)} coordinate(s) exceed tol {args.tol:g}; see {path}")
    return cfg


def _parse_pair(raw: str) -> tuple[int, int]:
    values = _parse_int_list(raw, "--pair")
    if len(values) != 2:
        raise ConfigError(f"--pair expects 'i,j', got {raw!r}")
    return values[0], values[1]


def _cmd_export_attn(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    dataset = _load_dataset(cfg)
    provider = _provider(cfg)
    path = _require_path(cfg.paths.checkpoint, "checkpoint (--checkpoint)")
    model, model_cfg = _checkpoint_model(path, cfg, dataset.taxonomy.size)
    if model_cfg.cir.context_layers == 0:
        raise ConfigError("this checkpoint has no contextual decoder, so there is no cross-attention to export")
    store = _store(model_cfg, dataset, provider)
    image_ids = _selected_images(dataset, args.image or [dataset.images[0].image_id])
    wanted = _parse_pair(args.pair) if args.pair else None
    by_image = dataset.samples_by_image()
    model.eval()
    written = 0
    for image_id in image_ids:
        samples = [s for s in by_image.get(image_id, ()) if wanted is None or (s.i, s.j) == wanted]
        if not samples:
            what = f"pair {args.pair}" if args.pair else "pairs"
            raise ConfigError(f"no annotated {what} in image {image_id}")
        store.check_available(samples)
        with torch.no_grad():
            output = model(store.batch(samples), retain_attention=True)
        cir_output = CirOutput(output.pair_features, output.cross_attention)
        for row, sample in enumerate(samples):
            maps = export_attention_maps(cir_output, row, image_id, (sample.i, sample.j), model_cfg.encoder.patch_grid)
            write_attention_maps(maps, out / "attention" / f"{image_id}_{sample.i}-{sample.j}.json")
            written += 1
    emit("attention.exported", maps=written)
    _say(f"Wrote {written} attention map file(s) under {out / 'attention'}")
    return cfg


def _cmd_report(args: argparse.Namespace, out: Path) -> RunConfig:
    cfg = _apply_overrides(_base_config(args), args)
    paths = [_require_path(path, "metrics report") for path in args.metrics]
    reports = load_reports(paths)
    summary_path, classes_path = write_reports(reports, out)
    _say("Summary:")
    write_table(summary_rows(reports), REPORT_COLUMNS, sys.stdout)
    _say(f"Wrote {summary_path} and {classes_path}")
    return cfg


# --- entry point ------------------------------------------------------------------------------


def _run(args: argparse.Namespace, argv: Sequence[str]) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = attach_event_file(out / "events.jsonl")
    try:
        emit("command.start", command=args.command)
        cfg = args.func(args, out)
        seed = args.seed if args.seed is not None else cfg.train.seed
        _write_manifest(out, args, cfg, argv, seed)
        emit("command.done", command=args.command)
    finally:
        detach_handler(handler)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    configure_console(args.verbose)
    try:
        _run(args, argv)
    except ConfigError as exc:
        print(f"consor: error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except ConsorError as exc:
        print(f"consor: error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
