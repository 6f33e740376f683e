"""
refaudio command line
forge | train | generate | adapt | eval | train-classifier | selftest
"""

import functools
import sys
from pathlib import Path
from typing import Callable, Optional

import click
import msgspec
import torch

from . import __version__
from ._logging import configure_logging, get_logger
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codecs import CodecParams, mel_forward, train_toy_vae
from .config import RunConfig, load_config, render_config, seed_for, write_echo
from .dataset_forge import ReferencePair, build_dataset, read_manifest, write_manifest
from .errors import RefAudioError, RefAudioOSError, RefAudioValueError, refaudio_public_api
from .eval_suite import evaluate_manifest, load_classifier, save_classifier, train_event_classifier
from .event_bank import EventBank, export_catalog, ingest_wav, write_wav
from .mrc.pipeline import generate, generate_manifest
from .mrc.training import TrainConfig, TrainState, adapt_reference_count, prepare_examples, train_loop
from .mrc.unet import MRCUNet
from .schemas import ManifestRecord, ReferenceRecord
from .selftest import run_selftest
from .text_encoder import TextEncoder

logger = get_logger(__name__)


def _command(func: Callable) -> Callable:
    """Map refaudio errors to their exit codes at the command boundary."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            with refaudio_public_api():
                return func(*args, **kwargs)
        except RefAudioError as exc:
            logger.error("Command failed", category=type(exc).__name__, error=str(exc))
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def common_options(func: Callable) -> Callable:
    func = click.option("--verbose", "-v", is_flag=True, help="Debug logging.")(func)
    func = click.option("--out", type=click.Path(file_okay=False), default=None,
                        help="Output directory (default: <output_dir>/<command>).")(func)
    func = click.option("--seed", type=int, default=None, help="Override the global seed.")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="Run configuration (INI).")(func)
    return func


def _load(config_path: Optional[str], seed: Optional[int]) -> RunConfig:
    config = load_config(config_path)
    if seed is not None:
        config = msgspec.structs.replace(config, seed=seed)
    return config


def _override(config: RunConfig, section: str, **values) -> RunConfig:
    """Fold CLI flags into one config section; unset flags are skipped."""
    values = {key: value for key, value in values.items() if value is not None}
    if not values:
        return config
    updated = msgspec.structs.replace(getattr(config, section), **values)
    return msgspec.structs.replace(config, **{section: updated})


def _start(command: str, config: RunConfig, out_dir: Path, verbose: bool) -> None:
    """Open the run directory: log file and the echo of the final config."""
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_logging(verbose, str(out_dir / "refaudio.log"))
    write_echo(config, out_dir)
    logger.update_context(command=command)
    logger.info("Starting", out_dir=str(out_dir), seed=config.seed, preset=config.preset)


def _out_dir(config: RunConfig, command: str, out: Optional[str]) -> Path:
    return Path(out) if out else Path(config.paths.output_dir) / command


def _bank(config: RunConfig) -> EventBank:
    return EventBank.from_directory(config.paths.bank_dir, config.bank.n_events, config.bank.seed)


def _manifest_path(config: RunConfig, mode: str, split: str) -> Path:
    path = Path(config.paths.manifest_dir) / mode / f"{split}.jsonl"
    if not path.is_file():
        raise RefAudioOSError(f"Manifest not found: {path} (run `refaudio forge` first)", path=path)
    return path


def _train_sources(config: RunConfig) -> dict[str, tuple[Path, list]]:
    sources = {}
    for mode in list(config.train.mix) or [config.forge.mode]:
        path = _manifest_path(config, mode, "train")
        sources[mode] = (path.parent, read_manifest(path))
    return sources


def _build_codec(config: RunConfig, sources: dict[str, tuple[Path, list]]) -> CodecParams:
    if config.codec.mode == "deterministic":
        return CodecParams()
    base = CodecParams()
    mels = []
    for root, records in sources.values():
        for record in records:
            mels.append(mel_forward(ingest_wav(root / record.target_path), base))
    return train_toy_vae(mels, config.codec.vae_epochs, config.codec.vae_kl_weight,
                         seed=seed_for("train", config.seed))


def _checkpoint_hook(path: Path, checkpoint: Checkpoint, train_config: TrainConfig) -> Callable[[TrainState], None]:
    def hook(state: TrainState) -> None:
        checkpoint.state = state
        save_checkpoint(path, checkpoint, train_config)

    return hook


@click.group()
@click.version_option(__version__, prog_name="refaudio")
def main() -> None:
    """Customized text-to-audio generation with multi-reference conditioning."""


@main.command()
@common_options
@click.option("--mode", type=click.Choice(["concatenation", "overlay", "general"]), default=None)
@_command
def forge(config_path, seed, out, verbose, mode) -> None:
    """Forge a customized dataset from the event bank."""
    config = _override(_load(config_path, seed), "forge", mode=mode)
    target = Path(out) if out else Path(config.paths.manifest_dir) / config.forge.mode
    _start("forge", config, target, verbose)
    forge_config = msgspec.structs.replace(config.forge, rng_seed=seed_for("forge", config.seed))
    bank = _bank(config)
    export_catalog(bank.specs.values(), target / "catalog.jsonl")
    train, test = build_dataset(bank, forge_config, target)
    click.echo(f"forged {len(train)} train / {len(test)} test examples into {target}")


@main.command()
@common_options
@click.option("--resume", is_flag=True, help="Continue from the existing checkpoint.")
@_command
def train(config_path, seed, out, verbose, resume) -> None:
    """Train the generator on forged manifests."""
    config = _load(config_path, seed)
    out_dir = _out_dir(config, "train", out)
    _start("train", config, out_dir, verbose)
    train_config = msgspec.structs.replace(config.train, seed=seed_for("train", config.seed))
    ckpt_path = config.paths.checkpoint
    sources = _train_sources(config)

    if resume:
        checkpoint = load_checkpoint(ckpt_path, train_config)
        if checkpoint.state is None:
            raise RefAudioValueError(f"{ckpt_path} holds no training state to resume")
    else:
        codec = _build_codec(config, sources)
        torch.manual_seed(train_config.seed)
        text_encoder = TextEncoder(config.model.d_text)
        model_config = msgspec.structs.replace(config.model, latent_channels=codec.latent_channels,
                                               k_max=config.forge.k_max)
        checkpoint = Checkpoint(MRCUNet(model_config), text_encoder, codec, render_config(config))

    examples = {
        mode: prepare_examples(records, root, checkpoint.codec, checkpoint.model.config.k_max)
        for mode, (root, records) in sources.items()
    }
    state = train_loop(
        examples, train_config, checkpoint.text_encoder, checkpoint.codec,
        model=checkpoint.model, state=checkpoint.state, log_path=out_dir / "train_log.jsonl",
        on_checkpoint=_checkpoint_hook(ckpt_path, checkpoint, train_config),
    )
    checkpoint.state = state
    save_checkpoint(ckpt_path, checkpoint, train_config)
    smoothed = "n/a" if state.smoothed_loss is None else f"{state.smoothed_loss:.4f}"
    click.echo(f"trained {state.step} steps, smoothed loss {smoothed}; checkpoint {ckpt_path}")


def _parse_ref(value: str) -> tuple[str, str]:
    path, sep, caption = value.partition("::")
    if not sep or not caption.strip():
        raise RefAudioValueError(f"--ref expects PATH::CAPTION, got {value!r}")
    return path, caption.strip()


@main.command(name="generate")
@common_options
@click.option("--prompt", default=None, help="Text prompt; without it the configured split is generated.")
@click.option("--ref", "refs", multiple=True, help="Reference as PATH::CAPTION (repeatable).")
@click.option("--steps", type=int, default=None)
@click.option("--cfg", "cfg_weight", type=float, default=None)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None)
@_command
def generate_cmd(config_path, seed, out, verbose, prompt, refs, steps, cfg_weight, checkpoint_path) -> None:
    """Generate audio from a prompt and optional references."""
    config = _override(_load(config_path, seed), "sample",
                       steps=steps, cfg_weight=cfg_weight, checkpoint=checkpoint_path)
    out_dir = _out_dir(config, "generate", out)
    _start("generate", config, out_dir, verbose)
    checkpoint = load_checkpoint(config.sample.checkpoint or config.paths.checkpoint)
    steps, w = config.sample.steps, config.sample.cfg_weight
    sample_seed = seed_for("sample", config.seed)
    iterations = config.codec.griffin_lim_iterations

    if prompt is not None:
        references, ref_records = [], []
        for value in refs:
            path, caption = _parse_ref(value)
            audio = ingest_wav(path, checkpoint.codec.sample_rate)
            references.append(ReferencePair(audio.fitted(min(audio.num_samples, checkpoint.codec.clip_samples)),
                                            caption))
            ref_records.append(ReferenceRecord(path=Path(path).resolve().as_posix(), caption=caption))
        clip = generate(checkpoint.model, checkpoint.text_encoder, checkpoint.codec, prompt, references,
                        steps=steps, w=w, seed=sample_seed, griffin_lim_iterations=iterations)
        write_wav(clip, out_dir / "generated.wav")
        write_manifest(out_dir / "generated.jsonl", [
            ManifestRecord(id="prompt", target_path="generated.wav", target_caption=prompt,
                           references=ref_records, regions=[]),
        ])
        click.echo(f"wrote {out_dir / 'generated.wav'}")
        return

    manifest = _manifest_path(config, config.forge.mode, config.sample.split)
    records = generate_manifest(checkpoint.model, checkpoint.text_encoder, checkpoint.codec,
                                read_manifest(manifest), manifest.parent, out_dir,
                                steps=steps, w=w, seed=sample_seed, griffin_lim_iterations=iterations)
    click.echo(f"generated {len(records)} clips into {out_dir}")


@main.command()
@common_options
@click.option("--manifest", type=click.Path(dir_okay=False), required=True,
              help="Training manifest forged with the new reference count.")
@click.option("--k-new", type=int, default=None)
@_command
def adapt(config_path, seed, out, verbose, manifest, k_new) -> None:
    """Fine-tune only the alignment convolutions for a new reference count."""
    config = _override(_load(config_path, seed), "adapt", k_new=k_new)
    out_dir = _out_dir(config, "adapt", out)
    _start("adapt", config, out_dir, verbose)
    k_new = config.adapt.k_new
    checkpoint = load_checkpoint(config.paths.checkpoint)
    manifest_path = Path(manifest)
    examples = prepare_examples(read_manifest(manifest_path), manifest_path.parent, checkpoint.codec, k_new)
    adapt_config = msgspec.structs.replace(
        config.train, steps=config.adapt.steps, lr=config.adapt.lr,
        warmup_steps=config.adapt.warmup_steps, seed=seed_for("train", config.seed),
    )
    target = Path(config.paths.checkpoint_dir) / f"mrc-k{k_new}.ckpt"
    adapted = Checkpoint(checkpoint.model, checkpoint.text_encoder, checkpoint.codec, render_config(config))
    state = adapt_reference_count(
        checkpoint.model, k_new, examples, adapt_config, checkpoint.text_encoder, checkpoint.codec,
        log_path=out_dir / "adapt_log.jsonl", on_checkpoint=_checkpoint_hook(target, adapted, adapt_config),
    )
    adapted.state = state
    save_checkpoint(target, adapted, adapt_config)
    click.echo(f"adapted to {k_new} references; checkpoint {target}")


@main.command(name="train-classifier")
@common_options
@_command
def train_classifier(config_path, seed, out, verbose) -> None:
    """Train the event classifier used as the evaluation feature extractor."""
    config = _load(config_path, seed)
    _start("train-classifier", config, _out_dir(config, "train-classifier", out), verbose)
    classifier = train_event_classifier(_bank(config), per_event=config.eval.per_event,
                                        epochs=config.eval.epochs, seed=seed_for("eval", config.seed))
    save_classifier(classifier, config.paths.classifier)
    click.echo(f"classifier accuracy {classifier.accuracy:.3f}; saved {config.paths.classifier}")


@main.command(name="eval")
@common_options
@click.option("--generated", type=click.Path(dir_okay=False), required=True, help="generated.jsonl")
@click.option("--targets", type=click.Path(dir_okay=False), default=None,
              help="Target manifest (default: the configured split).")
@click.option("--clap-scale", type=float, default=None, help="Display scale for CLAP scores (e.g. 100).")
@_command
def eval_cmd(config_path, seed, out, verbose, generated, targets, clap_scale) -> None:
    """Score generated audio against targets."""
    config = _override(_load(config_path, seed), "eval", clap_scale=clap_scale)
    out_dir = _out_dir(config, "eval", out)
    _start("eval", config, out_dir, verbose)
    classifier = load_classifier(config.paths.classifier)
    target_path = Path(targets) if targets else _manifest_path(config, config.forge.mode, config.sample.split)
    generated_path = Path(generated)
    report = evaluate_manifest(read_manifest(generated_path), generated_path.parent,
                               read_manifest(target_path), target_path.parent, classifier,
                               config_echo=render_config(config))
    report.write(out_dir, config.eval.clap_scale)
    click.echo(report.summary_table(config.eval.clap_scale), nl=False)


@main.command()
@click.option("--verbose", "-v", is_flag=True)
@_command
def selftest(verbose) -> None:
    """Run the built-in property checks (no data needed)."""
    configure_logging(verbose)
    results = run_selftest()
    for result in results:
        mark = "PASS" if result.passed else "FAIL"
        click.echo(f"{mark}  {result.name:<32} {result.seconds:6.2f}s  {result.detail}")
    if not all(r.passed for r in results):
        sys.exit(1)


if __name__ == "__main__":
    main()
