"""CLI entry point for textkd-slu."""

import functools
import math
import sys
from pathlib import Path
from typing import Callable, Optional

import click

from kdslu.ablation import (
    METHOD_STACK,
    AblationReport,
    AblationRun,
    AblationRunner,
    ordering_holds,
    read_report,
    render_report,
    select_methods,
    stack_gain,
    write_report,
)
from kdslu.bundle import SLUModel
from kdslu.checkpoint import (
    load_acoustic_model,
    load_slu,
    load_speech_encoder,
    load_teacher,
    save_acoustic_model,
    save_slu,
    save_speech_encoder,
    save_teacher,
)
from kdslu.config import PRESETS, Config, load_config
from kdslu.console import (
    console,
    create_metrics_table,
    format_percentage,
    print_error,
    print_heading,
    print_info,
    print_key_value,
    print_success,
    print_warning,
)
from kdslu.data.splits import make_low_resource_splits
from kdslu.exceptions import ConfigError, ConfigValidationError, MissingArtifactError
from kdslu.experiment import (
    PreparedData,
    build_acoustic_model,
    build_speech_encoder,
    finetune_slu,
    fit_corpus_codebook,
    generate_corpus,
    load_corpus,
    prepare_data,
    pretrain_am,
    pretrain_encoder,
    train_teacher,
)
from kdslu.runs import ArtifactStore, start_run
from kdslu.tokenizer_vq import Codebook, load_codebook, save_codebook
from kdslu.training import evaluate
from kdslu.version import __version__

EXIT_MISSING_ARTIFACT = 2
EXIT_BAD_CONFIG = 3
EXIT_FAILURE = 4

# Subcommands accept dotted config overrides (--training.ft.schedule.gamma 1.05)
# alongside their own flags.
OVERRIDE_SETTINGS = {"ignore_unknown_options": True, "allow_extra_args": True}

OVERRIDE_EPILOG = "Any configuration key can be overridden with --<dotted.key> <value>."


# --- Context object for sharing state between commands ---


class KdSluContext:
    """Context object for CLI commands."""

    def __init__(self):
        self.config_path: Optional[Path] = None
        self.preset: str = "toy"
        self.seed: int = 0
        self.out: Optional[Path] = None
        self.verbose: bool = False

    def resolve_config(self, extra: Optional[list[tuple[str, str]]] = None) -> Config:
        """
        Load the configuration with the current command's dotted overrides.

        Raises:
            ConfigValidationError: On a malformed or unknown flag.
        """
        overrides = parse_overrides(click.get_current_context().args)
        if self.out is not None:
            overrides.append(("paths.out_root", str(self.out)))
        overrides.extend(extra or [])
        return load_config(self.config_path, preset=self.preset, overrides=overrides)


pass_context = click.make_pass_decorator(KdSluContext, ensure=True)


def parse_overrides(args: list[str]) -> list[tuple[str, str]]:
    """
    Turn leftover arguments into (dotted.key, value) pairs.

    Accepts both `--a.b value` and `--a.b=value`.

    Raises:
        ConfigValidationError: On anything that is not a dotted override.
    """
    overrides = []
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigValidationError(arg, "Unknown option or argument")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigValidationError(key, "Missing value")
            i += 1
            value = args[i]
        overrides.append((key, value))
        i += 1
    return overrides


def exit_codes(func: Callable) -> Callable:
    """Map errors to process exit codes; anything unexpected exits EXIT_FAILURE."""

    @functools.wraps(func)
    def wrapper(ctx: KdSluContext, *args, **kwargs):
        try:
            return func(ctx, *args, **kwargs)
        except MissingArtifactError as e:
            print_error(str(e))
            sys.exit(EXIT_MISSING_ARTIFACT)
        except ConfigError as e:
            print_error(f"Configuration error: {e}")
            sys.exit(EXIT_BAD_CONFIG)
        except click.ClickException:
            raise
        except Exception as e:
            print_error(str(e) or type(e).__name__)
            if ctx.verbose:
                import traceback
                traceback.print_exc()
            sys.exit(EXIT_FAILURE)

    return wrapper


def _load_inputs(store: ArtifactStore) -> tuple[Codebook, PreparedData]:
    """Codebook and tokenized corpus; the codebook is checked first."""
    codebook_path = store.require("codebook")
    manifest_path = store.require("manifest")
    codebook = load_codebook(codebook_path)
    return codebook, prepare_data(load_corpus(manifest_path), codebook)


def _load_base_encoder(store: ArtifactStore):
    """PT-KD encoder when present, otherwise the MLM base encoder."""
    name = "speech_ptkd" if store.exists("speech_ptkd") else "speech_base"
    encoder, _ = load_speech_encoder(store.require(name))
    return name, encoder


# --- Main CLI group ---


@click.group()
@click.option(
    "--config", "-c", "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Experiment YAML file"
)
@click.option(
    "--preset",
    type=click.Choice(list(PRESETS)),
    default="toy",
    help="Named preset applied beneath the config file"
)
@click.option("--seed", type=int, default=0, help="Run seed")
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Output root (defaults to $KDSLU_OUT or ./runs)"
)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
@click.version_option(version=__version__, prog_name="kdslu")
@pass_context
def main(
    ctx: KdSluContext,
    config_path: Optional[Path],
    preset: str,
    seed: int,
    out: Optional[Path],
    verbose: bool,
):
    """textkd-slu - Textual knowledge distillation for spoken language understanding.

    Stages share artifacts under <out>/artifacts/ and write one run
    directory per (stage, config, seed) under <out>/runs/.
    """
    ctx.config_path = config_path
    ctx.preset = preset
    ctx.seed = seed
    ctx.out = out
    ctx.verbose = verbose


# --- Data commands ---


@main.command(context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@pass_context
@exit_codes
def synth(ctx: KdSluContext):
    """Generate the synthetic corpus and its manifest."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)

    print_heading("Synthetic Corpus")
    with start_run(config, "synth", ctx.seed, echo=ctx.verbose) as run:
        path = store.path("manifest")
        corpus = generate_corpus(config, path)
        metrics = {f"{split}_utterances": len(corpus.split(split)) for split in ("train", "valid", "test")}
        metrics["fingerprint"] = corpus.fingerprint()
        run.finish("complete", metrics, {"manifest": path})

    for key, value in metrics.items():
        print_key_value(key, str(value))
    print_success(f"Manifest written to {path}")


@main.command("fit-codebook", context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@click.option(
    "--manifest",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Corpus manifest (defaults to the synth artifact)"
)
@click.option("--k", type=int, default=None, help="Number of codes (defaults to codebook.k)")
@click.option(
    "--seed", "codebook_seed", type=int, default=None, help="k-means seed (defaults to codebook.seed)"
)
@click.option(
    "--out", "out_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Codebook file (defaults to the codebook artifact)"
)
@pass_context
@exit_codes
def fit_codebook_cmd(
    ctx: KdSluContext,
    manifest: Optional[Path],
    k: Optional[int],
    codebook_seed: Optional[int],
    out_path: Optional[Path],
):
    """Fit the k-means audio-token codebook on training frames."""
    extra = []
    if k is not None:
        extra.append(("codebook.k", str(k)))
    if codebook_seed is not None:
        extra.append(("codebook.seed", str(codebook_seed)))
    config = ctx.resolve_config(extra)
    store = ArtifactStore(config.paths.out_root)
    if manifest is None:
        manifest = store.require("manifest")
    elif not manifest.exists():
        raise MissingArtifactError("manifest", str(manifest))
    out_path = out_path or store.path("codebook")

    print_heading("Codebook")
    with start_run(config, "codebook", ctx.seed, echo=ctx.verbose) as run:
        codebook = fit_corpus_codebook(
            load_corpus(manifest), config.codebook.k, config.codebook.max_iters, config.codebook.seed
        )
        save_codebook(codebook, out_path)
        run.finish("complete", {"k": codebook.k, "dim": codebook.dim}, {"codebook": out_path})

    print_success(f"Codebook ({codebook.k} x {codebook.dim}) written to {out_path}")


# --- Training commands ---


@main.command("train-teacher", context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@pass_context
@exit_codes
def train_teacher_cmd(ctx: KdSluContext):
    """Fine-tune the character-level text teacher on transcripts."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)
    _, data = _load_inputs(store)

    print_heading("Text Teacher")
    with start_run(config, "teacher", ctx.seed, echo=ctx.verbose) as run:
        teacher, report, accuracy = train_teacher(config, data, ctx.seed)
        for epoch, value in enumerate(report.valid_accuracies):
            run.logger.log_metric("teacher/valid_accuracy", epoch, value)
        path = save_teacher(store.path("teacher"), teacher, extra={"accuracy": accuracy})
        run.finish("complete", {"teacher_accuracy": accuracy}, {"teacher": path})

    print_key_value("Teacher accuracy", format_percentage(accuracy))
    if accuracy < config.training.teacher_min_accuracy:
        print_warning(
            f"Below the {format_percentage(config.training.teacher_min_accuracy)} "
            "needed for distillation"
        )
    print_success(f"Teacher written to {path}")


@main.command("pretrain-mlm", context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@pass_context
@exit_codes
def pretrain_mlm_cmd(ctx: KdSluContext):
    """Pre-train the base speech encoder with masked prediction only."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)
    codebook, data = _load_inputs(store)

    print_heading("MLM Pre-training")
    with start_run(config, "mlm", ctx.seed, echo=ctx.verbose) as run:
        encoder, result = pretrain_encoder(config, data, codebook, ctx.seed, logger=run.logger)
        path = save_speech_encoder(store.path("speech_base"), encoder, extra={"steps": result.steps})
        metrics = {"steps": result.steps, "stopped_early": result.stopped_early}
        run.finish("complete", metrics, {"speech_base": path})

    print_success(f"Base encoder written to {path} after {result.steps} steps")


@main.command("pretrain-kd", context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@pass_context
@exit_codes
def pretrain_kd_cmd(ctx: KdSluContext):
    """Pre-train the speech encoder with MLM plus CLS distillation."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)
    codebook, data = _load_inputs(store)
    teacher, _ = load_teacher(store.require("teacher"))
    init = None
    if store.exists("speech_base"):
        init, _ = load_speech_encoder(store.path("speech_base"))
    else:
        print_warning("No base encoder found; distilling into a freshly initialized encoder")

    print_heading("PT-KD")
    with start_run(config, "pt_kd", ctx.seed, echo=ctx.verbose) as run:
        encoder, result = pretrain_encoder(
            config, data, codebook, ctx.seed, teacher=teacher, init=init, logger=run.logger
        )
        metrics = {
            "steps": result.steps,
            "initial_cls_distance": result.initial_distance,
            "final_cls_distance": result.final_distance,
        }
        path = save_speech_encoder(store.path("speech_ptkd"), encoder, extra=metrics)
        run.finish("complete", metrics, {"speech_ptkd": path})

    if result.initial_distance is not None and result.final_distance is not None:
        print_key_value("CLS distance", f"{result.initial_distance:.4f} -> {result.final_distance:.4f}")
    print_success(f"Distilled encoder written to {path}")


@main.command("pretrain-am", context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@pass_context
@exit_codes
def pretrain_am_cmd(ctx: KdSluContext):
    """Pre-train the acoustic model with CTC on character transcripts."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)
    codebook, data = _load_inputs(store)
    encoder_name, encoder = _load_base_encoder(store)

    print_heading("AM Pre-training")
    print_info(f"Encoder: {encoder_name}")
    with start_run(config, "am_pt", ctx.seed, echo=ctx.verbose) as run:
        am, result = pretrain_am(config, data, codebook, encoder, ctx.seed, logger=run.logger)
        metrics = {
            "best_valid_ctc": result.best_valid_ctc,
            "best_step": result.best_step,
            "skipped": result.skipped,
        }
        # The CTC head is not carried into fine-tuning.
        path = save_acoustic_model(
            store.path("am_pt"), am, heads=["ctc"], extra={"encoder": encoder_name, **metrics}
        )
        run.finish("complete", metrics, {"am_pt": path})

    if result.skipped:
        print_warning(f"Skipped {result.skipped} examples with infeasible alignments")
    print_success(f"Pre-trained acoustic model written to {path}")


@main.command(context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@click.option("--kd/--no-kd", default=True, help="Distil teacher logits (needs the teacher artifact)")
@click.option(
    "--am-pt/--no-am-pt", "use_am_pt", default=True, help="Start from the pre-trained AM when present"
)
@click.option("--augment/--no-augment", default=None, help="Override training.ft.augment")
@click.option(
    "--part",
    type=int,
    default=None,
    help="Train on one low-resource part (0-based) of ablation.parts instead of the full split"
)
@pass_context
@exit_codes
def finetune(ctx: KdSluContext, kd: bool, use_am_pt: bool, augment: Optional[bool], part: Optional[int]):
    """Fine-tune the SLU system on intent labels."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)
    codebook, data = _load_inputs(store)
    encoder_name, encoder = _load_base_encoder(store)

    use_kd = kd and config.training.ft.loss_weights.get("kd", 1.0) > 0
    teacher, teacher_acc = None, None
    if use_kd:
        teacher, extra = load_teacher(store.require("teacher"))
        teacher_acc = extra.get("accuracy")

    am_init = None
    if use_am_pt and store.exists("am_pt"):
        am_init, _ = load_acoustic_model(store.path("am_pt"), seed=ctx.seed)

    train = None
    if part is not None:
        parts = make_low_resource_splits(data.train, config.ablation.parts, ctx.seed)
        if not 0 <= part < len(parts):
            raise ConfigValidationError("part", f"Must be in [0, {len(parts)})")
        train = parts[part]

    print_heading("Fine-tuning")
    print_key_value("Encoder", encoder_name)
    print_key_value("AM init", "am_pt" if am_init is not None else "random")
    print_key_value("KD", "on" if use_kd else "off")
    with start_run(config, "ft", ctx.seed, echo=ctx.verbose) as run:
        bundle, result = finetune_slu(
            config,
            data,
            codebook,
            encoder,
            ctx.seed,
            teacher=teacher,
            teacher_acc=teacher_acc,
            am_init=am_init,
            use_kd=use_kd,
            augment=augment,
            train=train,
            logger=run.logger,
        )
        metrics = {
            "valid_accuracy": result.best_valid_accuracy,
            "test_accuracy": result.test_accuracy,
            "best_epoch": result.best_epoch,
        }
        path = save_slu(store.path("slu"), bundle.speech, bundle.am, extra=metrics)
        run.finish("complete", metrics, {"slu": path})

    table = create_metrics_table("Fine-tuning")
    for key in ("valid_accuracy", "test_accuracy"):
        if metrics[key] is not None:
            table.add_row(key, format_percentage(metrics[key]))
    console.print(table)
    print_success(f"SLU model written to {path}")


@main.command("evaluate", context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@click.option(
    "--split",
    type=click.Choice(["train", "valid", "test"]),
    default="test",
    help="Split to evaluate"
)
@click.option("--untrained", is_flag=True, help="Evaluate a randomly initialized system")
@pass_context
@exit_codes
def evaluate_cmd(ctx: KdSluContext, split: str, untrained: bool):
    """Intent accuracy from speech tokens alone."""
    config = ctx.resolve_config()
    store = ArtifactStore(config.paths.out_root)
    codebook, data = _load_inputs(store)
    if untrained:
        slu = SLUModel(
            build_speech_encoder(config, codebook, ctx.seed),
            build_acoustic_model(config, data, ctx.seed),
        )
    else:
        encoder, am, _ = load_slu(store.require("slu"))
        slu = SLUModel(encoder, am)

    with start_run(config, f"evaluate-{split}", ctx.seed, echo=ctx.verbose) as run:
        accuracy = evaluate(slu, getattr(data, split))
        run.logger.log_metric(f"{split}/accuracy", 0, accuracy)
        run.finish("complete", {"accuracy": accuracy, "untrained": untrained})

    print_key_value(f"{split} accuracy", format_percentage(accuracy))


# --- Ablation commands ---


def _echo_run(run: AblationRun) -> None:
    label = f"{run.method} seed={run.seed} part={run.part}"
    if run.status == "complete":
        print_info(f"{label}: test {format_percentage(run.test_accuracy or 0.0)}")
    else:
        print_warning(f"{label}: failed ({run.error})")


@main.command(context_settings=OVERRIDE_SETTINGS, epilog=OVERRIDE_EPILOG)
@click.option(
    "--seeds", "-s", "seeds", type=int, multiple=True, help="Seeds (repeatable; defaults to ablation.seeds)"
)
@click.option("--parts", type=int, default=None, help="Number of low-resource parts")
@click.option("--max-parts", type=int, default=None, help="How many parts to train on per seed")
@click.option(
    "--method", "-m", "methods",
    type=click.Choice([spec.name for spec in METHOD_STACK]),
    multiple=True,
    help="Restrict to these rows of the stack (repeatable)"
)
@click.option("--full-data", is_flag=True, help="Train every method on the full split instead of low-resource parts")
@pass_context
@exit_codes
def ablate(
    ctx: KdSluContext,
    seeds: tuple[int, ...],
    parts: Optional[int],
    max_parts: Optional[int],
    methods: tuple[str, ...],
    full_data: bool,
):
    """Run the cumulative method stack and report accuracy per row."""
    extra = []
    if seeds:
        extra.append(("ablation.seeds", f"[{', '.join(str(s) for s in seeds)}]"))
    if parts is not None:
        extra.append(("ablation.parts", str(parts)))
    if max_parts is not None:
        extra.append(("ablation.max_parts", str(max_parts)))
    if full_data:
        extra.append(("ablation.low_resource", "false"))
    config = ctx.resolve_config(extra)
    store = ArtifactStore(config.paths.out_root)
    codebook, data = _load_inputs(store)
    plan = select_methods(list(methods))

    print_heading("Ablation")
    print_key_value("Methods", ", ".join(spec.name for spec in plan))
    print_key_value("Seeds", ", ".join(str(s) for s in config.ablation.seeds))
    with start_run(config, "ablate", ctx.seed, echo=ctx.verbose) as run:
        runner = AblationRunner(config, data, codebook, logger=run.logger, on_run=_echo_run, methods=plan)
        report = runner.run()
        path = write_report(report, Path(config.paths.out_root) / "ablation" / "report.jsonl")
        metrics = {s.method: s.test_mean for s in report.summaries}
        run.finish("complete", metrics, {"report": path})

    _print_report_summary(report)
    print_success(f"Report written to {path}")


def _print_report_summary(report: AblationReport) -> None:
    console.print(render_report(report))
    if any(s.missing_seeds for s in report.summaries):
        print_warning("* some seeds failed; see the report for details")
    if len(report.summaries) > 1:
        if ordering_holds(report.summaries):
            print_success("Test accuracy is non-decreasing down the stack")
        else:
            print_warning("Test accuracy decreases somewhere down the stack")
        gain = stack_gain(report.summaries)
        if not math.isnan(gain):
            print_key_value("Stack gain", format_percentage(gain))


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@pass_context
@exit_codes
def report(ctx: KdSluContext, path: Path):
    """Render a saved ablation report."""
    _print_report_summary(read_report(path))


# --- Version command ---


@main.command()
def version():
    """Show version information."""
    print_info(f"textkd-slu v{__version__}")


if __name__ == "__main__":
    main()
