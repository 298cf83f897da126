import functools
import logging
import sys

import click
import numpy as np
import ujson

from app.const import SAMPLE_RATE
from app.internal.audio import AudioFormatError, ManifestParseError, read_wav, resample, write_wav
from app.internal.augment import AugmentConfigError
from app.internal.augment.main import NoiseCorpus, apply_plan, augment_statistics, sample_plan
from app.internal.autograd import ContractError, DimensionError, NumericalError, precision
from app.internal.autograd.dump import write_tensor
from app.internal.checkpoint import CheckpointIntegrityError, CheckpointVersionError, load_checkpoint
from app.internal.config import ConfigFileError, load_config
from app.internal.gradcheck_suites import SUITES, run_suites
from app.internal.model import ForwardContext, InputLengthError, ModelConfigError
from app.internal.model.encoder import encode
from app.internal.model.main import init_model, model_config_from
from app.internal.trainer import NonFiniteGradientError, TrainingAbortedError, train
from app.settings import get_settings


logging.basicConfig(
    format='%(asctime)s %(levelname)-8s %(message)s',
    level=logging.INFO,
    datefmt='%Y-%m-%d %H:%M:%S')

log = logging.getLogger("SSL")
try:
    log.setLevel(get_settings().log_level.upper())
except Exception:
    pass


EXPECTED_ERRORS = (
    AudioFormatError,
    AugmentConfigError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigFileError,
    ContractError,
    DimensionError,
    InputLengthError,
    ManifestParseError,
    ModelConfigError,
    NonFiniteGradientError,
    NumericalError,
    TrainingAbortedError,
)


def handle_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except EXPECTED_ERRORS as e:
            log.error(f"{type(e).__name__}: {e.msg}")
            raise click.ClickException(e.msg)
        except OSError as e:
            log.error(f"I/O error: {e}")
            raise click.ClickException(str(e))
    return wrapper


def echo_record(record):
    click.echo(ujson.dumps(record))


@click.group()
def cli():
    """Augmented self-supervised speech pretraining."""


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override [train] seed.")
@click.option("--deterministic", is_flag=True, help="float64, single augmentation worker.")
@click.option("--output-dir", default=None, help="Override [train] output_dir.")
@click.option("--resume", default=None, type=click.Path(exists=True, dir_okay=False), help="Checkpoint to resume from.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override a config key.")
@handle_errors
def pretrain(config_path, seed, deterministic, output_dir, resume, overrides):
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"train.seed={seed}")
    if deterministic:
        overrides.append("train.deterministic=true")
    if output_dir is not None:
        overrides.append(f"train.output_dir={output_dir}")
    if resume is not None:
        overrides.append(f"train.resume={resume}")
    config = load_config(config_path, overrides)
    log.info(f"pretraining with {config_path}, seed {config.train.seed}")
    records = train(config)
    if records:
        last = records[-1]
        log.info(f"finished at step {last['step']}: loss {last['loss']:.4f} accuracy {last['accuracy']:.3f}")


@cli.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--plan-seed", type=int, required=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--noise-manifest", default=None, help="Override [augment] noise_manifest.")
@click.option("--apply-prob", type=float, default=None)
@click.option("--snr-low", type=float, default=None)
@click.option("--snr-high", type=float, default=None)
@click.option("--pitch-sigma", type=float, default=None)
@click.option("--room-sigma", type=float, default=None)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
@handle_errors
def augment(in_path, out_path, plan_seed, config_path, noise_manifest, apply_prob, snr_low, snr_high,
            pitch_sigma, room_sigma, overrides):
    """Apply one sampled augmentation plan to a WAV file and print the plan."""
    overrides = list(overrides)
    for key, value in (("noise_manifest", noise_manifest), ("apply_prob", apply_prob), ("snr_low", snr_low),
                       ("snr_high", snr_high), ("pitch_sigma", pitch_sigma), ("room_sigma", room_sigma)):
        if value is not None:
            overrides.append(f"augment.{key}={value}")
    config = load_config(config_path, overrides)

    audio = read_wav(in_path)
    corpus = None
    if config.augment.noise_manifest:
        corpus = NoiseCorpus.from_manifest(config.augment.noise_manifest, sample_rate=audio.sample_rate)
    plan = sample_plan(np.random.default_rng(plan_seed), config.augment, len(corpus) if corpus else 0)
    out = apply_plan(audio, plan, corpus)
    write_wav(out, out_path)
    echo_record(plan.model_dump())


@cli.command()
@click.option("--module", "modules", multiple=True, type=click.Choice(sorted(SUITES)),
              help="Suite to run; repeatable, all by default.")
@click.option("--seed", type=int, default=0)
@handle_errors
def gradcheck(modules, seed):
    """Run the finite-difference gradient suites; exits nonzero on any failure."""
    results = run_suites(list(modules) or None, seed=seed)
    for module, name, error, passed in results:
        echo_record({"suite": module, "case": name, "error": error, "passed": passed})
    failed = [f"{m}.{n}" for m, n, _, ok in results if not ok]
    if failed:
        log.error(f"gradcheck failed: {', '.join(failed)}")
        sys.exit(1)


@cli.command(name="encode")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
@handle_errors
def encode_cmd(config_path, ckpt_path, in_path, out_path, overrides):
    """Dump the encoder frames of a WAV file in the tensor dump format."""
    config = load_config(config_path, overrides)
    tensors, metadata = load_checkpoint(ckpt_path)
    with precision(metadata.get("precision", get_settings().precision)):
        model = model_config_from(config)
        store = init_model(model, np.random.default_rng(0))
        store.load_state(tensors)
        audio = read_wav(in_path)
        if audio.sample_rate != SAMPLE_RATE:
            audio = resample(audio, SAMPLE_RATE)
        frames = encode(store, model.encoder, audio.samples, ForwardContext(training=False))
    write_tensor(frames.frames.data[0], out_path)
    log.info(f"wrote {frames.num_frames} frames at {frames.frame_rate:.1f} Hz to {out_path}")


@cli.command(name="stats-augment")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trials", type=int, default=10000)
@click.option("--seed", type=int, default=0)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
@handle_errors
def stats_augment(config_path, trials, seed, overrides):
    """Print empirical augmentation sampler statistics."""
    config = load_config(config_path, overrides)
    echo_record(augment_statistics(config.augment, trials, seed=seed))


if __name__ == "__main__":
    cli()
