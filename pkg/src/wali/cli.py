"""Command-line entry point: ``wali <command> [options]``.

Commands run the pipeline stages (``simulate``, ``train``, ``finetune``,
``reconstruct``, ``evaluate``) and the ``gradcheck`` verification harness.
One config document drives every stage; ``--seed``, ``--out`` and
``--sensor-rate`` override it.  Every command that writes files also
writes ``resolved_config.json`` next to them.

Exit codes: 0 success, 1 verification failure, 2 config or argument error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import wave
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .trainer import CheckpointError

log = logging.getLogger("wali")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class Clobber(FileExistsError):
    """An output exists and ``--no-clobber`` was given."""


def _outputs(out: Path, names: list[str], no_clobber: bool) -> list[Path]:
    paths = [out / n for n in names]
    if no_clobber:
        taken = [str(p) for p in paths if p.exists()]
        if taken:
            raise Clobber(f"refusing to overwrite {', '.join(taken)} (--no-clobber)")
    out.mkdir(parents=True, exist_ok=True)
    return paths


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.override(seed=args.seed, out=args.out,
                        sensor_rate=getattr(args, "sensor_rate", None))


# -- commands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .channel import build_dataset

    cfg = _resolve_config(args)
    if args.noise_dir is not None and not cfg.sim.noise:
        log.info("--noise-dir given; enabling noise mixing")
        import dataclasses
        cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, noise=True))
    out = Path(cfg.out)
    _outputs(out, ["manifest.jsonl", "resolved_config.json"], args.no_clobber)
    manifest = build_dataset(args.clean_dir, args.noise_dir, cfg.sim, out, jobs=args.jobs)
    cfg.save(out / "resolved_config.json")
    snrs = np.array([r.snr_db for r in manifest.records if r.snr_db is not None], dtype=float)
    print(f"pairs: {len(manifest.records)}  skipped: {len(manifest.skipped)}")
    print(f"rates: sensor {cfg.sim.sensor_rate} Hz -> target {cfg.sim.target_rate} Hz")
    if snrs.size:
        print(f"snr dB: min {snrs.min():.2f}  mean {snrs.mean():.2f}  max {snrs.max():.2f}")
    else:
        print("snr dB: noise off")
    print(f"manifest: {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .channel import DatasetManifest
    from .network import build
    from .trainer import fit, save_checkpoint

    cfg = _resolve_config(args)
    out = Path(cfg.out)
    ckpt, hist, _ = _outputs(out, ["model.ckpt", "history.csv", "resolved_config.json"],
                             args.no_clobber)
    manifest = DatasetManifest.load(args.manifest)
    net = build(cfg.network, seed=cfg.train.seed)
    net, history, state = fit(net, manifest, cfg.train, cfg.loss, history_path=hist,
                              checkpoint_dir=out / "checkpoints")
    save_checkpoint(ckpt, net, state, extra={"train": cfg.train.to_dict()})
    cfg.save(out / "resolved_config.json")
    print(f"steps: {len(history)}  loss: {history[0]:.4f} -> {history[-1]:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .channel import DatasetManifest
    from .trainer import finetune, save_checkpoint

    cfg = _resolve_config(args)
    out = Path(cfg.out)
    ckpt, hist, _ = _outputs(out, ["finetuned.ckpt", "finetune_history.csv",
                                   "resolved_config.json"], args.no_clobber)
    manifest = DatasetManifest.load(args.manifest)
    net, history, state = finetune(args.checkpoint, manifest, args.minutes, cfg.train,
                                   cfg.loss, history_path=hist if args.minutes > 0 else None)
    save_checkpoint(ckpt, net, state, extra={"finetune_minutes": args.minutes})
    cfg.save(out / "resolved_config.json")
    if history:
        print(f"steps: {len(history)}  loss: {history[0]:.4f} -> {history[-1]:.4f}")
    else:
        print("zero budget: checkpoint copied unchanged")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .channel import read_wav, write_wav
    from .network import reconstruct
    from .trainer import load_checkpoint

    wav_out = Path(args.wav_out)
    if args.no_clobber and wav_out.exists():
        raise Clobber(f"refusing to overwrite {wav_out} (--no-clobber)")
    net, _, _ = load_checkpoint(args.checkpoint)
    x, fs = read_wav(args.wav_in)
    y = reconstruct(net, x, fs)
    wav_out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(wav_out, y, net.config.sample_rate)
    print(f"{args.wav_in} ({fs} Hz, {len(x)} samples) -> {wav_out} "
          f"({net.config.sample_rate} Hz, {len(y)} samples)")
    return EXIT_OK


def _triptych(path: Path, clean, degraded, recon, fs: int, cfg) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .dsp import stft

    panels = [("ground truth", clean), ("degraded", degraded)]
    if recon is not None:
        panels.append(("reconstructed", recon))
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2), sharey=True)
    for ax, (title, x) in zip(np.atleast_1d(axes), panels):
        mag = np.abs(stft(np.asarray(x, dtype=np.float64), cfg).numpy())
        db = 20 * np.log10(mag + 1e-9)
        ax.imshow(db, origin="lower", aspect="auto", cmap="magma", vmin=db.max() - 80, vmax=db.max(),
                  extent=(0, len(x) / fs, 0, fs / 2))
        ax.set_title(title)
        ax.set_xlabel("time (s)")
    np.atleast_1d(axes)[0].set_ylabel("frequency (Hz)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    from .channel import DatasetManifest, read_wav
    from .metrics import evaluate_dataset
    from .network import reconstruct
    from .trainer import load_checkpoint

    cfg = _resolve_config(args)
    out = Path(cfg.out)
    names = ["report.csv", "report.jsonl", "summary.json", "resolved_config.json"]
    if not args.no_plot:
        names.append("spectrograms.png")
    _outputs(out, names, args.no_clobber)
    manifest = DatasetManifest.load(args.manifest)
    model = None
    if args.checkpoint is not None:
        net, _, _ = load_checkpoint(args.checkpoint)

        def model(x):
            return reconstruct(net, x)

    fs = cfg.network.sample_rate
    report = evaluate_dataset(manifest, model, cfg.metrics.stft, fs, jobs=args.jobs)
    report.config.update({"checkpoint": args.checkpoint, "manifest": str(args.manifest)})
    report.to_csv(out / "report.csv")
    report.to_jsonl(out / "report.jsonl")
    report.to_summary_json(out / "summary.json")
    cfg.save(out / "resolved_config.json")
    if not args.no_plot and manifest.records:
        rec = manifest.records[0]
        clean, _ = read_wav(manifest.resolve(rec.clean_path))
        degraded, _ = read_wav(manifest.resolve(rec.degraded_path))
        n = min(len(clean), len(degraded))
        recon = model(degraded[:n])[:n] if model is not None else None
        _triptych(out / "spectrograms.png", clean[:n], degraded[:n], recon, fs, cfg.metrics.stft)
    print(f"{'condition':<14}{'lsd':>10}{'si_sdr_db':>12}{'stoi':>10}")
    for cond, m in report.means().items():
        print(f"{cond:<14}{m['lsd']:>10.4f}{m['si_sdr_db']:>12.3f}{m['stoi']:>10.4f}")
    print(f"report: {out / 'report.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, run_gradchecks

    results = run_gradchecks(args.module)
    print(f"{'group':<10}{'check':<22}{'max rel err':>13}{'time s':>9}  result")
    for r in results:
        print(f"{r.group:<10}{r.name:<22}{r.max_rel_error:>13.3e}{r.seconds:>9.2f}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed (tolerance {TOLERANCE:g}) in {total:.1f} s")
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config (defaults built in)")
    common.add_argument("--seed", type=int, help="override sim.seed and train.seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for simulate/evaluate")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--no-clobber", action="store_true", help="refuse to overwrite outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wali", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="build a degraded/clean corpus")
    s.add_argument("clean_dir")
    s.add_argument("--noise-dir")
    s.add_argument("--sensor-rate", type=int, help="override sim.sensor_rate (Hz)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train a network on a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--minutes", type=float, required=True, help="audio budget in minutes")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct one WAV file")
    s.add_argument("checkpoint")
    s.add_argument("wav_in")
    s.add_argument("wav_out")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", parents=[common], help="score a manifest (LSD, SI-SDR, STOI)")
    s.add_argument("manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--no-plot", action="store_true", help="skip the spectrogram PNG")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--module", default="all", choices=["all", "core", "layers", "attention", "loss"])
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, wave.Error, EOFError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
