"""Operator surface: generate data, train variants, evaluate, predict,
and merge reports.

Commands: synth, train, eval, predict, report.  Config files are flat
key=value text with [sections]; ``--print-config`` shows every default.
``NOWCAST_SEED`` overrides the configured seed.  Exit codes: 0 success,
2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, baselines, metrics, trainer
from .errors import DataError, ManifestError, NowcastError, NumericError
from .grids import read_grid, read_manifest, write_grid, RainGrid
from .nn.model import NetConfig, load_checkpoint
from .synth import SynthConfig, corpus_histogram, sample_corpus
from .trainer import TrainConfig, RunLedger, evaluate_forecasts, predict_sample, split_samples

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# config files

class ConfigError(DataError):
    pass


def parse_kv_config(text: str, origin: str = "<config>"):
    """Flat key=value sections; returns {section: {key: (value, lineno)}}."""
    out = {}
    section = "global"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        out.setdefault(section, {})[key.strip()] = (value.strip(), lineno)
    return out


def _convert(cur, raw, origin, lineno, key):
    try:
        if isinstance(cur, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(cur, int):
            return int(raw)
        if isinstance(cur, float):
            return float(raw)
        if isinstance(cur, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {raw!r}") from exc


def _apply_section(obj, section: dict, origin: str, secname: str):
    for key, (raw, lineno) in section.items():
        if not hasattr(obj, key):
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r} in [{secname}]")
        setattr(obj, key, _convert(getattr(obj, key), raw, origin, lineno, key))
    return obj


def load_run_config(path=None):
    """(SynthConfig, TrainConfig-kwargs dict, NetConfig-kwargs dict, seed)."""
    synth_cfg = SynthConfig()
    net_kwargs = {f.name: getattr(NetConfig(), f.name) for f in fields(NetConfig)
                  if f.name != "use_attention" and f.name != "head"}
    train_kwargs = {
        "learning_rate": 1e-4, "batch_size": 4, "max_epochs": 15,
        "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "clip_norm": 1.0,
        "seed": 0, "variant": "GRU+WMAE",
    }
    seed = 0
    if path is None:
        return synth_cfg, train_kwargs, net_kwargs, seed

    origin = str(path)
    text = Path(path).read_text()
    sections = parse_kv_config(text, origin)
    for secname, section in sections.items():
        if secname == "synth":
            _apply_section(synth_cfg, section, origin, secname)
        elif secname == "net":
            holder = _Holder(net_kwargs)
            _apply_section(holder, section, origin, secname)
        elif secname == "train":
            holder = _Holder(train_kwargs)
            _apply_section(holder, section, origin, secname)
        elif secname == "run":
            for key, (raw, lineno) in section.items():
                if key == "seed":
                    seed = int(raw)
                else:
                    raise ConfigError(f"{origin}:{lineno}: unknown key {key!r} in [run]")
        else:
            first = next(iter(section.values()))
            raise ConfigError(f"{origin}:{first[1]}: unknown section [{secname}]")
    train_kwargs["seed"] = seed
    return synth_cfg, train_kwargs, net_kwargs, seed


class _Holder:
    """Attribute view over a dict so _apply_section can type-convert."""

    def __init__(self, d):
        object.__setattr__(self, "_d", d)

    def __getattr__(self, k):
        try:
            return self._d[k]
        except KeyError:
            raise AttributeError(k)

    def __setattr__(self, k, v):
        self._d[k] = v


def default_config_text() -> str:
    lines = ["[run]", "seed = 0", "", "[synth]"]
    for f in fields(SynthConfig):
        lines.append(f"{f.name} = {getattr(SynthConfig(), f.name)}")
    lines += ["", "[net]"]
    net = NetConfig()
    for f in fields(NetConfig):
        if f.name in ("use_attention", "head"):
            continue
        v = getattr(net, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    lines += ["", "[train]"]
    for k, v in (("variant", "GRU+WMAE"), ("learning_rate", 1e-4), ("batch_size", 4),
                 ("max_epochs", 15), ("beta1", 0.9), ("beta2", 0.999),
                 ("adam_eps", 1e-8), ("clip_norm", 1.0)):
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run manifests and artifact hashing

def _hash_bytes(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, config_path, seed, input_hash: str):
    doc = {
        "command": command,
        "config": None if config_path is None else str(config_path),
        "out_dir": str(out_dir),
        "seed": seed,
        "version": __version__,
        "input_hash": input_hash,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def hash_artifacts(out_dir) -> str:
    """Content hash of an artifact directory.

    The wall-time column of ledger CSVs is masked: timing is
    informational and exempt from the determinism contract.
    """
    h = hashlib.sha256()
    for p in sorted(Path(out_dir).rglob("*")):
        if not p.is_file():
            continue
        h.update(str(p.relative_to(out_dir)).encode())
        if p.name == "ledger.csv":
            ledger = RunLedger.from_csv(p)
            h.update(ledger.fingerprint().encode())
        else:
            h.update(p.read_bytes())
    return h.hexdigest()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in header))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# plotting (all static files, Agg backend)

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_csi_hss(reports, hour, path):
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for rep in reports:
        ths, csis, hsss = [], [], []
        for th in rep.thresholds:
            c = rep.counts.get((hour, th))
            if c is None:
                continue
            ths.append(th)
            csis.append(metrics.csi(c))
            hsss.append(metrics.hss(c))
        axes[0].plot(ths, [v if v is not None else np.nan for v in csis],
                     marker="o", label=rep.source)
        axes[1].plot(ths, [v if v is not None else np.nan for v in hsss],
                     marker="o", label=rep.source)
    axes[0].set_ylabel("CSI")
    axes[1].set_ylabel("HSS")
    for ax in axes:
        ax.set_xlabel("rain-rate threshold (mm/hr)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.suptitle(f"hour {hour} skill vs threshold")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_performance_diagram(reports, hour, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.5, 5))
    sr = np.linspace(0.01, 1, 200)
    pod_grid = np.linspace(0.01, 1, 200)
    S, P = np.meshgrid(sr, pod_grid)
    with np.errstate(divide="ignore"):
        CSI = 1.0 / (1.0 / S + 1.0 / P - 1.0)
    cs = ax.contour(S, P, CSI, levels=np.arange(0.1, 1.0, 0.1),
                    colors="green", alpha=0.4, linewidths=0.7)
    ax.clabel(cs, fmt="%.1f", fontsize=6)
    for bias in (0.3, 0.5, 1.0, 2.0, 3.0):
        ax.plot(sr, np.minimum(bias * sr, 1.0), ls="--", color="gray", lw=0.6)
    for rep in reports:
        xs, ys = [], []
        for row in metrics.performance_diagram_rows(rep, hour):
            if row["pod"] is None or row["success_ratio"] is None:
                continue
            xs.append(row["success_ratio"])
            ys.append(row["pod"])
            ax.annotate(f'{row["threshold"]:g}', (xs[-1], ys[-1]), fontsize=6)
        ax.plot(xs, ys, marker="s", label=rep.source)
    ax.set_xlabel("success ratio")
    ax.set_ylabel("probability of detection")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_prediction_panel(sample, bundle, path):
    plt = _plt()
    targets = sample.target_array()
    rows = 2 + (1 if bundle.attention is not None else 0)
    fig, axes = plt.subplots(rows, 3, figsize=(9, 2.6 * rows))
    vmax = max(float(targets.max()), float(bundle.predictions.max()), 1.0)
    for h in range(3):
        im = axes[0, h].imshow(targets[h], vmin=0, vmax=vmax, cmap="viridis")
        axes[0, h].set_title(f"target H{h}")
        axes[1, h].imshow(bundle.predictions[h], vmin=0, vmax=vmax, cmap="viridis")
        axes[1, h].set_title(f"prediction H{h}")
        if bundle.attention is not None:
            axes[2, h].imshow(bundle.attention[h], vmin=0, vmax=1, cmap="magma")
            axes[2, h].set_title(f"attention H{h}")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.7, label="mm/hr")
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    cfg, _, _, cfg_seed = load_run_config(args.config)
    seed = _resolve_seed(args.seed, cfg_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = sample_corpus(cfg, seed, out)
    hist = corpus_histogram(manifest)
    _write_csv(out / "histogram.csv",
               ["bin_low", "bin_high", "fraction"],
               [{"bin_low": lo, "bin_high": hi, "fraction": float(fr)}
                for lo, hi, fr in zip((0, 1, 3, 5, 10, 20, 30, 40),
                                      (1, 3, 5, 10, 20, 30, 40, "inf"), hist)])
    input_hash = _hash_bytes(Path(args.config).read_bytes() if args.config else b"",
                             str(seed).encode())
    write_run_manifest(out, "synth", args.config, seed, input_hash)
    print(f"wrote {len(manifest)} frame pairs to {out}")
    return EXIT_OK


def cmd_train(args):
    _, train_kwargs, net_kwargs, cfg_seed = load_run_config(args.config)
    seed = _resolve_seed(args.seed, train_kwargs.get("seed", cfg_seed))
    if args.variant:
        train_kwargs["variant"] = args.variant
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(Path(args.corpus) / "manifest.tsv")

    net = NetConfig(**net_kwargs)
    config = TrainConfig(net=net, checkpoint_dir=str(out),
                         **{**train_kwargs, "seed": seed})
    state, ledger = train_or_classifier(config, manifest)
    input_hash = _hash_bytes(Path(args.config).read_bytes() if args.config else b"",
                             Path(args.corpus, "manifest.tsv").read_bytes(),
                             str(seed).encode())
    write_run_manifest(out, "train", args.config, seed, input_hash)
    best = ledger.best_epoch if ledger.rows else None
    print(f"trained {config.variant}: {len(ledger.rows)} epochs, best epoch {best}, "
          f"checkpoints in {out}")
    return EXIT_OK


def train_or_classifier(config: TrainConfig, manifest):
    if config.variant == "classifier":
        return trainer.train_classifier(config, manifest)
    return trainer.train(config, manifest)


def cmd_eval(args):
    state, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(Path(args.corpus) / "manifest.tsv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = tuple(float(t) for t in args.thresholds.split(",")) \
        if args.thresholds else metrics.CSI_HSS_THRESHOLDS
    hours = tuple(int(h) for h in args.hours.split(",")) if args.hours else (0, 1, 2)

    samples = split_samples(manifest, args.split)
    reports = [evaluate_forecasts(lambda s: predict_sample(state, s),
                                  samples, state.variant, args.split, thresholds)]
    if args.with_baselines:
        reports.append(evaluate_forecasts(lambda s: baselines.persistence_forecast(s, 10),
                                          samples, "persistence_10min", args.split, thresholds))
        reports.append(evaluate_forecasts(lambda s: baselines.persistence_forecast(s, 20),
                                          samples, "persistence_20min", args.split, thresholds))
        reports.append(evaluate_forecasts(baselines.extrapolate,
                                          samples, "extrapolation", args.split, thresholds))

    score_rows = []
    wmae_rows = []
    for rep in reports:
        score_rows += [r for r in rep.score_rows() if r["hour"] in hours]
        for h in hours:
            for th in (0.5, 0.0):
                wmae_rows.append({
                    "source": rep.source, "split": rep.split, "hour": h,
                    "th": th, "wmae": rep.wmae(h, th),
                    "stderr": rep.wmae_stderr(h, th),
                    "n_days": len(rep.wmae_days(h, th)),
                })
    _write_csv(out / "scores.csv",
               ["source", "split", "hour", "threshold", "tp", "fp", "tn", "fn",
                "csi", "hss", "pod", "success_ratio", "bias"], score_rows)
    _write_csv(out / "wmae.csv",
               ["source", "split", "hour", "th", "wmae", "stderr", "n_days"], wmae_rows)
    pd_rows = []
    for rep in reports:
        for row in metrics.performance_diagram_rows(rep, hour=min(hours)):
            pd_rows.append({"source": rep.source, **row})
    _write_csv(out / "performance_diagram.csv",
               ["source", "threshold", "pod", "success_ratio", "csi", "bias"], pd_rows)

    plot_csi_hss(reports, min(hours), out / "csi_hss.png")
    plot_performance_diagram(reports, min(hours), out / "performance_diagram.png")

    input_hash = _hash_bytes(Path(args.checkpoint).read_bytes(),
                             Path(args.corpus, "manifest.tsv").read_bytes())
    write_run_manifest(out, "eval", None, state.seed, input_hash)
    print(f"evaluated {len(samples)} samples from split {args.split!r} -> {out}")
    return EXIT_OK


def cmd_predict(args):
    state, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(Path(args.corpus) / "manifest.tsv")
    samples = split_samples(manifest, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} has no complete samples")
    if args.anchor is not None:
        matches = [s for s in samples if s.anchor == args.anchor]
        if not matches:
            raise DataError(f"no sample anchored at t={args.anchor}")
        sample = matches[0]
    else:
        if args.index >= len(samples):
            raise DataError(f"sample index {args.index} out of range ({len(samples)})")
        sample = samples[args.index]

    bundle = predict_sample(state, sample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for h in range(3):
        grid = RainGrid(bundle.predictions[h], sample.anchor + 60 * h)
        write_grid(grid, out / f"pred_h{h}.nwg")
        if bundle.attention is not None:
            agrid = RainGrid(bundle.attention[h], sample.anchor + 60 * h)
            write_grid(agrid, out / f"attn_h{h}.nwg")
    plot_prediction_panel(sample, bundle, out / "panel.png")
    input_hash = _hash_bytes(Path(args.checkpoint).read_bytes(),
                             str(sample.anchor).encode())
    write_run_manifest(out, "predict", None, state.seed, input_hash)
    print(f"prediction for t={sample.anchor} written to {out}")
    return EXIT_OK


def cmd_report(args):
    """Merge one or more eval directories into a comparison table + plots."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    header = None
    for d in args.inputs:
        score_path = Path(d) / "scores.csv"
        if not score_path.exists():
            raise DataError(f"{d}: no scores.csv (not an eval output dir?)")
        lines = score_path.read_text().splitlines()
        if header is None:
            header = lines[0]
        rows += lines[1:]
    (out / "combined_scores.csv").write_text("\n".join([header] + rows) + "\n")
    print(f"merged {len(args.inputs)} eval dirs -> {out / 'combined_scores.csv'}")
    return EXIT_OK


def _resolve_seed(flag_seed, cfg_seed):
    env = os.environ.get("NOWCAST_SEED")
    if env is not None:
        return int(env)
    if flag_seed is not None:
        return flag_seed
    return cfg_seed


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    p = argparse.ArgumentParser(prog="nowcast", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--config", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--print-config", action="store_true")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a model variant")
    tp.add_argument("--config", default=None)
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--variant", default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="verification metrics for a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--corpus", required=True)
    ep.add_argument("--split", default="test", choices=("train", "val", "test"))
    ep.add_argument("--out", required=True)
    ep.add_argument("--with-baselines", action="store_true")
    ep.add_argument("--thresholds", default=None)
    ep.add_argument("--hours", default=None)
    ep.set_defaults(func=cmd_eval)

    pp = sub.add_parser("predict", help="forecast one sample")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--corpus", required=True)
    pp.add_argument("--split", default="test", choices=("train", "val", "test"))
    pp.add_argument("--anchor", type=int, default=None)
    pp.add_argument("--index", type=int, default=0)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_predict)

    rp = sub.add_parser("report", help="merge eval outputs")
    rp.add_argument("--inputs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "print_config", False):
        print(default_config_text(), end="")
        return EXIT_OK
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NowcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
