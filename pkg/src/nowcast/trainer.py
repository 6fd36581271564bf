"""Training loop: Adam, generator/discriminator alternation, validation
selection and checkpointing.

Determinism contract: one seeded generator owns all run randomness
(parameter init and batch order), so identical (seed, config, corpus)
runs produce identical parameters, ledger numbers and reports.  Ledger
equality deliberately ignores the wall-time column.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses, metrics
from .errors import EmptySplit, NaNLoss
from .grids import DatasetManifest, ForecastBundle, NormStats, SplitScheme, fit_norm_stats, window_samples
from .losses import LossSpec
from .nn.model import ModelState, NetConfig, build_model, save_checkpoint

VALID_VARIANTS = (
    "GRU+WMAE",
    "GRU+WMSE",
    "GRU+WMAE+Bal",
    "GRU+WMAE+Adv",
    "GRU+WMAE+Atn",
    "GRU+WMAE+Adv+Atn",
    "classifier",
)


def parse_variant(tag: str):
    """Map a model-variant tag to (LossSpec, use_attention, with_discriminator)."""
    if tag == "classifier":
        return LossSpec(), False, False
    tokens = tag.split("+")
    if not tokens or tokens[0] != "GRU" or len(tokens) < 2 or tokens[1] not in ("WMAE", "WMSE"):
        raise ValueError(f"unknown variant {tag!r}; valid: {', '.join(VALID_VARIANTS)}")
    base = tokens[1]
    extras = tokens[2:]
    for t in extras:
        if t not in ("Bal", "Adv", "Atn"):
            raise ValueError(f"unknown variant token {t!r}; valid: {', '.join(VALID_VARIANTS)}")
    spec = LossSpec(base=base, use_bal="Bal" in extras, use_adv="Adv" in extras)
    return spec, "Atn" in extras, "Adv" in extras


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    variant: str = "GRU+WMAE"
    net: NetConfig = field(default_factory=NetConfig)
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("need at least one epoch")
        parse_variant(self.variant)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_lpred: float
    d_loss: float | None
    seconds: float


@dataclass
class RunLedger:
    """Per-epoch record; equality and fingerprints exclude wall time."""

    rows: list = field(default_factory=list)
    aborted: bool = False

    @property
    def best_epoch(self) -> int:
        vals = [r.val_lpred for r in self.rows]
        return int(np.argmin(vals))

    def fingerprint(self) -> str:
        parts = []
        for r in self.rows:
            d = "" if r.d_loss is None else repr(float(r.d_loss))
            parts.append(f"{r.epoch},{repr(float(r.train_loss))},{repr(float(r.val_lpred))},{d}")
        return "|".join(parts)

    def __eq__(self, other):
        return isinstance(other, RunLedger) and self.fingerprint() == other.fingerprint()

    def to_csv(self, path):
        lines = ["epoch,train_loss,val_lpred,d_loss,seconds"]
        for r in self.rows:
            d = "" if r.d_loss is None else repr(float(r.d_loss))
            lines.append(f"{r.epoch},{repr(float(r.train_loss))},{repr(float(r.val_lpred))},"
                         f"{d},{r.seconds:.3f}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        ledger = cls()
        for line in Path(path).read_text().splitlines()[1:]:
            ep, tl, vl, dl, sec = line.split(",")
            ledger.rows.append(EpochRow(int(ep), float(tl), float(vl),
                                        float(dl) if dl else None, float(sec)))
        return ledger


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    total = np.sqrt(total)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# data plumbing

def split_samples(manifest: DatasetManifest, split: str, scheme: SplitScheme | None = None):
    sub = manifest.subset(split, scheme)
    return list(window_samples(sub))


def fit_stats_for_split(manifest: DatasetManifest, split: str = "train",
                        scheme: SplitScheme | None = None) -> NormStats:
    sub = manifest.subset(split, scheme)
    if not sub.entries:
        raise EmptySplit(f"no frames in split {split!r}")

    def grid_iter():
        for ts in sub.timestamps():
            yield sub.load_rain(ts)
            yield sub.load_radar(ts)

    return fit_norm_stats(grid_iter())


class _Batcher:
    """Precomputed per-sample tensors with seeded shuffling."""

    def __init__(self, samples, stats: NormStats, batch_size: int):
        self.inputs = [s.input_array(stats) for s in samples]
        self.lasts = [s.last_rain_norm(stats) for s in samples]
        self.targets = [s.target_array().astype(np.float64) for s in samples]
        self.anchors = [s.anchor for s in samples]
        self.batch_size = batch_size
        self.n = len(samples)

    def batches(self, order=None):
        idx = np.arange(self.n) if order is None else order
        for lo in range(0, self.n, self.batch_size):
            sel = idx[lo:lo + self.batch_size]
            x = np.stack([self.inputs[i] for i in sel])
            last = np.stack([self.lasts[i] for i in sel])
            y = np.stack([self.targets[i] for i in sel])
            yield x, last, y


# ---------------------------------------------------------------------------
# forward helpers

def predict_arrays(state: ModelState, x, last):
    """Forward pass -> (normalized predictions, attention maps or None)."""
    preds, attns, _ = state.predictor.forward(x, last)
    return preds, attns


def predict_sample(state: ModelState, sample) -> ForecastBundle:
    """Run one SequenceSample through a trained model."""
    stats = state.stats
    x = sample.input_array(stats)[None].astype(state.config.np_dtype)
    last = sample.last_rain_norm(stats)[None].astype(state.config.np_dtype)
    preds_norm, attns = predict_arrays(state, x, last)
    preds = (preds_norm[0].astype(np.float64) * stats.rain_q95).astype(np.float32)
    attn = None if attns is None else attns[0].astype(np.float32)
    return ForecastBundle(preds, attn, state.variant, sample.anchor)


def _val_lpred(state: ModelState, spec: LossSpec, batcher: _Batcher, classifier: bool):
    vals = []
    for x, last, y in batcher.batches():
        preds_norm, _ = predict_arrays(state, x.astype(state.config.np_dtype),
                                       last.astype(state.config.np_dtype))
        if classifier:
            labels = (y >= 0.5).astype(np.float64)
            vals.append(losses.bce(labels, preds_norm.astype(np.float64)))
        else:
            yhat = preds_norm.astype(np.float64) * state.stats.rain_q95
            vals.append(losses.pred_loss(spec, y, yhat))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# the loop

def train(config: TrainConfig, manifest: DatasetManifest,
          scheme: SplitScheme | None = None):
    """Train a model variant; returns (best ModelState, RunLedger).

    With the adversarial term on, each batch takes one discriminator step
    (predictor frozen) followed by one predictor step (discriminator
    frozen).  Checkpoints are written per epoch when a checkpoint dir is
    configured; the returned state carries the best-validation parameters.

    A non-finite loss aborts the run: epochs already completed stand and
    the best state so far is returned (ledger flagged); a first-epoch NaN
    raises NaNLoss.
    """
    spec, use_attention, with_disc = parse_variant(config.variant)
    classifier = config.variant == "classifier"

    train_samples = split_samples(manifest, "train", scheme)
    val_samples = split_samples(manifest, "val", scheme)
    if not train_samples:
        raise EmptySplit("training split produced no samples")
    if not val_samples:
        raise EmptySplit("validation split produced no samples")

    stats = fit_stats_for_split(manifest, "train", scheme)
    net = replace(config.net, use_attention=use_attention,
                  head="sigmoid" if classifier else "relu")
    state = build_model(net, config.seed, with_disc, config.variant, stats)
    dt = net.np_dtype

    g_params = state.predictor.params()
    opt_g = Adam(g_params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    if with_disc:
        d_params = state.discriminator.params()
        opt_d = Adam(d_params, config.learning_rate, config.beta1, config.beta2,
                     config.adam_eps)

    tr_batch = _Batcher(train_samples, stats, config.batch_size)
    va_batch = _Batcher(val_samples, stats, config.batch_size)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB007]))
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    ledger = RunLedger()
    best_val = None
    best_params = None
    q95 = stats.rain_q95

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(tr_batch.n)
        epoch_losses = []
        epoch_dlosses = []
        bad = False

        for x, last, y in tr_batch.batches(order):
            x = x.astype(dt)
            last = last.astype(dt)
            B, T = y.shape[0], y.shape[1]

            preds_norm, attns, cache = state.predictor.forward(x, last)

            if classifier:
                labels = (y >= 0.5).astype(np.float64)
                probs = preds_norm.astype(np.float64)
                loss = losses.bce(labels, probs)
                dpred_norm = losses.bce_grad(labels, probs)
            else:
                yhat = preds_norm.astype(np.float64) * q95
                lp = losses.pred_loss(spec, y, yhat)
                dyhat = losses.pred_loss_grad(spec, y, yhat)
                if spec.use_adv:
                    fake = preds_norm.reshape(B * T, *preds_norm.shape[2:])
                    real = (y / q95).astype(dt).reshape(B * T, *y.shape[2:])
                    # discriminator step (predictor frozen)
                    rs, rcache = state.discriminator.forward(real)
                    fs, fcache = state.discriminator.forward(fake)
                    ld = losses.d_loss(rs.reshape(B, T), fs.reshape(B, T))
                    dr, df = losses.d_loss_grads(rs.reshape(B, T), fs.reshape(B, T))
                    _, g_real = state.discriminator.backward(
                        dr.reshape(B * T).astype(dt), rcache)
                    _, g_fake = state.discriminator.backward(
                        df.reshape(B * T).astype(dt), fcache)
                    d_grads = {k: g_real[k] + g_fake[k] for k in g_real}
                    opt_d.step(d_params, d_grads)
                    epoch_dlosses.append(ld)
                    # predictor step (discriminator frozen, fresh scores)
                    fs2, fcache2 = state.discriminator.forward(fake)
                    lgd = losses.g_adv_loss(fs2.reshape(B, T))
                    dfs = losses.g_adv_loss_grad(fs2.reshape(B, T))
                    dmap, _ = state.discriminator.backward(
                        dfs.reshape(B * T).astype(dt), fcache2)
                    dmap = dmap.reshape(y.shape)
                    loss = (1 - spec.w_adv) * lp + spec.w_adv * lgd
                    dpred_norm = (1 - spec.w_adv) * dyhat * q95 + spec.w_adv * dmap
                elif spec.use_bal:
                    lb = losses.balanced_loss(y, yhat)
                    loss = (1 - spec.w_bal) * lp + spec.w_bal * lb
                    dpred_norm = ((1 - spec.w_bal) * dyhat
                                  + spec.w_bal * losses.balanced_loss_grad(y, yhat)) * q95
                else:
                    loss = lp
                    dpred_norm = dyhat * q95

            if not np.isfinite(loss):
                bad = True
                break
            grads = state.predictor.backward(np.asarray(dpred_norm, dtype=dt), cache)
            clip_global_norm(grads, config.clip_norm)
            opt_g.step(g_params, grads)
            epoch_losses.append(loss)

        if bad:
            ledger.aborted = True
            if not ledger.rows:
                raise NaNLoss("training loss became non-finite in the first epoch")
            break

        val = _val_lpred(state, spec, va_batch, classifier)
        if not np.isfinite(val):
            ledger.aborted = True
            if not ledger.rows:
                raise NaNLoss("validation loss became non-finite in the first epoch")
            break

        row = EpochRow(epoch, float(np.mean(epoch_losses)), val,
                       float(np.mean(epoch_dlosses)) if epoch_dlosses else None,
                       time.perf_counter() - t0)
        ledger.rows.append(row)

        if ckdir:
            save_checkpoint(state, ckdir / f"epoch_{epoch:03d}.nwck",
                            {"epoch": epoch, "val_lpred": val})
        if best_val is None or val < best_val:
            best_val = val
            best_params = {k: v.copy() for k, v in state.params().items()}

    if best_params is not None:
        params = state.params()
        for k, v in best_params.items():
            params[k][...] = v
    if ckdir and ledger.rows:
        save_checkpoint(state, ckdir / "best.nwck",
                        {"epoch": ledger.best_epoch, "val_lpred": best_val})
        ledger.to_csv(ckdir / "ledger.csv")
    return state, ledger


def train_classifier(config: TrainConfig, manifest: DatasetManifest,
                     scheme: SplitScheme | None = None):
    """Train the rain/no-rain probability net (binary cross-entropy)."""
    if config.variant != "classifier":
        config = replace(config, variant="classifier")
    return train(config, manifest, scheme)


# ---------------------------------------------------------------------------
# evaluation

def evaluate_forecasts(forecast_fn, samples, source: str, split: str,
                       thresholds=metrics.CSI_HSS_THRESHOLDS) -> metrics.VerificationReport:
    """Shared reporter: any sample -> ForecastBundle function, same metrics."""
    if not samples:
        raise EmptySplit(f"split {split!r} has no samples")
    report = metrics.VerificationReport(source, split, tuple(thresholds))
    for sample in samples:
        bundle = forecast_fn(sample)
        report.add_sample(sample.target_array(), bundle.predictions, sample.anchor)
    return report


def evaluate_checkpoint(state: ModelState, manifest: DatasetManifest, split: str,
                        scheme: SplitScheme | None = None,
                        thresholds=metrics.CSI_HSS_THRESHOLDS) -> metrics.VerificationReport:
    """Full metric suite for a trained model over one split."""
    samples = split_samples(manifest, split, scheme)
    return evaluate_forecasts(lambda s: predict_sample(state, s),
                              samples, state.variant, split, thresholds)
