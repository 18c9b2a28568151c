"""Optimizers, the alternating update step, checkpoints and the run driver."""

from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pagan import tensor as T
from pagan.config import TrainConfig, config_from_text
from pagan.errors import FormatError, NumericError
from pagan.nets import build_bundle
from pagan.objectives import PaganLosses, pagan_losses

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e4
LOSS_COLUMNS = ("L_d^x", "L_d^z", "L_d^xx", "L_g", "L_e")
DISC_BLOCKS = ("psi_x", "psi_z", "psi_xx")
GEN_BLOCKS = ("theta", "phi")


# --- optimizers ----------------------------------------------------------------

class SGD:
    def __init__(self, params, lr=1e-2):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads):
        self.t += 1
        for p in self.params:
            g = grads.array(p)
            p.data = (p.data - self.lr * g).astype(p.dtype)

    def state(self):
        return {"t": self.t}, []

    def load_state(self, meta, arrays):
        self.t = int(meta["t"])


class Adam:
    def __init__(self, params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.array(p).astype(p.dtype)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def state(self):
        return {"t": self.t}, self.m + self.v

    def load_state(self, meta, arrays):
        n = len(self.params)
        if len(arrays) != 2 * n:
            raise FormatError(f"optimizer state holds {len(arrays)} arrays, expected {2 * n}")
        self.t = int(meta["t"])
        self.m = [a.astype(p.dtype).reshape(p.shape) for a, p in zip(arrays[:n], self.params)]
        self.v = [a.astype(p.dtype).reshape(p.shape) for a, p in zip(arrays[n:], self.params)]


def make_optimizers(bundle, config):
    def one(params):
        if config.optimizer == "sgd":
            return SGD(params, config.lr)
        return Adam(params, config.lr, (config.beta1, config.beta2))

    return {name: one(params) for name, params in bundle.blocks().items()}


# --- one step ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    losses: dict
    grad_norms: dict = field(default_factory=dict)

    def row(self):
        return "\t".join([str(self.step)] + [repr(self.losses[k]) for k in LOSS_COLUMNS])


def _block_grads(grads, params, block):
    total = 0.0
    for p in params:
        g = grads.array(p)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {block}", where=block)
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def _loss_dict(losses):
    v = losses.values()
    return dict(zip(LOSS_COLUMNS, (v["d_x"], v["d_z"], v["d_xx"], v["g"], v["e"])))


def train_step(bundle, batch, config, rng, optimizers=None, next_batch=None, step=0):
    """One iteration: discriminators, then generator, then encoder.

    With ``critic_steps = k > 1`` the discriminators first take ``k - 1``
    updates on fresh batches from ``next_batch()``, then a final one on
    ``batch`` alongside the generator/encoder update.  All gradients of the
    final update are computed before any parameter moves, so a non-finite
    gradient aborts the step with every block untouched.
    """
    optimizers = optimizers or make_optimizers(bundle, config)
    blocks = bundle.blocks()
    game, aug = config.game_kind, config.augment
    norms = {}
    for _ in range(config.critic_steps - 1):
        if next_batch is None:
            raise ValueError("critic_steps > 1 needs a next_batch source")
        with T.Tape() as tape:
            extra = pagan_losses(bundle, next_batch(), rng, game, aug, generator_side=False)
        grads = tape.backward(extra.disc_total)
        for name in DISC_BLOCKS:
            _block_grads(grads, blocks[name], name)
        for name in DISC_BLOCKS:
            optimizers[name].step(grads)

    with T.Tape() as tape:
        losses: PaganLosses = pagan_losses(bundle, batch, rng, game, aug)
    d_grads = tape.backward(losses.disc_total)
    g_grads = tape.backward(losses.gen_total)
    for name in DISC_BLOCKS:
        norms[name] = _block_grads(d_grads, blocks[name], name)
    for name in GEN_BLOCKS:
        norms[name] = _block_grads(g_grads, blocks[name], name)
    for name in DISC_BLOCKS:
        optimizers[name].step(d_grads)
    for name in GEN_BLOCKS:
        optimizers[name].step(g_grads)
    return StepRecord(step, _loss_dict(losses), norms)


# --- checkpoints ---------------------------------------------------------------

MAGIC = b"PAGANCKP"
VERSION = 1
_HEAD = struct.Struct("<8sI32sI")  # magic, version, config hash, header length


@dataclass
class Checkpoint:
    state: dict
    optimizer_meta: dict
    optimizer_arrays: dict
    step: int
    rng_state: dict | None
    config_text: str
    config_hash: str


def save_checkpoint(bundle, path, *, optimizers=None, step=0, rng=None, config=None):
    """Write parameters, optimizer state, step, RNG state and config hash.

    Layout: fixed header (magic, version, sha256 of the config, JSON
    length), a JSON index, little-endian float32 payload, then a CRC32 of
    everything before it.
    """
    config = config or TrainConfig()
    arrays, index = [], []

    def add(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        index.append([name, list(arr.shape)])
        arrays.append(arr)

    for name, arr in bundle.state_arrays().items():
        add(name, arr)
    opt_meta = {}
    for block, opt in (optimizers or {}).items():
        meta, opt_arrays = opt.state()
        opt_meta[block] = dict(meta, kind=type(opt).__name__, count=len(opt_arrays))
        for i, arr in enumerate(opt_arrays):
            add(f"opt.{block}.{i}", arr)
    header = json.dumps({
        "step": int(step),
        "rng": rng.bit_generator.state if rng is not None else None,
        "config": config.to_text(),
        "optimizers": opt_meta,
        "arrays": index,
        "meta": {k: list(v) if isinstance(v, tuple) else v for k, v in bundle.meta.items()},
    }).encode()
    blob = (_HEAD.pack(MAGIC, VERSION, bytes.fromhex(config.hash()), len(header))
            + header + b"".join(a.tobytes() for a in arrays))
    blob += struct.pack("<I", zlib.crc32(blob))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_hash=None):
    """Parse and verify a checkpoint; nothing is returned unless every check passes."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size + 4:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, chash, hlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(blob[_HEAD.size:_HEAD.size + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable index: {exc}") from None
    config = config_from_text(header["config"])
    if config.hash() != chash.hex():
        raise FormatError(f"{path}: config hash does not match the embedded config")
    if expected_hash is not None and expected_hash != chash.hex():
        raise FormatError(f"{path}: checkpoint belongs to a different configuration")
    offset = _HEAD.size + hlen
    state, opt_arrays = {}, {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob) - 4:
            raise FormatError(f"{path}: payload ends inside array {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        (opt_arrays if name.startswith("opt.") else state)[name] = arr
        offset = end
    if offset != len(blob) - 4:
        raise FormatError(f"{path}: {len(blob) - 4 - offset} trailing payload bytes")
    return Checkpoint(state, header["optimizers"], opt_arrays, header["step"], header["rng"],
                      header["config"], chash.hex())


# --- the run driver -------------------------------------------------------------

def bundle_for(config, data_shape, rng):
    return build_bundle(data_shape, config.latent_dim, rng, width=config.width, depth=config.depth,
                        hidden=config.hidden_sizes, critic=config.game_kind.critic_head,
                        fusion=config.resolved_fusion)


class Trainer:
    """Owns the bundle, optimizers, RNG and the batch stream of one run."""

    def __init__(self, config, dataset):
        self.config = config
        self.dataset = dataset
        self.rng = np.random.default_rng(config.seed)
        self.bundle = bundle_for(config, dataset.items.shape[1:], self.rng)
        self.optimizers = make_optimizers(self.bundle, config)
        self.step = 0

    @classmethod
    def from_checkpoint(cls, path, dataset=None):
        from pagan.data import load_dataset

        ckpt = load_checkpoint(path)
        config = config_from_text(ckpt.config_text)
        trainer = cls(config, dataset if dataset is not None else load_dataset(config))
        return trainer.restore(ckpt)

    def next_batch(self):
        idx = self.rng.choice(len(self.dataset.items), size=self.config.batch_size, replace=False)
        return self.dataset.items[idx]

    def train_step(self):
        record = train_step(self.bundle, self.next_batch(), self.config, self.rng,
                            self.optimizers, self.next_batch, self.step)
        self.step += 1
        return record

    def save(self, path):
        return save_checkpoint(self.bundle, path, optimizers=self.optimizers, step=self.step,
                               rng=self.rng, config=self.config)

    def restore(self, ckpt):
        if isinstance(ckpt, (str, Path)):
            ckpt = load_checkpoint(ckpt, expected_hash=self.config.hash())
        elif ckpt.config_hash != self.config.hash():
            raise FormatError("checkpoint belongs to a different configuration")
        self.bundle.load_state_arrays(ckpt.state)
        for block, opt in self.optimizers.items():
            meta = ckpt.optimizer_meta.get(block)
            if meta is None:
                raise FormatError(f"checkpoint has no optimizer state for {block}")
            if meta["kind"] != type(opt).__name__:
                raise FormatError(f"optimizer kind mismatch for {block}: {meta['kind']}")
            opt.load_state(meta, [ckpt.optimizer_arrays[f"opt.{block}.{i}"]
                                  for i in range(meta["count"])])
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.step = int(ckpt.step)
        return self

    # evaluation uses its own RNG so it never perturbs the training stream
    def eval_rng(self, tag=0):
        return np.random.default_rng([self.config.seed, self.step, tag])

    def samples(self, n, rng=None):
        rng = rng or self.eval_rng(1)
        gen = self.bundle.generator
        z = rng.standard_normal((n, gen.latent_dim)).astype(np.float32)
        return np.concatenate([gen(z[i:i + 256]).data for i in range(0, n, 256)])

    def reconstruct(self, x):
        """G(mean of q(z|x)): the deterministic reconstruction."""
        out = []
        for i in range(0, len(x), 256):
            post = self.bundle.encoder(x[i:i + 256])
            out.append(self.bundle.generator(post.mu).data)
        return np.concatenate(out)

    def encode_samples(self, x, rng=None):
        from pagan.nets import sample_latent

        rng = rng or self.eval_rng(2)
        return np.concatenate([sample_latent(self.bundle.encoder(x[i:i + 256]), rng).data
                               for i in range(0, len(x), 256)])


def write_snapshots(trainer, run_dir):
    from pagan.data import interleave, write_image_grid, write_points

    step, items = trainer.step, trainer.dataset.items
    rng = trainer.eval_rng(0)
    if items.ndim == 2:
        write_points(trainer.samples(1000), run_dir / f"samples_{step}.txt")
        orig = items[rng.choice(len(items), min(200, len(items)), replace=False)]
        write_points(np.concatenate([orig, trainer.reconstruct(orig)], axis=1),
                     run_dir / f"recons_{step}.txt")
        return
    ext = "pgm" if items.shape[1] == 1 else "ppm"
    write_image_grid(trainer.samples(64), 8, run_dir / f"samples_{step}.{ext}")
    orig = items[rng.choice(len(items), min(32, len(items)), replace=False)]
    write_image_grid(interleave(orig, trainer.reconstruct(orig)), 16, run_dir / f"recons_{step}.{ext}")


def final_report(trainer, n_eval=None):
    """MetricReport on held-out style samples; probe depends on the dataset."""
    from pagan.augment import AugmentConfig
    from pagan.data import RingClassifier
    from pagan.metrics import ProbeConfig, evaluate, train_probe_classifier

    cfg, ds = trainer.config, trainer.dataset
    rng = trainer.eval_rng(3)
    n = min(len(ds.items), n_eval or 2000)
    orig = ds.items[rng.choice(len(ds.items), n, replace=False)]
    if ds.name == "ring":
        probe = RingClassifier.for_config(cfg)
    else:
        # the probe always trains with the default augmenter, whatever the run's pad
        probe = train_probe_classifier(ds.items, ds.labels,
                                       ProbeConfig(epochs=cfg.probe_epochs, seed=cfg.seed,
                                                   augment=AugmentConfig(rng_seed=cfg.seed)))
    splits = 10 if n >= 10 else 1
    return evaluate(probe, orig, trainer.reconstruct(orig), trainer.samples(n, rng), splits)


@dataclass
class RingDiagnostics:
    """Mode coverage of generator samples and moments of the encoder marginal."""

    fractions: np.ndarray
    covered: int
    z_mean: np.ndarray
    z_cov: np.ndarray

    def passes(self, min_modes=7, mean_tol=0.2, cov_tol=0.3):
        eye = np.eye(len(self.z_mean))
        return bool(self.covered >= min_modes and np.all(np.abs(self.z_mean) < mean_tol)
                    and np.all(np.abs(self.z_cov - eye) < cov_tol))

    def lines(self):
        fmt = lambda a: " ".join(f"{v:.4f}" for v in np.ravel(a))
        return [f"modes_covered={self.covered}", f"mode_fractions={fmt(self.fractions)}",
                f"z_mean={fmt(self.z_mean)}", f"z_cov={fmt(self.z_cov)}"]


def ring_diagnostics(trainer, n=10000):
    """Coverage of ``n`` generator samples; q(z) moments from one draw per data point."""
    from pagan.data import GaussianRingSpec, mode_coverage

    cfg = trainer.config
    spec = GaussianRingSpec(cfg.ring_modes, cfg.ring_radius, cfg.ring_std)
    fractions, covered = mode_coverage(trainer.samples(n), spec)
    z = trainer.encode_samples(trainer.dataset.items).astype(np.float64)
    return RingDiagnostics(fractions, covered, z.mean(axis=0), np.atleast_2d(np.cov(z.T)))


def _write_manifest(run_dir, values):
    with open(run_dir / "manifest.txt", "w") as f:
        for k, v in values.items():
            f.write(f"{k}={v}\n")


def train(config, out_dir, dataset=None, resume=None):
    """Run ``config.steps`` iterations, writing the run directory ``out_dir``.

    Stops early (``status=diverged`` in ``manifest.txt``) if any loss leaves
    the finite range or exceeds the divergence threshold.
    """
    from pagan.data import load_dataset

    run_dir = Path(out_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_text())
    except OSError as exc:
        raise OSError(f"cannot write run directory {run_dir}: {exc}") from exc
    dataset = dataset if dataset is not None else load_dataset(config)
    trainer = Trainer(config, dataset)
    if resume is not None:
        trainer.restore(resume)
    start = time.perf_counter()
    status, reason = "completed", ""
    if config.steps == 0:
        trainer.save(run_dir / "ckpt_0.bin")
        _write_manifest(run_dir, dict(status=status, steps=0, config_hash=config.hash()))
        return run_dir
    losses_path = run_dir / "losses.tsv"
    mode = "a" if resume is not None and losses_path.exists() else "w"
    with open(losses_path, mode) as losses_file:
        if mode == "w":
            losses_file.write("\t".join(("step",) + LOSS_COLUMNS) + "\n")
        while trainer.step < config.steps:
            try:
                record = trainer.train_step()
            except NumericError as exc:
                status, reason = "diverged", str(exc)
                break
            losses_file.write(record.row() + "\n")
            worst = max(abs(v) for v in record.losses.values())
            if not np.isfinite(worst) or worst > DIVERGENCE_THRESHOLD:
                status, reason = "diverged", f"loss magnitude {worst!r} at step {record.step}"
                break
            if config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                trainer.save(run_dir / f"ckpt_{trainer.step}.bin")
            if config.eval_every and trainer.step % config.eval_every == 0:
                write_snapshots(trainer, run_dir)
    if status == "completed" and not (config.checkpoint_every
                                      and trainer.step % config.checkpoint_every == 0):
        trainer.save(run_dir / f"ckpt_{trainer.step}.bin")
    seconds = time.perf_counter() - start
    if status == "completed" and config.final_metrics:
        final_report(trainer).write(run_dir / "metrics.txt")
        if trainer.dataset.name == "ring":
            (run_dir / "ring.txt").write_text("\n".join(ring_diagnostics(trainer).lines()) + "\n")
    if status == "diverged":
        log.warning("run diverged: %s", reason)
    _write_manifest(run_dir, dict(status=status, diverged=str(status == "diverged").lower(),
                                  steps=trainer.step, seconds=f"{seconds:.3f}",
                                  reason=reason, config_hash=config.hash()))
    return run_dir
