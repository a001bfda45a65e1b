"""Training loop: one forward/backward per pair, three Adam optimizers.

Checkpoints are a JSON manifest plus a flat little-endian float32 payload;
the payload holds the parameters followed by the optimizer moments.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import LossBreakdown, NonFiniteComponentError, total_loss
from .model import FireModel, ModelConfig, forward_pair
from .optim import Adam, AdamState
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CKPT_VERSION = 1
TRACE_HEADER = [
    "iter", "total", "syn_acc", "syn_fea", "syn_cyc", "syn_align",
    "reg_acc", "reg_ic", "r_syn", "r_reg", "r_smooth", "lambda",
]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, iteration: int | None = None):
        self.component = component
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite loss{where}: first offending component is {component}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    iters: int = 2000
    lr_taf: float = 1e-5
    lr_tnr: float = 5e-5
    lr_gf: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 500
    validate_every: int = 0
    val_fraction: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if min(self.lr_taf, self.lr_tnr, self.lr_gf) < 0:
            raise ValueError("learning rates must be non-negative")

    def learning_rates(self) -> dict[str, float]:
        return {"taf": self.lr_taf, "tnr": self.lr_tnr, "gf": self.lr_gf}

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizers(model: FireModel, config: TrainConfig) -> dict[str, Adam]:
    lrs = config.learning_rates()
    return {name: Adam(group, lrs[name]) for name, group in model.groups().items()}


def _pair_arrays(pair, dtype):
    out = []
    for item in pair:
        arr = item.image if hasattr(item, "image") else getattr(item, "data", item)
        out.append(Tensor(np.asarray(arr, dtype=dtype), dtype=dtype))
    return out


def train_step(model: FireModel, pair, optimizers: dict[str, Adam]) -> LossBreakdown:
    """One joint update; returns the breakdown measured before the update."""
    x_a, x_b = _pair_arrays(pair, model.config.dtype)
    model.zero_grad()
    try:
        bundle = forward_pair(x_a, x_b, model)
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"forward pass ({exc})") from exc
    try:
        loss, parts = total_loss(bundle)
    except NonFiniteComponentError as exc:
        raise NonFiniteLossError(exc.component) from exc
    except FloatingPointError as exc:
        raise NonFiniteLossError(f"total ({exc})") from exc
    bad = parts.first_non_finite()
    if bad is not None:
        raise NonFiniteLossError(bad)
    backward(loss)
    for opt in optimizers.values():
        opt.step()
    return parts


def evaluate_loss(model: FireModel, pair) -> LossBreakdown:
    with no_grad():
        x_a, x_b = _pair_arrays(pair, model.config.dtype)
        return total_loss(forward_pair(x_a, x_b, model))[1]


# -- checkpoints ------------------------------------------------------------------
def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _stem(path) -> Path:
    p = Path(path)
    for suffix in (".ckpt.json", ".ckpt.f32", ".ckpt"):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(
    model: FireModel,
    path,
    iteration: int = 0,
    optimizers: dict[str, Adam] | None = None,
) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    chunks, entries, offset = [], [], 0
    for name, p in model.params.items():
        buf = p.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    opt_meta = {}
    for group, opt in (optimizers or {}).items():
        st = opt.state
        moments = []
        for name in opt.params:
            if name not in st.m:
                continue
            moments.append({"name": name, "m_offset": offset, "v_offset": offset + st.m[name].nbytes})
            for buf in (st.m[name], st.v[name]):
                b = buf.astype("<f4").tobytes()
                chunks.append(b)
                offset += len(b)
        opt_meta[group] = {
            "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
            "step": st.step, "moments": moments,
        }
    manifest = {
        "version": CKPT_VERSION,
        "iteration": int(iteration),
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "payload_bytes": offset,
        "params": entries,
        "optimizers": opt_meta,
    }
    _atomic_write(stem.with_name(stem.name + ".ckpt.f32"), b"".join(chunks))
    head = stem.with_name(stem.name + ".ckpt.json")
    _atomic_write(head, json.dumps(manifest, indent=1).encode())
    return head


def read_checkpoint(path):
    """Returns (model, iteration, optimizer states by group)."""
    stem = _stem(path)
    head = stem.with_name(stem.name + ".ckpt.json")
    try:
        manifest = json.loads(head.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {head}: {exc}") from exc
    if manifest.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{head}: unsupported checkpoint version {manifest.get('version')}")
    cfg = ModelConfig(**manifest["config"])
    if config_hash(cfg) != manifest.get("config_hash"):
        raise CheckpointError(f"{head}: config hash mismatch")
    try:
        payload = stem.with_name(stem.name + ".ckpt.f32").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint payload: {exc}") from exc
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{head}: payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']}"
        )

    def chunk(offset, shape):
        count = int(np.prod(shape))
        return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)

    dtype = cfg.dtype
    params = {}
    for e in manifest["params"]:
        arr = chunk(e["offset"], tuple(e["shape"])).astype(dtype)
        params[e["name"]] = Tensor(arr, requires_grad=True, dtype=dtype)
    model = FireModel(cfg, params)
    reference = FireModel.initialize(cfg, seed=0)
    if set(reference.params) != set(params):
        raise CheckpointError(f"{head}: parameter names do not match the model architecture")
    states = {}
    for group, meta in manifest.get("optimizers", {}).items():
        st = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
                       step=meta["step"])
        for e in meta["moments"]:
            shape = params[e["name"]].shape
            st.m[e["name"]] = chunk(e["m_offset"], shape).astype(dtype)
            st.v[e["name"]] = chunk(e["v_offset"], shape).astype(dtype)
        states[group] = st
    return model, manifest["iteration"], states


def load_checkpoint(path) -> FireModel:
    return read_checkpoint(path)[0]


# -- training loop ----------------------------------------------------------------
def _format_row(it: int, parts: LossBreakdown) -> list[str]:
    row = parts.as_row()
    return [str(it)] + [f"{row[k]:.10f}" for k in TRACE_HEADER[1:]]


def split_dataset(pairs: Sequence, fraction: float, seed: int):
    n = len(pairs)
    n_val = int(round(n * fraction)) if fraction > 0 else 0
    if n_val >= n:
        n_val = n - 1
    order = np.random.default_rng([seed, 7]).permutation(n)
    val = [pairs[i] for i in sorted(order[:n_val])]
    train = [pairs[i] for i in sorted(order[n_val:])]
    return train, val


def pick_pair(n: int, seed: int, iteration: int) -> int:
    """Pair index for an iteration; independent of earlier draws so resume is exact."""
    return int(np.random.default_rng([seed, iteration]).integers(n))


def train(
    dataset: Sequence,
    config: TrainConfig,
    out_dir,
    resume_from=None,
    model: FireModel | None = None,
):
    """Train and write ``trace.csv`` plus ``model.ckpt.*`` into ``out_dir``.

    ``dataset`` is a sequence of (A, B) pairs given as arrays or Volumes.
    Returns (model, path to trace).
    """
    if len(dataset) < 1:
        raise ValueError("training needs at least one pair")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_pairs, val_pairs = split_dataset(list(dataset), config.val_fraction, config.seed)
    ckpt_path = out_dir / "model"
    trace_path = out_dir / "trace.csv"

    start = 0
    if resume_from is not None:
        model, done, states = read_checkpoint(resume_from)
        optimizers = make_optimizers(model, config)
        for group, st in states.items():
            optimizers[group].state = st
        start = done
    else:
        model = model or FireModel.initialize(config.model, seed=config.seed)
        optimizers = make_optimizers(model, config)

    mode = "a" if resume_from is not None and trace_path.exists() else "w"
    with open(trace_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(TRACE_HEADER)
        val_writer = None
        for it in range(start, config.iters):
            pair = train_pairs[pick_pair(len(train_pairs), config.seed, it)]
            try:
                parts = train_step(model, pair, optimizers)
            except NonFiniteLossError as exc:
                exc.iteration = it
                raise
            writer.writerow(_format_row(it, parts))
            fh.flush()
            done = it + 1
            if config.validate_every and val_pairs and done % config.validate_every == 0:
                if val_writer is None:
                    vf = open(out_dir / "val_trace.csv", "a", newline="")
                    val_writer = csv.writer(vf)
                vals = [evaluate_loss(model, p).total for p in val_pairs]
                val_writer.writerow([done, f"{np.mean(vals):.10f}"])
                vf.flush()
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.iters:
                save_checkpoint(model, ckpt_path, done, optimizers)
            if done % 100 == 0:
                log.info("iter %d total %.4f", done, parts.total)
        if val_writer is not None:
            vf.close()
    save_checkpoint(model, ckpt_path, config.iters, optimizers)
    return model, trace_path
