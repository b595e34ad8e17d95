"""Benchmark, training, streaming evaluation and recall experiments.

Each experiment returns plain rows (lists of dicts); ``write_csv`` adds the
provenance header. The CLI in ``gecko.cli`` is a thin wrapper over these.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import attention as attn
from .checkpoint import content_hash, save_checkpoint
from .data import DataError, PasskeyTask, documents, passkey_logits, passkey_loss, random_windows
from .model import GeckoLM, ModelConfig, lm_loss, stream_score
from .numerics import count_macs, generator
from .optim import OptimConfig, make_optimizer, train_step


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    task: str = "lm"  # lm | passkey
    batch: int = 8
    seq_len: int = 256
    log_every: int = 10
    stop_nll: float | None = None  # stop once the last 10 losses average below this
    passkey_keys: int = 16
    passkey_chunks: int = 10

    def __post_init__(self):
        if self.task not in ("lm", "passkey"):
            raise ConfigError(f"unknown training task {self.task!r}")
        if self.batch < 1 or self.seq_len < 2:
            raise ConfigError("batch must be >= 1 and seq_len >= 2")


@dataclass
class RunConfig:
    """Everything needed to reproduce an output file."""

    command: str
    args: dict = field(default_factory=dict)
    model: dict | None = None
    optim: dict | None = None
    train: dict | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def load_config(path):
    """Parse a JSON config with ``model``, ``optim`` and ``train`` sections.

    Top-level keys that name a model field are accepted too, so a flat file
    of model fields works.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: config file not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    raw = dict(raw)
    model = dict(raw.pop("model", {}))
    optim = dict(raw.pop("optim", {}))
    train = dict(raw.pop("train", {}))
    model.update(raw)
    try:
        return ModelConfig.from_dict(model), OptimConfig.from_dict(optim), TrainConfig(**train)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


# ------------------------------------------------------------------ csv


def write_csv(path, rows, run: RunConfig, checkpoint_hash: str | None = None, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# run: {run.to_json()}\n")
        f.write(f"# checkpoint: {checkpoint_hash or 'none'}\n")
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_csv(path):
    """Rows of a CSV written by ``write_csv`` (comment lines skipped)."""
    with open(path, newline="", encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_header(path):
    """The ``(run, checkpoint_hash)`` stored in a CSV's comment header."""
    run = ckpt = None
    with open(path, encoding="utf-8") as f:
        for ln in f:
            if not ln.startswith("#"):
                break
            if ln.startswith("# run: "):
                run = json.loads(ln[len("# run: "):])
            elif ln.startswith("# checkpoint: "):
                ckpt = ln[len("# checkpoint: "):].strip()
    return run, ckpt


# ------------------------------------------------------------------ bench


def _pattern_fn(pattern, c):
    if pattern == "sca":
        return lambda q, k, v: attn.attend_sliding_chunk(q, k, v, c)[0]
    if pattern == "chunk":
        return lambda q, k, v: attn.attend_chunkwise(q, k, v, c)
    if pattern == "swa":
        return lambda q, k, v: attn.attend_sliding_window(q, k, v, c)
    raise ConfigError(f"unknown attention pattern {pattern!r}")


def analytic_macs(pattern, n, c, z, v):
    if pattern == "sca":
        return attn.sca_macs(n, c, z, v)
    if pattern == "chunk":
        return attn.chunkwise_macs(n, c, z, v)
    return attn.swa_macs(n, c, z, v)


def state_bytes(pattern, c, z, v, itemsize=4):
    """Bytes a stream must carry between chunks for this pattern."""
    if pattern == "chunk":
        return 0
    return c * (z + v) * itemsize  # one chunk (or window) of keys and values


def bench(patterns, lengths, chunk=64, dim=128, zdim=128, vdim=256, repeats=5, seed=0):
    """Time each attention pattern at each length; one row per pair."""
    if repeats < 5:
        raise ConfigError("bench needs at least 5 repeats")
    rows = []
    for pattern in patterns:
        fn = _pattern_fn(pattern, chunk)
        for n in lengths:
            g = generator(seed)
            q = torch.randn(1, n, zdim, generator=g)
            k = torch.randn(1, n, zdim, generator=g)
            v = torch.randn(1, n, vdim, generator=g)
            note = "" if n % chunk == 0 else f"padded to {-(-n // chunk) * chunk}"
            with torch.no_grad():
                with count_macs() as counter:
                    fn(q, k, v)  # warm-up, also the instrumented run
                expected = analytic_macs(pattern, n, chunk, zdim, vdim)
                if counter.count != expected:
                    raise RuntimeError(
                        f"{pattern} n={n}: counted {counter.count} multiply-adds, "
                        f"formula gives {expected}")
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    fn(q, k, v)
                    times.append(time.perf_counter_ns() - t0)
            rows.append({
                "pattern": pattern, "seq_len": n, "chunk": chunk, "dim": dim,
                "zdim": zdim, "vdim": vdim, "repeats": repeats,
                "median_ns": int(statistics.median(times)), "min_ns": min(times),
                "macs": expected, "counted_macs": counter.count,
                "state_bytes": state_bytes(pattern, chunk, zdim, vdim), "note": note,
            })
            del q, k, v
    return rows


def linear_fit(xs, ys):
    """Least-squares slope, intercept and R^2."""
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    icpt = my - slope * mx
    ss_res = sum((y - (slope * x + icpt)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    return slope, icpt, 1 - ss_res / ss_tot if ss_tot else 1.0


# ------------------------------------------------------------------ train


def train(cfg: ModelConfig, ocfg: OptimConfig, tcfg: TrainConfig, data, steps: int, seed: int,
          callback=None):
    """Train a fresh model. Returns ``(model, metrics_rows)``.

    ``data`` is a 1-D token tensor (ignored by the passkey task). The model
    is initialized from ``seed`` and batches are drawn from ``seed`` too, so
    a run is reproducible bit for bit on one thread.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "seed": seed})
    ocfg = OptimConfig.from_dict({**ocfg.to_dict(), "total_steps": steps})
    torch.manual_seed(seed)
    model = GeckoLM(cfg)
    opt, sched = make_optimizer(model, ocfg)
    g = generator(seed + 1)
    task = None
    if tcfg.task == "passkey":
        task = PasskeyTask(cfg.chunk, tcfg.passkey_keys, cfg.vocab, tcfg.passkey_chunks)
    elif data is None or data.numel() < tcfg.seq_len + 1:
        raise DataError(f"training data needs at least {tcfg.seq_len + 1} tokens")
    rows, recent = [], []
    for step in range(steps):
        if task is None:
            batch = random_windows(data, tcfg.batch, tcfg.seq_len + 1, g)
            loss_fn = lambda: lm_loss(model, batch)  # noqa: E731
        else:
            tok, qpos, ans = task.sample_training(tcfg.batch, g)
            loss_fn = lambda: passkey_loss(model, tok, qpos, ans, task.keys)  # noqa: E731
        m = train_step(model, opt, sched, loss_fn, step, ocfg.clip)
        recent = (recent + [m["loss"]])[-10:]
        done = tcfg.stop_nll is not None and len(recent) == 10 and sum(recent) / 10 < tcfg.stop_nll
        if step % tcfg.log_every == 0 or step == steps - 1 or done:
            rows.append(m)
            if callback:
                callback(m)
        if done:
            break
    return model, rows


def save_trained(model, path, tcfg: TrainConfig):
    save_checkpoint(model, path, extra={"train": asdict(tcfg)})
    return content_hash(path)


# ------------------------------------------------------------------ eval


@torch.no_grad()
def eval_stream(model: GeckoLM, data, max_len: int, buckets, batch: int = 16, boundary: int = 4):
    """Stream documents chunk by chunk and collect per-position NLL.

    Returns ``(position_rows, bucket_rows, summary)``. ``position_rows`` has
    exactly ``max_len`` rows; position 0 has no prediction and is empty.
    ``summary`` holds the boundary ratio: mean NLL over the first
    ``boundary`` positions of every chunk after the first, divided by the
    mean over the remaining positions after the first chunk.
    """
    c = model.cfg.chunk
    if max_len % c:
        raise ConfigError(f"max_len {max_len} is not a multiple of the chunk size {c}")
    if any(b > max_len or b < 2 for b in buckets):
        raise ConfigError("buckets must lie in [2, max_len]")
    docs, skipped = documents(data, max_len, c)
    if not docs:
        raise DataError("no document holds a full chunk")
    total = torch.zeros(max_len, dtype=torch.float64)
    count = torch.zeros(max_len, dtype=torch.float64)
    by_len = {}
    for d in docs:
        by_len.setdefault(d.numel(), []).append(d)
    for n, group in sorted(by_len.items()):
        for lo in range(0, len(group), batch):
            tokens = torch.stack(group[lo : lo + batch])
            state = model.initial_state(tokens.shape[0])
            for s in range(0, n, c):
                nll, state = stream_score(model, state, tokens[:, s : s + c])
                total[s : s + c] += torch.nan_to_num(nll.double()).sum(0)
                count[s : s + c] += torch.isfinite(nll).sum(0).double()
    mean = total / count.clamp_min(1)
    pos_rows = [{"position": i, "nll": (float(mean[i]) if count[i] else ""), "count": int(count[i])}
                for i in range(max_len)]
    bucket_rows = []
    for b in buckets:
        tok = float(count[:b].sum())
        nll = float(total[:b].sum()) / tok if tok else float("nan")
        bucket_rows.append({"context": b, "tokens": int(tok), "nll": nll, "ppl": math.exp(nll)})
    pos = torch.arange(max_len)
    later = (pos >= c) & (count > 0)
    head = later & (pos % c < boundary)
    tail = later & (pos % c >= boundary)
    ratio = float("nan")
    if head.any() and tail.any():
        ratio = float((total[head].sum() / count[head].sum()) / (total[tail].sum() / count[tail].sum()))
    all_nll = float(total.sum() / count.sum())
    summary = {"documents": len(docs), "skipped": skipped, "boundary_ratio": ratio, "mean_nll": all_nll}
    return pos_rows, bucket_rows, summary


# ------------------------------------------------------------------ recall


@torch.no_grad()
def recall(model: GeckoLM, distances, trials: int, keys: int = 16, context_chunks: int = 10,
           seed: int = 1234, batch: int = 50):
    """Passkey accuracy for keys planted ``distance`` chunks before the query.

    Each row reports exact-match accuracy of the arg-max over the key
    alphabet; chance is ``1/keys``.
    """
    c = model.cfg.chunk
    task = PasskeyTask(c, keys, model.cfg.vocab, context_chunks)
    rows = []
    for dist in distances:
        # distance 0 plants the key half a chunk back, inside the attention window
        tokens = dist * c if dist > 0 else max(1, c // 2)
        if dist < 0 or tokens > task.max_distance:
            raise ConfigError(f"distance {dist} chunks is outside the task context")
        g = generator(seed + dist)
        hits = 0
        for lo in range(0, trials, batch):
            b = min(batch, trials - lo)
            tok, qpos, ans = task.sample(b, tokens, g)
            hits += int((passkey_logits(model, tok, qpos, keys).argmax(-1) == ans).sum())
        rows.append({"distance_chunks": dist, "distance_tokens": tokens, "trials": trials,
                     "accuracy": hits / trials, "chance": 1 / keys})
    return rows


def input_influence(model: GeckoLM, tokens):
    """Gradient norm of the last position's logits w.r.t. each input embedding.

    Returns a (n,) tensor; entry ``i`` is zero iff token ``i`` cannot affect
    the final prediction through any differentiable path.
    """
    emb = model.embed[tokens].detach().requires_grad_(True)
    x = emb
    state = model.initial_state(tokens.shape[0])
    for block, ls in zip(model.blocks, state.layers):
        x, _ = block(x, ls, 0)
    x, _ = model.final_norm(x, state.final_norm)
    logits = x[:, -1] @ model._head()
    (g,) = torch.autograd.grad(logits.sum(), emb)
    return g.abs().sum((0, 2))
