"""Parameter storage, Adam, seeded randomness and finite-difference checking.

Tensors are torch tensors; reverse-mode gradients come from torch autograd.
Everything a trainable module owns lives in a :class:`ParamStore` under a
dotted name, so optimizers, gradient checks and checkpoints treat every
module the same way.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch


class FrozenParameterError(RuntimeError):
    """Raised when an optimizer is handed a store with nothing to train."""


class RngStream:
    """A seeded random stream; identical seed and call sequence give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.position = 0

    def _tick(self, n: int = 1) -> None:
        self.position += n

    def integers(self, low, high=None, size=None):
        self._tick()
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        self._tick()
        return self._gen.random(size)

    def normal(self, size=None):
        self._tick()
        return self._gen.standard_normal(size)

    def uniform(self, low, high, size=None):
        self._tick()
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        self._tick()
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        self._tick()
        return self._gen.choice(a, size=size, replace=replace)

    def spawn(self, label: str) -> "RngStream":
        """Derive an independent child stream keyed by ``label``."""
        return RngStream((self.seed * 1_000_003 + zlib.crc32(label.encode("utf8"))) % (2**63))

    def torch_generator(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(int(self.integers(0, 2**62)))
        return gen


def xavier_uniform(rng: RngStream, fan_out: int, fan_in: int, dtype=torch.float64) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), dtype=dtype)


def scaled_normal(rng: RngStream, rows: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(rng.normal(size=(rows, dim)) / math.sqrt(dim), dtype=dtype)


@dataclass
class _Entry:
    value: torch.Tensor
    trainable: bool
    m: torch.Tensor | None = None
    v: torch.Tensor | None = None


@dataclass
class ParamStore:
    """Named tensors with trainable flags, gradients and Adam moment buffers."""

    dtype: torch.dtype = torch.float64
    _entries: dict = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already present")
        t = torch.as_tensor(value).detach().clone().to(self.dtype)
        t.requires_grad_(trainable)
        self._entries[name] = _Entry(t, trainable)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    keys = names

    def items(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, e.value) for n, e in self._entries.items()]

    def trainable_names(self) -> list[str]:
        return [n for n, e in self._entries.items() if e.trainable]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def set_trainable(self, prefix: str, flag: bool) -> None:
        """Toggle every entry whose name starts with ``prefix``."""
        for name, e in self._entries.items():
            if name.startswith(prefix):
                e.trainable = flag
                e.value.requires_grad_(flag)
                if not flag:
                    e.value.grad = None

    def freeze(self) -> "ParamStore":
        self.set_trainable("", False)
        return self

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Entries under ``prefix`` with the prefix stripped (shared storage)."""
        n = len(prefix)
        return {k[n:]: e.value for k, e in self._entries.items() if k.startswith(prefix)}

    def absorb(self, other: "ParamStore", prefix: str, trainable: bool | None = None) -> None:
        """Copy every entry of ``other`` in under ``prefix``."""
        for name, e in other._entries.items():
            flag = e.trainable if trainable is None else trainable
            self.add(prefix + name, e.value.detach(), trainable=flag)

    def grads(self) -> dict[str, torch.Tensor | None]:
        return {n: e.value.grad for n, e in self._entries.items()}

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.value.grad = None

    def clone(self) -> "ParamStore":
        out = ParamStore(dtype=self.dtype, step_count=self.step_count)
        for name, e in self._entries.items():
            out.add(name, e.value.detach(), trainable=e.trainable)
            if e.m is not None:
                out._entries[name].m = e.m.clone()
                out._entries[name].v = e.v.clone()
        return out

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {n: e.value.detach().cpu().numpy().astype(np.float64) for n, e in self._entries.items()}

    def assert_finite(self) -> None:
        for n, e in self._entries.items():
            if not torch.isfinite(e.value).all():
                raise FloatingPointError(f"non-finite values in {n}")


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, t: int | None = None,
              lr_scale: Mapping[str, float] | None = None) -> ParamStore:
    """One bias-corrected Adam update on the trainable entries of ``store``.

    ``t`` defaults to the store's own step counter plus one. Moment buffers are
    kept on the store entries. ``lr_scale`` maps name prefixes to learning-rate
    multipliers; the longest matching prefix wins.
    """
    scales = sorted((lr_scale or {}).items(), key=lambda kv: -len(kv[0]))
    trainable = [(n, e) for n, e in store._entries.items() if e.trainable]
    if not trainable:
        raise FrozenParameterError("store has no trainable parameters")
    if t is None:
        t = store.step_count + 1
    if t < 1:
        raise ValueError("adam step count must be >= 1")
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    with torch.no_grad():
        for name, e in trainable:
            g = e.value.grad
            if g is None:
                raise ValueError(f"missing gradient for trainable parameter {name!r}")
            if e.m is None:
                e.m = torch.zeros_like(e.value)
                e.v = torch.zeros_like(e.value)
            e.m.mul_(b1).add_(g, alpha=1.0 - b1)
            e.v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = e.m / bc1
            v_hat = e.v / bc2
            step = lr * next((f for prefix, f in scales if name.startswith(prefix)), 1.0)
            e.value.sub_(step * m_hat / (v_hat.sqrt() + eps))
    store.step_count = t
    return store


def backward(store: ParamStore, loss: torch.Tensor) -> None:
    """Populate gradients of ``loss``; trainable entries with no path get zeros."""
    store.zero_grad()
    if loss.requires_grad:
        loss.backward()
    for e in store._entries.values():
        if e.trainable and e.value.grad is None:
            e.value.grad = torch.zeros_like(e.value)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def grad_check(fn: Callable[[ParamStore], torch.Tensor], store: ParamStore, eps: float = 1e-6,
               names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    The relative error per element uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator; the report keeps the worst element per parameter. Frozen
    entries are skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    store.zero_grad()
    loss = fn(store)
    loss.backward()
    analytic = {}
    for n in store.trainable_names():
        g = store[n].grad
        analytic[n] = torch.zeros_like(store[n]) if g is None else g.detach().clone()
    store.zero_grad()

    selected = store.trainable_names() if names is None else [n for n in names if store.is_trainable(n)]
    report = {}
    with torch.no_grad():
        for n in selected:
            p = store[n]
            flat = p.view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn(store))
                flat[i] = orig - eps
                f_minus = float(fn(store))
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise FloatingPointError(f"non-finite loss when perturbing {n}[{i}]")
                numeric = (f_plus - f_minus) / (2 * eps)
                a = analytic[n].view(-1)[i].item()
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
            report[n] = worst
    return GradCheckReport(report)


def save_archive(path: str | Path, tensors: Mapping[str, object], meta: dict | None = None,
                 trainable: Mapping[str, bool] | None = None) -> Path:
    """Write ``tensors`` as a directory holding ``tensors.bin`` and ``manifest.json``.

    Buffers are little-endian float64, concatenated in manifest order.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "tensors.bin", "wb") as fh:
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
            raw = arr.tobytes()
            fh.write(raw)
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "trainable": bool(trainable.get(name, False)) if trainable else False,
            })
            offset += len(raw)
    manifest = {"format": "kestance-archive-1", "dtype": "<f8", "tensors": entries, "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict[str, bool]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "tensors.bin").read_bytes()
    tensors, flags = {}, {}
    for e in manifest["tensors"]:
        buf = raw[e["offset"]: e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
        flags[e["name"]] = e.get("trainable", False)
    return tensors, manifest.get("meta", {}), flags


def save_store(path, store: ParamStore, meta: dict | None = None) -> Path:
    return save_archive(path, store.to_numpy(), meta,
                        {n: store.is_trainable(n) for n in store.names()})


def load_store(path, dtype=torch.float64) -> tuple[ParamStore, dict]:
    tensors, meta, flags = load_archive(path)
    store = ParamStore(dtype=dtype)
    for name, arr in tensors.items():
        store.add(name, torch.from_numpy(arr), trainable=flags[name])
    return store, meta
