"""Run configuration: an INI file, typed defaults and ``--key=value`` overrides.

Every key lives in a section; overrides name it as ``section.key``. A few
frequently used keys also have bare aliases (``--seed``, ``--variant``,
``--output-dir``).
"""
from __future__ import annotations

import configparser
import io
import os
from pathlib import Path
from typing import Iterable, Mapping

from .stance import ModelVariant

OUTPUT_ENV = "KESTANCE_OUTPUT_DIR"
DEFAULT_OUTPUT = "kestance-out"


class ConfigError(ValueError):
    """Raised with the offending ``section.key`` as ``key``."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _opt_str(text: str) -> str | None:
    return text.strip() or None


def _choice(*options: str):
    def parse(text: str) -> str:
        if text.strip().lower() not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text.strip().lower()
    return parse


# (section, key) -> (parser, default); a default of None means "unset"
SCHEMA: dict[tuple[str, str], tuple] = {
    ("run", "seed"): (int, 42),
    ("run", "profile"): (_choice("toy", "default"), "default"),
    ("paths", "output_dir"): (_opt_str, None),
    ("paths", "kg"): (_opt_str, None),
    ("paths", "kg_features"): (_opt_str, None),
    ("paths", "pos_tags"): (_opt_str, None),
    ("paths", "seeds"): (_opt_str, None),
    ("paths", "train"): (_opt_str, None),
    ("paths", "dev"): (_opt_str, None),
    ("paths", "test"): (_opt_str, None),
    ("paths", "lexicon"): (_opt_str, None),
    ("paths", "corpus"): (_opt_str, None),
    ("paths", "vocab"): (_opt_str, None),
    ("paths", "sentiment_encoder"): (_opt_str, None),
    ("paths", "model"): (_opt_str, None),
    ("paths", "predictions"): (_opt_str, None),
    ("model", "variant"): (_choice("bs-rgcn", "bs", "b-rgcn", "s-rgcn"), "bs-rgcn"),
    ("model", "d_model"): (int, None),
    ("model", "n_blocks"): (int, None),
    ("model", "n_heads"): (int, None),
    ("model", "d_ff"): (int, None),
    ("model", "max_len"): (int, None),
    ("model", "dropout"): (float, None),
    ("model", "fusion_heads"): (int, None),
    ("model", "fusion_queries"): (_choice("concat", "context"), None),
    ("optim", "lr"): (float, None),
    ("optim", "batch_size"): (int, None),
    ("optim", "epochs"): (int, None),
    ("optim", "recon_weight"): (float, None),
    ("optim", "encoder_lr_scale"): (float, None),
    ("kgae", "dim"): (int, None),
    ("kgae", "epochs"): (int, None),
    ("kgae", "lr"): (float, None),
    ("kgae", "edge_keep"): (float, None),
    ("kgae", "heldout_frac"): (float, None),
    ("kgae", "inverse_relations"): (_bool, None),
    ("sentiment", "epochs"): (int, None),
    ("sentiment", "batch_size"): (int, None),
    ("sentiment", "lr"): (float, None),
    ("sentiment", "p_sent"): (float, None),
    ("sentiment", "p_gen"): (float, None),
    ("extract", "format"): (_choice("tsv", "conceptnet"), "tsv"),
    ("extract", "mode"): (_choice("incident", "vicinity"), "incident"),
    ("extract", "language"): (str, "en"),
    ("extract", "strict"): (_bool, False),
    ("ablation", "percents"): (_floats, (10.0, 25.0, 50.0, 75.0, 100.0)),
    ("ablation", "mode"): (_choice("concepts", "edges"), "concepts"),
    ("synthetic", "n_train"): (int, None),
    ("synthetic", "n_dev"): (int, None),
    ("synthetic", "n_test"): (int, None),
    ("synthetic", "n_corpus"): (int, None),
}

ALIASES = {"seed": "run.seed", "variant": "model.variant", "output-dir": "paths.output_dir",
           "output_dir": "paths.output_dir", "profile": "run.profile"}


class RunConfig:
    """Validated values keyed by ``section.key``."""

    def __init__(self, values: Mapping[str, object], base_dir: Path):
        self._values = dict(values)
        self.base_dir = base_dir

    def __getitem__(self, key: str):
        return self._values[key]

    def get(self, key: str, fallback=None):
        value = self._values.get(key)
        return fallback if value is None else value

    def items(self):
        return self._values.items()

    @property
    def seed(self) -> int:
        return self._values["run.seed"]

    @property
    def variant(self) -> ModelVariant:
        return ModelVariant.named(self._values["model.variant"])

    def path(self, name: str) -> Path | None:
        raw = self._values.get(f"paths.{name}")
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def require(self, *names: str) -> list[Path]:
        out = []
        for name in names:
            p = self.path(name)
            if p is None:
                raise ConfigError(f"paths.{name}", "required by this command but not set")
            out.append(p)
        return out

    def output_dir(self) -> Path:
        raw = self._values.get("paths.output_dir") or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
        p = Path(raw)
        return p if p.is_absolute() or self._values.get("paths.output_dir") is None else self.base_dir / p

    def dumps(self) -> str:
        """Effective configuration in the same INI grammar it was read from."""
        parser = configparser.ConfigParser(interpolation=None)
        for (sec, key), _ in SCHEMA.items():
            value = self._values.get(f"{sec}.{key}")
            if value is None:
                continue
            if not parser.has_section(sec):
                parser.add_section(sec)
            if isinstance(value, tuple):
                value = " ".join(f"{v:g}" for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            parser.set(sec, key, str(value))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def parse_overrides(args: Iterable[str]) -> dict[str, str]:
    """``--a.b=v`` / ``--a.b v`` / ``--seed 7`` into ``{"a.b": "v"}``."""
    out: dict[str, str] = {}
    args = list(args)
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise ConfigError(arg, "expected --key=value")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        elif i + 1 < len(args) and not args[i + 1].startswith("--"):
            key, value = body, args[i + 1]
            i += 1
        else:
            raise ConfigError(body, "missing value")
        out[ALIASES.get(key, key)] = value
        i += 1
    return out


def load_config(path: str | Path | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``overrides`` and type-check every key.

    Relative paths in the file resolve against the file's directory.
    """
    raw: dict[str, str] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf8")
        except configparser.Error as exc:
            raise ConfigError("config", str(exc).splitlines()[0]) from None
        for sec in parser.sections():
            for key, value in parser.items(sec):
                raw[f"{sec}.{key}"] = value
        base = path.resolve().parent
    override_keys = set((overrides or {}).keys())
    raw.update(overrides or {})
    values: dict[str, object] = {f"{s}.{k}": d for (s, k), (_, d) in SCHEMA.items()}
    for key, text in raw.items():
        sec, _, name = key.partition(".")
        if (sec, name) not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        parse = SCHEMA[(sec, name)][0]
        try:
            values[key] = parse(text)
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
    # command-line paths are relative to the working directory, not the file
    for key in override_keys:
        if key.startswith("paths.") and values.get(key) is not None and not Path(values[key]).is_absolute():
            values[key] = str(Path.cwd() / values[key])
    return RunConfig(values, base)


def validate(cfg: RunConfig, required: Iterable[str], optional: Iterable[str] = (), kg_branch: bool = False) -> None:
    """Check, before anything runs, that the paths a command reads are set and exist.

    With ``kg_branch`` a KG-enabled variant additionally needs the graph and
    its feature archive.
    """
    required = list(required)
    if kg_branch and cfg.variant.use_kg:
        for name in ("kg", "kg_features"):
            if cfg.path(name) is None:
                raise ConfigError(f"paths.{name}",
                                  f"variant {cfg['model.variant']} uses the KG branch but no path is set")
        required += ["kg", "kg_features"]
    for name in required:
        (p,) = cfg.require(name)
        if not p.exists():
            raise ConfigError(f"paths.{name}", f"does not exist: {p}")
    for name in optional:
        p = cfg.path(name)
        if p is not None and not p.exists():
            raise ConfigError(f"paths.{name}", f"does not exist: {p}")
