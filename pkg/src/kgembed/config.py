"""Pipeline configuration (TOML) and backend construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ._http import RetryPolicy
from .corpus import DEFAULT_LANGUAGES, ChunkingConfig
from .embed import MockEmbedder, PrecomputedEmbeddings, RemoteEmbedder
from .extract import CorpusFlags, MockExtractor, RemoteExtractor
from .pairgen import MockTranslator, PairGenConfig, RemoteTranslator
from .stats import StatsConfig

BACKEND_KINDS = {
    "extractor": ("mock", "remote"),
    "translator": ("mock", "remote"),
    "embedder": ("mock", "remote", "file"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    path: Path
    source: str
    query_bearing: bool = False
    augment_to_greek: bool = False

    @property
    def flags(self) -> CorpusFlags:
        return CorpusFlags(self.query_bearing, self.augment_to_greek)


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "mock"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    auth_env: Optional[str] = None
    options: Dict[str, object] = field(default_factory=dict)


@dataclass
class PipelineConfig:
    output_dir: Path
    corpora: List[CorpusSpec] = field(default_factory=list)
    languages: Tuple[str, ...] = DEFAULT_LANGUAGES
    chunking: ChunkingConfig = ChunkingConfig()
    pairgen: PairGenConfig = PairGenConfig()
    backends: Dict[str, BackendSpec] = field(default_factory=dict)
    ks: Tuple[int, ...] = (3, 10)
    stats: StatsConfig = StatsConfig()
    retry: RetryPolicy = RetryPolicy()
    jobs: int = 1
    log_level: str = "INFO"
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        """Hash of the settings that shape outputs; placement, parallelism and verbosity are left out."""
        raw = copy.deepcopy(self.raw)
        for key in ("output_dir", "jobs", "log_level"):
            raw.pop(key, None)
        for corpus in raw.get("corpora", []):
            corpus["path"] = Path(str(corpus.get("path", ""))).name
        blob = json.dumps(raw, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def flags(self) -> Dict[str, CorpusFlags]:
        return {c.source: c.flags for c in self.corpora}

    def backend(self, role: str) -> BackendSpec:
        return self.backends.get(role, BackendSpec())


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values use TOML literal syntax."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = _parse_value(value.strip())
    return raw


def _build(raw: dict, base: Path) -> PipelineConfig:
    def resolve(p) -> Path:
        p = Path(str(p))
        return p if p.is_absolute() else (base / p)

    try:
        corpora = []
        for c in raw.get("corpora", []):
            corpora.append(CorpusSpec(resolve(c["path"]), str(c.get("source") or Path(str(c["path"])).stem),
                                      bool(c.get("query_bearing", False)), bool(c.get("augment_to_greek", False))))
        sources = [c.source for c in corpora]
        if len(set(sources)) != len(sources):
            raise ConfigError("corpus source tags must be unique")
        backends = {}
        for role, spec in (raw.get("backends") or {}).items():
            if role not in BACKEND_KINDS:
                raise ConfigError(f"unknown backend role {role!r}")
            spec = dict(spec)
            kind = spec.pop("kind", "mock")
            if kind not in BACKEND_KINDS[role]:
                raise ConfigError(f"backend {role}: unsupported kind {kind!r} (supported: {BACKEND_KINDS[role]})")
            if kind == "remote" and not spec.get("endpoint"):
                raise ConfigError(f"backend {role}: remote kind needs an endpoint")
            if kind == "file" and not spec.get("path"):
                raise ConfigError(f"backend {role}: file kind needs a path")
            if "path" in spec:
                spec["path"] = str(resolve(spec["path"]))
            backends[role] = BackendSpec(kind, spec.pop("endpoint", None), spec.pop("model", None),
                                         spec.pop("auth_env", None), spec)
        ks = tuple(int(k) for k in (raw.get("eval") or {}).get("ks", (3, 10)))
        if not ks or list(ks) != sorted(set(ks)) or ks[0] < 1:
            raise ConfigError("eval.ks must be a non-empty ascending list of positive integers")
        retry_raw = raw.get("retry") or {}
        return PipelineConfig(
            output_dir=resolve(raw.get("output_dir", "kgembed-out")),
            corpora=corpora,
            languages=tuple(raw.get("languages", DEFAULT_LANGUAGES)),
            chunking=ChunkingConfig(**(raw.get("chunking") or {})),
            pairgen=PairGenConfig(**(raw.get("pairgen") or {})),
            backends=backends,
            ks=ks,
            stats=StatsConfig(**(raw.get("stats") or {})),
            retry=RetryPolicy(int(retry_raw.get("attempts", 3)), float(retry_raw.get("backoff", 1.0))),
            jobs=int(raw.get("jobs", 1)),
            log_level=str(raw.get("log_level", "INFO")),
            raw=raw,
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path=None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """Read a TOML config. Relative paths resolve against the config file's directory."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
    raw = apply_overrides(raw, overrides)
    try:
        return _build(raw, base)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def make_extractor(spec: BackendSpec):
    if spec.kind == "mock":
        return MockExtractor()
    return RemoteExtractor(spec.endpoint, spec.model or "default", spec.auth_env, **spec.options)


def make_translator(spec: BackendSpec):
    if spec.kind == "mock":
        return MockTranslator()
    return RemoteTranslator(spec.endpoint, spec.auth_env, **spec.options)


def make_embedder(spec: BackendSpec):
    if spec.kind == "mock":
        return MockEmbedder(int(spec.options.get("dim", 64)))
    if spec.kind == "file":
        return PrecomputedEmbeddings.from_file(spec.options["path"])
    options = {k: v for k, v in spec.options.items() if k in ("dim", "query_prefix", "passage_prefix", "timeout")}
    return RemoteEmbedder(spec.endpoint, spec.model or "default", auth_env=spec.auth_env, **options)
