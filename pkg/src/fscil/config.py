"""Run configuration: a line-oriented ``key = value`` format with dotted
section keys (``benchmark.shots = 5``), UTF-8, full-line ``#`` comments.
Unknown keys are hard errors so typos cannot silently change a run.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .protocol import MethodConfig, SyntheticLayout

_INT = "int"
_FLOAT = "float"
_STR = "str"
_INT_LIST = "int_list"
_STR_LIST = "str_list"

# key -> (type tag, default); None default means "unset"
_SCHEMA: dict[str, tuple[str, object]] = {
    "benchmark.kind": (_STR, "synthetic"),
    "benchmark.manifest": (_STR, None),
    "benchmark.classes": (_INT, 20),
    "benchmark.dim": (_INT, 32),
    "benchmark.base_classes": (_INT, 8),
    "benchmark.base_train": (_INT, 100),
    "benchmark.inc_sessions": (_INT, 4),
    "benchmark.inc_classes": (_INT, 3),
    "benchmark.shots": (_INT, 5),
    "benchmark.test_per_class": (_INT, 20),
    "benchmark.seed": (_INT, 7),
    "benchmark.var_low": (_FLOAT, 0.01),
    "benchmark.var_high": (_FLOAT, 0.06),
    "benchmark.layout": (_STR, None),  # e.g. "0-7 / 8-10 / 11-13"
    "method.names": (_STR_LIST, ["lp_dif"]),
    "method.synth_features": (_INT, 10),
    "method.replay_classes": (_INT, 8),
    "method.replay_weight": (_FLOAT, 2.0),
    "method.recon_weight": (_FLOAT, 1.0),
    "method.temperature": (_FLOAT, 0.01),
    "method.prompt_len": (_INT, 16),
    "method.ctx_dim": (_INT, 16),
    "method.cls_dim": (_INT, 16),
    "method.latent_dim": (_INT, 8),
    "method.lr": (_FLOAT, 0.002),
    "method.momentum": (_FLOAT, 0.9),
    "method.base_epochs": (_INT, 200),
    "method.inc_epochs": (_INT, 100),
    "method.base_batch": (_INT, 64),
    "method.inc_batch": (_INT, 25),
    "method.exemplars_per_class": (_INT, 1),
    "method.vae_epochs": (_INT, 4000),
    "method.vae_lr": (_FLOAT, 0.05),
    "method.vae_momentum": (_FLOAT, 0.9),
    "method.first_session": (_STR, "base"),
    "run.seeds": (_INT_LIST, [1]),
    "run.k_values": (_INT_LIST, []),  # empty = benchmark shots only
    "run.out": (_STR, None),
    "run.jobs": (_INT, 1),
    "output.timing": (_STR, "zero"),
}


def _convert(key: str, raw: str):
    kind, _ = _SCHEMA[key]
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _INT_LIST:
            return [int(part) for part in raw.split(",") if part.strip() != ""]
        if kind == _STR_LIST:
            return [part.strip() for part in raw.split(",") if part.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> dict:
    """Parse config lines into a fully defaulted key-value map."""
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {ln}: expected 'key = value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"config line {ln}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def parse_layout_string(text: str) -> list[list[int]]:
    """Explicit session class lists: sessions split by '/', ids by comma,
    with 'a-b' inclusive ranges. Example: ``0-7 / 8-10 / 11-13``."""
    sessions: list[list[int]] = []
    for chunk in text.split("/"):
        ids: list[int] = []
        for part in chunk.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo_s, hi_s = part.split("-", 1)
                try:
                    lo, hi = int(lo_s), int(hi_s)
                except ValueError:
                    raise ConfigError(f"bad class range {part!r} in layout") from None
                if hi < lo:
                    raise ConfigError(f"class range {part!r} runs backwards")
                ids.extend(range(lo, hi + 1))
            else:
                try:
                    ids.append(int(part))
                except ValueError:
                    raise ConfigError(f"bad class id {part!r} in layout") from None
        if ids:
            sessions.append(ids)
    if not sessions:
        raise ConfigError("layout string resolves to zero sessions")
    return sessions


@dataclass
class RunConfig:
    """Validated, fully resolved run configuration."""

    values: dict
    layout: SyntheticLayout | None
    methods: list[str]
    seeds: list[int]
    k_values: list[int]
    out: str | None
    jobs: int
    timing: str

    @property
    def benchmark_kind(self) -> str:
        return self.values["benchmark.kind"]

    @property
    def manifest_path(self) -> str | None:
        return self.values["benchmark.manifest"]

    @property
    def benchmark_seed(self) -> int:
        return self.values["benchmark.seed"]

    def method_config(self, method: str) -> MethodConfig:
        v = self.values
        cfg = MethodConfig(
            method=method,
            synth_features=v["method.synth_features"],
            replay_classes=v["method.replay_classes"],
            replay_weight=v["method.replay_weight"],
            recon_weight=v["method.recon_weight"],
            temperature=v["method.temperature"],
            prompt_len=v["method.prompt_len"],
            ctx_dim=v["method.ctx_dim"],
            cls_dim=v["method.cls_dim"],
            latent_dim=v["method.latent_dim"],
            lr=v["method.lr"],
            momentum=v["method.momentum"],
            base_epochs=v["method.base_epochs"],
            inc_epochs=v["method.inc_epochs"],
            base_batch=v["method.base_batch"],
            inc_batch=v["method.inc_batch"],
            exemplars_per_class=v["method.exemplars_per_class"],
            vae_epochs=v["method.vae_epochs"],
            vae_lr=v["method.vae_lr"],
            vae_momentum=v["method.vae_momentum"],
            first_session=v["method.first_session"],
        )
        cfg.validate()
        return cfg

    def echo(self) -> dict:
        """Every resolved key, defaults included, for the run metadata."""
        return dict(sorted(self.values.items()))


def resolve_config(values: dict) -> RunConfig:
    kind = values["benchmark.kind"]
    if kind not in ("synthetic", "files"):
        raise ConfigError(f"benchmark.kind must be 'synthetic' or 'files', got {kind!r}")
    if values["output.timing"] not in ("zero", "wall"):
        raise ConfigError("output.timing must be 'zero' or 'wall'")
    if values["run.jobs"] < 1:
        raise ConfigError("run.jobs must be >= 1")
    if not values["run.seeds"]:
        raise ConfigError("run.seeds must list at least one seed")
    methods = values["method.names"]
    if not methods:
        raise ConfigError("method.names must list at least one method")

    layout = None
    if kind == "synthetic":
        session_ids = None
        if values["benchmark.layout"]:
            # duplicate and count problems are reported by layout.validate()
            session_ids = parse_layout_string(values["benchmark.layout"])
        layout = SyntheticLayout(
            classes=values["benchmark.classes"],
            dim=values["benchmark.dim"],
            base_classes=values["benchmark.base_classes"],
            base_train=values["benchmark.base_train"],
            inc_sessions=values["benchmark.inc_sessions"],
            inc_classes=values["benchmark.inc_classes"],
            shots=values["benchmark.shots"],
            test_per_class=values["benchmark.test_per_class"],
            var_low=values["benchmark.var_low"],
            var_high=values["benchmark.var_high"],
            prompt_len=values["method.prompt_len"],
            ctx_dim=values["method.ctx_dim"],
            cls_dim=values["method.cls_dim"],
            session_class_ids=session_ids,
        )
        layout.validate()
    else:
        if not values["benchmark.manifest"]:
            raise ConfigError("benchmark.kind = files requires benchmark.manifest")

    k_values = values["run.k_values"] or [values["benchmark.shots"]]
    for k in k_values:
        if k < 1:
            raise ConfigError(f"run.k_values entries must be >= 1, got {k}")

    cfg = RunConfig(
        values=values,
        layout=layout,
        methods=list(methods),
        seeds=list(values["run.seeds"]),
        k_values=list(k_values),
        out=values["run.out"],
        jobs=values["run.jobs"],
        timing=values["output.timing"],
    )
    for m in methods:
        cfg.method_config(m)  # validates every method tag eagerly
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return resolve_config(parse_config_text(fh.read()))
