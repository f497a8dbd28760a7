"""Flat ``key = value`` run configuration with ablation-variant presets."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

# Ablation rows: baseline (A), PE-free (B), patch+pixel shuffle (C), DAL only (D),
# jigsaw only (E), jigsaw + index table (F), jigsaw + unknown PE (G) and the
# three DAL regressors on top of G (H: PCA, I: linear, J: 3-layer MLP).
VARIANTS: dict[str, dict] = {
    "A": dict(jp=False, unk=False, idx=False, spp=False, pe=True, dal="none"),
    "B": dict(jp=False, unk=False, idx=False, spp=False, pe=False, dal="none"),
    "C": dict(jp=False, unk=False, idx=False, spp=True, pe=True, dal="none"),
    "D": dict(jp=False, unk=False, idx=False, spp=False, pe=True, dal="nln"),
    "E": dict(jp=True, unk=False, idx=False, spp=False, pe=True, dal="none"),
    "F": dict(jp=True, unk=False, idx=True, spp=False, pe=True, dal="none"),
    "G": dict(jp=True, unk=True, idx=False, spp=False, pe=True, dal="none"),
    "H": dict(jp=True, unk=True, idx=False, spp=False, pe=True, dal="pca"),
    "I": dict(jp=True, unk=True, idx=False, spp=False, pe=True, dal="ln"),
    "J": dict(jp=True, unk=True, idx=False, spp=False, pe=True, dal="nln"),
}


@dataclass
class RunConfig:
    # model
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    classes: int = 4
    dal_hidden: int = 64
    # method
    variant: str = "J"
    gamma: float = 0.15
    lam: float = 0.01
    dal: str = "nln"
    jp: bool = True
    unk: bool = True
    idx: bool = False
    spp: bool = False
    pe: bool = True
    dal_coords: str = "normalized"
    dal_all_rows: bool = False
    min_block_area: int = 4
    # optimisation
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_epochs: int = 2
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    # evaluation
    eval_mode: str = "oblivious"
    gamma_eval: str = "0.15"

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.dal not in ("none", "ln", "nln", "pca"):
            raise ConfigError(f"dal must be one of none/ln/nln/pca, got {self.dal!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.eval_mode not in ("oblivious", "aware"):
            raise ConfigError(f"eval_mode must be oblivious or aware, got {self.eval_mode!r}")
        if self.dal_coords not in ("normalized", "raw"):
            raise ConfigError(f"dal_coords must be normalized or raw, got {self.dal_coords!r}")
        if self.spp and self.dal != "none":
            raise ConfigError("spp cannot be combined with a DAL regressor")
        if self.spp and (self.jp or self.unk or self.idx):
            raise ConfigError("spp already shuffles every patch; drop jp/unk/idx")
        if (self.unk or self.idx) and not self.jp:
            raise ConfigError("unk/idx only make sense together with jp")
        if self.unk and self.idx:
            raise ConfigError("unk and idx are alternative treatments of shuffled rows")
        if not self.pe and (self.unk or self.idx or self.dal != "none"):
            raise ConfigError("a PE-free model has no position table for unk/idx/dal")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("epochs", "batch_size", "patch", "dim", "depth", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        self.gamma_evals()
        return self

    def gamma_evals(self) -> list[float]:
        try:
            vals = [float(v) for v in str(self.gamma_eval).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"gamma_eval must be a comma list of floats, got {self.gamma_eval!r}") from None
        if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
            raise ConfigError(f"gamma_eval values must lie in [0, 1]: {self.gamma_eval!r}")
        return vals

    @property
    def train_gamma(self) -> float:
        if self.spp:
            return 1.0
        return self.gamma if self.jp else 0.0

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    def replace(self, **kw) -> "RunConfig":
        d = asdict(self)
        d.update(kw)
        return RunConfig(**d).validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def resolve(pairs: dict) -> RunConfig:
    """Variant preset first, explicit keys on top."""
    unknown = set(pairs) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    variant = str(pairs.get("variant", RunConfig.variant)).upper()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    merged = dict(VARIANTS[variant])
    merged.update({k: _coerce(k, v) if isinstance(v, str) else v for k, v in pairs.items()})
    merged["variant"] = variant
    return RunConfig(**merged).validate()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    pairs = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            pairs = parse_pairs(fh.read())
    if overrides:
        if "variant" in overrides and overrides["variant"] is not None:
            # a new variant on the command line replaces the file's flag set
            for k in VARIANTS["A"]:
                if k not in overrides:
                    pairs.pop(k, None)
        pairs.update({k: v for k, v in overrides.items() if v is not None})
    return resolve(pairs)
