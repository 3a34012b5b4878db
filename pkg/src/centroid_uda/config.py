"""Training configuration, flat ``key = value`` config files and env overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "CENTROID_UDA_"

# Fields that do not change the training trajectory and are left out of the hash.
_NON_TRAJECTORY = {"out_dir", "corpus_dir", "style_checkpoint", "log_every"}


@dataclass
class TrainConfig:
    # experiment
    mode: str = "oneshot"
    fold: int = 0
    n_folds: int = 5
    seed: int = 0
    corpus_subjects: int = 10
    corpus_seed: int = 0

    # ablation switches
    use_style: bool = True
    use_ccl: bool = True
    use_cnr: bool = True
    use_mpccl: bool = True
    epsilon_on: bool = True

    # schedule
    warmup_epochs: int = 20
    main_epochs: int = 20
    lr_warmup: float = 0.02
    lr_main: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    source_bs: int = 8
    target_bs: int = 1
    style_lr_scale: float = 0.0
    grad_clip: float = 5.0  # max global grad norm of the segmentation net; 0 disables

    # losses
    lambda_contrast: float = 1.0
    lambda_cnr: float = 0.5
    rho: float = 0.9
    ema_weight_fresh: bool = True
    tau: float = 0.1
    partitions: int = 4
    include_positive_in_denominator: bool = True
    detach_pseudo_label: bool = False
    contrast_in_warmup: bool = False  # centroid terms only once target predictions are warmed up

    # style module
    latent_dim: int = 16
    style_width: int = 16
    epsilon_eta: float = 1.0
    epsilon_descent: bool = False
    style_ae_steps: int = 200
    style_rain_steps: int = 400
    style_bs: int = 8
    style_lr: float = 2e-3

    # segmentation network
    width: int = 16
    dec_channels: int = 32

    # io
    out_dir: str = ""
    corpus_dir: str = ""
    style_checkpoint: str = ""
    log_every: int = 50

    def __post_init__(self):
        from .data import MODES

        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("warmup_epochs", "main_epochs", "source_bs", "target_bs", "partitions", "n_folds", "corpus_subjects"):
            if getattr(self, name) < (0 if name.endswith("epochs") else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_warmup", "lr_main", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")

    @property
    def variant(self) -> str:
        if not self.use_style:
            return "no-uda"
        parts = ["FUDA"]
        if self.use_ccl:
            parts.append("CCL")
        if self.use_cnr:
            parts.append("CNR")
        if self.use_mpccl:
            parts.append("MPCCL")
        return "+".join(parts)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        text = "".join(
            f"{f.name}={_fmt(getattr(self, f.name))};" for f in fields(self) if f.name not in _NON_TRAJECTORY
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _parse(raw, types[key])
        return dataclasses.replace(base, **kw)

    @classmethod
    def from_file(cls, path: str | Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_dict(parse_kv(Path(path).read_text()), base)

    def with_env(self, environ=None) -> "TrainConfig":
        environ = os.environ if environ is None else environ
        names = {f.name for f in fields(self)}
        found = {
            k[len(ENV_PREFIX):].lower(): v
            for k, v in environ.items()
            if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower() in names
        }
        return self.from_dict(found, self) if found else self


PROFILES = {
    "desk": {},
    "smoke": {"warmup_epochs": 4, "main_epochs": 4, "style_ae_steps": 60, "style_rain_steps": 100},
    "reference": {
        "source_bs": 32,
        "warmup_epochs": 200,
        "main_epochs": 200,
        "lr_warmup": 5e-4,
        "lr_main": 2.5e-4,
    },
}


def profile(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[name], **overrides})


ABLATIONS = {
    "no-uda": dict(use_style=False, use_ccl=False, use_cnr=False, use_mpccl=False, epsilon_on=False),
    "FUDA": dict(use_style=True, use_ccl=False, use_cnr=False, use_mpccl=False),
    "FUDA+CCL": dict(use_style=True, use_ccl=True, use_cnr=False, use_mpccl=False),
    "FUDA+CCL+CNR": dict(use_style=True, use_ccl=True, use_cnr=True, use_mpccl=False),
    "FUDA+CCL+CNR+MPCCL": dict(use_style=True, use_ccl=True, use_cnr=True, use_mpccl=True),
}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw)
