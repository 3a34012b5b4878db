"""Checkpoint container: a directory holding ``manifest.txt`` and flat binary arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "centroid-uda-checkpoint/1"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, str]) -> Path:
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    lines = [f"format = {FORMAT}"]
    lines += [f"meta.{k} = {v}" for k, v in meta.items()]
    for i, (name, arr) in enumerate(arrays.items()):
        arr = np.asarray(arr).copy(order="C")
        fname = f"{i:04d}.bin"
        arr.tofile(path / "arrays" / fname)
        shape = "x".join(map(str, arr.shape)) or "scalar"
        lines.append(f"array.{name} = {arr.dtype.str} {shape} {fname}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    arrays, meta = {}, {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if " = " not in line:
            continue
        key, value = line.split(" = ", 1)
        if key == "format":
            if value != FORMAT:
                raise ValueError(f"unsupported checkpoint format {value!r}")
        elif key.startswith("meta."):
            meta[key[5:]] = value
        elif key.startswith("array."):
            dtype, shape, fname = value.split()
            dims = () if shape == "scalar" else tuple(int(x) for x in shape.split("x"))
            arrays[key[6:]] = np.fromfile(path / "arrays" / fname, dtype=dtype).reshape(dims)
    return arrays, meta


def _to_np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def flatten_state(prefix: str, state: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": _to_np(v) for k, v in state.items()}


def unflatten_state(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(p)}


def flatten_optimizer(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], str]:
    sd = opt.state_dict()
    arrays = {}
    scalars: dict[str, dict] = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}.{idx}.{key}"] = _to_np(val)
            else:
                scalars.setdefault(str(idx), {})[key] = val
    return arrays, json.dumps({"param_groups": sd["param_groups"], "scalars": scalars}, sort_keys=True)


def restore_optimizer(opt: torch.optim.Optimizer, prefix: str, arrays: dict[str, np.ndarray], blob: str) -> None:
    info = json.loads(blob)
    state: dict[int, dict] = {}
    p = prefix + "."
    for name, arr in arrays.items():
        if name.startswith(p):
            idx, key = name[len(p):].split(".", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    for idx, sc in info["scalars"].items():
        state.setdefault(int(idx), {}).update(sc)
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    seg_state: dict[str, torch.Tensor]
    style_state: dict[str, torch.Tensor]
    bank_values: torch.Tensor
    bank_initialized: torch.Tensor
    epsilon: torch.Tensor
    optim_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    optim_meta: dict[str, str] = field(default_factory=dict)
    rng_state: torch.Tensor | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        arrays = {}
        arrays.update(flatten_state("seg", self.seg_state))
        arrays.update(flatten_state("style", self.style_state))
        arrays["bank.values"] = _to_np(self.bank_values)
        arrays["bank.initialized"] = _to_np(self.bank_initialized)
        arrays["epsilon"] = _to_np(self.epsilon)
        if self.rng_state is not None:
            arrays["rng.torch"] = _to_np(self.rng_state)
        arrays.update(self.optim_arrays)
        meta = {"step": str(self.step), "config_hash": self.config_hash}
        meta.update({f"optim.{k}": v for k, v in self.optim_meta.items()})
        meta.update({f"extra.{k}": v for k, v in self.extra.items()})
        return save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        optim_meta = {k[6:]: v for k, v in meta.items() if k.startswith("optim.")}
        return cls(
            step=int(meta["step"]),
            config_hash=meta["config_hash"],
            seg_state=unflatten_state("seg", arrays),
            style_state=unflatten_state("style", arrays),
            bank_values=torch.from_numpy(arrays["bank.values"].copy()),
            bank_initialized=torch.from_numpy(arrays["bank.initialized"].copy()),
            epsilon=torch.from_numpy(arrays["epsilon"].copy()),
            optim_arrays={k: v for k, v in arrays.items() if k.startswith("opt.")},
            optim_meta=optim_meta,
            rng_state=torch.from_numpy(arrays["rng.torch"].copy()) if "rng.torch" in arrays else None,
            extra={k[6:]: v for k, v in meta.items() if k.startswith("extra.")},
        )


def save_module(path: str | Path, module: torch.nn.Module, meta: dict[str, str]) -> Path:
    """Standalone module checkpoint (used for the pretrained style module)."""
    return save_arrays(path, flatten_state("module", module.state_dict()), meta)


def load_module(path: str | Path, module: torch.nn.Module) -> dict[str, str]:
    arrays, meta = load_arrays(path)
    module.load_state_dict(unflatten_state("module", arrays))
    return meta
