"""Saving and restoring trained solvers with their costs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ConvLSTMCell, Tensor
from .io import read_params, write_json, write_params
from .solver import Schedule, SolverModel
from .variational import ConvNet, IdentityNet, Multimodal, VarCost, Weight, prior_from_arrays


def _weight_meta(w: Weight | None):
    if w is None:
        return None
    if w.log_value is not None:
        return {"trainable": True}
    return {"trainable": False, "value": w.value}


def _weight_from(meta, arrays: dict, key: str) -> Weight | None:
    if meta is None:
        return None
    if meta["trainable"]:
        return Weight(log_value=Tensor(arrays[key], True))
    return Weight(meta["value"])


def _net_meta(net) -> str:
    return "identity" if isinstance(net, IdentityNet) else "convnet"


def _net_from(kind: str, arrays: dict, prefix: str):
    if kind == "identity":
        return IdentityNet()
    return ConvNet(*(Tensor(arrays[f"{prefix}.{n}"], True) for n in ("k1", "b1", "k2", "b2")))


def save_solver(path, model: SolverModel) -> None:
    arrays = {k: v.data for k, v in model.parameters().items()}
    meta = {
        "schedule": {"nu": model.schedule.nu, "k0": model.schedule.k0,
                     "alpha": model.schedule.alpha, "k1": model.schedule.k1},
        "iterations": model.iterations,
        "pure_gradient": model.pure_gradient,
        "padding_mode": model.cell.padding_mode,
    }
    write_params(path, "solver", arrays, meta)


def load_solver(path) -> SolverModel:
    kind, arrays, meta = read_params(path)
    if kind != "solver":
        raise ValueError(f"{path} holds a {kind!r} file, not solver parameters")
    cell = ConvLSTMCell(
        Tensor(arrays["cell.w_input"], True),
        Tensor(arrays["cell.w_hidden"], True),
        Tensor(arrays["cell.bias"], True),
        meta.get("padding_mode", "periodic"),
    )
    return SolverModel(cell, Tensor(arrays["projection"], True), Schedule(**meta["schedule"]),
                       meta["iterations"], meta["pure_gradient"])


def save_cost(directory, cost: VarCost) -> None:
    d = Path(directory)
    pm = getattr(cost.prior, "padding_mode", "periodic")
    write_params(d / "prior.noip", cost.prior.kind, cost.prior.arrays(), {"padding_mode": pm})
    arrays = {k: v.data for k, v in cost.parameters().items() if not k.startswith("prior.")}
    meta = {"lam": _weight_meta(cost.lam), "multimodal": None}
    mm = cost.multimodal
    if mm is not None:
        meta["multimodal"] = {
            "lam1": _weight_meta(mm.lam1),
            "lam2": _weight_meta(mm.lam2),
            "lam3": _weight_meta(mm.lam3),
            "g": _net_meta(mm.g),
            "h": _net_meta(mm.h),
        }
    write_params(d / "cost.noip", "cost", arrays, meta)


def load_cost(directory) -> VarCost:
    d = Path(directory)
    kind, arrays, meta = read_params(d / "prior.noip")
    prior = prior_from_arrays(kind, arrays, meta)
    _, extra, cmeta = read_params(d / "cost.noip")
    lam = _weight_from(cmeta["lam"], extra, "log_lam")
    mm = None
    if cmeta["multimodal"] is not None:
        m = cmeta["multimodal"]
        mm = Multimodal(
            _weight_from(m["lam1"], extra, "mm.log_lam1"),
            _weight_from(m["lam2"], extra, "mm.log_lam2"),
            _weight_from(m["lam3"], extra, "mm.log_lam3"),
            _net_from(m["g"], extra, "mm.g"),
            _net_from(m["h"], extra, "mm.h"),
        )
    return VarCost(prior, lam, mm)


def save_checkpoint(directory, model: SolverModel, cost: VarCost, config: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_solver(d / "solver.noip", model)
    save_cost(d, cost)
    write_json(d / "config.json", config)


def load_checkpoint(directory) -> tuple:
    """Return ``(model, cost, config)``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {d}")
    config = json.loads((d / "config.json").read_text())
    return load_solver(d / "solver.noip"), load_cost(d), config


def arrays_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
