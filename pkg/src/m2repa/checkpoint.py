"""Checkpoint bundles: model, projector bank, optimizer state and the run config.

Record names are ``model/<param>``, ``bank/<param>``, ``optim/<key>`` and
``meta/config`` (the config text as byte values).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import ProjectorBank
from .config import RunConfig, parse_config
from .fileformat import FormatError, decode, encode, record_text, text_record
from .trainer import init_run


@dataclass
class Checkpoint:
    config: RunConfig
    model: object
    bank: ProjectorBank
    optimizer: object


def checkpoint_records(cfg: RunConfig, model, bank: ProjectorBank, optimizer) -> dict[str, np.ndarray]:
    records = {"meta/config": text_record(cfg.to_text())}
    for name, p in model.named_parameters():
        records[f"model/{name}"] = p.data
    for name, p in bank.named_parameters():
        records[f"bank/{name}"] = p.data
    for key, arr in optimizer.state().items():
        records[f"optim/{key}"] = arr
    return records


def save_checkpoint(path: str | Path, cfg: RunConfig, model, bank: ProjectorBank, optimizer) -> None:
    Path(path).write_bytes(encode(checkpoint_records(cfg, model, bank, optimizer)))


def _group(records: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in records.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the model, bank and optimizer from a bundle. CRC and layout
    problems raise :class:`FormatError`; a bundle that decodes but does not
    fit its own config raises ``ValueError``."""
    records = decode(Path(path).read_bytes())
    if "meta/config" not in records:
        raise FormatError("checkpoint has no meta/config record", 0)
    cfg = parse_config(record_text(records["meta/config"]), f"{path}[meta/config]")
    model, bank, optimizer = init_run(cfg)
    try:
        model.load_state_dict(_group(records, "model/"))
        bank.load_state_dict(_group(records, "bank/"))
        optimizer.load_state(_group(records, "optim/"))
    except KeyError as exc:
        raise ValueError(f"checkpoint does not match its config: {exc}") from None
    return Checkpoint(cfg, model, bank, optimizer)
