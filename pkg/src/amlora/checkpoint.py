"""Binary model checkpoints: versioned, named-tensor-record format.

Layout: a magic line ``AMLORA-CKPT 1`` followed by length-prefixed records,
each ``u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f64-LE data``.
Everything, including the model configuration, is stored as records (config
scalars are rank-0), so one reader handles the whole file. Floats are stored
exactly, which is what makes load(save(model)) reproduce eval logits
bit-for-bit. Optimizer state is not persisted.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .adapters import AdapterStack
from .errors import CheckpointFormatError
from .model import ADAPTER_SITES, FORWARD_RULES, Backbone, ModelConfig, build_model
from .selector import AttentionalSelector

MAGIC_PREFIX = b"AMLORA-CKPT "
VERSION = 1

_CONFIG_INTS = ("vocab_size", "embed_dim", "num_layers", "num_heads",
                "seq_len", "num_classes", "ffn_multiplier")


def _records_from_model(model: Backbone) -> list[tuple[str, np.ndarray]]:
    cfg = model.config
    recs: list[tuple[str, np.ndarray]] = []

    def scalar(name, value):
        recs.append((name, np.asarray(float(value))))

    scalar("config.backbone_is_mlp", cfg.backbone == "mlp")
    for key in _CONFIG_INTS:
        scalar(f"config.{key}", getattr(cfg, key))
    scalar("config.dropout_rate", cfg.dropout_rate)
    recs.append(("config.sites_mask", np.asarray(
        [1.0 if s in cfg.adapter_sites else 0.0 for s in ADAPTER_SITES])))

    first = next(iter(model.sites.values()))
    scalar("config.rule_index", FORWARD_RULES.index(first.rule))
    any_stack = next((s.stack for s in model.sites.values()
                      if s.stack is not None), None)
    if any_stack is not None:
        scalar("config.adapter_rank", any_stack.rank)
        scalar("config.adapter_alpha", any_stack.alpha)
    any_sel = next((s.selector for s in model.sites.values()
                    if s.selector is not None), None)
    scalar("config.variant_is_ar",
           any_sel is None or any_sel.variant == "AR")

    for name, t in model.base_parameters():
        recs.append((f"base.{name}", t.data))
    for site_name in sorted(model.sites):
        site = model.sites[site_name]
        if site.stack is not None:
            for a in site.stack.task_adapters:
                recs.append((f"site.{site_name}.adapter{a.task_id}.A", a.A.data))
                recs.append((f"site.{site_name}.adapter{a.task_id}.B", a.B.data))
        if site.selector is not None:
            for j, h in enumerate(site.selector.heads):
                recs.append((f"site.{site_name}.head{j}", h.data))
    return recs


def save_checkpoint(model: Backbone, path: str):
    """Atomically write the model (config, base weights, adapters, heads)."""
    blob = bytearray()
    blob += MAGIC_PREFIX + str(VERSION).encode() + b"\n"
    for name, arr in _records_from_model(model):
        # ascontiguousarray would promote rank-0 records to rank 1
        data = np.asarray(arr, dtype="<f8")
        if data.ndim:
            data = np.ascontiguousarray(data)
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointFormatError(
            f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def _read_records(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        header = f.readline(64)
        if not header.startswith(MAGIC_PREFIX) or not header.endswith(b"\n"):
            raise CheckpointFormatError("corrupt header: not a checkpoint file")
        try:
            version = int(header[len(MAGIC_PREFIX):].strip())
        except ValueError:
            raise CheckpointFormatError("corrupt header: bad version field")
        if version != VERSION:
            raise CheckpointFormatError(
                f"checkpoint version {version} is not supported "
                f"(this build reads version {VERSION})")
        records: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointFormatError("truncated checkpoint record")
            (name_len,) = struct.unpack("<I", head)
            if name_len > 4096:
                raise CheckpointFormatError("corrupt record: name too long")
            name = _read_exact(f, name_len).decode("utf-8", errors="strict")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            if rank > 8:
                raise CheckpointFormatError(f"corrupt record {name}: rank {rank}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = 1
            for dim in dims:
                count *= dim
            if count > 100_000_000:
                raise CheckpointFormatError(f"corrupt record {name}: too large")
            data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
            records[name] = data.reshape(dims).copy()
    return records


def _require(records: dict, name: str) -> np.ndarray:
    if name not in records:
        raise CheckpointFormatError(f"missing tensor record {name!r}")
    return records[name]


def load_checkpoint(path: str) -> Backbone:
    """Rebuild a frozen, eval-ready model; no state kept on failure."""
    records = _read_records(path)
    kwargs = {key: int(_require(records, f"config.{key}"))
              for key in _CONFIG_INTS}
    mask = _require(records, "config.sites_mask")
    if mask.shape != (len(ADAPTER_SITES),):
        raise CheckpointFormatError("corrupt config.sites_mask record")
    cfg = ModelConfig(
        backbone="mlp" if _require(records, "config.backbone_is_mlp") else
        "transformer",
        dropout_rate=float(_require(records, "config.dropout_rate")),
        adapter_sites=tuple(s for s, m in zip(ADAPTER_SITES, mask) if m),
        **kwargs)
    model = build_model(cfg, seed=0)
    for name, t in model.base_parameters():
        arr = _require(records, f"base.{name}")
        if arr.shape != t.data.shape:
            raise CheckpointFormatError(
                f"record base.{name} has shape {arr.shape}, "
                f"model expects {t.data.shape}")
        t.data = arr
        t.requires_grad = False

    rule = FORWARD_RULES[int(_require(records, "config.rule_index"))]
    variant = "AR" if _require(records, "config.variant_is_ar") else "NR"
    for site_name in sorted(model.sites):
        site = model.sites[site_name]
        adapter_keys = sorted(
            k for k in records if k.startswith(f"site.{site_name}.adapter")
            and k.endswith(".A"))
        n = len(adapter_keys)
        if n:
            rank = int(_require(records, "config.adapter_rank"))
            alpha = float(_require(records, "config.adapter_alpha"))
            stack = AdapterStack(site.d_out, site.d_in, rank, alpha)
            for k in range(1, n + 1):
                a = stack.begin_task(seed=0)
                a.A.data = _require(records, f"site.{site_name}.adapter{k}.A")
                a.B.data = _require(records, f"site.{site_name}.adapter{k}.B")
                a.freeze()
            site.stack = stack
        head_keys = [k for k in records
                     if k.startswith(f"site.{site_name}.head")]
        if head_keys:
            if len(head_keys) != n + 1:
                raise CheckpointFormatError(
                    f"site {site_name}: {n} adapters but {len(head_keys)} heads")
            sel = AttentionalSelector(n + 1, site.d_out, variant)
            for j in range(n + 1):
                sel.heads[j].data = _require(records,
                                             f"site.{site_name}.head{j}")
                sel.heads[j].requires_grad = False
            site.selector = sel
    model.set_rule(rule)
    return model
