"""Text and binary file formats for traces, footprints, models and datasets.

All text files are UTF-8 with ``\\n`` line endings. Floats are written with 17
significant digits, which round-trips every float64 exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import PiaHyper, PiaModel, RraHyper, RraModel
from .channels import CacheTrace, ReloadTrace, ThreadTrace, TlbTrace
from .corpus import HealthRecord, LabeledPrompt, Vocabulary
from .moe import ExpertFootprint

MTRC_CHANNELS = ("l1", "l2", "reload", "threads", "tlb")


class FormatError(ValueError):
    """Malformed or unsupported file content."""


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _parse_header(line: str, tag: str) -> dict[str, str]:
    line = line.rstrip("\n")
    parts = line.split(",")
    if parts[0] != tag:
        raise FormatError(f"expected a {tag} header, got {line[:40]!r}")
    out = {}
    for p in parts[1:]:
        key, sep, val = p.partition("=")
        if not sep:
            raise FormatError(f"bad header field {p!r}")
        out[key] = val
    return out


def _header(tag: str, fields: dict) -> str:
    return ",".join([tag] + [f"{k}={v}" for k, v in fields.items()])


# -- MTRC v1 traces ---------------------------------------------------------------


@dataclass
class TraceBlock:
    channel: str
    layer: int
    seed: int
    values: np.ndarray  # (rows, cols)
    meta: dict = field(default_factory=dict)


def write_mtrc(path, blocks) -> None:
    """Write one or more trace blocks; each starts with its own header line."""
    lines = []
    for b in blocks:
        if b.channel not in MTRC_CHANNELS:
            raise FormatError(f"unknown channel {b.channel!r}")
        lines.append(_header("#mtrc", {"channel": b.channel, "layer": b.layer, "seed": b.seed, **b.meta}))
        vals = np.atleast_2d(np.asarray(b.values, dtype=np.float64))
        lines.extend(",".join(_fmt(v) for v in row) for row in vals)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mtrc(path) -> list[TraceBlock]:
    blocks: list[TraceBlock] = []
    rows: list[list[float]] = []

    def close():
        if blocks:
            blocks[-1].values = np.array(rows, dtype=np.float64).reshape(len(rows), -1)

    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("#"):
            close()
            h = _parse_header(line, "#mtrc")
            try:
                channel, layer, seed = h.pop("channel"), int(h.pop("layer")), int(h.pop("seed"))
            except KeyError as exc:
                raise FormatError(f"MTRC header lacks {exc}") from None
            if channel not in MTRC_CHANNELS:
                raise FormatError(f"unknown channel {channel!r}")
            blocks.append(TraceBlock(channel, layer, seed, np.zeros((0, 0)), h))
            rows = []
        else:
            if not blocks:
                raise FormatError("data row before the first #mtrc header")
            rows.append([float(v) for v in line.split(",")])
    close()
    return blocks


def cache_blocks(traces, seed: int) -> list[TraceBlock]:
    out = []
    for layer, t in enumerate(traces):
        meta = {"period": _fmt(t.sample_period)}
        out.append(TraceBlock("l1", layer, seed, np.asarray(t.l1)[:, None], dict(meta)))
        out.append(TraceBlock("l2", layer, seed, np.asarray(t.l2)[:, None], dict(meta)))
    return out


def blocks_to_cache(blocks) -> list[CacheTrace]:
    by_layer: dict[int, dict[str, TraceBlock]] = {}
    for b in blocks:
        if b.channel in ("l1", "l2"):
            by_layer.setdefault(b.layer, {})[b.channel] = b
    out = []
    for layer in sorted(by_layer):
        pair = by_layer[layer]
        if set(pair) != {"l1", "l2"}:
            raise FormatError(f"layer {layer} lacks an l1 or l2 block")
        out.append(CacheTrace(pair["l1"].values[:, 0].copy(), pair["l2"].values[:, 0].copy(),
                              float(pair["l1"].meta.get("period", 1.0))))
    return out


def probe_blocks(trace, seed: int) -> list[TraceBlock]:
    """Per-layer blocks for reload, TLB (rows = decode steps) or thread traces (one row)."""
    if isinstance(trace, ThreadTrace):
        meta = {"per_token_threads": trace.per_token_threads}
        return [TraceBlock("threads", l, seed, trace.counts[l][None, :], dict(meta))
                for l in range(trace.counts.shape[0])]
    channel = "reload" if isinstance(trace, ReloadTrace) else "tlb"
    lat = trace.latencies
    return [TraceBlock(channel, l, seed, lat[:, l, :]) for l in range(lat.shape[1])]


def blocks_to_probe(blocks, channel: str):
    chosen = sorted((b for b in blocks if b.channel == channel), key=lambda b: b.layer)
    if not chosen:
        raise FormatError(f"no {channel} blocks")
    if channel == "threads":
        counts = np.stack([b.values[0] for b in chosen]).astype(np.int64)
        return ThreadTrace(counts, int(chosen[0].meta.get("per_token_threads", 1)))
    lat = np.stack([b.values for b in chosen], axis=1)
    return ReloadTrace(lat) if channel == "reload" else TlbTrace(lat)


# -- footprints -------------------------------------------------------------------


def _footprint_lines(fp) -> list[str]:
    if isinstance(fp, ExpertFootprint) and fp.kind == "load":
        rows = fp.load
        head = {"kind": "load", "layers": rows.shape[0], "experts": rows.shape[1]}
        body = [" ".join(str(int(v)) for v in r) for r in rows]
    elif isinstance(fp, ExpertFootprint):
        seq = fp.sequences
        t, l, m = seq.shape
        head = {"kind": "seq", "layers": l, "experts": m, "tokens": t}
        body = [" ".join(str(int(v)) for v in r) for r in seq.reshape(t * l, m)]
    else:
        rows = np.asarray(fp, dtype=np.float64)
        head = {"kind": "load", "layers": rows.shape[0], "experts": rows.shape[1], "values": "prop"}
        body = [" ".join(_fmt(v) for v in r) for r in rows]
    return [_header("#fp", head), *body]


def write_footprints(path, fps) -> None:
    """Write footprints back to back; each is an ExpertFootprint or an (L, M) proportion array."""
    lines = [ln for fp in fps for ln in _footprint_lines(fp)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_footprint(path, fp) -> None:
    write_footprints(path, [fp])


def _parse_footprint(h: dict, body: list[str]):
    try:
        l, m = int(h["layers"]), int(h["experts"])
    except KeyError as exc:
        raise FormatError(f"footprint header lacks {exc}") from None
    if h.get("kind") == "load":
        if len(body) != l:
            raise FormatError(f"expected {l} layer rows, found {len(body)}")
        if h.get("values") == "prop":
            return np.array([[float(v) for v in r.split()] for r in body]).reshape(l, m)
        return ExpertFootprint.from_load(np.array([[int(v) for v in r.split()] for r in body]).reshape(l, m))
    if h.get("kind") == "seq":
        t = int(h["tokens"])
        if len(body) != t * l:
            raise FormatError(f"expected {t * l} rows, found {len(body)}")
        arr = np.array([[int(v) for v in r.split()] for r in body], dtype=np.uint8).reshape(t, l, m)
        return ExpertFootprint.from_sequences(arr)
    raise FormatError(f"unknown footprint kind {h.get('kind')!r}")


def read_footprints(path) -> list:
    """ExpertFootprints, or float arrays for proportion entries, in file order."""
    out = []
    head, body = None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("#"):
            if head is not None:
                out.append(_parse_footprint(head, body))
            head, body = _parse_header(line, "#fp"), []
        elif head is None:
            raise FormatError("data row before the first #fp header")
        else:
            body.append(line)
    if head is not None:
        out.append(_parse_footprint(head, body))
    return out


def read_footprint(path):
    fps = read_footprints(path)
    if len(fps) != 1:
        raise FormatError(f"expected one footprint, found {len(fps)}")
    return fps[0]


# -- models -------------------------------------------------------------------------


MODEL_VERSION = "1"


def save_model(path, model) -> None:
    """Header line then little-endian float64 parameters."""
    if isinstance(model, PiaModel):
        hp = model.hyper
        head = {"kind": "pia", "version": MODEL_VERSION, "dims": "x".join(map(str, model.dims)),
                "attribute": model.attribute or "-", "seed": hp.seed, "epochs": hp.epochs,
                "lr": _fmt(hp.lr), "momentum": _fmt(hp.momentum), "batch": hp.batch_size,
                "optimizer": hp.optimizer}
        arrays = [*model.weights, *model.biases, model.mean, model.scale]
    elif isinstance(model, RraModel):
        head = {"kind": "rra", "version": MODEL_VERSION, "dims": f"{model.n_features}x{model.n_classes}",
                "l2": _fmt(model.hyper.l2), "max_iter": model.hyper.max_iter, "seed": model.hyper.seed}
        arrays = [model.weight, model.bias]
    else:
        raise TypeError("unsupported model type")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes((_header("#model", head) + "\n").encode("utf-8") + blob)


def load_model(path):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("model file has no header line")
    h = _parse_header(raw[:nl].decode("utf-8"), "#model")
    if h.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {h.get('version')!r}")
    dims = [int(d) for d in h["dims"].split("x")]
    data = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > data.size:
            raise FormatError("model blob is truncated")
        out = data[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    if h["kind"] == "pia":
        ws = [take((a, b)) for a, b in zip(dims[:-1], dims[1:])]
        bs = [take((b,)) for b in dims[1:]]
        mean, scale = take((dims[0],)), take((dims[0],))
        hp = PiaHyper(hidden=tuple(dims[1:-1]), batch_size=int(h["batch"]), lr=float(h["lr"]),
                      momentum=float(h["momentum"]), epochs=int(h["epochs"]), seed=int(h["seed"]),
                      optimizer=h["optimizer"])
        attr = "" if h["attribute"] == "-" else h["attribute"]
        model = PiaModel(ws, bs, mean, scale, attr, hp)
    elif h["kind"] == "rra":
        d, c = dims
        model = RraModel(take((d, c)), take((c,)),
                         RraHyper(l2=float(h["l2"]), max_iter=int(h["max_iter"]), seed=int(h["seed"])))
    else:
        raise FormatError(f"unknown model kind {h['kind']!r}")
    if pos != data.size:
        raise FormatError("model blob has trailing data")
    return model


# -- datasets and vocabularies ----------------------------------------------------------


def write_dataset(path, prompts) -> None:
    lines = []
    for p in prompts:
        r = p.record
        ids = " ".join(str(int(t)) for t in p.token_ids)
        lines.append(f"{p.template_id}\t{r.age_group}\t{r.gender}\t{r.blood_type}\t{r.illness}\t{ids}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> list[LabeledPrompt]:
    """Insurance and billing are nuisance slots and are not stored."""
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"line {n}: expected 6 tab-separated fields, got {len(parts)}")
        tid, age, gender, blood, illness = (int(v) for v in parts[:5])
        rec = HealthRecord(age, gender, blood, illness, "", "")
        out.append(LabeledPrompt(np.array([int(v) for v in parts[5].split()], dtype=np.int64), rec, tid))
    return out


def write_vocab(path, vocab: Vocabulary) -> None:
    lines = [f"#oov_buckets\t{vocab.oov_buckets}"]
    lines += [f"{w}\t{i + 1}" for i, w in enumerate(vocab.words)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vocab(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    oov = 0
    if lines and lines[0].startswith("#oov_buckets"):
        oov = int(lines[0].split("\t")[1])
        lines = lines[1:]
    words = []
    for n, line in enumerate((ln for ln in lines if ln), 1):
        w, _, i = line.rpartition("\t")
        if int(i) != n:
            raise FormatError(f"vocabulary ids must run 1..n in order; line {n} has id {i}")
        words.append(w)
    return Vocabulary(tuple(words), oov)


def write_pairs(path, pairs) -> None:
    """(prompt, response) token-id pairs, one per line: ``prompt ids<TAB>response ids``."""
    lines = [" ".join(map(str, p)) + "\t" + " ".join(map(str, r)) for p, r in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs(path) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        p, sep, r = line.partition("\t")
        if not sep:
            raise FormatError(f"line {n}: expected prompt<TAB>response")
        out.append((np.array(p.split(), dtype=np.int64), np.array(r.split(), dtype=np.int64)))
    return out
