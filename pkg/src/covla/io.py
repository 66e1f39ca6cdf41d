"""Dataset JSONL, checkpoint JSON and report files, all written atomically."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .datagen import Dataset, DatasetSpec, MultimodalPost
from .model import Dims, ModelParams, param_shapes

FORMAT_VERSION = 1


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _float(x: float) -> str:
    return format(float(x), ".17g")


def _floats(values: Iterable[float]) -> str:
    return "[" + ",".join(_float(v) for v in values) + "]"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def header_path(dataset_path: str | os.PathLike) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".header.json")


def post_to_json(post: MultimodalPost) -> str:
    regions = "[" + ",".join(_floats(r) for r in post.regions) + "]"
    fields = [
        f'"id":{json.dumps(post.id)}',
        f'"tokens":{json.dumps(list(post.tokens))}',
        f'"regions":{regions}',
        f'"label":{post.label}',
        f'"split":{json.dumps(post.split)}',
        f'"kind":{json.dumps(post.kind)}',
        f'"conflict":{json.dumps(post.conflict)}',
        f'"text_label":{json.dumps(post.text_label)}',
        f'"vision_label":{json.dumps(post.vision_label)}',
    ]
    return "{" + ",".join(fields) + "}"


def post_from_json(line: str) -> MultimodalPost:
    obj = json.loads(line)
    if obj.get("split") not in ("train", "val", "test"):
        raise ValueError(f"post {obj.get('id')}: bad split {obj.get('split')!r}")
    return MultimodalPost(
        id=obj["id"], tokens=obj["tokens"], regions=np.array(obj["regions"], dtype=np.float64),
        label=int(obj["label"]), split=obj["split"], kind=obj.get("kind", "unknown"),
        text_label=obj.get("text_label"), vision_label=obj.get("vision_label"),
    )


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> tuple[Path, Path]:
    path = Path(path)
    atomic_write_text(path, "".join(post_to_json(p) + "\n" for p in dataset.posts))
    header = {"format_version": FORMAT_VERSION, "categories": list(dataset.categories),
              "spec": dataset.spec.to_dict()}
    hpath = header_path(path)
    atomic_write_text(hpath, json.dumps(header, indent=2, ensure_ascii=False) + "\n")
    return path, hpath


def read_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    header = json.loads(header_path(path).read_text(encoding="utf-8"))
    spec = DatasetSpec(**header["spec"])
    with path.open(encoding="utf-8") as fh:
        posts = [post_from_json(line) for line in fh if line.strip()]
    ds = Dataset(spec=spec, posts=posts, categories=tuple(header["categories"]))
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_to_json(model: ModelParams) -> str:
    entries = []
    for name in sorted(model.params):
        arr = model.params[name]
        entries.append(f'{json.dumps(name)}:{{"shape":{json.dumps(list(arr.shape))},'
                       f'"data":{_floats(arr.ravel())}}}')
    dims = json.dumps(model.dims.__dict__, sort_keys=True)
    frozen = json.dumps(sorted(model.frozen))
    return (f'{{"variant":{json.dumps(model.variant)},"dims":{dims},"seed":{model.seed},'
            f'"frozen":{frozen},"params":{{{",".join(entries)}}}}}\n')


def save_checkpoint(model: ModelParams, path: str | os.PathLike) -> None:
    atomic_write_text(path, checkpoint_to_json(model))


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    dims = Dims(**obj["dims"])
    expected = param_shapes(obj["variant"], dims)
    params = {}
    for name, entry in obj["params"].items():
        shape = tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ValueError(f"checkpoint parameter {name} has shape {shape}, expected {expected.get(name)}")
        params[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    if set(params) != set(expected):
        raise ValueError(f"checkpoint parameters {sorted(params)} do not match variant {obj['variant']}")
    return ModelParams(obj["variant"], dims, int(obj["seed"]), params, frozenset(obj.get("frozen", [])))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def csv_text(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (_float(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_csv(path: str | os.PathLike, rows: list[dict], columns: list[str] | None = None) -> None:
    atomic_write_text(path, csv_text(rows, columns))


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, ensure_ascii=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
