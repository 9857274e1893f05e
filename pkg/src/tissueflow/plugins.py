"""Node runners: builtin tools and the external plugin protocol.

A runner receives a :class:`NodeContext` that exposes the node's parameters,
reads its declared inputs and accepts writes only to its declared outputs.

External plugins are command lines started once per node execution. The host
talks to them with one JSON object per line over stdin/stdout (UTF-8):

1. ``{"op": "init", "protocol": 1, "node_id": ..., "params": {...}}``
2. ``{"op": "describe"}``; the reply lists ``"outputs"`` the plugin may write
3. ``{"op": "run", "params": ..., "inputs": {name: {path, dtype, shape, attrs}},
   "outputs": [names], "staging": dir}``

Each reply carries ``"status": "ok" | "error"`` and optionally ``"log"``.
The ``run`` reply lists ``"outputs"`` as ``{name, dtype, shape, file, attrs}``
with ``file`` relative to the staging directory; the host checks every entry
against the node's declared outputs and the byte size before committing it.
See ``docs/formats.md`` for the full schema.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
import subprocess
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from tissueflow import guidelines
from tissueflow.errors import EmptyContour, NotFound, PluginProtocolError, TissueflowError
from tissueflow.measure import (
    TissueMaskConfig,
    count_components,
    extract_contours,
    masked_mean_intensity,
    max_extent_mm,
    measure_doi,
    measure_wall_thickness,
    node_positivity,
    preprocess_tissue_mask,
)
from tissueflow.memory import DTYPES

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
PLUGIN_TIMEOUT_S = 60.0


class UndeclaredDataset(PluginProtocolError):
    pass


class NodeContext:
    """What a runner may see and touch while executing one node."""

    def __init__(self, node, store, seed: int | None = None):
        self.node = node
        self.store = store
        self.params = dict(node.params)
        self.seed = self.params.get("seed", seed)
        self.written: list[str] = []

    @property
    def inputs(self) -> tuple[str, ...]:
        return tuple(self.node.input_names)

    @property
    def outputs(self) -> tuple[str, ...]:
        return tuple(self.node.output_names)

    def read(self, name: str) -> np.ndarray:
        if name not in self.node.input_names:
            raise UndeclaredDataset(f"{self.node.node_id} reads undeclared input {name!r}")
        return self.store.read_array(name)

    def info(self, name: str):
        if name not in self.node.input_names:
            raise UndeclaredDataset(f"{self.node.node_id} reads undeclared input {name!r}")
        return self.store.info(name)

    def write(self, name: str, array, attrs=None) -> None:
        if name not in self.node.output_names:
            raise UndeclaredDataset(f"{self.node.node_id} writes undeclared output {name!r}")
        self.store.write_array(name, np.asarray(array), attrs=attrs, actor=self.node.node_id)
        self.written.append(name)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def expect(self, n_in: int, n_out: int) -> None:
        if len(self.node.input_names) != n_in or len(self.node.output_names) != n_out:
            raise TissueflowError(
                f"{self.node.node_id}: expects {n_in} input(s) and {n_out} output(s), got "
                f"{len(self.node.input_names)} and {len(self.node.output_names)}")


# -- builtin tools ---------------------------------------------------------


def _draw(shape, items) -> np.ndarray:
    rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols]
    xx = xx + 0.5
    yy = yy + 0.5
    mask = np.zeros(shape, dtype=bool)
    for it in items:
        kind = it["kind"]
        if kind == "disk":
            mask |= (xx - it["cx"]) ** 2 + (yy - it["cy"]) ** 2 <= it["r"] ** 2
        elif kind == "annulus":
            d2 = (xx - it["cx"]) ** 2 + (yy - it["cy"]) ** 2
            mask |= (d2 > it["r_in"] ** 2) & (d2 <= it["r_out"] ** 2)
        elif kind == "rect":
            mask |= (xx >= it["x0"]) & (xx < it["x1"]) & (yy >= it["y0"]) & (yy < it["y1"])
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
    return mask


def phantom_segmenter(ctx: NodeContext) -> None:
    """Draw parameterized shapes: one list of shapes per output mask.

    params: ``shape`` [rows, cols], ``masks`` list aligned with outputs,
    optional ``flip_prob`` for salt-and-pepper label noise.
    """
    shape = tuple(ctx.params["shape"])
    masks = ctx.params["masks"]
    if len(masks) != len(ctx.outputs):
        raise TissueflowError(f"{len(masks)} mask specs for {len(ctx.outputs)} outputs")
    flip = float(ctx.params.get("flip_prob", 0.0))
    rng = ctx.rng()
    for name, items in zip(ctx.outputs, masks):
        m = _draw(shape, items)
        if flip > 0:
            m ^= rng.random(shape) < flip
        ctx.write(name, m.astype(np.uint8))


def noisy_classifier(ctx: NodeContext) -> None:
    """Copy true labels, replacing each with a different class with prob ``1 - accuracy``."""
    ctx.expect(1, 1)
    truth = ctx.read(ctx.inputs[0]).astype(np.int32)
    classes = int(ctx.params.get("n_classes", int(truth.max()) + 1))
    accuracy = float(ctx.params.get("accuracy", 0.9))
    rng = ctx.rng()
    flat = truth.ravel().copy()
    wrong = rng.random(flat.size) > accuracy
    shift = rng.integers(1, max(classes, 2), size=flat.size)
    flat[wrong] = (flat[wrong] + shift[wrong]) % classes
    ctx.write(ctx.outputs[0], flat.reshape(truth.shape),
              attrs={"accuracy_param": repr(accuracy)})


def tissue_mask(ctx: NodeContext) -> None:
    ctx.expect(1, 1)
    fields = TissueMaskConfig.__dataclass_fields__
    cfg = TissueMaskConfig(**{k: v for k, v in ctx.params.items() if k in fields})
    img = ctx.read(ctx.inputs[0])
    ctx.write(ctx.outputs[0], preprocess_tissue_mask(img, cfg).astype(np.uint8))


def contours(ctx: NodeContext) -> None:
    """Vertices of every outer contour, stacked into an ``(n, 3)`` table: x, y, contour index."""
    ctx.expect(1, 1)
    found = extract_contours(ctx.read(ctx.inputs[0]))
    if not found:
        raise EmptyContour(f"{ctx.inputs[0]} has no foreground pixels")
    rows = np.concatenate([np.column_stack([c.vertices, np.full(len(c.vertices), k)])
                           for k, c in enumerate(found)])
    ctx.write(ctx.outputs[0], rows.astype(np.float64), attrs={"n_contours": str(len(found))})


def _vertices(table: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(table[:, :2], dtype=np.float64)


def doi(ctx: NodeContext) -> None:
    """inputs: tumor contour table, epithelium contour table. param: ``pixel_size_um``."""
    ctx.expect(2, 1)
    tumor = _vertices(ctx.read(ctx.inputs[0]))
    epi = _vertices(ctx.read(ctx.inputs[1]))
    m = measure_doi(tumor, epi, float(ctx.params["pixel_size_um"]))
    (px, py), (qx, qy) = m.witness
    ctx.write(ctx.outputs[0], np.float64(m.value), attrs={
        "unit": m.unit, "method": m.method,
        "witness": f"{px!r},{py!r};{qx!r},{qy!r}",
    })


_TO_MM = {"mm": 1.0, "um": 1e-3}


def _criterion(ctx: NodeContext, default: guidelines.Criterion) -> guidelines.Criterion:
    cid = ctx.params.get("criterion_id", default.criterion_id)
    version = ctx.params.get("criterion_version")
    try:
        return guidelines.CriteriaStore(ctx.store).get_criterion(cid, version)
    except NotFound:
        for c in guidelines.BUNDLED:
            if c.criterion_id == cid and version in (None, c.version):
                return c
        raise


def _scalar_mm(ctx: NodeContext) -> float:
    name = ctx.inputs[0]
    value = float(ctx.read(name).ravel()[0])
    unit = ctx.info(name).attrs.get("unit", ctx.params.get("unit", "mm"))
    if unit not in _TO_MM:
        raise TissueflowError(f"{name}: cannot convert unit {unit!r} to mm")
    return value * _TO_MM[unit]


def _write_classification(ctx: NodeContext, res: guidelines.Classification, index: int) -> None:
    attrs = {"label": res.label, "criterion_id": res.criterion_id,
             "criterion_version": res.criterion_version, "source_ref": res.source_ref,
             "value": repr(res.value)}
    if res.threshold is not None:
        attrs["threshold"] = repr(res.threshold)
    ctx.write(ctx.outputs[0], np.int32(index), attrs=attrs)


def classify_metastasis(ctx: NodeContext) -> None:
    """Size class of a deposit measurement (converted to mm from its ``unit`` attr)."""
    ctx.expect(1, 1)
    crit = _criterion(ctx, guidelines.METASTASIS)
    res = guidelines.classify_metastasis(_scalar_mm(ctx), crit)
    index = [b.label for b in crit.bands].index(res.label)
    _write_classification(ctx, res, index)


def classify_threshold(ctx: NodeContext) -> None:
    """Binary criterion on a scalar; comparative criteria read two scalars ``(a, b)``."""
    crit = _criterion(ctx, guidelines.LV_HYPERTROPHY)
    if crit.kind == "comparative":
        ctx.expect(2, 1)
        value = tuple(float(ctx.read(n).ravel()[0]) for n in ctx.inputs)
    else:
        ctx.expect(1, 1)
        value = _scalar_mm(ctx)
    res = guidelines.classify_binary_threshold(value, crit)
    _write_classification(ctx, res, int(res.flag))


def wall_thickness(ctx: NodeContext) -> None:
    """inputs: LV blood pool, LV myocardium (4D series). param: ``spacing`` [dx, dy] mm."""
    ctx.expect(2, 1)
    spacing = tuple(ctx.params.get("spacing", (1.0, 1.0)))
    wt = measure_wall_thickness(ctx.read(ctx.inputs[0]), ctx.read(ctx.inputs[1]), spacing)
    ctx.write(ctx.outputs[0], np.float64(wt.wt_max_ed),
              attrs={"unit": "mm", "ed_frame": str(wt.ed_frame)})


def node_positivity_tool(ctx: NodeContext) -> None:
    """Table of ``label, positive, overlap_px, deposit_mm`` per lymph node."""
    ctx.expect(2, 1)
    spacing = tuple(ctx.params.get("spacing", (1.0, 1.0)))
    res = node_positivity(ctx.read(ctx.inputs[0]), ctx.read(ctx.inputs[1]))
    rows = [[r.label, float(r.positive), r.overlap_area,
             max_extent_mm(r.deposit_component, spacing) if r.positive else 0.0]
            for r in res.values()]
    table = np.array(rows, dtype=np.float64).reshape(len(rows), 4)
    ctx.write(ctx.outputs[0], table, attrs={
        "columns": "label,positive,overlap_px,deposit_mm",
        "positive_nodes": str(sum(r.positive for r in res.values())),
    })


def masked_mean(ctx: NodeContext) -> None:
    ctx.expect(2, 1)
    value = masked_mean_intensity(ctx.read(ctx.inputs[0]), ctx.read(ctx.inputs[1]))
    ctx.write(ctx.outputs[0], np.float64(value), attrs={"unit": ctx.params.get("unit", "HU")})


def count_components_tool(ctx: NodeContext) -> None:
    ctx.expect(1, 1)
    n, _ = count_components(ctx.read(ctx.inputs[0]), int(ctx.params.get("connectivity", 8)),
                            ctx.params.get("method", "union_find"))
    ctx.write(ctx.outputs[0], np.int32(n))


def sleep(ctx: NodeContext) -> None:
    seconds = float(ctx.params.get("seconds", 0.1))
    time.sleep(seconds)
    for name in ctx.outputs:
        ctx.write(name, np.float64(seconds))


def fail(ctx: NodeContext) -> None:
    raise RuntimeError(ctx.params.get("message", "requested failure"))


def echo(ctx: NodeContext) -> None:
    """Copy input ``i`` to output ``i``."""
    if len(ctx.inputs) != len(ctx.outputs):
        raise TissueflowError("echo needs as many outputs as inputs")
    for src, dst in zip(ctx.inputs, ctx.outputs):
        ctx.write(dst, ctx.read(src), attrs=ctx.info(src).attrs)


BUILTINS: dict[str, Callable[[NodeContext], None]] = {
    "phantom_segmenter": phantom_segmenter,
    "noisy_classifier": noisy_classifier,
    "tissue_mask": tissue_mask,
    "contours": contours,
    "doi": doi,
    "classify_metastasis": classify_metastasis,
    "classify_threshold": classify_threshold,
    "wall_thickness": wall_thickness,
    "node_positivity": node_positivity_tool,
    "masked_mean": masked_mean,
    "count_components": count_components_tool,
    "sleep": sleep,
    "fail": fail,
    "echo": echo,
}

# capability of each builtin when registered with a default card
BUILTIN_CAPABILITY = {
    "phantom_segmenter": "segmentation",
    "noisy_classifier": "classification",
    "tissue_mask": "segmentation",
    "contours": "measurement",
    "doi": "measurement",
    "classify_metastasis": "analysis",
    "classify_threshold": "analysis",
    "wall_thickness": "measurement",
    "node_positivity": "measurement",
    "masked_mean": "measurement",
    "count_components": "measurement",
    "sleep": "analysis",
    "fail": "analysis",
    "echo": "analysis",
}


# -- external plugins ------------------------------------------------------


class PluginProcess:
    """One plugin subprocess speaking the line-delimited JSON protocol."""

    def __init__(self, argv: list[str], timeout: float = PLUGIN_TIMEOUT_S):
        self.argv = argv
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         stderr=subprocess.PIPE, text=True, encoding="utf-8")
        except OSError as exc:
            raise PluginProtocolError(f"cannot start plugin {argv[0]!r}: {exc}") from exc

    def request(self, msg: dict) -> dict:
        try:
            self.proc.stdin.write(json.dumps(msg, sort_keys=True) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise PluginProtocolError(f"plugin pipe closed during {msg['op']}: {exc}") from exc
        if not line:
            err = self._stderr_tail()
            raise PluginProtocolError(f"plugin exited during {msg['op']}{err}")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PluginProtocolError(f"plugin sent invalid JSON: {line[:200]!r}") from exc
        if not isinstance(reply, dict) or reply.get("status") not in ("ok", "error"):
            raise PluginProtocolError(f"bad reply to {msg['op']}: {line[:200]!r}")
        for entry in reply.get("log", []):
            logger.info("plugin %s: %s", self.argv[0], entry)
        return reply

    def _stderr_tail(self) -> str:
        try:
            self.proc.wait(timeout=self.timeout)
            tail = self.proc.stderr.read()[-500:].strip()
        except (subprocess.TimeoutExpired, OSError):
            return ""
        return f" (exit {self.proc.returncode}): {tail}" if tail else f" (exit {self.proc.returncode})"

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for stream in (self.proc.stdout, self.proc.stderr):
            stream.close()


def _input_spec(store, name: str) -> dict:
    info = store.info(name)
    return {"path": str(store.payload_path(name)), "dtype": info.dtype,
            "shape": list(info.shape), "attrs": dict(info.attrs)}


def run_external(argv: list[str], ctx: NodeContext, timeout: float = PLUGIN_TIMEOUT_S) -> None:
    """Run one node through an external plugin and commit its verified outputs."""
    plugin = PluginProcess(argv, timeout)
    try:
        reply = plugin.request({"op": "init", "protocol": PROTOCOL_VERSION,
                                "node_id": ctx.node.node_id, "params": ctx.params})
        if reply["status"] != "ok":
            raise TissueflowError(f"plugin init failed: {reply.get('error', '')}")
        desc = plugin.request({"op": "describe"})
        offered = set(desc.get("outputs", []))
        missing = [n for n in ctx.outputs if not _offers(offered, n)]
        if missing:
            raise PluginProtocolError(f"plugin does not offer outputs {missing}")
        with tempfile.TemporaryDirectory(prefix="tf-stage-") as staging:
            reply = plugin.request({
                "op": "run", "params": ctx.params,
                "inputs": {n: _input_spec(ctx.store, n) for n in ctx.inputs},
                "outputs": list(ctx.outputs), "staging": staging,
            })
            if reply["status"] != "ok":
                raise TissueflowError(f"plugin run failed: {reply.get('error', '')}")
            _commit_outputs(ctx, reply.get("outputs", []), Path(staging))
    finally:
        plugin.close()


def _offers(offered: set[str], name: str) -> bool:
    return any(fnmatch.fnmatchcase(name, pat) for pat in offered)


def _commit_outputs(ctx: NodeContext, outputs: list, staging: Path) -> None:
    entries = []
    for out in outputs:
        try:
            name, dtype, shape, file = out["name"], out["dtype"], out["shape"], out["file"]
        except (KeyError, TypeError) as exc:
            raise PluginProtocolError(f"malformed output entry {out!r}") from exc
        if name not in ctx.outputs:
            raise UndeclaredDataset(f"plugin wrote undeclared dataset {name!r}")
        if dtype not in DTYPES:
            raise PluginProtocolError(f"{name}: unknown dtype {dtype!r}")
        path = (staging / file).resolve()
        if staging.resolve() not in path.parents:
            raise PluginProtocolError(f"{name}: file {file!r} is outside the staging directory")
        expected = DTYPES[dtype].itemsize * math.prod(shape)
        if not path.is_file() or path.stat().st_size != expected:
            raise PluginProtocolError(f"{name}: payload size does not match {dtype}{shape}")
        entries.append((name, dtype, shape, path, out.get("attrs", {})))
    # verify everything before committing anything
    for name, dtype, shape, path, attrs in entries:
        ctx.store.write_dataset(name, dtype, shape, path.read_bytes(), attrs=attrs,
                                actor=ctx.node.node_id)
        ctx.written.append(name)


def make_runner(registry, seed: int | None = None, timeout: float = PLUGIN_TIMEOUT_S):
    """``runner(node, store)`` for the scheduler, resolving tools through ``registry``."""

    def runner(node, store):
        card = registry.get(node.tool_id)
        ctx = NodeContext(node, store, seed)
        if card.is_builtin:
            BUILTINS[card.builtin_name](ctx)
        else:
            run_external(card.command(), ctx, timeout)
        return ctx.written

    return runner

