"""Final predictions and the NMS / winner-take-all comparators."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Box

PRED_SCHEMA = "drmm-pred/1"


@dataclass(frozen=True)
class Prediction:
    box: Box
    class_index: int
    score: float
    component: int = -1
    p: float = float("nan")   # class probability of the chosen class
    o: float = float("nan")   # objectness


def _rank(preds):
    # score descending, ties by lower component index, then input order
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].component, i))


def extract_arrays(mu, p, o, top_n: int = 100, index=None) -> list:
    """One prediction per component (its argmax class), best ``top_n`` by p * o."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    k = mu.shape[0]
    index = np.arange(k) if index is None else np.asarray(index)
    cls = np.argmax(p, axis=1)
    pc = p[np.arange(k), cls]
    scores = np.clip(pc * o, 0.0, 1.0)
    preds = [
        Prediction(Box.from_array(mu[q], normalized=False), int(cls[q]), float(scores[q]),
                   int(index[q]), float(pc[q]), float(o[q]))
        for q in range(k)
    ]
    return [preds[i] for i in _rank(preds)[:top_n]]


def extract(final_stage, top_n: int = 100) -> list:
    """Predictions from a ``StageState`` scored as p[k, c] * o[k]."""
    m = final_stage.mixture
    _, mu, _, p = m.arrays()
    return extract_arrays(mu, p, np.asarray(final_stage.objectness), top_n, final_stage.index)


def _boxes(preds):
    return np.array([[q.box.l, q.box.t, q.box.r, q.box.b] for q in preds]).reshape(-1, 4)


def _owners(preds, iou_thresh):
    order = _rank(preds)
    # feed the kernel in rank order so its stable sort reproduces our tie rule
    boxes = _boxes([preds[i] for i in order])
    scores = np.array([preds[i].score for i in order])
    owner_ranked = kernels.nms_owner(boxes, scores, iou_thresh)
    owner = np.empty(len(preds), dtype=np.int64)
    for r, i in enumerate(order):
        owner[i] = order[owner_ranked[r]]
    return owner


def nms(preds, iou_thresh: float) -> list:
    """Greedy class-agnostic NMS; a threshold of 1.0 disables it."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    preds = list(preds)
    if iou_thresh >= 1.0 or len(preds) < 2:
        return preds
    owner = _owners(preds, iou_thresh)
    return [q for i, q in enumerate(preds) if owner[i] == i]


def wta(preds, iou_thresh: float) -> list:
    """NMS where each keeper absorbs the scores it suppresses (capped at 1)."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    preds = list(preds)
    if iou_thresh >= 1.0 or len(preds) < 2:
        return preds
    owner = _owners(preds, iou_thresh)
    gained = np.zeros(len(preds))
    for i, k in enumerate(owner):
        if k != i:
            gained[k] += preds[i].score
    out = []
    for i, q in enumerate(preds):
        if owner[i] != i:
            continue
        if gained[i] > 0.0:
            q = Prediction(q.box, q.class_index, min(1.0, q.score + gained[i]), q.component, q.p, q.o)
        out.append(q)
    return out


def postprocess(preds, nms_thresh=None, use_wta=False) -> list:
    if nms_thresh is None:
        return list(preds)
    return wta(preds, nms_thresh) if use_wta else nms(preds, nms_thresh)


# ------------------------------------------------------------ serialization

def pred_to_dict(scene_id: int, q: Prediction) -> dict:
    return {
        "schema": PRED_SCHEMA,
        "scene": int(scene_id),
        "box": [q.box.l, q.box.t, q.box.r, q.box.b],
        "class": q.class_index,
        "score": q.score,
        "component": q.component,
    }


def save_predictions(preds_by_scene: dict, path):
    with open(path, "w") as fh:
        for sid in sorted(preds_by_scene):
            for q in preds_by_scene[sid]:
                fh.write(json.dumps(pred_to_dict(sid, q), separators=(",", ":")))
                fh.write("\n")


def load_predictions(path) -> dict:
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if d.get("schema") != PRED_SCHEMA:
                    raise ValueError(f"unsupported schema {d.get('schema')!r}")
                q = Prediction(Box.from_array(d["box"], normalized=False), int(d["class"]),
                               float(d["score"]), int(d.get("component", -1)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(int(d["scene"]), []).append(q)
    return out


def predict(weights, cfg, scenes, top_n: int = 100, batch_size: int = 128):
    """Final-stage predictions for every scene, keyed by scene id."""
    from .model import forward_batch, stack_rasters

    out = {}
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        trace = forward_batch(weights, cfg, stack_rasters(chunk))
        last = trace.stages[-1]
        p = np.exp(last.act.logp)
        for b, s in enumerate(chunk):
            out[s.id] = extract_arrays(last.act.mu[b], p[b], last.act.o[b], top_n, last.idx[b])
    return out
