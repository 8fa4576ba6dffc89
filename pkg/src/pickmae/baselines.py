"""Expert-feature shallow baseline: engineered features + boosted trees.

The booster is an in-repo gradient-boosted ensemble of depth-limited
regression trees on logistic loss (Newton gain, axis-aligned splits), so the
baseline carries no external dependency. Features are computed from the
observable scene data only (masks, depth, candidate); the oracle's hidden
coefficients, density and rigidity are never read.
"""

import dataclasses
import math

import numpy as np

from . import scenegen
from .crops import CropError
from .scenegen import PickCandidate, PickScene

FEATURE_NAMES = (
    "segment_area_norm",
    "visible_fraction",
    "local_depth_variance_under_cups",
    "cup_seal_estimate",
    "pick_to_centroid_distance_norm",
    "height_rank",
    "distance_to_tote_wall_norm",
    "active_cup_count",
)


def extract_features(scene: PickScene, cand: PickCandidate, cfg: dict) -> np.ndarray:
    """Engineered features for one pick; order matches FEATURE_NAMES."""
    h, w = scene.instance_mask.shape
    vis = scene.instance_mask == cand.target_item_id
    vys, vxs = np.nonzero(vis)
    if vys.size == 0:
        raise CropError(f"target item {cand.target_item_id} has no visible pixels")
    item = scene.item(cand.target_item_id)
    visible_px = int(vys.size)
    segment_area_norm = visible_px / float(h * w)
    visible_fraction = min(1.0, visible_px / max(1, item.footprint_px))

    ys, xs = scenegen.cup_footprint_pixels(
        cfg, cand.x, cand.y, cand.wrist_rotation, cand.cup_activation,
        scene.instance_mask.shape)
    depth_var = float(np.var(scene.depth[ys, xs])) if ys.size else 0.0
    seal = scenegen._seal_fraction(cfg, scene, cand)

    cy, cx = float(vys.mean()), float(vxs.mean())
    span = math.hypot(vys.max() - vys.min() + 1, vxs.max() - vxs.min() + 1)
    centroid_dist = min(2.0, math.hypot(cand.y - cy, cand.x - cx) / max(1.0, span / 2.0))

    # rank items by their visible top surface, 1 = topmost
    tops = {}
    for it in scene.items:
        m = scene.instance_mask == it.item_id
        if m.any():
            tops[it.item_id] = float(scene.depth[m].min())
    ranked = sorted(tops, key=lambda i: (tops[i], i))
    height_rank = float(ranked.index(cand.target_item_id) + 1)

    edge = min(cand.x, cand.y, w - 1 - cand.x, h - 1 - cand.y)
    wall_dist = edge / (0.5 * min(h, w))

    n_active = float(bin(cand.cup_activation).count("1"))
    return np.array([
        segment_area_norm, visible_fraction, depth_var, seal,
        centroid_dist, height_rank, wall_dist, n_active,
    ], dtype=np.float64)


# ---------------------------------------------------------------------------
# Boosted regression trees on logistic loss
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TreeNode:
    feature: int = -1          # -1 marks a leaf
    threshold: float = 0.0
    left: int = -1             # child indices into the node list
    right: int = -1
    value: float = 0.0


@dataclasses.dataclass
class ShallowModel:
    intercept: float
    learning_rate: float
    trees: list[list[TreeNode]]
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def serialize(self) -> str:
        lines = [
            f"intercept={self.intercept!r}",
            f"learning_rate={self.learning_rate!r}",
            f"features={','.join(self.feature_names)}",
        ]
        for t, nodes in enumerate(self.trees):
            for i, nd in enumerate(nodes):
                lines.append(
                    f"node tree={t} id={i} feature={nd.feature} "
                    f"threshold={nd.threshold!r} left={nd.left} right={nd.right} "
                    f"value={nd.value!r}"
                )
        return "\n".join(lines) + "\n"

    @staticmethod
    def deserialize(text: str) -> "ShallowModel":
        intercept = lr = 0.0
        names: tuple[str, ...] = FEATURE_NAMES
        trees: dict[int, dict[int, TreeNode]] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("node "):
                kv = dict(tok.split("=", 1) for tok in line[len("node "):].split())
                trees.setdefault(int(kv["tree"]), {})[int(kv["id"])] = TreeNode(
                    feature=int(kv["feature"]), threshold=float(kv["threshold"]),
                    left=int(kv["left"]), right=int(kv["right"]),
                    value=float(kv["value"]))
            elif line.startswith("intercept="):
                intercept = float(line.split("=", 1)[1])
            elif line.startswith("learning_rate="):
                lr = float(line.split("=", 1)[1])
            elif line.startswith("features="):
                names = tuple(line.split("=", 1)[1].split(","))
        tree_list = [
            [trees[t][i] for i in range(len(trees[t]))] for t in sorted(trees)
        ]
        return ShallowModel(intercept=intercept, learning_rate=lr,
                            trees=tree_list, feature_names=names)


def _best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float):
    """Greedy axis-aligned split maximizing the Newton gain; None if no split."""
    n, d = x.shape
    g_total, h_total = g.sum(), h.sum()
    parent = g_total * g_total / (h_total + lam)
    best = None
    for f in range(d):
        order = np.argsort(x[:, f], kind="mergesort")
        xs = x[order, f]
        gc = np.cumsum(g[order])
        hc = np.cumsum(h[order])
        # valid split positions: strictly between distinct consecutive values
        valid = np.nonzero(xs[:-1] < xs[1:])[0]
        if valid.size == 0:
            continue
        gl, hl = gc[valid], hc[valid]
        gr, hr = g_total - gl, h_total - hl
        gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
        k = int(gain.argmax())
        if best is None or gain[k] > best[0] + 1e-12:
            thr = float(0.5 * (xs[valid[k]] + xs[valid[k] + 1]))
            best = (float(gain[k]), f, thr)
    if best is None or best[0] <= 1e-12:
        return None
    return best[1], best[2]


def _grow_tree(x, g, h, depth, lam) -> list[TreeNode]:
    nodes: list[TreeNode] = []

    def leaf_value(idx) -> float:
        return float(-g[idx].sum() / (h[idx].sum() + lam))

    def build(idx, d) -> int:
        node_id = len(nodes)
        nodes.append(TreeNode())
        split = _best_split(x[idx], g[idx], h[idx], lam) if d > 0 and idx.size >= 2 else None
        if split is None:
            nodes[node_id] = TreeNode(value=leaf_value(idx))
            return node_id
        f, thr = split
        go_left = x[idx, f] <= thr
        left = build(idx[go_left], d - 1)
        right = build(idx[~go_left], d - 1)
        nodes[node_id] = TreeNode(feature=f, threshold=thr, left=left, right=right)
        return node_id

    build(np.arange(x.shape[0]), depth)
    return nodes


def _tree_predict(nodes: list[TreeNode], x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0], dtype=np.float64)
    for i in range(x.shape[0]):
        node = nodes[0]
        while node.feature >= 0:
            node = nodes[node.left if x[i, node.feature] <= node.threshold else node.right]
        out[i] = node.value
    return out


def shallow_fit(features: np.ndarray, labels: np.ndarray, rounds: int = 100,
                depth: int = 3, learning_rate: float = 0.2,
                pos_weight: float = 1.0, neg_weight: float = 1.0,
                l2: float = 1.0) -> ShallowModel:
    """Gradient-boosted trees with Newton leaf values on weighted logistic loss."""
    if depth > 3:
        raise ValueError("tree depth is capped at 3")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not ((y == 1).any() and (y == 0).any()):
        raise ValueError("need at least one example per class")
    w = np.where(y == 1, pos_weight, neg_weight)
    p0 = float(np.clip((w * y).sum() / w.sum(), 1e-6, 1 - 1e-6))
    intercept = math.log(p0 / (1 - p0))
    scores = np.full(x.shape[0], intercept)
    trees: list[list[TreeNode]] = []
    for _ in range(rounds):
        p = 1.0 / (1.0 + np.exp(-scores))
        g = w * (p - y)
        h = np.maximum(w * p * (1 - p), 1e-12)
        nodes = _grow_tree(x, g, h, depth, l2)
        trees.append(nodes)
        scores = scores + learning_rate * _tree_predict(nodes, x)
    return ShallowModel(intercept=intercept, learning_rate=learning_rate, trees=trees)


def shallow_predict(model: ShallowModel, features: np.ndarray) -> np.ndarray:
    """Raw logits for a feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    scores = np.full(x.shape[0], model.intercept)
    for nodes in model.trees:
        scores = scores + model.learning_rate * _tree_predict(nodes, x)
    return scores
