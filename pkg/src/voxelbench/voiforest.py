"""Random-regression-forest localization of organ bounding boxes.

Every candidate voxel p near the body axis is described by the mean
intensities of 50 small cubes displaced from p along fixed directions on three
spheres.  Trees regress the six signed distances from p to the organ box walls
(``p - walls``); at application time every (voxel, tree) pair votes
``p - offset`` for each wall and the median vote wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, TrainingError
from .volgrid import BoundingBoxMM, Volume

FOREST_MAGIC = "voxelbench-forest-1"
OUT_OF_FIELD = -1024.0
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
# voxel-center inclusion tolerance for the closed feature cubes, in voxels
_INCLUSION_TOL = 1e-9


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the sphere (Fibonacci lattice)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * GOLDEN_ANGLE
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class FeatureGeometry:
    sphere_radii: tuple[float, ...] = (50.0, 25.0, 12.5)
    boxes_per_sphere: tuple[int, ...] = (17, 17, 16)
    box_edge: float = 6.0
    out_of_field: float = OUT_OF_FIELD
    directions: np.ndarray = field(init=False, repr=False, compare=False)
    displacements: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        radii = tuple(float(r) for r in self.sphere_radii)
        counts = tuple(int(c) for c in self.boxes_per_sphere)
        if len(radii) != len(counts) or not radii:
            raise ValueError("sphere_radii and boxes_per_sphere must have equal nonzero length")
        if min(radii) <= 0 or self.box_edge <= 0:
            raise ValueError("sphere radii and box edge must be positive")
        if len(set(radii)) != len(radii):
            raise ValueError(f"sphere radii must be distinct, got {radii}")
        if min(counts) < 1:
            raise ValueError("every sphere needs at least one box")
        object.__setattr__(self, "sphere_radii", radii)
        object.__setattr__(self, "boxes_per_sphere", counts)
        object.__setattr__(self, "box_edge", float(self.box_edge))
        dirs = np.concatenate([fibonacci_directions(c) for c in counts])
        radius_per_box = np.repeat(radii, counts)
        dirs.flags.writeable = False
        disp = dirs * radius_per_box[:, None]
        disp.flags.writeable = False
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "displacements", disp)

    @property
    def n_boxes(self) -> int:
        return sum(self.boxes_per_sphere)


def build_feature_geometry(
    sphere_radii=(50.0, 25.0, 12.5), boxes_per_sphere=(17, 17, 16), box_edge=6.0
) -> FeatureGeometry:
    return FeatureGeometry(tuple(sphere_radii), tuple(boxes_per_sphere), box_edge)


def _check_isotropic(volume: Volume) -> float:
    s = volume.spacing
    if max(s) - min(s) > 1e-6:
        raise GeometryError(f"voxel grid must be isotropic, got spacing {s}")
    return float(s[0])


def sample_candidate_voxels(volume: Volume, radius: float = 50.0, stride: int = 1) -> np.ndarray:
    """Voxel indices (N, 3) within ``radius`` mm of the central vertical axis.

    The axis runs along z through the (x, y) world center of the grid.  Voxels
    are first subsampled by ``stride`` along every axis, starting at index 0.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    nx, ny, nz = volume.dims
    ox, oy, _ = volume.origin
    sx, sy, _ = volume.spacing
    cx = ox + 0.5 * (nx - 1) * sx
    cy = oy + 0.5 * (ny - 1) * sy
    ix = np.arange(0, nx, stride)
    iy = np.arange(0, ny, stride)
    iz = np.arange(0, nz, stride)
    dx = ox + ix * sx - cx
    dy = oy + iy * sy - cy
    inside = dx[:, None] ** 2 + dy[None, :] ** 2 <= radius * radius + 1e-9
    px, py = np.nonzero(inside)
    if px.size == 0:
        raise GeometryError(f"no voxel within {radius} mm of the central axis")
    n_xy, n_z = px.size, iz.size
    out = np.empty((n_xy * n_z, 3), dtype=np.int64)
    out[:, 0] = np.repeat(ix[px], n_z)
    out[:, 1] = np.repeat(iy[py], n_z)
    out[:, 2] = np.tile(iz, n_xy)
    return out


def voxel_world(volume: Volume, indices: np.ndarray) -> np.ndarray:
    return np.asarray(volume.origin) + np.asarray(indices, dtype=np.float64) * np.asarray(
        volume.spacing
    )


def integral_volume(voxels: np.ndarray) -> np.ndarray:
    """Zero-padded summed-volume table: ``S[i,j,k]`` sums ``voxels[:i,:j,:k]``."""
    s = np.zeros(tuple(n + 1 for n in voxels.shape), dtype=np.float64)
    s[1:, 1:, 1:] = voxels.astype(np.float64).cumsum(0).cumsum(1).cumsum(2)
    return s


def _box_means(
    table: np.ndarray, volume: Volume, centers: np.ndarray, half_edge: float, fill: float
) -> np.ndarray:
    """Mean over voxel centers inside closed cubes; ``fill`` where none are inside."""
    origin = np.asarray(volume.origin)
    spacing = np.asarray(volume.spacing)
    dims = np.asarray(volume.dims)
    lo = np.ceil((centers - half_edge - origin) / spacing - _INCLUSION_TOL).astype(np.int64)
    hi = np.floor((centers + half_edge - origin) / spacing + _INCLUSION_TOL).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, dims - 1)
    empty = np.any(hi < lo, axis=-1)
    lo = np.where(empty[..., None], 0, lo)
    hi = np.where(empty[..., None], 0, hi) + 1
    x0, y0, z0 = lo[..., 0], lo[..., 1], lo[..., 2]
    x1, y1, z1 = hi[..., 0], hi[..., 1], hi[..., 2]
    total = (
        table[x1, y1, z1]
        - table[x0, y1, z1]
        - table[x1, y0, z1]
        - table[x1, y1, z0]
        + table[x0, y0, z1]
        + table[x0, y1, z0]
        + table[x1, y0, z0]
        - table[x0, y0, z0]
    )
    count = np.prod(hi - lo, axis=-1)
    return np.where(empty, fill, total / count)


def compute_features(
    volume: Volume, points_world: np.ndarray, geometry: FeatureGeometry, table=None
) -> np.ndarray:
    """Feature matrix (N, n_boxes) for world points (N, 3)."""
    _check_isotropic(volume)
    if table is None:
        table = integral_volume(volume.voxels)
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    centers = pts[:, None, :] + geometry.displacements[None, :, :]
    return _box_means(table, volume, centers, 0.5 * geometry.box_edge, geometry.out_of_field)


def compute_feature_vector(volume: Volume, voxel_world_mm, geometry: FeatureGeometry) -> np.ndarray:
    return compute_features(volume, np.asarray(voxel_world_mm, dtype=np.float64)[None], geometry)[0]


def compute_offset(voxel_world_mm, box: BoundingBoxMM) -> np.ndarray:
    """Signed distances ``(x-left, x-right, y-anterior, y-posterior, z-head, z-foot)``.

    Works row-wise on an (N, 3) array of points as well.
    """
    p = np.asarray(voxel_world_mm, dtype=np.float64)
    return np.repeat(p, 2, axis=-1) - box.as_array()


def walls_from_offset(voxel_world_mm, offset) -> np.ndarray:
    return np.repeat(np.asarray(voxel_world_mm, dtype=np.float64), 2, axis=-1) - offset


# ---------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 8
    max_depth: int = 12
    min_leaf: int = 16
    candidate_splits: int = 40
    bootstrap_fraction: float = 0.7
    sample_radius: float = 50.0
    train_stride: int = 2
    predict_stride: int = 2
    seed: int = 0
    geometry: FeatureGeometry = field(default_factory=FeatureGeometry)

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1 or self.candidate_splits < 1:
            raise ValueError("forest hyperparameters must be positive")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError(f"bootstrap fraction must lie in (0, 1], got {self.bootstrap_fraction}")


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Flat binary tree; ``feature[i] < 0`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, 6) mean offsets, meaningful at leaves
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Leaf index for every row of ``features``."""
        node = np.zeros(len(features), dtype=np.int64)
        rows = np.arange(len(features))
        active = self.feature[node] >= 0
        while np.any(active):
            idx = rows[active]
            n = node[idx]
            go_left = features[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.value[self.apply(features)]

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            n, d = stack.pop()
            best = max(best, d)
            if self.feature[n] >= 0:
                stack += [(self.left[n], d + 1), (self.right[n], d + 1)]
        return best


def _sse(sums: np.ndarray, sq: np.ndarray, n: np.ndarray) -> np.ndarray:
    # summed over the six offset components
    with np.errstate(divide="ignore", invalid="ignore"):
        return sq - np.where(n > 0, (sums**2).sum(-1) / n, 0.0)


def grow_tree(
    features: np.ndarray, targets: np.ndarray, cfg: ForestConfig, rng: np.random.Generator
) -> RegressionTree:
    """Grow one tree on the given samples (preorder node numbering)."""
    n_total, n_feat = features.shape
    if n_total < cfg.min_leaf:
        raise TrainingError(f"{n_total} samples is fewer than min_leaf = {cfg.min_leaf}")
    aug = np.concatenate([targets, (targets**2).sum(1, keepdims=True)], axis=1)
    nodes_feat, nodes_thr, nodes_left, nodes_right, nodes_val, nodes_cnt = [], [], [], [], [], []

    def new_node(idx: np.ndarray) -> int:
        nodes_feat.append(-1)
        nodes_thr.append(0.0)
        nodes_left.append(-1)
        nodes_right.append(-1)
        nodes_val.append(targets[idx].mean(axis=0))
        nodes_cnt.append(len(idx))
        return len(nodes_feat) - 1

    def best_split(idx: np.ndarray):
        m = len(idx)
        feats = rng.integers(0, n_feat, size=cfg.candidate_splits)
        picks = rng.integers(0, m, size=cfg.candidate_splits)
        values = features[idx[:, None], feats[None, :]]  # (m, K)
        thr = values[picks, np.arange(cfg.candidate_splits)]
        go_left = values <= thr[None, :]
        node_aug = aug[idx]
        left_stats = go_left.T.astype(np.float64) @ node_aug  # (K, 7)
        n_left = go_left.sum(0).astype(np.float64)
        total = node_aug.sum(0)
        right_stats = total[None, :] - left_stats
        n_right = m - n_left
        valid = (n_left >= cfg.min_leaf) & (n_right >= cfg.min_leaf)
        if not np.any(valid):
            return None
        parent = _sse(total[None, :6], total[None, 6], np.array([m]))[0]
        children = _sse(left_stats[:, :6], left_stats[:, 6], n_left) + _sse(
            right_stats[:, :6], right_stats[:, 6], n_right
        )
        gain = np.where(valid, parent - children, -np.inf)
        k = int(np.argmax(gain))
        if not gain[k] > 1e-12 * max(abs(parent), 1.0):
            return None
        return int(feats[k]), float(thr[k]), go_left[:, k]

    def build(idx: np.ndarray, depth: int) -> int:
        node = new_node(idx)
        if depth >= cfg.max_depth or len(idx) < 2 * cfg.min_leaf:
            return node
        split = best_split(idx)
        if split is None:
            return node
        feat, thr, mask = split
        nodes_feat[node] = feat
        nodes_thr[node] = thr
        nodes_left[node] = build(idx[mask], depth + 1)
        nodes_right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(n_total), 0)
    return RegressionTree(
        np.array(nodes_feat, dtype=np.int64),
        np.array(nodes_thr, dtype=np.float64),
        np.array(nodes_left, dtype=np.int64),
        np.array(nodes_right, dtype=np.int64),
        np.array(nodes_val, dtype=np.float64).reshape(-1, 6),
        np.array(nodes_cnt, dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class Forest:
    trees: list[RegressionTree]
    geometry: FeatureGeometry
    organ: str
    config: ForestConfig

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")

    @property
    def train_meta(self) -> dict:
        c = self.config
        return {
            "tree_count": len(self.trees),
            "max_depth": c.max_depth,
            "min_leaf": c.min_leaf,
            "seed": c.seed,
        }


def training_samples(
    volume: Volume, box: BoundingBoxMM, cfg: ForestConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and offset targets for one case's candidate voxels."""
    idx = sample_candidate_voxels(volume, cfg.sample_radius, cfg.train_stride)
    pts = voxel_world(volume, idx)
    feats = compute_features(volume, pts, cfg.geometry).astype(np.float32)
    return feats, compute_offset(pts, box)


def train_forest(cases, organ: str, cfg: ForestConfig | None = None) -> Forest:
    """Fit a forest on ``[(volume, box), ...]`` of preprocessed (isotropic RAI) cases."""
    cfg = cfg or ForestConfig()
    cases = list(cases)
    if len(cases) < 2:
        raise TrainingError(f"forest training needs at least 2 cases, got {len(cases)}")
    feats, targets = [], []
    for volume, box in cases:
        f, t = training_samples(volume, box, cfg)
        feats.append(f)
        targets.append(t)
    x = np.concatenate(feats)
    y = np.concatenate(targets)
    n = len(x)
    n_boot = max(1, int(round(cfg.bootstrap_fraction * n)))
    trees = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(child)
        boot = np.sort(rng.integers(0, n, size=n_boot))
        trees.append(grow_tree(x[boot], y[boot], cfg, rng))
    return Forest(trees, cfg.geometry, organ, cfg)


def vote_walls(forest: Forest, volume: Volume) -> np.ndarray:
    """All (voxel, tree) wall votes, shape (n_voxels * n_trees, 6)."""
    cfg = forest.config
    idx = sample_candidate_voxels(volume, cfg.sample_radius, cfg.predict_stride)
    pts = voxel_world(volume, idx)
    feats = compute_features(volume, pts, forest.geometry).astype(np.float32)
    votes = [walls_from_offset(pts, tree.predict(feats)) for tree in forest.trees]
    return np.concatenate(votes)


@dataclass(frozen=True)
class WallPrediction:
    walls: np.ndarray
    spread: np.ndarray  # interquartile range of the votes per wall

    @property
    def ordering_violations(self) -> list[str]:
        names = ("left/right", "anterior/posterior", "head/foot")
        return [names[a] for a in range(3) if self.walls[2 * a] > self.walls[2 * a + 1]]

    def box(self) -> BoundingBoxMM:
        bad = self.ordering_violations
        if bad:
            raise GeometryError(
                f"predicted walls out of order on {', '.join(bad)}: {self.walls.tolist()}"
            )
        return BoundingBoxMM.from_array(self.walls)


def predict_walls(forest: Forest, volume: Volume) -> WallPrediction:
    votes = vote_walls(forest, volume)
    q1, med, q3 = np.quantile(votes, [0.25, 0.5, 0.75], axis=0)
    return WallPrediction(med, q3 - q1)


def predict_bbox(forest: Forest, volume: Volume) -> tuple[BoundingBoxMM, np.ndarray]:
    """Median-vote box and per-wall IQR; wall ordering violations raise GeometryError."""
    pred = predict_walls(forest, volume)
    return pred.box(), pred.spread


def box_iou(a: BoundingBoxMM, b: BoundingBoxMM) -> float:
    wa, wb = a.as_array(), b.as_array()
    lo = np.maximum(wa[0::2], wb[0::2])
    hi = np.minimum(wa[1::2], wb[1::2])
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(a.extent()) + np.prod(b.extent())) - inter
    if union <= 0:
        return 1.0 if np.array_equal(wa, wb) else 0.0
    return inter / union


def evaluate_bbox(pred: BoundingBoxMM, gt: BoundingBoxMM) -> dict:
    return {
        "wall_abs_errors": np.abs(pred.as_array() - gt.as_array()),
        "iou_3d": box_iou(pred, gt),
    }


# ---------------------------------------------------------------------------
# forest files


def _fmt(v: float) -> str:
    return repr(float(v))


def save_forest(forest: Forest, path) -> None:
    c, g = forest.config, forest.geometry
    meta = [
        FOREST_MAGIC,
        f"organ={forest.organ}",
        f"trees={len(forest.trees)}",
        f"max_depth={c.max_depth}",
        f"min_leaf={c.min_leaf}",
        f"candidate_splits={c.candidate_splits}",
        f"bootstrap_fraction={_fmt(c.bootstrap_fraction)}",
        f"sample_radius={_fmt(c.sample_radius)}",
        f"train_stride={c.train_stride}",
        f"predict_stride={c.predict_stride}",
        f"seed={c.seed}",
        "radii=" + ",".join(_fmt(r) for r in g.sphere_radii),
        "counts=" + ",".join(str(n) for n in g.boxes_per_sphere),
        f"edge={_fmt(g.box_edge)}",
        f"out_of_field={_fmt(g.out_of_field)}",
    ]
    lines = [" ".join(meta)]
    for k, tree in enumerate(forest.trees):
        lines.append(f"tree {k} {tree.n_nodes}")
        # nodes are stored in preorder already
        for i in range(tree.n_nodes):
            if tree.feature[i] >= 0:
                lines.append(f"N {tree.feature[i]} {_fmt(tree.threshold[i])}")
            else:
                vals = " ".join(_fmt(v) for v in tree.value[i])
                lines.append(f"L {vals} {tree.count[i]}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_tree(lines: list[str], path) -> RegressionTree:
    feat, thr, left, right, val, cnt = [], [], [], [], [], []
    pos = 0

    def node() -> int:
        nonlocal pos
        if pos >= len(lines):
            raise FormatError(f"{path}: truncated tree")
        parts = lines[pos].split()
        pos += 1
        i = len(feat)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        val.append(np.zeros(6))
        cnt.append(0)
        try:
            if parts[0] == "N" and len(parts) == 3:
                feat[i], thr[i] = int(parts[1]), float(parts[2])
                left[i] = node()
                right[i] = node()
            elif parts[0] == "L" and len(parts) == 8:
                val[i] = np.array([float(v) for v in parts[1:7]])
                cnt[i] = int(parts[7])
            else:
                raise ValueError
        except ValueError:
            raise FormatError(f"{path}: malformed node line {' '.join(parts)!r}") from None
        return i

    node()
    if pos != len(lines):
        raise FormatError(f"{path}: node count does not match the tree structure")
    return RegressionTree(
        np.array(feat, dtype=np.int64),
        np.array(thr),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(val).reshape(-1, 6),
        np.array(cnt, dtype=np.int64),
    )


def load_forest(path) -> Forest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty forest file")
    head = lines[0].split()
    if not head or head[0] != FOREST_MAGIC:
        raise FormatError(f"{path}: not a {FOREST_MAGIC} file")
    meta = dict(item.split("=", 1) for item in head[1:])
    try:
        geometry = FeatureGeometry(
            tuple(float(r) for r in meta["radii"].split(",")),
            tuple(int(n) for n in meta["counts"].split(",")),
            float(meta["edge"]),
            float(meta["out_of_field"]),
        )
        cfg = ForestConfig(
            n_trees=int(meta["trees"]),
            max_depth=int(meta["max_depth"]),
            min_leaf=int(meta["min_leaf"]),
            candidate_splits=int(meta["candidate_splits"]),
            bootstrap_fraction=float(meta["bootstrap_fraction"]),
            sample_radius=float(meta["sample_radius"]),
            train_stride=int(meta["train_stride"]),
            predict_stride=int(meta["predict_stride"]),
            seed=int(meta["seed"]),
            geometry=geometry,
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad forest header ({exc})") from None
    trees, pos = [], 1
    for k in range(cfg.n_trees):
        if pos >= len(lines):
            raise FormatError(f"{path}: missing tree {k}")
        parts = lines[pos].split()
        if len(parts) != 3 or parts[0] != "tree" or parts[1] != str(k):
            raise FormatError(f"{path}: expected header for tree {k}, got {lines[pos]!r}")
        n_nodes = int(parts[2])
        trees.append(_parse_tree(lines[pos + 1 : pos + 1 + n_nodes], path))
        pos += 1 + n_nodes
    if pos != len(lines):
        raise FormatError(f"{path}: {len(lines) - pos} unexpected line(s) after the last tree")
    return Forest(trees, geometry, meta.get("organ", ""), cfg)
