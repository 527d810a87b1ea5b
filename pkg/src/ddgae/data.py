"""TUDataset ingestion, node features, padding, and stratified folds.

Raw layout under `<root>/<NAME>/raw/`: `<NAME>_A.txt` with 1-based "i, j"
edge lines (each undirected edge appears in both directions),
`<NAME>_graph_indicator.txt` with one 1-based graph id per node line,
`<NAME>_graph_labels.txt` with one integer per graph, and (for PROTEINS)
`<NAME>_node_labels.txt` with one integer per node.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASETS = ("PROTEINS", "IMDB-BINARY")

TU_ZIP_BASE = "https://www.chrsmrrs.com/graphkerneldatasets"
JSONL_MIRROR_BASE = "https://huggingface.co/datasets/graphs-datasets"

# sha256 of the JSONL mirror files; the official zips are recorded on first
# fetch into the cache's checksums.json because their hashes are not pinned.
JSONL_SHA256 = {
    "PROTEINS": "c5a567a1590e382fc0cefd7a8718c8226093c1bda964899e7a2014d3aef3270a",
    "IMDB-BINARY": "effff0b1740dad1828b1bb93e1c1b58dd9037f0e42d6c0a15a6a8d19878c8e52",
}


class DataError(Exception):
    """Missing files, corrupt datasets, or failed fetches."""


@dataclass
class GraphInstance:
    """One undirected graph: 0-based edges (i < j, deduplicated), optional node labels."""

    n_nodes: int
    edges: list[tuple[int, int]]
    node_labels: list[int] | None
    graph_label: int


@dataclass
class PaddedGraph:
    """Fixed-size tensors for one graph: adjacency, features, and masks."""

    adjacency: np.ndarray  # (N, N) uint8, symmetric, zero diagonal
    features: np.ndarray  # (N, F) float32, zero rows beyond n_nodes
    node_mask: np.ndarray  # (N,) uint8
    edge_mask: np.ndarray  # (N, N) uint8 = outer(node_mask, node_mask) minus diagonal
    label: int


@dataclass
class FoldAssignment:
    k: int
    fold_of: np.ndarray  # per-graph fold index in [0, k)
    seed: int


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DataError(f"missing dataset file: {path}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def raw_dir(root: str | os.PathLike, name: str) -> Path:
    return Path(root) / name / "raw"


def load_tudataset(root: str | os.PathLike, name: str) -> list[GraphInstance]:
    """Load all graphs of a TU dataset from its raw text files.

    Converts 1-based global node indices to per-graph 0-based indices,
    deduplicates undirected edges, and remaps graph labels to {0, 1} by
    sorted order of the raw values.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    d = raw_dir(root, name)
    indicator = [int(x) for x in _read_lines(d / f"{name}_graph_indicator.txt")]
    raw_labels = [int(x) for x in _read_lines(d / f"{name}_graph_labels.txt")]
    n_graphs = len(raw_labels)
    if not indicator or max(indicator) != n_graphs or min(indicator) < 1:
        raise DataError(f"graph_indicator/graph_labels disagree in {d}")

    label_map = {v: i for i, v in enumerate(sorted(set(raw_labels)))}

    # global node id (1-based) -> (graph index, local 0-based id)
    owner = np.asarray(indicator, dtype=np.int64) - 1
    sizes = np.bincount(owner, minlength=n_graphs)
    local = np.empty(len(indicator), dtype=np.int64)
    offsets = np.zeros(n_graphs, dtype=np.int64)
    np.cumsum(sizes[:-1], out=offsets[1:])
    local[:] = np.arange(len(indicator)) - offsets[owner]

    node_labels_path = d / f"{name}_node_labels.txt"
    node_labels = None
    if node_labels_path.is_file():
        node_labels = [int(x) for x in _read_lines(node_labels_path)]
        if len(node_labels) != len(indicator):
            raise DataError(f"node label count does not match node count in {d}")
    elif name == "PROTEINS":
        raise DataError(f"missing dataset file: {node_labels_path}")

    edge_sets: list[set[tuple[int, int]]] = [set() for _ in range(n_graphs)]
    for ln in _read_lines(d / f"{name}_A.txt"):
        parts = ln.replace(",", " ").split()
        if len(parts) != 2:
            raise DataError(f"malformed edge line {ln!r} in {name}_A.txt")
        u, v = int(parts[0]), int(parts[1])
        if not (1 <= u <= len(indicator)) or not (1 <= v <= len(indicator)):
            raise DataError(f"dangling node index in edge ({u}, {v})")
        if owner[u - 1] != owner[v - 1]:
            raise DataError(f"edge ({u}, {v}) crosses graph boundaries")
        if u == v:
            raise DataError(f"self-loop on node {u}")
        g = owner[u - 1]
        i, j = int(local[u - 1]), int(local[v - 1])
        edge_sets[g].add((min(i, j), max(i, j)))

    graphs = []
    pos = 0
    for g in range(n_graphs):
        n = int(sizes[g])
        labels_g = node_labels[pos : pos + n] if node_labels is not None else None
        pos += n
        graphs.append(
            GraphInstance(
                n_nodes=n,
                edges=sorted(edge_sets[g]),
                node_labels=labels_g,
                graph_label=label_map[raw_labels[g]],
            )
        )
    return graphs


def write_tudataset(graphs: list[GraphInstance], root: str | os.PathLike, name: str) -> Path:
    """Serialize graphs back to the raw TU text format (inverse of load_tudataset)."""
    d = raw_dir(root, name)
    d.mkdir(parents=True, exist_ok=True)
    indicator, a_lines, node_label_lines = [], [], []
    offset = 0
    has_node_labels = all(g.node_labels is not None for g in graphs)
    for gi, g in enumerate(graphs, start=1):
        indicator.extend([str(gi)] * g.n_nodes)
        for i, j in g.edges:
            a_lines.append(f"{offset + i + 1}, {offset + j + 1}")
            a_lines.append(f"{offset + j + 1}, {offset + i + 1}")
        if has_node_labels:
            node_label_lines.extend(str(l) for l in g.node_labels)
        offset += g.n_nodes
    (d / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (d / f"{name}_graph_indicator.txt").write_text("\n".join(indicator) + "\n")
    (d / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(g.graph_label) for g in graphs) + "\n"
    )
    if has_node_labels:
        (d / f"{name}_node_labels.txt").write_text("\n".join(node_label_lines) + "\n")
    return d


def directed_entry_count(graphs: list[GraphInstance]) -> int:
    """Edge entries as they appear in the raw file (each undirected edge twice)."""
    return 2 * sum(len(g.edges) for g in graphs)


def build_node_features(g: GraphInstance, policy: str, F: int) -> np.ndarray:
    """(n_nodes, F) float32 feature matrix.

    node_label_onehot: one-hot of the categorical node label (requires labels).
    degree_onehot: one-hot of the node degree clipped to [0, F-1].
    """
    if F < 1:
        raise ValueError(f"feature width must be >= 1, got {F}")
    out = np.zeros((g.n_nodes, F), dtype=np.float32)
    if policy == "node_label_onehot":
        if g.node_labels is None:
            raise ValueError("node_label_onehot requires node labels")
        labels = np.asarray(g.node_labels)
        if labels.size and (labels.min() < 0 or labels.max() >= F):
            raise ValueError(f"node label outside [0, {F})")
        out[np.arange(g.n_nodes), labels] = 1.0
    elif policy == "degree_onehot":
        deg = np.zeros(g.n_nodes, dtype=np.int64)
        for i, j in g.edges:
            deg[i] += 1
            deg[j] += 1
        out[np.arange(g.n_nodes), np.minimum(deg, F - 1)] = 1.0
    else:
        raise ValueError(f"unknown feature policy {policy!r}")
    return out


def default_feature_policy(name: str) -> tuple[str, int]:
    """Per-dataset default: (policy, width)."""
    if name == "PROTEINS":
        return "node_label_onehot", 3
    return "degree_onehot", 136


def pad_and_mask(g: GraphInstance, features: np.ndarray, n_max: int) -> PaddedGraph:
    """Embed one graph into fixed-size (n_max) tensors with node/edge masks."""
    if g.n_nodes > n_max:
        raise ValueError(f"graph with {g.n_nodes} nodes exceeds n_max={n_max}")
    if features.shape[0] != g.n_nodes:
        raise ValueError("feature rows do not match node count")
    adj = np.zeros((n_max, n_max), dtype=np.uint8)
    for i, j in g.edges:
        adj[i, j] = 1
        adj[j, i] = 1
    feats = np.zeros((n_max, features.shape[1]), dtype=np.float32)
    feats[: g.n_nodes] = features
    node_mask = np.zeros(n_max, dtype=np.uint8)
    node_mask[: g.n_nodes] = 1
    edge_mask = np.outer(node_mask, node_mask)
    np.fill_diagonal(edge_mask, 0)
    return PaddedGraph(
        adjacency=adj, features=feats, node_mask=node_mask, edge_mask=edge_mask, label=g.graph_label
    )


def default_max_nodes(graphs: list[GraphInstance], levels: int = 3) -> int:
    """Dataset max node count rounded up to a multiple of 2**levels."""
    m = max(g.n_nodes for g in graphs)
    step = 2**levels
    return ((m + step - 1) // step) * step


def filter_by_max_nodes(
    graphs: list[GraphInstance], cap: int | None
) -> tuple[list[GraphInstance], int]:
    """Apply an optional node-count cap; returns (kept, dropped_count)."""
    if cap is None:
        return graphs, 0
    kept = [g for g in graphs if g.n_nodes <= cap]
    return kept, len(graphs) - len(kept)


def stratified_folds(labels, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Deterministic stratified k-fold assignment.

    Members of each class are shuffled and dealt round-robin, so per-class
    counts across folds differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.full(labels.shape[0], -1, dtype=np.int64)
    for ci, c in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ValueError(f"class {c} has {idx.size} members, fewer than k={k}")
        rng.shuffle(idx)
        start = int(rng.integers(k))
        fold_of[idx] = (start + np.arange(idx.size)) % k
    return FoldAssignment(k=k, fold_of=fold_of, seed=seed)


# --- dataset fetching ---------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, dest: Path, timeout: float = 120.0) -> None:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp, open(dest, "wb") as f:
            shutil.copyfileobj(resp, f)
    except Exception as e:
        raise DataError(f"download failed for {url}: {e}") from e


def _graphs_from_jsonl(path: Path) -> list[GraphInstance]:
    graphs = []
    for ln in path.read_text().splitlines():
        if not ln.strip():
            continue
        row = json.loads(ln)
        src, dst = row["edge_index"]
        edges = sorted({(min(i, j), max(i, j)) for i, j in zip(src, dst) if i != j})
        node_labels = None
        if "node_feat" in row:
            node_labels = [int(np.argmax(f)) for f in row["node_feat"]]
        y = row["y"][0] if isinstance(row["y"], list) else row["y"]
        graphs.append(
            GraphInstance(
                n_nodes=int(row["num_nodes"]),
                edges=edges,
                node_labels=node_labels,
                graph_label=int(y),
            )
        )
    return graphs


def fetch_dataset(name: str, root: str | os.PathLike, force: bool = False) -> Path:
    """Ensure `<root>/<name>/raw/` exists, downloading and verifying if needed.

    Prefers the official zip archive (override base URL with DDGAE_TU_URL);
    falls back to the JSONL mirror (override with DDGAE_JSONL_URL), whose
    sha256 is pinned.  Checksums of the archive and every raw file are
    recorded in `<root>/<name>/checksums.json`.  A populated cache is a hit:
    no network touched.
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    root = Path(root)
    d = raw_dir(root, name)
    if not force and (d / f"{name}_A.txt").is_file():
        return d

    with tempfile.TemporaryDirectory() as tmp:
        tmpdir = Path(tmp)
        record: dict = {"dataset": name}
        zip_url = f"{os.environ.get('DDGAE_TU_URL', TU_ZIP_BASE)}/{name}.zip"
        try:
            archive = tmpdir / f"{name}.zip"
            _download(zip_url, archive)
            digest = _sha256(archive)
            record.update({"source": zip_url, "archive_sha256": digest})
            with zipfile.ZipFile(archive) as zf:
                zf.extractall(tmpdir)
            src = tmpdir / name
            if not src.is_dir():
                raise DataError(f"archive {zip_url} did not contain a {name}/ directory")
            d.mkdir(parents=True, exist_ok=True)
            for f in sorted(src.iterdir()):
                if f.suffix == ".txt":
                    shutil.copy(f, d / f.name)
        except DataError:
            jsonl_url = f"{os.environ.get('DDGAE_JSONL_URL', JSONL_MIRROR_BASE)}/{name}/resolve/main/full.jsonl"
            jsonl = tmpdir / "full.jsonl"
            _download(jsonl_url, jsonl)
            digest = _sha256(jsonl)
            expected = JSONL_SHA256[name]
            if digest != expected:
                raise DataError(
                    f"checksum mismatch for {jsonl_url}: got {digest}, expected {expected}"
                )
            record.update({"source": jsonl_url, "archive_sha256": digest})
            write_tudataset(_graphs_from_jsonl(jsonl), root, name)

    record["files"] = {f.name: _sha256(f) for f in sorted(d.iterdir())}
    (root / name / "checksums.json").write_text(json.dumps(record, indent=2) + "\n")
    return d


def verify_cache(name: str, root: str | os.PathLike) -> bool:
    """Re-hash cached raw files against the recorded checksums."""
    root = Path(root)
    rec_path = root / name / "checksums.json"
    if not rec_path.is_file():
        return False
    record = json.loads(rec_path.read_text())
    for fname, digest in record.get("files", {}).items():
        f = raw_dir(root, name) / fname
        if not f.is_file() or _sha256(f) != digest:
            raise DataError(f"checksum mismatch for cached file {f}")
    return True
