"""Multi-view cross-modal alignment.

Each biomarker gets its own projection head into a unit-normalized subspace
where a supervised contrastive loss pulls together views that share that
biomarker's status. Views are the pooled {global, positive, negative}
features of a batch; positive views inherit their sample's biomarker labels
while negative views are labeled with the biomarker's normal status.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import _trunc_normal

BIOMARKER_NAMES = (
    "idh",
    "codel_1p19q",
    "cnv_pten",
    "cnv_egfr",
    "cnv_card11",
    "cnv_fgfr2",
)
IDH_STATES = ("wt", "mut")
CODEL_STATES = ("intact", "codel")
CNV_VALUES = (-2, -1, 0, 1, 2)
# wildtype, intact, and neutral copy number, in panel order
NORMAL_STATUS = (0, 0, 0, 0, 0, 0)

VIEW_NAMES = ("glb", "pos", "neg")


@dataclass(frozen=True)
class BiomarkerPanel:
    """One sample's biomarker statuses, fixed order, small-int encoded."""

    idh: int
    codel_1p19q: int
    cnv_pten: int
    cnv_egfr: int
    cnv_card11: int
    cnv_fgfr2: int

    def __post_init__(self):
        if self.idh not in (0, 1):
            raise ValueError(f"idh status {self.idh} not in {{0, 1}}")
        if self.codel_1p19q not in (0, 1):
            raise ValueError(f"1p/19q status {self.codel_1p19q} not in {{0, 1}}")
        for name in BIOMARKER_NAMES[2:]:
            v = getattr(self, name)
            if v not in CNV_VALUES:
                raise ValueError(f"{name} copy number {v} not in {CNV_VALUES}")

    def values(self) -> tuple[int, ...]:
        return tuple(getattr(self, name) for name in BIOMARKER_NAMES)

    @classmethod
    def from_values(cls, values) -> "BiomarkerPanel":
        return cls(*(int(v) for v in values))

    @classmethod
    def normal(cls) -> "BiomarkerPanel":
        return cls(*NORMAL_STATUS)


def biomarker_value_str(name: str, value: int) -> str:
    if name == "idh":
        return IDH_STATES[value]
    if name == "codel_1p19q":
        return CODEL_STATES[value]
    return str(int(value))


class Projectors:
    """One two-layer head per biomarker; outputs are unit L2-normalized."""

    def __init__(self, params: dict[str, Tensor], embed_dim: int, proj_dim: int):
        self.params = params
        self.embed_dim = embed_dim
        self.proj_dim = proj_dim

    @classmethod
    def init(cls, embed_dim: int, proj_dim: int = 32, seed: int = 0) -> "Projectors":
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(embed_dim)
        params: dict[str, Tensor] = {}
        for name in BIOMARKER_NAMES:
            params[f"{name}.w1"] = Tensor(
                _trunc_normal(rng, (embed_dim, embed_dim), std), requires_grad=True
            )
            params[f"{name}.b1"] = Tensor(np.zeros(embed_dim, np.float32), requires_grad=True)
            params[f"{name}.w2"] = Tensor(
                _trunc_normal(rng, (embed_dim, proj_dim), std), requires_grad=True
            )
            params[f"{name}.b2"] = Tensor(np.zeros(proj_dim, np.float32), requires_grad=True)
        return cls(params, embed_dim, proj_dim)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def project(self, name: str, features: Tensor) -> Tensor:
        h = ad.relu(ad.linear(features, self.params[f"{name}.w1"], self.params[f"{name}.b1"]))
        out = ad.linear(h, self.params[f"{name}.w2"], self.params[f"{name}.b2"])
        return ad.l2_normalize(out, axis=-1)


def assemble_views(
    v_glb: Tensor, v_pos: Tensor, v_neg: Tensor, panels: list[BiomarkerPanel]
) -> tuple[Tensor, np.ndarray]:
    """Pool the three view sets and build per-biomarker label rows.

    Returns features [3B, d] ordered glb block, pos block, neg block, and an
    int label matrix [N, 3B]: global and positive views carry their sample's
    status, negative views the biomarker's normal status.
    """
    b = v_glb.shape[0]
    if b < 2:
        raise ValueError(f"contrastive alignment needs a batch of >= 2, got {b}")
    if len(panels) != b:
        raise ValueError(f"{len(panels)} panels for batch of {b}")
    features = ad.concat([v_glb, v_pos, v_neg], axis=0)
    sample = np.array([p.values() for p in panels], dtype=np.int64).T  # [N, B]
    normal = np.repeat(np.array(NORMAL_STATUS, np.int64)[:, None], b, axis=1)
    labels = np.concatenate([sample, sample, normal], axis=1)
    return features, labels


def view_labels_glb_only(panels: list[BiomarkerPanel]) -> np.ndarray:
    """Label matrix when only global views participate (no region split)."""
    return np.array([p.values() for p in panels], dtype=np.int64).T


def mca_subspace_loss(embeddings: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Supervised contrastive loss over one biomarker subspace.

    For each anchor i, every same-label j != i contributes
    -log(phi(i, j) / sum_{k != i} phi(i, k)); the total is averaged over all
    anchors. Anchors without a same-label partner contribute zero.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    labels = np.asarray(labels)
    m = embeddings.shape[0]
    if labels.shape != (m,):
        raise ValueError(f"labels shape {labels.shape} != ({m},)")

    sims = ad.matmul(embeddings, ad.transpose(embeddings)) * (1.0 / tau)
    off = (~np.eye(m, dtype=bool)).astype(sims.dtype)
    pos = ((labels[:, None] == labels[None, :]) & (off > 0)).astype(sims.dtype)

    # row-wise max over k != i, detached: the usual log-sum-exp shift
    shift = np.where(off > 0, sims.data, -np.inf).max(axis=1)
    expd = ad.mul(ad.exp(sims - Tensor(shift[:, None])), Tensor(off))
    logz = ad.log(ad.reduce_sum(expd, axis=1)) + Tensor(shift)  # [m]

    pos_per_anchor = pos.sum(axis=1)
    term_pos = ad.reduce_sum(ad.mul(sims, Tensor(pos)))
    term_z = ad.reduce_sum(ad.mul(logz, Tensor(pos_per_anchor)))
    return (term_z - term_pos) * (1.0 / m)


def mca_total_loss(
    features: Tensor, labels: np.ndarray, projectors: Projectors, tau: float
) -> Tensor:
    """Sum of subspace losses over all biomarkers; gradients reach both the
    projector parameters and the encoder features."""
    if labels.shape[0] != len(BIOMARKER_NAMES):
        raise ValueError(
            f"label matrix has {labels.shape[0]} rows, expected {len(BIOMARKER_NAMES)}"
        )
    total = None
    for n, name in enumerate(BIOMARKER_NAMES):
        emb = projectors.project(name, features)
        term = mca_subspace_loss(emb, labels[n], tau)
        total = term if total is None else total + term
    return total


def export_embeddings(
    out_dir,
    sample_ids: list[str],
    views: list[str],
    labels: np.ndarray,
    embeddings_by_marker: dict[str, np.ndarray],
) -> list[str]:
    """Write one TSV per biomarker subspace for external plotting.

    Columns: sample_id, view, label, then the projected coordinates.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for n, name in enumerate(BIOMARKER_NAMES):
        emb = embeddings_by_marker[name]
        path = os.path.join(out_dir, f"embeddings_{name}.tsv")
        with open(path, "w") as f:
            dims = "\t".join(f"e{i}" for i in range(emb.shape[1]))
            f.write(f"sample_id\tview\tlabel\t{dims}\n")
            for row in range(emb.shape[0]):
                coords = "\t".join(f"{v:.6g}" for v in emb[row])
                label = biomarker_value_str(name, int(labels[n, row]))
                f.write(f"{sample_ids[row]}\t{views[row]}\t{label}\t{coords}\n")
        written.append(path)
    return written
