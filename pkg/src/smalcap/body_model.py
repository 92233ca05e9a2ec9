"""Articulated parametric body model: template, shape layer, skeleton, LBS.

The model file is a single JSON document; see ``BodyModel.to_json``.
All operations are pure functions of their inputs; a ``BodyModel`` is
never mutated after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .rotation import mirror_rodrigues, rodrigues_to_matrix

N_JOINTS = 35
N_LANDMARKS = 28
POSE_DIM = 3 * N_JOINTS


@dataclass(frozen=True, eq=False)
class BodyModel:
    vertices: np.ndarray            # (V, 3) template, model units
    faces: np.ndarray               # (F, 3) int
    symmetry_map: np.ndarray        # (V,) mirror partner across x=0
    W: np.ndarray                   # (3*Vh, F) shape basis on the half mesh
    b: np.ndarray                   # (3*Vh,)
    parent: np.ndarray              # (N,) -1 for the root
    joint_regressor: sparse.csr_matrix   # (N, V)
    skinning_weights: np.ndarray    # (V, N) dense
    landmark_vertices: np.ndarray   # (28, 3) vertex ids
    landmark_weights: np.ndarray    # (28, 3) barycentric weights
    joint_mirror: np.ndarray        # (N,)
    landmark_mirror: np.ndarray     # (28,)
    face_uvs: np.ndarray | None = None       # (F, 3, 2) in [0, 1]
    region_layout: np.ndarray | None = None  # (4, 4) x0, y0, w, h textels
    atlas_size: int = 256
    joint_names: tuple = ()
    landmark_names: tuple = ()
    torso_landmarks: tuple = ()
    landmark_faces: np.ndarray | None = None  # (28,) or -1 for vertex landmarks
    meta: dict = field(default_factory=dict)

    # ------------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_joints(self):
        return len(self.parent)

    @property
    def n_features(self):
        return self.W.shape[1]

    @cached_property
    def half_index(self):
        """Vertices parameterized by the shape layer: x > 0 side plus the plane."""
        sym = self.symmetry_map
        idx = np.arange(self.n_vertices)
        keep = (sym == idx) | (self.vertices[:, 0] > 0)
        return idx[keep]

    @cached_property
    def _reflect(self):
        # gather index into the half mesh and x-sign per full vertex
        half = self.half_index
        pos = np.full(self.n_vertices, -1)
        pos[half] = np.arange(len(half))
        sym = self.symmetry_map
        idx = np.where(pos >= 0, pos, pos[sym])
        sign = np.where(pos >= 0, 1.0, -1.0)
        sign[sym == np.arange(self.n_vertices)] = 0.0
        mult = np.stack([sign, np.ones_like(sign), np.ones_like(sign)], axis=1)
        return idx, mult

    @cached_property
    def topo_order(self):
        children = [[] for _ in range(self.n_joints)]
        roots = []
        for j, p in enumerate(self.parent):
            if p < 0:
                roots.append(j)
            else:
                children[p].append(j)
        order = []
        stack = list(reversed(roots))
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        return np.array(order)

    @cached_property
    def landmark_matrix(self):
        """Sparse (28, V) interpolation matrix."""
        rows = np.repeat(np.arange(len(self.landmark_vertices)), 3)
        return sparse.csr_matrix(
            (self.landmark_weights.ravel(), (rows, self.landmark_vertices.ravel())),
            shape=(len(self.landmark_vertices), self.n_vertices),
        )

    @cached_property
    def reflect_matrix(self):
        """Explicit (3V, 3Vh) reflection operator; used by tests and Jacobians."""
        idx, mult = self._reflect
        V = self.n_vertices
        rows = np.arange(3 * V)
        cols = (3 * idx[:, None] + np.arange(3)[None]).ravel()
        return sparse.csr_matrix((mult.ravel(), (rows, cols)), shape=(3 * V, 3 * len(self.half_index)))

    # ------------------------------------------------------------------
    def reflect(self, d_half):
        """Expand (Vh, 3) half-mesh displacements to the full mesh."""
        idx, mult = self._reflect
        return np.asarray(d_half).reshape(-1, 3)[idx] * mult

    def reflect_vjp(self, g_full):
        idx, mult = self._reflect
        out = np.zeros((len(self.half_index), 3))
        np.add.at(out, idx, g_full * mult)
        return out

    def validate(self):
        """Raise ValueError if any structural invariant is violated."""
        V, F = self.n_vertices, len(self.faces)
        f = self.faces
        if f.min() < 0 or f.max() >= V:
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face")
        sym = self.symmetry_map
        if not np.array_equal(sym[sym], np.arange(V)):
            raise ValueError("symmetry_map is not an involution")
        mirrored = self.vertices[sym] * np.array([-1.0, 1.0, 1.0])
        if np.abs(mirrored - self.vertices).max() > 1e-6:
            raise ValueError("template is not mirror symmetric")
        if self.W.shape[0] != 3 * len(self.half_index) or self.b.shape != (self.W.shape[0],):
            raise ValueError("shape layer does not match the half mesh")
        self._check_tree()
        w = self.skinning_weights
        if w.shape != (V, self.n_joints) or w.min() < 0:
            raise ValueError("skinning weights must be non-negative (V, N)")
        if np.abs(w.sum(1) - 1).max() > 1e-6:
            raise ValueError("skinning weights must sum to 1")
        jr = self.joint_regressor
        if jr.shape != (self.n_joints, V) or (jr.data < 0).any():
            raise ValueError("joint regressor must be non-negative (N, V)")
        if np.abs(np.asarray(jr.sum(1)).ravel() - 1).max() > 1e-6:
            raise ValueError("joint regressor rows must sum to 1")
        lw = self.landmark_weights
        if lw.min() < 0 or np.abs(lw.sum(1) - 1).max() > 1e-9:
            raise ValueError("landmark weights must be a convex combination")
        if self.landmark_vertices.min() < 0 or self.landmark_vertices.max() >= V:
            raise ValueError("landmark vertex out of range")
        if self.landmark_faces is not None:
            fid = self.landmark_faces
            if fid.max() >= F:
                raise ValueError("invalid landmark face index")
        for name, m in (("joint_mirror", self.joint_mirror), ("landmark_mirror", self.landmark_mirror)):
            if not np.array_equal(m[m], np.arange(len(m))):
                raise ValueError(f"{name} is not an involution")
        if self.face_uvs is not None:
            if self.face_uvs.shape != (F, 3, 2):
                raise ValueError("face_uvs must be (F, 3, 2)")
            region = uv_regions(self.face_uvs.reshape(-1, 2) * self.atlas_size, self.region_layout)
            if (region < 0).any():
                raise ValueError("uv coordinate outside every layout region")
        return self

    def _check_tree(self):
        parent = self.parent
        if (parent < 0).sum() != 1:
            raise ValueError("skeleton must have exactly one root")
        for j in range(len(parent)):
            seen = set()
            k = j
            while k >= 0:
                if k in seen:
                    raise ValueError("cycle in kinematic tree")
                seen.add(k)
                k = parent[k]

    # ------------------------------------------------------------------
    def to_json(self):
        jr = self.joint_regressor.tocoo()
        sw = sparse.coo_matrix(self.skinning_weights)
        emb = []
        for k in range(len(self.landmark_vertices)):
            fid = -1 if self.landmark_faces is None else int(self.landmark_faces[k])
            if fid < 0:
                emb.append({"vertex": int(self.landmark_vertices[k, 0])})
            else:
                emb.append({"face": fid, "weights": self.landmark_weights[k].tolist()})
        doc = {
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "symmetry_map": self.symmetry_map.tolist(),
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "parent": self.parent.tolist(),
            "joint_regressor": _triplets(jr),
            "skinning_weights": _triplets(sw),
            "landmark_embedding": emb,
            "joint_mirror_table": self.joint_mirror.tolist(),
            "landmark_mirror_table": self.landmark_mirror.tolist(),
            "joint_names": list(self.joint_names),
            "landmark_names": list(self.landmark_names),
            "torso_landmarks": list(self.torso_landmarks),
            "atlas_size": self.atlas_size,
            "meta": self.meta,
        }
        if self.face_uvs is not None:
            doc["face_uvs"] = self.face_uvs.tolist()
            doc["region_layout"] = np.asarray(self.region_layout).tolist()
        return doc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))

    @classmethod
    def from_json(cls, doc):
        V = len(doc["vertices"])
        faces = np.asarray(doc["faces"], dtype=np.int64)
        parent = np.asarray(doc["parent"], dtype=np.int64)
        N = len(parent)
        jr = _from_triplets(doc["joint_regressor"], (N, V)).tocsr()
        sw = _from_triplets(doc["skinning_weights"], (V, N)).toarray()
        lv, lw, lf = [], [], []
        for e in doc["landmark_embedding"]:
            if "vertex" in e:
                lv.append([e["vertex"]] * 3)
                lw.append([1.0, 0.0, 0.0])
                lf.append(-1)
            else:
                fid = int(e["face"])
                if not 0 <= fid < len(faces):
                    raise ValueError(f"invalid landmark face index {fid}")
                lv.append(faces[fid].tolist())
                lw.append(e["weights"])
                lf.append(fid)
        face_uvs = doc.get("face_uvs")
        layout = doc.get("region_layout")
        return cls(
            vertices=np.asarray(doc["vertices"], dtype=np.float64),
            faces=faces,
            symmetry_map=np.asarray(doc["symmetry_map"], dtype=np.int64),
            W=np.asarray(doc["W"], dtype=np.float64).reshape(-1, len(doc["W"][0]) if doc["W"] else 0),
            b=np.asarray(doc["b"], dtype=np.float64),
            parent=parent,
            joint_regressor=jr,
            skinning_weights=sw,
            landmark_vertices=np.asarray(lv, dtype=np.int64),
            landmark_weights=np.asarray(lw, dtype=np.float64),
            joint_mirror=np.asarray(doc["joint_mirror_table"], dtype=np.int64),
            landmark_mirror=np.asarray(doc.get("landmark_mirror_table", range(len(lv))), dtype=np.int64),
            face_uvs=None if face_uvs is None else np.asarray(face_uvs, dtype=np.float64),
            region_layout=None if layout is None else np.asarray(layout, dtype=np.int64),
            atlas_size=int(doc.get("atlas_size", 256)),
            joint_names=tuple(doc.get("joint_names", ())),
            landmark_names=tuple(doc.get("landmark_names", ())),
            torso_landmarks=tuple(doc.get("torso_landmarks", ())),
            landmark_faces=np.asarray(lf, dtype=np.int64),
            meta=doc.get("meta", {}),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh)).validate()


def _triplets(coo):
    return {"shape": list(coo.shape), "rows": coo.row.tolist(), "cols": coo.col.tolist(),
            "values": coo.data.tolist()}


def _from_triplets(t, shape):
    return sparse.coo_matrix((t["values"], (t["rows"], t["cols"])), shape=tuple(t.get("shape", shape)))


def uv_regions(uv_textels, layout):
    """Region index of each (u, v) textel coordinate, -1 if outside all regions."""
    uv = np.asarray(uv_textels)
    out = np.full(len(uv), -1)
    for k, (x0, y0, w, h) in enumerate(np.asarray(layout)):
        inside = (uv[:, 0] >= x0) & (uv[:, 0] <= x0 + w) & (uv[:, 1] >= y0) & (uv[:, 1] <= y0 + h)
        out[(out < 0) & inside] = k
    return out


# ----------------------------------------------------------------------
# pose state


@dataclass
class PoseState:
    theta: np.ndarray                  # (35, 3) Rodrigues vectors
    gamma: np.ndarray                  # (3,) camera-frame translation
    focal_x: float = 0.0               # f = f0 + f1 * focal_x
    shape: np.ndarray | None = None    # (F,) shape features
    dv: np.ndarray | None = None       # (Vh, 3) free half-mesh displacement

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        if self.theta.size != POSE_DIM:
            raise ValueError(f"pose must have {POSE_DIM} entries, got {self.theta.size}")
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3)
        self.focal_x = float(self.focal_x)
        if self.shape is not None:
            self.shape = np.asarray(self.shape, dtype=np.float64).ravel()
        if self.dv is not None:
            self.dv = np.asarray(self.dv, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def zeros(cls, model, gamma=(0.0, 0.0, 0.0)):
        return cls(np.zeros((model.n_joints, 3)), gamma, 0.0, np.zeros(model.n_features))

    def copy(self):
        return PoseState(self.theta.copy(), self.gamma.copy(), self.focal_x,
                         None if self.shape is None else self.shape.copy(),
                         None if self.dv is None else self.dv.copy())

    def to_dict(self):
        d = {"theta": self.theta.ravel().tolist(), "gamma": self.gamma.tolist(),
             "focal_x": self.focal_x,
             "shape": None if self.shape is None else self.shape.tolist()}
        if self.dv is not None:
            d["dv"] = self.dv.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta"], d["gamma"], d.get("focal_x", 0.0), d.get("shape"), d.get("dv"))

    def mirrored(self, model):
        """State whose posed mesh is the x=0 mirror image of this one."""
        theta = mirror_rodrigues(self.theta[model.joint_mirror])
        gamma = self.gamma * np.array([-1.0, 1.0, 1.0])
        dv = None
        if self.dv is not None:
            # the half mesh is its own mirror only through the reflection
            full = model.reflect(self.dv)
            dv = (full[model.symmetry_map] * np.array([-1.0, 1.0, 1.0]))[model.half_index]
        return PoseState(theta, gamma, self.focal_x,
                         None if self.shape is None else self.shape.copy(), dv)


# ----------------------------------------------------------------------
# shape layer


def shape_displacement(model, f_s, dv=None):
    """Full-mesh displacement reflect(W f_s + b) (+ reflect(dv))."""
    f_s = np.asarray(f_s, dtype=np.float64).ravel()
    if f_s.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} shape features, got {f_s.shape[0]}")
    d = (model.W @ f_s + model.b).reshape(-1, 3)
    if dv is not None:
        dv = np.asarray(dv, dtype=np.float64).reshape(-1, 3)
        if dv.shape != d.shape:
            raise ValueError("free displacement must cover the half mesh")
        d = d + dv
    return model.reflect(d)


def shape_vertices(model, f_s, dv=None, jacobian=False):
    """Shaped T-pose vertices v_template + reflect(W f_s + b [+ dv]).

    With ``jacobian=True`` also returns d v_shape / d f_s as (V, 3, F).
    """
    v = model.vertices + shape_displacement(model, f_s, dv)
    if not jacobian:
        return v
    idx, mult = model._reflect
    Wh = model.W.reshape(-1, 3, model.n_features)
    return v, Wh[idx] * mult[:, :, None]


# ----------------------------------------------------------------------
# kinematics


@dataclass
class JointTransforms:
    rotations: np.ndarray   # (N, 3, 3) world rotation per joint
    positions: np.ndarray   # (N, 3) posed joint locations
    rest: np.ndarray        # (N, 3) rest joint locations
    local: np.ndarray       # (N, 3, 3) relative rotations
    local_jac: np.ndarray   # (N, 3, 3, 3) d local / d theta

    def skinning_matrices(self):
        """(N, 3, 4) transforms mapping rest-pose points to posed points."""
        t = self.positions - np.einsum("nab,nb->na", self.rotations, self.rest)
        return np.concatenate([self.rotations, t[:, :, None]], axis=2)


def regress_joints(model, v_shape):
    return model.joint_regressor @ v_shape


def forward_kinematics(model, v_shape, theta):
    """World transforms of every joint for Rodrigues pose ``theta``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    if theta.shape != (model.n_joints, 3):
        raise ValueError(f"pose must be ({model.n_joints}, 3)")
    J = regress_joints(model, v_shape)
    R, dR = rodrigues_to_matrix(theta, jacobian=True)
    Rw = np.empty_like(R)
    tw = np.empty_like(J)
    parent = model.parent
    for j in model.topo_order:
        p = parent[j]
        if p < 0:
            Rw[j] = R[j]
            tw[j] = J[j]
        else:
            Rw[j] = Rw[p] @ R[j]
            tw[j] = Rw[p] @ (J[j] - J[p]) + tw[p]
    return JointTransforms(Rw, tw, J, R, dR)


def skin(v_shape, transforms, skinning_weights, gamma=None):
    """Linear blend skinning: v_i = sum_j w_ij T_j(v_i) + gamma."""
    A = transforms.skinning_matrices() if isinstance(transforms, JointTransforms) else np.asarray(transforms)
    M = np.einsum("vj,jab->vab", skinning_weights, A)
    out = np.einsum("vab,vb->va", M[:, :, :3], v_shape) + M[:, :, 3]
    if gamma is not None:
        out = out + np.asarray(gamma, dtype=np.float64)
    return out


def landmarks3d(model, vertices):
    """Barycentric interpolation of the 28 landmarks on a (posed) mesh."""
    v = np.asarray(vertices)
    return np.einsum("lk,lkd->ld", model.landmark_weights, v[model.landmark_vertices])


# ----------------------------------------------------------------------
# full chain with reverse-mode gradients


@dataclass
class PosedModel:
    model: BodyModel
    v_shape: np.ndarray
    fk: JointTransforms
    vertices: np.ndarray      # posed, camera frame (includes gamma)
    landmarks: np.ndarray     # (28, 3)
    blended: np.ndarray       # (V, 3, 3) per-vertex blended rotations

    def vjp(self, g_vertices=None, g_landmarks=None):
        """Gradients w.r.t. theta (N,3), shape (F,), gamma (3,), dv (Vh,3)."""
        model = self.model
        V = model.n_vertices
        g = np.zeros((V, 3)) if g_vertices is None else np.array(g_vertices, dtype=np.float64)
        if g_landmarks is not None:
            gl = np.asarray(g_landmarks)
            np.add.at(g, model.landmark_vertices.ravel(),
                      (model.landmark_weights[:, :, None] * gl[:, None, :]).reshape(-1, 3))
        fk = self.fk
        w = model.skinning_weights
        J = fk.rest
        g_gamma = g.sum(0)
        g_vshape = np.einsum("vba,vb->va", self.blended, g)
        Gj = w.T @ g                                        # (N, 3)
        Pj = np.einsum("vj,va,vb->jab", w, g, self.v_shape)  # (N, 3, 3)
        dRw = Pj - Gj[:, :, None] * J[:, None, :]
        dtw = Gj.copy()
        dJ = -np.einsum("nba,nb->na", fk.rotations, Gj)
        dR = np.zeros_like(fk.local)
        parent = model.parent
        Rw, R = fk.rotations, fk.local
        for j in model.topo_order[::-1]:
            p = parent[j]
            if p < 0:
                dR[j] = dRw[j]
                dJ[j] += dtw[j]
                continue
            dRw[p] += np.outer(dtw[j], J[j] - J[p])
            t = Rw[p].T @ dtw[j]
            dJ[j] += t
            dJ[p] -= t
            dtw[p] += dtw[j]
            dRw[p] += dRw[j] @ R[j].T
            dR[j] = Rw[p].T @ dRw[j]
        g_theta = np.einsum("nab,nabi->ni", dR, fk.local_jac)
        g_vshape += model.joint_regressor.T @ dJ
        g_half = model.reflect_vjp(g_vshape)
        return {"theta": g_theta, "shape": model.W.T @ g_half.ravel(), "gamma": g_gamma, "dv": g_half}


def pose_model(model, theta, shape=None, gamma=None, dv=None):
    """Shape, articulate and translate the model; returns a ``PosedModel``."""
    if shape is None:
        shape = np.zeros(model.n_features)
    v_shape = shape_vertices(model, shape, dv)
    fk = forward_kinematics(model, v_shape, theta)
    A = fk.skinning_matrices()
    M = np.einsum("vj,jab->vab", model.skinning_weights, A)
    verts = np.einsum("vab,vb->va", M[:, :, :3], v_shape) + M[:, :, 3]
    if gamma is not None:
        verts = verts + np.asarray(gamma, dtype=np.float64)
    return PosedModel(model, v_shape, fk, verts, landmarks3d(model, verts), M[:, :, :3])


def pose_state(model, state):
    return pose_model(model, state.theta, state.shape, state.gamma, state.dv)


def pose_jacobians(model, theta, shape=None, gamma=None):
    """Dense forward-mode Jacobians of posed vertices.

    Returns dict with ``theta`` (V, 3, N, 3), ``shape`` (V, 3, F) and
    ``gamma`` (V, 3, 3).
    """
    if shape is None:
        shape = np.zeros(model.n_features)
    v_shape, dvs = shape_vertices(model, shape, jacobian=True)
    fk = forward_kinematics(model, v_shape, theta)
    N = model.n_joints
    w = model.skinning_weights
    Rw, R, dR, J = fk.rotations, fk.local, fk.local_jac, fk.rest
    parent = model.parent

    # derivative of every world transform w.r.t. every pose parameter
    dRw = np.zeros((N, 3, N, 3, 3))   # [param joint, comp, joint, 3, 3]
    dtw = np.zeros((N, 3, N, 3))
    for j in model.topo_order:
        p = parent[j]
        if p < 0:
            dRw[j, :, j] = np.moveaxis(dR[j], -1, 0)
            continue
        dRw[:, :, j] = dRw[:, :, p] @ R[j]
        dRw[j, :, j] += Rw[p] @ np.moveaxis(dR[j], -1, 0)
        dtw[:, :, j] = dRw[:, :, p] @ (J[j] - J[p]) + dtw[:, :, p]
    # d/dtheta of  Rw_j (v - J_j) + tw_j
    rel = v_shape[:, None, :] - J[None]                       # (V, N, 3)
    jt = np.einsum("vj,pcjab,vjb->vapc", w, dRw, rel) + np.einsum("vj,pcja->vapc", w, dtw)

    # shape: both rest vertices and joint locations move
    F = model.n_features
    dJ = np.einsum("nv,vaf->naf", model.joint_regressor.toarray(), dvs)    # (N, 3, F)
    dtw_s = np.zeros((N, 3, F))
    for j in model.topo_order:
        p = parent[j]
        if p < 0:
            dtw_s[j] = dJ[j]
        else:
            dtw_s[j] = Rw[p] @ (dJ[j] - dJ[p]) + dtw_s[p]
    M = np.einsum("vj,jab->vab", w, Rw)
    js = np.einsum("vab,vbf->vaf", M, dvs)
    js -= np.einsum("vj,jab,jbf->vaf", w, Rw, dJ)
    js += np.einsum("vj,jaf->vaf", w, dtw_s)

    jg = np.broadcast_to(np.eye(3), (model.n_vertices, 3, 3)).copy()
    return {"theta": jt, "shape": js, "gamma": jg}


def export_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v %.6f %.6f %.6f\n" % (v[0], v[1], v[2]))
        for f in np.asarray(faces) + 1:
            fh.write("f %d %d %d\n" % (f[0], f[1], f[2]))
