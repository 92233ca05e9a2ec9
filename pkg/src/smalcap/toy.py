"""Procedural low-poly quadruped with 35 joints and 28 surface landmarks.

Model frame: x lateral (symmetry plane x=0), y down, z backwards (the
head points towards -z). The root joint sits at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .body_model import BodyModel, N_JOINTS

JOINT_NAMES = (
    "root", "spine0", "spine1", "spine2", "spine3",
    "neck0", "neck1", "neck2", "head", "jaw", "ear_L", "ear_R",
    "scapula_L", "shoulder_L", "elbow_L", "carpus_L", "fetlock_FL",
    "scapula_R", "shoulder_R", "elbow_R", "carpus_R", "fetlock_FR",
    "hip_L", "stifle_L", "hock_L", "fetlock_HL",
    "hip_R", "stifle_R", "hock_R", "fetlock_HR",
    "tail0", "tail1", "tail2", "tail3", "tail4",
)

PARENT = (
    -1, 0, 1, 2, 3,
    4, 5, 6, 7, 8, 8, 8,
    4, 12, 13, 14, 15,
    4, 17, 18, 19, 20,
    0, 22, 23, 24,
    0, 26, 27, 28,
    0, 30, 31, 32, 33,
)

LANDMARK_NAMES = (
    "nose", "chin", "eye_L", "eye_R", "ear_base_L", "ear_base_R",
    "ear_tip_L", "ear_tip_R", "withers", "throat", "tail_base", "tail_tip",
    "shoulder_L", "elbow_L", "knee_L", "front_hoof_L",
    "shoulder_R", "elbow_R", "knee_R", "front_hoof_R",
    "stifle_L", "hock_L", "fetlock_L", "hind_hoof_L",
    "stifle_R", "hock_R", "fetlock_R", "hind_hoof_R",
)

TORSO_LANDMARKS = ("withers", "throat", "tail_base", "shoulder_L", "shoulder_R",
                   "stifle_L", "stifle_R")

# rest joint locations before scaling; left side only for paired joints
_JOINTS = {
    "root": (0.0, 0.0, 0.0),
    "spine0": (0.0, -0.02, -0.3),
    "spine1": (0.0, -0.03, -0.6),
    "spine2": (0.0, -0.03, -0.9),
    "spine3": (0.0, 0.0, -1.15),
    "neck0": (0.0, -0.1, -1.35),
    "neck1": (0.0, -0.35, -1.5),
    "neck2": (0.0, -0.6, -1.6),
    "head": (0.0, -0.75, -1.7),
    "ear_L": (0.07, -0.86, -1.7),
    "scapula_L": (0.17, -0.05, -1.05),
    "shoulder_L": (0.2, 0.25, -1.1),
    "elbow_L": (0.2, 0.55, -1.05),
    "carpus_L": (0.2, 0.9, -1.1),
    "fetlock_FL": (0.2, 1.15, -1.1),
    "hip_L": (0.19, 0.0, 0.05),
    "stifle_L": (0.22, 0.4, -0.1),
    "hock_L": (0.2, 0.75, 0.15),
    "fetlock_HL": (0.2, 1.15, 0.1),
    "tail0": (0.0, -0.05, 0.25),
    "tail1": (0.0, 0.1, 0.38),
    "tail2": (0.0, 0.3, 0.46),
    "tail3": (0.0, 0.5, 0.5),
    "tail4": (0.0, 0.7, 0.52),
}


@dataclass
class ToyConfig:
    seed: int = 0
    scale: float = 0.75
    trunk_ring: int = 16
    neck_ring: int = 12
    leg_ring: int = 10
    tail_ring: int = 8
    ear_ring: int = 6
    subdiv: int = 3
    n_features: int = 40
    feature_rms: float = 0.02   # rms vertex displacement per unit feature
    blend: float = 0.3          # skinning blend width, fraction of a bone

    def check(self):
        for name in ("trunk_ring", "neck_ring", "tail_ring"):
            if getattr(self, name) % 4:
                raise ValueError(f"{name} must be a multiple of 4 for an exact mirror ring")
        if self.leg_ring < 3 or self.ear_ring < 3 or self.subdiv < 1:
            raise ValueError("ring and subdivision counts too small")
        if self.n_features < 12:
            raise ValueError("need at least 12 shape features")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


class _Builder:
    def __init__(self, n_joints):
        self.verts = []
        self.weights = []       # dict joint -> weight per vertex
        self.faces = []
        self.face_uvs = []
        self.face_inner = []    # interior reference point per face
        self.regressor = {}     # joint -> list of vertex ids
        self.tube_of = []       # tube name per vertex
        self.rings = {}         # tube name -> list of ring vertex id arrays
        self.caps = {}          # tube name -> (start, end) cap vertex ids
        self.n_joints = n_joints

    def add_vertex(self, p, w, tube):
        self.verts.append(np.asarray(p, dtype=np.float64))
        self.weights.append(dict(w))
        self.tube_of.append(tube)
        return len(self.verts) - 1

    def add_face(self, ids, uvs, inner):
        self.faces.append(list(ids))
        self.face_uvs.append(np.asarray(uvs, dtype=np.float64))
        self.face_inner.append(np.asarray(inner, dtype=np.float64))


def _station_weights(owners, parent_joint, t_bone, bone, n_bones, blend):
    """Weights for a point at fraction ``t_bone`` of bone ``bone`` of a chain."""
    own = owners[bone]
    w = {own: 1.0}
    if t_bone > 1.0 - blend and bone + 1 < n_bones:
        nxt = owners[bone + 1]
        a = 0.5 * (t_bone - (1.0 - blend)) / blend
        w = {own: 1.0 - a, nxt: a}
    elif t_bone < blend:
        prev = owners[bone - 1] if bone > 0 else parent_joint
        if prev is not None and prev != own:
            a = 0.5 * (1.0 - t_bone / blend)
            w = {own: 1.0 - a, prev: a}
    return w


def _frame(tangent, hint):
    t = tangent / np.linalg.norm(tangent)
    e1 = hint - t * (hint @ t)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t, e1)
    return t, e1, e2


def _tube(builder, name, points, owners, parent_joint, radii, n_ring, chart,
          cfg, sagittal, joint_at=None, cap_start=True, cap_end=True, up=None):
    """Generalized cylinder through ``points`` (one bone per segment).

    ``radii`` gives (r1, r2) per point; ``joint_at`` maps point index to
    the joint whose regressor row is that ring's centroid.
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    n_bones = len(points) - 1
    stations = []
    for bone in range(n_bones):
        last = bone == n_bones - 1
        steps = cfg.subdiv + (1 if last else 0)
        for s in range(steps):
            t = s / cfg.subdiv
            p = (1 - t) * points[bone] + t * points[bone + 1]
            r = (1 - t) * np.asarray(radii[bone]) + t * np.asarray(radii[bone + 1])
            tb = t if t < 1 else 1.0
            w = _station_weights(owners, parent_joint, tb, bone, n_bones, cfg.blend)
            stations.append((p, r, w, bone, s == 0, bone + (1 if t >= 1 else 0)))
    P = np.array([s[0] for s in stations])
    tangents = np.gradient(P, axis=0)
    x_axis = np.array([1.0, 0.0, 0.0])
    up = np.array([0.0, -1.0, 0.0]) if up is None else np.asarray(up, float)
    ring_ids = []
    x0, y0, w, h = chart
    n_st = len(stations)
    for si, (p, r, wts, bone, is_joint, pidx) in enumerate(stations):
        if sagittal:
            t = tangents[si] / np.linalg.norm(tangents[si])
            e1 = x_axis
            e2 = np.cross(t, e1)
            if e2 @ up < 0:
                e2 = -e2
        else:
            t, e1, e2 = _frame(tangents[si], x_axis if abs(tangents[si][0]) < 0.9 * np.linalg.norm(tangents[si]) else up)
        ids = []
        for k in range(n_ring):
            phi = 2 * np.pi * k / n_ring
            q = p + r[0] * np.cos(phi) * e1 + r[1] * np.sin(phi) * e2
            ids.append(builder.add_vertex(q, wts, name))
        ring_ids.append(np.array(ids))
    # regressor rings: stations whose position coincides with a chain point
    if joint_at:
        for si, st in enumerate(stations):
            p = st[0]
            for pi, j in joint_at.items():
                if np.allclose(p, points[pi]):
                    builder.regressor[j] = ring_ids[si].tolist()

    def uv(si, k):
        return (x0 + w * k / n_ring, y0 + h * si / (n_st - 1))

    for si in range(n_st - 1):
        a, b = ring_ids[si], ring_ids[si + 1]
        inner = 0.5 * (P[si] + P[si + 1])
        for k in range(n_ring):
            k1 = (k + 1) % n_ring
            # on central tubes the diagonal flips across x=0 so the
            # triangulation is its own mirror image
            if sagittal and np.cos(2 * np.pi * (k + 0.5) / n_ring) < 0:
                builder.add_face((a[k], a[k1], b[k]), (uv(si, k), uv(si, k + 1), uv(si + 1, k)), inner)
                builder.add_face((a[k1], b[k1], b[k]), (uv(si, k + 1), uv(si + 1, k + 1), uv(si + 1, k)), inner)
            else:
                builder.add_face((a[k], a[k1], b[k1]), (uv(si, k), uv(si, k + 1), uv(si + 1, k + 1)), inner)
                builder.add_face((a[k], b[k1], b[k]), (uv(si, k), uv(si + 1, k + 1), uv(si + 1, k)), inner)
    caps = [None, None]
    for end, enabled in ((0, cap_start), (n_st - 1, cap_end)):
        if not enabled:
            continue
        ring = ring_ids[end]
        c = builder.add_vertex(P[end], stations[end][2], name)
        inner = P[end] + (P[1] - P[0] if end == 0 else P[-2] - P[-1]) * 0.5
        for k in range(n_ring):
            k1 = (k + 1) % n_ring
            builder.add_face((ring[k], ring[k1], c), (uv(end, k), uv(end, k + 1), uv(end, k + 0.5)), inner)
        caps[0 if end == 0 else 1] = c
    builder.rings[name] = ring_ids
    builder.caps[name] = tuple(caps)
    return ring_ids


def _mirror_joint_name(name):
    if name.endswith("_L"):
        return name[:-2] + "_R"
    if name.endswith("_R"):
        return name[:-2] + "_L"
    if name.startswith("fetlock_") and name[-1] in "LR":
        return name[:-1] + ("R" if name[-1] == "L" else "L")
    return name


def _joint_position(name, scale):
    if name in _JOINTS:
        return np.array(_JOINTS[name]) * scale
    m = _mirror_joint_name(name)
    return np.array(_JOINTS[m]) * scale * np.array([-1.0, 1.0, 1.0])


def make_toy_model(cfg: ToyConfig | None = None) -> BodyModel:
    """Build the procedural quadruped; deterministic given ``cfg.seed``."""
    cfg = cfg or ToyConfig()
    cfg.check()
    s = cfg.scale
    jid = {n: i for i, n in enumerate(JOINT_NAMES)}
    J = lambda n: _joint_position(n, s)  # noqa: E731
    bld = _Builder(N_JOINTS)

    # central tubes: trunk, neck+head, tail
    rear = J("root") + np.array([0.0, -0.02, 0.18]) * s
    trunk_pts = [rear, J("root"), J("spine0"), J("spine1"), J("spine2"), J("spine3"), J("neck0")]
    trunk_r = [(0.2, 0.24), (0.27, 0.32), (0.3, 0.36), (0.31, 0.38), (0.3, 0.37), (0.28, 0.35), (0.2, 0.24)]
    trunk_r = [(a * s, b * s) for a, b in trunk_r]
    ja = {1: jid["root"], 2: jid["spine0"], 3: jid["spine1"], 4: jid["spine2"], 5: jid["spine3"]}
    _tube(bld, "trunk", trunk_pts,
          [jid["root"], jid["root"], jid["spine0"], jid["spine1"], jid["spine2"], jid["spine3"]],
          None, trunk_r, cfg.trunk_ring, (2, 2, 124, 124), cfg, True, ja)

    nose = J("head") + np.array([0.0, 0.3, -0.5]) * s
    neck_pts = [J("neck0"), J("neck1"), J("neck2"), J("head"), nose]
    neck_r = [(0.17, 0.2), (0.13, 0.17), (0.11, 0.14), (0.12, 0.14), (0.07, 0.08)]
    neck_r = [(a * s, b * s) for a, b in neck_r]
    ja = {0: jid["neck0"], 1: jid["neck1"], 2: jid["neck2"], 3: jid["head"]}
    rings = _tube(bld, "neck", neck_pts, [jid["neck0"], jid["neck1"], jid["neck2"], jid["head"]],
                  jid["spine3"], neck_r, cfg.neck_ring, (130, 2, 124, 84), cfg, True, ja,
                  up=np.array([0.0, 0.0, -1.0]))
    # jaw: lower half of the snout rings
    head_st = 3 * cfg.subdiv
    jaw_ring = head_st + cfg.subdiv // 2 + 1
    bld.regressor[jid["jaw"]] = rings[jaw_ring].tolist()
    for si in range(jaw_ring, len(rings)):
        for k, v in enumerate(rings[si]):
            phi = 2 * np.pi * k / cfg.neck_ring
            if np.sin(phi) < -0.2:
                wh = bld.weights[v].pop(jid["head"], 0.0)
                bld.weights[v][jid["jaw"]] = bld.weights[v].get(jid["jaw"], 0.0) + 0.7 * wh
                bld.weights[v][jid["head"]] = 0.3 * wh

    tail_end = J("tail4") + np.array([0.0, 0.2, 0.02]) * s
    tail_pts = [J("tail0"), J("tail1"), J("tail2"), J("tail3"), J("tail4"), tail_end]
    tail_r = [(0.05, 0.05), (0.045, 0.045), (0.04, 0.04), (0.035, 0.035), (0.04, 0.04), (0.05, 0.03)]
    tail_r = [(a * s, b * s) for a, b in tail_r]
    ja = {i: jid[f"tail{i}"] for i in range(5)}
    sub_tail = ToyConfig(**{**cfg.__dict__, "subdiv": max(1, cfg.subdiv - 1)})
    _tube(bld, "tail", tail_pts, [jid[f"tail{i}"] for i in range(5)], jid["root"], tail_r,
          cfg.tail_ring, (2, 224, 124, 30), sub_tail, True, ja, up=np.array([0.0, 0.0, 1.0]))
    n_central = len(bld.verts)

    # left-side tubes; the right side is mirrored afterwards
    hoof_f = J("fetlock_FL") + np.array([0.0, 0.17, -0.02]) * s
    fl_pts = [J("scapula_L"), J("shoulder_L"), J("elbow_L"), J("carpus_L"), J("fetlock_FL"), hoof_f]
    fl_r = [(0.1, 0.14), (0.1, 0.13), (0.075, 0.085), (0.055, 0.06), (0.05, 0.055), (0.06, 0.065)]
    fl_r = [(a * s, b * s) for a, b in fl_r]
    owners = [jid["scapula_L"], jid["shoulder_L"], jid["elbow_L"], jid["carpus_L"], jid["fetlock_FL"]]
    ja = dict(enumerate(owners))
    _tube(bld, "front_L", fl_pts, owners, jid["spine3"], fl_r, cfg.leg_ring, (2, 130, 60, 90), cfg,
          False, ja)

    hoof_h = J("fetlock_HL") + np.array([0.0, 0.17, -0.02]) * s
    hl_pts = [J("hip_L"), J("stifle_L"), J("hock_L"), J("fetlock_HL"), hoof_h]
    hl_r = [(0.13, 0.17), (0.1, 0.13), (0.06, 0.07), (0.05, 0.055), (0.06, 0.065)]
    hl_r = [(a * s, b * s) for a, b in hl_r]
    owners = [jid["hip_L"], jid["stifle_L"], jid["hock_L"], jid["fetlock_HL"]]
    _tube(bld, "hind_L", hl_pts, owners, jid["root"], hl_r, cfg.leg_ring, (130, 130, 60, 124), cfg,
          False, dict(enumerate(owners)))

    ear_tip = J("ear_L") + np.array([0.05, -0.2, 0.03]) * s
    _tube(bld, "ear_L", [J("ear_L"), ear_tip], [jid["ear_L"]], jid["head"],
          [(0.035 * s, 0.02 * s), (0.006 * s, 0.004 * s)], cfg.ear_ring, (130, 90, 60, 36),
          ToyConfig(**{**cfg.__dict__, "subdiv": 3}), False, {0: jid["ear_L"]})

    n_left = len(bld.verts) - n_central
    verts = np.array(bld.verts)
    V = n_central + 2 * n_left
    left = np.arange(n_central, n_central + n_left)
    right = left + n_left
    all_verts = np.concatenate([verts, verts[left] * np.array([-1.0, 1.0, 1.0])])
    sym = np.arange(V)
    sym[left] = right
    sym[right] = left
    # central tubes: mirror across lateral ring index
    for name, n_ring in (("trunk", cfg.trunk_ring), ("neck", cfg.neck_ring), ("tail", cfg.tail_ring)):
        for ring in bld.rings[name]:
            for k in range(n_ring):
                sym[ring[k]] = ring[(n_ring // 2 - k) % n_ring]
    # exact symmetry
    on_plane = sym == np.arange(V)
    all_verts[on_plane, 0] = 0.0
    lo = np.arange(V) < sym
    all_verts[sym[lo]] = all_verts[lo] * np.array([-1.0, 1.0, 1.0])

    jmirror = np.array([jid[_mirror_joint_name(n)] for n in JOINT_NAMES])
    weights = [dict(w) for w in bld.weights]
    weights += [{int(jmirror[j]): a for j, a in bld.weights[i].items()} for i in left]
    W_skin = np.zeros((V, N_JOINTS))
    for i, w in enumerate(weights):
        for j, a in w.items():
            W_skin[i, j] += a
    W_skin /= W_skin.sum(1, keepdims=True)

    faces = np.array(bld.faces)
    lf = np.array([i for i, f in enumerate(bld.faces) if f[0] >= n_central])
    mf = faces[lf] + n_left
    mf = mf[:, [0, 2, 1]]
    all_faces = np.concatenate([faces, mf])
    uvs = np.array(bld.face_uvs)
    # right-side charts sit next to their left counterparts
    shift = {"front_L": 64.0, "hind_L": 64.0, "ear_L": 64.0}
    muv = uvs[lf].copy()
    for n, i in enumerate(lf):
        tube = bld.tube_of[bld.faces[i][0]]
        muv[n, :, 0] += shift[tube]
    muv = muv[:, [0, 2, 1]]
    all_uvs = np.concatenate([uvs, muv]) / 256.0
    inner = np.array(bld.face_inner)
    all_inner = np.concatenate([inner, inner[lf] * np.array([-1.0, 1.0, 1.0])])
    all_faces, all_uvs = _orient_outward(all_verts, all_faces, all_inner, all_uvs)

    # joint regressor: centroid of each joint's ring
    rows, cols, vals = [], [], []
    reg = dict(bld.regressor)
    for j, ids in list(reg.items()):
        mj = int(jmirror[j])
        if mj != j and mj not in reg:
            reg[mj] = [int(i + n_left) for i in ids]
    for j in range(N_JOINTS):
        ids = reg[j]
        rows += [j] * len(ids)
        cols += list(ids)
        vals += [1.0 / len(ids)] * len(ids)
    jr = sparse.csr_matrix((vals, (rows, cols)), shape=(N_JOINTS, V))

    lm_v, lm_w, lm_f = _landmarks(bld, all_faces, all_verts, sym, cfg, n_left, n_central)
    lmirror = np.array([LANDMARK_NAMES.index(n) for n in _mirrored_landmark_names()])

    W, b = _shape_basis(all_verts, sym, bld, n_central, n_left, cfg, jr)
    layout = np.array([[0, 0, 128, 128], [128, 0, 128, 128], [0, 128, 128, 128], [128, 128, 128, 128]])
    model = BodyModel(
        vertices=all_verts, faces=all_faces, symmetry_map=sym,
        W=W, b=b, parent=np.array(PARENT), joint_regressor=jr, skinning_weights=W_skin,
        landmark_vertices=lm_v, landmark_weights=lm_w, joint_mirror=jmirror,
        landmark_mirror=lmirror, face_uvs=all_uvs, region_layout=layout, atlas_size=256,
        joint_names=JOINT_NAMES, landmark_names=LANDMARK_NAMES, torso_landmarks=TORSO_LANDMARKS,
        landmark_faces=lm_f, meta={"generator": "toy", "seed": cfg.seed, "scale": cfg.scale},
    )
    return model.validate()


def _mirrored_landmark_names():
    return [_mirror_joint_name(n) for n in LANDMARK_NAMES]


def _orient_outward(verts, faces, inner, uvs):
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    cen = (a + b + c) / 3.0
    flip = np.einsum("fi,fi->f", n, cen - inner) < 0
    faces = faces.copy()
    uvs = uvs.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    uvs[flip] = uvs[flip][:, [0, 2, 1]]
    return faces, uvs


def _landmarks(bld, faces, verts, sym, cfg, n_left, n_central):
    """Vertex ids / weights / faces for the 28 landmarks (in LANDMARK_NAMES order)."""
    rings = bld.rings
    caps = bld.caps
    nr = cfg.neck_ring
    out = {}

    def vert(i):
        return ([i, i, i], [1.0, 0.0, 0.0], -1)

    def lateral(ring):
        return int(ring[np.argmax(verts[ring, 0])])

    def below(ring):
        return int(ring[np.argmax(verts[ring, 1])])

    def above(ring):
        return int(ring[np.argmin(verts[ring, 1])])

    neck = rings["neck"]
    out["nose"] = vert(caps["neck"][1])
    out["chin"] = vert(below(neck[-3]))
    # eye: centroid of the upper lateral face on the head ring
    head_st = 3 * cfg.subdiv + 1
    ring = neck[head_st]
    ring2 = neck[head_st + 1]
    k = int(np.argmax(verts[ring, 0] - 0.3 * verts[ring, 1]))
    k1 = (k + 1) % nr
    tri = [int(ring[k]), int(ring[k1]), int(ring2[k1])]
    fid = _find_face(faces, tri)
    out["eye_L"] = (faces[fid].tolist(), [1 / 3, 1 / 3, 1 / 3], fid)
    mtri = [int(sym[t]) for t in tri]
    mfid = _find_face(faces, mtri)
    out["eye_R"] = (faces[mfid].tolist(), [1 / 3, 1 / 3, 1 / 3], mfid)

    ear = rings["ear_L"]
    eb = int(ear[0][np.argmin(verts[ear[0], 2])])
    out["ear_base_L"] = vert(eb)
    out["ear_tip_L"] = vert(caps["ear_L"][1])
    trunk = rings["trunk"]
    out["withers"] = vert(above(trunk[5 * cfg.subdiv]))
    out["throat"] = vert(below(neck[cfg.subdiv]))
    tail = rings["tail"]
    out["tail_base"] = vert(above(tail[0]))
    out["tail_tip"] = vert(caps["tail"][1])
    fl = rings["front_L"]
    out["shoulder_L"] = vert(lateral(fl[cfg.subdiv]))
    out["elbow_L"] = vert(lateral(fl[2 * cfg.subdiv]))
    out["knee_L"] = vert(lateral(fl[3 * cfg.subdiv]))
    out["front_hoof_L"] = vert(caps["front_L"][1])
    hl = rings["hind_L"]
    out["stifle_L"] = vert(lateral(hl[cfg.subdiv]))
    out["hock_L"] = vert(lateral(hl[2 * cfg.subdiv]))
    out["fetlock_L"] = vert(lateral(hl[3 * cfg.subdiv]))
    out["hind_hoof_L"] = vert(caps["hind_L"][1])
    for name in list(out):
        if name.endswith("_L") and name[:-2] + "_R" not in out:
            ids, w, f = out[name]
            out[name[:-2] + "_R"] = ([int(i + n_left) for i in ids], w, f)
    lv = np.array([out[n][0] for n in LANDMARK_NAMES])
    lw = np.array([out[n][1] for n in LANDMARK_NAMES])
    lf = np.array([out[n][2] for n in LANDMARK_NAMES])
    return lv, lw, lf


def _find_face(faces, tri):
    s = set(tri)
    for i, f in enumerate(faces):
        if set(f.tolist()) == s:
            return i
    raise ValueError("landmark triangle not found")


def _shape_basis(verts, sym, bld, n_central, n_left, cfg, jr):
    """Symmetric deformation basis restricted to the half mesh."""
    rng = np.random.default_rng(cfg.seed)
    V = len(verts)
    tube = np.array(bld.tube_of + bld.tube_of[n_central:n_central + n_left])
    tube = np.array([t.replace("_L", "") for t in tube])
    # axis point per vertex: centroid of its ring
    axis = verts.copy()
    for name, rlist in bld.rings.items():
        for ring in rlist:
            c = verts[ring].mean(0)
            axis[ring] = c
            if name.endswith("_L"):
                axis[ring + n_left] = c * np.array([-1.0, 1.0, 1.0])
    radial = verts - axis
    s = cfg.scale
    zc = verts[:, 2].mean()
    yc = verts[:, 1].mean()
    fields = []

    def masked(mask, d):
        out = np.zeros((V, 3))
        out[mask] = d[mask]
        return out

    z = verts[:, 2]
    y = verts[:, 1]
    fields.append(np.stack([verts[:, 0], 0 * y, 0 * z], 1))                  # width
    fields.append(np.stack([0 * y, y - yc, 0 * z], 1))                        # height
    fields.append(np.stack([0 * y, 0 * y, z - zc], 1))                        # length
    fields.append(masked(tube == "trunk", radial))                            # girth
    legs = (tube == "front") | (tube == "hind")
    top = np.where(legs, y - verts[legs, 1].min(), 0.0)
    fields.append(np.stack([0 * y, np.where(legs, top, 0.0), 0 * z], 1))     # leg length
    fields.append(masked(legs, radial))                                       # leg girth
    fields.append(masked(tube == "neck", radial))                             # neck girth
    nk = tube == "neck"
    along = np.where(nk, -(z - verts[nk, 2].max()), 0.0)
    fields.append(np.stack([0 * y, -0.5 * along, -along], 1) * nk[:, None])   # neck length
    fields.append(masked(tube == "ear", radial))                              # ear size
    tl = tube == "tail"
    fields.append(np.stack([0 * y, np.where(tl, y - verts[tl, 1].min(), 0), 0 * z], 1))  # tail length
    belly = (tube == "trunk") & (radial[:, 1] > 0)
    bump = np.exp(-((z - (-0.55 * s)) / (0.4 * s)) ** 2)
    fields.append(np.stack([0 * y, bump * radial[:, 1] / (0.35 * s), 0 * z], 1) * belly[:, None])
    rump = (tube == "trunk") & (z > -0.3 * s)
    fields.append(np.stack([0 * y, -np.clip(z + 0.3 * s, 0, None) * (radial[:, 1] < 0), 0 * z], 1)
                  * rump[:, None])
    while len(fields) < cfg.n_features:
        d = np.zeros((V, 3))
        for _ in range(3):
            c = verts[rng.integers(V)]
            width = rng.uniform(0.15, 0.45) * s
            vec = rng.normal(size=3)
            d += np.exp(-np.sum((verts - c) ** 2, 1) / (2 * width ** 2))[:, None] * vec
        fields.append(d)
    M = np.array([-1.0, 1.0, 1.0])
    half = np.arange(V)[(sym == np.arange(V)) | (verts[:, 0] > 0)]
    cols = []
    for d in fields[:cfg.n_features]:
        d = 0.5 * (d + d[sym] * M)
        d[sym == np.arange(V), 0] = 0.0
        rms = np.sqrt(np.mean(np.sum(d ** 2, 1)))
        d = d * (cfg.feature_rms / rms)
        cols.append(d[half].ravel())
    W = np.stack(cols, 1)
    return W, np.zeros(W.shape[0])
