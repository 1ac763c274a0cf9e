"""Pose encodings for 3-D keypoint sequences.

Two per-frame encodings of a 50-joint upper-body-and-hands pose:

* Cartesian: the raw coordinates flattened to 150 floats.
* Angular: per-bone relative rotations in the 6-value rotation encoding
  (first two columns of the rotation matrix), 48 bones x 6 = 288 floats.

The angular encoding measures each bone's rotation relative to its parent
bone, against the skeleton's rest pose, so it is invariant to global
translation and uniform scaling. ``forward_kinematics`` is the inverse
path: it reconstructs joint positions from the angular matrix, the
skeleton's reference bone lengths, and per-frame root positions.

Frame convention for a bone with unit direction d and twist reference r
(the parent bone's direction, or the global up axis for bones attached
directly to a root joint): the frame's first axis is d, the second is the
component of r orthogonal to d, the third their cross product. Rotations
are emitted relative to the rest pose, so a frame posed exactly at rest
encodes the identity for every bone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

N_JOINTS = 50
N_BONES = 48
ANGULAR_WIDTH = N_BONES * 6  # 288
CARTESIAN_WIDTH = N_JOINTS * 3  # 150

# joint indices of the standard layout used by normalization
NECK = 1
R_SHOULDER = 2
L_SHOULDER = 5

UP = np.array([0.0, 1.0, 0.0])
X_AXIS = np.array([1.0, 0.0, 0.0])

_PARALLEL_TOL = 1e-4
_ZERO_BONE_TOL = 1e-8


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise DataError("rotation axis is zero")
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rot6d_encode(rotation) -> np.ndarray:
    """First two columns of a rotation matrix, column-major, as 6 floats."""
    r = np.asarray(rotation, dtype=float)
    if r.shape != (3, 3):
        raise DataError(f"expected 3x3 matrix, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-4 or np.linalg.det(r) < 0.5:
        raise DataError("input is not a rotation matrix")
    return np.concatenate([r[:, 0], r[:, 1]])


def rot6d_decode(values) -> np.ndarray:
    """Gram-Schmidt reconstruction of the rotation matrix from 6 values.

    Invariant to positive rescaling of either 3-vector; rejects degenerate
    (near-zero or near-parallel) input.
    """
    v = np.asarray(values, dtype=float)
    if v.shape != (6,):
        raise DataError(f"expected 6 values, got shape {v.shape}")
    a1, a2 = v[:3], v[3:]
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 < 1e-6 or n2 < 1e-6:
        raise DataError("degenerate rotation encoding: near-zero column")
    b1 = a1 / n1
    if abs(b1 @ (a2 / n2)) > 1 - 1e-6:
        raise DataError("degenerate rotation encoding: parallel columns")
    w = a2 - (b1 @ a2) * b1
    b2 = w / np.linalg.norm(w)
    b3 = np.cross(b1, b2)
    return np.column_stack([b1, b2, b3])


def _orthonormal_frame(direction, reference) -> np.ndarray:
    """Build the canonical frame for a unit bone direction and a twist reference."""
    d = direction
    ref = reference
    if ref is None or abs(d @ ref) > 1 - _PARALLEL_TOL:
        ref = UP
        if abs(d @ ref) > 1 - _PARALLEL_TOL:
            ref = X_AXIS
    w = ref - (d @ ref) * d
    u2 = w / np.linalg.norm(w)
    return np.column_stack([d, u2, np.cross(d, u2)])


@dataclass
class KeypointFrame:
    """One frame of 50 3-D joints, optionally with per-joint confidences."""

    joints: np.ndarray  # (50, 3)
    confidence: np.ndarray | None = None  # (50,), in [0, 1]

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        if self.joints.shape != (N_JOINTS, 3):
            raise DataError(f"expected ({N_JOINTS}, 3) joints, got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise DataError("non-finite joint coordinates")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=float)
            if self.confidence.shape != (N_JOINTS,):
                raise DataError("confidence must have one value per joint")


def vectorize_cartesian(frame) -> np.ndarray:
    """Flatten a frame to (x1, y1, z1, ..., x50, y50, z50), length 150."""
    joints = frame.joints if isinstance(frame, KeypointFrame) else np.asarray(frame, dtype=float)
    if joints.shape != (N_JOINTS, 3):
        raise DataError(f"expected ({N_JOINTS}, 3) joints, got {joints.shape}")
    if not np.isfinite(joints).all():
        raise DataError("non-finite joint coordinates")
    return joints.reshape(CARTESIAN_WIDTH).copy()


def frame_from_vector(vec) -> KeypointFrame:
    """Inverse of vectorize_cartesian."""
    v = np.asarray(vec, dtype=float)
    if v.shape != (CARTESIAN_WIDTH,):
        raise DataError(f"expected {CARTESIAN_WIDTH} values, got shape {v.shape}")
    return KeypointFrame(v.reshape(N_JOINTS, 3))


def fill_missing(joint_seq, confidence_seq):
    """Carry the last valid coordinates forward over zero-confidence joints.

    Frames before the first valid detection keep their original values.
    """
    joints = np.array(joint_seq, dtype=float)
    conf = np.asarray(confidence_seq, dtype=float)
    last = joints[0].copy()
    seen = conf[0] > 0
    for t in range(joints.shape[0]):
        valid = conf[t] > 0
        joints[t, ~valid & seen] = last[~valid & seen]
        last[valid] = joints[t, valid]
        seen |= valid
    return joints


@dataclass
class SkeletonSpec:
    """Joint hierarchy with rest directions and reference bone lengths.

    ``parent[j] == j`` marks a root joint. ``bone_list`` holds the child
    joint index of every bone that receives a rotation, ordered so parents
    precede children. ``rest_directions`` and ``bone_lengths`` align with
    ``bone_list``.
    """

    joint_names: list[str]
    parent: np.ndarray  # (n_joints,) int
    bone_list: np.ndarray  # (n_bones,) int, child joint per bone
    rest_directions: np.ndarray  # (n_bones, 3), unit vectors
    bone_lengths: np.ndarray  # (n_bones,), positive
    rest_root_positions: np.ndarray = field(default=None)  # (n_roots, 3)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        self.bone_list = np.asarray(self.bone_list, dtype=int)
        self.rest_directions = np.asarray(self.rest_directions, dtype=float)
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=float)
        if self.rest_root_positions is None:
            self.rest_root_positions = np.zeros((len(self.root_joints), 3))
        self.validate()
        self._precompute()

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_bones(self) -> int:
        return len(self.bone_list)

    @property
    def root_joints(self) -> list[int]:
        return [j for j in range(len(self.parent)) if self.parent[j] == j]

    def validate(self):
        n = self.n_joints
        if self.parent.shape != (n,):
            raise DataError("parent array must have one entry per joint")
        for j in range(n):
            seen = set()
            k = j
            while self.parent[k] != k:
                if k in seen:
                    raise DataError(f"cycle in parent relation at joint {j}")
                seen.add(k)
                k = self.parent[k]
        non_roots = [j for j in range(n) if self.parent[j] != j]
        if sorted(self.bone_list.tolist()) != sorted(non_roots):
            raise DataError("bone_list must cover exactly the non-root joints")
        if self.rest_directions.shape != (self.n_bones, 3):
            raise DataError("one rest direction per bone required")
        norms = np.linalg.norm(self.rest_directions, axis=1)
        if np.abs(norms - 1).max() > 1e-6:
            raise DataError("rest directions must be unit vectors")
        if self.bone_lengths.shape != (self.n_bones,) or (self.bone_lengths <= 0).any():
            raise DataError("bone lengths must be positive")
        pos = {int(r) for r in self.root_joints}
        for child in self.bone_list:
            if int(self.parent[child]) not in pos:
                raise DataError("bone_list is not topologically ordered")
            pos.add(int(child))

    def _precompute(self):
        bones = self.bone_list
        self._bone_index = {int(j): i for i, j in enumerate(bones)}
        # index of the parent bone within bone_list, -1 when attached to a root
        self._parent_bone = np.array(
            [self._bone_index.get(int(self.parent[j]), -1) for j in bones], dtype=int
        )
        rest_frames = np.zeros((self.n_bones, 3, 3))
        rest_local = np.zeros((self.n_bones, 3, 3))
        for i in range(self.n_bones):
            pb = self._parent_bone[i]
            ref = rest_frames[pb][:, 0] if pb >= 0 else None
            rest_frames[i] = _orthonormal_frame(self.rest_directions[i], ref)
            parent_frame = rest_frames[pb] if pb >= 0 else np.eye(3)
            rest_local[i] = parent_frame.T @ rest_frames[i]
        self._rest_frames = rest_frames
        self._rest_local = rest_local

    def rest_positions(self) -> np.ndarray:
        """Joint positions of the rest pose, roots at their reference positions."""
        pos = np.zeros((self.n_joints, 3))
        for r, p in zip(self.root_joints, self.rest_root_positions):
            pos[r] = p
        for i, j in enumerate(self.bone_list):
            pos[j] = pos[self.parent[j]] + self.bone_lengths[i] * self.rest_directions[i]
        return pos


def cartesian_to_angular(frames, skel: SkeletonSpec, return_flags=False):
    """Convert a keypoint sequence to the T x 288 angular representation.

    Accepts a list of KeypointFrame or a (T, 50, 3) array. Bones observed
    with coincident endpoints fall back to their rest direction; such
    frames are flagged.
    """
    joints = _as_joint_array(frames, skel.n_joints)
    T = joints.shape[0]
    out = np.zeros((T, skel.n_bones * 6))
    flags = np.zeros(T, dtype=bool)
    bones = skel.bone_list
    parents = skel.parent[bones]
    lengths_dirs = np.zeros((skel.n_bones, 3))
    for t in range(T):
        x = joints[t]
        vec = x[bones] - x[parents]
        norms = np.linalg.norm(vec, axis=1)
        degenerate = norms < _ZERO_BONE_TOL
        if degenerate.any():
            flags[t] = True
            vec[degenerate] = skel.rest_directions[degenerate]
            norms[degenerate] = 1.0
        np.divide(vec, norms[:, None], out=lengths_dirs)
        frames_t = np.zeros((skel.n_bones, 3, 3))
        row = out[t]
        for i in range(skel.n_bones):
            pb = skel._parent_bone[i]
            ref = frames_t[pb][:, 0] if pb >= 0 else None
            f = _orthonormal_frame(lengths_dirs[i], ref)
            frames_t[i] = f
            parent_frame = frames_t[pb] if pb >= 0 else np.eye(3)
            # rotation relative to the rest pose: undo the rest local rotation
            r = skel._rest_local[i].T @ parent_frame.T @ f
            row[6 * i : 6 * i + 3] = r[:, 0]
            row[6 * i + 3 : 6 * i + 6] = r[:, 1]
    if return_flags:
        return out, flags
    return out


def forward_kinematics(angular, skel: SkeletonSpec, root_positions) -> np.ndarray:
    """Reconstruct (T, 50, 3) joint positions from angular features.

    ``root_positions`` is T x (roots*3), one xyz triple per root joint in
    increasing joint-index order. Bone lengths come from the skeleton.
    """
    ang = np.asarray(angular, dtype=float)
    if ang.ndim != 2 or ang.shape[1] != skel.n_bones * 6:
        raise DataError(f"angular matrix must be T x {skel.n_bones * 6}, got {ang.shape}")
    roots = skel.root_joints
    rp = np.asarray(root_positions, dtype=float)
    if rp.shape != (ang.shape[0], len(roots) * 3):
        raise DataError(
            f"root positions must be T x {len(roots) * 3}, got {rp.shape}"
        )
    T = ang.shape[0]
    out = np.zeros((T, skel.n_joints, 3))
    for t in range(T):
        x = out[t]
        for k, r in enumerate(roots):
            x[r] = rp[t, 3 * k : 3 * k + 3]
        frames_t = np.zeros((skel.n_bones, 3, 3))
        for i, j in enumerate(skel.bone_list):
            r = rot6d_decode(ang[t, 6 * i : 6 * i + 6])
            pb = skel._parent_bone[i]
            parent_frame = frames_t[pb] if pb >= 0 else np.eye(3)
            g = parent_frame @ skel._rest_local[i] @ r
            frames_t[i] = g
            x[j] = x[skel.parent[j]] + skel.bone_lengths[i] * g[:, 0]
    return out


def frames_to_keypoints(positions) -> list[KeypointFrame]:
    return [KeypointFrame(p) for p in positions]


def _as_joint_array(frames, n_joints) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        a = np.asarray(frames, dtype=float)
        if a.ndim != 3 or a.shape[1:] != (n_joints, 3):
            raise DataError(f"expected (T, {n_joints}, 3) array, got {a.shape}")
    else:
        a = np.stack([f.joints if isinstance(f, KeypointFrame) else np.asarray(f, dtype=float) for f in frames])
        if a.shape[1:] != (n_joints, 3):
            raise DataError(f"expected {n_joints} joints per frame, got {a.shape[1:]}")
    if not np.isfinite(a).all():
        raise DataError("non-finite joint coordinates")
    return a


def sequence_from_matrix(matrix) -> np.ndarray:
    """View a T x 150 Cartesian feature matrix as (T, 50, 3) joints."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[1] != CARTESIAN_WIDTH:
        raise DataError(f"expected T x {CARTESIAN_WIDTH} matrix, got {m.shape}")
    return m.reshape(m.shape[0], N_JOINTS, 3)


def matrix_from_sequence(joints) -> np.ndarray:
    j = np.asarray(joints, dtype=float)
    return j.reshape(j.shape[0], CARTESIAN_WIDTH)


def normalize_cartesian(seq) -> np.ndarray:
    """Center on the mean neck position and scale to unit mean shoulder width.

    Output is invariant to global translation and uniform scaling of the
    input sequence.
    """
    m = np.asarray(seq, dtype=float)
    if m.ndim != 2 or m.shape[1] != CARTESIAN_WIDTH:
        raise DataError(f"expected T x {CARTESIAN_WIDTH} matrix, got {m.shape}")
    joints = m.reshape(m.shape[0], N_JOINTS, 3).copy()
    joints -= joints[:, NECK].mean(axis=0)
    width = np.linalg.norm(joints[:, R_SHOULDER] - joints[:, L_SHOULDER], axis=1).mean()
    if width < 1e-9:
        raise DataError("zero shoulder distance, cannot normalize scale")
    joints /= width
    return joints.reshape(m.shape[0], CARTESIAN_WIDTH)


# ---------------------------------------------------------------------------
# default skeleton: 50 joints, 48 rotated bones, roots = {nose, neck}

_FINGERS = ("thumb", "index", "middle", "ring", "pinky")


def _hand_joint_names(side):
    names = [f"{side}_hand_base"]
    for finger in _FINGERS:
        names += [f"{side}_{finger}{k}" for k in range(1, 5)]
    return names


def joint_names() -> list[str]:
    return (
        ["nose", "neck", "right_shoulder", "right_elbow", "right_wrist",
         "left_shoulder", "left_elbow", "left_wrist"]
        + _hand_joint_names("right")
        + _hand_joint_names("left")
    )


def _build_hand(positions, parent, wrist_idx, base_idx, sign):
    """Place 21 hand joints. Fingers spread and curl so that no bone is
    parallel to its twist reference (the parent bone's direction)."""
    wrist = positions[wrist_idx]
    palm_dir = _unit(np.array([sign * 0.40, 0.42, 0.80]))
    side_dir = sign * _unit(np.cross(palm_dir, UP))
    spread_axis = _unit(np.cross(palm_dir, side_dir))
    positions[base_idx] = wrist + 0.035 * palm_dir
    parent[base_idx] = wrist_idx

    spreads = (-0.75, -0.30, 0.08, 0.28, 0.55)  # radians, thumb to pinky
    seg_len = (0.032, 0.046, 0.042, 0.038, 0.030)
    joint = base_idx + 1
    for spread, length in zip(spreads, seg_len):
        base_dir = _unit(rotation_about_axis(spread_axis, spread) @ palm_dir)
        pos = positions[base_idx] + 0.04 * base_dir
        positions[joint] = pos
        parent[joint] = base_idx
        bend_axis = _unit(np.cross(base_dir, palm_dir + 0.35 * side_dir))
        prev = joint
        d = base_dir
        for seg in range(3):
            d = _unit(rotation_about_axis(bend_axis, 0.30) @ d)
            pos = pos + length * (0.85 ** seg) * d
            positions[prev + 1] = pos
            parent[prev + 1] = prev
            prev += 1
        joint += 4


def _unit(v):
    return v / np.linalg.norm(v)


def default_skeleton() -> SkeletonSpec:
    """The standard 50-joint signing skeleton (rest pose: raised forearms,
    curled fingers, so no bone is parallel to its twist reference)."""
    names = joint_names()
    n = len(names)
    parent = np.arange(n)
    positions = np.zeros((n, 3))

    positions[0] = (0.0, 0.13, 0.04)  # nose, isolated root
    positions[1] = (0.0, 0.0, 0.0)  # neck, body root
    positions[2] = (0.20, -0.03, 0.0)
    positions[3] = (0.26, -0.31, 0.04)
    positions[4] = positions[3] + 0.27 * _unit(np.array([0.0, 0.45, 0.89]))
    positions[5] = (-0.20, -0.03, 0.0)
    positions[6] = (-0.26, -0.31, 0.04)
    positions[7] = positions[6] + 0.27 * _unit(np.array([0.0, 0.45, 0.89]))
    parent[2] = 1
    parent[3] = 2
    parent[4] = 3
    parent[5] = 1
    parent[6] = 5
    parent[7] = 6

    _build_hand(positions, parent, wrist_idx=4, base_idx=8, sign=+1)
    _build_hand(positions, parent, wrist_idx=7, base_idx=29, sign=-1)

    bone_list = np.array([j for j in range(n) if parent[j] != j])
    vecs = positions[bone_list] - positions[parent[bone_list]]
    lengths = np.linalg.norm(vecs, axis=1)
    directions = vecs / lengths[:, None]
    roots = [j for j in range(n) if parent[j] == j]
    return SkeletonSpec(
        joint_names=names,
        parent=parent,
        bone_list=bone_list,
        rest_directions=directions,
        bone_lengths=lengths,
        rest_root_positions=positions[roots],
    )


# ---------------------------------------------------------------------------
# skeleton file format


def write_skeleton(path, skel: SkeletonSpec) -> None:
    lines = [f"skeleton-v1 joints={skel.n_joints} bones={skel.n_bones}"]
    dir_of = {int(j): i for i, j in enumerate(skel.bone_list)}
    for j in range(skel.n_joints):
        if j in dir_of:
            i = dir_of[j]
            d = skel.rest_directions[i]
            rest = f"{d[0]!r},{d[1]!r},{d[2]!r}"
            length = repr(float(skel.bone_lengths[i]))
        else:
            rest, length = "0,0,0", "0"
        lines.append(f"{j}\t{skel.joint_names[j]}\t{int(skel.parent[j])}\t{rest}\t{length}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_skeleton(path) -> SkeletonSpec:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("skeleton-v1"):
        raise DataError(f"bad skeleton header: {path}")
    header = dict(kv.split("=") for kv in lines[0].split()[1:])
    n_joints, n_bones = int(header["joints"]), int(header["bones"])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n_joints:
        raise DataError(f"skeleton declares {n_joints} joints, file has {len(body)} rows")

    names, parent = [], np.zeros(n_joints, dtype=int)
    rest = np.zeros((n_joints, 3))
    length = np.zeros(n_joints)
    for ln in body:
        idx_s, name, parent_s, rest_s, length_s = ln.split("\t")
        j = int(idx_s)
        names.append(name)
        parent[j] = int(parent_s)
        rest[j] = [float(x) for x in rest_s.split(",")]
        length[j] = float(length_s)

    bone_list = np.array([j for j in range(n_joints) if parent[j] != j])
    if len(bone_list) != n_bones:
        raise DataError(f"skeleton declares {n_bones} bones, file implies {len(bone_list)}")
    return SkeletonSpec(
        joint_names=names,
        parent=parent,
        bone_list=bone_list,
        rest_directions=rest[bone_list],
        bone_lengths=length[bone_list],
    )
