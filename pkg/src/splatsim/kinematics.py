"""A small rigid kinematic tree: revolute and fixed joints, mounted cameras, tool points.

Poses are ``(R, p)`` pairs mapping body coordinates to world. Pose
cotangents use the right-multiplied tangent ``R -> R exp([d]x)``,
``p -> p + R tau``, stacked as ``[d, tau]``, the same convention the
rasterizer reports camera gradients in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .raster import Camera, so3_exp
from .splatmesh import quaternion_to_rotation


@dataclass(frozen=True)
class Body:
    name: str
    parent: int
    rotation: np.ndarray
    position: np.ndarray
    joint: str = "fixed"
    axis: np.ndarray | None = None


@dataclass(frozen=True)
class CameraMount:
    name: str
    body: int
    rotation: np.ndarray  # camera-to-body; camera looks down its local +z
    position: np.ndarray
    intrinsics: dict
    weight: float = 1.0
    perturb_mount: bool = False


@dataclass(frozen=True)
class TcpSite:
    body: int
    point: np.ndarray


@dataclass(frozen=True)
class KinematicChain:
    bodies: tuple
    cameras: tuple = ()
    tcps: tuple = ()
    _joint_of_body: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        joint_of = []
        j = 0
        for i, b in enumerate(self.bodies):
            if not -1 <= b.parent < i:
                raise ConfigError(f"body {i} ({b.name}): parent index {b.parent} must be in [-1, {i})")
            if b.joint == "revolute":
                a = np.asarray(b.axis, dtype=np.float64)
                if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > 1e-9:
                    raise ConfigError(f"body {i} ({b.name}): revolute axis must be unit length")
                joint_of.append(j)
                j += 1
            elif b.joint == "fixed":
                joint_of.append(-1)
            else:
                raise ConfigError(f"body {i}: unknown joint type {b.joint!r}")
        for c in self.cameras:
            if not 0 <= c.body < len(self.bodies):
                raise ConfigError(f"camera {c.name}: body index {c.body} out of range")
        for t in self.tcps:
            if not 0 <= t.body < len(self.bodies):
                raise ConfigError(f"tcp site: body index {t.body} out of range")
        object.__setattr__(self, "_joint_of_body", tuple(joint_of))

    @property
    def n_joints(self) -> int:
        return sum(1 for j in self._joint_of_body if j >= 0)

    def body_index(self, name) -> int:
        for i, b in enumerate(self.bodies):
            if b.name == name:
                return i
        raise KeyError(name)

    def ancestors(self, i: int) -> list[int]:
        """Body ``i`` and every ancestor, leaf first."""
        out = []
        while i >= 0:
            out.append(i)
            i = self.bodies[i].parent
        return out


@dataclass
class FKResult:
    body_rotations: np.ndarray  # (B, 3, 3)
    body_positions: np.ndarray  # (B, 3)
    camera_rotations: np.ndarray  # (C, 3, 3) camera-to-world
    camera_positions: np.ndarray  # (C, 3)
    tcp: np.ndarray  # (T, 3)

    def camera(self, chain: KinematicChain, k: int, rot_delta=None) -> Camera:
        cam = Camera.from_cam_to_world(self.camera_rotations[k], self.camera_positions[k],
                                       **chain.cameras[k].intrinsics)
        return cam if rot_delta is None else cam.perturbed(rot_delta)


def _check_q(chain, q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (chain.n_joints,):
        raise ShapeError(f"expected {chain.n_joints} joint angles, got shape {q.shape}")
    return q


def forward_kinematics(chain: KinematicChain, q, base=None) -> FKResult:
    """World poses of bodies, cameras and tool points; ``base`` optionally re-roots the world."""
    q = _check_q(chain, q)
    nb = len(chain.bodies)
    rs = np.zeros((nb, 3, 3))
    ps = np.zeros((nb, 3))
    r0, p0 = (np.eye(3), np.zeros(3)) if base is None else (np.asarray(base[0], float), np.asarray(base[1], float))
    for i, b in enumerate(chain.bodies):
        rp, pp = (r0, p0) if b.parent < 0 else (rs[b.parent], ps[b.parent])
        r = rp @ b.rotation
        ps[i] = pp + rp @ b.position
        j = chain._joint_of_body[i]
        if j >= 0:
            r = r @ so3_exp(q[j] * np.asarray(b.axis, dtype=np.float64))
        rs[i] = r
    nc = len(chain.cameras)
    cr = np.zeros((nc, 3, 3))
    cp = np.zeros((nc, 3))
    for k, c in enumerate(chain.cameras):
        cr[k] = rs[c.body] @ c.rotation
        cp[k] = ps[c.body] + rs[c.body] @ c.position
    tcp = np.array([ps[t.body] + rs[t.body] @ t.point for t in chain.tcps]).reshape(-1, 3)
    return FKResult(rs, ps, cr, cp, tcp)


def fk_vjp(chain: KinematicChain, q, body_cot=None, camera_cot=None, tcp_cot=None, fk: FKResult | None = None):
    """Gradient w.r.t. ``q`` of ``<cot, FK(q)>``.

    ``body_cot`` (B, 6) and ``camera_cot`` (C, 6) are ``[d, tau]`` tangent
    cotangents; ``tcp_cot`` (T, 3) are plain position cotangents.
    """
    q = _check_q(chain, q)
    fk = forward_kinematics(chain, q) if fk is None else fk
    nb, nc, nt = len(chain.bodies), len(chain.cameras), len(chain.tcps)

    def _shaped(x, n, w, what):
        if x is None:
            return None
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (n, w):
            raise ShapeError(f"{what} cotangent must be ({n}, {w}), got {x.shape}")
        return x

    body_cot = _shaped(body_cot, nb, 6, "body")
    camera_cot = _shaped(camera_cot, nc, 6, "camera")
    tcp_cot = _shaped(tcp_cot, nt, 3, "tcp")

    grad = np.zeros(chain.n_joints)
    if grad.size == 0:
        return grad

    items = []  # (owning body, R, p, cot6 or None, cot3 or None)
    if body_cot is not None:
        items += [(i, fk.body_rotations[i], fk.body_positions[i], body_cot[i], None) for i in range(nb)]
    if camera_cot is not None:
        items += [(c.body, fk.camera_rotations[k], fk.camera_positions[k], camera_cot[k], None)
                  for k, c in enumerate(chain.cameras)]
    if tcp_cot is not None:
        items += [(t.body, None, fk.tcp[k], None, tcp_cot[k]) for k, t in enumerate(chain.tcps)]

    for owner, r, p, c6, c3 in items:
        for i in chain.ancestors(owner):
            j = chain._joint_of_body[i]
            if j < 0:
                continue
            a = fk.body_rotations[i] @ chain.bodies[i].axis
            v = np.cross(a, p - fk.body_positions[i])
            if c3 is not None:
                grad[j] += c3 @ v
            else:
                grad[j] += c6[:3] @ (r.T @ a) + c6[3:] @ (r.T @ v)
    return grad


def tcp_jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Analytic ``d tcp / d q`` with shape (T, 3, J)."""
    fk = forward_kinematics(chain, q)
    jac = np.zeros((len(chain.tcps), 3, chain.n_joints))
    for k, t in enumerate(chain.tcps):
        for i in chain.ancestors(t.body):
            j = chain._joint_of_body[i]
            if j >= 0:
                a = fk.body_rotations[i] @ chain.bodies[i].axis
                jac[k, :, j] = np.cross(a, fk.tcp[k] - fk.body_positions[i])
    return jac


def add_joint_noise(q, sigma: float, rng_seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    q = np.asarray(q, dtype=np.float64)
    if sigma == 0:
        return q.copy()
    return q + np.random.default_rng(rng_seed).normal(0.0, sigma, size=q.shape)


# --- JSON description --------------------------------------------------------------

def _rot(quat):
    q = np.asarray(quat, dtype=np.float64)
    if q.shape != (4,) or np.linalg.norm(q) == 0:
        raise ConfigError(f"bad quaternion {quat!r}")
    return quaternion_to_rotation(q / np.linalg.norm(q))


def chain_from_dict(doc: dict) -> KinematicChain:
    names = {}
    bodies = []
    try:
        for i, b in enumerate(doc["bodies"]):
            parent = b.get("parent", -1)
            if parent is None:
                parent = -1
            if isinstance(parent, str):
                if parent not in names:
                    raise ConfigError(f"body {b.get('name')}: unknown parent {parent!r}")
                parent = names[parent]
            j = b.get("joint", {"type": "fixed"}) or {"type": "fixed"}
            axis = None
            if j["type"] == "revolute":
                axis = np.asarray(j["axis"], dtype=np.float64)
            name = b.get("name", f"body{i}")
            names[name] = i
            bodies.append(Body(name, int(parent), _rot(b.get("quat", [1, 0, 0, 0])),
                               np.asarray(b.get("pos", [0, 0, 0]), dtype=np.float64), j["type"], axis))

        def body_ref(x):
            return names[x] if isinstance(x, str) else int(x)

        cams = []
        for k, c in enumerate(doc.get("cameras", [])):
            intr = {key: c[key] for key in ("fx", "fy", "cx", "cy")}
            intr["width"] = int(c["width"])
            intr["height"] = int(c["height"])
            cams.append(CameraMount(c.get("name", f"cam{k}"), body_ref(c["body"]), _rot(c.get("quat", [1, 0, 0, 0])),
                                    np.asarray(c.get("pos", [0, 0, 0]), dtype=np.float64), intr,
                                    float(c.get("weight", 1.0)), bool(c.get("perturb_mount", False))))
        tcps = [TcpSite(body_ref(t["body"]), np.asarray(t.get("pos", [0, 0, 0]), dtype=np.float64))
                for t in doc.get("tcps", [])]
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed chain description: {e!r}") from e
    return KinematicChain(tuple(bodies), tuple(cams), tuple(tcps))


def chain_to_dict(chain: KinematicChain) -> dict:
    from .splatmesh import rotation_to_quaternion

    out = {"bodies": [], "cameras": [], "tcps": []}
    for b in chain.bodies:
        j = {"type": b.joint}
        if b.joint == "revolute":
            j["axis"] = [float(x) for x in b.axis]
        out["bodies"].append({"name": b.name, "parent": b.parent, "pos": [float(x) for x in b.position],
                              "quat": [float(x) for x in rotation_to_quaternion(b.rotation)], "joint": j})
    for c in chain.cameras:
        d = {"name": c.name, "body": c.body, "pos": [float(x) for x in c.position],
             "quat": [float(x) for x in rotation_to_quaternion(c.rotation)], "weight": c.weight}
        d.update({k: (int(v) if k in ("width", "height") else float(v)) for k, v in c.intrinsics.items()})
        if c.perturb_mount:
            d["perturb_mount"] = True
        out["cameras"].append(d)
    for t in chain.tcps:
        out["tcps"].append({"body": t.body, "pos": [float(x) for x in t.point]})
    return out


def load_chain(path) -> KinematicChain:
    with open(path) as f:
        return chain_from_dict(json.load(f))


def save_chain(path, chain: KinematicChain) -> None:
    with open(path, "w") as f:
        json.dump(chain_to_dict(chain), f, indent=2, sort_keys=True)
