import numpy as np
import pytest

from sdfshape import CapsuleChain, TriMesh, chain_to_mesh


def gentle_chain(rng: np.random.Generator, n_joints: int = 5, max_turn_deg: float = 8.0):
    """Random capsule chain whose per-joint turns stay small.

    Small turns keep the interior crease regions (where the hard-min union
    SDF underestimates depth) below the oracle-comparison tolerances.
    """
    direction = np.array([1.0, 0.0, 0.0])
    pts = [np.zeros(3)]
    for _ in range(n_joints):
        turn = np.radians(rng.uniform(2.0, max_turn_deg))
        axis = rng.normal(size=3)
        axis -= axis @ direction * direction
        axis /= np.linalg.norm(axis)
        direction = direction * np.cos(turn) + axis * np.sin(turn)
        pts.append(pts[-1] + direction * rng.uniform(9.0, 13.0))
    radii = rng.uniform(2.8, 4.2, size=n_joints + 1)
    return CapsuleChain(np.array(pts), radii)


def icosphere(radius: float = 10.0, center=(0.0, 0.0, 0.0), subdivisions: int = 3) -> TriMesh:
    """Geodesic sphere mesh by icosahedron subdivision."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=float,
    )
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ]
    )
    for _ in range(subdivisions):
        midpoint = {}
        new_faces = []
        verts = list(verts)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                verts.append((np.asarray(verts[a]) + verts[b]) / 2.0)
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.asarray(verts, dtype=float)
        faces = np.asarray(new_faces)

    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True) * radius + np.asarray(center)
    return TriMesh(verts, faces)


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(radius=10.0, subdivisions=3)


@pytest.fixture(scope="session")
def small_chain():
    rng = np.random.default_rng(7)
    return gentle_chain(rng, n_joints=4)


@pytest.fixture(scope="session")
def small_chain_mesh(small_chain):
    return chain_to_mesh(small_chain, spacing=0.8)
