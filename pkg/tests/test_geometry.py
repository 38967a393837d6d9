import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handxfer.geometry import (MeshError, TriangleMesh, box_mesh, brute_force_nearest,
                               closest_point_on_triangles, icosphere, load_mesh, nearest_point,
                               query_points, save_obj, scale_mesh, signed_distance)

CUBE_OBJ = """\
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def point_triangle_oracle(p, a, b, c):
    """Closest point on one triangle by projecting and, if outside, checking the three edges."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    proj = p - np.dot(p - a, n) * n
    # barycentric inside test
    T = np.column_stack([b - a, c - a])
    uv, *_ = np.linalg.lstsq(T, proj - a, rcond=None)
    if uv[0] >= 0 and uv[1] >= 0 and uv.sum() <= 1:
        return proj
    best, bd = None, np.inf
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
        x = s + t * (e - s)
        d = np.linalg.norm(p - x)
        if d < bd:
            best, bd = x, d
    return best


@pytest.fixture
def cube_file(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    return p


def test_cube_loads_watertight(cube_file):
    m = load_mesh(cube_file)
    assert len(m.vertices) == 8 and len(m.triangles) == 12
    assert m.watertight
    np.testing.assert_allclose(np.linalg.norm(m.face_normals, axis=1), 1.0)


def test_unreferenced_vertex_pruned(tmp_path):
    p = tmp_path / "extra.obj"
    p.write_text(CUBE_OBJ + "v 9 9 9\n# comment\nvn 0 0 1\n")
    m = load_mesh(p)
    assert len(m.vertices) == 8 and m.pruned_vertices == 1


def test_degenerate_triangle_dropped(tmp_path):
    p = tmp_path / "degen.obj"
    p.write_text(CUBE_OBJ + "f 1 2 2\n")
    m = load_mesh(p)
    assert len(m.triangles) == 12 and m.dropped_degenerate == 1


def test_open_mesh_not_watertight(tmp_path):
    p = tmp_path / "open.obj"
    p.write_text("\n".join(CUBE_OBJ.splitlines()[:-2]) + "\n")
    assert not load_mesh(p).watertight


@pytest.mark.parametrize("text", ["", "v 0 0 0\n", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n",
                                  "v a b c\n", "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n"])
def test_bad_obj(tmp_path, text):
    p = tmp_path / "bad.obj"
    p.write_text(text)
    with pytest.raises(MeshError):
        load_mesh(p)


def test_icosphere_outward_normals(sphere):
    assert sphere.watertight
    c = sphere.vertices.mean(axis=0)
    assert np.all(np.sum(sphere.vertex_normals * (sphere.vertices - c), axis=1) > 0)
    centroids = sphere.vertices[sphere.triangles].mean(axis=1)
    assert np.all(np.sum(sphere.face_normals * (centroids - c), axis=1) > 0)


def test_scale_examples(cube_file):
    m = load_mesh(cube_file)
    np.testing.assert_array_equal(scale_mesh(m, 1.0).vertices, m.vertices)
    assert scale_mesh(m, 10 / 9).vertices.max() == pytest.approx(0.5 * 10 / 9)
    d0 = np.linalg.norm(m.vertices[:, None] - m.vertices[None], axis=-1)
    d2 = np.linalg.norm(scale_mesh(m, 2.0).vertices[:, None] - scale_mesh(m, 2.0).vertices[None], axis=-1)
    np.testing.assert_allclose(d2, 2 * d0)
    with pytest.raises(MeshError):
        scale_mesh(m, 0.0)


def test_obj_roundtrip(tmp_path, sphere):
    p = tmp_path / "s.obj"
    save_obj(sphere, p)
    m = load_mesh(p)
    np.testing.assert_array_equal(m.vertices, sphere.vertices)
    np.testing.assert_array_equal(m.triangles, sphere.triangles)


def test_nearest_on_vertex(cube):
    r = nearest_point(cube, cube.vertices[3])
    assert r.distance == 0.0
    np.testing.assert_allclose(r.closest_point, cube.vertices[3])


def test_nearest_cube_face(cube):
    r = nearest_point(cube, np.array([2.0, 0, 0]))
    assert r.distance == pytest.approx(1.5)
    np.testing.assert_allclose(r.closest_point, [0.5, 0, 0], atol=1e-12)


def test_signed_distance_cube(cube):
    assert signed_distance(cube, np.zeros(3)) == pytest.approx(-0.5)
    p = np.array([0.3, 2.0, -0.1])
    assert signed_distance(cube, p) == pytest.approx(nearest_point(cube, p).distance)
    assert abs(signed_distance(cube, np.array([0.5, 0.1, 0.2]))) < 1e-7
    # deep inside, next to an edge and a corner
    assert signed_distance(cube, np.array([0.45, 0.45, 0.0])) == pytest.approx(-0.05)
    assert signed_distance(cube, np.array([0.4, 0.45, 0.42])) == pytest.approx(-0.05)


def test_unsigned_on_open_mesh(tmp_path, caplog):
    p = tmp_path / "open.obj"
    p.write_text("\n".join(CUBE_OBJ.splitlines()[:-2]) + "\n")
    m = load_mesh(p)
    assert signed_distance(m, np.zeros(3)) == pytest.approx(0.5)
    assert "watertight" in caplog.text


def test_closest_point_kernel_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        got, _ = closest_point_on_triangles(p[None], a[None], b[None], c[None])
        np.testing.assert_allclose(got[0], point_triangle_oracle(p, a, b, c), atol=1e-9)


def test_batch_query_matches_bruteforce(sphere):
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1.6, 1.6, (200, 3))
    q = query_points(sphere, pts)
    for i, p in enumerate(pts):
        cp, d = brute_force_nearest(sphere, p)
        assert abs(q.distance[i] - d) <= 1e-12
        np.testing.assert_allclose(q.closest[i], cp, atol=1e-12)
    inside = np.linalg.norm(pts, axis=1) < 0.95
    outside = np.linalg.norm(pts, axis=1) > 1.0
    assert np.all(q.signed_distance[inside] < 0) and np.all(q.signed_distance[outside] > 0)


def test_sign_on_nonconvex_mesh():
    # two cubes joined at an edge are still sign-correct
    a, b = box_mesh(1.0), box_mesh(1.0, center=(1.0, 1.0, 0.0))
    m = TriangleMesh(np.vstack([a.vertices, b.vertices]),
                     np.vstack([a.triangles, b.triangles + len(a.vertices)]))
    sd = query_points(m, np.array([[0, 0, 0], [1, 1, 0], [1, 0, 0], [0.5, 0.2, 0.1]])).signed_distance
    assert sd[0] < 0 and sd[1] < 0 and sd[2] > 0


def test_gradient_is_unit(sphere):
    rng = np.random.default_rng(4)
    q = query_points(sphere, rng.uniform(-1.5, 1.5, (100, 3)))
    np.testing.assert_allclose(np.linalg.norm(q.gradient, axis=1), 1.0, atol=1e-9)


points = st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3).map(np.array)


@settings(max_examples=60, deadline=None)
@given(points)
def test_nearest_not_farther_than_vertices(p):
    r = nearest_point(_SPHERE, p)
    assert r.distance <= np.linalg.norm(_SPHERE.vertices - p, axis=1).min() + 1e-12
    assert abs(abs(r.signed_distance) - r.distance) <= 1e-9
    assert abs(np.linalg.norm(r.normal) - 1) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(points, points)
def test_signed_distance_lipschitz(p, q):
    ts = np.linspace(0, 1, 9)
    seg = p[None] + ts[:, None] * (q - p)[None]
    sd = query_points(_SPHERE, seg).signed_distance
    step = np.linalg.norm(q - p) / 8
    assert np.all(np.abs(np.diff(sd)) <= step + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10))
def test_scale_composes(a, b):
    m1 = scale_mesh(scale_mesh(_SPHERE, a), b)
    m2 = scale_mesh(_SPHERE, a * b)
    np.testing.assert_allclose(m1.vertices, m2.vertices, atol=1e-12, rtol=0)


_SPHERE = icosphere(1.0, 2)
