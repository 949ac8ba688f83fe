import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvewalk.dataio import (GENERATORS, SHAPE_KINDS, DatasetError, Mesh, MeshError, OffCountError, OffHeaderError,
                              OffIndexError, OffParseError, OffTokenError, PointsFormatError, load_dataset,
                              parse_off, read_points, sample_surface, synth_shape, synth_shapes, synth_splits,
                              torus_implicit, write_off, write_points)
from curvewalk.geometry import PointCloud

TETRA = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


# ---- OFF ----------------------------------------------------------------------

def test_tetrahedron():
    m = parse_off(TETRA)
    assert m.vertices.shape == (4, 3) and m.faces.shape == (4, 3)
    assert m.faces[3].tolist() == [1, 2, 3]


def test_glued_header_parses_identically():
    glued = TETRA.replace("OFF\n4 4 0", "OFF4 4 0")
    a, b = parse_off(TETRA), parse_off(glued.encode())
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


def test_comments_and_blank_lines_are_skipped():
    text = "# made by hand\nOFF\n\n3 1 0  # counts\n0 0 0\n1 0 0\n\n0 1 0\n3 0 1 2\n"
    assert parse_off(text).faces.tolist() == [[0, 1, 2]]


def test_polygons_are_fan_triangulated():
    text = "OFF\n5 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n-1 1 0\n5 0 1 2 3 4\n"
    assert parse_off(text).faces.tolist() == [[0, 1, 2], [0, 2, 3], [0, 3, 4]]


@pytest.mark.parametrize("text, err, line", [
    ("", OffHeaderError, 0),
    ("PLY\n1 0 0\n", OffHeaderError, 1),
    ("OFF\n", OffCountError, 1),
    ("OFF\n3\n", OffCountError, 2),
    ("OFF\n-1 0 0\n", OffCountError, 2),
    ("OFF\n2 0 0\n0 0 0\n", OffCountError, 3),
    ("OFF\n1 0 0\n0 zero 0\n", OffTokenError, 3),
    ("OFF\n1 0 0\n0 nan 0\n", OffTokenError, 3),
    ("OFF\n1 0 0\n0 0\n", OffTokenError, 3),
    ("OFF\nthree 0 0\n", OffTokenError, 2),
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n", OffIndexError, 6),
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2\n", OffCountError, 6),
    ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n", OffCountError, 6),
    ("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", OffCountError, 6),
])
def test_each_failure_is_a_distinct_error_with_line(text, err, line):
    with pytest.raises(err) as info:
        parse_off(text)
    assert info.value.line == line
    assert f"line {line}:" in str(info.value)


def test_error_classes_are_distinct():
    classes = {OffHeaderError, OffCountError, OffTokenError, OffIndexError}
    assert len(classes) == 4 and all(issubclass(c, OffParseError) for c in classes)


@st.composite
def meshes(draw):
    nv = draw(st.integers(3, 12))
    coord = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
    verts = draw(st.lists(st.tuples(coord, coord, coord), min_size=nv, max_size=nv))
    faces = draw(st.lists(st.tuples(*[st.integers(0, nv - 1)] * 3), max_size=10))
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


@given(meshes())
def test_write_parse_round_trip(mesh):
    back = parse_off(write_off(mesh))
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)


@given(st.binary(max_size=200))
def test_arbitrary_bytes_give_mesh_or_structured_error(blob):
    try:
        parse_off(blob)
    except OffParseError:
        pass


@given(st.text(alphabet="OF0123456789 -.e#\nnai", max_size=120))
def test_off_like_text_gives_mesh_or_structured_error(text):
    try:
        parse_off(text)
    except OffParseError:
        pass


def test_mesh_rejects_bad_indices():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])


# ---- surface sampling ------------------------------------------------------------

def test_single_triangle_samples_lie_on_it(rng):
    tri = Mesh([[0.0, 0, 0], [2.0, 0, 0], [0.0, 1, 1]], [[0, 1, 2]])
    cloud, _, bary = sample_surface(tri, 500, rng, return_details=True)
    n = np.cross(tri.vertices[1] - tri.vertices[0], tri.vertices[2] - tri.vertices[0])
    n /= np.linalg.norm(n)
    assert np.abs((cloud.coords - tri.vertices[0]) @ n).max() <= 1e-6
    np.testing.assert_allclose(bary @ tri.vertices, cloud.coords, atol=1e-12)
    np.testing.assert_allclose(np.abs(cloud.normals @ n), 1.0)


def test_area_ratio_three_to_one():
    # areas 1.5 and 0.5
    m = Mesh([[0.0, 0, 0], [3.0, 0, 0], [0.0, 1, 0], [0.0, 0, 5], [1.0, 0, 5], [0.0, 1, 5]], [[0, 1, 2], [3, 4, 5]])
    _, tri, _ = sample_surface(m, 100_000, np.random.default_rng(1), return_details=True)
    counts = np.bincount(tri, minlength=2)
    assert counts[0] / counts[1] == pytest.approx(3.0, rel=0.05)


def test_barycentric_coordinates_valid(rng):
    m = parse_off(TETRA)
    _, tri, bary = sample_surface(m, 2000, rng, return_details=True)
    assert (bary >= 0).all()
    np.testing.assert_allclose(bary.sum(1), 1.0, atol=1e-12)
    assert set(np.unique(tri)) <= set(range(4))


def test_sampling_deterministic_under_seed():
    m = parse_off(TETRA)
    a = sample_surface(m, 64, np.random.default_rng(7))
    b = sample_surface(m, 64, np.random.default_rng(7))
    np.testing.assert_array_equal(a.coords, b.coords)


def test_zero_area_mesh_rejected(rng):
    with pytest.raises(MeshError):
        sample_surface(Mesh([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]], [[0, 1, 2]]), 10, rng)
    with pytest.raises(MeshError):
        sample_surface(Mesh(np.zeros((3, 3)), np.zeros((0, 3))), 10, rng)


# ---- synthetic shapes -------------------------------------------------------------

def test_sphere_normals_are_coordinates():
    pts, normals = GENERATORS["sphere"](300, np.random.default_rng(0))
    np.testing.assert_allclose(normals, pts / np.linalg.norm(pts, axis=1, keepdims=True), atol=1e-15)
    c = synth_shape("sphere", 300, np.random.default_rng(0), jitter=0.0, rotate=False)
    # normalisation is x -> (x - m) / s, so coords - normals / s is one fixed point
    dn, dc = normals - normals.mean(0), c.coords - c.coords.mean(0)
    center = c.coords - normals * ((dc * dn).sum() / (dn * dn).sum())
    assert np.abs(center - center[0]).max() <= 1e-12
    np.testing.assert_allclose(c.normals, normals, atol=1e-12)


def test_cube_normals_axis_aligned():
    pts, normals = GENERATORS["cube"](300, np.random.default_rng(0))
    assert set(np.unique(normals)) <= {-1.0, 0.0, 1.0}
    assert (np.abs(normals).sum(1) == 1.0).all()
    # each point sits on the face its normal names
    rows, axis = np.arange(300), np.abs(normals).argmax(1)
    np.testing.assert_array_equal(pts[rows, axis] * normals[rows, axis], 1.0)
    c = synth_shape("cube", 300, np.random.default_rng(0), jitter=0.0, rotate=False)
    np.testing.assert_array_equal(c.normals, normals)


def test_torus_normals_match_implicit_gradient():
    pts, normals = GENERATORS["torus"](1000, np.random.default_rng(3))
    h = 1e-6
    grad = np.stack([(torus_implicit(pts + h * e) - torus_implicit(pts - h * e)) / (2 * h) for e in np.eye(3)], 1)
    grad /= np.linalg.norm(grad, axis=1, keepdims=True)
    assert np.abs(grad - normals).max() <= 1e-4
    # the unit-sphere rescale is a similarity, so normals pass through unchanged
    c = synth_shape("torus", 1000, np.random.default_rng(3), jitter=0.0, rotate=False)
    np.testing.assert_allclose(c.normals, normals, atol=1e-12)


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_synthetic_normals_unit_and_outward(kind, rng):
    c = synth_shape(kind, 400, rng)
    np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1.0, atol=1e-12)
    if kind != "torus":
        assert ((c.coords - c.coords.mean(0)) * c.normals).sum(1).min() > 0


def test_unknown_kind(rng):
    with pytest.raises(ValueError):
        synth_shape("teapot", 10, rng)


def test_synth_splits_labels_and_tags():
    train, test = synth_splits(n_train=8, n_test=4, n_points=32, seed=0)
    assert (len(train), len(test)) == (8, 4)
    assert train.split == "train" and test.split == "test"
    assert sorted(np.bincount(train.labels).tolist()) == [2, 2, 2, 2]
    assert not any(np.array_equal(a.coords, b.coords) for a in train.clouds for b in test.clouds)
    again, _ = synth_splits(n_train=8, n_test=4, n_points=32, seed=0)
    np.testing.assert_array_equal(train.coords(), again.coords())


def test_synth_shapes_class_table(rng):
    ds = synth_shapes(["cube", "sphere"], 2, 16, rng)
    assert ds.class_names == ["cube", "sphere"] and ds.labels.tolist() == [0, 1, 0, 1]


# ---- directory datasets ----------------------------------------------------------------

def make_tree(root, classes=("chair", "bed"), per_split=2):
    for name in classes:
        for split in ("train", "test"):
            d = root / name / split
            d.mkdir(parents=True)
            for i in range(per_split):
                (d / f"{name}_{split}_{i}.off").write_text(TETRA.replace("0 0 1\n", f"0 0 {1 + i}\n", 1))


def test_load_dataset_is_deterministic_and_lexicographic(tmp_path):
    make_tree(tmp_path)
    a = load_dataset(tmp_path, 32, "train")
    b = load_dataset(tmp_path, 32, "train")
    assert a.class_names == ["bed", "chair"] and a.labels.tolist() == [0, 0, 1, 1]
    np.testing.assert_array_equal(a.coords(), b.coords())
    assert np.linalg.norm(a.coords(), axis=-1).max() == pytest.approx(1.0)


def test_load_dataset_split_and_filter(tmp_path):
    make_tree(tmp_path)
    test = load_dataset(tmp_path, 16, "test", classes=["chair"])
    assert test.split == "test" and test.class_names == ["chair"] and len(test) == 2


def test_load_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing", 16)
    make_tree(tmp_path)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, 16, classes=[])
    (tmp_path / "empty" / "train").mkdir(parents=True)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, 16)


# ---- PTS ---------------------------------------------------------------------------

@pytest.mark.parametrize("normals, labels", [(False, False), (True, False), (False, True), (True, True)])
def test_points_round_trip(tmp_path, rng, normals, labels):
    cloud = PointCloud(rng.normal(size=(20, 3)), labels=rng.integers(0, 5, 20) if labels else None,
                       normals=rng.normal(size=(20, 3)) if normals else None)
    write_points(tmp_path / "c.pts", cloud)
    back = read_points(tmp_path / "c.pts")
    np.testing.assert_allclose(back.coords, cloud.coords, rtol=1e-8)
    if normals:
        np.testing.assert_allclose(back.normals, cloud.normals, rtol=1e-8)
    else:
        assert back.normals is None
    if labels:
        np.testing.assert_array_equal(back.labels, cloud.labels)
    else:
        assert back.labels is None


def test_points_text_is_nine_significant_digits(tmp_path):
    write_points(tmp_path / "c.pts", PointCloud(np.array([[1 / 3, 2.0, -1e-7]])))
    assert (tmp_path / "c.pts").read_text().splitlines() == ["PTS 1 -", "0.333333333 2 -1e-07"]


@pytest.mark.parametrize("text", [
    "",
    "PTX 1 -\n0 0 0\n",
    "PTS one -\n0 0 0\n",
    "PTS 1 q\n0 0 0\n",
    "PTS 2 -\n0 0 0\n",
    "PTS 1 n\n0 0 0\n",
    "PTS 1 -\n0 0 0 1\n",
    "PTS 1 l\n0 0 0 x\n",
    "PTS 0 -\n",
])
def test_points_format_errors(tmp_path, text):
    (tmp_path / "bad.pts").write_text(text)
    with pytest.raises(PointsFormatError):
        read_points(tmp_path / "bad.pts")
