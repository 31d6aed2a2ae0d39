import numpy as np
import pytest
from hypothesis import given, strategies as st

import meshgrad as mg
from meshgrad.mesh import Element, ElementHandle, MeshError, Op

from conftest import rect_grid


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadObj:
    def test_single_triangle(self, tmp_path):
        p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        m = mg.load_obj(p)
        assert (m.num_vertices, m.num_faces, m.num_edges) == (3, 1, 3)

    def test_texture_normal_suffixes_ignored(self, tmp_path):
        p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/1/1 2/1/1 3/1/1\n")
        m = mg.load_obj(p)
        assert m.num_faces == 1

    def test_empty_file(self, tmp_path):
        p = write(tmp_path, "")
        with pytest.raises(MeshError, match="no faces"):
            mg.load_obj(p)

    def test_out_of_range_face(self, tmp_path):
        p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
        with pytest.raises(MeshError, match="vertex"):
            mg.load_obj(p)

    def test_non_triangular_face(self, tmp_path):
        p = write(tmp_path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(MeshError, match="line 5.*non-triangular"):
            mg.load_obj(p)

    def test_malformed_vertex_names_line(self, tmp_path):
        p = write(tmp_path, "v 0 0 zero\nf 1 2 3\n")
        with pytest.raises(MeshError, match="line 1"):
            mg.load_obj(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            mg.load_obj(tmp_path / "nope.obj")

    def test_round_trip(self, tmp_path):
        m = mg.generate_grid(4, 0.3)
        p = tmp_path / "grid.obj"
        mg.save_obj(p, m.positions, m.faces)
        m2 = mg.load_obj(p)
        assert np.allclose(m2.positions, m.positions, atol=1e-5)
        assert np.array_equal(m2.faces, m.faces)


class TestGenerators:
    def test_grid_2(self):
        m = mg.generate_grid(2)
        assert (m.num_vertices, m.num_faces, m.num_edges) == (4, 2, 5)

    def test_grid_10(self):
        m = mg.generate_grid(10)
        assert m.num_vertices == 100
        assert m.num_faces == 2 * 9 * 9  # two triangles per quad

    def test_grid_preconditions(self):
        with pytest.raises(ValueError):
            mg.generate_grid(1)
        with pytest.raises(ValueError):
            mg.generate_grid(4, 0.0)

    def test_icosphere_0(self):
        m = mg.generate_icosphere(0)
        assert (m.num_vertices, m.num_faces, m.num_edges) == (12, 20, 30)

    def test_icosphere_1(self):
        m = mg.generate_icosphere(1)
        # each face splits in four; new vertex count is old vertices + old edges
        assert (m.num_vertices, m.num_faces) == (42, 80)

    @pytest.mark.parametrize("sub", [0, 1, 2])
    def test_icosphere_euler_and_unit(self, sub):
        m = mg.generate_icosphere(sub)
        assert m.num_vertices - m.num_edges + m.num_faces == 2
        assert np.allclose(np.linalg.norm(m.positions, axis=1), 1.0, atol=1e-14)

    def test_icosphere_outward_winding(self):
        m = mg.generate_icosphere(1)
        a, b, c = (m.positions[m.faces[:, k]] for k in range(3))
        dets = np.einsum("ij,ij->i", a, np.cross(b, c))
        assert np.all(dets > 0)


class TestMeshValidation:
    def test_degenerate_face(self):
        with pytest.raises(MeshError, match="repeated"):
            mg.Mesh(np.zeros((3, 3)), [[0, 1, 1]])

    def test_face_index_out_of_range(self):
        with pytest.raises(MeshError):
            mg.Mesh(np.zeros((3, 3)), [[0, 1, 5]])

    def test_explicit_edges_only_without_faces(self):
        with pytest.raises(MeshError):
            mg.Mesh(np.zeros((3, 3)), [[0, 1, 2]], edges=[[0, 1]])

    def test_edge_only_mesh(self):
        m = mg.Mesh(np.zeros((2, 3)), np.zeros((0, 3)), edges=[[1, 0]])
        assert np.array_equal(m.edges, [[0, 1]])
        assert m.num_faces == 0


class TestQuery:
    def test_fv_winding_order(self, grid3):
        h = ElementHandle(Element.FACE, 0)
        out = mg.query(grid3, Op.FV, h)
        assert [e.index for e in out] == list(grid3.faces[0])

    def test_ev_canonical(self, grid3):
        h = ElementHandle(Element.EDGE, 2)
        out = mg.query(grid3, Op.EV, h)
        i, j = grid3.edges[2]
        assert [e.index for e in out] == [i, j]
        assert i < j

    def test_v_is_identity(self, grid3):
        h = ElementHandle(Element.VERTEX, 5)
        assert mg.query(grid3, Op.V, h) == [h]

    def test_vv_center_of_3x3(self, grid3):
        # independent enumeration of the one-ring from the edge list
        expected = sorted(
            int(b) for a, b in grid3.edges if a == 4
        ) + sorted(int(a) for a, b in grid3.edges if b == 4)
        expected = sorted(expected)
        out = mg.query(grid3, Op.VV, ElementHandle(Element.VERTEX, 4))
        assert [e.index for e in out] == expected
        assert len(out) == 6  # uniform diagonal: 4 axis neighbors + 2 diagonal

    def test_kind_mismatch(self, grid3):
        with pytest.raises(ValueError, match="expects"):
            mg.query(grid3, Op.FV, ElementHandle(Element.VERTEX, 0))

    def test_valence_cap(self):
        # star fan: center vertex with valence 40
        k = 40
        angles = np.linspace(0, 2 * np.pi, k, endpoint=False)
        pos = np.concatenate([[[0, 0, 0]], np.stack([np.cos(angles), np.sin(angles), np.zeros(k)], axis=1)])
        faces = [[0, 1 + i, 1 + (i + 1) % k] for i in range(k)]
        m = mg.Mesh(pos, faces)
        with pytest.raises(ValueError, match="cap"):
            mg.query(m, Op.VV, ElementHandle(Element.VERTEX, 0))
        assert len(mg.query(m, Op.VV, ElementHandle(Element.VERTEX, 0), valence_cap=64)) == k

    def test_ve_vf_sorted(self, grid3):
        for op in (Op.VE, Op.VF):
            out = [e.index for e in mg.query(grid3, op, ElementHandle(Element.VERTEX, 4))]
            assert out == sorted(out)


class TestPatches:
    def test_1024_faces_target_512(self):
        m = rect_grid(33, 17)  # 32 * 16 quads = 1024 faces
        assert m.num_faces == 1024
        patch = mg.partition_patches(m, 512)
        assert patch.min() >= 0
        _, counts = np.unique(patch, return_counts=True)
        assert counts.max() <= 1024
        assert len(counts) == 2

    def test_tiny_mesh_single_patch(self):
        m = mg.generate_grid(2)  # 2 faces
        patch = mg.partition_patches(m, 512)
        assert np.array_equal(patch, [0, 0])

    def test_disconnected_components(self):
        pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 0], [6, 5, 0], [5, 6, 0]], dtype=float)
        m = mg.Mesh(pos, [[0, 1, 2], [3, 4, 5]])
        patch = mg.partition_patches(m, 512)
        assert np.all(patch >= 0)  # total assignment
        assert patch[0] != patch[1]  # BFS cannot cross components

    def test_patch_target_precondition(self, grid3):
        with pytest.raises(ValueError):
            mg.partition_patches(grid3, 0)

    def test_partition_is_total_and_bounded(self):
        m = mg.generate_grid(9)
        target = 10
        patch = mg.partition_patches(m, target)
        assert patch.shape == (m.num_faces,)
        assert np.all(patch >= 0)
        _, counts = np.unique(patch, return_counts=True)
        assert counts.max() <= 2 * target


class TestInvariants:
    @given(st.integers(0, 500))
    def test_edge_set_is_face_order_independent(self, seed):
        m = mg.generate_grid(5)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(m.num_faces)
        m2 = mg.Mesh(m.positions, m.faces[perm])
        assert np.array_equal(m.edges, m2.edges)

    @pytest.mark.parametrize("mesh_fn", [lambda: mg.generate_grid(6), lambda: mg.generate_icosphere(1)])
    def test_degree_sum_counts_edges_twice(self, mesh_fn):
        m = mesh_fn()
        assert int(m.vertex_to_vertex.degrees().sum()) == 2 * m.num_edges

    def test_adjacency_consistent_with_edges(self):
        m = mg.generate_icosphere(1)
        pairs = {(int(i), int(j)) for i, j in m.edges}
        for u in range(m.num_vertices):
            for v in m.vertex_to_vertex[u]:
                assert (min(u, v), max(u, v)) in pairs

    def test_save_obj_six_significant_digits(self, tmp_path):
        p = tmp_path / "prec.obj"
        mg.save_obj(p, [[1.23456789, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2]])
        assert "v 1.23457 0 0" in p.read_text()
