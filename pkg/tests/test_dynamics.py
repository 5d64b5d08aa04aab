import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fxd.dynamics import (DynamicObject, MissingPoseError, box_constrain, box_unconstrain, color_at_time,
                          object_to_world, to_world)
from fxd.geometry import quat_to_matrix, yaw_quat

finite = st.floats(-1e6, 1e6, allow_nan=False)
dims_s = arrays(np.float64, 3, elements=st.floats(0.05, 20))


def test_box_center():
    assert np.allclose(box_constrain(np.zeros(3), [4, 2, 1]), 0)


def test_box_hand_value():
    assert np.isclose(box_constrain(np.array([np.log(3), 0, 0]), [4, 2, 1])[0], 1.0, atol=1e-12)


def test_box_supremum_not_attained():
    x = box_constrain(np.array([50.0, -50.0, 0.0]), [4, 2, 1])
    assert x[0] < 2.0 and x[1] > -1.0
    assert abs(x[0] - 2.0) < 1e-12


@given(arrays(np.float64, (5, 3), elements=finite), dims_s)
def test_containment_extreme(logistic, dims):
    local = box_constrain(logistic, dims)
    assert np.all(np.abs(local) < dims / 2)


@given(arrays(np.float64, (4, 3), elements=st.floats(-20, 20)), dims_s)
def test_unconstrain_inverts(logistic, dims):
    local = box_constrain(logistic, dims)
    assert np.allclose(box_unconstrain(local, dims), logistic, atol=1e-6 * (1 + np.abs(logistic).max()) * 1e3)


def test_containment_torch_extreme():
    x = torch.tensor([[1e6, -1e6, 0.0]], dtype=torch.float64)
    out = box_constrain(x, [4, 2, 1]).numpy()
    assert np.all(np.abs(out) < [2, 1, 0.5])
    x32 = torch.tensor([[1e6, -1e6, 40.0]], dtype=torch.float32)
    out32 = box_constrain(x32, [4, 2, 1])
    assert torch.all(out32.abs() < torch.tensor([2.0, 1.0, 0.5]))


def test_to_world_cases():
    p = np.array([1.0, 0, 0])
    assert np.allclose(to_world(p, np.eye(3), np.zeros(3)), p)
    assert np.allclose(to_world(np.zeros(3), np.eye(3), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(to_world(p, yaw_quat(np.pi / 2), np.zeros(3)), [0, 1, 0], atol=1e-12)


@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1),
       arrays(np.float64, (2, 3), elements=st.floats(-100, 100)), arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_to_world_isometry(q, pts, t):
    r = quat_to_matrix(q / np.linalg.norm(q))
    a, b = to_world(pts, r, t)
    assert abs(np.linalg.norm(a - b) - np.linalg.norm(pts[0] - pts[1])) < 1e-9


def test_color_static_and_linear():
    c0 = np.array([0.5, 0.5, 0.5])
    assert np.allclose(color_at_time(c0, np.zeros((2, 3)), 4.0, 1.0), c0)
    coeff = np.array([[0.1, 0, 0]])
    assert np.allclose(color_at_time(c0, coeff, 2.0, 0.0), [0.7, 0.5, 0.5])


@given(arrays(np.float64, 3, elements=st.floats(-2, 2)), arrays(np.float64, (2, 3), elements=st.floats(-100, 100)),
       st.floats(-10, 10))
def test_color_at_reference(c0, coeff, t0):
    assert np.allclose(color_at_time(c0, coeff, t0, t0), np.clip(c0, 0, 1))


def test_pose_interpolation_and_range():
    obj = DynamicObject("a", [4, 2, 1.5], [0.0, 1.0], [[1, 0, 0, 0], yaw_quat(np.pi / 2)], [[0, 0, 0], [2, 0, 0]])
    r, t = obj.pose_at(0.5)
    assert np.allclose(t, [1, 0, 0])
    assert np.allclose(r, quat_to_matrix(yaw_quat(np.pi / 4)))
    assert np.isclose(obj.t0, 0.5)
    with pytest.raises(MissingPoseError):
        obj.pose_at(1.5)
    assert np.allclose(object_to_world(obj, np.zeros(3), 1.0), [2, 0, 0])


def test_object_validation():
    with pytest.raises(ValueError):
        DynamicObject("a", [0, 1, 1], [0.0], [[1, 0, 0, 0]], [[0, 0, 0]])
    with pytest.raises(ValueError):
        DynamicObject("a", [1, 1, 1], [1.0, 0.0], [[1, 0, 0, 0]] * 2, [[0, 0, 0]] * 2)
