"""The compiled and numpy kernels must agree; each is also checked on its own."""

import subprocess
import sys

import numpy as np
import pytest

from unite_sampler import _pykernels, kernels

BACKENDS = kernels.available_backends()


def test_backend_selection_reports_names():
    assert "python" in BACKENDS
    assert kernels.backend_name() in BACKENDS
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


@pytest.fixture
def arrays():
    rng = np.random.default_rng(3)
    return {
        "z": rng.normal(size=(257, 3)),
        "eps": rng.normal(size=(257, 3)),
        "noise": rng.normal(size=(257, 3)),
        "weights": np.array([0.2, 0.5, 0.3]),
        "means": rng.normal(size=(3, 3)),
        "stds": rng.uniform(0.3, 1.5, size=(3, 3)),
        "terms": rng.normal(size=(4, 257, 3)),
        "coefs": np.array([1.5, 0.0, 2.0, 1.0]),
    }


@pytest.mark.parametrize("name", BACKENDS)
def test_backends_agree(name, arrays):
    impl = kernels.get_backend(name)
    ref = _pykernels
    a = arrays
    np.testing.assert_allclose(
        impl.gmm_epsilon(a["z"], a["weights"], a["means"], a["stds"], 0.3),
        ref.gmm_epsilon(a["z"], a["weights"], a["means"], a["stds"], 0.3),
        rtol=1e-13, atol=1e-14,
    )
    np.testing.assert_array_equal(
        impl.gaussian_epsilon(a["z"], a["means"][0], a["stds"][0], 0.7),
        ref.gaussian_epsilon(a["z"], a["means"][0], a["stds"][0], 0.7),
    )
    np.testing.assert_array_equal(
        impl.ddpm_step(a["z"], a["eps"], 0.02, 0.5, 0.1414, a["noise"]),
        ref.ddpm_step(a["z"], a["eps"], 0.02, 0.5, 0.1414, a["noise"]),
    )
    np.testing.assert_array_equal(
        impl.ddim_step(a["z"], a["eps"], 0.3, 0.9), ref.ddim_step(a["z"], a["eps"], 0.3, 0.9)
    )
    np.testing.assert_array_equal(impl.weighted_sum(a["terms"], a["coefs"]), ref.weighted_sum(a["terms"], a["coefs"]))
    np.testing.assert_array_equal(
        impl.compose_combine(a["terms"], a["coefs"], a["z"], 3.5),
        ref.compose_combine(a["terms"], a["coefs"], a["z"], 3.5),
    )


def test_ddpm_step_hand_value(backend):
    # (1 - 0.02 / sqrt(0.5) * 0.7) / sqrt(0.98), evaluated by hand to 5 digits
    out = kernels.ddpm_step(np.array([[1.0]]), np.array([[0.7]]), 0.02, 0.5, 0.0, None)
    assert out[0, 0] == pytest.approx(0.99015, abs=5e-6)


def test_weighted_sum_skips_zero_coefficients(backend):
    terms = np.array([[[1.0]], [[np.inf]]])
    assert kernels.weighted_sum(terms, np.array([2.0, 0.0]))[0, 0] == 2.0


def test_gmm_kernel_is_stable_far_from_components(backend):
    z = np.array([[60.0], [-60.0]])
    out = kernels.gmm_epsilon(z, np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[0.1], [0.1]]), 0.999)
    assert np.all(np.isfinite(out))


def test_fallback_selected_when_extension_missing():
    # block the compiled module in a fresh interpreter
    code = (
        "import sys\n"
        "class Block:\n"
        "    def find_spec(self, name, path=None, target=None):\n"
        "        if name == 'unite_sampler._ckernels':\n"
        "            raise ImportError('blocked')\n"
        "sys.meta_path.insert(0, Block())\n"
        "from unite_sampler import kernels\n"
        "print(kernels.backend_name(), kernels.available_backends())\n"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert out.strip() == "python ['python']"


def test_flat_kernels_handle_empty_batches(backend):
    empty = np.zeros((0, 3))
    assert kernels.ddpm_step(empty, empty, 0.1, 0.5, 0.2, empty).shape == (0, 3)
    assert kernels.ddim_step(empty, empty, 0.5, 0.6).shape == (0, 3)
    assert kernels.compose_combine(np.zeros((2, 0, 3)), np.ones(2), empty, 1.0).shape == (0, 3)
