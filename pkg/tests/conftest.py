import numpy as np
import pytest

from nsvol.sde import DiffusionModel


def make_constant_model(b_matrix, drift_vec=(0.0, 0.0), box=((0.1, 5.0),),
                        sigma_scales=False, name="const"):
    """Model whose diffusion matrix ignores the parameter entirely."""
    b_matrix = np.asarray(b_matrix, dtype=float)
    drift_vec = np.asarray(drift_vec, dtype=float)

    def drift(t, x, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(drift_vec, x.shape)

    def diffusion(t, x, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        scale = sigma[0] if sigma_scales else 1.0
        return np.broadcast_to(scale * b_matrix, (x.shape[0], 2, 2))

    def diffusion_dsigma(t, x, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = 1
        base = b_matrix if sigma_scales else np.zeros((2, 2))
        return np.broadcast_to(base, (x.shape[0], d, 2, 2))

    return DiffusionModel(dim_param=1, drift=drift, diffusion=diffusion,
                          diffusion_dsigma=diffusion_dsigma, param_box=box,
                          y0=(0.0, 0.0), constant_coeffs=True, name=name)


@pytest.fixture
def sigma_free_model():
    """d = 1 dummy parameter; likelihood is flat in sigma."""
    return make_constant_model([[1.0, 0.0], [0.3, np.sqrt(1 - 0.09)]],
                               name="sigma_free")


def sample_with_values(grid, y1, y2):
    from nsvol.sde import NonsyncSample
    return NonsyncSample(grid, np.asarray(y1, float), np.asarray(y2, float))
