import numpy as np
import pytest

from meanfield_lab.rng import stream, stream_key


class TestStreams:
    def test_same_key_same_draws(self):
        a = stream(7, "brownian", 3).standard_normal(100)
        b = stream(7, "brownian", 3).standard_normal(100)
        np.testing.assert_array_equal(a, b)

    def test_distinct_ids_differ(self):
        a = stream(7, "brownian", 3).standard_normal(10)
        b = stream(7, "brownian", 4).standard_normal(10)
        c = stream(8, "brownian", 3).standard_normal(10)
        assert not np.allclose(a, b)
        assert not np.allclose(a, c)

    def test_key_shape(self):
        k = stream_key(0, "init", 1)
        assert k.shape == (2,) and k.dtype == np.uint64

    def test_negative_id_rejected(self):
        with pytest.raises(ValueError):
            stream(0, -1)

    def test_moments(self):
        z = stream(0, "moments").standard_normal(200_000)
        np.testing.assert_allclose([z.mean(), z.var()], [0.0, 1.0], atol=0.01)
