import numpy as np

from fedrr.rng import derive_seed, stream, stream_key


def test_same_name_same_stream():
    a = stream(7, "x", 1, 2).random(5)
    b = stream(7, "x", 1, 2).random(5)
    assert np.array_equal(a, b)


def test_different_names_differ():
    assert stream_key(7, "x", 1) != stream_key(7, "x", 2)
    assert stream_key(7, "x") != stream_key(7, "y")
    assert stream_key(7, "x") != stream_key(8, "x")


def test_key_is_128_bit():
    k = stream_key(0, "label")
    assert 0 <= k < 2**128


def test_derive_seed_stable_and_bounded():
    s = derive_seed(3, "run", "algo", 1.5, 0)
    assert s == derive_seed(3, "run", "algo", 1.5, 0)
    assert 0 <= s < 2**63
    assert s != derive_seed(3, "run", "algo", 1.5, 1)
