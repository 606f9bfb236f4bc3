import numpy as np
import pytest
import torch

from advsdg.seeding import substream, torch_generator


def test_substream_reproducible():
    a = substream(0, "data").random(8)
    b = substream(0, "data").random(8)
    assert np.array_equal(a, b)


def test_named_streams_differ():
    names = ["data", "style", "patches", "init", "geometry", "texture",
             "augment", "split", "preview"]
    draws = {n: tuple(substream(7, n).random(4)) for n in names}
    assert len(set(draws.values())) == len(names)


def test_seed_changes_stream():
    assert not np.array_equal(substream(0, "data").random(4),
                              substream(1, "data").random(4))


def test_extra_keys_fork_stream():
    base = substream(0, "augment").random(4)
    keyed = substream(0, "augment", 3, 11).random(4)
    other = substream(0, "augment", 3, 12).random(4)
    assert not np.array_equal(base, keyed)
    assert not np.array_equal(keyed, other)
    assert np.array_equal(keyed, substream(0, "augment", 3, 11).random(4))


def test_string_keys_supported():
    a = substream(0, "style", "torch").random(4)
    b = substream(0, "style", "torch").random(4)
    c = substream(0, "style", "view").random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_unknown_stream_name_rejected():
    with pytest.raises(KeyError):
        substream(0, "nonsense")


def test_torch_generator_deterministic():
    g1 = torch_generator(substream(0, "init"))
    g2 = torch_generator(substream(0, "init"))
    t1 = torch.randn(16, generator=g1)
    t2 = torch.randn(16, generator=g2)
    assert torch.equal(t1, t2)
    g3 = torch_generator(substream(1, "init"))
    assert not torch.equal(t1, torch.randn(16, generator=g3))
