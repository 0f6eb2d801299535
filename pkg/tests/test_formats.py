import numpy as np
import pytest

from microt import nn
from microt.formats import FormatError, dumps_model, load_model, loads_model, save_model


def as_f32(net):
    return [p.astype(np.float32) for p in net.params()]


@pytest.mark.parametrize("head", [None, 5])
def test_model_round_trip(tmp_path, head):
    net = nn.seeded_init((2, 7, 7), "conv:3:3:2:1 relu conv:4:3 relu gap dense:6 softmax:2", 0, head_classes=head)
    save_model(net, tmp_path / "m.mcrt")
    back = load_model(tmp_path / "m.mcrt")
    assert dumps_model(back) == dumps_model(net)
    assert [type(b) for b in back.blocks] == [type(b) for b in net.blocks]
    for a, b in zip(as_f32(net), back.params()):
        assert np.array_equal(a, b)
    assert (back.head is None) == (head is None)


def test_bad_magic_version_and_truncation():
    raw = dumps_model(nn.seeded_init((3,), "dense:2", 0))
    with pytest.raises(FormatError):
        loads_model(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        loads_model(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(FormatError):
        loads_model(raw[:-2])
    with pytest.raises(FormatError):
        loads_model(raw + b"\x00")
