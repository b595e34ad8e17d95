import numpy as np
import pytest
import torch

from gecko.data import (DataError, PasskeyTask, documents, load_bytes, noisy_copy, random_windows,
                        repeated_pattern)
from gecko.numerics import generator


def test_load_bytes(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(bytes([0, 255, 7]))
    assert load_bytes(p).tolist() == [0, 255, 7]
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(DataError):
        load_bytes(tmp_path / "e.bin")
    with pytest.raises(DataError):
        load_bytes(tmp_path / "missing.bin")


def test_repeated_pattern():
    raw = np.frombuffer(repeated_pattern(1000, 64, seed=1), dtype=np.uint8)
    assert len(raw) == 1000
    assert (raw[64:] == raw[:-64]).all()


def test_noisy_copy_structure():
    raw = np.frombuffer(noisy_copy(4096, period=8, doc_len=512, noise=0.2, seed=2), dtype=np.uint8)
    docs = raw.reshape(8, 512)
    same = (docs[:, 8:] == docs[:, :-8]).mean()
    assert 0.75 < same < 0.9
    assert raw.max() < 64


def test_windows_and_documents():
    data = torch.arange(100)
    w = random_windows(data, 4, 10, generator(0), align=5)
    assert w.shape == (4, 10) and (w[:, 0] % 5 == 0).all()
    assert (w[:, 1:] - w[:, :-1] == 1).all()
    docs, skipped = documents(torch.arange(70), 32, 8)
    assert [d.numel() for d in docs] == [32, 32] and skipped == 1
    docs, skipped = documents(torch.arange(75), 32, 8)
    assert [d.numel() for d in docs] == [32, 32, 8] and skipped == 0


def test_passkey_layout():
    task = PasskeyTask(chunk=8, keys=4, vocab=32, context_chunks=6)
    tok, qpos, ans = task.sample(20, 16, generator(1))
    rows = torch.arange(20)
    assert (tok[rows, qpos] == task.marker).all()
    assert torch.equal(tok[rows, qpos - 16], ans)
    assert (qpos >= 40).all() and (qpos < 47).all()
    # keys only appear where planted
    assert ((tok < 4).sum(1) == 1).all()
    with pytest.raises(ValueError):
        task.sample(1, 100, generator(1))
