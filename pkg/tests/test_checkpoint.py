import numpy as np
import pytest

from src.sparsederf.checkpoint import Checkpoint, checkpoint_path, latest_checkpoint, load_checkpoint, save_checkpoint
from src.sparsederf.errors import ManifestError


def _checkpoint(rng, step=7):
    params = {"coarse.l0.w": rng.normal(size=(4, 3)), "coarse.l0.b": rng.normal(size=3), "rbk.embed": rng.normal(size=(2, 5))}
    return Checkpoint(
        step=step,
        params=params,
        first_moments={k: 0.1 * v for k, v in params.items()},
        second_moments={k: v * v for k, v in params.items()},
        rng_state=np.random.default_rng(5).bit_generator.state,
        config={"iterations": 10, "kernel": "rbk"},
        meta={"scene": "tiny", "n_views": 2},
    )


def test_round_trip_is_exact(tmp_path, rng):
    ckpt = _checkpoint(rng)
    path = save_checkpoint(str(tmp_path / "a.ckpt"), ckpt)
    loaded = load_checkpoint(path)
    assert loaded.step == 7
    assert loaded.config == ckpt.config
    assert loaded.meta == ckpt.meta
    for group in ("params", "first_moments", "second_moments"):
        before, after = getattr(ckpt, group), getattr(loaded, group)
        assert before.keys() == after.keys()
        for name in before:
            assert np.array_equal(before[name], after[name])
    restored = np.random.default_rng(0)
    restored.bit_generator.state = loaded.rng_state
    assert restored.integers(0, 2 ** 62) == np.random.default_rng(5).integers(0, 2 ** 62)


def test_identical_states_give_identical_bytes(tmp_path, rng):
    ckpt = _checkpoint(rng)
    a = save_checkpoint(str(tmp_path / "a.ckpt"), ckpt)
    b = save_checkpoint(str(tmp_path / "nested" / "b.ckpt"), ckpt)
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()


def test_truncated_checkpoint_is_rejected(tmp_path, rng):
    path = save_checkpoint(str(tmp_path / "a.ckpt"), _checkpoint(rng))
    with open(path, "rb") as fh:
        data = fh.read()
    with open(path, "wb") as fh:
        fh.write(data[:-16])
    with pytest.raises(ManifestError):
        load_checkpoint(path)


def test_foreign_file_is_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes((4).to_bytes(8, "little") + b"{}  ")
    with pytest.raises(ManifestError):
        load_checkpoint(str(path))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_latest_checkpoint(tmp_path, rng):
    assert latest_checkpoint(str(tmp_path)) is None
    for step in (2, 10, 3):
        save_checkpoint(checkpoint_path(str(tmp_path), step), _checkpoint(rng, step))
    latest = latest_checkpoint(str(tmp_path))
    assert latest.endswith("step_000010.ckpt")
    assert load_checkpoint(latest).step == 10
