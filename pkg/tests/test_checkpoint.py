import numpy as np
import pytest

from multidistill.checkpoint import MAGIC, read_state_file, write_state_file


class TestStateContainer:
    def test_round_trip_exact(self, tmp_path):
        path = str(tmp_path / "s.bin")
        rng = np.random.default_rng(0)
        arrays = {
            "a/w": rng.normal(size=(3, 5)),
            "b/idx": np.arange(7, dtype=np.int64),
            "c/scalarish": rng.normal(size=(1,)),
        }
        meta = {"kind": "test", "step": 12, "big": 2**80, "pi": 3.141592653589793}
        write_state_file(path, meta, arrays)
        m2, a2 = read_state_file(path)
        assert m2["kind"] == "test" and m2["step"] == 12
        assert m2["big"] == 2**80  # arbitrary-size ints survive
        assert m2["pi"] == 3.141592653589793
        assert set(a2) == set(arrays)
        for k in arrays:
            assert a2[k].dtype == arrays[k].dtype
            assert np.array_equal(a2[k], arrays[k])

    def test_payload_order_is_insertion_order(self, tmp_path):
        path = str(tmp_path / "o.bin")
        write_state_file(path, {}, {"z": np.zeros(2), "a": np.ones(2)})
        _, arrays = read_state_file(path)
        assert list(arrays) == ["z", "a"]
        assert np.array_equal(arrays["a"], np.ones(2))

    def test_reserved_key_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="reserved"):
            write_state_file(str(tmp_path / "r.bin"), {"arrays": []}, {})

    def test_object_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="dtype"):
            write_state_file(
                str(tmp_path / "d.bin"), {}, {"x": np.array(["a", "b"])}
            )

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "m.bin")
        write_state_file(path, {}, {"x": np.zeros(2)})
        raw = bytearray(open(path, "rb").read())
        raw[:4] = b"NOPE"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            read_state_file(path)

    def test_short_file(self, tmp_path):
        path = str(tmp_path / "s.bin")
        open(path, "wb").write(MAGIC + b"\x01")
        with pytest.raises(ValueError, match="short"):
            read_state_file(path)

    def test_size_mismatch_names_both_counts(self, tmp_path):
        path = str(tmp_path / "t.bin")
        write_state_file(path, {}, {"x": np.zeros(4)})
        raw = open(path, "rb").read()
        open(path, "wb").write(raw + b"\x00" * 8)
        with pytest.raises(ValueError, match="bytes"):
            read_state_file(path)
