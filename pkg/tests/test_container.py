import numpy as np
import pytest

from picocodec import container
from picocodec.model import ModelConfig, build_model, tiny_config


class TestContainer:
    def test_roundtrip_dtypes_and_meta(self):
        rng = np.random.default_rng(0)
        tensors = {
            "a.f4": rng.standard_normal((2, 3)).astype(np.float32),
            "b.f8": rng.standard_normal(4),
            "c.u1": rng.integers(0, 256, (3, 1, 2), dtype=np.uint8),
            "d.i8": rng.integers(-2 ** 40, 2 ** 40, 5),
            "e.scalar": np.float32(1.5),
            "f.empty": np.zeros((0, 3), np.int32),
        }
        data = container.dumps(tensors, {"role": "scale_decoder", "x": "a=b c"})
        out, meta = container.loads(data)
        assert meta == {"role": "scale_decoder", "x": "a=b c"}
        assert out.keys() == tensors.keys()
        for k, v in tensors.items():
            assert out[k].dtype == np.asarray(v).dtype
            np.testing.assert_array_equal(out[k], v)

    def test_deterministic_and_order_independent(self):
        a = {"x": np.ones(3, np.float32), "y": np.zeros(2, np.int32)}
        b = {"y": np.zeros(2, np.int32), "x": np.ones(3, np.float32)}
        assert container.dumps(a, {"k": "v"}) == container.dumps(b, {"k": "v"})

    def test_manifest_is_text(self):
        data = container.dumps({"w": np.arange(4, dtype=np.int16).reshape(2, 2)})
        head = data.split(b"\nend\n")[0].decode("utf-8")
        assert head.splitlines() == ["PICO-CONTAINER 1", "tensor w <i2 2,2 0 8"]
        assert data.endswith(np.arange(4, dtype="<i2").tobytes())

    def test_model_weights_roundtrip(self):
        m = build_model(tiny_config("scale_decoder"), 3)
        data = container.dumps(m.weights, m.config.to_kv())
        w, meta = container.loads(data)
        assert ModelConfig.from_kv(meta) == m.config
        assert all(w[k].tobytes() == m.weights[k].tobytes() for k in m.weights)

    def test_errors(self):
        with pytest.raises(container.ContainerError):
            container.loads(b"garbage")
        data = container.dumps({"w": np.zeros(10)})
        with pytest.raises(container.ContainerError):
            container.loads(data[:-8])
        with pytest.raises(container.ContainerError):
            container.dumps({"bad name": np.zeros(1)})
        with pytest.raises(container.ContainerError):
            container.dumps({"w": np.zeros(1, np.complex64)})
        with pytest.raises(container.ContainerError):
            container.dumps({}, {"k": "two\nlines"})

    def test_save_load(self, tmp_path):
        p = tmp_path / "w.bin"
        container.save(p, {"w": np.arange(3.0)}, {"a": "1"})
        w, meta = container.load(p)
        np.testing.assert_array_equal(w["w"], [0, 1, 2])
        assert container.digest(p.read_bytes()) == container.digest(container.dumps({"w": np.arange(3.0)}, {"a": "1"}))
