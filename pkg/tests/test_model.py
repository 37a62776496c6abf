import numpy as np
import pytest

from rvmix.model import (
    INPUT_PARAMS,
    FloatLayer,
    FloatModel,
    float_accuracy,
    float_forward,
    quantize_bias,
    quantize_model,
)
from rvmix.qnn import predict


def tiny_model(rng, with_extras=True):
    layers = [
        FloatLayer("conv2d", rng.normal(0, 0.3, (4, 3, 3, 1)), rng.normal(0, 0.1, 4), 1, 1, 3, True, name="c1"),
    ]
    if with_extras:
        layers += [
            FloatLayer("depthwise", rng.normal(0, 0.3, (4, 3, 3)), rng.normal(0, 0.1, 4), 1, 1, 3, True),
            FloatLayer("add", relu=True, skip=0),
            FloatLayer("maxpool", stride=2, kernel=2),
            FloatLayer("avgpool", stride=1, kernel=2),
        ]
        flat = 3 * 3 * 4
    else:
        flat = 8 * 8 * 4
    layers.append(FloatLayer("dense", rng.normal(0, 0.2, (5, flat)), rng.normal(0, 0.1, 5), name="out"))
    return FloatModel(layers, (8, 8, 1))


class TestFloatModel:
    def test_weight_layers(self):
        m = tiny_model(np.random.default_rng(0))
        assert m.weight_layers == [0, 1, 5]

    def test_forward_shapes(self):
        m = tiny_model(np.random.default_rng(0))
        outs = float_forward(m.layers, np.zeros((2, 8, 8, 1)))
        assert [o.shape for o in outs] == [(2, 8, 8, 4), (2, 8, 8, 4), (2, 8, 8, 4), (2, 4, 4, 4),
                                          (2, 3, 3, 4), (2, 5)]

    def test_calibrate_ranges(self):
        m = tiny_model(np.random.default_rng(1))
        ranges = m.calibrate(np.random.default_rng(2).integers(0, 256, (10, 8, 8, 1)))
        assert len(ranges) == len(m.layers)
        assert ranges[0][0] >= 0.0  # ReLU output
        assert all(lo <= hi for lo, hi in ranges)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            float_forward([FloatLayer("softmax")], np.zeros((1, 2, 2, 1)))


class TestQuantizeModel:
    def test_requires_calibration(self):
        m = tiny_model(np.random.default_rng(3))
        with pytest.raises(ValueError, match="calibrated"):
            quantize_model(m, [8, 8, 8])

    def test_config_length(self):
        m = tiny_model(np.random.default_rng(3))
        with pytest.raises(ValueError, match="entries"):
            quantize_model(m, [8, 8], np.zeros((1, 8, 8, 1)))

    def test_bits_applied(self):
        m = tiny_model(np.random.default_rng(4))
        q = quantize_model(m, [8, 4, 2], np.random.default_rng(5).integers(0, 256, (8, 8, 8, 1)))
        assert [l.weight_bits for l in q.layers] == [8, 4, None, None, None, 2]
        assert q.layers[0].out_params.zero_point == 0  # ReLU range starts at 0
        assert q.layers[3].out_params == q.layers[2].out_params  # maxpool keeps params
        assert q.input_params == INPUT_PARAMS

    def test_eight_bit_tracks_float(self):
        rng = np.random.default_rng(6)
        m = tiny_model(rng, with_extras=False)
        images = rng.integers(0, 256, (200, 8, 8, 1))
        q = quantize_model(m, [8, 8], images)
        logits = m.forward(images / 255.0)[-1]
        qout = q.forward(images)
        deq = qout.dequantize()
        # per-logit error is a few output steps at most
        assert np.max(np.abs(deq - logits)) <= 4 * qout.params.scale
        agree = np.mean(predict(q, images) == np.argmax(logits, axis=1))
        assert agree >= 0.9

    def test_bias_quantization(self):
        assert quantize_bias(np.array([0.5, -0.25, 1e12]), 0.5, 0.5).tolist() == [2, -1, 2**31 - 1]


class TestFixtureModel:
    def test_float_accuracy_recorded(self, mnist_model, mnist_eval):
        got = float_accuracy(mnist_model, mnist_eval.images, mnist_eval.labels)
        assert got == pytest.approx(mnist_model.float_accuracy, abs=1e-9)
        assert got > 0.9

    def test_shape(self, mnist_model):
        assert mnist_model.input_shape == (28, 28, 1)
        assert len(mnist_model.weight_layers) == 5
