import sys
from pathlib import Path

import numpy as np
import pytest

from actionsense.synthetic import decoder_command, probe_command


def build_onnx_backbone(path, channels, layout="nhwc", declared_out=None):
    """Tiny ONNX model: 32x32 average pooling to a 7x7 grid then a 1x1 conv to ``channels``.

    With ``channels == 3`` and identity conv weights it computes exactly what the
    stub backbone computes.
    """
    onnx = pytest.importorskip("onnx")
    from onnx import TensorProto, helper, numpy_helper

    nodes = []
    if layout == "nhwc":
        x = helper.make_tensor_value_info("x", TensorProto.FLOAT, [1, 224, 224, 3])
        nodes.append(helper.make_node("Transpose", ["x"], ["x_nchw"], perm=[0, 3, 1, 2]))
        src = "x_nchw"
    else:
        x = helper.make_tensor_value_info("x", TensorProto.FLOAT, [1, 3, 224, 224])
        src = "x"
    nodes.append(helper.make_node("AveragePool", [src], ["pooled"], kernel_shape=[32, 32], strides=[32, 32]))
    w = np.zeros((channels, 3, 1, 1), dtype=np.float32)
    for c in range(channels):
        w[c, c % 3, 0, 0] = 1.0 + (c // 3)
    weight = numpy_helper.from_array(w, name="w")
    conv_out = "y" if layout == "nchw" else "conv"
    nodes.append(helper.make_node("Conv", ["pooled", "w"], [conv_out]))
    if layout == "nhwc":
        nodes.append(helper.make_node("Transpose", ["conv"], ["y"], perm=[0, 2, 3, 1]))
        out_shape = [1, 7, 7, channels]
    else:
        out_shape = [1, channels, 7, 7]
    y = helper.make_tensor_value_info("y", TensorProto.FLOAT, out_shape)
    graph = helper.make_graph(nodes, "tiny_backbone", [x], [y], initializer=[weight])
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    onnx.checker.check_model(model)
    onnx.save(model, str(path))
    return Path(path)


@pytest.fixture
def onnx_model_factory(tmp_path):
    def make(channels, layout="nhwc", name=None):
        return build_onnx_backbone(tmp_path / (name or f"bb_{channels}_{layout}.onnx"), channels, layout)

    return make


@pytest.fixture
def synth_decoder_env(monkeypatch):
    monkeypatch.setenv("ACTIONSENSE_DECODER", decoder_command(sys.executable))
    monkeypatch.setenv("ACTIONSENSE_PROBE", probe_command(sys.executable))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
