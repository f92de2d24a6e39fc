import json

import numpy as np
import pytest
import torch
from torch import nn
from torch.utils.data import TensorDataset

from trajod import load_feature_set, validate_feature_set
from trajod_extractor import ExtractionSpec, extract, pool_raw_feature_set, reduce_node_output


class TinyConvNet(nn.Module):
    def __init__(self, n_classes=3):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 4, 3, padding=1)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(4, 6, 3, padding=1, stride=2)
        self.act2 = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.fc = nn.Linear(6, n_classes)

    def forward(self, x):
        x = self.act1(self.conv1(x))
        x = self.act2(self.conv2(x))
        return self.fc(self.flatten(self.pool(x)))


class TokenNet(nn.Module):
    """Produces a (B, T, D) intermediate, exercising the class-token path."""

    def __init__(self):
        super().__init__()
        self.proj = nn.Linear(8, 5)
        self.head = nn.Linear(5, 2)

    def forward(self, tokens):
        h = self.proj(tokens)
        return self.head(h[:, 0, :])


def conv_dataset(n=20, n_classes=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = torch.randn(n, 3, 16, 16, generator=g)
    labels = torch.arange(n) % n_classes
    return TensorDataset(images, labels)


def conv_spec(tmp_path, name="out.ftx", **kw):
    torch.manual_seed(7)
    model = TinyConvNet()
    defaults = dict(
        model=model,
        nodes=("act1", "act2", "flatten", "fc"),
        data=conv_dataset(),
        out=str(tmp_path / name),
        batch_size=8,
    )
    defaults.update(kw)
    return ExtractionSpec(**defaults)


class TestReduceNodeOutput:
    def test_4d_matches_primary_pooling(self):
        x = torch.randn(2, 3, 4, 5)
        rows, shape = reduce_node_output(x)
        assert shape is None and rows.shape == (2, 3)
        from trajod import global_max_pool

        for i in range(2):
            assert np.array_equal(rows[i].numpy(), global_max_pool(x[i].numpy()))

    def test_4d_raw_keeps_map(self):
        x = torch.randn(2, 3, 4, 5)
        rows, shape = reduce_node_output(x, raw=True)
        assert shape == (3, 4, 5) and rows.shape == (2, 60)

    def test_3d_takes_leading_token(self):
        x = torch.randn(2, 7, 5)
        rows, shape = reduce_node_output(x)
        assert shape is None
        assert torch.equal(rows, x[:, 0, :])

    def test_2d_passthrough(self):
        x = torch.randn(4, 9)
        rows, _ = reduce_node_output(x)
        assert torch.equal(rows, x)

    def test_unreducible_shapes_rejected(self):
        with pytest.raises(ValueError, match="not reducible"):
            reduce_node_output(torch.randn(2, 2, 2, 2, 2))
        with pytest.raises(ValueError, match="not reducible"):
            reduce_node_output(torch.randn(3))


class TestExtract:
    def test_output_passes_primary_validation(self, tmp_path):
        spec = conv_spec(tmp_path)
        manifest = extract(spec)
        fs = load_feature_set(spec.out)
        validate_feature_set(fs)
        assert fs.n_samples == 20
        assert fs.layer_dims == (4, 6, 6, 3)
        assert fs.n_classes == 3
        assert manifest["layer_dims"] == [4, 6, 6, 3]

    def test_sample_order_follows_dataset(self, tmp_path):
        spec = conv_spec(tmp_path)
        extract(spec)
        fs = load_feature_set(spec.out)
        assert fs.labels.tolist() == [i % 3 for i in range(20)]

    def test_deterministic_bytes(self, tmp_path):
        a = conv_spec(tmp_path, name="a.ftx")
        b = conv_spec(tmp_path, name="b.ftx", model=a.model, data=a.data)
        extract(a)
        extract(b)
        assert open(a.out, "rb").read() == open(b.out, "rb").read()

    def test_limit(self, tmp_path):
        spec = conv_spec(tmp_path, limit=5)
        extract(spec)
        assert load_feature_set(spec.out).n_samples == 5

    def test_manifest_checksum_matches_file(self, tmp_path):
        spec = conv_spec(tmp_path)
        manifest = extract(spec)
        import hashlib

        assert manifest["sha256"] == hashlib.sha256(open(spec.out, "rb").read()).hexdigest()
        sidecar = json.loads(open(f"{spec.out}.manifest.json").read())
        assert sidecar == manifest

    def test_unknown_node_rejected(self, tmp_path):
        spec = conv_spec(tmp_path, nodes=("nonexistent", "fc"))
        with pytest.raises(ValueError, match="unknown node"):
            extract(spec)

    def test_label_exceeding_model_classes_rejected(self, tmp_path):
        g = torch.Generator().manual_seed(1)
        data = TensorDataset(torch.randn(8, 3, 16, 16, generator=g), torch.arange(8))
        spec = conv_spec(tmp_path, data=data)
        with pytest.raises(ValueError, match="exceeds"):
            extract(spec)

    def test_class_token_network(self, tmp_path):
        torch.manual_seed(3)
        g = torch.Generator().manual_seed(2)
        data = TensorDataset(torch.randn(10, 6, 8, generator=g), torch.arange(10) % 2)
        spec = ExtractionSpec(
            model=TokenNet(),
            nodes=("proj", "head"),
            data=data,
            out=str(tmp_path / "tok.ftx"),
            batch_size=4,
        )
        extract(spec)
        fs = load_feature_set(spec.out)
        assert fs.layer_dims == (5, 2)


class TestRawRoundTrip:
    def test_pooling_raw_equals_direct_pooled_extraction(self, tmp_path):
        pooled = conv_spec(tmp_path, name="pooled.ftx")
        raw = conv_spec(tmp_path, name="raw.ftx", model=pooled.model, data=pooled.data, raw=True)
        extract(pooled)
        manifest = extract(raw)
        assert manifest["raw"] is True
        assert manifest["raw_shapes"]["act1"] == [4, 16, 16]

        fs_raw = load_feature_set(raw.out)
        assert fs_raw.layer_dims[0] == 4 * 16 * 16
        fs_repooled = pool_raw_feature_set(fs_raw, manifest["raw_shapes"])
        fs_pooled = load_feature_set(pooled.out)
        assert fs_repooled.equals(fs_pooled)
