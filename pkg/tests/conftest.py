import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

FIXTURES = os.path.join(os.path.dirname(__file__), 'fixtures')


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def golden_paths():
    """(text grid, packed file) of the committed 4x4 fixture."""
    return os.path.join(FIXTURES, 'golden_4x4.txt'), os.path.join(FIXTURES, 'golden_4x4.bwta')


@pytest.fixture
def tiny_config():
    from bwta_engine.models import TrainConfig

    return TrainConfig(
        L0=2, stride=1, total_epochs=4, fp_epochs=1, lr_fp=1e-2, lr_weight=2e-3,
        n_samples=120, seq_len=4, d_in=8, dim=8, heads=2, ffn_dim=16,
        batch_size=16, calib_size=32, seed=0,
    )


@pytest.fixture
def make_exported_model():
    """Factory for a small packed model whose scales were set by one torch pass."""
    import torch

    from bwta_engine import qat

    def make(stage_L=1, seed=0):
        torch.manual_seed(seed)
        model = qat.ToyClassifier(d_in=8, d_model=8, heads=2, ffn_dim=16, n_classes=2)
        qat.set_level(model, stage_L)
        model.eval()
        with torch.no_grad():
            model(torch.randn(4, 4, 8))
        return qat.export_model(model, stage_L=stage_L)

    return make
