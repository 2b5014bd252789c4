"""
Unit tests for the training config loader and the checkpoint manifest loader.
"""

import os
import tempfile

import pytest

from bwta_engine.errors import ConfigError
from bwta_engine.loader import CheckpointLoader, TrainConfigLoader, parse_key_values
from bwta_engine.models import ScheduleKind, Strategy

DEMO_CONFIG = os.path.join(os.path.dirname(__file__), '..', 'configs', 'train_demo.cfg')


class TestParseKeyValues:
    def test_comments_and_blanks(self):
        """Comments and blank lines are skipped; line numbers are kept."""
        text = "# header\n\nL0 = 3  # inline\nseed=1\n"
        assert list(parse_key_values(text)) == [(3, 'L0', '3'), (4, 'seed', '1')]

    def test_missing_equals(self):
        """A line without '=' reports its number."""
        with pytest.raises(ConfigError) as exc_info:
            list(parse_key_values("L0=3\nstride 2\n"))
        assert exc_info.value.line_number == 2
        assert 'line 2' in str(exc_info.value)


class TestTrainConfigLoader:
    def setup_method(self):
        self.loader = TrainConfigLoader('unused.cfg')

    def test_demo_config(self):
        """The committed demo config loads with its values."""
        config = TrainConfigLoader(DEMO_CONFIG).load()
        assert config.L0 == 4
        assert config.total_epochs == 30
        assert config.strategy is Strategy.OURS
        assert config.schedule is ScheduleKind.LEVELWISE
        assert config.fp_epochs == 5
        assert config.dim % config.heads == 0

    def test_typed_values(self):
        """Lists, booleans and enums are parsed."""
        config = self.loader.loads("stages=3, 2, 1\ngrad_scale=off\nstrategy=search-off\nmetrics_csv=\n")
        assert config.stages == (3, 2, 1)
        assert config.grad_scale is False
        assert config.strategy is Strategy.SEARCH_OFF
        assert config.metrics_csv is None

    def test_unknown_key(self):
        """Unknown keys carry the line number and the key."""
        with pytest.raises(ConfigError) as exc_info:
            self.loader.loads("L0=2\nlearning_rate=0.1\n")
        assert exc_info.value.line_number == 2
        assert exc_info.value.key == 'learning_rate'

    def test_duplicate_key(self):
        """A repeated key names the line that set it first."""
        with pytest.raises(ConfigError) as exc_info:
            self.loader.loads("seed=1\nL0=2\nseed=2\n")
        assert exc_info.value.line_number == 3
        assert 'line 1' in str(exc_info.value)

    def test_bad_values(self):
        """Out-of-range and unparseable values are rejected."""
        for text in ("L0=0", "L0=two", "lr_scale=0", "weight_decay=-1", "strategy=best", "grad_scale=maybe", "n_classes=1"):
            with pytest.raises(ConfigError) as exc_info:
                self.loader.loads(text)
            assert exc_info.value.line_number == 1, text

    def test_heads_must_divide_dim(self):
        """dim % heads is checked after parsing."""
        with pytest.raises(ConfigError) as exc_info:
            self.loader.loads("dim=10\nheads=3\n")
        assert exc_info.value.key == 'heads'
        assert exc_info.value.line_number == 2

    def test_missing_file(self):
        """A missing config file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            TrainConfigLoader('missing.cfg').load()

    def test_config_info(self):
        """get_config_info reports existence and size."""
        assert TrainConfigLoader('missing.cfg').get_config_info() == {'exists': False}
        info = TrainConfigLoader(DEMO_CONFIG).get_config_info()
        assert info['exists'] and info['readable']
        assert info['size_bytes'] > 0

    def test_known_keys(self):
        """Every TrainConfig field is a known key."""
        from dataclasses import fields

        from bwta_engine.models import TrainConfig

        assert set(TrainConfigLoader.known_keys()) == {f.name for f in fields(TrainConfig)}


def _manifest(**overrides):
    values = {
        'format_version': '1', 'd_in': '8', 'dim': '8', 'heads': '2', 'ffn_dim': '16',
        'n_classes': '2', 'stage_L': '1', 'eps': '1e-05',
    }
    for name in CheckpointLoader.LINEARS + CheckpointLoader.ATTENTION_SCALES:
        values[f'scale.{name}'] = '0.5'
    values.update(overrides)
    return "\n".join(f"{k}={v}" for k, v in values.items() if v is not None) + "\n"


class TestCheckpointLoader:
    def _load(self, text):
        with tempfile.TemporaryDirectory() as tmp:
            with open(os.path.join(tmp, CheckpointLoader.MANIFEST), 'w') as f:
                f.write(text)
            return CheckpointLoader(tmp).load_manifest()

    def test_valid_manifest(self):
        """Integers and floats are typed; optional keys are accepted."""
        manifest = self._load(_manifest(**{'mu.ffn1': '0.01', 'sw.ffn1': '0.3'}))
        assert manifest['dim'] == 8
        assert manifest['scale.att'] == 0.5
        assert manifest['mu.ffn1'] == pytest.approx(0.01)

    def test_missing_keys(self):
        """Required keys are listed when absent."""
        with pytest.raises(ConfigError) as exc_info:
            self._load(_manifest(**{'scale.q': None}))
        assert 'scale.q' in str(exc_info.value)

    def test_non_positive_scale(self):
        """Scales must be positive."""
        with pytest.raises(ConfigError) as exc_info:
            self._load(_manifest(**{'scale.v': '0'}))
        assert exc_info.value.key == 'scale.v'

    def test_bad_format_version(self):
        """Only format version 1 is read."""
        with pytest.raises(ConfigError):
            self._load(_manifest(format_version='2'))

    def test_bad_integer(self):
        """Integer keys must parse."""
        with pytest.raises(ConfigError) as exc_info:
            self._load(_manifest(dim='eight'))
        assert exc_info.value.line_number == 3

    def test_unknown_key_ignored(self):
        """Unknown keys are logged and skipped."""
        assert 'note' not in self._load(_manifest(note='hello'))

    def test_missing_manifest(self):
        """A directory without a manifest is not a checkpoint."""
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(FileNotFoundError):
                CheckpointLoader(tmp).load_manifest()
