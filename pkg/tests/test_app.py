"""
Unit tests for the inference service and its metrics collector.
"""

import os
import tempfile

import numpy as np
import pytest

from app import create_app
from bwta_engine.checkpoint import load_checkpoint, save_checkpoint
from metrics import MetricsCollector


class TestInferenceService:
    @pytest.fixture(autouse=True)
    def _service(self, make_exported_model):
        self.tmp = tempfile.TemporaryDirectory()
        self.ckpt = os.path.join(self.tmp.name, 'ckpt')
        save_checkpoint(make_exported_model(), self.ckpt)
        self.app = create_app(self.ckpt)
        self.client = self.app.test_client()
        self.inputs = np.random.default_rng(0).standard_normal((2, 4, 8)).astype(np.float32)

    def teardown_method(self):
        self.tmp.cleanup()

    def test_index(self):
        """The index reports the loaded checkpoint."""
        response = self.client.get('/')
        assert response.status_code == 200
        assert response.get_json()['model_loaded'] is True
        assert response.get_json()['checkpoint'] == self.ckpt

    def test_infer(self):
        """/infer returns the packed model's logits and predictions."""
        response = self.client.post('/infer', json={'inputs': self.inputs.tolist()})
        assert response.status_code == 200
        body = response.get_json()
        expected = load_checkpoint(self.ckpt).forward_batch(self.inputs)
        assert np.allclose(body['logits'], expected)
        assert body['predictions'] == expected.argmax(axis=1).tolist()
        assert body['stage_L'] == 1
        assert body['quantized'] is True

    def test_infer_full_precision(self):
        """quantized=false runs the dense path."""
        response = self.client.post('/infer', json={'inputs': self.inputs.tolist(), 'quantized': False})
        assert response.status_code == 200
        assert response.get_json()['quantized'] is False

    def test_infer_validation(self):
        """Missing, non-numeric or mis-shaped inputs are 400s and counted."""
        for payload in ({}, {'inputs': 'abc'}, {'inputs': [[1.0, 2.0]]}, {'inputs': np.zeros((1, 2, 5)).tolist()}):
            response = self.client.post('/infer', json=payload)
            assert response.status_code == 400, payload
            assert 'error' in response.get_json()
        metrics = self.app.extensions['bwta_metrics'].get_metrics()
        assert metrics['errors']['validation_errors'] == 4

    def test_metrics_count_tokens(self):
        """Successful calls add sequences and tokens."""
        self.client.post('/infer', json={'inputs': self.inputs.tolist()})
        body = self.client.get('/metrics').get_json()
        assert body['total_inferences'] == 1
        assert body['sequences_processed'] == 2
        assert body['tokens_processed'] == 8
        assert body['checkpoint_reloads'] == 1

    def test_reload(self):
        """Reloading a valid directory succeeds; a missing one is a 400 that keeps the old model."""
        assert self.client.post('/reload_checkpoint').status_code == 200
        response = self.client.post('/reload_checkpoint', json={'checkpoint_dir': os.path.join(self.tmp.name, 'none')})
        assert response.status_code == 400
        assert self.client.post('/infer', json={'inputs': self.inputs.tolist()}).status_code == 200
        assert self.app.extensions['bwta_metrics'].get_metrics()['errors']['checkpoint_errors'] == 1

    def test_no_model(self):
        """Without a checkpoint /infer answers 503."""
        app = create_app(os.path.join(self.tmp.name, 'missing'))
        client = app.test_client()
        assert client.get('/').get_json()['model_loaded'] is False
        assert client.post('/infer', json={'inputs': self.inputs.tolist()}).status_code == 503


class TestMetricsCollector:
    def setup_method(self):
        self.metrics = MetricsCollector()

    def test_latency_buckets(self):
        """Latencies land in their buckets."""
        for latency in (5, 20, 75, 200, 900):
            self.metrics.record_inference(latency, sequences=1, tokens=4)
        data = self.metrics.get_metrics()
        assert list(data['latency_distribution'].values()) == [1, 1, 1, 1, 1]
        assert data['average_latency_ms'] == pytest.approx(240.0)
        assert data['tokens_processed'] == 20

    def test_tokens_per_second(self):
        """Throughput is tokens over busy time."""
        self.metrics.record_inference(500.0, sequences=2, tokens=100)
        assert self.metrics.get_metrics()['tokens_per_second'] == pytest.approx(200.0)

    def test_reset(self):
        """reset_metrics zeroes every counter."""
        self.metrics.record_inference(1.0, sequences=1, tokens=1)
        self.metrics.record_validation_error()
        self.metrics.reset_metrics()
        data = self.metrics.get_metrics()
        assert data['total_inferences'] == 0
        assert data['errors']['validation_errors'] == 0
        assert sum(data['latency_distribution'].values()) == 0
